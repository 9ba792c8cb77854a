//! Segmentation trunk: residual encoder with a pyramid pooling head.
//!
//! The encoder downsamples by 2 per stage and doubles channel width. The
//! deepest feature map passes through multi-bin average pooling branches
//! that are squeezed, resized back, and concatenated, then fused by one 3x3
//! conv. The fused map is bilinearly upsampled to input resolution for the
//! dense prediction head; every stage output plus the fused map is exposed
//! as a pyramid tap for the recalibration module.

use crate::autodiff::{Tape, TensorId};
use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv2d, EncoderTrunk, Norm, ParamStore, Subnet};
use ndarray::Array4;

/// Multi-scale feature taps, ordered shallow to deep; the last tap is the
/// pyramid-fused map at the deepest resolution.
pub struct FeaturePyramid {
    pub taps: Vec<Array4<f64>>,
}

#[derive(Debug)]
pub struct BackboneGraphOut {
    pub seg_features: TensorId,
    pub taps: Vec<TensorId>,
}

pub struct Backbone {
    trunk: EncoderTrunk,
    psp_branches: Vec<(Conv2d, Norm)>,
    fuse_conv: Conv2d,
    fuse_norm: Norm,
    cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Self {
        let subnet = Subnet::Backbone;
        let trunk = EncoderTrunk::new(store, subnet, "backbone", 1, cfg.base_channels, cfg.stages);
        let deep = EncoderTrunk::stage_channels(cfg.base_channels, cfg.stages - 1);
        let reduction = (deep / cfg.pyramid_bins.len()).max(1);
        let psp_branches = cfg
            .pyramid_bins
            .iter()
            .map(|&bin| {
                (
                    Conv2d::new(
                        store,
                        subnet,
                        &format!("backbone.psp{bin}"),
                        deep,
                        reduction,
                        1,
                        1,
                        0,
                        false,
                    ),
                    Norm::new(store, subnet, &format!("backbone.psp{bin}n"), reduction),
                )
            })
            .collect();
        let fused_in = deep + reduction * cfg.pyramid_bins.len();
        let fuse_conv = Conv2d::new(
            store,
            subnet,
            "backbone.fuse",
            fused_in,
            cfg.feature_dim,
            3,
            1,
            1,
            false,
        );
        let fuse_norm = Norm::new(store, subnet, "backbone.fusen", cfg.feature_dim);
        Backbone {
            trunk,
            psp_branches,
            fuse_conv,
            fuse_norm,
            cfg: cfg.clone(),
        }
    }

    /// Channel counts of the pyramid taps (stages then fused map).
    pub fn tap_channels(cfg: &BackboneConfig) -> Vec<usize> {
        let mut chans: Vec<usize> = (0..cfg.stages)
            .map(|s| EncoderTrunk::stage_channels(cfg.base_channels, s))
            .collect();
        chans.push(cfg.feature_dim);
        chans
    }

    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<BackboneGraphOut> {
        let shape = tape.shape(x).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let stride = self.cfg.stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Data(format!(
                "input size {h}x{w} must be divisible by {stride}"
            )));
        }
        let (eh, ew) = (h / stride, w / stride);
        if let Some(&bad) = self.cfg.pyramid_bins.iter().find(|&&b| b > eh || b > ew) {
            return Err(Error::Config(format!(
                "pyramid bin {bad} exceeds encoder output size {eh}x{ew}"
            )));
        }

        let mut taps = self.trunk.forward(tape, binder, store, x);
        let deep = *taps.last().expect("trunk has at least one stage");

        let mut cat = vec![deep];
        for (&bin, (conv, norm)) in self.cfg.pyramid_bins.iter().zip(&self.psp_branches) {
            let pooled = tape.avg_pool_bins(deep, bin, bin);
            let mut b = conv.forward(tape, binder, store, pooled);
            b = norm.forward(tape, binder, store, b);
            b = tape.relu(b);
            let up = tape.upsample_bilinear(b, eh, ew);
            cat.push(up);
        }
        let stacked = tape.concat_ch(&cat);
        let mut fused = self.fuse_conv.forward(tape, binder, store, stacked);
        fused = self.fuse_norm.forward(tape, binder, store, fused);
        fused = tape.relu(fused);
        taps.push(fused);

        let seg_features = tape.upsample_bilinear(fused, h, w);
        Ok(BackboneGraphOut { seg_features, taps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SubnetMask;
    use crate::rng::{standard_normal, stream, Purpose};
    use ndarray::IxDyn;

    fn run(
        store: &ParamStore,
        bb: &Backbone,
        x: ndarray::ArrayD<f64>,
    ) -> (ndarray::ArrayD<f64>, Vec<Vec<usize>>, ndarray::ArrayD<f64>) {
        let mut tape = Tape::new(false);
        let mut binder = Binder::new(store, SubnetMask::none());
        let xid = tape.leaf(x);
        let out = bb.forward_graph(&mut tape, &mut binder, store, xid).unwrap();
        let shapes = out.taps.iter().map(|&t| tape.shape(t).to_vec()).collect();
        let fused = tape.value(*out.taps.last().unwrap()).clone();
        (tape.value(out.seg_features).clone(), shapes, fused)
    }

    #[test]
    fn default_shapes_are_as_planned() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new(1);
        let bb = Backbone::new(&mut store, &cfg);
        let x = ndarray::ArrayD::zeros(IxDyn(&[1, 1, 64, 64]));
        let (seg, tap_shapes, _) = run(&store, &bb, x);
        assert_eq!(seg.shape(), &[1, 64, 64, 64]);
        assert_eq!(
            tap_shapes,
            vec![
                vec![1, 16, 32, 32],
                vec![1, 32, 16, 16],
                vec![1, 64, 8, 8],
                vec![1, 64, 8, 8],
            ]
        );
    }

    #[test]
    fn zero_params_zero_input_zero_output() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new(2);
        let bb = Backbone::new(&mut store, &cfg);
        store.zero_all();
        let x = ndarray::ArrayD::zeros(IxDyn(&[1, 1, 64, 64]));
        let (seg, _, fused) = run(&store, &bb, x);
        assert!(seg.iter().all(|&v| v == 0.0));
        assert!(fused.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_duplication_duplicates_outputs() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new(3);
        let bb = Backbone::new(&mut store, &cfg);
        let mut rng = stream(50, Purpose::ParamInit, 0);
        let single = standard_normal(IxDyn(&[1, 1, 16, 16]), &mut rng);
        let mut doubled = ndarray::ArrayD::zeros(IxDyn(&[2, 1, 16, 16]));
        for bi in 0..2 {
            doubled
                .index_axis_mut(ndarray::Axis(0), bi)
                .assign(&single.index_axis(ndarray::Axis(0), 0));
        }
        // bins above the 2x2 encoder output are invalid at 16x16; shrink them
        let cfg_small = BackboneConfig {
            pyramid_bins: vec![1, 2],
            ..cfg
        };
        let mut store_small = ParamStore::new(3);
        let bb_small = Backbone::new(&mut store_small, &cfg_small);
        let _ = bb;
        let (seg1, _, _) = run(&store_small, &bb_small, single.clone());
        let (seg2, _, _) = run(&store_small, &bb_small, doubled);
        let a = seg2.index_axis(ndarray::Axis(0), 0);
        let b = seg2.index_axis(ndarray::Axis(0), 1);
        // duplicated rows stay identical to each other
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // and match the single-image pass (norm stats shift only if rows differ)
        for (x, y) in seg1.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn indivisible_size_is_rejected_naming_divisor() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new(4);
        let bb = Backbone::new(&mut store, &cfg);
        let mut tape = Tape::new(false);
        let mut binder = Binder::new(&store, SubnetMask::none());
        let x = tape.leaf(ndarray::ArrayD::zeros(IxDyn(&[1, 1, 20, 20])));
        let err = bb
            .forward_graph(&mut tape, &mut binder, &store, x)
            .unwrap_err();
        assert!(err.to_string().contains('8'), "{err}");
    }

    #[test]
    fn oversized_bins_are_rejected() {
        let cfg = BackboneConfig::default(); // bin 6 > 2x2 encoder output at 16x16
        let mut store = ParamStore::new(5);
        let bb = Backbone::new(&mut store, &cfg);
        let mut tape = Tape::new(false);
        let mut binder = Binder::new(&store, SubnetMask::none());
        let x = tape.leaf(ndarray::ArrayD::zeros(IxDyn(&[1, 1, 16, 16])));
        assert!(bb.forward_graph(&mut tape, &mut binder, &store, x).is_err());
    }
}
