//! Feature recalibration and the patch discriminator.
//!
//! Every pyramid tap is projected to a common shape, then gated twice: a
//! channel gate (global pool, two-layer bottleneck, sigmoid) and a spatial
//! gate (1x1 conv, sigmoid). The two gated maps combine by elementwise
//! maximum and the taps are summed. The discriminator is a stack of
//! stride-2 convolutions emitting a grid of patch-level scores in (0, 1).

use crate::autodiff::{Tape, TensorId};
use crate::config::{BackboneConfig, DiscConfig, RecalibConfig};
use crate::nn::{Binder, Conv2d, Linear, Norm, ParamStore, Subnet};

struct TapBranch {
    project: Conv2d,
    ca_squeeze: Linear,
    ca_expand: Linear,
    sa_conv: Conv2d,
}

pub struct Recalibrator {
    branches: Vec<TapBranch>,
    cfg: RecalibConfig,
}

impl Recalibrator {
    pub fn new(store: &mut ParamStore, cfg: &RecalibConfig, backbone: &BackboneConfig) -> Self {
        let subnet = Subnet::Frm;
        let tap_channels = crate::backbone::Backbone::tap_channels(backbone);
        let common = cfg.common_channels;
        let squeeze = (common / cfg.squeeze_ratio).max(1);
        let branches = tap_channels
            .iter()
            .enumerate()
            .map(|(i, &cin)| TapBranch {
                project: Conv2d::new(
                    store,
                    subnet,
                    &format!("frm.t{i}.proj"),
                    cin,
                    common,
                    1,
                    1,
                    0,
                    true,
                ),
                ca_squeeze: Linear::new(store, subnet, &format!("frm.t{i}.ca1"), common, squeeze),
                ca_expand: Linear::new(store, subnet, &format!("frm.t{i}.ca2"), squeeze, common),
                sa_conv: Conv2d::new(
                    store,
                    subnet,
                    &format!("frm.t{i}.sa"),
                    common,
                    1,
                    1,
                    1,
                    0,
                    true,
                ),
            })
            .collect();
        Recalibrator {
            branches,
            cfg: cfg.clone(),
        }
    }

    /// Common spatial size for an input image of `h x w`.
    pub fn common_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.cfg.spatial_divisor, w / self.cfg.spatial_divisor)
    }

    fn project_tap(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        branch: &TapBranch,
        tap: TensorId,
        out_hw: (usize, usize),
    ) -> TensorId {
        let projected = branch.project.forward(tape, binder, store, tap);
        let shape = tape.shape(projected).to_vec();
        if shape[2] == out_hw.0 && shape[3] == out_hw.1 {
            projected
        } else {
            tape.upsample_bilinear(projected, out_hw.0, out_hw.1)
        }
    }

    fn recalibrate(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        branch: &TapBranch,
        feat: TensorId,
    ) -> TensorId {
        // channel gate: GAP -> squeeze -> relu -> expand -> sigmoid
        let pooled = tape.gap(feat);
        let mut ca = branch.ca_squeeze.forward(tape, binder, store, pooled);
        ca = tape.relu(ca);
        ca = branch.ca_expand.forward(tape, binder, store, ca);
        let ca_gate = tape.sigmoid(ca);
        let channel_gated = tape.channel_gate(feat, ca_gate);
        // spatial gate: 1x1 conv -> sigmoid
        let sa = branch.sa_conv.forward(tape, binder, store, feat);
        let sa_gate = tape.sigmoid(sa);
        let spatial_gated = tape.spatial_gate(feat, sa_gate);
        tape.max_elem(channel_gated, spatial_gated)
    }

    /// Full recalibration: project, gate, and sum every tap.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        taps: &[TensorId],
        image_hw: (usize, usize),
    ) -> TensorId {
        assert_eq!(
            taps.len(),
            self.branches.len(),
            "recalibrator built for {} taps, got {}",
            self.branches.len(),
            taps.len()
        );
        let out_hw = self.common_size(image_hw.0, image_hw.1);
        let gated: Vec<TensorId> = taps
            .iter()
            .zip(&self.branches)
            .map(|(&tap, branch)| {
                let feat = self.project_tap(tape, binder, store, branch, tap, out_hw);
                self.recalibrate(tape, binder, store, branch, feat)
            })
            .collect();
        tape.add_n(&gated)
    }

    /// Ablated path: plain projection of the deepest tap, no attention, no
    /// multi-scale fusion. Keeps the discriminator input shape identical.
    pub fn forward_plain_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        taps: &[TensorId],
        image_hw: (usize, usize),
    ) -> TensorId {
        let out_hw = self.common_size(image_hw.0, image_hw.1);
        let branch = self.branches.last().expect("at least one tap");
        let tap = *taps.last().expect("at least one tap");
        self.project_tap(tape, binder, store, branch, tap, out_hw)
    }
}

pub struct PatchDisc {
    blocks: Vec<(Conv2d, Option<Norm>)>,
    head: Conv2d,
}

impl PatchDisc {
    pub fn new(store: &mut ParamStore, cfg: &DiscConfig, in_channels: usize) -> Self {
        let subnet = Subnet::Discriminator;
        let mut blocks = Vec::with_capacity(cfg.layers);
        let mut cin = in_channels;
        for i in 0..cfg.layers {
            let cout = cfg.base_width << i;
            let conv = Conv2d::new(
                store,
                subnet,
                &format!("disc.c{i}"),
                cin,
                cout,
                4,
                2,
                1,
                true,
            );
            // first block runs without normalization
            let norm = (i > 0).then(|| Norm::new(store, subnet, &format!("disc.n{i}"), cout));
            blocks.push((conv, norm));
            cin = cout;
        }
        let head = Conv2d::new(store, subnet, "disc.head", cin, 1, 1, 1, 0, true);
        PatchDisc { blocks, head }
    }

    /// Patch scores in (0, 1): `[B, 1, h / 2^layers, w / 2^layers]`.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        feat: TensorId,
    ) -> TensorId {
        let mut h = feat;
        for (conv, norm) in &self.blocks {
            h = conv.forward(tape, binder, store, h);
            if let Some(n) = norm {
                h = n.forward(tape, binder, store, h);
            }
            h = tape.leaky_relu(h, 0.2);
        }
        let logits = self.head.forward(tape, binder, store, h);
        tape.sigmoid(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::model::Model;
    use crate::nn::SubnetMask;
    use crate::rng::{standard_normal, stream, Purpose};
    use ndarray::IxDyn;

    fn tap_arrays(seed: u64, zero: bool) -> Vec<ndarray::ArrayD<f64>> {
        let mut rng = stream(seed, Purpose::ParamInit, 0);
        let shapes = [
            vec![1usize, 16, 32, 32],
            vec![1, 32, 16, 16],
            vec![1, 64, 8, 8],
            vec![1, 64, 8, 8],
        ];
        shapes
            .iter()
            .map(|s| {
                if zero {
                    ndarray::ArrayD::zeros(IxDyn(s))
                } else {
                    standard_normal(IxDyn(s), &mut rng)
                }
            })
            .collect()
    }

    fn frm_output(model: &Model, taps: Vec<ndarray::ArrayD<f64>>) -> ndarray::ArrayD<f64> {
        let mut tape = Tape::new(false);
        let mut binder = Binder::new(&model.store, SubnetMask::none());
        let ids: Vec<_> = taps.into_iter().map(|t| tape.leaf(t)).collect();
        let out = model
            .frm
            .forward_graph(&mut tape, &mut binder, &model.store, &ids, (64, 64));
        tape.value(out).clone()
    }

    #[test]
    fn zero_pyramid_stays_zero() {
        // multiplicative gating of zero, with zero projection bias
        let cfg = TrainConfig::default();
        let mut model = Model::new(&cfg).unwrap();
        for p in model.store.ids().collect::<Vec<_>>() {
            if model.store.name(p).contains(".proj.b")
                || model.store.name(p).contains(".sa.b")
                || model.store.name(p).contains(".ca")
            {
                model.store.value_mut(p).fill(0.0);
            }
        }
        let out = frm_output(&model, tap_arrays(1, true));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_is_common_shape() {
        let cfg = TrainConfig::default();
        let model = Model::new(&cfg).unwrap();
        let out = frm_output(&model, tap_arrays(2, false));
        assert_eq!(out.shape(), &[1, 32, 16, 16]);
    }

    #[test]
    fn gates_live_in_unit_interval() {
        let cfg = TrainConfig::default();
        let model = Model::new(&cfg).unwrap();
        // probe the gates directly: sigmoid output of the attention heads
        let mut tape = Tape::new(false);
        let mut binder = Binder::new(&model.store, SubnetMask::none());
        let taps: Vec<_> = tap_arrays(3, false).into_iter().map(|t| tape.leaf(t)).collect();
        let branch = &model.frm.branches[0];
        let feat = model
            .frm
            .project_tap(&mut tape, &mut binder, &model.store, branch, taps[0], (16, 16));
        let pooled = tape.gap(feat);
        let mut ca = branch.ca_squeeze.forward(&mut tape, &mut binder, &model.store, pooled);
        ca = tape.relu(ca);
        ca = branch.ca_expand.forward(&mut tape, &mut binder, &model.store, ca);
        let ca_gate = tape.sigmoid(ca);
        let sa = branch.sa_conv.forward(&mut tape, &mut binder, &model.store, feat);
        let sa_gate = tape.sigmoid(sa);
        for &v in tape.value(ca_gate).iter().chain(tape.value(sa_gate).iter()) {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn zeroed_tap_contributions_vanish() {
        // scaling one tap to zero must remove exactly its contribution
        let cfg = TrainConfig::default();
        let model = Model::new(&cfg).unwrap();
        let mut taps = tap_arrays(4, false);
        // zero the projection bias so a zero tap contributes exactly zero
        let mut model = model;
        for p in model.store.ids().collect::<Vec<_>>() {
            if model.store.name(p).ends_with("proj.b") {
                model.store.value_mut(p).fill(0.0);
            }
        }
        let full = frm_output(&model, taps.clone());
        taps[1].fill(0.0);
        let without = frm_output(&model, taps.clone());

        // compute the lone contribution of tap 1 with all others zero
        let mut only = tap_arrays(4, true);
        only[1] = tap_arrays(4, false)[1].clone();
        let alone = frm_output(&model, only);
        let zero_base = frm_output(&model, tap_arrays(4, true));
        for (((f, w), a), z) in full.iter().zip(without.iter()).zip(alone.iter()).zip(zero_base.iter()) {
            assert!((f - w - (a - z)).abs() < 1e-9);
        }
    }

    #[test]
    fn tap_sum_is_order_invariant() {
        // summation happens in one fixed order; permuting equal-shaped taps
        // through the matching branches changes nothing beyond roundoff
        let cfg = TrainConfig::default();
        let model = Model::new(&cfg).unwrap();
        let taps = tap_arrays(5, false);
        let a = frm_output(&model, taps.clone());
        let b = frm_output(&model, taps);
        assert_eq!(a, b);
    }

    #[test]
    fn disc_shapes_range_and_zero_weights() {
        let cfg = TrainConfig::default();
        let model = Model::new(&cfg).unwrap();
        let mut tape = Tape::new(false);
        let mut binder = Binder::new(&model.store, SubnetMask::none());
        let mut rng = stream(6, Purpose::ParamInit, 0);
        let feat = tape.leaf(standard_normal(IxDyn(&[1, 32, 16, 16]), &mut rng));
        let scores = model
            .disc
            .forward_graph(&mut tape, &mut binder, &model.store, feat);
        assert_eq!(tape.shape(scores), &[1, 1, 2, 2]);
        for &v in tape.value(scores).iter() {
            assert!(v > 0.0 && v < 1.0);
        }

        // zero weights: sigmoid(0) = 0.5 exactly
        let mut zeroed = Model::new(&cfg).unwrap();
        zeroed.store.zero_all();
        let mut tape = Tape::new(false);
        let mut binder = Binder::new(&zeroed.store, SubnetMask::none());
        let feat = tape.leaf(standard_normal(IxDyn(&[1, 32, 16, 16]), &mut rng));
        let scores = zeroed
            .disc
            .forward_graph(&mut tape, &mut binder, &zeroed.store, feat);
        for &v in tape.value(scores).iter() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn gradients_reach_every_tap() {
        let cfg = TrainConfig::default();
        let model = Model::new(&cfg).unwrap();
        let mut tape = Tape::new(true);
        let mut binder = Binder::new(&model.store, SubnetMask::none());
        let ids: Vec<_> = tap_arrays(7, false)
            .into_iter()
            .map(|t| tape.leaf_grad(t))
            .collect();
        let feat = model
            .frm
            .forward_graph(&mut tape, &mut binder, &model.store, &ids, (64, 64));
        let scores = model
            .disc
            .forward_graph(&mut tape, &mut binder, &model.store, feat);
        let loss = tape.mean_all(scores);
        let grads = tape.backward(loss).unwrap();
        for &id in &ids {
            let g = grads.get(id).expect("tap missing gradient");
            assert!(g.iter().any(|&v| v.abs() > 0.0), "zero gradient on a tap");
        }
    }

    #[test]
    fn plain_path_uses_deepest_tap_only() {
        let cfg = TrainConfig::default();
        let model = Model::new(&cfg).unwrap();
        let mut tape = Tape::new(true);
        let mut binder = Binder::new(&model.store, SubnetMask::none());
        let ids: Vec<_> = tap_arrays(8, false)
            .into_iter()
            .map(|t| tape.leaf_grad(t))
            .collect();
        let feat = model
            .frm
            .forward_plain_graph(&mut tape, &mut binder, &model.store, &ids, (64, 64));
        assert_eq!(tape.shape(feat), &[1, 32, 16, 16]);
        let loss = tape.mean_all(feat);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(ids[0]).is_none());
        assert!(grads.get(ids[3]).is_some());
    }
}
