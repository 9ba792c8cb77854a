//! Uncertainty estimation and segmentation module.
//!
//! A prior encoder maps an image to a diagonal Gaussian over a small latent
//! space; a posterior encoder does the same from the image concatenated with
//! its one-hot annotation. The prediction head consumes the backbone's
//! segmentation features concatenated with a broadcast latent draw.
//! Repeating the draw N times yields Monte Carlo probability maps whose
//! pixel variance is the uncertainty estimate.

use crate::autodiff::{Tape, TensorId};
use crate::config::LatentConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Binder, Conv2d, EncoderTrunk, Linear, ParamStore, Subnet, SubnetMask};
use crate::ops::{one_hot, softmax_channelwise};
use crate::rng::{mix, standard_normal, stream, Purpose};
use crate::types::{ImageBatch, LabelMap, ProbMap, UncertaintyMap};
use ndarray::{Array2, Array3, Array4};

pub const LOG_SIGMA_CLAMP: f64 = 10.0;

/// Batch of diagonal Gaussians over the latent space: `mu`, `log_sigma`
/// are `[B, L]`; `sigma = exp(log_sigma)`.
#[derive(Debug, Clone)]
pub struct DiagGaussian {
    pub mu: Array2<f64>,
    pub log_sigma: Array2<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Array2<f64>, log_sigma: Array2<f64>) -> Result<Self> {
        if mu.shape() != log_sigma.shape() {
            return Err(Error::shape(
                "DiagGaussian",
                format!("{:?}", mu.shape()),
                format!("{:?}", log_sigma.shape()),
            ));
        }
        if mu.iter().chain(log_sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DiagGaussian".into()));
        }
        let log_sigma = log_sigma.mapv(|v| v.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP));
        Ok(DiagGaussian { mu, log_sigma })
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn sigma(&self) -> Array2<f64> {
        self.log_sigma.mapv(f64::exp)
    }
}

/// Encoder ending in global average pooling and parallel mu / log-sigma
/// heads. Prior and posterior reuse the backbone trunk topology at half
/// width; they differ only in input channel count.
pub struct LatentEncoder {
    trunk: EncoderTrunk,
    mu_head: Linear,
    sigma_head: Linear,
}

impl LatentEncoder {
    pub fn new(
        store: &mut ParamStore,
        subnet: Subnet,
        name: &str,
        in_channels: usize,
        base_channels: usize,
        stages: usize,
        latent_dim: usize,
    ) -> Self {
        let trunk = EncoderTrunk::new(store, subnet, name, in_channels, base_channels, stages);
        let deep = EncoderTrunk::stage_channels(base_channels, stages - 1);
        let mu_head = Linear::new(store, subnet, &format!("{name}.mu"), deep, latent_dim);
        let sigma_head = Linear::new(store, subnet, &format!("{name}.lsig"), deep, latent_dim);
        LatentEncoder {
            trunk,
            mu_head,
            sigma_head,
        }
    }

    /// Returns `(mu, log_sigma)` node ids, each `[B, L]`; log-sigma is
    /// clamped for bounded KL.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        input: TensorId,
    ) -> (TensorId, TensorId) {
        let taps = self.trunk.forward(tape, binder, store, input);
        let deep = *taps.last().expect("trunk has stages");
        let pooled = tape.gap(deep);
        let mu = self.mu_head.forward(tape, binder, store, pooled);
        let lsig_raw = self.sigma_head.forward(tape, binder, store, pooled);
        let lsig = tape.clamp(lsig_raw, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP);
        (mu, lsig)
    }
}

/// Latent-conditioned dense classifier: three 1x1 convs over the
/// segmentation features concatenated with the broadcast latent plane.
pub struct PredictionHead {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

pub const PREDICTION_HIDDEN: usize = 32;

impl PredictionHead {
    pub fn new(
        store: &mut ParamStore,
        feature_dim: usize,
        latent_dim: usize,
        n_classes: usize,
    ) -> Self {
        let subnet = Subnet::Prediction;
        let cin = feature_dim + latent_dim;
        let conv1 = Conv2d::new(store, subnet, "pred.c1", cin, PREDICTION_HIDDEN, 1, 1, 0, true);
        let conv2 = Conv2d::new(
            store,
            subnet,
            "pred.c2",
            PREDICTION_HIDDEN,
            PREDICTION_HIDDEN,
            1,
            1,
            0,
            true,
        );
        let conv3 = Conv2d::new(store, subnet, "pred.c3", PREDICTION_HIDDEN, n_classes, 1, 1, 0, true);
        PredictionHead { conv1, conv2, conv3 }
    }

    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        seg_features: TensorId,
        z: TensorId,
    ) -> TensorId {
        let shape = tape.shape(seg_features).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let plane = tape.broadcast_plane(z, h, w);
        let joined = tape.concat_ch(&[seg_features, plane]);
        let mut t = self.conv1.forward(tape, binder, store, joined);
        t = tape.relu(t);
        t = self.conv2.forward(tape, binder, store, t);
        t = tape.relu(t);
        self.conv3.forward(tape, binder, store, t)
    }
}

/// Reparameterized draw: `z = mu + sigma_scale * sigma * eps` with a seeded
/// standard-normal `eps`. In-graph variants keep gradients flowing to `mu`
/// and `log_sigma`.
pub fn sample_latent(g: &DiagGaussian, sigma_scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, Purpose::LatentInfer, 0);
    let eps = standard_normal(ndarray::Ix2(g.batch(), g.latent_dim()), &mut rng);
    &g.mu + &(g.sigma() * eps * sigma_scale)
}

/// In-graph reparameterized draw from `(mu, log_sigma)` nodes.
pub fn sample_latent_graph(
    tape: &mut Tape,
    mu: TensorId,
    log_sigma: TensorId,
    sigma_scale: f64,
    eps: Array2<f64>,
) -> TensorId {
    let sigma = tape.exp(log_sigma);
    let eps_scaled = eps * sigma_scale;
    let eps_leaf = tape.leaf(eps_scaled.into_dyn());
    let noise = tape.mul(sigma, eps_leaf);
    tape.add(mu, noise)
}

/// Closed-form KL(post || prior) for diagonal Gaussians: summed over latent
/// dimensions, averaged over the batch.
pub fn kl_divergence(post: &DiagGaussian, prior: &DiagGaussian) -> Result<f64> {
    if post.mu.shape() != prior.mu.shape() {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?}", post.mu.shape()),
            format!("{:?}", prior.mu.shape()),
        ));
    }
    let b = post.batch() as f64;
    let mut total = 0.0;
    for (((mq, lq), mp), lp) in post
        .mu
        .iter()
        .zip(post.log_sigma.iter())
        .zip(prior.mu.iter())
        .zip(prior.log_sigma.iter())
    {
        let var_q = (2.0 * lq).exp();
        let inv_var_p = (-2.0 * lp).exp();
        total += lp - lq + 0.5 * (var_q + (mq - mp) * (mq - mp)) * inv_var_p - 0.5;
    }
    Ok(total / b)
}

/// In-graph KL with the identical formula; the scalar output matches
/// [`kl_divergence`] bit-for-bit on equal inputs.
pub fn kl_graph(
    tape: &mut Tape,
    post_mu: TensorId,
    post_lsig: TensorId,
    prior_mu: TensorId,
    prior_lsig: TensorId,
) -> TensorId {
    let b = tape.shape(post_mu)[0] as f64;
    let d = tape.sub(post_mu, prior_mu);
    let d2 = tape.mul(d, d);
    let two_lq = tape.scale(post_lsig, 2.0);
    let var_q = tape.exp(two_lq);
    let neg_two_lp = tape.scale(prior_lsig, -2.0);
    let inv_var_p = tape.exp(neg_two_lp);
    let quad = tape.add(var_q, d2);
    let quad = tape.mul(quad, inv_var_p);
    let quad = tape.scale(quad, 0.5);
    let log_ratio = tape.sub(prior_lsig, post_lsig);
    let sum_terms = tape.add(log_ratio, quad);
    let shifted = tape.add_scalar(sum_terms, -0.5);
    let total = tape.sum_all(shifted);
    tape.scale(total, 1.0 / b)
}

/// Monte Carlo inference output.
pub struct MCResult {
    pub samples: Vec<ProbMap>,
    pub mean: ProbMap,
    pub uncertainty: UncertaintyMap,
}

/// Reduces Monte Carlo probability maps to their arithmetic mean and the
/// channel-averaged population variance per pixel.
pub fn mc_reduce(samples: &[ProbMap]) -> Result<(ProbMap, UncertaintyMap)> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Data("mc_reduce needs at least one sample".into()));
    }
    let shape = samples[0].data().raw_dim();
    let mut mean = Array4::<f64>::zeros((shape[0], shape[1], shape[2], shape[3]));
    for s in samples {
        if s.data().raw_dim() != shape {
            return Err(Error::shape(
                "mc_reduce",
                format!("{shape:?}"),
                format!("{:?}", s.data().raw_dim()),
            ));
        }
        mean += s.data();
    }
    mean /= n as f64;

    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut unc = Array3::<f64>::zeros((b, h, w));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let mut acc = 0.0;
                for ci in 0..c {
                    let m = mean[[bi, ci, hi, wi]];
                    let mut var = 0.0;
                    for s in samples {
                        let d = s.data()[[bi, ci, hi, wi]] - m;
                        var += d * d;
                    }
                    acc += var / n as f64; // population variance
                }
                unc[[bi, hi, wi]] = acc / c as f64;
            }
        }
    }
    Ok((ProbMap::new(mean)?, UncertaintyMap::new(unc)?))
}

// ---------------------------------------------------------------------------
// Whole-model inference entry points (no gradients)
// ---------------------------------------------------------------------------

/// Prior distribution over the latent space for an image.
pub fn prior_encode(model: &Model, x: &ImageBatch) -> Result<DiagGaussian> {
    let mut tape = Tape::new(false);
    let mut binder = Binder::new(&model.store, SubnetMask::none());
    let xid = tape.leaf(x.data().clone().into_dyn());
    let (mu, lsig) = model
        .prior
        .forward_graph(&mut tape, &mut binder, &model.store, xid);
    gaussian_from_nodes(&tape, mu, lsig)
}

/// Posterior distribution from an image and its paired annotation.
pub fn posterior_encode(model: &Model, x: &ImageBatch, y: &LabelMap) -> Result<DiagGaussian> {
    if x.batch() != y.batch() || x.height() != y.height() || x.width() != y.width() {
        return Err(Error::shape(
            "posterior_encode",
            format!("[{}, {}, {}]", x.batch(), x.height(), x.width()),
            format!("[{}, {}, {}]", y.batch(), y.height(), y.width()),
        ));
    }
    let onehot = one_hot(y, model.n_classes)?;
    let mut tape = Tape::new(false);
    let mut binder = Binder::new(&model.store, SubnetMask::none());
    let xid = tape.leaf(x.data().clone().into_dyn());
    let yid = tape.leaf(onehot.data().clone().into_dyn());
    let joined = tape.concat_ch(&[xid, yid]);
    let (mu, lsig) = model
        .posterior
        .forward_graph(&mut tape, &mut binder, &model.store, joined);
    gaussian_from_nodes(&tape, mu, lsig)
}

fn gaussian_from_nodes(tape: &Tape, mu: TensorId, lsig: TensorId) -> Result<DiagGaussian> {
    let mu = tape
        .value(mu)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("latent heads emit [B, L]")
        .to_owned();
    let lsig = tape
        .value(lsig)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("latent heads emit [B, L]")
        .to_owned();
    DiagGaussian::new(mu, lsig)
}

/// Logits from precomputed segmentation features and a latent vector.
pub fn predict_with_latent(
    model: &Model,
    seg_features: &Array4<f64>,
    z: &Array2<f64>,
) -> Array4<f64> {
    let mut tape = Tape::new(false);
    let mut binder = Binder::new(&model.store, SubnetMask::none());
    let f = tape.leaf(seg_features.clone().into_dyn());
    let zid = tape.leaf(z.clone().into_dyn());
    let logits = model
        .pred
        .forward_graph(&mut tape, &mut binder, &model.store, f, zid);
    tape.value(logits)
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("prediction head emits [B, C, H, W]")
        .to_owned()
}

/// Full Monte Carlo inference: N prior draws through the prediction head on
/// one backbone pass. Sample n uses the derived seed `(seed, n)`, so results
/// are reproducible and order-independent of any other stream.
pub fn mc_infer(model: &Model, x: &ImageBatch, cfg: &LatentConfig, seed: u64) -> Result<MCResult> {
    cfg.validate()?;
    let mut tape = Tape::new(false);
    let mut binder = Binder::new(&model.store, SubnetMask::none());
    let xid = tape.leaf(x.data().clone().into_dyn());
    let out = model
        .backbone
        .forward_graph(&mut tape, &mut binder, &model.store, xid)?;
    let (mu, lsig) = model
        .prior
        .forward_graph(&mut tape, &mut binder, &model.store, xid);
    let gaussian = gaussian_from_nodes(&tape, mu, lsig)?;

    let mut samples = Vec::with_capacity(cfg.mc_samples);
    for n in 0..cfg.mc_samples {
        let z = sample_latent(&gaussian, cfg.sigma_scale, mix(seed, Purpose::LatentInfer, n as u64));
        let zid = tape.leaf(z.into_dyn());
        let logits = model
            .pred
            .forward_graph(&mut tape, &mut binder, &model.store, out.seg_features, zid);
        let probs = tape.softmax_ch(logits);
        let p = tape
            .value(probs)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("softmax preserves rank")
            .to_owned();
        samples.push(ProbMap::new(p)?);
    }
    let (mean, uncertainty) = mc_reduce(&samples)?;
    Ok(MCResult {
        samples,
        mean,
        uncertainty,
    })
}

/// Softmax probabilities for one image under a single latent draw; shares
/// the backbone pass with callers that need plain (non-MC) predictions.
pub fn predict_probs(model: &Model, x: &ImageBatch, z: &Array2<f64>) -> Result<ProbMap> {
    let mut tape = Tape::new(false);
    let mut binder = Binder::new(&model.store, SubnetMask::none());
    let xid = tape.leaf(x.data().clone().into_dyn());
    let out = model
        .backbone
        .forward_graph(&mut tape, &mut binder, &model.store, xid)?;
    let zid = tape.leaf(z.clone().into_dyn());
    let logits = model
        .pred
        .forward_graph(&mut tape, &mut binder, &model.store, out.seg_features, zid);
    softmax_channelwise(
        &tape
            .value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("prediction head emits [B, C, H, W]")
            .to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::types::DomainTag;
    use rand::Rng;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.backbone.pyramid_bins = vec![1, 2];
        cfg.corpus.phantom.height = 16;
        cfg.corpus.phantom.width = 16;
        cfg
    }

    fn image(seed: u64, h: usize, w: usize) -> ImageBatch {
        let mut rng = stream(seed, Purpose::CorpusSample, 0);
        let data = Array4::from_shape_fn((1, 1, h, w), |_| rng.gen_range(0.0..1.0));
        ImageBatch::new(data, DomainTag::Source).unwrap()
    }

    #[test]
    fn zero_params_give_standard_normal() {
        let cfg = tiny_config();
        let mut model = Model::new(&cfg).unwrap();
        model.store.zero_all();
        let g = prior_encode(&model, &image(1, 16, 16)).unwrap();
        assert!(g.mu.iter().all(|&v| v == 0.0));
        assert!(g.log_sigma.iter().all(|&v| v == 0.0));

        let labels = LabelMap::new(Array3::zeros((1, 16, 16)), 3).unwrap();
        let g = posterior_encode(&model, &image(1, 16, 16), &labels).unwrap();
        assert!(g.mu.iter().all(|&v| v == 0.0));
        assert!(g.log_sigma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoders_are_deterministic_and_input_sensitive() {
        let cfg = tiny_config();
        let model = Model::new(&cfg).unwrap();
        let a = prior_encode(&model, &image(1, 16, 16)).unwrap();
        let b = prior_encode(&model, &image(1, 16, 16)).unwrap();
        assert_eq!(a.mu, b.mu);
        let c = prior_encode(&model, &image(2, 16, 16)).unwrap();
        assert!(a.mu.iter().zip(c.mu.iter()).any(|(x, y)| (x - y).abs() > 1e-12));
    }

    #[test]
    fn posterior_is_label_sensitive_and_validates_shapes() {
        let cfg = tiny_config();
        let model = Model::new(&cfg).unwrap();
        let x = image(3, 16, 16);
        let y0 = LabelMap::new(Array3::zeros((1, 16, 16)), 3).unwrap();
        let y1 = LabelMap::new(Array3::from_elem((1, 16, 16), 1u8), 3).unwrap();
        let g0 = posterior_encode(&model, &x, &y0).unwrap();
        let g1 = posterior_encode(&model, &x, &y1).unwrap();
        assert!(g0.mu.iter().zip(g1.mu.iter()).any(|(a, b)| (a - b).abs() > 1e-12));

        let bad = LabelMap::new(Array3::zeros((1, 8, 8)), 3).unwrap();
        assert!(posterior_encode(&model, &x, &bad).is_err());
    }

    #[test]
    fn sample_latent_degenerate_and_seeded() {
        let mu = Array2::from_shape_vec((1, 3), vec![0.3, -0.7, 2.0]).unwrap();
        let g = DiagGaussian::new(mu.clone(), Array2::zeros((1, 3))).unwrap();
        let z = sample_latent(&g, 0.0, 5);
        assert_eq!(z, mu);
        let z1 = sample_latent(&g, 1.0, 6);
        let z2 = sample_latent(&g, 1.0, 6);
        assert_eq!(z1, z2);
        let z3 = sample_latent(&g, 1.0, 7);
        assert_ne!(z1, z3);
    }

    #[test]
    fn sample_latent_monte_carlo_mean() {
        // N(1, 0.25 I): sigma = 0.5, log_sigma = ln 0.5
        let mu = Array2::from_elem((1, 2), 1.0);
        let lsig = Array2::from_elem((1, 2), 0.5f64.ln());
        let g = DiagGaussian::new(mu, lsig).unwrap();
        let mut acc = [0.0f64; 2];
        let draws = 10_000;
        for i in 0..draws {
            let z = sample_latent(&g, 1.0, 1000 + i);
            acc[0] += z[[0, 0]];
            acc[1] += z[[0, 1]];
        }
        for a in acc {
            assert!((a / draws as f64 - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn kl_trivial_and_hand_case() {
        let g = DiagGaussian::new(Array2::zeros((1, 4)), Array2::zeros((1, 4))).unwrap();
        assert_eq!(kl_divergence(&g, &g).unwrap(), 0.0);

        // L=1: post = N(1, 1), prior = N(0, 1) -> 0.5
        let post = DiagGaussian::new(Array2::from_elem((1, 1), 1.0), Array2::zeros((1, 1))).unwrap();
        let prior = DiagGaussian::new(Array2::zeros((1, 1)), Array2::zeros((1, 1))).unwrap();
        assert!((kl_divergence(&post, &prior).unwrap() - 0.5).abs() < 1e-12);

        let bad = DiagGaussian::new(Array2::zeros((1, 2)), Array2::zeros((1, 2))).unwrap();
        assert!(kl_divergence(&post, &bad).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        let mut rng = stream(77, Purpose::ParamInit, 0);
        for _ in 0..2 {
            let l = 3;
            let post = DiagGaussian::new(
                Array2::from_shape_fn((1, l), |_| rng.gen_range(-1.0..1.0)),
                Array2::from_shape_fn((1, l), |_| rng.gen_range(-0.5..0.5)),
            )
            .unwrap();
            let prior = DiagGaussian::new(
                Array2::from_shape_fn((1, l), |_| rng.gen_range(-1.0..1.0)),
                Array2::from_shape_fn((1, l), |_| rng.gen_range(-0.5..0.5)),
            )
            .unwrap();
            let exact = kl_divergence(&post, &prior).unwrap();
            // E_post[log q - log p] with q = post, p = prior
            let mut acc = 0.0;
            let draws = 200_000;
            for i in 0..draws {
                let z = sample_latent(&post, 1.0, 31_000 + i);
                let mut lq = 0.0;
                let mut lp = 0.0;
                for d in 0..l {
                    let (mq, sq) = (post.mu[[0, d]], post.log_sigma[[0, d]].exp());
                    let (mp, sp) = (prior.mu[[0, d]], prior.log_sigma[[0, d]].exp());
                    let zq = (z[[0, d]] - mq) / sq;
                    let zp = (z[[0, d]] - mp) / sp;
                    lq += -sq.ln() - 0.5 * zq * zq;
                    lp += -sp.ln() - 0.5 * zp * zp;
                }
                acc += lq - lp;
            }
            let estimate = acc / draws as f64;
            assert!(
                (estimate - exact).abs() / exact.abs().max(0.05) < 0.05,
                "exact {exact}, mc {estimate}"
            );
        }
    }

    #[test]
    fn kl_graph_matches_closed_form() {
        let mut rng = stream(78, Purpose::ParamInit, 0);
        let post = DiagGaussian::new(
            Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0)),
            Array2::from_shape_fn((2, 4), |_| rng.gen_range(-0.5..0.5)),
        )
        .unwrap();
        let prior = DiagGaussian::new(
            Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0)),
            Array2::from_shape_fn((2, 4), |_| rng.gen_range(-0.5..0.5)),
        )
        .unwrap();
        let exact = kl_divergence(&post, &prior).unwrap();
        let mut tape = Tape::new(false);
        let mq = tape.leaf(post.mu.clone().into_dyn());
        let lq = tape.leaf(post.log_sigma.clone().into_dyn());
        let mp = tape.leaf(prior.mu.clone().into_dyn());
        let lp = tape.leaf(prior.log_sigma.clone().into_dyn());
        let kl = kl_graph(&mut tape, mq, lq, mp, lp);
        assert!((tape.scalar(kl) - exact).abs() < 1e-12);
    }

    #[test]
    fn mc_reduce_hand_case() {
        // one pixel, C=2, N=2, samples (1,0) and (0,1)
        let a = ProbMap::new(Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, 0.0]).unwrap()).unwrap();
        let b = ProbMap::new(Array4::from_shape_vec((1, 2, 1, 1), vec![0.0, 1.0]).unwrap()).unwrap();
        let (mean, unc) = mc_reduce(&[a, b]).unwrap();
        assert!((mean.data()[[0, 0, 0, 0]] - 0.5).abs() < 1e-12);
        assert!((mean.data()[[0, 1, 0, 0]] - 0.5).abs() < 1e-12);
        assert!((unc.data()[[0, 0, 0]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mc_infer_contracts() {
        let cfg = tiny_config();
        let model = Model::new(&cfg).unwrap();
        let x = image(4, 16, 16);

        // N=1: uncertainty identically zero, mean equals the sample
        let one = LatentConfig {
            mc_samples: 1,
            ..cfg.latent.clone()
        };
        let r = mc_infer(&model, &x, &one, 9).unwrap();
        assert_eq!(r.samples.len(), 1);
        assert!(r.uncertainty.data().iter().all(|&v| v == 0.0));
        for (a, b) in r.mean.data().iter().zip(r.samples[0].data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // sigma_scale = 0: all draws collapse onto mu, uncertainty zero
        let collapsed = LatentConfig {
            sigma_scale: 0.0,
            ..cfg.latent.clone()
        };
        let r = mc_infer(&model, &x, &collapsed, 9).unwrap();
        assert!(r.uncertainty.data().iter().all(|&v| v == 0.0));

        // reproducibility under a fixed master seed
        let r1 = mc_infer(&model, &x, &cfg.latent, 10).unwrap();
        let r2 = mc_infer(&model, &x, &cfg.latent, 10).unwrap();
        assert_eq!(r1.mean.data(), r2.mean.data());
        assert_eq!(r1.uncertainty.data(), r2.uncertainty.data());

        // mean is a valid probability map and uncertainty nonnegative
        assert!(r1.uncertainty.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn predict_with_latent_is_latent_sensitive() {
        let cfg = tiny_config();
        let model = Model::new(&cfg).unwrap();
        let x = image(5, 16, 16);
        let mut tape = Tape::new(false);
        let mut binder = Binder::new(&model.store, SubnetMask::none());
        let xid = tape.leaf(x.data().clone().into_dyn());
        let out = model
            .backbone
            .forward_graph(&mut tape, &mut binder, &model.store, xid)
            .unwrap();
        let feats = tape
            .value(out.seg_features)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();

        let z1 = Array2::zeros((1, cfg.latent.latent_dim));
        let z2 = Array2::from_elem((1, cfg.latent.latent_dim), 1.5);
        let l1 = predict_with_latent(&model, &feats, &z1);
        let l2 = predict_with_latent(&model, &feats, &z2);
        assert_eq!(l1.shape(), &[1, 3, 16, 16]);
        assert!(l1.iter().zip(l2.iter()).any(|(a, b)| (a - b).abs() > 1e-12));
    }

    #[test]
    fn uncertainty_zero_iff_samples_identical() {
        let a = ProbMap::new(Array4::from_shape_vec((1, 2, 1, 1), vec![0.7, 0.3]).unwrap()).unwrap();
        let (_, unc) = mc_reduce(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(unc.data().iter().all(|&v| v.abs() < 1e-12));

        let b = ProbMap::new(Array4::from_shape_vec((1, 2, 1, 1), vec![0.6, 0.4]).unwrap()).unwrap();
        let (_, unc) = mc_reduce(&[a, b]).unwrap();
        assert!(unc.data().iter().all(|&v| v > 1e-12));
    }
}
