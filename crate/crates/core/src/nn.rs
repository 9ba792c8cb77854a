//! Parameter storage, initialization, layers, and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`], grouped by sub-network. A [`Binder`]
//! injects them into a [`Tape`] as leaves, marking only the sub-networks
//! selected by a [`SubnetMask`] as trainable; this is how the trainer keeps
//! discriminator and generator updates isolated.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream, Purpose};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Sub-network identity; checkpoint files and the parameter map key on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subnet {
    Backbone,
    Prior,
    Posterior,
    Prediction,
    Frm,
    Discriminator,
}

impl Subnet {
    pub const ALL: [Subnet; 6] = [
        Subnet::Backbone,
        Subnet::Prior,
        Subnet::Posterior,
        Subnet::Prediction,
        Subnet::Frm,
        Subnet::Discriminator,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Subnet::Backbone => "backbone",
            Subnet::Prior => "prior",
            Subnet::Posterior => "posterior",
            Subnet::Prediction => "prediction",
            Subnet::Frm => "frm",
            Subnet::Discriminator => "discriminator",
        }
    }

    pub fn from_name(s: &str) -> Option<Subnet> {
        Subnet::ALL.iter().copied().find(|x| x.name() == s)
    }
}

/// Set of sub-networks whose parameters are trainable in a given step.
#[derive(Debug, Clone, Copy, Default)]
pub struct SubnetMask(u8);

impl SubnetMask {
    pub fn none() -> Self {
        SubnetMask(0)
    }

    pub fn of(subnets: &[Subnet]) -> Self {
        let mut m = 0u8;
        for s in subnets {
            m |= 1 << (*s as u8);
        }
        SubnetMask(m)
    }

    /// Everything that feeds the segmentation output or the recalibrated
    /// features: all sub-networks except the discriminator.
    pub fn generator_side() -> Self {
        SubnetMask::of(&[
            Subnet::Backbone,
            Subnet::Prior,
            Subnet::Posterior,
            Subnet::Prediction,
            Subnet::Frm,
        ])
    }

    pub fn discriminator_only() -> Self {
        SubnetMask::of(&[Subnet::Discriminator])
    }

    pub fn contains(&self, s: Subnet) -> bool {
        self.0 & (1 << (s as u8)) != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    HeNormal { fan_in: usize },
    XavierNormal { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Owns every learnable tensor. Registration order is fixed by model
/// construction, and each parameter's init stream is derived from its
/// ordinal, so two stores built with the same seed are identical.
pub struct ParamStore {
    init_seed: u64,
    names: Vec<String>,
    subnets: Vec<Subnet>,
    values: Vec<ArrayD<f64>>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new(init_seed: u64) -> Self {
        ParamStore {
            init_seed,
            names: Vec::new(),
            subnets: Vec::new(),
            values: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, subnet: Subnet, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let ordinal = self.values.len() as u64;
        let mut rng = stream(self.init_seed, Purpose::ParamInit, ordinal);
        let value = match init {
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                standard_normal(IxDyn(shape), &mut rng).mapv(|e| e * std)
            }
            Init::XavierNormal { fan_in, fan_out } => {
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                standard_normal(IxDyn(shape), &mut rng).mapv(|e| e * std)
            }
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Ones => ArrayD::from_elem(IxDyn(shape), 1.0),
        };
        self.names.push(name.to_string());
        self.subnets.push(subnet);
        self.values.push(value);
        self.by_name.insert(name.to_string(), self.names.len() - 1);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, p: ParamId) -> &str {
        &self.names[p.0]
    }

    pub fn subnet(&self, p: ParamId) -> Subnet {
        self.subnets[p.0]
    }

    pub fn value(&self, p: ParamId) -> &ArrayD<f64> {
        &self.values[p.0]
    }

    pub fn value_mut(&mut self, p: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[p.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Zeroes every parameter; test hook for the zero-network cases.
    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.fill(0.0);
        }
    }

    /// Total element count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Per-tape cache binding parameters to tape leaves. Binding the same
/// parameter twice in one graph reuses the node, so gradients accumulate.
pub struct Binder {
    bound: Vec<Option<TensorId>>,
    trainable: SubnetMask,
}

impl Binder {
    pub fn new(store: &ParamStore, trainable: SubnetMask) -> Self {
        Binder {
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, p: ParamId) -> TensorId {
        if let Some(t) = self.bound[p.0] {
            return t;
        }
        let v = store.value(p).clone();
        let t = if self.trainable.contains(store.subnet(p)) {
            tape.leaf_grad(v)
        } else {
            tape.leaf(v)
        };
        self.bound[p.0] = Some(t);
        t
    }

    /// Collects `(param, gradient)` pairs for every bound trainable parameter
    /// that received a gradient, in parameter order.
    pub fn collect_grads(
        &self,
        store: &ParamStore,
        grads: &mut crate::autodiff::Grads,
    ) -> Vec<(ParamId, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(tid) = slot {
                if self.trainable.contains(store.subnet(ParamId(i))) {
                    if let Some(g) = grads.take(*tid) {
                        out.push((ParamId(i), g));
                    }
                }
            }
        }
        out
    }
}

/// Adam with per-parameter bias-corrected moments. Parameters that receive
/// no gradient in a step keep their moments and step count untouched.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            m: store.ids().map(|p| ArrayD::zeros(store.value(p).raw_dim())).collect(),
            v: store.ids().map(|p| ArrayD::zeros(store.value(p).raw_dim())).collect(),
            t: vec![0; store.len()],
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, ArrayD<f64>)],
        lr: f64,
    ) -> Result<()> {
        for (p, g) in grads {
            if g.iter().any(|e| !e.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    store.name(*p)
                )));
            }
            let i = p.0;
            self.t[i] += 1;
            let t = self.t[i] as f64;
            let (b1, b2) = (self.beta1, self.beta2);
            self.m[i].zip_mut_with(g, |m, &gi| *m = b1 * *m + (1.0 - b1) * gi);
            self.v[i].zip_mut_with(g, |v, &gi| *v = b2 * *v + (1.0 - b2) * gi * gi);
            let bc1 = 1.0 - b1.powf(t);
            let bc2 = 1.0 - b2.powf(t);
            let value = store.value_mut(*p);
            let eps = self.eps;
            ndarray::Zip::from(&mut *value)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }

    pub fn state(&self) -> (&[ArrayD<f64>], &[ArrayD<f64>], &[u64]) {
        (&self.m, &self.v, &self.t)
    }

    pub fn restore(&mut self, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>, t: Vec<u64>) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        subnet: Subnet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = store.register(
            subnet,
            &format!("{name}.w"),
            &[cout, cin, k, k],
            Init::HeNormal { fan_in: cin * k * k },
        );
        let b = bias.then(|| store.register(subnet, &format!("{name}.b"), &[cout], Init::Zeros));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: TensorId,
    ) -> TensorId {
        let w = binder.bind(tape, store, self.w);
        let mut y = tape.conv2d(x, w, self.stride, self.pad);
        if let Some(b) = self.b {
            let b = binder.bind(tape, store, b);
            y = tape.bias_add(y, b);
        }
        y
    }
}

pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn new(store: &mut ParamStore, subnet: Subnet, name: &str, channels: usize) -> Self {
        let gamma = store.register(subnet, &format!("{name}.gamma"), &[channels], Init::Ones);
        let beta = store.register(subnet, &format!("{name}.beta"), &[channels], Init::Zeros);
        Norm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: TensorId,
    ) -> TensorId {
        let g = binder.bind(tape, store, self.gamma);
        let b = binder.bind(tape, store, self.beta);
        tape.norm_batch(x, g, b, self.eps)
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        subnet: Subnet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.register(
            subnet,
            &format!("{name}.w"),
            &[fan_out, fan_in],
            Init::XavierNormal { fan_in, fan_out },
        );
        let b = store.register(subnet, &format!("{name}.b"), &[fan_out], Init::Zeros);
        Linear { w, b }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: TensorId,
    ) -> TensorId {
        let w = binder.bind(tape, store, self.w);
        let b = binder.bind(tape, store, self.b);
        let y = tape.linear(x, w);
        tape.bias_add(y, b)
    }
}

/// Two 3x3 convs with normalization and a residual connection. When the
/// block changes stride or channel count the skip path is a projected
/// 1x1 conv with its own normalization.
pub struct ResBlock {
    conv1: Conv2d,
    n1: Norm,
    conv2: Conv2d,
    n2: Norm,
    skip: Option<(Conv2d, Norm)>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        subnet: Subnet,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(store, subnet, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false);
        let n1 = Norm::new(store, subnet, &format!("{name}.n1"), cout);
        let conv2 = Conv2d::new(store, subnet, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false);
        let n2 = Norm::new(store, subnet, &format!("{name}.n2"), cout);
        let skip = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(store, subnet, &format!("{name}.skip"), cin, cout, 1, stride, 0, false),
                Norm::new(store, subnet, &format!("{name}.skipn"), cout),
            )
        });
        ResBlock {
            conv1,
            n1,
            conv2,
            n2,
            skip,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: TensorId,
    ) -> TensorId {
        let mut h = self.conv1.forward(tape, binder, store, x);
        h = self.n1.forward(tape, binder, store, h);
        h = tape.relu(h);
        h = self.conv2.forward(tape, binder, store, h);
        h = self.n2.forward(tape, binder, store, h);
        let shortcut = match &self.skip {
            Some((conv, norm)) => {
                let s = conv.forward(tape, binder, store, x);
                norm.forward(tape, binder, store, s)
            }
            None => x,
        };
        let sum = tape.add(h, shortcut);
        tape.relu(sum)
    }
}

/// Shared encoder trunk: stem conv at full resolution followed by
/// stride-2 residual stages that double the width each stage.
pub struct EncoderTrunk {
    stem_conv: Conv2d,
    stem_norm: Norm,
    stages: Vec<(ResBlock, ResBlock)>,
}

impl EncoderTrunk {
    pub fn new(
        store: &mut ParamStore,
        subnet: Subnet,
        name: &str,
        in_channels: usize,
        base_channels: usize,
        stages: usize,
    ) -> Self {
        let stem_conv = Conv2d::new(
            store,
            subnet,
            &format!("{name}.stem"),
            in_channels,
            base_channels,
            3,
            1,
            1,
            false,
        );
        let stem_norm = Norm::new(store, subnet, &format!("{name}.stemn"), base_channels);
        let mut blocks = Vec::new();
        let mut cin = base_channels;
        for s in 0..stages {
            let cout = base_channels << s;
            let b0 = ResBlock::new(store, subnet, &format!("{name}.s{s}.b0"), cin, cout, 2);
            let b1 = ResBlock::new(store, subnet, &format!("{name}.s{s}.b1"), cout, cout, 1);
            blocks.push((b0, b1));
            cin = cout;
        }
        EncoderTrunk {
            stem_conv,
            stem_norm,
            stages: blocks,
        }
    }

    /// Channel width of stage `s` output.
    pub fn stage_channels(base: usize, s: usize) -> usize {
        base << s
    }

    /// Runs the trunk, returning one tap per stage (shallow to deep).
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: TensorId,
    ) -> Vec<TensorId> {
        let mut h = self.stem_conv.forward(tape, binder, store, x);
        h = self.stem_norm.forward(tape, binder, store, h);
        h = tape.relu(h);
        let mut taps = Vec::with_capacity(self.stages.len());
        for (b0, b1) in &self.stages {
            h = b0.forward(tape, binder, store, h);
            h = b1.forward(tape, binder, store, h);
            taps.push(h);
        }
        taps
    }
}
