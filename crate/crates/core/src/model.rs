//! Model assembly: one [`ParamStore`] shared by all six sub-networks.

use crate::backbone::Backbone;
use crate::config::TrainConfig;
use crate::error::Result;
use crate::frm::{PatchDisc, Recalibrator};
use crate::nn::{ParamStore, Subnet};
use crate::uesm::{LatentEncoder, PredictionHead};

pub struct Model {
    pub n_classes: usize,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub prior: LatentEncoder,
    pub posterior: LatentEncoder,
    pub pred: PredictionHead,
    pub frm: Recalibrator,
    pub disc: PatchDisc,
}

impl Model {
    /// Builds and initializes every sub-network from the config seed.
    /// Construction order is fixed, so equal configs give equal parameters.
    pub fn new(cfg: &TrainConfig) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let backbone = Backbone::new(&mut store, &cfg.backbone);
        let half_base = (cfg.backbone.base_channels / 2).max(1);
        let prior = LatentEncoder::new(
            &mut store,
            Subnet::Prior,
            "prior",
            1,
            half_base,
            cfg.backbone.stages,
            cfg.latent.latent_dim,
        );
        let posterior = LatentEncoder::new(
            &mut store,
            Subnet::Posterior,
            "posterior",
            1 + cfg.n_classes,
            half_base,
            cfg.backbone.stages,
            cfg.latent.latent_dim,
        );
        let pred = PredictionHead::new(
            &mut store,
            cfg.backbone.feature_dim,
            cfg.latent.latent_dim,
            cfg.n_classes,
        );
        let frm = Recalibrator::new(&mut store, &cfg.recalib, &cfg.backbone);
        let disc = PatchDisc::new(&mut store, &cfg.disc, cfg.recalib.common_channels);
        Ok(Model {
            n_classes: cfg.n_classes,
            store,
            backbone,
            prior,
            posterior,
            pred,
            frm,
            disc,
        })
    }

    /// Parameter count per sub-network, keyed by name.
    pub fn param_summary(&self) -> Vec<(&'static str, usize)> {
        Subnet::ALL
            .iter()
            .map(|s| {
                let count: usize = self
                    .store
                    .ids()
                    .filter(|&p| self.store.subnet(p) == *s)
                    .map(|p| self.store.value(p).len())
                    .sum();
                (s.name(), count)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_is_deterministic() {
        let cfg = TrainConfig::default();
        let a = Model::new(&cfg).unwrap();
        let b = Model::new(&cfg).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for (pa, pb) in a.store.ids().zip(b.store.ids()) {
            assert_eq!(a.store.value(pa), b.store.value(pb));
        }
    }

    #[test]
    fn every_subnet_has_parameters() {
        let cfg = TrainConfig::default();
        let model = Model::new(&cfg).unwrap();
        for (name, count) in model.param_summary() {
            assert!(count > 0, "subnet {name} has no parameters");
        }
    }
}
