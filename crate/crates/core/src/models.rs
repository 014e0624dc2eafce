//! All learnable parameters of the engine in one bundle.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, ParamId};
use crate::controllers::{FrictionParam, RodNet, SelfForceNet};
use crate::error::{Error, Result};
use crate::interaction::InteractionNet;
use crate::nn::{Checkpoint, ParamIds};
use crate::rng;

/// Initial friction coefficient of an untrained model.
pub const INITIAL_MU: f64 = 1.0;

/// Independently freezable groups of parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Friction,
    SelfNet,
    RodNet,
    InteractionNet,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Friction,
        ParamGroup::SelfNet,
        ParamGroup::RodNet,
        ParamGroup::InteractionNet,
    ];

    pub fn networks() -> [ParamGroup; 3] {
        [
            ParamGroup::SelfNet,
            ParamGroup::RodNet,
            ParamGroup::InteractionNet,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Models {
    pub friction: FrictionParam,
    pub self_net: SelfForceNet,
    pub rod_net: RodNet,
    pub inta_net: InteractionNet,
    /// Seed the hidden layers were drawn from.
    pub seed: u64,
}

impl Models {
    /// Fresh models: `μ = 1`, hidden layers drawn from `seed`, output heads
    /// zero so every residual starts out silent.
    pub fn new(seed: u64) -> Self {
        let mut ids = ParamIds::default();
        let friction =
            FrictionParam::new(ids.next_id(), INITIAL_MU).expect("initial mu is positive");
        let self_net = SelfForceNet::new(&mut ids, &mut rng::stream(seed, "init.self_nn"));
        let rod_net = RodNet::new(&mut ids, &mut rng::stream(seed, "init.rod"));
        let inta_net = InteractionNet::new(&mut ids, &mut rng::stream(seed, "init.inta"));
        Models {
            friction,
            self_net,
            rod_net,
            inta_net,
            seed,
        }
    }

    pub fn mu(&self) -> f64 {
        self.friction.mu_value()
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<&Param> {
        match group {
            ParamGroup::Friction => vec![&self.friction.rho],
            ParamGroup::SelfNet => self.self_net.params().collect(),
            ParamGroup::RodNet => self.rod_net.params().collect(),
            ParamGroup::InteractionNet => self.inta_net.params().collect(),
        }
    }

    pub fn group_params_mut(&mut self, group: ParamGroup) -> Vec<&mut Param> {
        match group {
            ParamGroup::Friction => vec![&mut self.friction.rho],
            ParamGroup::SelfNet => self.self_net.params_mut().collect(),
            ParamGroup::RodNet => self.rod_net.params_mut().collect(),
            ParamGroup::InteractionNet => self.inta_net.params_mut().collect(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        ParamGroup::ALL
            .iter()
            .flat_map(|g| self.group_params(*g))
            .collect()
    }

    /// Parameters of every group not in `frozen`.
    pub fn trainable_mut(&mut self, frozen: &BTreeSet<ParamGroup>) -> Vec<&mut Param> {
        let Models {
            friction,
            self_net,
            rod_net,
            inta_net,
            ..
        } = self;
        let mut out: Vec<&mut Param> = Vec::new();
        if !frozen.contains(&ParamGroup::Friction) {
            out.push(&mut friction.rho);
        }
        if !frozen.contains(&ParamGroup::SelfNet) {
            out.extend(self_net.params_mut());
        }
        if !frozen.contains(&ParamGroup::RodNet) {
            out.extend(rod_net.params_mut());
        }
        if !frozen.contains(&ParamGroup::InteractionNet) {
            out.extend(inta_net.params_mut());
        }
        out
    }

    pub fn group_of(&self, id: ParamId) -> Option<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| self.group_params(*g).iter().any(|p| p.id() == id))
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("seed".into(), self.seed.into());
        ck.meta.insert("mu".into(), self.mu().into());
        for p in self.params() {
            ck.push_param(p);
        }
        ck
    }

    /// Models with every tensor taken from `ck`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let seed = ck.meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut m = Models::new(seed);
        for group in ParamGroup::ALL {
            for p in m.group_params_mut(group) {
                ck.load_param(p)?;
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Models::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn weights_hash(&self) -> String {
        let mut buf = Vec::new();
        self.checkpoint()
            .write_to(&mut buf)
            .expect("writing to memory cannot fail");
        crate::io::sha256_hex(&buf)
    }

    pub fn with_mu(mut self, mu: f64) -> Result<Self> {
        self.friction.set_mu(mu)?;
        Ok(self)
    }

    /// Copy every parameter of `groups` from `other`.
    pub fn copy_groups_from(&mut self, other: &Models, groups: &[ParamGroup]) -> Result<()> {
        for g in groups {
            let src = other.group_params(*g);
            let dst = self.group_params_mut(*g);
            if src.len() != dst.len() {
                return Err(Error::Checkpoint(format!("{g:?}: parameter count differs")));
            }
            for (d, s) in dst.into_iter().zip(src) {
                if d.shape() != s.shape() {
                    return Err(Error::Checkpoint(format!("{}: shape differs", d.name())));
                }
                d.values_mut().copy_from_slice(s.values());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_models_are_silent_and_reproducible() {
        let a = Models::new(5);
        assert!((a.mu() - 1.0).abs() < 1e-14);
        assert!(a.self_net.lstm.head_is_zero());
        assert!(a.rod_net.mlp.head_is_zero());
        assert!(a.inta_net.mlp.head_is_zero());
        assert_eq!(a.weights_hash(), Models::new(5).weights_hash());
        assert_ne!(a.weights_hash(), Models::new(6).weights_hash());
    }

    #[test]
    fn ids_are_unique() {
        let m = Models::new(0);
        let ids: BTreeSet<_> = m.params().iter().map(|p| p.id()).collect();
        assert_eq!(ids.len(), m.params().len());
        assert!(!ids.contains(&ParamId::PROBE));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = Models::new(3).with_mu(1.7).unwrap();
        m.rod_net.mlp.layers[2].bias.values_mut()[0] = 0.123;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        m.save(&path).unwrap();
        let back = Models::load(&path).unwrap();
        assert_eq!(back.weights_hash(), m.weights_hash());
        assert_eq!(back.mu().to_bits(), m.mu().to_bits());
    }

    #[test]
    fn freezing_drops_groups() {
        let mut m = Models::new(0);
        let total = m.params().len();
        let frozen: BTreeSet<_> = ParamGroup::networks().into_iter().collect();
        assert_eq!(m.trainable_mut(&frozen).len(), 1);
        assert_eq!(m.trainable_mut(&BTreeSet::new()).len(), total);
        let id = m.friction.rho.id();
        assert_eq!(m.group_of(id), Some(ParamGroup::Friction));
    }
}
