//! The trainable networks of one team, bundled with their parameter stores.
//!
//! A checkpoint directory holds `model.toml` with the architecture and one
//! `.osck` file per component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::ckm::{CkmNet, CkmNetConfig};
use crate::error::{OscError, Result};
use crate::gap::{GapNet, GapNetConfig, GapVariant};
use crate::nn::checkpoint;
use crate::nn::ParamStore;
use crate::policy::{CriticNet, PolicyNet, PolicyNetConfig};

pub const MODEL_FILE: &str = "model.toml";
pub const COMPONENTS: [&str; 4] = ["ckm", "gap", "policy", "critic"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub ckm: CkmNetConfig,
    pub gap: GapNetConfig,
    pub gap_variant: GapVariant,
    pub policy: PolicyNetConfig,
}

#[derive(Clone, Debug)]
pub struct Models {
    pub cfg: ModelConfig,
    pub ckm: CkmNet,
    pub ckm_ps: ParamStore,
    pub gap: GapNet,
    pub gap_ps: ParamStore,
    pub policy: PolicyNet,
    pub policy_ps: ParamStore,
    pub critic: CriticNet,
    pub critic_ps: ParamStore,
}

impl Models {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ckm, ckm_ps) = CkmNet::new(cfg.ckm.clone(), &mut rng)?;
        let (gap, gap_ps) = GapNet::new(cfg.gap.clone(), cfg.gap_variant, &mut rng)?;
        let (policy, policy_ps) = PolicyNet::new(cfg.policy.clone(), &mut rng)?;
        let (critic, critic_ps) = CriticNet::new(&cfg.policy, &mut rng)?;
        Ok(Models {
            cfg: cfg.clone(),
            ckm,
            ckm_ps,
            gap,
            gap_ps,
            policy,
            policy_ps,
            critic,
            critic_ps,
        })
    }

    pub fn store(&self, component: &str) -> &ParamStore {
        match component {
            "ckm" => &self.ckm_ps,
            "gap" => &self.gap_ps,
            "policy" => &self.policy_ps,
            _ => &self.critic_ps,
        }
    }

    fn store_mut(&mut self, component: &str) -> &mut ParamStore {
        match component {
            "ckm" => &mut self.ckm_ps,
            "gap" => &mut self.gap_ps,
            "policy" => &mut self.policy_ps,
            _ => &mut self.critic_ps,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| OscError::io(dir, e))?;
        let text = toml::to_string(&self.cfg).map_err(|e| OscError::Format(e.to_string()))?;
        let p = dir.join(MODEL_FILE);
        std::fs::write(&p, text).map_err(|e| OscError::io(&p, e))?;
        for c in COMPONENTS {
            checkpoint::save(self.store(c), &dir.join(format!("{c}.osck")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MODEL_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| OscError::io(&p, e))?;
        let cfg: ModelConfig =
            toml::from_str(&text).map_err(|e| OscError::Format(format!("{}: {e}", p.display())))?;
        let mut m = Models::new(&cfg, 0)?;
        for c in COMPONENTS {
            let loaded = checkpoint::load(&dir.join(format!("{c}.osck")))?;
            checkpoint::restore_into(m.store_mut(c), loaded)?;
        }
        Ok(m)
    }

    /// Swaps in a freshly initialized gap network of another variant. A
    /// matching variant leaves the model untouched.
    pub fn set_gap_variant(&mut self, variant: GapVariant, seed: u64) -> Result<()> {
        if self.cfg.gap_variant == variant {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gap, gap_ps) = GapNet::new(self.cfg.gap.clone(), variant, &mut rng)?;
        self.gap = gap;
        self.gap_ps = gap_ps;
        self.cfg.gap_variant = variant;
        Ok(())
    }

    /// Replaces the collaborator-model parameters with a pretrained store.
    pub fn load_ckm(&mut self, path: &Path) -> Result<()> {
        let loaded = checkpoint::load(path)?;
        checkpoint::restore_into(&mut self.ckm_ps, loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::CriticMode;

    fn small() -> ModelConfig {
        ModelConfig {
            policy: PolicyNetConfig {
                layers: 1,
                heads: 2,
                model_dim: 16,
                ff_dim: 32,
                critic: CriticMode::Shared,
                detach_critic: false,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        Models::new(&small(), 3).unwrap().save(&a).unwrap();
        Models::load(&a).unwrap().save(&b).unwrap();
        for f in [
            "model.toml",
            "ckm.osck",
            "gap.osck",
            "policy.osck",
            "critic.osck",
        ] {
            assert_eq!(
                std::fs::read(a.join(f)).unwrap(),
                std::fs::read(b.join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Models::new(&small(), 1).unwrap();
        m.save(dir.path()).unwrap();
        let mut other = small();
        other.policy.model_dim = 32;
        let mut m2 = Models::new(&other, 1).unwrap();
        let loaded = checkpoint::load(&dir.path().join("policy.osck")).unwrap();
        assert!(checkpoint::restore_into(&mut m2.policy_ps, loaded).is_err());
    }
}
