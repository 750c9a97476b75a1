//! JSON checkpoint container: policy, frozen reference, anchor head and its
//! snapshot, optimizer moments, and the seeds the run descends from.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchor::AnchoredPair;
use crate::data::{AnnotatorSpec, ConstructionSpec, WorldSpec};
use crate::error::{LabError, Result};
use crate::grad::OptimizerState;
use crate::metrics::write_atomic;
use crate::objectives::ObjectiveSpec;
use crate::policy::PolicyMode;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub world: u64,
    pub annotator: u64,
    pub construction: u64,
    pub kl: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: PolicyMode,
    pub n_trainable: usize,
    pub hidden_dim: usize,
    pub step: usize,
    pub objective: ObjectiveSpec,
    pub world: WorldSpec,
    pub annotator: AnnotatorSpec,
    pub construction: ConstructionSpec,
    pub lineage: SeedLineage,
    pub state: AnchoredPair,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(LabError::parse("checkpoint", format!("unsupported version {}", self.version)));
        }
        self.state.pair.policy.validate()?;
        self.state.pair.reference().validate()?;
        if self.state.pair.mode() != self.mode || self.state.n_trainable() != self.n_trainable {
            return Err(LabError::Dimension("checkpoint header disagrees with its parameters".into()));
        }
        if self.state.head.dim() != self.hidden_dim || self.optimizer.len() != self.n_trainable {
            return Err(LabError::Dimension("checkpoint head or optimizer has the wrong size".into()));
        }
        Ok(())
    }

    /// Refuse to evaluate against a world the checkpoint was not trained on.
    pub fn check_world(&self, world: &WorldSpec) -> Result<()> {
        if &self.world != world {
            return Err(LabError::Invalid("checkpoint was trained on a different world".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| LabError::parse("checkpoint", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| LabError::parse("checkpoint", e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::AnchorHead;
    use crate::data::gen_world;
    use crate::objectives::Method;
    use rand::Rng;

    fn sample(mode: PolicyMode) -> Checkpoint {
        let world = WorldSpec { mode, n_prompts: 3, ..WorldSpec::default() };
        let w = gen_world(&world).unwrap();
        let mut state = AnchoredPair::new(w.reference_pair(), AnchorHead::zeros(world.hidden_dim, false));
        let mut rng = crate::rng::stream(1, 0);
        let theta: Vec<f64> = (0..state.n_trainable()).map(|_| rng.random::<f64>() - 0.5).collect();
        state.set_trainable(&theta).unwrap();
        let mut optimizer = OptimizerState::new(state.n_trainable(), 1e-2);
        optimizer.step(&mut theta.clone(), &theta).unwrap();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            mode,
            n_trainable: state.n_trainable(),
            hidden_dim: world.hidden_dim,
            step: 7,
            objective: ObjectiveSpec::new(Method::Uapo),
            world,
            annotator: AnnotatorSpec::noisy(0.4, 3),
            construction: ConstructionSpec::default(),
            lineage: SeedLineage { world: 0, annotator: 3, construction: 0, kl: 0 },
            state,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [PolicyMode::Tabular, PolicyMode::TinyLm] {
            let c = sample(mode);
            let text = c.to_json().unwrap();
            let back = Checkpoint::from_json(&text).unwrap();
            let bits = |c: &Checkpoint| c.state.trainable().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&c));
            assert_eq!(back, c);
            assert_eq!(back.to_json().unwrap(), text);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        let c = sample(PolicyMode::Tabular);
        c.write(&p).unwrap();
        assert_eq!(Checkpoint::read(&p).unwrap(), c);
    }

    #[test]
    fn rejects_mismatched_header() {
        let mut c = sample(PolicyMode::Tabular);
        c.n_trainable += 1;
        assert!(Checkpoint::from_json(&c.to_json().unwrap()).is_err());
        let c = sample(PolicyMode::Tabular);
        let other = WorldSpec { seed: 99, ..c.world.clone() };
        assert!(c.check_world(&other).is_err());
    }
}
