//! JSON checkpoint holding the model, its grouping and the training config.
//! Floats are written in shortest round-trip form, so load(save(m)) == m.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{Model, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: Model) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        let arch = ck.model.params.architecture();
        if arch != ck.config.architecture(arch.input_dim)? {
            return Err(Error::ShapeMismatch(
                "checkpoint parameters do not match its configuration".into(),
            ));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let config = TrainConfig {
            num_groups: 4,
            hidden_dims: vec![7],
            embed_dim: 3,
            ..TrainConfig::default()
        };
        let mut model = Model::init(&config, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (_, t) in model.params.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.gen::<f64>() * 1e-7 + *v / 3.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        let ck = Checkpoint::new(config, model);
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in back.model.params.tensors().iter().zip(ck.model.params.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!(matches!(
            Checkpoint::load(&dir.path().join("nope.json")),
            Err(Error::Io { .. })
        ));
    }
}
