//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then raw little-endian `f64` tensor data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::optim::AdamWState;
use crate::autodiff::{ParamStore, Tensor};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::{init_params, Model, ModelConfig};
use crate::train::{TrainConfig, TrainState, Trainer};

pub const MAGIC: &[u8; 8] = b"REGNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: [usize; 2],
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    normalizer: Normalizer,
    state: TrainState,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Header and tensors of a checkpoint, decoupled from the running trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub normalizer: Normalizer,
    pub state: TrainState,
    pub store: ParamStore,
    pub optimizer: AdamWState,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            model: t.model.cfg.clone(),
            train: t.cfg.clone(),
            normalizer: t.normalizer.clone(),
            state: t.state.clone(),
            store: t.store.clone(),
            optimizer: t.optimizer.clone(),
        }
    }

    /// Rebuilds the model structure; parameter ids match `self.store`.
    pub fn build_model(&self) -> Result<Model> {
        Ok(init_params(&self.model)?.0)
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Ok(Trainer {
            model: self.build_model()?,
            store: self.store,
            optimizer: self.optimizer,
            cfg: self.train,
            normalizer: self.normalizer,
            state: self.state,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut push =
            |name: &str, kind: TensorKind, t: &Tensor, tensors: &mut Vec<TensorEntry>| {
                let (r, c) = t.dim();
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    kind,
                    shape: [r, c],
                    offset: data.len() as u64,
                });
                for x in t.iter() {
                    data.extend_from_slice(&x.to_le_bytes());
                }
            };
        for (id, p) in self.store.iter() {
            let kind = if p.trainable {
                TensorKind::Param
            } else {
                TensorKind::Buffer
            };
            push(&p.name, kind, &p.value, &mut tensors);
            if p.trainable {
                push(
                    &p.name,
                    TensorKind::AdamM,
                    &self.optimizer.m[id.index()],
                    &mut tensors,
                );
                push(
                    &p.name,
                    TensorKind::AdamV,
                    &self.optimizer.v[id.index()],
                    &mut tensors,
                );
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            normalizer: self.normalizer.clone(),
            state: self.state.clone(),
            optimizer_step: self.optimizer.step,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
        if len > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.version
            )));
        }
        let data = &body[len..];

        let (_, mut store) = init_params(&header.model)?;
        let mut optimizer = AdamWState::new(&store);
        optimizer.step = header.optimizer_step;
        let mut seen = vec![[false; 3]; store.len()];
        for e in &header.tensors {
            let id = store
                .id(&e.name)
                .ok_or_else(|| Error::UnknownParameter(e.name.clone()))?;
            let n = e.shape[0].checked_mul(e.shape[1]);
            let start = e.offset as usize;
            let raw = n
                .and_then(|n| n.checked_mul(8))
                .and_then(|len| start.checked_add(len))
                .and_then(|end| data.get(start..end))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor `{}` runs past end of file", e.name))
                })?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_shape_vec((e.shape[0], e.shape[1]), values)
                .expect("length checked above");
            let trainable = store.get(id).trainable;
            let slot = match (e.kind, trainable) {
                (TensorKind::Param, true) => {
                    store.set(id, t)?;
                    0
                }
                (TensorKind::Buffer, false) => {
                    store.set(id, t)?;
                    0
                }
                (TensorKind::AdamM, true) | (TensorKind::AdamV, true) => {
                    let (slot, dst) = if e.kind == TensorKind::AdamM {
                        (1, &mut optimizer.m[id.index()])
                    } else {
                        (2, &mut optimizer.v[id.index()])
                    };
                    if dst.dim() != t.dim() {
                        return Err(Error::Checkpoint(format!(
                            "optimizer state shape for `{}`",
                            e.name
                        )));
                    }
                    *dst = t;
                    slot
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "`{}` stored as {:?} but trainable = {trainable}",
                        e.name, e.kind
                    )))
                }
            };
            if std::mem::replace(&mut seen[id.index()][slot], true) {
                return Err(Error::Checkpoint(format!(
                    "duplicate entry for `{}`",
                    e.name
                )));
            }
        }
        for (id, p) in store.iter() {
            let need = if p.trainable { 3 } else { 1 };
            if seen[id.index()][..need].iter().any(|s| !s) {
                return Err(Error::Checkpoint(format!(
                    "missing tensor for `{}`",
                    p.name
                )));
            }
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            normalizer: header.normalizer,
            state: header.state,
            store,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::prepare_all;
    use crate::embed::AtomFeatureTable;
    use crate::moe::MoeConfig;
    use crate::testing::random_structure;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, Vec<crate::model::PreparedStructure>) {
        let cfg = ModelConfig {
            num_blocks: 1,
            hidden: 6,
            k_neighbors: 3,
            tasks: vec!["a".into(), "b".into()],
            moe: Some(MoeConfig {
                num_experts: 3,
                top_k: 2,
                ..Default::default()
            }),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<_> = (0..10)
            .map(|i| {
                let mut s = random_structure(&mut rng, 1..=3);
                s.labels.insert("a".into(), Some(i as f64));
                s.labels
                    .insert("b".into(), (i % 2 == 0).then_some(-(i as f64)));
                s
            })
            .collect();
        let p = prepare_all(&s, &cfg, &AtomFeatureTable::one_hot()).unwrap();
        (cfg, p)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (cfg, items) = setup();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let mut tr = Trainer::new(&cfg, tc, &items).unwrap();
        tr.fit(&items, &items[..3], |_, _, _| Ok(())).unwrap();
        let ck = Checkpoint::from_trainer(&tr);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, items) = setup();
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 3,
            ..Default::default()
        };
        let val = &items[..2];
        let mut full = Trainer::new(&cfg, tc.clone(), &items).unwrap();
        full.fit(&items, val, |_, _, _| Ok(())).unwrap();

        let mut first = Trainer::new(&cfg, tc, &items).unwrap();
        first.run_epoch(&items, val).unwrap();
        first.run_epoch(&items, val).unwrap();
        let bytes = Checkpoint::from_trainer(&first).to_bytes().unwrap();
        let mut resumed = Checkpoint::from_bytes(&bytes)
            .unwrap()
            .into_trainer()
            .unwrap();
        resumed.fit(&items, val, |_, _, _| Ok(())).unwrap();

        assert_eq!(
            Checkpoint::from_trainer(&resumed).to_bytes().unwrap(),
            Checkpoint::from_trainer(&full).to_bytes().unwrap()
        );
    }

    #[test]
    fn corrupt_inputs() {
        let (cfg, items) = setup();
        let tr = Trainer::new(&cfg, TrainConfig::default(), &items).unwrap();
        let bytes = Checkpoint::from_trainer(&tr).to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(b"nope"),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Checkpoint(_))
        ));

        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let data = bytes[16 + len..].to_vec();
        let rebuild = |h: &Header| {
            let json = serde_json::to_vec(h).unwrap();
            let mut out = MAGIC.to_vec();
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&json);
            out.extend_from_slice(&data);
            out
        };
        let original = header.tensors.clone();
        header.tensors[0].name = "no.such.param".into();
        assert!(matches!(
            Checkpoint::from_bytes(&rebuild(&header)),
            Err(Error::UnknownParameter(_))
        ));
        header.tensors = original[1..].to_vec();
        assert!(matches!(
            Checkpoint::from_bytes(&rebuild(&header)),
            Err(Error::Checkpoint(_))
        ));
    }
}
