//! JSON-lines datasets, deterministic splits, label standardisation and the
//! masked L1 loss.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::embed::AtomFeatureTable;
use crate::error::{Error, Result};
use crate::lattice::{validate_structure, CrystalStructure, Mat3, Vec3};
use crate::model::{ModelConfig, PreparedStructure};

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub lattice: Mat3,
    pub frac_coords: Vec<Vec3>,
    pub atomic_numbers: Vec<u32>,
    #[serde(default)]
    pub targets: BTreeMap<String, Option<f64>>,
}

impl From<DatasetRecord> for CrystalStructure {
    fn from(r: DatasetRecord) -> Self {
        CrystalStructure {
            id: r.id,
            atomic_numbers: r.atomic_numbers,
            frac_coords: r.frac_coords,
            lattice: r.lattice,
            labels: r.targets,
        }
    }
}

impl From<&CrystalStructure> for DatasetRecord {
    fn from(s: &CrystalStructure) -> Self {
        DatasetRecord {
            id: s.id.clone(),
            lattice: s.lattice,
            frac_coords: s.frac_coords.clone(),
            atomic_numbers: s.atomic_numbers.clone(),
            targets: s.labels.clone(),
        }
    }
}

/// A record rejected by validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejected {
    pub line: usize,
    pub id: String,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub structures: Vec<CrystalStructure>,
    pub rejected: Vec<Rejected>,
}

/// Parses JSON lines. Malformed JSON is always an error; records that parse
/// but fail validation are an error when `strict`, and are skipped and
/// reported otherwise.
pub fn parse_dataset(text: &str, strict: bool) -> Result<LoadedDataset> {
    let mut out = LoadedDataset::default();
    for (i, line) in text.lines().enumerate() {
        parse_line(i + 1, line, strict, &mut out)?;
    }
    Ok(out)
}

fn parse_line(line_no: usize, line: &str, strict: bool, out: &mut LoadedDataset) -> Result<()> {
    let line = line.trim();
    if line.is_empty() {
        return Ok(());
    }
    let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let s = CrystalStructure::from(rec);
    let violations = validate_structure(&s);
    if violations.is_empty() {
        out.structures.push(s);
    } else {
        let reasons: Vec<String> = violations.iter().map(ToString::to_string).collect();
        if strict {
            return Err(Error::Validation {
                id: s.id,
                reasons: reasons.join("; "),
            });
        }
        log::warn!(
            "line {line_no}: skipping `{}`: {}",
            s.id,
            reasons.join("; ")
        );
        out.rejected.push(Rejected {
            line: line_no,
            id: s.id,
            reasons,
        });
    }
    Ok(())
}

pub fn load_dataset(path: &Path, strict: bool) -> Result<LoadedDataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = LoadedDataset::default();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        parse_line(i + 1, &line, strict, &mut out)?;
    }
    Ok(out)
}

pub fn to_jsonl(structures: &[CrystalStructure]) -> Result<String> {
    let mut s = String::new();
    for st in structures {
        s += &serde_json::to_string(&DatasetRecord::from(st))?;
        s.push('\n');
    }
    Ok(s)
}

pub fn save_dataset(path: &Path, structures: &[CrystalStructure]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(structures)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SplitSizes {
    Counts {
        train: usize,
        val: usize,
        test: usize,
    },
    Ratios {
        train: f64,
        val: f64,
        test: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(flatten)]
    pub sizes: SplitSizes,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            sizes: SplitSizes::Ratios {
                train: 0.8,
                val: 0.1,
                test: 0.1,
            },
            seed: 0,
        }
    }
}

/// Index sets into the original record list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let (a, b, c) = match self.sizes {
            SplitSizes::Counts { train, val, test } => (train, val, test),
            SplitSizes::Ratios { train, val, test } => {
                if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
                    || train + val + test > 1.0 + 1e-9
                {
                    return Err(Error::Config(format!(
                        "split ratios {train}/{val}/{test} must be in [0, 1] and sum to at most 1"
                    )));
                }
                // The small offset keeps 0.29 · 100 from flooring to 28.
                let count = |r: f64| (r * n as f64 + 1e-9).floor() as usize;
                (count(train), count(val), count(test))
            }
        };
        if a + b + c > n {
            return Err(Error::Config(format!(
                "split {a}/{b}/{c} needs {} records, dataset has {n}",
                a + b + c
            )));
        }
        Ok((a, b, c))
    }
}

/// Shuffles `0..n` with the spec's seed and partitions it.
pub fn split_dataset(n: usize, spec: &SplitSpec) -> Result<Split> {
    let (a, b, c) = spec.counts(n)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    Ok(Split {
        train: idx[..a].to_vec(),
        val: idx[a..a + b].to_vec(),
        test: idx[a + b..a + b + c].to_vec(),
    })
}

pub fn select<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Graphs, features and reciprocal bases for every structure, built in
/// parallel on the current rayon pool. Output order matches input order.
pub fn prepare_all(
    structures: &[CrystalStructure],
    cfg: &ModelConfig,
    table: &AtomFeatureTable,
) -> Result<Vec<PreparedStructure>> {
    structures
        .par_iter()
        .map(|s| PreparedStructure::new(s, cfg, table))
        .collect()
}

/// Per-task z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(num_tasks: usize) -> Self {
        Self {
            mean: vec![0.0; num_tasks],
            std: vec![1.0; num_tasks],
        }
    }

    /// Mean and population standard deviation of the present labels per task.
    /// Tasks without labels, or with zero spread, get std 1.
    pub fn fit(items: &[PreparedStructure], num_tasks: usize) -> Self {
        let mut mean = vec![0.0; num_tasks];
        let mut std = vec![1.0; num_tasks];
        for t in 0..num_tasks {
            let ys: Vec<f64> = items.iter().filter_map(|p| p.targets[t]).collect();
            if ys.is_empty() {
                continue;
            }
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            let v = ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / ys.len() as f64;
            mean[t] = m;
            if v.sqrt() > 1e-12 {
                std[t] = v.sqrt();
            }
        }
        Self { mean, std }
    }

    /// Standardises the present entries of `labels` in place.
    pub fn normalize(&self, labels: &mut Tensor, mask: &Tensor) {
        for ((i, t), y) in labels.indexed_iter_mut() {
            if mask[[i, t]] != 0.0 {
                *y = (*y - self.mean[t]) / self.std[t];
            }
        }
    }

    pub fn denormalize(&self, preds: &Tensor) -> Tensor {
        let mut out = preds.clone();
        for ((_, t), y) in out.indexed_iter_mut() {
            *y = *y * self.std[t] + self.mean[t];
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaskedLoss {
    pub loss: Var,
    pub present: usize,
}

impl MaskedLoss {
    /// Set when no label was present; the loss is then a constant zero.
    pub fn is_empty(&self) -> bool {
        self.present == 0
    }
}

/// Mean of `|pred − label|` over present entries. Labels under a cleared mask
/// are ignored entirely.
pub fn masked_l1(
    tape: &mut Tape,
    preds: Var,
    labels: &Tensor,
    mask: &Tensor,
) -> Result<MaskedLoss> {
    let shape = tape.shape(preds);
    if labels.dim() != shape || mask.dim() != shape {
        return Err(Error::shape(
            "masked_l1",
            format!(
                "preds {shape:?}, labels {:?}, mask {:?}",
                labels.dim(),
                mask.dim()
            ),
        ));
    }
    let present = mask.iter().filter(|&&m| m != 0.0).count();
    if present == 0 {
        return Ok(MaskedLoss {
            loss: tape.constant(Tensor::zeros((1, 1))),
            present,
        });
    }
    let clean = ndarray::Zip::from(labels)
        .and(mask)
        .map_collect(|&y, &m| if m != 0.0 { y } else { 0.0 });
    let y = tape.constant(clean);
    let diff = tape.sub(preds, y)?;
    let diff = tape.mul_const(diff, mask.clone())?;
    let abs = tape.abs(diff);
    let total = tape.sum(abs);
    Ok(MaskedLoss {
        loss: tape.scale(total, 1.0 / present as f64),
        present,
    })
}

/// Per-task mean absolute error over present entries; `None` for tasks with no
/// labels.
pub fn per_task_mae(preds: &Tensor, labels: &Tensor, mask: &Tensor) -> Vec<Option<f64>> {
    (0..preds.ncols())
        .map(|t| {
            let (mut s, mut n) = (0.0, 0usize);
            for i in 0..preds.nrows() {
                if mask[[i, t]] != 0.0 {
                    s += (preds[[i, t]] - labels[[i, t]]).abs();
                    n += 1;
                }
            }
            (n > 0).then(|| s / n as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::random_structure;
    use proptest::prelude::*;

    fn sample(n: usize) -> Vec<CrystalStructure> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..n)
            .map(|i| {
                let mut s = random_structure(&mut rng, 1..=4);
                s.labels.insert("e_form".into(), Some(i as f64 * 0.1 - 1.0));
                s.labels
                    .insert("gap".into(), if i % 3 == 0 { None } else { Some(i as f64) });
                s
            })
            .collect()
    }

    #[test]
    fn empty_file() {
        assert!(parse_dataset("", true).unwrap().structures.is_empty());
        assert!(parse_dataset("\n\n  \n", true)
            .unwrap()
            .structures
            .is_empty());
    }

    #[test]
    fn round_trip() {
        let s = sample(10);
        let text = to_jsonl(&s).unwrap();
        let back = parse_dataset(&text, true).unwrap();
        assert_eq!(back.structures, s);
        assert_eq!(to_jsonl(&back.structures).unwrap(), text);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &s).unwrap();
        assert_eq!(load_dataset(&path, true).unwrap().structures, s);
    }

    #[test]
    fn missing_target_clears_mask() {
        let line = r#"{"id":"x","lattice":[[3,0,0],[0,3,0],[0,0,3]],"frac_coords":[[0,0,0]],"atomic_numbers":[11],"targets":{"a":1.5}}"#;
        let d = parse_dataset(line, true).unwrap();
        let cfg = ModelConfig {
            tasks: vec!["a".into(), "b".into()],
            k_neighbors: 4,
            ..Default::default()
        };
        let p =
            PreparedStructure::new(&d.structures[0], &cfg, &AtomFeatureTable::one_hot()).unwrap();
        assert_eq!(p.targets, vec![Some(1.5), None]);
        let b = crate::model::BatchedInput::new(&[&p], &cfg.edge).unwrap();
        assert_eq!(b.mask, ndarray::array![[1.0, 0.0]]);
    }

    #[test]
    fn parse_and_validation_errors() {
        let bad_json = "{\"id\": \"x\"\n";
        assert!(matches!(
            parse_dataset(bad_json, false),
            Err(Error::Parse { line: 1, .. })
        ));
        let degenerate = r#"{"id":"d","lattice":[[1,0,0],[1,0,0],[0,0,1]],"frac_coords":[[0,0,0]],"atomic_numbers":[1]}"#;
        let ok = r#"{"id":"o","lattice":[[2,0,0],[0,2,0],[0,0,2]],"frac_coords":[[0,0,0]],"atomic_numbers":[1]}"#;
        let text = format!("{ok}\n{degenerate}\n");
        assert!(matches!(
            parse_dataset(&text, true),
            Err(Error::Validation { .. })
        ));
        let lenient = parse_dataset(&text, false).unwrap();
        assert_eq!(lenient.structures.len(), 1);
        assert_eq!(lenient.rejected[0].line, 2);
        assert_eq!(lenient.rejected[0].id, "d");
    }

    #[test]
    fn ratio_split_arithmetic() {
        let spec = SplitSpec::default();
        let s = split_dataset(100, &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split_dataset(100, &spec).unwrap());
        let other = split_dataset(100, &SplitSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(s, other);
        let too_many = SplitSpec {
            sizes: SplitSizes::Counts {
                train: 50,
                val: 30,
                test: 30,
            },
            seed: 0,
        };
        assert!(matches!(
            split_dataset(100, &too_many),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn splits_are_disjoint(n in 0usize..300, a in 0.0f64..0.7, b in 0.0f64..0.15, seed: u64) {
            let spec = SplitSpec { sizes: SplitSizes::Ratios { train: a, val: b, test: 0.15 }, seed };
            let s = split_dataset(n, &spec).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            let total = all.len();
            prop_assert!(total <= n);
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), total);
        }
    }

    #[test]
    fn masked_l1_examples() {
        let mut t = Tape::new();
        let p = t.input(ndarray::array![[3.0]]);
        let l = masked_l1(&mut t, p, &ndarray::array![[1.0]], &ndarray::array![[1.0]]).unwrap();
        assert_eq!(t.scalar(l.loss), 2.0);

        let preds = ndarray::array![[0.5, 1.0], [2.0, -1.0]];
        let p = t.input(preds.clone());
        let l = masked_l1(&mut t, p, &preds, &Tensor::ones((2, 2))).unwrap();
        assert_eq!(t.scalar(l.loss), 0.0);

        let p = t.input(ndarray::array![[1.0, 5.0], [2.0, 7.0]]);
        let mask = ndarray::array![[1.0, 0.0], [1.0, 0.0]];
        let l = masked_l1(
            &mut t,
            p,
            &ndarray::array![[0.0, f64::NAN], [0.0, 1e30]],
            &mask,
        )
        .unwrap();
        assert_eq!(t.scalar(l.loss), 1.5);
        t.backward(l.loss).unwrap();
        let g = t.grad(p).unwrap();
        assert_eq!(g[[0, 1]], 0.0);
        assert_eq!(g[[1, 1]], 0.0);
        assert_eq!(g[[0, 0]], 0.5);

        let p = t.input(Tensor::ones((2, 2)));
        let l = masked_l1(&mut t, p, &Tensor::ones((2, 2)), &Tensor::zeros((2, 2))).unwrap();
        assert!(l.is_empty());
        assert_eq!(t.scalar(l.loss), 0.0);
    }

    #[test]
    fn normalizer_round_trip() {
        let cfg = ModelConfig {
            tasks: vec!["e_form".into(), "gap".into()],
            k_neighbors: 2,
            ..Default::default()
        };
        let p = prepare_all(&sample(12), &cfg, &AtomFeatureTable::one_hot()).unwrap();
        let norm = Normalizer::fit(&p, 2);
        let refs: Vec<&PreparedStructure> = p.iter().collect();
        let b = crate::model::BatchedInput::new(&refs, &cfg.edge).unwrap();
        let mut y = b.labels.clone();
        norm.normalize(&mut y, &b.mask);
        for t in 0..2 {
            let col: Vec<f64> = (0..12)
                .filter(|&i| b.mask[[i, t]] != 0.0)
                .map(|i| y[[i, t]])
                .collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        let back = norm.denormalize(&y);
        for ((i, t), &v) in back.indexed_iter() {
            if b.mask[[i, t]] != 0.0 {
                assert!((v - b.labels[[i, t]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_predictor_mae_is_mean_absolute_deviation() {
        let ys = [1.0, 4.0, 2.5, -3.0, 0.0, 7.5, 2.0, 2.0, -1.0, 5.0];
        let mean = ys.iter().sum::<f64>() / 10.0;
        let mad = ys.iter().map(|y| (y - mean).abs()).sum::<f64>() / 10.0;
        let labels = Tensor::from_shape_vec((10, 1), ys.to_vec()).unwrap();
        let preds = Tensor::from_elem((10, 1), mean);
        let mae = per_task_mae(&preds, &labels, &Tensor::ones((10, 1)));
        assert!((mae[0].unwrap() - mad).abs() < 1e-15);
        assert_eq!(
            per_task_mae(&preds, &labels, &Tensor::zeros((10, 1))),
            vec![None]
        );
        assert_eq!(
            per_task_mae(&labels, &labels, &Tensor::ones((10, 1))),
            vec![Some(0.0)]
        );
    }
}
