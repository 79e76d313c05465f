//! Minibatch training with AdamW and the one-cycle schedule, evaluation and
//! expert-usage analytics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{adamw_step, AdamWConfig, AdamWState, OneCycle};
use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::data::{masked_l1, per_task_mae, Normalizer};
use crate::error::{Error, Result};
use crate::model::{init_params, BatchedInput, Decoder, Model, ModelConfig, PreparedStructure};
use crate::moe::{ExpertUsage, UsageAccumulator, UsageMode};
use crate::nn::{apply_bn_updates, Ctx, BN_MOMENTUM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: OneCycle,
    pub bn_momentum: f64,
    /// Seeds minibatch shuffling and gate noise. Initialisation uses the model
    /// seed.
    pub seed: u64,
    /// Standardise labels per task with train-split statistics.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            schedule: OneCycle::default(),
            bn_momentum: BN_MOMENTUM,
            seed: 0,
            normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "bn_momentum {} not in [0, 1]",
                self.bn_momentum
            )));
        }
        if !(self.schedule.max_lr > 0.0)
            || !(self.schedule.div_factor > 0.0)
            || !(self.schedule.final_div > 0.0)
        {
            return Err(Error::Config(
                "learning-rate schedule must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Metrics for one completed epoch. MAEs are in label units; `None` marks a
/// task without labels in that split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss (normalised units), averaged over steps.
    pub train_loss: f64,
    /// Running MAE over the epoch's training batches, in training mode.
    pub train_mae: Vec<Option<f64>>,
    pub val_mae: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochMetrics>,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamWState,
    pub cfg: TrainConfig,
    pub normalizer: Normalizer,
    pub state: TrainState,
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn noise_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | step as u64);
    rng
}

/// Builds every batch in parallel; the result is in `chunks` order.
fn assemble(
    items: &[PreparedStructure],
    chunks: &[Vec<usize>],
    cfg: &ModelConfig,
) -> Result<Vec<BatchedInput>> {
    chunks
        .par_iter()
        .map(|c| {
            let refs: Vec<&PreparedStructure> = c.iter().map(|&i| &items[i]).collect();
            BatchedInput::new(&refs, &cfg.edge)
        })
        .collect()
}

/// Mean of the present per-task MAEs after dividing by the label scale.
fn score(mae: &[Option<f64>], norm: &Normalizer) -> Option<f64> {
    let v: Vec<f64> = mae
        .iter()
        .zip(&norm.std)
        .filter_map(|(m, s)| m.map(|m| m / s))
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Trainer {
    /// Fresh model from `model_cfg.seed`; label statistics come from `train`.
    pub fn new(
        model_cfg: &ModelConfig,
        cfg: TrainConfig,
        train: &[PreparedStructure],
    ) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = init_params(model_cfg)?;
        let t = model.num_tasks();
        let normalizer = if cfg.normalize {
            Normalizer::fit(train, t)
        } else {
            Normalizer::identity(t)
        };
        Ok(Self {
            optimizer: AdamWState::new(&store),
            model,
            store,
            cfg,
            normalizer,
            state: TrainState::default(),
        })
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.cfg.epochs * self.batches_per_epoch(n)
    }

    /// Runs epochs until `cfg.epochs` are complete, calling `on_epoch` after
    /// each with the metrics and whether the epoch set a new best score.
    pub fn fit<F>(
        &mut self,
        train: &[PreparedStructure],
        val: &[PreparedStructure],
        mut on_epoch: F,
    ) -> Result<()>
    where
        F: FnMut(&Trainer, &EpochMetrics, bool) -> Result<()>,
    {
        while self.state.epoch < self.cfg.epochs {
            let (m, best) = self.run_epoch(train, val)?;
            on_epoch(self, &m, best)?;
        }
        Ok(())
    }

    /// One pass over `train` followed by validation. Returns the metrics and
    /// whether this epoch improved the best score (validation MAE, or training
    /// MAE when there is no validation data).
    pub fn run_epoch(
        &mut self,
        train: &[PreparedStructure],
        val: &[PreparedStructure],
    ) -> Result<(EpochMetrics, bool)> {
        if train.is_empty() {
            return Err(Error::EmptySplit);
        }
        let epoch = self.state.epoch;
        let total = self.total_steps(train.len());
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng(self.cfg.seed, epoch));
        let chunks: Vec<Vec<usize>> = order
            .chunks(self.cfg.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        let batches = assemble(train, &chunks, &self.model.cfg)?;

        let t = self.model.num_tasks();
        let (mut abs_sum, mut count) = (vec![0.0; t], vec![0usize; t]);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for batch in &batches {
            lr = self.cfg.schedule.lr(self.state.step, total.max(1))?;
            let (loss, preds) = self.step(batch, lr)?;
            loss_sum += loss;
            let preds = self.normalizer.denormalize(&preds);
            for ((i, j), &m) in batch.mask.indexed_iter() {
                if m != 0.0 {
                    abs_sum[j] += (preds[[i, j]] - batch.labels[[i, j]]).abs();
                    count[j] += 1;
                }
            }
        }
        let train_mae = abs_sum
            .iter()
            .zip(&count)
            .map(|(s, &n)| (n > 0).then(|| s / n as f64))
            .collect::<Vec<_>>();
        let val_mae = if val.is_empty() {
            vec![None; t]
        } else {
            evaluate(
                &self.model,
                &self.store,
                &self.normalizer,
                val,
                self.cfg.batch_size,
            )?
        };
        self.state.epoch += 1;
        let metrics = EpochMetrics {
            epoch: self.state.epoch,
            lr,
            train_loss: loss_sum / batches.len() as f64,
            train_mae,
            val_mae,
        };
        let s = if val.is_empty() {
            score(&metrics.train_mae, &self.normalizer)
        } else {
            score(&metrics.val_mae, &self.normalizer)
        };
        let best = match (s, self.state.best_score) {
            (Some(s), Some(b)) => s < b,
            (Some(_), None) => true,
            _ => false,
        };
        if best {
            self.state.best_score = s;
            self.state.best_epoch = Some(self.state.epoch);
        }
        log::debug!(
            "epoch {} lr {:.3e} loss {:.5} train {:?} val {:?}",
            metrics.epoch,
            metrics.lr,
            metrics.train_loss,
            metrics.train_mae,
            metrics.val_mae
        );
        self.state.history.push(metrics.clone());
        Ok((metrics, best))
    }

    /// One optimizer step. Returns the loss and the normalised predictions.
    fn step(&mut self, batch: &BatchedInput, lr: f64) -> Result<(f64, Tensor)> {
        let step = self.state.step;
        let fail = |grad_norm: f64| Error::NonFiniteLoss {
            step,
            lr,
            grad_norm,
            batch_ids: batch.ids.clone(),
        };
        let mut labels = batch.labels.clone();
        self.normalizer.normalize(&mut labels, &batch.mask);

        let mut tape = Tape::new();
        let mut ctx = Ctx::train();
        let mut rng = noise_rng(self.cfg.seed, step);
        let out = self
            .model
            .forward(&mut tape, &self.store, batch, &mut ctx, Some(&mut rng))?;
        let l1 = masked_l1(&mut tape, out.predictions, &labels, &batch.mask)?;
        if l1.is_empty() {
            log::warn!("step {step}: batch has no labels");
        }
        let loss = match out.aux_loss {
            Some(a) => tape.add(l1.loss, a)?,
            None => l1.loss,
        };
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(fail(f64::NAN));
        }
        tape.backward(loss)?;
        let grads = tape.param_grads();
        let grad_norm = grads
            .iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(fail(grad_norm));
        }
        adamw_step(
            &mut self.store,
            &grads,
            &mut self.optimizer,
            lr,
            &self.cfg.optimizer,
        )?;
        apply_bn_updates(&mut self.store, &ctx.bn_updates, self.cfg.bn_momentum);
        self.state.step += 1;
        Ok((value, tape.value(out.predictions).clone()))
    }
}

fn chunk_indices(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Eval-mode predictions in label units, one row per item. Batches run in
/// parallel; results do not depend on batch composition.
pub fn predict(
    model: &Model,
    store: &ParamStore,
    normalizer: &Normalizer,
    items: &[PreparedStructure],
    batch_size: usize,
) -> Result<Tensor> {
    let t = model.num_tasks();
    let parts = chunk_indices(items.len(), batch_size)
        .par_iter()
        .map(|c| {
            let refs: Vec<&PreparedStructure> = c.iter().map(|&i| &items[i]).collect();
            let batch = BatchedInput::new(&refs, &model.cfg.edge)?;
            Ok(normalizer.denormalize(&model.predict(store, &batch)?))
        })
        .collect::<Result<Vec<Tensor>>>()?;
    let mut out = Tensor::zeros((items.len(), t));
    let mut row = 0;
    for p in parts {
        out.slice_mut(ndarray::s![row..row + p.nrows(), ..])
            .assign(&p);
        row += p.nrows();
    }
    Ok(out)
}

/// Labels and presence mask for `items`, `n × T`.
pub fn label_matrix(items: &[PreparedStructure], num_tasks: usize) -> (Tensor, Tensor) {
    let mut y = Tensor::zeros((items.len(), num_tasks));
    let mut m = Tensor::zeros((items.len(), num_tasks));
    for (i, p) in items.iter().enumerate() {
        for (t, v) in p.targets.iter().enumerate() {
            if let Some(v) = v {
                y[[i, t]] = *v;
                m[[i, t]] = 1.0;
            }
        }
    }
    (y, m)
}

/// Per-task MAE in label units over present labels; `None` for tasks without
/// any label in `items`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    normalizer: &Normalizer,
    items: &[PreparedStructure],
    batch_size: usize,
) -> Result<Vec<Option<f64>>> {
    if items.is_empty() {
        return Err(Error::EmptySplit);
    }
    let preds = predict(model, store, normalizer, items, batch_size)?;
    let (y, m) = label_matrix(items, model.num_tasks());
    Ok(per_task_mae(&preds, &y, &m))
}

/// Eval-mode gate statistics over every structure in `items`.
pub fn expert_usage(
    model: &Model,
    store: &ParamStore,
    items: &[PreparedStructure],
    batch_size: usize,
    mode: UsageMode,
) -> Result<ExpertUsage> {
    let Decoder::Moe(moe) = &model.decoder else {
        return Err(Error::Config(
            "expert usage needs a mixture-of-experts decoder".into(),
        ));
    };
    let t = model.num_tasks();
    let mut acc = UsageAccumulator::new(t, moe.cfg.num_experts, mode);
    for c in chunk_indices(items.len(), batch_size) {
        let refs: Vec<&PreparedStructure> = c.iter().map(|&i| &items[i]).collect();
        let batch = BatchedInput::new(&refs, &model.cfg.edge)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &batch, &mut Ctx::eval(), None)?;
        let (mut w, mut m): (Vec<Tensor>, Vec<Tensor>) = out
            .gates
            .iter()
            .map(|g| (tape.value(g.weights).clone(), g.mask.clone()))
            .unzip();
        if w.len() == 1 && t > 1 {
            w = vec![w[0].clone(); t];
            m = vec![m[0].clone(); t];
        }
        acc.add(&w, &m)?;
    }
    acc.finish(&model.cfg.tasks)
}

/// CSV with one row per epoch and split: `epoch,split,lr,mae_<task>...`.
/// Absent MAEs are left empty.
pub fn metrics_csv(history: &[EpochMetrics], tasks: &[String]) -> String {
    let mut s = String::from("epoch,split,lr");
    for t in tasks {
        s += &format!(",mae_{t}");
    }
    s.push('\n');
    for m in history {
        for (split, mae) in [("train", &m.train_mae), ("val", &m.val_mae)] {
            s += &format!("{},{split},{:e}", m.epoch, m.lr);
            for v in mae {
                s.push(',');
                if let Some(v) = v {
                    s += &v.to_string();
                }
            }
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::prepare_all;
    use crate::embed::AtomFeatureTable;
    use crate::moe::MoeConfig;
    use crate::testing::random_structure;

    pub(crate) fn toy(
        n: usize,
        tasks: &[&str],
        seed: u64,
    ) -> Vec<crate::lattice::CrystalStructure> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut s = random_structure(&mut rng, 1..=3);
                for (j, t) in tasks.iter().enumerate() {
                    let y = s.atomic_numbers.iter().map(|&z| z as f64).sum::<f64>()
                        / s.num_atoms() as f64;
                    let v = (i + j) % 4 != 3 || j == 0;
                    s.labels
                        .insert((*t).into(), v.then_some(y * (j + 1) as f64));
                }
                s
            })
            .collect()
    }

    fn small_cfg(tasks: &[&str]) -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            hidden: 8,
            k_neighbors: 4,
            tasks: tasks.iter().map(|s| s.to_string()).collect(),
            moe: (tasks.len() > 1).then(|| MoeConfig {
                num_experts: 4,
                top_k: 2,
                ..Default::default()
            }),
            ..Default::default()
        }
    }

    fn prepared(cfg: &ModelConfig, n: usize) -> Vec<PreparedStructure> {
        let tasks: Vec<&str> = cfg.tasks.iter().map(String::as_str).collect();
        prepare_all(&toy(n, &tasks, 3), cfg, &AtomFeatureTable::one_hot()).unwrap()
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let cfg = small_cfg(&["a"]);
        let items = prepared(&cfg, 6);
        let tc = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let mut tr = Trainer::new(&cfg, tc, &items).unwrap();
        tr.fit(&items, &[], |_, _, _| Ok(())).unwrap();
        assert_eq!(tr.store, init_params(&cfg).unwrap().1);
        assert_eq!(tr.state.step, 0);
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = small_cfg(&["a"]);
        let items = prepared(&cfg, 16);
        let tc = TrainConfig {
            epochs: 30,
            batch_size: 8,
            schedule: OneCycle {
                max_lr: 5e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut tr = Trainer::new(&cfg, tc, &items).unwrap();
        tr.fit(&items, &items[..4], |_, _, _| Ok(())).unwrap();
        let h = &tr.state.history;
        assert_eq!(h.len(), 30);
        assert_eq!(tr.state.step, 60);
        assert!(
            h[29].train_loss < 0.5 * h[0].train_loss,
            "{} vs {}",
            h[29].train_loss,
            h[0].train_loss
        );
        assert!(tr.state.best_epoch.is_some());
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = small_cfg(&["a", "b"]);
        let items = prepared(&cfg, 10);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let run = || {
            let mut tr = Trainer::new(&cfg, tc.clone(), &items).unwrap();
            tr.fit(&items, &items[..3], |_, _, _| Ok(())).unwrap();
            tr
        };
        let (a, b) = (run(), run());
        assert_eq!(a.store, b.store);
        assert_eq!(a.optimizer, b.optimizer);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn evaluate_matches_per_structure_predictions() {
        let cfg = small_cfg(&["a", "b"]);
        let items = prepared(&cfg, 7);
        let tr = Trainer::new(&cfg, TrainConfig::default(), &items).unwrap();
        let all = predict(&tr.model, &tr.store, &tr.normalizer, &items, 3).unwrap();
        for (i, it) in items.iter().enumerate() {
            let one = predict(
                &tr.model,
                &tr.store,
                &tr.normalizer,
                std::slice::from_ref(it),
                1,
            )
            .unwrap();
            for t in 0..2 {
                assert!((one[[0, t]] - all[[i, t]]).abs() < 1e-10);
            }
        }
        let mae = evaluate(&tr.model, &tr.store, &tr.normalizer, &items, 4).unwrap();
        assert!(mae.iter().all(|m| m.is_some()));
        assert!(matches!(
            evaluate(&tr.model, &tr.store, &tr.normalizer, &[], 4),
            Err(Error::EmptySplit)
        ));
    }

    #[test]
    fn usage_contract() {
        let cfg = small_cfg(&["a", "b", "c"]);
        let items = prepared(&cfg, 9);
        let tr = Trainer::new(&cfg, TrainConfig::default(), &items).unwrap();
        for mode in [UsageMode::Weights, UsageMode::Indicator] {
            let u = expert_usage(&tr.model, &tr.store, &items, 4, mode).unwrap();
            for f in u.frequencies.values() {
                assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for i in 0..3 {
                assert!((u.similarity[i][i] - 1.0).abs() < 1e-12);
                for j in 0..3 {
                    assert_eq!(u.similarity[i][j], u.similarity[j][i]);
                }
            }
        }
        let stl = small_cfg(&["a"]);
        let p = prepared(&stl, 2);
        let tr = Trainer::new(&stl, TrainConfig::default(), &p).unwrap();
        assert!(expert_usage(&tr.model, &tr.store, &p, 4, UsageMode::Weights).is_err());
    }

    #[test]
    fn non_finite_loss_reports_batch() {
        let cfg = small_cfg(&["a"]);
        let mut items = prepared(&cfg, 4);
        items[2].targets[0] = Some(f64::INFINITY);
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            normalize: false,
            ..Default::default()
        };
        let mut tr = Trainer::new(&cfg, tc, &items).unwrap();
        match tr.fit(&items, &[], |_, _, _| Ok(())) {
            Err(Error::NonFiniteLoss {
                step, batch_ids, ..
            }) => {
                assert_eq!(step, 0);
                assert_eq!(batch_ids.len(), 4);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let h = vec![EpochMetrics {
            epoch: 1,
            lr: 1e-3,
            train_loss: 0.5,
            train_mae: vec![Some(0.25), None],
            val_mae: vec![Some(0.5), Some(1.0)],
        }];
        let csv = metrics_csv(&h, &["x".into(), "y".into()]);
        assert_eq!(
            csv,
            "epoch,split,lr,mae_x,mae_y\n1,train,1e-3,0.25,\n1,val,1e-3,0.5,1\n"
        );
    }
}
