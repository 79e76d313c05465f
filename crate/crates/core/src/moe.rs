//! Noisy top-K mixture of experts, task heads and expert-usage analytics.
//!
//! Gate: `G(x) = TopK(softmax(xW + ζ·softplus(xW_noise)))` with `ζ ~ N(0, 1)`
//! drawn outside the graph. Entries outside the top K are zeroed without
//! renormalising, unless `renormalize` is set, in which case the softmax is
//! taken over the selected logits only.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub noise: bool,
    pub renormalize: bool,
    /// One gate per task over a shared expert bank; otherwise a single gate
    /// feeds every head.
    pub per_task_gates: bool,
    /// Weight of the CV² importance loss; 0 disables it.
    pub importance_weight: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 15,
            top_k: 4,
            noise: true,
            renormalize: false,
            per_task_gates: true,
            importance_weight: 0.0,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k = {} must lie in 1..={}",
                self.top_k, self.num_experts
            )));
        }
        if !(self.importance_weight >= 0.0 && self.importance_weight.is_finite()) {
            return Err(Error::Config(
                "importance_weight must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateParams {
    pub w: ParamId,
    pub w_noise: ParamId,
}

impl GateParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        num_experts: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_uniform(format!("{name}.w"), (width, num_experts), width, 1.0, rng)?,
            w_noise: store.add_uniform(
                format!("{name}.w_noise"),
                (width, num_experts),
                width,
                1.0,
                rng,
            )?,
        })
    }
}

/// Indices of the `k` largest entries of `row`; ties go to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Standard-normal gate noise, `rows × num_experts`.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, num_experts: usize) -> Tensor {
    Tensor::from_shape_fn((rows, num_experts), |_| rng.sample(StandardNormal))
}

#[derive(Debug, Clone)]
pub struct GateOutput {
    /// `batch × N` sparse mixture weights.
    pub weights: Var,
    /// `batch × N` 0/1 selection mask.
    pub mask: Tensor,
}

/// Gate weights for `x`. `noise` holds `ζ`; `None` disables the noise term.
pub fn gate(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    params: &GateParams,
    top_k: usize,
    noise: Option<&Tensor>,
    renormalize: bool,
) -> Result<GateOutput> {
    let n_exp = store.value(params.w).ncols();
    if top_k == 0 || top_k > n_exp {
        return Err(Error::Config(format!(
            "top_k = {top_k} must lie in 1..={n_exp}"
        )));
    }
    let w = tape.param(store, params.w);
    let mut logits = tape.matmul(x, w)?;
    if let Some(z) = noise {
        if z.dim() != tape.shape(logits) {
            return Err(Error::shape(
                "gate",
                format!("noise {:?} for logits {:?}", z.dim(), tape.shape(logits)),
            ));
        }
        let wn = tape.param(store, params.w_noise);
        let s = tape.matmul(x, wn)?;
        let s = tape.softplus(s);
        let s = tape.mul_const(s, z.clone())?;
        logits = tape.add(logits, s)?;
    }
    let lv = tape.value(logits);
    let mut mask = Tensor::zeros(lv.dim());
    for (i, row) in lv.rows().into_iter().enumerate() {
        let row: Vec<f64> = row.to_vec();
        for e in top_k_indices(&row, top_k) {
            mask[[i, e]] = 1.0;
        }
    }
    let weights = if renormalize {
        tape.softmax_masked(logits, Some(&mask))?
    } else {
        let p = tape.softmax(logits)?;
        tape.mul_const(p, mask.clone())?
    };
    Ok(GateOutput { weights, mask })
}

/// `Σₑ Gₑ(x)·Eₑ(x)`, evaluating each expert only on the rows that selected it.
pub fn moe_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    experts: &[Mlp2],
    g: &GateOutput,
) -> Result<Var> {
    let (batch, d) = tape.shape(x);
    if g.mask.dim() != (batch, experts.len()) {
        return Err(Error::shape(
            "moe_forward",
            format!(
                "mask {:?} for {} rows and {} experts",
                g.mask.dim(),
                batch,
                experts.len()
            ),
        ));
    }
    let mut out: Option<Var> = None;
    for (e, expert) in experts.iter().enumerate() {
        let rows: Vec<usize> = (0..batch).filter(|&i| g.mask[[i, e]] != 0.0).collect();
        if rows.is_empty() {
            continue;
        }
        let rows: Arc<[usize]> = rows.into();
        let xe = tape.gather_rows(x, rows.clone())?;
        let ye = expert.forward(tape, store, xe)?;
        let ge = tape.gather_cols(g.weights, Arc::from([e]))?;
        let ge = tape.gather_rows(ge, rows.clone())?;
        let ye = tape.mul_col(ye, ge)?;
        let ye = tape.segment_sum(ye, rows, batch)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, ye)?,
            None => ye,
        });
    }
    Ok(out.unwrap_or_else(|| tape.constant(Tensor::zeros((batch, d)))))
}

/// `CV²` of per-expert importance (gate weight summed over the batch):
/// `N·Σ imp² / (Σ imp)² − 1`.
pub fn importance_loss(tape: &mut Tape, weights: Var) -> Result<Var> {
    let n = tape.shape(weights).1 as f64;
    let imp = tape.sum_rows(weights);
    let sq = tape.unary(imp, Unary::Square);
    let s2 = tape.sum(sq);
    let s = tape.sum(imp);
    let ss = tape.mul(s, s)?;
    let r = tape.div(s2, ss)?;
    let r = tape.scale(r, n);
    Ok(tape.add_scalar(r, -1.0))
}

/// `linear → silu → linear` to a single output.
pub type Head = Mlp2;

pub fn new_head<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    width: usize,
    rng: &mut R,
) -> Result<Head> {
    Mlp2::new(store, name, width, width, 1, rng)
}

/// Applies head `t` to `inputs[t]` and stacks the results into `batch × T`.
pub fn task_heads(
    tape: &mut Tape,
    store: &ParamStore,
    inputs: &[Var],
    heads: &[Head],
) -> Result<Var> {
    if inputs.len() != heads.len() {
        return Err(Error::shape(
            "task_heads",
            format!("{} inputs for {} heads", inputs.len(), heads.len()),
        ));
    }
    let cols = inputs
        .iter()
        .zip(heads)
        .map(|(&y, h)| h.forward(tape, store, y))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&cols)
}

/// Mean-pools node rows per structure, then applies `head`.
pub fn single_task_decoder(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    node_to_structure: Arc<[usize]>,
    num_structures: usize,
    head: &Head,
) -> Result<Var> {
    let pooled = tape.segment_mean(h, node_to_structure, num_structures)?;
    head.forward(tape, store, pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UsageMode {
    /// Average the gate weights.
    #[default]
    Weights,
    /// Average the 0/1 top-K selections.
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertUsage {
    pub tasks: Vec<String>,
    /// Per task, selection frequencies over experts summing to 1.
    pub frequencies: BTreeMap<String, Vec<f64>>,
    /// Cosine similarity between task frequency vectors, in `tasks` order.
    pub similarity: Vec<Vec<f64>>,
}

/// Accumulates gate outputs per task; merge order does not affect the result
/// beyond floating-point summation order.
#[derive(Debug, Clone)]
pub struct UsageAccumulator {
    pub mode: UsageMode,
    sums: Vec<Vec<f64>>,
    rows: usize,
}

impl UsageAccumulator {
    pub fn new(num_tasks: usize, num_experts: usize, mode: UsageMode) -> Self {
        Self {
            mode,
            sums: vec![vec![0.0; num_experts]; num_tasks],
            rows: 0,
        }
    }

    /// `weights[t]` and `masks[t]` are the batch × N gate outputs for task `t`.
    pub fn add(&mut self, weights: &[Tensor], masks: &[Tensor]) -> Result<()> {
        if weights.len() != self.sums.len() || masks.len() != self.sums.len() {
            return Err(Error::shape(
                "expert_usage",
                "one gate output per task expected",
            ));
        }
        let mut rows = None;
        for (t, (w, m)) in weights.iter().zip(masks).enumerate() {
            let src = match self.mode {
                UsageMode::Weights => w,
                UsageMode::Indicator => m,
            };
            if src.ncols() != self.sums[t].len() || rows.is_some_and(|r| r != src.nrows()) {
                return Err(Error::shape(
                    "expert_usage",
                    format!("gate output {:?}", src.dim()),
                ));
            }
            rows = Some(src.nrows());
            for row in src.rows() {
                for (acc, &x) in self.sums[t].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        self.rows += rows.unwrap_or(0);
        Ok(())
    }

    pub fn finish(&self, tasks: &[String]) -> Result<ExpertUsage> {
        if self.rows == 0 {
            return Err(Error::EmptySplit);
        }
        if tasks.len() != self.sums.len() {
            return Err(Error::shape("expert_usage", "task names do not match"));
        }
        let freqs: Vec<Vec<f64>> = self
            .sums
            .iter()
            .map(|s| {
                let total: f64 = s.iter().sum();
                s.iter().map(|x| x / total).collect()
            })
            .collect();
        Ok(ExpertUsage {
            tasks: tasks.to_vec(),
            similarity: cosine_similarity(&freqs),
            frequencies: tasks.iter().cloned().zip(freqs).collect(),
        })
    }
}

pub fn cosine_similarity(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let t = vectors.len();
    let mut out = vec![vec![0.0; t]; t];
    for a in 0..t {
        for b in a..t {
            let s = if a == b {
                1.0
            } else {
                let dot: f64 = vectors[a].iter().zip(&vectors[b]).map(|(x, y)| x * y).sum();
                (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0)
            };
            out[a][b] = s;
            out[b][a] = s;
        }
    }
    out
}

impl ExpertUsage {
    pub fn to_text_table(&self) -> String {
        let n = self.frequencies.values().next().map_or(0, Vec::len);
        let width = self.tasks.iter().map(String::len).max().unwrap_or(4).max(4);
        let mut s = format!("{:width$}", "task");
        for e in 0..n {
            s += &format!(" {:>6}", format!("E{e}"));
        }
        s.push('\n');
        for t in &self.tasks {
            s += &format!("{t:width$}");
            for f in &self.frequencies[t] {
                s += &format!(" {f:>6.3}");
            }
            s.push('\n');
        }
        s += "\nsimilarity\n";
        for (t, row) in self.tasks.iter().zip(&self.similarity) {
            s += &format!("{t:width$}");
            for x in row {
                s += &format!(" {x:>6.3}");
            }
            s.push('\n');
        }
        s
    }
}

/// A bank of experts with one gate per task (or one shared gate) and one head
/// per task.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeDecoder {
    pub cfg: MoeConfig,
    pub experts: Vec<Mlp2>,
    pub gates: Vec<GateParams>,
    pub heads: Vec<Head>,
}

#[derive(Debug, Clone)]
pub struct MoeOutput {
    /// `batch × T`.
    pub predictions: Var,
    /// Per gate (one per task, or a single shared one).
    pub gates: Vec<GateOutput>,
    pub aux_loss: Option<Var>,
}

impl MoeDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        num_tasks: usize,
        cfg: MoeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let experts = (0..cfg.num_experts)
            .map(|e| {
                Mlp2::new(
                    store,
                    &format!("{name}.expert{e}"),
                    width,
                    width,
                    width,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let num_gates = if cfg.per_task_gates { num_tasks } else { 1 };
        let gates = (0..num_gates)
            .map(|g| {
                GateParams::new(
                    store,
                    &format!("{name}.gate{g}"),
                    width,
                    cfg.num_experts,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let heads = (0..num_tasks)
            .map(|t| new_head(store, &format!("{name}.head{t}"), width, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            experts,
            gates,
            heads,
        })
    }

    pub fn num_gates(&self) -> usize {
        self.gates.len()
    }

    /// `noise[g]` is the noise for gate `g`; pass `None` to run noise-free.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pooled: Var,
        noise: Option<&[Tensor]>,
    ) -> Result<MoeOutput> {
        if let Some(z) = noise {
            if z.len() != self.gates.len() {
                return Err(Error::shape(
                    "moe",
                    format!("{} noise tensors for {} gates", z.len(), self.gates.len()),
                ));
            }
        }
        let mut gates = Vec::with_capacity(self.gates.len());
        let mut mixed = Vec::with_capacity(self.gates.len());
        let mut aux: Option<Var> = None;
        for (g, params) in self.gates.iter().enumerate() {
            let z = noise.map(|z| &z[g]);
            let out = gate(
                tape,
                store,
                pooled,
                params,
                self.cfg.top_k,
                z,
                self.cfg.renormalize,
            )?;
            mixed.push(moe_forward(tape, store, pooled, &self.experts, &out)?);
            if self.cfg.importance_weight > 0.0 {
                let l = importance_loss(tape, out.weights)?;
                aux = Some(match aux {
                    Some(a) => tape.add(a, l)?,
                    None => l,
                });
            }
            gates.push(out);
        }
        let inputs: Vec<Var> = if self.cfg.per_task_gates {
            mixed
        } else {
            vec![mixed[0]; self.heads.len()]
        };
        let predictions = task_heads(tape, store, &inputs, &self.heads)?;
        let aux_loss = aux.map(|a| tape.scale(a, self.cfg.importance_weight));
        Ok(MoeOutput {
            predictions,
            gates,
            aux_loss,
        })
    }
}

/// Single-task readout: a head on the pooled embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StlDecoder {
    pub head: Head,
}

impl StlDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            head: new_head(store, &format!("{name}.head"), width, rng)?,
        })
    }
}

/// Zeroes a linear layer, for tests and ablations.
pub fn zero_linear(store: &mut ParamStore, l: &Linear) {
    store.value_mut(l.weight).fill(0.0);
    if let Some(b) = l.bias {
        store.value_mut(b).fill(0.0);
    }
}
