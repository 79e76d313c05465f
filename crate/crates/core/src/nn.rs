//! Small layer building blocks over the tape.

use rand::Rng;

use crate::autodiff::{BatchNormMode, BatchStats, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// `x · W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_scale(store, name, fan_in, fan_out, bias, 1.0, rng)
    }

    /// Uniform init with bound `scale / √fan_in` on weights and bias.
    pub fn with_scale<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            (fan_in, fan_out),
            fan_in,
            scale,
            rng,
        )?;
        let bias = if bias {
            Some(store.add_uniform(format!("{name}.bias"), (1, fan_out), fan_in, scale, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// Two linear layers with a SiLU in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), fan_in, hidden, true, rng)?,
            second: Linear::new(store, &format!("{name}.1"), hidden, fan_out, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.silu(h);
        self.second.forward(tape, store, h)
    }
}

/// Whether batch norms use batch statistics (and record them) or the stored
/// running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Batch statistics observed during a training forward pass, to be folded into
/// the running statistics once the step is taken.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// Per-forward-pass state shared by all layers.
#[derive(Debug)]
pub struct Ctx {
    pub phase: Phase,
    pub bn_updates: Vec<BnUpdate>,
}

impl Ctx {
    pub fn new(phase: Phase) -> Self {
        Self {
            phase,
            bn_updates: Vec::new(),
        }
    }

    pub fn train() -> Self {
        Self::new(Phase::Train)
    }

    pub fn eval() -> Self {
        Self::new(Phase::Eval)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Batch norm over rows with learned affine terms and running statistics kept
/// as non-trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones((1, width)), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros((1, width)), true)?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros((1, width)),
                false,
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones((1, width)),
                false,
            )?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match ctx.phase {
            Phase::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, BatchNormMode::Train)?;
                ctx.bn_updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    stats: stats.expect("training mode returns statistics"),
                });
                Ok(y)
            }
            Phase::Eval => {
                let mode = BatchNormMode::Eval {
                    mean: store.value(self.running_mean),
                    var: store.value(self.running_var),
                };
                Ok(tape.batch_norm(x, gamma, beta, mode)?.0)
            }
        }
    }
}

/// `running ← (1 − momentum)·running + momentum·batch` for every recorded update.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        let m = store.value_mut(u.running_mean);
        m.zip_mut_with(&u.stats.mean, |r, &b| {
            *r = (1.0 - momentum) * *r + momentum * b
        });
        let v = store.value_mut(u.running_var);
        v.zip_mut_with(&u.stats.var, |r, &b| {
            *r = (1.0 - momentum) * *r + momentum * b
        });
    }
}
