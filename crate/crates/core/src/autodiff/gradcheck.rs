//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many entries of each parameter (sampled
    /// deterministically); `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖₂ / (‖numeric‖₂ + 1e−12)` over the checked entries.
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::shape("grad_check", "function must return a scalar"));
    }
    Ok(tape.scalar(out))
}

/// Compares analytic gradients of the scalar `f` against central differences
/// for every trainable parameter in `which` (all trainable parameters when
/// `None`). `f` must be deterministic; this is verified by evaluating it twice.
pub fn grad_check<F>(
    store: &mut ParamStore,
    which: Option<&[ParamId]>,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    let base = tape.scalar(out);
    let again = eval(store, &mut f)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NondeterministicFunction {
            first: base,
            second: again,
        });
    }
    tape.backward(out)?;

    let ids: Vec<ParamId> = match which {
        Some(ids) => ids.to_vec(),
        None => store.ids().filter(|&id| store.get(id).trainable).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.value(id).len();
        let analytic = tape
            .param_grad(id)
            .cloned()
            .map(|g| g.as_standard_layout().into_owned())
            .unwrap_or_else(|| super::Tensor::zeros(store.value(id).dim()));
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(m) if m < len => {
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let (mut diff2, mut num2, mut ana2) = (0.0, 0.0, 0.0);
        for &e in &entries {
            let original = store.value(id).as_slice().expect("contiguous")[e];
            store.value_mut(id).as_slice_mut().expect("contiguous")[e] = original + opts.eps;
            let plus = eval(store, &mut f);
            store.value_mut(id).as_slice_mut().expect("contiguous")[e] = original - opts.eps;
            let minus = eval(store, &mut f);
            store.value_mut(id).as_slice_mut().expect("contiguous")[e] = original;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = analytic.as_slice().expect("contiguous")[e];
            diff2 += (a - numeric).powi(2);
            num2 += numeric * numeric;
            ana2 += a * a;
        }
        let rel_error = diff2.sqrt() / (num2.sqrt() + 1e-12);
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            entries: entries.len(),
            analytic_norm: ana2.sqrt(),
            numeric_norm: num2.sqrt(),
            rel_error,
        });
    }
    let max_rel_error = params.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        max_rel_error,
    })
}
