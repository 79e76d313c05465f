//! AdamW with decoupled weight decay, and the cosine one-cycle schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moment estimates, one pair per parameter (empty for
/// non-trainable parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |(_, p): (ParamId, &super::Parameter)| {
            if p.trainable {
                Tensor::zeros(p.value.dim())
            } else {
                Tensor::zeros((0, 0))
            }
        };
        Self {
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }
}

/// One AdamW update. `grads` lists gradients by parameter; trainable
/// parameters without an entry are treated as having zero gradient (weight
/// decay still applies).
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(ParamId, &Tensor)],
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "state holds {} entries for {} parameters",
                state.m.len(),
                store.len()
            ),
        ));
    }
    for (id, g) in grads {
        let p = store.get(*id);
        if g.dim() != p.value.dim() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "gradient {:?} for `{}` {:?}",
                    g.dim(),
                    p.name,
                    p.value.dim()
                ),
            ));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let mut by_id: Vec<Option<&Tensor>> = vec![None; store.len()];
    for (id, g) in grads {
        by_id[id.index()] = Some(g);
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in store.ids().collect::<Vec<_>>() {
        if !store.get(id).trainable {
            continue;
        }
        let i = id.index();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.value_mut(id);
        if m.dim() != p.dim() || v.dim() != p.dim() {
            return Err(Error::shape(
                "adamw_step",
                "moment shape differs from parameter",
            ));
        }
        let decay = 1.0 - lr * cfg.weight_decay;
        match by_id[i] {
            Some(g) => {
                ndarray::Zip::from(p)
                    .and(m)
                    .and(v)
                    .and(g)
                    .for_each(|p, m, v, &g| {
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p = *p * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
                    });
            }
            None => {
                ndarray::Zip::from(p).and(m).and(v).for_each(|p, m, v| {
                    *m *= cfg.beta1;
                    *v *= cfg.beta2;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneCycle {
    pub max_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            max_lr: 1e-3,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div: 1e4,
        }
    }
}

impl OneCycle {
    pub fn lr(&self, step: usize, total_steps: usize) -> Result<f64> {
        onecycle_lr(
            step,
            total_steps,
            self.max_lr,
            self.pct_start,
            self.div_factor,
            self.final_div,
        )
    }
}

fn cosine(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * (1.0 + (PI * pct).cos())
}

/// Cosine one-cycle schedule: rises from `max_lr / div_factor` to `max_lr` over
/// the first `pct_start · total_steps` steps, then anneals to `max_lr / final_div`
/// at `step == total_steps`.
pub fn onecycle_lr(
    step: usize,
    total_steps: usize,
    max_lr: f64,
    pct_start: f64,
    div_factor: f64,
    final_div: f64,
) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Range {
            what: "step",
            value: step as f64,
            lo: 0.0,
            hi: total_steps as f64,
        });
    }
    if !(0.0..=1.0).contains(&pct_start) {
        return Err(Error::Range {
            what: "pct_start",
            value: pct_start,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let initial = max_lr / div_factor;
    let final_lr = max_lr / final_div;
    if total_steps == 0 {
        return Ok(initial);
    }
    let peak = pct_start * total_steps as f64;
    let s = step as f64;
    Ok(if s <= peak && peak > 0.0 {
        cosine(initial, max_lr, s / peak)
    } else {
        let span = total_steps as f64 - peak;
        if span <= 0.0 {
            max_lr
        } else {
            cosine(max_lr, final_lr, (s - peak) / span)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store_with(v: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", v, true).unwrap();
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let (mut s, id) = store_with(array![[1.0, -2.0, 3.0]]);
        let mut st = AdamWState::new(&s);
        let g = Tensor::zeros((1, 3));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &[(id, &g)], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(s.value(id), &array![[1.0, -2.0, 3.0]]);
    }

    #[test]
    fn first_step_closed_form() {
        let (mut s, id) = store_with(array![[0.5, 0.5, 0.5, 0.5]]);
        let mut st = AdamWState::new(&s);
        let g = array![[0.3, -2.0, 1e-9, 0.0]];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let lr = 0.01;
        adamw_step(&mut s, &[(id, &g)], &mut st, lr, &cfg).unwrap();
        // After one step m̂ = g and v̂ = g², so Δ = −lr · g / (|g| + eps).
        for (k, &gk) in g.iter().enumerate() {
            let expect = 0.5 - lr * gk / (gk.abs() + cfg.eps);
            assert!((s.value(id)[[0, k]] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn decoupled_decay_only() {
        let (mut s, id) = store_with(array![[2.0, -4.0]]);
        let mut st = AdamWState::new(&s);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut s, &[], &mut st, 0.5, &cfg).unwrap();
        assert_eq!(s.value(id), &array![[2.0 * 0.95, -4.0 * 0.95]]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut s, id) = store_with(array![[1.0]]);
        let mut st = AdamWState::new(&s);
        let g = array![[f64::NAN]];
        assert!(matches!(
            adamw_step(&mut s, &[(id, &g)], &mut st, 0.1, &AdamWConfig::default()),
            Err(Error::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut s = ParamStore::new();
        let id = s.add("running_mean", array![[3.0]], false).unwrap();
        let mut st = AdamWState::new(&s);
        adamw_step(&mut s, &[], &mut st, 1.0, &AdamWConfig::default()).unwrap();
        assert_eq!(s.value(id)[[0, 0]], 3.0);
    }

    #[test]
    fn onecycle_boundaries() {
        let (max, pct, div, fin) = (1e-3, 0.3, 25.0, 1e4);
        let total = 1000;
        let lr = |s| onecycle_lr(s, total, max, pct, div, fin).unwrap();
        assert!((lr(0) - max / div).abs() < 1e-18);
        assert!((lr(300) - max).abs() < 1e-18);
        assert!((lr(total) - max / fin).abs() < 1e-18);
        assert!(lr(150) > lr(0) && lr(150) < max);
        assert!(lr(600) < max && lr(600) > max / fin);
        assert!(matches!(
            onecycle_lr(total + 1, total, max, pct, div, fin),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn onecycle_monotone_phases() {
        let sched = OneCycle::default();
        let total = 500;
        let peak = (sched.pct_start * total as f64) as usize;
        let lrs: Vec<f64> = (0..=total).map(|s| sched.lr(s, total).unwrap()).collect();
        assert!(lrs[..=peak].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[peak..].windows(2).all(|w| w[0] >= w[1]));
    }
}
