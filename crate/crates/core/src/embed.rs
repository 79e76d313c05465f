//! Initial node and edge features.
//!
//! Nodes: a 92-wide per-element descriptor, then a linear map to the hidden
//! width (short-range stream) and `softplus(W_r h + b)` on top of that (long-range
//! stream). Edges: the distance is inverted as `c / d`, expanded over a
//! Gaussian RBF grid and passed through a linear layer with softplus.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::MIN_DISTANCE;
use crate::nn::Linear;

pub const ATOM_FEATURE_DIM: usize = 92;
pub const MAX_ATOMIC_NUMBER: u32 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableSource {
    /// Loaded from a JSON descriptor file.
    File,
    /// One-hot over Z = 1..=92, used when no descriptor file is supplied.
    OneHot,
}

/// Per-element feature rows, indexed by atomic number.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomFeatureTable {
    rows: BTreeMap<u32, Vec<f64>>,
    pub source: TableSource,
}

impl AtomFeatureTable {
    pub fn one_hot() -> Self {
        let rows = (1..=ATOM_FEATURE_DIM as u32)
            .map(|z| {
                let mut v = vec![0.0; ATOM_FEATURE_DIM];
                v[z as usize - 1] = 1.0;
                (z, v)
            })
            .collect();
        Self {
            rows,
            source: TableSource::OneHot,
        }
    }

    /// Parses a JSON object mapping atomic-number strings to 92 reals.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<f64>> = serde_json::from_str(text)?;
        let mut rows = BTreeMap::new();
        for (key, v) in raw {
            let z: u32 = key.trim().parse().map_err(|_| {
                Error::Config(format!("atom feature key `{key}` is not an integer"))
            })?;
            if z == 0 || z > MAX_ATOMIC_NUMBER {
                return Err(Error::Config(format!(
                    "atom feature key Z = {z} out of range"
                )));
            }
            if v.len() != ATOM_FEATURE_DIM {
                return Err(Error::Config(format!(
                    "atom features for Z = {z} have length {}, expected {ATOM_FEATURE_DIM}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!(
                    "atom features for Z = {z} are not finite"
                )));
            }
            rows.insert(z, v);
        }
        Ok(Self {
            rows,
            source: TableSource::File,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        let raw: BTreeMap<String, &Vec<f64>> =
            self.rows.iter().map(|(z, v)| (z.to_string(), v)).collect();
        serde_json::to_string(&raw).expect("table serialises")
    }

    pub fn features(&self, z: u32) -> Result<&[f64]> {
        self.rows
            .get(&z)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownElement(z))
    }

    pub fn contains(&self, z: u32) -> bool {
        self.rows.contains_key(&z)
    }

    /// `n × 92` feature matrix for a list of atomic numbers.
    pub fn matrix(&self, zs: &[u32]) -> Result<Tensor> {
        let mut out = Tensor::zeros((zs.len(), ATOM_FEATURE_DIM));
        for (i, &z) in zs.iter().enumerate() {
            let f = self.features(z)?;
            out.row_mut(i).iter_mut().zip(f).for_each(|(o, x)| *o = *x);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeFeatureConfig {
    pub scale_constant: f64,
    pub num_centers: usize,
    pub center_min: f64,
    pub center_max: f64,
    /// Gaussian width; the center spacing when `None`.
    pub rbf_width: Option<f64>,
}

impl Default for EdgeFeatureConfig {
    fn default() -> Self {
        Self {
            scale_constant: -0.75,
            num_centers: 256,
            center_min: -4.0,
            center_max: 4.0,
            rbf_width: None,
        }
    }
}

impl EdgeFeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_centers < 2 {
            return Err(Error::Config("num_centers must be at least 2".into()));
        }
        if !(self.center_min < self.center_max) {
            return Err(Error::Config("center_min must be below center_max".into()));
        }
        if let Some(w) = self.rbf_width {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config("rbf_width must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        (self.center_max - self.center_min) / (self.num_centers - 1) as f64
    }

    pub fn width(&self) -> f64 {
        self.rbf_width.unwrap_or_else(|| self.spacing())
    }

    pub fn centers(&self) -> Vec<f64> {
        let step = self.spacing();
        (0..self.num_centers)
            .map(|k| self.center_min + k as f64 * step)
            .collect()
    }

    /// `c / d`.
    pub fn scaled(&self, distance: f64) -> f64 {
        self.scale_constant / distance
    }
}

/// `E × num_centers` Gaussian expansion of `c / d` for each distance.
pub fn rbf_expand(distances: &[f64], cfg: &EdgeFeatureConfig) -> Result<Tensor> {
    cfg.validate()?;
    let centers = cfg.centers();
    let inv2w2 = 1.0 / (2.0 * cfg.width() * cfg.width());
    let mut out = Tensor::zeros((distances.len(), cfg.num_centers));
    for (e, &d) in distances.iter().enumerate() {
        if !(d > MIN_DISTANCE) || !d.is_finite() {
            return Err(Error::AtomOverlap {
                a: e,
                b: e,
                distance: d,
            });
        }
        let x = cfg.scaled(d);
        for (o, &mu) in out.row_mut(e).iter_mut().zip(&centers) {
            *o = (-(x - mu) * (x - mu) * inv2w2).exp();
        }
    }
    Ok(out)
}

/// Embedding layers for the three initial feature streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub atom: Linear,
    pub global: Linear,
    pub edge: Linear,
    pub edge_cfg: EdgeFeatureConfig,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        hidden: usize,
        edge_cfg: EdgeFeatureConfig,
        rng: &mut R,
    ) -> Result<Self> {
        edge_cfg.validate()?;
        Ok(Self {
            atom: Linear::new(store, "embed.atom", ATOM_FEATURE_DIM, hidden, true, rng)?,
            global: Linear::new(store, "embed.global", hidden, hidden, true, rng)?,
            edge: Linear::new(store, "embed.edge", edge_cfg.num_centers, hidden, true, rng)?,
            edge_cfg,
        })
    }
}

/// Short-range node features: a linear map of the per-element descriptors.
pub fn atom_embed(
    tape: &mut Tape,
    store: &ParamStore,
    atom_features: &Tensor,
    w_in: &Linear,
) -> Result<Var> {
    if atom_features.ncols() != w_in.fan_in {
        return Err(Error::shape(
            "atom_embed",
            format!(
                "{} feature columns for a {}-input layer",
                atom_features.ncols(),
                w_in.fan_in
            ),
        ));
    }
    let x = tape.constant(atom_features.clone());
    w_in.forward(tape, store, x)
}

/// Long-range node features: `softplus(W_r h_local + b)`.
pub fn init_global(tape: &mut Tape, store: &ParamStore, h_local: Var, w_r: &Linear) -> Result<Var> {
    if tape.shape(h_local).1 != w_r.fan_in {
        return Err(Error::shape(
            "init_global",
            format!(
                "{:?} into a {}-input layer",
                tape.shape(h_local),
                w_r.fan_in
            ),
        ));
    }
    let y = w_r.forward(tape, store, h_local)?;
    Ok(tape.softplus(y))
}

/// Edge features from precomputed RBF rows: `softplus(W_e rbf + b)`.
pub fn edge_embed_rbf(
    tape: &mut Tape,
    store: &ParamStore,
    rbf: &Tensor,
    w_e: &Linear,
) -> Result<Var> {
    let x = tape.constant(rbf.clone());
    let y = w_e.forward(tape, store, x)?;
    Ok(tape.softplus(y))
}

pub fn edge_embed(
    tape: &mut Tape,
    store: &ParamStore,
    distances: &[f64],
    cfg: &EdgeFeatureConfig,
    w_e: &Linear,
) -> Result<Var> {
    let rbf = rbf_expand(distances, cfg)?;
    edge_embed_rbf(tape, store, &rbf, w_e)
}
