//! Long-range message passing in reciprocal space.
//!
//! Per structure, node embeddings are projected onto the frequency set as
//! structure factors `r(n) = Σⱼ hⱼ e^{−iφⱼ(n)}` with `φⱼ(n) = 2π n·fⱼ`, weighted
//! channel-wise by a learned filter `w(n)` and mapped back to each atom as the
//! real part of `Σₙ w(n) r(n) e^{iφⱼ(n)}`. The block adds that to its input.
//!
//! Complex values are kept as separate cosine and sine channels.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Block, BlockDiag, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::lattice::{FrequencyIndex, ReciprocalBasis, Vec3};
use crate::nn::Linear;

/// `(cos φ, sin φ)`, each `m × n`, with `φ[k][j] = 2π n_k·f_j`.
pub fn phase_matrices(frac: &[Vec3], freqs: &[FrequencyIndex]) -> (Tensor, Tensor) {
    let mut c = Tensor::zeros((freqs.len(), frac.len()));
    let mut s = Tensor::zeros((freqs.len(), frac.len()));
    for (k, n) in freqs.iter().enumerate() {
        for (j, f) in frac.iter().enumerate() {
            let (sin, cos) = n.phase(f).sin_cos();
            c[[k, j]] = cos;
            s[[k, j]] = sin;
        }
    }
    (c, s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureFactors {
    pub frequencies: Vec<FrequencyIndex>,
    /// `m × d` real parts.
    pub re: Tensor,
    /// `m × d` imaginary parts.
    pub im: Tensor,
}

fn check_atoms(op: &'static str, h: &Tensor, frac: &[Vec3]) -> Result<()> {
    if h.nrows() != frac.len() {
        return Err(Error::shape(
            op,
            format!("{} embedding rows for {} atoms", h.nrows(), frac.len()),
        ));
    }
    Ok(())
}

pub fn structure_factors(
    h: &Tensor,
    frac: &[Vec3],
    freqs: &[FrequencyIndex],
) -> Result<StructureFactors> {
    check_atoms("structure_factors", h, frac)?;
    let (c, s) = phase_matrices(frac, freqs);
    Ok(StructureFactors {
        frequencies: freqs.to_vec(),
        re: c.dot(h),
        im: -s.dot(h),
    })
}

/// Real part of the filtered inverse transform, one row per atom. `w` holds one
/// `d`-wide filter row per frequency.
pub fn inverse_filtered(
    r: &StructureFactors,
    frac: &[Vec3],
    w: &Tensor,
    freqs: &[FrequencyIndex],
) -> Result<Tensor> {
    if r.frequencies.len() != freqs.len() {
        return Err(Error::FrequencyMismatch {
            expected: freqs.len(),
            got: r.frequencies.len(),
        });
    }
    if r.frequencies != freqs {
        return Err(Error::FrequencyMismatch {
            expected: freqs.len(),
            got: r
                .frequencies
                .iter()
                .zip(freqs)
                .filter(|(a, b)| a == b)
                .count(),
        });
    }
    if w.dim() != r.re.dim() {
        return Err(Error::shape(
            "inverse_filtered",
            format!(
                "filter {:?} for structure factors {:?}",
                w.dim(),
                r.re.dim()
            ),
        ));
    }
    let (c, s) = phase_matrices(frac, freqs);
    Ok(c.t().dot(&(w * &r.re)) - s.t().dot(&(w * &r.im)))
}

/// `h + inverse_filtered(structure_factors(h))`.
pub fn reciprocal_block(
    h: &Tensor,
    frac: &[Vec3],
    freqs: &[FrequencyIndex],
    w: &Tensor,
) -> Result<Tensor> {
    let r = structure_factors(h, frac, freqs)?;
    Ok(h + &inverse_filtered(&r, frac, w, freqs)?)
}

/// Phase matrices and frequency descriptors for a batch of structures, laid
/// out block-diagonally so one matmul covers the whole batch.
#[derive(Debug, Clone)]
pub struct ReciprocalBatch {
    /// `M × N` with `M` frequencies summed over structures and `N` atoms.
    pub cos: Arc<BlockDiag>,
    pub sin: Arc<BlockDiag>,
    pub cos_t: Arc<BlockDiag>,
    pub sin_t: Arc<BlockDiag>,
    /// `M × 1` wave-vector magnitudes `|k|` (Å⁻¹).
    pub k_norms: Tensor,
    /// Position of each row's frequency within its structure's frequency list.
    pub freq_slot: Arc<[usize]>,
    pub freqs_per_structure: Vec<usize>,
}

impl ReciprocalBatch {
    pub fn new(items: &[(&[Vec3], &ReciprocalBasis)]) -> Result<Self> {
        let (mut row, mut col) = (0, 0);
        let (mut cb, mut sb, mut ctb, mut stb) = (vec![], vec![], vec![], vec![]);
        let mut k_norms = Vec::new();
        let mut freq_slot = Vec::new();
        let mut freqs_per_structure = Vec::new();
        for (frac, basis) in items {
            if basis.frequencies.is_empty() {
                return Err(Error::Config(
                    "reciprocal block needs a non-empty frequency set".into(),
                ));
            }
            let (c, s) = phase_matrices(frac, &basis.frequencies);
            let (m, n) = c.dim();
            ctb.push(Block {
                row: col,
                col: row,
                matrix: c.t().to_owned(),
            });
            stb.push(Block {
                row: col,
                col: row,
                matrix: s.t().to_owned(),
            });
            cb.push(Block {
                row,
                col,
                matrix: c,
            });
            sb.push(Block {
                row,
                col,
                matrix: s,
            });
            k_norms.extend(basis.k_norms());
            freq_slot.extend(0..m);
            freqs_per_structure.push(m);
            row += m;
            col += n;
        }
        Ok(Self {
            cos: Arc::new(BlockDiag::new(row, col, cb)?),
            sin: Arc::new(BlockDiag::new(row, col, sb)?),
            cos_t: Arc::new(BlockDiag::new(col, row, ctb)?),
            sin_t: Arc::new(BlockDiag::new(col, row, stb)?),
            k_norms: Tensor::from_shape_vec((row, 1), k_norms).expect("one norm per frequency"),
            freq_slot: freq_slot.into(),
            freqs_per_structure,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.cos.rows
    }

    pub fn num_atoms(&self) -> usize {
        self.cos.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// A small MLP on `|k|`.
    #[default]
    ContinuousMlp,
    /// One learned row per frequency index.
    PerIndexTable,
}

pub const FILTER_HIDDEN: usize = 64;
/// Initial bound on the filter output layer, keeping the block close to the
/// identity at the start of training.
pub const FILTER_INIT_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReciprocalFilter {
    ContinuousMlp { first: Linear, second: Linear },
    PerIndexTable { table: ParamId, num_freqs: usize },
}

impl ReciprocalFilter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        mode: FilterMode,
        width: usize,
        num_freqs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match mode {
            FilterMode::ContinuousMlp => {
                let first = Linear::new(store, &format!("{name}.0"), 1, FILTER_HIDDEN, true, rng)?;
                let second = Linear::with_scale(
                    store,
                    &format!("{name}.1"),
                    FILTER_HIDDEN,
                    width,
                    true,
                    FILTER_INIT_SCALE,
                    rng,
                )?;
                Self::ContinuousMlp { first, second }
            }
            FilterMode::PerIndexTable => {
                let table = store.add_uniform(
                    format!("{name}.table"),
                    (num_freqs, width),
                    1,
                    FILTER_INIT_SCALE,
                    rng,
                )?;
                Self::PerIndexTable { table, num_freqs }
            }
        })
    }

    /// `M × d` channel weights, one row per frequency row of the batch.
    pub fn weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &ReciprocalBatch,
    ) -> Result<Var> {
        match *self {
            Self::ContinuousMlp { first, second } => {
                let k = tape.constant(batch.k_norms.clone());
                let z = first.forward(tape, store, k)?;
                let z = tape.silu(z);
                second.forward(tape, store, z)
            }
            Self::PerIndexTable { table, num_freqs } => {
                if let Some(&m) = batch.freqs_per_structure.iter().find(|&&m| m != num_freqs) {
                    return Err(Error::FrequencyMismatch {
                        expected: num_freqs,
                        got: m,
                    });
                }
                let t = tape.param(store, table);
                tape.gather_rows(t, batch.freq_slot.clone())
            }
        }
    }
}

/// Filtered long-range update `h̃` (without the residual).
pub fn reciprocal_update(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    batch: &ReciprocalBatch,
    filter: &ReciprocalFilter,
) -> Result<Var> {
    if tape.shape(h).0 != batch.num_atoms() {
        return Err(Error::shape(
            "reciprocal_block",
            format!("{} rows for {} atoms", tape.shape(h).0, batch.num_atoms()),
        ));
    }
    let w = filter.weights(tape, store, batch)?;
    // r_re = C h, −r_im = S h; h̃ = Cᵀ(w ⊙ r_re) − Sᵀ(w ⊙ r_im).
    let re = tape.block_matmul(h, batch.cos.clone())?;
    let im_neg = tape.block_matmul(h, batch.sin.clone())?;
    let re = tape.mul(w, re)?;
    let im_neg = tape.mul(w, im_neg)?;
    let a = tape.block_matmul(re, batch.cos_t.clone())?;
    let b = tape.block_matmul(im_neg, batch.sin_t.clone())?;
    tape.add(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReciprocalBlock {
    pub filter: ReciprocalFilter,
}

impl ReciprocalBlock {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        batch: &ReciprocalBatch,
    ) -> Result<Var> {
        let g = reciprocal_update(tape, store, h, batch, &self.filter)?;
        tape.add(h, g)
    }
}
