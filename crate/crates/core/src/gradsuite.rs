//! Finite-difference checks for every differentiable op, each model
//! component, and the full model, reported per module.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{grad_check, GradCheckOptions};
use crate::autodiff::{
    BatchNormMode, Block, BlockDiag, ParamId, ParamStore, Tape, Tensor, Unary, Var,
};
use crate::data::prepare_all;
use crate::embed::{atom_embed, edge_embed_rbf, init_global, AtomFeatureTable, EdgeFeatureConfig};
use crate::error::Result;
use crate::model::{init_params, BatchedInput, Decoder, Model, ModelConfig};
use crate::moe::MoeConfig;
use crate::nn::{apply_bn_updates, BatchNorm, Ctx, Mlp2, BN_MOMENTUM};
use crate::reciprocal::FilterMode;
use crate::testing::random_structure;

/// Threshold for individual ops and modules.
pub const MODULE_TOLERANCE: f64 = 1e-5;
/// Threshold for the full model.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct ModuleCheck {
    pub module: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst_param: Option<String>,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Contracts `y` with a fixed random weight so every output entry matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = tape.shape(y);
    let w = tape.constant(rand_tensor(&mut rng, r, c));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn run<F>(
    module: impl Into<String>,
    store: &mut ParamStore,
    which: Option<&[ParamId]>,
    f: F,
    cap: Option<usize>,
    tolerance: f64,
) -> Result<ModuleCheck>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let opts = GradCheckOptions {
        max_entries_per_param: cap,
        ..Default::default()
    };
    let report = grad_check(store, which, f, &opts)?;
    Ok(ModuleCheck {
        module: module.into(),
        max_rel_error: report.max_rel_error,
        tolerance,
        worst_param: report.worst().map(|p| p.name.clone()),
    })
}

type Case = Box<dyn Fn(&ParamStore, &mut Tape) -> Result<Var>>;

/// Checks every tape op on `r × c` random inputs. `cap` limits the number of
/// entries sampled per parameter.
pub fn op_checks(r: usize, c: usize, seed: u64, cap: Option<usize>) -> Result<Vec<ModuleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, r, c), true)?;
    // |b| stays in [0.5, 1.5] so div, relu and abs are smooth around it.
    let bv = Tensor::from_shape_fn((r, c), |_| {
        let v: f64 = rng.random_range(0.5..1.5);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    });
    let b = store.add("b", bv, true)?;
    let row = store.add("row", rand_tensor(&mut rng, 1, c), true)?;
    let col = store.add("col", rand_tensor(&mut rng, r, 1), true)?;
    let w = store.add("w", rand_tensor(&mut rng, c, 5), true)?;
    let mask = Tensor::from_shape_fn(
        (r, c),
        |_| if rng.random::<f64>() < 0.7 { 1.0 } else { 0.0 },
    );
    let nseg = r.div_ceil(2) + 1;
    let seg: Arc<[usize]> = (0..r).map(|i| (i * 7) % r.div_ceil(2)).collect();
    let gidx: Arc<[usize]> = (0..r + 3).map(|i| (i * 5) % r).collect();
    let cidx: Arc<[usize]> = (0..c + 1).map(|i| (i * 3) % c).collect();

    let mut cases: Vec<(String, Case)> = Vec::new();
    let mut push = |name: &str, f: Case| cases.push((name.to_string(), f));
    push(
        "matmul",
        Box::new(move |s, t| {
            let (a, w) = (t.param(s, a), t.param(s, w));
            let y = t.matmul(a, w)?;
            probe(t, y, 2)
        }),
    );
    push(
        "linear",
        Box::new(move |s, t| {
            let (a, w) = (t.param(s, a), t.param(s, w));
            let bias = t.param(s, row);
            let wt = t.matmul(a, w)?;
            let y = t.linear(a, w, None)?;
            let y = t.add(y, wt)?;
            let z = t.gather_cols(bias, Arc::from(vec![0usize; 5]))?;
            let y = t.add_row(y, z)?;
            probe(t, y, 3)
        }),
    );
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        push(
            name,
            Box::new(move |s, t| {
                let (a, b) = (t.param(s, a), t.param(s, b));
                let y = match which {
                    0 => t.add(a, b)?,
                    1 => t.sub(a, b)?,
                    2 => t.mul(a, b)?,
                    _ => t.div(a, b)?,
                };
                let y = t.unary(y, Unary::Square);
                probe(t, y, 4)
            }),
        );
    }
    let m2 = mask.clone();
    push(
        "mul_const",
        Box::new(move |s, t| {
            let a = t.param(s, a);
            let y = t.mul_const(a, m2.clone())?;
            probe(t, y, 5)
        }),
    );
    push(
        "mul_col",
        Box::new(move |s, t| {
            let (a, col) = (t.param(s, a), t.param(s, col));
            let y = t.mul_col(a, col)?;
            probe(t, y, 6)
        }),
    );
    push(
        "scale",
        Box::new(move |s, t| {
            let a = t.param(s, a);
            let y = t.scale(a, -1.7);
            let y = t.add_scalar(y, 0.3);
            let y = t.unary(y, Unary::Square);
            probe(t, y, 7)
        }),
    );
    push(
        "concat",
        Box::new(move |s, t| {
            let (a, b, col) = (t.param(s, a), t.param(s, b), t.param(s, col));
            let y = t.concat(&[a, col, b])?;
            probe(t, y, 8)
        }),
    );
    let g2 = gidx.clone();
    push(
        "gather_rows",
        Box::new(move |s, t| {
            let a = t.param(s, a);
            let y = t.gather_rows(a, g2.clone())?;
            probe(t, y, 9)
        }),
    );
    push(
        "gather_cols",
        Box::new(move |s, t| {
            let a = t.param(s, a);
            let y = t.gather_cols(a, cidx.clone())?;
            probe(t, y, 10)
        }),
    );
    let s2 = seg.clone();
    push(
        "segment_sum",
        Box::new(move |s, t| {
            let a = t.param(s, a);
            let y = t.segment_sum(a, s2.clone(), nseg)?;
            probe(t, y, 11)
        }),
    );
    push(
        "segment_mean",
        Box::new(move |s, t| {
            let a = t.param(s, a);
            let y = t.segment_mean(a, seg.clone(), nseg)?;
            probe(t, y, 12)
        }),
    );
    for (i, (name, f)) in [
        ("softplus", Unary::Softplus),
        ("sigmoid", Unary::Sigmoid),
        ("relu", Unary::Relu),
        ("silu", Unary::Silu),
        ("cos", Unary::Cos),
        ("sin", Unary::Sin),
        ("abs", Unary::Abs),
        ("exp", Unary::Exp),
        ("square", Unary::Square),
    ]
    .into_iter()
    .enumerate()
    {
        push(
            name,
            Box::new(move |s, t| {
                let b = t.param(s, b);
                let y = t.unary(b, f);
                probe(t, y, 20 + i as u64)
            }),
        );
    }
    push(
        "softmax",
        Box::new(move |s, t| {
            let a = t.param(s, a);
            let y = t.softmax(a)?;
            probe(t, y, 30)
        }),
    );
    let mut m3 = mask.clone();
    m3.column_mut(0).fill(1.0);
    push(
        "softmax_masked",
        Box::new(move |s, t| {
            let a = t.param(s, a);
            let y = t.softmax_masked(a, Some(&m3))?;
            probe(t, y, 31)
        }),
    );
    if r > 1 {
        push(
            "batch_norm_train",
            Box::new(move |s, t| {
                let (a, row, b) = (t.param(s, a), t.param(s, row), t.param(s, b));
                let beta = t.gather_rows(b, Arc::from(vec![0usize]))?;
                let (y, _) = t.batch_norm(a, row, beta, BatchNormMode::Train)?;
                probe(t, y, 32)
            }),
        );
    }
    let rm = rand_tensor(&mut rng, 1, c);
    let rv = Tensor::from_shape_fn((1, c), |_| rng.random_range(0.5..2.0));
    push(
        "batch_norm_eval",
        Box::new(move |s, t| {
            let (a, row, b) = (t.param(s, a), t.param(s, row), t.param(s, b));
            let beta = t.gather_rows(b, Arc::from(vec![0usize]))?;
            let mode = BatchNormMode::Eval {
                mean: &rm,
                var: &rv,
            };
            let (y, _) = t.batch_norm(a, row, beta, mode)?;
            probe(t, y, 33)
        }),
    );
    push(
        "reductions",
        Box::new(move |s, t| {
            let a = t.param(s, a);
            let m = t.mean_rows(a)?;
            let sr = t.sum_rows(a);
            let y = t.mul(m, sr)?;
            let y = t.unary(y, Unary::Square);
            let p = probe(t, y, 34)?;
            let mean = t.mean(a)?;
            let mean = t.unary(mean, Unary::Square);
            t.add(p, mean)
        }),
    );
    let half = r / 2;
    let mut blocks = vec![Block {
        row: 0,
        col: 0,
        matrix: rand_tensor(&mut rng, 3, half.max(1)),
    }];
    if r > 1 {
        blocks.push(Block {
            row: 3,
            col: half,
            matrix: rand_tensor(&mut rng, 2, r - half),
        });
    }
    let bd = Arc::new(BlockDiag::new(5, r, blocks)?);
    push(
        "block_matmul",
        Box::new(move |s, t| {
            let a = t.param(s, a);
            let y = t.block_matmul(a, bd.clone())?;
            probe(t, y, 35)
        }),
    );

    cases
        .into_iter()
        .map(|(name, f)| {
            run(
                format!("op.{name}"),
                &mut store,
                None,
                f,
                cap,
                MODULE_TOLERANCE,
            )
        })
        .collect()
}

fn ids_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, p)| p.trainable && p.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect()
}

/// A few training-mode passes so eval-mode batch norms are not the identity.
fn warm_up(model: &Model, store: &mut ParamStore, batch: &BatchedInput) -> Result<()> {
    for _ in 0..3 {
        let mut t = Tape::new();
        let mut ctx = Ctx::train();
        model.forward(&mut t, store, batch, &mut ctx, None)?;
        apply_bn_updates(store, &ctx.bn_updates, BN_MOMENTUM);
    }
    Ok(())
}

fn suite_config(filter: FilterMode, moe: bool) -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        hidden: 8,
        k_neighbors: 4,
        filter,
        edge: EdgeFeatureConfig {
            num_centers: 16,
            ..Default::default()
        },
        moe: moe.then(|| MoeConfig {
            num_experts: 4,
            top_k: 2,
            noise: false,
            ..Default::default()
        }),
        tasks: if moe {
            vec!["a".into(), "b".into()]
        } else {
            vec!["a".into()]
        },
        seed: 1,
        ..Default::default()
    }
}

/// Component and full-model checks on a small two-structure batch, eval-mode
/// batch norm, noise off. Filters are scaled up from their near-zero
/// initialisation so the reciprocal path carries signal.
pub fn model_checks(seed: u64) -> Result<Vec<ModuleCheck>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = Some(12);

    let mut store = ParamStore::new();
    let mlp = Mlp2::new(&mut store, "mlp", 5, 7, 3, &mut rng)?;
    let x = rand_tensor(&mut rng, 6, 5);
    out.push(run(
        "nn.mlp",
        &mut store,
        None,
        |s, t| {
            let x = t.constant(x.clone());
            let y = mlp.forward(t, s, x)?;
            probe(t, y, 40)
        },
        None,
        MODULE_TOLERANCE,
    )?);

    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 4)?;
    store.set(bn.running_mean, rand_tensor(&mut rng, 1, 4))?;
    store.set(
        bn.running_var,
        Tensor::from_shape_fn((1, 4), |_| rng.random_range(0.5..2.0)),
    )?;
    store.set(bn.gamma, rand_tensor(&mut rng, 1, 4))?;
    let x = rand_tensor(&mut rng, 6, 4);
    out.push(run(
        "nn.batch_norm_eval",
        &mut store,
        None,
        |s, t| {
            let x = t.constant(x.clone());
            let y = bn.forward(t, s, x, &mut Ctx::eval())?;
            probe(t, y, 41)
        },
        None,
        MODULE_TOLERANCE,
    )?);

    for (filter, moe, tag) in [
        (FilterMode::ContinuousMlp, true, "continuous"),
        (FilterMode::PerIndexTable, false, "table"),
    ] {
        let cfg = suite_config(filter, moe);
        let (model, mut store) = init_params(&cfg)?;
        model.scale_filters(&mut store, 1e4);
        let structures: Vec<_> = (0..2).map(|_| random_structure(&mut rng, 2..=3)).collect();
        let prepared = prepare_all(&structures, &cfg, &AtomFeatureTable::one_hot())?;
        let refs: Vec<_> = prepared.iter().collect();
        let batch = BatchedInput::new(&refs, &cfg.edge)?;
        warm_up(&model, &mut store, &batch)?;
        let n = batch.atom_features.nrows();
        let d = cfg.hidden;
        let h = rand_tensor(&mut rng, n, d);
        let v = rand_tensor(&mut rng, batch.edges.num_edges(), d);

        if moe {
            let ids = ids_with_prefix(&store, "embed.");
            out.push(run(
                "embeddings",
                &mut store,
                Some(&ids),
                |s, t| {
                    let emb = &model.embedding;
                    let a = atom_embed(t, s, &batch.atom_features, &emb.atom)?;
                    let g = init_global(t, s, a, &emb.global)?;
                    let e = edge_embed_rbf(t, s, &batch.rbf, &emb.edge)?;
                    let p = probe(t, a, 42)?;
                    let q = probe(t, g, 43)?;
                    let r = probe(t, e, 44)?;
                    let pq = t.add(p, q)?;
                    t.add(pq, r)
                },
                cap,
                MODULE_TOLERANCE,
            )?);

            let ids = ids_with_prefix(&store, "block0.local.");
            let local = model.blocks[0].local;
            out.push(run(
                "local_layer",
                &mut store,
                Some(&ids),
                |s, t| {
                    let h = t.constant(h.clone());
                    let v = t.constant(v.clone());
                    let y = local.forward(t, s, h, &batch.edges, v, &mut Ctx::eval())?;
                    probe(t, y, 45)
                },
                cap,
                MODULE_TOLERANCE,
            )?);

            let Decoder::Moe(dec) = &model.decoder else {
                unreachable!("suite config has a mixture-of-experts decoder")
            };
            let ids = ids_with_prefix(&store, "decoder.");
            let pooled = rand_tensor(&mut rng, 2, d);
            out.push(run(
                "moe_decoder",
                &mut store,
                Some(&ids),
                |s, t| {
                    let x = t.constant(pooled.clone());
                    let y = dec.forward(t, s, x, None)?;
                    probe(t, y.predictions, 46)
                },
                cap,
                MODULE_TOLERANCE,
            )?);
        }

        let ids = ids_with_prefix(&store, "block0.filter.");
        let block = model.blocks[0].reciprocal.expect("reciprocal enabled");
        out.push(run(
            format!("reciprocal_block.{tag}"),
            &mut store,
            Some(&ids),
            |s, t| {
                let h = t.constant(h.clone());
                let y = block.forward(t, s, h, &batch.reciprocal)?;
                probe(t, y, 47)
            },
            cap,
            MODULE_TOLERANCE,
        )?);

        let name = if moe {
            "model.multi_task_moe"
        } else {
            "model.single_task"
        };
        out.push(run(
            name,
            &mut store,
            None,
            |s, t| {
                let y = model.forward(t, s, &batch, &mut Ctx::eval(), None)?;
                let sq = t.unary(y.predictions, Unary::Square);
                Ok(t.sum(sq))
            },
            cap,
            MODEL_TOLERANCE,
        )?);
    }
    Ok(out)
}

/// Every op on two shapes, then components and full models.
pub fn run_suite(seed: u64) -> Result<Vec<ModuleCheck>> {
    let mut out = Vec::new();
    for (r, c) in [(3, 4), (9, 7)] {
        for mut m in op_checks(r, c, seed, None)? {
            m.module = format!("{}[{r}x{c}]", m.module);
            out.push(m);
        }
    }
    out.extend(model_checks(seed)?);
    Ok(out)
}
