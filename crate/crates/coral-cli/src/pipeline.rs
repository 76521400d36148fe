//! Task orchestration: the three-phase training runs (input INR, output
//! INR, processor), the evaluation protocols, metrics, and gradient-based
//! design optimization through the whole encode-process-decode chain.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use coral_core::autodiff::{gradient, Var};
use coral_core::codec::{
    decode_code, encode, encode_graph_vars, fit_norm, LatentCode, NormMode, NormStats,
};
use coral_core::data::{
    deform_basis, regular_grid_closed, regular_grid_periodic, subsample_indices, AnalyticSolution,
    FieldSample, GeometrySpec, Grid, Trajectory,
};
use coral_core::inr::{decode_var, InrModel};
use coral_core::processor::{node_solve, train_node, OdeFieldParams, SkipMlpParams};
use coral_core::train::{train_inr, train_processor, AdamState, TrainRecord};
use coral_core::{CoreError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DesignJson, ProcessorKind, TaskConfig, TaskKind};
use crate::container::{
    Dataset, FieldNorm, InrCheckpoint, ProcessorCheckpoint,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Invalid(msg.into())
}

// ---------------------------------------------------------------------------
// Metrics and reports
// ---------------------------------------------------------------------------

pub fn mse(pred: &Tensor, truth: &Tensor) -> f64 {
    debug_assert_eq!(pred.shape(), truth.shape());
    pred.data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// `||pred - truth||_2 / ||truth||_2` over the flattened values.
pub fn rel_l2(pred: &Tensor, truth: &Tensor) -> f64 {
    let num: f64 =
        pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
    let den: f64 = truth.data().iter().map(|t| t * t).sum::<f64>();
    (num / den.max(1e-300)).sqrt()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricEntry {
    pub split: String,
    /// Which grid the metric was computed on (train grid, new grid,
    /// upsampled grid, ...).
    pub grid: String,
    pub mse: f64,
    pub rel_l2: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub entries: Vec<MetricEntry>,
    /// Mean squared error per timestep on the primary evaluation grid
    /// (dynamics only; index 0 is the reconstruction error of the encoded
    /// initial condition).
    pub per_timestep: Vec<f64>,
}

impl EvalReport {
    pub fn entry(&self, split: &str, grid: &str) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.split == split && e.grid == grid)
    }

    fn check(self) -> Result<EvalReport> {
        for e in &self.entries {
            if !(e.mse >= 0.0 && e.rel_l2 >= 0.0) {
                return Err(invalid(format!("negative metric in {}/{}", e.split, e.grid)));
            }
        }
        if self.per_timestep.iter().any(|m| !(*m >= 0.0)) {
            return Err(invalid("negative per-timestep error"));
        }
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// Field normalization and helpers
// ---------------------------------------------------------------------------

/// Per-channel z-score statistics over a collection of `(n, c)` value
/// tensors.
pub fn fit_field_norm<'a>(values: impl Iterator<Item = &'a Tensor>, channels: usize) -> FieldNorm {
    let mut count = 0usize;
    let mut mean = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    for v in values {
        let c = v.shape()[1];
        for row in v.data().chunks(c) {
            for (ch, &x) in row.iter().enumerate() {
                mean[ch] += x;
                sq[ch] += x * x;
            }
        }
        count += v.shape()[0];
    }
    let n = count.max(1) as f64;
    let mut std = vec![0.0; channels];
    for ch in 0..channels {
        mean[ch] /= n;
        std[ch] = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0).sqrt().max(1e-8);
    }
    FieldNorm {
        mean: Tensor::from_vec(&[channels], mean).unwrap(),
        std: Tensor::from_vec(&[channels], std).unwrap(),
    }
}

pub fn normalize_values(norm: &FieldNorm, values: &Tensor) -> Tensor {
    let c = values.shape()[1];
    Tensor::from_fn(values.shape(), |i| {
        let ch = i % c;
        (values.data()[i] - norm.mean.data()[ch]) / norm.std.data()[ch]
    })
    .unwrap()
}

pub fn denormalize_values(norm: &FieldNorm, values: &Tensor) -> Tensor {
    let c = values.shape()[1];
    Tensor::from_fn(values.shape(), |i| {
        let ch = i % c;
        values.data()[i] * norm.std.data()[ch] + norm.mean.data()[ch]
    })
    .unwrap()
}

fn restrict_rows(values: &Tensor, idx: &[usize]) -> Tensor {
    let c = values.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(&values.data()[i * c..(i + 1) * c]);
    }
    Tensor::from_vec(&[idx.len(), c], data).unwrap()
}

/// Worker count for evaluation loops, from `CORAL_THREADS` (default 1).
/// Training always runs single-threaded for bitwise reproducibility.
pub fn eval_threads() -> usize {
    std::env::var("CORAL_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Index-ordered parallel map over test items; the reduction order is fixed
/// by the item index, so results do not depend on the worker count.
fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut out: Vec<Option<R>> = Vec::new();
    out.resize_with(items.len(), || None);
    let slots: Vec<(usize, &T)> = items.iter().enumerate().collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for part in slots.chunks(chunk) {
            let f = &f;
            handles.push(scope.spawn(move || {
                part.iter().map(|(i, item)| (*i, f(item))).collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("eval worker panicked") {
                out[i] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("missing eval result")).collect()
}

// ---------------------------------------------------------------------------
// Dynamics task
// ---------------------------------------------------------------------------

pub struct DynamicsModels {
    pub inr: InrCheckpoint,
    pub node: ProcessorCheckpoint,
}

fn dynamics_parts(ds: &Dataset) -> Result<(&coral_core::data::DynamicsSpec, &[Trajectory])> {
    match ds {
        Dataset::Dynamics { spec, trajectories } => Ok((spec, trajectories)),
        other => Err(invalid(format!("expected a dynamics dataset, found {}", other.task_name()))),
    }
}

/// The forecast-training horizon: the first half of each trajectory.
pub fn in_t_len(n_frames: usize) -> usize {
    n_frames / 2
}

/// The training observation set for dynamics: every in-horizon frame of
/// every trajectory, restricted to the pi-subsampled train grid and
/// normalized by the given field statistics.
fn dynamics_train_samples(
    cfg: &TaskConfig,
    ds: &Dataset,
    field_norm: &FieldNorm,
) -> Result<Vec<FieldSample>> {
    let (spec, trajs) = dynamics_parts(ds)?;
    let base = regular_grid_periodic(spec.grid_res, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.train_grid_seed);
    let train_idx = subsample_indices(base.len(), cfg.eval.pi, &mut rng)?;
    let train_grid = Arc::new(base.select(&train_idx)?);
    let horizon = in_t_len(trajs[0].len());
    let mut samples = Vec::with_capacity(trajs.len() * horizon);
    for tr in trajs {
        for t in 0..horizon {
            let values = normalize_values(field_norm, &restrict_rows(&tr.frames[t], &train_idx));
            samples.push(FieldSample::new(train_grid.clone(), values, vec!["u".into()])?);
        }
    }
    Ok(samples)
}

fn dynamics_field_norm(cfg: &TaskConfig, ds: &Dataset) -> Result<FieldNorm> {
    let (_, trajs) = dynamics_parts(ds)?;
    let horizon = in_t_len(trajs[0].len());
    Ok(if cfg.normalize_fields() {
        fit_field_norm(
            trajs.iter().flat_map(|t| t.frames[..horizon].iter()),
            trajs[0].frames[0].shape()[1],
        )
    } else {
        FieldNorm::identity(trajs[0].frames[0].shape()[1])
    })
}

/// First training phase for dynamics: meta-train the single state INR on
/// every in-horizon frame of the training trajectories. The returned
/// checkpoint carries identity code statistics; the processor phase fills
/// in the real ones once codes exist.
pub fn fit_dynamics_inr(
    cfg: &TaskConfig,
    ds: &Dataset,
) -> Result<(InrCheckpoint, Vec<TrainRecord>)> {
    if cfg.processor.kind != ProcessorKind::Node {
        return Err(invalid("dynamics requires the node processor"));
    }
    let field_norm = dynamics_field_norm(cfg, ds)?;
    let samples = dynamics_train_samples(cfg, ds, &field_norm)?;
    let mut model = InrModel::init(&cfg.siren_config(2, 1), cfg.arch.d_z, cfg.seed)?;
    let mut enc = cfg.encoder.build(cfg.arch.d_z)?;
    let outer = cfg.inr_train.build(cfg.seed);
    let trace = train_inr(&samples, &mut model, &mut enc, &outer)?;
    Ok((
        InrCheckpoint {
            role: "state".into(),
            model,
            encoder: enc,
            stats: NormStats::identity(cfg.norm_mode()),
            field_norm,
            adam: None,
            epoch: outer.epochs as u64,
        },
        trace,
    ))
}

/// Second training phase for dynamics: encode all in-horizon frames with
/// the trained INR, fit shared feature-wise code statistics over every
/// trajectory and timestep (updating the checkpoint), and train the
/// neural-ODE field on the normalized sequences with scheduled sampling.
/// The codes stay fixed throughout.
pub fn fit_dynamics_node(
    cfg: &TaskConfig,
    ds: &Dataset,
    inr: &mut InrCheckpoint,
) -> Result<(ProcessorCheckpoint, Vec<TrainRecord>)> {
    let (_, trajs) = dynamics_parts(ds)?;
    let horizon = in_t_len(trajs[0].len());
    let samples = dynamics_train_samples(cfg, ds, &inr.field_norm)?;

    let mut code_seqs: Vec<Vec<Tensor>> = Vec::with_capacity(trajs.len());
    let mut all_codes = Vec::new();
    for ti in 0..trajs.len() {
        let mut seq = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let (code, _) = encode(&samples[ti * horizon + t], &inr.model, &inr.encoder)?;
            all_codes.push(code.values.clone());
            seq.push(code.values);
        }
        code_seqs.push(seq);
    }
    inr.stats = fit_norm(&all_codes, cfg.norm_mode())?;
    let normalized: Vec<Vec<Tensor>> = code_seqs
        .iter()
        .map(|seq| {
            seq.iter()
                .map(|z| Ok(inr.stats.normalize(&LatentCode::raw(z.clone()))?.values))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut field = ode_field_from_cfg(cfg)?;
    let node_cfg = cfg.proc_train.build_node(cfg.seed ^ 0x51ed_270b, cfg.processor.substeps);
    let trace = train_node(&normalized, &mut field, &node_cfg)?;
    Ok((
        ProcessorCheckpoint::Node {
            params: field,
            substeps: cfg.processor.substeps,
            epoch: node_cfg.epochs as u64,
        },
        trace,
    ))
}

/// Both dynamics training phases back to back.
pub fn train_dynamics(
    cfg: &TaskConfig,
    ds: &Dataset,
) -> Result<(DynamicsModels, Vec<TrainRecord>, Vec<TrainRecord>)> {
    let (mut inr, inr_trace) = fit_dynamics_inr(cfg, ds)?;
    let (node, node_trace) = fit_dynamics_node(cfg, ds, &mut inr)?;
    Ok((DynamicsModels { inr, node }, inr_trace, node_trace))
}

fn ode_field_from_cfg(cfg: &TaskConfig) -> Result<OdeFieldParams> {
    Ok(coral_core::processor::ode_field_init(
        cfg.arch.d_z,
        cfg.processor.width,
        cfg.processor.depth,
        cfg.seed ^ 0x0de_f1e1d,
    )?)
}

/// One evaluation grid for dynamics: where the initial condition is
/// observed (encode side) and where predictions are queried (decode side).
struct DynEvalGrid {
    label: String,
    encode_grid: Arc<Grid>,
    encode_idx: Vec<usize>,
    decode: DecodeSide,
}

enum DecodeSide {
    /// Query the encode grid itself (ground truth by frame restriction).
    SameAsEncode,
    /// Query a denser regular lattice (ground truth from the analytic
    /// generator).
    Regular { grid: Arc<Grid> },
}

/// Per-grid rollout metrics.
#[derive(Clone, Debug)]
pub struct DynGridEval {
    pub label: String,
    pub in_t_mse: f64,
    pub out_t_mse: f64,
    pub in_t_rel: f64,
    pub out_t_rel: f64,
    pub curve: Vec<f64>,
}

fn unpack_node(ckpt: &ProcessorCheckpoint) -> Result<(&OdeFieldParams, usize)> {
    match ckpt {
        ProcessorCheckpoint::Node { params, substeps, .. } => Ok((params, *substeps)),
        ProcessorCheckpoint::Mlp { .. } => Err(invalid("dynamics checkpoint holds an mlp processor")),
    }
}

/// Encodes the initial condition on the grid, rolls the latent state out to
/// the last frame, decodes every step, and accumulates per-timestep MSE.
/// `t = 0` carries the pure reconstruction error of the encoded initial
/// condition; no processing is applied there.
fn eval_dynamics_grid(
    models: &DynamicsModels,
    trajs: &[Trajectory],
    sols: &[AnalyticSolution],
    grid: &DynEvalGrid,
    horizon: usize,
) -> Result<DynGridEval> {
    let (field, substeps) = unpack_node(&models.node)?;
    let inr = &models.inr;
    let n_t = trajs[0].len();
    let timestamps: Vec<f64> = (1..n_t).map(|t| t as f64).collect();

    let per_traj: Vec<Result<(Vec<f64>, Vec<f64>)>> = parallel_map(
        &trajs.iter().zip(sols.iter()).collect::<Vec<_>>(),
        eval_threads(),
        |(tr, sol)| -> Result<(Vec<f64>, Vec<f64>)> {
            // Ground truth on the decode side, in normalized space.
            let (dec_grid, truth): (Arc<Grid>, Vec<Tensor>) = match &grid.decode {
                DecodeSide::SameAsEncode => (
                    grid.encode_grid.clone(),
                    tr.frames
                        .iter()
                        .map(|f| {
                            normalize_values(
                                &inr.field_norm,
                                &restrict_rows(f, &grid.encode_idx),
                            )
                        })
                        .collect(),
                ),
                DecodeSide::Regular { grid: g } => (
                    g.clone(),
                    (0..n_t)
                        .map(|t|

                            Ok(normalize_values(
                                &inr.field_norm,
                                &sol.frame(g, t as f64 * tr.dt)?,
                            ))
                        )
                        .collect::<Result<Vec<_>>>()?,
                ),
            };

            let ic_values =
                normalize_values(&inr.field_norm, &restrict_rows(&tr.frames[0], &grid.encode_idx));
            let ic = FieldSample::new(grid.encode_grid.clone(), ic_values, vec!["u".into()])?;
            let (z0, _) = encode(&ic, &inr.model, &inr.encoder)?;

            let mut mses = Vec::with_capacity(n_t);
            let mut rels = Vec::with_capacity(n_t);
            let rec = decode_code(&inr.model, &z0, &dec_grid)?;
            mses.push(mse(&rec.values, &truth[0]));
            rels.push(rel_l2(&rec.values, &truth[0]));

            let z0_norm = inr.stats.normalize(&z0)?;
            let vars = field.bind(false);
            let vf = |z: &Var| vars.eval(z);
            let rollout =
                node_solve(&vf, &Var::constant(z0_norm.values.clone()), &timestamps, substeps)?;
            for (k, state) in rollout.iter().enumerate() {
                let raw = inr
                    .stats
                    .denormalize(&LatentCode::normalized(state.value().clone()))?;
                let pred = decode_code(&inr.model, &raw, &dec_grid)?;
                mses.push(mse(&pred.values, &truth[k + 1]));
                rels.push(rel_l2(&pred.values, &truth[k + 1]));
            }
            Ok((mses, rels))
        },
    );

    let mut curve = vec![0.0; n_t];
    let mut rel_curve = vec![0.0; n_t];
    for r in per_traj {
        let (mses, rels) = r?;
        for t in 0..n_t {
            curve[t] += mses[t] / trajs.len() as f64;
            rel_curve[t] += rels[t] / trajs.len() as f64;
        }
    }
    let span = |lo: usize, hi: usize, v: &[f64]| -> f64 {
        v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
    };
    Ok(DynGridEval {
        label: grid.label.clone(),
        in_t_mse: span(1, horizon, &curve),
        out_t_mse: span(horizon, n_t, &curve),
        in_t_rel: span(1, horizon, &rel_curve),
        out_t_rel: span(horizon, n_t, &rel_curve),
        curve,
    })
}

/// Runs the dynamics evaluation protocol: rollout from each test initial
/// condition on the test grid, plus optional full-grid, fresh-grid and
/// upsampled-grid evaluations.
pub fn eval_dynamics(
    cfg: &TaskConfig,
    models: &DynamicsModels,
    test_ds: &Dataset,
) -> Result<EvalReport> {
    let (spec, trajs) = dynamics_parts(test_ds)?;
    let sols = spec.solutions()?;
    let base = regular_grid_periodic(spec.grid_res, 2)?;
    let horizon = in_t_len(trajs[0].len());

    let mut grids = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.test_grid_seed);
    let test_idx = subsample_indices(base.len(), cfg.eval.pi, &mut rng)?;
    grids.push(DynEvalGrid {
        label: format!("test-grid(pi={}%)", cfg.eval.pi),
        encode_grid: Arc::new(base.select(&test_idx)?),
        encode_idx: test_idx,
        decode: DecodeSide::SameAsEncode,
    });
    if let Some(seed) = cfg.eval.fresh_grid_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = subsample_indices(base.len(), cfg.eval.pi, &mut rng)?;
        grids.push(DynEvalGrid {
            label: format!("fresh-grid(pi={}%)", cfg.eval.pi),
            encode_grid: Arc::new(base.select(&idx)?),
            encode_idx: idx,
            decode: DecodeSide::SameAsEncode,
        });
    }
    if cfg.eval.pi < 100.0 {
        grids.push(DynEvalGrid {
            label: "full-grid(pi=100%)".into(),
            encode_grid: base.clone(),
            encode_idx: (0..base.len()).collect(),
            decode: DecodeSide::SameAsEncode,
        });
    }
    for &res in &cfg.eval.upsample_resolutions {
        if res < spec.grid_res {
            return Err(invalid(format!(
                "upsample resolution {res} below training resolution {}",
                spec.grid_res
            )));
        }
        // Encode on the sparse test grid, query the denser lattice; ground
        // truth comes from the analytic generator, never interpolation.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.test_grid_seed);
        let idx = subsample_indices(base.len(), cfg.eval.pi, &mut rng)?;
        grids.push(DynEvalGrid {
            label: format!("upsampled({res}x{res})"),
            encode_grid: Arc::new(base.select(&idx)?),
            encode_idx: idx,
            decode: DecodeSide::Regular { grid: regular_grid_periodic(res, 2)? },
        });
    }

    let mut entries = Vec::new();
    let mut per_timestep = Vec::new();
    for g in &grids {
        let e = eval_dynamics_grid(models, trajs, &sols, g, horizon)?;
        entries.push(MetricEntry {
            split: "in_t".into(),
            grid: e.label.clone(),
            mse: e.in_t_mse,
            rel_l2: e.in_t_rel,
        });
        entries.push(MetricEntry {
            split: "out_t".into(),
            grid: e.label.clone(),
            mse: e.out_t_mse,
            rel_l2: e.out_t_rel,
        });
        if per_timestep.is_empty() {
            per_timestep = e.curve;
        }
    }
    EvalReport { task: "dynamics".into(), entries, per_timestep }.check()
}

/// Per-timestep forecast errors on the test grid: rows `t = 1 ..= horizon`.
pub fn forecast_curve(
    cfg: &TaskConfig,
    models: &DynamicsModels,
    test_ds: &Dataset,
    horizon: usize,
) -> Result<Vec<(usize, f64)>> {
    let (spec, trajs) = dynamics_parts(test_ds)?;
    let n_t = trajs[0].len();
    if horizon == 0 || horizon > n_t - 1 {
        return Err(invalid(format!(
            "forecast horizon {horizon} outside 1..={} (dataset has {n_t} frames)",
            n_t - 1
        )));
    }
    let sols = spec.solutions()?;
    let base = regular_grid_periodic(spec.grid_res, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.test_grid_seed);
    let idx = subsample_indices(base.len(), cfg.eval.pi, &mut rng)?;
    let grid = DynEvalGrid {
        label: "forecast".into(),
        encode_grid: Arc::new(base.select(&idx)?),
        encode_idx: idx,
        decode: DecodeSide::SameAsEncode,
    };
    let e = eval_dynamics_grid(models, trajs, &sols, &grid, in_t_len(n_t))?;
    Ok((1..=horizon).map(|t| (t, e.curve[t])).collect())
}

/// Decode-side upsampling study on a trained dynamics model: the stated
/// resolutions replace the config's list.
pub fn run_upsampling_eval(
    cfg: &TaskConfig,
    models: &DynamicsModels,
    test_ds: &Dataset,
    resolutions: &[usize],
) -> Result<EvalReport> {
    let mut cfg = cfg.clone();
    cfg.eval.upsample_resolutions = resolutions.to_vec();
    cfg.eval.fresh_grid_seed = None;
    eval_dynamics(&cfg, models, test_ds)
}

/// Full dynamics run: train on one dataset, evaluate on another.
pub fn run_dynamics(
    cfg: &TaskConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
) -> Result<(DynamicsModels, EvalReport)> {
    let (models, _, _) = train_dynamics(cfg, train_ds)?;
    let report = eval_dynamics(cfg, &models, test_ds)?;
    Ok((models, report))
}

// ---------------------------------------------------------------------------
// Paired-function tasks (initial value problem, geometry)
// ---------------------------------------------------------------------------

pub struct PairModels {
    pub input: InrCheckpoint,
    pub output: InrCheckpoint,
    pub proc: ProcessorCheckpoint,
}

fn pair_samples(ds: &Dataset) -> Result<Vec<(FieldSample, FieldSample)>> {
    match ds {
        Dataset::Ivp { pairs, .. } => Ok(pairs.clone()),
        Dataset::Geometry { samples, .. } => {
            Ok(samples.iter().map(|(_, a, u)| (a.clone(), u.clone())).collect())
        }
        Dataset::Dynamics { .. } => Err(invalid("expected a paired-function dataset")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairRole {
    Input,
    Output,
}

/// First training phase for a paired task: meta-train one of the two INRs.
/// Input and output spaces share the routine and differ only in the data
/// stream and seed. Code statistics stay identity until the processor
/// phase.
pub fn fit_pair_inr(
    cfg: &TaskConfig,
    ds: &Dataset,
    role: PairRole,
) -> Result<(InrCheckpoint, Vec<TrainRecord>)> {
    let pairs = pair_samples(ds)?;
    if cfg.processor.kind != ProcessorKind::Mlp {
        return Err(invalid("paired-function tasks use the mlp processor"));
    }
    let (samples, norm, channels, seed_off, name): (Vec<&FieldSample>, _, usize, u64, &str) =
        match role {
            PairRole::Input => {
                let ch = pairs[0].0.n_channels();
                let norm = if cfg.normalize_fields() {
                    fit_field_norm(pairs.iter().map(|(a, _)| &a.values), ch)
                } else {
                    FieldNorm::identity(ch)
                };
                (pairs.iter().map(|(a, _)| a).collect(), norm, ch, 0, "input")
            }
            PairRole::Output => {
                let ch = pairs[0].1.n_channels();
                let norm = if cfg.normalize_fields() {
                    fit_field_norm(pairs.iter().map(|(_, u)| &u.values), ch)
                } else {
                    FieldNorm::identity(ch)
                };
                (pairs.iter().map(|(_, u)| u).collect(), norm, ch, 1, "output")
            }
        };
    let samples: Vec<FieldSample> = samples
        .into_iter()
        .map(|s| {
            FieldSample::new(
                s.grid.clone(),
                normalize_values(&norm, &s.values),
                s.channels.clone(),
            )
        })
        .collect::<coral_core::Result<_>>()?;

    let seed = cfg.seed.wrapping_add(seed_off);
    let mut model = InrModel::init(&cfg.siren_config(2, channels), cfg.arch.d_z, seed)?;
    let mut enc = cfg.encoder.build(cfg.arch.d_z)?;
    let outer = cfg.inr_train.build(seed);
    let trace = train_inr(&samples, &mut model, &mut enc, &outer)?;
    Ok((
        InrCheckpoint {
            role: name.into(),
            model,
            encoder: enc,
            stats: NormStats::identity(cfg.norm_mode()),
            field_norm: norm,
            adam: None,
            epoch: outer.epochs as u64,
        },
        trace,
    ))
}

/// Second training phase for a paired task: encode every training pair with
/// the two fitted INRs, fit the task's code statistics (written back into
/// both checkpoints), and regress the latent MLP on the frozen normalized
/// code pairs.
pub fn fit_pair_processor(
    cfg: &TaskConfig,
    ds: &Dataset,
    input: &mut InrCheckpoint,
    output: &mut InrCheckpoint,
) -> Result<(ProcessorCheckpoint, Vec<TrainRecord>)> {
    let pairs = pair_samples(ds)?;
    let mut za = Vec::with_capacity(pairs.len());
    let mut zu = Vec::with_capacity(pairs.len());
    for (a, u) in &pairs {
        let an = FieldSample::new(
            a.grid.clone(),
            normalize_values(&input.field_norm, &a.values),
            a.channels.clone(),
        )?;
        let un = FieldSample::new(
            u.grid.clone(),
            normalize_values(&output.field_norm, &u.values),
            u.channels.clone(),
        )?;
        za.push(encode(&an, &input.model, &input.encoder)?.0.values);
        zu.push(encode(&un, &output.model, &output.encoder)?.0.values);
    }

    let mode = cfg.norm_mode();
    let (in_stats, out_stats) = match mode {
        NormMode::SharedFeaturewise => {
            let mut pooled = za.clone();
            pooled.extend(zu.iter().cloned());
            let shared = fit_norm(&pooled, mode)?;
            (shared.clone(), shared)
        }
        NormMode::SeparateFeaturewise | NormMode::SeparateScalar => {
            (fit_norm(&za, mode)?, fit_norm(&zu, mode)?)
        }
        // Geometry normalizes the input codes only; the processor regresses
        // onto raw output codes and decode consumes them directly.
        NormMode::InputOnly => (fit_norm(&za, mode)?, NormStats::identity(mode)),
    };
    input.stats = in_stats.clone();
    output.stats = out_stats.clone();

    let code_pairs: Vec<(Tensor, Tensor)> = za
        .iter()
        .zip(zu.iter())
        .map(|(a, u)| {
            Ok((
                in_stats.normalize(&LatentCode::raw(a.clone()))?.values,
                out_stats.normalize(&LatentCode::raw(u.clone()))?.values,
            ))
        })
        .collect::<Result<_>>()?;

    let mut mlp = coral_core::processor::skip_mlp_init(
        cfg.arch.d_z,
        cfg.processor.width,
        cfg.processor.depth,
        cfg.seed ^ 0x9806_5c0d,
    )?;
    let proc_cfg = cfg.proc_train.build_mlp(cfg.seed ^ 0x51ed_270b);
    let trace = train_processor(&code_pairs, &mut mlp, &proc_cfg)?;
    Ok((ProcessorCheckpoint::Mlp { params: mlp, epoch: proc_cfg.epochs as u64 }, trace))
}

/// Trains the input and output INRs (one routine, two data streams), then
/// the latent MLP on the frozen normalized code pairs.
pub fn train_pair_task(
    cfg: &TaskConfig,
    ds: &Dataset,
) -> Result<(PairModels, Vec<TrainRecord>, Vec<TrainRecord>, Vec<TrainRecord>)> {
    let (mut input, trace_in) = fit_pair_inr(cfg, ds, PairRole::Input)?;
    let (mut output, trace_out) = fit_pair_inr(cfg, ds, PairRole::Output)?;
    let (proc, trace_proc) = fit_pair_processor(cfg, ds, &mut input, &mut output)?;
    Ok((PairModels { input, output, proc }, trace_in, trace_out, trace_proc))
}

fn unpack_mlp(ckpt: &ProcessorCheckpoint) -> Result<&SkipMlpParams> {
    match ckpt {
        ProcessorCheckpoint::Mlp { params, .. } => Ok(params),
        ProcessorCheckpoint::Node { .. } => Err(invalid("expected an mlp processor checkpoint")),
    }
}

/// The full latent chain on values: encode the (normalized) input field on
/// its grid, normalize the code, process, denormalize, decode on the query
/// grid. Returns values in normalized output-field space.
pub fn infer_pair(
    models: &PairModels,
    input: &FieldSample,
    query: &Arc<Grid>,
) -> Result<Tensor> {
    let mlp = unpack_mlp(&models.proc)?;
    let norm_in = FieldSample::new(
        input.grid.clone(),
        normalize_values(&models.input.field_norm, &input.values),
        input.channels.clone(),
    )?;
    let (z_a, _) = encode(&norm_in, &models.input.model, &models.input.encoder)?;
    let z_a_n = models.input.stats.normalize(&z_a)?;
    let z_u_n = mlp.apply(&z_a_n.values)?;
    let z_u = models.output.stats.denormalize(&LatentCode::normalized(z_u_n))?;
    Ok(decode_code(&models.output.model, &z_u, query)?.values)
}

/// Evaluation protocols for the paired tasks. `Full` queries every mesh
/// point of a sample from an encoding on the full grid; `Sparse` encodes on
/// a random 20% subset and still queries the full grid.
pub fn eval_pair_task(
    cfg: &TaskConfig,
    models: &PairModels,
    test_ds: &Dataset,
    train_ds: Option<&Dataset>,
) -> Result<EvalReport> {
    let test_pairs = pair_samples(test_ds)?;
    let mut entries = Vec::new();

    let eval_split = |pairs: &[(FieldSample, FieldSample)],
                      split: &str,
                      sparse: Option<f64>|
     -> Result<MetricEntry> {
        let results: Vec<Result<(f64, f64)>> = parallel_map(
            &pairs.iter().enumerate().collect::<Vec<_>>(),
            eval_threads(),
            |(si, (a, u))| -> Result<(f64, f64)> {
                let observed = match sparse {
                    Some(pi) => {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(cfg.eval.test_grid_seed ^ (*si as u64));
                        let idx = subsample_indices(a.grid.len(), pi, &mut rng)?;
                        a.select(&idx)?
                    }
                    None => a.clone(),
                };
                let pred_norm = infer_pair(models, &observed, &u.grid)?;
                let truth_norm = normalize_values(&models.output.field_norm, &u.values);
                let pred_raw = denormalize_values(&models.output.field_norm, &pred_norm);
                Ok((mse(&pred_norm, &truth_norm), rel_l2(&pred_raw, &u.values)))
            },
        );
        let mut m = 0.0;
        let mut r = 0.0;
        for res in results {
            let (mi, ri) = res?;
            m += mi / pairs.len() as f64;
            r += ri / pairs.len() as f64;
        }
        Ok(MetricEntry { split: split.into(), grid: grid_label(sparse), mse: m, rel_l2: r })
    };

    entries.push(eval_split(&test_pairs, "test_full", None)?);
    if matches!(cfg.task, TaskKind::Ivp) {
        entries.push(eval_split(&test_pairs, "test_sparse", Some(cfg.eval.sparse_pi))?);
    }
    if let Some(train) = train_ds {
        entries.push(eval_split(&pair_samples(train)?, "train_full", None)?);
    }

    EvalReport {
        task: match cfg.task {
            TaskKind::Ivp => "ivp".into(),
            TaskKind::Geometry => "geometry".into(),
            TaskKind::Dynamics => unreachable!(),
        },
        entries,
        per_timestep: Vec::new(),
    }
    .check()
}

fn grid_label(sparse: Option<f64>) -> String {
    match sparse {
        Some(pi) => format!("sparse-encode(pi={pi}%)->full-query"),
        None => "full-grid".into(),
    }
}

/// Full paired-task run (initial-value or geometry).
pub fn run_pair_task(
    cfg: &TaskConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
) -> Result<(PairModels, EvalReport)> {
    let (models, _, _, _) = train_pair_task(cfg, train_ds)?;
    let report = eval_pair_task(cfg, &models, test_ds, Some(train_ds))?;
    Ok((models, report))
}

// ---------------------------------------------------------------------------
// Gradient-based design through the trained surrogate
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DesignOutcome {
    /// Optimized control-node displacements, row-major `(9, 2)`.
    pub params: Vec<f64>,
    /// Objective value per iteration (the value before each update).
    pub trace: Vec<f64>,
}

/// Optimizes the deformation parameters so the surrogate-predicted field's
/// grid mean hits a target value. The gradient flows end-to-end: design
/// parameters -> deformed coordinates -> K-step encoder (fully unrolled)
/// -> latent processor -> decoder -> objective. Adam for `steps`
/// iterations.
pub fn inverse_design(
    models: &PairModels,
    geo: &GeometrySpec,
    design: &DesignJson,
    init: Option<Tensor>,
) -> Result<DesignOutcome> {
    let mlp = unpack_mlp(&models.proc)?;
    let grid = regular_grid_closed(geo.grid_res, 2)?;
    let basis = Var::constant(deform_basis(&grid)?);
    let n = grid.len();
    let pts = grid.points().data();
    let mut unit = Vec::with_capacity(n * 2);
    for i in 0..n {
        unit.push(coral_core::data::to_unit_square(pts[2 * i]));
        unit.push(coral_core::data::to_unit_square(pts[2 * i + 1]));
    }
    let unit = Var::constant(Tensor::from_vec(&[n, 2], unit)?);
    let coords = Var::constant(grid.points().clone());

    let mut p = match init {
        Some(t) => {
            if t.shape() != [coral_core::data::DEFORM_CONTROLS, 2] {
                return Err(invalid("design parameters must have shape (9, 2)"));
            }
            t
        }
        None => Tensor::zeros(&[coral_core::data::DEFORM_CONTROLS, 2]),
    };
    if design.init_scale != 0.0 {
        p = Tensor::from_fn(p.shape(), |i| p.data()[i] + design.init_scale * ((i % 3) as f64 - 1.0))?;
    }

    let in_vars = models.input.model.bind(false);
    let out_vars = models.output.model.bind(false);
    let mlp_vars = mlp.bind(false);
    let alpha = Var::constant(models.input.encoder.alpha.clone());
    let target = Var::constant(Tensor::scalar(design.target_mean));

    let mut opt = AdamState::new(core::slice::from_ref(&p));
    let mut trace = Vec::with_capacity(design.steps);

    for step in 0..design.steps {
        let pv = Var::param(p.clone());
        // Deformed coordinates are the input field's values; they are linear
        // in the design parameters.
        let deformed = unit.add(&basis.matmul(&pv)?)?;
        let observed = normalize_var(&models.input.field_norm, &deformed)?;
        let encoded = encode_graph_vars(
            &in_vars,
            &alpha,
            models.input.encoder.steps,
            &coords,
            &observed,
            true,
        )?;
        let z_a_n = models.input.stats.normalize_var(&encoded.code)?;
        let row = z_a_n.broadcast_rows(1)?;
        let z_u_n = coral_core::processor::mlp_process(&mlp_vars, &row)?.sum_axis0()?;
        let z_u = models.output.stats.denormalize_var(&z_u_n)?;
        let pred = decode_var(&out_vars, &z_u, &coords)?;
        let objective = pred.mean()?.sub(&target)?.square()?;
        let value = objective.value().scalar_value()?;
        if !value.is_finite() {
            return Err(invalid(format!("non-finite design objective at iteration {step}")));
        }
        trace.push(value);

        let g = gradient(&objective, &[&pv])?.remove(0);
        let mut params = [p.clone()];
        opt.step(&mut params, &[g.value().clone()], design.lr)?;
        p = params.into_iter().next().unwrap();
    }

    Ok(DesignOutcome { params: p.data().to_vec(), trace })
}

fn normalize_var(norm: &FieldNorm, values: &Var) -> Result<Var> {
    let c = norm.mean.len();
    let shape = values.shape().to_vec();
    let mean = Tensor::from_fn(&shape, |i| norm.mean.data()[i % c])?;
    let inv_std = Tensor::from_fn(&shape, |i| 1.0 / norm.std.data()[i % c])?;
    Ok(values.sub(&Var::constant(mean))?.mul(&Var::constant(inv_std))?)
}

/// Mean of the surrogate-predicted field at a given design, used to pin the
/// fixture objective's optimum.
pub fn design_field_mean(models: &PairModels, geo: &GeometrySpec, p: &Tensor) -> Result<f64> {
    let grid = regular_grid_closed(geo.grid_res, 2)?;
    let basis = deform_basis(&grid)?;
    let n = grid.len();
    let pts = grid.points().data();
    let mut unit = Vec::with_capacity(n * 2);
    for i in 0..n {
        unit.push(coral_core::data::to_unit_square(pts[2 * i]));
        unit.push(coral_core::data::to_unit_square(pts[2 * i + 1]));
    }
    let deformed = Tensor::from_vec(&[n, 2], unit)?.add(&basis.matmul(p)?)?;
    let observed = FieldSample::new(
        grid.clone(),
        deformed,
        vec!["x_def".into(), "y_def".into()],
    )?;
    let pred = infer_pair(models, &observed, &grid)?;
    Ok(pred.data().iter().sum::<f64>() / pred.len() as f64)
}
