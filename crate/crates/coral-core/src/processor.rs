//! Latent-space processors: the Swish skip-block MLP used for direct
//! latent regression, and the autonomous neural-ODE vector field integrated
//! with fixed-step RK4 for dynamics rollouts, plus scheduled-sampling
//! training of the latter.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient, Var};
use crate::error::{CoreError, Result};
use crate::flt;
use crate::tensor::Tensor;
use crate::train::{AdamState, PlateauConfig, PlateauScheduler, TrainRecord};

/// Swish with learnable slope: `x * sigmoid(beta * x)`. `beta` is rank-0.
pub fn swish(x: &Var, beta: &Var) -> Result<Var> {
    x.mul(&x.mul_scalar(beta)?.sigmoid())
}

fn linear_init<R: Rng>(fan_out: usize, fan_in: usize, rng: &mut R) -> Result<(Tensor, Tensor)> {
    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for both weight and bias.
    let bound = 1.0 / flt::sqrt(fan_in as f64);
    let w = Tensor::from_fn(&[fan_out, fan_in], |_| rng.gen_range(-bound..bound))?;
    let b = Tensor::from_fn(&[fan_out], |_| rng.gen_range(-bound..bound))?;
    Ok((w, b))
}

// ---------------------------------------------------------------------------
// Skip-block MLP
// ---------------------------------------------------------------------------

/// One residual block `z + s2(W2 s1(W1 z + b1) + b2)` with per-activation
/// learnable Swish slopes.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub beta1: Tensor,
    pub beta2: Tensor,
}

/// Stack of residual blocks mapping `d_z -> d_z`; the skip connection fixes
/// every block's input and output dimension to `d_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipMlpParams {
    pub d_z: usize,
    pub hidden: usize,
    pub blocks: Vec<BlockParams>,
}

pub fn skip_mlp_init(d_z: usize, hidden: usize, n_blocks: usize, seed: u64) -> Result<SkipMlpParams> {
    if d_z == 0 || hidden == 0 || n_blocks == 0 {
        return Err(CoreError::InvalidParam {
            what: "processor dimensions",
            detail: format!("d_z = {d_z}, hidden = {hidden}, blocks = {n_blocks}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let (w1, b1) = linear_init(hidden, d_z, &mut rng)?;
        let (w2, b2) = linear_init(d_z, hidden, &mut rng)?;
        blocks.push(BlockParams {
            w1,
            b1,
            w2,
            b2,
            beta1: Tensor::scalar(1.0),
            beta2: Tensor::scalar(1.0),
        });
    }
    Ok(SkipMlpParams { d_z, hidden, blocks })
}

#[derive(Clone)]
pub struct BlockVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub beta1: Var,
    pub beta2: Var,
}

#[derive(Clone)]
pub struct SkipMlpVars {
    pub d_z: usize,
    pub blocks: Vec<BlockVars>,
}

impl SkipMlpParams {
    pub fn bind(&self, trainable: bool) -> SkipMlpVars {
        let wrap = |t: &Tensor| if trainable { Var::param(t.clone()) } else { Var::constant(t.clone()) };
        SkipMlpVars {
            d_z: self.d_z,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    w1: wrap(&b.w1),
                    b1: wrap(&b.b1),
                    w2: wrap(&b.w2),
                    b2: wrap(&b.b2),
                    beta1: wrap(&b.beta1),
                    beta2: wrap(&b.beta2),
                })
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([b.w1.clone(), b.b1.clone(), b.w2.clone(), b.b2.clone(), b.beta1.clone(), b.beta2.clone()]);
        }
        out
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != 6 * self.blocks.len() {
            return Err(CoreError::ShapeMismatch {
                op: "SkipMlpParams::set_params",
                detail: format!("{} tensors, expected {}", params.len(), 6 * self.blocks.len()),
            });
        }
        for (b, chunk) in self.blocks.iter_mut().zip(params.chunks(6)) {
            b.w1 = chunk[0].clone();
            b.b1 = chunk[1].clone();
            b.w2 = chunk[2].clone();
            b.b2 = chunk[3].clone();
            b.beta1 = chunk[4].clone();
            b.beta2 = chunk[5].clone();
        }
        Ok(())
    }

    /// Value-level map of a single code.
    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        let vars = self.bind(false);
        let row = Tensor::from_vec(&[1, z.len()], z.data().to_vec())?;
        let out = mlp_process(&vars, &Var::constant(row))?;
        Tensor::from_vec(&[z.len()], out.value().data().to_vec())
    }
}

impl SkipMlpVars {
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([
                b.w1.clone(),
                b.b1.clone(),
                b.w2.clone(),
                b.b2.clone(),
                b.beta1.clone(),
                b.beta2.clone(),
            ]);
        }
        out
    }
}

/// One residual block on a batch of codes `(n, d_z)`.
pub fn block_forward(block: &BlockVars, z: &Var) -> Result<Var> {
    let h = swish(&z.matmul(&block.w1.transpose()?)?.add_row(&block.b1)?, &block.beta1)?;
    let out = swish(&h.matmul(&block.w2.transpose()?)?.add_row(&block.b2)?, &block.beta2)?;
    z.add(&out)
}

/// Composition of the blocks on a batch of (normalized) codes `(n, d_z)`.
pub fn mlp_process(mlp: &SkipMlpVars, z: &Var) -> Result<Var> {
    if z.shape().len() != 2 || z.shape()[1] != mlp.d_z {
        return Err(CoreError::ShapeMismatch {
            op: "mlp_process",
            detail: format!("codes {:?}, expected (n, {})", z.shape(), mlp.d_z),
        });
    }
    let mut h = z.clone();
    for b in &mlp.blocks {
        h = block_forward(b, &h)?;
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Neural-ODE vector field and RK4 integration
// ---------------------------------------------------------------------------

/// Autonomous latent vector field `dz/dt = field(z)`: an MLP with Swish
/// hidden activations, input and output dimension `d_z`, no time input.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeFieldParams {
    pub d_z: usize,
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub betas: Vec<Tensor>,
}

pub fn ode_field_init(d_z: usize, width: usize, depth: usize, seed: u64) -> Result<OdeFieldParams> {
    if d_z == 0 || width == 0 || depth == 0 {
        return Err(CoreError::InvalidParam {
            what: "ode field dimensions",
            detail: format!("d_z = {d_z}, width = {width}, depth = {depth}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut betas = Vec::new();
    for layer in 0..=depth {
        let (fan_out, fan_in) = if layer == 0 {
            (width, d_z)
        } else if layer == depth {
            (d_z, width)
        } else {
            (width, width)
        };
        let (w, b) = linear_init(fan_out, fan_in, &mut rng)?;
        weights.push(w);
        biases.push(b);
        if layer < depth {
            betas.push(Tensor::scalar(1.0));
        }
    }
    Ok(OdeFieldParams { d_z, width, depth, weights, biases, betas })
}

#[derive(Clone)]
pub struct OdeFieldVars {
    pub d_z: usize,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub betas: Vec<Var>,
}

impl OdeFieldParams {
    pub fn bind(&self, trainable: bool) -> OdeFieldVars {
        let wrap = |t: &Tensor| if trainable { Var::param(t.clone()) } else { Var::constant(t.clone()) };
        OdeFieldVars {
            d_z: self.d_z,
            weights: self.weights.iter().map(wrap).collect(),
            biases: self.biases.iter().map(wrap).collect(),
            betas: self.betas.iter().map(wrap).collect(),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for i in 0..self.weights.len() {
            out.push(self.weights[i].clone());
            out.push(self.biases[i].clone());
        }
        out.extend(self.betas.iter().cloned());
        out
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let expect = 2 * self.weights.len() + self.betas.len();
        if params.len() != expect {
            return Err(CoreError::ShapeMismatch {
                op: "OdeFieldParams::set_params",
                detail: format!("{} tensors, expected {}", params.len(), expect),
            });
        }
        let mut it = params.iter();
        for i in 0..self.weights.len() {
            self.weights[i] = it.next().unwrap().clone();
            self.biases[i] = it.next().unwrap().clone();
        }
        for i in 0..self.betas.len() {
            self.betas[i] = it.next().unwrap().clone();
        }
        Ok(())
    }
}

impl OdeFieldVars {
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for i in 0..self.weights.len() {
            out.push(self.weights[i].clone());
            out.push(self.biases[i].clone());
        }
        out.extend(self.betas.iter().cloned());
        out
    }

    /// Field evaluation on a latent state vector `(d_z,)`.
    pub fn eval(&self, z: &Var) -> Result<Var> {
        if z.shape() != [self.d_z] {
            return Err(CoreError::ShapeMismatch {
                op: "ode_field",
                detail: format!("state {:?}, expected [{}]", z.shape(), self.d_z),
            });
        }
        let depth = self.betas.len();
        let mut h = z.clone();
        for i in 0..=depth {
            h = self.weights[i].matvec(&h)?.add(&self.biases[i])?;
            if i < depth {
                h = swish(&h, &self.betas[i])?;
            }
        }
        Ok(h)
    }
}

/// One classical RK4 step of size `h > 0` for `dz/dt = field(z)`.
pub fn rk4_step<F>(field: &F, z: &Var, h: f64) -> Result<Var>
where
    F: Fn(&Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(CoreError::InvalidParam { what: "rk4 step size", detail: format!("h = {h}") });
    }
    let k1 = field(z)?;
    let k2 = field(&z.add(&k1.scale(h / 2.0)?)?)?;
    let k3 = field(&z.add(&k2.scale(h / 2.0)?)?)?;
    let k4 = field(&z.add(&k3.scale(h)?)?)?;
    let sum = k1.add(&k2.scale(2.0)?)?.add(&k3.scale(2.0)?)?.add(&k4)?;
    z.add(&sum.scale(h / 6.0)?)
}

const BLOWUP_NORM: f64 = 1e6;

/// Sequential RK4 integration to each timestamp: the state at timestamp `k`
/// is the start point for timestamp `k+1`. Each inter-timestamp interval is
/// split into `substeps` RK4 steps. The whole rollout stays in the graph, so
/// gradients flow through every step. Aborts when the state norm exceeds
/// `1e6`, reporting the offending timestamp.
pub fn node_solve<F>(field: &F, z0: &Var, timestamps: &[f64], substeps: usize) -> Result<Vec<Var>>
where
    F: Fn(&Var) -> Result<Var>,
{
    if substeps == 0 {
        return Err(CoreError::InvalidParam { what: "substeps", detail: "must be >= 1".into() });
    }
    let mut prev_t = 0.0;
    for &t in timestamps {
        if !(t > prev_t) {
            return Err(CoreError::InvalidParam {
                what: "timestamps",
                detail: "must be strictly increasing and positive".into(),
            });
        }
        prev_t = t;
    }
    let mut out = Vec::with_capacity(timestamps.len());
    let mut state = z0.clone();
    let mut t = 0.0;
    for &target in timestamps {
        let h = (target - t) / substeps as f64;
        for _ in 0..substeps {
            state = rk4_step(field, &state, h)?;
            if state.value().norm() > BLOWUP_NORM {
                return Err(CoreError::BlowUp { time: target });
            }
        }
        t = target;
        out.push(state.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scheduled sampling
// ---------------------------------------------------------------------------

/// Restart-probability schedule: starts at `eps_init` and is multiplied by
/// `decay` once per `period` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSchedule {
    pub eps_init: f64,
    pub decay: f64,
    pub period: usize,
}

impl Default for SamplingSchedule {
    fn default() -> Self {
        SamplingSchedule { eps_init: 0.99, decay: 0.99, period: 10 }
    }
}

/// `eps(e) = eps_init * decay^floor(e / period)`, evaluated as the iterated
/// product so it agrees bit-for-bit with applying the decay rule epoch by
/// epoch.
pub fn epsilon_at(schedule: &SamplingSchedule, epoch: usize) -> f64 {
    let k = epoch / schedule.period.max(1);
    let mut eps = schedule.eps_init;
    for _ in 0..k {
        eps *= schedule.decay;
    }
    eps
}

// ---------------------------------------------------------------------------
// NODE training with scheduled sampling
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct NodeTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Trajectories per optimizer step.
    pub batch_size: usize,
    pub substeps: usize,
    pub schedule: SamplingSchedule,
    pub scheduler: Option<PlateauConfig>,
    pub seed: u64,
}

/// Fits the vector field to per-trajectory code sequences (one code per
/// latent time unit). During the rollout over a trajectory, integration
/// restarts from the ground-truth code at each step with probability
/// `eps(epoch)`; otherwise it continues from the prediction, so gradients
/// flow through chains of steps as `eps` decays.
pub fn train_node(
    trajectories: &[Vec<Tensor>],
    field: &mut OdeFieldParams,
    cfg: &NodeTrainConfig,
) -> Result<Vec<TrainRecord>> {
    if trajectories.is_empty() || trajectories.iter().any(|t| t.len() < 2) {
        return Err(CoreError::Empty { what: "trajectory codes (need >= 2 frames each)" });
    }
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(CoreError::InvalidParam {
            what: "node training config",
            detail: format!("lr = {}, batch_size = {}", cfg.lr, cfg.batch_size),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(&field.params());
    let mut sched = cfg.scheduler.clone().map(|c| PlateauScheduler::new(cfg.lr, c)).transpose()?;
    let mut lr = cfg.lr;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let eps = epsilon_at(&cfg.schedule, epoch);
        let mut order: Vec<usize> = (0..trajectories.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_acc: Vec<Tensor> =
                field.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            let mut batch_loss = 0.0;
            for &ti in batch {
                let codes = &trajectories[ti];
                let vars = field.bind(true);
                let vf = |z: &Var| vars.eval(z);
                let mut state = Var::constant(codes[0].clone());
                let mut loss: Option<Var> = None;
                for t in 0..codes.len() - 1 {
                    if t > 0 && rng.gen::<f64>() < eps {
                        state = Var::constant(codes[t].clone());
                    }
                    let next = node_solve(&vf, &state, &[1.0], cfg.substeps).map_err(|e| {
                        match e {
                            CoreError::BlowUp { time } => CoreError::TrainDiverged {
                                epoch,
                                trajectory: ti,
                                time: t as f64 + time,
                            },
                            other => other,
                        }
                    })?;
                    let next = next.into_iter().next().unwrap();
                    let term =
                        next.sub(&Var::constant(codes[t + 1].clone()))?.square()?.mean()?;
                    loss = Some(match loss {
                        Some(acc) => acc.add(&term)?,
                        None => term,
                    });
                    state = next;
                }
                let loss = loss.unwrap().scale(1.0 / (codes.len() - 1) as f64)?;
                batch_loss += loss.value().scalar_value()?;
                let wrt = vars.param_vars();
                let refs: Vec<&Var> = wrt.iter().collect();
                let grads = gradient(&loss, &refs)?;
                for (acc, g) in grad_acc.iter_mut().zip(grads.iter()) {
                    *acc = acc.add(&g.value().scale(1.0 / batch.len() as f64)?)?;
                }
            }
            let mut params = field.params();
            opt.step(&mut params, &grad_acc, lr)?;
            field.set_params(&params)?;
            epoch_loss += batch_loss;
        }
        epoch_loss /= trajectories.len() as f64;
        trace.push(TrainRecord { epoch, loss: epoch_loss, lr, alpha: eps });
        if let Some(s) = sched.as_mut() {
            lr = s.observe(epoch_loss);
        }
    }
    Ok(trace)
}
