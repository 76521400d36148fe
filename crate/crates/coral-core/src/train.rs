//! Optimization: Adam, reduce-on-plateau scheduling, the second-order outer
//! step through the auto-decoding inner loop, and the two training phases
//! (shared INR weights first, then the latent processor on frozen codes).
//!
//! Input and output function spaces are trained by the same routine; they
//! differ only in the data stream and hyperparameters. Batch gradients are
//! means over the batch, and every shuffle is drawn from a seeded generator,
//! so training is bitwise reproducible in single-threaded mode.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient, Var};
use crate::codec::{encode_graph, recon_loss_var, EncoderConfig};
use crate::data::FieldSample;
use crate::error::{CoreError, Result};
use crate::flt;
use crate::inr::{decode_var, InrModel};
use crate::processor::{mlp_process, SkipMlpParams};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam accumulators for one parameter list; shapes mirror the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores a checkpointed state. The power terms are rebuilt from the
    /// step count so a reloaded state continues the same trajectory.
    pub fn restore(params: &[Tensor], m: Vec<Tensor>, v: Vec<Tensor>, step_count: u64) -> Result<AdamState> {
        let mut s = AdamState::new(params);
        if m.len() != s.m.len() || v.len() != s.v.len() {
            return Err(CoreError::ShapeMismatch {
                op: "AdamState::restore",
                detail: format!("{} moment tensors for {} parameters", m.len(), s.m.len()),
            });
        }
        for _ in 0..step_count {
            s.beta1_pow *= s.beta1;
            s.beta2_pow *= s.beta2;
        }
        s.m = m;
        s.v = v;
        s.step_count = step_count;
        Ok(s)
    }

    /// Standard bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CoreError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "{} params / {} grads for {} accumulators",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        self.step_count += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let bc1 = 1.0 - self.beta1_pow;
        let bc2 = 1.0 - self.beta2_pow;
        for i in 0..params.len() {
            if params[i].shape() != grads[i].shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "param {:?} vs grad {:?} at index {i}",
                        params[i].shape(),
                        grads[i].shape()
                    ),
                });
            }
            let mut mdat = self.m[i].data().to_vec();
            let mut vdat = self.v[i].data().to_vec();
            let mut pdat = params[i].data().to_vec();
            for ((p, g), (m, v)) in pdat
                .iter_mut()
                .zip(grads[i].data())
                .zip(mdat.iter_mut().zip(vdat.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (flt::sqrt(v_hat) + self.eps);
            }
            self.m[i] = Tensor::from_vec(self.m[i].shape(), mdat)?;
            self.v[i] = Tensor::from_vec(self.v[i].shape(), vdat)?;
            params[i] = Tensor::from_vec(params[i].shape(), pdat)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reduce-on-plateau scheduler
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlateauConfig {
    pub patience: usize,
    pub decay: f64,
    /// Relative improvement required to reset the patience counter.
    pub rel_threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { patience: 250, decay: 0.75, rel_threshold: 0.01, min_lr: 1e-5 }
    }
}

/// Multiplies the learning rate by `decay` whenever the best loss has not
/// improved by the relative threshold for `patience` consecutive epochs;
/// never goes below `min_lr`.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, cfg: PlateauConfig) -> Result<PlateauScheduler> {
        if !(cfg.decay > 0.0 && cfg.decay < 1.0) || cfg.patience == 0 {
            return Err(CoreError::InvalidParam {
                what: "plateau scheduler",
                detail: format!("decay = {}, patience = {}", cfg.decay, cfg.patience),
            });
        }
        Ok(PlateauScheduler { cfg, lr: initial_lr, best: None, bad_epochs: 0 })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch loss; returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            None => {
                self.best = Some(loss);
            }
            Some(best) => {
                if loss < best * (1.0 - self.cfg.rel_threshold) {
                    self.best = Some(loss);
                    self.bad_epochs = 0;
                } else {
                    self.bad_epochs += 1;
                    if self.bad_epochs >= self.cfg.patience {
                        self.lr = (self.lr * self.cfg.decay).max(self.cfg.min_lr);
                        self.bad_epochs = 0;
                    }
                }
            }
        }
        self.lr
    }
}

/// Replays a loss trace through the scheduler, returning the learning rate
/// in effect after each epoch.
pub fn plateau_schedule(trace: &[f64], initial_lr: f64, cfg: PlateauConfig) -> Result<Vec<f64>> {
    let mut s = PlateauScheduler::new(initial_lr, cfg)?;
    Ok(trace.iter().map(|&l| s.observe(l)).collect())
}

// ---------------------------------------------------------------------------
// Outer (meta) training of the modulated INR
// ---------------------------------------------------------------------------

/// Outer-loop settings shared by the input- and output-INR training phases.
#[derive(Clone, Debug, PartialEq)]
pub struct OuterConfig {
    /// Outer learning rate (lambda).
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for the inner step size; 0 disables learning it.
    pub meta_alpha_lr: f64,
    /// Back-propagate through the K inner steps (the first-order variant
    /// exists as an ablation).
    pub second_order: bool,
    pub scheduler: Option<PlateauConfig>,
    pub seed: u64,
}

impl OuterConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(CoreError::InvalidParam {
                what: "outer config",
                detail: format!("lr = {}, batch_size = {}", self.lr, self.batch_size),
            });
        }
        Ok(())
    }
}

/// One epoch record: loss, learning rate in effect, and the mean inner rate
/// (or the scheduled-sampling probability for NODE training).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub alpha: f64,
}

fn mean_alpha(alpha: &Tensor) -> f64 {
    alpha.data().iter().sum::<f64>() / alpha.len() as f64
}

/// Per-sample outer loss and its gradients with respect to the shared
/// parameters (and the inner rate when trainable): runs the K-step encoder
/// with the graph retained and differentiates the post-adaptation
/// reconstruction loss through it.
pub fn outer_gradients(
    model: &InrModel,
    enc: &EncoderConfig,
    sample: &FieldSample,
    second_order: bool,
    train_alpha: bool,
) -> Result<(f64, Vec<Tensor>, Option<Tensor>)> {
    let vars = model.bind(true);
    let alpha_var =
        if train_alpha { Var::param(enc.alpha.clone()) } else { Var::constant(enc.alpha.clone()) };
    let encoded = encode_graph(&vars, &alpha_var, enc.steps, sample, second_order)?;
    let coords = Var::constant(sample.grid.points().clone());
    let target = Var::constant(sample.values.clone());
    let pred = decode_var(&vars, &encoded.code, &coords)?;
    let loss = recon_loss_var(&pred, &target)?;
    let loss_value = loss.value().scalar_value()?;

    let mut wrt = vars.param_vars();
    if train_alpha {
        wrt.push(alpha_var.clone());
    }
    let refs: Vec<&Var> = wrt.iter().collect();
    let mut grads = gradient(&loss, &refs)?;
    let alpha_grad = if train_alpha { Some(grads.pop().unwrap().value().clone()) } else { None };
    Ok((loss_value, grads.into_iter().map(|g| g.value().clone()).collect(), alpha_grad))
}

const ALPHA_FLOOR: f64 = 1e-6;

/// One outer update on a batch: mean of the per-sample gradients through the
/// inner loop, applied with Adam to the shared INR and hypernetwork weights
/// (and to the inner rate when it is being learned). Returns the batch loss.
pub fn outer_step(
    batch: &[&FieldSample],
    model: &mut InrModel,
    enc: &mut EncoderConfig,
    opt: &mut AdamState,
    alpha_opt: &mut Option<AdamState>,
    lr: f64,
    meta_alpha_lr: f64,
    second_order: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::Empty { what: "batch" });
    }
    if enc.steps == 0 {
        return Err(CoreError::InvalidParam {
            what: "inner steps",
            detail: "outer training requires K >= 1".into(),
        });
    }
    let train_alpha = enc.learn_alpha && meta_alpha_lr > 0.0;
    let scale = 1.0 / batch.len() as f64;
    let mut grad_acc: Vec<Tensor> =
        model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut alpha_acc = Tensor::zeros(enc.alpha.shape());
    let mut loss_sum = 0.0;

    for (si, sample) in batch.iter().enumerate() {
        let (loss, grads, alpha_grad) =
            outer_gradients(model, enc, sample, second_order, train_alpha).map_err(|e| {
                match e {
                    CoreError::NonFiniteLoss { step } => CoreError::OuterStepFailed {
                        sample: si,
                        inner_losses: alloc::vec![step as f64],
                    },
                    other => other,
                }
            })?;
        if !loss.is_finite() {
            return Err(CoreError::OuterStepFailed { sample: si, inner_losses: Vec::new() });
        }
        loss_sum += loss;
        for (acc, g) in grad_acc.iter_mut().zip(grads.iter()) {
            *acc = acc.add(&g.scale(scale)?)?;
        }
        if let Some(ag) = alpha_grad {
            alpha_acc = alpha_acc.add(&ag.scale(scale)?)?;
        }
    }

    let mut params = model.params();
    opt.step(&mut params, &grad_acc, lr)?;
    model.set_params(&params)?;

    if train_alpha {
        if let Some(aopt) = alpha_opt.as_mut() {
            let mut alpha = [enc.alpha.clone()];
            aopt.step(&mut alpha, &[alpha_acc], meta_alpha_lr)?;
            // The inner rate stays positive; gradient descent must not push
            // it through zero.
            enc.alpha =
                Tensor::from_fn(alpha[0].shape(), |i| alpha[0].data()[i].max(ALPHA_FLOOR))?;
        }
    }
    Ok(loss_sum * scale)
}

/// Meta-trains the shared INR weights by looping shuffled batches of
/// [`outer_step`]. Deterministic given the seed; returns the per-epoch
/// trace.
pub fn train_inr(
    dataset: &[FieldSample],
    model: &mut InrModel,
    enc: &mut EncoderConfig,
    cfg: &OuterConfig,
) -> Result<Vec<TrainRecord>> {
    if dataset.is_empty() {
        return Err(CoreError::Empty { what: "dataset" });
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(&model.params());
    let mut alpha_opt = if enc.learn_alpha && cfg.meta_alpha_lr > 0.0 {
        Some(AdamState::new(core::slice::from_ref(&enc.alpha)))
    } else {
        None
    };
    let mut sched = cfg.scheduler.clone().map(|c| PlateauScheduler::new(cfg.lr, c)).transpose()?;
    let mut lr = cfg.lr;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FieldSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let loss = outer_step(
                &batch,
                model,
                enc,
                &mut opt,
                &mut alpha_opt,
                lr,
                cfg.meta_alpha_lr,
                cfg.second_order,
            )?;
            epoch_loss += loss * chunk.len() as f64;
        }
        epoch_loss /= dataset.len() as f64;
        trace.push(TrainRecord { epoch, loss: epoch_loss, lr, alpha: mean_alpha(&enc.alpha) });
        if let Some(s) = sched.as_mut() {
            lr = s.observe(epoch_loss);
        }
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Processor regression on frozen code pairs
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ProcTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub scheduler: Option<PlateauConfig>,
    pub seed: u64,
}

fn stack_rows(codes: &[&Tensor]) -> Result<Tensor> {
    let d = codes[0].len();
    let mut data = Vec::with_capacity(codes.len() * d);
    for c in codes {
        if c.len() != d {
            return Err(CoreError::ShapeMismatch {
                op: "stack_rows",
                detail: format!("{:?} vs first code length {d}", c.shape()),
            });
        }
        data.extend_from_slice(c.data());
    }
    Tensor::from_vec(&[codes.len(), d], data)
}

/// Fits the skip-block MLP to aligned `(z_in, z_out)` code pairs by Adam on
/// the mean squared latent error. The codes are given, fixed, and never
/// re-encoded here.
pub fn train_processor(
    pairs: &[(Tensor, Tensor)],
    mlp: &mut SkipMlpParams,
    cfg: &ProcTrainConfig,
) -> Result<Vec<TrainRecord>> {
    if pairs.is_empty() {
        return Err(CoreError::Empty { what: "code pairs" });
    }
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(CoreError::InvalidParam {
            what: "processor training config",
            detail: format!("lr = {}, batch_size = {}", cfg.lr, cfg.batch_size),
        });
    }
    for (za, zu) in pairs {
        if za.shape() != [mlp.d_z] || zu.shape() != [mlp.d_z] {
            return Err(CoreError::ShapeMismatch {
                op: "train_processor",
                detail: format!(
                    "pair ({:?}, {:?}) for a d_z = {} processor",
                    za.shape(),
                    zu.shape(),
                    mlp.d_z
                ),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(&mlp.params());
    let mut sched = cfg.scheduler.clone().map(|c| PlateauScheduler::new(cfg.lr, c)).transpose()?;
    let mut lr = cfg.lr;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = stack_rows(&chunk.iter().map(|&i| &pairs[i].0).collect::<Vec<_>>())?;
            let targets = stack_rows(&chunk.iter().map(|&i| &pairs[i].1).collect::<Vec<_>>())?;
            let vars = mlp.bind(true);
            let pred = mlp_process(&vars, &Var::constant(inputs))?;
            let loss = pred.sub(&Var::constant(targets))?.square()?.mean()?;
            epoch_loss += loss.value().scalar_value()? * chunk.len() as f64;
            let wrt = vars.param_vars();
            let refs: Vec<&Var> = wrt.iter().collect();
            let grads = gradient(&loss, &refs)?;
            let gts: Vec<Tensor> = grads.iter().map(|g| g.value().clone()).collect();
            let mut params = mlp.params();
            opt.step(&mut params, &gts, lr)?;
            mlp.set_params(&params)?;
        }
        epoch_loss /= pairs.len() as f64;
        trace.push(TrainRecord { epoch, loss: epoch_loss, lr, alpha: 0.0 });
        if let Some(s) = sched.as_mut() {
            lr = s.observe(epoch_loss);
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff;
    use crate::data::regular_grid_closed;
    use crate::inr::SirenConfig;
    use crate::processor::skip_mlp_init;
    use alloc::sync::Arc;
    use alloc::vec;

    fn tiny_model(seed: u64) -> InrModel {
        let cfg = SirenConfig { d_in: 2, d_out: 1, width: 8, depth: 2, omega0: 10.0 };
        InrModel::init(&cfg, 3, seed).unwrap()
    }

    fn teacher_samples(seed: u64, n: usize, res: usize) -> Vec<FieldSample> {
        let teacher = tiny_model(seed);
        let grid = regular_grid_closed(res, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        (0..n)
            .map(|_| {
                let z = Tensor::from_fn(&[3], |_| rng.gen_range(-0.6..0.6)).unwrap();
                teacher.decode_sample(&z, &grid).unwrap()
            })
            .collect()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap()];
        let before = params.clone();
        let grads = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&params);
        s.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut params = vec![Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap()];
        let grads = vec![Tensor::from_vec(&[2], vec![0.3, -7.0]).unwrap()];
        let mut s = AdamState::new(&params);
        s.step(&mut params, &grads, 0.05).unwrap();
        // Bias-corrected first step is lr * g / (|g| + eps'), i.e. about
        // lr * sign(g).
        assert!((params[0].data()[0] + 0.05).abs() < 1e-6);
        assert!((params[0].data()[1] - 0.05).abs() < 1e-6);
    }

    #[test]
    fn adam_equal_gradients_give_equal_updates() {
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap()];
        let grads = vec![Tensor::from_vec(&[2], vec![0.37, 0.37]).unwrap()];
        let mut s = AdamState::new(&params);
        s.step(&mut params, &grads, 0.01).unwrap();
        assert_eq!(params[0].data()[0], params[0].data()[1]);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = vec![Tensor::zeros(&[2])];
        let grads = vec![Tensor::zeros(&[3])];
        let mut s = AdamState::new(&params);
        assert!(s.step(&mut params, &grads, 0.01).is_err());
    }

    #[test]
    fn plateau_constant_on_improving_trace() {
        let cfg =
            PlateauConfig { patience: 3, decay: 0.5, rel_threshold: 0.01, min_lr: 1e-5 };
        let trace: Vec<f64> = (0..10).map(|i| 1.0 / (i + 1) as f64).collect();
        let lrs = plateau_schedule(&trace, 0.1, cfg).unwrap();
        assert!(lrs.iter().all(|&l| l == 0.1));
    }

    #[test]
    fn plateau_halves_after_patience_flat_epochs() {
        let cfg =
            PlateauConfig { patience: 4, decay: 0.5, rel_threshold: 0.01, min_lr: 1e-5 };
        let trace = vec![1.0; 5];
        let lrs = plateau_schedule(&trace, 0.2, cfg).unwrap();
        assert_eq!(lrs, vec![0.2, 0.2, 0.2, 0.2, 0.1]);
    }

    #[test]
    fn plateau_clamps_at_min_lr() {
        let cfg =
            PlateauConfig { patience: 1, decay: 0.1, rel_threshold: 0.01, min_lr: 1e-3 };
        let trace = vec![1.0; 12];
        let lrs = plateau_schedule(&trace, 0.1, cfg).unwrap();
        assert_eq!(*lrs.last().unwrap(), 1e-3);
    }

    #[test]
    fn outer_gradient_matches_finite_differences_k1() {
        let model = tiny_model(31);
        let sample = teacher_samples(77, 1, 4).remove(0);
        let enc = EncoderConfig::scalar_alpha(1e-2, 1).unwrap();
        let (_, grads, _) = outer_gradients(&model, &enc, &sample, true, false).unwrap();

        let params = model.params();
        // Spot-check a hidden weight matrix and the first hypernet matrix.
        for &pi in &[2usize, 6] {
            let fd = finite_diff(
                |t| {
                    let mut m = model.clone();
                    let mut ps = params.clone();
                    ps[pi] = t.clone();
                    m.set_params(&ps)?;
                    let (loss, _, _) = outer_gradients(&m, &enc, &sample, true, false)?;
                    Ok(loss)
                },
                &params[pi],
                1e-5,
            )
            .unwrap();
            for (a, e) in grads[pi].data().iter().zip(fd.data()) {
                assert!(
                    (a - e).abs() <= 1e-5 * (1.0 + e.abs()),
                    "param {pi}: analytic {a} vs fd {e}"
                );
            }
        }
    }

    #[test]
    fn outer_step_is_stationary_on_exact_fit() {
        // Zero final layer + zero-field target: every inner loss is exactly
        // zero, so the outer gradient vanishes and Adam moves nothing.
        let mut model = tiny_model(5);
        let l = model.siren.weights.len() - 1;
        model.siren.weights[l] = Tensor::zeros(model.siren.weights[l].shape());
        model.siren.biases[l] = Tensor::zeros(model.siren.biases[l].shape());
        let grid = regular_grid_closed(3, 2).unwrap();
        let zero_field =
            FieldSample::new(grid, Tensor::zeros(&[9, 1]), vec!["u".into()]).unwrap();
        let before = model.params();
        let mut enc = EncoderConfig::scalar_alpha(1e-2, 3).unwrap();
        let mut opt = AdamState::new(&before);
        let mut none = None;
        let loss = outer_step(
            &[&zero_field],
            &mut model,
            &mut enc,
            &mut opt,
            &mut none,
            1e-3,
            0.0,
            true,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(model.params(), before);
    }

    #[test]
    fn duplicated_sample_matches_single_sample_loss() {
        let model = tiny_model(6);
        let sample = teacher_samples(6, 1, 4).remove(0);
        let enc = EncoderConfig::scalar_alpha(1e-2, 2).unwrap();

        let run = |batch: Vec<&FieldSample>| {
            let mut m = model.clone();
            let mut e = enc.clone();
            let mut opt = AdamState::new(&m.params());
            let mut none = None;
            outer_step(&batch, &mut m, &mut e, &mut opt, &mut none, 1e-3, 0.0, true).unwrap()
        };
        let single = run(vec![&sample]);
        let double = run(vec![&sample, &sample]);
        assert!((single - double).abs() < 1e-15);
    }

    #[test]
    fn outer_step_requires_inner_steps() {
        let mut model = tiny_model(7);
        let sample = teacher_samples(7, 1, 3).remove(0);
        let mut enc = EncoderConfig::scalar_alpha(1e-2, 0).unwrap();
        let mut opt = AdamState::new(&model.params());
        let mut none = None;
        assert!(outer_step(
            &[&sample],
            &mut model,
            &mut enc,
            &mut opt,
            &mut none,
            1e-3,
            0.0,
            true
        )
        .is_err());
    }

    #[test]
    fn train_inr_fits_constant_zero_fields() {
        let grid = regular_grid_closed(4, 2).unwrap();
        let dataset: Vec<FieldSample> = (0..4)
            .map(|_| {
                FieldSample::new(grid.clone(), Tensor::zeros(&[16, 1]), vec!["u".into()]).unwrap()
            })
            .collect();
        let mut model = tiny_model(8);
        let mut enc = EncoderConfig::scalar_alpha(1e-2, 3).unwrap();
        let cfg = OuterConfig {
            lr: 5e-3,
            epochs: 200,
            batch_size: 4,
            meta_alpha_lr: 0.0,
            second_order: true,
            scheduler: None,
            seed: 1,
        };
        let trace = train_inr(&dataset, &mut model, &mut enc, &cfg).unwrap();
        let final_loss = trace.last().unwrap().loss;
        assert!(final_loss <= 1e-6, "final loss {final_loss}");
    }

    #[test]
    fn train_inr_zero_epochs_is_identity() {
        let mut model = tiny_model(9);
        let before = model.clone();
        let dataset = teacher_samples(9, 2, 3);
        let mut enc = EncoderConfig::scalar_alpha(1e-2, 2).unwrap();
        let cfg = OuterConfig {
            lr: 1e-3,
            epochs: 0,
            batch_size: 2,
            meta_alpha_lr: 0.0,
            second_order: true,
            scheduler: None,
            seed: 0,
        };
        let trace = train_inr(&dataset, &mut model, &mut enc, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn train_inr_is_bitwise_reproducible() {
        let dataset = teacher_samples(10, 3, 4);
        let cfg = OuterConfig {
            lr: 2e-3,
            epochs: 12,
            batch_size: 2,
            meta_alpha_lr: 1e-3,
            second_order: true,
            scheduler: None,
            seed: 4,
        };
        let run = || {
            let mut model = tiny_model(10);
            let mut enc = EncoderConfig {
                alpha: Tensor::scalar(1e-2),
                steps: 2,
                learn_alpha: true,
            }
            .validated()
            .unwrap();
            train_inr(&dataset, &mut model, &mut enc, &cfg).unwrap();
            (model, enc)
        };
        let (m1, e1) = run();
        let (m2, e2) = run();
        assert_eq!(m1.params(), m2.params());
        assert_eq!(e1.alpha, e2.alpha);
    }

    #[test]
    fn second_order_beats_first_order_on_fixture() {
        let dataset = teacher_samples(12, 6, 4);
        let run = |second_order: bool| {
            let mut model = tiny_model(13);
            let mut enc = EncoderConfig::scalar_alpha(1e-2, 3).unwrap();
            let cfg = OuterConfig {
                lr: 3e-3,
                epochs: 150,
                batch_size: 6,
                meta_alpha_lr: 0.0,
                second_order,
                scheduler: None,
                seed: 3,
            };
            train_inr(&dataset, &mut model, &mut enc, &cfg).unwrap()
        };
        let second = run(true);
        let first = run(false);
        let s_final = second.last().unwrap().loss;
        let f_final = first.last().unwrap().loss;
        assert!(
            s_final < f_final,
            "second-order final {s_final} vs first-order final {f_final}"
        );

        // The running mean of the outer loss keeps descending late in
        // training for the second-order run.
        let window = 50;
        let means: Vec<f64> = second
            .windows(window)
            .map(|w| w.iter().map(|r| r.loss).sum::<f64>() / window as f64)
            .collect();
        for w in means.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "running mean increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn learned_alpha_stays_positive() {
        let dataset = teacher_samples(14, 2, 3);
        let mut model = tiny_model(14);
        let mut enc = EncoderConfig {
            alpha: Tensor::scalar(2e-6),
            steps: 2,
            learn_alpha: true,
        }
        .validated()
        .unwrap();
        let cfg = OuterConfig {
            lr: 1e-3,
            epochs: 30,
            batch_size: 2,
            meta_alpha_lr: 1e-4,
            second_order: true,
            scheduler: None,
            seed: 6,
        };
        train_inr(&dataset, &mut model, &mut enc, &cfg).unwrap();
        assert!(enc.alpha.data().iter().all(|a| *a >= ALPHA_FLOOR));
    }

    // ----- processor regression -----

    fn linear_pairs(seed: u64, n: usize, d: usize) -> (Tensor, Vec<(Tensor, Tensor)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Near-identity map, matching the residual blocks' inductive bias.
        let a = Tensor::from_fn(&[d, d], |i| {
            let diag = i / d == i % d;
            (if diag { 1.0 } else { 0.0 }) + rng.gen_range(-0.15..0.15)
        })
        .unwrap();
        let pairs = (0..n)
            .map(|_| {
                let z = Tensor::from_fn(&[d], |_| rng.gen_range(-0.7..0.7)).unwrap();
                let out = a.matvec(&z).unwrap();
                (z, out)
            })
            .collect();
        (a, pairs)
    }

    /// Least-squares oracle: solves the normal equations for the best linear
    /// map by Gaussian elimination (independent of the training path).
    fn least_squares_map(pairs: &[(Tensor, Tensor)]) -> Tensor {
        let d = pairs[0].0.len();
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d * d]; // column j: sum za * zu_j
        for (za, zu) in pairs {
            for i in 0..d {
                for j in 0..d {
                    gram[i * d + j] += za.data()[i] * za.data()[j];
                    rhs[i * d + j] += za.data()[i] * zu.data()[j];
                }
            }
        }
        // Solve gram * X = rhs for X (d x d), then A = X^T.
        let mut aug = vec![0.0; d * (d + d)];
        for i in 0..d {
            for j in 0..d {
                aug[i * 2 * d + j] = gram[i * d + j];
                aug[i * 2 * d + d + j] = rhs[i * d + j];
            }
        }
        for col in 0..d {
            let mut piv = col;
            for r in col + 1..d {
                if aug[r * 2 * d + col].abs() > aug[piv * 2 * d + col].abs() {
                    piv = r;
                }
            }
            for j in 0..2 * d {
                aug.swap(col * 2 * d + j, piv * 2 * d + j);
            }
            let p = aug[col * 2 * d + col];
            for j in 0..2 * d {
                aug[col * 2 * d + j] /= p;
            }
            for r in 0..d {
                if r != col {
                    let f = aug[r * 2 * d + col];
                    for j in 0..2 * d {
                        aug[r * 2 * d + j] -= f * aug[col * 2 * d + j];
                    }
                }
            }
        }
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[j * d + i] = aug[i * 2 * d + d + j];
            }
        }
        Tensor::from_vec(&[d, d], a).unwrap()
    }

    #[test]
    fn train_processor_identity_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let pairs: Vec<(Tensor, Tensor)> = (0..16)
            .map(|_| {
                let z = Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0)).unwrap();
                (z.clone(), z)
            })
            .collect();
        let mut mlp = skip_mlp_init(3, 16, 2, 1).unwrap();
        let cfg = ProcTrainConfig {
            lr: 3e-3,
            epochs: 800,
            batch_size: 16,
            scheduler: None,
            seed: 0,
        };
        let trace = train_processor(&pairs, &mut mlp, &cfg).unwrap();
        assert!(trace.last().unwrap().loss <= 1e-6, "loss {}", trace.last().unwrap().loss);
    }

    #[test]
    fn train_processor_recovers_linear_map() {
        let (_, pairs) = linear_pairs(41, 32, 3);
        let mut mlp = skip_mlp_init(3, 32, 2, 2).unwrap();
        let cfg = ProcTrainConfig {
            lr: 5e-3,
            epochs: 8000,
            batch_size: 32,
            scheduler: Some(PlateauConfig {
                patience: 250,
                decay: 0.5,
                rel_threshold: 0.01,
                min_lr: 1e-6,
            }),
            seed: 0,
        };
        let trace = train_processor(&pairs, &mut mlp, &cfg).unwrap();
        assert!(trace.last().unwrap().loss <= 1e-8, "loss {}", trace.last().unwrap().loss);

        let ls = least_squares_map(&pairs);
        for (za, _) in &pairs {
            let oracle = ls.matvec(za).unwrap();
            let pred = mlp.apply(za).unwrap();
            for (p, o) in pred.data().iter().zip(oracle.data()) {
                assert!((p - o).abs() <= 1e-3, "prediction {p} vs least-squares {o}");
            }
        }
    }

    #[test]
    fn train_processor_zero_epochs_is_identity() {
        let (_, pairs) = linear_pairs(42, 4, 3);
        let mut mlp = skip_mlp_init(3, 8, 1, 2).unwrap();
        let before = mlp.clone();
        let cfg =
            ProcTrainConfig { lr: 1e-3, epochs: 0, batch_size: 4, scheduler: None, seed: 0 };
        let trace = train_processor(&pairs, &mut mlp, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(mlp, before);
    }

    #[test]
    fn train_processor_rejects_dim_mismatch() {
        let pairs = vec![(Tensor::zeros(&[4]), Tensor::zeros(&[4]))];
        let mut mlp = skip_mlp_init(3, 8, 1, 2).unwrap();
        let cfg =
            ProcTrainConfig { lr: 1e-3, epochs: 1, batch_size: 1, scheduler: None, seed: 0 };
        assert!(train_processor(&pairs, &mut mlp, &cfg).is_err());
    }
}
