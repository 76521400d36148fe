//! Sine-activated coordinate networks (SIREN) with shift modulation, and the
//! linear hypernetwork that maps a latent code to the per-layer shifts.
//!
//! The model follows `f(x) = W_L (s_{L-1} o ... o s_0(x)) + b_L` with
//! `s_i(h) = sin(omega0 (W_i h + b_i + phi_i))`; the shifts `phi_i = V_i z + c_i`
//! are the only per-sample parameters, everything else is shared. With all
//! shifts zero the network reduces exactly to a plain SIREN.
//!
//! Parameters are plain tensors; [`InrModel::bind`] creates graph leaves for
//! a training or encoding pass. Models are immutable while bound, so decode
//! is reentrant and can be called concurrently on shared parameters.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::data::{FieldSample, Grid};
use crate::error::{CoreError, Result};
use crate::flt;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SirenConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub width: usize,
    /// Number of sine (modulated) layers; the final linear layer is extra.
    pub depth: usize,
    pub omega0: f64,
}

impl SirenConfig {
    fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.width == 0 || self.depth == 0 {
            return Err(CoreError::InvalidParam {
                what: "siren dimensions",
                detail: format!("{self:?}"),
            });
        }
        if !(self.omega0 > 0.0) {
            return Err(CoreError::InvalidParam {
                what: "omega0",
                detail: format!("{}, expected > 0", self.omega0),
            });
        }
        Ok(())
    }
}

/// Shared SIREN weights: `depth` sine layers plus one final linear layer.
/// `weights[i]` has shape `(fan_out, fan_in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SirenParams {
    pub config: SirenConfig,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// First layer `U(-1/d_in, 1/d_in)`; every later layer
/// `U(-sqrt(6/fan_in)/omega0, sqrt(6/fan_in)/omega0)`; biases zero.
pub fn siren_init(config: &SirenConfig, seed: u64) -> Result<SirenParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(config.depth + 1);
    let mut biases = Vec::with_capacity(config.depth + 1);
    for layer in 0..=config.depth {
        let (fan_out, fan_in) = if layer == 0 {
            (config.width, config.d_in)
        } else if layer == config.depth {
            (config.d_out, config.width)
        } else {
            (config.width, config.width)
        };
        let bound = if layer == 0 {
            1.0 / fan_in as f64
        } else {
            flt::sqrt(6.0 / fan_in as f64) / config.omega0
        };
        weights.push(Tensor::from_fn(&[fan_out, fan_in], |_| rng.gen_range(-bound..bound))?);
        biases.push(Tensor::zeros(&[fan_out]));
    }
    Ok(SirenParams { config: config.clone(), weights, biases })
}

/// Linear hypernetwork: per sine layer a matrix `V_i (width x d_z)` and an
/// offset `c_i (width)`, giving `phi_i = V_i z + c_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct HypernetParams {
    pub d_z: usize,
    pub v: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

/// `V_i ~ U(-1/sqrt(d_z), 1/sqrt(d_z))`, offsets zero.
pub fn hypernet_init(d_z: usize, width: usize, depth: usize, seed: u64) -> Result<HypernetParams> {
    if d_z == 0 || width == 0 || depth == 0 {
        return Err(CoreError::InvalidParam {
            what: "hypernet dimensions",
            detail: format!("d_z = {d_z}, width = {width}, depth = {depth}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / flt::sqrt(d_z as f64);
    let mut v = Vec::with_capacity(depth);
    let mut c = Vec::with_capacity(depth);
    for _ in 0..depth {
        v.push(Tensor::from_fn(&[width, d_z], |_| rng.gen_range(-bound..bound))?);
        c.push(Tensor::zeros(&[width]));
    }
    Ok(HypernetParams { d_z, v, c })
}

/// Per-layer shift vectors, one per sine layer.
#[derive(Clone, Debug)]
pub struct Modulations {
    pub shifts: Vec<Var>,
}

impl Modulations {
    pub fn zeros(depth: usize, width: usize) -> Modulations {
        Modulations {
            shifts: (0..depth).map(|_| Var::constant(Tensor::zeros(&[width]))).collect(),
        }
    }
}

/// Graph-bound SIREN parameters.
#[derive(Clone)]
pub struct SirenVars {
    pub config: SirenConfig,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl SirenParams {
    pub fn bind(&self, trainable: bool) -> SirenVars {
        let wrap = |t: &Tensor| if trainable { Var::param(t.clone()) } else { Var::constant(t.clone()) };
        SirenVars {
            config: self.config.clone(),
            weights: self.weights.iter().map(wrap).collect(),
            biases: self.biases.iter().map(wrap).collect(),
        }
    }
}

/// Graph-bound hypernetwork parameters.
#[derive(Clone)]
pub struct HypernetVars {
    pub d_z: usize,
    pub v: Vec<Var>,
    pub c: Vec<Var>,
}

impl HypernetParams {
    pub fn bind(&self, trainable: bool) -> HypernetVars {
        let wrap = |t: &Tensor| if trainable { Var::param(t.clone()) } else { Var::constant(t.clone()) };
        HypernetVars {
            d_z: self.d_z,
            v: self.v.iter().map(wrap).collect(),
            c: self.c.iter().map(wrap).collect(),
        }
    }
}

/// Plain SIREN forward pass on a batch of coordinates `(n, d_in)`.
pub fn siren_forward(params: &SirenVars, x: &Var) -> Result<Var> {
    let mods = Modulations::zeros(params.config.depth, params.config.width);
    modulated_forward(params, &mods, x)
}

/// Shift vectors for a latent code: `phi_i = V_i z + c_i`.
pub fn hypernet_modulations(hyper: &HypernetVars, z: &Var) -> Result<Modulations> {
    if z.shape() != [hyper.d_z] {
        return Err(CoreError::ShapeMismatch {
            op: "hypernet_modulations",
            detail: format!("code shape {:?}, expected [{}]", z.shape(), hyper.d_z),
        });
    }
    let shifts = hyper
        .v
        .iter()
        .zip(hyper.c.iter())
        .map(|(v, c)| v.matvec(z)?.add(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Modulations { shifts })
}

/// Modulated SIREN forward pass: each sine layer's preactivation is shifted
/// by its modulation vector. With zero shifts this is exactly
/// [`siren_forward`].
pub fn modulated_forward(params: &SirenVars, mods: &Modulations, x: &Var) -> Result<Var> {
    let cfg = &params.config;
    if mods.shifts.len() != cfg.depth {
        return Err(CoreError::ShapeMismatch {
            op: "modulated_forward",
            detail: format!("{} modulation layers for depth {}", mods.shifts.len(), cfg.depth),
        });
    }
    if x.shape().len() != 2 || x.shape()[1] != cfg.d_in {
        return Err(CoreError::ShapeMismatch {
            op: "modulated_forward",
            detail: format!("coordinates {:?}, expected (n, {})", x.shape(), cfg.d_in),
        });
    }
    let mut h = x.clone();
    for i in 0..cfg.depth {
        let pre = h
            .matmul(&params.weights[i].transpose()?)?
            .add_row(&params.biases[i])?
            .add_row(&mods.shifts[i])?;
        h = pre.scale(cfg.omega0)?.sin();
    }
    h.matmul(&params.weights[cfg.depth].transpose()?)?.add_row(&params.biases[cfg.depth])
}

/// One function space: shared SIREN weights plus the hypernetwork mapping
/// codes to modulations.
#[derive(Clone, Debug, PartialEq)]
pub struct InrModel {
    pub siren: SirenParams,
    pub hyper: HypernetParams,
}

#[derive(Clone)]
pub struct InrVars {
    pub siren: SirenVars,
    pub hyper: HypernetVars,
}

impl InrModel {
    pub fn init(config: &SirenConfig, d_z: usize, seed: u64) -> Result<InrModel> {
        let siren = siren_init(config, seed)?;
        // Distinct stream for the hypernetwork so the two inits do not alias.
        let hyper = hypernet_init(d_z, config.width, config.depth, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        Ok(InrModel { siren, hyper })
    }

    pub fn d_z(&self) -> usize {
        self.hyper.d_z
    }

    pub fn bind(&self, trainable: bool) -> InrVars {
        InrVars { siren: self.siren.bind(trainable), hyper: self.hyper.bind(trainable) }
    }

    /// Shared parameters in serialization order:
    /// `W_0, b_0, ..., W_L, b_L, V_0, c_0, ..., V_{L-1}, c_{L-1}`.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (w, b) in self.siren.weights.iter().zip(self.siren.biases.iter()) {
            out.push(w.clone());
            out.push(b.clone());
        }
        for (v, c) in self.hyper.v.iter().zip(self.hyper.c.iter()) {
            out.push(v.clone());
            out.push(c.clone());
        }
        out
    }

    /// Replaces the parameters, in the order of [`InrModel::params`].
    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let expect = 2 * (self.siren.weights.len() + self.hyper.v.len());
        if params.len() != expect {
            return Err(CoreError::ShapeMismatch {
                op: "set_params",
                detail: format!("{} tensors, expected {}", params.len(), expect),
            });
        }
        let mut it = params.iter();
        for i in 0..self.siren.weights.len() {
            self.siren.weights[i] = it.next().unwrap().clone();
            self.siren.biases[i] = it.next().unwrap().clone();
        }
        for i in 0..self.hyper.v.len() {
            self.hyper.v[i] = it.next().unwrap().clone();
            self.hyper.c[i] = it.next().unwrap().clone();
        }
        Ok(())
    }

    /// Field values decoded from a raw latent code on an arbitrary grid
    /// (value-level convenience; no gradients retained).
    pub fn decode_values(&self, z: &Tensor, grid: &Grid) -> Result<Tensor> {
        let vars = self.bind(false);
        let out = decode_var(&vars, &Var::constant(z.clone()), &Var::constant(grid.points().clone()))?;
        Ok(out.value().clone())
    }

    /// Decoded field as a sample on the grid, with default channel names.
    pub fn decode_sample(&self, z: &Tensor, grid: &Arc<Grid>) -> Result<FieldSample> {
        let values = self.decode_values(z, grid)?;
        let channels: Vec<String> =
            (0..values.shape()[1]).map(|i| format!("y{i}")).collect();
        FieldSample::new(grid.clone(), values, channels)
    }
}

impl InrVars {
    /// Bound parameter handles, aligned with [`InrModel::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.siren.weights.iter().zip(self.siren.biases.iter()) {
            out.push(w.clone());
            out.push(b.clone());
        }
        for (v, c) in self.hyper.v.iter().zip(self.hyper.c.iter()) {
            out.push(v.clone());
            out.push(c.clone());
        }
        out
    }
}

/// The decoder: modulations from the code, then the modulated forward pass.
/// Queryable on any coordinate batch, independent of any training grid.
pub fn decode_var(inr: &InrVars, z: &Var, coords: &Var) -> Result<Var> {
    let mods = hypernet_modulations(&inr.hyper, z)?;
    modulated_forward(&inr.siren, &mods, coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, gradient};
    use crate::data::regular_grid_closed;

    fn tiny_config() -> SirenConfig {
        SirenConfig { d_in: 2, d_out: 1, width: 16, depth: 2, omega0: 10.0 }
    }

    #[test]
    fn init_respects_bounds_over_seeds() {
        let cfg = SirenConfig { d_in: 2, d_out: 1, width: 128, depth: 3, omega0: 10.0 };
        let first_bound = 0.5;
        let hidden_bound = (6.0 / 128.0_f64).sqrt() / 10.0;
        assert!((hidden_bound - 0.02165).abs() < 1e-4);
        for seed in 0..20 {
            let p = siren_init(&cfg, seed).unwrap();
            assert!(p.weights[0].data().iter().all(|w| w.abs() <= first_bound));
            for w in &p.weights[1..] {
                assert!(w.data().iter().all(|v| v.abs() <= hidden_bound));
            }
            for b in &p.biases {
                assert!(b.data().iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        assert_eq!(siren_init(&cfg, 5).unwrap(), siren_init(&cfg, 5).unwrap());
        assert_ne!(siren_init(&cfg, 5).unwrap(), siren_init(&cfg, 6).unwrap());
    }

    #[test]
    fn init_rejects_bad_dims() {
        let mut cfg = tiny_config();
        cfg.width = 0;
        assert!(siren_init(&cfg, 0).is_err());
        let mut cfg = tiny_config();
        cfg.omega0 = -1.0;
        assert!(siren_init(&cfg, 0).is_err());
    }

    #[test]
    fn zero_network_outputs_final_bias() {
        let cfg = tiny_config();
        let mut p = siren_init(&cfg, 0).unwrap();
        for w in p.weights.iter_mut() {
            *w = Tensor::zeros(w.shape());
        }
        p.biases[2] = Tensor::from_vec(&[1], alloc::vec![0.5]).unwrap();
        let vars = p.bind(false);
        let x = Var::constant(Tensor::from_vec(&[3, 2], alloc::vec![0.0, 0.1, -0.4, 0.9, 1.0, -1.0]).unwrap());
        let y = siren_forward(&vars, &x).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn single_layer_hand_evaluation() {
        // W_0 = 0.5, b_0 = 0, omega0 = 2, W_1 = 1, b_1 = 0: f(pi/2) = sin(pi/2) = 1.
        let cfg = SirenConfig { d_in: 1, d_out: 1, width: 1, depth: 1, omega0: 2.0 };
        let p = SirenParams {
            config: cfg,
            weights: alloc::vec![
                Tensor::from_vec(&[1, 1], alloc::vec![0.5]).unwrap(),
                Tensor::from_vec(&[1, 1], alloc::vec![1.0]).unwrap(),
            ],
            biases: alloc::vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])],
        };
        let x = Var::constant(Tensor::from_vec(&[1, 1], alloc::vec![core::f64::consts::FRAC_PI_2]).unwrap());
        let y = siren_forward(&p.bind(false), &x).unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_is_pointwise_over_rows() {
        let model = InrModel::init(&tiny_config(), 4, 3).unwrap();
        let vars = model.bind(false);
        let x = Tensor::from_vec(&[2, 2], alloc::vec![0.3, -0.2, 0.3, -0.2]).unwrap();
        let y = siren_forward(&vars.siren, &Var::constant(x)).unwrap();
        assert_eq!(y.value().at(0, 0), y.value().at(1, 0));
    }

    #[test]
    fn hypernet_at_zero_code_gives_offsets() {
        let mut h = hypernet_init(4, 8, 2, 1).unwrap();
        h.c[1] = Tensor::filled(&[8], 0.25);
        let hv = h.bind(false);
        let mods = hypernet_modulations(&hv, &Var::constant(Tensor::zeros(&[4]))).unwrap();
        assert!(mods.shifts[0].value().data().iter().all(|v| *v == 0.0));
        assert!(mods.shifts[1].value().data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn hypernet_identity_passes_basis_vector() {
        let d = 4;
        let mut h = hypernet_init(d, d, 1, 1).unwrap();
        h.v[0] = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }).unwrap();
        h.c[0] = Tensor::zeros(&[d]);
        let e1 = Tensor::from_vec(&[d], alloc::vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mods = hypernet_modulations(&h.bind(false), &Var::constant(e1.clone())).unwrap();
        assert_eq!(mods.shifts[0].value(), &e1);
    }

    #[test]
    fn hypernet_is_affine() {
        let h = hypernet_init(3, 8, 2, 7).unwrap();
        let hv = h.bind(false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z1 = Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let z2 = Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let at = |z: &Tensor, layer: usize| {
            hypernet_modulations(&hv, &Var::constant(z.clone())).unwrap().shifts[layer]
                .value()
                .clone()
        };
        for layer in 0..2 {
            // phi(z1 + z2) - phi(z1) - phi(z2) + phi(0) = 0
            let lhs = at(&z1.add(&z2).unwrap(), layer)
                .sub(&at(&z1, layer))
                .unwrap()
                .sub(&at(&z2, layer))
                .unwrap()
                .add(&at(&Tensor::zeros(&[3]), layer))
                .unwrap();
            assert!(lhs.max_abs() < 1e-12);
        }
    }

    #[test]
    fn zero_modulations_match_plain_forward() {
        let model = InrModel::init(&tiny_config(), 4, 11).unwrap();
        let vars = model.bind(false);
        let x = Var::constant(
            Tensor::from_fn(&[5, 2], |i| -1.0 + 0.37 * i as f64 % 2.0).unwrap(),
        );
        let plain = siren_forward(&vars.siren, &x).unwrap();
        let mods = Modulations::zeros(2, 16);
        let modulated = modulated_forward(&vars.siren, &mods, &x).unwrap();
        for (a, b) in plain.value().data().iter().zip(modulated.value().data().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_shift_reaches_quarter_period() {
        // W_0 = 0, phi_0 = pi/(2 omega0) - b_0, W_1 = 1: output sin(pi/2) = 1 everywhere.
        let omega0 = 3.0;
        let cfg = SirenConfig { d_in: 1, d_out: 1, width: 1, depth: 1, omega0 };
        let b0 = 0.2;
        let p = SirenParams {
            config: cfg,
            weights: alloc::vec![
                Tensor::zeros(&[1, 1]),
                Tensor::from_vec(&[1, 1], alloc::vec![1.0]).unwrap(),
            ],
            biases: alloc::vec![
                Tensor::from_vec(&[1], alloc::vec![b0]).unwrap(),
                Tensor::zeros(&[1])
            ],
        };
        let shift = core::f64::consts::FRAC_PI_2 / omega0 - b0;
        let mods = Modulations {
            shifts: alloc::vec![Var::constant(Tensor::from_vec(&[1], alloc::vec![shift]).unwrap())],
        };
        let x = Var::constant(Tensor::from_vec(&[3, 1], alloc::vec![-0.9, 0.0, 0.7]).unwrap());
        let y = modulated_forward(&p.bind(false), &mods, &x).unwrap();
        for v in y.value().data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shifts_are_periodic_in_two_pi_over_omega0() {
        let model = InrModel::init(&tiny_config(), 4, 13).unwrap();
        let vars = model.bind(false);
        let z = Var::constant(Tensor::from_vec(&[4], alloc::vec![0.1, -0.2, 0.05, 0.3]).unwrap());
        let x = Var::constant(Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.21) % 1.0).unwrap());
        let mods = hypernet_modulations(&vars.hyper, &z).unwrap();
        let y0 = modulated_forward(&vars.siren, &mods, &x).unwrap();
        let period = core::f64::consts::TAU / 10.0;
        let shifted = Modulations {
            shifts: mods
                .shifts
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    if i == 0 {
                        s.add(&Var::constant(Tensor::filled(&[16], period))).unwrap()
                    } else {
                        s.clone()
                    }
                })
                .collect(),
        };
        let y1 = modulated_forward(&vars.siren, &shifted, &x).unwrap();
        for (a, b) in y0.value().data().iter().zip(y1.value().data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_count_mismatch_is_an_error() {
        let model = InrModel::init(&tiny_config(), 4, 17).unwrap();
        let vars = model.bind(false);
        let mods = Modulations::zeros(3, 16);
        let x = Var::constant(Tensor::zeros(&[2, 2]));
        assert!(modulated_forward(&vars.siren, &mods, &x).is_err());
    }

    #[test]
    fn decode_is_permutation_equivariant() {
        let model = InrModel::init(&tiny_config(), 4, 19).unwrap();
        let grid = regular_grid_closed(3, 2).unwrap();
        let z = Tensor::from_vec(&[4], alloc::vec![0.2, -0.1, 0.4, 0.0]).unwrap();
        let out = model.decode_values(&z, &grid).unwrap();
        let perm: Vec<usize> = (0..grid.len()).rev().collect();
        let pgrid = grid.select(&perm).unwrap();
        let pout = model.decode_values(&z, &pgrid).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            assert_eq!(pout.at(i, 0), out.at(pi, 0));
        }
    }

    #[test]
    fn decode_on_denser_grid_agrees_at_shared_points() {
        let model = InrModel::init(&tiny_config(), 4, 23).unwrap();
        let coarse = regular_grid_closed(3, 2).unwrap();
        let fine = regular_grid_closed(5, 2).unwrap();
        let z = Tensor::from_vec(&[4], alloc::vec![0.2, -0.1, 0.4, 0.0]).unwrap();
        let vc = model.decode_values(&z, &coarse).unwrap();
        let vf = model.decode_values(&z, &fine).unwrap();
        for (ic, pc) in coarse.points().data().chunks(2).enumerate() {
            for (iff, pf) in fine.points().data().chunks(2).enumerate() {
                if pc == pf {
                    assert_eq!(vc.at(ic, 0), vf.at(iff, 0));
                }
            }
        }
    }

    #[test]
    fn decode_gradient_wrt_code_matches_finite_differences() {
        let model = InrModel::init(&tiny_config(), 4, 29).unwrap();
        let grid = regular_grid_closed(4, 2).unwrap();
        let z0 = Tensor::from_vec(&[4], alloc::vec![0.15, -0.3, 0.02, 0.4]).unwrap();

        let vars = model.bind(false);
        let z = Var::param(z0.clone());
        let out = decode_var(&vars, &z, &Var::constant(grid.points().clone())).unwrap();
        let s = out.sum().unwrap();
        let g = gradient(&s, &[&z]).unwrap();

        let fd = finite_diff(
            |zt| model.decode_values(zt, &grid)?.sum()?.scalar_value(),
            &z0,
            1e-5,
        )
        .unwrap();
        for (a, e) in g[0].value().data().iter().zip(fd.data().iter()) {
            assert!((a - e).abs() <= 1e-6 * (1.0 + e.abs()), "grad {a} vs fd {e}");
        }
    }
}
