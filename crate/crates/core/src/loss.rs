//! Empirical, infinite-horizon and generalization losses of a predictor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constants::build_error_system;
use crate::error::{Error, Result};
use crate::linalg;
use crate::lti::{self, FlatSystem, Generator, NoiseKind, Series, StateSpace, Trajectory};
use crate::rng;

/// Which signals feed the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WMode {
    /// `w = u`.
    UOnly,
    /// `w = [y; u]`, with no feedthrough from `y`.
    Yu,
}

impl WMode {
    pub fn n_w(self, ny: usize, nu: usize) -> usize {
        match self {
            WMode::UOnly => nu,
            WMode::Yu => ny + nu,
        }
    }

    /// Predictor input sequence for a trajectory.
    pub fn inputs(self, traj: &Trajectory) -> Result<Series> {
        match self {
            WMode::UOnly => Ok(traj.u.clone()),
            WMode::Yu => traj.y.hstack(&traj.u),
        }
    }
}

/// Checks predictor dimensions against the generator partition.
pub fn validate_predictor(pred: &StateSpace, mode: WMode, ny: usize, nu: usize) -> Result<()> {
    let nw = mode.n_w(ny, nu);
    if pred.n_in() != nw || pred.n_out() != ny {
        return Err(Error::Dimension(format!(
            "predictor maps {} inputs to {} outputs, expected {nw} -> {ny}",
            pred.n_in(),
            pred.n_out()
        )));
    }
    if mode == WMode::Yu && pred.d.columns(0, ny).iter().any(|v| *v != 0.0) {
        return Err(Error::InvalidPredictor("in yu mode the feedthrough from y must be zero".into()));
    }
    Ok(())
}

/// A loss estimate; `std_error` is `None` for exact values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub n_samples: usize,
    pub std_error: Option<f64>,
}

impl LossValue {
    fn exact(value: f64, n_samples: usize) -> Self {
        Self { value, n_samples, std_error: None }
    }
}

/// `(1/N) sum ||y(t) - y_hat(t|0)||^2` with the predictor started at zero.
pub fn empirical_loss(pred: &StateSpace, mode: WMode, traj: &Trajectory) -> Result<LossValue> {
    validate_predictor(pred, mode, traj.y.dim(), traj.u.dim())?;
    pred.ensure_stable()?;
    let flat = FlatSystem::from(pred);
    let w = Stacked {
        head: (mode == WMode::Yu).then_some(&traj.y),
        tail: &traj.u,
    };
    Ok(LossValue::exact(rollout_sq_error(&flat, &traj.y, &w), traj.len()))
}

/// Row `t` of `[head; tail]` without materializing the stack.
struct Stacked<'a> {
    head: Option<&'a Series>,
    tail: &'a Series,
}

impl Stacked<'_> {
    #[inline]
    fn fill(&self, t: usize, buf: &mut [f64]) {
        let mut k = 0;
        if let Some(h) = self.head {
            for &v in h.row(t) {
                buf[k] = v;
                k += 1;
            }
        }
        for &v in self.tail.row(t) {
            buf[k] = v;
            k += 1;
        }
    }
}

fn rollout_sq_error(flat: &FlatSystem, y: &Series, w: &Stacked<'_>) -> f64 {
    match (flat.n, flat.m, flat.p) {
        (1, 1, 1) => rollout_single_output::<1, 1>(flat, y, w),
        (2, 1, 1) => rollout_single_output::<2, 1>(flat, y, w),
        (2, 2, 1) => rollout_single_output::<2, 2>(flat, y, w),
        (3, 1, 1) => rollout_single_output::<3, 1>(flat, y, w),
        (3, 2, 1) => rollout_single_output::<3, 2>(flat, y, w),
        _ => rollout_generic(flat, y, w),
    }
}

fn rollout_generic(flat: &FlatSystem, y: &Series, w: &Stacked<'_>) -> f64 {
    let mut x = vec![0.0; flat.n];
    let mut scratch = vec![0.0; flat.n];
    let mut u = vec![0.0; flat.m];
    let mut yhat = vec![0.0; flat.p];
    let mut acc = 0.0;
    for t in 0..y.len() {
        w.fill(t, &mut u);
        flat.step(&mut x, &mut scratch, &u, &mut yhat);
        for (a, b) in y.row(t).iter().zip(&yhat) {
            acc += (a - b) * (a - b);
        }
    }
    acc / y.len() as f64
}

fn rollout_single_output<const N: usize, const M: usize>(flat: &FlatSystem, y: &Series, w: &Stacked<'_>) -> f64 {
    let a: [[f64; N]; N] = std::array::from_fn(|i| std::array::from_fn(|j| flat.a[i * N + j]));
    let b: [[f64; M]; N] = std::array::from_fn(|i| std::array::from_fn(|j| flat.b[i * M + j]));
    let c: [f64; N] = std::array::from_fn(|j| flat.c[j]);
    let d: [f64; M] = std::array::from_fn(|j| flat.d[j]);
    let mut x = [0.0; N];
    let mut u = [0.0; M];
    let mut acc = 0.0;
    let direct = w.head.is_none().then(|| w.tail.as_flat());
    for (t, &yt) in y.as_flat().iter().enumerate() {
        match direct {
            Some(flat_u) => u.copy_from_slice(&flat_u[t * M..(t + 1) * M]),
            None => w.fill(t, &mut u),
        }
        let mut yhat = 0.0;
        for j in 0..N {
            yhat += c[j] * x[j];
        }
        for j in 0..M {
            yhat += d[j] * u[j];
        }
        x = std::array::from_fn(|i| {
            let mut v = 0.0;
            for j in 0..N {
                v += a[i][j] * x[j];
            }
            for j in 0..M {
                v += b[i][j] * u[j];
            }
            v
        });
        acc += (yt - yhat) * (yt - yhat);
    }
    acc / y.len() as f64
}

/// Initial error-system state `[x_g(0); x_hat(0)]` for a trajectory.
///
/// The generator block is the trajectory's `x0`. The predictor block is
/// drawn from its stationary law given `x0` (Gaussian noise) or obtained by
/// running the error system over the burn-in innovations (bounded noise).
pub fn initial_error_state(err: &StateSpace, gen: &Generator, traj: &Trajectory) -> Result<DVector<f64>> {
    let ng = gen.n();
    let ne = err.n();
    let np = ne - ng;
    let noise = &traj.noise;
    let mut x = DVector::zeros(ne);
    match noise.spec().kind {
        NoiseKind::Gaussian => {
            let p = linalg::stationary_covariance(&err.a, &err.b, noise.effective_covariance())?;
            let p11 = p.view((0, 0), (ng, ng)).into_owned();
            let p21 = p.view((ng, 0), (np, ng)).into_owned();
            let p22 = p.view((ng, ng), (np, np)).into_owned();
            let eps = 1e-12 * p11.amax().max(f64::MIN_POSITIVE);
            let p11_inv = p11
                .pseudo_inverse(eps)
                .map_err(|e| Error::Numeric(e.to_string()))?;
            let gain = &p21 * p11_inv;
            let cond = &p22 - &gain * p21.transpose();
            let mut r = rng::stream(traj.seed, rng::STREAM_CONDITIONAL);
            let z = lti::standard_normal_vector(&mut r, np);
            let xp = &gain * &traj.x0 + lti::psd_sqrt(&(0.5 * (&cond + cond.transpose()))) * z;
            x.rows_mut(0, ng).copy_from(&traj.x0);
            x.rows_mut(ng, np).copy_from(&xp);
        }
        NoiseKind::TruncatedGaussian => {
            let rho = err.spectral_radius();
            let needed = lti::burn_in_length(rho);
            let extra = needed.saturating_sub(traj.pre_e.len());
            let mut r = rng::stream(traj.seed, rng::STREAM_CONDITIONAL);
            let early = noise.draw_series(&mut r, extra)?;
            let flat = FlatSystem::from(err);
            let mut state = vec![0.0; ne];
            let mut scratch = vec![0.0; ne];
            let mut out = vec![0.0; err.n_out()];
            for row in early.rows().chain(traj.pre_e.rows()) {
                flat.step(&mut state, &mut scratch, row, &mut out);
            }
            x.copy_from_slice(&state);
            x.rows_mut(0, ng).copy_from(&traj.x0);
        }
    }
    Ok(x)
}

/// Pathwise infinite-past prediction error `y(t) - y_hat(t)`.
pub fn error_path(pred: &StateSpace, mode: WMode, gen: &Generator, traj: &Trajectory) -> Result<Series> {
    if traj.e.len() != traj.len() || traj.e.dim() != gen.m() {
        return Err(Error::InsufficientData("trajectory does not carry its innovation sequence".into()));
    }
    let err = build_error_system(pred, mode, gen)?;
    err.ensure_stable()?;
    let x0 = initial_error_state(&err, gen, traj)?;
    err.simulate(&x0, &traj.e)
}

/// `V_N`: the empirical loss of the infinite-past predictor.
pub fn infinite_horizon_loss(pred: &StateSpace, mode: WMode, gen: &Generator, traj: &Trajectory) -> Result<LossValue> {
    let path = error_path(pred, mode, gen, traj)?;
    let sum: f64 = path.as_flat().iter().map(|v| v * v).sum();
    Ok(LossValue::exact(sum / traj.len() as f64, traj.len()))
}

/// `L(f) = tr(C_e P C_e^T) + tr(D_e Q D_e^T)` with `P` the stationary
/// error-state covariance.
pub fn generalization_loss(pred: &StateSpace, mode: WMode, gen: &Generator, q_e: &DMatrix<f64>) -> Result<LossValue> {
    let err = build_error_system(pred, mode, gen)?;
    let p = linalg::stationary_covariance(&err.a, &err.b, q_e)?;
    let value = (&err.c * p * err.c.transpose()).trace() + (&err.d * q_e * err.d.transpose()).trace();
    Ok(LossValue::exact(value.max(0.0), 0))
}
