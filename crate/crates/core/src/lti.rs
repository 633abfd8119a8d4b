//! Discrete-time LTI systems in innovation form: representation, noise
//! models, stationary simulation and predictor rollouts.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, Rng};

/// A time-indexed sequence of fixed-dimension vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    dim: usize,
    data: Vec<f64>,
}

impl Series {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn with_capacity(dim: usize, len: usize) -> Self {
        Self { dim, data: Vec::with_capacity(dim * len) }
    }

    pub fn zeros(dim: usize, len: usize) -> Self {
        Self { dim, data: vec![0.0; dim * len] }
    }

    /// Builds a series from a flat row-major buffer.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 && !data.is_empty() || dim > 0 && data.len() % dim != 0 {
            return Err(Error::Dimension(format!(
                "buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut s = Self::with_capacity(dim, rows.len());
        for r in rows {
            if r.len() != dim {
                return Err(Error::Dimension(format!("row of length {} in series of dim {dim}", r.len())));
            }
            s.push(r);
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// First `len` rows.
    pub fn prefix(&self, len: usize) -> Series {
        Series { dim: self.dim, data: self.data[..len * self.dim].to_vec() }
    }

    /// Concatenates the columns of `self` and `other` row by row.
    pub fn hstack(&self, other: &Series) -> Result<Series> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!(
                "cannot stack series of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        let mut out = Series::with_capacity(self.dim + other.dim, self.len());
        for t in 0..self.len() {
            out.data.extend_from_slice(self.row(t));
            out.data.extend_from_slice(other.row(t));
        }
        Ok(out)
    }

    /// Linear combination `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &Series, beta: f64) -> Result<Series> {
        if self.dim != other.dim || self.len() != other.len() {
            return Err(Error::Dimension("series shapes differ".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| alpha * a + beta * b).collect();
        Ok(Series { dim: self.dim, data })
    }
}

/// A state-space quadruple `(A, B, C, D)`:
/// `x(t+1) = A x(t) + B w(t)`, `z(t) = C x(t) + D w(t)`.
///
/// For generators `B` plays the role of the innovation gain `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl StateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("A must be square, got {}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if c.ncols() != n {
            return Err(Error::Dimension(format!("C has {} columns, expected {n}", c.ncols())));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::Dimension(format!(
                "D is {}x{}, expected {}x{}",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b, c, d })
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.c.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        linalg::spectral_radius(&self.a).expect("A is square by construction")
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }

    /// Returns the spectral radius, or an error if it is not below one.
    pub fn ensure_stable(&self) -> Result<f64> {
        let rho = self.spectral_radius();
        if rho < 1.0 {
            Ok(rho)
        } else {
            Err(Error::Unstable(rho))
        }
    }

    /// Applies the state transform `x -> T x`.
    pub fn similarity(&self, t: &DMatrix<f64>) -> Result<StateSpace> {
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular similarity transform".into()))?;
        StateSpace::new(t * &self.a * &t_inv, t * &self.b, &self.c * &t_inv, self.d.clone())
    }

    /// Simulates from `x0` driven by `inputs`; returns the output sequence.
    pub fn simulate(&self, x0: &DVector<f64>, inputs: &Series) -> Result<Series> {
        if x0.len() != self.n() || inputs.dim() != self.n_in() {
            return Err(Error::Dimension(format!(
                "simulate: state {} (expected {}), input dim {} (expected {})",
                x0.len(),
                self.n(),
                inputs.dim(),
                self.n_in()
            )));
        }
        let flat = FlatSystem::from(self);
        let mut x = x0.as_slice().to_vec();
        let mut scratch = vec![0.0; self.n()];
        let mut out = Series::zeros(self.n_out(), inputs.len());
        for t in 0..inputs.len() {
            flat.step(&mut x, &mut scratch, inputs.row(t), out.row_mut(t));
        }
        Ok(out)
    }
}

/// Row-major copy of a state-space system for allocation-free inner loops.
#[derive(Debug, Clone)]
pub(crate) struct FlatSystem {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl From<&StateSpace> for FlatSystem {
    fn from(s: &StateSpace) -> Self {
        Self {
            n: s.n(),
            m: s.n_in(),
            p: s.n_out(),
            a: row_major(&s.a),
            b: row_major(&s.b),
            c: row_major(&s.c),
            d: row_major(&s.d),
        }
    }
}

impl FlatSystem {
    /// Writes `C x + D u` into `out`, then advances `x <- A x + B u`.
    #[inline]
    pub fn step(&self, x: &mut [f64], scratch: &mut [f64], u: &[f64], out: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            let crow = &self.c[i * n..(i + 1) * n];
            for j in 0..n {
                acc += crow[j] * x[j];
            }
            let drow = &self.d[i * m..(i + 1) * m];
            for j in 0..m {
                acc += drow[j] * u[j];
            }
            *o = acc;
        }
        for i in 0..n {
            let mut acc = 0.0;
            let arow = &self.a[i * n..(i + 1) * n];
            for j in 0..n {
                acc += arow[j] * x[j];
            }
            let brow = &self.b[i * m..(i + 1) * m];
            for j in 0..m {
                acc += brow[j] * u[j];
            }
            scratch[i] = acc;
        }
        x.copy_from_slice(scratch);
    }
}

/// A data generator `x(t+1) = A_g x + K_g e`, `[y; u] = C_g x + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    /// `(A_g, K_g, C_g, I)`.
    pub system: StateSpace,
    pub ny: usize,
    pub nu: usize,
}

impl Generator {
    pub fn new(a: DMatrix<f64>, k: DMatrix<f64>, c: DMatrix<f64>, ny: usize, nu: usize) -> Result<Self> {
        let m = ny + nu;
        if c.nrows() != m || k.ncols() != m {
            return Err(Error::Dimension(format!(
                "generator with ny={ny}, nu={nu} needs C with {m} rows and K with {m} columns"
            )));
        }
        let system = StateSpace::new(a, k, c, DMatrix::identity(m, m))?;
        let gen = Self { system, ny, nu };
        gen.system.ensure_stable()?;
        gen.check_minimum_phase();
        Ok(gen)
    }

    /// Innovation dimension `n_y + n_u`.
    pub fn m(&self) -> usize {
        self.ny + self.nu
    }

    pub fn n(&self) -> usize {
        self.system.n()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.system.a
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.system.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.system.c
    }

    /// Rows of `C_g` producing `y`.
    pub fn c_y(&self) -> DMatrix<f64> {
        self.system.c.rows(0, self.ny).into_owned()
    }

    /// Rows of `C_g` producing `u`.
    pub fn c_u(&self) -> DMatrix<f64> {
        self.system.c.rows(self.ny, self.nu).into_owned()
    }

    /// Whether `A_g - K_g C_g` is Schur. Only logged; no bound consumes it.
    pub fn check_minimum_phase(&self) -> bool {
        let closed = self.a() - self.k() * self.c();
        let rho = linalg::spectral_radius(&closed).unwrap_or(f64::INFINITY);
        if rho >= 1.0 {
            log::warn!("generator is not minimum phase: rho(A_g - K_g C_g) = {rho}");
            false
        } else {
            true
        }
    }

    /// Stationary state covariance for innovations with covariance `q_e`.
    pub fn stationary_covariance(&self, q_e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        linalg::stationary_covariance(self.a(), self.k(), q_e)
    }

    /// Stationary covariance of the stacked output `[y; u]`.
    pub fn output_covariance(&self, q_e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = self.stationary_covariance(q_e)?;
        Ok(self.c() * p * self.c().transpose() + q_e)
    }
}

/// JSON document for a system: `{"A", "K", "C", "D", "ny", "nu"}`.
///
/// For predictors `K` holds the input matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDocument {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    pub d: Vec<Vec<f64>>,
    pub ny: usize,
    pub nu: usize,
}

/// Parses nested rows into a matrix; `cols` is used when `rows` is empty.
pub fn matrix_from_rows(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(cols, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl SystemDocument {
    pub fn from_system(sys: &StateSpace, ny: usize, nu: usize) -> Self {
        Self {
            a: matrix_to_rows(&sys.a),
            k: matrix_to_rows(&sys.b),
            c: matrix_to_rows(&sys.c),
            d: matrix_to_rows(&sys.d),
            ny,
            nu,
        }
    }

    pub fn to_system(&self) -> Result<StateSpace> {
        let a = matrix_from_rows(&self.a, self.a.len())?;
        let n = a.nrows();
        let k = matrix_from_rows(&self.k, 0)?;
        let c = matrix_from_rows(&self.c, n)?;
        let d = matrix_from_rows(&self.d, k.ncols())?;
        StateSpace::new(a, k, c, d)
    }

    pub fn to_generator(&self) -> Result<Generator> {
        let sys = self.to_system()?;
        let m = self.ny + self.nu;
        if sys.d != DMatrix::identity(m, m) {
            return Err(Error::Config("generator D must be the identity".into()));
        }
        Generator::new(sys.a, sys.b, sys.c, self.ny, self.nu)
    }

    pub fn from_generator(gen: &Generator) -> Self {
        Self::from_system(&gen.system, gen.ny, gen.nu)
    }
}

/// Distribution family of the innovations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    TruncatedGaussian,
}

/// How `Q_e` is interpreted for truncated noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceTarget {
    /// `Q_e` is the covariance of the Gaussian before truncation.
    #[default]
    PreTruncation,
    /// The pre-truncation covariance is rescaled until the truncated draws
    /// have covariance close to `Q_e`.
    Achieved,
}

/// Innovation noise description.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub q_e: DMatrix<f64>,
    /// Component bound, used only for truncated noise.
    pub c_e: f64,
    pub target: CovarianceTarget,
}

impl NoiseSpec {
    pub fn gaussian(q_e: DMatrix<f64>) -> Self {
        Self { kind: NoiseKind::Gaussian, q_e, c_e: f64::INFINITY, target: CovarianceTarget::PreTruncation }
    }

    pub fn truncated(q_e: DMatrix<f64>, c_e: f64) -> Self {
        Self { kind: NoiseKind::TruncatedGaussian, q_e, c_e, target: CovarianceTarget::PreTruncation }
    }

    pub fn with_target(mut self, target: CovarianceTarget) -> Self {
        self.target = target;
        self
    }

    pub fn dim(&self) -> usize {
        self.q_e.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        linalg::check_spd(&self.q_e)?;
        if self.kind == NoiseKind::TruncatedGaussian && !(self.c_e > 0.0 && self.c_e.is_finite()) {
            return Err(Error::Config(format!("truncated noise needs a positive bound, got {}", self.c_e)));
        }
        Ok(())
    }

    /// `mu_max(Q_e)`.
    pub fn mu_max(&self) -> f64 {
        linalg::max_eigenvalue_sym(&self.q_e)
    }

    pub fn sampler(&self) -> Result<NoiseSampler> {
        NoiseSampler::new(self)
    }
}

const MIN_ACCEPTANCE: f64 = 1e-3;
const PILOT_DRAWS: usize = 400_000;

/// Prepared sampler for a [`NoiseSpec`].
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    spec: NoiseSpec,
    /// Row-major symmetric square root of the pre-truncation covariance.
    transform: Vec<f64>,
    dim: usize,
    acceptance: f64,
    effective_cov: DMatrix<f64>,
}

impl NoiseSampler {
    pub fn new(spec: &NoiseSpec) -> Result<Self> {
        spec.validate()?;
        let dim = spec.dim();
        let mut sampler = Self {
            spec: spec.clone(),
            transform: row_major(&linalg::sym_sqrt(&spec.q_e)?),
            dim,
            acceptance: 1.0,
            effective_cov: spec.q_e.clone(),
        };
        if spec.kind == NoiseKind::TruncatedGaussian {
            let (acc, cov) = sampler.pilot()?;
            sampler.acceptance = acc;
            sampler.effective_cov = cov;
            if spec.target == CovarianceTarget::Achieved {
                sampler.rescale_to_target()?;
            }
        }
        Ok(sampler)
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Acceptance rate of the truncation step (1 for Gaussian noise).
    pub fn acceptance_rate(&self) -> f64 {
        self.acceptance
    }

    /// Covariance of the produced draws: exact for Gaussian noise, a fixed
    /// pilot estimate for truncated noise.
    pub fn effective_covariance(&self) -> &DMatrix<f64> {
        &self.effective_cov
    }

    /// Largest eigenvalue of the effective covariance.
    pub fn mu_max(&self) -> f64 {
        linalg::max_eigenvalue_sym(&self.effective_cov)
    }

    fn pilot(&self) -> Result<(f64, DMatrix<f64>)> {
        let mut rng = rng::stream(0x5EED, rng::STREAM_PILOT);
        let d = self.dim;
        let mut z = vec![0.0; d];
        let mut e = vec![0.0; d];
        let mut accepted = 0usize;
        let mut attempts = 0usize;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        while accepted < PILOT_DRAWS {
            attempts += 1;
            if self.propose(&mut rng, &mut z, &mut e) {
                accepted += 1;
                for i in 0..d {
                    for j in 0..d {
                        cov[(i, j)] += e[i] * e[j];
                    }
                }
            }
            if attempts >= 20_000 && (accepted as f64) < MIN_ACCEPTANCE * attempts as f64 {
                return Err(Error::Config(format!(
                    "truncation acceptance rate {:.2e} below {MIN_ACCEPTANCE:e}; c_e too small for Q_e",
                    accepted as f64 / attempts as f64
                )));
            }
        }
        cov /= accepted as f64;
        Ok((accepted as f64 / attempts as f64, cov))
    }

    fn rescale_to_target(&mut self) -> Result<()> {
        let target = self.spec.q_e.clone();
        let mut pre = target.clone();
        for _ in 0..30 {
            let diff = &target - &self.effective_cov;
            if diff.amax() <= 1e-4 * target.amax() {
                break;
            }
            pre += diff;
            self.transform = row_major(&linalg::sym_sqrt(&pre)?);
            let (acc, cov) = self.pilot()?;
            self.acceptance = acc;
            self.effective_cov = cov;
        }
        Ok(())
    }

    #[inline]
    fn propose(&self, rng: &mut Rng, z: &mut [f64], e: &mut [f64]) -> bool {
        let d = self.dim;
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let mut inside = true;
        for i in 0..d {
            let row = &self.transform[i * d..(i + 1) * d];
            let v: f64 = row.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            e[i] = v;
            if self.spec.kind == NoiseKind::TruncatedGaussian && v.abs() > self.spec.c_e {
                inside = false;
            }
        }
        inside
    }

    /// Draws one innovation vector into `out`.
    pub fn draw_into(&self, rng: &mut Rng, out: &mut [f64]) -> Result<()> {
        let mut z = [0.0f64; 16];
        let mut z_heap;
        let z: &mut [f64] = if self.dim <= 16 {
            &mut z[..self.dim]
        } else {
            z_heap = vec![0.0; self.dim];
            &mut z_heap
        };
        let mut attempts = 0usize;
        loop {
            attempts += 1;
            if self.propose(rng, z, out) {
                return Ok(());
            }
            if attempts > 100_000 {
                return Err(Error::Config(
                    "truncated sampler failed to accept in 1e5 attempts; c_e too small".into(),
                ));
            }
        }
    }

    /// `count` i.i.d. draws from `rng`.
    pub fn draw_series(&self, rng: &mut Rng, count: usize) -> Result<Series> {
        let mut s = Series::zeros(self.dim, count);
        for t in 0..count {
            self.draw_into(rng, s.row_mut(t))?;
        }
        Ok(s)
    }
}

/// `count` i.i.d. innovation draws, deterministic in `seed`.
pub fn draw_noise(spec: &NoiseSpec, count: usize, seed: u64) -> Result<Series> {
    if count == 0 {
        return Err(Error::Domain("draw_noise needs count >= 1".into()));
    }
    let sampler = spec.sampler()?;
    sampler.draw_series(&mut rng::stream(seed, rng::STREAM_NOISE), count)
}

/// A single realization of the generator over `t = 0..N-1`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub y: Series,
    pub u: Series,
    /// Innovation realization driving `y, u`.
    pub e: Series,
    /// Generator state at `t = 0`.
    pub x0: DVector<f64>,
    /// Innovations of the burn-in that produced `x0` (bounded noise only).
    pub pre_e: Series,
    pub seed: u64,
    pub noise: NoiseSampler,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recomputes `(y, u)` from `(x0, e)`.
    pub fn replay(&self, gen: &Generator) -> Result<(Series, Series)> {
        let out = gen.system.simulate(&self.x0, &self.e)?;
        split_outputs(&out, gen.ny, gen.nu)
    }

    /// The first `n` samples as a trajectory of its own.
    pub fn prefix(&self, n: usize) -> Result<Trajectory> {
        if n == 0 || n > self.len() {
            return Err(Error::Domain(format!("prefix length {n} outside 1..={}", self.len())));
        }
        Ok(Trajectory {
            y: self.y.prefix(n),
            u: self.u.prefix(n),
            e: self.e.prefix(n),
            x0: self.x0.clone(),
            pre_e: self.pre_e.clone(),
            seed: self.seed,
            noise: self.noise.clone(),
        })
    }

    /// Writes `t,y1..,u1..,e1..` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.y.dim()).map(|i| format!("y{i}")));
        header.extend((1..=self.u.dim()).map(|i| format!("u{i}")));
        header.extend((1..=self.e.dim()).map(|i| format!("e{i}")));
        writeln!(w, "{}", header.join(","))?;
        for t in 0..self.len() {
            let mut line = t.to_string();
            for v in self.y.row(t).iter().chain(self.u.row(t)).chain(self.e.row(t)) {
                line.push(',');
                line.push_str(&format!("{v:e}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

fn split_outputs(out: &Series, ny: usize, nu: usize) -> Result<(Series, Series)> {
    let mut y = Series::with_capacity(ny, out.len());
    let mut u = Series::with_capacity(nu, out.len());
    for row in out.rows() {
        y.push(&row[..ny]);
        u.push(&row[ny..ny + nu]);
    }
    Ok((y, u))
}

/// Burn-in length after which the generator transient is below `1e-12`.
pub fn burn_in_length(rho: f64) -> usize {
    if rho <= 0.0 {
        return 1;
    }
    let len = (1e-12f64.ln() / rho.ln()).ceil();
    len.clamp(1.0, 1e7) as usize
}

/// Square root of a positive semi-definite matrix (negative eigenvalues
/// from round-off are clamped to zero).
pub(crate) fn psd_sqrt(p: &DMatrix<f64>) -> DMatrix<f64> {
    if p.nrows() == 0 {
        return p.clone();
    }
    let eig = p.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub(crate) fn standard_normal_vector(rng: &mut Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Simulates `N` stationary samples of the generator.
///
/// Gaussian noise: `x(0)` is drawn from the stationary distribution.
/// Truncated noise: `x(0)` is reached by a burn-in from the zero state,
/// long enough for the transient to fall below `1e-12`.
pub fn simulate_generator(gen: &Generator, spec: &NoiseSpec, n: usize, seed: u64) -> Result<Trajectory> {
    let sampler = spec.sampler()?;
    simulate_with(gen, &sampler, n, seed)
}

/// As [`simulate_generator`] with a prepared sampler.
pub fn simulate_with(gen: &Generator, sampler: &NoiseSampler, n: usize, seed: u64) -> Result<Trajectory> {
    if n == 0 {
        return Err(Error::Domain("trajectory length must be at least 1".into()));
    }
    if sampler.dim() != gen.m() {
        return Err(Error::Dimension(format!(
            "noise dimension {} does not match generator output dimension {}",
            sampler.dim(),
            gen.m()
        )));
    }
    let rho = gen.system.ensure_stable()?;
    let (x0, pre_e) = match sampler.spec().kind {
        NoiseKind::Gaussian => {
            let p = gen.stationary_covariance(sampler.effective_covariance())?;
            let mut rng = rng::stream(seed, rng::STREAM_INIT);
            let z = standard_normal_vector(&mut rng, gen.n());
            (psd_sqrt(&p) * z, Series::new(gen.m()))
        }
        NoiseKind::TruncatedGaussian => {
            let mut rng = rng::stream(seed, rng::STREAM_PREHISTORY);
            let pre = sampler.draw_series(&mut rng, burn_in_length(rho))?;
            let x0 = run_state(gen, &DVector::zeros(gen.n()), &pre);
            (x0, pre)
        }
    };
    let mut rng = rng::stream(seed, rng::STREAM_NOISE);
    let e = sampler.draw_series(&mut rng, n)?;
    simulate_from_state(gen, sampler, x0, e, pre_e, seed)
}

/// Builds a trajectory from a given initial state and innovation sequence.
pub fn simulate_from_state(
    gen: &Generator,
    sampler: &NoiseSampler,
    x0: DVector<f64>,
    e: Series,
    pre_e: Series,
    seed: u64,
) -> Result<Trajectory> {
    if e.dim() != gen.m() || x0.len() != gen.n() {
        return Err(Error::Dimension("initial state or innovations do not match the generator".into()));
    }
    let out = gen.system.simulate(&x0, &e)?;
    let (y, u) = split_outputs(&out, gen.ny, gen.nu)?;
    Ok(Trajectory { y, u, e, x0, pre_e, seed, noise: sampler.clone() })
}

fn run_state(gen: &Generator, x0: &DVector<f64>, inputs: &Series) -> DVector<f64> {
    let flat = FlatSystem::from(&gen.system);
    let mut x = x0.as_slice().to_vec();
    let mut scratch = vec![0.0; gen.n()];
    let mut out = vec![0.0; gen.m()];
    for t in 0..inputs.len() {
        flat.step(&mut x, &mut scratch, inputs.row(t), &mut out);
    }
    DVector::from_vec(x)
}

/// Finite-past predictions `y_hat(t|0)` for `t = 0..N-1`, with `x_hat(0) = 0`.
pub fn predict_rollout(pred: &StateSpace, w: &Series) -> Result<Series> {
    pred.ensure_stable()?;
    if w.dim() != pred.n_in() {
        return Err(Error::Dimension(format!(
            "predictor takes {}-dimensional inputs, got {}",
            pred.n_in(),
            w.dim()
        )));
    }
    pred.simulate(&DVector::zeros(pred.n()), w)
}
