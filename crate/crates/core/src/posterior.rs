//! Parameterized hypothesis class, prior, Gibbs posterior and the Monte
//! Carlo machinery that estimates posterior expectations and KL terms.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{self, BoundConstants, GammaRule, GeneratorConstants};
use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::{self, WMode};
use crate::lti::{Generator, StateSpace, Trajectory};
use crate::rng;
use crate::stats::{self, Estimate};

/// Maps parameter vectors to predictor matrices.
///
/// Order: `A` row-major, `B_u` column-major, `C` row-major, `D_u`
/// row-major, then (yu mode only) `B_y` column-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub nx: usize,
    pub ny: usize,
    pub nu: usize,
    pub mode: WMode,
}

impl ParamLayout {
    pub fn new(nx: usize, ny: usize, nu: usize, mode: WMode) -> Self {
        Self { nx, ny, nu, mode }
    }

    pub fn dim(&self) -> usize {
        let base = self.nx * self.nx + self.nx * self.nu + self.ny * self.nx + self.ny * self.nu;
        match self.mode {
            WMode::UOnly => base,
            WMode::Yu => base + self.nx * self.ny,
        }
    }

    pub fn to_system(&self, theta: &[f64]) -> Result<StateSpace> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension(format!("theta has length {}, expected {}", theta.len(), self.dim())));
        }
        let (nx, ny, nu) = (self.nx, self.ny, self.nu);
        let mut off = 0;
        let a = DMatrix::from_row_slice(nx, nx, &theta[off..off + nx * nx]);
        off += nx * nx;
        let b_u = DMatrix::from_column_slice(nx, nu, &theta[off..off + nx * nu]);
        off += nx * nu;
        let c = DMatrix::from_row_slice(ny, nx, &theta[off..off + ny * nx]);
        off += ny * nx;
        let d_u = DMatrix::from_row_slice(ny, nu, &theta[off..off + ny * nu]);
        off += ny * nu;
        let (b, d) = match self.mode {
            WMode::UOnly => (b_u, d_u),
            WMode::Yu => {
                let b_y = DMatrix::from_column_slice(nx, ny, &theta[off..off + nx * ny]);
                let mut b = DMatrix::zeros(nx, ny + nu);
                b.columns_mut(0, ny).copy_from(&b_y);
                b.columns_mut(ny, nu).copy_from(&b_u);
                let mut d = DMatrix::zeros(ny, ny + nu);
                d.columns_mut(ny, nu).copy_from(&d_u);
                (b, d)
            }
        };
        StateSpace::new(a, b, c, d)
    }

    pub fn from_system(&self, sys: &StateSpace) -> Result<Vec<f64>> {
        let (nx, ny, nu) = (self.nx, self.ny, self.nu);
        loss::validate_predictor(sys, self.mode, ny, nu)?;
        if sys.n() != nx {
            return Err(Error::Dimension(format!("predictor order {} differs from layout order {nx}", sys.n())));
        }
        let (b_u, d_u) = match self.mode {
            WMode::UOnly => (sys.b.clone(), sys.d.clone()),
            WMode::Yu => (sys.b.columns(ny, nu).into_owned(), sys.d.columns(ny, nu).into_owned()),
        };
        let mut theta = Vec::with_capacity(self.dim());
        theta.extend(sys.a.transpose().iter());
        theta.extend(b_u.iter());
        theta.extend(sys.c.transpose().iter());
        theta.extend(d_u.transpose().iter());
        if self.mode == WMode::Yu {
            theta.extend(sys.b.columns(0, ny).iter());
        }
        Ok(theta)
    }
}

/// Membership rule of the hypothesis class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassConstraint {
    pub rho_max: f64,
    pub gf_max: f64,
    /// Optional bound on `max |theta_i|`.
    pub box_bound: Option<f64>,
}

impl Default for ClassConstraint {
    fn default() -> Self {
        Self { rho_max: 1.0, gf_max: 10.0, box_bound: Some(100.0) }
    }
}

/// The prior `pi(theta) ~ exp(-Gbar_f)` restricted to the class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorModel {
    pub layout: ParamLayout,
    pub constraint: ClassConstraint,
    pub gamma_rule: GammaRule,
}

impl PriorModel {
    pub fn new(layout: ParamLayout, constraint: ClassConstraint) -> Self {
        Self { layout, constraint, gamma_rule: GammaRule::default() }
    }

    /// `Gbar_f(theta)` if `theta` lies in the class.
    pub fn class_gain(&self, theta: &[f64]) -> Option<f64> {
        if let Some(b) = self.constraint.box_bound {
            if theta.iter().any(|v| v.abs() > b) {
                return None;
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let sys = self.layout.to_system(theta).ok()?;
        let rho = linalg::spectral_radius(&sys.a).ok()?;
        if !(rho < self.constraint.rho_max && rho < 1.0) {
            return None;
        }
        let g = constants::predictor_gains(&sys, self.gamma_rule).ok()?.g_bar_f;
        (g < self.constraint.gf_max).then_some(g)
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.class_gain(theta).is_some()
    }

    /// `-Gbar_f(theta)` inside the class, `-inf` outside.
    pub fn log_prior_unnorm(&self, theta: &[f64]) -> f64 {
        self.class_gain(theta).map_or(f64::NEG_INFINITY, |g| -g)
    }

    /// `log_prior_unnorm(theta) - lambda * L_hat_N`; also returns `L_hat_N`.
    pub fn log_gibbs_unnorm(&self, theta: &[f64], lambda: f64, traj: &Trajectory) -> Eval {
        let lp = self.log_prior_unnorm(theta);
        if lp == f64::NEG_INFINITY {
            return Eval { log_density: lp, aux: f64::NAN };
        }
        let l = self
            .layout
            .to_system(theta)
            .and_then(|s| loss::empirical_loss(&s, self.layout.mode, traj))
            .map_or(f64::INFINITY, |v| v.value);
        let log_density = if lambda == 0.0 { lp } else { lp - lambda * l };
        Eval { log_density, aux: l }
    }
}

/// A target evaluation: log density and an auxiliary value stored with
/// each retained sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eval {
    pub log_density: f64,
    pub aux: f64,
}

/// Random-walk Metropolis settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MhSettings {
    /// Total steps including burn-in.
    pub steps: usize,
    pub proposal_scale: f64,
    pub thinning: usize,
    /// Learn the proposal covariance during burn-in.
    pub adapt_shape: bool,
}

impl Default for MhSettings {
    fn default() -> Self {
        Self { steps: 20_000, proposal_scale: 0.05, thinning: 10, adapt_shape: true }
    }
}

impl MhSettings {
    pub fn burn_in(&self) -> usize {
        self.steps / 5
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 10 || self.thinning == 0 || !(self.proposal_scale > 0.0) {
            return Err(Error::Config(format!("invalid MCMC settings {self:?}")));
        }
        Ok(())
    }
}

/// Retained MCMC samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub dim: usize,
    samples: Vec<f64>,
    pub log_densities: Vec<f64>,
    pub aux: Vec<f64>,
    pub acceptance_rate: f64,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
    pub final_scale: f64,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.log_densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.dim)
    }

    /// One row per sample: theta components, log density, aux value.
    pub fn write_csv<W: Write>(&self, mut w: W, aux_name: &str) -> Result<()> {
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("theta{i}")).collect();
        header.push("log_density".into());
        header.push(aux_name.into());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.sample(i).iter().map(|v| format!("{v:e}")).collect();
            row.push(format!("{:e}", self.log_densities[i]));
            row.push(format!("{:e}", self.aux[i]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

const ADAPT_WINDOW: usize = 100;

fn shape_factor(history: &[f64], dim: usize) -> Option<DMatrix<f64>> {
    let n = history.len() / dim;
    if n < 2 * dim + 2 {
        return None;
    }
    let data = DMatrix::from_row_slice(n, dim, history);
    let mean = data.row_mean();
    let mut cov = DMatrix::zeros(dim, dim);
    for r in data.row_iter() {
        let d = r - &mean;
        cov += d.transpose() * &d;
    }
    cov /= (n - 1) as f64;
    let jitter = 1e-10 * cov.diagonal().max().max(1e-12);
    for i in 0..dim {
        cov[(i, i)] += jitter;
    }
    cov.cholesky().map(|c| c.l())
}

/// Random-walk Metropolis with Gaussian proposals.
///
/// During burn-in the proposal scale adapts towards an acceptance rate in
/// `[0.2, 0.4]`; with `adapt_shape` the proposal covariance is also
/// learned from the burn-in states. Both are frozen afterwards.
pub fn mh_sample(target: impl Fn(&[f64]) -> Eval, init: &[f64], settings: MhSettings, seed: u64) -> Result<Chain> {
    settings.validate()?;
    let dim = init.len();
    let mut current = init.to_vec();
    let mut cur = target(&current);
    if cur.log_density == f64::NEG_INFINITY || cur.log_density.is_nan() {
        return Err(Error::Domain("initial point has zero target density".into()));
    }
    let mut rng = rng::stream(seed, rng::STREAM_MCMC);
    let mut scale = settings.proposal_scale;
    let burn_in = settings.burn_in();
    let kept = (settings.steps - burn_in) / settings.thinning;
    let mut chain = Chain {
        dim,
        samples: Vec::with_capacity(kept * dim),
        log_densities: Vec::with_capacity(kept),
        aux: Vec::with_capacity(kept),
        acceptance_rate: 0.0,
        burn_in,
        thinning: settings.thinning,
        seed,
        final_scale: scale,
    };
    let mut shape: Option<DMatrix<f64>> = None;
    let mut history = Vec::new();
    let mut z = vec![0.0; dim];
    let mut proposal = vec![0.0; dim];
    let mut window_acc = 0usize;
    let mut accepted = 0usize;
    for step in 0..settings.steps {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        match &shape {
            Some(l) => {
                for i in 0..dim {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += l[(i, j)] * z[j];
                    }
                    proposal[i] = current[i] + scale * acc;
                }
            }
            None => {
                for i in 0..dim {
                    proposal[i] = current[i] + scale * z[i];
                }
            }
        }
        let u: f64 = rng.random();
        let prop = target(&proposal);
        let accept = prop.log_density > f64::NEG_INFINITY && u.ln() < prop.log_density - cur.log_density;
        if accept {
            current.copy_from_slice(&proposal);
            cur = prop;
        }
        if step < burn_in {
            window_acc += accept as usize;
            if settings.adapt_shape {
                history.extend_from_slice(&current);
            }
            if (step + 1) % ADAPT_WINDOW == 0 {
                let rate = window_acc as f64 / ADAPT_WINDOW as f64;
                if rate < 0.2 {
                    scale *= 0.7;
                } else if rate > 0.4 {
                    scale *= 1.4;
                }
                window_acc = 0;
                if settings.adapt_shape && 4 * (step + 1) >= burn_in {
                    if let Some(l) = shape_factor(&history, dim) {
                        if shape.is_none() {
                            scale = 2.38 / (dim as f64).sqrt();
                        }
                        shape = Some(l);
                    }
                }
            }
            continue;
        }
        accepted += accept as usize;
        if (step - burn_in + 1) % settings.thinning == 0 {
            chain.samples.extend_from_slice(&current);
            chain.log_densities.push(cur.log_density);
            chain.aux.push(cur.aux);
        }
    }
    let post = settings.steps - burn_in;
    chain.acceptance_rate = accepted as f64 / post.max(1) as f64;
    chain.final_scale = scale;
    if chain.acceptance_rate < 0.01 {
        return Err(Error::Tuning(format!(
            "acceptance rate {:.4} after adaptation (scale {scale:e})",
            chain.acceptance_rate
        )));
    }
    Ok(chain)
}

/// `ln Z = ln E_pi exp(-lambda L_hat_N)` from losses on prior samples.
pub fn estimate_log_z(prior_losses: &[f64], lambda: f64) -> Result<Estimate> {
    if prior_losses.is_empty() || prior_losses.iter().all(|l| !l.is_finite()) {
        return Err(Error::InsufficientData("no finite prior losses to estimate Z".into()));
    }
    if lambda == 0.0 {
        return Ok(Estimate::exact(0.0));
    }
    let xs: Vec<f64> = prior_losses.iter().map(|l| -lambda * l).collect();
    let n = xs.len() as f64;
    let lse = stats::log_sum_exp(&xs);
    let scaled: Vec<f64> = xs.iter().map(|x| n * (x - lse).exp()).collect();
    Ok(Estimate::new(lse - n.ln(), stats::mean_se_ess(&scaled).se))
}

/// `Z` itself, with its standard error.
pub fn estimate_z(prior_losses: &[f64], lambda: f64) -> Result<Estimate> {
    let lz = estimate_log_z(prior_losses, lambda)?;
    let z = lz.value.exp();
    Ok(Estimate::new(z, z * lz.se))
}

/// KL estimate: the clamped value used in bounds and the raw estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub raw: f64,
    pub se: f64,
}

impl KlEstimate {
    fn from_raw(raw: f64, se: f64) -> Self {
        if raw < 0.0 {
            log::debug!("KL estimate {raw:e} clamped to 0 (se {se:e})");
        }
        Self { value: raw.max(0.0), raw, se }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.value, self.se)
    }
}

/// `KL(rho || pi) = -lambda E_rho L_hat_N - ln Z`.
pub fn kl_gibbs_prior(gibbs_losses: &[f64], lambda: f64, log_z: Estimate) -> Result<KlEstimate> {
    if !log_z.value.is_finite() {
        return Err(Error::Numeric(format!("invalid ln Z = {}", log_z.value)));
    }
    if gibbs_losses.is_empty() {
        return Err(Error::InsufficientData("empty Gibbs chain".into()));
    }
    if lambda == 0.0 {
        return Ok(KlEstimate { value: 0.0, raw: 0.0, se: 0.0 });
    }
    let m = stats::mean_se_ess(gibbs_losses);
    let raw = -lambda * m.value - log_z.value;
    let se = ((lambda * m.se).powi(2) + log_z.se.powi(2)).sqrt();
    Ok(KlEstimate::from_raw(raw, se))
}

/// Chain average with an ESS-adjusted standard error.
pub fn expectation_over(chain: &Chain, functional: impl Fn(&[f64]) -> f64) -> Estimate {
    let values: Vec<f64> = chain.samples().map(functional).collect();
    if values.iter().all(|v| *v == values[0]) {
        return Estimate::exact(values[0]);
    }
    stats::mean_se_ess(&values)
}

/// Posterior summaries at a given `lambda`.
pub trait PosteriorHandle {
    fn kl(&self, lambda: f64) -> Result<KlEstimate>;
    fn mean_empirical_loss(&self, lambda: f64) -> Result<Estimate>;
    fn mean_generalization_loss(&self, lambda: f64) -> Result<Estimate>;
}

/// Samples from the prior with their constants.
#[derive(Debug, Clone)]
pub struct PriorEnsemble {
    pub model: PriorModel,
    pub chain: Chain,
    pub systems: Vec<StateSpace>,
    pub constants: Vec<BoundConstants>,
}

/// A point of the class used to start chains: all parameters zero.
pub fn default_init(layout: &ParamLayout) -> Vec<f64> {
    vec![0.0; layout.dim()]
}

impl PriorEnsemble {
    /// Draws `n_samples` prior samples after burn-in and computes their
    /// constants.
    pub fn sample(
        model: PriorModel,
        gen: &Generator,
        gc: &GeneratorConstants,
        n_samples: usize,
        settings: MhSettings,
        seed: u64,
    ) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::Config("prior sample count must be positive".into()));
        }
        let steps = n_samples * settings.thinning * 5 / 4 + 5;
        let settings = MhSettings { steps, ..settings };
        let init = default_init(&model.layout);
        let target = |t: &[f64]| Eval { log_density: model.log_prior_unnorm(t), aux: 0.0 };
        let mut chain = mh_sample(target, &init, settings, seed)?;
        chain.samples.truncate(n_samples * chain.dim);
        chain.log_densities.truncate(n_samples);
        chain.aux.truncate(n_samples);
        Self::from_chain(model, gen, gc, chain)
    }

    pub fn from_chain(model: PriorModel, gen: &Generator, gc: &GeneratorConstants, mut chain: Chain) -> Result<Self> {
        let systems: Vec<StateSpace> = chain.samples().map(|t| model.layout.to_system(t)).collect::<Result<_>>()?;
        let constants: Vec<BoundConstants> = systems
            .par_iter()
            .map(|s| constants::compute_constants_with(gc, s, model.layout.mode, gen, model.gamma_rule))
            .collect::<Result<_>>()?;
        for (i, c) in constants.iter().enumerate() {
            chain.aux[i] = c.g_bar_f;
            assert!(c.g_bar_f < model.constraint.gf_max, "prior sample outside the class");
        }
        Ok(Self { model, chain, systems, constants })
    }

    pub fn len(&self) -> usize {
        self.systems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.systems.is_empty()
    }

    pub fn empirical_losses(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        self.systems
            .par_iter()
            .map(|s| loss::empirical_loss(s, self.model.layout.mode, traj).map(|v| v.value))
            .collect()
    }

    pub fn generalization_losses(&self, gen: &Generator, q_e: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.systems
            .par_iter()
            .map(|s| loss::generalization_loss(s, self.model.layout.mode, gen, q_e).map(|v| v.value))
            .collect()
    }
}

/// The Gibbs posterior approximated by self-normalized reweighting of a
/// fixed prior ensemble.
///
/// Cheap for any `lambda`, but the effective sample size shrinks as
/// `lambda` grows; check [`ReweightedPosterior::ess`].
#[derive(Debug, Clone)]
pub struct ReweightedPosterior {
    pub emp: Vec<f64>,
    pub gen: Vec<f64>,
}

impl ReweightedPosterior {
    pub fn new(emp: Vec<f64>, gen: Vec<f64>) -> Result<Self> {
        if emp.is_empty() || emp.len() != gen.len() {
            return Err(Error::Dimension("loss vectors must be nonempty and of equal length".into()));
        }
        Ok(Self { emp, gen })
    }

    /// Normalized weights `w_i ~ exp(-lambda L_hat_i)`.
    pub fn weights(&self, lambda: f64) -> Vec<f64> {
        let xs: Vec<f64> = self.emp.iter().map(|l| -lambda * l).collect();
        let lse = stats::log_sum_exp(&xs);
        xs.iter().map(|x| (x - lse).exp()).collect()
    }

    pub fn ess(&self, lambda: f64) -> f64 {
        1.0 / self.weights(lambda).iter().map(|w| w * w).sum::<f64>()
    }

    fn weighted_mean(&self, values: &[f64], lambda: f64) -> Estimate {
        let w = self.weights(lambda);
        let mean: f64 = w.iter().zip(values).map(|(w, v)| w * v).sum();
        let var: f64 = w.iter().zip(values).map(|(w, v)| w * w * (v - mean).powi(2)).sum();
        Estimate::new(mean, var.sqrt())
    }
}

impl PosteriorHandle for ReweightedPosterior {
    fn kl(&self, lambda: f64) -> Result<KlEstimate> {
        let log_z = estimate_log_z(&self.emp, lambda)?;
        let m = self.weighted_mean(&self.emp, lambda);
        let raw = -lambda * m.value - log_z.value;
        let se = ((lambda * m.se).powi(2) + log_z.se.powi(2)).sqrt();
        Ok(KlEstimate::from_raw(raw, se))
    }

    fn mean_empirical_loss(&self, lambda: f64) -> Result<Estimate> {
        Ok(self.weighted_mean(&self.emp, lambda))
    }

    fn mean_generalization_loss(&self, lambda: f64) -> Result<Estimate> {
        Ok(self.weighted_mean(&self.gen, lambda))
    }
}

/// Settings of a [`GibbsLadder`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderSettings {
    /// Ratio between consecutive rungs.
    pub ratio: f64,
    pub rung: MhSettings,
    /// Below the anchor the prior samples are reweighted directly; the
    /// anchor is the largest `lambda` keeping this fraction of them
    /// effective.
    pub min_ess_fraction: f64,
}

impl Default for LadderSettings {
    fn default() -> Self {
        Self {
            ratio: 2.0,
            rung: MhSettings { steps: 4000, thinning: 4, ..MhSettings::default() },
            min_ess_fraction: 0.5,
        }
    }
}

impl LadderSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 1.0 && self.ratio.is_finite()) {
            return Err(Error::Domain(format!("ladder ratio must exceed 1, got {}", self.ratio)));
        }
        if !(self.min_ess_fraction > 0.0 && self.min_ess_fraction < 1.0) {
            return Err(Error::Domain(format!("min_ess_fraction must lie in (0, 1), got {}", self.min_ess_fraction)));
        }
        self.rung.validate()
    }
}

#[derive(Debug, Clone)]
struct Rung {
    lambda: f64,
    mean: Estimate,
    last: Vec<f64>,
    acceptance: f64,
}

/// Gibbs posteriors on a geometric ladder of `lambda` values.
///
/// `ln Z(lambda) = ln Z(a) - int_a^lambda E_s L_hat ds`, with `ln Z(a)` at
/// the anchor `a` taken from reweighted prior samples and the integral by
/// trapezoids between rungs. Rungs are added on demand and each chain is
/// warm-started from the previous rung, so results depend only on the seed
/// and the highest `lambda` requested.
#[derive(Debug, Clone)]
pub struct GibbsLadder<'a> {
    model: PriorModel,
    traj: &'a Trajectory,
    prior: ReweightedPosterior,
    settings: LadderSettings,
    seed: u64,
    anchor_log_z: Estimate,
    rungs: Vec<Rung>,
}

impl<'a> GibbsLadder<'a> {
    /// `prior_losses` and `prior_samples` come from the same prior ensemble.
    pub fn new(
        model: PriorModel,
        traj: &'a Trajectory,
        prior_losses: Vec<f64>,
        prior_samples: &Chain,
        settings: LadderSettings,
        seed: u64,
    ) -> Result<Self> {
        settings.validate()?;
        if prior_losses.len() != prior_samples.len() {
            return Err(Error::Dimension("prior losses and samples differ in length".into()));
        }
        let prior = ReweightedPosterior::new(prior_losses.clone(), prior_losses)?;
        let target = settings.min_ess_fraction * prior.emp.len() as f64;
        let (mut lo, mut hi) = (-30.0f64, 30.0f64);
        if prior.ess(hi.exp()) >= target {
            lo = hi;
        } else {
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if prior.ess(mid.exp()) >= target { lo = mid } else { hi = mid }
            }
        }
        let anchor = lo.exp();
        let w = prior.weights(anchor);
        let best = (0..w.len()).max_by(|&i, &j| w[i].total_cmp(&w[j])).unwrap_or(0);
        let rung = Rung {
            lambda: anchor,
            mean: prior.mean_empirical_loss(anchor)?,
            last: prior_samples.sample(best).to_vec(),
            acceptance: 1.0,
        };
        Ok(Self { model, traj, anchor_log_z: estimate_log_z(&prior.emp, anchor)?, prior, settings, seed, rungs: vec![rung] })
    }

    /// Largest `lambda` handled by reweighting alone.
    pub fn anchor(&self) -> f64 {
        self.rungs[0].lambda
    }

    /// `(lambda, E L_hat, se, acceptance)` per rung.
    pub fn rungs(&self) -> Vec<(f64, f64, f64, f64)> {
        self.rungs.iter().map(|r| (r.lambda, r.mean.value, r.mean.se, r.acceptance)).collect()
    }

    /// Adds rungs until the top one reaches `lambda`.
    pub fn extend_to(&mut self, lambda: f64) -> Result<()> {
        if !lambda.is_finite() {
            return Err(Error::Domain(format!("lambda must be finite, got {lambda}")));
        }
        while self.rungs.last().map_or(true, |r| r.lambda < lambda) {
            let k = self.rungs.len();
            let top = &self.rungs[k - 1];
            let next = top.lambda * self.settings.ratio;
            let (model, traj) = (self.model, self.traj);
            let chain = mh_sample(
                |t| model.log_gibbs_unnorm(t, next, traj),
                &top.last,
                self.settings.rung,
                rng::child_seed(self.seed, k as u64),
            )?;
            let last = chain.sample(chain.len() - 1).to_vec();
            self.rungs.push(Rung { lambda: next, mean: stats::mean_se_ess(&chain.aux), last, acceptance: chain.acceptance_rate });
        }
        Ok(())
    }

    /// Node values and the KL as a linear function of them.
    fn kl_from(&self, lambda: f64, means: &[f64]) -> f64 {
        let r = &self.rungs;
        let mut integral = 0.0;
        let mut i = 0;
        while r[i + 1].lambda <= lambda {
            integral += 0.5 * (r[i + 1].lambda - r[i].lambda) * (means[i] + means[i + 1]);
            i += 1;
            if i + 1 == r.len() {
                return -lambda * means[i] - self.anchor_log_z.value + integral;
            }
        }
        let t = (lambda - r[i].lambda) / (r[i + 1].lambda - r[i].lambda);
        let e = (1.0 - t) * means[i] + t * means[i + 1];
        integral += 0.5 * (lambda - r[i].lambda) * (means[i] + e);
        -lambda * e - self.anchor_log_z.value + integral
    }

    /// `E_rho L_hat_N` at `lambda`, interpolated between rungs.
    pub fn mean_empirical_loss(&mut self, lambda: f64) -> Result<Estimate> {
        if lambda <= self.anchor() {
            return self.prior.mean_empirical_loss(lambda);
        }
        self.extend_to(lambda)?;
        let i = self.rungs.iter().rposition(|r| r.lambda <= lambda).unwrap_or(0);
        if i + 1 == self.rungs.len() {
            return Ok(self.rungs[i].mean);
        }
        let (a, b) = (&self.rungs[i], &self.rungs[i + 1]);
        let t = (lambda - a.lambda) / (b.lambda - a.lambda);
        Ok(Estimate::new(
            (1.0 - t) * a.mean.value + t * b.mean.value,
            ((1.0 - t) * a.mean.se).hypot(t * b.mean.se),
        ))
    }

    /// KL of the Gibbs posterior at `lambda` from the prior.
    ///
    /// The standard error combines the chain errors with half the gap
    /// between left and right Riemann sums of the integral.
    pub fn kl(&mut self, lambda: f64) -> Result<KlEstimate> {
        if !(lambda >= 0.0) {
            return Err(Error::Domain(format!("lambda must be nonnegative, got {lambda}")));
        }
        if lambda <= self.anchor() {
            return self.prior.kl(lambda);
        }
        self.extend_to(lambda)?;
        let means: Vec<f64> = self.rungs.iter().map(|r| r.mean.value).collect();
        let raw = self.kl_from(lambda, &means);
        let mut var = self.anchor_log_z.se.powi(2);
        let mut bumped = means.clone();
        for (j, rung) in self.rungs.iter().enumerate() {
            bumped[j] += 1.0;
            let coeff = self.kl_from(lambda, &bumped) - raw;
            bumped[j] = means[j];
            var += (coeff * rung.mean.se).powi(2);
        }
        let disc: f64 = self
            .rungs
            .windows(2)
            .take_while(|w| w[0].lambda < lambda)
            .map(|w| 0.5 * (w[1].lambda.min(lambda) - w[0].lambda) * (w[0].mean.value - w[1].mean.value).abs())
            .sum();
        Ok(KlEstimate::from_raw(raw, (var + disc * disc).sqrt()))
    }
}

/// Result of one Gibbs chain.
#[derive(Debug, Clone)]
pub struct GibbsFit {
    pub lambda: f64,
    pub kl: KlEstimate,
    pub emp: Estimate,
    pub gen: Estimate,
    pub chain: Chain,
}

/// The Gibbs posterior sampled by its own Metropolis chain at each
/// `lambda`, with `Z` estimated on a prior chain.
#[derive(Debug, Clone)]
pub struct ChainPosterior<'a> {
    pub model: PriorModel,
    pub gen: &'a Generator,
    pub q_e: DMatrix<f64>,
    pub traj: &'a Trajectory,
    /// `L_hat_N` of the prior samples on `traj`.
    pub prior_losses: Vec<f64>,
    pub settings: MhSettings,
    pub seed: u64,
}

impl ChainPosterior<'_> {
    pub fn fit(&self, lambda: f64) -> Result<GibbsFit> {
        let init = default_init(&self.model.layout);
        let (chain, emp, gen) = sample_gibbs(self.model, self.gen, &self.q_e, self.traj, lambda, &init, self.settings, self.seed)?;
        let log_z = estimate_log_z(&self.prior_losses, lambda)?;
        let kl = kl_gibbs_prior(&chain.aux, lambda, log_z)?;
        Ok(GibbsFit { lambda, kl, emp, gen, chain })
    }
}

/// Runs a Gibbs chain at `lambda` and averages `L_hat_N` and `L` over it.
#[allow(clippy::too_many_arguments)]
pub fn sample_gibbs(
    model: PriorModel,
    gen: &Generator,
    q_e: &DMatrix<f64>,
    traj: &Trajectory,
    lambda: f64,
    init: &[f64],
    settings: MhSettings,
    seed: u64,
) -> Result<(Chain, Estimate, Estimate)> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be nonnegative, got {lambda}")));
    }
    let chain = mh_sample(|t| model.log_gibbs_unnorm(t, lambda, traj), init, settings, seed)?;
    let emp = stats::mean_se_ess(&chain.aux);
    let mode = model.layout.mode;
    let gen_losses: Vec<f64> = chain
        .samples()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|t| {
            let s = model.layout.to_system(t)?;
            loss::generalization_loss(&s, mode, gen, q_e).map(|v| v.value)
        })
        .collect::<Result<_>>()?;
    let gen_mean = stats::mean_se_ess(&gen_losses);
    Ok((chain, emp, gen_mean))
}

impl PosteriorHandle for ChainPosterior<'_> {
    fn kl(&self, lambda: f64) -> Result<KlEstimate> {
        Ok(self.fit(lambda)?.kl)
    }

    fn mean_empirical_loss(&self, lambda: f64) -> Result<Estimate> {
        Ok(self.fit(lambda)?.emp)
    }

    fn mean_generalization_loss(&self, lambda: f64) -> Result<Estimate> {
        Ok(self.fit(lambda)?.gen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(mode: WMode) -> ParamLayout {
        ParamLayout::new(2, 1, 1, mode)
    }

    #[test]
    fn layout_matches_reference_parameterization() {
        let theta: Vec<f64> = (1..=11).map(|i| i as f64 / 100.0).collect();
        let s = layout(WMode::Yu).to_system(&theta).unwrap();
        assert_eq!(s.a, DMatrix::from_row_slice(2, 2, &[0.01, 0.02, 0.03, 0.04]));
        assert_eq!(s.b, DMatrix::from_row_slice(2, 2, &[0.10, 0.05, 0.11, 0.06]));
        assert_eq!(s.c, DMatrix::from_row_slice(1, 2, &[0.07, 0.08]));
        assert_eq!(s.d, DMatrix::from_row_slice(1, 2, &[0.0, 0.09]));
        assert_eq!(layout(WMode::Yu).from_system(&s).unwrap(), theta);
        let s = layout(WMode::UOnly).to_system(&theta[..9]).unwrap();
        assert_eq!(s.b, DMatrix::from_row_slice(2, 1, &[0.05, 0.06]));
        assert_eq!(layout(WMode::UOnly).from_system(&s).unwrap(), theta[..9].to_vec());
    }

    #[test]
    fn prior_examples() {
        let prior = PriorModel::new(layout(WMode::UOnly), ClassConstraint::default());
        let mut theta = vec![0.3, 0.1, 0.0, 0.2, 0.0, 0.0, 1.0, 2.0, 0.5];
        assert_eq!(prior.log_prior_unnorm(&theta), 0.0);
        theta[0] = 1.2;
        assert_eq!(prior.log_prior_unnorm(&theta), f64::NEG_INFINITY);
        theta[0] = 0.3;
        theta[4] = 150.0;
        assert_eq!(prior.log_prior_unnorm(&theta), f64::NEG_INFINITY);
    }

    #[test]
    fn prior_boundary_at_gf_max() {
        let prior = PriorModel::new(layout(WMode::UOnly), ClassConstraint { box_bound: None, ..Default::default() });
        let mut theta = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        // A = 0: M = 1 + 1e-9, gamma = 0.5; Gbar_f = (1 + 2M b c) 2^1.5 M b c
        let mut gf = |x: f64| {
            theta[4] = x;
            prior.class_gain(&theta).unwrap_or(f64::INFINITY)
        };
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gf(mid) < 9.99 { lo = mid } else { hi = mid }
        }
        let at = gf(lo);
        assert!((at - 9.99).abs() < 1e-9);
        let mut t2 = theta.clone();
        t2[4] = lo;
        assert!((prior.log_prior_unnorm(&t2) + at).abs() < 1e-12);
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let mut t = t2.clone();
            t[4] = mid;
            let g = constants::predictor_gains(&prior.layout.to_system(&t).unwrap(), GammaRule::default()).unwrap().g_bar_f;
            if g < 10.01 { lo = mid } else { hi = mid }
        }
        t2[4] = lo;
        assert_eq!(prior.log_prior_unnorm(&t2), f64::NEG_INFINITY);
    }

    #[test]
    fn one_dimensional_box_prior_mean() {
        // target exp(-x^2) on [-1, 2]; quadrature oracle
        let target = |t: &[f64]| {
            let x = t[0];
            let ld = if (-1.0..=2.0).contains(&x) { -x * x } else { f64::NEG_INFINITY };
            Eval { log_density: ld, aux: x }
        };
        let chain = mh_sample(target, &[0.0], MhSettings { steps: 200_000, proposal_scale: 1.0, thinning: 1, adapt_shape: false }, 3).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        let h = 3.0 / 200_000.0;
        for i in 0..200_000 {
            let x = -1.0 + (i as f64 + 0.5) * h;
            let w = (-x * x).exp();
            num += x * w;
            den += w;
        }
        let exact = num / den;
        let est = expectation_over(&chain, |t| t[0]);
        assert!((est.value - exact).abs() < 4.0 * est.se, "{} vs {exact} (se {})", est.value, est.se);
    }

    #[test]
    fn chains_are_deterministic() {
        let prior = PriorModel::new(layout(WMode::UOnly), ClassConstraint::default());
        let t = |x: &[f64]| Eval { log_density: prior.log_prior_unnorm(x), aux: 0.0 };
        let s = MhSettings { steps: 2000, proposal_scale: 0.1, thinning: 2, adapt_shape: true };
        let a = mh_sample(t, &default_init(&prior.layout), s, 7).unwrap();
        let b = mh_sample(t, &default_init(&prior.layout), s, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.samples().all(|x| prior.contains(x)));
    }

    #[test]
    fn out_of_class_init_is_rejected() {
        let prior = PriorModel::new(layout(WMode::UOnly), ClassConstraint::default());
        let t = |x: &[f64]| Eval { log_density: prior.log_prior_unnorm(x), aux: 0.0 };
        let mut init = default_init(&prior.layout);
        init[0] = 2.0;
        assert!(mh_sample(t, &init, MhSettings::default(), 1).is_err());
    }

    #[test]
    fn z_and_kl_edge_cases() {
        let losses = [0.5, 1.0, 2.0];
        assert_eq!(estimate_z(&losses, 0.0).unwrap().value, 1.0);
        assert!(estimate_z(&losses, 3.0).unwrap().value <= 1.0);
        let kl = kl_gibbs_prior(&losses, 0.0, Estimate::exact(0.0)).unwrap();
        assert_eq!(kl.value, 0.0);
    }

    #[test]
    fn three_atom_kl_by_enumeration() {
        // uniform prior on three atoms, Gibbs weights exp(-lambda l)
        let l = [0.2, 1.0, 3.0];
        let lambda = 1.3;
        let w: Vec<f64> = l.iter().map(|x: &f64| (-lambda * x).exp()).collect();
        let z: f64 = w.iter().sum::<f64>() / 3.0;
        let p: Vec<f64> = w.iter().map(|x| x / (3.0 * z)).collect();
        let exact: f64 = p.iter().map(|pi| pi * (pi * 3.0).ln()).sum();
        let post = ReweightedPosterior::new(l.to_vec(), l.to_vec()).unwrap();
        assert!((post.kl(lambda).unwrap().value - exact).abs() < 1e-12);
        // sample-based path: prior draws and Gibbs draws over the atoms
        let mut r = rng::stream(5, 0);
        let prior: Vec<f64> = (0..200_000).map(|_| l[r.random_range(0..3)]).collect();
        let gibbs: Vec<f64> = (0..200_000)
            .map(|_| {
                let u: f64 = r.random();
                if u < p[0] { l[0] } else if u < p[0] + p[1] { l[1] } else { l[2] }
            })
            .collect();
        let kl = kl_gibbs_prior(&gibbs, lambda, estimate_log_z(&prior, lambda).unwrap()).unwrap();
        assert!((kl.value - exact).abs() < 1e-2, "{} vs {exact}", kl.value);
    }

    #[test]
    fn constant_functional_has_zero_se() {
        let t = |x: &[f64]| Eval { log_density: -x[0] * x[0], aux: 0.0 };
        let chain = mh_sample(t, &[0.0], MhSettings { steps: 1000, proposal_scale: 1.0, thinning: 1, adapt_shape: false }, 1).unwrap();
        let e = expectation_over(&chain, |_| 2.5);
        assert_eq!((e.value, e.se), (2.5, 0.0));
    }

    fn small_setup() -> (Generator, Trajectory, PriorEnsemble) {
        let gen = Generator::new(
            DMatrix::from_row_slice(2, 2, &[0.16, -0.3, 0.0, -0.05]),
            DMatrix::from_row_slice(2, 2, &[0.33, -0.75, 0.0, -0.09]),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            1,
            1,
        )
        .unwrap();
        let q = DMatrix::from_row_slice(2, 2, &[0.054, 0.018, 0.018, 0.248]);
        let noise = crate::lti::NoiseSpec::truncated(q, 1.0).sampler().unwrap();
        let gc = GeneratorConstants::new(&gen, &noise).unwrap();
        let model = PriorModel::new(layout(WMode::UOnly), ClassConstraint::default());
        let traj = crate::lti::simulate_with(&gen, &noise, 200, 11).unwrap();
        let ens = PriorEnsemble::sample(model, &gen, &gc, 1500, MhSettings { thinning: 10, ..MhSettings::default() }, 2).unwrap();
        (gen, traj, ens)
    }

    #[test]
    fn ladder_agrees_with_reweighting_near_anchor() {
        let (_, traj, ens) = small_setup();
        let losses = ens.empirical_losses(&traj).unwrap();
        let settings = LadderSettings { min_ess_fraction: 0.8, ..LadderSettings::default() };
        let mut ladder = GibbsLadder::new(ens.model, &traj, losses.clone(), &ens.chain, settings, 3).unwrap();
        let reweighted = ReweightedPosterior::new(losses.clone(), losses).unwrap();
        let lam = 2.0 * ladder.anchor();
        assert!(reweighted.ess(lam) > 300.0);
        let a = ladder.kl(lam).unwrap();
        let b = reweighted.kl(lam).unwrap();
        assert!((a.raw - b.raw).abs() <= 4.0 * a.se.hypot(b.se), "{a:?} vs {b:?}");
        let at_anchor = ladder.kl(ladder.anchor()).unwrap();
        assert_eq!(at_anchor, reweighted.kl(ladder.anchor()).unwrap());
    }

    #[test]
    fn ladder_kl_grows_with_lambda() {
        let (_, traj, ens) = small_setup();
        let losses = ens.empirical_losses(&traj).unwrap();
        let mut ladder = GibbsLadder::new(ens.model, &traj, losses, &ens.chain, LadderSettings::default(), 3).unwrap();
        let mut prev = 0.0;
        for k in -4..12 {
            let kl = ladder.kl(2f64.powi(k)).unwrap();
            assert!(kl.raw >= prev - 1e-12, "KL fell at 2^{k}");
            prev = kl.raw;
        }
        let rungs = ladder.rungs();
        assert!(rungs.windows(2).all(|w| (w[1].0 / w[0].0 - 2.0).abs() < 1e-12));
        let again = GibbsLadder::new(ens.model, &traj, ens.empirical_losses(&traj).unwrap(), &ens.chain, LadderSettings::default(), 3)
            .unwrap()
            .kl(2f64.powi(11))
            .unwrap();
        assert_eq!(again, ladder.kl(2f64.powi(11)).unwrap());
    }
}
