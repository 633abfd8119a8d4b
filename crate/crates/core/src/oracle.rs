//! Monte Carlo checks of the moment, variance-proxy and exponential-moment
//! inequalities behind the bounds, plus end-to-end coverage of the bounds.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{BoundContext, LambdaPolicy, Theorem};
use crate::constants::build_error_system;
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::loss::{self, WMode};
use crate::lti::{self, Generator, NoiseKind, NoiseSampler, StateSpace};
use crate::posterior::{default_init, sample_gibbs, GibbsLadder, LadderSettings, MhSettings, PriorEnsemble};
use crate::rng;
use crate::stats::{self, Estimate};

/// Outcome of one inequality check. Passes when
/// `observed <= bound + 3 se`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheckResult {
    pub lemma_id: String,
    pub r: Option<usize>,
    pub n: Option<usize>,
    pub lambda: Option<f64>,
    pub trials: usize,
    pub observed: f64,
    pub bound: f64,
    pub margin: f64,
    pub se: f64,
    pub pass: bool,
}

impl LemmaCheckResult {
    pub const CSV_HEADER: &'static str = "lemma_id,r,N,lambda,observed,bound,margin,se,pass";

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        lemma_id: &str,
        r: Option<usize>,
        n: Option<usize>,
        lambda: Option<f64>,
        trials: usize,
        observed: f64,
        bound: f64,
        se: f64,
    ) -> Self {
        Self {
            lemma_id: lemma_id.to_string(),
            r,
            n,
            lambda,
            trials,
            observed,
            bound,
            margin: bound - observed,
            se,
            pass: observed <= bound + 3.0 * se,
        }
    }

    pub fn write_csv_row<W: Write>(&self, mut w: W) -> Result<()> {
        let opt = |v: Option<String>| v.unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{:e},{:e},{:e},{:e},{}",
            self.lemma_id,
            opt(self.r.map(|r| r.to_string())),
            opt(self.n.map(|n| n.to_string())),
            opt(self.lambda.map(|l| format!("{l:e}"))),
            self.observed,
            self.bound,
            self.margin,
            self.se,
            self.pass
        )?;
        Ok(())
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `E ||e||^{2r} <= mu^r 2^r (m + r - 1)!` for `r = 1..=r_max`.
///
/// `mu` is taken from the nominal (pre-truncation) covariance.
pub fn check_even_moments(noise: &NoiseSampler, r_max: usize, trials: usize, seed: u64) -> Result<Vec<LemmaCheckResult>> {
    if r_max == 0 || r_max > 5 {
        return Err(Error::Domain(format!("r_max must lie in 1..=5, got {r_max}")));
    }
    let e = noise.draw_series(&mut rng::stream(seed, 0), trials)?;
    let sq: Vec<f64> = e.rows().map(|row| row.iter().map(|v| v * v).sum()).collect();
    let mu = noise.spec().mu_max();
    let m = noise.dim();
    Ok((1..=r_max)
        .map(|r| {
            let vals: Vec<f64> = sq.iter().map(|s| s.powi(r as i32)).collect();
            let est = stats::mean_se(&vals);
            let bound = mu.powi(r as i32) * 2f64.powi(r as i32) * factorial(m + r - 1);
            LemmaCheckResult::new("noise_even_moment", Some(r), None, None, trials, est.value, bound, est.se)
        })
        .collect())
}

/// `sigma(r)`: Gaussian `mu^r 3^r (m + r - 1)!`, bounded `(2 c_e^2 m)^r`.
pub fn sigma_bound(noise: &NoiseSampler, r: usize) -> f64 {
    let m = noise.dim();
    match noise.spec().kind {
        NoiseKind::Gaussian => noise.mu_max().powi(r as i32) * 3f64.powi(r as i32) * factorial(m + r - 1),
        NoiseKind::TruncatedGaussian => (2.0 * noise.spec().c_e.powi(2) * m as f64).powi(r as i32),
    }
}

/// `E ||e(t,k,j)||^r <= sigma(r)` over the diagonal (`Q - e e^T`) and
/// off-diagonal (`-e_k e_j^T`, independent draws) cases.
pub fn check_sigma_bound(noise: &NoiseSampler, r: usize, trials: usize, seed: u64) -> Result<LemmaCheckResult> {
    if !(2..=4).contains(&r) {
        return Err(Error::Domain(format!("r must lie in 2..=4, got {r}")));
    }
    let q = noise.effective_covariance();
    let m = noise.dim();
    let mut g = rng::stream(seed, 0);
    let a = noise.draw_series(&mut g, trials)?;
    let b = noise.draw_series(&mut g, trials)?;
    let mut diag = Vec::with_capacity(trials);
    let mut off = Vec::with_capacity(trials);
    for t in 0..trials {
        let ea = DMatrix::from_column_slice(m, 1, a.row(t));
        let eb = DMatrix::from_column_slice(m, 1, b.row(t));
        diag.push(norm2(&(q - &ea * ea.transpose())).powi(r as i32));
        off.push((ea.norm() * eb.norm()).powi(r as i32));
    }
    let d = stats::mean_se(&diag);
    let o = stats::mean_se(&off);
    let worst = if d.value >= o.value { d } else { o };
    Ok(LemmaCheckResult::new("noise_sigma", Some(r), None, None, trials, worst.value, sigma_bound(noise, r), worst.se))
}

/// Per-trial `(L_hat_N, V_N)` on independent trajectories.
pub fn loss_pairs(
    pred: &StateSpace,
    mode: WMode,
    gen: &Generator,
    noise: &NoiseSampler,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let traj = lti::simulate_with(gen, noise, n, rng::child_seed(seed, i))?;
            let emp = loss::empirical_loss(pred, mode, &traj)?.value;
            let v = loss::infinite_horizon_loss(pred, mode, gen, &traj)?.value;
            Ok((emp, v))
        })
        .collect()
}

/// `E |V_N - L_hat_N|^r <= (m + r - 1)! / sqrt(N) (4 Gbar_gen Gbar_f)^r`.
#[allow(clippy::too_many_arguments)]
pub fn check_vn_moment_decay(
    pred: &StateSpace,
    mode: WMode,
    gen: &Generator,
    noise: &NoiseSampler,
    g_bar_gen: f64,
    g_bar_f: f64,
    n_grid: &[usize],
    r: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<LemmaCheckResult>> {
    if !(1..=2).contains(&r) {
        return Err(Error::Domain(format!("r must be 1 or 2, got {r}")));
    }
    let m = gen.m();
    n_grid
        .iter()
        .map(|&n| {
            let pairs = loss_pairs(pred, mode, gen, noise, n, trials, rng::child_seed(seed, n as u64))?;
            let vals: Vec<f64> = pairs.iter().map(|(e, v)| (v - e).abs().powi(r as i32)).collect();
            let est = stats::mean_se(&vals);
            let bound = factorial(m + r - 1) / (n as f64).sqrt() * (4.0 * g_bar_gen * g_bar_f).powi(r as i32);
            Ok(LemmaCheckResult::new("vn_gap_moment", Some(r), Some(n), None, trials, est.value, bound, est.se))
        })
        .collect()
}

/// `E (L - V_N)^r <= n_y^r / N sigma(r) 4 (r - 1) G_e^{2r}` for even `r`.
#[allow(clippy::too_many_arguments)]
pub fn check_l_minus_v_moments(
    pred: &StateSpace,
    mode: WMode,
    gen: &Generator,
    noise: &NoiseSampler,
    g_e: f64,
    r: usize,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<LemmaCheckResult> {
    if r != 2 && r != 4 {
        return Err(Error::Domain(format!("r must be 2 or 4, got {r}")));
    }
    let l = loss::generalization_loss(pred, mode, gen, noise.effective_covariance())?.value;
    let pairs = loss_pairs(pred, mode, gen, noise, n, trials, seed)?;
    let vals: Vec<f64> = pairs.iter().map(|(_, v)| (l - v).powi(r as i32)).collect();
    let est = stats::mean_se(&vals);
    let ny = gen.ny as f64;
    let bound = ny.powi(r as i32) / n as f64 * sigma_bound(noise, r) * 4.0 * (r as f64 - 1.0) * g_e.powi(2 * r as i32);
    Ok(LemmaCheckResult::new("gen_gap_moment", Some(r), Some(n), None, trials, est.value, bound, est.se))
}

/// Largest `lambda` for which the exponential-moment bound is finite.
pub fn mgf_threshold(gen: &Generator, mu_max: f64, g_e: f64) -> f64 {
    1.0 / (3.0 * (gen.m() as f64 + 1.0) * gen.ny as f64 * mu_max * g_e * g_e)
}

/// `1 + (2/N) (m+1)! (3 lambda n_y mu G_e^2)^2 / (1 - 3 (m+1) lambda n_y mu G_e^2)`.
pub fn mgf_bound(gen: &Generator, mu_max: f64, g_e: f64, lambda: f64, n: usize) -> Result<f64> {
    let m = gen.m();
    let a = 3.0 * lambda * gen.ny as f64 * mu_max * g_e * g_e;
    let den = 1.0 - (m as f64 + 1.0) * a;
    if !(den > 0.0) {
        return Err(Error::InadmissibleLambda(format!("lambda = {lambda:e} at or above the threshold")));
    }
    Ok(1.0 + 2.0 / n as f64 * factorial(m + 1) * a * a / den)
}

/// `E exp(lambda (L - V_N))` against [`mgf_bound`]. Returns the plain and
/// the 99.9%-trimmed estimates; both are compared on the log scale.
#[allow(clippy::too_many_arguments)]
pub fn check_mgf_bound(
    pred: &StateSpace,
    mode: WMode,
    gen: &Generator,
    noise: &NoiseSampler,
    g_e: f64,
    lambda: f64,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<LemmaCheckResult>> {
    let mu = noise.mu_max();
    let bound = mgf_bound(gen, mu, g_e, lambda, n)?;
    let l = loss::generalization_loss(pred, mode, gen, noise.effective_covariance())?.value;
    let pairs = loss_pairs(pred, mode, gen, noise, n, trials, seed)?;
    let mut xs: Vec<f64> = pairs.iter().map(|(_, v)| lambda * (l - v)).collect();
    let full = stats::log_mean_exp(&xs);
    xs.sort_by(|a, b| a.total_cmp(b));
    let keep = ((xs.len() as f64) * 0.999).ceil() as usize;
    let trimmed = stats::log_mean_exp(&xs[..keep.max(1)]);
    let row = |id: &str, e: Estimate| {
        let mut res = LemmaCheckResult::new(id, None, Some(n), Some(lambda), trials, e.value.exp(), bound, e.value.exp() * e.se);
        res.pass = e.value <= bound.ln() + 3.0 * e.se;
        res
    };
    Ok(vec![row("gen_gap_mgf", full), row("gen_gap_mgf_trimmed", trimmed)])
}

/// Deterministic check of a claimed l1 gain `g_e` of the error system.
///
/// With one output, feeding each innovation lag along its impulse-response
/// row attains the summed gain over the horizon exactly; a valid `g_e` must
/// dominate it.
pub fn check_ell1_gain(pred: &StateSpace, mode: WMode, gen: &Generator, g_e: f64) -> Result<LemmaCheckResult> {
    let err = build_error_system(pred, mode, gen)?;
    err.ensure_stable()?;
    if err.n_out() != 1 {
        return Err(Error::Dimension("the l1 gain check needs a single output".into()));
    }
    let mut attained = err.d.norm();
    let mut ca = err.c.clone();
    let mut decayed = 0;
    for _ in 0..1_000_000 {
        let h = (&ca * &err.b).norm();
        attained += h;
        if h < 1e-16 * attained {
            decayed += 1;
            if decayed > 50 {
                break;
            }
        } else {
            decayed = 0;
        }
        ca = &ca * &err.a;
    }
    let mut res = LemmaCheckResult::new("ell1_gain", None, None, None, 1, attained, g_e, 0.0);
    res.pass = attained <= g_e * (1.0 + 1e-12);
    Ok(res)
}

/// Fraction of data draws on which a bound held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub theorem: Theorem,
    pub n: usize,
    pub delta: f64,
    pub lambda: f64,
    pub replications: usize,
    pub fraction: f64,
    pub se: f64,
    pub required: f64,
    pub pass: bool,
    pub mean_r_n: f64,
    /// Smallest `E L_hat + r_N - E L` over draws.
    pub min_slack: f64,
}

/// Inputs shared by all coverage draws.
#[derive(Debug, Clone)]
pub struct CoverageSetup<'a> {
    pub gen: &'a Generator,
    pub noise: &'a NoiseSampler,
    pub ensemble: &'a PriorEnsemble,
    pub ctx: &'a BoundContext<'a>,
    /// Chain whose averages enter the bound.
    pub settings: MhSettings,
    /// Ladder for the KL term.
    pub ladder: LadderSettings,
}

/// Re-draws the data `replications` times and checks
/// `E_rho L <= E_rho L_hat + r_N` for the Gibbs posterior of each draw.
pub fn check_coverage(
    setup: &CoverageSetup<'_>,
    theorem: Theorem,
    n: usize,
    delta: f64,
    policy: LambdaPolicy,
    replications: usize,
    seed: u64,
) -> Result<CoverageResult> {
    if replications < 100 {
        return Err(Error::Domain(format!("coverage needs at least 100 replications, got {replications}")));
    }
    let lambda = policy.resolve(setup.ctx, n)?;
    let q = setup.noise.effective_covariance();
    let model = setup.ensemble.model;
    let outcomes: Vec<(bool, f64, f64)> = (0..replications as u64)
        .into_par_iter()
        .map(|i| {
            let s = rng::child_seed(seed, i);
            let traj = lti::simulate_with(setup.gen, setup.noise, n, s)?;
            let losses = setup.ensemble.empirical_losses(&traj)?;
            let mut ladder = GibbsLadder::new(model, &traj, losses, &setup.ensemble.chain, setup.ladder, rng::child_seed(s, 1))?;
            let kl = ladder.kl(lambda)?;
            let init = default_init(&model.layout);
            let (_, emp, gen) = sample_gibbs(model, setup.gen, q, &traj, lambda, &init, setup.settings, rng::child_seed(s, 2))?;
            let report = setup.ctx.report(theorem, lambda, n, delta, kl.estimate())?;
            let slack = emp.value + report.r_n - gen.value;
            Ok((slack >= 0.0, report.r_n, slack))
        })
        .collect::<Result<_>>()?;
    let held = outcomes.iter().filter(|o| o.0).count();
    let fraction = held as f64 / replications as f64;
    let se = stats::binomial_se(fraction, replications);
    let required = 1.0 - 2.0 * delta - 3.0 * se;
    Ok(CoverageResult {
        theorem,
        n,
        delta,
        lambda,
        replications,
        fraction,
        se,
        required,
        pass: fraction >= required,
        mean_r_n: outcomes.iter().map(|o| o.1).sum::<f64>() / replications as f64,
        min_slack: outcomes.iter().map(|o| o.2).fold(f64::INFINITY, f64::min),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{compute_constants, l1_system_norm, L1_TOL};
    use crate::lti::NoiseSpec;

    fn reference() -> Generator {
        Generator::new(
            DMatrix::from_row_slice(2, 2, &[0.16, -0.3, 0.0, -0.05]),
            DMatrix::from_row_slice(2, 2, &[0.33, -0.75, 0.0, -0.09]),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            1,
            1,
        )
        .unwrap()
    }

    fn q() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.054, 0.018, 0.018, 0.248])
    }

    fn pred() -> StateSpace {
        StateSpace::new(
            DMatrix::from_row_slice(2, 2, &[0.3, 0.2, -0.1, 0.4]),
            DMatrix::from_row_slice(2, 1, &[0.5, -0.2]),
            DMatrix::from_row_slice(1, 2, &[0.7, 0.1]),
            DMatrix::from_element(1, 1, 0.2),
        )
        .unwrap()
    }

    #[test]
    fn identity_covariance_second_moment() {
        let noise = NoiseSpec::gaussian(DMatrix::identity(2, 2)).sampler().unwrap();
        let res = check_even_moments(&noise, 1, 100_000, 1).unwrap();
        assert_eq!(res[0].bound, 4.0);
        assert!((res[0].observed - 2.0).abs() < 0.05);
        assert!(res[0].pass);
    }

    #[test]
    fn bounded_sigma_is_pathwise() {
        let noise = NoiseSpec::truncated(q(), 1.0).sampler().unwrap();
        let res = check_sigma_bound(&noise, 2, 20_000, 2).unwrap();
        assert_eq!(res.bound, 16.0);
        assert!(res.observed <= 16.0);
    }

    #[test]
    fn mgf_bound_shape() {
        let gen = reference();
        let th = mgf_threshold(&gen, 0.2, 2.0);
        assert!(mgf_bound(&gen, 0.2, 2.0, th, 100).is_err());
        let mut prev = 1.0;
        for k in 1..10 {
            let b = mgf_bound(&gen, 0.2, 2.0, th * k as f64 / 10.0, 100).unwrap();
            assert!(b > prev);
            prev = b;
        }
        assert_eq!(mgf_bound(&gen, 0.2, 2.0, 0.0, 100).unwrap(), 1.0);
    }

    #[test]
    fn ell1_gain_detects_understated_gain() {
        let gen = reference();
        let noise = NoiseSpec::gaussian(q()).sampler().unwrap();
        let k = compute_constants(&pred(), WMode::UOnly, &gen, &noise).unwrap();
        assert!(check_ell1_gain(&pred(), WMode::UOnly, &gen, k.g_e).unwrap().pass);
        assert!(!check_ell1_gain(&pred(), WMode::UOnly, &gen, 0.5 * k.g_e).unwrap().pass);
        let err = build_error_system(&pred(), WMode::UOnly, &gen).unwrap();
        let attained = check_ell1_gain(&pred(), WMode::UOnly, &gen, k.g_e).unwrap().observed;
        assert!((l1_system_norm(&err, L1_TOL).unwrap() - attained).abs() < 1e-9);
    }

    #[test]
    fn zero_input_predictor_has_no_vn_gap() {
        let gen = reference();
        let noise = NoiseSpec::gaussian(q()).sampler().unwrap();
        let mut p = pred();
        p.b.fill(0.0);
        let res = check_vn_moment_decay(&p, WMode::UOnly, &gen, &noise, 1.0, 1.0, &[10], 1, 50, 3).unwrap();
        assert!(res[0].observed < 1e-12);
        assert!(res[0].pass);
    }

    #[test]
    fn csv_row_format() {
        let r = LemmaCheckResult::new("noise_sigma", Some(2), None, None, 10, 1.0, 2.0, 0.1);
        let mut buf = Vec::new();
        r.write_csv_row(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "noise_sigma,2,,,1e0,2e0,1e0,1e-1,true\n");
    }
}
