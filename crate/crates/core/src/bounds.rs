//! PAC-Bayesian error terms `r_N`, admissible and scheduled `lambda`, and
//! the numerical `lambda*` search.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::constants::{BoundConstants, GeneratorConstants};
use crate::error::{Error, Result};
use crate::stats::{self, Estimate};

/// Which bound is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    /// Gaussian innovations, `lambda` bounded above.
    Thm1Unbounded,
    /// Bounded innovations, exponential moment terms.
    Thm2Bounded,
    /// Bounded innovations, sharpened form.
    Thm3BoundedAlt,
}

impl Theorem {
    pub const ALL: [Theorem; 3] = [Theorem::Thm1Unbounded, Theorem::Thm2Bounded, Theorem::Thm3BoundedAlt];

    pub fn id(self) -> &'static str {
        match self {
            Theorem::Thm1Unbounded => "thm1_unbounded",
            Theorem::Thm2Bounded => "thm2_bounded",
            Theorem::Thm3BoundedAlt => "thm3_bounded_alt",
        }
    }

    pub fn needs_bounded_noise(self) -> bool {
        self != Theorem::Thm1Unbounded
    }
}

impl fmt::Display for Theorem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Class-supremum estimates used by a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupInfo {
    pub sup_g_e: f64,
    pub sup_g_bar_f: f64,
    pub safety_factor: f64,
    pub n_samples: usize,
}

impl SupInfo {
    /// Maximum over `samples`, inflated by `safety_factor`.
    pub fn from_samples(samples: &[BoundConstants], safety_factor: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("no prior samples for the class supremum".into()));
        }
        if !(safety_factor >= 1.0) {
            return Err(Error::Config(format!("sup safety factor must be >= 1, got {safety_factor}")));
        }
        let max_ge = samples.iter().map(|c| c.g_e).fold(0.0, f64::max);
        let max_gf = samples.iter().map(|c| c.g_bar_f).fold(0.0, f64::max);
        Ok(Self {
            sup_g_e: safety_factor * max_ge,
            sup_g_bar_f: safety_factor * max_gf,
            safety_factor,
            n_samples: samples.len(),
        })
    }
}

/// Largest admissible `lambda` for the Gaussian bound (exclusive).
///
/// `strict` applies the factor 1/2 of the appendix condition.
pub fn lambda_max_unbounded(sup_gf: f64, sup_ge: f64, gc: &GeneratorConstants, strict: bool) -> Result<f64> {
    if !(sup_gf >= 0.0 && sup_ge > 0.0) {
        return Err(Error::Domain(format!("class suprema must be positive, got {sup_gf}, {sup_ge}")));
    }
    let m = gc.m() as f64;
    let first = 8.0 * m * gc.g_bar_gen * sup_gf;
    let second = 6.0 * (m + 1.0) * gc.ny as f64 * gc.mu_max * sup_ge * sup_ge;
    let lam = 1.0 / first.max(second);
    Ok(if strict { 0.5 * lam } else { lam })
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Combines two sample-mean logarithms `0.5 (ln mean e^a + ln mean e^b)`
/// with a joint delta-method standard error.
fn half_sum_log_means(a: &[f64], b: &[f64]) -> Estimate {
    let n = a.len() as f64;
    let la = stats::log_sum_exp(a);
    let lb = stats::log_sum_exp(b);
    let value = 0.5 * (la + lb) - n.ln();
    if a.len() < 2 || !la.is_finite() || !lb.is_finite() {
        return Estimate::new(value, 0.0);
    }
    let z: Vec<f64> = a.iter().zip(b).map(|(x, y)| n * ((x - la).exp() + (y - lb).exp())).collect();
    Estimate::new(value, 0.5 * stats::mean_se_ess(&z).se)
}

/// `Psi_hat` of the Gaussian bound, averaged over prior samples.
pub fn psi_unbounded(lambda: f64, n: usize, samples: &[BoundConstants], gc: &GeneratorConstants) -> Result<Estimate> {
    check_common(lambda, n, samples)?;
    let m = gc.m() as f64;
    let ny = gc.ny as f64;
    let nf = n as f64;
    let f_m1 = factorial(gc.m() + 1);
    let f_m = factorial(gc.m());
    let mut t1 = Vec::with_capacity(samples.len());
    let mut t2 = Vec::with_capacity(samples.len());
    for (i, c) in samples.iter().enumerate() {
        let a = 6.0 * lambda * ny * c.mu_max * c.g_e * c.g_e;
        let den1 = 1.0 - (m + 1.0) * a;
        let b = 8.0 * lambda * c.g_bar_gen * c.g_bar_f;
        let den2 = 1.0 - m * b;
        if !(den1 > 0.0 && den2 > 0.0) {
            return Err(Error::InadmissibleLambda(format!(
                "lambda = {lambda:e} makes a denominator nonpositive for prior sample {i} (G_e = {}, Gbar_f = {})",
                c.g_e, c.g_bar_f
            )));
        }
        let c1 = 2.0 * f_m1 * a * a / den1;
        let c2 = f_m * b / den2;
        t1.push((c1 / nf).ln_1p());
        t2.push((c2 / nf.sqrt()).ln_1p());
    }
    Ok(half_sum_log_means(&t1, &t2))
}

fn require(v: Option<f64>, what: &str) -> Result<f64> {
    v.ok_or_else(|| Error::Config(format!("{what} is only defined for bounded noise")))
}

/// `Psi_hat_{c_e}` of the first bounded-noise bound.
pub fn psi_bounded(lambda: f64, n: usize, samples: &[BoundConstants]) -> Result<Estimate> {
    check_common(lambda, n, samples)?;
    let ln_n = (n as f64).ln();
    let mut t1 = Vec::with_capacity(samples.len());
    let mut t2 = Vec::with_capacity(samples.len());
    for c in samples {
        let g1 = require(c.g_gen1, "G_gen1")?;
        let g2 = require(c.g_gen2, "G_gen2")?;
        let e1 = lambda * g1 * c.g_e * c.g_e;
        let e2 = lambda * g2 * c.g_bar_f;
        if !e1.is_finite() || !e2.is_finite() {
            return Err(Error::Numeric(format!("exponent overflow: {e1:e}, {e2:e}")));
        }
        t1.push(stats::softplus(e1 - ln_n));
        t2.push(stats::softplus(e2 - 0.5 * ln_n));
    }
    Ok(half_sum_log_means(&t1, &t2))
}

/// `ln(1 + c expm1(x))` for `c >= 0`, `x >= 0`, without overflow.
fn log1p_scaled_expm1(c: f64, x: f64) -> f64 {
    if c == 0.0 || x == 0.0 {
        return 0.0;
    }
    if x < 30.0 {
        (c * x.exp_m1()).ln_1p()
    } else {
        stats::softplus(c.ln() + x + (-(-x).exp()).ln_1p())
    }
}

/// Constants `(C_11, C_12, C_2)` of the sharpened bounded-noise bound.
pub fn thm3_constants(c: &BoundConstants) -> Result<(f64, f64, f64)> {
    let big = require(c.c_big, "C")?;
    let c11 = 2.0 * c.l1_gen * big * c.g_bar_f2;
    let c12 = c.g_bar_f1 * c.l1_gen * big;
    let s = c.g_e + c.g_e1;
    let c2 = 8.0 * s * s * big * big * (4.0 * c.g_e * big + 1.0).powi(2);
    Ok((c11, c12, c2))
}

/// `Psi_tilde` of the sharpened bounded-noise bound.
pub fn psi_bounded_alt(lambda: f64, n: usize, samples: &[BoundConstants]) -> Result<Estimate> {
    check_common(lambda, n, samples)?;
    let nf = n as f64;
    let mut t1 = Vec::with_capacity(samples.len());
    let mut t2 = Vec::with_capacity(samples.len());
    for c in samples {
        let (c11, c12, c2) = thm3_constants(c)?;
        let x = lambda * c11 / nf;
        let y = lambda * lambda * c2 / nf;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Numeric(format!("exponent overflow: {x:e}, {y:e}")));
        }
        t1.push(log1p_scaled_expm1(c12, x));
        t2.push(y);
    }
    Ok(half_sum_log_means(&t1, &t2))
}

fn check_common(lambda: f64, n: usize, samples: &[BoundConstants]) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be positive and finite, got {lambda}")));
    }
    if n == 0 {
        return Err(Error::Domain("N must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData("no prior samples".into()));
    }
    Ok(())
}

/// `lambda(N) = ln sqrt(N) / sup_term`.
pub fn lambda_schedule(n: usize, sup_term: f64) -> Result<f64> {
    lambda_schedule_f(n as f64, sup_term)
}

/// [`lambda_schedule`] for a real-valued sample size.
pub fn lambda_schedule_f(n: f64, sup_term: f64) -> Result<f64> {
    if !(n >= 2.0) {
        return Err(Error::Domain(format!("the lambda schedule needs N >= 2, got {n}")));
    }
    if !(sup_term > 0.0) {
        return Err(Error::Domain(format!("sup term must be positive, got {sup_term}")));
    }
    Ok(0.5 * n.ln() / sup_term)
}

/// How `lambda` is chosen for a bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    Fixed(f64),
    /// `ln sqrt(N) / sup max{G_gen1 G_e^2, G_gen2 Gbar_f}`.
    Schedule,
    /// `sqrt(N)`.
    SqrtN,
    /// Half the largest admissible value of the Gaussian bound.
    HalfMax,
    /// Minimizer of `r_N`; depends on the data through the KL term.
    Star,
}

impl LambdaPolicy {
    pub fn id(self) -> String {
        match self {
            LambdaPolicy::Fixed(l) => format!("fixed_{l:e}"),
            LambdaPolicy::Schedule => "schedule".into(),
            LambdaPolicy::SqrtN => "sqrt_n".into(),
            LambdaPolicy::HalfMax => "half_max".into(),
            LambdaPolicy::Star => "star".into(),
        }
    }

    /// The data-independent value of `lambda`; an error for [`LambdaPolicy::Star`].
    pub fn resolve(self, ctx: &BoundContext<'_>, n: usize) -> Result<f64> {
        match self {
            LambdaPolicy::Fixed(l) => Ok(l),
            LambdaPolicy::Schedule => ctx.schedule(n),
            LambdaPolicy::SqrtN => Ok((n as f64).sqrt()),
            LambdaPolicy::HalfMax => Ok(0.5 * ctx.lambda_max()?),
            LambdaPolicy::Star => Err(Error::Config("lambda* has no data-independent value".into())),
        }
    }
}

/// One evaluated bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem: Theorem,
    pub n: usize,
    pub lambda: f64,
    pub delta: f64,
    pub kl: Estimate,
    pub psi: Estimate,
    pub r_n: f64,
    pub vacuous: bool,
    pub sup_info: SupInfo,
    pub note: Option<String>,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str = "theorem,N,lambda,delta,kl,kl_se,psi,psi_se,r_N,vacuous";

    pub fn write_csv_row<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{},{},{:e},{},{:e},{:e},{:e},{:e},{:e},{}",
            self.theorem,
            self.n,
            self.lambda,
            self.delta,
            self.kl.value,
            self.kl.se,
            self.psi.value,
            self.psi.se,
            self.r_n,
            self.vacuous
        )?;
        Ok(())
    }
}

/// Everything needed to evaluate `r_N` apart from the posterior.
#[derive(Debug, Clone)]
pub struct BoundContext<'a> {
    pub gc: GeneratorConstants,
    pub samples: &'a [BoundConstants],
    pub sup: SupInfo,
    /// Use the stricter appendix condition on `lambda` for the Gaussian bound.
    pub strict_lambda: bool,
}

impl<'a> BoundContext<'a> {
    pub fn new(gc: GeneratorConstants, samples: &'a [BoundConstants], safety_factor: f64) -> Result<Self> {
        let sup = SupInfo::from_samples(samples, safety_factor)?;
        Ok(Self { gc, samples, sup, strict_lambda: false })
    }

    pub fn lambda_max(&self) -> Result<f64> {
        lambda_max_unbounded(self.sup.sup_g_bar_f, self.sup.sup_g_e, &self.gc, self.strict_lambda)
    }

    /// `sup max{G_gen1 G_e^2, G_gen2 Gbar_f}` from the class suprema.
    pub fn schedule_sup_term(&self) -> Result<f64> {
        let g1 = require(self.gc.g_gen1, "G_gen1")?;
        let g2 = require(self.gc.g_gen2, "G_gen2")?;
        Ok((g1 * self.sup.sup_g_e * self.sup.sup_g_e).max(g2 * self.sup.sup_g_bar_f))
    }

    pub fn schedule(&self, n: usize) -> Result<f64> {
        lambda_schedule(n, self.schedule_sup_term()?)
    }

    /// `2 (C sup G_e)^2`, the a-priori range of the loss gap.
    pub fn vacuity_threshold(&self) -> Option<f64> {
        self.gc.c_big.map(|c| 2.0 * (c * self.sup.sup_g_e).powi(2))
    }

    pub fn psi(&self, theorem: Theorem, lambda: f64, n: usize) -> Result<Estimate> {
        match theorem {
            Theorem::Thm1Unbounded => psi_unbounded(lambda, n, self.samples, &self.gc),
            Theorem::Thm2Bounded => psi_bounded(lambda, n, self.samples),
            Theorem::Thm3BoundedAlt => psi_bounded_alt(lambda, n, self.samples),
        }
    }

    fn check_regime(&self, theorem: Theorem) -> Result<()> {
        if theorem.needs_bounded_noise() != self.gc.c_e.is_some() {
            return Err(Error::Config(format!("{theorem} does not apply to this noise model")));
        }
        Ok(())
    }

    /// Evaluates `r_N` for a given KL estimate.
    pub fn report(&self, theorem: Theorem, lambda: f64, n: usize, delta: f64, kl: Estimate) -> Result<BoundReport> {
        self.check_regime(theorem)?;
        if theorem == Theorem::Thm1Unbounded {
            let lmax = self.lambda_max()?;
            if !(lambda < lmax) {
                return Err(Error::InadmissibleLambda(format!("lambda = {lambda:e} is not below {lmax:e}")));
            }
        }
        let psi = self.psi(theorem, lambda, n)?;
        let mut report = assemble(theorem, lambda, n, delta, kl, psi, self.sup)?;
        match self.vacuity_threshold() {
            Some(t) if theorem.needs_bounded_noise() => report.vacuous = report.r_n >= t,
            _ => report.note = Some("vacuity is undefined for unbounded noise".into()),
        }
        if theorem == Theorem::Thm1Unbounded {
            let floor = (1.0 / delta).ln() / self.lambda_max()?;
            if report.r_n < floor * (1.0 - 1e-12) {
                return Err(Error::Numeric(format!("r_N = {} below the floor {floor}", report.r_n)));
            }
        }
        Ok(report)
    }
}

/// `r_N = (kl + ln(1/delta) + psi) / lambda`.
pub fn assemble(
    theorem: Theorem,
    lambda: f64,
    n: usize,
    delta: f64,
    kl: Estimate,
    psi: Estimate,
    sup_info: SupInfo,
) -> Result<BoundReport> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1], got {delta}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    let r_n = (kl.value + (1.0 / delta).ln() + psi.value) / lambda;
    Ok(BoundReport { theorem, n, lambda, delta, kl, psi, r_n, vacuous: false, sup_info, note: None })
}

/// Minimizes `f` over `[lo, hi]` by golden-section search on `ln x`.
///
/// Returns the best point seen and its value. `rel_tol` is relative on `x`.
pub fn golden_section_min(mut f: impl FnMut(f64) -> Result<f64>, lo: f64, hi: f64, rel_tol: f64) -> Result<(f64, f64)> {
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Domain(format!("empty search interval [{lo}, {hi}]")));
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c.exp())?;
    let mut fd = f(d.exp())?;
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    while b - a > rel_tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c.exp())?;
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d.exp())?;
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    for edge in [lo.ln(), hi.ln()] {
        let v = f(edge.exp())?;
        if v < best.1 {
            best = (edge, v);
        }
    }
    Ok((best.0.exp(), best.1))
}

/// `lambda* = argmin_lambda r_N(lambda)`, re-estimating the KL term at each
/// point through `kl_at`. `candidates` inside the search interval are
/// compared against the golden-section result.
pub fn lambda_star(
    ctx: &BoundContext<'_>,
    theorem: Theorem,
    n: usize,
    delta: f64,
    candidates: &[f64],
    mut kl_at: impl FnMut(f64) -> Result<Estimate>,
) -> Result<BoundReport> {
    let mut eval = |lam: f64| -> Result<f64> {
        let kl = kl_at(lam)?;
        Ok(ctx.report(theorem, lam, n, delta, kl)?.r_n)
    };
    let (lo, hi) = match theorem {
        Theorem::Thm1Unbounded => {
            let lmax = ctx.lambda_max()?;
            (lmax * 1e-6, lmax * (1.0 - 1e-9))
        }
        _ => {
            let mut hi = match theorem {
                Theorem::Thm2Bounded => ctx.schedule(n.max(2))?,
                _ => (n as f64).sqrt(),
            };
            let mut f_hi = eval(hi)?;
            let mut steps = 0;
            loop {
                let next = 2.0 * hi;
                let f_next = match eval(next) {
                    Ok(v) => v,
                    Err(Error::Numeric(_)) => f64::INFINITY,
                    Err(e) => return Err(e),
                };
                if f_next > f_hi || steps > 200 {
                    hi = next;
                    break;
                }
                hi = next;
                f_hi = f_next;
                steps += 1;
            }
            (hi * 1e-6, hi)
        }
    };
    let mut guarded = |x: f64| match eval(x) {
        Err(Error::Numeric(_)) => Ok(f64::INFINITY),
        other => other,
    };
    let (mut lam, mut best) = golden_section_min(&mut guarded, lo, hi, 1e-4)?;
    for &c in candidates.iter().filter(|c| **c >= lo && **c <= hi) {
        let v = guarded(c)?;
        if v < best {
            (lam, best) = (c, v);
        }
    }
    let report = ctx.report(theorem, lam, n, delta, kl_at(lam)?)?;
    if theorem == Theorem::Thm1Unbounded {
        assert!(report.lambda < ctx.lambda_max()?, "lambda* left the admissible interval");
    }
    Ok(report)
}
