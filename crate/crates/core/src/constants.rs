//! Error system and the scalar constants entering the bounds.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, norm2};
use crate::lti::{Generator, NoiseKind, NoiseSampler, StateSpace};
use crate::loss::WMode;

/// Default tolerance for certified infinite sums.
pub const L1_TOL: f64 = 1e-10;
const MAX_TERMS: usize = 50_000_000;

/// Builds `(A_e, K_e, C_e, D_e)`, the system mapping the innovations to the
/// prediction error `y - y_hat`.
pub fn build_error_system(pred: &StateSpace, mode: WMode, gen: &Generator) -> Result<StateSpace> {
    crate::loss::validate_predictor(pred, mode, gen.ny, gen.nu)?;
    let (ny, nu, m) = (gen.ny, gen.nu, gen.m());
    let n_p = pred.n();
    let c1 = gen.c_y();
    let (c_w, b_w, d_w) = match mode {
        WMode::UOnly => {
            let mut b_w = DMatrix::zeros(n_p, m);
            b_w.view_mut((0, ny), (n_p, nu)).copy_from(&pred.b);
            let mut d_w = DMatrix::zeros(ny, m);
            d_w.view_mut((0, ny), (ny, nu)).copy_from(&pred.d);
            (gen.c_u(), b_w, d_w)
        }
        WMode::Yu => (gen.c().clone(), pred.b.clone(), pred.d.clone()),
    };
    let a_e = linalg::block2x2(gen.a(), &DMatrix::zeros(gen.n(), n_p), &(&pred.b * &c_w), &pred.a);
    let mut k_e = DMatrix::zeros(gen.n() + n_p, m);
    k_e.view_mut((0, 0), (gen.n(), m)).copy_from(gen.k());
    k_e.view_mut((gen.n(), 0), (n_p, m)).copy_from(&b_w);
    let mut c_e = DMatrix::zeros(ny, gen.n() + n_p);
    c_e.view_mut((0, 0), (ny, gen.n())).copy_from(&(c1 - &pred.d * &c_w));
    c_e.view_mut((0, gen.n()), (ny, n_p)).copy_from(&(-&pred.c));
    let mut d_e = DMatrix::zeros(ny, m);
    d_e.view_mut((0, 0), (ny, ny)).fill_with_identity();
    d_e -= d_w;
    StateSpace::new(a_e, k_e, c_e, d_e)
}

/// How `gamma_hat` is placed between the spectral radius and one:
/// `gamma_hat = gamma* + fraction (1 - gamma*)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaRule {
    pub fraction: f64,
}

impl Default for GammaRule {
    fn default() -> Self {
        Self { fraction: 0.5 }
    }
}

impl GammaRule {
    pub fn validate(&self) -> Result<()> {
        if self.fraction > 0.0 && self.fraction < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("gamma fraction must lie in (0, 1), got {}", self.fraction)))
        }
    }
}

/// A certificate `||A^k|| <= m_hat gamma_hat^k` for all `k >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBound {
    pub m_hat: f64,
    pub gamma_hat: f64,
    pub gamma_star: f64,
    /// Number of powers examined.
    pub k_checked: usize,
}

pub fn power_bound(a: &DMatrix<f64>) -> Result<PowerBound> {
    power_bound_with(a, GammaRule::default())
}

/// Computes the smallest valid `m_hat` for `gamma_hat` chosen by `rule`.
///
/// The scan stops at the first `K >= 1` with `||A^K|| <= gamma_hat^K`: by
/// submultiplicativity no later power can raise the ratio above the
/// maximum already seen.
pub fn power_bound_with(a: &DMatrix<f64>, rule: GammaRule) -> Result<PowerBound> {
    let gamma_star = linalg::spectral_radius(a)?;
    if gamma_star >= 1.0 {
        return Err(Error::Unstable(gamma_star));
    }
    let gamma_hat = gamma_star + rule.fraction * (1.0 - gamma_star);
    let floor = 1.0 + 1e-9;
    let n = a.nrows();
    if n == 2 {
        return Ok(power_bound_2x2(a, gamma_star, gamma_hat, floor));
    }
    let mut p = DMatrix::<f64>::identity(n, n);
    let mut scale = 1.0;
    let mut m_hat = floor;
    for k in 1..MAX_TERMS {
        p = &p * a;
        scale *= gamma_hat;
        let ratio = norm2(&p) / scale;
        if ratio <= 1.0 || !ratio.is_finite() && p.amax() == 0.0 {
            return Ok(PowerBound { m_hat, gamma_hat, gamma_star, k_checked: k });
        }
        m_hat = m_hat.max(ratio);
    }
    Err(Error::Numeric("power bound scan did not terminate".into()))
}

fn power_bound_2x2(a: &DMatrix<f64>, gamma_star: f64, gamma_hat: f64, floor: f64) -> PowerBound {
    let (a00, a01, a10, a11) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
    let (mut p00, mut p01, mut p10, mut p11) = (1.0, 0.0, 0.0, 1.0);
    let mut scale = 1.0;
    let mut m_hat = floor;
    let mut k = 0;
    loop {
        k += 1;
        let q00 = p00 * a00 + p01 * a10;
        let q01 = p00 * a01 + p01 * a11;
        let q10 = p10 * a00 + p11 * a10;
        let q11 = p10 * a01 + p11 * a11;
        (p00, p01, p10, p11) = (q00, q01, q10, q11);
        scale *= gamma_hat;
        let ratio = linalg::norm2_2x2(p00, p01, p10, p11) / scale;
        if ratio <= 1.0 || k >= MAX_TERMS {
            return PowerBound { m_hat, gamma_hat, gamma_star, k_checked: k };
        }
        m_hat = m_hat.max(ratio);
    }
}

/// Certified upper bound on `||D|| + sum_k ||C A^k K||`.
///
/// Terms are summed until the geometric tail bound drops below `tol`; the
/// tail bound is then added.
pub fn l1_system_norm(sys: &StateSpace, tol: f64) -> Result<f64> {
    impulse_sum(sys, tol, false)
}

/// Certified upper bound on `||D|| + sum_k (k+1) ||C A^k K||`.
pub fn l1_system_norm_weighted(sys: &StateSpace, tol: f64) -> Result<f64> {
    impulse_sum(sys, tol, true)
}

fn impulse_sum(sys: &StateSpace, tol: f64, weighted: bool) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let pb = power_bound(&sys.a)?;
    let scale = pb.m_hat * norm2(&sys.c) * norm2(&sys.b);
    let g = pb.gamma_hat;
    let mut total = norm2(&sys.d);
    if scale == 0.0 {
        return Ok(total);
    }
    let mut ca = sys.c.clone();
    let mut gk1 = g;
    for k in 0..MAX_TERMS {
        let term = norm2(&(&ca * &sys.b));
        let w = if weighted { (k + 1) as f64 } else { 1.0 };
        total += w * term;
        // gk1 = gamma_hat^(k+1)
        let tail = if weighted {
            let kf = k as f64;
            scale * gk1 * ((kf + 2.0) - (kf + 1.0) * g) / ((1.0 - g) * (1.0 - g))
        } else {
            scale * gk1 / (1.0 - g)
        };
        if tail < tol {
            return Ok(total + tail);
        }
        ca = &ca * &sys.a;
        gk1 *= g;
    }
    Err(Error::Numeric("impulse-response sum did not converge".into()))
}

/// The `Gbar_f` family of predictor constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorGains {
    pub g_bar_f: f64,
    pub g_bar_f1: f64,
    pub g_bar_f2: f64,
    pub power: PowerBound,
}

/// `Gbar_f`, `Gbar_f1`, `Gbar_f2` from the predictor matrices alone.
pub fn predictor_gains(pred: &StateSpace, rule: GammaRule) -> Result<PredictorGains> {
    let power = power_bound_with(&pred.a, rule)?;
    Ok(gains_from(power, norm2(&pred.b), norm2(&pred.c), norm2(&pred.d)))
}

pub(crate) fn gains_from(power: PowerBound, nb: f64, nc: f64, nd: f64) -> PredictorGains {
    let PowerBound { m_hat, gamma_hat, .. } = power;
    let one_minus = 1.0 - gamma_hat;
    let g_bar_f1 = m_hat * nc * nb / one_minus;
    let lead = 1.0 + nd + m_hat * nb * nc / one_minus;
    PredictorGains {
        g_bar_f: lead * m_hat * nc * nb / one_minus.powf(1.5),
        g_bar_f1,
        g_bar_f2: lead / one_minus,
        power,
    }
}

/// Generator-level constants, shared by every predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConstants {
    pub ny: usize,
    pub nu: usize,
    /// `||Sigma_gen||_l1`.
    pub l1_gen: f64,
    pub mu_max: f64,
    pub g_bar_gen: f64,
    /// Component bound of the noise, if bounded.
    pub c_e: Option<f64>,
    pub g_gen1: Option<f64>,
    pub g_gen2: Option<f64>,
    pub c_big: Option<f64>,
}

impl GeneratorConstants {
    pub fn new(gen: &Generator, noise: &NoiseSampler) -> Result<Self> {
        let l1_gen = l1_system_norm(&gen.system, L1_TOL)?;
        let mu_max = noise.mu_max();
        let m = gen.m() as f64;
        let c_e = match noise.spec().kind {
            NoiseKind::Gaussian => None,
            NoiseKind::TruncatedGaussian => Some(noise.spec().c_e),
        };
        Ok(Self {
            ny: gen.ny,
            nu: gen.nu,
            l1_gen,
            mu_max,
            g_bar_gen: l1_gen * l1_gen * mu_max,
            c_e,
            g_gen1: c_e.map(|c| 8.0 * c * c * gen.ny as f64 * m),
            g_gen2: c_e.map(|c| 4.0 * l1_gen * l1_gen * c * c * m),
            c_big: c_e.map(|c| c * m.sqrt()),
        })
    }

    /// `n_y + n_u`.
    pub fn m(&self) -> usize {
        self.ny + self.nu
    }
}

/// Every constant for one (predictor, generator, noise) triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub g_e: f64,
    pub g_bar_f: f64,
    pub g_bar_gen: f64,
    pub l1_gen: f64,
    pub mu_max: f64,
    pub g_e1: f64,
    pub g_bar_f1: f64,
    pub g_bar_f2: f64,
    pub g_gen1: Option<f64>,
    pub g_gen2: Option<f64>,
    pub c_big: Option<f64>,
    pub m_hat: f64,
    pub gamma_hat: f64,
}

/// Computes all constants with the default `gamma_hat` rule.
pub fn compute_constants(pred: &StateSpace, mode: WMode, gen: &Generator, noise: &NoiseSampler) -> Result<BoundConstants> {
    let gc = GeneratorConstants::new(gen, noise)?;
    compute_constants_with(&gc, pred, mode, gen, GammaRule::default())
}

/// As [`compute_constants`] with precomputed generator constants.
pub fn compute_constants_with(
    gc: &GeneratorConstants,
    pred: &StateSpace,
    mode: WMode,
    gen: &Generator,
    rule: GammaRule,
) -> Result<BoundConstants> {
    let gains = predictor_gains(pred, rule)?;
    let err = build_error_system(pred, mode, gen)?;
    Ok(BoundConstants {
        g_e: l1_system_norm(&err, L1_TOL)?,
        g_bar_f: gains.g_bar_f,
        g_bar_gen: gc.g_bar_gen,
        l1_gen: gc.l1_gen,
        mu_max: gc.mu_max,
        g_e1: l1_system_norm_weighted(&err, L1_TOL)?,
        g_bar_f1: gains.g_bar_f1,
        g_bar_f2: gains.g_bar_f2,
        g_gen1: gc.g_gen1,
        g_gen2: gc.g_gen2,
        c_big: gc.c_big,
        m_hat: gains.power.m_hat,
        gamma_hat: gains.power.gamma_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::NoiseSpec;

    fn scalar(a: f64, b: f64, c: f64, d: f64) -> StateSpace {
        StateSpace::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, c),
            DMatrix::from_element(1, 1, d),
        )
        .unwrap()
    }

    fn reference() -> (Generator, NoiseSampler) {
        let gen = Generator::new(
            DMatrix::from_row_slice(2, 2, &[0.16, -0.3, 0.0, -0.05]),
            DMatrix::from_row_slice(2, 2, &[0.33, -0.75, 0.0, -0.09]),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            1,
            1,
        )
        .unwrap();
        let q = DMatrix::from_row_slice(2, 2, &[0.054, 0.018, 0.018, 0.248]);
        (gen, NoiseSpec::gaussian(q).sampler().unwrap())
    }

    fn sample_pred() -> StateSpace {
        StateSpace::new(
            DMatrix::from_row_slice(2, 2, &[0.3, 0.2, -0.1, 0.4]),
            DMatrix::from_row_slice(2, 1, &[0.5, -0.2]),
            DMatrix::from_row_slice(1, 2, &[0.7, 0.1]),
            DMatrix::from_element(1, 1, 0.2),
        )
        .unwrap()
    }

    #[test]
    fn power_bound_examples() {
        let pb = power_bound(&DMatrix::from_element(1, 1, 0.5)).unwrap();
        assert_eq!(pb.gamma_hat, 0.75);
        assert_eq!(pb.m_hat, 1.0 + 1e-9);
        let pb = power_bound(&DMatrix::from_row_slice(2, 2, &[0.0, 10.0, 0.0, 0.0])).unwrap();
        assert_eq!(pb.gamma_hat, 0.5);
        assert!((pb.m_hat - 20.0).abs() < 1e-12);
        let pb = power_bound(&DMatrix::zeros(2, 2)).unwrap();
        assert_eq!((pb.gamma_hat, pb.m_hat), (0.5, 1.0 + 1e-9));
        let pb = power_bound(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!((pb.gamma_hat, pb.m_hat), (0.5, 1.0 + 1e-9));
    }

    #[test]
    fn power_bound_certificate_holds_far_out() {
        let cases = [
            DMatrix::from_row_slice(2, 2, &[0.9, 5.0, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.95, 0.1]),
            DMatrix::from_row_slice(3, 3, &[0.5, 3.0, 0.0, 0.0, 0.5, 3.0, 0.0, 0.0, 0.5]),
        ];
        for a in cases {
            let pb = power_bound(&a).unwrap();
            let mut p = DMatrix::identity(a.nrows(), a.nrows());
            let mut k = 0;
            while pb.gamma_hat.powi(k) >= 1e-12 {
                assert!(norm2(&p) <= pb.m_hat * pb.gamma_hat.powi(k) * (1.0 + 1e-12), "k={k}");
                p = &p * &a;
                k += 1;
            }
        }
    }

    #[test]
    fn l1_norm_scalar_geometric() {
        let v = l1_system_norm(&scalar(0.5, 1.0, 1.0, 1.0), L1_TOL).unwrap();
        assert!(v >= 3.0 && v - 3.0 < 1e-9);
        assert_eq!(l1_system_norm(&scalar(0.5, 1.0, 0.0, 0.7), L1_TOL).unwrap(), 0.7);
        // sum (k+1) 0.5^k = 4
        let w = l1_system_norm_weighted(&scalar(0.5, 1.0, 1.0, 1.0), L1_TOL).unwrap();
        assert!(w >= 5.0 && w - 5.0 < 1e-9);
    }

    #[test]
    fn l1_norm_is_certified_and_monotone_in_tol() {
        let (gen, _) = reference();
        let sys = &gen.system;
        let mut brute = 1.0;
        let mut p = DMatrix::identity(2, 2);
        for _ in 0..10_000 {
            brute += norm2(&(sys.c.clone() * &p * &sys.b));
            p = &p * &sys.a;
        }
        let fine = l1_system_norm(sys, 1e-10).unwrap();
        let coarse = l1_system_norm(sys, 1e-6).unwrap();
        assert!(coarse >= fine && fine >= brute && fine - brute <= 1e-10);
    }

    #[test]
    fn zero_predictor_error_system_is_y_channel() {
        let (gen, _) = reference();
        let zero = StateSpace::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), DMatrix::zeros(1, 2), DMatrix::zeros(1, 1)).unwrap();
        let e = build_error_system(&zero, WMode::UOnly, &gen).unwrap();
        assert_eq!(e.c.columns(0, 2), gen.c_y());
        assert_eq!(e.c.columns(2, 2).amax(), 0.0);
        assert_eq!(e.b.rows(0, 2), *gen.k());
        assert_eq!(e.b.rows(2, 2).amax(), 0.0);
        assert_eq!(e.d, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
    }

    #[test]
    fn error_spectrum_is_union_of_blocks() {
        let (gen, _) = reference();
        let pred = sample_pred();
        let e = build_error_system(&pred, WMode::UOnly, &gen).unwrap();
        let expect = gen.system.spectral_radius().max(pred.spectral_radius());
        assert!((e.spectral_radius() - expect).abs() < 1e-9);
    }

    #[test]
    fn yu_mode_rejects_feedthrough_of_y() {
        let (gen, _) = reference();
        let pred = StateSpace::new(
            DMatrix::from_element(1, 1, 0.2),
            DMatrix::from_row_slice(1, 2, &[0.1, 0.3]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_row_slice(1, 2, &[0.5, 0.2]),
        )
        .unwrap();
        assert!(matches!(build_error_system(&pred, WMode::Yu, &gen), Err(Error::InvalidPredictor(_))));
    }

    #[test]
    fn constants_match_formula_reevaluation() {
        let (gen, noise) = reference();
        let pred = sample_pred();
        let k = compute_constants(&pred, WMode::UOnly, &gen, &noise).unwrap();
        let pb = power_bound(&pred.a).unwrap();
        let (nb, nc, nd) = (norm2(&pred.b), norm2(&pred.c), norm2(&pred.d));
        let g = 1.0 - pb.gamma_hat;
        let gf = (1.0 + nd + pb.m_hat * nb * nc / g) * pb.m_hat * nc * nb / g.powf(1.5);
        assert!((k.g_bar_f - gf).abs() <= 1e-12 * gf);
        assert!(k.l1_gen >= 1.0);
        assert!((k.g_bar_gen - k.l1_gen.powi(2) * k.mu_max).abs() < 1e-12);
        assert!(k.g_e > 0.0 && k.g_e1 >= k.g_e);
        assert!(k.g_gen1.is_none());
    }

    #[test]
    fn bounded_generator_constants() {
        let (gen, _) = reference();
        let q = DMatrix::from_row_slice(2, 2, &[0.054, 0.018, 0.018, 0.248]);
        let noise = NoiseSpec::truncated(q, 1.0).sampler().unwrap();
        let gc = GeneratorConstants::new(&gen, &noise).unwrap();
        assert_eq!(gc.g_gen1, Some(16.0));
        assert!((gc.c_big.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((gc.g_gen2.unwrap() - 8.0 * gc.l1_gen.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn vanishing_input_gives_zero_gains() {
        let mut pred = sample_pred();
        pred.b.fill(0.0);
        let g = predictor_gains(&pred, GammaRule::default()).unwrap();
        assert_eq!((g.g_bar_f, g.g_bar_f1), (0.0, 0.0));
    }
}
