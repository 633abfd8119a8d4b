//! Config-driven experiment runner behind the `pac-lti` binary.
//!
//! Every output file starts with a `# config_hash=<sha256> seed=<seed>`
//! line followed by a CSV header; rows are flushed as they are produced.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{self, BoundContext, BoundReport, LambdaPolicy, Theorem};
use crate::constants::{compute_constants, GammaRule, GeneratorConstants};
use crate::error::{Error, Result};
use crate::loss::WMode;
use crate::lti::{self, matrix_from_rows, CovarianceTarget, Generator, NoiseKind, NoiseSampler, NoiseSpec, Trajectory};
use crate::oracle::{self, CoverageResult, CoverageSetup, LemmaCheckResult};
use crate::posterior::{ClassConstraint, GibbsLadder, LadderSettings, MhSettings, ParamLayout, PriorEnsemble, PriorModel};
use crate::rng::child_seed;

const SEED_PRIOR: u64 = 1;
const SEED_DATA: u64 = 2;
const SEED_LADDER: u64 = 3;
const SEED_VERIFY: u64 = 4;
const SEED_COVERAGE: u64 = 5;

/// `{"A", "K", "C", "ny", "nu"}` of the innovation-form generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    pub ny: usize,
    pub nu: usize,
}

impl GeneratorConfig {
    pub fn build(&self) -> Result<Generator> {
        let a = matrix_from_rows(&self.a, self.a.len())?;
        let k = matrix_from_rows(&self.k, 0)?;
        let c = matrix_from_rows(&self.c, a.nrows())?;
        Generator::new(a, k, c, self.ny, self.nu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub q_e: Vec<Vec<f64>>,
    /// Component bound; required for truncated noise.
    #[serde(default)]
    pub c_e: Option<f64>,
    #[serde(default)]
    pub target: CovarianceTarget,
}

impl NoiseConfig {
    pub fn build(&self) -> Result<NoiseSpec> {
        let q = matrix_from_rows(&self.q_e, self.q_e.len())?;
        Ok(match self.kind {
            NoiseKind::Gaussian => NoiseSpec::gaussian(q),
            NoiseKind::TruncatedGaussian => {
                let c = self.c_e.ok_or_else(|| Error::Config("truncated noise needs c_e".into()))?;
                NoiseSpec::truncated(q, c).with_target(self.target)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub samples: usize,
    pub mcmc: MhSettings,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { samples: 5000, mcmc: MhSettings { thinning: 20, ..MhSettings::default() } }
    }
}

/// Sizes of the lemma suite and the coverage study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub noise_draws: usize,
    pub trials: usize,
    /// Prior samples used as test predictors.
    pub predictors: usize,
    pub vn_grid: Vec<usize>,
    /// Horizon of the gap-moment and exponential-moment checks.
    pub n: usize,
    pub coverage_n: usize,
    /// Zero skips the coverage study.
    pub coverage_replications: usize,
    pub coverage_delta: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            noise_draws: 100_000,
            trials: 2000,
            predictors: 3,
            vn_grid: vec![10, 100, 1000],
            n: 1000,
            coverage_n: 1000,
            coverage_replications: 200,
            coverage_delta: 0.05,
        }
    }
}

/// Seven log-spaced horizons from `1e2` to `1e6`.
pub fn default_n_grid() -> Vec<usize> {
    (0..7).map(|i| 10f64.powf(2.0 + i as f64 * 4.0 / 6.0).round() as usize).collect()
}

fn default_delta() -> f64 {
    0.05
}

fn default_safety() -> f64 {
    1.1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub noise: NoiseConfig,
    #[serde(default = "default_w_mode")]
    pub w_mode: WMode,
    /// Predictor state dimension; defaults to the generator's.
    #[serde(default)]
    pub predictor_order: Option<usize>,
    #[serde(default)]
    pub class: ClassConstraint,
    #[serde(default)]
    pub gamma_rule: GammaRule,
    #[serde(default)]
    pub prior: PriorConfig,
    /// Chains whose averages enter bounds and coverage.
    #[serde(default = "default_gibbs")]
    pub gibbs: MhSettings,
    #[serde(default)]
    pub ladder: LadderSettings,
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Defaults to each theorem's natural choice plus `star`.
    #[serde(default)]
    pub lambda_policies: Option<Vec<LambdaPolicy>>,
    /// Defaults to every theorem matching the noise model.
    #[serde(default)]
    pub theorems: Option<Vec<Theorem>>,
    /// Inflation of the sampled class suprema.
    #[serde(default = "default_safety")]
    pub sup_safety: f64,
    #[serde(default)]
    pub strict_lambda: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_w_mode() -> WMode {
    WMode::UOnly
}

fn default_gibbs() -> MhSettings {
    MhSettings::default()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(Error::Config("the N grid is empty".into()));
        }
        if let Some(n) = self.n_grid.iter().find(|n| **n < 2) {
            return Err(Error::Config(format!("every N must be at least 2, got {n}")));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.sup_safety >= 1.0) {
            return Err(Error::Config(format!("sup_safety must be at least 1, got {}", self.sup_safety)));
        }
        if self.prior.samples == 0 {
            return Err(Error::Config("prior.samples must be positive".into()));
        }
        if matches!(self.theorems.as_deref(), Some([])) || matches!(self.lambda_policies.as_deref(), Some([])) {
            return Err(Error::Config("theorem and policy lists must not be empty".into()));
        }
        self.prior.mcmc.validate()?;
        self.gibbs.validate()?;
        self.ladder.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        let text = serde_json::to_string(&canon).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn theorems(&self, kind: NoiseKind) -> Vec<Theorem> {
        self.theorems.clone().unwrap_or_else(|| {
            Theorem::ALL.into_iter().filter(|t| t.needs_bounded_noise() == (kind == NoiseKind::TruncatedGaussian)).collect()
        })
    }

    pub fn policies(&self, theorem: Theorem) -> Vec<LambdaPolicy> {
        self.lambda_policies.clone().unwrap_or_else(|| vec![natural_policy(theorem), LambdaPolicy::Star])
    }
}

/// The `lambda` each bound is usually stated with.
pub fn natural_policy(theorem: Theorem) -> LambdaPolicy {
    match theorem {
        Theorem::Thm1Unbounded => LambdaPolicy::HalfMax,
        Theorem::Thm2Bounded => LambdaPolicy::Schedule,
        Theorem::Thm3BoundedAlt => LambdaPolicy::SqrtN,
    }
}

fn mode_id(mode: WMode) -> &'static str {
    match mode {
        WMode::UOnly => "u_only",
        WMode::Yu => "yu",
    }
}

/// A CSV file with the provenance line, flushed after every row.
pub struct OutputFile {
    path: PathBuf,
    w: BufWriter<File>,
}

impl OutputFile {
    pub fn create(dir: &Path, name: &str, cfg: &ExperimentConfig, header: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "# config_hash={} seed={}", cfg.hash(), cfg.seed)?;
        writeln!(w, "{header}")?;
        w.flush()?;
        Ok(Self { path, w })
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.w, "{line}")?;
        self.w.flush()?;
        Ok(())
    }

    pub fn writer(&mut self) -> &mut BufWriter<File> {
        &mut self.w
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Generator, noise, prior ensemble and class suprema for a config.
pub struct Setup {
    pub config: ExperimentConfig,
    pub gen: Generator,
    pub noise: NoiseSampler,
    pub gc: GeneratorConstants,
    pub ensemble: PriorEnsemble,
}

impl Setup {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let gen = config.generator.build()?;
        let noise = config.noise.build()?.sampler()?;
        let gc = GeneratorConstants::new(&gen, &noise)?;
        let layout = ParamLayout::new(config.predictor_order.unwrap_or(gen.n()), gen.ny, gen.nu, config.w_mode);
        let mut model = PriorModel::new(layout, config.class);
        model.gamma_rule = config.gamma_rule;
        let ensemble =
            PriorEnsemble::sample(model, &gen, &gc, config.prior.samples, config.prior.mcmc, child_seed(config.seed, SEED_PRIOR))?;
        log::info!("prior ensemble: {} samples, acceptance {:.3}", ensemble.len(), ensemble.chain.acceptance_rate);
        Ok(Self { config, gen, noise, gc, ensemble })
    }

    pub fn context(&self) -> Result<BoundContext<'_>> {
        let mut ctx = BoundContext::new(self.gc, &self.ensemble.constants, self.config.sup_safety)?;
        ctx.strict_lambda = self.config.strict_lambda;
        Ok(ctx)
    }

    /// The data trajectory of length `n`; shorter horizons are prefixes.
    pub fn data(&self, n: usize) -> Result<Trajectory> {
        lti::simulate_with(&self.gen, &self.noise, n, child_seed(self.config.seed, SEED_DATA))
    }

    pub fn ladder<'t>(&self, traj: &'t Trajectory) -> Result<GibbsLadder<'t>> {
        let losses = self.ensemble.empirical_losses(traj)?;
        let seed = child_seed(child_seed(self.config.seed, SEED_LADDER), traj.len() as u64);
        GibbsLadder::new(self.ensemble.model, traj, losses, &self.ensemble.chain, self.config.ladder, seed)
    }
}

/// Evaluates one `(theorem, policy)` cell. `Ok(None)` when the policy gives
/// a `lambda` the theorem does not admit.
pub fn evaluate(
    ctx: &BoundContext<'_>,
    ladder: &mut GibbsLadder<'_>,
    theorem: Theorem,
    policy: LambdaPolicy,
    n: usize,
    delta: f64,
) -> Result<Option<BoundReport>> {
    if policy == LambdaPolicy::Star {
        let mut candidates = Vec::new();
        for p in [LambdaPolicy::Schedule, LambdaPolicy::SqrtN, LambdaPolicy::HalfMax] {
            if let Ok(l) = p.resolve(ctx, n) {
                candidates.push(l);
            }
        }
        let report = bounds::lambda_star(ctx, theorem, n, delta, &candidates, |l| Ok(ladder.kl(l)?.estimate()))?;
        return Ok(Some(report));
    }
    let lambda = policy.resolve(ctx, n)?;
    if theorem == Theorem::Thm1Unbounded && !(lambda < ctx.lambda_max()?) {
        log::warn!("{theorem} skips {} at N = {n}: lambda {lambda:e} is inadmissible", policy.id());
        return Ok(None);
    }
    let kl = ladder.kl(lambda)?;
    ctx.report(theorem, lambda, n, delta, kl.estimate()).map(Some)
}

fn r_n_se(r: &BoundReport) -> f64 {
    r.kl.se.hypot(r.psi.se) / r.lambda
}

pub const SWEEP_HEADER: &str = "theorem,N,lambda,delta,kl,kl_se,psi,psi_se,r_N,vacuous,policy,mode,r_N_se,vacuity_threshold,sup_g_e,sup_g_bar_f,sup_safety";
pub const PLOT_HEADER: &str = "series,theorem,mode,policy,N,r_N,r_N_se,vacuous";
pub const LADDER_HEADER: &str = "N,lambda,mean_emp_loss,se,acceptance";

fn sweep_row(r: &BoundReport, policy: LambdaPolicy, mode: WMode, threshold: Option<f64>) -> Result<String> {
    let mut buf = Vec::new();
    r.write_csv_row(&mut buf)?;
    let base = String::from_utf8(buf).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(format!(
        "{},{},{},{:e},{},{:e},{:e},{}",
        base.trim_end(),
        policy.id(),
        mode_id(mode),
        r_n_se(r),
        threshold.map(|t| format!("{t:e}")).unwrap_or_default(),
        r.sup_info.sup_g_e,
        r.sup_info.sup_g_bar_f,
        r.sup_info.safety_factor
    ))
}

/// Writes one trajectory file per horizon; each is a prefix of the longest.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let gen = cfg.generator.build()?;
    let noise = cfg.noise.build()?.sampler()?;
    let n_max = *cfg.n_grid.iter().max().expect("validated grid");
    let full = lti::simulate_with(&gen, &noise, n_max, child_seed(cfg.seed, SEED_DATA))?;
    let mut paths = Vec::new();
    for &n in &cfg.n_grid {
        let traj = full.prefix(n)?;
        fs::create_dir_all(&cfg.out)?;
        let path = cfg.out.join(format!("trajectory_N{n}.csv"));
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "# config_hash={} seed={}", cfg.hash(), cfg.seed)?;
        traj.write_csv(&mut w)?;
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Bound reports over the N grid for every configured theorem and policy.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<(LambdaPolicy, BoundReport)>> {
    let setup = Setup::new(cfg.clone())?;
    let ctx = setup.context()?;
    let kind = setup.noise.spec().kind;
    let mode = cfg.w_mode;
    let threshold = ctx.vacuity_threshold();
    let mut bounds_csv = OutputFile::create(&cfg.out, "bounds.csv", cfg, SWEEP_HEADER)?;
    let mut plot_csv = OutputFile::create(&cfg.out, "plot_data.csv", cfg, PLOT_HEADER)?;
    let mut ladder_csv = OutputFile::create(&cfg.out, "ladder.csv", cfg, LADDER_HEADER)?;
    write_run_summary(&setup, &ctx)?;
    let mut grid = cfg.n_grid.clone();
    grid.sort_unstable();
    let full = setup.data(*grid.last().expect("validated grid"))?;
    let mut out = Vec::new();
    for &n in &grid {
        let traj = full.prefix(n)?;
        let mut ladder = setup.ladder(&traj)?;
        for theorem in cfg.theorems(kind) {
            for policy in cfg.policies(theorem) {
                let Some(r) = evaluate(&ctx, &mut ladder, theorem, policy, n, cfg.delta)? else { continue };
                bounds_csv.row(&sweep_row(&r, policy, mode, threshold)?)?;
                plot_csv.row(&format!(
                    "{theorem}/{}/{},{theorem},{},{},{n},{:e},{:e},{}",
                    mode_id(mode),
                    policy.id(),
                    mode_id(mode),
                    policy.id(),
                    r.r_n,
                    r_n_se(&r),
                    r.vacuous
                ))?;
                log::info!("N = {n} {theorem} {}: lambda {:.4e} r_N {:.4e}", policy.id(), r.lambda, r.r_n);
                out.push((policy, r));
            }
        }
        for (lambda, mean, se, acc) in ladder.rungs() {
            ladder_csv.row(&format!("{n},{lambda:e},{mean:e},{se:e},{acc}"))?;
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config_hash: String,
    seed: u64,
    generator_constants: &'a GeneratorConstants,
    sup: bounds::SupInfo,
    lambda_max_unbounded: Option<f64>,
    schedule_sup_term: Option<f64>,
    vacuity_threshold: Option<f64>,
    prior_acceptance: f64,
    noise_acceptance: f64,
}

fn write_run_summary(setup: &Setup, ctx: &BoundContext<'_>) -> Result<()> {
    let cfg = &setup.config;
    let summary = RunSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        generator_constants: &setup.gc,
        sup: ctx.sup,
        lambda_max_unbounded: ctx.lambda_max().ok(),
        schedule_sup_term: ctx.schedule_sup_term().ok(),
        vacuity_threshold: ctx.vacuity_threshold(),
        prior_acceptance: setup.ensemble.chain.acceptance_rate,
        noise_acceptance: setup.noise.acceptance_rate(),
    };
    fs::create_dir_all(&cfg.out)?;
    let mut w = BufWriter::new(File::create(cfg.out.join("run.json"))?);
    serde_json::to_writer_pretty(&mut w, &summary)?;
    writeln!(w)?;
    w.flush()?;
    let mut chain = OutputFile::create(&cfg.out, "prior_chain.csv", cfg, "# samples follow")?;
    setup.ensemble.chain.write_csv(chain.writer(), "g_bar_f")?;
    chain.writer().flush()?;
    Ok(())
}

/// Single evaluation of one bound at one horizon.
pub fn cmd_bound(cfg: &ExperimentConfig, theorem: Theorem, n: usize, policy: LambdaPolicy) -> Result<Option<BoundReport>> {
    let setup = Setup::new(cfg.clone())?;
    let ctx = setup.context()?;
    let traj = setup.data(n)?;
    let mut ladder = setup.ladder(&traj)?;
    let report = evaluate(&ctx, &mut ladder, theorem, policy, n, cfg.delta)?;
    let mut csv = OutputFile::create(&cfg.out, "bound.csv", cfg, SWEEP_HEADER)?;
    if let Some(r) = &report {
        csv.row(&sweep_row(r, policy, cfg.w_mode, ctx.vacuity_threshold())?)?;
    }
    Ok(report)
}

pub const STAR_HEADER: &str = "theorem,N,lambda_star,r_N_star,reference_policy,lambda_ref,r_N_ref,dominates";

/// `lambda*` per grid horizon, next to each theorem's natural `lambda`.
pub fn cmd_lambda_star(cfg: &ExperimentConfig) -> Result<Vec<(BoundReport, Option<BoundReport>)>> {
    let setup = Setup::new(cfg.clone())?;
    let ctx = setup.context()?;
    let kind = setup.noise.spec().kind;
    let mut csv = OutputFile::create(&cfg.out, "lambda_star.csv", cfg, STAR_HEADER)?;
    let mut grid = cfg.n_grid.clone();
    grid.sort_unstable();
    let full = setup.data(*grid.last().expect("validated grid"))?;
    let mut out = Vec::new();
    for &n in &grid {
        let traj = full.prefix(n)?;
        let mut ladder = setup.ladder(&traj)?;
        for theorem in cfg.theorems(kind) {
            let reference = natural_policy(theorem);
            let star = evaluate(&ctx, &mut ladder, theorem, LambdaPolicy::Star, n, cfg.delta)?.expect("lambda* always evaluates");
            let refr = evaluate(&ctx, &mut ladder, theorem, reference, n, cfg.delta)?;
            let (lr, rr) = refr.as_ref().map_or((String::new(), String::new()), |r| (format!("{:e}", r.lambda), format!("{:e}", r.r_n)));
            let dominates = refr.as_ref().map_or(true, |r| star.r_n <= r.r_n);
            csv.row(&format!("{theorem},{n},{:e},{:e},{},{lr},{rr},{dominates}", star.lambda, star.r_n, reference.id()))?;
            out.push((star, refr));
        }
    }
    Ok(out)
}

pub const COVERAGE_HEADER: &str = "theorem,N,delta,lambda,replications,fraction,se,required,pass,mean_r_N,min_slack";

/// Outcome of `verify`.
#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub lemmas: Vec<LemmaCheckResult>,
    pub coverage: Vec<CoverageResult>,
}

impl VerifyOutcome {
    pub fn all_pass(&self) -> bool {
        self.lemmas.iter().all(|r| r.pass) && self.coverage.iter().all(|c| c.pass)
    }
}

/// The lemma suite for one noise model over the given predictors.
/// `ge_scale` multiplies every `G_e` handed to the checks.
pub fn lemma_suite(
    setup: &Setup,
    noise: &NoiseSampler,
    predictors: &[usize],
    ge_scale: f64,
    seed: u64,
    mut sink: impl FnMut(&LemmaCheckResult) -> Result<()>,
) -> Result<Vec<LemmaCheckResult>> {
    let v = &setup.config.verify;
    let mode = setup.config.w_mode;
    let gc = GeneratorConstants::new(&setup.gen, noise)?;
    let mut out = Vec::new();
    let mut push = |r: LemmaCheckResult, out: &mut Vec<LemmaCheckResult>| -> Result<()> {
        sink(&r)?;
        out.push(r);
        Ok(())
    };
    for r in oracle::check_even_moments(noise, 3, v.noise_draws, child_seed(seed, 0))? {
        push(r, &mut out)?;
    }
    for r in [2, 3] {
        push(oracle::check_sigma_bound(noise, r, v.noise_draws, child_seed(seed, r as u64))?, &mut out)?;
    }
    for (j, &i) in predictors.iter().enumerate() {
        let pred = &setup.ensemble.systems[i];
        let k = compute_constants(pred, mode, &setup.gen, noise)?;
        let g_e = k.g_e * ge_scale;
        let s = child_seed(seed, 100 + j as u64);
        push(oracle::check_ell1_gain(pred, mode, &setup.gen, g_e)?, &mut out)?;
        for r in [1, 2] {
            let res = oracle::check_vn_moment_decay(
                pred,
                mode,
                &setup.gen,
                noise,
                gc.g_bar_gen,
                k.g_bar_f,
                &v.vn_grid,
                r,
                v.trials,
                child_seed(s, r as u64),
            )?;
            for x in res {
                push(x, &mut out)?;
            }
        }
        push(oracle::check_l_minus_v_moments(pred, mode, &setup.gen, noise, g_e, 2, v.n, v.trials, child_seed(s, 3))?, &mut out)?;
        let lambda = 0.5 * oracle::mgf_threshold(&setup.gen, noise.mu_max(), g_e);
        for x in oracle::check_mgf_bound(pred, mode, &setup.gen, noise, g_e, lambda, v.n, v.trials, child_seed(s, 4))? {
            push(x, &mut out)?;
        }
    }
    Ok(out)
}

/// Lemma suite (Gaussian noise with the configured covariance, plus the
/// configured noise when it is bounded) and coverage of each theorem.
pub fn cmd_verify(cfg: &ExperimentConfig, corrupt_ge: bool) -> Result<VerifyOutcome> {
    let setup = Setup::new(cfg.clone())?;
    let v = &cfg.verify;
    let seed = child_seed(cfg.seed, SEED_VERIFY);
    let count = v.predictors.min(setup.ensemble.len()).max(1);
    let predictors: Vec<usize> = (0..count).map(|j| j * setup.ensemble.len() / count).collect();
    let ge_scale = if corrupt_ge { 0.5 } else { 1.0 };
    let mut lemma_csv = OutputFile::create(&cfg.out, "oracle.csv", cfg, LemmaCheckResult::CSV_HEADER)?;
    let mut noises = vec![NoiseSpec::gaussian(setup.noise.spec().q_e.clone()).sampler()?];
    if setup.noise.spec().kind == NoiseKind::TruncatedGaussian {
        noises.push(setup.noise.clone());
    }
    let mut lemmas = Vec::new();
    for (i, noise) in noises.iter().enumerate() {
        let mut sink = |r: &LemmaCheckResult| {
            let mut buf = Vec::new();
            r.write_csv_row(&mut buf)?;
            lemma_csv.row(String::from_utf8_lossy(&buf).trim_end())
        };
        lemmas.extend(lemma_suite(&setup, noise, &predictors, ge_scale, child_seed(seed, i as u64), &mut sink)?);
    }
    let mut coverage = Vec::new();
    if v.coverage_replications > 0 {
        let ctx = setup.context()?;
        let cov_setup = CoverageSetup {
            gen: &setup.gen,
            noise: &setup.noise,
            ensemble: &setup.ensemble,
            ctx: &ctx,
            settings: cfg.gibbs,
            ladder: cfg.ladder,
        };
        let mut csv = OutputFile::create(&cfg.out, "coverage.csv", cfg, COVERAGE_HEADER)?;
        for (i, theorem) in cfg.theorems(setup.noise.spec().kind).into_iter().enumerate() {
            let c = oracle::check_coverage(
                &cov_setup,
                theorem,
                v.coverage_n,
                v.coverage_delta,
                natural_policy(theorem),
                v.coverage_replications,
                child_seed(child_seed(cfg.seed, SEED_COVERAGE), i as u64),
            )?;
            csv.row(&format!(
                "{},{},{},{:e},{},{},{:e},{},{},{:e},{:e}",
                c.theorem, c.n, c.delta, c.lambda, c.replications, c.fraction, c.se, c.required, c.pass, c.mean_r_n, c.min_slack
            ))?;
            coverage.push(c);
        }
    }
    Ok(VerifyOutcome { lemmas, coverage })
}
