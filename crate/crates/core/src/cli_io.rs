//! Experiment configuration, persistence, and the commands behind the
//! `seqjde` binary.
//!
//! Configs are TOML. Coefficient files are TOML too and round-trip exactly;
//! result tables are CSV with a `#` provenance header.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::{design, DesignConfig, DesignOutcome};
use crate::error::{Error, Result};
use crate::model::{summarize, summarize_into, HypothesisId, Param, PosteriorSummary, ScenarioModel};
use crate::montecarlo::{evaluate, PerformanceEstimate, SimulationConfig};
use crate::msprt::{thresholds_for, ThresholdRule, TwoStepPolicy};
use crate::policy::{ao_should_stop, cost_g, decide, normalized_cost_limit, AoPolicy, CostCoefficients, EPSILON};
use crate::qam::{Qam, QamConfig};
use crate::quadrature::QuadratureSpec;
use crate::shift_in_mean::{SiMConfig, ShiftInMean, ShiftStatistic};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    #[default]
    ShiftInMean,
    Qam,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::ShiftInMean => "shift_in_mean",
            ScenarioKind::Qam => "qam",
        })
    }
}

/// A nominal level given either once for every hypothesis or per hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Levels {
    All(f64),
    Each(Vec<f64>),
}

impl Levels {
    fn expand(&self, field: &str, num: usize) -> Result<Vec<f64>> {
        match self {
            Levels::All(v) => Ok(vec![*v; num]),
            Levels::Each(v) if v.len() == num => Ok(v.clone()),
            Levels::Each(v) => Err(Error::validation(
                field,
                format!("has {} entries but the scenario has {num} hypotheses", v.len()),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelsSection {
    pub alpha_bar: Option<Levels>,
    pub beta_bar: Option<Levels>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignSection {
    pub tol_det: f64,
    pub tol_est: f64,
    pub epsilon: f64,
    pub runs_per_iter: u64,
    pub max_iters: usize,
    pub step_size: f64,
    pub max_relative_step: Option<f64>,
    pub warm_start_iters: usize,
    pub precondition: bool,
    pub initial_lambda_det: Option<Vec<f64>>,
    pub initial_lambda_est: Option<Vec<f64>>,
}

impl Default for DesignSection {
    fn default() -> Self {
        let d = DesignConfig::default();
        DesignSection {
            tol_det: d.tol_det,
            tol_est: d.tol_est,
            epsilon: d.epsilon,
            runs_per_iter: d.runs_per_iter,
            max_iters: d.max_iters,
            step_size: d.step_size,
            max_relative_step: d.max_relative_step,
            warm_start_iters: d.warm_start_iters,
            precondition: d.precondition,
            initial_lambda_det: None,
            initial_lambda_est: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub runs: u64,
    /// Sample cap; 10^4 for shift-in-mean and 10^5 for QAM when absent.
    pub n_max: Option<usize>,
    pub stratify_by_hypothesis: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            runs: 1_000_000,
            n_max: None,
            stratify_by_hypothesis: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStepSection {
    pub threshold_rule: ThresholdRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyMapGrid {
    pub n_min: usize,
    pub n_max: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub x_step: f64,
}

impl Default for PolicyMapGrid {
    fn default() -> Self {
        PolicyMapGrid {
            n_min: 0,
            n_max: 60,
            x_min: -6.0,
            x_max: 6.0,
            x_step: 0.02,
        }
    }
}

impl PolicyMapGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_min > self.n_max {
            return Err(Error::validation("policy_map.n_min", "must not exceed n_max"));
        }
        if !(self.x_min < self.x_max) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(Error::validation("policy_map.x_min", "must be finite and below x_max"));
        }
        if !(self.x_step > 0.0) {
            return Err(Error::validation("policy_map.x_step", "must be positive"));
        }
        Ok(())
    }

    pub fn x_values(&self) -> Vec<f64> {
        let count = ((self.x_max - self.x_min) / self.x_step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.x_min + i as f64 * self.x_step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub levels: LevelsSection,
    pub shift_in_mean: SiMConfig,
    pub qam: QamConfig,
    pub quadrature: QuadratureSpec,
    pub design: DesignSection,
    pub simulation: SimulationSection,
    pub two_step: TwoStepSection,
    pub policy_map: PolicyMapGrid,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_string(),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A concrete scenario model.
#[derive(Debug)]
pub enum Scenario {
    ShiftInMean(ShiftInMean),
    Qam(Qam),
}

macro_rules! with_model {
    ($scenario:expr, $m:ident => $body:expr) => {
        match $scenario {
            Scenario::ShiftInMean($m) => $body,
            Scenario::Qam($m) => $body,
        }
    };
}

impl Scenario {
    pub fn num_hypotheses(&self) -> usize {
        with_model!(self, m => m.num_hypotheses())
    }

    pub fn priors(&self) -> Vec<f64> {
        with_model!(self, m => m.hypotheses().map(|h| m.prior(h)).collect())
    }
}

/// A validated configuration together with its model and provenance.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub kind: ScenarioKind,
    pub scenario: Scenario,
    pub alpha_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub config_sha256: String,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let scenario = match config.scenario {
            ScenarioKind::ShiftInMean => {
                config.quadrature.validate()?;
                Scenario::ShiftInMean(ShiftInMean::new(config.shift_in_mean.clone(), config.quadrature)?)
            }
            ScenarioKind::Qam => Scenario::Qam(Qam::new(config.qam.clone())?),
        };
        let num = scenario.num_hypotheses();
        let (default_alpha, default_beta) = match config.scenario {
            ScenarioKind::ShiftInMean => (Levels::All(0.05), Levels::Each(vec![0.2, 0.15, 0.1])),
            ScenarioKind::Qam => (Levels::All(0.01), Levels::All(0.01)),
        };
        let alpha_bar = config
            .levels
            .alpha_bar
            .as_ref()
            .unwrap_or(&default_alpha)
            .expand("alpha_bar", num)?;
        let beta_bar = config
            .levels
            .beta_bar
            .as_ref()
            .unwrap_or(&default_beta)
            .expand("beta_bar", num)?;
        let config_sha256 = hex::encode(Sha256::digest(config.to_toml().as_bytes()));
        let exp = Experiment {
            kind: config.scenario,
            scenario,
            alpha_bar,
            beta_bar,
            config_sha256,
            config,
        };
        exp.design_config().validate(num)?;
        exp.simulation_config().validate()?;
        exp.config.policy_map.validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(ExperimentConfig::load(path)?)
    }

    pub fn n_max(&self) -> usize {
        self.config.simulation.n_max.unwrap_or(match self.kind {
            ScenarioKind::ShiftInMean => 10_000,
            ScenarioKind::Qam => 100_000,
        })
    }

    pub fn design_config(&self) -> DesignConfig {
        let d = &self.config.design;
        let initial = match (&d.initial_lambda_det, &d.initial_lambda_est) {
            (Some(det), Some(est)) => Some(CostCoefficients {
                lambda_det: det.clone(),
                lambda_est: est.clone(),
            }),
            _ => None,
        };
        DesignConfig {
            alpha_bar: self.alpha_bar.clone(),
            beta_bar: self.beta_bar.clone(),
            tol_det: d.tol_det,
            tol_est: d.tol_est,
            epsilon: d.epsilon,
            runs_per_iter: d.runs_per_iter,
            max_iters: d.max_iters,
            step_size: d.step_size,
            max_relative_step: d.max_relative_step,
            warm_start_iters: d.warm_start_iters,
            precondition: d.precondition,
            n_max: self.n_max(),
            stratify_by_hypothesis: self.config.simulation.stratify_by_hypothesis,
            initial,
        }
    }

    pub fn simulation_config(&self) -> SimulationConfig {
        SimulationConfig {
            runs: self.config.simulation.runs,
            master_seed: self.config.seed,
            n_max: self.n_max(),
            stratify_by_hypothesis: self.config.simulation.stratify_by_hypothesis,
        }
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            version: VERSION.to_string(),
            scenario: self.kind,
            config_sha256: self.config_sha256.clone(),
            seed: self.config.seed,
        }
    }

    /// `--out` if given, else the configured output directory, else `out`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    fn check_coefficients(&self, file: &CoefficientFile) -> Result<CostCoefficients> {
        if file.scenario != self.kind {
            return Err(Error::validation(
                "coefficients.scenario",
                format!("is {} but the config selects {}", file.scenario, self.kind),
            ));
        }
        let c = file.coefficients()?;
        if c.num_hypotheses() != self.scenario.num_hypotheses() {
            return Err(Error::validation("coefficients", "have the wrong number of hypotheses"));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub scenario: ScenarioKind,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    fn header(&self) -> String {
        format!(
            "# seqjde {} scenario={} config_sha256={} seed={}\n",
            self.version, self.scenario, self.config_sha256, self.seed
        )
    }
}

/// Designed coefficients with the provenance of the run that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientFile {
    pub version: String,
    pub scenario: ScenarioKind,
    pub config_sha256: String,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub lambda_det: Vec<f64>,
    pub lambda_est: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    pub beta_hat: Vec<f64>,
}

impl CoefficientFile {
    pub fn coefficients(&self) -> Result<CostCoefficients> {
        CostCoefficients::new(self.lambda_det.clone(), self.lambda_est.clone())
    }

    pub fn to_toml(&self) -> String {
        format!("# seqjde cost coefficients\n{}", toml::to_string(self).expect("coefficients serialize"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.message().to_string(),
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
    }
    fs::write(path, bytes).map_err(|source| io_err(path, source))
}

/// CSV writer that starts with the provenance comment line.
fn csv_writer(path: &Path, prov: &Provenance) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
    }
    let mut file = fs::File::create(path).map_err(|source| io_err(path, source))?;
    file.write_all(prov.header().as_bytes())
        .map_err(|source| io_err(path, source))?;
    Ok(csv::Writer::from_writer(file))
}

/// Reader for CSVs written here; skips the provenance comment.
pub fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|source| io_err(path, source))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

/// Exit status for a failed command: 2 for invalid input, 3 for a cap hit or
/// a failed design, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation { .. } | Error::Parse { .. } | Error::PriorTooHeavyTailed { .. } => 2,
        Error::CapHit { .. } | Error::NotConverged { .. } => 3,
        _ => 1,
    }
}

// ---------------------------------------------------------------- design

#[derive(Debug, Clone)]
pub struct DesignReport {
    pub outcome: DesignOutcome,
    pub file: CoefficientFile,
    pub coefficients_path: PathBuf,
    pub log_path: PathBuf,
}

/// Run the coefficient design and write `coefficients.toml` and
/// `design_log.csv` to `out_dir`. A non-converged design still writes its
/// best iterate with `converged = false`.
pub fn cmd_design(exp: &Experiment, out_dir: &Path) -> Result<DesignReport> {
    let cfg = exp.design_config();
    let outcome = with_model!(&exp.scenario, m => design(m, &cfg, exp.config.seed))?;
    let file = CoefficientFile {
        version: VERSION.to_string(),
        scenario: exp.kind,
        config_sha256: exp.config_sha256.clone(),
        seed: exp.config.seed,
        iterations: outcome.iterations,
        converged: outcome.converged,
        lambda_det: outcome.coefficients.lambda_det.clone(),
        lambda_est: outcome.coefficients.lambda_est.clone(),
        alpha_hat: outcome.estimate.alpha_hat.clone(),
        beta_hat: outcome.estimate.beta_hat.clone(),
    };
    let coefficients_path = out_dir.join("coefficients.toml");
    file.write(&coefficients_path)?;

    let log_path = out_dir.join("design_log.csv");
    let mut w = csv_writer(&log_path, &exp.provenance())?;
    let num = exp.scenario.num_hypotheses();
    let mut header = vec!["iteration".to_string(), "violation".to_string()];
    for name in ["lambda_det", "lambda_est", "alpha_hat", "beta_hat"] {
        header.extend((1..=num).map(|h| format!("{name}_{h}")));
    }
    w.write_record(&header)?;
    for rec in &outcome.history {
        let mut row = vec![rec.k.to_string(), rec.violation.to_string()];
        for v in rec
            .coefficients
            .lambda_det
            .iter()
            .chain(&rec.coefficients.lambda_est)
            .chain(&rec.alpha_hat)
            .chain(&rec.beta_hat)
        {
            row.push(v.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| io_err(&log_path, source))?;

    Ok(DesignReport {
        outcome,
        file,
        coefficients_path,
        log_path,
    })
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Ao,
    TwoStep,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Ao => "ao",
            PolicyKind::TwoStep => "two_step",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ao" => Ok(PolicyKind::Ao),
            "two_step" | "two-step" => Ok(PolicyKind::TwoStep),
            other => Err(format!("unknown policy '{other}' (expected ao or two_step)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub policy: String,
    pub hypothesis: usize,
    pub nominal_alpha: f64,
    pub alpha_hat: f64,
    pub alpha_se: f64,
    pub nominal_beta: f64,
    pub beta_hat: f64,
    pub beta_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLengthRow {
    pub policy: String,
    /// One-based hypothesis label, or `all` for the prior-weighted total.
    pub hypothesis: String,
    pub run_length: f64,
    pub run_length_se: f64,
}

/// Error and run-length tables for one or more policies.
#[derive(Debug, Clone)]
pub struct ResultsTable {
    pub provenance: Provenance,
    pub estimates: Vec<(PolicyKind, PerformanceEstimate)>,
    pub errors: Vec<ErrorRow>,
    pub run_lengths: Vec<RunLengthRow>,
}

impl ResultsTable {
    fn new(exp: &Experiment) -> Self {
        ResultsTable {
            provenance: exp.provenance(),
            estimates: Vec::new(),
            errors: Vec::new(),
            run_lengths: Vec::new(),
        }
    }

    fn push(&mut self, exp: &Experiment, policy: PolicyKind, est: PerformanceEstimate) {
        for m in 0..est.alpha_hat.len() {
            self.errors.push(ErrorRow {
                policy: policy.name().to_string(),
                hypothesis: m + 1,
                nominal_alpha: exp.alpha_bar[m],
                alpha_hat: est.alpha_hat[m],
                alpha_se: est.alpha_se[m],
                nominal_beta: exp.beta_bar[m],
                beta_hat: est.beta_hat[m],
                beta_se: est.beta_se[m],
            });
            self.run_lengths.push(RunLengthRow {
                policy: policy.name().to_string(),
                hypothesis: (m + 1).to_string(),
                run_length: est.rl_per_hyp[m],
                run_length_se: est.rl_se[m],
            });
        }
        self.run_lengths.push(RunLengthRow {
            policy: policy.name().to_string(),
            hypothesis: "all".to_string(),
            run_length: est.rl_overall,
            run_length_se: est.rl_overall_se,
        });
        self.estimates.push((policy, est));
    }

    pub fn estimate(&self, policy: PolicyKind) -> Option<&PerformanceEstimate> {
        self.estimates.iter().find(|(p, _)| *p == policy).map(|(_, e)| e)
    }

    /// Write the error table and the run-length table.
    pub fn write(&self, errors_path: &Path, run_lengths_path: &Path) -> Result<()> {
        let mut w = csv_writer(errors_path, &self.provenance)?;
        for row in &self.errors {
            w.serialize(row)?;
        }
        w.flush().map_err(|source| io_err(errors_path, source))?;
        let mut w = csv_writer(run_lengths_path, &self.provenance)?;
        for row in &self.run_lengths {
            w.serialize(row)?;
        }
        w.flush().map_err(|source| io_err(run_lengths_path, source))
    }
}

impl fmt::Display for ResultsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<9} {:>3} {:>8} {:>9} {:>8} {:>8} {:>9} {:>8}", "policy", "hyp", "alpha", "alpha_hat", "se", "beta", "beta_hat", "se")?;
        for r in &self.errors {
            writeln!(
                f,
                "{:<9} {:>3} {:>8.4} {:>9.4} {:>8.4} {:>8.4} {:>9.4} {:>8.4}",
                r.policy, r.hypothesis, r.nominal_alpha, r.alpha_hat, r.alpha_se, r.nominal_beta, r.beta_hat, r.beta_se
            )?;
        }
        writeln!(f)?;
        writeln!(f, "{:<9} {:>3} {:>10} {:>8}", "policy", "hyp", "E[tau]", "se")?;
        for r in &self.run_lengths {
            writeln!(f, "{:<9} {:>3} {:>10.3} {:>8.3}", r.policy, r.hypothesis, r.run_length, r.run_length_se)?;
        }
        Ok(())
    }
}

fn run_evaluation(exp: &Experiment, policy: PolicyKind, coeffs: Option<&CoefficientFile>) -> Result<PerformanceEstimate> {
    let sim = exp.simulation_config();
    let est = match policy {
        PolicyKind::Ao => {
            let file = coeffs.ok_or_else(|| Error::validation("--coeffs", "is required for the ao policy"))?;
            let rule = AoPolicy::new(exp.check_coefficients(file)?);
            with_model!(&exp.scenario, m => evaluate(m, &rule, &sim))?
        }
        PolicyKind::TwoStep => {
            let t = thresholds_for(exp.config.two_step.threshold_rule, &exp.alpha_bar)?;
            let rule = TwoStepPolicy::new(t);
            with_model!(&exp.scenario, m => evaluate(m, &rule, &sim))?
        }
    };
    est.check_cap()?;
    Ok(est)
}

/// Evaluate one policy and write `<policy>_errors.csv` and
/// `<policy>_run_lengths.csv`.
pub fn cmd_evaluate(
    exp: &Experiment,
    policy: PolicyKind,
    coeffs: Option<&CoefficientFile>,
    out_dir: &Path,
) -> Result<ResultsTable> {
    let est = run_evaluation(exp, policy, coeffs)?;
    let mut table = ResultsTable::new(exp);
    table.push(exp, policy, est);
    table.write(
        &out_dir.join(format!("{policy}_errors.csv")),
        &out_dir.join(format!("{policy}_run_lengths.csv")),
    )?;
    Ok(table)
}

/// Evaluate both policies on the same seed and write the merged tables
/// `compare_errors.csv` and `compare_run_lengths.csv`.
pub fn cmd_compare(exp: &Experiment, coeffs: &CoefficientFile, out_dir: &Path) -> Result<ResultsTable> {
    let mut table = ResultsTable::new(exp);
    for policy in [PolicyKind::TwoStep, PolicyKind::Ao] {
        let est = run_evaluation(exp, policy, Some(coeffs))?;
        table.push(exp, policy, est);
    }
    table.write(&out_dir.join("compare_errors.csv"), &out_dir.join("compare_run_lengths.csv"))?;
    Ok(table)
}

// ---------------------------------------------------------------- policy map

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Continue,
    Stop(HypothesisId),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Continue => f.write_str("continue"),
            Action::Stop(m) => write!(f, "stop_decide_{}", m.label()),
        }
    }
}

/// AO actions over a grid of `(n, xbar)`.
#[derive(Debug, Clone)]
pub struct PolicyMap {
    pub n_values: Vec<usize>,
    pub x_values: Vec<f64>,
    /// `actions[i][j]` is the action at `n_values[i]`, `x_values[j]`.
    pub actions: Vec<Vec<Action>>,
}

impl PolicyMap {
    pub fn compute(model: &ShiftInMean, coeffs: &CostCoefficients, grid: &PolicyMapGrid) -> Result<Self> {
        grid.validate()?;
        let x_values = grid.x_values();
        let n_values: Vec<usize> = (grid.n_min..=grid.n_max).collect();
        let log_prior = model.log_priors();
        let mut summary = PosteriorSummary::with_hypotheses(model.num_hypotheses());
        let mut actions = Vec::with_capacity(n_values.len());
        for &n in &n_values {
            let mut row = Vec::with_capacity(x_values.len());
            for &x in &x_values {
                summarize_into(model, &ShiftStatistic::new(n, x), &log_prior, &mut summary)?;
                let g = cost_g(&summary, coeffs);
                row.push(if ao_should_stop(g, n) {
                    Action::Stop(decide(&summary, coeffs))
                } else {
                    Action::Continue
                });
            }
            actions.push(row);
        }
        Ok(PolicyMap { n_values, x_values, actions })
    }

    /// Whether the stop regions of `a` and `b` touch at row `i` with no
    /// continue region between them.
    fn adjacent(&self, i: usize, a: HypothesisId, b: HypothesisId) -> bool {
        let row = &self.actions[i];
        row.windows(2).any(|w| {
            (w[0] == Action::Stop(a) && w[1] == Action::Stop(b)) || (w[0] == Action::Stop(b) && w[1] == Action::Stop(a))
        })
    }

    /// Smallest grid `n` from which on the continue corridor between the
    /// stop regions of `a` and `b` stays closed; `None` if still open at the
    /// last row.
    pub fn corridor_closure(&self, a: HypothesisId, b: HypothesisId) -> Option<usize> {
        let mut closure = None;
        for i in (0..self.n_values.len()).rev() {
            if self.adjacent(i, a, b) {
                closure = Some(self.n_values[i]);
            } else {
                break;
            }
        }
        closure
    }

    pub fn write_csv(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let mut w = csv_writer(path, prov)?;
        w.write_record(["n", "xbar", "action"])?;
        for (i, &n) in self.n_values.iter().enumerate() {
            for (j, &x) in self.x_values.iter().enumerate() {
                w.write_record([n.to_string(), format!("{x:.6}"), self.actions[i][j].to_string()])?;
            }
        }
        w.flush().map_err(|source| io_err(path, source))
    }
}

/// Compute the AO policy map over the configured grid and write
/// `policy_map.csv`. Shift-in-mean only.
pub fn cmd_policy_map(exp: &Experiment, coeffs: &CoefficientFile, out_dir: &Path) -> Result<PolicyMap> {
    let Scenario::ShiftInMean(model) = &exp.scenario else {
        return Err(Error::validation(
            "scenario",
            "has no one-dimensional statistic; policy-map needs shift_in_mean",
        ));
    };
    let c = exp.check_coefficients(coeffs)?;
    let map = PolicyMap::compute(model, &c, &exp.config.policy_map)?;
    map.write_csv(&out_dir.join("policy_map.csv"), &exp.provenance())?;
    Ok(map)
}

// ---------------------------------------------------------------- diagnostics

/// Long-run behaviour along one simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotCheck {
    pub n: usize,
    /// Posterior probability of the true hypothesis at `n`.
    pub posterior_true: f64,
    /// `n * Tr(Cov)` over `Tr(I^-1)`; tends to 1.
    pub variance_ratio: f64,
    /// `n * g_bar` over its limit `G`; tends to 1.
    pub cost_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisDiagnostics {
    pub theta: Param,
    pub fisher_trace_inv: f64,
    /// `lambda_bar_est[m] * Tr(I^-1)`.
    pub cost_limit: f64,
    pub spot_check: SpotCheck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub scenario: ScenarioKind,
    pub hypotheses: Vec<HypothesisDiagnostics>,
    /// `kl[m][k] = KL(p_m(.; theta_m) || p_k(.; theta_k))`.
    pub kl: Vec<Vec<f64>>,
}

pub const SPOT_CHECK_SAMPLES: usize = 2000;

fn spot_check<S: ScenarioModel>(
    model: &S,
    coeffs: &CostCoefficients,
    m: HypothesisId,
    theta: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<SpotCheck> {
    let n = SPOT_CHECK_SAMPLES;
    let xs: Vec<S::Observation> = (0..n).map(|_| model.sample_observation(m, theta, rng)).collect();
    let summary = summarize(model, &model.statistic_from(&xs))?;
    let fisher = model.fisher_info_trace_inv(m, theta);
    let g_bar = cost_g(&summary, coeffs) * coeffs.c_bar();
    Ok(SpotCheck {
        n,
        posterior_true: summary.hyp_post[m.index()],
        variance_ratio: n as f64 * summary.post_var_trace[m.index()] / fisher,
        cost_ratio: n as f64 * g_bar / normalized_cost_limit(model, m, theta, coeffs),
    })
}

fn diagnostics_for<S: ScenarioModel>(model: &S, coeffs: &CostCoefficients, seed: u64) -> Result<(Vec<HypothesisDiagnostics>, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas: Vec<Param> = model.hypotheses().map(|m| model.sample_param(m, &mut rng)).collect();
    let kl = model
        .hypotheses()
        .map(|m| {
            model
                .hypotheses()
                .map(|k| model.kl_divergence(m, &thetas[m.index()], k, &thetas[k.index()]))
                .collect()
        })
        .collect();
    let mut hyps = Vec::new();
    for m in model.hypotheses() {
        let theta = &thetas[m.index()];
        hyps.push(HypothesisDiagnostics {
            theta: theta.clone(),
            fisher_trace_inv: model.fisher_info_trace_inv(m, theta),
            cost_limit: normalized_cost_limit(model, m, theta, coeffs),
            spot_check: spot_check(model, coeffs, m, theta, &mut rng)?,
        });
    }
    Ok((hyps, kl))
}

/// Fisher information, KL tables, cost limits, and convergence spot checks
/// at parameters drawn from the prior. Without a coefficient file the
/// design's starting coefficients are used.
pub fn cmd_diagnostics(exp: &Experiment, coeffs: Option<&CoefficientFile>) -> Result<DiagnosticsReport> {
    let c = match coeffs {
        Some(file) => exp.check_coefficients(file)?,
        None => exp.design_config().initial_coefficients(),
    };
    let c = CostCoefficients {
        lambda_det: c.lambda_det.iter().map(|v| v.max(EPSILON)).collect(),
        lambda_est: c.lambda_est.iter().map(|v| v.max(EPSILON)).collect(),
    };
    let (hypotheses, kl) = with_model!(&exp.scenario, m => diagnostics_for(m, &c, exp.config.seed))?;
    Ok(DiagnosticsReport {
        scenario: exp.kind,
        hypotheses,
        kl,
    })
}

impl fmt::Display for DiagnosticsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {}", self.scenario)?;
        writeln!(
            f,
            "{:>4} {:>12} {:>12} {:>12} {:>10} {:>10} {:>10}",
            "hyp", "theta", "Tr(I^-1)", "G", "P(H|x)", "n*var", "n*g/G"
        )?;
        for (i, h) in self.hypotheses.iter().enumerate() {
            writeln!(
                f,
                "{:>4} {:>12.5} {:>12.5} {:>12.5e} {:>10.6} {:>10.4} {:>10.4}",
                format!("H{}", i + 1),
                h.theta[0],
                h.fisher_trace_inv,
                h.cost_limit,
                h.spot_check.posterior_true,
                h.spot_check.variance_ratio,
                h.spot_check.cost_ratio
            )?;
        }
        writeln!(f, "spot checks at n = {SPOT_CHECK_SAMPLES}")?;
        writeln!(f)?;
        writeln!(f, "KL(row || column):")?;
        for row in &self.kl {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>10.4}")).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(text: &str) -> Result<Experiment> {
        Experiment::new(ExperimentConfig::from_toml(text, "test.toml")?)
    }

    #[test]
    fn defaults_and_scalar_levels() {
        let e = exp("scenario = \"qam\"\n[levels]\nalpha_bar = 0.02\n").unwrap();
        assert_eq!(e.alpha_bar, vec![0.02; 16]);
        assert_eq!(e.beta_bar, vec![0.01; 16]);
        assert_eq!(e.n_max(), 100_000);
        let e = exp("").unwrap();
        assert_eq!(e.kind, ScenarioKind::ShiftInMean);
        assert_eq!(e.beta_bar, vec![0.2, 0.15, 0.1]);
        assert_eq!(e.n_max(), 10_000);
    }

    #[test]
    fn field_level_validation_messages() {
        let err = exp("[levels]\nalpha_bar = [1.5, 0.05, 0.05]\n").unwrap_err();
        assert_eq!(err.to_string(), "alpha_bar must lie in (0,1)");
        assert_eq!(exit_code(&err), 2);
        let err = exp("[levels]\nalpha_bar = [0.05, 0.05]\n").unwrap_err();
        assert!(err.to_string().starts_with("alpha_bar has 2 entries"));
        let err = exp("[simulation]\nruns = 0\n").unwrap_err();
        assert_eq!(err.to_string(), "simulation.runs must be at least 1");
        let err = exp("[shift_in_mean]\nsigma2 = -1.0\n").unwrap_err();
        assert_eq!(err.to_string(), "shift_in_mean.sigma2 must be positive");
        let err = exp("[design]\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = exp("seed = 1\n").unwrap();
        let b = exp("seed = 1\n").unwrap();
        let c = exp("seed = 2\n").unwrap();
        assert_eq!(a.config_sha256, b.config_sha256);
        assert_ne!(a.config_sha256, c.config_sha256);
        assert_eq!(a.config_sha256.len(), 64);
    }

    #[test]
    fn policy_names() {
        assert_eq!("ao".parse::<PolicyKind>().unwrap(), PolicyKind::Ao);
        assert_eq!("two-step".parse::<PolicyKind>().unwrap(), PolicyKind::TwoStep);
        assert!("msprt".parse::<PolicyKind>().is_err());
        assert_eq!(Action::Stop(HypothesisId::new(2)).to_string(), "stop_decide_3");
    }

    #[test]
    fn grid_spacing_is_exact() {
        let xs = PolicyMapGrid::default().x_values();
        assert_eq!(xs.len(), 601);
        assert_eq!(xs[0], -6.0);
        assert!((xs[600] - 6.0).abs() < 1e-12);
        assert!((xs[300]).abs() < 1e-12);
    }

    #[test]
    fn corridor_closure_on_a_synthetic_map() {
        let (h1, h2) = (HypothesisId::new(0), HypothesisId::new(1));
        let c = Action::Continue;
        let rows = vec![
            vec![c, c, c, c],
            vec![Action::Stop(h1), c, Action::Stop(h2), c],
            vec![Action::Stop(h1), Action::Stop(h2), c, c],
            vec![Action::Stop(h1), c, Action::Stop(h2), c],
            vec![Action::Stop(h1), Action::Stop(h2), Action::Stop(h2), c],
            vec![Action::Stop(h1), Action::Stop(h1), Action::Stop(h2), c],
        ];
        let map = PolicyMap {
            n_values: (10..16).collect(),
            x_values: vec![0.0, 1.0, 2.0, 3.0],
            actions: rows,
        };
        assert_eq!(map.corridor_closure(h1, h2), Some(14));
        assert_eq!(map.corridor_closure(h2, h1), Some(14));
        assert_eq!(map.corridor_closure(h2, HypothesisId::new(2)), None);
    }

    #[test]
    fn policy_map_rejects_qam() {
        let e = exp("scenario = \"qam\"\n").unwrap();
        let file = CoefficientFile {
            version: VERSION.into(),
            scenario: ScenarioKind::Qam,
            config_sha256: String::new(),
            seed: 0,
            iterations: 0,
            converged: false,
            lambda_det: vec![1.0; 16],
            lambda_est: vec![1.0; 16],
            alpha_hat: vec![],
            beta_hat: vec![],
        };
        let err = cmd_policy_map(&e, &file, Path::new("/nonexistent")).unwrap_err();
        assert!(err.to_string().contains("one-dimensional"));
    }
}
