//! Experiment configs, orchestration and CSV/JSON emission behind the
//! `ntk-limits` binary.
//!
//! A run is described by one JSON document. The effective config (defaults
//! filled in, flag overrides applied) is written next to the outputs, and
//! re-running it reproduces every CSV byte for byte.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dcnn::{
    border_profile, checkerboard_profile, ldlr_bound_check, ldlr_ntk, checkerboard_order_check, DcnnSpec,
    InputSampler, LrMode, Parametrization,
};
use crate::error::{Error, Result};
use crate::fc_kernel::{rho_grid, FcArchitecture};
use crate::finwidth::{
    bn_rayleigh_check, constant_rayleigh, ln_equivalence_check, mc_sweep, FiniteNet, LnConfig,
    McConfig, NormLayer, OutputIndex, KINK_CONVENTION, PRNG_VERSION,
};
use crate::netgraph::InputField;
use crate::nonlin::{check_beta, Nonlinearity, NonlinearitySpec, Normalization, Shape};
use crate::spectra::{SpectrumPreset, SpectrumReport};

pub const TOOL: &str = "ntk-limits";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit status for a run whose numbers were produced but a checked claim failed.
pub const EXIT_BOUND_FAILURE: i32 = 4;

/// Process exit code for an error: 2 for bad input, 3 for numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) | Error::Degenerate(_) => 3,
        _ => 2,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Regime,
    Dual,
    FcProfile,
    Dcnn,
    Border,
    Spectrum,
    Finwidth,
    BnCheck,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Regime => "regime",
            CommandKind::Dual => "dual",
            CommandKind::FcProfile => "fc-profile",
            CommandKind::Dcnn => "dcnn",
            CommandKind::Border => "border",
            CommandKind::Spectrum => "spectrum",
            CommandKind::Finwidth => "finwidth",
            CommandKind::BnCheck => "bn-check",
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_verbosity() -> u8 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub format: Format,
    /// Base seed of every random draw in the run.
    #[serde(default)]
    pub seed: u64,
    /// Worker cap; `None` uses every core. Results do not depend on it.
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default = "default_verbosity")]
    pub verbosity: u8,
    pub experiment: Experiment,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            out: default_out(),
            format: Format::Csv,
            seed: 0,
            jobs: None,
            verbosity: default_verbosity(),
            experiment,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Experiment {
    Regime(RegimeParams),
    Dual(DualParams),
    FcProfile(FcProfileParams),
    Dcnn(DcnnParams),
    Border(BorderParams),
    Spectrum(SpectrumParams),
    Finwidth(FinwidthParams),
    BnCheck(BnCheckParams),
}

impl Experiment {
    pub fn default_for(kind: CommandKind) -> Self {
        match kind {
            CommandKind::Regime => Experiment::Regime(Default::default()),
            CommandKind::Dual => Experiment::Dual(Default::default()),
            CommandKind::FcProfile => Experiment::FcProfile(Default::default()),
            CommandKind::Dcnn => Experiment::Dcnn(Default::default()),
            CommandKind::Border => Experiment::Border(Default::default()),
            CommandKind::Spectrum => Experiment::Spectrum(Default::default()),
            CommandKind::Finwidth => Experiment::Finwidth(Default::default()),
            CommandKind::BnCheck => Experiment::BnCheck(Default::default()),
        }
    }

    pub fn kind(&self) -> CommandKind {
        match self {
            Experiment::Regime(_) => CommandKind::Regime,
            Experiment::Dual(_) => CommandKind::Dual,
            Experiment::FcProfile(_) => CommandKind::FcProfile,
            Experiment::Dcnn(_) => CommandKind::Dcnn,
            Experiment::Border(_) => CommandKind::Border,
            Experiment::Spectrum(_) => CommandKind::Spectrum,
            Experiment::Finwidth(_) => CommandKind::Finwidth,
            Experiment::BnCheck(_) => CommandKind::BnCheck,
        }
    }
}

fn relu_spec(normalization: Normalization) -> NonlinearitySpec {
    NonlinearitySpec {
        shape: Shape::Relu,
        normalization,
        quadrature: Default::default(),
    }
}

/// Standardized tanh: bounded, so deep finite networks stay well scaled.
pub fn tanh_spec() -> NonlinearitySpec {
    NonlinearitySpec {
        shape: Shape::Tanh,
        normalization: Normalization::Standardized,
        quadrature: Default::default(),
    }
}

/// A smooth standardized cubic; batch norm with ReLU tends to hit dead channels.
pub fn smooth_spec() -> NonlinearitySpec {
    NonlinearitySpec {
        shape: Shape::HermiteSeries {
            coefficients: vec![0.1, 0.8, 0.4, 0.2],
        },
        normalization: Normalization::Standardized,
        quadrature: Default::default(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeParams {
    pub sigma: NonlinearitySpec,
    pub beta: f64,
    /// Sensitivity table `r(β)`.
    pub beta_grid: Vec<f64>,
}

impl Default for RegimeParams {
    fn default() -> Self {
        Self {
            sigma: relu_spec(Normalization::Standardized),
            beta: 0.1,
            beta_grid: (0..=20).map(|i| i as f64 / 20.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualParams {
    pub sigma: NonlinearitySpec,
    pub points: usize,
    /// Also evaluate both duals by direct quadrature.
    pub quadrature: bool,
}

impl Default for DualParams {
    fn default() -> Self {
        Self {
            sigma: relu_spec(Normalization::Standardized),
            points: 201,
            quadrature: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveParams {
    pub label: String,
    pub sigma: NonlinearitySpec,
    pub beta: f64,
}

/// Empirical curve of a finite network with batch norm after the last
/// nonlinearity, over a batch spread evenly on the unit circle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnCurveParams {
    pub label: String,
    pub sigma: NonlinearitySpec,
    pub beta: f64,
    pub width: usize,
    pub batch: usize,
}

impl Default for BnCurveParams {
    fn default() -> Self {
        Self {
            label: "batch-norm".into(),
            sigma: tanh_spec(),
            beta: 0.1,
            width: 256,
            batch: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcProfileParams {
    pub depth: usize,
    pub points: usize,
    pub curves: Vec<CurveParams>,
    pub batch_norm: Option<BnCurveParams>,
}

impl Default for FcProfileParams {
    fn default() -> Self {
        let curve = |label: &str, n, beta| CurveParams {
            label: label.into(),
            sigma: relu_spec(n),
            beta,
        };
        Self {
            depth: 6,
            points: 201,
            curves: vec![
                curve("relu-b0.5", Normalization::Standardized, 0.5),
                curve("relu-b0.1", Normalization::Standardized, 0.1),
                curve("normalized-relu", Normalization::Normalized, 0.1),
            ],
            batch_norm: Some(BnCurveParams::default()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundCheck {
    None,
    /// Sandwich with the constant fitted on depths 1..=4, checked on 5..=8.
    Order,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcnnParams {
    pub sigma: NonlinearitySpec,
    pub beta: f64,
    pub spec: DcnnSpec,
    pub lr_mode: Option<LrMode>,
    pub bounds: BoundCheck,
}

impl Default for DcnnParams {
    fn default() -> Self {
        Self {
            sigma: relu_spec(Normalization::Standardized),
            beta: 0.5,
            spec: DcnnSpec::new(vec![2], vec![2], 3).expect("valid default"),
            lr_mode: None,
            bounds: BoundCheck::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BorderParams {
    pub sigma: NonlinearitySpec,
    pub beta: f64,
    pub depth: usize,
    pub outputs: i64,
    pub parametrization: Parametrization,
}

impl Default for BorderParams {
    fn default() -> Self {
        Self {
            sigma: relu_spec(Normalization::Standardized),
            beta: 0.5,
            depth: 4,
            outputs: 16,
            parametrization: Parametrization::Standard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumRun {
    pub label: String,
    pub sigma: NonlinearitySpec,
    pub beta: f64,
    #[serde(default)]
    pub lr_mode: Option<LrMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumParams {
    pub preset: SpectrumPreset,
    pub runs: Vec<SpectrumRun>,
    /// Input draws use seeds `seed..seed + seeds`.
    pub seeds: usize,
    /// Eigenvectors per spectrum in the bucket table.
    pub top: usize,
    /// Require the first run's top eigenvector to hold strictly more
    /// high-valuation energy than the second run's.
    pub check_separation: bool,
}

impl Default for SpectrumParams {
    fn default() -> Self {
        Self {
            preset: SpectrumPreset::default(),
            runs: vec![
                SpectrumRun {
                    label: "order".into(),
                    sigma: relu_spec(Normalization::Standardized),
                    beta: 0.5,
                    lr_mode: None,
                },
                SpectrumRun {
                    label: "chaos".into(),
                    sigma: relu_spec(Normalization::Normalized),
                    beta: 0.1,
                    lr_mode: None,
                },
            ],
            seeds: 5,
            top: 4,
            check_separation: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinwidthMode {
    /// Empirical NTK against the limit across widths and seeds.
    MonteCarlo,
    /// Layer-norm variants against their claimed limits.
    LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinwidthParams {
    pub mode: FinwidthMode,
    pub sigma: NonlinearitySpec,
    pub beta: f64,
    pub depth: usize,
    pub n0: usize,
    pub widths: Vec<usize>,
    pub seeds: usize,
    pub rhos: Vec<f64>,
}

impl Default for FinwidthParams {
    fn default() -> Self {
        Self {
            mode: FinwidthMode::MonteCarlo,
            sigma: relu_spec(Normalization::Standardized),
            beta: 0.1,
            depth: 3,
            n0: 4,
            widths: vec![64, 256, 1024],
            seeds: 10,
            rhos: vec![-0.5, 0.0, 0.5, 0.9],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnCheckParams {
    pub sigma: NonlinearitySpec,
    pub beta: f64,
    pub depth: usize,
    pub n0: usize,
    pub width: usize,
    pub batch: usize,
    pub seeds: usize,
    pub tolerance: f64,
}

impl Default for BnCheckParams {
    fn default() -> Self {
        Self {
            sigma: smooth_spec(),
            beta: 0.1,
            depth: 3,
            n0: 4,
            width: 64,
            batch: 8,
            seeds: 10,
            tolerance: 1e-8,
        }
    }
}

fn need(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}

fn beta_ok(beta: f64) -> Result<()> {
    check_beta(beta).map_err(|_| Error::Config(format!("beta {beta} outside [0, 1]")))
}

/// Range checks done before any computation starts.
pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    need(cfg.jobs != Some(0), "jobs must be positive")?;
    match &cfg.experiment {
        Experiment::Regime(p) => {
            beta_ok(p.beta)?;
            p.beta_grid.iter().try_for_each(|b| beta_ok(*b))
        }
        Experiment::Dual(p) => need(p.points >= 2, "dual needs at least 2 points"),
        Experiment::FcProfile(p) => {
            need(p.depth >= 1, "depth must be positive")?;
            need(p.points >= 2, "profile needs at least 2 points")?;
            p.curves.iter().try_for_each(|c| beta_ok(c.beta))?;
            if let Some(bn) = &p.batch_norm {
                beta_ok(bn.beta)?;
                need(p.depth >= 2, "the batch-norm curve needs depth ≥ 2")?;
                need(bn.width >= 1 && bn.batch >= 2, "batch-norm curve needs width ≥ 1 and batch ≥ 2")?;
            }
            Ok(())
        }
        Experiment::Dcnn(p) => {
            beta_ok(p.beta)?;
            p.spec.validate()
        }
        Experiment::Border(p) => {
            beta_ok(p.beta)?;
            need(p.depth >= 1 && p.outputs >= 1, "border needs depth ≥ 1 and outputs ≥ 1")
        }
        Experiment::Spectrum(p) => {
            p.preset.spec.validate()?;
            p.runs.iter().try_for_each(|r| beta_ok(r.beta))?;
            need(!p.runs.is_empty() && p.seeds >= 1, "spectrum needs runs and seeds")?;
            need(
                !p.check_separation || p.runs.len() >= 2,
                "separation check needs two runs",
            )
        }
        Experiment::Finwidth(p) => {
            beta_ok(p.beta)?;
            need(p.depth >= 1 && p.n0 >= 2, "finwidth needs depth ≥ 1 and n0 ≥ 2")?;
            need(
                !p.widths.is_empty() && p.widths.iter().all(|w| *w >= 1) && p.seeds >= 1,
                "finwidth needs positive widths and seeds",
            )?;
            need(p.rhos.iter().all(|r| (-1.0..=1.0).contains(r)), "rhos must lie in [-1, 1]")
        }
        Experiment::BnCheck(p) => {
            beta_ok(p.beta)?;
            need(p.depth >= 2, "bn-check needs depth ≥ 2")?;
            need(p.batch >= 2 && p.width >= 1 && p.seeds >= 1 && p.n0 >= 1, "bn-check sizes must be positive")
        }
    }
}

/// One value of an output table.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Bool(bool),
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(x) => format!("{x:.16e}"),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(x) => serde_json::Number::from_f64(*x).map_or(Value::Null, Value::Number),
            Cell::Int(i) => json!(i),
            Cell::Text(s) => json!(s),
            Cell::Bool(b) => json!(b),
            Cell::Empty => Value::Null,
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<i64> for Cell {
    fn from(x: i64) -> Self {
        Cell::Int(x)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Bool(x)
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.into())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::Text(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Num)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(name: &str, columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "{}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record(&self.columns).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv)).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("utf-8 cells"))
    }

    fn to_json(&self) -> Value {
        json!({
            "columns": self.columns,
            "rows": self.rows.iter().map(|r| r.iter().map(Cell::json).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}

/// Everything a command produced, before it is written anywhere.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub tables: Vec<Table>,
    /// Structured exports that do not fit a table; always JSON.
    pub documents: Vec<(String, Value)>,
    pub summary: Vec<String>,
    /// Checked claims that did not hold.
    pub failures: Vec<String>,
    pub notes: Vec<String>,
}

impl RunOutput {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            EXIT_BOUND_FAILURE
        }
    }
}

/// Validate, then run on a pool capped at `cfg.jobs` workers.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    validate(cfg)?;
    match cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| dispatch(cfg)),
        None => dispatch(cfg),
    }
}

fn dispatch(cfg: &ExperimentConfig) -> Result<RunOutput> {
    match &cfg.experiment {
        Experiment::Regime(p) => cmd_regime(p),
        Experiment::Dual(p) => cmd_dual(p),
        Experiment::FcProfile(p) => cmd_fc_profile(p, cfg.seed),
        Experiment::Dcnn(p) => cmd_dcnn(p),
        Experiment::Border(p) => cmd_border(p),
        Experiment::Spectrum(p) => cmd_spectrum(p, cfg.seed),
        Experiment::Finwidth(p) => cmd_finwidth(p, cfg.seed),
        Experiment::BnCheck(p) => cmd_bn_check(p, cfg.seed),
    }
}

fn metadata(cfg: &ExperimentConfig, out: &RunOutput, name: &str) -> Value {
    json!({
        "tool": TOOL,
        "version": VERSION,
        "command": cfg.experiment.kind().name(),
        "output": name,
        "prng": PRNG_VERSION,
        "kink_convention": KINK_CONVENTION,
        "notes": out.notes,
        "config": cfg,
    })
}

/// Write every table (CSV plus a `.meta.json` sidecar, or one JSON file per
/// table), the JSON documents and the effective `config.json` under `cfg.out`.
pub fn write_outputs(cfg: &ExperimentConfig, out: &RunOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&cfg.out)?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let path = cfg.out.join(name);
        fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    let pretty = |v: &Value| serde_json::to_string_pretty(v).expect("json value") + "\n";
    for t in &out.tables {
        let meta = metadata(cfg, out, &t.name);
        match cfg.format {
            Format::Csv => {
                put(format!("{}.csv", t.name), t.to_csv()?)?;
                put(format!("{}.meta.json", t.name), pretty(&meta))?;
            }
            Format::Json => {
                let mut doc = t.to_json();
                doc["meta"] = meta;
                put(format!("{}.json", t.name), pretty(&doc))?;
            }
        }
    }
    for (name, value) in &out.documents {
        let doc = json!({ "meta": metadata(cfg, out, name), "data": value });
        put(format!("{name}.json"), pretty(&doc))?;
    }
    put("config.json".into(), cfg.to_json() + "\n")?;
    Ok(written)
}

fn cmd_regime(p: &RegimeParams) -> Result<RunOutput> {
    let sigma = p.sigma.build()?;
    let rep = sigma.classify(p.beta)?;
    let mut out = RunOutput::default();
    let mut t = Table::new("regime", ["beta", "r", "regime", "fixed_point", "notes"]);
    t.push(vec![
        rep.beta.into(),
        rep.r.into(),
        rep.regime.to_string().into(),
        rep.fixed_point.into(),
        rep.notes.join("; ").into(),
    ]);
    out.summary.push(format!(
        "regime: {} (r = {:.6}, fixed point = {})",
        rep.regime,
        rep.r,
        rep.fixed_point.map_or("none".into(), |a| format!("{a:.6}"))
    ));
    out.tables.push(t);
    let mut s = Table::new("regime_sensitivity", ["beta", "r", "regime"]);
    for b in &p.beta_grid {
        let rep = sigma.classify(*b)?;
        s.push(vec![(*b).into(), rep.r.into(), rep.regime.to_string().into()]);
    }
    out.tables.push(s);
    Ok(out)
}

fn cmd_dual(p: &DualParams) -> Result<RunOutput> {
    let sigma = p.sigma.build()?;
    let mut cols = vec!["rho", "dual", "dual_derivative"];
    if p.quadrature {
        cols.extend(["dual_quadrature", "dual_derivative_quadrature"]);
    }
    let mut t = Table::new("dual", cols);
    let mut worst: f64 = 0.0;
    for rho in rho_grid(p.points) {
        let (d, dd) = (sigma.dual(rho)?, sigma.dual_derivative(rho)?);
        let mut row: Vec<Cell> = vec![rho.into(), d.into(), dd.into()];
        if p.quadrature {
            let (q, qd) = (sigma.dual_by_quadrature(rho)?, sigma.dual_derivative_by_quadrature(rho)?);
            worst = worst.max((q - d).abs()).max((qd - dd).abs());
            row.extend([q.into(), qd.into()]);
        }
        t.push(row);
    }
    let mut out = RunOutput::default();
    out.summary.push(format!("dual: {} points", p.points));
    if p.quadrature {
        out.summary.push(format!("largest closed form vs quadrature gap: {worst:.3e}"));
    }
    out.tables.push(t);
    Ok(out)
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Points `√2(cos θ_j, sin θ_j)` with `θ_j = 2πj/n`.
fn circle(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|j| {
            let t = 2.0 * PI * j as f64 / n as f64;
            vec![2f64.sqrt() * t.cos(), 2f64.sqrt() * t.sin()]
        })
        .collect()
}

/// Normalized empirical NTK between the first batch point and every other one.
fn bn_curve(bn: &BnCurveParams, depth: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut widths = vec![2];
    widths.extend(std::iter::repeat_n(bn.width, depth - 1));
    widths.push(1);
    let net = FiniteNet::fc(bn.sigma.build()?, bn.beta, widths, seed)?
        .with_norm(depth - 1, NormLayer::BnPost)?;
    let batch: Vec<InputField> = circle(bn.batch)
        .into_iter()
        .map(|x| InputField::new(2, vec![x]))
        .collect::<Result<_>>()?;
    let outputs: Vec<OutputIndex> = (0..bn.batch).map(|i| OutputIndex::new(i, 0, 0)).collect();
    let k = net.empirical_ntk(&batch, &outputs)?;
    let mut rows: Vec<(f64, f64, f64)> = (0..bn.batch)
        .map(|j| {
            let rho = (2.0 * PI * j as f64 / bn.batch as f64).cos();
            let v = k.get(0, j);
            (rho, v, v / (k.get(0, 0) * k.get(j, j)).sqrt())
        })
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok((
        rows.iter().map(|r| r.0).collect(),
        rows.iter().map(|r| r.1).collect(),
        rows.iter().map(|r| r.2).collect(),
    ))
}

fn cmd_fc_profile(p: &FcProfileParams, seed: u64) -> Result<RunOutput> {
    let grid = rho_grid(p.points);
    let mut out = RunOutput::default();
    let mut long = Table::new("fc_profile_curves", ["curve", "rho", "ntk_normalized"]);
    for c in &p.curves {
        let arch = FcArchitecture::new(c.sigma.build()?, c.beta, p.depth, 2)?;
        let prof = arch.profile(&grid)?;
        let mut cols = vec!["rho".to_string()];
        cols.extend((1..=p.depth).map(|l| format!("sigma_{l}")));
        cols.extend(["ntk".into(), "ntk_normalized".into()]);
        let mut t = Table::new(&format!("fc_profile_{}", file_label(&c.label)), cols);
        for (i, rho) in grid.iter().enumerate() {
            let mut row: Vec<Cell> = vec![(*rho).into()];
            row.extend(prof.sigma_layers.iter().map(|layer| Cell::Num(layer[i])));
            row.extend([prof.ntk[i].into(), prof.ntk_normalized[i].into()]);
            t.push(row);
            long.push(vec![c.label.as_str().into(), (*rho).into(), prof.ntk_normalized[i].into()]);
        }
        let min = prof.ntk_normalized.iter().copied().fold(f64::INFINITY, f64::min);
        out.summary.push(format!(
            "{}: r = {:.6}, min ϑ = {:.6}, ϑ(0) = {:.6}",
            c.label,
            arch.characteristic_value()?,
            min,
            arch.normalized_ntk(0.0)?
        ));
        out.tables.push(t);
    }
    if let Some(bn) = &p.batch_norm {
        let (rhos, ntk, norm) = bn_curve(bn, p.depth, seed)?;
        let mut t = Table::new(
            &format!("fc_profile_{}", file_label(&bn.label)),
            ["rho", "ntk", "ntk_normalized"],
        );
        for i in 0..rhos.len() {
            t.push(vec![rhos[i].into(), ntk[i].into(), norm[i].into()]);
            long.push(vec![bn.label.as_str().into(), rhos[i].into(), norm[i].into()]);
        }
        out.summary.push(format!(
            "{}: empirical, width {}, batch {} on the unit circle",
            bn.label, bn.width, bn.batch
        ));
        out.notes.push(format!(
            "{} is a finite-width empirical kernel with batch norm after the last nonlinearity; \
             it depends on the whole batch and on the seed",
            bn.label
        ));
        out.tables.push(t);
    }
    out.tables.push(long);
    Ok(out)
}

fn cmd_dcnn(p: &DcnnParams) -> Result<RunOutput> {
    let sigma = p.sigma.build()?;
    let prof = match p.lr_mode {
        None => checkerboard_profile(&sigma, p.beta, p.spec.depth)?,
        Some(mode) => ldlr_ntk(&sigma, p.beta, &p.spec, mode)?,
    };
    let mut out = RunOutput::default();
    let mut t = Table::new("checkerboard", ["v", "c_v", "ntk", "ntk_normalized"]);
    for v in 0..prof.ntk.len() {
        t.push(vec![
            v.into(),
            prof.c.get(v).copied().into(),
            prof.ntk[v].into(),
            prof.ntk_normalized.get(v).copied().into(),
        ]);
    }
    out.tables.push(t);
    out.summary.push(format!(
        "checkerboard: r = {:.6}, diagonal Θ = {:.12}{}",
        prof.r,
        prof.diagonal(),
        p.lr_mode.map_or(String::new(), |m| format!(", learning rates: {m:?}"))
    ));
    if p.bounds == BoundCheck::Order {
        let rep = match p.lr_mode {
            None => checkerboard_order_check(&sigma, p.beta, &[1, 2, 3, 4], &[5, 6, 7, 8])?,
            Some(_) => ldlr_bound_check(&sigma, p.beta, &p.spec, &(2..=12).collect::<Vec<_>>())?,
        };
        let mut b = Table::new("checkerboard_bounds", ["depth", "v", "value", "upper", "lower", "rate"]);
        for r in &rep.rows {
            b.push(vec![r.depth.into(), r.v.into(), r.value.into(), r.upper.into(), r.lower.into(), r.rate.into()]);
        }
        out.tables.push(b);
        out.summary.push(format!(
            "sandwich: C = {:.6}, upper violations {}, lower violations {}",
            rep.constant, rep.upper_violations, rep.lower_violations
        ));
        if !rep.passed() {
            out.failures.push("checkerboard sandwich bound violated".into());
        }
    }
    Ok(out)
}

/// Agreement required between the border recursion and its closed forms.
pub const BORDER_TOL: f64 = 1e-12;

fn cmd_border(p: &BorderParams) -> Result<RunOutput> {
    let sigma = p.sigma.build()?;
    let prof = border_profile(&sigma, p.beta, p.depth, p.parametrization, p.outputs)?;
    let label = match p.parametrization {
        Parametrization::GraphBased => "graph-based",
        Parametrization::Standard => "standard",
    };
    let mut out = RunOutput::default();
    let mut t = Table::new("border", ["position", "sigma_diag", "ntk_diag", "parametrization"]);
    for r in &prof.rows {
        t.push(vec![r.position.into(), r.sigma_diag.into(), r.ntk_diag.into(), label.into()]);
    }
    out.tables.push(t);
    let (lo, hi) = prof.rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        (a.min(r.ntk_diag), b.max(r.ntk_diag))
    });
    out.summary.push(format!("border ({label}): diagonal NTK spread {:.3e}", hi - lo));
    if let Some(cf) = &prof.closed_form {
        let mut c = Table::new(
            "border_closed_form",
            ["layer", "sigma_recursion", "sigma_closed", "ntk_recursion", "ntk_closed"],
        );
        for r in cf {
            c.push(vec![
                r.layer.into(),
                r.sigma_recursion.into(),
                r.sigma_closed.into(),
                r.ntk_recursion.into(),
                r.ntk_closed.into(),
            ]);
        }
        out.tables.push(c);
        let err = prof.max_closed_form_error.unwrap_or(0.0);
        out.summary.push(format!("closed forms: largest gap {err:.3e}"));
        if err > BORDER_TOL {
            out.failures.push(format!("border closed forms off by {err:.3e}"));
        }
    }
    Ok(out)
}

fn spectrum_document(label: &str, seed: u64, preset: &SpectrumPreset, rep: &SpectrumReport) -> Value {
    json!({
        "run": label,
        "seed": seed,
        "grid_shape": [preset.outputs],
        "index": rep.index.iter().zip(&rep.coords).map(|(ix, c)| json!({
            "input": ix.input,
            "position": ix.position,
            "coord": &c[..preset.spec.dim()],
        })).collect::<Vec<_>>(),
        "eigenvalues": rep.eigenvalues,
        "eigenvectors": rep.eigenvectors,
    })
}

fn cmd_spectrum(p: &SpectrumParams, seed: u64) -> Result<RunOutput> {
    let depth = p.preset.spec.depth;
    let mut out = RunOutput::default();
    let mut eig = Table::new("spectrum_eigenvalues", ["run", "seed", "k", "eigenvalue"]);
    let mut cols: Vec<String> = vec!["run".into(), "seed".into(), "k".into()];
    cols.extend((0..=depth).map(|b| format!("bucket_{b}")));
    let mut buckets = Table::new("spectrum_buckets", cols);
    let mut summary = Table::new(
        "spectrum_summary",
        ["run", "seed", "constant_rayleigh", "dominance_ratio", "high_valuation_energy"],
    );
    let mut sep = Table::new("spectrum_separation", ["seed", "first", "second", "separated"]);
    let sigmas: Vec<Nonlinearity> = p.runs.iter().map(|r| r.sigma.build()).collect::<Result<_>>()?;
    let mut docs = Vec::new();
    let mut separated = 0;
    for i in 0..p.seeds as u64 {
        let s = seed.wrapping_add(i);
        let mut highs = Vec::new();
        for (run, sigma) in p.runs.iter().zip(&sigmas) {
            let rep = p.preset.spectrum(sigma, run.beta, s, run.lr_mode)?;
            for (k, v) in rep.eigenvalues.iter().enumerate() {
                eig.push(vec![run.label.as_str().into(), s.into(), k.into(), (*v).into()]);
            }
            for (k, e) in rep.checkerboard_energy.iter().take(p.top).enumerate() {
                let mut row: Vec<Cell> = vec![run.label.as_str().into(), s.into(), k.into()];
                row.extend(e.iter().map(|x| Cell::Num(*x)));
                buckets.push(row);
            }
            let high = rep.high_valuation_energy(0);
            summary.push(vec![
                run.label.as_str().into(),
                s.into(),
                rep.constant_rayleigh.into(),
                rep.dominance_ratio().into(),
                high.into(),
            ]);
            highs.push(high.unwrap_or(0.0));
            docs.push(spectrum_document(&run.label, s, &p.preset, &rep));
        }
        if p.check_separation {
            let ok = highs[0] > highs[1];
            separated += ok as usize;
            sep.push(vec![s.into(), highs[0].into(), highs[1].into(), ok.into()]);
        }
    }
    out.tables.extend([eig, buckets, summary]);
    out.documents.push(("spectrum_eigenvectors".into(), json!(docs)));
    out.notes.push(
        "inputs are independent on-sphere draws per position and input; \
         high-valuation energy is the top eigenvector's share in buckets L-1 and L"
            .into(),
    );
    if p.check_separation {
        out.tables.push(sep);
        out.summary.push(format!(
            "{} vs {}: separated on {separated} of {} seeds",
            p.runs[0].label, p.runs[1].label, p.seeds
        ));
        if separated < p.seeds {
            out.failures.push("spectral separation failed on some seeds".into());
        }
    }
    Ok(out)
}

fn cmd_finwidth(p: &FinwidthParams, seed: u64) -> Result<RunOutput> {
    let sigma = p.sigma.build()?;
    let mut out = RunOutput::default();
    match p.mode {
        FinwidthMode::MonteCarlo => {
            let rep = mc_sweep(&McConfig {
                sigma,
                beta: p.beta,
                depth: p.depth,
                n0: p.n0,
                widths: p.widths.clone(),
                seeds: p.seeds,
                base_seed: seed,
                rhos: p.rhos.clone(),
            })?;
            let mut rows = Table::new(
                "finwidth_mc",
                ["width", "rho", "limit", "mean_abs_error", "sd_abs_error", "median_rel_error"],
            );
            for r in &rep.rows {
                rows.push(vec![
                    r.width.into(),
                    r.rho.into(),
                    r.limit.into(),
                    r.mean_abs_error.into(),
                    r.sd_abs_error.into(),
                    r.median_rel_error.into(),
                ]);
            }
            let mut by_width = Table::new("finwidth_mc_width", ["width", "mean_abs_error", "median_rel_error"]);
            for ((w, e), (_, m)) in rep.error_by_width.iter().zip(&rep.median_rel_by_width) {
                by_width.push(vec![(*w).into(), (*e).into(), (*m).into()]);
            }
            let mut rhos = vec![1.0];
            rhos.extend(&p.rhos);
            let mut cells = Table::new("finwidth_mc_cells", ["width", "seed", "rho", "value", "kink_hits"]);
            for c in &rep.cells {
                for (rho, v) in rhos.iter().zip(&c.values) {
                    cells.push(vec![c.width.into(), c.seed.into(), (*rho).into(), (*v).into(), c.kink_hits.into()]);
                }
            }
            out.tables.extend([rows, by_width, cells]);
            match &rep.slope {
                Some(f) => out.summary.push(format!("log-log slope of error against width: {:.4}", f.slope)),
                None => out.summary.push("slope: not enough widths".into()),
            }
        }
        FinwidthMode::LayerNorm => {
            let rep = ln_equivalence_check(&LnConfig {
                sigma,
                beta: p.beta,
                depth: p.depth,
                n0: p.n0,
                widths: p.widths.clone(),
                seeds: p.seeds,
                base_seed: seed,
                rhos: p.rhos.clone(),
            })?;
            let mut t = Table::new(
                "finwidth_ln",
                ["width", "post_vs_limit", "post_vs_normalized", "pre_vs_plain", "plain_vs_limit", "noise_floor"],
            );
            for r in &rep.rows {
                t.push(vec![
                    r.width.into(),
                    r.post_vs_limit.into(),
                    r.post_vs_normalized.into(),
                    r.pre_vs_plain.into(),
                    r.plain_vs_limit.into(),
                    r.noise_floor.into(),
                ]);
            }
            let mut lim = Table::new("finwidth_ln_limits", ["rho", "limit_normalized", "limit_plain"]);
            for i in 0..rep.rhos.len() {
                lim.push(vec![rep.rhos[i].into(), rep.limit_normalized[i].into(), rep.limit_plain[i].into()]);
            }
            out.tables.extend([t, lim]);
            out.summary.push(format!(
                "layer norm after σ: deviation shrinks with width: {}; before σ vs plain: {} noise floors",
                rep.post_deviation_shrinks(),
                rep.pre_noise_ratio().map_or("n/a".into(), |x| format!("{x:.2}"))
            ));
        }
    }
    Ok(out)
}

fn cmd_bn_check(p: &BnCheckParams, seed: u64) -> Result<RunOutput> {
    let sigma = p.sigma.build()?;
    let sampler = InputSampler { n0: p.n0, seed };
    let batch: Vec<InputField> = (0..p.batch as i64)
        .map(|i| InputField::new(p.n0, vec![sampler.sample(&[i, 0, 0])]))
        .collect::<Result<_>>()?;
    let mut widths = vec![p.n0];
    widths.extend(std::iter::repeat_n(p.width, p.depth - 1));
    widths.push(1);
    let b2 = p.beta * p.beta;
    let mut t = Table::new(
        "bn_check",
        ["seed", "batch_norm", "rayleigh", "n_beta_squared", "mean_entry", "beta_squared"],
    );
    let (mut literal, mut scaled, mut mean, mut control) = (0usize, 0usize, 0usize, 0usize);
    let mut worst_literal: f64 = 0.0;
    for k in 0..p.seeds as u64 {
        let s = seed.wrapping_add(k);
        let plain = FiniteNet::fc(sigma.clone(), p.beta, widths.clone(), s)?;
        let net = plain.clone().with_norm(p.depth - 1, NormLayer::BnPost)?;
        let rep = bn_rayleigh_check(&net, &batch)?;
        literal += ((rep.rayleigh - b2).abs() <= p.tolerance) as usize;
        worst_literal = worst_literal.max((rep.rayleigh - b2).abs());
        scaled += (rep.rayleigh_error() <= p.tolerance) as usize;
        mean += (rep.mean_entry_error() <= p.tolerance) as usize;
        t.push(vec![
            s.into(),
            true.into(),
            rep.rayleigh.into(),
            rep.predicted_rayleigh().into(),
            rep.mean_entry.into(),
            b2.into(),
        ]);
        let ctl = constant_rayleigh(&plain, &batch)?;
        control += (ctl.rayleigh > 10.0 * b2) as usize;
        t.push(vec![
            s.into(),
            false.into(),
            ctl.rayleigh.into(),
            ctl.predicted_rayleigh().into(),
            ctl.mean_entry.into(),
            b2.into(),
        ]);
    }
    let n = p.seeds;
    let verdict = |k: usize| if k == n { "pass" } else { "FAIL" };
    let mut out = RunOutput::default();
    out.tables.push(t);
    out.summary.push(format!(
        "(1/N)·1ᵀΘ1 = β² as literally stated: {} ({literal}/{n} seeds, largest gap {worst_literal:.3e})",
        verdict(literal)
    ));
    out.summary.push(format!("(1/N)·1ᵀΘ1 = N·β²: {} ({scaled}/{n})", verdict(scaled)));
    out.summary.push(format!("mean Gram entry = β²: {} ({mean}/{n})", verdict(mean)));
    out.summary.push(format!("control without batch norm above 10·β²: {} ({control}/{n})", verdict(control)));
    out.notes.push(
        "the batch sum of every gradient vanishes except the last bias, so 1ᵀΘ1 = N²β²; \
         the quotient (1/N)·1ᵀΘ1 is Nβ² and the mean entry is β²"
            .into(),
    );
    for (k, what) in [(scaled, "N·β² identity"), (mean, "mean-entry identity"), (control, "no-BN control")] {
        if k < n {
            out.failures.push(format!("{what} failed on {} of {n} seeds", n - k));
        }
    }
    Ok(out)
}
