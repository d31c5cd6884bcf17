//! Experiment runner behind the `isoflow` binary: train, sample, diagnose,
//! oracle-check and compare. Every command writes plain CSV plus SVG charts
//! and maps failures onto a small set of exit codes.

pub mod config;
pub mod plot;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{ConfigError, DiagnosticsSettings, ExperimentConfig, SamplerSettings};
use plot::{line_chart, scatter_chart, trajectory_chart, Series};

use crate::data::{sample_prior, write_points_csv, DatasetSpec};
use crate::diagnostics::{
    curvature_proxy, kinetic_energy_profile, one_step_error_check, write_summary_csv, CurvatureReport, DiagnosticSummary,
    DEFAULT_EPS_FD, DEFAULT_STAB_EPS,
};
use crate::field::ModelField;
use crate::model::{read_checkpoint, write_checkpoint, ModelError, VelocityModel};
use crate::oracle::{check_continuity, check_fundamental_limit, linspace, FdSteps, GmmSpec, OracleError};
use crate::sampler::{euler_integrate, sample, LabelRequest, SampleRequest, Solver, Trajectory};
use crate::trainer::{train, TrainError, METRIC_LOG_FILE, METRIC_LOG_HEADER};

pub const OUTPUT_DIR_ENV: &str = "ISOFLOW_OUTPUT_DIR";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const FINAL_CHECKPOINT_FILE: &str = "final.isofm";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("tolerance exceeded: {0}")]
    Tolerance(String),
    #[error("{0}")]
    Input(String),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 2,
            CliError::Tolerance(_) => 3,
            _ => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::Objective(crate::objectives::ObjectiveError::InvalidConfig(_)) => {
                CliError::Config(e.to_string())
            }
            TrainError::Diverged { .. } | TrainError::NonFiniteGradient | TrainError::NonFiniteUpdate => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

/// Output root: the environment override if set, else `fallback`.
pub fn output_root(fallback: &Path) -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| fallback.to_path_buf())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn paths_2d(traj: &Trajectory, max_paths: usize) -> Vec<Vec<(f64, f64)>> {
    (0..traj.num_paths().min(max_paths))
        .map(|i| {
            traj.states
                .iter()
                .zip(&traj.times)
                .map(|(s, t)| {
                    let r = s.row(i);
                    if r.len() >= 2 {
                        (r[0], r[1])
                    } else {
                        (*t, r[0])
                    }
                })
                .collect()
        })
        .collect()
}

fn labels_for(model: &VelocityModel, n: usize) -> Option<Vec<usize>> {
    let c = model.config();
    c.is_conditional().then(|| (0..n).map(|i| i % c.num_classes).collect())
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_sw2: Vec<f64>,
    pub final_mean_curvature: f64,
}

/// Trains from a config file and writes the full run directory.
pub fn cmd_train(config_path: &Path) -> Result<TrainSummary, CliError> {
    let text = fs::read_to_string(config_path).map_err(|e| CliError::Config(format!("{}: {e}", config_path.display())))?;
    let cfg = ExperimentConfig::parse(&text)?;
    run_experiment(&cfg)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let run_dir = output_root(&cfg.output_dir).join(&cfg.run_id);
    create_dir(&run_dir)?;
    write_file(&run_dir.join(RESOLVED_CONFIG_FILE), cfg.to_text())?;

    let outcome = train(&cfg.run, &cfg.loss, &cfg.model, &cfg.dataset, Some(&run_dir))?;
    let model = outcome.ema_model();
    write_checkpoint(&run_dir.join(FINAL_CHECKPOINT_FILE), &cfg.model, &outcome.ema_params).map_err(input)?;

    let s = &cfg.sampler;
    let labels = labels_for(&model, s.n);
    let req = SampleRequest {
        n: s.n,
        nfe: s.nfe,
        solver: s.solver,
        cfg_scale: s.cfg_scale,
        labels: labels.clone().map_or(LabelRequest::None, LabelRequest::PerSample),
        seed: cfg.run.seed,
    };
    let out = sample(&model, &req).map_err(|e| CliError::Numerical(e.to_string()))?;
    write_file(&run_dir.join(SAMPLES_FILE), csv_bytes(|w| write_points_csv(w, &out.points, out.labels.as_deref())))?;
    write_file(&run_dir.join(TRAJECTORY_FILE), csv_bytes(|w| out.trajectory.write_csv(w)))?;

    let m = &outcome.metrics;
    let curve = |name: &str, f: &dyn Fn(&crate::trainer::MetricRow) -> f64| {
        Series::new(name, m.iter().map(|r| (r.step as f64, f(r))).collect())
    };
    let mut sw2_series = Vec::new();
    for (i, nfe) in cfg.run.eval_nfe.iter().enumerate() {
        sw2_series.push(curve(&format!("nfe {nfe}"), &|r| r.sw2[i]));
    }
    write_file(&run_dir.join("sw2.svg"), line_chart("sliced W2 (EMA)", "step", "sw2", &sw2_series))?;
    write_file(
        &run_dir.join("curvature.svg"),
        line_chart("mean curvature integral (EMA)", "step", "mean kappa dt", &[curve("kappa", &|r| r.mean_curvature)]),
    )?;
    let reference = crate::data::sample_target(&cfg.dataset, s.n, cfg.run.eval_seed).map_err(input)?;
    let as_pairs = |p: &crate::points::Points| -> Vec<(f64, f64)> {
        p.rows().map(|r| if r.len() >= 2 { (r[0], r[1]) } else { (r[0], 0.0) }).collect()
    };
    write_file(
        &run_dir.join("samples.svg"),
        scatter_chart(
            &format!("samples at nfe {}", s.nfe),
            &[Series::new("data", as_pairs(&reference.points)), Series::new("model", as_pairs(&out.points))],
        ),
    )?;
    let last = m.last().expect("at least one evaluation");
    Ok(TrainSummary { run_dir, final_sw2: last.sw2.clone(), final_mean_curvature: last.mean_curvature })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub nfe: usize,
    pub n: usize,
    pub cfg_scale: f64,
    pub solver: Solver,
    pub seed: u64,
    pub label: Option<usize>,
    /// Samples CSV destination; `None` writes to stdout.
    pub out: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
}

fn load_model(path: &Path) -> Result<VelocityModel, CliError> {
    let (config, params) = read_checkpoint(path).map_err(|e| match e {
        ModelError::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => CliError::Input(format!("{}: {other}", path.display())),
    })?;
    VelocityModel::new(config, params).map_err(input)
}

pub fn cmd_sample(args: &SampleArgs) -> Result<Vec<u8>, CliError> {
    let model = load_model(&args.ckpt)?;
    let labels = match args.label {
        Some(l) => LabelRequest::Single(l),
        None => labels_for(&model, args.n).map_or(LabelRequest::None, LabelRequest::PerSample),
    };
    let req = SampleRequest { n: args.n, nfe: args.nfe, solver: args.solver, cfg_scale: args.cfg_scale, labels, seed: args.seed };
    let out = sample(&model, &req).map_err(|e| match e {
        crate::sampler::SamplerError::NonFinite(_) => CliError::Numerical(e.to_string()),
        other => CliError::Input(other.to_string()),
    })?;
    let csv = csv_bytes(|w| write_points_csv(w, &out.points, out.labels.as_deref()));
    if let Some(path) = &args.out {
        write_file(path, &csv)?;
    }
    if let Some(path) = &args.trajectory {
        write_file(path, csv_bytes(|w| out.trajectory.write_csv(w)))?;
    }
    Ok(csv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseArgs {
    pub ckpt: PathBuf,
    pub dataset: String,
    pub nfe_list: Vec<usize>,
    pub paths: usize,
    pub seed: u64,
    pub stab_eps: f64,
    pub eps_fd: f64,
    pub out_dir: PathBuf,
}

impl DiagnoseArgs {
    pub fn new(ckpt: PathBuf, dataset: &str, out_dir: PathBuf) -> Self {
        Self {
            ckpt,
            dataset: dataset.into(),
            nfe_list: vec![1, 2, 4, 32],
            paths: 256,
            seed: 0,
            stab_eps: DEFAULT_STAB_EPS,
            eps_fd: DEFAULT_EPS_FD,
            out_dir,
        }
    }
}

/// Summary rows keyed `nfe<k>`, one per entry of the nfe list.
pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<Vec<DiagnosticSummary>, CliError> {
    let model = load_model(&args.ckpt)?;
    let spec = DatasetSpec::parse(&args.dataset, 1.0, 0.0).map_err(input)?;
    if spec.data_dim() != model.config().data_dim {
        return Err(CliError::Input(format!(
            "checkpoint has data dim {} but dataset {} has {}",
            model.config().data_dim,
            spec.name,
            spec.data_dim()
        )));
    }
    if args.nfe_list.is_empty() || args.nfe_list.contains(&0) || args.paths == 0 {
        return Err(CliError::Input("nfe list and path count must be positive".into()));
    }
    create_dir(&args.out_dir)?;
    let labels = labels_for(&model, args.paths);
    let field = match &labels {
        Some(l) => ModelField::guided(&model, l.clone(), 1.0).map_err(input)?,
        None => ModelField::unconditional(&model),
    };
    let x0 = sample_prior(args.paths, spec.data_dim(), args.seed);
    let mut rows = Vec::new();
    let mut kappa_curves = Vec::new();
    let mut overlays = Vec::new();
    for &nfe in &args.nfe_list {
        let traj = euler_integrate(&field, &x0, nfe).map_err(|e| CliError::Numerical(e.to_string()))?;
        write_file(&args.out_dir.join(format!("trajectory_nfe{nfe}.csv")), csv_bytes(|w| traj.write_csv(w)))?;
        let curv = curvature_proxy(&traj, &field, args.stab_eps, args.eps_fd).map_err(|e| CliError::Numerical(e.to_string()))?;
        write_file(&args.out_dir.join(format!("curvature_nfe{nfe}.csv")), csv_bytes(|w| curv.write_csv(w)))?;
        let speed = kinetic_energy_profile(&traj);
        rows.push(DiagnosticSummary::new(&format!("nfe{nfe}"), &curv, &speed));
        kappa_curves.push(Series::new(format!("nfe {nfe}"), curv.mean_by_time()));
        overlays.push((format!("nfe {nfe}"), paths_2d(&traj, 64)));
    }
    write_file(&args.out_dir.join("summary.csv"), csv_bytes(|w| write_summary_csv(w, &rows)))?;

    let one_step = one_step_error_check(&field, &x0, args.eps_fd).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut csv = String::from("traj_id,measured,predicted,ratio\n");
    for (i, r) in one_step.iter().enumerate() {
        let ratio = r.ratio.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{i},{},{},{ratio}\n", r.measured, r.predicted));
    }
    write_file(&args.out_dir.join("one_step.csv"), csv)?;
    write_file(&args.out_dir.join("kappa_vs_t.svg"), line_chart("mean kappa vs t", "t", "kappa", &kappa_curves))?;
    write_file(&args.out_dir.join("trajectories.svg"), trajectory_chart("trajectories", &overlays))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleArgs {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub tol: f64,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSummary {
    pub fundamental_residual: f64,
    pub continuity_residual: f64,
    pub max_abs_lhs_t01: f64,
}

/// Grid used by the oracle self-check: 41 points on `[-4, 4]` by 9 times on
/// `[0.1, 0.9]`, widened to cover the outermost component.
pub fn oracle_grid(spec: &GmmSpec) -> (Vec<f64>, Vec<f64>) {
    let reach = spec.means().data().iter().zip(spec.stds()).map(|(m, s)| m.abs() + 2.0 * s).fold(4.0, f64::max);
    (linspace(-reach, reach, 41), linspace(0.1, 0.9, 9))
}

pub fn cmd_oracle_check(args: &OracleArgs) -> Result<OracleSummary, CliError> {
    let spec = GmmSpec::one_dim(&args.means, &args.stds).map_err(|e| CliError::Config(e.to_string()))?;
    let (xs, ts) = oracle_grid(&spec);
    let support = |e: OracleError| match e {
        OracleError::OutOfSupport { .. } => CliError::Input(format!("grid-support violation: {e}")),
        other => CliError::Config(other.to_string()),
    };
    let fl = check_fundamental_limit(&spec, &xs, &ts, FdSteps::default()).map_err(support)?;
    let cont = check_continuity(&spec, &xs, &ts, FdSteps::default()).map_err(support)?;
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        write_file(&dir.join("fundamental_limit.csv"), csv_bytes(|w| fl.write_csv(w)))?;
        write_file(&dir.join("continuity.csv"), csv_bytes(|w| cont.write_csv(w)))?;
    }
    let summary = OracleSummary {
        fundamental_residual: fl.max_residual,
        continuity_residual: cont.max_residual,
        max_abs_lhs_t01: fl.max_abs_lhs_at(0.1),
    };
    if !(summary.fundamental_residual < args.tol && summary.continuity_residual < args.tol) {
        return Err(CliError::Tolerance(format!(
            "fundamental-limit residual {:.3e}, continuity residual {:.3e}, tolerance {:.1e}",
            summary.fundamental_residual, summary.continuity_residual, args.tol
        )));
    }
    Ok(summary)
}

/// Columns compared between runs, all lower-is-better.
pub const COMPARED_METRICS: [&str; 6] = ["fm_loss", "total_loss", "sw2_nfe1", "sw2_nfe2", "sw2_nfe4", "mean_curvature"];

#[derive(Clone, Debug)]
pub struct MetricLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricLog {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        if !dir.is_dir() {
            return Err(CliError::Input(format!("run directory {} does not exist", dir.display())));
        }
        let path = dir.join(METRIC_LOG_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != METRIC_LOG_HEADER {
            return Err(CliError::Input(format!("schema mismatch in {}: {header:?}", path.display())));
        }
        let columns: Vec<String> = header.split(',').map(String::from).collect();
        let mut rows = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(CliError::Input(format!("schema mismatch in {}: {line:?}", path.display())));
            }
            let row = cells
                .iter()
                .map(|c| if c.is_empty() { Ok(None) } else { c.parse::<f64>().map(Some) })
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(CliError::Input(format!("{} has no rows", path.display())));
        }
        Ok(Self { columns, rows })
    }

    fn column(&self, name: &str) -> usize {
        self.columns.iter().position(|c| c == name).expect("column in fixed schema")
    }

    /// Minimum of a column with the step where it occurs.
    pub fn best(&self, name: &str) -> Option<(f64, usize)> {
        let (ci, si) = (self.column(name), self.column("step"));
        self.rows
            .iter()
            .filter_map(|r| Some((r[ci]?, r[si]? as usize)))
            .filter(|(v, _)| v.is_finite())
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.rows.last().and_then(|r| r[self.column(name)])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub metric: String,
    pub best_a: Option<(f64, usize)>,
    pub best_b: Option<(f64, usize)>,
    /// `100 (b - a) / |a|` of the best values.
    pub delta_pct: Option<f64>,
}

fn pct(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        100.0 * (b - a) / a.abs()
    }
}

fn final_curvature(dir: &Path, nfe: usize, paths: usize) -> Result<Option<(CurvatureReport, Trajectory)>, CliError> {
    let ckpt = dir.join(FINAL_CHECKPOINT_FILE);
    if !ckpt.exists() {
        return Ok(None);
    }
    let model = load_model(&ckpt)?;
    let labels = labels_for(&model, paths);
    let field = match &labels {
        Some(l) => ModelField::guided(&model, l.clone(), 1.0).map_err(input)?,
        None => ModelField::unconditional(&model),
    };
    let x0 = sample_prior(paths, model.config().data_dim, 7);
    let traj = euler_integrate(&field, &x0, nfe).map_err(|e| CliError::Numerical(e.to_string()))?;
    let curv = curvature_proxy(&traj, &field, DEFAULT_STAB_EPS, DEFAULT_EPS_FD).map_err(|e| CliError::Numerical(e.to_string()))?;
    Ok(Some((curv, traj)))
}

/// Best-per-metric comparison of two run directories; writes the report and
/// the overlay charts into `out_dir`.
pub fn cmd_compare(dir_a: &Path, dir_b: &Path, out_dir: &Path) -> Result<Vec<ComparisonRow>, CliError> {
    let (a, b) = (MetricLog::read(dir_a)?, MetricLog::read(dir_b)?);
    let mut rows = Vec::new();
    for metric in COMPARED_METRICS {
        let (ba, bb) = (a.best(metric), b.best(metric));
        let delta_pct = ba.zip(bb).map(|((x, _), (y, _))| pct(x, y));
        rows.push(ComparisonRow { metric: metric.into(), best_a: ba, best_b: bb, delta_pct });
    }
    if let (Some(x), Some(y)) = (a.last("mean_curvature"), b.last("mean_curvature")) {
        let step = |log: &MetricLog| log.last("step").unwrap_or(0.0) as usize;
        rows.push(ComparisonRow {
            metric: "final_mean_curvature".into(),
            best_a: Some((x, step(&a))),
            best_b: Some((y, step(&b))),
            delta_pct: Some(pct(x, y)),
        });
    }
    create_dir(out_dir)?;
    let name = |d: &Path| d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| d.display().to_string());
    let (na, nb) = (name(dir_a), name(dir_b));
    let cell = |v: Option<(f64, usize)>, i: usize| match (v, i) {
        (Some((x, _)), 0) => x.to_string(),
        (Some((_, s)), _) => s.to_string(),
        (None, _) => String::new(),
    };
    let mut csv = String::from("metric,best_a,step_a,best_b,step_b,delta_pct\n");
    for r in &rows {
        let d = r.delta_pct.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{d}\n",
            r.metric,
            cell(r.best_a, 0),
            cell(r.best_a, 1),
            cell(r.best_b, 0),
            cell(r.best_b, 1)
        ));
    }
    write_file(&out_dir.join("comparison.csv"), csv)?;

    if let (Some((ca, ta)), Some((cb, tb))) = (final_curvature(dir_a, 32, 128)?, final_curvature(dir_b, 32, 128)?) {
        let summaries = [DiagnosticSummary::new(&na, &ca, &kinetic_energy_profile(&ta)), DiagnosticSummary::new(&nb, &cb, &kinetic_energy_profile(&tb))];
        write_file(&out_dir.join("curvature_summary.csv"), csv_bytes(|w| write_summary_csv(w, &summaries)))?;
        write_file(
            &out_dir.join("kappa_vs_t.svg"),
            line_chart("mean kappa vs t (nfe 32)", "t", "kappa", &[Series::new(&na, ca.mean_by_time()), Series::new(&nb, cb.mean_by_time())]),
        )?;
        write_file(
            &out_dir.join("trajectories.svg"),
            trajectory_chart("trajectory overlay (nfe 32)", &[(na.clone(), paths_2d(&ta, 48)), (nb.clone(), paths_2d(&tb, 48))]),
        )?;
    }
    Ok(rows)
}

/// Human-readable rendering of a comparison.
pub fn format_comparison<W: Write>(mut w: W, rows: &[ComparisonRow]) -> std::io::Result<()> {
    writeln!(w, "{:<22} {:>14} {:>7} {:>14} {:>7} {:>10}", "metric", "best A", "step", "best B", "step", "delta %")?;
    for r in rows {
        let fmt = |v: Option<(f64, usize)>| v.map_or(("-".to_string(), "-".to_string()), |(x, s)| (format!("{x:.6}"), s.to_string()));
        let ((va, sa), (vb, sb)) = (fmt(r.best_a), fmt(r.best_b));
        let d = r.delta_pct.map_or("-".to_string(), |v| format!("{v:+.2}"));
        writeln!(w, "{:<22} {va:>14} {sa:>7} {vb:>14} {sb:>7} {d:>10}", r.metric)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 1);
        assert_eq!(CliError::Input("x".into()).exit_code(), 1);
        assert_eq!(CliError::Numerical("x".into()).exit_code(), 2);
        assert_eq!(CliError::Tolerance("x".into()).exit_code(), 3);
    }

    #[test]
    fn oracle_check_paths() {
        let pass = cmd_oracle_check(&OracleArgs { means: vec![0.0], stds: vec![1.0], tol: 1e-3, out_dir: None }).unwrap();
        assert!(pass.fundamental_residual < 1e-3);
        let two = OracleArgs { means: vec![-2.0, 2.0], stds: vec![0.3, 0.3], tol: 1e-3, out_dir: None };
        let s = cmd_oracle_check(&two).unwrap();
        assert!(s.max_abs_lhs_t01 > 0.01);
        let strict = OracleArgs { tol: 1e-9, ..two };
        assert_eq!(cmd_oracle_check(&strict).unwrap_err().exit_code(), 3);
        let bad = OracleArgs { means: vec![0.0], stds: vec![-1.0], tol: 1e-3, out_dir: None };
        assert_eq!(cmd_oracle_check(&bad).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn compare_rejects_missing_and_foreign_logs() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert!(matches!(cmd_compare(&missing, &missing, dir.path()), Err(CliError::Input(_))));
        fs::write(dir.path().join(METRIC_LOG_FILE), "a,b\n1,2\n").unwrap();
        assert!(matches!(MetricLog::read(dir.path()), Err(CliError::Input(m)) if m.contains("schema")));
    }
}
