//! Experiment matrices: configuration files, parallel execution, comparison reports and
//! plot-ready data.

use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Approach, ControllerConfig, Smoothing};
use crate::kinematics::JointVector;
use crate::pattern::LawnMowerPattern;
use crate::simulator::{
    calibrate_speed, read_trace_csv, run, write_trace_csv, SimConfig, SimError, SimTrace,
    TraceParseError, DEFAULT_DT,
};
use crate::tasks::{Surface, SurfaceError, SurfaceRegistry, SurfaceSpec};

/// Centre of the pattern bounding box used by the presets (m, base frame).
pub const DEFAULT_PATTERN_CENTER: (f64, f64) = (0.1, -0.45);
/// The three `(r, L)` patterns of the reference experiments (m).
pub const REFERENCE_PATTERNS: [(f64, f64); 3] = [(0.07, 0.3), (0.12, 0.2), (0.16, 0.1)];
/// Reference velocities (m/s).
pub const REFERENCE_VELOCITIES: [f64; 3] = [0.15, 0.10, 0.05];
/// Slack on the FOV limit when checking report cells (deg).
pub const FOV_CHECK_SLACK_DEG: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid experiment config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Trace(#[from] TraceParseError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("could not start worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How the entries of `velocities` are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityMode {
    /// Spray speed `U` along the pattern.
    #[default]
    Spray,
    /// Target average end-effector speed; `U` is calibrated per cell.
    EndEffector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub r: f64,
    #[serde(rename = "L")]
    pub length: f64,
    pub x0: f64,
    pub y0: f64,
    /// Initial joint configuration; computed by inverse kinematics when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_init: Option<[f64; 6]>,
}

impl PatternSpec {
    /// Pattern whose bounding box is centred on [`DEFAULT_PATTERN_CENTER`].
    pub fn centered(r: f64, length: f64) -> Self {
        let (cx, cy) = DEFAULT_PATTERN_CENTER;
        Self {
            r,
            length,
            x0: cx - length / 2.0,
            y0: cy - r,
            q_init: None,
        }
    }

    pub fn label(&self) -> String {
        format!("r={:.2} L={:.2}", self.r, self.length)
    }

    pub fn build(&self, speed: f64, laps: u32) -> Result<LawnMowerPattern, SimError> {
        Ok(LawnMowerPattern::new(
            self.length,
            self.r,
            self.x0,
            self.y0,
            speed,
            laps,
        )?)
    }
}

/// A gain matrix given either as a scalar multiple of identity or as its diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gain {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

impl Gain {
    fn diagonal(&self, n: usize) -> Result<Vec<f64>, ExperimentError> {
        match self {
            Gain::Scalar(g) => Ok(vec![*g; n]),
            Gain::Diagonal(d) if d.len() == n => Ok(d.clone()),
            Gain::Diagonal(d) => Err(ExperimentError::Invalid(format!(
                "gain diagonal needs {n} entries, got {}",
                d.len()
            ))),
        }
    }
}

fn default_theta_deg() -> f64 {
    20.0
}
fn default_theta0_deg() -> f64 {
    5.0
}
fn default_gain() -> Gain {
    Gain::Scalar(0.4)
}
fn default_standoff() -> f64 {
    0.3
}
fn default_laps() -> u32 {
    crate::pattern::DEFAULT_LAPS
}
fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A full experiment matrix as read from a TOML file.
///
/// ```toml
/// velocities = [0.15]
/// approaches = ["ST", "A"]
/// surface = { kind = "flat", c = -0.45 }
///
/// [[patterns]]
/// r = 0.07
/// L = 0.3
/// x0 = -0.05
/// y0 = -0.52
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub patterns: Vec<PatternSpec>,
    pub velocities: Vec<f64>,
    #[serde(default)]
    pub velocity_mode: VelocityMode,
    pub approaches: Vec<Approach>,
    pub surface: SurfaceSpec,
    #[serde(default = "default_theta_deg")]
    pub theta_deg: f64,
    #[serde(default = "default_theta0_deg")]
    pub theta0_deg: f64,
    #[serde(default)]
    pub smoothing: Smoothing,
    #[serde(default = "default_gain")]
    pub lambda1: Gain,
    #[serde(default = "default_gain")]
    pub lambda2: Gain,
    #[serde(default = "default_standoff")]
    pub standoff: f64,
    #[serde(default = "default_laps")]
    pub laps: u32,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Built-in experiment matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Every approach at equal spray speed.
    Table1,
    /// Every approach at equal average end-effector speed.
    Table2,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table1" => Ok(Preset::Table1),
            "table2" => Ok(Preset::Table2),
            other => Err(format!(
                "unknown preset `{other}` (expected table1 or table2)"
            )),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            patterns: REFERENCE_PATTERNS
                .iter()
                .map(|&(r, l)| PatternSpec::centered(r, l))
                .collect(),
            velocities: REFERENCE_VELOCITIES.to_vec(),
            velocity_mode: match preset {
                Preset::Table1 => VelocityMode::Spray,
                Preset::Table2 => VelocityMode::EndEffector,
            },
            approaches: Approach::ALL.to_vec(),
            surface: SurfaceSpec::flat(-0.45),
            theta_deg: default_theta_deg(),
            theta0_deg: default_theta0_deg(),
            smoothing: Smoothing::default(),
            lambda1: default_gain(),
            lambda2: default_gain(),
            standoff: default_standoff(),
            laps: default_laps(),
            dt: default_dt(),
            output_dir: default_output_dir(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        let config: Self = toml::from_str(s)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let invalid = |msg: &str| Err(ExperimentError::Invalid(msg.to_string()));
        if self.patterns.is_empty() {
            return invalid("`patterns` must not be empty");
        }
        if self.velocities.is_empty() {
            return invalid("`velocities` must not be empty");
        }
        if self.approaches.is_empty() {
            return invalid("`approaches` must not be empty");
        }
        if self.velocities.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return invalid("velocities must be positive");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid("`dt` must be positive");
        }
        for p in &self.patterns {
            p.build(1.0, self.laps)
                .map_err(|e| ExperimentError::Invalid(format!("pattern {}: {e}", p.label())))?;
        }
        SurfaceRegistry::default().build(&self.surface)?;
        for &approach in &self.approaches {
            self.controller_config(approach)?
                .validate()
                .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn controller_config(
        &self,
        approach: Approach,
    ) -> Result<ControllerConfig, ExperimentError> {
        let l1 = self.lambda1.diagonal(3)?;
        let l2 = self.lambda2.diagonal(4)?;
        Ok(ControllerConfig {
            theta: self.theta_deg.to_radians(),
            theta0: self.theta0_deg.to_radians(),
            lambda1: Matrix3::from_diagonal(&nalgebra::Vector3::from_vec(l1)),
            lambda2: Matrix4::from_diagonal(&nalgebra::Vector4::from_vec(l2)),
            approach,
            smoothing: self.smoothing,
            standoff: self.standoff,
        })
    }

    /// Cells in report order: pattern, then velocity, then approach.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for pattern in 0..self.patterns.len() {
            for &velocity in &self.velocities {
                for &approach in &self.approaches {
                    cells.push(Cell {
                        pattern,
                        velocity,
                        approach,
                    });
                }
            }
        }
        cells
    }
}

/// One simulation of a matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    /// Index into [`ExperimentConfig::patterns`].
    pub pattern: usize,
    pub velocity: f64,
    pub approach: Approach,
}

impl Cell {
    /// File stem for the cell's trace and metrics.
    pub fn file_stem(&self, spec: &PatternSpec) -> String {
        format!(
            "r{}_L{}_v{}_{}",
            spec.r,
            spec.length,
            self.velocity,
            self.approach.label()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyNormalization {
    /// Energy proxy in percent of the ST run with the same pattern and velocity.
    PercentOfSt,
    /// No ST cells; energy proxy reported in rad^2/s.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    /// s
    pub time: f64,
    /// m
    pub path: f64,
    /// m/s
    pub avg_vel: f64,
    /// Integrated squared joint speed (rad^2/s); a proxy, not electrical energy.
    pub energy_proxy: f64,
    pub energy_proxy_pct_of_st: Option<f64>,
    pub max_fov_deg: f64,
    /// rad/s^2
    pub max_joint_accel: f64,
    pub safety_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub r: f64,
    #[serde(rename = "L")]
    pub length: f64,
    /// Configured velocity (spray speed or target end-effector speed).
    pub velocity: f64,
    pub approach: Approach,
    /// Spray speed actually simulated, after calibration if any.
    pub spray_speed: Option<f64>,
    pub metrics: Option<CellMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub velocity_mode: VelocityMode,
    pub energy_normalization: EnergyNormalization,
    pub theta_deg: f64,
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> Result<String, ExperimentError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ExperimentError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn row(
        &self,
        r: f64,
        length: f64,
        velocity: f64,
        approach: Approach,
    ) -> Option<&ReportRow> {
        self.rows.iter().find(|row| {
            row.r == r
                && row.length == length
                && row.velocity == velocity
                && row.approach == approach
        })
    }

    pub fn failures(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }

    /// Set-based cells whose FOV angle exceeded the limit plus [`FOV_CHECK_SLACK_DEG`].
    pub fn fov_violations(&self) -> Vec<&ReportRow> {
        let limit = self.theta_deg + FOV_CHECK_SLACK_DEG;
        self.rows
            .iter()
            .filter(|r| r.approach.is_set_based())
            .filter(|r| r.metrics.as_ref().is_some_and(|m| m.max_fov_deg > limit))
            .collect()
    }

    /// Fixed-width table with two decimals.
    pub fn render_table(&self) -> String {
        let energy_header = match self.energy_normalization {
            EnergyNormalization::PercentOfSt => "energy proxy [% ST]",
            EnergyNormalization::Absolute => "energy proxy [rad^2/s]",
        };
        let velocity_header = match self.velocity_mode {
            VelocityMode::Spray => "U [m/s]",
            VelocityMode::EndEffector => "ee vel [m/s]",
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>12} {:>8} {:>9} {:>9} {:>9} {:>14} {:>22} {:>14}",
            "pattern",
            velocity_header,
            "approach",
            "U used",
            "time [s]",
            "path [m]",
            "avg vel [m/s]",
            energy_header,
            "max FOV [deg]"
        );
        for row in &self.rows {
            let pattern = format!("r={:.2} L={:.2}", row.r, row.length);
            let _ = write!(
                out,
                "{:<14} {:>12.2} {:>8} ",
                pattern,
                row.velocity,
                row.approach.label()
            );
            match (&row.metrics, &row.error) {
                (Some(m), _) => {
                    let energy = match self.energy_normalization {
                        EnergyNormalization::PercentOfSt => m.energy_proxy_pct_of_st,
                        EnergyNormalization::Absolute => Some(m.energy_proxy),
                    };
                    let _ = writeln!(
                        out,
                        "{:>9.2} {:>9.2} {:>9.2} {:>14.2} {:>22} {:>14.2}",
                        row.spray_speed.unwrap_or(f64::NAN),
                        m.time,
                        m.path,
                        m.avg_vel,
                        energy.map_or("-".to_string(), |e| format!("{e:.2}")),
                        m.max_fov_deg
                    );
                }
                (None, error) => {
                    let _ = writeln!(
                        out,
                        "failed: {}",
                        error.as_deref().unwrap_or("unknown error")
                    );
                }
            }
        }
        out
    }
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_table())
    }
}

/// FOV misalignment angle for a given `sigma_FOV` (deg).
pub fn fov_degrees(sigma: f64) -> f64 {
    (1.0 - sigma * sigma / 2.0)
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
    /// Where traces, per-cell metrics and the report are written; nothing is written
    /// when `None`.
    pub output_dir: Option<PathBuf>,
}

/// Result of one cell: spray speed used and the trace.
pub fn run_cell(
    config: &ExperimentConfig,
    surface: &dyn Surface,
    cell: &Cell,
) -> Result<(f64, SimTrace), SimError> {
    let spec = &config.patterns[cell.pattern];
    let pattern = spec.build(cell.velocity, config.laps)?;
    let controller = config
        .controller_config(cell.approach)
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let mut sim = match spec.q_init {
        Some(q) => SimConfig::new(JointVector::from_row_slice(&q)),
        None => SimConfig::for_pattern(&pattern, surface, config.standoff)?,
    };
    sim.dt = config.dt;
    match config.velocity_mode {
        VelocityMode::Spray => Ok((cell.velocity, run(&sim, &controller, &pattern, surface)?)),
        VelocityMode::EndEffector => {
            let c = calibrate_speed(cell.velocity, &sim, &controller, &pattern, surface)?;
            Ok((c.speed, c.trace))
        }
    }
}

fn write_cell_outputs(dir: &Path, stem: &str, trace: &SimTrace) -> Result<(), ExperimentError> {
    let trace_path = dir.join(format!("trace_{stem}.csv"));
    let file = fs::File::create(&trace_path).map_err(io_err(&trace_path))?;
    write_trace_csv(trace, io::BufWriter::new(file))?;
    let metrics_path = dir.join(format!("metrics_{stem}.json"));
    let json = serde_json::to_string_pretty(&trace.metrics)?;
    fs::write(&metrics_path, json).map_err(io_err(&metrics_path))?;
    Ok(())
}

/// Runs every cell of the matrix on a bounded worker pool. Failed cells are recorded in
/// the report and do not stop the others.
pub fn run_matrix(
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<ComparisonReport, ExperimentError> {
    config.validate()?;
    let surface = SurfaceRegistry::default().build(&config.surface)?;
    if let Some(dir) = &options.output_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = options.jobs {
        pool = pool.num_threads(jobs.max(1));
    }
    let pool = pool.build()?;
    let cells = config.cells();
    let outcomes: Vec<Result<(f64, SimTrace), String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let (speed, trace) =
                    run_cell(config, surface.as_ref(), cell).map_err(|e| e.to_string())?;
                if let Some(dir) = &options.output_dir {
                    let stem = cell.file_stem(&config.patterns[cell.pattern]);
                    write_cell_outputs(dir, &stem, &trace).map_err(|e| e.to_string())?;
                }
                Ok((speed, trace))
            })
            .collect()
    });

    let energy_normalization = if config.approaches.contains(&Approach::St) {
        EnergyNormalization::PercentOfSt
    } else {
        EnergyNormalization::Absolute
    };
    let mut rows: Vec<ReportRow> = cells
        .iter()
        .zip(&outcomes)
        .map(|(cell, outcome)| {
            let spec = &config.patterns[cell.pattern];
            let (spray_speed, metrics, error) = match outcome {
                Ok((speed, trace)) => {
                    let m = &trace.metrics;
                    let metrics = CellMetrics {
                        time: m.completion_time,
                        path: m.ee_path_length,
                        avg_vel: m.avg_ee_velocity,
                        energy_proxy: m.energy_proxy,
                        energy_proxy_pct_of_st: None,
                        max_fov_deg: fov_degrees(m.max_sigma_fov),
                        max_joint_accel: m.max_joint_accel,
                        safety_events: trace.safety_events.len(),
                    };
                    (Some(*speed), Some(metrics), None)
                }
                Err(e) => (None, None, Some(e.clone())),
            };
            ReportRow {
                r: spec.r,
                length: spec.length,
                velocity: cell.velocity,
                approach: cell.approach,
                spray_speed,
                metrics,
                error,
            }
        })
        .collect();

    if energy_normalization == EnergyNormalization::PercentOfSt {
        let st_energy: Vec<Option<f64>> = cells
            .iter()
            .map(|cell| {
                cells
                    .iter()
                    .zip(&rows)
                    .find(|(c, _)| {
                        c.pattern == cell.pattern
                            && c.velocity == cell.velocity
                            && c.approach == Approach::St
                    })
                    .and_then(|(_, row)| row.metrics.as_ref().map(|m| m.energy_proxy))
            })
            .collect();
        for (row, st) in rows.iter_mut().zip(st_energy) {
            let approach = row.approach;
            if let (Some(m), Some(st)) = (row.metrics.as_mut(), st) {
                m.energy_proxy_pct_of_st = Some(if approach == Approach::St {
                    100.0
                } else {
                    100.0 * m.energy_proxy / st
                });
            }
        }
    }

    let report = ComparisonReport {
        velocity_mode: config.velocity_mode,
        energy_normalization,
        theta_deg: config.theta_deg,
        rows,
    };
    if let Some(dir) = &options.output_dir {
        let json_path = dir.join("report.json");
        fs::write(&json_path, report.to_json()?).map_err(io_err(&json_path))?;
        let table_path = dir.join("report.txt");
        fs::write(&table_path, report.render_table()).map_err(io_err(&table_path))?;
    }
    Ok(report)
}

/// [`run_matrix`] with velocities taken as target average end-effector speeds.
pub fn equal_speed_matrix(
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<ComparisonReport, ExperimentError> {
    let config = ExperimentConfig {
        velocity_mode: VelocityMode::EndEffector,
        ..config.clone()
    };
    run_matrix(&config, options)
}

/// Converts a trace CSV into whitespace-separated column files for plotting:
/// `path.dat` (end-effector and spray point), `mode.dat` (integer mode),
/// `fov.dat` (misalignment in degrees) and `joint_velocities.dat`.
pub fn emit_plot_data(trace: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let file = fs::File::open(trace).map_err(io_err(trace))?;
    let rows = read_trace_csv(io::BufReader::new(file))?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut path = String::from("# t xe ye ze xi yi\n");
    let mut mode = String::from("# t mode\n");
    let mut fov = String::from("# t fov_deg\n");
    let mut joints = String::from("# t qd1 qd2 qd3 qd4 qd5 qd6\n");
    for r in &rows {
        let _ = writeln!(
            path,
            "{} {} {} {} {} {}",
            r.t, r.ee[0], r.ee[1], r.ee[2], r.xi, r.yi
        );
        let _ = writeln!(mode, "{} {}", r.t, r.mode.code());
        let _ = writeln!(fov, "{} {}", r.t, fov_degrees(r.sigma_fov));
        let _ = write!(joints, "{}", r.t);
        for v in r.qdot {
            let _ = write!(joints, " {v}");
        }
        joints.push('\n');
    }
    let mut written = Vec::new();
    for (name, body) in [
        ("path.dat", path),
        ("mode.dat", mode),
        ("fov.dat", fov),
        ("joint_velocities.dat", joints),
    ] {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
        written.push(p);
    }
    Ok(written)
}
