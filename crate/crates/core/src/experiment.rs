//! Experiment configuration, end-to-end pipelines, and report files.
//!
//! Configs are flat typed key-value files (TOML syntax; JSON with the same
//! keys is also accepted). Unknown keys are rejected. The sha-256 hash of
//! the canonical JSON form of the parsed config is stamped into every
//! report so outputs can be traced back to their inputs.
//!
//! All pipelines are deterministic given the seed: identical configs
//! produce byte-identical report files regardless of the rayon thread
//! count.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dynsys::{ControlProtocol, System};
use crate::ensemble::{sample_canonical, CanonicalSpec, Ensemble};
use crate::entropy::{
    block_entropy_curve, c_term, d_term, kse_estimate, BlockEntropyCurve, CTerm, KseEstimate,
    PathStats, TermEstimate,
};
use crate::error::{Error, Result};
use crate::lyapunov::{lyapunov_spectrum, pesin_kse, LyapunovReport};
use crate::oracle::{property_sweep, SweepSummary};
use crate::partition::{BackwardPools, Partition, PartitionSpec};
use crate::thermo::{
    bound_report, jarzynski_check, relative_entropy_dissipation, second_law_ok, work_ensemble,
    BoundInputs, BoundReport, JarzynskiCheck, KlEstimate, WorkRecord,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProtocolPoint {
    pub step: usize,
    pub value: f64,
}

fn default_depth() -> usize {
    12
}
fn default_volume_samples() -> usize {
    20_000
}
fn default_alpha_top() -> f64 {
    std::f64::consts::FRAC_PI_2
}
fn default_kappa() -> f64 {
    5.0
}
fn default_substeps() -> u32 {
    512
}
fn default_half_width() -> f64 {
    6.0
}
fn default_lambda0() -> f64 {
    1.0
}
fn default_lyap_iterations() -> u64 {
    1_000_000
}
fn default_lyap_reorth() -> usize {
    1
}
fn default_lyap_transient() -> u64 {
    1000
}
fn default_kl_bins() -> Vec<usize> {
    vec![2, 4, 8, 16]
}
fn default_true() -> bool {
    true
}

/// One experiment: system, initial ensemble, work protocol, and the
/// partition family to analyze.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "disk" | "kicked_top" | "oscillator"
    pub system: String,
    #[serde(default)]
    pub beta: f64,
    pub samples: usize,
    pub seed: u64,
    /// symbolic path depth (steps); the bound window never exceeds it
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// backward-pool samples per cell for reversed volumes
    #[serde(default = "default_volume_samples")]
    pub volume_samples: usize,
    #[serde(default = "default_alpha_top")]
    pub alpha_top: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_substeps")]
    pub substeps: u32,
    #[serde(default = "default_half_width")]
    pub plane_half_width: f64,
    pub partitions: Vec<PartitionSpec>,
    #[serde(default = "default_lambda0")]
    pub lambda0: f64,
    #[serde(default)]
    pub protocol_horizon: Option<usize>,
    #[serde(default)]
    pub protocol_points: Option<Vec<ProtocolPoint>>,
    #[serde(default = "default_lyap_iterations")]
    pub lyapunov_iterations: u64,
    #[serde(default = "default_lyap_reorth")]
    pub lyapunov_reorth: usize,
    #[serde(default = "default_lyap_transient")]
    pub lyapunov_transient: u64,
    /// square-grid sizes for the relative-entropy refinement sequence
    #[serde(default = "default_kl_bins")]
    pub kl_bins: Vec<usize>,
    #[serde(default = "default_true")]
    pub miller_madow: bool,
    /// persist the initial ensemble as ensemble.csv
    #[serde(default)]
    pub save_ensemble: bool,
}

impl ExperimentConfig {
    /// Parses TOML (default) or JSON (when the text starts with '{').
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let config: ExperimentConfig = if trimmed.starts_with('{') {
            serde_json::from_str(trimmed)
                .map_err(|e| Error::config(format!("config schema violation: {e}")))?
        } else {
            toml::from_str(text)
                .map_err(|e| Error::config(format!("config schema violation: {e}")))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        match self.system.as_str() {
            "disk" | "kicked_top" | "oscillator" => {}
            other => return Err(Error::config(format!("unknown system {other:?}"))),
        }
        if self.beta < 0.0 {
            return Err(Error::config("beta must be >= 0"));
        }
        if self.system == "oscillator" && self.beta <= 0.0 {
            return Err(Error::config(
                "the oscillator has unbounded phase space; beta must be > 0",
            ));
        }
        if self.samples == 0 {
            return Err(Error::config("samples must be positive"));
        }
        if self.depth == 0 || self.depth > 64 {
            return Err(Error::config("depth must be in 1..=64"));
        }
        if self.partitions.is_empty() {
            return Err(Error::config("at least one partition is required"));
        }
        if self.volume_samples < 100 {
            return Err(Error::config("volume_samples must be at least 100"));
        }
        if let Some(points) = &self.protocol_points {
            if points.is_empty() {
                return Err(Error::config("protocol_points must not be empty"));
            }
            if points[0].step != 0 {
                return Err(Error::config("protocol must define a value at step 0"));
            }
            if points.windows(2).any(|w| w[1].step <= w[0].step) {
                return Err(Error::config("protocol points must be strictly increasing"));
            }
            let horizon = self
                .protocol_horizon
                .ok_or_else(|| Error::config("protocol_horizon required with protocol_points"))?;
            if horizon < self.depth {
                return Err(Error::config(
                    "protocol_horizon must be at least the symbolic depth",
                ));
            }
        }
        Ok(())
    }

    /// sha-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let mut out = String::with_capacity(64);
        for b in hasher.finalize() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    pub fn build_system(&self) -> System {
        match self.system.as_str() {
            "disk" => System::disk(),
            "kicked_top" => System::kicked_top(self.alpha_top, self.kappa),
            "oscillator" => System::Oscillator(crate::dynsys::DrivenOscillator {
                substeps: self.substeps,
            }),
            _ => unreachable!("validated"),
        }
    }

    pub fn build_protocol(&self) -> Result<ControlProtocol> {
        match (&self.protocol_points, self.protocol_horizon) {
            (Some(points), Some(horizon)) => {
                let pts: Vec<(usize, f64)> = points.iter().map(|p| (p.step, p.value)).collect();
                ControlProtocol::from_points(&pts, horizon)
            }
            _ => Ok(ControlProtocol::constant(
                self.lambda0,
                self.protocol_horizon.unwrap_or(self.depth).max(self.depth),
            )),
        }
    }

    pub fn build_partitions(&self, system: &System) -> Result<Vec<Partition>> {
        self.partitions
            .iter()
            .map(|spec| spec.build(system, self.plane_half_width))
            .collect()
    }

    pub fn is_driven(&self) -> bool {
        self.protocol_points
            .as_ref()
            .map(|p| p.iter().any(|pt| pt.value != p[0].value))
            .unwrap_or(false)
    }
}

/// Backward pools keyed by path end time: one shared pool for autonomous
/// protocols, per-step pools when the control moves.
pub enum PoolSet {
    Shared(BackwardPools),
    PerStep(Vec<BackwardPools>),
}

impl PoolSet {
    pub fn at(&self, t: usize) -> &BackwardPools {
        match self {
            PoolSet::Shared(p) => p,
            PoolSet::PerStep(v) => &v[t - 1],
        }
    }
}

/// Everything the entropy/bound stages need for one partition.
pub struct PartitionAnalysis {
    pub partition: Partition,
    pub stats: PathStats,
    pub curve: BlockEntropyCurve,
    /// bound window: depths 1..=window have reliable tables and pools
    pub window: usize,
    pub c: Vec<CTerm>,
    pub d: Vec<TermEstimate>,
    pub pools: PoolSet,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub system: System,
    pub protocol: ControlProtocol,
    pub partitions: Vec<Partition>,
    pub config_hash: String,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let system = config.build_system();
        let protocol = config.build_protocol()?;
        let partitions = config.build_partitions(&system)?;
        let config_hash = config.hash();
        Ok(Experiment {
            config,
            system,
            protocol,
            partitions,
            config_hash,
        })
    }

    pub fn sample_ensemble(&self) -> Result<Ensemble> {
        sample_canonical(
            &self.system,
            &CanonicalSpec {
                beta: self.config.beta,
                lambda0: self.protocol.value_at(0),
                samples: self.config.samples,
                seed: self.config.seed,
            },
        )
    }

    /// Path statistics, entropy curves, and coarse-graining terms for every
    /// partition in the family.
    pub fn analyze_partitions(&self, ensemble: &Ensemble) -> Result<Vec<PartitionAnalysis>> {
        let depth = self.config.depth;
        let driven = !self.protocol.is_constant();
        let mut out = Vec::with_capacity(self.partitions.len());
        for partition in &self.partitions {
            let stats =
                PathStats::collect(&self.system, &self.protocol, partition, ensemble, depth)?;
            let curve = block_entropy_curve(&stats, self.config.miller_madow);
            let window = curve.reliable_depths().saturating_sub(1).min(depth);
            let pools = if driven {
                let per_step: Vec<BackwardPools> = (1..=window)
                    .map(|t| {
                        BackwardPools::build(
                            &self.system,
                            &self.protocol,
                            partition,
                            t,
                            t,
                            self.config.volume_samples,
                            self.config.seed ^ 0xb0_0f,
                        )
                    })
                    .collect::<Result<_>>()?;
                PoolSet::PerStep(per_step)
            } else {
                PoolSet::Shared(BackwardPools::build(
                    &self.system,
                    &self.protocol,
                    partition,
                    window.max(1),
                    window.max(1),
                    self.config.volume_samples,
                    self.config.seed ^ 0xb0_0f,
                )?)
            };
            let mut c = Vec::with_capacity(window);
            let mut d = Vec::with_capacity(window);
            for t in 1..=window {
                c.push(c_term(&stats, pools.at(t), t)?);
                d.push(d_term(&stats, partition, t)?);
            }
            out.push(PartitionAnalysis {
                partition: partition.clone(),
                stats,
                curve,
                window,
                c,
                d,
                pools,
            });
        }
        Ok(out)
    }

    /// Bound reports for every partition with a usable window.
    pub fn bound_reports(
        &self,
        ensemble: &Ensemble,
        analyses: &[PartitionAnalysis],
        h_reference: Option<f64>,
    ) -> Result<Vec<BoundReport>> {
        let mut reports = Vec::new();
        for analysis in analyses {
            if analysis.window == 0 {
                continue;
            }
            let pools = analysis.pools.at(analysis.window);
            let report = bound_report(&BoundInputs {
                system: &self.system,
                protocol: &self.protocol,
                partition: &analysis.partition,
                ensemble,
                stats: &analysis.stats,
                pools,
                horizon: analysis.window,
                config_hash: self.config_hash.clone(),
                h_reference,
            })?;
            reports.push(report);
        }
        if reports.is_empty() {
            return Err(Error::refused(
                "no partition has a reliable window for the bound",
            ));
        }
        Ok(reports)
    }

    pub fn kse(&self, analyses: &[PartitionAnalysis]) -> Result<KseEstimate> {
        let family: Vec<(&Partition, BlockEntropyCurve)> = analyses
            .iter()
            .map(|a| (&a.partition, a.curve.clone()))
            .collect();
        kse_estimate(&family)
    }

    pub fn lyapunov(&self) -> Result<LyapunovReport> {
        lyapunov_spectrum(
            &self.system,
            self.protocol.value_at(0),
            None,
            self.config.lyapunov_iterations,
            self.config.lyapunov_reorth,
            self.config.lyapunov_transient,
            self.config.seed,
        )
    }

    pub fn work(&self, ensemble: &Ensemble) -> Result<WorkRecord> {
        work_ensemble(&self.system, &self.protocol, ensemble)
    }
}

// ---------------------------------------------------------------------------
// report files
// ---------------------------------------------------------------------------

fn write_atomic(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, content)?;
    Ok(())
}

fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::from("nan")
    }
}

/// entropy_report.csv: one row per (partition, block length), with the
/// coarse-graining terms where pools reach.
pub fn write_entropy_report(path: &Path, analyses: &[PartitionAnalysis]) -> Result<()> {
    let mut out = String::from("partition_id,t,H_t,dH_t,flagged,c_t,d_t\n");
    for a in analyses {
        for (i, &h) in a.curve.h.iter().enumerate() {
            let t = i + 1;
            let dh = if i == 0 { h } else { h - a.curve.h[i - 1] };
            let (c, d) = if t <= a.window {
                (fmt_f64(a.c[t - 1].value), fmt_f64(a.d[t - 1].value))
            } else {
                (String::new(), String::new())
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                a.partition.id,
                t,
                fmt_f64(h),
                fmt_f64(dh),
                a.curve.flagged[i] as u8,
                c,
                d
            );
        }
    }
    write_atomic(path, &out)
}

/// entropy_curve.csv: plot-ready block entropy curves.
pub fn write_entropy_curve(path: &Path, analyses: &[PartitionAnalysis]) -> Result<()> {
    let mut out = String::from("partition_id,t,H_t,dH_t,flagged\n");
    for a in analyses {
        for (i, &h) in a.curve.h.iter().enumerate() {
            let dh = if i == 0 { h } else { h - a.curve.h[i - 1] };
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                a.partition.id,
                i + 1,
                fmt_f64(h),
                fmt_f64(dh),
                a.curve.flagged[i] as u8
            );
        }
    }
    write_atomic(path, &out)
}

#[derive(Serialize)]
struct KseSummaryFile<'a> {
    h: f64,
    maximizing_partition: &'a str,
    shallow_only: bool,
    config_hash: &'a str,
    per_partition: &'a [crate::entropy::PartitionRate],
}

pub fn write_kse_summary(path: &Path, kse: &KseEstimate, config_hash: &str) -> Result<()> {
    let file = KseSummaryFile {
        h: kse.h,
        maximizing_partition: &kse.maximizing_partition,
        shallow_only: kse.shallow_only,
        config_hash,
        per_partition: &kse.per_partition,
    };
    write_atomic(path, &pretty_json(&file)?)
}

pub fn write_bound_reports(dir: &Path, reports: &[BoundReport]) -> Result<()> {
    write_atomic(&dir.join("bound_report.json"), &pretty_json(&reports[0])?)?;
    let mut out = String::from(
        "partition_id,horizon,lhs,rhs,slack,slack_err,h,c_bar,d_bar,entropy_S0\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.partition_id,
            r.horizon,
            fmt_f64(r.lhs),
            fmt_f64(r.rhs),
            fmt_f64(r.slack),
            fmt_f64(r.errors.slack),
            fmt_f64(r.terms.h),
            fmt_f64(r.terms.c_bar),
            fmt_f64(r.terms.d_bar),
            fmt_f64(r.terms.entropy_s0),
        );
    }
    write_atomic(&dir.join("bound_sweep.csv"), &out)
}

pub fn write_lyapunov(dir: &Path, report: &LyapunovReport, config_hash: &str) -> Result<()> {
    #[derive(Serialize)]
    struct LyapunovFile<'a> {
        exponents: &'a [f64],
        pesin_kse: Option<f64>,
        iterations: u64,
        reorth_period: usize,
        transient: u64,
        config_hash: &'a str,
    }
    let file = LyapunovFile {
        exponents: &report.exponents,
        pesin_kse: pesin_kse(report).ok(),
        iterations: report.iterations,
        reorth_period: report.reorth_period,
        transient: report.transient,
        config_hash,
    };
    write_atomic(&dir.join("lyapunov_report.json"), &pretty_json(&file)?)?;
    let mut out = String::from("iteration,lambda1,lambda2\n");
    for p in &report.history {
        let _ = writeln!(
            out,
            "{},{},{}",
            p.iteration,
            fmt_f64(p.exponents[0]),
            fmt_f64(*p.exponents.get(1).unwrap_or(&f64::NAN))
        );
    }
    write_atomic(&dir.join("lyapunov_convergence.csv"), &out)
}

#[derive(Serialize)]
pub struct WorkReportFile {
    pub beta: f64,
    pub w_mean: f64,
    pub w_std_err: f64,
    pub delta_f: f64,
    pub wd_mean: f64,
    pub wd_std_err: f64,
    pub jarzynski: Option<JarzynskiCheck>,
    pub relative_entropy: Vec<KlRow>,
    pub config_hash: String,
}

#[derive(Serialize)]
pub struct KlRow {
    pub bins: usize,
    pub value: f64,
    pub std_err: f64,
    pub clipped_cells: usize,
    pub clipped_mass: f64,
}

pub fn write_work_report(dir: &Path, file: &WorkReportFile) -> Result<()> {
    write_atomic(&dir.join("work_report.json"), &pretty_json(file)?)
}

fn pretty_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map_err(|e| Error::numerical(format!("serialization failed: {e}")))
}

// ---------------------------------------------------------------------------
// full run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub checks: Vec<InvariantCheck>,
    pub outputs: Vec<String>,
    pub kse_h: Option<f64>,
    pub bound_slack: Option<f64>,
}

/// The `run` pipeline: sample, symbolize, estimate, bound, persist.
/// Returns the summary; partitions/statistics invariants are embedded and a
/// failed check surfaces as `Error::InvariantViolation` after all files are
/// written.
pub fn run_experiment(exp: &Experiment, out_dir: &Path) -> Result<RunSummary> {
    let mut checks: Vec<InvariantCheck> = Vec::new();
    let mut outputs: Vec<String> = Vec::new();
    let mut check = |name: &str, result: std::result::Result<(), String>| {
        checks.push(match result {
            Ok(()) => InvariantCheck {
                name: name.into(),
                pass: true,
                detail: String::new(),
            },
            Err(detail) => InvariantCheck {
                name: name.into(),
                pass: false,
                detail,
            },
        });
    };

    for partition in &exp.partitions {
        check(
            &format!("partition_cover_{}", partition.id),
            partition
                .validate_cover(&exp.system, 100_000, exp.config.seed)
                .map_err(|e| e.to_string()),
        );
    }

    let ensemble = exp.sample_ensemble()?;
    if exp.config.save_ensemble {
        crate::ensemble::write_states_csv(&out_dir.join("ensemble.csv"), &exp.system, &ensemble)?;
        outputs.push("ensemble.csv".into());
    }
    let analyses = exp.analyze_partitions(&ensemble)?;

    for a in &analyses {
        check(
            &format!("marginal_consistency_{}", a.partition.id),
            a.stats
                .validate_marginal_consistency()
                .map_err(|e| e.to_string()),
        );
        check(
            &format!("conditional_normalization_{}", a.partition.id),
            a.stats
                .validate_conditional_normalization()
                .map_err(|e| e.to_string()),
        );
        let monotone = a
            .curve
            .h_plugin
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-12);
        check(
            &format!("block_entropy_monotone_{}", a.partition.id),
            if monotone {
                Ok(())
            } else {
                Err("block entropy decreased with depth".into())
            },
        );
    }

    write_entropy_report(&out_dir.join("entropy_report.csv"), &analyses)?;
    write_entropy_curve(&out_dir.join("entropy_curve.csv"), &analyses)?;
    outputs.push("entropy_report.csv".into());
    outputs.push("entropy_curve.csv".into());

    let kse = exp.kse(&analyses)?;
    write_kse_summary(&out_dir.join("kse_summary.json"), &kse, &exp.config_hash)?;
    outputs.push("kse_summary.json".into());

    let reports = exp.bound_reports(&ensemble, &analyses, Some(kse.h))?;
    write_bound_reports(out_dir, &reports)?;
    outputs.push("bound_report.json".into());
    outputs.push("bound_sweep.csv".into());
    for r in &reports {
        let tol = 3.0 * r.errors.slack.max(1e-9);
        check(
            &format!("bound_slack_{}", r.partition_id),
            if r.slack >= -tol {
                Ok(())
            } else {
                Err(format!("slack {} below -3 sigma {}", r.slack, -tol))
            },
        );
    }

    if exp.config.is_driven() && exp.config.beta > 0.0 {
        let record = exp.work(&ensemble)?;
        check(
            "second_law",
            if second_law_ok(&record) {
                Ok(())
            } else {
                Err(format!("<W_d> = {} below -3 sigma", record.wd_mean))
            },
        );
        let jarzynski = jarzynski_check(&record, 200, exp.config.seed ^ 0x7a).ok();
        let kl_rows = kl_refinement_rows(exp, &ensemble)?;
        write_work_report(
            out_dir,
            &WorkReportFile {
                beta: record.beta,
                w_mean: record.w_mean,
                w_std_err: record.w_std_err,
                delta_f: record.delta_f,
                wd_mean: record.wd_mean,
                wd_std_err: record.wd_std_err,
                jarzynski,
                relative_entropy: kl_rows,
                config_hash: exp.config_hash.clone(),
            },
        )?;
        outputs.push("work_report.json".into());
    }

    if matches!(exp.system, System::Disk(_) | System::Top(_)) {
        let report = exp.lyapunov()?;
        write_lyapunov(out_dir, &report, &exp.config_hash)?;
        outputs.push("lyapunov_report.json".into());
        outputs.push("lyapunov_convergence.csv".into());
    }

    let summary = RunSummary {
        config_hash: exp.config_hash.clone(),
        checks,
        outputs,
        kse_h: Some(kse.h),
        bound_slack: Some(reports[0].slack),
    };
    write_atomic(&out_dir.join("run_summary.json"), &pretty_json(&summary)?)?;

    if let Some(fail) = summary.checks.iter().find(|c| !c.pass) {
        return Err(Error::invariant(format!(
            "{}: {}",
            fail.name, fail.detail
        )));
    }
    Ok(summary)
}

/// Relative-entropy dissipation estimates on a nested grid family,
/// comparing the evolved forward density at the protocol end against the
/// time-reversed process at its own start (the canonical state of the final
/// control value, momentum-flipped).
pub fn kl_refinement_rows(exp: &Experiment, ensemble: &Ensemble) -> Result<Vec<KlRow>> {
    let horizon = exp.protocol.horizon();
    let lambda_t = exp.protocol.value_at(horizon);
    let mut forward = ensemble.states.clone();
    crate::ensemble::advance_states(&exp.system, &exp.protocol, &mut forward, 0, horizon)?;
    let backward = sample_canonical(
        &exp.system,
        &CanonicalSpec {
            beta: exp.config.beta,
            lambda0: lambda_t,
            samples: exp.config.samples,
            seed: exp.config.seed ^ 0xbac4,
        },
    )?;
    let mut rows = Vec::new();
    for &bins in &exp.config.kl_bins {
        let partition = match exp.system.chart() {
            crate::dynsys::Chart::Plane => {
                Partition::plane_grid(exp.config.plane_half_width, bins, bins)?
            }
            chart => Partition::grid(chart, bins.max(1), bins.max(1))?,
        };
        let kl: KlEstimate =
            relative_entropy_dissipation(&exp.system, &partition, &forward, &backward.states)?;
        rows.push(KlRow {
            bins,
            value: kl.value,
            std_err: kl.std_err,
            clipped_cells: kl.clipped_cells,
            clipped_mass: kl.clipped_mass,
        });
    }
    Ok(rows)
}

/// The `oracle` subcommand body.
pub fn run_oracle(instances: usize, seed: u64, out_dir: Option<&Path>) -> Result<SweepSummary> {
    let summary = property_sweep(instances, 8, 5, seed)?;
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("oracle_summary.json"), &pretty_json(&summary)?)?;
    }
    if summary.violations > 0 || summary.min_slack < -1e-12 {
        return Err(Error::invariant(format!(
            "oracle sweep found {} violations (min slack {})",
            summary.violations, summary.min_slack
        )));
    }
    Ok(summary)
}

/// Output directory helper shared by the CLI subcommands.
pub fn resolve_out_dir(base: Option<PathBuf>, default_name: &str) -> PathBuf {
    base.unwrap_or_else(|| PathBuf::from("runs").join(default_name))
}

#[cfg(test)]
mod tests {
    use super::*;

    const DISK_TOML: &str = r#"
system = "disk"
beta = 0.0
samples = 5000
seed = 7
depth = 6
partitions = [ { type = "halves", axis = "q" } ]
"#;

    #[test]
    fn toml_and_json_parse_to_the_same_config() {
        let from_toml = ExperimentConfig::parse(DISK_TOML).unwrap();
        let json = serde_json::to_string(&from_toml).unwrap();
        let from_json = ExperimentConfig::parse(&json).unwrap();
        assert_eq!(from_toml, from_json);
        assert_eq!(from_toml.hash(), from_json.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{DISK_TOML}\nbogus_key = 1\n");
        assert!(ExperimentConfig::parse(&bad).is_err());
    }

    #[test]
    fn semantic_validation_errors() {
        let mut cfg = ExperimentConfig::parse(DISK_TOML).unwrap();
        cfg.system = "pendulum".into();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::parse(DISK_TOML).unwrap();
        cfg.system = "oscillator".into();
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::parse(DISK_TOML).unwrap();
        cfg.partitions.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_depends_on_content() {
        let a = ExperimentConfig::parse(DISK_TOML).unwrap();
        let mut b = a.clone();
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn disk_halves_run_produces_expected_terms() {
        let config = ExperimentConfig::parse(DISK_TOML).unwrap();
        let exp = Experiment::new(config).unwrap();
        let ensemble = exp.sample_ensemble().unwrap();
        let analyses = exp.analyze_partitions(&ensemble).unwrap();
        assert_eq!(analyses.len(), 1);
        let a = &analyses[0];
        assert!(a.window >= 4);
        for t in 0..a.window {
            assert!((a.c[t].value + 1.0).abs() < 1e-12);
            assert!((a.d[t].value - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let kse = exp.kse(&analyses).unwrap();
        assert!(kse.h.abs() < 1e-3);
        let reports = exp.bound_reports(&ensemble, &analyses, Some(kse.h)).unwrap();
        assert!((reports[0].slack - (1.0 - std::f64::consts::LN_2)).abs() < 1e-9);
    }
}
