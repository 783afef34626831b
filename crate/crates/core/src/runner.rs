//! File-level drivers behind the command-line subcommands.
//!
//! A training run directory looks like:
//!
//! ```text
//! out/
//!   prompts.jsonl heldout.jsonl      (from gen-data)
//!   config.toml                      effective config
//!   round_001/ checkpoint.json pairs.jsonl filter_report.jsonl
//!              conflicts.jsonl metrics.jsonl summary.json
//!   ...
//!   metrics.jsonl filter_report.jsonl conflicts.jsonl
//!   report.json manifest.json
//! ```
//!
//! `checkpoint.json` in `round_t` holds the state after round `t`, so a run
//! resumed from it replays rounds `t+1..=T` exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    analyze_filters, offline_sweep, render_markdown, render_series, RetentionSummary, SweepSelection,
};
use crate::config::ExperimentConfig;
use crate::error::{CongradError, Result};
use crate::formats::{self, Checkpoint};
use crate::preference::PreferencePair;
use crate::selfloop::{
    run_round, ConflictReportRecord, Experiment, ExperimentReport, FilterRecord, MetricsRecord, PromptSpec,
    RoundOutput, RoundSummary, Scenario,
};

pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const LOCK_FILE: &str = ".congrad.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CongradError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CongradError::Locked(path)),
            Err(e) => Err(CongradError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn round_dir(out: &Path, round: u32) -> PathBuf {
    out.join(format!("round_{round:03}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub prompts: usize,
    pub heldout_pairs: usize,
    pub per_language: BTreeMap<String, usize>,
}

/// Write the scenario's prompt definitions and held-out pairs to `out`.
pub fn gen_data(config: &ExperimentConfig, out: &Path) -> Result<DataSummary> {
    config.validate()?;
    let _lock = DirLock::acquire(out)?;
    let scenario = Scenario::generate(config)?;
    write_scenario(&scenario, out)?;
    let mut per_language = BTreeMap::new();
    for p in &scenario.prompts {
        *per_language.entry(p.language.clone()).or_insert(0) += 1;
    }
    Ok(DataSummary {
        prompts: scenario.prompts.len(),
        heldout_pairs: scenario.heldout.values().map(Vec::len).sum(),
        per_language,
    })
}

fn write_scenario(scenario: &Scenario, out: &Path) -> Result<()> {
    formats::write_jsonl(&out.join(PROMPTS_FILE), formats::PROMPTS, &scenario.prompts)?;
    let heldout: Vec<&PreferencePair> = scenario.heldout.values().flatten().collect();
    formats::write_jsonl(&out.join(HELDOUT_FILE), formats::HELDOUT, &heldout)
}

/// Read data written by [`gen_data`] and check it against `config`.
pub fn load_data(config: &ExperimentConfig, dir: &Path) -> Result<Scenario> {
    let prompts_path = dir.join(PROMPTS_FILE);
    if !prompts_path.exists() {
        return Err(CongradError::MissingData(format!(
            "{} not found; run `congrad gen-data` with the same config first, or pass --data",
            prompts_path.display()
        )));
    }
    let prompts: Vec<PromptSpec> = formats::read_jsonl(&prompts_path, formats::PROMPTS)?;
    let heldout_path = dir.join(HELDOUT_FILE);
    if !heldout_path.exists() {
        return Err(CongradError::MissingData(format!(
            "{} not found",
            heldout_path.display()
        )));
    }
    let pairs: Vec<PreferencePair> = formats::read_jsonl(&heldout_path, formats::HELDOUT)?;
    let mut heldout: BTreeMap<String, Vec<PreferencePair>> =
        config.languages.iter().map(|l| (l.clone(), Vec::new())).collect();
    for p in pairs {
        match heldout.get_mut(&p.language) {
            Some(v) => v.push(p),
            None => {
                return Err(CongradError::invalid(format!(
                    "held-out pair for unknown language `{}`",
                    p.language
                )))
            }
        }
    }
    let scenario = Scenario { prompts, heldout };
    scenario.validate(config)?;
    Ok(scenario)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub fnv1a: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub rounds_planned: u32,
    pub rounds_completed: u32,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory holding gen-data output; defaults to the run directory.
    pub data_dir: Option<PathBuf>,
    /// Continue after this completed round, from its checkpoint.
    pub resume_from: Option<u32>,
}

fn write_round(out: &Path, config: &ExperimentConfig, output: &RoundOutput, checkpoint: Checkpoint) -> Result<()> {
    let dir = round_dir(out, output.summary.round);
    fs::create_dir_all(&dir).map_err(|e| CongradError::io(&dir, e))?;
    formats::write_jsonl(&dir.join("pairs.jsonl"), formats::PAIRS, &output.pairs)?;
    formats::write_jsonl(
        &dir.join("filter_report.jsonl"),
        formats::FILTER_REPORT,
        &output.filter_records,
    )?;
    formats::write_jsonl(&dir.join("conflicts.jsonl"), formats::CONFLICTS, &output.conflicts)?;
    formats::write_jsonl(&dir.join("metrics.jsonl"), formats::METRICS, &output.metrics)?;
    formats::write_json(&dir.join("summary.json"), formats::ROUND_SUMMARY, &output.summary)?;
    debug_assert!(checkpoint.matches(config));
    formats::save_checkpoint(&dir.join("checkpoint.json"), &checkpoint)
}

struct Recorded {
    summaries: Vec<RoundSummary>,
    metrics: Vec<MetricsRecord>,
    filters: Vec<FilterRecord>,
    conflicts: Vec<ConflictReportRecord>,
}

fn read_rounds(out: &Path, rounds: u32) -> Result<Recorded> {
    let mut rec = Recorded {
        summaries: Vec::new(),
        metrics: Vec::new(),
        filters: Vec::new(),
        conflicts: Vec::new(),
    };
    for t in 1..=rounds {
        let dir = round_dir(out, t);
        rec.summaries
            .push(formats::read_json(&dir.join("summary.json"), formats::ROUND_SUMMARY)?);
        rec.metrics.extend(formats::read_jsonl::<MetricsRecord>(
            &dir.join("metrics.jsonl"),
            formats::METRICS,
        )?);
        rec.filters.extend(formats::read_jsonl::<FilterRecord>(
            &dir.join("filter_report.jsonl"),
            formats::FILTER_REPORT,
        )?);
        rec.conflicts.extend(formats::read_jsonl::<ConflictReportRecord>(
            &dir.join("conflicts.jsonl"),
            formats::CONFLICTS,
        )?);
    }
    Ok(rec)
}

fn file_entries(out: &Path, completed: u32) -> Result<Vec<FileEntry>> {
    let mut names: Vec<String> = Vec::new();
    for t in 1..=completed {
        for f in [
            "checkpoint.json",
            "pairs.jsonl",
            "filter_report.jsonl",
            "conflicts.jsonl",
            "metrics.jsonl",
            "summary.json",
        ] {
            names.push(format!("round_{t:03}/{f}"));
        }
    }
    for f in ["metrics.jsonl", "filter_report.jsonl", "conflicts.jsonl", "report.json"] {
        if out.join(f).exists() {
            names.push(f.to_string());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let path = out.join(&name);
            let bytes = fs::read(&path).map_err(|e| CongradError::io(&path, e))?;
            Ok(FileEntry {
                path: name,
                bytes: bytes.len() as u64,
                fnv1a: format!("{:016x}", fnv1a(&bytes)),
            })
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    // same constants as the seed tree's string hash
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn write_manifest(out: &Path, config: &ExperimentConfig, completed: u32, error: Option<String>) -> Result<RunManifest> {
    let manifest = RunManifest {
        status: if error.is_none() && completed == config.rounds {
            RunStatus::Complete
        } else {
            RunStatus::Partial
        },
        rounds_planned: config.rounds,
        rounds_completed: completed,
        error,
        files: file_entries(out, completed)?,
    };
    formats::write_json(&out.join("manifest.json"), formats::MANIFEST, &manifest)?;
    Ok(manifest)
}

/// Run (or resume) the self-rewarding loop, writing every round's artifacts
/// under `config.output_dir`.
pub fn train(config: &ExperimentConfig, opts: &TrainOptions) -> Result<RunManifest> {
    config.validate()?;
    let out = config.output_dir.as_path();
    let _lock = DirLock::acquire(out)?;
    let scenario = load_data(config, opts.data_dir.as_deref().unwrap_or(out))?;
    let text = config.to_toml_string();
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, text).map_err(|e| CongradError::io(&cfg_path, e))?;

    let exp = Experiment::new(config.clone(), scenario)?;
    let mut state = match opts.resume_from {
        None => exp.initial_state(),
        Some(t) => {
            if t == 0 || t > config.rounds {
                return Err(CongradError::validation(
                    "resume",
                    format!("round {t} is outside 1..={}", config.rounds),
                ));
            }
            let ck = formats::load_checkpoint(&round_dir(out, t).join("checkpoint.json"))?;
            if !ck.matches(config) {
                return Err(CongradError::validation(
                    "resume",
                    format!("checkpoint of round {t} was written with a different config"),
                ));
            }
            if ck.state.round != t + 1 {
                return Err(CongradError::Format(format!(
                    "checkpoint of round {t} holds state for round {}",
                    ck.state.round
                )));
            }
            ck.state
        }
    };

    let ctx = exp.context();
    let mut completed = state.round - 1;
    while state.round <= config.rounds {
        let step = run_round(&state, &ctx).and_then(|(next, output)| {
            write_round(out, config, &output, Checkpoint::new(config, next.clone()))?;
            Ok(next)
        });
        match step {
            Ok(next) => {
                log::info!("round {} done", state.round);
                completed = state.round;
                state = next;
            }
            Err(e) => {
                write_manifest(out, config, completed, Some(e.to_string()))?;
                return Err(e);
            }
        }
    }

    let rec = read_rounds(out, config.rounds)?;
    formats::write_jsonl(&out.join("metrics.jsonl"), formats::METRICS, &rec.metrics)?;
    formats::write_jsonl(&out.join("filter_report.jsonl"), formats::FILTER_REPORT, &rec.filters)?;
    formats::write_jsonl(&out.join("conflicts.jsonl"), formats::CONFLICTS, &rec.conflicts)?;
    let report = exp.report(&rec.summaries, rec.metrics);
    formats::write_json(&out.join("report.json"), formats::REPORT, &report)?;
    write_manifest(out, config, completed, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterAnalysis {
    pub retention: Vec<RetentionSummary>,
    pub sweep: Vec<SweepSelection>,
}

/// Accepts a run directory or a `filter_report.jsonl` path.
pub fn filter_report_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("filter_report.jsonl")
    } else {
        path.to_path_buf()
    }
}

/// Histograms and retention summaries for a filter report, plus an optional
/// offline sweep. The sweep re-selects in the run's direction, read from the
/// neighbouring config.toml when present (max otherwise).
pub fn filter_analyze(path: &Path, bins: usize, sweep: &[f64]) -> Result<FilterAnalysis> {
    let report_path = filter_report_path(path);
    let records: Vec<FilterRecord> = formats::read_jsonl(&report_path, formats::FILTER_REPORT)?;
    for &rho in sweep {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(CongradError::validation("rho", format!("{rho} is outside (0, 1]")));
        }
    }
    let mut base = crate::filtering::FilterConfig::default();
    let cfg_path = report_path.with_file_name("config.toml");
    if cfg_path.exists() {
        base = ExperimentConfig::load(&cfg_path)?.filter;
    }
    Ok(FilterAnalysis {
        retention: analyze_filters(&records, bins)?,
        sweep: offline_sweep(&records, &base, sweep)?,
    })
}

pub fn render_filter_analysis(a: &FilterAnalysis) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("# Filter analysis\n\n");
    if a.retention.is_empty() {
        s.push_str("No filter records (round 1 trains on every pair).\n");
    } else {
        s.push_str("| round | language | kind | retained | retained mean | dropped mean | histogram |\n|---|---|---|---|---|---|---|\n");
        for r in &a.retention {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| x.to_string());
            let _ = writeln!(
                s,
                "| {} | {} | {:?} | {}/{} | {} | {} | {:?} |",
                r.round,
                r.language,
                r.kind,
                r.retained,
                r.count,
                f(r.retained_mean),
                f(r.dropped_mean),
                r.histogram.counts
            );
        }
    }
    if !a.sweep.is_empty() {
        s.push_str(
            "\n## Offline re-selection\n\n| rho | round | language | retained | quota |\n|---|---|---|---|---|\n",
        );
        for x in &a.sweep {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {}/{} | {} |",
                x.retain_fraction,
                x.round,
                x.language,
                x.retained.len(),
                x.candidates,
                x.quota
            );
        }
    }
    s
}

/// Accepts run directories or `report.json` paths.
pub fn load_reports(inputs: &[PathBuf]) -> Result<Vec<ExperimentReport>> {
    inputs
        .iter()
        .map(|p| {
            let path = if p.is_dir() { p.join("report.json") } else { p.clone() };
            formats::read_json(&path, formats::REPORT)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub markdown: PathBuf,
    pub series: PathBuf,
}

/// Render `report.md` and `series.csv` into `out`.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<ReportFiles> {
    let reports = load_reports(inputs)?;
    if reports.iter().all(|r| r.metrics.is_empty()) {
        log::warn!("no metrics found; writing an empty report");
    }
    let _lock = DirLock::acquire(out)?;
    let files = ReportFiles {
        markdown: out.join("report.md"),
        series: out.join("series.csv"),
    };
    fs::write(&files.markdown, render_markdown(&reports)).map_err(|e| CongradError::io(&files.markdown, e))?;
    fs::write(&files.series, render_series(&reports)).map_err(|e| CongradError::io(&files.series, e))?;
    Ok(files)
}
