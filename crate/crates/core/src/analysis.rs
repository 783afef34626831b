//! Post-hoc analysis of recorded runs: filter score histograms, retention
//! summaries, offline re-selection at other retention fractions, and
//! markdown / series rendering of experiment reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CongradError, Result};
use crate::filtering::{quota, FilterConfig, FilterKind};
use crate::selfloop::{reselect, run_experiment, ExperimentReport, FilterRecord};

pub const SWEEP_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];

/// Equal-width histogram over `[lo, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(CongradError::invalid("histogram needs bins >= 1 and a finite range"));
        }
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let i = if width == 0.0 {
                0
            } else {
                (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
            };
            counts[i] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionSummary {
    pub round: u32,
    pub language: String,
    pub kind: FilterKind,
    pub count: usize,
    pub retained: usize,
    pub retained_mean: Option<f64>,
    pub dropped_mean: Option<f64>,
    pub histogram: Histogram,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-round, per-language score histograms and retention summaries.
/// Congrad scores use the fixed range `[-1, 1]`; other kinds use the
/// observed range.
pub fn analyze_filters(records: &[FilterRecord], bins: usize) -> Result<Vec<RetentionSummary>> {
    let mut groups: BTreeMap<(u32, &str), Vec<&FilterRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.round, &r.language)).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((round, language), recs) in groups {
        let kind = recs[0].kind;
        if recs.iter().any(|r| r.kind != kind) {
            return Err(CongradError::invalid(format!(
                "round {round}, language `{language}` mixes filter kinds"
            )));
        }
        let all: Vec<f64> = recs.iter().map(|r| r.score).collect();
        let kept: Vec<f64> = recs.iter().filter(|r| r.retained).map(|r| r.score).collect();
        let dropped: Vec<f64> = recs.iter().filter(|r| !r.retained).map(|r| r.score).collect();
        let (lo, hi) = if kind == FilterKind::Congrad {
            (-1.0, 1.0)
        } else {
            let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        };
        out.push(RetentionSummary {
            round,
            language: language.to_string(),
            kind,
            count: all.len(),
            retained: kept.len(),
            retained_mean: mean(&kept),
            dropped_mean: mean(&dropped),
            histogram: Histogram::build(&all, lo, hi, bins)?,
        });
    }
    Ok(out)
}

/// Retained set for one (fraction, round, language) under offline re-selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSelection {
    pub retain_fraction: f64,
    pub round: u32,
    pub language: String,
    pub candidates: usize,
    pub quota: usize,
    pub retained: BTreeSet<usize>,
}

/// Re-select recorded scores offline at each fraction in `fractions`.
pub fn offline_sweep(records: &[FilterRecord], base: &FilterConfig, fractions: &[f64]) -> Result<Vec<SweepSelection>> {
    let mut sizes: BTreeMap<(u32, &str), usize> = BTreeMap::new();
    for r in records {
        *sizes.entry((r.round, &r.language)).or_default() += 1;
    }
    let mut out = Vec::new();
    for &rho in fractions {
        for ((round, language), retained) in reselect(records, base, rho)? {
            let candidates = sizes[&(round, language.as_str())];
            out.push(SweepSelection {
                retain_fraction: rho,
                round,
                language,
                candidates,
                quota: quota(rho, candidates),
                retained,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLoss {
    pub retain_fraction: f64,
    pub final_heldout_joint_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub selections: Vec<SweepSelection>,
    pub losses: Vec<SweepLoss>,
}

/// Run `config` once, re-select its recorded scores at every fraction, and
/// retrain at every fraction to compare final held-out losses.
pub fn rho_sweep(config: &ExperimentConfig, fractions: &[f64]) -> Result<SweepReport> {
    let (_, outputs) = run_experiment(config)?;
    let records: Vec<FilterRecord> = outputs.iter().flat_map(|o| o.filter_records.clone()).collect();
    let selections = offline_sweep(&records, &config.filter, fractions)?;
    let mut losses = Vec::with_capacity(fractions.len());
    for &rho in fractions {
        let mut cfg = config.clone();
        cfg.filter.retain_fraction = rho;
        let (report, _) = run_experiment(&cfg)?;
        losses.push(SweepLoss {
            retain_fraction: rho,
            final_heldout_joint_loss: report.final_heldout_joint_loss,
        });
    }
    Ok(SweepReport { selections, losses })
}

fn label(r: &ExperimentReport) -> String {
    format!("{} (rho={}, seed={})", r.arm, r.retain_fraction, r.seed)
}

/// Markdown tables: one per experiment, plus a cross-experiment comparison
/// of held-out joint loss aligned by round.
pub fn render_markdown(reports: &[ExperimentReport]) -> String {
    let mut s = String::from("# Experiment report\n\n");
    if reports.is_empty() {
        s.push_str("No metrics: no experiment reports were given.\n");
        return s;
    }
    let rounds: BTreeSet<u32> = reports.iter().flat_map(|r| r.rounds.iter().map(|x| x.round)).collect();

    s.push_str("## Held-out joint LP-DPO loss by round\n\n| round |");
    for r in reports {
        let _ = write!(s, " {} |", label(r));
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(reports.len()));
    s.push('\n');
    for round in &rounds {
        let _ = write!(s, "| {round} |");
        for r in reports {
            match r.rounds.iter().find(|x| x.round == *round) {
                Some(x) => {
                    let _ = write!(s, " {} |", x.heldout_joint_loss);
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s.push_str("\n## Final held-out joint loss\n\n| run | loss |\n|---|---|\n");
    for r in reports {
        let _ = writeln!(s, "| {} | {} |", label(r), r.final_heldout_joint_loss);
    }

    for r in reports {
        let _ = write!(
            s,
            "\n## {}\n\n| round | pairs | trained | conflicts | joint loss | consensus from |\n|---|---|---|---|---|---|\n",
            label(r)
        );
        for x in &r.rounds {
            let source = x
                .filter
                .as_ref()
                .map_or("-".to_string(), |f| f.consensus_source_round.to_string());
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                x.round, x.total_pairs, x.trained_pairs, x.conflicts_resolved, x.heldout_joint_loss, source
            );
        }
        s.push_str("\n| round | language | accuracy | loss | retained | conflicts | mean congrad |\n|---|---|---|---|---|---|---|\n");
        for m in &r.metrics {
            let c = m.mean_congrad_score.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {}/{} | {} | {} |",
                m.round,
                m.language,
                m.preference_accuracy,
                m.mean_lp_dpo_loss,
                m.retained_count,
                m.pair_count,
                m.conflict_count,
                c
            );
        }
    }
    s
}

/// Plot-ready long-format CSV: `run,round,language,metric,value`.
/// Language `*` marks run-level series.
pub fn render_series(reports: &[ExperimentReport]) -> String {
    let mut s = String::from("run,round,language,metric,value\n");
    for r in reports {
        let run = format!("{}@{}#{}", r.arm, r.retain_fraction, r.seed);
        for x in &r.rounds {
            let _ = writeln!(s, "{run},{},*,heldout_joint_loss,{}", x.round, x.heldout_joint_loss);
            let _ = writeln!(s, "{run},{},*,trained_pairs,{}", x.round, x.trained_pairs);
            let _ = writeln!(s, "{run},{},*,conflicts_resolved,{}", x.round, x.conflicts_resolved);
        }
        for m in &r.metrics {
            let _ = writeln!(
                s,
                "{run},{},{},preference_accuracy,{}",
                m.round, m.language, m.preference_accuracy
            );
            let _ = writeln!(
                s,
                "{run},{},{},mean_lp_dpo_loss,{}",
                m.round, m.language, m.mean_lp_dpo_loss
            );
        }
    }
    s
}
