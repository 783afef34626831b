//! Self-rewarding iterative training with consensus-gradient filtering.
//!
//! Each round: sample `k` candidates per prompt from the current policy,
//! score them with the judge, pair the best against the worst (ties
//! discarded), filter the pairs (from round 2 onward), and run one epoch of
//! LP-DPO gradient descent against the round-start policy. Per-language
//! minibatch gradients feed compressed EMA stores whose snapshots become the
//! consensus direction used to filter the next round's data.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::consensus::{consensus, ConflictRecord, ConsensusGradient, TaskGradients};
use crate::error::{CongradError, Result};
use crate::filtering::{
    baseline_score, congrad_score, random_sample_seed, select, FilterConfig, FilterKind, FilterScore,
};
use crate::grad_store::{EmaConfig, LanguageGradientStore};
use crate::lowrank::{unflatten, FlatVector};
use crate::preference::{
    batch_gradient, joint_loss, mean_lp_dpo_loss, preference_margin, sample_gradient, sgd_step, DpoConfig,
    PreferencePair, Token, ToyPolicy,
};
use crate::seed;

pub const MAX_SCORE: i32 = 5;

/// A synthetic prompt: its language, global id and the ideal response the
/// judge rewards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub language: String,
    pub prompt_id: usize,
    pub target: Vec<Token>,
}

/// Prompts plus held-out evaluation pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub prompts: Vec<PromptSpec>,
    pub heldout: BTreeMap<String, Vec<PreferencePair>>,
}

/// Tokens available to language `index` of `count`.
pub fn token_region(index: usize, count: usize, vocab: usize, overlap: f64) -> Vec<Token> {
    let base = (vocab / count).max(2).min(vocab);
    let size = base + ((vocab - base) as f64 * overlap).round() as usize;
    (0..size).map(|j| ((index * base + j) % vocab) as Token).collect()
}

impl Scenario {
    /// Each language gets a token region and an attractor token inside it.
    /// A prompt's target opens with a token drawn from the region and then
    /// repeats the attractor. Every language pulls the shared bigram rows
    /// toward its own attractor, so languages conflict; `overlap` controls
    /// how many opening tokens they share.
    ///
    /// Held-out pairs are built like training pairs, from candidates sampled
    /// off the seed policy, but scored by the noise-free judge.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut prompts = Vec::with_capacity(cfg.num_prompts());
        let count = cfg.languages.len();
        for (li, lang) in cfg.languages.iter().enumerate() {
            let region = token_region(li, count, cfg.vocab_size, cfg.scenario.overlap);
            let mut rng = seed::rng(seed::derive_named(cfg.seed, "scenario", &[seed::hash_str(lang)]));
            // drawn from the language's own block, so attractors differ
            let own = (cfg.vocab_size / count).clamp(1, region.len());
            let attractor = region[rng.random_range(0..own)];
            for pi in 0..cfg.prompts_per_language {
                let mut target = vec![attractor; cfg.max_len];
                target[0] = region[rng.random_range(0..region.len())];
                prompts.push(PromptSpec {
                    language: lang.clone(),
                    prompt_id: li * cfg.prompts_per_language + pi,
                    target,
                });
            }
        }

        let seed_policy = seed_policy_for(&prompts, cfg)?;
        let clean = JudgeModel::new(Vec::new(), 0.0, 0);
        let mut heldout: BTreeMap<String, Vec<PreferencePair>> =
            cfg.languages.iter().map(|l| (l.clone(), Vec::new())).collect();
        for p in &prompts {
            for h in 0..cfg.scenario.heldout_per_prompt {
                let s = seed::derive_named(cfg.seed, "heldout", &[p.prompt_id as u64, h as u64]);
                let candidates = generate_candidates(&seed_policy, p.prompt_id, cfg.candidates, cfg.min_len, s)?;
                let scores: Vec<i32> = candidates.iter().map(|c| clean.clean_score(&p.target, c)).collect();
                if let Some((w, l)) = build_pairs(&candidates, &scores) {
                    heldout
                        .get_mut(&p.language)
                        .expect("configured language")
                        .push(PreferencePair {
                            language: p.language.clone(),
                            prompt_id: p.prompt_id,
                            chosen: candidates[w].clone(),
                            rejected: candidates[l].clone(),
                            chosen_score: scores[w],
                            rejected_score: scores[l],
                        });
                }
            }
        }
        Ok(Self { prompts, heldout })
    }

    pub fn validate(&self, cfg: &ExperimentConfig) -> Result<()> {
        if self.prompts.len() != cfg.num_prompts() {
            return Err(CongradError::invalid(format!(
                "scenario has {} prompts, config expects {}",
                self.prompts.len(),
                cfg.num_prompts()
            )));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            if p.prompt_id != i || !cfg.languages.contains(&p.language) {
                return Err(CongradError::invalid(format!(
                    "prompt record {i} does not match the config"
                )));
            }
            if p.target.is_empty() || p.target.iter().any(|&t| t as usize >= cfg.vocab_size) {
                return Err(CongradError::invalid(format!("prompt {i} has an invalid target")));
            }
        }
        for pairs in self.heldout.values() {
            for p in pairs {
                p.validate(cfg.max_len)?;
            }
        }
        Ok(())
    }

    pub fn judge(&self, cfg: &ExperimentConfig) -> JudgeModel {
        JudgeModel::new(
            self.prompts.iter().map(|p| p.target.clone()).collect(),
            cfg.scenario.judge_noise_std,
            seed::derive_named(cfg.seed, "judge-noise", &[]),
        )
    }

    /// Seed ("instruction-tuned") policy: a prior of strength `init_warmth`
    /// toward each prompt's first target token and toward the pooled target
    /// transitions, plus seeded logit noise.
    pub fn seed_policy(&self, cfg: &ExperimentConfig) -> Result<ToyPolicy> {
        seed_policy_for(&self.prompts, cfg)
    }
}

fn seed_policy_for(prompts: &[PromptSpec], cfg: &ExperimentConfig) -> Result<ToyPolicy> {
    let mut policy = ToyPolicy::random(
        cfg.num_prompts(),
        cfg.vocab_size,
        cfg.max_len,
        cfg.scenario.init_std,
        seed::derive_named(cfg.seed, "policy-init", &[]),
    )?;
    let warmth = cfg.scenario.init_warmth;
    let v = cfg.vocab_size;
    let mut counts = vec![0.0f64; v * v];
    for p in prompts {
        let x = policy.first_token().get(p.prompt_id, p.target[0] as usize);
        policy
            .first_token_mut()
            .set(p.prompt_id, p.target[0] as usize, x + warmth);
        for w in p.target.windows(2) {
            counts[w[0] as usize * v + w[1] as usize] += 1.0;
        }
    }
    for a in 0..v {
        let row_total: f64 = counts[a * v..(a + 1) * v].iter().sum();
        if row_total == 0.0 {
            continue;
        }
        for b in 0..v {
            let x = policy.bigram().get(a, b);
            policy
                .bigram_mut()
                .set(a, b, x + warmth * counts[a * v + b] / row_total);
        }
    }
    Ok(policy)
}

/// Scripted stand-in for the LLM judge: an integer score in `[0, 5]` from
/// positional agreement with the prompt's hidden target, plus seeded noise in
/// `{-1, 0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeModel {
    targets: Vec<Vec<Token>>,
    noise_std: f64,
    seed: u64,
}

impl JudgeModel {
    pub fn new(targets: Vec<Vec<Token>>, noise_std: f64, seed: u64) -> Self {
        Self {
            targets,
            noise_std,
            seed,
        }
    }

    /// Fraction of positions agreeing with the target, over the longer of
    /// the two lengths.
    pub fn similarity(target: &[Token], response: &[Token]) -> f64 {
        let denom = target.len().max(response.len());
        if denom == 0 {
            return 0.0;
        }
        let hits = target.iter().zip(response).filter(|(a, b)| a == b).count();
        hits as f64 / denom as f64
    }

    fn clean_score(&self, target: &[Token], response: &[Token]) -> i32 {
        (f64::from(MAX_SCORE) * Self::similarity(target, response)).round() as i32
    }

    /// Score of candidate `index` for `prompt_id` in `round`.
    pub fn score(&self, round: u32, prompt_id: usize, index: usize, response: &[Token]) -> Result<i32> {
        let target = self
            .targets
            .get(prompt_id)
            .ok_or_else(|| CongradError::invalid(format!("judge has no target for prompt {prompt_id}")))?;
        let mut rng = seed::rng(seed::derive(
            self.seed,
            &[u64::from(round), prompt_id as u64, index as u64],
        ));
        let noise = (self.noise_std * rng.sample::<f64, _>(StandardNormal))
            .round()
            .clamp(-1.0, 1.0) as i32;
        Ok((self.clean_score(target, response) + noise).clamp(0, MAX_SCORE))
    }
}

/// `k` responses sampled ancestrally from the policy, each with a length
/// drawn uniformly from `min_len..=max_len`.
pub fn generate_candidates(
    policy: &ToyPolicy,
    prompt_id: usize,
    k: usize,
    min_len: usize,
    seed: u64,
) -> Result<Vec<Vec<Token>>> {
    if k < 2 {
        return Err(CongradError::invalid("need at least two candidates"));
    }
    if prompt_id >= policy.num_prompts() {
        return Err(CongradError::invalid(format!("prompt {prompt_id} out of range")));
    }
    if min_len == 0 || min_len > policy.max_len() {
        return Err(CongradError::invalid("min_len must lie in [1, max_len]"));
    }
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let len = rng.random_range(min_len..=policy.max_len());
        let mut seq = Vec::with_capacity(len);
        let mut prev = None;
        for _ in 0..len {
            let probs = policy.next_token_probs(prompt_id, prev);
            let t = sample_index(&probs, rng.random::<f64>()) as Token;
            seq.push(t);
            prev = Some(t);
        }
        out.push(seq);
    }
    Ok(out)
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Highest- vs lowest-scoring candidate (lowest index wins ties), or `None`
/// when all scores are equal.
pub fn build_pairs(candidates: &[Vec<Token>], scores: &[i32]) -> Option<(usize, usize)> {
    if candidates.len() != scores.len() || scores.is_empty() {
        return None;
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    if scores[best] == scores[worst] || candidates[best] == candidates[worst] {
        return None;
    }
    Some((best, worst))
}

/// Consensus direction plus where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusState {
    pub gradient: ConsensusGradient,
    /// Round whose EMA stores produced this consensus.
    pub source_round: u32,
    /// Store step counters at snapshot time.
    pub store_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    /// Round about to run (1-based).
    pub round: u32,
    pub policy: ToyPolicy,
    pub ref_policy: ToyPolicy,
    pub consensus_prev: Option<ConsensusState>,
    pub stores: BTreeMap<String, LanguageGradientStore>,
    pub rng_seed: u64,
}

impl RoundState {
    pub fn initial(policy: ToyPolicy, rng_seed: u64) -> Self {
        Self {
            round: 1,
            ref_policy: policy.clone(),
            policy,
            consensus_prev: None,
            stores: BTreeMap::new(),
            rng_seed,
        }
    }
}

/// Everything a round needs besides the evolving state.
#[derive(Debug, Clone)]
pub struct RoundContext<'a> {
    pub config: &'a ExperimentConfig,
    pub scenario: &'a Scenario,
    pub judge: &'a JudgeModel,
    pub seed_policy: &'a ToyPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub round: u32,
    pub language: String,
    pub sample_id: usize,
    pub kind: FilterKind,
    pub score: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReportRecord {
    pub round: u32,
    pub language: String,
    pub other: String,
    pub cosine: f64,
    pub projected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub round: u32,
    pub sample_id: usize,
    #[serde(flatten)]
    pub pair: PreferencePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u32,
    pub language: String,
    pub preference_accuracy: f64,
    pub mean_lp_dpo_loss: f64,
    pub pair_count: usize,
    pub retained_count: usize,
    pub conflict_count: usize,
    pub mean_congrad_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub language: String,
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Filtering provenance for rounds that filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub kind: FilterKind,
    pub retain_fraction: f64,
    pub consensus_source_round: u32,
    pub consensus_store_steps: BTreeMap<String, u64>,
    pub score_summary: Vec<ScoreSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub total_pairs: usize,
    pub trained_pairs: usize,
    pub skipped_languages: Vec<String>,
    pub filter: Option<FilterStats>,
    pub conflicts_resolved: usize,
    pub store_steps: BTreeMap<String, u64>,
    pub heldout_joint_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub summary: RoundSummary,
    pub pairs: Vec<PairRecord>,
    pub filter_records: Vec<FilterRecord>,
    pub conflicts: Vec<ConflictReportRecord>,
    pub metrics: Vec<MetricsRecord>,
    /// Reference log-probs of a probe set at the start and end of the epoch.
    pub reference_probe: (Vec<f64>, Vec<f64>),
}

fn round_ema_config(cfg: &ExperimentConfig, round: u32) -> EmaConfig {
    EmaConfig {
        seed: seed::derive_named(cfg.seed, "ema", &[cfg.ema.seed, u64::from(round)]),
        ..cfg.ema
    }
}

/// Per-language held-out accuracy and loss against the seed policy.
fn heldout_metrics(
    policy: &ToyPolicy,
    seed_policy: &ToyPolicy,
    pairs: &[PreferencePair],
    dpo: &DpoConfig,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut positive = 0usize;
    for p in pairs {
        if preference_margin(policy, seed_policy, p)? > 0.0 {
            positive += 1;
        }
    }
    let loss = mean_lp_dpo_loss(policy, seed_policy, pairs, dpo)?;
    Ok((positive as f64 / pairs.len() as f64, loss))
}

fn summarize(scores: &[FilterScore]) -> Vec<ScoreSummary> {
    let mut by_lang: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in scores {
        by_lang.entry(&s.language).or_default().push(s.score);
    }
    by_lang
        .into_iter()
        .map(|(lang, v)| ScoreSummary {
            language: lang.to_string(),
            count: v.len(),
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

/// Generate, judge and pair candidates for every prompt of the round.
pub fn collect_pairs(state: &RoundState, ctx: &RoundContext<'_>) -> Result<BTreeMap<String, Vec<PreferencePair>>> {
    let cfg = ctx.config;
    let mut datasets: BTreeMap<String, Vec<PreferencePair>> =
        cfg.languages.iter().map(|l| (l.clone(), Vec::new())).collect();
    for p in &ctx.scenario.prompts {
        let s = seed::derive_named(
            state.rng_seed,
            "generate",
            &[u64::from(state.round), p.prompt_id as u64],
        );
        let candidates = generate_candidates(&state.policy, p.prompt_id, cfg.candidates, cfg.min_len, s)?;
        let scores = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| ctx.judge.score(state.round, p.prompt_id, i, c))
            .collect::<Result<Vec<_>>>()?;
        if let Some((w, l)) = build_pairs(&candidates, &scores) {
            datasets
                .get_mut(&p.language)
                .expect("configured language")
                .push(PreferencePair {
                    language: p.language.clone(),
                    prompt_id: p.prompt_id,
                    chosen: candidates[w].clone(),
                    rejected: candidates[l].clone(),
                    chosen_score: scores[w],
                    rejected_score: scores[l],
                });
        }
    }
    Ok(datasets)
}

/// One self-rewarding round. Returns the state for the next round.
pub fn run_round(state: &RoundState, ctx: &RoundContext<'_>) -> Result<(RoundState, RoundOutput)> {
    let cfg = ctx.config;
    let round = state.round;
    let reference = state.policy.clone();

    let mut datasets = collect_pairs(state, ctx)?;
    let skipped: Vec<String> = datasets
        .iter()
        .filter(|(_, v)| v.is_empty())
        .map(|(l, _)| l.clone())
        .collect();
    for l in &skipped {
        log::warn!("round {round}: every pair for language `{l}` was discarded; skipping it");
        datasets.remove(l);
    }
    if datasets.is_empty() {
        return Err(CongradError::EmptyData(format!(
            "round {round} produced no preference pairs"
        )));
    }

    let pairs: Vec<PairRecord> = datasets
        .values()
        .flat_map(|v| {
            v.iter().enumerate().map(|(i, p)| PairRecord {
                round,
                sample_id: i,
                pair: p.clone(),
            })
        })
        .collect();

    // scoring against the previous round's consensus (round >= 2 only)
    let mut filter_records = Vec::new();
    let mut filter_stats = None;
    let mut congrad_means: BTreeMap<String, f64> = BTreeMap::new();
    let selected: BTreeMap<String, Vec<PreferencePair>> = match (&state.consensus_prev, round) {
        (Some(prev), r) if r >= 2 => {
            let mut congrad = Vec::new();
            let mut arm_scores = Vec::new();
            for (lang, list) in &datasets {
                let mut total = 0.0;
                for (i, pair) in list.iter().enumerate() {
                    let g = sample_gradient(&state.policy, &reference, pair, &cfg.dpo)?;
                    let c = congrad_score(&g, &prev.gradient)?;
                    total += c;
                    congrad.push(FilterScore {
                        sample_id: i,
                        language: lang.clone(),
                        score: c,
                        kind: FilterKind::Congrad,
                    });
                    if cfg.filter.kind != FilterKind::Congrad {
                        let rs = random_sample_seed(
                            seed::derive(state.rng_seed, &[cfg.filter.seed]),
                            u64::from(round),
                            lang,
                            i,
                        );
                        arm_scores.push(FilterScore {
                            sample_id: i,
                            language: lang.clone(),
                            score: baseline_score(pair, cfg.filter.kind, rs)?,
                            kind: cfg.filter.kind,
                        });
                    }
                }
                congrad_means.insert(lang.clone(), total / list.len() as f64);
            }
            let scores = if cfg.filter.kind == FilterKind::Congrad {
                congrad
            } else {
                arm_scores
            };
            let keep = select(&scores, &cfg.filter)?;
            for s in &scores {
                filter_records.push(FilterRecord {
                    round,
                    language: s.language.clone(),
                    sample_id: s.sample_id,
                    kind: s.kind,
                    score: s.score,
                    retained: keep[&s.language].contains(&s.sample_id),
                });
            }
            filter_stats = Some(FilterStats {
                kind: cfg.filter.kind,
                retain_fraction: cfg.filter.retain_fraction,
                consensus_source_round: prev.source_round,
                consensus_store_steps: prev.store_steps.clone(),
                score_summary: summarize(&scores),
            });
            datasets
                .iter()
                .map(|(lang, list)| {
                    let ids = &keep[lang];
                    let kept = list
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| ids.contains(i))
                        .map(|(_, p)| p.clone())
                        .collect();
                    (lang.clone(), kept)
                })
                .collect()
        }
        _ => datasets.clone(),
    };

    // one epoch of LP-DPO; per-language minibatches feed fresh EMA stores
    let ema_cfg = round_ema_config(cfg, round);
    let shapes = state.policy.param_shapes();
    let mut stores: BTreeMap<String, LanguageGradientStore> = selected
        .keys()
        .map(|l| Ok((l.clone(), LanguageGradientStore::new(l.clone(), &shapes, ema_cfg)?)))
        .collect::<Result<_>>()?;

    let mut order_rng = seed::rng(seed::derive_named(state.rng_seed, "batch-order", &[u64::from(round)]));
    let mut batches: Vec<(&String, &[PreferencePair])> = Vec::new();
    for (lang, list) in &selected {
        for chunk in list.chunks(cfg.batch_size) {
            batches.push((lang, chunk));
        }
    }
    batches.shuffle(&mut order_rng);

    let probe: Vec<&PreferencePair> = selected.values().filter_map(|v| v.first()).collect();
    let probe_lp =
        |p: &ToyPolicy| -> Result<Vec<f64>> { probe.iter().map(|pp| p.log_prob(pp.prompt_id, &pp.chosen)).collect() };
    let probe_before = probe_lp(&reference)?;

    let mut policy = state.policy.clone();
    for (lang, batch) in &batches {
        let grad = batch_gradient(&policy, &reference, batch, &cfg.dpo)?;
        stores
            .get_mut(*lang)
            .expect("store per selected language")
            .ema_update(&unflatten(&grad, &shapes)?)?;
        policy = sgd_step(&policy, &grad, cfg.learning_rate)?;
    }
    let probe_after = probe_lp(&reference)?;

    // consensus from this round's stores, used to filter the next round
    let mut snapshots = BTreeMap::new();
    let mut store_steps = BTreeMap::new();
    for (lang, store) in &stores {
        store_steps.insert(lang.clone(), store.step());
        if store.step() > 0 {
            snapshots.insert(lang.clone(), store.snapshot()?);
        }
    }
    let outcome = consensus(
        &TaskGradients::new(snapshots)?,
        seed::derive_named(state.rng_seed, "consensus", &[u64::from(round)]),
    )?;
    let conflicts: Vec<ConflictReportRecord> = outcome
        .report
        .iter()
        .map(|c: &ConflictRecord| ConflictReportRecord {
            round,
            language: c.language.clone(),
            other: c.other.clone(),
            cosine: c.cosine,
            projected: c.projected,
        })
        .collect();

    let mut metrics = Vec::new();
    for lang in &cfg.languages {
        let heldout = ctx.scenario.heldout.get(lang).map(Vec::as_slice).unwrap_or(&[]);
        let (acc, loss) = heldout_metrics(&policy, ctx.seed_policy, heldout, &cfg.dpo)?;
        metrics.push(MetricsRecord {
            round,
            language: lang.clone(),
            preference_accuracy: acc,
            mean_lp_dpo_loss: loss,
            pair_count: datasets.get(lang).map_or(0, Vec::len),
            retained_count: selected.get(lang).map_or(0, Vec::len),
            conflict_count: conflicts.iter().filter(|c| &c.language == lang && c.projected).count(),
            mean_congrad_score: congrad_means.get(lang).copied(),
        });
    }
    let heldout_joint_loss = joint_loss(&policy, ctx.seed_policy, &ctx.scenario.heldout, &cfg.dpo)?;

    let summary = RoundSummary {
        round,
        total_pairs: datasets.values().map(Vec::len).sum(),
        trained_pairs: selected.values().map(Vec::len).sum(),
        skipped_languages: skipped,
        filter: filter_stats,
        conflicts_resolved: outcome.gradient.conflicts_resolved,
        store_steps: store_steps.clone(),
        heldout_joint_loss,
    };

    let next = RoundState {
        round: round + 1,
        ref_policy: policy.clone(),
        policy,
        consensus_prev: Some(ConsensusState {
            gradient: outcome.gradient,
            source_round: round,
            store_steps,
        }),
        stores,
        rng_seed: state.rng_seed,
    };
    Ok((
        next,
        RoundOutput {
            summary,
            pairs,
            filter_records,
            conflicts,
            metrics,
            reference_probe: (probe_before, probe_after),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub arm: String,
    pub retain_fraction: f64,
    pub seed: u64,
    pub rounds: Vec<RoundSummary>,
    pub metrics: Vec<MetricsRecord>,
    pub final_heldout_joint_loss: f64,
}

/// Prepared experiment: scenario, judge and seed policy for a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scenario: Scenario,
    pub judge: JudgeModel,
    pub seed_policy: ToyPolicy,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, scenario: Scenario) -> Result<Self> {
        config.validate()?;
        scenario.validate(&config)?;
        let judge = scenario.judge(&config);
        let seed_policy = scenario.seed_policy(&config)?;
        Ok(Self {
            config,
            scenario,
            judge,
            seed_policy,
        })
    }

    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        let scenario = Scenario::generate(&config)?;
        Self::new(config, scenario)
    }

    pub fn initial_state(&self) -> RoundState {
        RoundState::initial(self.seed_policy.clone(), self.config.seed)
    }

    pub fn context(&self) -> RoundContext<'_> {
        RoundContext {
            config: &self.config,
            scenario: &self.scenario,
            judge: &self.judge,
            seed_policy: &self.seed_policy,
        }
    }

    pub fn report(&self, outputs: &[RoundSummary], metrics: Vec<MetricsRecord>) -> ExperimentReport {
        ExperimentReport {
            arm: self.config.filter.arm().to_string(),
            retain_fraction: self.config.filter.retain_fraction,
            seed: self.config.seed,
            rounds: outputs.to_vec(),
            metrics,
            final_heldout_joint_loss: outputs.last().map_or(f64::NAN, |r| r.heldout_joint_loss),
        }
    }
}

/// Run all configured rounds in memory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(ExperimentReport, Vec<RoundOutput>)> {
    let exp = Experiment::from_config(config.clone())?;
    let ctx = exp.context();
    let mut state = exp.initial_state();
    let mut outputs = Vec::with_capacity(config.rounds as usize);
    for _ in 0..config.rounds {
        let (next, out) = run_round(&state, &ctx)?;
        state = next;
        outputs.push(out);
    }
    let summaries: Vec<RoundSummary> = outputs.iter().map(|o| o.summary.clone()).collect();
    let metrics = outputs.iter().flat_map(|o| o.metrics.clone()).collect();
    Ok((exp.report(&summaries, metrics), outputs))
}

/// Offline re-selection of recorded filter scores at a different fraction.
pub fn reselect(
    records: &[FilterRecord],
    base: &FilterConfig,
    rho: f64,
) -> Result<BTreeMap<(u32, String), BTreeSet<usize>>> {
    let mut by_round: BTreeMap<u32, Vec<FilterScore>> = BTreeMap::new();
    for r in records {
        by_round.entry(r.round).or_default().push(FilterScore {
            sample_id: r.sample_id,
            language: r.language.clone(),
            score: r.score,
            kind: r.kind,
        });
    }
    let cfg = FilterConfig {
        retain_fraction: rho,
        ..*base
    };
    let mut out = BTreeMap::new();
    for (round, scores) in by_round {
        for (lang, ids) in select(&scores, &cfg)? {
            out.insert((round, lang), ids);
        }
    }
    Ok(out)
}

/// Flat gradient helper for callers that want the per-sample gradient of a
/// recorded pair under a given policy.
pub fn pair_gradient(policy: &ToyPolicy, pair: &PreferencePair, dpo: &DpoConfig) -> Result<FlatVector> {
    sample_gradient(policy, policy, pair, dpo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::DenseMatrix;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            languages: vec!["a".into(), "b".into()],
            prompts_per_language: 12,
            rounds: 2,
            vocab_size: 8,
            max_len: 5,
            min_len: 3,
            learning_rate: 0.2,
            batch_size: 4,
            seed: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn degenerate_policy_repeats_itself() {
        let mut first = DenseMatrix::zeros(1, 3);
        first.set(0, 2, 1e6);
        let mut bigram = DenseMatrix::zeros(3, 3);
        for a in 0..3 {
            bigram.set(a, (a + 1) % 3, 1e6);
        }
        let policy = ToyPolicy::from_params(4, first, bigram).unwrap();
        let c = generate_candidates(&policy, 0, 5, 4, 1).unwrap();
        assert!(c.iter().all(|s| s == &vec![2, 0, 1, 2]));
    }

    #[test]
    fn generation_is_seeded() {
        let policy = ToyPolicy::random(2, 5, 6, 1.0, 1).unwrap();
        assert_eq!(
            generate_candidates(&policy, 1, 4, 2, 9).unwrap(),
            generate_candidates(&policy, 1, 4, 2, 9).unwrap()
        );
        assert!(generate_candidates(&policy, 1, 1, 2, 9).is_err());
        assert!(generate_candidates(&policy, 2, 4, 2, 9).is_err());
        for c in generate_candidates(&policy, 0, 20, 2, 5).unwrap() {
            assert!((2..=6).contains(&c.len()));
        }
    }

    #[test]
    fn pair_construction() {
        let c: Vec<Vec<Token>> = (0..4).map(|i| vec![i]).collect();
        assert_eq!(build_pairs(&c, &[3, 5, 1, 1]), Some((1, 2)));
        assert_eq!(build_pairs(&c, &[4, 4, 4, 4]), None);
        assert_eq!(build_pairs(&c[..2], &[5, 0]), Some((0, 1)));
        // identical token sequences with different scores are not a pair
        let same = vec![vec![1], vec![1]];
        assert_eq!(build_pairs(&same, &[5, 0]), None);
    }

    #[test]
    fn judge_scores_are_bounded_and_seeded() {
        let j = JudgeModel::new(vec![vec![1, 2, 3, 4]], 2.0, 5);
        for i in 0..50 {
            let s = j.score(1, 0, i, &[1, 2, 0]).unwrap();
            assert!((0..=5).contains(&s));
            assert_eq!(s, j.score(1, 0, i, &[1, 2, 0]).unwrap());
        }
        let quiet = JudgeModel::new(vec![vec![1, 2, 3, 4]], 0.0, 5);
        assert_eq!(quiet.score(1, 0, 0, &[1, 2, 3, 4]).unwrap(), 5);
        assert_eq!(quiet.score(1, 0, 0, &[0, 0, 0, 0]).unwrap(), 0);
        assert!(quiet.score(1, 1, 0, &[0]).is_err());
    }

    #[test]
    fn token_regions() {
        assert_eq!(token_region(0, 2, 8, 0.0), vec![0, 1, 2, 3]);
        assert_eq!(token_region(1, 2, 8, 0.0), vec![4, 5, 6, 7]);
        assert_eq!(token_region(1, 2, 8, 1.0).len(), 8);
    }

    #[test]
    fn round_one_trains_on_everything() {
        let exp = Experiment::from_config(small_config()).unwrap();
        let (next, out) = run_round(&exp.initial_state(), &exp.context()).unwrap();
        assert!(out.summary.filter.is_none());
        assert!(out.filter_records.is_empty());
        assert_eq!(out.summary.trained_pairs, out.summary.total_pairs);
        assert_eq!(next.round, 2);
        assert_eq!(next.consensus_prev.as_ref().unwrap().source_round, 1);
        assert_eq!(out.reference_probe.0, out.reference_probe.1);
    }

    #[test]
    fn round_two_filters_with_previous_consensus() {
        let exp = Experiment::from_config(small_config()).unwrap();
        let (s2, out1) = run_round(&exp.initial_state(), &exp.context()).unwrap();
        let (_, out2) = run_round(&s2, &exp.context()).unwrap();
        let stats = out2.summary.filter.as_ref().unwrap();
        assert_eq!(stats.consensus_source_round, 1);
        assert_eq!(stats.consensus_store_steps, out1.summary.store_steps);
        for m in &out2.metrics {
            assert_eq!(m.retained_count, crate::filtering::quota(0.5, m.pair_count));
        }
    }

    #[test]
    fn experiment_is_deterministic() {
        let (a, _) = run_experiment(&small_config()).unwrap();
        let (b, _) = run_experiment(&small_config()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
