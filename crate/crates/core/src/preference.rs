//! Toy sequence policy and the DPO family of preference losses with exact
//! per-sample gradients.
//!
//! The policy scores a response `y` to prompt `x` as
//! `log p(y|x) = log softmax(F[x])[y₀] + Σₜ log softmax(B[yₜ₋₁])[yₜ]`,
//! where `F` is a per-prompt first-token logit table and `B` a shared bigram
//! logit table. Parameters are registered in the order `[F, B]`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CongradError, Result};
use crate::lowrank::{flatten_concat, unflatten, DenseMatrix, FlatVector};
use crate::seed;

pub type Token = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    vocab_size: usize,
    max_len: usize,
    first_token: DenseMatrix,
    bigram: DenseMatrix,
}

impl ToyPolicy {
    pub fn from_params(max_len: usize, first_token: DenseMatrix, bigram: DenseMatrix) -> Result<Self> {
        let vocab_size = bigram.rows();
        if bigram.cols() != vocab_size || first_token.cols() != vocab_size {
            return Err(CongradError::ShapeMismatch {
                expected: format!("first-token Px{vocab_size} and bigram {vocab_size}x{vocab_size}"),
                got: format!("{:?} and {:?}", first_token.shape(), bigram.shape()),
            });
        }
        if max_len == 0 {
            return Err(CongradError::invalid("max_len must be positive"));
        }
        Ok(Self {
            vocab_size,
            max_len,
            first_token,
            bigram,
        })
    }

    /// All logits zero: every position is uniform over the vocabulary.
    pub fn uniform(num_prompts: usize, vocab_size: usize, max_len: usize) -> Result<Self> {
        if num_prompts == 0 || vocab_size == 0 {
            return Err(CongradError::invalid("policy needs at least one prompt and one token"));
        }
        Self::from_params(
            max_len,
            DenseMatrix::zeros(num_prompts, vocab_size),
            DenseMatrix::zeros(vocab_size, vocab_size),
        )
    }

    /// Logits drawn i.i.d. from N(0, std²).
    pub fn random(num_prompts: usize, vocab_size: usize, max_len: usize, std: f64, seed: u64) -> Result<Self> {
        let mut p = Self::uniform(num_prompts, vocab_size, max_len)?;
        let mut rng = seed::rng(seed);
        for v in p.first_token.as_mut_slice().iter_mut().chain(p.bigram.as_mut_slice()) {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(p)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn num_prompts(&self) -> usize {
        self.first_token.rows()
    }

    pub fn first_token(&self) -> &DenseMatrix {
        &self.first_token
    }

    pub fn bigram(&self) -> &DenseMatrix {
        &self.bigram
    }

    pub fn first_token_mut(&mut self) -> &mut DenseMatrix {
        &mut self.first_token
    }

    pub fn bigram_mut(&mut self) -> &mut DenseMatrix {
        &mut self.bigram
    }

    /// Parameter shapes in registration order.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        vec![self.first_token.shape(), self.bigram.shape()]
    }

    pub fn num_params(&self) -> usize {
        self.first_token.len() + self.bigram.len()
    }

    pub fn flat_params(&self) -> FlatVector {
        flatten_concat(&[self.first_token.clone(), self.bigram.clone()]).expect("two matrices")
    }

    fn bigram_offset(&self) -> usize {
        self.first_token.len()
    }

    /// Next-token distribution after `prev`, or the first-token distribution
    /// of `prompt_id` when `prev` is `None`.
    pub fn next_token_probs(&self, prompt_id: usize, prev: Option<Token>) -> Vec<f64> {
        let row = match prev {
            None => self.first_token.row(prompt_id),
            Some(t) => self.bigram.row(t as usize),
        };
        softmax(row)
    }

    fn check(&self, prompt_id: usize, seq: &[Token]) -> Result<()> {
        if prompt_id >= self.num_prompts() {
            return Err(CongradError::invalid(format!(
                "prompt {prompt_id} out of range (policy has {} prompts)",
                self.num_prompts()
            )));
        }
        if seq.is_empty() || seq.len() > self.max_len {
            return Err(CongradError::invalid(format!(
                "sequence length {} outside [1, {}]",
                seq.len(),
                self.max_len
            )));
        }
        if let Some(t) = seq.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(CongradError::invalid(format!(
                "token {t} out of vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn log_prob(&self, prompt_id: usize, seq: &[Token]) -> Result<f64> {
        self.check(prompt_id, seq)?;
        let mut lp = log_softmax_at(self.first_token.row(prompt_id), seq[0] as usize);
        for w in seq.windows(2) {
            lp += log_softmax_at(self.bigram.row(w[0] as usize), w[1] as usize);
        }
        Ok(lp)
    }

    /// `grad += scale · ∇ log p(seq | prompt)` in flattened parameter order.
    fn accumulate_log_prob_grad(&self, prompt_id: usize, seq: &[Token], scale: f64, grad: &mut [f64]) {
        let v = self.vocab_size;
        let mut add_row = |offset: usize, logits: &[f64], target: usize| {
            let probs = softmax(logits);
            for (j, p) in probs.iter().enumerate() {
                grad[offset + j] -= scale * p;
            }
            grad[offset + target] += scale;
        };
        add_row(prompt_id * v, self.first_token.row(prompt_id), seq[0] as usize);
        let base = self.bigram_offset();
        for w in seq.windows(2) {
            let prev = w[0] as usize;
            add_row(base + prev * v, self.bigram.row(prev), w[1] as usize);
        }
    }

    fn same_shape(&self, other: &ToyPolicy) -> Result<()> {
        if self.param_shapes() != other.param_shapes() {
            return Err(CongradError::ShapeMismatch {
                expected: format!("{:?}", self.param_shapes()),
                got: format!("{:?}", other.param_shapes()),
            });
        }
        Ok(())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[idx] - lse
}

/// `-log σ(z)`, evaluated without overflow.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z < 0.0 {
        -z + z.exp().ln_1p()
    } else {
        (-z).exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferencePair {
    pub language: String,
    pub prompt_id: usize,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    pub chosen_score: i32,
    pub rejected_score: i32,
}

impl PreferencePair {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(CongradError::invalid("chosen and rejected responses are identical"));
        }
        if self.chosen_score <= self.rejected_score {
            return Err(CongradError::invalid(format!(
                "chosen score {} does not exceed rejected score {}",
                self.chosen_score, self.rejected_score
            )));
        }
        for seq in [&self.chosen, &self.rejected] {
            if seq.is_empty() || seq.len() > max_len {
                return Err(CongradError::invalid(format!(
                    "response length {} outside [1, {max_len}]",
                    seq.len()
                )));
            }
        }
        Ok(())
    }

    /// `|y_w| - |y_l|` in tokens.
    pub fn length_margin(&self) -> f64 {
        self.chosen.len() as f64 - self.rejected.len() as f64
    }

    pub fn reward_margin(&self) -> f64 {
        f64::from(self.chosen_score - self.rejected_score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub alpha: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 1.0, alpha: 0.01 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CongradError::validation("dpo.beta", "must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CongradError::validation("dpo.alpha", "must be non-negative"));
        }
        Ok(())
    }
}

/// Policy-vs-reference preference margin
/// `[log π(y_w) - log π_ref(y_w)] - [log π(y_l) - log π_ref(y_l)]`.
pub fn preference_margin(policy: &ToyPolicy, reference: &ToyPolicy, pair: &PreferencePair) -> Result<f64> {
    policy.same_shape(reference)?;
    let chosen = policy.log_prob(pair.prompt_id, &pair.chosen)? - reference.log_prob(pair.prompt_id, &pair.chosen)?;
    let rejected =
        policy.log_prob(pair.prompt_id, &pair.rejected)? - reference.log_prob(pair.prompt_id, &pair.rejected)?;
    Ok(chosen - rejected)
}

pub fn dpo_loss(policy: &ToyPolicy, reference: &ToyPolicy, pair: &PreferencePair, cfg: &DpoConfig) -> Result<f64> {
    let pm = preference_margin(policy, reference, pair)?;
    Ok(neg_log_sigmoid(cfg.beta * pm))
}

/// Length-penalized DPO: `-log σ(β·p_m + α·l_m)`.
pub fn lp_dpo_loss(policy: &ToyPolicy, reference: &ToyPolicy, pair: &PreferencePair, cfg: &DpoConfig) -> Result<f64> {
    let pm = preference_margin(policy, reference, pair)?;
    Ok(neg_log_sigmoid(cfg.beta * pm + cfg.alpha * pair.length_margin()))
}

fn add_sample_gradient(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    weight: f64,
    grad: &mut [f64],
) -> Result<()> {
    let pm = preference_margin(policy, reference, pair)?;
    let z = cfg.beta * pm + cfg.alpha * pair.length_margin();
    // d/dz [-log σ(z)] = -σ(-z)
    let coeff = -sigmoid(-z) * cfg.beta * weight;
    policy.accumulate_log_prob_grad(pair.prompt_id, &pair.chosen, coeff, grad);
    policy.accumulate_log_prob_grad(pair.prompt_id, &pair.rejected, -coeff, grad);
    Ok(())
}

/// Exact gradient of [`lp_dpo_loss`] with respect to the policy parameters.
pub fn sample_gradient(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &PreferencePair,
    cfg: &DpoConfig,
) -> Result<FlatVector> {
    let mut g = vec![0.0; policy.num_params()];
    add_sample_gradient(policy, reference, pair, cfg, 1.0, &mut g)?;
    FlatVector::new(g)
}

/// Mean LP-DPO gradient over a minibatch.
pub fn batch_gradient(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<FlatVector> {
    if pairs.is_empty() {
        return Err(CongradError::invalid("empty minibatch"));
    }
    let mut g = vec![0.0; policy.num_params()];
    let w = 1.0 / pairs.len() as f64;
    for p in pairs {
        add_sample_gradient(policy, reference, p, cfg, w, &mut g)?;
    }
    FlatVector::new(g)
}

pub fn mean_lp_dpo_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CongradError::invalid("empty dataset"));
    }
    let mut total = 0.0;
    for p in pairs {
        total += lp_dpo_loss(policy, reference, p, cfg)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean over languages of each language's mean LP-DPO loss. Languages with
/// no pairs are left out.
pub fn joint_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    datasets: &BTreeMap<String, Vec<PreferencePair>>,
    cfg: &DpoConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for (lang, pairs) in datasets {
        if pairs.is_empty() {
            log::warn!("language `{lang}` has no preference pairs; excluded from joint loss");
            continue;
        }
        total += mean_lp_dpo_loss(policy, reference, pairs, cfg)?;
        used += 1;
    }
    if used == 0 {
        return Err(CongradError::invalid("joint loss over an empty collection of datasets"));
    }
    Ok(total / used as f64)
}

/// Plain gradient descent step; returns the updated policy.
pub fn sgd_step(policy: &ToyPolicy, grad: &FlatVector, lr: f64) -> Result<ToyPolicy> {
    if grad.len() != policy.num_params() {
        return Err(CongradError::ShapeMismatch {
            expected: format!("gradient of length {}", policy.num_params()),
            got: format!("length {}", grad.len()),
        });
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(CongradError::invalid("learning rate must be finite and non-negative"));
    }
    let mut flat = policy.flat_params();
    flat.axpy(-lr, grad);
    let mut mats = unflatten(&flat, &policy.param_shapes())?.into_iter();
    let first_token = mats.next().expect("first-token table");
    let bigram = mats.next().expect("bigram table");
    ToyPolicy::from_params(policy.max_len, first_token, bigram)
}
