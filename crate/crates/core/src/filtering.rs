//! Sample scoring and per-language top-fraction selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusGradient;
use crate::error::{CongradError, Result};
use crate::lowrank::{cosine_flat, FlatVector};
use crate::preference::PreferencePair;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Congrad,
    RewardMargin,
    LengthMargin,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub retain_fraction: f64,
    pub direction: Direction,
    pub kind: FilterKind,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            retain_fraction: 0.5,
            direction: Direction::Max,
            kind: FilterKind::Congrad,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.retain_fraction > 0.0 && self.retain_fraction <= 1.0) {
            return Err(CongradError::validation("filter.retain_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Short arm label such as `congrad-max` or `random`.
    pub fn arm(&self) -> Arm {
        Arm {
            kind: self.kind,
            direction: self.direction,
        }
    }
}

/// A filter kind plus direction, written `congrad-max`, `reward-min`,
/// `length-max`, `random`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Arm {
    pub kind: FilterKind,
    pub direction: Direction,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            FilterKind::Congrad => "congrad",
            FilterKind::RewardMargin => "reward",
            FilterKind::LengthMargin => "length",
            FilterKind::Random => return f.write_str("random"),
        };
        let dir = match self.direction {
            Direction::Max => "max",
            Direction::Min => "min",
        };
        write!(f, "{kind}-{dir}")
    }
}

impl FromStr for Arm {
    type Err = CongradError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(Arm {
                kind: FilterKind::Random,
                direction: Direction::Max,
            });
        }
        let (kind, dir) = s
            .rsplit_once('-')
            .ok_or_else(|| CongradError::validation("arm", format!("unknown filter arm `{s}`")))?;
        let kind = match kind {
            "congrad" => FilterKind::Congrad,
            "reward" => FilterKind::RewardMargin,
            "length" => FilterKind::LengthMargin,
            _ => return Err(CongradError::validation("arm", format!("unknown filter kind `{kind}`"))),
        };
        let direction = match dir {
            "max" => Direction::Max,
            "min" => Direction::Min,
            _ => return Err(CongradError::validation("arm", format!("unknown direction `{dir}`"))),
        };
        Ok(Arm { kind, direction })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterScore {
    pub sample_id: usize,
    pub language: String,
    pub score: f64,
    pub kind: FilterKind,
}

/// Cosine between a sample gradient and the consensus direction; 0 when
/// either is degenerate.
pub fn congrad_score(sample_grad: &FlatVector, consensus: &ConsensusGradient) -> Result<f64> {
    Ok(cosine_flat(sample_grad, &consensus.vector)?.value)
}

/// Score for the non-gradient filters. `random_seed` feeds the random kind
/// only and should be derived per sample.
pub fn baseline_score(pair: &PreferencePair, kind: FilterKind, random_seed: u64) -> Result<f64> {
    match kind {
        FilterKind::RewardMargin => Ok(pair.reward_margin()),
        FilterKind::LengthMargin => Ok(pair.length_margin()),
        FilterKind::Random => Ok(seed::rng(random_seed).random::<f64>()),
        FilterKind::Congrad => Err(CongradError::invalid(
            "congrad scores need a sample gradient; use congrad_score",
        )),
    }
}

/// Per-sample seed for the random filter.
pub fn random_sample_seed(filter_seed: u64, round: u64, language: &str, sample_id: usize) -> u64 {
    seed::derive_named(
        filter_seed,
        "random-filter",
        &[round, seed::hash_str(language), sample_id as u64],
    )
}

/// Number of samples kept out of `n`: `⌈ρ·n⌉`, at least 1.
///
/// A relative slack of 1e-9 absorbs representation error so that e.g.
/// `0.7 · 10` keeps 7, not 8.
pub fn quota(rho: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let exact = rho * n as f64;
    let k = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
    k.clamp(1, n)
}

/// Keep the top (or bottom) `⌈ρ·N_l⌉` samples of each language. Ties go to
/// the lower sample id.
pub fn select(scores: &[FilterScore], cfg: &FilterConfig) -> Result<BTreeMap<String, BTreeSet<usize>>> {
    cfg.validate()?;
    let mut by_lang: BTreeMap<&str, Vec<&FilterScore>> = BTreeMap::new();
    for s in scores {
        if !s.score.is_finite() {
            return Err(CongradError::invalid(format!(
                "non-finite score for sample {} ({})",
                s.sample_id, s.language
            )));
        }
        by_lang.entry(&s.language).or_default().push(s);
    }
    let mut out = BTreeMap::new();
    for (lang, mut list) in by_lang {
        // finite scores, so partial_cmp is total; -0.0 and 0.0 tie
        list.sort_by(|a, b| {
            let ord = a.score.partial_cmp(&b.score).expect("finite scores");
            let ord = match cfg.direction {
                Direction::Max => ord.reverse(),
                Direction::Min => ord,
            };
            ord.then(a.sample_id.cmp(&b.sample_id))
        });
        let k = quota(cfg.retain_fraction, list.len());
        out.insert(lang.to_string(), list.iter().take(k).map(|s| s.sample_id).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(lang: &str, vals: &[f64]) -> Vec<FilterScore> {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| FilterScore {
                sample_id: i,
                language: lang.into(),
                score: v,
                kind: FilterKind::Congrad,
            })
            .collect()
    }

    fn cfg(rho: f64, direction: Direction) -> FilterConfig {
        FilterConfig {
            retain_fraction: rho,
            direction,
            ..FilterConfig::default()
        }
    }

    #[test]
    fn keeps_top_half() {
        let s = scores("en", &[0.9, 0.1, -0.2, 0.5]);
        let sel = select(&s, &cfg(0.5, Direction::Max)).unwrap();
        assert_eq!(sel["en"], BTreeSet::from([0, 3]));
        let sel = select(&s, &cfg(0.5, Direction::Min)).unwrap();
        assert_eq!(sel["en"], BTreeSet::from([1, 2]));
    }

    #[test]
    fn full_fraction_keeps_everything() {
        let s = scores("en", &[0.3, 0.2, 0.1]);
        assert_eq!(select(&s, &cfg(1.0, Direction::Max)).unwrap()["en"].len(), 3);
    }

    #[test]
    fn ties_resolve_by_id() {
        let s = scores("en", &[0.5; 5]);
        assert_eq!(
            select(&s, &cfg(0.5, Direction::Max)).unwrap()["en"],
            BTreeSet::from([0, 1, 2])
        );
        assert_eq!(
            select(&s, &cfg(0.5, Direction::Min)).unwrap()["en"],
            BTreeSet::from([0, 1, 2])
        );
    }

    #[test]
    fn signed_zeros_tie() {
        let s = scores("en", &[-0.0, 0.0, 0.0]);
        let kept = select(&s, &cfg(0.34, Direction::Max)).unwrap();
        assert_eq!(kept["en"], [0, 1].into_iter().collect());
    }

    #[test]
    fn quota_rounding() {
        assert_eq!(quota(0.5, 7), 4);
        assert_eq!(quota(0.5, 8), 4);
        assert_eq!(quota(0.7, 10), 7);
        assert_eq!(quota(0.01, 3), 1);
        assert_eq!(quota(0.25, 100), 25);
        assert_eq!(quota(1.0, 9), 9);
        assert_eq!(quota(0.5, 0), 0);
    }

    #[test]
    fn languages_are_independent() {
        let mut s = scores("a", &[1.0, 2.0, 3.0]);
        s.extend(scores("b", &[5.0, 4.0]));
        let sel = select(&s, &cfg(0.5, Direction::Max)).unwrap();
        assert_eq!(sel["a"], BTreeSet::from([1, 2]));
        assert_eq!(sel["b"], BTreeSet::from([0]));
    }

    #[test]
    fn invalid_fraction_and_scores() {
        let s = scores("a", &[1.0]);
        assert!(select(&s, &cfg(0.0, Direction::Max)).is_err());
        assert!(select(&s, &cfg(1.5, Direction::Max)).is_err());
        assert!(select(&scores("a", &[f64::NAN]), &cfg(0.5, Direction::Max)).is_err());
    }

    #[test]
    fn baseline_scores() {
        let mut p = PreferencePair {
            language: "en".into(),
            prompt_id: 0,
            chosen: vec![1, 2, 3],
            rejected: vec![4, 5, 6],
            chosen_score: 5,
            rejected_score: 2,
        };
        assert_eq!(baseline_score(&p, FilterKind::RewardMargin, 0).unwrap(), 3.0);
        assert_eq!(baseline_score(&p, FilterKind::LengthMargin, 0).unwrap(), 0.0);
        p.rejected.pop();
        assert_eq!(baseline_score(&p, FilterKind::LengthMargin, 0).unwrap(), 1.0);
        let s = random_sample_seed(4, 2, "en", 7);
        let r = baseline_score(&p, FilterKind::Random, s).unwrap();
        assert_eq!(r, baseline_score(&p, FilterKind::Random, s).unwrap());
        assert!((0.0..1.0).contains(&r));
        assert!(baseline_score(&p, FilterKind::Congrad, 0).is_err());
    }

    #[test]
    fn congrad_score_extremes() {
        let v = FlatVector::new(vec![1.0, -2.0, 0.5]).unwrap();
        let c = ConsensusGradient {
            vector: v.clone(),
            conflicts_resolved: 0,
            language_count: 2,
        };
        assert!((congrad_score(&v, &c).unwrap() - 1.0).abs() < 1e-15);
        assert!((congrad_score(&v.scaled(-1.0), &c).unwrap() + 1.0).abs() < 1e-15);
        assert!(congrad_score(&FlatVector::new(vec![1.0]).unwrap(), &c).is_err());
    }

    #[test]
    fn arm_labels_round_trip() {
        for name in [
            "congrad-max",
            "congrad-min",
            "reward-max",
            "reward-min",
            "length-max",
            "length-min",
            "random",
        ] {
            assert_eq!(name.parse::<Arm>().unwrap().to_string(), name);
        }
        assert!("bogus".parse::<Arm>().is_err());
        assert!("congrad-up".parse::<Arm>().is_err());
    }
}
