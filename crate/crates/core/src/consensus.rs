//! Cross-language gradient conflict resolution (PCGrad-style projection) and
//! the consensus direction built from the de-conflicted gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CongradError, Result};
use crate::lowrank::{cosine, FlatVector, DEGENERATE_NORM};
use crate::seed;

/// Per-language EMA snapshots, keyed by language in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradients {
    per_language: BTreeMap<String, FlatVector>,
}

impl TaskGradients {
    pub fn new(per_language: BTreeMap<String, FlatVector>) -> Result<Self> {
        let mut lens = per_language.values().map(FlatVector::len);
        let Some(first) = lens.next() else {
            return Err(CongradError::invalid("consensus needs at least one language"));
        };
        if lens.any(|l| l != first) {
            return Err(CongradError::invalid("task gradients differ in length"));
        }
        Ok(Self { per_language })
    }

    pub fn len(&self) -> usize {
        self.per_language.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_language.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.per_language.values().next().map_or(0, FlatVector::len)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &FlatVector)> {
        self.per_language.iter()
    }

    pub fn get(&self, language: &str) -> Option<&FlatVector> {
        self.per_language.get(language)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusGradient {
    pub vector: FlatVector,
    pub conflicts_resolved: usize,
    pub language_count: usize,
}

/// One conflict check of language `language`'s running gradient against
/// `other`'s EMA gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub language: String,
    pub other: String,
    pub cosine: f64,
    pub projected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOutcome {
    pub gradient: ConsensusGradient,
    pub report: Vec<ConflictRecord>,
    /// Projection order used for each language.
    pub order: BTreeMap<String, Vec<String>>,
}

struct Step {
    cosine: f64,
    projected: bool,
}

fn project_away(g: &mut FlatVector, others: &[&FlatVector]) -> Result<Vec<Option<Step>>> {
    others
        .iter()
        .map(|other| {
            if other.len() != g.len() {
                return Err(CongradError::ShapeMismatch {
                    expected: format!("length {}", g.len()),
                    got: format!("length {}", other.len()),
                });
            }
            let sq = other.dot(other);
            if sq.sqrt() < DEGENERATE_NORM {
                log::debug!("skipping projection against a zero-norm gradient");
                return Ok(None);
            }
            let cos = cosine(g.as_slice(), other.as_slice()).value;
            let d = g.dot(other);
            let projected = d < 0.0;
            if projected {
                g.axpy(-d / sq, other);
            }
            Ok(Some(Step { cosine: cos, projected }))
        })
        .collect()
}

/// Project `g` onto the normal plane of every gradient in `others` it
/// conflicts with (negative dot product), sweeping once in the given order.
pub fn deconflict_one(g: &FlatVector, others: &[&FlatVector]) -> Result<FlatVector> {
    if others.is_empty() {
        return Err(CongradError::invalid(
            "deconflict_one needs at least one other gradient",
        ));
    }
    let mut out = g.clone();
    project_away(&mut out, others)?;
    Ok(out)
}

/// Sum of per-language de-conflicted gradients. Each language projects
/// against the others in a seeded shuffled order.
pub fn consensus(tasks: &TaskGradients, order_seed: u64) -> Result<ConsensusOutcome> {
    let language_count = tasks.len();
    let mut sum = FlatVector::zeros(tasks.dim());
    let mut report = Vec::new();
    let mut order = BTreeMap::new();
    let mut conflicts_resolved = 0;

    if language_count == 1 {
        let (lang, g) = tasks.iter().next().expect("one language");
        order.insert(lang.clone(), Vec::new());
        return Ok(ConsensusOutcome {
            gradient: ConsensusGradient {
                vector: g.clone(),
                conflicts_resolved: 0,
                language_count,
            },
            report,
            order,
        });
    }

    for (lang, g) in tasks.iter() {
        let mut others: Vec<&String> = tasks.iter().map(|(l, _)| l).filter(|l| *l != lang).collect();
        let mut rng = seed::rng(seed::derive(order_seed, &[seed::hash_str(lang)]));
        others.shuffle(&mut rng);
        let vectors: Vec<&FlatVector> = others.iter().map(|l| tasks.get(l).expect("present")).collect();

        let mut running = g.clone();
        let steps = project_away(&mut running, &vectors)?;
        for (other, step) in others.iter().zip(steps) {
            if let Some(step) = step {
                conflicts_resolved += usize::from(step.projected);
                report.push(ConflictRecord {
                    language: lang.clone(),
                    other: (*other).clone(),
                    cosine: step.cosine,
                    projected: step.projected,
                });
            }
        }
        sum.axpy(1.0, &running);
        order.insert(lang.clone(), others.into_iter().cloned().collect());
    }

    Ok(ConsensusOutcome {
        gradient: ConsensusGradient {
            vector: sum,
            conflicts_resolved,
            language_count,
        },
        report,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FlatVector {
        FlatVector::new(v.to_vec()).unwrap()
    }

    fn tasks(vs: &[&[f64]]) -> TaskGradients {
        TaskGradients::new(vs.iter().enumerate().map(|(i, v)| (format!("l{i}"), fv(v))).collect()).unwrap()
    }

    #[test]
    fn orthogonal_is_unchanged() {
        let out = deconflict_one(&fv(&[1.0, 0.0]), &[&fv(&[0.0, 1.0])]).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn conflicting_pair_projects_to_half_half() {
        let out = deconflict_one(&fv(&[1.0, 0.0]), &[&fv(&[-1.0, 1.0])]).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15 && (out[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn projection_residual_is_orthogonal() {
        let g = FlatVector::new((0..50).map(|i| (i as f64).sin()).collect()).unwrap();
        let o = FlatVector::new((0..50).map(|i| -(i as f64 * 1.01).sin() + 0.05).collect()).unwrap();
        assert!(g.dot(&o) < 0.0);
        let out = deconflict_one(&g, &[&o]).unwrap();
        assert!(out.dot(&o).abs() < 1e-9 * out.norm() * o.norm());
    }

    #[test]
    fn zero_norm_other_is_skipped() {
        let out = deconflict_one(&fv(&[1.0, -2.0]), &[&fv(&[0.0, 0.0])]).unwrap();
        assert_eq!(out.as_slice(), &[1.0, -2.0]);
        assert!(deconflict_one(&fv(&[1.0]), &[]).is_err());
        assert!(deconflict_one(&fv(&[1.0]), &[&fv(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn two_language_hand_example() {
        let out = consensus(&tasks(&[&[1.0, 0.0], &[-1.0, 1.0]]), 0).unwrap();
        // g1 -> (1,0) - (-1/2)(-1,1) = (0.5, 0.5); g2 -> (-1,1) - (-1/1)(1,0) = (0, 1)
        let v = out.gradient.vector.as_slice();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 1.5).abs() < 1e-15, "{v:?}");
        assert_eq!(out.gradient.conflicts_resolved, 2);
        assert_eq!(out.gradient.language_count, 2);
        assert_eq!(out.report.len(), 2);
        assert!(out.report.iter().all(|r| r.projected));
    }

    #[test]
    fn non_conflicting_is_plain_sum() {
        let out = consensus(&tasks(&[&[1.0, 2.0], &[0.5, 0.1]]), 9).unwrap();
        assert_eq!(out.gradient.vector.as_slice(), &[1.5, 2.1]);
        let out = consensus(&tasks(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[1.0, 1.0, 1.0]]), 9).unwrap();
        assert_eq!(out.gradient.vector.as_slice(), &[2.0, 2.0, 1.0]);
        assert_eq!(out.gradient.conflicts_resolved, 0);
    }

    #[test]
    fn single_language_passthrough() {
        let out = consensus(&tasks(&[&[3.0, -1.0]]), 1).unwrap();
        assert_eq!(out.gradient.vector.as_slice(), &[3.0, -1.0]);
        assert_eq!(out.gradient.conflicts_resolved, 0);
    }

    #[test]
    fn rejects_unequal_lengths() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), fv(&[1.0]));
        m.insert("b".to_string(), fv(&[1.0, 2.0]));
        assert!(TaskGradients::new(m).is_err());
        assert!(TaskGradients::new(BTreeMap::new()).is_err());
    }

    #[test]
    fn order_is_seed_deterministic() {
        let t = tasks(&[
            &[1.0, 0.2, -0.3],
            &[-0.5, 1.0, 0.1],
            &[0.3, -0.9, 1.0],
            &[-1.0, -0.2, 0.4],
        ]);
        assert_eq!(consensus(&t, 5).unwrap(), consensus(&t, 5).unwrap());
    }
}
