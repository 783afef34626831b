//! Per-language exponential moving average of gradients, kept in low-rank
//! factored form.
//!
//! Each update runs a decompress-update-recompress cycle one parameter matrix
//! at a time: the previous EMA of that matrix is reconstructed from its
//! factors, blended with the incoming minibatch gradient as
//! `G_τ = γ·G_{τ-1} + (1-γ)·g_τ`, and refactorized by [`power_iterate`].
//! Only the matrix being updated is ever dense. Row or column vectors are
//! kept dense and updated exactly.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CongradError, Result};
use crate::lowrank::{flatten_concat, power_iterate, reconstruct, DenseMatrix, FlatVector, LowRankFactors};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub gamma: f64,
    pub rank: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            rank: 64,
            power_iters: 3,
            seed: 0,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(CongradError::validation("ema.gamma", "must lie in (0, 1)"));
        }
        if self.rank == 0 {
            return Err(CongradError::validation("ema.rank", "must be at least 1"));
        }
        if self.power_iters == 0 {
            return Err(CongradError::validation("ema.power_iters", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Slot {
    Factored(LowRankFactors),
    Dense(DenseMatrix),
}

impl Slot {
    fn materialize(&self) -> DenseMatrix {
        match self {
            Slot::Factored(f) => reconstruct(f),
            Slot::Dense(m) => m.clone(),
        }
    }
}

/// Peak number of parameter-sized dense buffers alive during an update.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct UpdateStats {
    pub peak_dense_matrices: usize,
}

#[derive(Default)]
struct DenseGauge {
    live: usize,
    peak: usize,
}

impl DenseGauge {
    fn acquire(&mut self) {
        self.live += 1;
        self.peak = self.peak.max(self.live);
    }

    fn release(&mut self) {
        self.live -= 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageGradientStore {
    language: String,
    config: EmaConfig,
    shapes: Vec<(usize, usize)>,
    slots: Vec<Slot>,
    step: u64,
}

impl LanguageGradientStore {
    /// Empty store (G₀ = 0) for parameters of the given shapes.
    pub fn new(language: impl Into<String>, shapes: &[(usize, usize)], config: EmaConfig) -> Result<Self> {
        config.validate()?;
        if shapes.is_empty() {
            return Err(CongradError::invalid("gradient store needs at least one parameter"));
        }
        let slots = shapes
            .iter()
            .map(|&(r, c)| {
                if r == 0 || c == 0 {
                    return Err(CongradError::invalid(format!("empty parameter shape {r}x{c}")));
                }
                Ok(if r == 1 || c == 1 {
                    Slot::Dense(DenseMatrix::zeros(r, c))
                } else {
                    Slot::Factored(LowRankFactors::zeros(r, c, effective_rank(config.rank, r, c))?)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            language: language.into(),
            config,
            shapes: shapes.to_vec(),
            slots,
            step: 0,
        })
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn config(&self) -> &EmaConfig {
        &self.config
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    /// Number of updates applied so far (τ).
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Scalars held in storage across all slots.
    pub fn storage_len(&self) -> usize {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Factored(f) => f.storage_len(),
                Slot::Dense(m) => m.len(),
            })
            .sum()
    }

    /// Factors of parameter `index`, if it is stored compressed.
    pub fn factors(&self, index: usize) -> Option<&LowRankFactors> {
        match self.slots.get(index)? {
            Slot::Factored(f) => Some(f),
            Slot::Dense(_) => None,
        }
    }

    /// Fold one minibatch gradient into the EMA. On error the store is left
    /// unchanged.
    pub fn ema_update(&mut self, grads: &[DenseMatrix]) -> Result<UpdateStats> {
        if grads.len() != self.shapes.len() {
            return Err(CongradError::ShapeMismatch {
                expected: format!("{} parameter gradients", self.shapes.len()),
                got: format!("{}", grads.len()),
            });
        }
        for (i, (g, &shape)) in grads.iter().zip(&self.shapes).enumerate() {
            if g.shape() != shape {
                return Err(CongradError::ShapeMismatch {
                    expected: format!("parameter {i} of shape {shape:?}"),
                    got: format!("{:?}", g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(CongradError::NonFiniteGradient { index: i });
            }
        }

        let gamma = self.config.gamma;
        let next_step = self.step + 1;
        let lang_tag = seed::hash_str(&self.language);
        let mut gauge = DenseGauge::default();
        let mut updated = Vec::with_capacity(self.slots.len());

        for (i, (slot, grad)) in self.slots.iter().zip(grads).enumerate() {
            gauge.acquire(); // incoming gradient
            gauge.acquire(); // decompressed previous EMA
            let mut ema = slot.materialize();
            ema.scale(gamma);
            ema.axpy(1.0 - gamma, grad);
            let next = match slot {
                Slot::Dense(_) => Slot::Dense(ema),
                Slot::Factored(f) => {
                    let s = seed::derive(self.config.seed, &[lang_tag, i as u64, next_step]);
                    let factors = power_iterate(&ema, f.rank(), self.config.power_iters, s)?;
                    drop(ema);
                    Slot::Factored(factors)
                }
            };
            gauge.release();
            gauge.release();
            updated.push(next);
        }

        self.slots = updated;
        self.step = next_step;
        Ok(UpdateStats {
            peak_dense_matrices: gauge.peak,
        })
    }

    /// Flattened reconstruction of every parameter's EMA.
    pub fn snapshot(&self) -> Result<FlatVector> {
        if self.step == 0 {
            return Err(CongradError::EmptyStore {
                language: self.language.clone(),
            });
        }
        let dense: Vec<DenseMatrix> = self.slots.iter().map(Slot::materialize).collect();
        flatten_concat(&dense)
    }
}

fn effective_rank(rank: usize, rows: usize, cols: usize) -> usize {
    rank.min(rows).min(cols)
}

/// Synthetic gradient-like matrices: a fixed low-rank signal with a 1/i
/// singular-value profile, a random per-step amplitude, and isotropic noise.
#[derive(Debug, Clone)]
pub struct SyntheticGradientStream {
    signal: DenseMatrix,
    noise_level: f64,
    rng: rand_chacha::ChaCha8Rng,
}

impl SyntheticGradientStream {
    pub const SIGNAL_RANK: usize = 32;
    pub const NOISE_LEVEL: f64 = 1.5;

    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        Self::with_params(rows, cols, Self::SIGNAL_RANK, Self::NOISE_LEVEL, seed)
    }

    /// `noise_level` is the expected Frobenius norm of the noise relative to
    /// the unit-norm signal.
    pub fn with_params(rows: usize, cols: usize, signal_rank: usize, noise_level: f64, seed: u64) -> Self {
        let k = signal_rank.min(rows).min(cols).max(1);
        let mut rng = seed::rng(seed);
        let mut u = DenseMatrix::from_fn(rows, k, |_, _| rng.sample(StandardNormal));
        let mut v = DenseMatrix::from_fn(cols, k, |_, _| rng.sample(StandardNormal));
        for j in 0..k {
            let s = 1.0 / (j + 1) as f64;
            for i in 0..rows {
                u.set(i, j, u.get(i, j) * s);
            }
        }
        u.scale(1.0 / (rows as f64).sqrt());
        v.scale(1.0 / (cols as f64).sqrt());
        let mut signal = u.matmul_t(&v);
        let n = signal.frobenius_norm();
        signal.scale(1.0 / n);
        Self {
            signal,
            noise_level,
            rng,
        }
    }
}

impl Iterator for SyntheticGradientStream {
    type Item = DenseMatrix;

    fn next(&mut self) -> Option<DenseMatrix> {
        let (r, c) = self.signal.shape();
        let amp = 1.0 + 0.3 * self.rng.sample::<f64, _>(StandardNormal);
        let noise_scale = self.noise_level / ((r * c) as f64).sqrt();
        let rng = &mut self.rng;
        let mut g = DenseMatrix::from_fn(r, c, |_, _| noise_scale * rng.sample::<f64, _>(StandardNormal));
        g.axpy(amp, &self.signal);
        Some(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::cosine;

    fn dense_ema(grads: &[DenseMatrix], gamma: f64) -> DenseMatrix {
        let mut acc = DenseMatrix::zeros(grads[0].rows(), grads[0].cols());
        for g in grads {
            for (a, x) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a = gamma * *a + (1.0 - gamma) * x;
            }
        }
        acc
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        d / crate::lowrank::norm(b).max(1e-300)
    }

    fn cfg(rank: usize) -> EmaConfig {
        EmaConfig {
            rank,
            seed: 3,
            ..EmaConfig::default()
        }
    }

    #[test]
    fn single_step_is_one_minus_gamma_times_gradient() {
        let m = DenseMatrix::outer(&[1.0, -2.0, 0.5], &[3.0, 1.0, 0.0, 2.0]);
        let mut store = LanguageGradientStore::new("en", &[(3, 4)], cfg(2)).unwrap();
        store.ema_update(std::slice::from_ref(&m)).unwrap();
        let mut expect = m.clone();
        expect.scale(0.1);
        assert!(rel_err(store.snapshot().unwrap().as_slice(), expect.as_slice()) < 1e-10);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn two_identical_rank_one_updates() {
        let m = DenseMatrix::outer(&[1.0, 2.0, 3.0], &[0.5, -1.0]);
        let mut store = LanguageGradientStore::new("en", &[(3, 2)], cfg(1)).unwrap();
        store.ema_update(std::slice::from_ref(&m)).unwrap();
        store.ema_update(std::slice::from_ref(&m)).unwrap();
        let mut expect = m.clone();
        expect.scale(0.19);
        assert!(rel_err(store.snapshot().unwrap().as_slice(), expect.as_slice()) < 1e-8);
    }

    #[test]
    fn full_rank_compression_tracks_dense_oracle() {
        let grads: Vec<DenseMatrix> = (0..20).map(|s| DenseMatrix::random_normal(64, 64, 100 + s)).collect();
        let mut store = LanguageGradientStore::new("xx", &[(64, 64)], cfg(64)).unwrap();
        for g in &grads {
            store.ema_update(std::slice::from_ref(g)).unwrap();
        }
        let oracle = dense_ema(&grads, 0.9);
        let c = cosine(store.snapshot().unwrap().as_slice(), oracle.as_slice());
        assert!(c.value >= 0.99, "cosine {}", c.value);
    }

    #[test]
    fn lossless_when_rank_covers_stream() {
        // every EMA along a stream of rank-2 updates in a fixed subspace is rank <= 2
        let a = DenseMatrix::outer(&[1.0, 0.0, 2.0, -1.0, 0.5], &[1.0, 1.0, 0.0, 2.0]);
        let b = DenseMatrix::outer(&[0.0, 1.0, -1.0, 3.0, 1.0], &[2.0, -1.0, 1.0, 0.0]);
        let mut grads = Vec::new();
        let mut store = LanguageGradientStore::new("xx", &[(5, 4)], cfg(2)).unwrap();
        for t in 0..12 {
            let mut g = a.clone();
            g.scale((t as f64 * 0.7).sin());
            g.axpy((t as f64 * 0.3).cos(), &b);
            store.ema_update(std::slice::from_ref(&g)).unwrap();
            grads.push(g);
        }
        let oracle = dense_ema(&grads, 0.9);
        assert!(rel_err(store.snapshot().unwrap().as_slice(), oracle.as_slice()) < 1e-6);
    }

    #[test]
    fn vectors_are_kept_dense_and_exact() {
        let mut store = LanguageGradientStore::new("xx", &[(1, 5), (3, 3)], cfg(1)).unwrap();
        assert!(store.factors(0).is_none());
        assert!(store.factors(1).is_some());
        let v = DenseMatrix::new(1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let m = DenseMatrix::random_normal(3, 3, 9);
        store.ema_update(&[v.clone(), m.clone()]).unwrap();
        store.ema_update(&[v.clone(), m]).unwrap();
        let snap = store.snapshot().unwrap();
        for (i, x) in v.as_slice().iter().enumerate() {
            assert!((snap[i] - 0.19 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn errors_leave_store_unchanged() {
        let mut store = LanguageGradientStore::new("xx", &[(2, 2), (2, 3)], cfg(1)).unwrap();
        assert!(matches!(store.snapshot(), Err(CongradError::EmptyStore { .. })));
        let good = DenseMatrix::random_normal(2, 2, 1);
        let before = store.clone();
        let mut bad = DenseMatrix::zeros(2, 3);
        bad.as_mut_slice()[4] = f64::INFINITY;
        assert!(matches!(
            store.ema_update(&[good.clone(), bad]),
            Err(CongradError::NonFiniteGradient { index: 1 })
        ));
        assert_eq!(store, before);
        assert!(matches!(
            store.ema_update(&[good.clone(), DenseMatrix::zeros(3, 2)]),
            Err(CongradError::ShapeMismatch { .. })
        ));
        assert!(store.ema_update(&[good]).is_err());
        assert_eq!(store, before);
    }

    #[test]
    fn identical_streams_give_identical_stores() {
        let mk = || {
            let mut s = LanguageGradientStore::new("de", &[(16, 12)], cfg(4)).unwrap();
            for g in SyntheticGradientStream::new(16, 12, 77).take(5) {
                s.ema_update(&[g]).unwrap();
            }
            s
        };
        let (a, b) = (mk(), mk());
        assert_eq!(a, b);
        assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
    }

    #[test]
    fn peak_dense_count_is_bounded() {
        let mut store = LanguageGradientStore::new("xx", &[(8, 8), (8, 4), (1, 8)], cfg(2)).unwrap();
        let grads = vec![
            DenseMatrix::random_normal(8, 8, 1),
            DenseMatrix::random_normal(8, 4, 2),
            DenseMatrix::random_normal(1, 8, 3),
        ];
        let stats = store.ema_update(&grads).unwrap();
        assert!(stats.peak_dense_matrices <= 2);
        assert!(store.storage_len() < 8 * 8 + 8 * 4 + 8);
    }

    #[test]
    fn fidelity_non_decreasing_in_rank() {
        let ranks = [4, 8, 16, 32, 64];
        let mut means = Vec::new();
        for &r in &ranks {
            let mut total = 0.0;
            for s in 0..4 {
                let grads: Vec<_> = SyntheticGradientStream::new(64, 64, 500 + s).take(10).collect();
                let mut store = LanguageGradientStore::new("xx", &[(64, 64)], cfg(r)).unwrap();
                for g in &grads {
                    store.ema_update(std::slice::from_ref(g)).unwrap();
                }
                let oracle = dense_ema(&grads, 0.9);
                total += cosine(store.snapshot().unwrap().as_slice(), oracle.as_slice()).value;
            }
            means.push(total / 4.0);
        }
        for w in means.windows(2) {
            assert!(w[1] >= w[0], "{means:?}");
        }
    }

    #[test]
    fn config_validation() {
        for bad in [
            EmaConfig {
                gamma: 0.0,
                ..EmaConfig::default()
            },
            EmaConfig {
                gamma: 1.0,
                ..EmaConfig::default()
            },
            EmaConfig {
                rank: 0,
                ..EmaConfig::default()
            },
            EmaConfig {
                power_iters: 0,
                ..EmaConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
