//! Restricted Boltzmann machine with binary stochastic units.
//!
//! Energy carries positive sums, `E(v,h) = Σ v_i b_i + Σ h_j c_j + Σ v_i h_j w_ji`,
//! and configurations are weighted by `exp(-E)`. Both conditionals therefore
//! negate their pre-activation, and gradient ascent on the data log-likelihood
//! *subtracts* the contrastive difference `⟨·⟩_data − ⟨·⟩_recon` from the
//! parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Largest `n_visible + n_hidden` the exact enumeration will attempt.
pub const MAX_ENUMERATION_UNITS: usize = 20;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_WEIGHT_STD: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RbmError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("{0} units exceed the exact enumeration bound of {MAX_ENUMERATION_UNITS}")]
    TooLarge(usize),
}

/// Weights and biases of one RBM. `w` is hidden-major: `w[j * n_visible + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmParams {
    pub n_visible: usize,
    pub n_hidden: usize,
    pub w: Vec<f64>,
    /// visible biases
    pub b: Vec<f64>,
    /// hidden biases
    pub c: Vec<f64>,
}

impl RbmParams {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            n_visible,
            n_hidden,
            w: vec![0.0; n_visible * n_hidden],
            b: vec![0.0; n_visible],
            c: vec![0.0; n_hidden],
        }
    }

    /// Gaussian weights (mean 0, sd 0.01), zero biases.
    pub fn init<R: Rng + ?Sized>(n_visible: usize, n_hidden: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_WEIGHT_STD).expect("valid std");
        let mut p = Self::zeros(n_visible, n_hidden);
        for w in &mut p.w {
            *w = normal.sample(rng);
        }
        p
    }

    #[inline]
    pub fn weight(&self, hidden: usize, visible: usize) -> f64 {
        self.w[hidden * self.n_visible + visible]
    }

    /// Swaps the roles of the two layers (transposed weights, b ↔ c).
    pub fn transposed(&self) -> Self {
        let mut w = vec![0.0; self.w.len()];
        for j in 0..self.n_hidden {
            for i in 0..self.n_visible {
                w[i * self.n_hidden + j] = self.weight(j, i);
            }
        }
        Self {
            n_visible: self.n_hidden,
            n_hidden: self.n_visible,
            w,
            b: self.c.clone(),
            c: self.b.clone(),
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.w.len() == self.n_visible * self.n_hidden
            && self.b.len() == self.n_visible
            && self.c.len() == self.n_hidden
            && self.w.iter().chain(&self.b).chain(&self.c).all(|x| x.is_finite())
    }
}

/// Per-update schedule inputs: epoch drives both CD depth and step size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CdConfig {
    pub epoch: u32,
    /// 1-based depth of the RBM in its stack
    pub layer_index: u32,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for CdConfig {
    fn default() -> Self {
        Self { epoch: 0, layer_index: 1, batch_size: 10, rng_seed: 0 }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_len(expected: usize, actual: usize) -> Result<(), RbmError> {
    if expected == actual {
        Ok(())
    } else {
        Err(RbmError::DimensionMismatch { expected, actual })
    }
}

pub fn energy(params: &RbmParams, v: &[f64], h: &[f64]) -> Result<f64, RbmError> {
    check_len(params.n_visible, v.len())?;
    check_len(params.n_hidden, h.len())?;
    Ok(energy_unchecked(params, v, h))
}

fn energy_unchecked(params: &RbmParams, v: &[f64], h: &[f64]) -> f64 {
    let mut e: f64 = v.iter().zip(&params.b).map(|(vi, bi)| vi * bi).sum();
    e += h.iter().zip(&params.c).map(|(hj, cj)| hj * cj).sum::<f64>();
    for (j, hj) in h.iter().enumerate() {
        if *hj != 0.0 {
            let row = &params.w[j * params.n_visible..(j + 1) * params.n_visible];
            e += hj * row.iter().zip(v).map(|(w, vi)| w * vi).sum::<f64>();
        }
    }
    e
}

/// `p(h_j = 1 | v) = sigm(-c_j - Σ_i w_ji v_i)`; accepts real-valued `v`.
pub fn p_h_given_v(params: &RbmParams, v: &[f64]) -> Result<Vec<f64>, RbmError> {
    check_len(params.n_visible, v.len())?;
    Ok(hidden_probs(params, v))
}

pub(crate) fn hidden_probs(params: &RbmParams, v: &[f64]) -> Vec<f64> {
    (0..params.n_hidden)
        .map(|j| {
            let row = &params.w[j * params.n_visible..(j + 1) * params.n_visible];
            let act: f64 = row.iter().zip(v).map(|(w, vi)| w * vi).sum();
            sigmoid(-params.c[j] - act)
        })
        .collect()
}

/// `p(v_i = 1 | h) = sigm(-b_i - Σ_j w_ji h_j)`.
pub fn p_v_given_h(params: &RbmParams, h: &[f64]) -> Result<Vec<f64>, RbmError> {
    check_len(params.n_hidden, h.len())?;
    Ok(visible_probs(params, h))
}

fn visible_probs(params: &RbmParams, h: &[f64]) -> Vec<f64> {
    let mut act = vec![0.0; params.n_visible];
    for (j, hj) in h.iter().enumerate() {
        if *hj != 0.0 {
            let row = &params.w[j * params.n_visible..(j + 1) * params.n_visible];
            for (a, w) in act.iter_mut().zip(row) {
                *a += w * hj;
            }
        }
    }
    act.iter()
        .zip(&params.b)
        .map(|(a, bi)| sigmoid(-bi - a))
        .collect()
}

/// Draws a binary vector (as 0.0 / 1.0) with the given per-unit probabilities.
pub fn sample_bernoulli<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Vec<f64> {
    probs
        .iter()
        .map(|&p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
        .collect()
}

/// CD depth for an epoch: `k = floor(epoch / 10) + 1`.
pub fn cd_iterations(epoch: u32) -> u32 {
    epoch / 10 + 1
}

/// Step size `1 / (1 + exp(epoch/10 - 5·layer))`.
pub fn pretrain_rate(epoch: u32, layer_index: u32) -> f64 {
    sigmoid(5.0 * layer_index as f64 - epoch as f64 / 10.0)
}

/// Batch-averaged sufficient statistics from the data and from the k-step reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct CdStatistics {
    /// hidden-major, like `RbmParams::w`
    pub data_vh: Vec<f64>,
    pub data_v: Vec<f64>,
    pub data_h: Vec<f64>,
    pub recon_vh: Vec<f64>,
    pub recon_v: Vec<f64>,
    pub recon_h: Vec<f64>,
}

/// Runs a k-step Gibbs chain from every batch vector and averages the statistics.
///
/// Hidden states are sampled during the chain. The final step keeps
/// probabilities for both layers: the reconstruction is `p(v|h)` and the
/// hidden statistics are `p(h|v)` of that reconstruction. Data statistics use
/// the real-valued data together with hidden probabilities.
pub fn cd_statistics<B: AsRef<[f64]>, R: Rng + ?Sized>(
    params: &RbmParams,
    batch: &[B],
    k: u32,
    rng: &mut R,
) -> Result<CdStatistics, RbmError> {
    if batch.is_empty() {
        return Err(RbmError::EmptyBatch);
    }
    for v in batch {
        check_len(params.n_visible, v.as_ref().len())?;
    }
    let (nv, nh) = (params.n_visible, params.n_hidden);
    let mut stats = CdStatistics {
        data_vh: vec![0.0; nv * nh],
        data_v: vec![0.0; nv],
        data_h: vec![0.0; nh],
        recon_vh: vec![0.0; nv * nh],
        recon_v: vec![0.0; nv],
        recon_h: vec![0.0; nh],
    };
    let k = k.max(1);
    for v0 in batch {
        let v0 = v0.as_ref();
        let h0 = hidden_probs(params, v0);
        accumulate(&mut stats.data_vh, &mut stats.data_v, &mut stats.data_h, v0, &h0);

        let mut h = sample_bernoulli(&h0, rng);
        let mut v = Vec::new();
        let mut h_prob = Vec::new();
        for step in 1..=k {
            let pv = visible_probs(params, &h);
            v = if step < k { sample_bernoulli(&pv, rng) } else { pv };
            h_prob = hidden_probs(params, &v);
            if step < k {
                h = sample_bernoulli(&h_prob, rng);
            }
        }
        accumulate(&mut stats.recon_vh, &mut stats.recon_v, &mut stats.recon_h, &v, &h_prob);
    }
    let scale = 1.0 / batch.len() as f64;
    for x in stats
        .data_vh
        .iter_mut()
        .chain(&mut stats.data_v)
        .chain(&mut stats.data_h)
        .chain(&mut stats.recon_vh)
        .chain(&mut stats.recon_v)
        .chain(&mut stats.recon_h)
    {
        *x *= scale;
    }
    Ok(stats)
}

fn accumulate(vh: &mut [f64], v_acc: &mut [f64], h_acc: &mut [f64], v: &[f64], h: &[f64]) {
    let nv = v.len();
    for (j, hj) in h.iter().enumerate() {
        h_acc[j] += hj;
        let row = &mut vh[j * nv..(j + 1) * nv];
        for (r, vi) in row.iter_mut().zip(v) {
            *r += vi * hj;
        }
    }
    for (a, vi) in v_acc.iter_mut().zip(v) {
        *a += vi;
    }
}

/// One CD-k step with `k` and the step size taken from the epoch/layer schedule.
/// The chain RNG is seeded from `cfg.rng_seed`.
pub fn cd_k_update<B: AsRef<[f64]>>(
    params: &RbmParams,
    batch: &[B],
    cfg: &CdConfig,
) -> Result<RbmParams, RbmError> {
    let mut next = params.clone();
    cd_k_step(&mut next, batch, cfg)?;
    Ok(next)
}

/// In-place form of [`cd_k_update`].
pub fn cd_k_step<B: AsRef<[f64]>>(params: &mut RbmParams, batch: &[B], cfg: &CdConfig) -> Result<(), RbmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    cd_k_step_with(
        params,
        batch,
        cd_iterations(cfg.epoch),
        pretrain_rate(cfg.epoch, cfg.layer_index),
        &mut rng,
    )
}

/// CD-k step with an explicit depth and step size.
pub fn cd_k_update_with<B: AsRef<[f64]>, R: Rng + ?Sized>(
    params: &RbmParams,
    batch: &[B],
    k: u32,
    rate: f64,
    rng: &mut R,
) -> Result<RbmParams, RbmError> {
    let mut next = params.clone();
    cd_k_step_with(&mut next, batch, k, rate, rng)?;
    Ok(next)
}

fn cd_k_step_with<B: AsRef<[f64]>, R: Rng + ?Sized>(
    next: &mut RbmParams,
    batch: &[B],
    k: u32,
    rate: f64,
    rng: &mut R,
) -> Result<(), RbmError> {
    let stats = cd_statistics(next, batch, k, rng)?;
    // ascent on log p(v): under this energy sign the gradient is recon − data
    for (w, (d, r)) in next.w.iter_mut().zip(stats.data_vh.iter().zip(&stats.recon_vh)) {
        *w -= rate * (d - r);
    }
    for (b, (d, r)) in next.b.iter_mut().zip(stats.data_v.iter().zip(&stats.recon_v)) {
        *b -= rate * (d - r);
    }
    for (c, (d, r)) in next.c.iter_mut().zip(stats.data_h.iter().zip(&stats.recon_h)) {
        *c -= rate * (d - r);
    }
    Ok(())
}

/// One alternating sweep from a visible state: `h ~ p(h|v)`, then `v' ~ p(v|h)`.
/// Returns `(h, v')`; the pair `(v, h)` is a draw from the joint once the chain has mixed.
pub fn gibbs_sweep<R: Rng + ?Sized>(params: &RbmParams, v: &[f64], rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let h = sample_bernoulli(&hidden_probs(params, v), rng);
    let v_next = sample_bernoulli(&visible_probs(params, &h), rng);
    (h, v_next)
}

/// Decodes a joint configuration index: bit `i` is `v_i` for `i < n_visible`,
/// the following bits are the hidden units.
pub fn configuration(params: &RbmParams, index: usize) -> (Vec<f64>, Vec<f64>) {
    let bit = |k: usize| ((index >> k) & 1) as f64;
    let v = (0..params.n_visible).map(bit).collect();
    let h = (0..params.n_hidden).map(|j| bit(params.n_visible + j)).collect();
    (v, h)
}

/// Index of `(v, h)` in the enumeration order used by [`exact_distribution`].
pub fn configuration_index(n_visible: usize, v: &[f64], h: &[f64]) -> usize {
    let mut idx = 0;
    for (i, x) in v.iter().enumerate() {
        if *x != 0.0 {
            idx |= 1 << i;
        }
    }
    for (j, x) in h.iter().enumerate() {
        if *x != 0.0 {
            idx |= 1 << (n_visible + j);
        }
    }
    idx
}

/// Exact Boltzmann probabilities of all `2^(n_visible + n_hidden)` joint configurations.
pub fn exact_distribution(params: &RbmParams) -> Result<Vec<f64>, RbmError> {
    let units = params.n_visible + params.n_hidden;
    if units > MAX_ENUMERATION_UNITS {
        return Err(RbmError::TooLarge(units));
    }
    let neg_energy: Vec<f64> = (0..1usize << units)
        .map(|idx| {
            let (v, h) = configuration(params, idx);
            -energy_unchecked(params, &v, &h)
        })
        .collect();
    let max = neg_energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = neg_energy.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    Ok(probs)
}

/// Exact marginal `p(v)` of one visible configuration.
pub fn exact_visible_probability(params: &RbmParams, v: &[f64]) -> Result<f64, RbmError> {
    check_len(params.n_visible, v.len())?;
    let dist = exact_distribution(params)?;
    let vmask = configuration_index(params.n_visible, v, &[]);
    let low = (1usize << params.n_visible) - 1;
    Ok(dist
        .iter()
        .enumerate()
        .filter(|(idx, _)| idx & low == vmask)
        .map(|(_, p)| p)
        .sum())
}

/// Model expectations `⟨v_i h_j⟩`, `⟨v_i⟩`, `⟨h_j⟩` under the exact Boltzmann distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelExpectations {
    /// hidden-major
    pub vh: Vec<f64>,
    pub v: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn exact_model_expectations(params: &RbmParams) -> Result<ModelExpectations, RbmError> {
    let dist = exact_distribution(params)?;
    let (nv, nh) = (params.n_visible, params.n_hidden);
    let mut out = ModelExpectations { vh: vec![0.0; nv * nh], v: vec![0.0; nv], h: vec![0.0; nh] };
    for (idx, p) in dist.iter().enumerate() {
        let (v, h) = configuration(params, idx);
        let weighted: Vec<f64> = h.iter().map(|hj| hj * p).collect();
        let mut v_scratch = vec![0.0; nv];
        accumulate(&mut out.vh, &mut v_scratch, &mut out.h, &v, &weighted);
        for (a, vi) in out.v.iter_mut().zip(&v) {
            *a += vi * p;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn energy_examples() {
        let zero = RbmParams::zeros(3, 2);
        assert_eq!(energy(&zero, &[1.0, 0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);

        let p = RbmParams { n_visible: 1, n_hidden: 1, w: vec![0.1], b: vec![0.5], c: vec![-0.25] };
        assert!(close(energy(&p, &[1.0], &[1.0]).unwrap(), 0.35, 1e-15));
        assert_eq!(energy(&p, &[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn energy_dimension_mismatch() {
        let p = RbmParams::zeros(2, 2);
        assert!(matches!(energy(&p, &[1.0], &[1.0, 0.0]), Err(RbmError::DimensionMismatch { .. })));
    }

    #[test]
    fn conditionals() {
        let mut p = RbmParams::zeros(3, 2);
        assert_eq!(p_h_given_v(&p, &[1.0, 0.3, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(p_v_given_h(&p, &[1.0, 0.0]).unwrap(), vec![0.5; 3]);
        p.c = vec![-5.0, 5.0];
        let h = p_h_given_v(&p, &[0.0; 3]).unwrap();
        assert!(close(h[0], 0.993307, 1e-6));
        assert!(close(h[1], 0.006693, 1e-6));
        p.b[1] = -5.0;
        assert!(close(p_v_given_h(&p, &[0.0, 0.0]).unwrap()[1], 0.993307, 1e-6));
        assert!(p_h_given_v(&p, &[0.0; 2]).is_err());
        assert!(p_v_given_h(&p, &[0.0; 3]).is_err());
    }

    #[test]
    fn conditionals_are_symmetric_under_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = RbmParams::zeros(4, 3);
        for x in p.w.iter_mut().chain(&mut p.b).chain(&mut p.c) {
            *x = rng.gen_range(-1.0..1.0);
        }
        let t = p.transposed();
        let x = [0.2, 0.9, 0.0, 1.0];
        assert_eq!(p_h_given_v(&p, &x).unwrap(), p_v_given_h(&t, &x).unwrap());
    }

    #[test]
    fn bernoulli_extremes_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(sample_bernoulli(&[0.0; 50], &mut rng).iter().all(|&x| x == 0.0));
        assert!(sample_bernoulli(&[1.0; 50], &mut rng).iter().all(|&x| x == 1.0));
        let draws = sample_bernoulli(&vec![0.5; 10_000], &mut rng);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn bernoulli_reproducible_per_seed() {
        let a = sample_bernoulli(&[0.3; 64], &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_bernoulli(&[0.3; 64], &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn schedules() {
        assert_eq!(cd_iterations(0), 1);
        assert_eq!(cd_iterations(9), 1);
        assert_eq!(cd_iterations(10), 2);
        assert_eq!(cd_iterations(25), 3);
        assert!(close(pretrain_rate(0, 1), 0.993307, 1e-6));
        assert!(close(pretrain_rate(50, 1), 0.5, 1e-15));
        assert!(close(pretrain_rate(100, 2), 0.5, 1e-15));
    }

    #[test]
    fn zero_rate_leaves_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = RbmParams::init(4, 2, &mut rng);
        let next = cd_k_update_with(&p, &[vec![1.0; 4]], 1, 0.0, &mut rng).unwrap();
        assert_eq!(next, p);
    }

    #[test]
    fn update_errors() {
        let p = RbmParams::zeros(4, 2);
        let cfg = CdConfig::default();
        assert_eq!(cd_k_update::<Vec<f64>>(&p, &[], &cfg), Err(RbmError::EmptyBatch));
        assert!(matches!(
            cd_k_update(&p, &[vec![1.0; 3]], &cfg),
            Err(RbmError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn update_raises_probability_of_data() {
        let p = RbmParams::zeros(4, 2);
        let ones = vec![1.0; 4];
        let before = exact_visible_probability(&p, &ones).unwrap();
        let cfg = CdConfig { epoch: 0, layer_index: 1, batch_size: 10, rng_seed: 42 };
        let next = cd_k_update(&p, &vec![ones.clone(); 10], &cfg).unwrap();
        let after = exact_visible_probability(&next, &ones).unwrap();
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn update_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = RbmParams::init(6, 3, &mut rng);
        let batch: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.gen()).collect()).collect();
        let cfg = CdConfig { epoch: 12, layer_index: 2, batch_size: 5, rng_seed: 77 };
        assert_eq!(cd_k_update(&p, &batch, &cfg), cd_k_update(&p, &batch, &cfg));
    }

    #[test]
    fn uniform_model_expectations() {
        let e = exact_model_expectations(&RbmParams::zeros(3, 2)).unwrap();
        assert!(e.vh.iter().all(|&x| close(x, 0.25, 1e-15)));
        assert!(e.v.iter().chain(&e.h).all(|&x| close(x, 0.5, 1e-15)));
    }

    #[test]
    fn two_by_one_hand_enumeration() {
        // v ∈ {0,1}², h ∈ {0,1}; weights w = [0.7, -0.4], b = [0.2, -0.1], c = [0.3]
        let p = RbmParams { n_visible: 2, n_hidden: 1, w: vec![0.7, -0.4], b: vec![0.2, -0.1], c: vec![0.3] };
        let mut z = 0.0;
        let (mut v0h, mut v1h, mut ev0, mut ev1, mut eh) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for v0 in [0.0, 1.0] {
            for v1 in [0.0f64, 1.0] {
                for h in [0.0, 1.0] {
                    let e = 0.2 * v0 - 0.1 * v1 + 0.3 * h + 0.7 * v0 * h - 0.4 * v1 * h;
                    let u = (-e).exp();
                    z += u;
                    v0h += v0 * h * u;
                    v1h += v1 * h * u;
                    ev0 += v0 * u;
                    ev1 += v1 * u;
                    eh += h * u;
                }
            }
        }
        let e = exact_model_expectations(&p).unwrap();
        assert!(close(e.vh[0], v0h / z, 1e-14));
        assert!(close(e.vh[1], v1h / z, 1e-14));
        assert!(close(e.v[0], ev0 / z, 1e-14));
        assert!(close(e.v[1], ev1 / z, 1e-14));
        assert!(close(e.h[0], eh / z, 1e-14));
    }

    #[test]
    fn enumeration_bound() {
        assert_eq!(exact_distribution(&RbmParams::zeros(15, 6)), Err(RbmError::TooLarge(21)));
    }

    #[test]
    fn configuration_index_round_trip() {
        let p = RbmParams::zeros(3, 2);
        for idx in 0..32 {
            let (v, h) = configuration(&p, idx);
            assert_eq!(configuration_index(3, &v, &h), idx);
        }
    }

    proptest! {
        #[test]
        fn schedule_monotonicity(ep in 0u32..1000, l in 1u32..6) {
            prop_assert!(cd_iterations(ep + 1) >= cd_iterations(ep));
            prop_assert!(pretrain_rate(ep + 1, l) < pretrain_rate(ep, l));
            prop_assert!(pretrain_rate(ep, l + 1) > pretrain_rate(ep, l));
        }

        #[test]
        fn probabilities_normalised(seed in any::<u64>(), nv in 1usize..6, nh in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = RbmParams::zeros(nv, nh);
            for x in p.w.iter_mut().chain(&mut p.b).chain(&mut p.c) {
                *x = rng.gen_range(-2.0..2.0);
            }
            let d = exact_distribution(&p).unwrap();
            prop_assert!(d.iter().all(|&x| x >= 0.0));
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
