//! Group-robust optimization over the excess loss.
//!
//! Each step draws `m` examples from every domain, estimates the per-domain
//! excess loss of the learned policy over the frozen reference, takes one
//! exponentiated-gradient ascent step on the mixture weights and then one
//! weighted descent step on the policy. The output is the mean of the
//! weights over all steps.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{self, CosineSchedule, OptimizerState, PolicyParams, DEFAULT_LEARNING_RATE};
use crate::preprocess::PreparedDomain;

/// Tolerance on `sum(alpha) = 1` for weights handed to the optimizer.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Uniform,
    Human,
    DroInstant,
    DroAveraged,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Uniform => "uniform",
            Provenance::Human => "human",
            Provenance::DroInstant => "dro_instant",
            Provenance::DroAveraged => "dro_averaged",
        })
    }
}

/// A point on the probability simplex over domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub alpha: Vec<f64>,
    pub provenance: Provenance,
}

impl MixtureWeights {
    /// Normalizes non-negative finite weights onto the simplex.
    pub fn from_unnormalized(weights: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("mixture weights are empty"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("mixture weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("mixture weights sum to zero"));
        }
        Ok(MixtureWeights {
            alpha: weights.into_iter().map(|w| w / total).collect(),
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

pub(crate) fn check_simplex(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() {
        return Err(Error::invalid("empty weight vector"));
    }
    if alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    let total: f64 = alpha.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::invalid(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

/// One exponentiated-gradient ascent step followed by uniform smoothing:
/// `a_i exp(eta l_i)`, renormalized, then `(1 - c) a + c / k`.
pub fn update_alpha(alpha: &[f64], excess: &[f64], eta: f64, smoothing: f64) -> Result<Vec<f64>> {
    check_simplex(alpha)?;
    if excess.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            context: "excess losses".into(),
            expected: alpha.len(),
            found: excess.len(),
        });
    }
    if excess.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numerical("non-finite excess loss".into()));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("step size {eta} must be positive")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!("smoothing {smoothing} outside [0, 1)")));
    }

    let shift = excess.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(eta * l));
    let factors: Vec<f64> = excess.iter().map(|&l| (eta * l - shift).exp()).collect();
    let mut next: Vec<f64> = if factors.iter().all(|&f| f == 1.0) {
        // Equal factors cancel in the normalization.
        alpha.to_vec()
    } else {
        let scaled: Vec<f64> = alpha.iter().zip(&factors).map(|(a, f)| a * f).collect();
        let total: f64 = scaled.iter().sum();
        scaled.into_iter().map(|v| v / total).collect()
    };
    if smoothing > 0.0 {
        let k = alpha.len() as f64;
        // A convex combination of two simplex points; no renormalization,
        // so the c/k floor holds exactly.
        next.iter_mut()
            .for_each(|a| *a = (1.0 - smoothing) * *a + smoothing / k);
    }
    Ok(next)
}

/// `m` examples from each of `k` domains, domain-major.
#[derive(Debug, Clone)]
pub struct StratifiedBatch {
    pub states: Array2<f64>,
    pub bins: Array2<usize>,
    pub domain_of_row: Vec<usize>,
    pub num_domains: usize,
}

impl StratifiedBatch {
    /// Samples `per_domain` rows uniformly with replacement from every domain.
    pub fn sample<R: Rng>(domains: &[PreparedDomain], per_domain: usize, rng: &mut R) -> Result<Self> {
        let first = domains
            .first()
            .ok_or_else(|| Error::invalid("no domains to sample from"))?;
        let (ds, da) = (first.states.ncols(), first.bins.ncols());
        let rows = domains.len() * per_domain;
        let mut states = Array2::zeros((rows, ds));
        let mut bins = Array2::zeros((rows, da));
        let mut domain_of_row = Vec::with_capacity(rows);
        let mut r = 0;
        for (i, d) in domains.iter().enumerate() {
            if d.is_empty() {
                return Err(Error::invalid(format!("domain `{}` is empty", d.name)));
            }
            for _ in 0..per_domain {
                let j = rng.random_range(0..d.len());
                states.row_mut(r).assign(&d.states.row(j));
                bins.row_mut(r).assign(&d.bins.row(j));
                domain_of_row.push(i);
                r += 1;
            }
        }
        Ok(StratifiedBatch {
            states,
            bins,
            domain_of_row,
            num_domains: domains.len(),
        })
    }

    pub fn states(&self) -> ArrayView2<'_, f64> {
        self.states.view()
    }

    pub fn bins(&self) -> ArrayView2<'_, usize> {
        self.bins.view()
    }
}

/// Per-domain mean of `nll_theta - nll_ref`, optionally clipped below at zero.
pub fn excess_losses(
    theta: &PolicyParams,
    reference: &PolicyParams,
    batch: &StratifiedBatch,
    clip_at_zero: bool,
) -> Result<Vec<f64>> {
    if !theta.same_shape(reference) {
        return Err(Error::invalid("learned and reference policies differ in shape"));
    }
    let ours = theta.nll_batch(batch.states(), batch.bins())?;
    let theirs = reference.nll_batch(batch.states(), batch.bins())?;
    let k = batch.num_domains;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for ((&d, a), b) in batch.domain_of_row.iter().zip(&ours).zip(&theirs) {
        sums[d] += a - b;
        counts[d] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("batch holds no examples of domain {missing}")));
    }
    let mut out: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite excess loss".into()));
    }
    if clip_at_zero {
        out.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DroConfig {
    /// Step size of the exponentiated-gradient update.
    pub eta: f64,
    /// Uniform smoothing `c` mixed into every update.
    pub smoothing: f64,
    pub clip_excess_at_zero: bool,
    /// Examples per domain per step.
    pub per_domain_batch: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DroConfig {
    fn default() -> Self {
        DroConfig {
            eta: 0.1,
            smoothing: 1e-3,
            clip_excess_at_zero: true,
            per_domain_batch: 32,
            total_steps: 1000,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
        }
    }
}

impl DroConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta {} must be positive", self.eta)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::invalid(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        if self.per_domain_batch == 0 {
            return Err(Error::invalid("per-domain batch size must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("DRO needs at least one step"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Step-by-step record of a DRO run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DroTrace {
    /// Weights after each step's update.
    pub alphas: Vec<Vec<f64>>,
    /// Excess-loss estimates that drove each update.
    pub excess: Vec<Vec<f64>>,
    running_mean: Vec<f64>,
}

impl DroTrace {
    pub fn new() -> Self {
        DroTrace::default()
    }

    pub fn push(&mut self, alpha: Vec<f64>, excess: Vec<f64>) {
        if self.running_mean.is_empty() {
            self.running_mean = vec![0.0; alpha.len()];
        }
        let t = (self.alphas.len() + 1) as f64;
        for (m, a) in self.running_mean.iter_mut().zip(&alpha) {
            *m += (a - *m) / t;
        }
        self.alphas.push(alpha);
        self.excess.push(excess);
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn num_domains(&self) -> usize {
        self.alphas.first().map_or(0, Vec::len)
    }

    /// Incrementally maintained mean of the weights pushed so far.
    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }
}

/// Arithmetic mean of the traced weights, renormalized onto the simplex.
pub fn average_alpha(trace: &DroTrace) -> Result<MixtureWeights> {
    if trace.is_empty() {
        return Err(Error::invalid("cannot average an empty trace"));
    }
    let k = trace.num_domains();
    let mut sum = vec![0.0; k];
    for alpha in &trace.alphas {
        for (s, a) in sum.iter_mut().zip(alpha) {
            *s += a;
        }
    }
    let n = trace.len() as f64;
    MixtureWeights::from_unnormalized(sum.into_iter().map(|s| s / n).collect(), Provenance::DroAveraged)
}

/// Runs the min-max loop, appending to `trace` as it goes.
///
/// The learned policy starts from a fresh initialization with the
/// reference's architecture and `config.seed`. On a numerical failure the
/// error is returned and `trace` keeps every completed step.
pub fn run_dro(
    train: &[PreparedDomain],
    reference: &PolicyParams,
    config: &DroConfig,
    trace: &mut DroTrace,
) -> Result<MixtureWeights> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training domains"));
    }
    for d in train {
        if d.states.ncols() != reference.state_dim
            || d.bins.ncols() != reference.action_dim
            || d.num_bins != reference.bins
        {
            return Err(Error::invalid(format!(
                "domain `{}` does not match the reference policy's dimensions",
                d.name
            )));
        }
    }
    let k = train.len();
    let m = config.per_domain_batch;
    let mut theta = policy::init_policy(
        reference.state_dim,
        reference.action_dim,
        reference.bins,
        &reference.hidden,
        config.seed,
    )?;
    let mut opt = OptimizerState::new(
        &theta,
        CosineSchedule {
            initial: config.learning_rate,
            total_steps: config.total_steps,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut alpha = vec![1.0 / k as f64; k];

    for step in 0..config.total_steps {
        let batch = StratifiedBatch::sample(train, m, &mut rng)?;
        let excess = excess_losses(&theta, reference, &batch, config.clip_excess_at_zero)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("DRO step {step}: {msg}")),
                other => other,
            })?;
        alpha = update_alpha(&alpha, &excess, config.eta, config.smoothing)?;
        trace.push(alpha.clone(), excess);

        let weights: Vec<f64> = batch
            .domain_of_row
            .iter()
            .map(|&d| alpha[d] / m as f64)
            .collect();
        let (grads, loss) = policy::grad_nll(&theta, batch.states(), batch.bins(), &weights)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("DRO step {step}: non-finite policy loss")));
        }
        let lr = opt.scheduled_lr();
        policy::adam_step(&mut theta, &mut opt, &grads, lr)?;
    }
    average_alpha(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_policy;

    fn prepared(id: usize, n: usize, seed: u64) -> PreparedDomain {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PreparedDomain {
            id,
            name: format!("d{id}"),
            states: Array2::from_shape_simple_fn((n, 3), || rng.random_range(-1.0..1.0)),
            bins: Array2::from_shape_simple_fn((n, 2), || rng.random_range(0..4usize)),
            num_bins: 4,
        }
    }

    #[test]
    fn zero_excess_without_smoothing_is_a_fixed_point() {
        let alpha = vec![0.2, 0.3, 0.5];
        assert_eq!(update_alpha(&alpha, &[0.0; 3], 0.1, 0.0).unwrap(), alpha);
    }

    #[test]
    fn two_domain_closed_form() {
        let next = update_alpha(&[0.5, 0.5], &[1.0, 0.0], 0.1, 0.0).unwrap();
        let e = 0.1f64.exp();
        assert!((next[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((next[0] - 0.52498).abs() < 1e-5);
        assert!((next[1] - 0.47502).abs() < 1e-5);

        let smoothed = update_alpha(&[0.5, 0.5], &[1.0, 0.0], 0.1, 1e-3).unwrap();
        for i in 0..2 {
            let expected = 0.999 * next[i] + 0.001 * 0.5;
            assert!((smoothed[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_excess_does_not_overflow() {
        let next = update_alpha(&[0.5, 0.5], &[1e6, 0.0], 1.0, 0.0).unwrap();
        assert_eq!(next, vec![1.0, 0.0]);
    }

    #[test]
    fn update_rejects_bad_input() {
        assert!(update_alpha(&[0.5, 0.6], &[0.0, 0.0], 0.1, 0.0).is_err());
        assert!(update_alpha(&[0.5, 0.5], &[0.0], 0.1, 0.0).is_err());
        assert!(update_alpha(&[0.5, 0.5], &[f64::NAN, 0.0], 0.1, 0.0).is_err());
        assert!(update_alpha(&[0.5, 0.5], &[0.0, 0.0], 0.0, 0.0).is_err());
        assert!(update_alpha(&[0.5, 0.5], &[0.0, 0.0], 0.1, 1.0).is_err());
    }

    #[test]
    fn identical_policies_have_zero_excess() {
        let domains = vec![prepared(0, 20, 1), prepared(1, 30, 2)];
        let p = init_policy(3, 2, 4, &[8], 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = StratifiedBatch::sample(&domains, 5, &mut rng).unwrap();
        assert_eq!(excess_losses(&p, &p, &batch, false).unwrap(), vec![0.0, 0.0]);
        assert_eq!(excess_losses(&p, &p, &batch, true).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn confident_policy_has_negative_excess_against_uniform() {
        let (da, nb) = (2usize, 4usize);
        let mut uniform = init_policy(3, da, nb, &[8], 0).unwrap();
        for l in &mut uniform.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        // Every example targets bin 1 on both heads.
        let mut d = prepared(0, 10, 3);
        d.bins.fill(1);
        let mut confident = uniform.clone();
        for head in 0..da {
            confident.layers[1].bias[head * nb + 1] = 50.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = StratifiedBatch::sample(&[d], 4, &mut rng).unwrap();
        let raw = excess_losses(&confident, &uniform, &batch, false).unwrap();
        assert!((raw[0] + da as f64 * (nb as f64).ln()).abs() < 1e-6, "{raw:?}");
        assert_eq!(excess_losses(&confident, &uniform, &batch, true).unwrap(), vec![0.0]);
    }

    #[test]
    fn mismatched_reference_is_rejected() {
        let domains = vec![prepared(0, 20, 1)];
        let a = init_policy(3, 2, 4, &[8], 7).unwrap();
        let b = init_policy(3, 2, 4, &[16], 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = StratifiedBatch::sample(&domains, 5, &mut rng).unwrap();
        assert!(excess_losses(&a, &b, &batch, true).is_err());
    }

    #[test]
    fn missing_domain_in_batch_is_an_error() {
        let domains = vec![prepared(0, 20, 1), prepared(1, 30, 2)];
        let p = init_policy(3, 2, 4, &[8], 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut batch = StratifiedBatch::sample(&domains, 5, &mut rng).unwrap();
        batch.num_domains = 3;
        assert!(excess_losses(&p, &p, &batch, false).is_err());
    }

    #[test]
    fn averaging() {
        let mut trace = DroTrace::new();
        assert!(average_alpha(&trace).is_err());
        trace.push(vec![1.0, 0.0], vec![0.0, 0.0]);
        trace.push(vec![0.0, 1.0], vec![0.0, 0.0]);
        let avg = average_alpha(&trace).unwrap();
        assert_eq!(avg.alpha, vec![0.5, 0.5]);
        assert_eq!(avg.provenance, Provenance::DroAveraged);

        let mut constant = DroTrace::new();
        for _ in 0..17 {
            constant.push(vec![0.2, 0.3, 0.5], vec![0.0; 3]);
        }
        let avg = average_alpha(&constant).unwrap();
        for (a, b) in avg.alpha.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dro_is_deterministic_and_stays_on_simplex() {
        let domains = vec![prepared(0, 40, 1), prepared(1, 60, 2), prepared(2, 50, 3)];
        let reference = init_policy(3, 2, 4, &[8], 11).unwrap();
        let config = DroConfig { total_steps: 30, per_domain_batch: 4, seed: 5, ..DroConfig::default() };
        let mut t1 = DroTrace::new();
        let mut t2 = DroTrace::new();
        let w1 = run_dro(&domains, &reference, &config, &mut t1).unwrap();
        let w2 = run_dro(&domains, &reference, &config, &mut t2).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), 30);
        for (alpha, excess) in t1.alphas.iter().zip(&t1.excess) {
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(alpha.iter().all(|&a| a >= config.smoothing / 3.0));
            assert!(excess.iter().all(|&l| l >= 0.0));
        }
    }
}
