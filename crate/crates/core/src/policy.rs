//! Discrete behavior-cloning policy.
//!
//! A rectifier MLP maps a state to `action_dim` independent categorical
//! heads of `bins` logits each. The negative log-likelihood of an action is
//! the sum of the per-head cross entropies.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];
pub const DEFAULT_LEARNING_RATE: f64 = 2e-4;
pub const DEFAULT_BATCH_SIZE: usize = 256;

/// Rows per forward pass when evaluating large sets.
const EVAL_CHUNK: usize = 1024;

/// One affine layer; `weight` is `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros_like(other: &Dense) -> Dense {
        Dense {
            weight: Array2::zeros(other.weight.raw_dim()),
            bias: Array1::zeros(other.bias.raw_dim()),
        }
    }

    fn all_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub state_dim: usize,
    pub action_dim: usize,
    pub bins: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub layers: Vec<Dense>,
}

/// Gradient with the same layout as [`PolicyParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Dense::all_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|&v| v == 0.0))
    }
}

/// Deterministic initialization: fan-in scaled Gaussian weights, zero biases.
///
/// Hidden layers use `sqrt(2 / fan_in)`, the output layer `0.1 / sqrt(fan_in)`
/// so that initial heads are close to uniform.
pub fn init_policy(state_dim: usize, action_dim: usize, bins: usize, hidden: &[usize], seed: u64) -> Result<PolicyParams> {
    if state_dim == 0 || action_dim == 0 || hidden.contains(&0) {
        return Err(Error::invalid("policy dimensions must be positive"));
    }
    if bins < 2 {
        return Err(Error::invalid(format!("policy needs at least 2 bins, got {bins}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut widths = vec![state_dim];
    widths.extend_from_slice(hidden);
    widths.push(action_dim * bins);
    let n_layers = widths.len() - 1;
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = if i + 1 == n_layers { 0.01 } else { 2.0 };
            let scale = (gain / fan_in as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                scale * rng.sample::<f64, _>(StandardNormal)
            });
            Dense {
                weight,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(PolicyParams {
        state_dim,
        action_dim,
        bins,
        hidden: hidden.to_vec(),
        seed,
        layers,
    })
}

/// Cached activations of one batch forward pass.
struct Forward {
    /// Input to each layer (the batch itself first).
    inputs: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl PolicyParams {
    pub fn output_width(&self) -> usize {
        self.action_dim * self.bins
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Dense::all_finite)
    }

    /// True when both policies can be compared example by example.
    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.state_dim == other.state_dim
            && self.action_dim == other.action_dim
            && self.bins == other.bins
            && self.hidden == other.hidden
    }

    fn forward(&self, states: ArrayView2<f64>) -> Forward {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = states.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weight);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(x);
            x = z;
        }
        Forward { inputs, logits: x }
    }

    /// Raw logits, `n x (action_dim * bins)`.
    pub fn logits(&self, states: ArrayView2<f64>) -> Array2<f64> {
        self.forward(states).logits
    }

    fn check_batch(&self, states: &ArrayView2<f64>, bins: &ArrayView2<usize>) -> Result<()> {
        if states.ncols() != self.state_dim {
            return Err(Error::DimensionMismatch {
                context: "policy input".into(),
                expected: self.state_dim,
                found: states.ncols(),
            });
        }
        if bins.ncols() != self.action_dim {
            return Err(Error::DimensionMismatch {
                context: "policy action heads".into(),
                expected: self.action_dim,
                found: bins.ncols(),
            });
        }
        if states.nrows() != bins.nrows() {
            return Err(Error::DimensionMismatch {
                context: "batch rows".into(),
                expected: states.nrows(),
                found: bins.nrows(),
            });
        }
        if let Some(&b) = bins.iter().find(|&&b| b >= self.bins) {
            return Err(Error::invalid(format!("action bin {b} out of range 0..{}", self.bins)));
        }
        Ok(())
    }

    /// Per-example NLL over a batch.
    pub fn nll_batch(&self, states: ArrayView2<f64>, bins: ArrayView2<usize>) -> Result<Vec<f64>> {
        self.check_batch(&states, &bins)?;
        let mut out = Vec::with_capacity(states.nrows());
        let mut start = 0;
        while start < states.nrows() {
            let end = (start + EVAL_CHUNK).min(states.nrows());
            let logits = self.logits(states.slice(s![start..end, ..]));
            for (row, target) in logits.outer_iter().zip(bins.slice(s![start..end, ..]).outer_iter()) {
                out.push(row_nll(row, target, self.bins));
            }
            start = end;
        }
        Ok(out)
    }

    /// Mean NLL over a batch.
    pub fn mean_nll(&self, states: ArrayView2<f64>, bins: ArrayView2<usize>) -> Result<f64> {
        let losses = self.nll_batch(states, bins)?;
        if losses.is_empty() {
            return Err(Error::invalid("mean NLL of an empty batch"));
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsutil::read_json(path)
    }
}

/// Stable log-sum-exp of a slice.
fn log_sum_exp(xs: ArrayView1<f64>) -> f64 {
    let max = xs.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + xs.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn row_nll(logits: ArrayView1<f64>, target: ArrayView1<usize>, bins: usize) -> f64 {
    target
        .iter()
        .enumerate()
        .map(|(head, &b)| {
            let slice = logits.slice(s![head * bins..(head + 1) * bins]);
            log_sum_exp(slice) - slice[b]
        })
        .sum()
}

/// NLL of one action under the policy: the sum over heads of
/// `-log softmax(logits_head)[bin_head]`.
pub fn nll(policy: &PolicyParams, state: &[f64], action_bins: &[usize]) -> Result<f64> {
    let states = ArrayView2::from_shape((1, state.len()), state)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let bins = ArrayView2::from_shape((1, action_bins.len()), action_bins)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(policy.nll_batch(states, bins)?[0])
}

/// Gradient of `sum_j w_j nll_j / sum_j w_j`, plus that weighted mean loss.
pub fn grad_nll(
    policy: &PolicyParams,
    states: ArrayView2<f64>,
    bins: ArrayView2<usize>,
    weights: &[f64],
) -> Result<(Gradients, f64)> {
    policy.check_batch(&states, &bins)?;
    if weights.len() != states.nrows() {
        return Err(Error::DimensionMismatch {
            context: "example weights".into(),
            expected: states.nrows(),
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("example weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("example weights are all zero"));
    }

    let fwd = policy.forward(states);
    let nb = policy.bins;
    // dL/dlogits = w_j / W * (softmax - onehot), head by head.
    let mut delta = fwd.logits;
    let mut loss = 0.0;
    for ((mut row, target), &w) in delta.outer_iter_mut().zip(bins.outer_iter()).zip(weights) {
        let scale = w / total;
        for (head, &b) in target.iter().enumerate() {
            let mut slice = row.slice_mut(s![head * nb..(head + 1) * nb]);
            let lse = log_sum_exp(slice.view());
            loss += scale * (lse - slice[b]);
            slice.mapv_inplace(|v| scale * (v - lse).exp());
            slice[b] -= scale;
        }
    }

    let mut grads: Vec<Dense> = Vec::with_capacity(policy.layers.len());
    for (i, layer) in policy.layers.iter().enumerate().rev() {
        let input = &fwd.inputs[i];
        let weight = input.t().dot(&delta);
        let bias = delta.sum_axis(Axis(0));
        if i > 0 {
            let mut back = delta.dot(&layer.weight.t());
            // Rectifier derivative: the layer input is the previous activation.
            Zip::from(&mut back).and(input).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = back;
        }
        grads.push(Dense { weight, bias });
    }
    grads.reverse();
    Ok((Gradients { layers: grads }, loss))
}

/// Cosine decay from `initial` at step 0 to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub initial: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.initial;
        }
        let progress = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.initial * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub schedule: CosineSchedule,
    pub step: u64,
    pub first_moment: Vec<Dense>,
    pub second_moment: Vec<Dense>,
}

impl OptimizerState {
    pub fn new(params: &PolicyParams, schedule: CosineSchedule) -> Self {
        let zeros: Vec<Dense> = params.layers.iter().map(Dense::zeros_like).collect();
        OptimizerState {
            config: AdamConfig::default(),
            schedule,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Learning rate the next step will use.
    pub fn scheduled_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }
}

/// One bias-corrected adaptive-moment update at learning rate `lr`.
pub fn adam_step(params: &mut PolicyParams, state: &mut OptimizerState, grads: &Gradients, lr: f64) -> Result<()> {
    if grads.layers.len() != params.layers.len()
        || grads
            .layers
            .iter()
            .zip(&params.layers)
            .any(|(g, p)| g.weight.dim() != p.weight.dim() || g.bias.dim() != p.bias.dim())
    {
        return Err(Error::invalid("gradient shape does not match policy"));
    }
    if !grads.all_finite() {
        return Err(Error::Numerical(format!(
            "non-finite gradient at optimizer step {}",
            state.step
        )));
    }
    let AdamConfig { beta1, beta2, epsilon } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        };
        Zip::from(&mut p.weight)
            .and(&g.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(update);
        Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(update);
    }
    if !params.all_finite() {
        return Err(Error::Numerical(format!(
            "non-finite parameter after optimizer step {}",
            state.step
        )));
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned dump of a policy and its optimizer, stamped with the
/// preprocessing fingerprint it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: String,
    pub step: u64,
    pub params: PolicyParams,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fsutil::write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = fsutil::read_json(path)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Errors unless the checkpoint was produced under `fingerprint`.
    pub fn require_fingerprint(&self, fingerprint: &str, context: &str) -> Result<()> {
        if self.fingerprint != fingerprint {
            return Err(Error::HashMismatch {
                context: context.to_string(),
                expected: fingerprint.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn zero_policy(action_dim: usize, bins: usize) -> PolicyParams {
        let mut p = init_policy(3, action_dim, bins, &[4], 0).unwrap();
        for l in &mut p.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        p
    }

    /// Softmax cross entropy written out directly, without log-sum-exp.
    fn direct_nll(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
        logits
            .iter()
            .zip(targets)
            .map(|(row, &t)| {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[t].exp() / z).ln()
            })
            .sum()
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let a = init_policy(10, 7, 256, &[256, 256], 3).unwrap();
        let b = init_policy(10, 7, 256, &[256, 256], 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.output_width(), 1792);
        assert_eq!(a.layers.last().unwrap().weight.ncols(), 1792);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert_ne!(a, init_policy(10, 7, 256, &[256, 256], 4).unwrap());
    }

    #[test]
    fn init_heads_are_near_uniform() {
        let p = init_policy(10, 7, 256, &[256, 256], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let states = Array2::from_shape_simple_fn((100, 10), || rng.sample::<f64, _>(StandardNormal));
        let logits = p.logits(states.view());
        for row in logits.outer_iter() {
            for head in 0..7 {
                let slice = row.slice(s![head * 256..(head + 1) * 256]);
                let lse = log_sum_exp(slice);
                let max_p = slice.fold(0.0f64, |m, &v| m.max((v - lse).exp()));
                assert!(max_p < 0.1, "max prob {max_p}");
            }
        }
    }

    #[test]
    fn uniform_logits_give_log_bins() {
        let p = zero_policy(7, 256);
        let loss = nll(&p, &[0.3, -1.0, 2.0], &[0, 17, 255, 128, 3, 9, 200]).unwrap();
        assert!((loss - 7.0 * 256f64.ln()).abs() < 1e-12, "{loss}");
        assert!((loss - 38.8162).abs() < 1e-4);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let mut p = zero_policy(2, 5);
        let targets = [1usize, 4];
        for (head, &b) in targets.iter().enumerate() {
            p.layers[1].bias[head * 5 + b] = 50.0;
        }
        let loss = nll(&p, &[1.0, 2.0, 3.0], &targets).unwrap();
        assert!(loss >= 0.0 && loss < 1e-6, "{loss}");
    }

    #[test]
    fn two_head_fixture_matches_direct_softmax() {
        let mut p = zero_policy(2, 3);
        let logits = [vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 5.0]];
        for (head, row) in logits.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                p.layers[1].bias[head * 3 + b] = v;
            }
        }
        let expected = direct_nll(&logits, &[2, 2]);
        let got = nll(&p, &[0.1, 0.2, 0.3], &[2, 2]).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        // Frozen value: -ln(e^3 / (e + e^2 + e^3)) - ln(e^5 / (2 + e^5)).
        assert!((got - 0.42099186616582923).abs() < 1e-12, "{got}");
    }

    #[test]
    fn out_of_range_bin_is_rejected() {
        let p = zero_policy(2, 3);
        assert!(nll(&p, &[0.0, 0.0, 0.0], &[0, 3]).is_err());
    }

    #[test]
    fn zero_weights_are_rejected() {
        let p = zero_policy(1, 3);
        let states = array![[0.0, 0.0, 0.0]];
        let bins = array![[1usize]];
        assert!(grad_nll(&p, states.view(), bins.view(), &[0.0]).is_err());
        assert!(grad_nll(&p, states.view(), bins.view(), &[-1.0]).is_err());
        assert!(grad_nll(&p, states.view(), bins.view(), &[f64::NAN]).is_err());
    }

    #[test]
    fn cosine_midpoint_is_half() {
        let s = CosineSchedule { initial: 2e-4, total_steps: 1000 };
        assert_eq!(s.lr_at(0), 2e-4);
        assert!((s.lr_at(500) - 1e-4).abs() < 1e-18);
        assert!(s.lr_at(1000).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = init_policy(3, 2, 4, &[8], 5).unwrap();
        let before = p.clone();
        let mut state = OptimizerState::new(&p, CosineSchedule { initial: 1e-3, total_steps: 10 });
        let grads = Gradients {
            layers: p.layers.iter().map(Dense::zeros_like).collect(),
        };
        adam_step(&mut p, &mut state, &grads, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn non_finite_gradient_is_numerical_error() {
        let mut p = init_policy(3, 2, 4, &[8], 5).unwrap();
        let mut state = OptimizerState::new(&p, CosineSchedule { initial: 1e-3, total_steps: 10 });
        let mut grads = Gradients {
            layers: p.layers.iter().map(Dense::zeros_like).collect(),
        };
        grads.layers[0].bias[0] = f64::NAN;
        let err = adam_step(&mut p, &mut state, &grads, 1e-3).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = init_policy(3, 2, 4, &[8], 5).unwrap();
        let state = OptimizerState::new(&p, CosineSchedule { initial: 1e-3, total_steps: 10 });
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            fingerprint: "abc".into(),
            step: 7,
            params: p,
            optimizer: state,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert!(back.require_fingerprint("abc", "test").is_ok());
        assert!(matches!(back.require_fingerprint("xyz", "test"), Err(Error::HashMismatch { .. })));
    }
}
