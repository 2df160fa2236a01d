//! Seeded synthetic domain suites.
//!
//! All suites share one state process: each trajectory is a stationary
//! Gaussian AR(1) walk with unit marginal variance. Actions come from a
//! fixed smooth map of the state, perturbed per suite.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Domain, Trajectory};
use crate::error::{Error, Result};

const STATE_CORRELATION: f64 = 0.9;

/// Raw action scale of the learnable `noise_pair` domain.
const SMALL_ACTION_SCALE: f64 = 0.1;
const SMALL_ACTION_NOISE: f64 = 0.05;

/// (name, additive action noise std) for the operator suite.
pub const OPERATOR_TIERS: [(&str, f64); 6] = [
    ("better_1", 0.1),
    ("better_2", 0.1),
    ("okay_1", 0.3),
    ("okay_2", 0.3),
    ("worse_1", 0.6),
    ("worse_2", 0.6),
];

const MODE_OFFSET: f64 = 2.0;
const MULTIMODAL_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    NoisePair,
    OperatorTiers,
    Multimodal,
}

impl SyntheticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::NoisePair => "noise_pair",
            SyntheticKind::OperatorTiers => "operator_tiers",
            SyntheticKind::Multimodal => "multimodal",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise_pair" => Ok(SyntheticKind::NoisePair),
            "operator_tiers" => Ok(SyntheticKind::OperatorTiers),
            "multimodal" => Ok(SyntheticKind::Multimodal),
            other => Err(Error::invalid(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSizes {
    /// Trajectories per domain.
    pub trajectories: usize,
    /// Steps per trajectory.
    pub steps: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        SuiteSizes {
            trajectories: 100,
            steps: 50,
            state_dim: 8,
            action_dim: 4,
        }
    }
}

/// The state-to-action map shared by every domain of a suite:
/// `a_j = tanh(w_j . s + b_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedMap {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl SharedMap {
    fn sample(rng: &mut ChaCha8Rng, state_dim: usize, action_dim: usize) -> Self {
        let scale = 1.5 / (state_dim as f64).sqrt();
        let weights = (0..action_dim)
            .map(|_| {
                (0..state_dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let biases = (0..action_dim)
            .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        SharedMap { weights, biases }
    }

    /// The map used by every suite generated with `seed`.
    pub fn for_seed(seed: u64, state_dim: usize, action_dim: usize) -> Self {
        SharedMap::sample(&mut stream(seed, 0), state_dim, action_dim)
    }

    pub fn eval(&self, state: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| (w.iter().zip(state).map(|(w, s)| w * s).sum::<f64>() + b).tanh())
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn state_walk(rng: &mut ChaCha8Rng, steps: usize, dim: usize) -> Vec<Vec<f64>> {
    let innovation = (1.0 - STATE_CORRELATION * STATE_CORRELATION).sqrt();
    let mut s: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(s.clone());
        for v in &mut s {
            *v = STATE_CORRELATION * *v + innovation * normal(rng);
        }
    }
    out
}

fn build_domain<F>(id: usize, name: &str, seed: u64, sizes: &SuiteSizes, mut action: F) -> Result<Domain>
where
    F: FnMut(&mut ChaCha8Rng, &[f64]) -> Vec<f64>,
{
    let mut rng = stream(seed, 1 + id as u64);
    let trajectories = (0..sizes.trajectories)
        .map(|_| {
            let states = state_walk(&mut rng, sizes.steps, sizes.state_dim);
            let actions = states.iter().map(|s| action(&mut rng, s)).collect();
            Trajectory::new(states, actions)
        })
        .collect::<Result<Vec<_>>>()?;
    Domain::new(id, name, trajectories)
}

/// Generates one of the synthetic suites. Pure in `(kind, seed, sizes)`.
///
/// * `noise_pair`: `learnable` has small-scale actions given by the shared
///   map plus slight noise; `noise` has i.i.d. standard Gaussian actions.
/// * `operator_tiers`: six domains over the shared map with better, okay
///   and worse additive action noise, two per tier.
/// * `multimodal`: `multimodal` shifts every action by a random sign times a
///   fixed offset; `unimodal` is the matching single-mode control.
pub fn generate_synthetic_suite(kind: SyntheticKind, seed: u64, sizes: &SuiteSizes) -> Result<Vec<Domain>> {
    if sizes.trajectories == 0 || sizes.steps == 0 || sizes.state_dim == 0 || sizes.action_dim == 0 {
        return Err(Error::invalid("synthetic suite sizes must be positive"));
    }
    let map = SharedMap::for_seed(seed, sizes.state_dim, sizes.action_dim);
    let da = sizes.action_dim;
    match kind {
        SyntheticKind::NoisePair => Ok(vec![
            build_domain(0, "learnable", seed, sizes, |rng, s| {
                map.eval(s)
                    .into_iter()
                    .map(|m| SMALL_ACTION_SCALE * (m + SMALL_ACTION_NOISE * normal(rng)))
                    .collect()
            })?,
            build_domain(1, "noise", seed, sizes, |rng, _| (0..da).map(|_| normal(rng)).collect())?,
        ]),
        SyntheticKind::OperatorTiers => OPERATOR_TIERS
            .iter()
            .enumerate()
            .map(|(id, &(name, noise))| {
                build_domain(id, name, seed, sizes, |rng, s| {
                    map.eval(s).into_iter().map(|m| m + noise * normal(rng)).collect()
                })
            })
            .collect(),
        SyntheticKind::Multimodal => Ok(vec![
            build_domain(0, "multimodal", seed, sizes, |rng, s| {
                map.eval(s)
                    .into_iter()
                    .map(|m| {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        m + sign * MODE_OFFSET + MULTIMODAL_NOISE * normal(rng)
                    })
                    .collect()
            })?,
            build_domain(1, "unimodal", seed, sizes, |rng, s| {
                map.eval(s)
                    .into_iter()
                    .map(|m| m + MULTIMODAL_NOISE * normal(rng))
                    .collect()
            })?,
        ]),
    }
}
