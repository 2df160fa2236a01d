//! Trajectory and domain data model, train/validation splitting, on-disk
//! format and the synthetic suites used for desk-scale experiments.

mod io;
mod synthetic;

pub use io::{load_manifest, write_dataset, Manifest, ManifestEntry, MANIFEST_FILE, MANIFEST_VERSION};
pub use synthetic::{generate_synthetic_suite, SharedMap, SuiteSizes, SyntheticKind, OPERATOR_TIERS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One demonstration: a state and an action per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> Result<Self> {
        let traj = Trajectory { states, actions };
        traj.check().map_err(Error::Invalid)?;
        Ok(traj)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    /// Returns the first `len` steps.
    pub fn truncated(&self, len: usize) -> Trajectory {
        Trajectory {
            states: self.states[..len].to_vec(),
            actions: self.actions[..len].to_vec(),
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.states.is_empty() {
            return Err("trajectory has no steps".into());
        }
        if self.states.len() != self.actions.len() {
            return Err(format!(
                "{} states but {} actions",
                self.states.len(),
                self.actions.len()
            ));
        }
        let (ds, da) = (self.state_dim(), self.action_dim());
        if ds == 0 || da == 0 {
            return Err("zero-dimensional state or action".into());
        }
        for (t, (s, a)) in self.states.iter().zip(&self.actions).enumerate() {
            if s.len() != ds || a.len() != da {
                return Err(format!("step {t}: ragged state/action dimension"));
            }
            if !s.iter().chain(a).all(|v| v.is_finite()) {
                return Err(format!("step {t}: non-finite value"));
            }
        }
        Ok(())
    }
}

/// A named group of trajectories over which one mixture weight is learned.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub id: usize,
    pub name: String,
    trajectories: Vec<Trajectory>,
}

impl Domain {
    pub fn new(id: usize, name: impl Into<String>, trajectories: Vec<Trajectory>) -> Result<Self> {
        let name = name.into();
        let Some(first) = trajectories.first() else {
            return Err(Error::invalid(format!("domain `{name}` has no trajectories")));
        };
        let (ds, da) = (first.state_dim(), first.action_dim());
        for (i, traj) in trajectories.iter().enumerate() {
            traj.check().map_err(|message| Error::Data {
                domain: name.clone(),
                trajectory: i,
                message,
            })?;
            if traj.state_dim() != ds {
                return Err(Error::Data {
                    domain: name.clone(),
                    trajectory: i,
                    message: format!("state dimension {} differs from {ds}", traj.state_dim()),
                });
            }
            if traj.action_dim() != da {
                return Err(Error::Data {
                    domain: name.clone(),
                    trajectory: i,
                    message: format!("action dimension {} differs from {da}", traj.action_dim()),
                });
            }
        }
        Ok(Domain { id, name, trajectories })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Number of state-action pairs.
    pub fn size(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn state_dim(&self) -> usize {
        self.trajectories[0].state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.trajectories[0].action_dim()
    }

    /// Iterates over every action vector in trajectory order.
    pub fn actions(&self) -> impl Iterator<Item = &[f64]> {
        self.trajectories
            .iter()
            .flat_map(|t| t.actions.iter().map(Vec::as_slice))
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.trajectories
            .iter()
            .flat_map(|t| t.states.iter().map(Vec::as_slice))
    }

    /// Keeps only the first `n` trajectories.
    pub fn with_trajectory_count(&self, n: usize) -> Result<Domain> {
        let n = n.min(self.trajectories.len());
        Domain::new(self.id, self.name.clone(), self.trajectories[..n].to_vec())
    }
}

/// Checks that domain ids are exactly 0..k in order.
pub fn check_domain_ids(domains: &[Domain]) -> Result<()> {
    if domains.is_empty() {
        return Err(Error::invalid("empty domain list"));
    }
    for (i, d) in domains.iter().enumerate() {
        if d.id != i {
            return Err(Error::invalid(format!(
                "domain `{}` has id {} at position {i}",
                d.name, d.id
            )));
        }
    }
    Ok(())
}

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            seed: 0,
        }
    }
}

/// Holds out whole trajectories for validation.
///
/// The validation side receives `ceil(fraction * n)` trajectories (at least
/// one); both sides keep the original trajectory order.
pub fn split_train_val(domain: &Domain, spec: &SplitSpec) -> Result<(Domain, Domain)> {
    let f = spec.validation_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::invalid(format!("validation fraction {f} outside (0, 1)")));
    }
    let n = domain.trajectories.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "domain `{}` has {n} trajectory; at least 2 are needed to hold one out",
            domain.name
        )));
    }
    let n_val = ((f * n as f64).ceil() as usize).max(1);
    if n_val >= n {
        return Err(Error::invalid(format!(
            "validation fraction {f} leaves no training trajectories in domain `{}`",
            domain.name
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(domain.id as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    let pick = |idx: &[usize]| idx.iter().map(|&i| domain.trajectories[i].clone()).collect();
    Ok((
        Domain::new(domain.id, domain.name.clone(), pick(&train_idx))?,
        Domain::new(domain.id, domain.name.clone(), pick(&val_idx))?,
    ))
}
