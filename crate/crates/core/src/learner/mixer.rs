use std::collections::BTreeMap;

use crate::aim::{aim_greedy_step, aim_mean_step, running_mean, single_best_update, ActivePolicy, AimPolicy, UpdateBranch};
use crate::cmdp::{ConstraintSpec, MeasurementVector, PolicyId};

use super::MixerKind;

#[derive(Debug, Clone)]
enum State {
    StoreAll {
        /// Distinct policies in first-seen order with their export counts.
        entries: Vec<(PolicyId, MeasurementVector, usize)>,
        target: Option<MeasurementVector>,
        exports: usize,
    },
    SingleBest(Option<(PolicyId, MeasurementVector)>),
    Aim(AimPolicy),
}

/// Result of offering one exported policy to the mixer.
#[derive(Debug, Clone)]
pub struct MixerOutcome {
    pub branch: Option<UpdateBranch>,
    pub rebuilt: bool,
    /// The update failed and the previous mixture was kept.
    pub error: Option<String>,
}

/// Mixed-policy manager fed by the training loop.
#[derive(Debug, Clone)]
pub struct Mixer {
    kind: MixerKind,
    state: State,
    tol: f64,
    sizes: BTreeMap<PolicyId, usize>,
    /// Successful AIM updates so far; the running-mean round counter.
    successes: usize,
    stored_params: usize,
    rebuilds: usize,
    failures: usize,
}

impl Mixer {
    pub fn new(kind: MixerKind, tol: f64) -> Self {
        let state = match kind {
            MixerKind::StoreAll => State::StoreAll {
                entries: Vec::new(),
                target: None,
                exports: 0,
            },
            MixerKind::SingleBest => State::SingleBest(None),
            MixerKind::AimMean | MixerKind::AimGreedy => State::Aim(AimPolicy::empty()),
        };
        Mixer {
            kind,
            state,
            tol,
            sizes: BTreeMap::new(),
            successes: 0,
            stored_params: 0,
            rebuilds: 0,
            failures: 0,
        }
    }

    pub fn kind(&self) -> MixerKind {
        self.kind
    }

    /// Offers `policy` with measurement `x` and parameter count `size`.
    pub fn push(&mut self, policy: PolicyId, x: &MeasurementVector, size: usize, tau: &ConstraintSpec) -> MixerOutcome {
        self.sizes.entry(policy).or_insert(size);
        let ok = |branch, rebuilt| MixerOutcome {
            branch,
            rebuilt,
            error: None,
        };
        let outcome = match &mut self.state {
            State::StoreAll {
                entries,
                target,
                exports,
            } => {
                *exports += 1;
                *target = Some(match target.as_ref() {
                    Some(prev) => running_mean(prev, x, *exports),
                    None => x.clone(),
                });
                match entries.iter_mut().find(|(id, _, _)| *id == policy) {
                    Some(entry) => entry.2 += 1,
                    None => entries.push((policy, x.clone(), 1)),
                }
                self.stored_params += size;
                ok(None, false)
            }
            State::SingleBest(best) => match single_best_update(best.clone(), (policy, x.clone()), tau) {
                Ok(next) => {
                    *best = Some(next);
                    ok(None, false)
                }
                Err(e) => failed(e),
            },
            State::Aim(mu) => {
                let step = match self.kind {
                    MixerKind::AimMean => aim_mean_step(mu, policy, x, self.successes + 1, self.tol),
                    _ => aim_greedy_step(mu, policy, x, tau, self.tol),
                };
                match step {
                    Ok(update) => {
                        *mu = update.policy;
                        self.successes += 1;
                        if update.rebuilt {
                            self.rebuilds += 1;
                        }
                        ok(Some(update.branch), update.rebuilt)
                    }
                    Err(e) => failed(e),
                }
            }
        };
        if outcome.error.is_some() {
            self.failures += 1;
        }
        outcome
    }

    /// The current mixed policy.
    pub fn policy(&self) -> AimPolicy {
        match &self.state {
            State::StoreAll {
                entries,
                target,
                exports,
            } => match target {
                None => AimPolicy::empty(),
                Some(target) => AimPolicy::from_parts_unchecked(
                    entries
                        .iter()
                        .map(|(policy, x, _)| ActivePolicy {
                            policy: *policy,
                            x: x.clone(),
                        })
                        .collect(),
                    entries.iter().map(|(_, _, n)| *n as f64 / *exports as f64).collect(),
                    target.clone(),
                ),
            },
            State::SingleBest(best) => match best {
                Some((id, x)) => AimPolicy::single(*id, x.clone()),
                None => AimPolicy::empty(),
            },
            State::Aim(mu) => mu.clone(),
        }
    }

    pub fn target(&self) -> Option<MeasurementVector> {
        match &self.state {
            State::StoreAll { target, .. } => target.clone(),
            State::SingleBest(best) => best.as_ref().map(|(_, x)| x.clone()),
            State::Aim(mu) => mu.target().cloned(),
        }
    }

    /// Number of policies carrying probability. The store-all baseline
    /// counts every export.
    pub fn active_len(&self) -> usize {
        match &self.state {
            State::StoreAll { exports, .. } => *exports,
            State::SingleBest(best) => usize::from(best.is_some()),
            State::Aim(mu) => mu.len(),
        }
    }

    /// Parameters currently held: every export for store-all, the active
    /// set otherwise.
    pub fn stored_params(&self) -> usize {
        match &self.state {
            State::StoreAll { .. } => self.stored_params,
            State::SingleBest(best) => best.as_ref().map_or(0, |(id, _)| self.sizes[id]),
            State::Aim(mu) => mu.active().iter().map(|a| self.sizes[&a.policy]).sum(),
        }
    }

    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn failures(&self) -> usize {
        self.failures
    }
}

fn failed(e: crate::error::Error) -> MixerOutcome {
    MixerOutcome {
        branch: None,
        rebuilt: false,
        error: Some(e.to_string()),
    }
}
