use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cmdp::{DeterministicPolicy, PolicyId};
use crate::error::{Error, Result};

use super::best_response::{FeatureMap, QFunction};

/// Parameters sufficient to rebuild a deterministic policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyParams {
    /// The action table itself.
    Tabular { n_actions: usize, actions: Vec<usize> },
    /// Greedy readout of `w^T phi(s, a)` over the allowed actions.
    Linear {
        features: FeatureMap,
        weights: Vec<f64>,
        support: Vec<bool>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub id: PolicyId,
    pub params: PolicyParams,
}

impl PolicyRecord {
    pub fn tabular(policy: &DeterministicPolicy, n_actions: usize) -> Self {
        PolicyRecord {
            id: policy.id,
            params: PolicyParams::Tabular {
                n_actions,
                actions: policy.actions().to_vec(),
            },
        }
    }

    /// Number of stored parameters.
    pub fn size(&self) -> usize {
        match &self.params {
            PolicyParams::Tabular { actions, .. } => actions.len(),
            PolicyParams::Linear { weights, .. } => weights.len(),
        }
    }

    pub fn policy(&self) -> Result<DeterministicPolicy> {
        match &self.params {
            PolicyParams::Tabular { n_actions, actions } => DeterministicPolicy::new(self.id, actions.clone(), *n_actions),
            PolicyParams::Linear {
                features,
                weights,
                support,
            } => {
                if weights.len() != features.dim {
                    return Err(Error::dim("linear policy weights", features.dim, weights.len()));
                }
                let q = QFunction::Linear {
                    features: features.clone(),
                    weights: weights.clone(),
                };
                q.greedy(self.id, support)
            }
        }
    }
}

/// Deduplicates best responses by their action tables and hands out
/// sequential identifiers starting at 1.
#[derive(Debug, Clone, Default)]
pub struct PolicyRegistry {
    by_actions: BTreeMap<Vec<usize>, PolicyId>,
    records: BTreeMap<PolicyId, (DeterministicPolicy, PolicyRecord)>,
}

impl PolicyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `policy` (its id is ignored). `params` builds the stored
    /// parameters for a previously unseen action table.
    pub fn intern(
        &mut self,
        policy: &DeterministicPolicy,
        params: impl FnOnce() -> PolicyParams,
    ) -> DeterministicPolicy {
        if let Some(id) = self.by_actions.get(policy.actions()) {
            return self.records[id].0.clone();
        }
        let id = PolicyId(self.by_actions.len() as u64 + 1);
        let mut stored = policy.clone();
        stored.id = id;
        self.by_actions.insert(policy.actions().to_vec(), id);
        self.records.insert(
            id,
            (
                stored.clone(),
                PolicyRecord {
                    id,
                    params: params(),
                },
            ),
        );
        stored
    }

    pub fn get(&self, id: PolicyId) -> Option<&DeterministicPolicy> {
        self.records.get(&id).map(|(p, _)| p)
    }

    pub fn record(&self, id: PolicyId) -> Option<&PolicyRecord> {
        self.records.get(&id).map(|(_, r)| r)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
