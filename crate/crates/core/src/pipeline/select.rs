//! Forward-backward greedy selection of complementary patches.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dataset::Pair;
use crate::error::{Error, Result};
use crate::trainer::l2_verification_accuracy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Backward step: drop an earlier patch whose removal costs less than
    /// `rho` times the gain of the forward step just taken.
    pub rho: f64,
    /// Forward step: accept only gains strictly above this.
    pub min_gain: f64,
    /// Accuracy credited to the empty selection (chance on balanced pairs).
    pub baseline: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            min_gain: 0.0,
            baseline: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionStep {
    pub kind: StepKind,
    pub patch: usize,
    /// Validation accuracy of the selected set after this step.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionState {
    pub pool_size: usize,
    /// Patch indices in admission order.
    pub selected: Vec<usize>,
    pub accuracy: f64,
    pub steps: Vec<SelectionStep>,
}

impl SelectionState {
    pub fn accuracies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.accuracy).collect()
    }
}

/// Evaluator failure with the state reached before it.
#[derive(Debug, thiserror::Error)]
#[error("patch selection aborted after {} steps: {source}", state.steps.len())]
pub struct SelectionAborted {
    pub state: SelectionState,
    #[source]
    pub source: Error,
}

impl From<SelectionAborted> for Error {
    fn from(e: SelectionAborted) -> Self {
        Error::stage("patch selection", e.source)
    }
}

fn key(set: &[usize]) -> Vec<usize> {
    let mut k = set.to_vec();
    k.sort_unstable();
    k
}

/// Greedy forward-backward search over subsets of `0..pool_size`, skipping
/// patches in `excluded`.
///
/// Each forward step admits the candidate with the best validation accuracy
/// if it improves on the current set by more than `min_gain` and does not
/// fall below the previous forward step. After each admission, backward
/// steps drop the cheapest earlier patch while its removal costs less than
/// `rho` times its admission gain. Subsets are never revisited, which
/// bounds the number of steps. Ties go to the lower patch index.
pub fn select_patches(
    pool_size: usize,
    budget: usize,
    excluded: &[usize],
    cfg: &SelectionConfig,
    mut evaluate: impl FnMut(&[usize]) -> Result<f64>,
) -> std::result::Result<SelectionState, SelectionAborted> {
    let mut state = SelectionState {
        pool_size,
        ..Default::default()
    };
    let available = (0..pool_size).filter(|p| !excluded.contains(p)).count();
    let precondition = if available == 0 {
        Some("no patches available for selection".to_string())
    } else if budget == 0 || budget > pool_size {
        Some(format!("budget {budget} must be in 1..={pool_size}"))
    } else {
        None
    };
    if let Some(msg) = precondition {
        return Err(SelectionAborted {
            state,
            source: Error::InvalidArgument(msg),
        });
    }
    let mut visited: HashSet<Vec<usize>> = HashSet::new();
    visited.insert(Vec::new());
    let mut last_forward = f64::NEG_INFINITY;

    macro_rules! eval {
        ($set:expr) => {
            match evaluate($set) {
                Ok(v) if v.is_finite() => v,
                Ok(v) => {
                    return Err(SelectionAborted {
                        state,
                        source: Error::NonFinite {
                            context: format!("selection evaluator returned {v}"),
                            index: 0,
                        },
                    })
                }
                Err(source) => return Err(SelectionAborted { state, source }),
            }
        };
    }

    while state.selected.len() < budget {
        let mut pick: Option<(usize, f64)> = None;
        for c in 0..pool_size {
            if excluded.contains(&c) || state.selected.contains(&c) {
                continue;
            }
            let mut trial = state.selected.clone();
            trial.push(c);
            if visited.contains(&key(&trial)) {
                continue;
            }
            let acc = eval!(&trial);
            if pick.map_or(true, |(_, b)| acc > b) {
                pick = Some((c, acc));
            }
        }
        let Some((c, acc)) = pick else { break };
        let current = if state.selected.is_empty() { cfg.baseline } else { state.accuracy };
        if acc - current <= cfg.min_gain || acc < last_forward {
            break;
        }
        state.selected.push(c);
        visited.insert(key(&state.selected));
        let gain = acc - current;
        state.accuracy = acc;
        last_forward = acc;
        state.steps.push(SelectionStep {
            kind: StepKind::Forward,
            patch: c,
            accuracy: acc,
        });

        loop {
            let mut drop: Option<(usize, f64, f64)> = None;
            for (pos, &s) in state.selected.iter().enumerate() {
                if s == c || state.selected.len() < 2 {
                    continue;
                }
                let mut trial = state.selected.clone();
                trial.remove(pos);
                if visited.contains(&key(&trial)) {
                    continue;
                }
                let without = eval!(&trial);
                let cost = state.accuracy - without;
                if cost < cfg.rho * gain && drop.map_or(true, |(_, best_cost, _)| cost < best_cost) {
                    drop = Some((pos, cost, without));
                }
            }
            let Some((pos, _, without)) = drop else { break };
            let s = state.selected.remove(pos);
            visited.insert(key(&state.selected));
            state.accuracy = without;
            state.steps.push(SelectionStep {
                kind: StepKind::Backward,
                patch: s,
                accuracy: without,
            });
        }
    }
    Ok(state)
}

/// `k` successive selections, each excluding every patch chosen before.
pub fn select_groups(
    pool_size: usize,
    budget: usize,
    groups: usize,
    cfg: &SelectionConfig,
    mut evaluate: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<Vec<SelectionState>> {
    let mut out = Vec::with_capacity(groups);
    let mut used: Vec<usize> = Vec::new();
    for g in 0..groups {
        if used.len() >= pool_size {
            log::warn!("patch pool exhausted after {g} groups");
            break;
        }
        let state = select_patches(pool_size, budget, &used, cfg, &mut evaluate)?;
        used.extend(&state.selected);
        out.push(state);
    }
    Ok(out)
}

/// L2-distance verification accuracy of the concatenated features of the
/// selected patches. `blocks[p][i]` is the feature of sample `i` under
/// patch `p`.
pub fn l2_subset_accuracy(blocks: &[Vec<Vec<f64>>], subset: &[usize], pairs: &[Pair]) -> Result<f64> {
    let n = blocks.first().map_or(0, Vec::len);
    if let Some(&p) = subset.iter().find(|&&p| p >= blocks.len()) {
        return Err(Error::InvalidArgument(format!("patch {p} out of range for pool of {}", blocks.len())));
    }
    let features: Vec<Vec<f64>> = (0..n)
        .map(|i| subset.iter().flat_map(|&p| blocks[p][i].iter().copied()).collect())
        .collect();
    l2_verification_accuracy(&features, pairs)
}

/// Best accuracy over every subset of size `1..=budget`, by enumeration.
pub fn exhaustive_best(pool_size: usize, budget: usize, mut evaluate: impl FnMut(&[usize]) -> Result<f64>) -> Result<(Vec<usize>, f64)> {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for mask in 1u64..(1u64 << pool_size) {
        if mask.count_ones() as usize > budget {
            continue;
        }
        let subset: Vec<usize> = (0..pool_size).filter(|&i| mask >> i & 1 == 1).collect();
        let acc = evaluate(&subset)?;
        if acc > best.1 {
            best = (subset, acc);
        }
    }
    Ok(best)
}
