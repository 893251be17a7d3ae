//! Expert duplication: copy hot experts onto under-loaded GPUs and move
//! their tokens there until per-GPU loads differ by at most one token.
//!
//! Each routed assignment (a token/expert pair) is one unit of load, so
//! top-k routing is handled the same way as top-1.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::TraceLayer;
use crate::error::{Error, Result};

/// Which GPUs hold a copy of which experts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PlacementFile", into = "PlacementFile")]
pub struct Placement {
    num_experts: usize,
    gpu_count: usize,
    /// `hosts[e]` is the set of GPUs holding expert `e`.
    hosts: Vec<BTreeSet<usize>>,
    /// Expert slots per GPU; `None` means unlimited.
    capacities: Option<Vec<usize>>,
    max_copies: usize,
}

/// On-disk form of a [`Placement`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlacementFile {
    pub num_experts: usize,
    pub gpu_count: usize,
    /// `[expert_id, gpu_id]` pairs.
    pub pairs: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacities: Option<Vec<usize>>,
    /// Defaults to `gpu_count` (an expert may live on every GPU).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_copies: Option<usize>,
}

impl TryFrom<PlacementFile> for Placement {
    type Error = Error;
    fn try_from(f: PlacementFile) -> Result<Self> {
        let max_copies = f.max_copies.unwrap_or(f.gpu_count);
        Placement::new(
            f.num_experts,
            f.gpu_count,
            &f.pairs,
            f.capacities,
            max_copies,
        )
    }
}

impl From<Placement> for PlacementFile {
    fn from(p: Placement) -> Self {
        PlacementFile {
            num_experts: p.num_experts,
            gpu_count: p.gpu_count,
            pairs: p.pairs(),
            capacities: p.capacities,
            max_copies: Some(p.max_copies),
        }
    }
}

impl Placement {
    pub fn new(
        num_experts: usize,
        gpu_count: usize,
        pairs: &[(usize, usize)],
        capacities: Option<Vec<usize>>,
        max_copies: usize,
    ) -> Result<Self> {
        if gpu_count == 0 || num_experts == 0 {
            return Err(Error::InvalidPlacement(
                "need at least one GPU and one expert".into(),
            ));
        }
        if max_copies == 0 {
            return Err(Error::InvalidPlacement("max_copies must be >= 1".into()));
        }
        if let Some(c) = &capacities {
            if c.len() != gpu_count {
                return Err(Error::InvalidPlacement(format!(
                    "{} capacities for {gpu_count} GPUs",
                    c.len()
                )));
            }
        }
        let mut hosts = vec![BTreeSet::new(); num_experts];
        for &(e, g) in pairs {
            if e >= num_experts || g >= gpu_count {
                return Err(Error::InvalidPlacement(format!(
                    "pair ({e}, {g}) out of range for {num_experts} experts on {gpu_count} GPUs"
                )));
            }
            hosts[e].insert(g);
        }
        let placement = Self {
            num_experts,
            gpu_count,
            hosts,
            capacities,
            max_copies,
        };
        for e in 0..num_experts {
            let n = placement.copies(e);
            if n == 0 {
                return Err(Error::InvalidPlacement(format!("expert {e} has no host")));
            }
            if n > max_copies {
                return Err(Error::InvalidPlacement(format!(
                    "expert {e} has {n} copies, max_copies is {max_copies}"
                )));
            }
        }
        for g in 0..gpu_count {
            if let Some(cap) = placement.capacity(g) {
                if placement.residency(g) > cap {
                    return Err(Error::InvalidPlacement(format!(
                        "GPU {g} hosts {} experts, capacity is {cap}",
                        placement.residency(g)
                    )));
                }
            }
        }
        Ok(placement)
    }

    /// Expert `e` on GPU `e % G`, no capacity limit, up to `G` copies.
    pub fn round_robin(num_experts: usize, gpu_count: usize) -> Result<Self> {
        let pairs: Vec<_> = (0..num_experts)
            .map(|e| (e, e % gpu_count.max(1)))
            .collect();
        Self::new(num_experts, gpu_count, &pairs, None, gpu_count)
    }

    pub fn with_limits(
        mut self,
        capacities: Option<Vec<usize>>,
        max_copies: usize,
    ) -> Result<Self> {
        self.capacities = capacities;
        self.max_copies = max_copies;
        let pairs = self.pairs();
        Self::new(
            self.num_experts,
            self.gpu_count,
            &pairs,
            self.capacities,
            max_copies,
        )
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn gpu_count(&self) -> usize {
        self.gpu_count
    }

    pub fn max_copies(&self) -> usize {
        self.max_copies
    }

    pub fn hosts(&self, expert: usize) -> &BTreeSet<usize> {
        &self.hosts[expert]
    }

    pub fn is_hosted(&self, expert: usize, gpu: usize) -> bool {
        self.hosts.get(expert).is_some_and(|h| h.contains(&gpu))
    }

    pub fn copies(&self, expert: usize) -> usize {
        self.hosts[expert].len()
    }

    /// Number of experts resident on `gpu`.
    pub fn residency(&self, gpu: usize) -> usize {
        self.hosts.iter().filter(|h| h.contains(&gpu)).count()
    }

    pub fn capacity(&self, gpu: usize) -> Option<usize> {
        self.capacities.as_ref().map(|c| c[gpu])
    }

    /// Sorted `(expert, gpu)` pairs.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.hosts
            .iter()
            .enumerate()
            .flat_map(|(e, gs)| gs.iter().map(move |&g| (e, g)))
            .collect()
    }

    fn can_copy(&self, expert: usize, gpu: usize) -> bool {
        self.copies(expert) < self.max_copies
            && self
                .capacity(gpu)
                .is_none_or(|cap| self.residency(gpu) < cap)
    }
}

/// Where every routed assignment is processed, and the resulting loads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispatch {
    /// GPU per routed assignment, in token-major order.
    pub assignment: Vec<usize>,
    pub loads: Vec<u64>,
}

impl Dispatch {
    pub fn spread(&self) -> u64 {
        let max = self.loads.iter().copied().max().unwrap_or(0);
        let min = self.loads.iter().copied().min().unwrap_or(0);
        max - min
    }
}

/// Expert id of every routed assignment, flattened token-major.
fn routed_experts(layer: &TraceLayer) -> Vec<usize> {
    layer
        .experts
        .iter()
        .flatten()
        .map(|&e| e as usize)
        .collect()
}

/// Sends each assignment to the lowest-indexed GPU hosting its expert.
pub fn initial_dispatch(layer: &TraceLayer, placement: &Placement) -> Result<Dispatch> {
    let mut loads = vec![0u64; placement.gpu_count()];
    let assignment = routed_experts(layer)
        .into_iter()
        .map(|e| {
            let g = placement
                .hosts
                .get(e)
                .and_then(|h| h.first().copied())
                .ok_or_else(|| Error::InvalidPlacement(format!("expert {e} has no host")))?;
            loads[g] += 1;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dispatch { assignment, loads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceOutcome {
    pub placement: Placement,
    pub dispatch: Dispatch,
    /// `(expert, gpu)` copies added, in the order they were made.
    pub copies_added: Vec<(usize, usize)>,
    pub iterations: usize,
    /// False when the copy budget or iteration cap stopped the loop before
    /// loads were within one token of each other.
    pub complete: bool,
}

/// Default iteration cap for [`balance_by_duplication`].
pub fn default_iteration_cap(routed: usize) -> usize {
    4 * routed + 64
}

pub fn balance_by_duplication(layer: &TraceLayer, initial: &Placement) -> Result<BalanceOutcome> {
    let routed = layer.experts.iter().map(Vec::len).sum();
    balance_with_cap(layer, initial, default_iteration_cap(routed))
}

/// Repeatedly moves load from the hottest GPU to the coldest one.
///
/// Each round takes the hottest GPU `g_h` and coldest GPU `g_c`, computes
/// `delta = ceil((L[g_h] - L[g_c]) / 2)`, picks the expert with the most
/// tokens on `g_h`, copies it to `g_c` if needed and allowed, and moves the
/// first `min(delta, n)` of its tokens (by token id). When the copy is not
/// allowed the move is skipped; the next-hottest expert on `g_h`, then the
/// next-coldest GPU, is tried instead. Ties go to the lowest index.
pub fn balance_with_cap(
    layer: &TraceLayer,
    initial: &Placement,
    max_iterations: usize,
) -> Result<BalanceOutcome> {
    let experts = routed_experts(layer);
    let mut placement = initial.clone();
    let mut dispatch = initial_dispatch(layer, &placement)?;
    let g_count = placement.gpu_count();
    let e_count = placement.num_experts();

    // on_gpu[g][e]: ids of assignments of expert e currently on GPU g.
    let mut on_gpu = vec![vec![BTreeSet::new(); e_count]; g_count];
    for (t, (&e, &g)) in experts.iter().zip(&dispatch.assignment).enumerate() {
        on_gpu[g][e].insert(t);
    }

    let mut copies_added = Vec::new();
    let mut iterations = 0;
    let mut complete = true;

    while dispatch.spread() > 1 {
        if iterations >= max_iterations {
            complete = false;
            break;
        }
        iterations += 1;

        let hot = argmax_lowest(&dispatch.loads);
        let mut cold_order: Vec<usize> = (0..g_count).filter(|&g| g != hot).collect();
        cold_order.sort_by_key(|&g| (dispatch.loads[g], g));

        let mut hot_experts: Vec<(usize, usize)> = (0..e_count)
            .filter(|&e| !on_gpu[hot][e].is_empty())
            .map(|e| (on_gpu[hot][e].len(), e))
            .collect();
        hot_experts.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

        let mut moved = false;
        'search: for &cold in &cold_order {
            let gap = dispatch.loads[hot] - dispatch.loads[cold];
            if gap <= 1 {
                break;
            }
            let delta = gap.div_ceil(2) as usize;
            for &(count, e) in &hot_experts {
                if !placement.is_hosted(e, cold) {
                    if !placement.can_copy(e, cold) {
                        continue;
                    }
                    placement.hosts[e].insert(cold);
                    copies_added.push((e, cold));
                }
                let n = delta.min(count);
                let batch: Vec<usize> = on_gpu[hot][e].iter().take(n).copied().collect();
                for t in batch {
                    on_gpu[hot][e].remove(&t);
                    on_gpu[cold][e].insert(t);
                    dispatch.assignment[t] = cold;
                }
                dispatch.loads[hot] -= n as u64;
                dispatch.loads[cold] += n as u64;
                moved = true;
                break 'search;
            }
        }
        if !moved {
            complete = false;
            break;
        }
    }

    Ok(BalanceOutcome {
        placement,
        dispatch,
        copies_added,
        iterations,
        complete,
    })
}

fn argmax_lowest(loads: &[u64]) -> usize {
    let mut best = 0;
    for (g, &l) in loads.iter().enumerate() {
        if l > loads[best] {
            best = g;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub spread: u64,
    pub total_tokens: u64,
    pub tokens_conserved: bool,
    pub hosting_valid: bool,
}

impl BalanceReport {
    pub fn is_balanced(&self) -> bool {
        self.spread <= 1 && self.tokens_conserved && self.hosting_valid
    }
}

/// Checks a dispatch against the trace and placement it came from.
pub fn verify_balance(
    layer: &TraceLayer,
    placement: &Placement,
    dispatch: &Dispatch,
) -> BalanceReport {
    let experts = routed_experts(layer);
    let total: u64 = dispatch.loads.iter().sum();
    let mut recount = vec![0u64; dispatch.loads.len()];
    let mut hosting_valid = dispatch.assignment.len() == experts.len();
    for (&e, &g) in experts.iter().zip(&dispatch.assignment) {
        if g < recount.len() {
            recount[g] += 1;
        }
        if !placement.is_hosted(e, g) {
            hosting_valid = false;
        }
    }
    BalanceReport {
        spread: dispatch.spread(),
        total_tokens: total,
        tokens_conserved: total == experts.len() as u64 && recount == dispatch.loads,
        hosting_valid,
    }
}
