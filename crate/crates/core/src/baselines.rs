//! Non-learning solvers: exhaustive enumeration, exact dynamic programming,
//! nearest feasible neighbour and simulated annealing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{route_time, State};
use crate::error::{PdpError, Result};
use crate::instances::{Instance, NodeRole};

/// Largest `n` accepted by [`brute_force`].
pub const BRUTE_FORCE_MAX_N: usize = 4;
/// Largest `n` accepted by [`exact_dp`].
pub const EXACT_DP_MAX_N: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub perm: Vec<usize>,
    pub objective: f64,
}

impl Solution {
    fn of(inst: &Instance, perm: Vec<usize>) -> Self {
        Self {
            objective: route_time(inst, &perm),
            perm,
        }
    }
}

/// Calls `visit` on every precedence-feasible route, in lexicographic order.
pub fn for_each_feasible_route<F: FnMut(&[usize])>(inst: &Instance, mut visit: F) {
    fn rec<F: FnMut(&[usize])>(state: &mut State, visit: &mut F) {
        if state.is_complete() {
            visit(state.prefix());
            return;
        }
        for j in 1..state.instance().num_nodes() {
            if state.can_visit(j) {
                let mut next = state.clone();
                next.advance(j).expect("allowed action");
                rec(&mut next, visit);
            }
        }
    }
    rec(&mut State::initial(inst), &mut visit);
}

/// Optimum by enumeration; ties go to the lexicographically smallest route.
pub fn brute_force(inst: &Instance) -> Result<Solution> {
    if inst.n() > BRUTE_FORCE_MAX_N {
        return Err(PdpError::TooLarge {
            what: "brute force",
            n: inst.n(),
            max: BRUTE_FORCE_MAX_N,
        });
    }
    let mut best: Option<Solution> = None;
    for_each_feasible_route(inst, |perm| {
        let objective = route_time(inst, perm);
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(Solution {
                perm: perm.to_vec(),
                objective,
            });
        }
    });
    Ok(best.expect("every instance has a feasible route"))
}

/// Optimum by dynamic programming over precedence-feasible visited sets.
///
/// A visited set is coded in base 3 with one digit per pair: 0 = untouched,
/// 1 = pickup done, 2 = both done. Every feasible set has exactly one code,
/// and each move increases the code, so a single ascending sweep suffices.
pub fn exact_dp(inst: &Instance) -> Result<Solution> {
    let n = inst.n();
    if n > EXACT_DP_MAX_N {
        return Err(PdpError::TooLarge {
            what: "exact DP",
            n,
            max: EXACT_DP_MAX_N,
        });
    }
    let m = 2 * n;
    let pow: Vec<usize> = (0..n).map(|i| 3usize.pow(i as u32)).collect();
    let states = 3usize.pow(n as u32);
    // cost[code * m + (last - 1)], parent holds the previous node (0 = depot).
    let mut cost = vec![f64::INFINITY; states * m];
    let mut parent = vec![0u8; states * m];
    for i in 1..=n {
        cost[pow[i - 1] * m + (i - 1)] = inst.travel_time(0, i);
    }
    let mut digits = vec![0u8; n];
    for code in 1..states {
        let mut c = code;
        for d in digits.iter_mut() {
            *d = (c % 3) as u8;
            c /= 3;
        }
        for last in 1..=m {
            let here = cost[code * m + last - 1];
            if !here.is_finite() {
                continue;
            }
            for (i, &d) in digits.iter().enumerate() {
                let next = match d {
                    0 => i + 1,
                    1 => i + 1 + n,
                    _ => continue,
                };
                let slot = (code + pow[i]) * m + next - 1;
                let c = here + inst.travel_time(last, next);
                if c < cost[slot] {
                    cost[slot] = c;
                    parent[slot] = last as u8;
                }
            }
        }
    }
    let full = states - 1;
    let (mut last, mut best) = (0, f64::INFINITY);
    for j in n + 1..=m {
        let c = cost[full * m + j - 1] + inst.travel_time(j, 0);
        if c < best {
            best = c;
            last = j;
        }
    }
    let mut perm = Vec::with_capacity(m);
    let mut code = full;
    while last != 0 {
        perm.push(last);
        let prev = parent[code * m + last - 1] as usize;
        let pair = if last > n { last - n } else { last };
        code -= pow[pair - 1];
        last = prev;
    }
    perm.reverse();
    Ok(Solution { perm, objective: best })
}

/// Greedy construction: always move to the closest allowed node, ties to
/// the lowest index.
pub fn nearest_neighbor(inst: &Instance) -> Solution {
    let mut state = State::initial(inst);
    while !state.is_complete() {
        let from = state.last();
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for j in 1..inst.num_nodes() {
            if state.can_visit(j) {
                let d = inst.travel_time(from, j);
                if d < best_d {
                    best_d = d;
                    best = Some(j);
                }
            }
        }
        state.advance(best.expect("an incomplete route has an allowed node")).expect("allowed action");
    }
    Solution::of(inst, state.prefix().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SAConfig {
    /// Starting temperature; the mean edge length of the instance if unset.
    pub initial_temperature: Option<f64>,
    /// Temperature multiplier per iteration.
    pub cooling: f64,
    pub iterations: usize,
    pub moves_per_temperature: usize,
    pub seed: u64,
}

impl Default for SAConfig {
    fn default() -> Self {
        Self {
            initial_temperature: None,
            cooling: 0.999,
            iterations: 20_000,
            moves_per_temperature: 5,
            seed: 0,
        }
    }
}

impl SAConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return Err(PdpError::InvalidConfig(format!("cooling must lie in (0, 1), got {}", self.cooling)));
        }
        if let Some(t) = self.initial_temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(PdpError::InvalidConfig(format!("initial temperature must be positive, got {t}")));
            }
        }
        if self.moves_per_temperature == 0 {
            return Err(PdpError::InvalidConfig("moves_per_temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Mean distance over all ordered pairs of distinct nodes, scaled by speed.
fn mean_edge_time(inst: &Instance) -> f64 {
    let m = inst.num_nodes();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                total += inst.travel_time(i, j);
            }
        }
    }
    total / (m * (m - 1)) as f64
}

fn precedence_ok(inst: &Instance, perm: &[usize], pos: &mut [usize]) -> bool {
    for (k, &j) in perm.iter().enumerate() {
        pos[j] = k;
    }
    let n = inst.n();
    (1..=n).all(|i| pos[i] < pos[i + n])
}

/// Moves `perm[from]` to a uniformly chosen feasible position.
fn relocate<R: Rng>(inst: &Instance, perm: &[usize], rng: &mut R, out: &mut Vec<usize>) -> bool {
    let len = perm.len();
    let from = rng.random_range(0..len);
    let node = perm[from];
    out.clear();
    out.extend(perm.iter().copied().filter(|&j| j != node));
    let partner = inst.partner(node).expect("customer node");
    let partner_at = out.iter().position(|&j| j == partner).expect("partner present");
    // Insertion slots that keep the pair ordered, including the original one.
    let (lo, hi) = match inst.role(node) {
        NodeRole::Pickup => (0, partner_at),
        _ => (partner_at + 1, len - 1),
    };
    if hi == lo {
        out.insert(from, node);
        return false;
    }
    let mut to = rng.random_range(lo..hi);
    if to >= from {
        to += 1;
    }
    out.insert(to, node);
    true
}

fn swap<R: Rng>(inst: &Instance, perm: &[usize], rng: &mut R, out: &mut Vec<usize>, pos: &mut [usize]) -> bool {
    let len = perm.len();
    let a = rng.random_range(0..len);
    let b = rng.random_range(0..len);
    out.clear();
    out.extend_from_slice(perm);
    if a == b {
        return false;
    }
    out.swap(a, b);
    precedence_ok(inst, out, pos)
}

/// Simulated annealing from the nearest-neighbour route; returns the best
/// route seen.
pub fn simulated_annealing(inst: &Instance, cfg: &SAConfig) -> Result<Solution> {
    simulated_annealing_traced(inst, cfg, |_| {})
}

/// As [`simulated_annealing`], calling `on_accept` with the start route and
/// with every accepted route.
pub fn simulated_annealing_traced<F: FnMut(&[usize])>(inst: &Instance, cfg: &SAConfig, mut on_accept: F) -> Result<Solution> {
    cfg.validate()?;
    let start = nearest_neighbor(inst);
    on_accept(&start.perm);
    if inst.n() == 1 {
        return Ok(start);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut temperature = cfg.initial_temperature.unwrap_or_else(|| mean_edge_time(inst));
    let mut current = start.perm.clone();
    let mut current_obj = start.objective;
    let mut best = start;
    let mut candidate = Vec::with_capacity(current.len());
    let mut pos = vec![0; inst.num_nodes()];
    for _ in 0..cfg.iterations {
        for _ in 0..cfg.moves_per_temperature {
            let moved = if rng.random_bool(0.5) {
                relocate(inst, &current, &mut rng, &mut candidate)
            } else {
                swap(inst, &current, &mut rng, &mut candidate, &mut pos)
            };
            if !moved {
                continue;
            }
            let obj = route_time(inst, &candidate);
            let delta = obj - current_obj;
            if delta <= 0.0 || rng.random::<f64>() < (-delta / temperature).exp() {
                std::mem::swap(&mut current, &mut candidate);
                current_obj = obj;
                on_accept(&current);
                if obj < best.objective {
                    best = Solution {
                        perm: current.clone(),
                        objective: obj,
                    };
                }
            }
        }
        temperature *= cfg.cooling;
    }
    Ok(best)
}
