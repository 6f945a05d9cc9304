//! Route construction as a sequential decision process, together with the
//! route objective and the constraint checker.
//!
//! A route is a permutation of the `2n` customer nodes; the vehicle leaves
//! the depot before the first entry and returns to it after the last one.

use serde::{Deserialize, Serialize};

use crate::error::{PdpError, Result};
use crate::instances::{Instance, NodeRole};

/// Partial route under construction.
#[derive(Clone, Debug, PartialEq)]
pub struct State<'a> {
    inst: &'a Instance,
    prefix: Vec<usize>,
    visited: Vec<bool>,
}

/// Nodes that may be selected next.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionMask {
    allowed: Vec<bool>,
}

impl ActionMask {
    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, i: usize) -> bool {
        self.allowed.get(i).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.allowed.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i)
    }
}

impl<'a> State<'a> {
    pub fn initial(inst: &'a Instance) -> Self {
        Self {
            inst,
            prefix: Vec::with_capacity(2 * inst.n()),
            visited: vec![false; inst.num_nodes()],
        }
    }

    pub fn instance(&self) -> &'a Instance {
        self.inst
    }

    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    pub fn step_count(&self) -> usize {
        self.prefix.len()
    }

    pub fn is_complete(&self) -> bool {
        self.prefix.len() == 2 * self.inst.n()
    }

    /// Last visited node, or the depot before the first move.
    pub fn last(&self) -> usize {
        self.prefix.last().copied().unwrap_or(0)
    }

    /// Whether `j` may be visited next; the depot never may.
    pub fn can_visit(&self, j: usize) -> bool {
        if j >= self.visited.len() || self.visited[j] {
            return false;
        }
        match self.inst.role(j) {
            NodeRole::Depot => false,
            NodeRole::Pickup => true,
            NodeRole::Delivery => self.visited[j - self.inst.n()],
        }
    }

    pub fn mask(&self) -> Result<ActionMask> {
        if self.is_complete() {
            return Err(PdpError::RouteComplete);
        }
        Ok(ActionMask {
            allowed: (0..self.visited.len()).map(|j| self.can_visit(j)).collect(),
        })
    }

    /// Writes `true` for every node that may NOT be visited next.
    pub(crate) fn write_blocked(&self, out: &mut [bool]) {
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = !self.can_visit(j);
        }
    }

    /// Appends `action` in place and returns the reward (negative travel
    /// time, including the return leg on the final step).
    pub fn advance(&mut self, action: usize) -> Result<f64> {
        if self.is_complete() {
            return Err(PdpError::RouteComplete);
        }
        if !self.can_visit(action) {
            let reason = if action >= self.visited.len() {
                "index out of range".to_string()
            } else if self.visited[action] {
                "already visited".to_string()
            } else if action == 0 {
                "the depot cannot be revisited during construction".to_string()
            } else {
                format!("its pickup {} has not been visited", action - self.inst.n())
            };
            return Err(PdpError::InfeasibleAction { action, reason });
        }
        let mut cost = self.inst.travel_time(self.last(), action);
        self.prefix.push(action);
        self.visited[action] = true;
        if self.is_complete() {
            cost += self.inst.travel_time(action, 0);
        }
        Ok(-cost)
    }

    /// Transition: returns the successor state and the step reward.
    pub fn step(&self, action: usize) -> Result<(State<'a>, f64)> {
        let mut next = self.clone();
        let reward = next.advance(action)?;
        Ok((next, reward))
    }
}

/// Total travel time of a complete route, depot to depot.
pub fn route_objective(inst: &Instance, perm: &[usize]) -> Result<f64> {
    check_permutation(inst, perm)?;
    Ok(route_time(inst, perm))
}

/// Travel time along `perm` from and back to the depot, without validation.
pub(crate) fn route_time(inst: &Instance, perm: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut prev = 0;
    for &j in perm {
        total += inst.travel_time(prev, j);
        prev = j;
    }
    total + inst.travel_time(prev, 0)
}

fn check_permutation(inst: &Instance, perm: &[usize]) -> Result<()> {
    let m = inst.num_nodes();
    if perm.len() != m - 1 {
        return Err(PdpError::InvalidRoute(format!("expected {} nodes, got {}", m - 1, perm.len())));
    }
    let mut seen = vec![false; m];
    for &j in perm {
        if j == 0 || j >= m {
            return Err(PdpError::InvalidRoute(format!("node {j} is not a customer node")));
        }
        if std::mem::replace(&mut seen[j], true) {
            return Err(PdpError::InvalidRoute(format!("node {j} appears twice")));
        }
    }
    Ok(())
}

/// Verdict of [`validate_route`].
#[derive(Clone, Debug, PartialEq)]
pub struct RouteEvaluation {
    /// Arrival time at each entry of the route, in route order.
    pub arrival_times: Vec<f64>,
    /// Travel time along the route including the return leg.
    pub total_time: f64,
    pub feasible: bool,
    pub violation: Option<String>,
}

/// Checks that `perm` visits every customer exactly once with each pickup
/// before its delivery, and computes arrival times along it.
pub fn validate_route(inst: &Instance, perm: &[usize]) -> RouteEvaluation {
    let m = inst.num_nodes();
    let mut arrival_times = Vec::with_capacity(perm.len());
    let mut position = vec![None; m];
    let mut violation = None;
    let mut clock = 0.0;
    let mut prev = 0;
    for (k, &j) in perm.iter().enumerate() {
        if j >= m {
            violation.get_or_insert_with(|| format!("node {j} out of range"));
            break;
        }
        clock += inst.travel_time(prev, j);
        arrival_times.push(clock);
        prev = j;
        if j == 0 {
            violation.get_or_insert_with(|| "the depot appears inside the route".to_string());
        } else if position[j].is_some() {
            violation.get_or_insert_with(|| format!("node {j} visited more than once"));
        } else {
            position[j] = Some(k);
        }
    }
    let total_time = clock + inst.travel_time(prev, 0);
    if violation.is_none() {
        if let Some(missing) = (1..m).find(|&j| position[j].is_none()) {
            violation = Some(format!("node {missing} is never visited"));
        }
    }
    if violation.is_none() {
        let n = inst.n();
        for i in 1..=n {
            if position[i] > position[i + n] {
                violation = Some(format!("precedence of pair ({i}, {}) violated: delivery before pickup", i + n));
                break;
            }
        }
    }
    RouteEvaluation {
        arrival_times,
        total_time,
        feasible: violation.is_none(),
        violation,
    }
}

/// One line of a route file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub perm: Vec<usize>,
    pub objective: f64,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_s: Option<f64>,
}

impl RouteRecord {
    pub fn evaluate(inst: &Instance, perm: Vec<usize>, time_s: Option<f64>) -> Self {
        let eval = validate_route(inst, &perm);
        Self {
            perm,
            objective: eval.total_time,
            feasible: eval.feasible,
            time_s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::Point;

    fn collinear() -> Instance {
        Instance::new(Point::new(0.0, 0.0), vec![Point::new(0.0, 0.3)], vec![Point::new(0.0, 0.8)], 1.0).unwrap()
    }

    fn two_pairs() -> Instance {
        Instance::new(
            Point::new(0.5, 0.5),
            vec![Point::new(0.1, 0.2), Point::new(0.9, 0.3)],
            vec![Point::new(0.4, 0.8), Point::new(0.2, 0.6)],
            1.0,
        )
        .unwrap()
    }

    fn allowed(state: &State) -> Vec<usize> {
        state.mask().unwrap().indices().collect()
    }

    #[test]
    fn initial_mask_allows_only_pickups() {
        let inst = two_pairs();
        let s = State::initial(&inst);
        assert_eq!(allowed(&s), vec![1, 2]);
        assert!(s.visited().iter().all(|v| !v));
        assert_eq!(s.step_count(), 0);
        let one = collinear();
        assert_eq!(allowed(&State::initial(&one)), vec![1]);
    }

    #[test]
    fn mask_follows_visits() {
        let inst = two_pairs();
        let (s1, _) = State::initial(&inst).step(1).unwrap();
        assert_eq!(allowed(&s1), vec![2, 3]);
        let (s2, _) = s1.step(2).unwrap();
        assert_eq!(allowed(&s2), vec![3, 4]);
    }

    #[test]
    fn masked_action_is_rejected() {
        let inst = two_pairs();
        let s = State::initial(&inst);
        assert!(matches!(s.step(3), Err(PdpError::InfeasibleAction { action: 3, .. })));
        assert!(s.step(0).is_err());
        let (s1, _) = s.step(1).unwrap();
        assert!(s1.step(1).is_err());
    }

    #[test]
    fn complete_route_has_no_mask() {
        let inst = collinear();
        let (s, _) = State::initial(&inst).step(1).unwrap();
        let (s, _) = s.step(2).unwrap();
        assert!(s.is_complete());
        assert!(matches!(s.mask(), Err(PdpError::RouteComplete)));
    }

    #[test]
    fn collinear_rewards() {
        let inst = collinear();
        let (s, r1) = State::initial(&inst).step(1).unwrap();
        let (_, r2) = s.step(2).unwrap();
        assert!((r1 + 0.3).abs() < 1e-12);
        assert!((r2 + 1.3).abs() < 1e-12);
        assert!((-(r1 + r2) - 1.6).abs() < 1e-12);
        assert!((route_objective(&inst, &[1, 2]).unwrap() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn objective_scales_inversely_with_speed() {
        let inst = two_pairs();
        let fast = inst.clone().with_speed(2.0).unwrap();
        let perm = [2, 1, 4, 3];
        let a = route_objective(&inst, &perm).unwrap();
        let b = route_objective(&fast, &perm).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-12);
    }

    #[test]
    fn objective_rejects_non_permutations() {
        let inst = two_pairs();
        assert!(route_objective(&inst, &[1, 2, 3]).is_err());
        assert!(route_objective(&inst, &[1, 1, 3, 4]).is_err());
        assert!(route_objective(&inst, &[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn delivery_first_is_infeasible() {
        let inst = two_pairs();
        let eval = validate_route(&inst, &[3, 1, 2, 4]);
        assert!(!eval.feasible);
        assert!(eval.violation.unwrap().contains("(1, 3)"));
    }

    #[test]
    fn feasible_route_has_monotone_arrivals() {
        let inst = two_pairs();
        let eval = validate_route(&inst, &[1, 2, 3, 4]);
        assert!(eval.feasible);
        assert!(eval.arrival_times.windows(2).all(|w| w[0] <= w[1]));
        assert!(eval.arrival_times.iter().all(|&b| b >= 0.0));
        assert!((eval.total_time - route_objective(&inst, &[1, 2, 3, 4]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn validation_flags_missing_and_duplicate_nodes() {
        let inst = two_pairs();
        assert!(!validate_route(&inst, &[1, 2, 3]).feasible);
        assert!(!validate_route(&inst, &[1, 2, 3, 3]).feasible);
        assert!(!validate_route(&inst, &[1, 2, 3, 9]).feasible);
    }
}
