//! Best-bound branch-and-bound over binary programs with incremental bound
//! propagation. Bounding uses the exact LP relaxation when the program is
//! small enough for the dense simplex and a Lagrangian dual otherwise;
//! branching picks the most fractional LP variable, falling back to the
//! largest reduced-cost magnitude and then to the first unfixed variable.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::rc::Rc;
use std::time::{Duration, Instant};

use super::bounds::{lp_relaxation, normalize, optimize_lagrangian, Lagrangian, LpOutcome};
use super::{check_assignment, BinaryProgram, Relation, SolveResult, SolveStatus};

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub time_limit: Duration,
    pub seed: u64,
    /// Feasible assignment installed as the initial incumbent; the search can
    /// only return it or something strictly better.
    pub warm_start: Option<Vec<bool>>,
    pub node_limit: u64,
}

impl SolveOptions {
    pub fn new(time_limit: Duration, seed: u64) -> Self {
        SolveOptions {
            time_limit,
            seed,
            warm_start: None,
            node_limit: u64::MAX,
        }
    }
}

/// Solves a binary program to proven optimality within the time limit.
pub fn solve(p: &BinaryProgram, time_limit: Duration, seed: u64) -> SolveResult {
    solve_with(p, &SolveOptions::new(time_limit, seed))
}

const EPS: f64 = 1e-6;

struct Propagation {
    lo: Vec<u8>,
    hi: Vec<u8>,
    minact: Vec<f64>,
    maxact: Vec<f64>,
    queue: VecDeque<u32>,
    in_queue: Vec<bool>,
    trail: Vec<u32>,
}

impl Propagation {
    fn new(p: &BinaryProgram) -> Self {
        let n = p.num_vars();
        let m = p.num_rows();
        let mut minact = vec![0.0; m];
        let mut maxact = vec![0.0; m];
        for (i, row) in p.rows().iter().enumerate() {
            for &(_, a) in &row.coeffs {
                if a > 0.0 {
                    maxact[i] += a;
                } else {
                    minact[i] += a;
                }
            }
        }
        Propagation {
            lo: vec![0; n],
            hi: vec![1; n],
            minact,
            maxact,
            queue: VecDeque::new(),
            in_queue: vec![false; m],
            trail: Vec::new(),
        }
    }

    fn is_fixed(&self, v: usize) -> bool {
        self.lo[v] == self.hi[v]
    }

    /// Fixes a variable, updating row activities and queueing its rows.
    /// Returns false when it contradicts the current bounds.
    fn fix(&mut self, var_rows: &[Vec<(u32, f64)>], v: usize, val: bool) -> bool {
        if self.is_fixed(v) {
            return (self.lo[v] == 1) == val;
        }
        if val {
            self.lo[v] = 1;
        } else {
            self.hi[v] = 0;
        }
        self.trail.push(v as u32);
        for &(r, a) in &var_rows[v] {
            let r = r as usize;
            // A free var contributes 0/a to minact and a/0 to maxact for
            // positive/negative coefficients respectively.
            if a > 0.0 {
                if val {
                    self.minact[r] += a;
                } else {
                    self.maxact[r] -= a;
                }
            } else if val {
                self.maxact[r] += a;
            } else {
                self.minact[r] -= a;
            }
            if !self.in_queue[r] {
                self.in_queue[r] = true;
                self.queue.push_back(r as u32);
            }
        }
        true
    }

    /// Runs bound propagation to a fixpoint. Returns false on conflict.
    fn propagate(&mut self, p: &BinaryProgram, var_rows: &[Vec<(u32, f64)>]) -> bool {
        while let Some(r) = self.queue.pop_front() {
            let ri = r as usize;
            self.in_queue[ri] = false;
            let row = &p.rows()[ri];
            let (check_le, check_ge) = match row.rel {
                Relation::Le => (true, false),
                Relation::Ge => (false, true),
                Relation::Eq => (true, true),
            };
            if check_le && self.minact[ri] > row.rhs + EPS {
                return false;
            }
            if check_ge && self.maxact[ri] < row.rhs - EPS {
                return false;
            }
            for &(v, a) in &row.coeffs {
                let v = v as usize;
                if self.is_fixed(v) {
                    continue;
                }
                if check_le {
                    if a > 0.0 && self.minact[ri] + a > row.rhs + EPS {
                        if !self.fix(var_rows, v, false) {
                            return false;
                        }
                    } else if a < 0.0 && self.minact[ri] - a > row.rhs + EPS {
                        if !self.fix(var_rows, v, true) {
                            return false;
                        }
                    }
                }
                if check_ge && !self.is_fixed(v) {
                    if a > 0.0 && self.maxact[ri] - a < row.rhs - EPS {
                        if !self.fix(var_rows, v, true) {
                            return false;
                        }
                    } else if a < 0.0 && self.maxact[ri] + a < row.rhs - EPS {
                        if !self.fix(var_rows, v, false) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    fn undo_to(&mut self, var_rows: &[Vec<(u32, f64)>], mark: usize) {
        while self.trail.len() > mark {
            let v = self.trail.pop().unwrap() as usize;
            let was_true = self.lo[v] == 1;
            for &(r, a) in &var_rows[v] {
                let r = r as usize;
                if a > 0.0 {
                    if was_true {
                        self.minact[r] -= a;
                    } else {
                        self.maxact[r] += a;
                    }
                } else if was_true {
                    self.maxact[r] -= a;
                } else {
                    self.minact[r] += a;
                }
            }
            self.lo[v] = 0;
            self.hi[v] = 1;
        }
        self.queue.clear();
        self.in_queue.iter_mut().for_each(|b| *b = false);
    }
}

struct Decision {
    var: u32,
    value: bool,
    parent: Option<Rc<Decision>>,
}

struct Node {
    bound: f64,
    id: u64,
    decisions: Option<Rc<Decision>>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}
impl Eq for Node {}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap on bound; FIFO on ties for determinism.
        self.bound
            .total_cmp(&other.bound)
            .then_with(|| other.id.cmp(&self.id))
    }
}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn solve_with(p: &BinaryProgram, opts: &SolveOptions) -> SolveResult {
    let start = Instant::now();
    let deadline = start + opts.time_limit;
    let n = p.num_vars();
    let m = p.num_rows();

    let mut var_rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for (i, row) in p.rows().iter().enumerate() {
        for &(v, a) in &row.coeffs {
            var_rows[v as usize].push((i as u32, a));
        }
    }

    let integral_objective = (0..n).all(|j| p.objective_coeff(j).fract() == 0.0);
    let mut nodes: u64 = 0;
    let mut incumbent: Option<(Vec<bool>, f64)> = None;
    if let Some(warm) = &opts.warm_start {
        if check_assignment(p, warm).is_ok() {
            let obj = p.objective_of(warm);
            incumbent = Some((warm.clone(), obj));
        } else {
            debug_assert!(false, "warm start failed feasibility check");
        }
    }

    let finish = |status: SolveStatus, incumbent: Option<(Vec<bool>, f64)>, nodes: u64| {
        let (assignment, obj) = match incumbent {
            Some((a, o)) => (Some(a), o),
            None => (None, 0.0),
        };
        SolveResult {
            status,
            assignment,
            objective_value: obj.round() as i64,
            nodes_explored: nodes,
            wall_time: start.elapsed(),
        }
    };

    // Root: apply pins and propagate.
    let mut state = Propagation::new(p);
    for v in 0..n {
        if let Some(val) = p.fix_of(v) {
            if !state.fix(&var_rows, v, val) {
                return finish(SolveStatus::Infeasible, None, 0);
            }
        }
    }
    if !state.propagate(p, &var_rows) {
        return finish(SolveStatus::Infeasible, None, 0);
    }
    let root_state = (
        state.lo.clone(),
        state.hi.clone(),
        state.minact.clone(),
        state.maxact.clone(),
    );

    // Root Lagrangian multipliers; reduced costs are reused for every node
    // bound when the LP is unavailable.
    let norm = normalize(p);
    let lag_iters = if (n + m) > 400_000 { 40 } else { 80 };
    let lagrangian: Lagrangian = optimize_lagrangian(
        p,
        &norm,
        &state.lo,
        &state.hi,
        incumbent.as_ref().map(|(_, o)| *o),
        lag_iters,
    );

    let beats = |bound: f64, inc: &Option<(Vec<bool>, f64)>| -> bool {
        match inc {
            None => true,
            Some((_, obj)) => {
                if integral_objective {
                    bound + EPS >= obj + 1.0
                } else {
                    bound > obj + 1e-9
                }
            }
        }
    };

    let mut heap = BinaryHeap::new();
    let trivial_bound = lagrangian.bound(&state.lo, &state.hi);
    heap.push(Node {
        bound: trivial_bound,
        id: 0,
        decisions: None,
    });
    let mut next_id: u64 = 1;
    let mut timed_out = false;

    'search: while let Some(node) = heap.pop() {
        if nodes >= opts.node_limit {
            timed_out = true;
            break;
        }
        if nodes % 16 == 0 && Instant::now() >= deadline {
            timed_out = true;
            break;
        }
        nodes += 1;
        if !beats(node.bound, &incumbent) {
            continue; // pruned by the bound computed at push time
        }

        // Materialize the node state: root bounds plus the decision path.
        state.lo.copy_from_slice(&root_state.0);
        state.hi.copy_from_slice(&root_state.1);
        state.minact.copy_from_slice(&root_state.2);
        state.maxact.copy_from_slice(&root_state.3);
        state.trail.clear();
        state.queue.clear();
        state.in_queue.iter_mut().for_each(|b| *b = false);
        let mut path = Vec::new();
        let mut cur = node.decisions.clone();
        while let Some(d) = cur {
            path.push((d.var, d.value));
            cur = d.parent.clone();
        }
        let mut ok = true;
        for &(v, val) in path.iter().rev() {
            if !state.fix(&var_rows, v as usize, val) {
                ok = false;
                break;
            }
        }
        if !ok || !state.propagate(p, &var_rows) {
            continue; // infeasible subtree
        }

        // Bound and fractional guidance.
        let mut bound = node.bound;
        let mut lp_x: Option<Vec<f64>> = None;
        match lp_relaxation(p, &state.lo, &state.hi) {
            LpOutcome::Optimal { value, x } => {
                bound = bound.min(value);
                lp_x = Some(x);
            }
            LpOutcome::Infeasible => continue,
            LpOutcome::Unavailable => {
                bound = bound.min(lagrangian.bound(&state.lo, &state.hi));
            }
        }
        if !beats(bound, &incumbent) {
            continue;
        }

        // Fully decided: propagation keeps activities consistent, so this is
        // feasible; record it.
        let free: Vec<usize> = (0..n).filter(|&j| !state.is_fixed(j)).collect();
        if free.is_empty() {
            let assignment: Vec<bool> = state.lo.iter().map(|&v| v == 1).collect();
            if check_assignment(p, &assignment).is_ok() {
                let obj = p.objective_of(&assignment);
                if incumbent.as_ref().map_or(true, |(_, best)| obj > best + 1e-9) {
                    incumbent = Some((assignment, obj));
                }
            }
            continue;
        }

        // Integral LP solutions close the node.
        if let Some(x) = &lp_x {
            if free.iter().all(|&j| (x[j] - x[j].round()).abs() < 1e-7) {
                let mark = state.trail.len();
                let mut feasible = true;
                for &j in &free {
                    let val = x[j].round() == 1.0;
                    if !state.fix(&var_rows, j, val) {
                        feasible = false;
                        break;
                    }
                }
                if feasible && state.propagate(p, &var_rows) {
                    let assignment: Vec<bool> = state.lo.iter().map(|&v| v == 1).collect();
                    if check_assignment(p, &assignment).is_ok() {
                        let obj = p.objective_of(&assignment);
                        if incumbent.as_ref().map_or(true, |(_, best)| obj > best + 1e-9) {
                            incumbent = Some((assignment, obj));
                        }
                        continue;
                    }
                }
                state.undo_to(&var_rows, mark);
            }
        }

        // Occasionally dive for an incumbent before branching.
        if (nodes == 1 || nodes % 128 == 0) && free.len() <= 50_000 {
            if let Some((assignment, obj)) =
                dive(p, &var_rows, &mut state, &lagrangian, lp_x.as_deref())
            {
                if incumbent.as_ref().map_or(true, |(_, best)| obj > best + 1e-9) {
                    incumbent = Some((assignment, obj));
                    if !beats(bound, &incumbent) {
                        continue 'search;
                    }
                }
            }
        }

        // Branch.
        let (var, first_val) = pick_branch(&free, lp_x.as_deref(), &lagrangian);
        for &val in &[first_val, !first_val] {
            heap.push(Node {
                bound,
                id: next_id,
                decisions: Some(Rc::new(Decision {
                    var: var as u32,
                    value: val,
                    parent: node.decisions.clone(),
                })),
            });
            next_id += 1;
        }
    }

    let status = match (&incumbent, timed_out) {
        (Some(_), false) => SolveStatus::Optimal,
        (Some(_), true) => SolveStatus::FeasibleIncumbent,
        (None, false) => SolveStatus::Infeasible,
        (None, true) => SolveStatus::TimeoutNoIncumbent,
    };
    finish(status, incumbent, nodes)
}

/// Most fractional LP variable; otherwise the free variable with the largest
/// reduced-cost magnitude; ties and absences fall back to the first unfixed.
fn pick_branch(free: &[usize], lp_x: Option<&[f64]>, lag: &Lagrangian) -> (usize, bool) {
    if let Some(x) = lp_x {
        let mut best = free[0];
        let mut best_frac = f64::INFINITY;
        for &j in free {
            let frac = (x[j] - 0.5).abs();
            if frac < best_frac - 1e-12 {
                best_frac = frac;
                best = j;
            }
        }
        if best_frac < 0.5 - 1e-7 {
            return (best, x[best] >= 0.5);
        }
    }
    let mut best = free[0];
    let mut best_score = -1.0;
    for &j in free {
        let score = lag.reduced[j].abs();
        if score > best_score + 1e-12 {
            best_score = score;
            best = j;
        }
    }
    (best, lag.preferred(best))
}

/// Depth-first dive: repeatedly fix the branch variable to its preferred
/// value, flipping once on conflict. Returns a checked feasible assignment
/// when the dive bottoms out.
fn dive(
    p: &BinaryProgram,
    var_rows: &[Vec<(u32, f64)>],
    state: &mut Propagation,
    lag: &Lagrangian,
    lp_x: Option<&[f64]>,
) -> Option<(Vec<bool>, f64)> {
    let n = p.num_vars();
    let mark = state.trail.len();
    let mut result = None;
    loop {
        let mut next = None;
        for j in 0..n {
            if !state.is_fixed(j) {
                next = Some(j);
                break;
            }
        }
        let Some(j) = next else {
            let assignment: Vec<bool> = state.lo.iter().map(|&v| v == 1).collect();
            if check_assignment(p, &assignment).is_ok() {
                let obj = p.objective_of(&assignment);
                result = Some((assignment, obj));
            }
            break;
        };
        let preferred = match lp_x {
            Some(x) => x[j] >= 0.5,
            None => lag.preferred(j),
        };
        let attempt = state.trail.len();
        let ok = state.fix(var_rows, j, preferred) && state.propagate(p, var_rows);
        if !ok {
            state.undo_to(var_rows, attempt);
            let ok2 = state.fix(var_rows, j, !preferred) && state.propagate(p, var_rows);
            if !ok2 {
                break;
            }
        }
    }
    state.undo_to(var_rows, mark);
    result
}
