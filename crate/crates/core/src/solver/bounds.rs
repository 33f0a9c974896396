//! Upper bounds for the branch-and-bound search: an exact LP relaxation via
//! a dense two-phase simplex for small programs, and a subgradient-optimized
//! Lagrangian bound that scales to arbitrary sizes. Both are valid upper
//! bounds for the maximization; the search falls back to the Lagrangian
//! whenever the LP is too large or terminates unclean.

use super::{BinaryProgram, Relation};

/// A constraint system normalized to `a'x <= b` rows. Equalities contribute
/// two rows so every Lagrange multiplier is simply nonnegative.
pub(super) struct NormalizedRows {
    pub rows: Vec<(Vec<(u32, f64)>, f64)>,
}

pub(super) fn normalize(p: &BinaryProgram) -> NormalizedRows {
    let mut rows = Vec::new();
    for row in p.rows() {
        match row.rel {
            Relation::Le => rows.push((row.coeffs.clone(), row.rhs)),
            Relation::Ge => rows.push((
                row.coeffs.iter().map(|&(v, a)| (v, -a)).collect(),
                -row.rhs,
            )),
            Relation::Eq => {
                rows.push((row.coeffs.clone(), row.rhs));
                rows.push((
                    row.coeffs.iter().map(|&(v, a)| (v, -a)).collect(),
                    -row.rhs,
                ));
            }
        }
    }
    NormalizedRows { rows }
}

/// Lagrangian relaxation of every row: for any multipliers `lambda >= 0`,
/// `sum_i lambda_i b_i + max_x sum_j (c_j - lambda'a_j) x_j` over the box is
/// an upper bound on the constrained maximum.
pub(super) struct Lagrangian {
    /// Final multipliers' contribution: lambda . b.
    pub constant: f64,
    /// Reduced objective c_j - sum_i lambda_i a_ij.
    pub reduced: Vec<f64>,
}

impl Lagrangian {
    /// Bound under the given variable bounds (lo/hi in {0,1}).
    pub fn bound(&self, lo: &[u8], hi: &[u8]) -> f64 {
        let mut total = self.constant;
        for (j, &r) in self.reduced.iter().enumerate() {
            total += if r > 0.0 {
                r * hi[j] as f64
            } else {
                r * lo[j] as f64
            };
        }
        total
    }

    /// The box-maximizing value for a free variable: 1 iff its reduced
    /// objective is positive.
    pub fn preferred(&self, j: usize) -> bool {
        self.reduced[j] > 0.0
    }
}

/// Optimizes multipliers by projected subgradient descent from zero,
/// keeping the best (lowest) bound seen. `reference` is a known feasible
/// objective used to scale Polyak steps, if any.
pub(super) fn optimize_lagrangian(
    p: &BinaryProgram,
    norm: &NormalizedRows,
    lo: &[u8],
    hi: &[u8],
    reference: Option<f64>,
    iterations: usize,
) -> Lagrangian {
    let n = p.num_vars();
    let m = norm.rows.len();
    let mut lambda = vec![0.0f64; m];
    let mut best_constant = 0.0;
    let mut best_reduced: Vec<f64> = (0..n).map(|j| p.objective_coeff(j)).collect();
    let mut best_bound = {
        let l = Lagrangian {
            constant: 0.0,
            reduced: best_reduced.clone(),
        };
        l.bound(lo, hi)
    };
    if m == 0 || iterations == 0 {
        return Lagrangian {
            constant: best_constant,
            reduced: best_reduced,
        };
    }
    let mut reduced = best_reduced.clone();
    let mut stall = 0usize;
    let mut scale = 1.0f64;
    for _ in 0..iterations {
        // Box argmax under current reduced costs.
        let x: Vec<f64> = (0..n)
            .map(|j| {
                if reduced[j] > 0.0 {
                    hi[j] as f64
                } else {
                    lo[j] as f64
                }
            })
            .collect();
        let constant: f64 = lambda
            .iter()
            .zip(norm.rows.iter())
            .map(|(&l, (_, b))| l * b)
            .sum();
        let bound = constant
            + reduced
                .iter()
                .zip(x.iter())
                .map(|(&r, &xv)| r * xv)
                .sum::<f64>();
        if bound < best_bound - 1e-12 {
            best_bound = bound;
            best_constant = constant;
            best_reduced = reduced.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= 8 {
                scale *= 0.5;
                stall = 0;
                if scale < 1e-4 {
                    break;
                }
            }
        }
        // Subgradient g_i = b_i - a_i'x; move lambda against violated rows.
        let mut gnorm2 = 0.0;
        let mut grads = vec![0.0f64; m];
        for (i, (coeffs, b)) in norm.rows.iter().enumerate() {
            let act: f64 = coeffs.iter().map(|&(v, a)| a * x[v as usize]).sum();
            let g = b - act;
            grads[i] = g;
            gnorm2 += g * g;
        }
        if gnorm2 < 1e-18 {
            break;
        }
        let target = reference.unwrap_or(best_bound * 0.5);
        let gap = (bound - target).max(1.0);
        let step = scale * gap / gnorm2;
        for (i, (coeffs, _)) in norm.rows.iter().enumerate() {
            let old = lambda[i];
            let new = (old - step * grads[i]).max(0.0);
            if new != old {
                let delta = new - old;
                for &(v, a) in coeffs {
                    reduced[v as usize] -= delta * a;
                }
                lambda[i] = new;
            }
        }
    }
    Lagrangian {
        constant: best_constant,
        reduced: best_reduced,
    }
}

/// Outcome of an LP relaxation solve over the free variables.
pub(super) enum LpOutcome {
    /// LP optimum and the fractional values of every variable (fixed ones at
    /// their bound).
    Optimal { value: f64, x: Vec<f64> },
    Infeasible,
    /// Size guard tripped or the simplex terminated unclean; no claim made.
    Unavailable,
}

const LP_MAX_FREE_VARS: usize = 450;
const LP_MAX_ROWS: usize = 1100;

/// Solves the LP relaxation with a dense two-phase simplex.
///
/// Fixed variables are substituted into the right-hand sides; free variables
/// get explicit `x <= 1` rows so the standard form is `max c'x, Ax <= b,
/// x >= 0`.
pub(super) fn lp_relaxation(p: &BinaryProgram, lo: &[u8], hi: &[u8]) -> LpOutcome {
    let n = p.num_vars();
    let free: Vec<usize> = (0..n).filter(|&j| lo[j] != hi[j]).collect();
    if free.is_empty() {
        // Everything decided; activity checking happens in propagation.
        let value = (0..n)
            .map(|j| p.objective_coeff(j) * lo[j] as f64)
            .sum::<f64>();
        return LpOutcome::Optimal {
            value,
            x: lo.iter().map(|&v| v as f64).collect(),
        };
    }
    if free.len() > LP_MAX_FREE_VARS {
        return LpOutcome::Unavailable;
    }
    let col_of: std::collections::HashMap<usize, usize> =
        free.iter().enumerate().map(|(c, &j)| (j, c)).collect();
    let nf = free.len();

    // Normalized <= rows over free variables with substituted constants.
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut fixed_obj = 0.0;
    for j in 0..n {
        if lo[j] == hi[j] {
            fixed_obj += p.objective_coeff(j) * lo[j] as f64;
        }
    }
    for row in p.rows() {
        let mut coeffs = Vec::new();
        let mut shift = 0.0;
        for &(v, a) in &row.coeffs {
            let v = v as usize;
            if let Some(&c) = col_of.get(&v) {
                coeffs.push((c, a));
            } else {
                shift += a * lo[v] as f64;
            }
        }
        let rhs = row.rhs - shift;
        match row.rel {
            Relation::Le => rows.push((coeffs, rhs)),
            Relation::Ge => rows.push((coeffs.iter().map(|&(c, a)| (c, -a)).collect(), -rhs)),
            Relation::Eq => {
                rows.push((coeffs.clone(), rhs));
                rows.push((coeffs.iter().map(|&(c, a)| (c, -a)).collect(), -rhs));
            }
        }
    }
    // Rows with no free variables are pure feasibility checks.
    rows.retain(|(coeffs, rhs)| {
        if coeffs.is_empty() {
            *rhs >= -1e-9
        } else {
            true
        }
    });
    let constant_infeasible = p.rows().iter().any(|row| {
        row.coeffs.iter().all(|&(v, _)| lo[v as usize] == hi[v as usize]) && {
            let lhs: f64 = row
                .coeffs
                .iter()
                .map(|&(v, a)| a * lo[v as usize] as f64)
                .sum();
            match row.rel {
                Relation::Le => lhs > row.rhs + 1e-9,
                Relation::Ge => lhs < row.rhs - 1e-9,
                Relation::Eq => (lhs - row.rhs).abs() > 1e-9,
            }
        }
    });
    if constant_infeasible {
        return LpOutcome::Infeasible;
    }
    for c in 0..nf {
        rows.push((vec![(c, 1.0)], 1.0));
    }
    if rows.len() > LP_MAX_ROWS {
        return LpOutcome::Unavailable;
    }

    let objective: Vec<f64> = free.iter().map(|&j| p.objective_coeff(j)).collect();
    match simplex_max(&objective, &rows) {
        SimplexOutcome::Optimal { value, x } => {
            let mut full = vec![0.0f64; n];
            for j in 0..n {
                full[j] = lo[j] as f64;
            }
            for (c, &j) in free.iter().enumerate() {
                full[j] = x[c];
            }
            LpOutcome::Optimal {
                value: value + fixed_obj,
                x: full,
            }
        }
        SimplexOutcome::Infeasible => LpOutcome::Infeasible,
        SimplexOutcome::Unclean => LpOutcome::Unavailable,
    }
}

enum SimplexOutcome {
    Optimal { value: f64, x: Vec<f64> },
    Infeasible,
    Unclean,
}

const PIVOT_EPS: f64 = 1e-9;

/// Dense two-phase tableau simplex for `max c'x : Ax <= b, x >= 0` where b
/// may be negative (phase 1 introduces artificials for those rows).
fn simplex_max(c: &[f64], rows: &[(Vec<(usize, f64)>, f64)]) -> SimplexOutcome {
    let n = c.len();
    let m = rows.len();
    let art_rows: Vec<usize> = (0..m).filter(|&i| rows[i].1 < 0.0).collect();
    let na = art_rows.len();
    let cols = n + m + na; // structurals, slacks, artificials
    let width = cols + 1; // + rhs
    let mut tab = vec![0.0f64; m * width];
    let mut basis = vec![0usize; m];

    for (i, (coeffs, rhs)) in rows.iter().enumerate() {
        let sign = if *rhs < 0.0 { -1.0 } else { 1.0 };
        for &(j, a) in coeffs {
            tab[i * width + j] = sign * a;
        }
        tab[i * width + n + i] = sign; // slack
        tab[i * width + cols] = sign * rhs;
        basis[i] = n + i;
    }
    for (k, &i) in art_rows.iter().enumerate() {
        tab[i * width + n + m + k] = 1.0;
        basis[i] = n + m + k;
    }

    let iter_cap = 50 * (m + n) + 500;

    // Phase 1: minimize the sum of artificials (maximize its negation). The
    // objective row holds z - c'x, so price the artificial basis out by
    // subtracting its rows; artificial columns then reduce to zero.
    if na > 0 {
        let mut obj = vec![0.0f64; width];
        for &i in &art_rows {
            for j in 0..width {
                obj[j] -= tab[i * width + j];
            }
        }
        for k in 0..na {
            obj[n + m + k] = 0.0;
        }
        let ok = run_simplex(&mut tab, &mut basis, &mut obj, m, width, iter_cap);
        if !ok {
            return SimplexOutcome::Unclean;
        }
        if obj[cols] < -1e-7 {
            return SimplexOutcome::Infeasible;
        }
        // Pivot any artificial still in the basis out onto a real column.
        for i in 0..m {
            if basis[i] >= n + m {
                let mut pivoted = false;
                for j in 0..n + m {
                    if tab[i * width + j].abs() > 1e-7 {
                        pivot(&mut tab, &mut basis, &mut obj, m, width, i, j);
                        pivoted = true;
                        break;
                    }
                }
                if !pivoted {
                    // Redundant row; the artificial stays at zero harmlessly,
                    // but it must not re-enter. Zero it out.
                    for j in 0..width {
                        tab[i * width + j] = 0.0;
                    }
                }
            }
        }
    }

    // Phase 2 objective: reduced costs of c given the current basis.
    let mut obj = vec![0.0f64; width];
    for j in 0..n {
        obj[j] = -c[j];
    }
    for i in 0..m {
        let b = basis[i];
        if b < n && c[b] != 0.0 {
            let coef = c[b];
            for j in 0..width {
                obj[j] += coef * tab[i * width + j];
            }
        }
    }
    // Forbid artificials from re-entering.
    for k in 0..na {
        obj[n + m + k] = f64::INFINITY;
    }
    let ok = run_simplex(&mut tab, &mut basis, &mut obj, m, width, iter_cap);
    if !ok {
        return SimplexOutcome::Unclean;
    }
    let mut x = vec![0.0f64; n];
    for i in 0..m {
        if basis[i] < n {
            x[basis[i]] = tab[i * width + cols];
        }
    }
    SimplexOutcome::Optimal {
        value: obj[cols],
        x,
    }
}

/// Runs primal simplex iterations in place. The `obj` row holds reduced costs
/// (entering columns are those with negative reduced cost for maximization
/// written as `z - c'x = 0`). Returns false when the iteration cap is hit.
fn run_simplex(
    tab: &mut [f64],
    basis: &mut [usize],
    obj: &mut [f64],
    m: usize,
    width: usize,
    iter_cap: usize,
) -> bool {
    let cols = width - 1;
    let mut iters = 0usize;
    let mut degenerate_streak = 0usize;
    loop {
        iters += 1;
        if iters > iter_cap {
            return false;
        }
        let bland = degenerate_streak > 2 * m + 20;
        // Entering column: most negative reduced cost (or Bland's first).
        let mut enter = usize::MAX;
        let mut best = -PIVOT_EPS;
        for j in 0..cols {
            let r = obj[j];
            if r.is_infinite() {
                continue;
            }
            if bland {
                if r < -PIVOT_EPS {
                    enter = j;
                    break;
                }
            } else if r < best {
                best = r;
                enter = j;
            }
        }
        if enter == usize::MAX {
            return true; // optimal
        }
        // Ratio test.
        let mut leave = usize::MAX;
        let mut best_ratio = f64::INFINITY;
        for i in 0..m {
            let a = tab[i * width + enter];
            if a > PIVOT_EPS {
                let ratio = tab[i * width + cols] / a;
                if ratio < best_ratio - 1e-12
                    || (ratio < best_ratio + 1e-12
                        && (leave == usize::MAX || basis[i] < basis[leave]))
                {
                    best_ratio = ratio;
                    leave = i;
                }
            }
        }
        if leave == usize::MAX {
            // Unbounded relaxation: treat as unclean; binary boxes make this
            // impossible unless the upper-bound rows were dropped.
            return false;
        }
        if best_ratio < 1e-12 {
            degenerate_streak += 1;
        } else {
            degenerate_streak = 0;
        }
        pivot(tab, basis, obj, m, width, leave, enter);
    }
}

fn pivot(
    tab: &mut [f64],
    basis: &mut [usize],
    obj: &mut [f64],
    m: usize,
    width: usize,
    leave: usize,
    enter: usize,
) {
    let piv = tab[leave * width + enter];
    let inv = 1.0 / piv;
    for j in 0..width {
        tab[leave * width + j] *= inv;
    }
    tab[leave * width + enter] = 1.0;
    for i in 0..m {
        if i != leave {
            let factor = tab[i * width + enter];
            if factor != 0.0 {
                for j in 0..width {
                    tab[i * width + j] -= factor * tab[leave * width + j];
                }
                tab[i * width + enter] = 0.0;
            }
        }
    }
    let factor = obj[enter];
    if factor != 0.0 && factor.is_finite() {
        for j in 0..width {
            if obj[j].is_finite() {
                obj[j] -= factor * tab[leave * width + j];
            }
        }
        obj[enter] = 0.0;
    }
    basis[leave] = enter;
}
