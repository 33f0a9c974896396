//! 0-1 integer programming: a built-in exact branch-and-bound solver with
//! bound propagation, LP-relaxation / Lagrangian bounding, plus LP-file
//! export and solution import for interop with external solvers.
//!
//! LP file layout (in order): a comment line, `Maximize` with the objective,
//! `Subject To` with one named row per constraint, `Bounds` carrying fixed
//! variables, `Binary` listing every variable, `End`.

mod bnb;
mod bounds;

pub use bnb::{solve, solve_with, SolveOptions};

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

impl Relation {
    fn symbol(self) -> &'static str {
        match self {
            Relation::Le => "<=",
            Relation::Eq => "=",
            Relation::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Row {
    pub coeffs: Vec<(u32, f64)>,
    pub rel: Relation,
    pub rhs: f64,
}

/// A pure binary program: maximize a linear objective over 0/1 variables
/// subject to linear rows. Individual variables may be pinned via `fix_var`;
/// pins are bounds, not constraint rows.
#[derive(Debug, Clone)]
pub struct BinaryProgram {
    pub name: String,
    names: Vec<String>,
    objective: Vec<f64>,
    rows: Vec<Row>,
    fixes: Vec<Option<bool>>,
}

impl BinaryProgram {
    pub fn new(name: impl Into<String>) -> Self {
        BinaryProgram {
            name: name.into(),
            names: Vec::new(),
            objective: Vec::new(),
            rows: Vec::new(),
            fixes: Vec::new(),
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>, objective: f64) -> usize {
        self.names.push(name.into());
        self.objective.push(objective);
        self.fixes.push(None);
        self.names.len() - 1
    }

    pub fn fix_var(&mut self, var: usize, value: bool) {
        self.fixes[var] = Some(value);
    }

    pub fn fix_of(&self, var: usize) -> Option<bool> {
        self.fixes[var]
    }

    pub fn add_row(&mut self, coeffs: Vec<(u32, f64)>, rel: Relation, rhs: f64) {
        debug_assert!(coeffs.iter().all(|&(v, _)| (v as usize) < self.names.len()));
        self.rows.push(Row { coeffs, rel, rhs });
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn var_name(&self, var: usize) -> &str {
        &self.names[var]
    }

    pub fn objective_coeff(&self, var: usize) -> f64 {
        self.objective[var]
    }

    pub fn objective_of(&self, assignment: &[bool]) -> f64 {
        assignment
            .iter()
            .zip(&self.objective)
            .map(|(&x, &c)| if x { c } else { 0.0 })
            .sum()
    }

    fn var_index(&self, name: &str) -> Option<usize> {
        // Names are unique by construction in this crate; linear scan is fine
        // for the import path, but build a map for larger programs.
        self.names.iter().position(|n| n == name)
    }
}

const FEAS_EPS: f64 = 1e-6;

/// Direct evaluation of every constraint row and every fix against an
/// assignment. This is the ground-truth feasibility check used by the solver
/// and by tests.
pub fn check_assignment(p: &BinaryProgram, assignment: &[bool]) -> Result<()> {
    if assignment.len() != p.num_vars() {
        return Err(Error::InvalidInput(format!(
            "assignment has {} values for {} variables",
            assignment.len(),
            p.num_vars()
        )));
    }
    for (j, fix) in p.fixes.iter().enumerate() {
        if let Some(v) = fix {
            if assignment[j] != *v {
                return Err(Error::InvalidInput(format!(
                    "fixed variable {} violated",
                    p.names[j]
                )));
            }
        }
    }
    for (i, row) in p.rows.iter().enumerate() {
        let lhs: f64 = row
            .coeffs
            .iter()
            .map(|&(v, a)| if assignment[v as usize] { a } else { 0.0 })
            .sum();
        let ok = match row.rel {
            Relation::Le => lhs <= row.rhs + FEAS_EPS,
            Relation::Ge => lhs >= row.rhs - FEAS_EPS,
            Relation::Eq => (lhs - row.rhs).abs() <= FEAS_EPS,
        };
        if !ok {
            return Err(Error::InvalidInput(format!(
                "row {i} violated: lhs {lhs} {} rhs {}",
                row.rel.symbol(),
                row.rhs
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Search tree exhausted with an incumbent: proven optimal.
    Optimal,
    /// Stopped early (time limit or first-incumbent mode) with a feasible
    /// incumbent that may not be optimal.
    FeasibleIncumbent,
    /// Search tree exhausted without any feasible assignment.
    Infeasible,
    /// Stopped early with nothing to show.
    TimeoutNoIncumbent,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub assignment: Option<Vec<bool>>,
    pub objective_value: i64,
    pub nodes_explored: u64,
    pub wall_time: std::time::Duration,
}

fn format_coeff(out: &mut String, coeff: f64, name: &str) {
    let sign = if coeff < 0.0 { '-' } else { '+' };
    let mag = coeff.abs();
    let _ = write!(out, " {sign} {mag} {name}");
}

/// Serializes the program in LP file format with deterministic ordering.
pub fn export_lp(p: &BinaryProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "\\ Problem: {}", p.name);
    out.push_str("Maximize\n obj:");
    let mut line_len = 5usize;
    for (j, &c) in p.objective.iter().enumerate() {
        if c != 0.0 {
            let before = out.len();
            format_coeff(&mut out, c, &p.names[j]);
            line_len += out.len() - before;
            if line_len > 70 {
                out.push_str("\n   ");
                line_len = 3;
            }
        }
    }
    out.push_str("\nSubject To\n");
    for (i, row) in p.rows.iter().enumerate() {
        let _ = write!(out, " c{i}:");
        for &(v, a) in &row.coeffs {
            format_coeff(&mut out, a, &p.names[v as usize]);
        }
        let _ = writeln!(out, " {} {}", row.rel.symbol(), row.rhs);
    }
    out.push_str("Bounds\n");
    for (j, fix) in p.fixes.iter().enumerate() {
        if let Some(v) = fix {
            let _ = writeln!(out, " {} = {}", p.names[j], if *v { 1 } else { 0 });
        }
    }
    out.push_str("Binary\n");
    for name in &p.names {
        let _ = writeln!(out, " {name}");
    }
    out.push_str("End\n");
    out
}

/// Parses a solution file of `<name> <value>` lines (the format emitted by
/// common external solvers). Comment lines starting with `#` or `\` and blank
/// lines are skipped; variables not mentioned default to 0.
pub fn import_solution(p: &BinaryProgram, text: &str) -> Result<Vec<bool>> {
    let mut assignment = vec![false; p.num_vars()];
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('\\') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().ok_or(Error::SolutionParse {
            line: lineno + 1,
            message: "missing variable name".into(),
        })?;
        let value_text = parts.next().ok_or(Error::SolutionParse {
            line: lineno + 1,
            message: format!("missing value for {name}"),
        })?;
        if parts.next().is_some() {
            return Err(Error::SolutionParse {
                line: lineno + 1,
                message: "expected exactly two fields".into(),
            });
        }
        let value: f64 = value_text.parse().map_err(|_| Error::SolutionParse {
            line: lineno + 1,
            message: format!("bad value {value_text:?}"),
        })?;
        let var = p.var_index(name).ok_or(Error::SolutionParse {
            line: lineno + 1,
            message: format!("unknown variable {name:?}"),
        })?;
        assignment[var] = value > 0.5;
    }
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn tiny() -> BinaryProgram {
        let mut p = BinaryProgram::new("tiny");
        let x1 = p.add_var("x1", 1.0);
        let x2 = p.add_var("x2", 1.0);
        p.add_row(vec![(x1 as u32, 1.0), (x2 as u32, 1.0)], Relation::Le, 1.0);
        p
    }

    #[test]
    fn packing_pair() {
        let r = solve(&tiny(), Duration::from_secs(5), 0);
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_eq!(r.objective_value, 1);
    }

    #[test]
    fn unconstrained_all_ones() {
        let mut p = BinaryProgram::new("free");
        for i in 0..7 {
            p.add_var(format!("x{i}"), 1.0);
        }
        let r = solve(&p, Duration::from_secs(5), 0);
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_eq!(r.objective_value, 7);
        assert!(r.assignment.unwrap().iter().all(|&b| b));
    }

    #[test]
    fn contradictory_fixes_are_infeasible() {
        let mut p = BinaryProgram::new("fixed");
        let x = p.add_var("x", 1.0);
        let y = p.add_var("y", 0.0);
        p.fix_var(x, true);
        p.fix_var(y, true);
        p.add_row(vec![(x as u32, 1.0), (y as u32, 1.0)], Relation::Le, 1.0);
        let r = solve(&p, Duration::from_secs(5), 0);
        assert_eq!(r.status, SolveStatus::Infeasible);
        assert!(r.assignment.is_none());
    }

    #[test]
    fn equality_and_ge_rows() {
        let mut p = BinaryProgram::new("mix");
        let x = p.add_var("x", 2.0);
        let y = p.add_var("y", 1.0);
        let z = p.add_var("z", 1.0);
        p.add_row(vec![(x as u32, 1.0), (y as u32, 1.0)], Relation::Eq, 1.0);
        p.add_row(vec![(y as u32, 1.0), (z as u32, 1.0)], Relation::Ge, 1.0);
        let r = solve(&p, Duration::from_secs(5), 0);
        assert_eq!(r.status, SolveStatus::Optimal);
        // x=1 forces y=0 forces z=1: objective 3.
        assert_eq!(r.objective_value, 3);
    }

    #[test]
    fn export_sections_and_round_trip() {
        let p = tiny();
        let text = export_lp(&p);
        assert!(text.contains("Maximize"));
        assert!(text.contains("Subject To"));
        assert!(text.contains("Binary"));
        assert!(text.ends_with("End\n"));

        let r = solve(&p, Duration::from_secs(5), 0);
        let assignment = r.assignment.unwrap();
        let mut sol = String::from("# objective 1\n");
        for (j, &v) in assignment.iter().enumerate() {
            sol.push_str(&format!("{} {}\n", p.var_name(j), if v { 1 } else { 0 }));
        }
        let imported = import_solution(&p, &sol).unwrap();
        assert_eq!(imported, assignment);
        check_assignment(&p, &imported).unwrap();
    }

    #[test]
    fn import_errors_carry_line_numbers() {
        let p = tiny();
        let err = import_solution(&p, "x1 1\nbogus 1\n").unwrap_err();
        match err {
            Error::SolutionParse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        let err = import_solution(&p, "x1\n").unwrap_err();
        assert!(matches!(err, Error::SolutionParse { line: 1, .. }));
    }

    #[test]
    fn warm_start_is_honored() {
        let mut p = BinaryProgram::new("warm");
        let vars: Vec<u32> = (0..6).map(|i| p.add_var(format!("x{i}"), 1.0) as u32).collect();
        for w in vars.windows(2) {
            p.add_row(vec![(w[0], 1.0), (w[1], 1.0)], Relation::Le, 1.0);
        }
        let start = vec![true, false, true, false, true, false];
        check_assignment(&p, &start).unwrap();
        let r = solve_with(
            &p,
            &SolveOptions {
                warm_start: Some(start),
                ..SolveOptions::new(Duration::from_secs(5), 0)
            },
        );
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_eq!(r.objective_value, 3);
    }

    #[test]
    fn determinism() {
        let mut p = BinaryProgram::new("det");
        let v: Vec<u32> = (0..10).map(|i| p.add_var(format!("x{i}"), ((i * 7) % 5 + 1) as f64) as u32).collect();
        p.add_row(v.iter().map(|&j| (j, 1.0)).collect(), Relation::Le, 4.0);
        p.add_row(vec![(v[0], 1.0), (v[9], 1.0)], Relation::Ge, 1.0);
        let a = solve(&p, Duration::from_secs(5), 7);
        let b = solve(&p, Duration::from_secs(5), 7);
        assert_eq!(a.status, b.status);
        assert_eq!(a.objective_value, b.objective_value);
        assert_eq!(a.assignment, b.assignment);
    }
}
