//! Dense two-phase primal simplex with Bland's rule.
//!
//! Every variable is implicitly non-negative. The problems built by the game
//! module have at most a few hundred rows, so a full tableau is adequate.

use std::fmt;

use thiserror::Error;

pub const PIVOT_TOLERANCE: f64 = 1e-9;
const FEASIBILITY_TOLERANCE: f64 = 1e-7;
const MAX_ITERATIONS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Eq => "=",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    /// Sparse `(variable, coefficient)` terms.
    pub terms: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn new(terms: Vec<(usize, f64)>, relation: Relation, rhs: f64) -> Self {
        Self { terms, relation, rhs }
    }

    pub fn lhs(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Amount by which `x` violates this constraint (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs = self.lhs(x);
        match self.relation {
            Relation::Le => (lhs - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - lhs).max(0.0),
            Relation::Eq => (lhs - self.rhs).abs(),
        }
    }
}

/// `maximize objective . x` subject to `constraints`, `x >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub var_names: Vec<String>,
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible (phase one residual {0:e})")]
    Infeasible(f64),
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex did not terminate within {0} pivots")]
    IterationLimit(usize),
    #[error("constraint {index} references variable {var} but the program has {n_vars}")]
    BadVariable { index: usize, var: usize, n_vars: usize },
}

impl LinearProgram {
    pub fn new(var_names: Vec<String>) -> Self {
        let n = var_names.len();
        Self {
            var_names,
            objective: vec![0.0; n],
            constraints: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn push(&mut self, c: Constraint) {
        self.constraints.push(c);
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let bounds = x.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
        self.constraints
            .iter()
            .map(|c| c.violation(x))
            .fold(bounds, f64::max)
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        Tableau::build(self)?.solve(self)
    }
}

struct Tableau {
    /// Rows `0..m` are constraints, row `m` is the objective row.
    cells: Vec<f64>,
    width: usize,
    m: usize,
    n_structural: usize,
    first_artificial: usize,
    basis: Vec<usize>,
    iterations: usize,
    /// Initial tableau, for re-solving the final basis.
    original: Vec<f64>,
    row_origin: Vec<usize>,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Result<Self, LpError> {
        let n = lp.n_vars();
        let m = lp.constraints.len();
        for (index, c) in lp.constraints.iter().enumerate() {
            if let Some(&(var, _)) = c.terms.iter().find(|(j, _)| *j >= n) {
                return Err(LpError::BadVariable { index, var, n_vars: n });
            }
        }

        // Normalise to rhs >= 0 first so slack/artificial layout is known.
        let normalised: Vec<(Vec<(usize, f64)>, Relation, f64)> = lp
            .constraints
            .iter()
            .map(|c| {
                if c.rhs < 0.0 {
                    let flipped = match c.relation {
                        Relation::Le => Relation::Ge,
                        Relation::Ge => Relation::Le,
                        Relation::Eq => Relation::Eq,
                    };
                    let terms = c.terms.iter().map(|&(j, a)| (j, -a)).collect();
                    (terms, flipped, -c.rhs)
                } else {
                    (c.terms.clone(), c.relation, c.rhs)
                }
            })
            .collect();

        let n_slack = normalised.iter().filter(|(_, r, _)| *r != Relation::Eq).count();
        let n_art = normalised.iter().filter(|(_, r, _)| *r != Relation::Le).count();
        let first_artificial = n + n_slack;
        let width = n + n_slack + n_art + 1;
        let mut cells = vec![0.0; (m + 1) * width];
        let mut basis = vec![0; m];

        let mut slack = n;
        let mut art = first_artificial;
        for (i, (terms, relation, rhs)) in normalised.iter().enumerate() {
            let row = &mut cells[i * width..(i + 1) * width];
            for &(j, a) in terms {
                row[j] += a;
            }
            row[width - 1] = *rhs;
            match relation {
                Relation::Le => {
                    row[slack] = 1.0;
                    basis[i] = slack;
                    slack += 1;
                }
                Relation::Ge => {
                    row[slack] = -1.0;
                    slack += 1;
                    row[art] = 1.0;
                    basis[i] = art;
                    art += 1;
                }
                Relation::Eq => {
                    row[art] = 1.0;
                    basis[i] = art;
                    art += 1;
                }
            }
        }

        Ok(Self {
            original: cells.clone(),
            cells,
            width,
            m,
            n_structural: n,
            first_artificial,
            basis,
            iterations: 0,
            row_origin: (0..m).collect(),
        })
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.width + col]
    }

    fn rhs(&self, row: usize) -> f64 {
        self.at(row, self.width - 1)
    }

    /// Loads `maximize cost . x` into the objective row in canonical form.
    fn set_objective(&mut self, cost: &[f64]) {
        let (m, w) = (self.m, self.width);
        for j in 0..w {
            self.cells[m * w + j] = 0.0;
        }
        for (j, &c) in cost.iter().enumerate() {
            self.cells[m * w + j] = -c;
        }
        for i in 0..m {
            let cb = cost.get(self.basis[i]).copied().unwrap_or(0.0);
            if cb != 0.0 {
                for j in 0..w {
                    self.cells[m * w + j] += cb * self.cells[i * w + j];
                }
            }
        }
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let w = self.width;
        let p = self.at(row, col);
        for j in 0..w {
            self.cells[row * w + j] /= p;
        }
        self.cells[row * w + col] = 1.0;
        let (before, rest) = self.cells.split_at_mut(row * w);
        let (pivot_row, after) = rest.split_at_mut(w);
        for other in before.chunks_mut(w).chain(after.chunks_mut(w)) {
            let factor = other[col];
            if factor != 0.0 {
                for (o, &pv) in other.iter_mut().zip(pivot_row.iter()) {
                    *o -= factor * pv;
                }
                other[col] = 0.0;
            }
        }
        self.basis[row] = col;
        self.iterations += 1;
    }

    /// Runs Bland-rule pivots over columns `< col_limit` until optimal.
    fn optimise(&mut self, col_limit: usize) -> Result<(), LpError> {
        loop {
            if self.iterations > MAX_ITERATIONS {
                return Err(LpError::IterationLimit(MAX_ITERATIONS));
            }
            let objective_row = self.m;
            let Some(enter) = (0..col_limit).find(|&j| self.at(objective_row, j) < -PIVOT_TOLERANCE)
            else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = self.at(i, enter);
                if a > PIVOT_TOLERANCE {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((best, best_ratio)) => {
                            if ratio < best_ratio - PIVOT_TOLERANCE
                                || ((ratio - best_ratio).abs() <= PIVOT_TOLERANCE
                                    && self.basis[i] < self.basis[best])
                            {
                                Some((i, ratio))
                            } else {
                                Some((best, best_ratio))
                            }
                        }
                    };
                }
            }
            match leave {
                Some((row, _)) => self.pivot(row, enter),
                None => return Err(LpError::Unbounded),
            }
        }
    }

    fn solve(mut self, lp: &LinearProgram) -> Result<LpSolution, LpError> {
        let total_cols = self.width - 1;
        if self.first_artificial < total_cols {
            let mut phase_one = vec![0.0; total_cols];
            for c in phase_one.iter_mut().skip(self.first_artificial) {
                *c = -1.0;
            }
            self.set_objective(&phase_one);
            self.optimise(total_cols)?;
            let residual: f64 = (0..self.m)
                .filter(|&i| self.basis[i] >= self.first_artificial)
                .map(|i| self.rhs(i))
                .sum();
            if residual > FEASIBILITY_TOLERANCE {
                return Err(LpError::Infeasible(residual));
            }
            self.evict_artificials();
        }

        self.set_objective(&lp.objective);
        self.optimise(self.first_artificial)?;

        let values = self.refined_basic_values().unwrap_or_else(|| (0..self.m).map(|i| self.rhs(i)).collect());
        let mut x = vec![0.0; self.n_structural];
        for (i, v) in values.into_iter().enumerate() {
            let b = self.basis[i];
            if b < self.n_structural {
                x[b] = v.max(0.0);
            }
        }
        let objective = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
        Ok(LpSolution {
            x,
            objective,
            iterations: self.iterations,
        })
    }

    /// Pivots zero-valued artificials out of the basis. Rows where no
    /// non-artificial column is available are redundant and are dropped.
    fn evict_artificials(&mut self) {
        let mut i = 0;
        while i < self.m {
            if self.basis[i] >= self.first_artificial {
                let col = (0..self.first_artificial).find(|&j| self.at(i, j).abs() > PIVOT_TOLERANCE);
                match col {
                    Some(j) => self.pivot(i, j),
                    None => {
                        self.remove_row(i);
                        continue;
                    }
                }
            }
            i += 1;
        }
    }

    fn remove_row(&mut self, row: usize) {
        let w = self.width;
        self.cells.drain(row * w..(row + 1) * w);
        self.basis.remove(row);
        self.row_origin.remove(row);
        self.m -= 1;
    }

    /// Basic variable values solved directly from the original rows with
    /// partial pivoting, free of the error accumulated over many pivots.
    /// `None` if the basis matrix is numerically singular.
    fn refined_basic_values(&self) -> Option<Vec<f64>> {
        let (m, w) = (self.m, self.width);
        if self.basis.iter().any(|&b| b >= self.first_artificial) {
            return None;
        }
        let mut a: Vec<Vec<f64>> = self
            .row_origin
            .iter()
            .map(|&o| {
                let row = &self.original[o * w..(o + 1) * w];
                let mut r: Vec<f64> = self.basis.iter().map(|&b| row[b]).collect();
                r.push(row[w - 1]);
                r
            })
            .collect();
        for col in 0..m {
            let pivot = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
            if a[pivot][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, pivot);
            for i in col + 1..m {
                let f = a[i][col] / a[col][col];
                if f != 0.0 {
                    for j in col..=m {
                        a[i][j] -= f * a[col][j];
                    }
                }
            }
        }
        let mut x = vec![0.0; m];
        for i in (0..m).rev() {
            let s: f64 = (i + 1..m).map(|j| a[i][j] * x[j]).sum();
            x[i] = (a[i][m] - s) / a[i][i];
        }
        // Keep the tableau values if refinement drifted from them: that only
        // happens when the basis is ill-conditioned.
        let drift = (0..m).map(|i| (x[i] - self.rhs(i)).abs()).fold(0.0, f64::max);
        (drift < 1e-6).then_some(x)
    }
}
