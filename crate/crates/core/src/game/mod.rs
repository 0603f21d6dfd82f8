//! Stackelberg privacy game between a flag-holding client and an estimating
//! adversary.
//!
//! The client commits to a mechanism `f(v'|v)`; the adversary observes `v'`,
//! knows `f` and the prior `pi`, and picks the estimate minimising its
//! expected error under the privacy metric. The client's optimal mechanism
//! maximises that minimised error subject to per-entry caps (or an expected
//! accuracy-loss budget) and epsilon-LDP, which is a linear program once the
//! inner minimum is replaced by one auxiliary variable per reported value.

pub mod lp;

use thiserror::Error;

use crate::ldp::{LdpError, TransformationMatrix};
use lp::{Constraint, LinearProgram, LpError, Relation};

const PROB_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GameError {
    #[error("prior has {got} entries, expected {k}")]
    PriorShape { k: usize, got: usize },
    #[error("prior must be a probability vector (sum {sum})")]
    PriorNotNormalised { sum: f64 },
    #[error("{what} matrix is {got}x{got}, expected {k}x{k}")]
    MatrixShape { what: &'static str, k: usize, got: usize },
    #[error("{what} entry ({row}, {col}) = {value} is invalid")]
    BadEntry { what: &'static str, row: usize, col: usize, value: f64 },
    #[error("hamming metric must have a zero diagonal")]
    MetricDiagonal,
    #[error("epsilon must be non-negative, got {0}")]
    NegativeEpsilon(f64),
    #[error("observation {0} has zero probability under the prior and mechanism")]
    ZeroMassObservation(usize),
    #[error("caps for true value {row} sum to {sum} < 1, no distribution fits under them")]
    InfeasibleCaps { row: usize, sum: f64 },
    #[error("accuracy loss budget must be non-negative, got {0}")]
    NegativeBudget(f64),
    #[error("game program is infeasible: {0}")]
    Infeasible(LpError),
    #[error(transparent)]
    Lp(LpError),
    #[error(transparent)]
    Ldp(#[from] LdpError),
}

/// Dense square matrix indexed `(truth, other)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    k: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn filled(k: usize, value: f64) -> Self {
        Self { k, data: vec![value; k * k] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, GameError> {
        let k = rows.len();
        let mut data = Vec::with_capacity(k * k);
        for row in rows {
            if row.len() != k {
                return Err(GameError::MatrixShape { what: "square", k, got: row.len() });
            }
            data.extend(row);
        }
        Ok(Self { k, data })
    }

    pub fn hamming(k: usize) -> Self {
        let mut m = Self::filled(k, 1.0);
        for i in 0..k {
            m.set(i, i, 0.0);
        }
        m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.k + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.k + col] = value;
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            k: self.k,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }
}

/// Adversary's loss `delta(estimate, truth)`.
#[derive(Debug, Clone, PartialEq)]
pub enum PrivacyMetric {
    Hamming(usize),
    /// Indexed `(estimate, truth)`.
    Custom(SquareMatrix),
}

impl PrivacyMetric {
    pub fn k(&self) -> usize {
        match self {
            PrivacyMetric::Hamming(k) => *k,
            PrivacyMetric::Custom(m) => m.k(),
        }
    }

    pub fn distance(&self, estimate: usize, truth: usize) -> f64 {
        match self {
            PrivacyMetric::Hamming(_) => f64::from(u8::from(estimate != truth)),
            PrivacyMetric::Custom(m) => m.get(estimate, truth),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let k = self.k();
        let mut m = SquareMatrix::filled(k, 0.0);
        for a in 0..k {
            for b in 0..k {
                m.set(a, b, self.distance(a, b) * c);
            }
        }
        PrivacyMetric::Custom(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub prior: Vec<f64>,
    pub metric: PrivacyMetric,
    /// Upper bounds on `f(v'|v)`, indexed `(v, v')`.
    pub caps: SquareMatrix,
    /// `f64::INFINITY` disables the differential-privacy constraints.
    pub epsilon: f64,
}

impl GameSpec {
    /// Hamming metric, every cap at 1.
    pub fn uncapped(prior: Vec<f64>, epsilon: f64) -> Self {
        let k = prior.len();
        Self {
            prior,
            metric: PrivacyMetric::Hamming(k),
            caps: SquareMatrix::filled(k, 1.0),
            epsilon,
        }
    }

    pub fn k(&self) -> usize {
        self.prior.len()
    }

    pub fn validate(&self) -> Result<(), GameError> {
        let k = self.k();
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(GameError::NegativeEpsilon(self.epsilon));
        }
        validate_prior(&self.prior, k)?;
        if self.metric.k() != k {
            return Err(GameError::MatrixShape { what: "metric", k, got: self.metric.k() });
        }
        if let PrivacyMetric::Custom(m) = &self.metric {
            check_entries("metric", m, |v| v >= 0.0 && v.is_finite())?;
        }
        if let PrivacyMetric::Hamming(_) = self.metric {
            if (0..k).any(|i| self.metric.distance(i, i) != 0.0) {
                return Err(GameError::MetricDiagonal);
            }
        }
        if self.caps.k() != k {
            return Err(GameError::MatrixShape { what: "caps", k, got: self.caps.k() });
        }
        check_entries("caps", &self.caps, |v| (0.0..=1.0).contains(&v))
    }
}

fn validate_prior(prior: &[f64], k: usize) -> Result<(), GameError> {
    if prior.len() != k {
        return Err(GameError::PriorShape { k, got: prior.len() });
    }
    if let Some((i, &p)) = prior.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(GameError::BadEntry { what: "prior", row: 0, col: i, value: p });
    }
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > PROB_TOLERANCE {
        return Err(GameError::PriorNotNormalised { sum });
    }
    Ok(())
}

fn check_entries(
    what: &'static str,
    m: &SquareMatrix,
    ok: impl Fn(f64) -> bool,
) -> Result<(), GameError> {
    for row in 0..m.k() {
        for col in 0..m.k() {
            let value = m.get(row, col);
            if !ok(value) {
                return Err(GameError::BadEntry { what, row, col, value });
            }
        }
    }
    Ok(())
}

/// Caps that allow each off-diagonal entry up to the randomized-response
/// flip probability at `epsilon`; diagonal caps are 1.
pub fn rr_caps(epsilon: f64, k: usize) -> Result<SquareMatrix, GameError> {
    let rr = crate::ldp::rr_matrix(epsilon, k)?;
    let mut caps = SquareMatrix::filled(k, 1.0);
    for v in 0..k {
        for r in 0..k {
            if v != r {
                caps.set(v, r, rr.get(v, r));
            }
        }
    }
    Ok(caps)
}

/// Expected adversary loss of guessing `estimate` after seeing `reported`,
/// weighted by the joint probability (unnormalised posterior).
fn joint_loss(
    m: &TransformationMatrix,
    prior: &[f64],
    metric: &PrivacyMetric,
    reported: usize,
    estimate: usize,
) -> f64 {
    (0..m.k())
        .map(|v| prior[v] * m.get(v, reported) * metric.distance(estimate, v))
        .sum()
}

/// Adversary's estimate after observing `reported`; smallest index wins ties.
pub fn adversary_best_response(
    m: &TransformationMatrix,
    prior: &[f64],
    metric: &PrivacyMetric,
    reported: usize,
) -> Result<usize, GameError> {
    let k = m.k();
    validate_prior(prior, k)?;
    let mass: f64 = (0..k).map(|v| prior[v] * m.get(v, reported)).sum();
    if mass <= 0.0 {
        return Err(GameError::ZeroMassObservation(reported));
    }
    let mut best = 0;
    let mut best_loss = f64::INFINITY;
    for estimate in 0..k {
        let loss = joint_loss(m, prior, metric, reported, estimate);
        if loss < best_loss {
            best = estimate;
            best_loss = loss;
        }
    }
    Ok(best)
}

/// Per-observation terms `x_{v'} = min_vhat sum_v pi(v) f(v'|v) delta(vhat, v)`.
pub fn privacy_terms(m: &TransformationMatrix, prior: &[f64], metric: &PrivacyMetric) -> Vec<f64> {
    (0..m.k())
        .map(|reported| {
            (0..m.k())
                .map(|estimate| joint_loss(m, prior, metric, reported, estimate))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Unconditional expected inference privacy of the client.
pub fn expected_privacy(m: &TransformationMatrix, prior: &[f64], metric: &PrivacyMetric) -> f64 {
    privacy_terms(m, prior, metric).iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintFamily {
    /// `x_{v'}` bounded by the adversary's loss for each estimate.
    InferenceBound,
    Cap,
    RowSum,
    DifferentialPrivacy,
    AccuracyLoss,
}

/// The client's program plus the family each row belongs to.
#[derive(Debug, Clone)]
pub struct GameLp {
    pub k: usize,
    pub program: LinearProgram,
    pub families: Vec<ConstraintFamily>,
}

impl GameLp {
    pub fn mechanism_var(&self, truth: usize, reported: usize) -> usize {
        truth * self.k + reported
    }

    pub fn aux_var(&self, reported: usize) -> usize {
        self.k * self.k + reported
    }

    pub fn count(&self, family: ConstraintFamily) -> usize {
        self.families.iter().filter(|&&f| f == family).count()
    }
}

fn lp_skeleton(spec: &GameSpec) -> GameLp {
    let k = spec.k();
    let mut names = Vec::with_capacity(k * k + k);
    for v in 0..k {
        for r in 0..k {
            names.push(format!("f({r}|{v})"));
        }
    }
    for r in 0..k {
        names.push(format!("x[{r}]"));
    }
    let mut program = LinearProgram::new(names);
    for r in 0..k {
        program.objective[k * k + r] = 1.0;
    }
    let mut out = GameLp { k, program, families: Vec::new() };

    for reported in 0..k {
        for estimate in 0..k {
            let mut terms = vec![(out.aux_var(reported), 1.0)];
            for v in 0..k {
                let w = spec.prior[v] * spec.metric.distance(estimate, v);
                if w != 0.0 {
                    terms.push((out.mechanism_var(v, reported), -w));
                }
            }
            out.program.push(Constraint::new(terms, Relation::Le, 0.0));
            out.families.push(ConstraintFamily::InferenceBound);
        }
    }
    for v in 0..k {
        let terms = (0..k).map(|r| (out.mechanism_var(v, r), 1.0)).collect();
        out.program.push(Constraint::new(terms, Relation::Eq, 1.0));
        out.families.push(ConstraintFamily::RowSum);
    }
    let bound = spec.epsilon.exp();
    if bound.is_finite() {
        for reported in 0..k {
            for a in 0..k {
                for b in 0..k {
                    if a == b {
                        continue;
                    }
                    let terms = vec![
                        (out.mechanism_var(a, reported), 1.0),
                        (out.mechanism_var(b, reported), -bound),
                    ];
                    out.program.push(Constraint::new(terms, Relation::Le, 0.0));
                    out.families.push(ConstraintFamily::DifferentialPrivacy);
                }
            }
        }
    }
    out
}

/// Builds the capped program. Non-negativity of `f` is implicit in the solver.
pub fn build_lp(spec: &GameSpec) -> Result<GameLp, GameError> {
    spec.validate()?;
    let mut out = lp_skeleton(spec);
    for v in 0..spec.k() {
        for r in 0..spec.k() {
            let var = out.mechanism_var(v, r);
            out.program
                .push(Constraint::new(vec![(var, 1.0)], Relation::Le, spec.caps.get(v, r)));
            out.families.push(ConstraintFamily::Cap);
        }
    }
    Ok(out)
}

/// Replaces the per-entry caps with an expected accuracy-loss budget
/// `sum_v pi(v) sum_v' f(v'|v) AL(v, v') <= budget`; `loss` is indexed
/// `(truth, reported)`.
pub fn build_lp_accuracy_variant(
    spec: &GameSpec,
    loss: &SquareMatrix,
    budget: f64,
) -> Result<GameLp, GameError> {
    if budget.is_nan() || budget < 0.0 {
        return Err(GameError::NegativeBudget(budget));
    }
    spec.validate()?;
    let k = spec.k();
    if loss.k() != k {
        return Err(GameError::MatrixShape { what: "accuracy loss", k, got: loss.k() });
    }
    check_entries("accuracy loss", loss, |v| v >= 0.0 && v.is_finite())?;
    let mut out = lp_skeleton(spec);
    let mut terms = Vec::new();
    for v in 0..k {
        for r in 0..k {
            let w = spec.prior[v] * loss.get(v, r);
            if w != 0.0 {
                terms.push((out.mechanism_var(v, r), w));
            }
        }
    }
    out.program.push(Constraint::new(terms, Relation::Le, budget));
    out.families.push(ConstraintFamily::AccuracyLoss);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSolution {
    pub mechanism: TransformationMatrix,
    pub x: Vec<f64>,
    pub expected_privacy: f64,
    /// Objective value reported by the solver before cleanup.
    pub lp_objective: f64,
}

/// Solves a game program and cleans the mechanism up into a valid matrix.
pub fn solve_game_lp(game: &GameLp, spec: &GameSpec) -> Result<GameSolution, GameError> {
    let k = game.k;
    let solution = game.program.solve().map_err(|e| match e {
        LpError::Infeasible(_) => GameError::Infeasible(e),
        other => GameError::Lp(other),
    })?;
    let mut rows = Vec::with_capacity(k);
    for v in 0..k {
        let mut row: Vec<f64> = (0..k)
            .map(|r| solution.x[game.mechanism_var(v, r)].clamp(0.0, 1.0))
            .collect();
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= sum);
        rows.push(row);
    }
    let mechanism = TransformationMatrix::from_rows(rows)?;
    let x = privacy_terms(&mechanism, &spec.prior, &spec.metric);
    let expected_privacy = x.iter().sum();
    Ok(GameSolution {
        mechanism,
        x,
        expected_privacy,
        lp_objective: solution.objective,
    })
}

/// Finds the mechanism maximising expected inference privacy under the
/// spec's caps and epsilon.
pub fn solve_optimal_mechanism(spec: &GameSpec) -> Result<GameSolution, GameError> {
    spec.validate()?;
    for v in 0..spec.k() {
        let sum: f64 = (0..spec.k()).map(|r| spec.caps.get(v, r)).sum();
        if sum < 1.0 - PROB_TOLERANCE {
            return Err(GameError::InfeasibleCaps { row: v, sum });
        }
    }
    let game = build_lp(spec)?;
    solve_game_lp(&game, spec)
}

/// Optimal mechanism under an expected accuracy-loss budget instead of caps.
pub fn solve_accuracy_variant(
    spec: &GameSpec,
    loss: &SquareMatrix,
    budget: f64,
) -> Result<GameSolution, GameError> {
    let game = build_lp_accuracy_variant(spec, loss, budget)?;
    solve_game_lp(&game, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldp::{ldp_epsilon, rr_matrix};

    const LN3: f64 = 1.098_612_288_668_109_8;

    fn constant(k: usize, column: &[f64]) -> TransformationMatrix {
        TransformationMatrix::from_rows(vec![column.to_vec(); k]).unwrap()
    }

    #[test]
    fn best_response_cases() {
        let hamming = PrivacyMetric::Hamming(2);
        let id = TransformationMatrix::identity(2).unwrap();
        for r in 0..2 {
            assert_eq!(adversary_best_response(&id, &[0.3, 0.7], &hamming, r).unwrap(), r);
        }
        let flat = constant(2, &[0.4, 0.6]);
        for r in 0..2 {
            assert_eq!(adversary_best_response(&flat, &[0.7, 0.3], &hamming, r).unwrap(), 0);
        }
        let rr = rr_matrix(LN3, 2).unwrap();
        assert_eq!(adversary_best_response(&rr, &[0.5, 0.5], &hamming, 1).unwrap(), 1);
    }

    #[test]
    fn best_response_ties_take_smallest_index() {
        let flat = constant(2, &[0.5, 0.5]);
        let metric = PrivacyMetric::Hamming(2);
        assert_eq!(adversary_best_response(&flat, &[0.5, 0.5], &metric, 1).unwrap(), 0);
    }

    #[test]
    fn best_response_zero_mass() {
        let id = TransformationMatrix::identity(2).unwrap();
        let err = adversary_best_response(&id, &[1.0, 0.0], &PrivacyMetric::Hamming(2), 1);
        assert_eq!(err, Err(GameError::ZeroMassObservation(1)));
    }

    #[test]
    fn expected_privacy_cases() {
        let h = PrivacyMetric::Hamming(2);
        let id = TransformationMatrix::identity(2).unwrap();
        assert_eq!(expected_privacy(&id, &[0.5, 0.5], &h), 0.0);
        let half = rr_matrix(0.0, 2).unwrap();
        assert!((expected_privacy(&half, &[0.5, 0.5], &h) - 0.5).abs() < 1e-15);
        // x_0 = min(0.5*0.25, 0.5*0.75), x_1 likewise: 0.125 + 0.125.
        let rr = rr_matrix(LN3, 2).unwrap();
        assert!((expected_privacy(&rr, &[0.5, 0.5], &h) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn lp_family_counts_binary() {
        let spec = GameSpec::uncapped(vec![0.5, 0.5], 1.0);
        let game = build_lp(&spec).unwrap();
        assert_eq!(game.program.n_vars(), 6);
        assert_eq!(game.count(ConstraintFamily::InferenceBound), 4);
        assert_eq!(game.count(ConstraintFamily::Cap), 4);
        assert_eq!(game.count(ConstraintFamily::RowSum), 2);
        assert_eq!(game.count(ConstraintFamily::DifferentialPrivacy), 4);
    }

    #[test]
    fn lp_family_counts_general_k() {
        for k in 2..=5 {
            let spec = GameSpec::uncapped(vec![1.0 / k as f64; k], 2.0);
            let game = build_lp(&spec).unwrap();
            assert_eq!(game.program.n_vars(), k * k + k);
            assert_eq!(game.count(ConstraintFamily::InferenceBound), k * k);
            assert_eq!(game.count(ConstraintFamily::Cap), k * k);
            assert_eq!(game.count(ConstraintFamily::RowSum), k);
            assert_eq!(game.count(ConstraintFamily::DifferentialPrivacy), k * k * (k - 1));
        }
    }

    #[test]
    fn infinite_epsilon_drops_dp_family() {
        let spec = GameSpec::uncapped(vec![0.5, 0.5], f64::INFINITY);
        let game = build_lp(&spec).unwrap();
        assert_eq!(game.count(ConstraintFamily::DifferentialPrivacy), 0);
        assert_eq!(game.count(ConstraintFamily::Cap), 4);
    }

    #[test]
    fn zero_epsilon_forces_prior_guessing() {
        let spec = GameSpec::uncapped(vec![0.5, 0.5], 0.0);
        let sol = solve_optimal_mechanism(&spec).unwrap();
        assert!((sol.expected_privacy - 0.5).abs() < 1e-9);
        assert!(ldp_epsilon(&sol.mechanism) < 1e-9);
    }

    #[test]
    fn uncapped_optimum_is_one_minus_max_prior() {
        for eps in [0.0, 0.5, 2.0, f64::INFINITY] {
            let sol = solve_optimal_mechanism(&GameSpec::uncapped(vec![0.7, 0.3], eps)).unwrap();
            assert!((sol.expected_privacy - 0.3).abs() < 1e-9, "eps {eps}");
        }
    }

    #[test]
    fn symmetric_flip_caps_at_ln3() {
        let mut spec = GameSpec::uncapped(vec![0.5, 0.5], LN3);
        spec.caps.set(0, 1, 0.25);
        spec.caps.set(1, 0, 0.25);
        let sol = solve_optimal_mechanism(&spec).unwrap();
        assert!((sol.expected_privacy - 0.25).abs() < 1e-9);
        assert!((sol.mechanism.get(0, 1) - 0.25).abs() < 1e-9);
        assert!((sol.mechanism.get(1, 0) - 0.25).abs() < 1e-9);
        assert!((sol.expected_privacy - sol.x.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn caps_below_one_are_infeasible() {
        let mut spec = GameSpec::uncapped(vec![0.5, 0.5], 1.0);
        spec.caps.set(1, 0, 0.3);
        spec.caps.set(1, 1, 0.3);
        assert!(matches!(
            solve_optimal_mechanism(&spec),
            Err(GameError::InfeasibleCaps { row: 1, .. })
        ));
    }

    #[test]
    fn accuracy_variant_cases() {
        let spec = GameSpec::uncapped(vec![0.5, 0.5], f64::INFINITY);
        let zero = SquareMatrix::filled(2, 0.0);
        let free = solve_accuracy_variant(&spec, &zero, 0.0).unwrap();
        let capped = solve_optimal_mechanism(&spec).unwrap();
        assert!((free.expected_privacy - capped.expected_privacy).abs() < 1e-9);

        let hamming = SquareMatrix::hamming(2);
        let exact = solve_accuracy_variant(&spec, &hamming, 0.0).unwrap();
        assert!(exact.expected_privacy.abs() < 1e-9);
        assert_eq!(exact.mechanism, TransformationMatrix::identity(2).unwrap());

        let quarter = solve_accuracy_variant(&spec, &hamming, 0.25).unwrap();
        assert!((quarter.expected_privacy - 0.25).abs() < 1e-9);

        assert_eq!(
            build_lp_accuracy_variant(&spec, &hamming, -0.1).unwrap_err(),
            GameError::NegativeBudget(-0.1)
        );
    }

    #[test]
    fn spec_validation() {
        let mut spec = GameSpec::uncapped(vec![0.6, 0.6], 1.0);
        assert!(matches!(spec.validate(), Err(GameError::PriorNotNormalised { .. })));
        spec.prior = vec![0.5, 0.5];
        spec.epsilon = -1.0;
        assert_eq!(spec.validate(), Err(GameError::NegativeEpsilon(-1.0)));
        spec.epsilon = 1.0;
        spec.caps.set(0, 0, 1.5);
        assert!(matches!(spec.validate(), Err(GameError::BadEntry { what: "caps", .. })));
    }

    #[test]
    fn degenerate_prior_is_allowed() {
        let sol = solve_optimal_mechanism(&GameSpec::uncapped(vec![1.0, 0.0], 1.0)).unwrap();
        assert!(sol.expected_privacy.abs() < 1e-9);
    }

    #[test]
    fn rr_caps_layout() {
        let caps = rr_caps(LN3, 2).unwrap();
        assert_eq!(caps.get(0, 0), 1.0);
        assert!((caps.get(0, 1) - 0.25).abs() < 1e-12);
    }
}
