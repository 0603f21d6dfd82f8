//! Local differential privacy mechanisms expressed as transformation matrices.
//!
//! A mechanism over an alphabet of `k` symbols is a row-stochastic `k x k`
//! matrix where entry `(i, j)` is the probability of reporting `j` when the
//! true value is `i`. Randomized response, thresholded Laplace, the identity
//! (non-private) mechanism and LP-derived game mechanisms all share this form.

use std::fmt;
use std::io::Write;

use rand::Rng;
use thiserror::Error;

const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LdpError {
    #[error("epsilon must be non-negative, got {0}")]
    NegativeEpsilon(f64),
    #[error("alphabet size must be at least 2, got {0}")]
    AlphabetTooSmall(usize),
    #[error("mechanism is only defined for a binary alphabet, got k = {0}")]
    UnsupportedAlphabet(usize),
    #[error("value {value} at position {index} is outside the alphabet of size {k}")]
    OutOfAlphabet { index: usize, value: usize, k: usize },
    #[error("matrix has {got} entries, expected {k}x{k}")]
    Shape { k: usize, got: usize },
    #[error("entry ({row}, {col}) = {value} is not a probability")]
    BadEntry { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 1")]
    RowSum { row: usize, sum: f64 },
    #[error("malformed matrix csv: {0}")]
    Parse(String),
}

/// Row-stochastic privacy mechanism `f(v'|v)`.
#[derive(Clone, PartialEq)]
pub struct TransformationMatrix {
    k: usize,
    p: Vec<f64>,
}

impl TransformationMatrix {
    /// Builds a matrix from row-major entries, validating stochasticity.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, LdpError> {
        let k = rows.len();
        if k < 2 {
            return Err(LdpError::AlphabetTooSmall(k));
        }
        let mut p = Vec::with_capacity(k * k);
        for row in &rows {
            if row.len() != k {
                return Err(LdpError::Shape {
                    k,
                    got: rows.iter().map(Vec::len).sum(),
                });
            }
            p.extend_from_slice(row);
        }
        Self::new(k, p)
    }

    pub fn new(k: usize, p: Vec<f64>) -> Result<Self, LdpError> {
        if k < 2 {
            return Err(LdpError::AlphabetTooSmall(k));
        }
        if p.len() != k * k {
            return Err(LdpError::Shape { k, got: p.len() });
        }
        for row in 0..k {
            let mut sum = 0.0;
            for col in 0..k {
                let value = p[row * k + col];
                if !(0.0..=1.0).contains(&value) {
                    return Err(LdpError::BadEntry { row, col, value });
                }
                sum += value;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(LdpError::RowSum { row, sum });
            }
        }
        Ok(Self { k, p })
    }

    pub fn identity(k: usize) -> Result<Self, LdpError> {
        if k < 2 {
            return Err(LdpError::AlphabetTooSmall(k));
        }
        let mut p = vec![0.0; k * k];
        for i in 0..k {
            p[i * k + i] = 1.0;
        }
        Ok(Self { k, p })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Probability of reporting `reported` given true value `truth`.
    pub fn get(&self, truth: usize, reported: usize) -> f64 {
        self.p[truth * self.k + reported]
    }

    pub fn row(&self, truth: usize) -> &[f64] {
        &self.p[truth * self.k..(truth + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.p.chunks(self.k)
    }

    /// Writes `k` lines of `k` comma separated probabilities.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is ascii")
    }

    pub fn parse_csv(text: &str) -> Result<Self, LdpError> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                line.split(',')
                    .map(|cell| {
                        cell.trim()
                            .parse::<f64>()
                            .map_err(|e| LdpError::Parse(format!("{cell:?}: {e}")))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_rows(rows)
    }
}

impl fmt::Debug for TransformationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.rows()).finish()
    }
}

fn check_epsilon(epsilon: f64) -> Result<(), LdpError> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(LdpError::NegativeEpsilon(epsilon));
    }
    Ok(())
}

/// k-ary randomized response: keeps the true value with probability
/// `e^eps / (e^eps + k - 1)` and reports each other symbol with `1 / (e^eps + k - 1)`.
///
/// `epsilon = +inf` yields the identity mechanism.
pub fn rr_matrix(epsilon: f64, k: usize) -> Result<TransformationMatrix, LdpError> {
    check_epsilon(epsilon)?;
    if k < 2 {
        return Err(LdpError::AlphabetTooSmall(k));
    }
    if epsilon.is_infinite() {
        return TransformationMatrix::identity(k);
    }
    // Written in terms of e^-eps so large epsilon does not overflow.
    let t = (-epsilon).exp();
    let denom = 1.0 + (k as f64 - 1.0) * t;
    let diag = 1.0 / denom;
    let off = t / denom;
    let mut p = vec![off; k * k];
    for i in 0..k {
        p[i * k + i] = diag;
    }
    Ok(TransformationMatrix { k, p })
}

/// Binary channel induced by adding Laplace noise of scale `1/eps` and
/// thresholding at 0.5: flips with probability `e^(-eps/2) / 2`.
pub fn laplace_matrix(epsilon: f64, k: usize) -> Result<TransformationMatrix, LdpError> {
    check_epsilon(epsilon)?;
    if k != 2 {
        return Err(LdpError::UnsupportedAlphabet(k));
    }
    let flip = 0.5 * (-epsilon / 2.0).exp();
    Ok(TransformationMatrix {
        k,
        p: vec![1.0 - flip, flip, flip, 1.0 - flip],
    })
}

/// Tightest epsilon for which the matrix is epsilon-LDP.
///
/// Columns that are entirely zero never occur as outputs and are skipped.
pub fn ldp_epsilon(m: &TransformationMatrix) -> f64 {
    let k = m.k;
    let mut worst: f64 = 0.0;
    for col in 0..k {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for row in 0..k {
            let v = m.get(row, col);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi == 0.0 {
            continue;
        }
        if lo == 0.0 {
            return f64::INFINITY;
        }
        worst = worst.max((hi / lo).ln());
    }
    worst
}

/// Perturbs every value independently using its row of the matrix.
pub fn apply_mechanism<R: Rng + ?Sized>(
    m: &TransformationMatrix,
    values: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>, LdpError> {
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, &v)| v >= m.k) {
        return Err(LdpError::OutOfAlphabet { index, value, k: m.k });
    }
    Ok(values.iter().map(|&v| sample_row(m.row(v), rng)).collect())
}

/// Draws a single report for `value`.
pub fn perturb<R: Rng + ?Sized>(
    m: &TransformationMatrix,
    value: usize,
    rng: &mut R,
) -> Result<usize, LdpError> {
    if value >= m.k {
        return Err(LdpError::OutOfAlphabet { index: 0, value, k: m.k });
    }
    Ok(sample_row(m.row(value), rng))
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // Rounding can leave the cumulative sum a hair under 1.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}
