//! Server-side derived features, flag binarization, and the aligned
//! two-view training frame.

use std::collections::HashMap;

use chrono::Timelike;
use thiserror::Error;

use crate::datamodel::{BankId, TransactionRecord};

pub const SRV_FEATURE_NAMES: [&str; 7] = [
    "settlement_amount",
    "instructed_amount",
    "hour",
    "sender_hour_freq",
    "sender_currency_freq",
    "sender_currency_amount_avg",
    "sender_receiver_freq",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("no transactions to featurize")]
    Empty,
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerFeatureRow {
    pub settlement_amount: f64,
    pub instructed_amount: f64,
    pub hour: u32,
    pub sender_hour_freq: u64,
    pub sender_currency_freq: u64,
    pub sender_currency_amount_avg: f64,
    pub sender_receiver_freq: u64,
    pub label: bool,
    pub sample_id: Option<String>,
}

impl ServerFeatureRow {
    pub fn values(&self) -> [f64; 7] {
        [
            self.settlement_amount,
            self.instructed_amount,
            f64::from(self.hour),
            self.sender_hour_freq as f64,
            self.sender_currency_freq as f64,
            self.sender_currency_amount_avg,
            self.sender_receiver_freq as f64,
        ]
    }
}

/// 1 iff the account carries any issue code.
pub fn binarize_flag(flag: u8) -> u8 {
    u8::from(flag != 0)
}

/// Frequency tables fitted on one split and reused for others.
#[derive(Debug, Clone, Default)]
pub struct FeatureEncoder {
    sender_hour: HashMap<(BankId, u32), u64>,
    // (count, sum of settlement cents)
    sender_currency: HashMap<(BankId, String), (u64, u64)>,
    sender_receiver: HashMap<(BankId, BankId), u64>,
}

impl FeatureEncoder {
    pub fn fit(rows: &[TransactionRecord]) -> Self {
        let mut enc = Self::default();
        for t in rows {
            *enc.sender_hour.entry((t.sender.clone(), t.timestamp.hour())).or_default() += 1;
            let e = enc
                .sender_currency
                .entry((t.sender.clone(), t.settlement_currency.clone()))
                .or_default();
            e.0 += 1;
            e.1 += t.settlement_amount.0;
            *enc.sender_receiver.entry((t.sender.clone(), t.receiver.clone())).or_default() += 1;
        }
        enc
    }

    /// Featurizes rows; `fitted` says whether they were part of the fit
    /// (already counted) or are new rows that count themselves on top.
    fn encode(&self, t: &TransactionRecord, fitted: bool) -> ServerFeatureRow {
        let own = u64::from(!fitted);
        let hour = t.timestamp.hour();
        let sh = self.sender_hour.get(&(t.sender.clone(), hour)).copied().unwrap_or(0);
        let (sc, sum) = self
            .sender_currency
            .get(&(t.sender.clone(), t.settlement_currency.clone()))
            .copied()
            .unwrap_or((0, 0));
        let sr = self
            .sender_receiver
            .get(&(t.sender.clone(), t.receiver.clone()))
            .copied()
            .unwrap_or(0);
        let count = sc + own;
        let total = sum + own * t.settlement_amount.0;
        ServerFeatureRow {
            settlement_amount: t.settlement_amount.as_f64(),
            instructed_amount: t.instructed_amount.as_f64(),
            hour,
            sender_hour_freq: sh + own,
            sender_currency_freq: count,
            sender_currency_amount_avg: total as f64 / count as f64 / 100.0,
            sender_receiver_freq: sr + own,
            label: t.label,
            sample_id: None,
        }
    }

    pub fn transform_fitted(&self, rows: &[TransactionRecord]) -> Vec<ServerFeatureRow> {
        rows.iter().map(|t| self.encode(t, true)).collect()
    }

    pub fn transform_unseen(&self, rows: &[TransactionRecord]) -> Vec<ServerFeatureRow> {
        rows.iter().map(|t| self.encode(t, false)).collect()
    }
}

pub fn derive_server_features(rows: &[TransactionRecord]) -> Result<Vec<ServerFeatureRow>, FeatureError> {
    if rows.is_empty() {
        return Err(FeatureError::Empty);
    }
    Ok(FeatureEncoder::fit(rows).transform_fitted(rows))
}

/// Dense row-major matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub names: Vec<String>,
    n_rows: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(names: Vec<String>, n_rows: usize, data: Vec<f64>) -> Result<Self, FeatureError> {
        if data.len() != n_rows * names.len() {
            return Err(FeatureError::Shape(format!(
                "{} values for {n_rows} rows x {} columns",
                data.len(),
                names.len()
            )));
        }
        Ok(Self { names, n_rows, data })
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self, FeatureError> {
        if let Some(bad) = rows.iter().position(|r| r.len() != names.len()) {
            return Err(FeatureError::Shape(format!(
                "row {bad} has {} values, expected {}",
                rows[bad].len(),
                names.len()
            )));
        }
        Ok(Self { n_rows: rows.len(), data: rows.concat(), names })
    }

    /// A matrix with `n_rows` rows and no columns.
    pub fn empty(n_rows: usize) -> Self {
        Self { names: Vec::new(), n_rows, data: Vec::new() }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.n_cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.get(r, col)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let data = idx.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Self { names: self.names.clone(), n_rows: idx.len(), data }
    }

    pub fn hconcat(&self, other: &Matrix) -> Result<Self, FeatureError> {
        if self.n_rows != other.n_rows {
            return Err(FeatureError::Shape(format!(
                "cannot join {} rows with {} rows",
                self.n_rows, other.n_rows
            )));
        }
        let mut names = self.names.clone();
        names.extend(other.names.iter().cloned());
        let data = (0..self.n_rows)
            .flat_map(|r| self.row(r).iter().chain(other.row(r)).copied())
            .collect();
        Ok(Self { names, n_rows: self.n_rows, data })
    }
}

/// Row-aligned training data split by owner: server features with labels,
/// and the flag collector's columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub srv: Matrix,
    pub fc: Matrix,
    pub labels: Vec<bool>,
}

impl FeatureFrame {
    pub fn new(srv: Matrix, fc: Matrix, labels: Vec<bool>) -> Result<Self, FeatureError> {
        if srv.n_rows() != labels.len() || fc.n_rows() != labels.len() {
            return Err(FeatureError::Shape(format!(
                "srv {} rows, fc {} rows, {} labels",
                srv.n_rows(),
                fc.n_rows(),
                labels.len()
            )));
        }
        Ok(Self { srv, fc, labels })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    /// Server columns followed by flag-collector columns.
    pub fn concatenated(&self) -> Matrix {
        self.srv.hconcat(&self.fc).expect("frame rows are aligned")
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            srv: self.srv.select_rows(idx),
            fc: self.fc.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The same rows with the flag-collector columns dropped.
    pub fn srv_only(&self) -> Self {
        Self {
            srv: self.srv.clone(),
            fc: Matrix::empty(self.n_rows()),
            labels: self.labels.clone(),
        }
    }
}

pub fn srv_matrix(rows: &[ServerFeatureRow]) -> Matrix {
    let names = SRV_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let data = rows.iter().flat_map(|r| r.values()).collect();
    Matrix::new(names, rows.len(), data).expect("fixed width")
}
