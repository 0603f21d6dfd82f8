//! Histogram gradient boosting for binary labels, trained either on one
//! party's full matrix or vertically between a label holder (`Srv`) and a
//! feature-only party (`Fc`) that sees gradients only as Paillier
//! ciphertexts.
//!
//! Both trainers quantize per-row gradients to [`FixedPoint`] before any
//! histogram is built, so bin sums are exact integers on either path and the
//! two produce the same trees.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureFrame, Matrix};
use crate::he::{Ciphertext, FixedPoint, HeError, PaillierKeypair, PublicKey};

const MODEL_MAGIC: &str = "starlit-model 1";

#[derive(Debug, Error, PartialEq)]
pub enum BoostError {
    #[error("training data is empty")]
    Empty,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("srv view has {srv} rows but fc view has {fc}")]
    Misaligned { srv: usize, fc: usize },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("homomorphic encryption: {0}")]
    He(#[from] HeError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("model has fc-owned splits but no fc row was given")]
    MissingFcRow,
    #[error("row has {found} features, expected {expected}")]
    RowWidth { expected: usize, found: usize },
    #[error("model line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub lambda_l2: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub direct_sampling_rate: f64,
    /// (top_rate, other_rate)
    pub goss: Option<(f64, f64)>,
    pub n_bins: usize,
    pub seed: u64,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            n_trees: 10,
            max_depth: 3,
            lambda_l2: 0.1,
            gamma: 0.0,
            learning_rate: 0.3,
            direct_sampling_rate: 1.0,
            goss: None,
            n_bins: 32,
            seed: 0,
        }
    }
}

impl BoostParams {
    pub fn validate(&self) -> Result<(), BoostError> {
        let err = |m: &str| Err(BoostError::Params(m.to_string()));
        if self.max_depth == 0 {
            return err("max_depth must be positive");
        }
        if !(self.lambda_l2 >= 0.0) || !(self.gamma >= 0.0) {
            return err("lambda_l2 and gamma must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return err("learning_rate must be in (0, 1]");
        }
        if !(self.direct_sampling_rate > 0.0 && self.direct_sampling_rate <= 1.0) {
            return err("direct_sampling_rate must be in (0, 1]");
        }
        if let Some((top, other)) = self.goss {
            if !(top > 0.0 && top <= 1.0) || !(0.0..=1.0).contains(&other) || top + other > 1.0 + 1e-12 {
                return err("goss rates must satisfy 0 < top, 0 <= other, top + other <= 1");
            }
            if top < 1.0 && other <= 0.0 {
                return err("goss other_rate must be positive when top_rate < 1");
            }
        }
        if self.n_bins < 2 || self.n_bins > usize::from(u16::MAX) {
            return err("n_bins must be in [2, 65535]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Party {
    Srv,
    Fc,
}

impl Party {
    fn tag(self) -> &'static str {
        match self {
            Party::Srv => "srv",
            Party::Fc => "fc",
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logistic loss gradient and hessian with respect to the margin.
pub fn logistic_grad_hess(labels: &[bool], scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(labels.len(), scores.len(), "labels and scores differ in length");
    labels
        .iter()
        .zip(scores)
        .map(|(&y, &s)| {
            let p = sigmoid(s);
            (p - f64::from(u8::from(y)), p * (1.0 - p))
        })
        .unzip()
}

pub fn logistic_loss(y: bool, score: f64) -> f64 {
    // log(1 + e^s) - y s, written to avoid overflow
    let softplus = if score > 0.0 {
        score + (-score).exp().ln_1p()
    } else {
        score.exp().ln_1p()
    };
    softplus - if y { score } else { 0.0 }
}

pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let term = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (term(gl, hl) + term(gr, hr) - term(gl + gr, hl + hr)) - gamma
}

pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    -g / (h + lambda)
}

/// Gradient-based one-side sampling over `g`.
///
/// Keeps the `⌈top·n⌉` largest |g| (ties by index) with weight 1 and a
/// uniform draw of `⌈other·n⌉` of the rest with weight `(1-top)/other`.
/// Returned indices are ascending.
pub fn goss_sample_with<R: Rng + ?Sized>(
    g: &[f64],
    top_rate: f64,
    other_rate: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<f64>) {
    let n = g.len();
    let n_top = ((top_rate * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
    let rest = &order[n_top..];
    let n_other = ((other_rate * n as f64).ceil() as usize).min(rest.len());
    let other_weight = if other_rate > 0.0 { (1.0 - top_rate) / other_rate } else { 0.0 };

    let mut picked: Vec<(usize, f64)> = order[..n_top].iter().map(|&i| (i, 1.0)).collect();
    picked.extend(
        index::sample(rng, rest.len(), n_other)
            .into_iter()
            .map(|j| (rest[j], other_weight)),
    );
    picked.sort_unstable_by_key(|&(i, _)| i);
    picked.into_iter().unzip()
}

pub fn goss_sample(g: &[f64], top_rate: f64, other_rate: f64, seed: u64) -> (Vec<usize>, Vec<f64>) {
    goss_sample_with(g, top_rate, other_rate, &mut ChaCha20Rng::seed_from_u64(seed))
}

/// Per-feature quantile cut points. A value's bin is the number of edges
/// strictly below it, so `bin <= t` is the same test as `x <= edges[t]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Binning {
    pub edges: Vec<Vec<f64>>,
}

impl Binning {
    pub fn fit(x: &Matrix, n_bins: usize) -> Self {
        let edges = (0..x.n_cols())
            .map(|c| {
                let mut col: Vec<f64> = x.column(c).into_iter().filter(|v| !v.is_nan()).collect();
                col.sort_by(f64::total_cmp);
                quantile_edges(&col, n_bins)
            })
            .collect();
        Self { edges }
    }

    pub fn n_features(&self) -> usize {
        self.edges.len()
    }

    pub fn n_bins(&self, feature: usize) -> usize {
        self.edges[feature].len() + 1
    }

    pub fn bin(&self, feature: usize, x: f64) -> u16 {
        self.edges[feature].partition_point(|&e| e < x) as u16
    }

    /// Column-major bin indices.
    pub fn apply(&self, x: &Matrix) -> Vec<Vec<u16>> {
        (0..self.n_features())
            .map(|c| (0..x.n_rows()).map(|r| self.bin(c, x.get(r, c))).collect())
            .collect()
    }
}

fn quantile_edges(sorted: &[f64], n_bins: usize) -> Vec<f64> {
    let Some(&max) = sorted.last() else {
        return Vec::new();
    };
    let mut edges: Vec<f64> = (1..n_bins)
        .map(|q| sorted[q * sorted.len() / n_bins])
        .filter(|&v| v < max)
        .collect();
    edges.dedup();
    edges
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split { party: Party, feature: usize, bin: u16, left: usize, right: usize },
    Leaf { weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        if self.nodes.is_empty() { 0 } else { walk(self, 0) }
    }

    pub fn owners(&self) -> Vec<Party> {
        let mut out: Vec<Party> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { party, .. } => Some(*party),
                Node::Leaf { .. } => None,
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub learning_rate: f64,
    pub base_score: f64,
    pub srv_binning: Binning,
    /// Cut points for fc-owned features; kept by the flag collector during
    /// training and attached here for joint inference.
    pub fc_binning: Binning,
    pub trees: Vec<Tree>,
}

/// A split in a party-independent form: features are numbered srv first,
/// then fc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CanonicalNode {
    Split { feature: usize, bin: u16 },
    Leaf { weight: f64 },
}

impl Model {
    pub fn requires_fc(&self) -> bool {
        self.trees.iter().any(|t| t.owners().contains(&Party::Fc))
    }

    pub fn canonical(&self) -> Vec<Vec<CanonicalNode>> {
        let offset = self.srv_binning.n_features();
        self.trees
            .iter()
            .map(|t| {
                t.nodes
                    .iter()
                    .map(|n| match *n {
                        Node::Split { party, feature, bin, .. } => CanonicalNode::Split {
                            feature: if party == Party::Srv { feature } else { offset + feature },
                            bin,
                        },
                        Node::Leaf { weight } => CanonicalNode::Leaf { weight },
                    })
                    .collect()
            })
            .collect()
    }

    /// Distinct fc-owned split tests, sorted.
    pub fn fc_splits(&self) -> Vec<(usize, u16)> {
        let mut out: Vec<(usize, u16)> = self
            .trees
            .iter()
            .flat_map(|t| &t.nodes)
            .filter_map(|n| match *n {
                Node::Split { party: Party::Fc, feature, bin, .. } => Some((feature, bin)),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Raw margin with fc-owned tests answered by `fc_left(feature, bin)`,
    /// which says whether the row goes left.
    pub fn margin_with<D>(&self, srv_row: &[f64], mut fc_left: D) -> Result<f64, BoostError>
    where
        D: FnMut(usize, u16) -> Result<bool, BoostError>,
    {
        if srv_row.len() != self.srv_binning.n_features() {
            return Err(BoostError::RowWidth { expected: self.srv_binning.n_features(), found: srv_row.len() });
        }
        let mut total = 0.0;
        for tree in &self.trees {
            let mut i = 0;
            loop {
                match tree.nodes[i] {
                    Node::Leaf { weight } => {
                        total += weight;
                        break;
                    }
                    Node::Split { party, feature, bin, left, right } => {
                        let go_left = match party {
                            Party::Srv => self.srv_binning.bin(feature, srv_row[feature]) <= bin,
                            Party::Fc => fc_left(feature, bin)?,
                        };
                        i = if go_left { left } else { right };
                    }
                }
            }
        }
        Ok(self.base_score + self.learning_rate * total)
    }

    /// Raw margin: base score plus the learning-rate-scaled leaf sum.
    pub fn margin(&self, srv_row: &[f64], fc_row: Option<&[f64]>) -> Result<f64, BoostError> {
        if let Some(fc) = fc_row {
            if fc.len() != self.fc_binning.n_features() {
                return Err(BoostError::RowWidth { expected: self.fc_binning.n_features(), found: fc.len() });
            }
        }
        self.margin_with(srv_row, |feature, bin| {
            let fc = fc_row.ok_or(BoostError::MissingFcRow)?;
            Ok(self.fc_binning.bin(feature, fc[feature]) <= bin)
        })
    }

    pub fn predict(&self, srv_row: &[f64], fc_row: Option<&[f64]>) -> Result<f64, BoostError> {
        self.margin(srv_row, fc_row).map(sigmoid)
    }

    pub fn predict_matrix(&self, srv: &Matrix, fc: Option<&Matrix>) -> Result<Vec<f64>, BoostError> {
        if let Some(fc) = fc {
            if fc.n_rows() != srv.n_rows() {
                return Err(BoostError::Misaligned { srv: srv.n_rows(), fc: fc.n_rows() });
            }
        }
        (0..srv.n_rows())
            .map(|r| self.predict(srv.row(r), fc.map(|m| m.row(r))))
            .collect()
    }

    /// Predictions for a frame, routing fc columns only when the model was
    /// trained with them.
    pub fn predict_frame(&self, frame: &FeatureFrame) -> Result<Vec<f64>, BoostError> {
        if self.fc_binning.n_features() > 0 {
            self.predict_matrix(&frame.srv, Some(&frame.fc))
        } else if self.srv_binning.n_features() == frame.srv.n_cols() {
            self.predict_matrix(&frame.srv, None)
        } else {
            self.predict_matrix(&frame.concatenated(), None)
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MODEL_MAGIC}").unwrap();
        writeln!(s, "learning_rate {:?}", self.learning_rate).unwrap();
        writeln!(s, "base_score {:?}", self.base_score).unwrap();
        for (party, b) in [(Party::Srv, &self.srv_binning), (Party::Fc, &self.fc_binning)] {
            writeln!(s, "binning {} {}", party.tag(), b.n_features()).unwrap();
            for e in &b.edges {
                s.push_str("edges");
                for v in e {
                    write!(s, " {v:?}").unwrap();
                }
                s.push('\n');
            }
        }
        writeln!(s, "trees {}", self.trees.len()).unwrap();
        for t in &self.trees {
            writeln!(s, "tree {}", t.nodes.len()).unwrap();
            for (i, n) in t.nodes.iter().enumerate() {
                match n {
                    Node::Split { party, feature, bin, left, right } => writeln!(
                        s,
                        "node {i} split {} {feature} {bin} {left} {right}",
                        party.tag()
                    ),
                    Node::Leaf { weight } => writeln!(s, "node {i} leaf {weight:?}"),
                }
                .unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, BoostError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| BoostError::Parse {
                line: 0,
                msg: format!("unexpected end of input, expected {what}"),
            })
        };
        let (line, magic) = next("header")?;
        if magic != MODEL_MAGIC {
            return Err(BoostError::Parse { line, msg: format!("expected {MODEL_MAGIC:?}") });
        }
        let learning_rate = keyed_f64(next("learning_rate")?, "learning_rate")?;
        let base_score = keyed_f64(next("base_score")?, "base_score")?;
        let mut binnings = Vec::new();
        for tag in ["srv", "fc"] {
            let (line, l) = next("binning")?;
            let count = match l.split_whitespace().collect::<Vec<_>>()[..] {
                ["binning", t, n] if t == tag => parse_num::<usize>(line, n)?,
                _ => return Err(BoostError::Parse { line, msg: format!("expected binning {tag}") }),
            };
            let mut edges = Vec::with_capacity(count);
            for _ in 0..count {
                let (line, l) = next("edges")?;
                let mut parts = l.split_whitespace();
                if parts.next() != Some("edges") {
                    return Err(BoostError::Parse { line, msg: "expected edges".into() });
                }
                edges.push(parts.map(|p| parse_num::<f64>(line, p)).collect::<Result<_, _>>()?);
            }
            binnings.push(Binning { edges });
        }
        let (line, l) = next("trees")?;
        let n_trees = match l.split_whitespace().collect::<Vec<_>>()[..] {
            ["trees", n] => parse_num::<usize>(line, n)?,
            _ => return Err(BoostError::Parse { line, msg: "expected trees".into() }),
        };
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let (line, l) = next("tree")?;
            let n_nodes = match l.split_whitespace().collect::<Vec<_>>()[..] {
                ["tree", n] => parse_num::<usize>(line, n)?,
                _ => return Err(BoostError::Parse { line, msg: "expected tree".into() }),
            };
            let mut nodes = Vec::with_capacity(n_nodes);
            for i in 0..n_nodes {
                let (line, l) = next("node")?;
                let parts: Vec<&str> = l.split_whitespace().collect();
                if parts.len() < 2 || parts[0] != "node" || parse_num::<usize>(line, parts[1])? != i {
                    return Err(BoostError::Parse { line, msg: format!("expected node {i}") });
                }
                let node = match parts[2..] {
                    ["leaf", w] => Node::Leaf { weight: parse_num(line, w)? },
                    ["split", p, f, b, left, right] => {
                        let party = match p {
                            "srv" => Party::Srv,
                            "fc" => Party::Fc,
                            other => {
                                return Err(BoostError::Parse { line, msg: format!("unknown party {other:?}") })
                            }
                        };
                        let left = parse_num::<usize>(line, left)?;
                        let right = parse_num::<usize>(line, right)?;
                        if left >= n_nodes || right >= n_nodes || left <= i || right <= i {
                            return Err(BoostError::Parse { line, msg: "child index out of range".into() });
                        }
                        Node::Split { party, feature: parse_num(line, f)?, bin: parse_num(line, b)?, left, right }
                    }
                    _ => return Err(BoostError::Parse { line, msg: "malformed node".into() }),
                };
                nodes.push(node);
            }
            trees.push(Tree { nodes });
        }
        let fc_binning = binnings.pop().expect("two binnings");
        let srv_binning = binnings.pop().expect("two binnings");
        for t in &trees {
            for n in &t.nodes {
                if let Node::Split { party, feature, .. } = *n {
                    let b = if party == Party::Srv { &srv_binning } else { &fc_binning };
                    if feature >= b.n_features() {
                        return Err(BoostError::Parse { line: 0, msg: format!("feature {feature} has no binning") });
                    }
                }
            }
        }
        Ok(Model { learning_rate, base_score, srv_binning, fc_binning, trees })
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, BoostError>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e: T::Err| BoostError::Parse { line, msg: format!("{s:?}: {e}") })
}

fn keyed_f64((line, l): (usize, &str), key: &str) -> Result<f64, BoostError> {
    match l.split_whitespace().collect::<Vec<_>>()[..] {
        [k, v] if k == key => parse_num(line, v),
        _ => Err(BoostError::Parse { line, msg: format!("expected {key}") }),
    }
}

/// Per-bin (ΣG, ΣH) for every feature of one party.
pub type Histograms = Vec<Vec<(FixedPoint, FixedPoint)>>;

/// What the label holder needs from the other party while growing trees.
pub trait FcAccess {
    fn start_tree(&mut self, rows: &[usize], g: &[FixedPoint], h: &[FixedPoint]) -> Result<(), BoostError>;
    fn histograms(&mut self, rows: &[usize]) -> Result<Histograms, BoostError>;
    /// Rows among `rows` whose bin for `feature` is at most `bin`.
    fn split_left(&mut self, rows: &[usize], feature: usize, bin: u16) -> Result<Vec<usize>, BoostError>;
    fn finish(&mut self) -> Result<Binning, BoostError>;
}

/// Stand-in for a missing second party.
struct NoFc;

impl FcAccess for NoFc {
    fn start_tree(&mut self, _: &[usize], _: &[FixedPoint], _: &[FixedPoint]) -> Result<(), BoostError> {
        Ok(())
    }
    fn histograms(&mut self, _: &[usize]) -> Result<Histograms, BoostError> {
        Ok(Vec::new())
    }
    fn split_left(&mut self, _: &[usize], _: usize, _: u16) -> Result<Vec<usize>, BoostError> {
        Err(BoostError::Protocol("no fc party".into()))
    }
    fn finish(&mut self) -> Result<Binning, BoostError> {
        Ok(Binning::default())
    }
}

fn histograms(binned: &[Vec<u16>], n_bins: &[usize], rows: &[usize], g: &[FixedPoint], h: &[FixedPoint]) -> Histograms {
    binned
        .iter()
        .zip(n_bins)
        .map(|(col, &nb)| {
            let mut hist = vec![(FixedPoint(0), FixedPoint(0)); nb];
            for &r in rows {
                let e = &mut hist[usize::from(col[r])];
                e.0 += g[r];
                e.1 += h[r];
            }
            hist
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    party: Party,
    feature: usize,
    bin: u16,
}

fn best_split(
    party: Party,
    hist: &Histograms,
    total: (FixedPoint, FixedPoint),
    params: &BoostParams,
    best: &mut Option<Candidate>,
) {
    for (feature, bins) in hist.iter().enumerate() {
        let (mut gl, mut hl) = (FixedPoint(0), FixedPoint(0));
        for (t, &(g, h)) in bins.iter().enumerate().take(bins.len().saturating_sub(1)) {
            gl += g;
            hl += h;
            let (gr, hr) = (total.0 - gl, total.1 - hl);
            if hl.raw() <= 0 || hr.raw() <= 0 {
                continue;
            }
            let gain = split_gain(gl.decode(), hl.decode(), gr.decode(), hr.decode(), params.lambda_l2, params.gamma);
            if gain > 0.0 && best.is_none_or(|b| gain > b.gain) {
                *best = Some(Candidate { gain, party, feature, bin: t as u16 });
            }
        }
    }
}

struct Grower<'a, F: FcAccess> {
    params: &'a BoostParams,
    srv_binned: &'a [Vec<u16>],
    srv_n_bins: Vec<usize>,
    fc: &'a mut F,
    g: Vec<FixedPoint>,
    h: Vec<FixedPoint>,
    n_rows: usize,
    nodes: Vec<Node>,
    delta: Vec<f64>,
}

impl<F: FcAccess> Grower<'_, F> {
    fn grow(&mut self, all: Vec<usize>, sample: Vec<usize>, depth: usize) -> Result<usize, BoostError> {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { weight: 0.0 });
        let total = sample.iter().fold((FixedPoint(0), FixedPoint(0)), |acc, &r| {
            (acc.0 + self.g[r], acc.1 + self.h[r])
        });

        let mut best = None;
        if depth < self.params.max_depth && sample.len() > 1 {
            let srv_hist = histograms(self.srv_binned, &self.srv_n_bins, &sample, &self.g, &self.h);
            best_split(Party::Srv, &srv_hist, total, self.params, &mut best);
            let fc_hist = self.fc.histograms(&sample)?;
            best_split(Party::Fc, &fc_hist, total, self.params, &mut best);
        }

        let Some(c) = best else {
            let weight = leaf_weight(total.0.decode(), total.1.decode(), self.params.lambda_l2);
            self.nodes[id] = Node::Leaf { weight };
            for &r in &all {
                self.delta[r] = weight;
            }
            return Ok(id);
        };

        let left_all = match c.party {
            Party::Srv => {
                let col = &self.srv_binned[c.feature];
                all.iter().copied().filter(|&r| col[r] <= c.bin).collect()
            }
            Party::Fc => self.fc.split_left(&all, c.feature, c.bin)?,
        };
        let mut is_left = vec![false; self.n_rows];
        for &r in &left_all {
            is_left[r] = true;
        }
        let right_all: Vec<usize> = all.iter().copied().filter(|&r| !is_left[r]).collect();
        let (left_sample, right_sample): (Vec<usize>, Vec<usize>) = sample.iter().partition(|&&r| is_left[r]);
        if left_sample.is_empty() || right_sample.is_empty() {
            return Err(BoostError::Protocol("split produced an empty child".into()));
        }
        let left = self.grow(left_all, left_sample, depth + 1)?;
        let right = self.grow(right_all, right_sample, depth + 1)?;
        self.nodes[id] = Node::Split { party: c.party, feature: c.feature, bin: c.bin, left, right };
        Ok(id)
    }
}

fn sample_rows(n: usize, rate: f64, rng: &mut ChaCha20Rng) -> Vec<usize> {
    if rate >= 1.0 {
        return (0..n).collect();
    }
    let k = ((rate * n as f64).ceil() as usize).clamp(1, n);
    let mut rows = index::sample(rng, n, k).into_vec();
    rows.sort_unstable();
    rows
}

/// Label-holder side of training. `srv_binned` is column-major.
fn train_engine<F: FcAccess>(
    srv_binning: Binning,
    srv_binned: &[Vec<u16>],
    labels: &[bool],
    params: &BoostParams,
    fc: &mut F,
) -> Result<Model, BoostError> {
    params.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(BoostError::Empty);
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == n {
        return Err(BoostError::SingleClass);
    }
    let rate = positives as f64 / n as f64;
    let base_score = (rate / (1.0 - rate)).ln();
    let mut scores = vec![base_score; n];
    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    let srv_n_bins = (0..srv_binning.n_features()).map(|f| srv_binning.n_bins(f)).collect::<Vec<_>>();

    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        let (g, h) = logistic_grad_hess(labels, &scores);
        let mut sample = sample_rows(n, params.direct_sampling_rate, &mut rng);
        let mut weights = vec![1.0; sample.len()];
        if let Some((top, other)) = params.goss {
            let sub_g: Vec<f64> = sample.iter().map(|&r| g[r]).collect();
            let (idx, w) = goss_sample_with(&sub_g, top, other, &mut rng);
            sample = idx.iter().map(|&i| sample[i]).collect();
            weights = w;
        }
        let mut gq = vec![FixedPoint(0); n];
        let mut hq = vec![FixedPoint(0); n];
        for (&r, &w) in sample.iter().zip(&weights) {
            gq[r] = FixedPoint::encode(g[r] * w)?;
            hq[r] = FixedPoint::encode(h[r] * w)?;
        }
        let sample_g: Vec<FixedPoint> = sample.iter().map(|&r| gq[r]).collect();
        let sample_h: Vec<FixedPoint> = sample.iter().map(|&r| hq[r]).collect();
        fc.start_tree(&sample, &sample_g, &sample_h)?;

        let mut grower = Grower {
            params,
            srv_binned,
            srv_n_bins: srv_n_bins.clone(),
            fc: &mut *fc,
            g: gq,
            h: hq,
            n_rows: n,
            nodes: Vec::new(),
            delta: vec![0.0; n],
        };
        grower.grow((0..n).collect(), sample, 0)?;
        for (s, d) in scores.iter_mut().zip(&grower.delta) {
            *s += params.learning_rate * d;
        }
        trees.push(Tree { nodes: grower.nodes });
    }
    let fc_binning = fc.finish()?;
    Ok(Model { learning_rate: params.learning_rate, base_score, srv_binning, fc_binning, trees })
}

/// Trains on the column concatenation of both views, as one party would.
pub fn train_centralized(frame: &FeatureFrame, params: &BoostParams) -> Result<Model, BoostError> {
    train_matrix(&frame.concatenated(), &frame.labels, params)
}

pub fn train_matrix(x: &Matrix, labels: &[bool], params: &BoostParams) -> Result<Model, BoostError> {
    if x.n_rows() != labels.len() {
        return Err(BoostError::Misaligned { srv: labels.len(), fc: x.n_rows() });
    }
    let binning = Binning::fit(x, params.n_bins);
    let binned = binning.apply(x);
    train_engine(binning, &binned, labels, params, &mut NoFc)
}

/// Requests the label holder sends to the flag collector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FcRequest {
    TreeStart { rows: Vec<usize>, g: Vec<Ciphertext>, h: Vec<Ciphertext> },
    NodeHistograms { rows: Vec<usize> },
    ApplySplit { rows: Vec<usize>, feature: usize, bin: u16 },
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FcResponse {
    Ack,
    /// Per feature, per bin: encrypted (ΣG, ΣH).
    Histograms(Vec<Vec<(Ciphertext, Ciphertext)>>),
    LeftRows(Vec<usize>),
    Binning(Binning),
}

/// Lockstep request/response transport between the two trainers.
pub trait FcChannel {
    fn call(&mut self, req: FcRequest) -> Result<FcResponse, BoostError>;
}

/// Flag-collector side: holds its own features and only ciphertext
/// gradients.
#[derive(Clone)]
pub struct FcTrainer {
    binning: Binning,
    binned: Vec<Vec<u16>>,
    public: PublicKey,
    g: Vec<Option<Ciphertext>>,
    h: Vec<Option<Ciphertext>>,
    rng: ChaCha20Rng,
}

impl FcTrainer {
    pub fn new(x: &Matrix, n_bins: usize, public: PublicKey, seed: u64) -> Self {
        let binning = Binning::fit(x, n_bins);
        let binned = binning.apply(x);
        Self {
            binning,
            binned,
            public,
            g: vec![None; x.n_rows()],
            h: vec![None; x.n_rows()],
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.g.len()
    }

    pub fn binning(&self) -> &Binning {
        &self.binning
    }

    fn check_rows(&self, rows: &[usize]) -> Result<(), BoostError> {
        match rows.iter().find(|&&r| r >= self.n_rows()) {
            Some(r) => Err(BoostError::Protocol(format!("row {r} out of range"))),
            None => Ok(()),
        }
    }

    pub fn handle(&mut self, req: FcRequest) -> Result<FcResponse, BoostError> {
        match req {
            FcRequest::TreeStart { rows, g, h } => {
                self.check_rows(&rows)?;
                if g.len() != rows.len() || h.len() != rows.len() {
                    return Err(BoostError::Protocol("gradient count mismatch".into()));
                }
                self.g.iter_mut().for_each(|v| *v = None);
                self.h.iter_mut().for_each(|v| *v = None);
                for ((r, gc), hc) in rows.into_iter().zip(g).zip(h) {
                    self.g[r] = Some(gc);
                    self.h[r] = Some(hc);
                }
                Ok(FcResponse::Ack)
            }
            FcRequest::NodeHistograms { rows } => {
                self.check_rows(&rows)?;
                let mut out = Vec::with_capacity(self.binned.len());
                for (f, col) in self.binned.iter().enumerate() {
                    let mut hist = vec![(self.public.zero(), self.public.zero()); self.binning.n_bins(f)];
                    for &r in &rows {
                        let (Some(gc), Some(hc)) = (&self.g[r], &self.h[r]) else {
                            return Err(BoostError::Protocol(format!("row {r} has no gradient")));
                        };
                        let e = &mut hist[usize::from(col[r])];
                        self.public.add_assign(&mut e.0, gc)?;
                        self.public.add_assign(&mut e.1, hc)?;
                    }
                    // Fresh randomness so empty bins are not recognisable.
                    for e in &mut hist {
                        let zero = num_bigint::BigUint::from(0u8);
                        self.public.add_assign(&mut e.0, &self.public.encrypt(&zero, &mut self.rng)?)?;
                        self.public.add_assign(&mut e.1, &self.public.encrypt(&zero, &mut self.rng)?)?;
                    }
                    out.push(hist);
                }
                Ok(FcResponse::Histograms(out))
            }
            FcRequest::ApplySplit { rows, feature, bin } => {
                self.check_rows(&rows)?;
                let col = self
                    .binned
                    .get(feature)
                    .ok_or_else(|| BoostError::Protocol(format!("unknown feature {feature}")))?;
                Ok(FcResponse::LeftRows(rows.into_iter().filter(|&r| col[r] <= bin).collect()))
            }
            FcRequest::Finish => Ok(FcResponse::Binning(self.binning.clone())),
        }
    }
}

/// Direct in-process channel.
pub struct LocalChannel<'a>(pub &'a mut FcTrainer);

impl FcChannel for LocalChannel<'_> {
    fn call(&mut self, req: FcRequest) -> Result<FcResponse, BoostError> {
        self.0.handle(req)
    }
}

/// Label-holder view of the remote party: encrypts outgoing gradients and
/// decrypts returned histograms.
struct EncryptedFc<'a, C: FcChannel> {
    channel: &'a mut C,
    keys: &'a PaillierKeypair,
    rng: ChaCha20Rng,
}

impl<C: FcChannel> FcAccess for EncryptedFc<'_, C> {
    fn start_tree(&mut self, rows: &[usize], g: &[FixedPoint], h: &[FixedPoint]) -> Result<(), BoostError> {
        let enc = |v: &[FixedPoint], rng: &mut ChaCha20Rng| {
            v.iter().map(|x| x.encrypt_with(self.keys, rng)).collect::<Result<Vec<_>, _>>()
        };
        let g = enc(g, &mut self.rng)?;
        let h = enc(h, &mut self.rng)?;
        match self.channel.call(FcRequest::TreeStart { rows: rows.to_vec(), g, h })? {
            FcResponse::Ack => Ok(()),
            other => Err(unexpected(&other)),
        }
    }

    fn histograms(&mut self, rows: &[usize]) -> Result<Histograms, BoostError> {
        match self.channel.call(FcRequest::NodeHistograms { rows: rows.to_vec() })? {
            FcResponse::Histograms(h) => h
                .iter()
                .map(|bins| {
                    bins.iter()
                        .map(|(g, h)| {
                            Ok((FixedPoint::decrypt_with(self.keys, g)?, FixedPoint::decrypt_with(self.keys, h)?))
                        })
                        .collect()
                })
                .collect(),
            other => Err(unexpected(&other)),
        }
    }

    fn split_left(&mut self, rows: &[usize], feature: usize, bin: u16) -> Result<Vec<usize>, BoostError> {
        match self.channel.call(FcRequest::ApplySplit { rows: rows.to_vec(), feature, bin })? {
            FcResponse::LeftRows(r) => Ok(r),
            other => Err(unexpected(&other)),
        }
    }

    fn finish(&mut self) -> Result<Binning, BoostError> {
        match self.channel.call(FcRequest::Finish)? {
            FcResponse::Binning(b) => Ok(b),
            other => Err(unexpected(&other)),
        }
    }
}

fn unexpected(r: &FcResponse) -> BoostError {
    let kind = match r {
        FcResponse::Ack => "Ack",
        FcResponse::Histograms(_) => "Histograms",
        FcResponse::LeftRows(_) => "LeftRows",
        FcResponse::Binning(_) => "Binning",
    };
    BoostError::Protocol(format!("unexpected response {kind}"))
}

/// Label-holder half of vertical training over an arbitrary channel.
pub fn train_vertical_srv<C: FcChannel>(
    srv: &Matrix,
    labels: &[bool],
    params: &BoostParams,
    keys: &PaillierKeypair,
    channel: &mut C,
) -> Result<Model, BoostError> {
    if srv.n_rows() != labels.len() {
        return Err(BoostError::Misaligned { srv: srv.n_rows(), fc: labels.len() });
    }
    params.validate()?;
    let binning = Binning::fit(srv, params.n_bins);
    let binned = binning.apply(srv);
    let mut fc = EncryptedFc {
        channel,
        keys,
        rng: ChaCha20Rng::seed_from_u64(params.seed ^ 0x5eed_c0de),
    };
    train_engine(binning, &binned, labels, params, &mut fc)
}

/// Both halves of vertical training in one process.
pub fn train_vertical(
    srv: &Matrix,
    labels: &[bool],
    fc: &Matrix,
    params: &BoostParams,
    keys: &PaillierKeypair,
) -> Result<Model, BoostError> {
    if srv.n_rows() != fc.n_rows() {
        return Err(BoostError::Misaligned { srv: srv.n_rows(), fc: fc.n_rows() });
    }
    let mut trainer = FcTrainer::new(fc, params.n_bins, keys.public().clone(), params.seed.wrapping_add(1));
    train_vertical_srv(srv, labels, params, keys, &mut LocalChannel(&mut trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::keygen;
    use crate::metrics::auprc;
    use std::sync::OnceLock;

    fn keys() -> &'static PaillierKeypair {
        static K: OnceLock<PaillierKeypair> = OnceLock::new();
        K.get_or_init(|| keygen(512, 21).unwrap())
    }

    fn names(prefix: &str, k: usize) -> Vec<String> {
        (0..k).map(|i| format!("{prefix}{i}")).collect()
    }

    fn toy(n: usize, seed: u64, n_srv: usize, n_fc: usize) -> FeatureFrame {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut srv = Vec::new();
        let mut fc = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let s: Vec<f64> = (0..n_srv).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f: Vec<f64> = (0..n_fc).map(|_| f64::from(rng.gen_range(0..3u8))).collect();
            let z = s.first().copied().unwrap_or(0.0) + f.first().copied().unwrap_or(0.0) - 1.0
                + rng.gen_range(-0.5..0.5);
            labels.push(z > 0.0);
            srv.push(s);
            fc.push(f);
        }
        FeatureFrame::new(
            Matrix::from_rows(names("s", n_srv), &srv).unwrap(),
            Matrix::from_rows(names("f", n_fc), &fc).unwrap(),
            labels,
        )
        .unwrap()
    }

    fn small_params() -> BoostParams {
        BoostParams { n_trees: 3, max_depth: 3, n_bins: 8, seed: 3, ..BoostParams::default() }
    }

    #[test]
    fn grad_hess_at_zero() {
        let (g, h) = logistic_grad_hess(&[true, false], &[0.0, 0.0]);
        assert_eq!(g, vec![-0.5, 0.5]);
        assert_eq!(h, vec![0.25, 0.25]);
    }

    #[test]
    fn gain_examples() {
        assert_eq!(split_gain(0.0, 1.0, 0.0, 2.0, 1.0, 0.3), -0.3);
        let g = split_gain(2.0, 3.0, -1.0, 2.0, 1.0, 0.0);
        assert!((g - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(g, split_gain(-1.0, 2.0, 2.0, 3.0, 1.0, 0.0));
    }

    #[test]
    fn goss_cases() {
        let g: Vec<f64> = (0..10).map(|i| f64::from(i) - 4.5).collect();
        let (idx, w) = goss_sample(&g, 1.0, 0.0, 1);
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert!(w.iter().all(|&x| x == 1.0));
        for seed in 0..20 {
            let (idx, w) = goss_sample(&g, 0.2, 0.3, seed);
            assert!(idx.contains(&0) && idx.contains(&9));
            assert_eq!(idx.len(), 5);
            let heavy = w.iter().filter(|&&x| x == 1.0).count();
            assert_eq!(heavy, 2);
        }
    }

    #[test]
    fn binning_edges() {
        let x = Matrix::from_rows(vec!["a".into()], &[vec![0.0], vec![1.0], vec![0.0], vec![1.0]]).unwrap();
        let b = Binning::fit(&x, 32);
        assert_eq!(b.edges[0], vec![0.0]);
        assert_eq!((b.bin(0, 0.0), b.bin(0, 1.0), b.bin(0, 7.0)), (0, 1, 1));
        let x = Matrix::from_rows(vec!["a".into()], &vec![vec![5.0]; 3]).unwrap();
        assert_eq!(Binning::fit(&x, 4).n_bins(0), 1);
    }

    #[test]
    fn zero_trees_is_constant() {
        let frame = toy(100, 1, 2, 0);
        let model = train_centralized(&frame, &BoostParams { n_trees: 0, ..small_params() }).unwrap();
        let rate = frame.labels.iter().filter(|&&y| y).count() as f64 / 100.0;
        let p = model.predict(frame.srv.row(0), None).unwrap();
        assert!((p - rate).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let mut frame = toy(20, 1, 2, 0);
        frame.labels = vec![true; 20];
        assert_eq!(train_centralized(&frame, &small_params()), Err(BoostError::SingleClass));
    }

    #[test]
    fn separable_toy_fits() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r[0] + 0.5 * r[1] > 0.1).collect();
        let x = Matrix::from_rows(names("x", 2), &rows).unwrap();
        let params = BoostParams { n_trees: 30, max_depth: 4, learning_rate: 0.5, n_bins: 32, ..BoostParams::default() };
        let model = train_matrix(&x, &labels, &params).unwrap();
        let scores = model.predict_matrix(&x, None).unwrap();
        assert!(auprc(&labels, &scores).unwrap() >= 0.99);
    }

    #[test]
    fn column_permutation_invariance() {
        let frame = toy(300, 8, 3, 0);
        let params = BoostParams { n_bins: 16, ..small_params() };
        let a = train_centralized(&frame, &params).unwrap();
        let perm = [2usize, 0, 1];
        let rows: Vec<Vec<f64>> = (0..300).map(|r| perm.iter().map(|&c| frame.srv.get(r, c)).collect()).collect();
        let permuted = Matrix::from_rows(names("p", 3), &rows).unwrap();
        let b = train_matrix(&permuted, &frame.labels, &params).unwrap();
        for r in 0..300 {
            assert_eq!(a.predict(frame.srv.row(r), None).unwrap(), b.predict(permuted.row(r), None).unwrap());
        }
    }

    #[test]
    fn vertical_matches_centralized() {
        let frame = toy(300, 5, 3, 2);
        let params = small_params();
        let central = train_centralized(&frame, &params).unwrap();
        let fed = train_vertical(&frame.srv, &frame.labels, &frame.fc, &params, keys()).unwrap();
        assert_eq!(central.canonical(), fed.canonical());
        assert!(fed.requires_fc());
        let concat = frame.concatenated();
        for r in 0..frame.n_rows() {
            let a = central.predict(concat.row(r), None).unwrap();
            let b = fed.predict(frame.srv.row(r), Some(frame.fc.row(r))).unwrap();
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(fed.predict(frame.srv.row(0), None), Err(BoostError::MissingFcRow));
    }

    #[test]
    fn vertical_without_fc_features() {
        let frame = toy(150, 6, 2, 0);
        let params = BoostParams { n_trees: 2, ..small_params() };
        let central = train_centralized(&frame, &params).unwrap();
        let fed = train_vertical(&frame.srv, &frame.labels, &frame.fc, &params, keys()).unwrap();
        assert_eq!(central.trees, fed.trees);
        assert!(!fed.requires_fc());
    }

    #[test]
    fn misaligned_views_rejected() {
        let frame = toy(50, 6, 2, 2);
        let fc = frame.fc.select_rows(&[0, 1, 2]);
        assert_eq!(
            train_vertical(&frame.srv, &frame.labels, &fc, &small_params(), keys()),
            Err(BoostError::Misaligned { srv: 50, fc: 3 })
        );
    }

    #[test]
    fn sampling_and_goss_still_lossless() {
        let frame = toy(400, 9, 2, 2);
        let params = BoostParams { direct_sampling_rate: 0.4, goss: Some((0.1, 0.1)), ..small_params() };
        let central = train_centralized(&frame, &params).unwrap();
        let fed = train_vertical(&frame.srv, &frame.labels, &frame.fc, &params, keys()).unwrap();
        assert_eq!(central.canonical(), fed.canonical());
    }

    #[test]
    fn model_text_round_trip() {
        let frame = toy(200, 2, 2, 2);
        let model = train_vertical(&frame.srv, &frame.labels, &frame.fc, &small_params(), keys()).unwrap();
        let text = model.to_text();
        let back = Model::from_text(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_text(), text);
        assert!(Model::from_text("starlit-model 2\n").is_err());
        let broken = text.replacen("leaf", "leef", 1);
        assert!(matches!(Model::from_text(&broken), Err(BoostError::Parse { .. })));
    }

    #[test]
    fn depth_and_determinism() {
        let frame = toy(300, 3, 3, 0);
        let params = BoostParams { max_depth: 2, ..small_params() };
        let a = train_centralized(&frame, &params).unwrap();
        assert!(a.trees.iter().all(|t| t.depth() <= 2));
        assert_eq!(a.to_text(), train_centralized(&frame, &params).unwrap().to_text());
    }

    #[test]
    fn zero_leaf_tree_changes_nothing() {
        let frame = toy(100, 3, 2, 0);
        let mut model = train_centralized(&frame, &small_params()).unwrap();
        let before = model.predict(frame.srv.row(5), None).unwrap();
        model.trees.push(Tree { nodes: vec![Node::Leaf { weight: 0.0 }] });
        assert_eq!(model.predict(frame.srv.row(5), None).unwrap(), before);
    }

    #[test]
    fn invalid_params() {
        let frame = toy(30, 3, 2, 0);
        for p in [
            BoostParams { max_depth: 0, ..small_params() },
            BoostParams { learning_rate: 0.0, ..small_params() },
            BoostParams { goss: Some((0.7, 0.5)), ..small_params() },
            BoostParams { direct_sampling_rate: 0.0, ..small_params() },
        ] {
            assert!(matches!(train_centralized(&frame, &p), Err(BoostError::Params(_))));
        }
    }
}
