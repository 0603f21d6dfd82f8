//! Two-party private set intersection from a Diffie–Hellman style OPRF over
//! ristretto255. Only the client learns the intersection.
//!
//! Client: sends `H(y)^b` for each of its elements.
//! Server: raises each to its key `a`, returns them in order, and also sends
//! `H(x)^a` for its own set, sorted.
//! Client: strips `b` and compares.

use std::collections::{BTreeSet, HashSet};
use std::time::Instant;

use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha512};
use thiserror::Error;

pub const MAX_ELEMENT_BYTES: usize = 4096;
pub const POINT_BYTES: usize = 32;

const HASH_DOMAIN: &[u8] = b"starlit-psi-h2g-v1";
const KEY_DOMAIN: &[u8] = b"starlit-psi-key-v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PsiError {
    #[error("element of {len} bytes exceeds the {MAX_ELEMENT_BYTES}-byte limit")]
    ElementTooLarge { len: usize },
    #[error("empty element")]
    EmptyElement,
    #[error("malformed group element at position {0}")]
    BadPoint(usize),
    #[error("reply carries {got} evaluations for {sent} queries")]
    LengthMismatch { sent: usize, got: usize },
    #[error("intersection mismatch for size {0}")]
    OracleMismatch(usize),
    #[error("benchmark sizes must be ascending")]
    Unordered,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PsiElement(Vec<u8>);

impl PsiElement {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, PsiError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(PsiError::EmptyElement);
        }
        if bytes.len() > MAX_ELEMENT_BYTES {
            return Err(PsiError::ElementTooLarge { len: bytes.len() });
        }
        Ok(Self(bytes))
    }

    /// account || name || street || country-city-zip, no separators.
    pub fn from_identity(
        account: &str,
        name: &str,
        street: &str,
        country_city_zip: &str,
    ) -> Result<Self, PsiError> {
        Self::new(identity_string(account, name, street, country_city_zip))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

pub fn identity_string(account: &str, name: &str, street: &str, country_city_zip: &str) -> String {
    [account, name, street, country_city_zip].concat()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PsiTranscript {
    pub rounds: Vec<(Direction, usize)>,
    pub intersection: BTreeSet<PsiElement>,
}

impl PsiTranscript {
    pub fn total_bytes(&self) -> usize {
        self.rounds.iter().map(|(_, b)| b).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedQuery {
    pub points: Vec<[u8; POINT_BYTES]>,
}

impl BlindedQuery {
    pub fn payload_bytes(&self) -> usize {
        self.points.len() * POINT_BYTES
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerReply {
    /// The query points raised to the server key, in query order.
    pub evaluated: Vec<[u8; POINT_BYTES]>,
    /// PRF outputs of the server set, sorted.
    pub server_set: Vec<[u8; POINT_BYTES]>,
}

impl ServerReply {
    pub fn payload_bytes(&self) -> usize {
        (self.evaluated.len() + self.server_set.len()) * POINT_BYTES
    }
}

fn hash_to_group(e: &PsiElement) -> RistrettoPoint {
    let digest = Sha512::new()
        .chain_update(HASH_DOMAIN)
        .chain_update(e.as_bytes())
        .finalize();
    let mut wide = [0u8; 64];
    wide.copy_from_slice(&digest);
    RistrettoPoint::from_uniform_bytes(&wide)
}

/// Non-zero scalar derived from a session seed and a role label.
pub fn derive_key(seed: u64, role: &[u8]) -> Scalar {
    let mut counter = 0u32;
    loop {
        let digest = Sha512::new()
            .chain_update(KEY_DOMAIN)
            .chain_update(role)
            .chain_update(seed.to_le_bytes())
            .chain_update(counter.to_le_bytes())
            .finalize();
        let mut wide = [0u8; 64];
        wide.copy_from_slice(&digest);
        let s = Scalar::from_bytes_mod_order_wide(&wide);
        if s != Scalar::ZERO {
            return s;
        }
        counter += 1;
    }
}

fn decompress(bytes: &[u8; POINT_BYTES], pos: usize) -> Result<RistrettoPoint, PsiError> {
    CompressedRistretto(*bytes).decompress().ok_or(PsiError::BadPoint(pos))
}

/// Server role: holds the OPRF key and its PRF-encoded set.
pub struct PsiServer {
    key: Scalar,
    encoded: Vec<[u8; POINT_BYTES]>,
}

impl PsiServer {
    pub fn new(set: &BTreeSet<PsiElement>, key: Scalar) -> Self {
        let mut encoded: Vec<_> = set
            .iter()
            .map(|e| (hash_to_group(e) * key).compress().to_bytes())
            .collect();
        encoded.sort_unstable();
        Self { key, encoded }
    }

    pub fn set_size(&self) -> usize {
        self.encoded.len()
    }

    pub fn respond(&self, query: &BlindedQuery) -> Result<ServerReply, PsiError> {
        let evaluated = query
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| Ok((decompress(p, i)? * self.key).compress().to_bytes()))
            .collect::<Result<Vec<_>, PsiError>>()?;
        Ok(ServerReply { evaluated, server_set: self.encoded.clone() })
    }
}

/// Client role: blinds its elements, then unblinds the server's reply.
#[derive(Clone)]
pub struct PsiClient {
    key_inverse: Scalar,
    elements: Vec<PsiElement>,
}

impl PsiClient {
    pub fn start(set: &BTreeSet<PsiElement>, key: Scalar) -> (Self, BlindedQuery) {
        let elements: Vec<PsiElement> = set.iter().cloned().collect();
        let points = elements
            .iter()
            .map(|e| (hash_to_group(e) * key).compress().to_bytes())
            .collect();
        (
            Self { key_inverse: key.invert(), elements },
            BlindedQuery { points },
        )
    }

    pub fn finish(self, reply: &ServerReply) -> Result<BTreeSet<PsiElement>, PsiError> {
        if reply.evaluated.len() != self.elements.len() {
            return Err(PsiError::LengthMismatch {
                sent: self.elements.len(),
                got: reply.evaluated.len(),
            });
        }
        let server: HashSet<&[u8; POINT_BYTES]> = reply.server_set.iter().collect();
        let mut out = BTreeSet::new();
        for (i, (e, p)) in self.elements.into_iter().zip(&reply.evaluated).enumerate() {
            let unblinded = (decompress(p, i)? * self.key_inverse).compress().to_bytes();
            if server.contains(&unblinded) {
                out.insert(e);
            }
        }
        Ok(out)
    }
}

pub fn server_key(seed: u64) -> Scalar {
    derive_key(seed, b"server")
}

pub fn client_key(seed: u64) -> Scalar {
    derive_key(seed, b"client")
}

/// Runs both roles in-process. Empty inputs short-circuit without messages.
pub fn psi_intersect(
    server_set: &BTreeSet<PsiElement>,
    client_set: &BTreeSet<PsiElement>,
    seed: u64,
) -> Result<PsiTranscript, PsiError> {
    if server_set.is_empty() || client_set.is_empty() {
        return Ok(PsiTranscript { rounds: Vec::new(), intersection: BTreeSet::new() });
    }
    let server = PsiServer::new(server_set, server_key(seed));
    let (client, query) = PsiClient::start(client_set, client_key(seed));
    let reply = server.respond(&query)?;
    let rounds = vec![
        (Direction::ClientToServer, query.payload_bytes()),
        (Direction::ServerToClient, reply.payload_bytes()),
    ];
    let intersection = client.finish(&reply)?;
    Ok(PsiTranscript { rounds, intersection })
}

pub fn plaintext_intersection<T: Ord + Clone>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> BTreeSet<T> {
    a.intersection(b).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub seconds: f64,
}

fn bench_sets(size: usize) -> (BTreeSet<PsiElement>, BTreeSet<PsiElement>) {
    let elem = |i: usize| PsiElement::new(format!("{i:012}ACCOUNT-HOLDER-{i}")).expect("short element");
    let overlap = size / 2;
    let server = (0..size).map(elem).collect();
    let client = (size - overlap..2 * size - overlap).map(elem).collect();
    (server, client)
}

/// Times one PSI run per size (both sets of that size, half overlapping),
/// checking each result against the plaintext oracle.
pub fn bench_psi(sizes: &[usize]) -> Result<Vec<BenchRow>, PsiError> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(PsiError::Unordered);
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let (server, client) = bench_sets(size);
        let start = Instant::now();
        let transcript = psi_intersect(&server, &client, size as u64)?;
        let seconds = start.elapsed().as_secs_f64();
        if transcript.intersection != plaintext_intersection(&server, &client) {
            return Err(PsiError::OracleMismatch(size));
        }
        rows.push(BenchRow { size, seconds });
    }
    Ok(rows)
}
