//! Multi-party simulation: Srv (transactions and labels), one client per
//! bank (account records and private flags), and the flag collector FC.
//!
//! Every byte between parties goes through [`Router`]; parties keep only
//! their own state. The three phases are the PSI discrepancy check, LDP flag
//! collection keyed by fresh sample IDs, and two-party training.

pub mod audit;
pub mod router;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boost::{
    train_centralized, train_matrix, train_vertical_srv, BoostError, BoostParams, FcChannel, FcRequest,
    FcResponse, FcTrainer, Model,
};
use crate::datamodel::{AccountRecord, BankId, Dataset, TransactionRecord};
use crate::features::{binarize_flag, srv_matrix, FeatureEncoder, FeatureError, FeatureFrame, Matrix};
use crate::he::{keygen, HeError, PaillierKeypair, PublicKey};
use crate::ldp::{perturb, LdpError, TransformationMatrix};
use crate::metrics::{auprc, run_metrics, MessageBytes, MetricRow, MetricsError};
use crate::psi::{client_key, identity_string, server_key, BlindedQuery, PsiClient, PsiElement, PsiError, PsiServer, ServerReply};

pub use audit::{audit_leakage, AuditInputs, AuditReport, LeakageLedger, Violation};
pub use router::{Envelope, Fault, PartyId, Phase, Router};

/// 36-character random identifier standing in for a transaction.
pub type SampleId = String;

pub const FC_COLUMNS: [&str; 4] = ["b_order", "w_order", "b_benef", "w_benef"];
pub const FC_EQUALITY_COLUMN: &str = "w_equal";

#[derive(Debug, Error)]
pub enum FedError {
    #[error("psi session with {bank}: {source}")]
    Psi { bank: BankId, source: PsiError },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("message codec: {0}")]
    Codec(String),
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Ldp(#[from] LdpError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("flag collector holds no complete training rows")]
    EmptyFcDataset,
    #[error("invalid run configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Ordering,
    Beneficiary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagRequestItem {
    pub id: SampleId,
    pub account: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagTriple {
    pub id: SampleId,
    pub role: Role,
    pub b: u8,
    pub w: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    PsiQuery(BlindedQuery),
    PsiReply(ServerReply),
    FlagRequest(Vec<FlagRequestItem>),
    FlagTriples(Vec<FlagTriple>),
    AlignRequest { ids: Vec<SampleId>, n_bins: usize, modulus: Option<BigUint>, equality_bit: bool },
    AlignReply { present: Vec<bool> },
    Train(FcRequest),
    TrainReply(FcResponse),
    InferenceRequest { ids: Vec<SampleId>, splits: Vec<(usize, u16)> },
    /// `left[s][j]`: does the j-th present row go left at split `s`.
    InferenceReply { present: Vec<bool>, left: Vec<Vec<bool>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    PsiQuery,
    PsiReply,
    FlagRequest,
    FlagTriples,
    AlignRequest,
    AlignReply,
    Train,
    TrainReply,
    InferenceRequest,
    InferenceReply,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::PsiQuery(_) => MessageKind::PsiQuery,
            Message::PsiReply(_) => MessageKind::PsiReply,
            Message::FlagRequest(_) => MessageKind::FlagRequest,
            Message::FlagTriples(_) => MessageKind::FlagTriples,
            Message::AlignRequest { .. } => MessageKind::AlignRequest,
            Message::AlignReply { .. } => MessageKind::AlignReply,
            Message::Train(_) => MessageKind::Train,
            Message::TrainReply(_) => MessageKind::TrainReply,
            Message::InferenceRequest { .. } => MessageKind::InferenceRequest,
            Message::InferenceReply { .. } => MessageKind::InferenceReply,
        }
    }
}

/// Independent sub-seed for one purpose.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let d = Sha256::new().chain_update(label.as_bytes()).chain_update(seed.to_le_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn draw_sample_id<R: Rng + ?Sized>(rng: &mut R) -> SampleId {
    let mut bytes = [0u8; 16];
    rng.fill(&mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid().hyphenated().to_string()
}

fn psi_err(bank: &BankId) -> impl Fn(PsiError) -> FedError + '_ {
    move |source| FedError::Psi { bank: bank.clone(), source }
}

fn transaction_identities(t: &TransactionRecord) -> [String; 2] {
    [
        identity_string(&t.ordering_account, &t.ordering_name, &t.ordering_street, &t.ordering_country_city_zip),
        identity_string(
            &t.beneficiary_account,
            &t.beneficiary_name,
            &t.beneficiary_street,
            &t.beneficiary_country_city_zip,
        ),
    ]
}

fn account_identity(a: &AccountRecord) -> String {
    identity_string(&a.account, &a.name, &a.street, &a.country_city_zip)
}

#[derive(Clone)]
struct SrvParty {
    transactions: Vec<TransactionRecord>,
    identities: BTreeSet<PsiElement>,
    seed: u64,
    sample_ids: Vec<Option<SampleId>>,
}

impl SrvParty {
    fn handle(&mut self, from: &PartyId, msg: Message, router: &mut Router) -> Result<(), FedError> {
        if let (PartyId::Client(bank), Message::PsiQuery(q)) = (from, msg) {
            let key = server_key(derive_seed(self.seed, &format!("psi-server:{bank}")));
            let reply = PsiServer::new(&self.identities, key).respond(&q).map_err(psi_err(bank))?;
            router.send(&PartyId::Srv, from, Phase::Discrepancy, &Message::PsiReply(reply))?;
        }
        // Anything else addressed to Srv outside a request/response exchange
        // is not part of the protocol and is left for the audit.
        Ok(())
    }

    fn send_flag_requests(
        &mut self,
        router: &mut Router,
        banks: &BTreeSet<BankId>,
        filter: Option<&[bool]>,
    ) -> Result<usize, FedError> {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(self.seed, "sample-ids"));
        let mut batches: BTreeMap<BankId, Vec<FlagRequestItem>> = BTreeMap::new();
        let mut sent = 0;
        self.sample_ids = vec![None; self.transactions.len()];
        for (i, t) in self.transactions.iter().enumerate() {
            if filter.is_some_and(|f| !f.get(i).copied().unwrap_or(false)) {
                continue;
            }
            let id = draw_sample_id(&mut rng);
            for (bank, account, role) in [
                (&t.sender, &t.ordering_account, Role::Ordering),
                (&t.receiver, &t.beneficiary_account, Role::Beneficiary),
            ] {
                if banks.contains(bank) {
                    batches.entry(bank.clone()).or_default().push(FlagRequestItem {
                        id: id.clone(),
                        account: account.clone(),
                        role,
                    });
                    sent += 1;
                }
            }
            self.sample_ids[i] = Some(id);
        }
        for (bank, items) in batches {
            router.send(&PartyId::Srv, &PartyId::Client(bank), Phase::FlagCollection, &Message::FlagRequest(items))?;
        }
        Ok(sent)
    }
}

#[derive(Clone)]
struct ClientParty {
    id: PartyId,
    bank: BankId,
    accounts: Vec<AccountRecord>,
    index: HashMap<String, usize>,
    b: Vec<u8>,
    psi: Option<PsiClient>,
    intersection: BTreeSet<String>,
    srv_set_size: Option<usize>,
    request_errors: Vec<(SampleId, String)>,
    mechanism: Option<TransformationMatrix>,
    noise_discrepancy: bool,
    silent: bool,
    rng: ChaCha20Rng,
}

impl ClientParty {
    fn new(bank: BankId, accounts: Vec<AccountRecord>, seed: u64) -> Self {
        let index = accounts.iter().enumerate().map(|(i, a)| (a.account.clone(), i)).collect();
        Self {
            id: PartyId::Client(bank.clone()),
            rng: ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("ldp:{bank}"))),
            b: vec![0; accounts.len()],
            bank,
            accounts,
            index,
            psi: None,
            intersection: BTreeSet::new(),
            srv_set_size: None,
            request_errors: Vec::new(),
            mechanism: None,
            noise_discrepancy: false,
            silent: false,
        }
    }

    fn start_psi(&mut self, seed: u64, router: &mut Router) -> Result<(), FedError> {
        let set = self
            .accounts
            .iter()
            .map(|a| PsiElement::new(account_identity(a)))
            .collect::<Result<BTreeSet<_>, _>>()
            .map_err(psi_err(&self.bank))?;
        if set.is_empty() {
            return Ok(());
        }
        let key = client_key(derive_seed(seed, &format!("psi-client:{}", self.bank)));
        let (state, query) = PsiClient::start(&set, key);
        self.psi = Some(state);
        router.send(&self.id, &PartyId::Srv, Phase::Discrepancy, &Message::PsiQuery(query))?;
        Ok(())
    }

    fn handle(&mut self, from: &PartyId, msg: Message, router: &mut Router) -> Result<(), FedError> {
        if *from != PartyId::Srv {
            return Ok(());
        }
        match msg {
            Message::PsiReply(reply) => {
                let state = self
                    .psi
                    .take()
                    .ok_or_else(|| FedError::Protocol(format!("{} got an unsolicited psi reply", self.bank)))?;
                self.srv_set_size = Some(reply.server_set.len());
                let found = state.finish(&reply).map_err(psi_err(&self.bank))?;
                self.intersection = found
                    .iter()
                    .map(|e| String::from_utf8_lossy(e.as_bytes()).into_owned())
                    .collect();
                for (i, a) in self.accounts.iter().enumerate() {
                    self.b[i] = u8::from(self.intersection.contains(&account_identity(a)));
                }
            }
            Message::FlagRequest(items) => {
                let mechanism = self
                    .mechanism
                    .clone()
                    .ok_or_else(|| FedError::Protocol(format!("{} has no mechanism configured", self.bank)))?;
                let mut triples = Vec::with_capacity(items.len());
                for item in items {
                    let Some(&i) = self.index.get(&item.account) else {
                        self.request_errors.push((item.id, item.account));
                        continue;
                    };
                    let w = perturb(&mechanism, usize::from(binarize_flag(self.accounts[i].flag)), &mut self.rng)?;
                    let b = if self.noise_discrepancy {
                        perturb(&mechanism, usize::from(self.b[i]), &mut self.rng)?
                    } else {
                        usize::from(self.b[i])
                    };
                    triples.push(FlagTriple { id: item.id, role: item.role, b: b as u8, w: w as u8 });
                }
                if !self.silent {
                    router.send(&self.id, &PartyId::Fc, Phase::FlagCollection, &Message::FlagTriples(triples))?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Default)]
struct FcParty {
    rows: BTreeMap<SampleId, [Option<u8>; 4]>,
    triple_counts: BTreeMap<BankId, usize>,
    equality_bit: bool,
    seed: u64,
    train: Option<Matrix>,
    trainer: Option<FcTrainer>,
    last_inference: Option<Matrix>,
}

impl FcParty {
    fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = FC_COLUMNS.iter().map(|s| s.to_string()).collect();
        if self.equality_bit {
            names.push(FC_EQUALITY_COLUMN.to_string());
        }
        names
    }

    fn values(&self, id: &SampleId) -> Option<Vec<f64>> {
        let row = self.rows.get(id)?;
        let bits: Vec<u8> = row.iter().copied().collect::<Option<_>>()?;
        let mut out: Vec<f64> = bits.iter().map(|&v| f64::from(v)).collect();
        if self.equality_bit {
            out.push(f64::from(u8::from(bits[1] == bits[3])));
        }
        Some(out)
    }

    fn gather(&self, ids: &[SampleId]) -> Result<(Vec<bool>, Matrix), FedError> {
        let mut present = Vec::with_capacity(ids.len());
        let mut rows = Vec::new();
        for id in ids {
            match self.values(id) {
                Some(v) => {
                    present.push(true);
                    rows.push(v);
                }
                None => present.push(false),
            }
        }
        Ok((present, Matrix::from_rows(self.column_names(), &rows)?))
    }

    fn handle(&mut self, from: &PartyId, msg: Message, router: &mut Router) -> Result<(), FedError> {
        match (from, msg) {
            (PartyId::Client(bank), Message::FlagTriples(triples)) => {
                *self.triple_counts.entry(bank.clone()).or_default() += triples.len();
                for t in triples {
                    if t.b > 1 || t.w > 1 {
                        return Err(FedError::Protocol(format!("non-binary triple from {bank}")));
                    }
                    let slot = match t.role {
                        Role::Ordering => 0,
                        Role::Beneficiary => 2,
                    };
                    let row = self.rows.entry(t.id).or_default();
                    row[slot] = Some(t.b);
                    row[slot + 1] = Some(t.w);
                }
            }
            (PartyId::Srv, Message::AlignRequest { ids, n_bins, modulus, equality_bit }) => {
                self.equality_bit = equality_bit;
                let (present, matrix) = self.gather(&ids)?;
                self.trainer = modulus.map(|n| {
                    FcTrainer::new(&matrix, n_bins, PublicKey::from_modulus(n), derive_seed(self.seed, "fc-trainer"))
                });
                self.train = Some(matrix);
                router.send(&PartyId::Fc, from, Phase::Training, &Message::AlignReply { present })?;
            }
            (PartyId::Srv, Message::Train(req)) => {
                let trainer = self
                    .trainer
                    .as_mut()
                    .ok_or_else(|| FedError::Protocol("training request before alignment".into()))?;
                let resp = trainer.handle(req)?;
                router.send(&PartyId::Fc, from, Phase::Training, &Message::TrainReply(resp))?;
            }
            (PartyId::Srv, Message::InferenceRequest { ids, splits }) => {
                let (present, matrix) = self.gather(&ids)?;
                let left = if splits.is_empty() {
                    Vec::new()
                } else {
                    let trainer = self
                        .trainer
                        .as_ref()
                        .ok_or_else(|| FedError::Protocol("inference request without a trained model".into()))?;
                    let binning = trainer.binning();
                    splits
                        .iter()
                        .map(|&(f, bin)| {
                            if f >= binning.n_features() {
                                return Err(FedError::Protocol(format!("unknown fc feature {f}")));
                            }
                            Ok((0..matrix.n_rows()).map(|r| binning.bin(f, matrix.get(r, f)) <= bin).collect())
                        })
                        .collect::<Result<_, FedError>>()?
                };
                self.last_inference = Some(matrix);
                router.send(&PartyId::Fc, from, Phase::Inference, &Message::InferenceReply { present, left })?;
            }
            _ => {}
        }
        Ok(())
    }
}

fn deliver_to_fc(router: &mut Router, fc: &mut FcParty) -> Result<(), FedError> {
    while let Some((_, from, msg)) = router.recv(&PartyId::Fc)? {
        fc.handle(&from, msg, router)?;
    }
    Ok(())
}

/// Srv -> FC request with a synchronous reply.
fn exchange(router: &mut Router, fc: &mut FcParty, phase: Phase, msg: &Message) -> Result<Message, FedError> {
    router.send(&PartyId::Srv, &PartyId::Fc, phase, msg)?;
    deliver_to_fc(router, fc)?;
    match router.recv_from(&PartyId::Srv, &PartyId::Fc)? {
        Some((_, _, reply)) => Ok(reply),
        None => Err(FedError::Protocol(format!("fc did not answer {:?}", msg.kind()))),
    }
}

struct RouterChannel<'a> {
    router: &'a mut Router,
    fc: &'a mut FcParty,
}

impl FcChannel for RouterChannel<'_> {
    fn call(&mut self, req: FcRequest) -> Result<FcResponse, BoostError> {
        match exchange(self.router, self.fc, Phase::Training, &Message::Train(req)) {
            Ok(Message::TrainReply(resp)) => Ok(resp),
            Ok(other) => Err(BoostError::Protocol(format!("unexpected {:?}", other.kind()))),
            Err(FedError::Boost(e)) => Err(e),
            Err(e) => Err(BoostError::Protocol(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Paillier-encrypted histograms over the router.
    SecureBoost,
    /// The plaintext trainer on the joined columns. It yields the same model
    /// as `SecureBoost` and is meant for large sweeps.
    Centralized,
}

#[derive(Debug, Clone)]
pub struct FlagCollectionConfig {
    pub mechanism: TransformationMatrix,
    pub noise_discrepancy: bool,
    pub silent_clients: BTreeSet<BankId>,
    /// Which transactions Srv requests flags for; all when `None`.
    pub row_filter: Option<Vec<bool>>,
}

impl FlagCollectionConfig {
    pub fn new(mechanism: TransformationMatrix) -> Self {
        Self { mechanism, noise_discrepancy: false, silent_clients: BTreeSet::new(), row_filter: None }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub boost: BoostParams,
    pub backend: Backend,
    pub key_bits: usize,
    pub test_fraction: f64,
    pub equality_bit: bool,
    pub compare_srv_only: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            boost: BoostParams::default(),
            backend: Backend::SecureBoost,
            key_bits: 2048,
            test_fraction: 0.3,
            equality_bit: false,
            compare_srv_only: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagCollectionSummary {
    pub requests: usize,
    pub fc_rows: usize,
    pub complete_rows: usize,
    pub request_errors: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: Model,
    pub train_auprc: Option<f64>,
    pub test_auprc: Option<f64>,
    pub srv_only_train_auprc: Option<f64>,
    pub srv_only_test_auprc: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    /// Rows dropped because the flag collector lacked a column for them.
    pub excluded_rows: usize,
    pub train_seconds: f64,
}

#[derive(Clone)]
pub struct Federation {
    router: Router,
    srv: SrvParty,
    fc: FcParty,
    clients: BTreeMap<BankId, ClientParty>,
    seed: u64,
}

impl Federation {
    pub fn new(data: &Dataset, seed: u64) -> Result<Self, FedError> {
        let mut identities = BTreeSet::new();
        for t in &data.transactions {
            for s in transaction_identities(t) {
                identities.insert(PsiElement::new(s).map_err(psi_err(&t.sender))?);
            }
        }
        let clients = data
            .banks
            .iter()
            .map(|(bank, accounts)| (bank.clone(), ClientParty::new(bank.clone(), accounts.clone(), seed)))
            .collect();
        Ok(Self {
            router: Router::new(),
            srv: SrvParty {
                transactions: data.transactions.clone(),
                identities,
                seed,
                sample_ids: vec![None; data.transactions.len()],
            },
            fc: FcParty { seed, ..FcParty::default() },
            clients,
            seed,
        })
    }

    /// New seeds for everything drawn after the discrepancy phase.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.srv.seed = seed;
        self.fc = FcParty { seed, ..FcParty::default() };
        for (bank, c) in &mut self.clients {
            c.rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("ldp:{bank}")));
            c.request_errors.clear();
        }
    }

    pub fn set_faults(&mut self, faults: &[Fault]) {
        self.router.set_faults(faults);
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    /// Delivers queued messages until every queue is empty.
    fn pump(&mut self) -> Result<(), FedError> {
        loop {
            let mut progressed = false;
            while let Some((_, from, msg)) = self.router.recv(&PartyId::Srv)? {
                self.srv.handle(&from, msg, &mut self.router)?;
                progressed = true;
            }
            while let Some((_, from, msg)) = self.router.recv(&PartyId::Fc)? {
                self.fc.handle(&from, msg, &mut self.router)?;
                progressed = true;
            }
            for c in self.clients.values_mut() {
                while let Some((_, from, msg)) = self.router.recv(&c.id)? {
                    c.handle(&from, msg, &mut self.router)?;
                    progressed = true;
                }
            }
            if !progressed {
                return Ok(());
            }
        }
    }

    pub fn run_discrepancy_phase(&mut self) -> Result<(), FedError> {
        if !self.srv.identities.is_empty() {
            for c in self.clients.values_mut() {
                c.start_psi(self.seed, &mut self.router)?;
            }
        }
        self.pump()
    }

    /// Per-account discrepancy bit as the client computed it.
    pub fn discrepancy_bits(&self, bank: &BankId) -> Option<BTreeMap<String, u8>> {
        let c = self.clients.get(bank)?;
        Some(c.accounts.iter().zip(&c.b).map(|(a, &b)| (a.account.clone(), b)).collect())
    }

    pub fn intersection(&self, bank: &BankId) -> Option<&BTreeSet<String>> {
        self.clients.get(bank).map(|c| &c.intersection)
    }

    pub fn run_flag_collection(&mut self, cfg: &FlagCollectionConfig) -> Result<FlagCollectionSummary, FedError> {
        if cfg.mechanism.k() != 2 {
            return Err(FedError::Config(format!("flag mechanism must be binary, got k = {}", cfg.mechanism.k())));
        }
        for (bank, c) in &mut self.clients {
            c.mechanism = Some(cfg.mechanism.clone());
            c.noise_discrepancy = cfg.noise_discrepancy;
            c.silent = cfg.silent_clients.contains(bank);
        }
        let banks: BTreeSet<BankId> = self.clients.keys().cloned().collect();
        let requests = self.srv.send_flag_requests(&mut self.router, &banks, cfg.row_filter.as_deref())?;
        self.pump()?;
        Ok(FlagCollectionSummary {
            requests,
            fc_rows: self.fc.rows.len(),
            complete_rows: self.fc.rows.values().filter(|r| r.iter().all(Option::is_some)).count(),
            request_errors: self.clients.values().map(|c| c.request_errors.len()).sum(),
        })
    }

    /// FC's rows as (b_order, w_order, b_benef, w_benef), `None` where missing.
    pub fn fc_dataset(&self) -> &BTreeMap<SampleId, [Option<u8>; 4]> {
        &self.fc.rows
    }

    pub fn sample_ids(&self) -> &[Option<SampleId>] {
        &self.srv.sample_ids
    }

    pub fn request_errors(&self, bank: &BankId) -> &[(SampleId, String)] {
        self.clients.get(bank).map_or(&[], |c| &c.request_errors)
    }

    fn split_rows(&self, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.srv.transactions.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha20Rng::seed_from_u64(derive_seed(self.seed, "split")));
        let n_test = (test_fraction * n as f64).round() as usize;
        let keep = |idx: &[usize]| {
            let mut v: Vec<usize> = idx.iter().copied().filter(|&i| self.srv.sample_ids[i].is_some()).collect();
            v.sort_unstable();
            v
        };
        (keep(&order[n_test..]), keep(&order[..n_test]))
    }

    fn ids(&self, rows: &[usize]) -> Vec<SampleId> {
        rows.iter().map(|&i| self.srv.sample_ids[i].clone().expect("requested row")).collect()
    }

    pub fn run_training_phase(&mut self, cfg: &TrainingConfig) -> Result<TrainingOutcome, FedError> {
        if !(0.0..1.0).contains(&cfg.test_fraction) {
            return Err(FedError::Config(format!("test_fraction {} is not in [0, 1)", cfg.test_fraction)));
        }
        cfg.boost.validate()?;
        let started = Instant::now();
        let (train_idx, test_idx) = self.split_rows(cfg.test_fraction);
        let keys: Option<PaillierKeypair> = match cfg.backend {
            Backend::SecureBoost => Some(keygen(cfg.key_bits, derive_seed(self.seed, "paillier"))?),
            Backend::Centralized => None,
        };

        let align = Message::AlignRequest {
            ids: self.ids(&train_idx),
            n_bins: cfg.boost.n_bins,
            modulus: keys.as_ref().map(|k| k.public().n().clone()),
            equality_bit: cfg.equality_bit,
        };
        let present = match exchange(&mut self.router, &mut self.fc, Phase::Training, &align)? {
            Message::AlignReply { present } if present.len() == train_idx.len() => present,
            other => return Err(FedError::Protocol(format!("unexpected {:?} to alignment", other.kind()))),
        };
        let train_rows: Vec<usize> = train_idx.iter().zip(&present).filter(|(_, &p)| p).map(|(&i, _)| i).collect();
        let mut excluded = train_idx.len() - train_rows.len();
        if train_rows.is_empty() {
            return Err(FedError::EmptyFcDataset);
        }

        let train_tx: Vec<TransactionRecord> = train_rows.iter().map(|&i| self.srv.transactions[i].clone()).collect();
        let labels: Vec<bool> = train_tx.iter().map(|t| t.label).collect();
        let encoder = FeatureEncoder::fit(&train_tx);
        let srv_train = srv_matrix(&encoder.transform_fitted(&train_tx));

        let model = match (&cfg.backend, &keys) {
            (Backend::SecureBoost, Some(keys)) => {
                let mut channel = RouterChannel { router: &mut self.router, fc: &mut self.fc };
                train_vertical_srv(&srv_train, &labels, &cfg.boost, keys, &mut channel)?
            }
            _ => {
                let fc_train = self.fc.train.clone().ok_or(FedError::EmptyFcDataset)?;
                train_centralized(&FeatureFrame::new(srv_train.clone(), fc_train, labels.clone())?, &cfg.boost)?
            }
        };
        let train_seconds = started.elapsed().as_secs_f64();

        let (train_scores, _) = self.score(&model, &train_rows, &encoder, true)?;
        let (test_scores, test_rows) = self.score(&model, &test_idx, &encoder, false)?;
        excluded += test_idx.len() - test_rows.len();
        let test_labels: Vec<bool> = test_rows.iter().map(|&i| self.srv.transactions[i].label).collect();

        let (mut srv_only_train_auprc, mut srv_only_test_auprc) = (None, None);
        if cfg.compare_srv_only {
            let base = train_matrix(&srv_train, &labels, &cfg.boost)?;
            let train_pred = base.predict_matrix(&srv_train, None)?;
            srv_only_train_auprc = auprc(&labels, &train_pred).ok();
            if !test_rows.is_empty() {
                let test_tx: Vec<TransactionRecord> = test_rows.iter().map(|&i| self.srv.transactions[i].clone()).collect();
                let srv_test = srv_matrix(&encoder.transform_unseen(&test_tx));
                srv_only_test_auprc = auprc(&test_labels, &base.predict_matrix(&srv_test, None)?).ok();
            }
        }

        Ok(TrainingOutcome {
            train_auprc: auprc(&labels, &train_scores).ok(),
            test_auprc: if test_rows.is_empty() { None } else { auprc(&test_labels, &test_scores).ok() },
            srv_only_train_auprc,
            srv_only_test_auprc,
            n_train: train_rows.len(),
            n_test: test_rows.len(),
            excluded_rows: excluded,
            train_seconds,
            model,
        })
    }

    /// Joint inference: FC answers its split tests for the requested rows.
    /// Returns scores and the rows FC could serve.
    fn score(
        &mut self,
        model: &Model,
        rows: &[usize],
        encoder: &FeatureEncoder,
        fitted: bool,
    ) -> Result<(Vec<f64>, Vec<usize>), FedError> {
        if rows.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let splits = model.fc_splits();
        let request = Message::InferenceRequest { ids: self.ids(rows), splits: splits.clone() };
        let (present, left) = match exchange(&mut self.router, &mut self.fc, Phase::Inference, &request)? {
            Message::InferenceReply { present, left } if present.len() == rows.len() && left.len() == splits.len() => {
                (present, left)
            }
            other => return Err(FedError::Protocol(format!("unexpected {:?} to inference", other.kind()))),
        };
        let kept: Vec<usize> = rows.iter().zip(&present).filter(|(_, &p)| p).map(|(&i, _)| i).collect();
        let tx: Vec<TransactionRecord> = kept.iter().map(|&i| self.srv.transactions[i].clone()).collect();
        let srv = srv_matrix(&if fitted { encoder.transform_fitted(&tx) } else { encoder.transform_unseen(&tx) });
        let split_pos: HashMap<(usize, u16), usize> = splits.iter().enumerate().map(|(i, &s)| (s, i)).collect();

        let mut scores = Vec::with_capacity(kept.len());
        let concatenated = if model.fc_binning.n_features() == 0 && model.srv_binning.n_features() > srv.n_cols() {
            let fc = self.fc.last_inference.as_ref().ok_or(FedError::EmptyFcDataset)?;
            Some(srv.hconcat(fc)?)
        } else {
            None
        };
        for j in 0..kept.len() {
            let margin = match &concatenated {
                Some(x) => model.margin(x.row(j), None)?,
                None => model.margin_with(srv.row(j), |f, b| {
                    split_pos
                        .get(&(f, b))
                        .map(|&s| left[s][j])
                        .ok_or_else(|| BoostError::Protocol(format!("no fc answer for split ({f}, {b})")))
                })?,
            };
            scores.push(crate::boost::sigmoid(margin));
        }
        Ok((scores, kept))
    }

    pub fn audit_inputs(&self) -> AuditInputs {
        let mut identity_fields = BTreeSet::new();
        for t in &self.srv.transactions {
            for f in [
                &t.ordering_account,
                &t.ordering_name,
                &t.ordering_street,
                &t.ordering_country_city_zip,
                &t.beneficiary_account,
                &t.beneficiary_name,
                &t.beneficiary_street,
                &t.beneficiary_country_city_zip,
            ] {
                identity_fields.insert(f.clone());
            }
        }
        for c in self.clients.values() {
            for a in &c.accounts {
                for f in [&a.account, &a.name, &a.street, &a.country_city_zip] {
                    identity_fields.insert(f.clone());
                }
            }
        }
        identity_fields.retain(|f| !f.is_empty());
        AuditInputs {
            identity_fields,
            srv_identities: self
                .srv
                .identities
                .iter()
                .map(|e| String::from_utf8_lossy(e.as_bytes()).into_owned())
                .collect(),
            holdings: self
                .clients
                .iter()
                .map(|(b, c)| (b.clone(), c.accounts.iter().map(|a| a.account.clone()).collect()))
                .collect(),
            intersections: self.clients.iter().map(|(b, c)| (b.clone(), c.intersection.clone())).collect(),
        }
    }

    pub fn ledger(&self) -> LeakageLedger {
        LeakageLedger::from_log(self.router.log())
    }

    pub fn audit(&self) -> AuditReport {
        audit_leakage(&self.ledger(), &self.audit_inputs())
    }

    pub fn metrics(&self, wall: std::time::Duration) -> Vec<MetricRow> {
        let log: Vec<MessageBytes> = self
            .router
            .log()
            .iter()
            .map(|e| MessageBytes { phase: e.phase.name().to_string(), bytes: e.payload.len() as u64 })
            .collect();
        run_metrics(&log, wall, crate::metrics::peak_memory_bytes())
    }
}

/// Everything for one end-to-end run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub flags: FlagCollectionConfig,
    pub training: TrainingConfig,
    pub seed: u64,
    pub faults: Vec<Fault>,
}

pub struct RunReport {
    pub outcome: TrainingOutcome,
    pub flags: FlagCollectionSummary,
    pub audit: AuditReport,
    pub metrics: Vec<MetricRow>,
    pub federation: Federation,
}

pub fn run_pipeline(data: &Dataset, cfg: &RunConfig) -> Result<RunReport, FedError> {
    let started = Instant::now();
    let mut fed = Federation::new(data, cfg.seed)?;
    fed.set_faults(&cfg.faults);
    fed.run_discrepancy_phase()?;
    let flags = fed.run_flag_collection(&cfg.flags)?;
    let outcome = fed.run_training_phase(&cfg.training)?;
    let audit = fed.audit();
    let metrics = fed.metrics(started.elapsed());
    Ok(RunReport { outcome, flags, audit, metrics, federation: fed })
}
