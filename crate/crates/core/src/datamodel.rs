//! Transaction and bank-account records, their CSV layouts, and a seeded
//! generator that plants label-correlated account flags and identity
//! discrepancies.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Timelike, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRANSACTION_HEADER: [&str; 20] = [
    "MessageId",
    "UETR",
    "TransactionReference",
    "Timestamp",
    "Sender",
    "Receiver",
    "OrderingAccount",
    "OrderingName",
    "OrderingStreet",
    "OrderingCountryCityZip",
    "BeneficiaryAccount",
    "BeneficiaryName",
    "BeneficiaryStreet",
    "BeneficiaryCountryCityZip",
    "SettlementDate",
    "SettlementCurrency",
    "SettlementAmount",
    "InstructedCurrency",
    "InstructedAmount",
    "Label",
];

pub const ACCOUNT_HEADER: [&str; 6] = ["Bank", "Account", "Name", "Street", "CountryCityZip", "Flags"];

/// Largest enumerated flag value; 0 means "no issue".
pub const MAX_FLAG: u8 = 10;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";
const DATE_FORMAT: &str = "%Y-%m-%d";
const WINDOW_DAYS: i64 = 30;
const CURRENCIES: [&str; 8] = ["USD", "EUR", "GBP", "JPY", "CHF", "CAD", "AUD", "SGD"];
// Units of each currency per USD.
const USD_RATES: [f64; 8] = [1.0, 0.92, 0.79, 148.0, 0.88, 1.35, 1.52, 1.34];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected header: expected {expected:?}, found {found:?}")]
    Header { expected: String, found: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    Arity { line: u64, expected: usize, found: usize },
    #[error("line {line}: field {field}: {reason} (value {value:?})")]
    Field { line: u64, field: &'static str, value: String, reason: String },
    #[error("line {line}: duplicate {what} {value:?}")]
    Duplicate { line: u64, what: &'static str, value: String },
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BankId(pub String);

impl BankId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Non-negative monetary amount in hundredths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Amount(pub u64);

impl Amount {
    pub fn from_f64(v: f64) -> Self {
        Amount((v.max(0.0) * 100.0).round() as u64)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl FromStr for Amount {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (whole, frac) = s.split_once('.').ok_or("expected two decimal places")?;
        let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
        if !digits(whole) || frac.len() != 2 || !digits(frac) {
            return Err("expected a non-negative amount with two decimal places".into());
        }
        let whole: u64 = whole.parse().map_err(|e| format!("{e}"))?;
        let frac: u64 = frac.parse().map_err(|e| format!("{e}"))?;
        whole
            .checked_mul(100)
            .and_then(|w| w.checked_add(frac))
            .map(Amount)
            .ok_or_else(|| "amount overflows".into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransactionRecord {
    pub message_id: String,
    pub uetr: String,
    pub transaction_reference: String,
    pub timestamp: DateTime<Utc>,
    pub sender: BankId,
    pub receiver: BankId,
    pub ordering_account: String,
    pub ordering_name: String,
    pub ordering_street: String,
    pub ordering_country_city_zip: String,
    pub beneficiary_account: String,
    pub beneficiary_name: String,
    pub beneficiary_street: String,
    pub beneficiary_country_city_zip: String,
    pub settlement_date: NaiveDate,
    pub settlement_currency: String,
    pub settlement_amount: Amount,
    pub instructed_currency: String,
    pub instructed_amount: Amount,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountRecord {
    pub bank: BankId,
    pub account: String,
    pub name: String,
    pub street: String,
    pub country_city_zip: String,
    pub flag: u8,
}

pub type BankDatasets = BTreeMap<BankId, Vec<AccountRecord>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_transactions: usize,
    pub n_banks: usize,
    pub accounts_per_bank: usize,
    pub anomaly_rate: f64,
    pub flag_given_anomaly: f64,
    pub flag_given_normal: f64,
    pub discrepancy_given_anomaly: f64,
    pub discrepancy_given_normal: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_transactions: 50_000,
            n_banks: 10,
            accounts_per_bank: 500,
            anomaly_rate: 0.05,
            flag_given_anomaly: 0.5,
            flag_given_normal: 0.05,
            discrepancy_given_anomaly: 0.4,
            discrepancy_given_normal: 0.03,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let probs = [
            ("anomaly_rate", self.anomaly_rate),
            ("flag_given_anomaly", self.flag_given_anomaly),
            ("flag_given_normal", self.flag_given_normal),
            ("discrepancy_given_anomaly", self.discrepancy_given_anomaly),
            ("discrepancy_given_normal", self.discrepancy_given_normal),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::Config(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        if self.n_banks == 0 {
            return Err(DataError::Config("n_banks must be positive".into()));
        }
        if self.accounts_per_bank == 0 {
            return Err(DataError::Config("accounts_per_bank must be positive".into()));
        }
        if self.flag_given_anomaly <= self.flag_given_normal {
            return Err(DataError::Config(
                "flag_given_anomaly must exceed flag_given_normal".into(),
            ));
        }
        if self.discrepancy_given_anomaly <= self.discrepancy_given_normal {
            return Err(DataError::Config(
                "discrepancy_given_anomaly must exceed discrepancy_given_normal".into(),
            ));
        }
        Ok(())
    }
}

/// Transactions plus one account table per bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub transactions: Vec<TransactionRecord>,
    pub banks: BankDatasets,
}

impl Dataset {
    pub fn lookup(&self, bank: &BankId, account: &str) -> Option<&AccountRecord> {
        self.banks.get(bank)?.iter().find(|a| a.account == account)
    }
}

/// The identity an account presents in transactions, before any planted
/// discrepancy in the bank's copy.
#[derive(Debug, Clone)]
struct Identity {
    name: String,
    street: String,
    country_city_zip: String,
}

const FIRST_NAMES: [&str; 24] = [
    "Alice", "Bruno", "Chiara", "Dmitri", "Elena", "Farid", "Greta", "Hiroshi", "Ines", "Jonas",
    "Kavya", "Lars", "Marta", "Nadia", "Oscar", "Priya", "Quentin", "Rosa", "Stefan", "Tariq",
    "Ulla", "Viktor", "Wen", "Yusuf",
];
const LAST_NAMES: [&str; 24] = [
    "Abbott", "Brandt", "Costa", "Dubois", "Eriksen", "Fischer", "Garcia", "Hansen", "Ivanova",
    "Jensen", "Kowalski", "Larsen", "Moreau", "Novak", "Okafor", "Petrov", "Quinn", "Rossi",
    "Schmidt", "Tanaka", "Urban", "Vargas", "Weber", "Zhou",
];
const STREETS: [&str; 16] = [
    "Harbour", "Linden", "Market", "Mill", "Oak", "Orchard", "Park", "Queen", "River", "Station",
    "Church", "Bridge", "Castle", "Garden", "Meadow", "Victoria",
];
const STREET_KINDS: [&str; 5] = ["Street", "Road", "Avenue", "Lane", "Way"];
const PLACES: [(&str, &str); 10] = [
    ("GB", "London"),
    ("DE", "Berlin"),
    ("FR", "Lyon"),
    ("NL", "Utrecht"),
    ("IT", "Milan"),
    ("ES", "Valencia"),
    ("US", "Boston"),
    ("CH", "Basel"),
    ("SG", "Singapore"),
    ("JP", "Osaka"),
];

fn random_identity(rng: &mut ChaCha20Rng) -> Identity {
    let first = FIRST_NAMES.choose(rng).expect("non-empty");
    let last = LAST_NAMES.choose(rng).expect("non-empty");
    let street = STREETS.choose(rng).expect("non-empty");
    let kind = STREET_KINDS.choose(rng).expect("non-empty");
    let (country, city) = PLACES.choose(rng).expect("non-empty");
    Identity {
        name: format!("{first} {last}"),
        street: format!("{} {street} {kind}", rng.gen_range(1..400)),
        country_city_zip: format!("{country} {city} {:05}", rng.gen_range(1000..99_999)),
    }
}

/// Replaces one alphabetic character with a different letter of the same case.
fn mutate(s: &str, rng: &mut ChaCha20Rng) -> String {
    let chars: Vec<char> = s.chars().collect();
    let letters: Vec<usize> = (0..chars.len()).filter(|&i| chars[i].is_ascii_alphabetic()).collect();
    let Some(&pos) = letters.choose(rng) else {
        return format!("{s}X");
    };
    let original = chars[pos];
    let base = if original.is_ascii_uppercase() { b'A' } else { b'a' };
    let mut replacement = original;
    while replacement == original {
        replacement = char::from(base + rng.gen_range(0..26u8));
    }
    let mut out = chars;
    out[pos] = replacement;
    out.into_iter().collect()
}

fn bank_name(index: usize) -> BankId {
    BankId(format!("BANK{index:03}"))
}

struct PlannedAccount {
    bank: usize,
    index: usize,
    identity: Identity,
}

/// Seeded synthetic generator.
///
/// Each account is flagged and/or carries a discrepancy in its bank record;
/// every transaction end draws "flagged" and "discrepant" from the
/// label-conditional probabilities and then picks an account of exactly that
/// kind, so the planted rates hold per transaction.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let mut banks: BankDatasets = BTreeMap::new();
    let mut planned: Vec<PlannedAccount> = Vec::new();
    // pools[flagged][discrepant] -> indices into `planned`
    let mut pools: [[Vec<usize>; 2]; 2] = Default::default();
    let mut used_numbers = HashSet::new();

    for b in 0..cfg.n_banks {
        let bank = bank_name(b);
        let mut records = Vec::with_capacity(cfg.accounts_per_bank);
        for i in 0..cfg.accounts_per_bank {
            let account = loop {
                let candidate = format!("{b:03}{:09}", rng.gen_range(0..1_000_000_000u64));
                if used_numbers.insert(candidate.clone()) {
                    break candidate;
                }
            };
            let identity = random_identity(&mut rng);
            let global = planned.len();
            // The first four accounts cover every pool so small configs work.
            let (flagged, discrepant) = if global < 4 {
                (global & 1 == 1, global & 2 == 2)
            } else {
                (rng.gen_bool(0.3), rng.gen_bool(0.3))
            };
            let flag = if flagged { rng.gen_range(1..=MAX_FLAG) } else { 0 };
            let mut record = AccountRecord {
                bank: bank.clone(),
                account,
                name: identity.name.clone(),
                street: identity.street.clone(),
                country_city_zip: identity.country_city_zip.clone(),
                flag,
            };
            if discrepant {
                match rng.gen_range(0..3) {
                    0 => record.name = mutate(&record.name, &mut rng),
                    1 => record.street = mutate(&record.street, &mut rng),
                    _ => record.country_city_zip = mutate(&record.country_city_zip, &mut rng),
                }
            }
            pools[usize::from(flagged)][usize::from(discrepant)].push(global);
            planned.push(PlannedAccount { bank: b, index: i, identity });
            records.push(record);
        }
        banks.insert(bank, records);
    }

    let start = Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).single().expect("valid date");
    let normal_amount = LogNormal::new(7.0, 1.2).expect("valid parameters");
    let anomalous_amount = LogNormal::new(7.6, 1.3).expect("valid parameters");
    let total_accounts = planned.len();

    let mut transactions = Vec::with_capacity(cfg.n_transactions);
    for t in 0..cfg.n_transactions {
        let label = rng.gen_bool(cfg.anomaly_rate);
        let pick = |rng: &mut ChaCha20Rng, exclude: Option<usize>| -> usize {
            let (pf, pd) = if label {
                (cfg.flag_given_anomaly, cfg.discrepancy_given_anomaly)
            } else {
                (cfg.flag_given_normal, cfg.discrepancy_given_normal)
            };
            let flagged = usize::from(rng.gen_bool(pf));
            let discrepant = usize::from(rng.gen_bool(pd));
            let pool = &pools[flagged][discrepant];
            for _ in 0..16 {
                let candidate = if pool.is_empty() {
                    rng.gen_range(0..total_accounts)
                } else {
                    pool[rng.gen_range(0..pool.len())]
                };
                if Some(candidate) != exclude || total_accounts == 1 {
                    return candidate;
                }
            }
            (exclude.unwrap_or(0) + 1) % total_accounts
        };
        let ordering = pick(&mut rng, None);
        let beneficiary = pick(&mut rng, Some(ordering));

        let day = rng.gen_range(0..WINDOW_DAYS);
        let hour = if label && rng.gen_bool(0.35) {
            rng.gen_range(0..6)
        } else {
            rng.gen_range(0..24)
        };
        let timestamp = start
            + Duration::days(day)
            + Duration::hours(hour)
            + Duration::seconds(rng.gen_range(0..3600));
        let amount = if label {
            anomalous_amount.sample(&mut rng)
        } else {
            normal_amount.sample(&mut rng)
        };
        let settle_ccy = rng.gen_range(0..CURRENCIES.len());
        let instr_ccy = if rng.gen_bool(0.8) {
            settle_ccy
        } else {
            rng.gen_range(0..CURRENCIES.len())
        };
        let settlement_amount = Amount::from_f64(amount);
        let instructed_amount =
            Amount::from_f64(settlement_amount.as_f64() * USD_RATES[instr_ccy] / USD_RATES[settle_ccy]);

        let mut uetr_bytes = [0u8; 16];
        rng.fill(&mut uetr_bytes);
        let uetr = uuid::Builder::from_random_bytes(uetr_bytes)
            .into_uuid()
            .hyphenated()
            .to_string();
        let reference: String = (0..12)
            .map(|_| char::from(b"ABCDEFGHJKLMNPQRSTUVWXYZ0123456789"[rng.gen_range(0..34)]))
            .collect();

        let o = &planned[ordering];
        let b = &planned[beneficiary];
        let o_record = &banks[&bank_name(o.bank)][o.index];
        let b_record = &banks[&bank_name(b.bank)][b.index];
        transactions.push(TransactionRecord {
            message_id: format!("MSG{t:09}"),
            uetr,
            transaction_reference: format!("TRF{reference}"),
            timestamp,
            sender: bank_name(o.bank),
            receiver: bank_name(b.bank),
            ordering_account: o_record.account.clone(),
            ordering_name: o.identity.name.clone(),
            ordering_street: o.identity.street.clone(),
            ordering_country_city_zip: o.identity.country_city_zip.clone(),
            beneficiary_account: b_record.account.clone(),
            beneficiary_name: b.identity.name.clone(),
            beneficiary_street: b.identity.street.clone(),
            beneficiary_country_city_zip: b.identity.country_city_zip.clone(),
            settlement_date: timestamp.date_naive(),
            settlement_currency: CURRENCIES[settle_ccy].to_string(),
            settlement_amount,
            instructed_currency: CURRENCIES[instr_ccy].to_string(),
            instructed_amount,
            label,
        });
    }

    Ok(Dataset { transactions, banks })
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), DataError> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(DataError::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

fn records<R: Read>(reader: R, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut iter = rdr.records();
    let Some(first) = iter.next() else {
        return Err(DataError::Header {
            expected: header.join(","),
            found: String::new(),
        });
    };
    check_header(&first?, header)?;
    let mut out = Vec::new();
    for rec in iter {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(DataError::Arity { line, expected: header.len(), found: rec.len() });
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn field_err(line: u64, field: &'static str, value: &str, reason: impl fmt::Display) -> DataError {
    DataError::Field {
        line,
        field,
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_currency(line: u64, field: &'static str, v: &str) -> Result<String, DataError> {
    if v.len() != 3 || !v.bytes().all(|b| b.is_ascii_uppercase()) {
        return Err(field_err(line, field, v, "expected a 3-letter currency code"));
    }
    Ok(v.to_string())
}

fn parse_amount(line: u64, field: &'static str, v: &str) -> Result<Amount, DataError> {
    v.parse().map_err(|e| field_err(line, field, v, e))
}

fn non_empty(line: u64, field: &'static str, v: &str) -> Result<String, DataError> {
    if v.is_empty() {
        return Err(field_err(line, field, v, "must not be empty"));
    }
    Ok(v.to_string())
}

pub fn parse_transactions<R: Read>(reader: R) -> Result<Vec<TransactionRecord>, DataError> {
    let rows = records(reader, &TRANSACTION_HEADER)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, r) in rows {
        let message_id = non_empty(line, "MessageId", &r[0])?;
        if !seen.insert(message_id.clone()) {
            return Err(DataError::Duplicate { line, what: "MessageId", value: message_id });
        }
        if r[1].chars().count() != 36 {
            return Err(field_err(line, "UETR", &r[1], "expected 36 characters"));
        }
        let timestamp = DateTime::parse_from_rfc3339(&r[3])
            .map_err(|e| field_err(line, "Timestamp", &r[3], e))?
            .with_timezone(&Utc);
        let settlement_date = NaiveDate::parse_from_str(&r[14], DATE_FORMAT)
            .map_err(|e| field_err(line, "SettlementDate", &r[14], e))?;
        let label = match &r[19] {
            "0" => false,
            "1" => true,
            other => return Err(field_err(line, "Label", other, "expected 0 or 1")),
        };
        out.push(TransactionRecord {
            message_id,
            uetr: r[1].to_string(),
            transaction_reference: r[2].to_string(),
            timestamp,
            sender: BankId(non_empty(line, "Sender", &r[4])?),
            receiver: BankId(non_empty(line, "Receiver", &r[5])?),
            ordering_account: non_empty(line, "OrderingAccount", &r[6])?,
            ordering_name: r[7].to_string(),
            ordering_street: r[8].to_string(),
            ordering_country_city_zip: r[9].to_string(),
            beneficiary_account: non_empty(line, "BeneficiaryAccount", &r[10])?,
            beneficiary_name: r[11].to_string(),
            beneficiary_street: r[12].to_string(),
            beneficiary_country_city_zip: r[13].to_string(),
            settlement_date,
            settlement_currency: parse_currency(line, "SettlementCurrency", &r[15])?,
            settlement_amount: parse_amount(line, "SettlementAmount", &r[16])?,
            instructed_currency: parse_currency(line, "InstructedCurrency", &r[17])?,
            instructed_amount: parse_amount(line, "InstructedAmount", &r[18])?,
            label,
        });
    }
    Ok(out)
}

pub fn parse_accounts<R: Read>(reader: R) -> Result<Vec<AccountRecord>, DataError> {
    let rows = records(reader, &ACCOUNT_HEADER)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, r) in rows {
        let bank = BankId(non_empty(line, "Bank", &r[0])?);
        let account = non_empty(line, "Account", &r[1])?;
        if !seen.insert((bank.clone(), account.clone())) {
            return Err(DataError::Duplicate { line, what: "account", value: account });
        }
        let flag: u8 = r[5]
            .parse()
            .map_err(|e| field_err(line, "Flags", &r[5], e))?;
        if flag > MAX_FLAG {
            return Err(field_err(line, "Flags", &r[5], format!("flag exceeds {MAX_FLAG}")));
        }
        out.push(AccountRecord {
            bank,
            account,
            name: r[2].to_string(),
            street: r[3].to_string(),
            country_city_zip: r[4].to_string(),
            flag,
        });
    }
    Ok(out)
}

pub fn write_transactions_to<W: Write>(writer: W, rows: &[TransactionRecord]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRANSACTION_HEADER)?;
    for t in rows {
        w.write_record([
            t.message_id.as_str(),
            t.uetr.as_str(),
            t.transaction_reference.as_str(),
            &t.timestamp.format(TIMESTAMP_FORMAT).to_string(),
            t.sender.as_str(),
            t.receiver.as_str(),
            t.ordering_account.as_str(),
            t.ordering_name.as_str(),
            t.ordering_street.as_str(),
            t.ordering_country_city_zip.as_str(),
            t.beneficiary_account.as_str(),
            t.beneficiary_name.as_str(),
            t.beneficiary_street.as_str(),
            t.beneficiary_country_city_zip.as_str(),
            &t.settlement_date.format(DATE_FORMAT).to_string(),
            t.settlement_currency.as_str(),
            &t.settlement_amount.to_string(),
            t.instructed_currency.as_str(),
            &t.instructed_amount.to_string(),
            if t.label { "1" } else { "0" },
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_accounts_to<W: Write>(writer: W, rows: &[AccountRecord]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ACCOUNT_HEADER)?;
    for a in rows {
        w.write_record([
            a.bank.as_str(),
            a.account.as_str(),
            a.name.as_str(),
            a.street.as_str(),
            a.country_city_zip.as_str(),
            &a.flag.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_transactions(path: &Path) -> Result<Vec<TransactionRecord>, DataError> {
    parse_transactions(File::open(path)?)
}

pub fn write_transactions(path: &Path, rows: &[TransactionRecord]) -> Result<(), DataError> {
    write_transactions_to(File::create(path)?, rows)
}

pub fn read_accounts(path: &Path) -> Result<Vec<AccountRecord>, DataError> {
    parse_accounts(File::open(path)?)
}

pub fn write_accounts(path: &Path, rows: &[AccountRecord]) -> Result<(), DataError> {
    write_accounts_to(File::create(path)?, rows)
}

pub fn bank_file_name(bank: &BankId) -> String {
    format!("bank_{bank}.csv")
}

/// Writes `transactions.csv` and one `bank_<ID>.csv` per bank into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    write_transactions(&dir.join("transactions.csv"), &data.transactions)?;
    for (bank, rows) in &data.banks {
        write_accounts(&dir.join(bank_file_name(bank)), rows)?;
    }
    Ok(())
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let transactions = read_transactions(&dir.join("transactions.csv"))?;
    let mut banks = BTreeMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(id) = name.strip_prefix("bank_").and_then(|s| s.strip_suffix(".csv")) else {
            continue;
        };
        banks.insert(BankId(id.to_string()), read_accounts(&entry.path())?);
    }
    Ok(Dataset { transactions, banks })
}

/// Hour of day (UTC) of a transaction timestamp.
pub fn hour_of_day(t: &TransactionRecord) -> u32 {
    t.timestamp.hour()
}
