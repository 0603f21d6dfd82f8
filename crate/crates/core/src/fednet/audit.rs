//! Leakage ledger built from the router log, and the audit that checks each
//! party saw only what its leakage function allows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use aho_corasick::AhoCorasick;

use super::{Envelope, FlagTriple, Message, MessageKind, PartyId, SampleId};
use crate::datamodel::BankId;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SrvView {
    /// Set sizes v_i, read off the PSI queries.
    pub client_sizes: BTreeMap<BankId, usize>,
    pub training_messages: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FcView {
    /// s_i per client.
    pub triple_counts: BTreeMap<BankId, usize>,
    pub triples: Vec<(BankId, FlagTriple)>,
    pub training_messages: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientView {
    pub srv_set_size: Option<usize>,
    pub psi_points: usize,
    /// (SampleId, account number) pairs received.
    pub pairs: Vec<(SampleId, String)>,
}

#[derive(Debug, Clone, Default)]
pub struct LeakageLedger {
    pub srv_view: SrvView,
    pub fc_view: FcView,
    pub client_views: BTreeMap<BankId, ClientView>,
    entries: Vec<Envelope>,
}

impl LeakageLedger {
    pub fn from_log(log: &[Envelope]) -> Self {
        let mut ledger = LeakageLedger { entries: log.to_vec(), ..Self::default() };
        for e in log {
            let Ok(msg) = bincode::deserialize::<Message>(&e.payload) else {
                continue;
            };
            match (&e.to, &e.from, msg) {
                (PartyId::Srv, PartyId::Client(b), Message::PsiQuery(q)) => {
                    ledger.srv_view.client_sizes.insert(b.clone(), q.points.len());
                }
                (PartyId::Srv, PartyId::Fc, _) => ledger.srv_view.training_messages += 1,
                (PartyId::Fc, PartyId::Client(b), Message::FlagTriples(ts)) => {
                    *ledger.fc_view.triple_counts.entry(b.clone()).or_default() += ts.len();
                    ledger.fc_view.triples.extend(ts.into_iter().map(|t| (b.clone(), t)));
                }
                (PartyId::Fc, PartyId::Srv, _) => ledger.fc_view.training_messages += 1,
                (PartyId::Client(b), _, Message::PsiReply(r)) => {
                    let v = ledger.client_views.entry(b.clone()).or_default();
                    v.srv_set_size = Some(r.server_set.len());
                    v.psi_points += r.evaluated.len();
                }
                (PartyId::Client(b), _, Message::FlagRequest(items)) => {
                    let v = ledger.client_views.entry(b.clone()).or_default();
                    v.pairs.extend(items.into_iter().map(|i| (i.id, i.account)));
                }
                _ => {}
            }
        }
        ledger
    }

    pub fn entries(&self) -> &[Envelope] {
        &self.entries
    }
}

/// Ground truth the audit compares observations against.
#[derive(Debug, Clone, Default)]
pub struct AuditInputs {
    /// Every account number, name, street and country/city/zip string.
    pub identity_fields: BTreeSet<String>,
    /// Concatenated identity strings of DS_Srv.
    pub srv_identities: BTreeSet<String>,
    /// Account numbers each client holds.
    pub holdings: BTreeMap<BankId, BTreeSet<String>>,
    pub intersections: BTreeMap<BankId, BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub message_id: u64,
    pub from: PartyId,
    pub to: PartyId,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub messages_checked: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn names(&self, message_id: u64) -> bool {
        self.violations.iter().any(|v| v.message_id == message_id)
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return writeln!(f, "audit passed: {} messages checked, no leakage outside the permitted views", self.messages_checked);
        }
        writeln!(f, "audit failed: {} violation(s) in {} messages", self.violations.len(), self.messages_checked)?;
        for v in &self.violations {
            writeln!(f, "message {} ({} -> {}): {}", v.message_id, v.from, v.to, v.reason)?;
        }
        Ok(())
    }
}

fn permitted(from: &PartyId, to: &PartyId, kind: MessageKind) -> bool {
    use MessageKind::*;
    match (to, from) {
        (PartyId::Srv, PartyId::Client(_)) => kind == PsiQuery,
        (PartyId::Srv, PartyId::Fc) => matches!(kind, AlignReply | TrainReply | InferenceReply),
        (PartyId::Fc, PartyId::Client(_)) => kind == FlagTriples,
        (PartyId::Fc, PartyId::Srv) => matches!(kind, AlignRequest | Train | InferenceRequest),
        (PartyId::Client(_), PartyId::Srv) => matches!(kind, PsiReply | FlagRequest),
        _ => false,
    }
}

fn scanner<'a>(patterns: impl IntoIterator<Item = &'a String>) -> Option<(AhoCorasick, Vec<&'a String>)> {
    let pats: Vec<&String> = patterns.into_iter().filter(|p| !p.is_empty()).collect();
    if pats.is_empty() {
        return None;
    }
    let ac = AhoCorasick::new(pats.iter().map(|p| p.as_bytes())).expect("patterns build");
    Some((ac, pats))
}

pub fn audit_leakage(ledger: &LeakageLedger, inputs: &AuditInputs) -> AuditReport {
    let fc_scan = scanner(&inputs.identity_fields);
    let mut client_scans = BTreeMap::new();
    let mut report = AuditReport { messages_checked: ledger.entries.len(), violations: Vec::new() };

    for e in &ledger.entries {
        let mut flag = |reason: String| {
            report.violations.push(Violation { message_id: e.id, from: e.from.clone(), to: e.to.clone(), reason })
        };
        if !permitted(&e.from, &e.to, e.kind) {
            flag(format!("{} may not observe {:?} from {}", e.to, e.kind, e.from));
        }
        let decoded = bincode::deserialize::<Message>(&e.payload);
        match &decoded {
            Ok(m) if m.kind() != e.kind => flag(format!("payload is {:?}, logged as {:?}", m.kind(), e.kind)),
            Err(_) => flag("payload does not decode".to_string()),
            _ => {}
        }

        match &e.to {
            PartyId::Fc => {
                if let Some((ac, pats)) = &fc_scan {
                    if let Some(hit) = ac.find(&e.payload) {
                        flag(format!("identity string {:?} visible to fc", pats[hit.pattern().as_usize()]));
                    }
                }
            }
            PartyId::Client(bank) => {
                match &decoded {
                    Ok(Message::FlagRequest(items)) => {
                        let held = inputs.holdings.get(bank);
                        if let Some(i) = items.iter().find(|i| !held.is_some_and(|h| h.contains(&i.account))) {
                            flag(format!("request names account {} which {bank} does not hold", i.account));
                        }
                    }
                    Ok(Message::PsiReply(r)) if r.server_set.len() != inputs.srv_identities.len() => flag(format!(
                        "server set of {} elements, expected |DS_Srv| = {}",
                        r.server_set.len(),
                        inputs.srv_identities.len()
                    )),
                    _ => {}
                }
                let scan = client_scans.entry(bank.clone()).or_insert_with(|| {
                    let own = inputs.intersections.get(bank);
                    scanner(inputs.srv_identities.iter().filter(|s| !own.is_some_and(|o| o.contains(*s))))
                });
                if let Some((ac, pats)) = scan {
                    if let Some(hit) = ac.find(&e.payload) {
                        flag(format!("non-intersection element {:?} visible to {bank}", pats[hit.pattern().as_usize()]));
                    }
                }
            }
            PartyId::Srv => {}
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::datamodel::{generate_synthetic, SynthConfig};
    use crate::ldp::rr_matrix;

    fn run_with(faults: &[Fault]) -> Federation {
        let data = generate_synthetic(&SynthConfig {
            n_transactions: 300,
            n_banks: 3,
            accounts_per_bank: 25,
            anomaly_rate: 0.2,
            seed: 21,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut fed = Federation::new(&data, 9).unwrap();
        fed.set_faults(faults);
        fed.run_discrepancy_phase().unwrap();
        fed.run_flag_collection(&FlagCollectionConfig::new(rr_matrix(1.0, 2).unwrap())).unwrap();
        fed.run_training_phase(&TrainingConfig {
            boost: BoostParams { n_trees: 1, n_bins: 4, ..BoostParams::default() },
            key_bits: 512,
            compare_srv_only: false,
            ..TrainingConfig::default()
        })
        .unwrap();
        fed
    }

    #[test]
    fn nominal_run_passes() {
        let fed = run_with(&[]);
        let report = fed.audit();
        assert!(report.passed(), "{report}");
        assert_eq!(report.messages_checked, fed.router().log().len());
    }

    #[test]
    fn ledger_views() {
        let fed = run_with(&[]);
        let ledger = fed.ledger();
        assert_eq!(ledger.srv_view.client_sizes.values().copied().collect::<Vec<_>>(), vec![25, 25, 25]);
        let s: usize = ledger.fc_view.triple_counts.values().sum();
        assert_eq!(s, 600);
        assert_eq!(ledger.fc_view.triples.len(), 600);
        for (bank, view) in &ledger.client_views {
            assert_eq!(view.psi_points, 25);
            let held = &fed.audit_inputs().holdings[bank];
            assert!(view.pairs.iter().all(|(_, a)| held.contains(a)));
        }
    }

    #[test]
    fn each_fault_is_named() {
        for fault in [Fault::CopyRawFlagToSrv, Fault::IdentityToFc, Fault::NonIntersectionToClient] {
            let fed = run_with(&[fault]);
            let injected = fed.router().injected();
            assert_eq!(injected.len(), 1, "{fault:?}");
            let report = fed.audit();
            assert!(!report.passed(), "{fault:?}");
            assert!(report.names(injected[0].1), "{fault:?}: {report}");
        }
    }

    #[test]
    fn fc_sees_no_identity_strings() {
        let fed = run_with(&[]);
        let inputs = fed.audit_inputs();
        let fc_bytes: Vec<&[u8]> = fed
            .router()
            .log()
            .iter()
            .filter(|e| e.to == PartyId::Fc)
            .map(|e| e.payload.as_slice())
            .collect();
        assert!(!fc_bytes.is_empty());
        let hits = inputs
            .identity_fields
            .iter()
            .filter(|f| fc_bytes.iter().any(|p| p.windows(f.len()).any(|w| w == f.as_bytes())))
            .count();
        assert_eq!(hits, 0);
    }
}
