use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use rusqlite::OptionalExtension;
use serde::{Deserialize, Serialize};

use super::alerts::{Alert, AlertKind, AlertStore, Finding};
use super::chain::{verify_lines, BreakReason, BrokerLog, BrokerLogEntry, ChainHead, ChainStatus};
use super::gatekeeper::{Gatekeeper, GatekeeperEntry, GatekeeperRecord};
use super::rules::{InspectionRule, RuleSet, Severity};
use super::AuditError;
use crate::db::Database;
use crate::ids::UserId;

const STATE_KEY: &str = "inspector";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct PriorCheck {
    event_kind: String,
    file_id: Option<String>,
    positive: bool,
}

/// Incremental matching state. Persisted between polls so a restart
/// neither re-reports nor skips entries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineState {
    /// Last Brokers' Log sequence number inspected.
    pub cursor: u64,
    /// Consumption keys with the timestamp of their Gatekeeper request.
    consumed: BTreeMap<String, i64>,
    /// Positive or negative decisions logged per request.
    checks: BTreeMap<u64, (i64, Vec<PriorCheck>)>,
    /// Latest action timestamp seen, used for pruning.
    latest_ts: i64,
}

fn field_value<'a>(gk: &'a GatekeeperEntry, name: &str) -> Option<&'a str> {
    if name == "user" {
        Some(gk.user.as_str())
    } else {
        gk.param(name)
    }
}

impl EngineState {
    fn prune(&mut self, max_window_ms: i64) {
        let horizon = self.latest_ts.saturating_sub(max_window_ms + 60_000);
        self.consumed.retain(|_, ts| *ts >= horizon);
        self.checks.retain(|_, (ts, _)| *ts >= horizon);
    }

    /// Evaluates one parsed action against the Gatekeeper view. Returns at
    /// most one finding, for the first failed check.
    fn evaluate(
        &mut self,
        entry: &BrokerLogEntry,
        gk: &HashMap<u64, GatekeeperEntry>,
        rules: &RuleSet,
    ) -> Option<Finding> {
        let event_kind = entry.event_kind();
        self.latest_ts = self.latest_ts.max(entry.ts_ms);
        let patient = entry.param("patient").map(|p| UserId(p.to_string()));
        let finding = |rule_id: &str, kind, severity, gk_seq, description: String| Finding {
            rule_id: rule_id.to_string(),
            kind,
            severity,
            bl_seq: Some(entry.seq),
            gk_seq,
            locator: None,
            patient: patient.clone(),
            description,
        };

        let candidates: Vec<&InspectionRule> = rules.for_event(&event_kind).collect();
        let Some(first) = candidates.first() else {
            return Some(finding(
                "coverage",
                AlertKind::UncoveredAction,
                Severity::High,
                None,
                format!("action {event_kind} at entry {} is not covered by any rule", entry.seq),
            ));
        };
        let request = entry.param("request").and_then(|r| r.parse::<u64>().ok());
        let Some(req) = request.and_then(|r| gk.get(&r)) else {
            return Some(finding(
                &first.rule_id,
                AlertKind::UnrequestedAction,
                first.severity,
                request,
                format!(
                    "{event_kind} at entry {} has no matching Gatekeeper request",
                    entry.seq
                ),
            ));
        };
        let Some(rule) = candidates.iter().find(|r| r.gk_kinds.contains(&req.kind)) else {
            return Some(finding(
                &first.rule_id,
                AlertKind::UnrequestedAction,
                first.severity,
                Some(req.seq),
                format!(
                    "{event_kind} at entry {} was not requested: request {} is a {} request",
                    entry.seq, req.seq, req.kind
                ),
            ));
        };
        let age = entry.ts_ms - req.ts_ms;
        if age < 0 || age > rule.window_secs as i64 * 1000 || req.broker_id != entry.broker_id {
            return Some(finding(
                &rule.rule_id,
                AlertKind::UnrequestedAction,
                rule.severity,
                Some(req.seq),
                format!(
                    "{event_kind} at entry {} falls outside the pairing window of request {}",
                    entry.seq, req.seq
                ),
            ));
        }
        for (gk_field, bl_field) in &rule.fields {
            let expected = field_value(req, gk_field);
            let actual = entry.param(bl_field);
            if expected.is_none() || expected != actual {
                return Some(finding(
                    &rule.rule_id,
                    AlertKind::FieldMismatch,
                    rule.severity,
                    Some(req.seq),
                    format!(
                        "{event_kind} at entry {}: {bl_field}={} but request {} has {gk_field}={}",
                        entry.seq,
                        actual.unwrap_or("<missing>"),
                        req.seq,
                        expected.unwrap_or("<missing>")
                    ),
                ));
            }
        }
        let object = entry
            .param("blob_id")
            .or_else(|| entry.param("file_id"))
            .unwrap_or("");
        let consume_key = format!("{}|{event_kind}|{object}", req.seq);
        if self.consumed.contains_key(&consume_key) {
            return Some(finding(
                &rule.rule_id,
                AlertKind::UnrequestedAction,
                rule.severity,
                Some(req.seq),
                format!(
                    "{event_kind} at entry {} repeats an action already performed for request {}",
                    entry.seq, req.seq
                ),
            ));
        }
        if let Some(prior_kind) = &rule.requires_prior {
            let file = entry.param("file_id");
            let satisfied = self.checks.get(&req.seq).is_some_and(|(_, checks)| {
                checks.iter().any(|c| {
                    c.positive
                        && &c.event_kind == prior_kind
                        && match (&c.file_id, file) {
                            (Some(a), Some(b)) => a == b,
                            _ => true,
                        }
                })
            });
            if !satisfied {
                return Some(finding(
                    &rule.rule_id,
                    AlertKind::MissingAccessCheck,
                    rule.severity,
                    Some(req.seq),
                    format!(
                        "{event_kind} at entry {} has no preceding positive {prior_kind} for request {}",
                        entry.seq, req.seq
                    ),
                ));
            }
        }
        self.consumed.insert(consume_key, req.ts_ms);
        if let Some(decision) = entry.param("decision") {
            self.checks
                .entry(req.seq)
                .or_insert_with(|| (req.ts_ms, Vec::new()))
                .1
                .push(PriorCheck {
                    event_kind,
                    file_id: entry.param("file_id").map(str::to_string),
                    positive: matches!(decision, "allow" | "approve"),
                });
        }
        None
    }
}

fn chain_finding(status: &ChainStatus) -> Option<Finding> {
    let ChainStatus::Broken { at, reason } = status else {
        return None;
    };
    let (kind, description) = match reason {
        BreakReason::Truncated => (
            AlertKind::Truncation,
            format!("Brokers' Log ends before the recorded head; entries from {at} are missing"),
        ),
        other => (
            AlertKind::ChainBroken,
            format!("hash chain broken at entry {at} ({other:?})"),
        ),
    };
    Some(Finding {
        rule_id: "chain-integrity".into(),
        kind,
        severity: Severity::Critical,
        bl_seq: Some(*at),
        gk_seq: None,
        locator: None,
        patient: None,
        description,
    })
}

fn malformed_gk(records: &[GatekeeperRecord]) -> Vec<Finding> {
    records
        .iter()
        .filter_map(|r| match r {
            GatekeeperRecord::Malformed { broker_id, index } => Some(Finding {
                rule_id: "gatekeeper-integrity".into(),
                kind: AlertKind::MalformedEntry,
                severity: Severity::High,
                bl_seq: None,
                gk_seq: None,
                locator: Some(format!("gk:{broker_id}:{index}")),
                patient: None,
                description: format!("unreadable Gatekeeper record {index} in {broker_id}"),
            }),
            GatekeeperRecord::Entry(_) => None,
        })
        .collect()
}

fn gk_index(records: &[GatekeeperRecord]) -> HashMap<u64, GatekeeperEntry> {
    records
        .iter()
        .filter_map(|r| match r {
            GatekeeperRecord::Entry(e) => Some((e.seq, e.clone())),
            GatekeeperRecord::Malformed { .. } => None,
        })
        .collect()
}

fn max_window_ms(rules: &RuleSet) -> i64 {
    rules.rules().iter().map(|r| r.window_secs as i64 * 1000).max().unwrap_or(30_000)
}

/// Runs the engine over `bl_lines[state.cursor..]` and advances the cursor.
fn scan(
    state: &mut EngineState,
    gk_records: &[GatekeeperRecord],
    bl_lines: &[Vec<u8>],
    head: Option<&ChainHead>,
    rules: &RuleSet,
) -> Vec<Finding> {
    let mut findings = malformed_gk(gk_records);
    let gk = gk_index(gk_records);
    let available = bl_lines.len() as u64;
    if available < state.cursor {
        findings.push(Finding {
            rule_id: "chain-integrity".into(),
            kind: AlertKind::Truncation,
            severity: Severity::Critical,
            bl_seq: Some(available + 1),
            gk_seq: None,
            locator: None,
            patient: None,
            description: format!(
                "Brokers' Log shrank to {available} entries after {} were inspected",
                state.cursor
            ),
        });
    }
    for index in state.cursor..available {
        let seq = index + 1;
        match BrokerLogEntry::from_line(&bl_lines[index as usize]) {
            Some(entry) => findings.extend(state.evaluate(&entry, &gk, rules)),
            None => findings.push(Finding {
                rule_id: "chain-integrity".into(),
                kind: AlertKind::MalformedEntry,
                severity: Severity::High,
                bl_seq: Some(seq),
                gk_seq: None,
                locator: None,
                patient: None,
                description: format!("Brokers' Log entry {seq} is not a canonical record"),
            }),
        }
    }
    state.cursor = state.cursor.max(available);
    let to = available.max(head.map_or(0, |h| h.seq));
    findings.extend(chain_finding(&verify_lines(bl_lines, head, 1, to)));
    state.prune(max_window_ms(rules));
    findings
}

/// One-shot inspection of complete logs. Every returned finding names the
/// offending entry.
pub fn inspect(
    gk_records: &[GatekeeperRecord],
    bl_lines: &[Vec<u8>],
    head: Option<&ChainHead>,
    rules: &RuleSet,
) -> Vec<Finding> {
    scan(&mut EngineState::default(), gk_records, bl_lines, head, rules)
}

/// Continuous inspector with a persisted cursor.
pub struct Inspector {
    gatekeeper: Arc<Gatekeeper>,
    broker_log: Arc<BrokerLog>,
    rules: RuleSet,
    alerts: AlertStore,
    db: Database,
    state: Mutex<EngineState>,
}

impl std::fmt::Debug for Inspector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Inspector").field("cursor", &self.state.lock().cursor).finish()
    }
}

impl Inspector {
    pub fn new(
        gatekeeper: Arc<Gatekeeper>,
        broker_log: Arc<BrokerLog>,
        rules: RuleSet,
        alerts: AlertStore,
        db: Database,
    ) -> Result<Self, AuditError> {
        let state = db
            .with(|conn| {
                conn.query_row(
                    "SELECT state FROM inspector_state WHERE name = ?1",
                    [STATE_KEY],
                    |row| row.get::<_, String>(0),
                )
                .optional()
            })?
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        Ok(Self {
            gatekeeper,
            broker_log,
            rules,
            alerts,
            db,
            state: Mutex::new(state),
        })
    }

    pub fn cursor(&self) -> u64 {
        self.state.lock().cursor
    }

    /// Inspects everything appended since the last poll and stores new
    /// alerts. Returns only alerts that were not raised before.
    pub fn poll(&self) -> Result<Vec<Alert>, AuditError> {
        let mut state = self.state.lock();
        // The Brokers' Log is read first: every action it contains was
        // preceded by its Gatekeeper record, so the request is visible in
        // the second read.
        let logs = self
            .broker_log
            .lines()
            .and_then(|lines| Ok((lines, self.broker_log.head()?)))
            .and_then(|(lines, head)| Ok((lines, head, self.gatekeeper.entries()?)));
        let (lines, head, gk) = match logs {
            Ok(v) => v,
            Err(e) => {
                let finding = Finding {
                    rule_id: "inspector-health".into(),
                    kind: AlertKind::InspectorHealth,
                    severity: Severity::High,
                    bl_seq: None,
                    gk_seq: None,
                    locator: Some(format!("cursor:{}", state.cursor)),
                    patient: None,
                    description: format!("audit logs unreadable: {e}"),
                };
                return Ok(self.alerts.raise(finding)?.into_iter().collect());
            }
        };
        let mut next = state.clone();
        let findings = scan(&mut next, &gk, &lines, head.as_ref(), &self.rules);
        let mut raised = Vec::new();
        for f in findings {
            if let Some(alert) = self.alerts.raise(f)? {
                raised.push(alert);
            }
        }
        let text = serde_json::to_string(&next).expect("state serializes");
        self.db.with(|conn| {
            conn.execute(
                "INSERT INTO inspector_state (name, state) VALUES (?1, ?2)
                 ON CONFLICT(name) DO UPDATE SET state = excluded.state",
                [STATE_KEY, text.as_str()],
            )
        })?;
        *state = next;
        Ok(raised)
    }

    /// Polls on a background thread until the handle is stopped or dropped.
    pub fn spawn(self: Arc<Self>, interval: Duration) -> InspectorHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::Builder::new()
            .name("hab-inspector".into())
            .spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    if let Err(e) = self.poll() {
                        tracing::warn!(error = %e, "inspector poll failed");
                    }
                    let mut slept = Duration::ZERO;
                    while slept < interval && !flag.load(Ordering::SeqCst) {
                        let step = (interval - slept).min(Duration::from_millis(20));
                        std::thread::sleep(step);
                        slept += step;
                    }
                }
            })
            .expect("spawn inspector thread");
        InspectorHandle {
            stop,
            thread: Some(thread),
        }
    }
}

#[derive(Debug)]
pub struct InspectorHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl InspectorHandle {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for InspectorHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
