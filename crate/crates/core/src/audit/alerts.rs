use chrono::{DateTime, Utc};
use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};

use super::rules::Severity;
use super::AuditError;
use crate::db::{now_text, Database};
use crate::ids::UserId;

/// Recipient name of the system administrator's queue.
pub const ADMIN_RECIPIENT: &str = "admin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlertKind {
    UnrequestedAction,
    FieldMismatch,
    MissingAccessCheck,
    UncoveredAction,
    MalformedEntry,
    ChainBroken,
    Truncation,
    InspectorHealth,
    /// Break-glass notification to the patient; not an intrusion finding.
    EmergencyAccess,
}

impl AlertKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AlertKind::UnrequestedAction => "unrequested-action",
            AlertKind::FieldMismatch => "field-mismatch",
            AlertKind::MissingAccessCheck => "missing-access-check",
            AlertKind::UncoveredAction => "uncovered-action",
            AlertKind::MalformedEntry => "malformed-entry",
            AlertKind::ChainBroken => "chain-broken",
            AlertKind::Truncation => "truncation",
            AlertKind::InspectorHealth => "inspector-health",
            AlertKind::EmergencyAccess => "emergency-access",
        }
    }
}

/// Something the inspector (or the broker, for break-glass use) wants
/// both the patient and the administrator to see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub rule_id: String,
    pub kind: AlertKind,
    pub severity: Severity,
    pub bl_seq: Option<u64>,
    pub gk_seq: Option<u64>,
    /// Free-form locator for records without a sequence number.
    pub locator: Option<String>,
    pub patient: Option<UserId>,
    pub description: String,
}

impl Finding {
    /// One alert per (rule, offending entry).
    pub fn dedup_key(&self) -> String {
        format!(
            "{}|{}|bl:{}|gk:{}|{}",
            self.rule_id,
            self.kind.as_str(),
            self.bl_seq.map_or(String::new(), |s| s.to_string()),
            self.gk_seq.map_or(String::new(), |s| s.to_string()),
            self.locator.as_deref().unwrap_or("")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: String,
    #[serde(flatten)]
    pub finding: Finding,
    pub recipients: Vec<String>,
    pub raised_at: DateTime<Utc>,
}

impl Alert {
    pub fn is_intrusion(&self) -> bool {
        self.finding.kind != AlertKind::EmergencyAccess
    }
}

/// Persistent alert queues keyed by recipient.
#[derive(Debug, Clone)]
pub struct AlertStore {
    db: Database,
}

impl AlertStore {
    pub fn new(db: Database) -> Self {
        Self { db }
    }

    /// Stores the finding unless an alert with the same dedup key exists.
    /// Returns the new alert, or `None` for a duplicate.
    pub fn raise(&self, finding: Finding) -> Result<Option<Alert>, AuditError> {
        let mut recipients = Vec::new();
        if let Some(p) = &finding.patient {
            recipients.push(p.to_string());
        }
        recipients.push(ADMIN_RECIPIENT.to_string());
        let mut id = [0u8; 16];
        rand::RngCore::fill_bytes(&mut rand::rngs::OsRng, &mut id);
        let alert = Alert {
            alert_id: hex::encode(id),
            finding,
            recipients,
            raised_at: Utc::now(),
        };
        let body = serde_json::to_string(&alert).expect("alert serializes");
        let inserted = self.db.transaction(|tx| {
            let n = tx.execute(
                "INSERT OR IGNORE INTO alerts (alert_id, dedup_key, body, raised_at) VALUES (?1, ?2, ?3, ?4)",
                params![alert.alert_id, alert.finding.dedup_key(), body, now_text()],
            )?;
            if n == 1 {
                for r in &alert.recipients {
                    tx.execute(
                        "INSERT INTO alert_recipients (alert_id, recipient) VALUES (?1, ?2)",
                        params![alert.alert_id, r],
                    )?;
                }
            }
            Ok::<_, rusqlite::Error>(n == 1)
        })?;
        Ok(inserted.then_some(alert))
    }

    pub fn all(&self) -> Result<Vec<Alert>, AuditError> {
        self.query("SELECT body FROM alerts ORDER BY rowid", None)
    }

    pub fn for_recipient(&self, recipient: &str) -> Result<Vec<Alert>, AuditError> {
        self.query(
            "SELECT a.body FROM alerts a JOIN alert_recipients r ON a.alert_id = r.alert_id
             WHERE r.recipient = ?1 ORDER BY a.rowid",
            Some(recipient),
        )
    }

    fn query(&self, sql: &str, arg: Option<&str>) -> Result<Vec<Alert>, AuditError> {
        let bodies: Vec<String> = self.db.with(|conn| {
            let mut stmt = conn.prepare(sql)?;
            let rows = match arg {
                Some(a) => stmt.query_map([a], |row| row.get(0))?.collect::<Result<Vec<_>, _>>()?,
                None => stmt.query_map([], |row| row.get(0))?.collect::<Result<Vec<_>, _>>()?,
            };
            Ok(rows)
        })?;
        Ok(bodies.iter().filter_map(|b| serde_json::from_str(b).ok()).collect())
    }

    pub fn acknowledge(&self, alert_id: &str, recipient: &str) -> Result<bool, AuditError> {
        let n = self.db.with(|conn| {
            conn.execute(
                "UPDATE alert_recipients SET acknowledged = 1 WHERE alert_id = ?1 AND recipient = ?2",
                params![alert_id, recipient],
            )
        })?;
        Ok(n == 1)
    }

    pub fn is_acknowledged(&self, alert_id: &str, recipient: &str) -> Result<Option<bool>, AuditError> {
        Ok(self.db.with(|conn| {
            conn.query_row(
                "SELECT acknowledged FROM alert_recipients WHERE alert_id = ?1 AND recipient = ?2",
                params![alert_id, recipient],
                |row| row.get::<_, bool>(0),
            )
            .optional()
        })?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finding(seq: u64) -> Finding {
        Finding {
            rule_id: "retrieve-requested".into(),
            kind: AlertKind::UnrequestedAction,
            severity: Severity::Critical,
            bl_seq: Some(seq),
            gk_seq: None,
            locator: None,
            patient: Some(UserId("u-patient".into())),
            description: "test".into(),
        }
    }

    #[test]
    fn dedup_and_delivery() {
        let store = AlertStore::new(Database::in_memory().unwrap());
        let a = store.raise(finding(4)).unwrap().unwrap();
        assert!(store.raise(finding(4)).unwrap().is_none());
        store.raise(finding(5)).unwrap().unwrap();
        assert_eq!(store.all().unwrap().len(), 2);
        assert_eq!(store.for_recipient("u-patient").unwrap().len(), 2);
        assert_eq!(store.for_recipient(ADMIN_RECIPIENT).unwrap().len(), 2);
        assert!(store.acknowledge(&a.alert_id, "u-patient").unwrap());
        assert_eq!(store.is_acknowledged(&a.alert_id, "u-patient").unwrap(), Some(true));
        assert_eq!(store.is_acknowledged(&a.alert_id, ADMIN_RECIPIENT).unwrap(), Some(false));
    }
}
