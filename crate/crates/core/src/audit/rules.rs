use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gatekeeper::RequestKind;
use super::AuditError;

/// Rule set shipped with the crate.
pub const DEFAULT_RULES_JSON: &str = include_str!("../../rules/default_rules.json");

/// Every `MODULE.action` the broker writes to the Brokers' Log.
pub const BROKER_ACTIONS: &[&str] = &[
    "AACM.register",
    "KMM.issue_key",
    "AACM.authenticate",
    "DMM.queue_review",
    "DMM.review_decision",
    "MCP.store",
    "AACM.store_policy",
    "MCP.delete",
    "AACM.check_access",
    "MCP.retrieve",
    "AACM.emergency_check",
    "DMM.emergency_release",
    "AACM.revoke",
    "DMM.access_request",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Low,
    Medium,
    High,
    Critical,
}

fn default_window() -> u64 {
    30
}

/// Declares which Gatekeeper request kinds may trigger a broker action and
/// which request fields must equal which action fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectionRule {
    pub rule_id: String,
    pub event_kind: String,
    pub gk_kinds: Vec<RequestKind>,
    /// Gatekeeper field to Brokers' Log field. The Gatekeeper field `user`
    /// names the requesting user; every other name is a request parameter.
    #[serde(default)]
    pub fields: BTreeMap<String, String>,
    /// Event kind that must have been logged, with a positive decision, for
    /// the same request before this action.
    #[serde(default)]
    pub requires_prior: Option<String>,
    #[serde(default = "default_window")]
    pub window_secs: u64,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleSet {
    rules: Vec<InspectionRule>,
}

impl RuleSet {
    pub fn new(rules: Vec<InspectionRule>) -> Result<Self, AuditError> {
        if rules.is_empty() {
            return Err(AuditError::InvalidRules("rule set is empty".into()));
        }
        let mut ids = HashSet::new();
        for rule in &rules {
            if !ids.insert(rule.rule_id.as_str()) {
                return Err(AuditError::InvalidRules(format!("duplicate rule id {}", rule.rule_id)));
            }
            let valid_kind = rule
                .event_kind
                .split_once('.')
                .is_some_and(|(m, a)| matches!(m, "DMM" | "AACM" | "KMM" | "MCP") && !a.is_empty());
            if !valid_kind {
                return Err(AuditError::InvalidRules(format!(
                    "rule {}: bad event kind {:?}",
                    rule.rule_id, rule.event_kind
                )));
            }
            if rule.gk_kinds.is_empty() {
                return Err(AuditError::InvalidRules(format!("rule {} lists no request kinds", rule.rule_id)));
            }
        }
        Ok(Self { rules })
    }

    pub fn from_json(text: &str) -> Result<Self, AuditError> {
        let rules: Vec<InspectionRule> =
            serde_json::from_str(text).map_err(|e| AuditError::InvalidRules(e.to_string()))?;
        Self::new(rules)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn default_rules() -> Self {
        Self::from_json(DEFAULT_RULES_JSON).expect("bundled rules are valid")
    }

    /// Same rules with every pairing window set to `secs`.
    pub fn with_window(mut self, secs: u64) -> Self {
        for rule in &mut self.rules {
            rule.window_secs = secs;
        }
        self
    }

    pub fn rules(&self) -> &[InspectionRule] {
        &self.rules
    }

    pub fn for_event<'a>(&'a self, event_kind: &'a str) -> impl Iterator<Item = &'a InspectionRule> + 'a {
        self.rules.iter().filter(move |r| r.event_kind == event_kind)
    }

    /// Action kinds from `kinds` that no rule covers.
    pub fn uncovered<'a>(&self, kinds: &[&'a str]) -> Vec<&'a str> {
        kinds
            .iter()
            .copied()
            .filter(|k| self.for_event(k).next().is_none())
            .collect()
    }
}
