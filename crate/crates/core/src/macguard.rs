//! Transfer guard for capabilities passed between clients.
//!
//! A transfer is described by three labels: the sender, the receiver, and the
//! owner of the service the handle points at. Any matching `neverallow` rule
//! denies; otherwise any matching `allow` rule permits; otherwise deny.
//!
//! `transfer.rules` grammar: `allow|neverallow <sender> <receiver> <owner>`,
//! where each pattern is a label name or `*`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::SecurityLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Allow,
    Neverallow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelPattern {
    Any,
    Exact(SecurityLabel),
}

impl LabelPattern {
    pub fn matches(self, label: SecurityLabel) -> bool {
        match self {
            LabelPattern::Any => true,
            LabelPattern::Exact(l) => l == label,
        }
    }

    fn overlaps(self, other: LabelPattern) -> bool {
        match (self, other) {
            (LabelPattern::Exact(a), LabelPattern::Exact(b)) => a == b,
            _ => true,
        }
    }
}

impl fmt::Display for LabelPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelPattern::Any => f.write_str("*"),
            LabelPattern::Exact(l) => l.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransferRule {
    pub kind: RuleKind,
    pub sender: LabelPattern,
    pub receiver: LabelPattern,
    pub owner: LabelPattern,
}

impl TransferRule {
    pub fn allow(sender: LabelPattern, receiver: LabelPattern, owner: LabelPattern) -> Self {
        Self { kind: RuleKind::Allow, sender, receiver, owner }
    }

    pub fn neverallow(sender: LabelPattern, receiver: LabelPattern, owner: LabelPattern) -> Self {
        Self { kind: RuleKind::Neverallow, sender, receiver, owner }
    }

    pub fn matches(&self, sender: SecurityLabel, receiver: SecurityLabel, owner: SecurityLabel) -> bool {
        self.sender.matches(sender) && self.receiver.matches(receiver) && self.owner.matches(owner)
    }
}

impl fmt::Display for TransferRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            RuleKind::Allow => "allow",
            RuleKind::Neverallow => "neverallow",
        };
        write!(f, "{kind} {} {} {}", self.sender, self.receiver, self.owner)
    }
}

/// An allow rule whose match set intersects a neverallow rule's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Conflict {
    pub allow: TransferRule,
    pub neverallow: TransferRule,
}

impl fmt::Display for Conflict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}` contradicts `{}`", self.allow, self.neverallow)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RulesetError {
    #[error("line {0}: expected `allow|neverallow <sender> <receiver> <owner>`")]
    Parse(usize),
    #[error("line {line}: unknown label pattern `{value}`")]
    BadPattern { line: usize, value: String },
}

pub type Ruleset = Vec<TransferRule>;

pub fn parse_ruleset(text: &str) -> Result<Ruleset, RulesetError> {
    let mut rules = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let [kind, sender, receiver, owner] = fields[..] else {
            return Err(RulesetError::Parse(line));
        };
        let kind = match kind {
            "allow" => RuleKind::Allow,
            "neverallow" => RuleKind::Neverallow,
            _ => return Err(RulesetError::Parse(line)),
        };
        let pattern = |s: &str| -> Result<LabelPattern, RulesetError> {
            if s == "*" {
                return Ok(LabelPattern::Any);
            }
            s.parse()
                .map(LabelPattern::Exact)
                .map_err(|_| RulesetError::BadPattern { line, value: s.to_string() })
        };
        rules.push(TransferRule {
            kind,
            sender: pattern(sender)?,
            receiver: pattern(receiver)?,
            owner: pattern(owner)?,
        });
    }
    Ok(rules)
}

/// The ruleset shipped with the broker: every transfer is allowed except a
/// system-owned handle moving between two untrusted apps.
pub fn default_ruleset() -> Ruleset {
    parse_ruleset(DEFAULT_RULES).expect("default ruleset parses")
}

pub const DEFAULT_RULES: &str = "\
# handles to app-owned services move freely
allow * * trusted_app
allow * * untrusted_app
# system-owned handles may move when a system or trusted party is involved
allow system * system
allow * system system
allow trusted_app * system
allow * trusted_app system
neverallow untrusted_app untrusted_app system
";

pub fn check_transfer(
    sender: SecurityLabel,
    receiver: SecurityLabel,
    owner: SecurityLabel,
    ruleset: &[TransferRule],
) -> Decision {
    let hit = |kind: RuleKind| {
        ruleset
            .iter()
            .any(|r| r.kind == kind && r.matches(sender, receiver, owner))
    };
    if hit(RuleKind::Neverallow) {
        Decision::Deny
    } else if hit(RuleKind::Allow) {
        Decision::Allow
    } else {
        Decision::Deny
    }
}

pub fn validate_ruleset(ruleset: &[TransferRule]) -> Vec<Conflict> {
    let (allows, nevers): (Vec<&TransferRule>, Vec<&TransferRule>) =
        ruleset.iter().partition(|r| r.kind == RuleKind::Allow);
    let mut conflicts = Vec::new();
    for a in &allows {
        for n in &nevers {
            if a.sender.overlaps(n.sender) && a.receiver.overlaps(n.receiver) && a.owner.overlaps(n.owner) {
                conflicts.push(Conflict { allow: **a, neverallow: **n });
            }
        }
    }
    conflicts
}

#[cfg(test)]
mod tests {
    use super::*;
    use SecurityLabel::*;

    const ANY: LabelPattern = LabelPattern::Any;

    fn triples() -> impl Iterator<Item = (SecurityLabel, SecurityLabel, SecurityLabel)> {
        SecurityLabel::ALL.into_iter().flat_map(|s| {
            SecurityLabel::ALL
                .into_iter()
                .flat_map(move |r| SecurityLabel::ALL.into_iter().map(move |o| (s, r, o)))
        })
    }

    // Conflict oracle: enumerate every label triple and intersect match sets.
    fn enumerate_conflicts(ruleset: &[TransferRule]) -> usize {
        let mut n = 0;
        for a in ruleset.iter().filter(|r| r.kind == RuleKind::Allow) {
            for nv in ruleset.iter().filter(|r| r.kind == RuleKind::Neverallow) {
                if triples().any(|(s, r, o)| a.matches(s, r, o) && nv.matches(s, r, o)) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn shipped_ruleset_examples() {
        let rules = default_ruleset();
        assert_eq!(check_transfer(UntrustedApp, UntrustedApp, System, &rules), Decision::Deny);
        assert_eq!(check_transfer(UntrustedApp, UntrustedApp, UntrustedApp, &rules), Decision::Allow);
        assert_eq!(check_transfer(TrustedApp, UntrustedApp, System, &rules), Decision::Allow);
        assert!(validate_ruleset(&rules).is_empty());
        assert_eq!(enumerate_conflicts(&rules), 0);
        let denied: Vec<_> = triples()
            .filter(|&(s, r, o)| check_transfer(s, r, o, &rules) == Decision::Deny)
            .collect();
        assert_eq!(denied, vec![(UntrustedApp, UntrustedApp, System)]);
    }

    #[test]
    fn empty_ruleset_denies_everything() {
        for (s, r, o) in triples() {
            assert_eq!(check_transfer(s, r, o, &[]), Decision::Deny);
        }
    }

    #[test]
    fn allow_all_conflicts_with_neverallow_once() {
        let rules = vec![
            TransferRule::allow(ANY, ANY, ANY),
            TransferRule::neverallow(
                LabelPattern::Exact(UntrustedApp),
                LabelPattern::Exact(UntrustedApp),
                LabelPattern::Exact(System),
            ),
        ];
        assert_eq!(validate_ruleset(&rules).len(), 1);
        assert_eq!(enumerate_conflicts(&rules), 1);
        let only_never = vec![rules[1]];
        assert!(validate_ruleset(&only_never).is_empty());
    }

    #[test]
    fn neverallow_dominates_any_added_allow() {
        let base = vec![TransferRule::neverallow(
            LabelPattern::Exact(UntrustedApp),
            ANY,
            LabelPattern::Exact(System),
        )];
        let patterns = [ANY, LabelPattern::Exact(System), LabelPattern::Exact(TrustedApp), LabelPattern::Exact(UntrustedApp)];
        for s in patterns {
            for r in patterns {
                for o in patterns {
                    let mut rules = base.clone();
                    rules.push(TransferRule::allow(s, r, o));
                    for (ts, tr, to) in triples() {
                        if base[0].matches(ts, tr, to) {
                            assert_eq!(check_transfer(ts, tr, to, &rules), Decision::Deny);
                        }
                    }
                    assert_eq!(validate_ruleset(&rules).len(), enumerate_conflicts(&rules));
                }
            }
        }
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_ruleset("allow * *").unwrap_err(), RulesetError::Parse(1));
        assert_eq!(parse_ruleset("deny * * *").unwrap_err(), RulesetError::Parse(1));
        assert!(matches!(
            parse_ruleset("\nallow * root *"),
            Err(RulesetError::BadPattern { line: 2, .. })
        ));
        let text: String = default_ruleset().iter().map(|r| format!("{r}\n")).collect();
        assert_eq!(parse_ruleset(&text).unwrap(), default_ruleset());
    }
}
