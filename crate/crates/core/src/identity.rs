//! Client identities and the broker-side manifest that assigns them.
//!
//! Clients never state their own uid or label. They present an opaque token
//! at connect time and the broker looks it up in the client manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// MAC label attached to every client and every registered service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityLabel {
    System,
    TrustedApp,
    UntrustedApp,
}

impl SecurityLabel {
    pub const ALL: [SecurityLabel; 3] = [
        SecurityLabel::System,
        SecurityLabel::TrustedApp,
        SecurityLabel::UntrustedApp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SecurityLabel::System => "system",
            SecurityLabel::TrustedApp => "trusted_app",
            SecurityLabel::UntrustedApp => "untrusted_app",
        }
    }
}

impl fmt::Display for SecurityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown security label `{0}`")]
pub struct UnknownLabel(pub String);

impl FromStr for SecurityLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "system" => Ok(SecurityLabel::System),
            "trusted_app" => Ok(SecurityLabel::TrustedApp),
            "untrusted_app" => Ok(SecurityLabel::UntrustedApp),
            other => Err(UnknownLabel(other.to_string())),
        }
    }
}

/// The trusted identity the broker stamps on every transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClientIdentity {
    pub uid: u32,
    pub label: SecurityLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("line {line}: expected `token uid label`")]
    Malformed { line: usize },
    #[error("line {line}: invalid uid `{value}`")]
    BadUid { line: usize, value: String },
    #[error("line {line}: {source}")]
    BadLabel { line: usize, source: UnknownLabel },
    #[error("line {line}: duplicate token `{token}`")]
    DuplicateToken { line: usize, token: String },
}

/// Maps connect tokens to identities. Loaded once at broker start.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientManifest {
    entries: BTreeMap<String, ClientIdentity>,
}

impl ClientManifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let [token, uid, label] = fields[..] else {
                return Err(ManifestError::Malformed { line });
            };
            let uid: u32 = uid.parse().map_err(|_| ManifestError::BadUid {
                line,
                value: uid.to_string(),
            })?;
            let label: SecurityLabel = label
                .parse()
                .map_err(|source| ManifestError::BadLabel { line, source })?;
            if entries
                .insert(token.to_string(), ClientIdentity { uid, label })
                .is_some()
            {
                return Err(ManifestError::DuplicateToken {
                    line,
                    token: token.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, token: impl Into<String>, identity: ClientIdentity) {
        self.entries.insert(token.into(), identity);
    }

    pub fn resolve(&self, token: &str) -> Option<ClientIdentity> {
        self.entries.get(token).copied()
    }

    /// First token (in token order) configured for `uid`.
    pub fn token_for_uid(&self, uid: u32) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, id)| id.uid == uid)
            .map(|(t, _)| t.as_str())
    }

    pub fn identities(&self) -> impl Iterator<Item = ClientIdentity> + '_ {
        self.entries.values().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_manifest_and_skips_comments() {
        let m = ClientManifest::parse("# clients\nsys 1000 system\n\napp 10001 untrusted_app\n")
            .unwrap();
        assert_eq!(
            m.resolve("sys"),
            Some(ClientIdentity { uid: 1000, label: SecurityLabel::System })
        );
        assert_eq!(m.resolve("app").unwrap().label, SecurityLabel::UntrustedApp);
        assert_eq!(m.resolve("nope"), None);
        assert_eq!(m.token_for_uid(10001), Some("app"));
    }

    #[test]
    fn rejects_bad_lines() {
        assert_eq!(
            ClientManifest::parse("a 1").unwrap_err(),
            ManifestError::Malformed { line: 1 }
        );
        assert!(matches!(
            ClientManifest::parse("a x system"),
            Err(ManifestError::BadUid { line: 1, .. })
        ));
        assert!(matches!(
            ClientManifest::parse("a 1 root"),
            Err(ManifestError::BadLabel { line: 1, .. })
        ));
        assert!(matches!(
            ClientManifest::parse("a 1 system\na 2 system"),
            Err(ManifestError::DuplicateToken { line: 2, .. })
        ));
    }

    #[test]
    fn label_round_trips_through_str() {
        for label in SecurityLabel::ALL {
            assert_eq!(label.as_str().parse::<SecurityLabel>().unwrap(), label);
        }
    }
}
