// SPDX-License-Identifier: Apache-2.0

use std::fmt;

/// Protection level applied to files under a path prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShieldMode {
    /// Confidentiality and integrity: chunked authenticated encryption.
    EncryptAuth,
    /// Integrity only: chunks are authenticated but stored in the clear.
    AuthOnly,
    /// No protection; bytes pass through untouched.
    Passthrough,
}

impl ShieldMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShieldMode::EncryptAuth => "encrypt-auth",
            ShieldMode::AuthOnly => "auth-only",
            ShieldMode::Passthrough => "passthrough",
        }
    }
}

impl fmt::Display for ShieldMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ShieldMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "encrypt-auth" => Ok(ShieldMode::EncryptAuth),
            "auth-only" => Ok(ShieldMode::AuthOnly),
            "passthrough" => Ok(ShieldMode::Passthrough),
            other => Err(format!("unknown shield mode {other:?}")),
        }
    }
}

/// One prefix-to-protection rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathPolicy {
    pub prefix: String,
    pub mode: ShieldMode,
}

impl PathPolicy {
    pub fn new(prefix: impl Into<String>, mode: ShieldMode) -> Self {
        PathPolicy {
            prefix: prefix.into(),
            mode,
        }
    }

    /// Whether `path` falls under this prefix at a path-component boundary,
    /// so `/data` covers `/data` and `/data/x` but not `/database`.
    fn covers(&self, path: &str) -> bool {
        let p = self.prefix.trim_end_matches('/');
        if p.is_empty() {
            return true;
        }
        match path.strip_prefix(p) {
            Some("") => true,
            Some(rest) => rest.starts_with('/'),
            None => false,
        }
    }
}

/// Pick the protection mode for `path`: the longest covering prefix wins;
/// a path no rule covers passes through unprotected.
pub fn resolve(policies: &[PathPolicy], path: &str) -> ShieldMode {
    policies
        .iter()
        .filter(|p| p.covers(path))
        .max_by_key(|p| p.prefix.trim_end_matches('/').len())
        .map(|p| p.mode)
        .unwrap_or(ShieldMode::Passthrough)
}

/// Parse a policy file: one rule per line, `prefix<TAB>mode`. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_policy_file(text: &str) -> Result<Vec<PathPolicy>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((prefix, mode)) = line.split_once('\t') else {
            return Err(format!("line {}: expected prefix<TAB>mode", i + 1));
        };
        if prefix.is_empty() {
            return Err(format!("line {}: empty prefix", i + 1));
        }
        let mode = mode
            .parse::<ShieldMode>()
            .map_err(|e| format!("line {}: {e}", i + 1))?;
        out.push(PathPolicy::new(prefix, mode));
    }
    Ok(out)
}

pub fn render_policy_file(policies: &[PathPolicy]) -> String {
    let mut out = String::new();
    for p in policies {
        out.push_str(&p.prefix);
        out.push('\t');
        out.push_str(p.mode.as_str());
        out.push('\n');
    }
    out
}
