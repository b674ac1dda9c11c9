//! Flat `key = value` text shared by MDP specs, configs and task suites.

use crate::error::{FbError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse(text: &str, source_name: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(FbError::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = k.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(FbError::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg: format!("bad key `{key}`"),
            });
        }
        out.push(Entry { key: key.to_string(), value: unquote(v.trim()).to_string(), line: i + 1 });
    }
    Ok(out)
}

/// Parses space-separated `key=value` tokens from a single line.
pub fn parse_inline(line: &str, source_name: &str) -> Result<Vec<Entry>> {
    line.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| Entry { key: k.to_string(), value: v.to_string(), line: 1 })
                .ok_or_else(|| FbError::Parse {
                    source_name: source_name.to_string(),
                    line: 1,
                    msg: format!("expected key=value token, got `{tok}`"),
                })
        })
        .collect()
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

pub fn parse_value<T: std::str::FromStr>(e: &Entry, source_name: &str) -> Result<T> {
    e.value.parse().map_err(|_| FbError::Parse {
        source_name: source_name.to_string(),
        line: e.line,
        msg: format!("cannot parse `{}` for key `{}`", e.value, e.key),
    })
}
