//! `key = value` config files.
//!
//! Each key names a long flag of the subcommand being run. Values are
//! turned into flags and placed ahead of the user's own flags; a key the
//! user also passes on the command line is skipped, so flags win.

use clap::Command;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`", i + 1));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.push(Entry { line: i + 1, key: key.to_string(), value: value.trim().to_string() });
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<Entry>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Flags for `entries` as accepted by `sub`, skipping keys already present
/// in `user` (the remaining command-line arguments).
pub fn to_flags(sub: &Command, entries: &[Entry], user: &[String]) -> Result<Vec<String>, String> {
    let given = |long: &str| {
        let flag = format!("--{long}");
        user.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
    };
    let mut flags = Vec::new();
    for e in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(e.key.as_str()) && e.key != "config")
            .ok_or_else(|| format!("unknown config key {:?} (line {}) for `{}`", e.key, e.line, sub.get_name()))?;
        if given(&e.key) {
            continue;
        }
        if arg.get_action().takes_values() {
            flags.push(format!("--{}", e.key));
            flags.push(e.value.clone());
        } else {
            match e.value.as_str() {
                "true" => flags.push(format!("--{}", e.key)),
                "false" => {}
                other => return Err(format!("config key {:?} expects true or false, got {other:?}", e.key)),
            }
        }
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks() {
        let e = parse("# header\n\nseed = 7  # inline\n epochs1=3\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("seed", "7", 3));
        assert_eq!((e[1].key.as_str(), e[1].value.as_str()), ("epochs1", "3"));
        assert!(parse("seed 7").is_err());
    }
}
