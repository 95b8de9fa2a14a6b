//! Flat `key=value` text used for parameter and experiment files.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Maps each key to `(line number, raw value)`. Blank lines and lines
/// starting with `#` are skipped; a repeated key keeps its last value.
pub fn parse(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected key=value, found {line:?}"),
            });
        };
        out.insert(key.trim().to_string(), (i + 1, value.trim().to_string()));
    }
    Ok(out)
}
