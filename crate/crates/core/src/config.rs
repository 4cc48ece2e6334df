//! Flat `key = value` settings files with `#` comments.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `(key, value)` pairs.
pub type Pairs = Vec<(String, String)>;

/// Parses settings text. Blank lines and `#` comments are ignored; a
/// repeated key keeps its last value.
pub fn parse_pairs(text: &str) -> Result<Pairs> {
    let mut out: Pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: "config".into(),
            index: n + 1,
            message: format!("expected `key = value`, got {:?}", line),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                file: "config".into(),
                index: n + 1,
                message: "empty key".into(),
            });
        }
        let value = value.trim().to_string();
        match out.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => out.push((key.to_string(), value)),
        }
    }
    Ok(out)
}

pub fn render_pairs(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse {:?}: {}", value, e)))
}

/// A settings group that can be written as pairs and updated key by key.
pub trait Settings {
    /// Applies one key. Returns `Ok(false)` if the key does not belong to
    /// this group.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    fn entries(&self) -> Pairs;

    /// Applies every pair, rejecting keys this group does not know.
    fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            if !self.set(k, v)? {
                return Err(Error::config(k.as_str(), "unknown key"));
            }
        }
        Ok(())
    }
}

pub(crate) fn pair(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}
