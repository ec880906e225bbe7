//! Flat `key=value` configuration text.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Consumers take the keys they understand and [`KeyValues::finish`]
//! rejects whatever is left.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let body = line.trim();
            if !body.is_empty() && !body.starts_with('#') {
                let Some((k, v)) = body.split_once('=') else {
                    return Err(Error::Parse {
                        offset,
                        msg: format!("expected key=value, got {body:?}"),
                    });
                };
                let key = k.trim().to_string();
                if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                    return Err(Error::Parse {
                        offset,
                        msg: format!("duplicate key {key:?}"),
                    });
                }
            }
            offset += line.len() as u64;
        }
        Ok(Self { entries })
    }

    pub fn from_pairs<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        Self {
            entries: pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes `key` and parses it into `slot` when present.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *slot = raw
                .parse()
                .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))?;
        }
        Ok(())
    }

    /// Like [`KeyValues::take`] for comma-separated lists.
    pub fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *slot = parse_list(key, &raw)?;
        }
        Ok(())
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
    }
}

pub fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
        })
        .collect()
}

pub fn format_list<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Renders pairs as config text, one `key=value` per line.
pub fn render(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_leftovers() {
        let mut kv = KeyValues::parse("# comment\n a = 3\n\nlist=1, 2,3\nextra=x\n").unwrap();
        let mut a = 0usize;
        let mut list: Vec<u32> = vec![];
        kv.take("a", &mut a).unwrap();
        kv.take_list("list", &mut list).unwrap();
        assert_eq!((a, list), (3, vec![1, 2, 3]));
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("extra"), "{err}");
    }

    #[test]
    fn reports_offsets_and_bad_values() {
        match KeyValues::parse("a=1\nnonsense\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        assert!(KeyValues::parse("a=1\na=2\n").is_err());
        let mut kv = KeyValues::parse("a=x").unwrap();
        let mut a = 0usize;
        assert!(matches!(kv.take("a", &mut a), Err(Error::Config(_))));
    }

    #[test]
    fn render_round_trips() {
        let pairs = vec![("a".to_string(), "1".to_string()), ("b".to_string(), format_list(&[1.5, 2.0]))];
        let kv = KeyValues::parse(&render(&pairs)).unwrap();
        assert_eq!(kv, KeyValues::from_pairs(pairs));
    }
}
