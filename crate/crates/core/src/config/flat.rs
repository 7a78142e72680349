//! Flat `section.key = value` text, one entry per line, keys sorted.
//!
//! The text is valid TOML using dotted keys, so parsing goes through the
//! `toml` crate; emitting walks the value tree so that nested tables come out
//! as prefixed keys instead of `[section]` headers.

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub fn to_flat_text<T: Serialize>(value: &T) -> Result<String> {
    let tree = toml::Value::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = String::new();
    emit(&mut out, "", &tree)?;
    Ok(out)
}

fn emit(out: &mut String, prefix: &str, value: &toml::Value) -> Result<()> {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                emit(out, &key, v)?;
            }
        }
        other => {
            if prefix.is_empty() {
                return Err(Error::Config("top-level value must be a table".into()));
            }
            out.push_str(prefix);
            out.push_str(" = ");
            out.push_str(&other.to_string());
            out.push('\n');
        }
    }
    Ok(())
}

/// Parses flat text; unknown keys are rejected when `T` denies them.
pub fn from_flat_text<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        rate: f64,
        widths: Vec<usize>,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        name: String,
        seed: u64,
        inner: Inner,
    }

    fn sample() -> Outer {
        Outer {
            name: "run".into(),
            seed: 7,
            inner: Inner {
                rate: 1e-8,
                widths: vec![3, 4],
            },
        }
    }

    #[test]
    fn emits_prefixed_keys() {
        let text = to_flat_text(&sample()).unwrap();
        assert!(text.contains("inner.rate = "));
        assert!(text.contains("inner.widths = [3, 4]\n"));
        assert!(text.contains("name = \"run\"\n"));
        assert!(!text.contains('['.to_string().repeat(2).as_str()));
    }

    #[test]
    fn reparse_and_reemit_is_byte_identical() {
        let text = to_flat_text(&sample()).unwrap();
        let back: Outer = from_flat_text(&text).unwrap();
        assert_eq!(back, sample());
        assert_eq!(to_flat_text(&back).unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = to_flat_text(&sample()).unwrap();
        text.push_str("inner.typo = 1\n");
        assert!(from_flat_text::<Outer>(&text).is_err());
    }
}
