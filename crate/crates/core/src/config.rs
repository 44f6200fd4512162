//! JSON config loading with field-level error messages.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Parses a config, reporting the dotted path of the first bad field.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<root>".to_string() } else { path };
        Error::config(field, e.into_inner().to_string())
    })
}

pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Joins relative paths onto `base`; absolute paths are kept.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Directory relative paths in a config file are resolved against.
pub fn config_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        #[allow(dead_code)]
        rate: f64,
    }

    #[derive(Debug, Deserialize)]
    struct Outer {
        #[allow(dead_code)]
        inner: Inner,
    }

    #[test]
    fn names_the_bad_field() {
        match parse_config::<Outer>(r#"{"inner": {"rate": "fast"}}"#) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "inner.rate"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_config::<Outer>(r#"{"inner": {"rate": 1.0, "typo": 2}}"#) {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "inner.typo");
                assert!(message.contains("unknown field"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
