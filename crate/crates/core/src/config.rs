//! `key = value` configuration files.
//!
//! Grammar: one setting per line, `key = value`; blank lines and lines whose
//! first non-space character is `#` are ignored; a `#` after a value starts a
//! trailing comment. Keys are dotted paths such as `model.embed_dim`.

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks() {
        let kv = parse_kv("# header\n\nepochs = 3  # trailing\n model.depth=2\n").unwrap();
        assert_eq!(
            kv,
            vec![("epochs".into(), "3".into()), ("model.depth".into(), "2".into())]
        );
        assert!(parse_kv("novalue\n").is_err());
        assert!(parse_kv(" = 4\n").is_err());
    }
}
