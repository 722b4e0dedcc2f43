//! `key = value` config files spliced into argv ahead of the explicit flags.

use std::ffi::OsString;
use std::path::Path;

#[derive(Debug)]
pub struct ConfigError(pub String);

/// Parses TOML-style `key = value` lines. Blank lines, `#` comments and
/// `[section]` headers are skipped; surrounding quotes on values are dropped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('[') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError(format!("line {}: expected `key = value`", n + 1)));
        };
        let key = k.trim().replace('_', "-");
        let value = v.trim().trim_matches('"').to_string();
        if key.is_empty() {
            return Err(ConfigError(format!("line {}: empty key", n + 1)));
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Flags derived from config entries; `true` and `false` toggle switches.
pub fn as_flags(entries: &[(String, String)]) -> Vec<OsString> {
    let mut out = Vec::new();
    for (k, v) in entries {
        match v.as_str() {
            "false" => {}
            "true" => out.push(format!("--{k}").into()),
            _ => {
                out.push(format!("--{k}").into());
                out.push(v.into());
            }
        }
    }
    out
}

pub fn load(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    parse(&text)
}

/// `[bin, subcommand, config flags.., explicit args..]`. Global flags are
/// accepted after the subcommand and later occurrences override earlier ones,
/// so every explicit flag wins over the file.
pub fn splice(argv: &[OsString], subcommand: &str, config_flags: Vec<OsString>) -> Vec<OsString> {
    let mut out = vec![argv[0].clone(), subcommand.into()];
    out.extend(config_flags);
    let mut removed = false;
    for a in &argv[1..] {
        if !removed && a == subcommand {
            removed = true;
            continue;
        }
        out.push(a.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_sections_and_quotes() {
        let e = parse("# c\n[train]\nlr = 0.01\nout_ckpt = \"a b.ckpt\"\n\nno-prune = true\n").unwrap();
        assert_eq!(
            e,
            vec![
                ("lr".into(), "0.01".into()),
                ("out-ckpt".into(), "a b.ckpt".into()),
                ("no-prune".into(), "true".into())
            ]
        );
        assert!(parse("novalue\n").is_err());
    }

    #[test]
    fn switches_expand_without_values() {
        let f = as_flags(&[("no-prune".into(), "true".into()), ("x".into(), "false".into()), ("m".into(), "3".into())]);
        assert_eq!(f, vec![OsString::from("--no-prune"), "--m".into(), "3".into()]);
    }

    #[test]
    fn splice_puts_explicit_args_last() {
        let argv: Vec<OsString> = ["p", "--seed", "1", "train", "--lr", "2"].iter().map(OsString::from).collect();
        let out = splice(&argv, "train", vec!["--lr".into(), "9".into(), "--seed".into(), "5".into()]);
        let s: Vec<_> = out.iter().map(|a| a.to_str().unwrap()).collect();
        assert_eq!(s, ["p", "train", "--lr", "9", "--seed", "5", "--seed", "1", "--lr", "2"]);
    }
}
