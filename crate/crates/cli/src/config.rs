//! `--config` files: flat `key = value` lines whose keys are flag names.
//! The file's entries are spliced into the argument list right after the
//! subcommand, so a flag given on the command line wins.

use std::fs;
use std::path::Path;

use crate::error::{CliError, CliResult};

/// Flags that exclude each other; naming one on the command line drops all
/// of them from the file.
const GROUPS: &[&[&str]] = &[&["pmax-dbm", "pmax-dbw"]];

pub fn parse_config(text: &str, origin: &Path) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| CliError::Usage(format!("{}:{}: {why}", origin.display(), k + 1));
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        let key = key.trim().trim_start_matches("--");
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(bad("malformed key"));
        }
        if key == "config" {
            return Err(bad("config files cannot include other config files"));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Removes every `--config` occurrence from `argv` and returns the
/// remaining arguments together with the last config path given.
fn take_config(argv: &[String]) -> CliResult<(Vec<String>, Option<String>)> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let v = it.next().ok_or_else(|| CliError::Usage("--config needs a path".into()))?;
            path = Some(v.clone());
        } else if let Some(v) = a.strip_prefix("--config=") {
            path = Some(v.to_string());
        } else {
            rest.push(a.clone());
        }
    }
    Ok((rest, path))
}

fn flag_name(token: &str) -> Option<&str> {
    let name = token.strip_prefix("--")?;
    Some(name.split_once('=').map_or(name, |(n, _)| n))
}

/// The argument list with the config file's entries applied. `argv[0]` is
/// the program name.
pub fn merge_config(argv: &[String]) -> CliResult<Vec<String>> {
    let (mut rest, path) = take_config(argv)?;
    let Some(path) = path else {
        return Ok(rest);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let entries = parse_config(&text, path)?;

    let Some(sub) = rest.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(rest);
    };
    let given: Vec<&str> = rest[sub + 1..].iter().filter_map(|a| flag_name(a)).collect();
    let shadowed = |key: &str| {
        given.contains(&key)
            || GROUPS
                .iter()
                .any(|g| g.contains(&key) && g.iter().any(|k| given.contains(k)))
    };
    let mut tokens = Vec::new();
    for (key, value) in entries {
        if shadowed(&key) {
            continue;
        }
        match value.as_str() {
            "true" => tokens.push(format!("--{key}")),
            "false" => {}
            _ => {
                tokens.push(format!("--{key}"));
                tokens.push(value);
            }
        }
    }
    rest.splice(sub + 1..sub + 1, tokens);
    Ok(rest)
}
