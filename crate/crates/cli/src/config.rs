//! `key=value` config files, spliced into the argument list right after the
//! subcommand so that flags given on the command line take precedence.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got `{}`", i + 1, raw.trim());
        };
        let k = k.trim().trim_start_matches("--").replace('_', "-");
        if k.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Turns pairs into flags. `key=true` becomes a bare switch and
/// `key=false` is dropped.
pub fn to_args(pairs: &[(String, String)]) -> Vec<String> {
    let mut args = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => args.push(format!("--{k}")),
            "false" => {}
            _ => {
                args.push(format!("--{k}"));
                args.push(v.clone());
            }
        }
    }
    args
}

/// Removes `--config <path>` / `--config=<path>` from `argv` and inserts the
/// file's flags after the subcommand (the first non-flag argument).
pub fn expand(argv: Vec<String>) -> Result<Vec<String>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().context("--config needs a path")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .with_context(|| format!("reading config {path}"))?;
    let injected = to_args(&parse(&text).with_context(|| format!("config {path}"))?);
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map_or(rest.len(), |p| p + 2);
    rest.splice(sub..sub, injected);
    Ok(rest)
}
