//! `--config FILE`: a JSON object whose entries become command-line flags
//! placed ahead of the user's own, so that explicit flags win.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use serde_json::Value;

use crate::error::CliError;

/// Removes `--config FILE` (or `--config=FILE`) from `args`.
fn take_config(args: &mut Vec<OsString>) -> Result<Option<PathBuf>, CliError> {
    let mut found = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy().into_owned();
        if a == "--" {
            break;
        }
        if a == "--config" {
            if i + 1 >= args.len() {
                return Err(CliError::Usage("--config needs a file argument".into()));
            }
            found = Some(PathBuf::from(args.remove(i + 1)));
            args.remove(i);
        } else if let Some(path) = a.strip_prefix("--config=") {
            found = Some(PathBuf::from(path));
            args.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(found)
}

fn flags_from(value: &Value, origin: &std::path::Path) -> Result<Vec<OsString>, CliError> {
    let bad = |msg: String| CliError::Usage(format!("{}: {msg}", origin.display()));
    let obj = value.as_object().ok_or_else(|| bad("config must be a JSON object".into()))?;
    let mut flags = Vec::new();
    for (key, v) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Bool(true) => flags.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::Number(n) => flags.extend([flag.into(), n.to_string().into()]),
            Value::String(s) => flags.extend([flag.into(), s.into()]),
            Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|item| match item {
                        Value::Number(n) => Ok(n.to_string()),
                        Value::String(s) => Ok(s.clone()),
                        _ => Err(bad(format!("`{key}` must hold numbers or strings"))),
                    })
                    .collect::<Result<_, _>>()?;
                flags.extend([flag.into(), parts.join(",").into()]);
            }
            Value::Object(_) => return Err(bad(format!("`{key}` must not be an object"))),
        }
    }
    Ok(flags)
}

/// Expands `--config` into flags inserted right after the subcommand path.
pub fn expand(mut args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = take_config(&mut args)? else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let flags = flags_from(&value, &path)?;
    let at = args
        .iter()
        .skip(1)
        .position(|a| a.to_string_lossy().starts_with('-'))
        .map_or(args.len(), |p| p + 1);
    args.splice(at..at, flags);
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_flags_precede_explicit_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"iters": 50, "relax_first_last": true, "fp_activations": false, "sizes": [8, 32]}"#)
            .unwrap();
        let args = os(&["mrecg", "--config", path.to_str().unwrap(), "study", "batch", "--iters", "7"]);
        let out = expand(args).unwrap();
        assert_eq!(
            out,
            os(&["mrecg", "study", "batch", "--iters", "50", "--relax-first-last", "--sizes", "8,32", "--iters", "7"])
        );
    }

    #[test]
    fn no_config_is_identity() {
        let args = os(&["mrecg", "plan", "--k", "2"]);
        assert_eq!(expand(args.clone()).unwrap(), args);
    }

    #[test]
    fn rejects_non_object() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, "[1]").unwrap();
        assert!(expand(os(&["mrecg", "--config", path.to_str().unwrap(), "plan"])).is_err());
    }
}
