//! `--config FILE` support: values from the subcommand's TOML table are spliced
//! into the argument list ahead of the user's own flags, so explicit flags win.

use std::ffi::OsString;
use std::path::Path;

use neuromod_core::{Error, Result};

const GLOBAL_WITH_VALUE: [&str; 2] = ["--config", "--threads"];

fn config_path(args: &[OsString]) -> Option<(usize, OsString)> {
    for (i, a) in args.iter().enumerate().skip(1) {
        let s = a.to_string_lossy();
        if s == "--config" {
            return args.get(i + 1).map(|v| (i, v.clone()));
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some((i, v.into()));
        }
    }
    None
}

/// Index of the subcommand name.
fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if GLOBAL_WITH_VALUE.contains(&s.as_ref()) {
            i += 2;
        } else if s.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

fn flag_values(key: &str, value: &toml::Value) -> Result<Vec<OsString>> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &toml::Value| -> Result<String> {
        match v {
            toml::Value::String(s) => Ok(s.clone()),
            toml::Value::Integer(i) => Ok(i.to_string()),
            toml::Value::Float(f) => Ok(f.to_string()),
            other => Err(Error::Validation(format!("config key '{key}' has unsupported value {other}"))),
        }
    };
    Ok(match value {
        toml::Value::Boolean(true) => vec![flag.into()],
        toml::Value::Boolean(false) => vec![],
        toml::Value::Array(items) => {
            let mut out = Vec::new();
            for v in items {
                out.push(flag.clone().into());
                out.push(scalar(v)?.into());
            }
            out
        }
        v => vec![flag.into(), scalar(v)?.into()],
    })
}

pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some((_, path)) = config_path(&args) else {
        return Ok(args);
    };
    let Some(sub) = subcommand_index(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let name = args[sub].to_string_lossy().into_owned();
    let Some(section) = table.get(&name) else {
        return Ok(args);
    };
    let section = section
        .as_table()
        .ok_or_else(|| Error::Validation(format!("config entry '{name}' must be a table")))?;
    let mut injected = Vec::new();
    for (k, v) in section {
        injected.extend(flag_values(k, v)?);
    }
    let mut out = args[..=sub].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn no_config_is_untouched() {
        let a = os(&["neuromod", "select", "--fraction", "0.1"]);
        assert_eq!(expand(a.clone()).unwrap(), a);
    }

    #[test]
    fn injects_before_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[select]\nfraction = 0.3\nmode = \"global-top\"\n[score]\nepsilon = 1.0\n").unwrap();
        let a = os(&["neuromod", "--config", p.to_str().unwrap(), "select", "--fraction", "0.1"]);
        let out: Vec<String> = expand(a).unwrap().iter().map(|s| s.to_string_lossy().into_owned()).collect();
        assert_eq!(&out[4..], ["--fraction", "0.3", "--mode", "global-top", "--fraction", "0.1"]);
    }

    #[test]
    fn arrays_and_bools() {
        assert_eq!(
            flag_values("selection", &toml::Value::Array(vec!["a".into(), "b".into()])).unwrap(),
            os(&["--selection", "a", "--selection", "b"])
        );
        assert_eq!(flag_values("json", &toml::Value::Boolean(true)).unwrap(), os(&["--json"]));
        assert!(flag_values("json", &toml::Value::Boolean(false)).unwrap().is_empty());
        assert_eq!(flag_values("max_iters", &toml::Value::Integer(5)).unwrap(), os(&["--max-iters", "5"]));
    }

    #[test]
    fn missing_file_is_io() {
        let a = os(&["neuromod", "--config", "/nonexistent/c.toml", "select"]);
        assert!(expand(a).unwrap_err().is_io());
    }
}
