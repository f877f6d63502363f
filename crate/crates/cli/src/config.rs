//! Run configuration layered as defaults, `--config` file, environment,
//! then command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clutter4d::io::KeyValues;

use crate::error::{CliError, Result};

pub const ENV_PREFIX: &str = "CLUTTER4D_";
pub const CONFIG_FILE: &str = "config.txt";
const COMMAND_KEY: &str = "command";

#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

pub const fn req(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: None,
        help,
    }
}

pub const fn opt(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help,
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('-', "_"))
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: String,
    values: KeyValues,
}

impl RunConfig {
    pub fn resolve(
        command: &str,
        keys: &[Key],
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut values = KeyValues::new();
        for k in keys {
            if let Some(d) = k.default {
                values.set(k.name, d);
            }
        }
        let known = |name: &str| keys.iter().any(|k| k.name == name);
        if let Some(path) = file {
            let kv = KeyValues::read(path)?;
            for (k, v) in &kv.0 {
                if k == COMMAND_KEY {
                    if v != command {
                        return Err(CliError::config(format!(
                            "{} was written by `{v}`, not `{command}`",
                            path.display()
                        )));
                    }
                } else if known(k) {
                    values.set(k, v);
                } else {
                    return Err(CliError::config(format!("unknown key `{k}` in {}", path.display())));
                }
            }
        }
        for k in keys {
            if let Some(v) = env(&env_name(k.name)) {
                values.set(k.name, v);
            }
        }
        for (k, v) in flags {
            values.set(k, v);
        }
        for k in keys {
            if values.get(k.name).is_none() {
                return Err(CliError::config(format!("missing required `--{}`", k.name)));
            }
        }
        Ok(Self {
            command: command.to_string(),
            values,
        })
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| CliError::config(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.str(key).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::config(format!("bad list item `{s}` for `{key}`")))
            })
            .collect()
    }

    pub fn array<T: FromStr, const N: usize>(&self, key: &str) -> Result<[T; N]> {
        let v = self.list(key)?;
        let n = v.len();
        v.try_into()
            .map_err(|_| CliError::config(format!("`{key}` needs {N} comma-separated values, got {n}")))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.str(key))
    }

    /// Empty string reads as `None`.
    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        let s = self.str(key);
        (!s.is_empty()).then(|| PathBuf::from(s))
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.values.clone();
        kv.set(COMMAND_KEY, &self.command);
        kv
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.to_key_values().write(dir.join(CONFIG_FILE))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: [Key; 3] = [req("out-dir", ""), opt("lambda", "1", ""), opt("shape", "4,4,4,8", "")];

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        std::fs::write(&file, "command = synth\nlambda = 2\nout-dir = a\n").unwrap();
        let env = |k: &str| (k == "CLUTTER4D_LAMBDA").then(|| "3".to_string());
        let c = RunConfig::resolve("synth", &KEYS, Some(&file), env, &[]).unwrap();
        assert_eq!(c.get::<f64>("lambda").unwrap(), 3.0);
        let flags = [("lambda".to_string(), "4".to_string())];
        let c = RunConfig::resolve("synth", &KEYS, Some(&file), env, &flags).unwrap();
        assert_eq!(c.get::<f64>("lambda").unwrap(), 4.0);
        assert_eq!(c.array::<usize, 4>("shape").unwrap(), [4, 4, 4, 8]);
    }

    #[test]
    fn missing_and_foreign_keys_are_config_errors() {
        assert!(RunConfig::resolve("synth", &KEYS, None, |_| None, &[]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        std::fs::write(&file, "command = train\nout-dir = a\n").unwrap();
        assert!(RunConfig::resolve("synth", &KEYS, Some(&file), |_| None, &[]).is_err());
        std::fs::write(&file, "bogus = 1\nout-dir = a\n").unwrap();
        assert!(RunConfig::resolve("synth", &KEYS, Some(&file), |_| None, &[]).is_err());
    }

    #[test]
    fn env_names() {
        assert_eq!(env_name("out-dir"), "CLUTTER4D_OUT_DIR");
    }
}
