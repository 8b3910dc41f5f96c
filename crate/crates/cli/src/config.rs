//! Flat key-value run configuration: values come from flags, then the config
//! file, then defaults. The resolved set is written next to the outputs so a
//! run can be repeated with `--config`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};

pub struct Resolver {
    command: &'static str,
    file: HashMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    /// Reads keys from the unnamed section and from the section named after
    /// the subcommand, the latter taking precedence.
    pub fn new(command: &'static str, path: Option<&Path>) -> Result<Self> {
        let mut file = HashMap::new();
        if let Some(p) = path {
            let ini = ini::Ini::load_from_file(p).with_context(|| format!("reading config {}", p.display()))?;
            for section in [None, Some(command)] {
                if let Some(props) = ini.section(section) {
                    for (k, v) in props.iter() {
                        file.insert(k.to_string(), v.to_string());
                    }
                }
            }
            file.remove("command");
        }
        Ok(Resolver { command, file, resolved: BTreeMap::new() })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.file.get(key) {
            None => Ok(None),
            Some(s) if s.is_empty() => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|e| anyhow!("config key '{key}': {e}")),
        }
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        self.resolved.insert(key.to_string(), v.as_ref().map_or(String::new(), |x| x.to_string()));
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.opt(key, flag)?.ok_or_else(|| anyhow!("missing required option --{}", key.replace('_', "-")))
    }

    /// `PHYS_SEED` takes precedence over the flag and the file.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let env = match std::env::var("PHYS_SEED") {
            Ok(s) => Some(s.trim().parse::<u64>().map_err(|e| anyhow!("PHYS_SEED: {e}"))?),
            Err(_) => None,
        };
        self.get("seed", env.or(flag), 0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("command = {}\n", self.command);
        for (k, v) in &self.resolved {
            text.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_defaults_fill_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.ini");
        std::fs::write(&p, "n = 7\nsteps = 30\n[generate]\nsteps = 40\n[identify]\nsteps = 99\n").unwrap();
        let mut r = Resolver::new("generate", Some(&p)).unwrap();
        assert_eq!(r.get("n", None, 1usize).unwrap(), 7);
        assert_eq!(r.get("steps", None, 1usize).unwrap(), 40);
        assert_eq!(r.get("h", Some(0.5), 1.0).unwrap(), 0.5);
        assert_eq!(r.get("other", None, 3u32).unwrap(), 3);
        let saved = dir.path().join("saved.ini");
        r.save(&saved).unwrap();
        let mut again = Resolver::new("generate", Some(&saved)).unwrap();
        assert_eq!(again.get("steps", None, 1usize).unwrap(), 40);
        assert_eq!(again.get("h", None, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn bad_value_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.ini");
        std::fs::write(&p, "n = many\n").unwrap();
        let mut r = Resolver::new("generate", Some(&p)).unwrap();
        assert!(r.get("n", None, 1usize).is_err());
    }
}
