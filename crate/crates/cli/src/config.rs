//! Key–value config files, flag overrides, and the config hash.
//!
//! A config file holds `key = value` lines; `#` starts a comment. Keys
//! use the long flag names with `-` or `_`. Flags win over the file,
//! the file over built-in defaults. Every resolved value is recorded, and
//! the command name plus the sorted record hash to the run id; input
//! files enter the record by content digest, never by path, so the same
//! inputs give the same hash wherever they live.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use m2mx_core::synth::CORPUS_MANIFEST;
use sha2::{Digest, Sha256};

use crate::CliError;

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

pub fn parse_config(text: &str, origin: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::config(format!("{}:{}: expected `key = value`", origin.display(), i + 1))
        })?;
        let k = normalize(k);
        if k.is_empty() {
            return Err(CliError::config(format!("{}:{}: empty key", origin.display(), i + 1)));
        }
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::config(format!("{}:{}: `{k}` given twice", origin.display(), i + 1)));
        }
    }
    Ok(out)
}

/// Resolves settings for one command and records what it resolved.
#[derive(Debug)]
pub struct Settings {
    command: &'static str,
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    record: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(command: &'static str, config: Option<&Path>) -> Result<Self, CliError> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                parse_config(&text, p)?
            }
            None => BTreeMap::new(),
        };
        Ok(Settings {
            command,
            file,
            used: BTreeSet::new(),
            record: BTreeMap::new(),
        })
    }

    fn file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        self.file
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::config(format!("config key `{key}` = {v:?}: {e}"))))
            .transpose()
    }

    /// A flag beat the file; the file's key still counts as known.
    fn overridden<T>(&mut self, key: &str, v: T) -> T {
        self.used.insert(key.to_string());
        v
    }

    /// Flag, else config file, else `default`.
    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => self.overridden(key, v),
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.record.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Like [`get`](Self::get) without a default.
    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => self.overridden(key, v),
            None => self
                .file_value(key)?
                .ok_or_else(|| CliError::config(format!("`--{}` is required", key.replace('_', "-"))))?,
        };
        self.record.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// A switch is on when the flag is given or the file says `true`.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let v = flag || self.file_value::<bool>(key)?.unwrap_or(false);
        self.record.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// An input file, recorded by the digest of its bytes. A directory
    /// stands for the corpus manifest inside it.
    pub fn input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        match self.optional_input(key, flag)? {
            Some(p) => Ok(p),
            None => Err(CliError::config(format!("`--{}` is required", key.replace('_', "-")))),
        }
    }

    pub fn optional_input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        let p = match flag {
            Some(p) => Some(self.overridden(key, p)),
            None => self.file_value::<PathBuf>(key)?,
        };
        let p = p.map(|p| if p.is_dir() { p.join(CORPUS_MANIFEST) } else { p });
        match &p {
            Some(p) => self.record_file(key, p)?,
            None => {
                self.record.insert(key.to_string(), "none".into());
            }
        }
        Ok(p)
    }

    fn record_file(&mut self, key: &str, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
        self.record.insert(key.to_string(), format!("sha256:{}", hex::encode(Sha256::digest(&bytes))));
        Ok(())
    }

    /// Where outputs go; not part of the hash.
    pub fn location(&mut self, key: &str, flag: Option<PathBuf>, default: &str) -> Result<PathBuf, CliError> {
        Ok(match flag {
            Some(p) => self.overridden(key, p),
            None => self.file_value(key)?.unwrap_or_else(|| PathBuf::from(default)),
        })
    }

    /// A file key that tunes execution only (thread count): read, but
    /// kept out of the hash.
    pub fn execution_key<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.file_value(key)
    }

    /// Fails on config-file keys this command never asked for.
    pub fn finish(self) -> Result<ResolvedConfig, CliError> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.used.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(CliError::config(format!(
                "unknown config key(s) for `{}`: {}",
                self.command,
                unknown.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(ResolvedConfig {
            command: self.command,
            values: self.record,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedConfig {
    pub command: &'static str,
    pub values: BTreeMap<String, String>,
}

impl ResolvedConfig {
    /// `key = value` lines in key order, preceded by the command.
    pub fn canonical(&self) -> String {
        let mut s = format!("command = {}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))[..16].to_string()
    }

    /// `<base>/<command>-<hash>`, created, with the canonical config
    /// written inside.
    pub fn run_dir(&self, base: &Path) -> Result<PathBuf, CliError> {
        let dir = base.join(format!("{}-{}", self.command, self.hash()));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
        std::fs::write(dir.join("config.txt"), self.canonical())
            .map_err(|e| CliError::data(format!("cannot write config in {}: {e}", dir.display())))?;
        Ok(dir)
    }
}
