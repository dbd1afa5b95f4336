//! Optional TOML config file. Each subcommand reads its own table
//! (`[build]`, `[bench]`, ...); a flag given on the command line wins.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;

#[derive(Debug, Default)]
pub struct Config {
    table: toml::Table,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| bpann::Error::Usage(format!("config {}: {e}", path.display())))?;
        Ok(Config { table })
    }

    pub fn top<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        lookup(Some(&self.table), "", key)
    }

    pub fn section(&self, name: &'static str) -> Section<'_> {
        Section {
            name,
            table: self.table.get(name).and_then(|v| v.as_table()),
        }
    }
}

pub struct Section<'a> {
    name: &'static str,
    table: Option<&'a toml::Table>,
}

impl Section<'_> {
    /// Flag value, else the config value, else `default`.
    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    pub fn opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => lookup(self.table, self.name, key),
        }
    }

    /// Boolean switch: set if the flag is present or the config says so.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || lookup(self.table, self.name, key)?.unwrap_or(false))
    }
}

fn lookup<T: DeserializeOwned>(table: Option<&toml::Table>, section: &str, key: &str) -> Result<Option<T>> {
    let Some(value) = table.and_then(|t| t.get(key)) else {
        return Ok(None);
    };
    value
        .clone()
        .try_into()
        .map(Some)
        .map_err(|e| bpann::Error::Usage(format!("config key {section}.{key}: {e}")).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file_values() {
        let cfg = Config {
            table: "threads = 3\n[build]\nkappa_leaf = 64\nno_edges = true\n"
                .parse()
                .unwrap(),
        };
        let build = cfg.section("build");
        assert_eq!(build.pick(None, "kappa_leaf", 2048usize).unwrap(), 64);
        assert_eq!(build.pick(Some(8), "kappa_leaf", 2048usize).unwrap(), 8);
        assert_eq!(build.pick(None, "kappa_inner", 1024usize).unwrap(), 1024);
        assert!(build.switch(false, "no_edges").unwrap());
        assert_eq!(cfg.top::<usize>("threads").unwrap(), Some(3));
    }

    #[test]
    fn wrong_type_is_a_usage_error() {
        let cfg = Config {
            table: "[bench]\nk = \"ten\"\n".parse().unwrap(),
        };
        let err = cfg.section("bench").pick(None, "k", 10usize).unwrap_err();
        assert!(matches!(
            err.downcast_ref::<bpann::Error>(),
            Some(bpann::Error::Usage(_))
        ));
    }
}
