//! Configuration file handling and value precedence.
//!
//! The file format is plain `key = value` lines (hash comments allowed).
//! Precedence for every setting: command-line flag, then config file, then
//! built-in default; the resolved value and its source are logged per key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

/// A perturbation radius given either as an exact fraction ("8/255") or as a
/// decimal; the fraction is kept so reports can echo it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonArg {
    pub text: String,
    pub value: f64,
}

impl FromStr for EpsilonArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let text = s.trim().to_string();
        let value = if let Some((num, den)) = text.split_once('/') {
            let n: f64 = num.trim().parse().map_err(|_| format!("bad numerator in '{s}'"))?;
            let d: f64 = den.trim().parse().map_err(|_| format!("bad denominator in '{s}'"))?;
            if d == 0.0 {
                return Err("zero denominator".into());
            }
            n / d
        } else {
            text.parse::<f64>().map_err(|_| format!("bad epsilon '{s}'"))?
        };
        if !(value > 0.0 && value <= 1.0) {
            return Err(format!("epsilon {value} outside (0, 1]"));
        }
        Ok(Self { text, value })
    }
}

impl fmt::Display for EpsilonArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.text)
    }
}

/// Key-value settings loaded from a config file.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {} is not 'key = value': {raw}", lineno + 1);
            };
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }
}

/// Resolves one setting with flag > file > default precedence and logs the
/// resolved triple.
pub fn resolve<T: Clone + fmt::Debug + FromStr>(
    key: &str,
    flag: Option<T>,
    file: &FileConfig,
    default: T,
) -> Result<T>
where
    <T as FromStr>::Err: fmt::Display,
{
    let (value, source) = if let Some(v) = flag {
        (v, "flag")
    } else if let Some(raw) = file.get(key) {
        let parsed = raw
            .parse::<T>()
            .map_err(|e| anyhow::anyhow!("config key '{key}': {e}"))?;
        (parsed, "config")
    } else {
        (default, "default")
    };
    eprintln!("config: {key} = {value:?} ({source})");
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_fraction_and_decimal() {
        let frac: EpsilonArg = "8/255".parse().unwrap();
        assert!((frac.value - 8.0 / 255.0).abs() < 1e-15);
        assert_eq!(frac.text, "8/255");
        let dec: EpsilonArg = "0.05".parse().unwrap();
        assert!((dec.value - 0.05).abs() < 1e-15);
        assert!("0/0".parse::<EpsilonArg>().is_err());
        assert!("2.0".parse::<EpsilonArg>().is_err());
        assert!("-1/255".parse::<EpsilonArg>().is_err());
    }

    #[test]
    fn file_parsing_and_precedence() {
        let dir = std::env::temp_dir().join("vg_cli_cfg");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.txt");
        std::fs::write(&path, "# comment\nmax_epoch = 7\nseed=9\n").unwrap();
        let cfg = FileConfig::load(&path).unwrap();
        assert_eq!(cfg.get("max_epoch"), Some("7"));

        let flag_wins: usize = resolve("max_epoch", Some(3usize), &cfg, 100).unwrap();
        assert_eq!(flag_wins, 3);
        let file_wins: usize = resolve("max_epoch", None, &cfg, 100).unwrap();
        assert_eq!(file_wins, 7);
        let default_wins: usize = resolve("missing", None::<usize>, &cfg, 100).unwrap();
        assert_eq!(default_wins, 100);
        std::fs::remove_file(&path).unwrap();
    }
}
