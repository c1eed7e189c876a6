//! Flat `key=value` run configuration.

use std::path::{Path, PathBuf};

use flame_core::training::{Mode, TrainConfig};
use flame_core::{Error, Result};

/// Training fields plus the paths and mode list a run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Cached dataset written by `ingest`.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Pretrained frozen checkpoint.
    pub frozen: Option<PathBuf>,
    /// Modes compared by `diagnose`.
    pub modes: Vec<Mode>,
    pub min_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            out: PathBuf::from("runs/latest"),
            frozen: None,
            modes: vec![Mode::Single, Mode::EnsembleScratch, Mode::EnsembleGuide],
            min_count: 5,
        }
    }
}

const RUN_KEYS: [&str; 5] = ["data", "out", "frozen", "modes", "min_count"];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "frozen" => self.frozen = (!value.is_empty()).then(|| PathBuf::from(value)),
            "modes" => {
                self.modes = value
                    .split(',')
                    .map(|m| m.trim().parse())
                    .collect::<Result<Vec<Mode>>>()?;
                if self.modes.is_empty() {
                    return Err(Error::Config("modes must not be empty".into()));
                }
            }
            "min_count" => {
                self.min_count = value
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid value {value:?} for min_count")))?
            }
            _ if TrainConfig::KEYS.contains(&key) => self.train.set(key, value)?,
            _ => {
                let mut known: Vec<&str> = TrainConfig::KEYS.to_vec();
                known.extend(RUN_KEYS);
                return Err(Error::Config(format!(
                    "unknown config key {key:?} (known keys: {})",
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Applies `--key=value` overrides.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        for a in args {
            let body = a.strip_prefix("--").ok_or_else(|| {
                Error::Config(format!("override {a:?} must look like --key=value"))
            })?;
            let (k, v) = body.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {a:?} must look like --key=value"))
            })?;
            self.set(&k.replace('-', "_"), v)?;
        }
        Ok(())
    }

    /// Every key in config-file syntax.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        if self.data.is_some() {
            out.push_str(&format!("data={}\n", path(&self.data)));
        }
        out.push_str(&format!("out={}\n", self.out.display()));
        if self.frozen.is_some() {
            out.push_str(&format!("frozen={}\n", path(&self.frozen)));
        }
        let modes: Vec<&str> = self.modes.iter().map(|m| m.as_str()).collect();
        out.push_str(&format!("modes={}\n", modes.join(",")));
        out.push_str(&format!("min_count={}\n", self.min_count));
        for (k, v) in self.train.to_pairs() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\ndata = x.bin\nmode=single\nlr=0.01\nmodes=single,flame\n")
            .unwrap();
        assert_eq!(c.train.mode, Mode::Single);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.modes, vec![Mode::Single, Mode::Flame]);
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::default();
        c.apply_text("dim=16\n").unwrap();
        c.apply_overrides(&["--dim=8".into(), "--batch-size=4".into()])
            .unwrap();
        assert_eq!(c.train.dim, 8);
        assert_eq!(c.train.batch_size, 4);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut c = RunConfig::default();
        let err = c.apply_text("learning_rate=1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(c.apply_text("no equals sign\n").is_err());
        assert!(c.apply_overrides(&["dim=3".into()]).is_err());
    }
}
