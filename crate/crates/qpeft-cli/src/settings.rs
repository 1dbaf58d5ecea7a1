//! Layered run configuration: built-in defaults, then a `key=value` config
//! file, then command-line flags. Flags win; every key's final value and
//! provenance is recorded in the run-log header so overrides stay auditable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// Where a setting's final value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    Config,
    Flag,
    FlagOverConfig,
}

impl Source {
    fn label(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::Config => "config",
            Source::Flag => "flag",
            Source::FlagOverConfig => "flag, overrides config",
        }
    }
}

/// Every recognized key with its built-in default. Path-valued keys default
/// to empty (= not provided); commands that need one fail naming the key.
const REGISTRY: &[(&str, &str)] = &[
    ("answers", ""),
    ("b", "0.75"),
    ("batch-size", "4"),
    ("checkpoint", ""),
    ("corpus", ""),
    ("depth", "20"),
    ("eps", "1e-3"),
    ("eval-qrels", ""),
    ("eval-queries", ""),
    ("eval-run", ""),
    ("eval-size", ""),
    ("exemplar", "none"),
    ("exemplar-qrels", ""),
    ("exemplar-queries", ""),
    ("ffn-dim", "128"),
    ("heads", "2"),
    ("k", "10"),
    ("k1", "1.2"),
    ("ks", "10"),
    ("lm-heads", "2"),
    ("lm-layers", "2"),
    ("lr", "0.03"),
    ("max-epochs", "20"),
    ("max-seq-len", "256"),
    ("mlp-layers", "1"),
    ("model-dim", "32"),
    ("negatives", "3"),
    ("num-docs", "500"),
    ("num-queries", "300"),
    ("out", "out"),
    ("patience", "5"),
    ("precision", "f64"),
    ("pretrain-lr", "1e-3"),
    ("pretrain-steps", "500"),
    ("prompt", "p4"),
    ("qrels", ""),
    ("queries", ""),
    ("retriever", ""),
    ("run", ""),
    ("runs", ""),
    ("samples", "120"),
    ("score-mode", "sum"),
    ("seed", "0"),
    ("seeds", "0"),
    ("synth-vocab", "300"),
    ("system", ""),
    ("test-qrels", ""),
    ("test-queries", ""),
    ("test-run", ""),
    ("train-size", ""),
    ("train-sizes", ""),
    ("upr", ""),
    ("variant", "a"),
    ("vocab", ""),
    ("vocab-max", "10000"),
];

/// Resolved configuration for one command invocation.
#[derive(Debug, Clone)]
pub struct Settings {
    command: String,
    values: BTreeMap<String, (String, Source)>,
}

impl Settings {
    /// Merge defaults, the optional config file, and explicit flag pairs.
    pub fn resolve(
        command: &str,
        config_path: Option<&Path>,
        flags: &[(&str, String)],
    ) -> Result<Settings> {
        let mut values: BTreeMap<String, (String, Source)> = REGISTRY
            .iter()
            .map(|&(k, v)| (k.to_string(), (v.to_string(), Source::Default)))
            .collect();

        if let Some(path) = config_path {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            let mut seen = BTreeMap::new();
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    bail!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        lineno + 1
                    );
                };
                let (key, value) = (key.trim(), value.trim());
                if !values.contains_key(key) {
                    bail!("{}:{}: unknown key {key:?}", path.display(), lineno + 1);
                }
                if let Some(prev) = seen.insert(key.to_string(), lineno + 1) {
                    bail!(
                        "{}:{}: key {key:?} already set on line {prev}",
                        path.display(),
                        lineno + 1
                    );
                }
                values.insert(key.to_string(), (value.to_string(), Source::Config));
            }
        }

        for (key, value) in flags {
            let Some(existing) = values.get(*key) else {
                bail!("unknown flag key {key:?}");
            };
            let source = match existing.1 {
                Source::Config => Source::FlagOverConfig,
                _ => Source::Flag,
            };
            values.insert(key.to_string(), (value.clone(), source));
        }

        Ok(Settings {
            command: command.to_string(),
            values,
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    /// Raw value; unknown keys are a programming error.
    pub fn str(&self, key: &str) -> &str {
        &self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("unregistered settings key {key:?}"))
            .0
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.str(key)
            .parse()
            .with_context(|| format!("setting {key:?} = {:?} is not an integer", self.str(key)))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.str(key)
            .parse()
            .with_context(|| format!("setting {key:?} = {:?} is not an integer", self.str(key)))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.str(key)
            .parse()
            .with_context(|| format!("setting {key:?} = {:?} is not a number", self.str(key)))
    }

    /// Empty string means "not set".
    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        let v = self.str(key);
        if v.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.usize(key)?))
    }

    /// Comma-separated integer list.
    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.str(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .with_context(|| format!("setting {key:?}: bad integer {:?}", p.trim()))
            })
            .collect()
    }

    pub fn u64_list(&self, key: &str) -> Result<Vec<u64>> {
        let raw = self.str(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .with_context(|| format!("setting {key:?}: bad integer {:?}", p.trim()))
            })
            .collect()
    }

    /// A path that must be set and exist on disk.
    pub fn require_file(&self, key: &str) -> Result<PathBuf> {
        let v = self.str(key);
        if v.is_empty() {
            bail!("command {:?} needs the {key:?} setting (a file path)", self.command);
        }
        let path = PathBuf::from(v);
        if !path.exists() {
            bail!("setting {key:?}: no such file {}", path.display());
        }
        Ok(path)
    }

    /// An optional path; when set it must exist.
    pub fn opt_file(&self, key: &str) -> Result<Option<PathBuf>> {
        if self.str(key).is_empty() {
            return Ok(None);
        }
        Ok(Some(self.require_file(key)?))
    }

    /// Comma-separated list of paths, each required to exist.
    pub fn file_list(&self, key: &str) -> Result<Vec<PathBuf>> {
        let raw = self.str(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for part in raw.split(',') {
            let path = PathBuf::from(part.trim());
            if !path.exists() {
                bail!("setting {key:?}: no such file {}", path.display());
            }
            out.push(path);
        }
        Ok(out)
    }

    /// The output directory, created if absent. Every command writes only
    /// under this directory.
    pub fn out_dir(&self) -> Result<PathBuf> {
        let dir = PathBuf::from(self.str("out"));
        fs::create_dir_all(&dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(dir)
    }

    /// Render the run-log: resolved settings with provenance, then any
    /// command-specific notes. Deliberately timestamp-free so identical
    /// invocations produce identical bytes.
    pub fn render_log(&self, notes: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        for (key, (value, source)) in &self.values {
            let _ = writeln!(s, "{key} = {value}  [{}]", source.label());
        }
        for note in notes {
            let _ = writeln!(s, "# {note}");
        }
        s
    }

    /// Write the run-log into `out`.
    pub fn write_run_log(&self, out: &Path, notes: &[String]) -> Result<()> {
        let path = out.join("run.log");
        fs::write(&path, self.render_log(notes))
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
