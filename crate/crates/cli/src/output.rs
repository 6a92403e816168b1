use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use toml::{Table, Value};

use crate::config::Layers;
use crate::error::CliError;

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOSSES: &str = "losses.tsv";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_KV: &str = "report.kv";
pub const MANIFEST: &str = "manifest.txt";

/// An output directory whose files are each written atomically.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    /// Creates `root`, refusing if any of `files` (or the manifest) already
    /// exists there unless `force` is set.
    pub fn create(root: &Path, files: &[&str], force: bool) -> Result<Self, CliError> {
        if !force {
            if let Some(f) = files
                .iter()
                .chain([&MANIFEST])
                .find(|f| root.join(f).exists())
            {
                return Err(CliError::Io(format!(
                    "refusing to overwrite {} (use --force)",
                    root.join(f).display()
                )));
            }
        }
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let tmp = self.root.join(format!(".{name}.tmp"));
        let result = fs::File::create(&tmp).and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        });
        result
            .and_then(|()| fs::rename(&tmp, &path))
            .map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Everything needed to describe and repeat one command run.
pub struct Manifest {
    command: &'static str,
    started: Instant,
    seed: Option<u64>,
    pub paths: Table,
    pub config: Table,
    pub result: Table,
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

impl Manifest {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            seed: None,
            paths: Table::new(),
            config: Table::new(),
            result: Table::new(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn path(&mut self, key: &str, p: &Path) {
        self.paths.insert(key.into(), path_value(p));
    }

    pub fn config(&mut self, key: &str, v: Value) {
        self.config.insert(key.into(), v);
    }

    pub fn result(&mut self, key: &str, v: impl Into<Value>) {
        self.result.insert(key.into(), v.into());
    }

    pub fn render(&self, layers: &Layers) -> Result<String, CliError> {
        let mut t = Table::new();
        t.insert("command".into(), Value::String(self.command.into()));
        t.insert(
            "version".into(),
            Value::String(env!("CARGO_PKG_VERSION").into()),
        );
        if let Some(s) = self.seed {
            let s = i64::try_from(s)
                .map_err(|_| CliError::Usage(format!("seed {s} exceeds {}", i64::MAX)))?;
            t.insert("seed".into(), Value::Integer(s));
        }
        t.insert(
            "duration_seconds".into(),
            Value::Float(self.started.elapsed().as_secs_f64()),
        );
        t.insert("paths".into(), Value::Table(self.paths.clone()));
        t.insert("settings".into(), Value::Table(layers.provenance()));
        t.insert("config".into(), Value::Table(self.config.clone()));
        t.insert("result".into(), Value::Table(self.result.clone()));
        toml::to_string_pretty(&t).map_err(|e| CliError::Usage(format!("manifest: {e}")))
    }

    pub fn write(&self, out: &OutDir, layers: &Layers) -> Result<(), CliError> {
        out.write(MANIFEST, self.render(layers)?.as_bytes())?;
        Ok(())
    }
}

/// TOML integers are signed.
pub fn int(v: usize) -> Value {
    Value::Integer(i64::try_from(v).unwrap_or(i64::MAX))
}
