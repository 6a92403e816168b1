//! Layered configuration: built-in defaults, then an optional TOML file,
//! then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::CliError;

pub const SECTIONS: [&str; 6] = [
    "model",
    "pretrain",
    "finetune",
    "synth",
    "alignment",
    "gradcheck",
];

#[derive(Debug, Default)]
pub struct Layers {
    file: Table,
    path: Option<PathBuf>,
    flags: Table,
}

fn to_value<T: Serialize + ?Sized>(v: &T) -> Result<Value, CliError> {
    Value::try_from(v).map_err(|e| CliError::Usage(format!("cannot represent setting: {e}")))
}

fn merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        (Value::Table(d), Value::Table(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

fn dotted_keys(prefix: &str, t: &Table, out: &mut Vec<String>) {
    for (k, v) in t {
        let key = format!("{prefix}{k}");
        match v {
            Value::Table(inner) => dotted_keys(&format!("{key}."), inner, out),
            _ => out.push(key),
        }
    }
}

impl Layers {
    /// Reads `path` if given. A run manifest is accepted too; its `[config]`
    /// table is used, so a finished run can be repeated from its manifest.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut table: Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if table.contains_key("command") {
            table = match table.remove("config") {
                Some(Value::Table(t)) => t,
                _ => {
                    return Err(CliError::Usage(format!(
                        "{}: manifest has no [config] table",
                        path.display()
                    )))
                }
            };
        }
        for (k, v) in &table {
            if !SECTIONS.contains(&k.as_str()) || !v.is_table() {
                return Err(CliError::Usage(format!(
                    "{}: unknown section [{k}] (expected one of {})",
                    path.display(),
                    SECTIONS.join(", ")
                )));
            }
        }
        Ok(Self {
            file: table,
            path: Some(path.to_path_buf()),
            flags: Table::new(),
        })
    }

    /// Records a flag value for `section.key` when the flag was given.
    pub fn flag<T: Serialize>(
        &mut self,
        section: &str,
        key: &str,
        value: Option<T>,
    ) -> Result<(), CliError> {
        if let Some(v) = value {
            let entry = self
                .flags
                .entry(section)
                .or_insert_with(|| Value::Table(Table::new()));
            if let Value::Table(t) = entry {
                t.insert(key.to_string(), to_value(&v)?);
            }
        }
        Ok(())
    }

    pub fn resolve<T: Serialize + DeserializeOwned>(
        &self,
        section: &str,
        base: &T,
    ) -> Result<T, CliError> {
        let mut v = to_value(base)?;
        for layer in [&self.file, &self.flags] {
            if let Some(s) = layer.get(section) {
                merge(&mut v, s);
            }
        }
        v.try_into().map_err(|e: toml::de::Error| {
            let source = self
                .path
                .as_ref()
                .map_or(String::new(), |p| format!("{}: ", p.display()));
            CliError::Usage(format!("{source}[{section}] {}", e.message()))
        })
    }

    /// True when the file or a flag sets `section.key`.
    pub fn explicit(&self, section: &str, key: &str) -> bool {
        [&self.file, &self.flags].iter().any(|layer| {
            layer
                .get(section)
                .and_then(Value::as_table)
                .is_some_and(|t| t.contains_key(key))
        })
    }

    /// Where each non-default setting came from.
    pub fn provenance(&self) -> Table {
        let mut t = Table::new();
        let mut file_keys = Vec::new();
        dotted_keys("", &self.file, &mut file_keys);
        let mut flag_keys = Vec::new();
        dotted_keys("", &self.flags, &mut flag_keys);
        if let Some(p) = &self.path {
            t.insert("file".into(), Value::String(p.display().to_string()));
        }
        t.insert(
            "precedence".into(),
            Value::String("flags > file > defaults".into()),
        );
        t.insert(
            "from_file".into(),
            Value::Array(file_keys.into_iter().map(Value::String).collect()),
        );
        t.insert(
            "from_flags".into(),
            Value::Array(flag_keys.into_iter().map(Value::String).collect()),
        );
        t
    }
}

/// Serializes a resolved section for the manifest.
pub fn section<T: Serialize>(v: &T) -> Result<Value, CliError> {
    to_value(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossmodal::pretrain::PretrainConfig;

    fn layers(text: &str) -> Layers {
        Layers {
            file: text.parse().unwrap(),
            path: None,
            flags: Table::new(),
        }
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let mut l = layers("[pretrain]\nepochs = 3\nbatch_size = 2\n");
        l.flag("pretrain", "epochs", Some(7usize)).unwrap();
        let c: PretrainConfig = l.resolve("pretrain", &PretrainConfig::default()).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.k_noise, PretrainConfig::default().k_noise);
        assert!(l.explicit("pretrain", "batch_size"));
        assert!(!l.explicit("pretrain", "k_noise"));
        let p = l.provenance();
        assert_eq!(p["from_flags"].as_array().unwrap().len(), 1);
        assert_eq!(p["from_file"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let l = layers("[pretrain]\nepoch = 3\n");
        let e = l
            .resolve("pretrain", &PretrainConfig::default())
            .unwrap_err();
        assert!(
            matches!(e, CliError::Usage(ref m) if m.contains("epoch")),
            "{e}"
        );
    }

    #[test]
    fn nested_tables_merge() {
        let mut base = to_value(&crossmodal::data::SynthConfig::default()).unwrap();
        let file: Table = "alignment = { stack = 4 }".parse().unwrap();
        merge(&mut base, &Value::Table(file));
        let c: crossmodal::data::SynthConfig = base.try_into().unwrap();
        assert_eq!(c.alignment.stack, 4);
        assert_eq!(c.alignment.hop_ms, 10.0);
    }
}
