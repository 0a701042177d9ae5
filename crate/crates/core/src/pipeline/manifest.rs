use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::cache::sha256_hex;
use super::config::PipelineConfig;
use crate::error::{Error, Result};

/// Line-delimited JSON run record.
///
/// Holds no timestamps or absolute paths, so two runs with the same inputs and seed
/// produce byte-identical manifests.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<Value>,
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.push(json!({ "record": "run", "command": command, "version": env!("CARGO_PKG_VERSION") }));
        m
    }

    pub fn push(&mut self, record: Value) {
        self.records.push(record);
    }

    /// Config snapshot without the directory section.
    pub fn config(&mut self, config: &PipelineConfig) {
        let mut v = serde_json::to_value(config).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        self.push(json!({ "record": "config", "config": v }));
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.push(json!({ "record": "seed", "name": name, "value": value }));
    }

    fn file(&mut self, kind: &str, role: &str, path: &Path) -> Result<String> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let hash = sha256_hex(&bytes);
        self.push(json!({ "record": kind, "role": role, "file": file_label(path), "sha256": hash, "bytes": bytes.len() }));
        Ok(hash)
    }

    /// Records an input file with its content hash; returns the hash.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<String> {
        self.file("input", role, path)
    }

    /// Records an output file with its content hash; returns the hash.
    pub fn output(&mut self, role: &str, path: &Path) -> Result<String> {
        self.file("output", role, path)
    }

    pub fn metric(&mut self, name: &str, value: impl Serialize) {
        self.push(json!({ "record": "metric", "name": name, "value": value }));
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses a manifest written by [`Manifest::write`].
    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("manifest line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn records_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Value> + 'a {
        self.records.iter().filter(move |r| r["record"] == kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_omits_paths() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("data.bin");
        std::fs::write(&file, b"abc").unwrap();
        let mut m = Manifest::new("sample");
        m.config(&PipelineConfig::default());
        m.seed("base", 7);
        let h = m.output("cloud", &file).unwrap();
        assert_eq!(h, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        m.metric("psnr", 30.5);
        let text = m.to_text();
        assert!(!text.contains(dir.path().to_str().unwrap()));
        assert!(!text.contains("\"paths\""));
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        assert_eq!(m.records_of("output").count(), 1);
    }
}
