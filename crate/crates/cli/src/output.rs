use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::UsageError;

/// Output directory that remembers what it wrote.
pub struct Bundle {
    dir: PathBuf,
    files: BTreeSet<String>,
}

impl Bundle {
    pub fn create(dir: PathBuf) -> Result<Self, UsageError> {
        std::fs::create_dir_all(&dir).map_err(|e| UsageError(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, files: BTreeSet::new() })
    }

    pub fn writer(&mut self, name: &str) -> Result<BufWriter<File>, UsageError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        self.files.insert(name.to_string());
        Ok(BufWriter::new(file))
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), UsageError> {
        let mut w = self.writer(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| UsageError(format!("{name}: {e}")))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| UsageError(format!("{name}: {e}")))
    }

    pub fn finish(mut self, manifest: &Manifest) -> Result<(), UsageError> {
        self.files.insert("manifest.json".into());
        let manifest = Manifest { outputs: self.files.iter().cloned().collect(), ..manifest.clone() };
        self.json("manifest.json", &manifest)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub subcommand: String,
    pub config: ExperimentConfig,
    pub rng: &'static str,
    pub status: i32,
    pub verdict: String,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(subcommand: &str, config: &ExperimentConfig) -> Self {
        Self {
            tool: "crystalstat",
            version: env!("CARGO_PKG_VERSION"),
            core_version: crystalstat_core::VERSION,
            subcommand: subcommand.to_string(),
            config: config.clone(),
            rng: "ChaCha20 seeded from config.seed, stream = sample index",
            status: 0,
            verdict: String::new(),
            outputs: Vec::new(),
        }
    }
}
