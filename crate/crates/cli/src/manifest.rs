use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use spartran::Result;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub inputs: BTreeMap<String, Artifact>,
    pub outputs: BTreeMap<String, Artifact>,
    pub wall_clock_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub struct Recorder {
    out: PathBuf,
    started: Instant,
    manifest: RunManifest,
}

impl Recorder {
    pub fn new(command: &str, config: Option<&Path>, seed: u64, out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        Ok(Recorder {
            out: out.to_path_buf(),
            started: Instant::now(),
            manifest: RunManifest {
                command: command.into(),
                config_path: config.map(|p| p.display().to_string()),
                seed,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_clock_s: 0.0,
            },
        })
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let artifact = Artifact {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        };
        self.manifest.inputs.insert(role.into(), artifact);
        Ok(())
    }

    /// Write `bytes` to `name` under the output directory and record it.
    pub fn output(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes)?;
        let artifact = Artifact {
            path: name.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
        };
        self.manifest.outputs.insert(name.into(), artifact);
        Ok(path)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.wall_clock_s = self.started.elapsed().as_secs_f64();
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        fs::write(self.out.join(MANIFEST_FILE), json)?;
        Ok(self.manifest)
    }
}
