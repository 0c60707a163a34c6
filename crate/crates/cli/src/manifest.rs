//! Run manifests: the effective command line, the resolved settings and the
//! hashes of inputs and outputs, enough to re-run a command and check
//! that it produces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Directory the command ran in; relative paths in `argv` refer to it.
    pub cwd: PathBuf,
    /// Arguments after the program name, with any config file applied.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    /// Input path to SHA-256.
    pub inputs_sha256: BTreeMap<String, String>,
    /// Output file, relative to the output location, to SHA-256.
    pub outputs_sha256: BTreeMap<String, String>,
    pub complete: bool,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Manifest {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes the manifest of one command: once before the work starts and
/// again, with output hashes, when it has finished.
pub struct Recorder {
    path: Option<PathBuf>,
    manifest: Manifest,
}

impl Recorder {
    pub fn new(path: Option<PathBuf>, subcommand: &str, argv: &[String]) -> CliResult<Self> {
        let cwd = std::env::current_dir().map_err(|e| CliError::io(".", e))?;
        Ok(Self {
            path,
            manifest: Manifest {
                tool: "eemax".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                subcommand: subcommand.into(),
                cwd,
                argv: argv.to_vec(),
                config: serde_json::Value::Null,
                inputs_sha256: BTreeMap::new(),
                outputs_sha256: BTreeMap::new(),
                complete: false,
            },
        })
    }

    /// Records the resolved settings and input hashes and writes the
    /// provisional manifest.
    pub fn begin(&mut self, config: serde_json::Value, inputs: &[&Path]) -> CliResult<()> {
        self.manifest.config = config;
        for p in inputs {
            self.manifest
                .inputs_sha256
                .insert(p.display().to_string(), sha256_file(p)?);
        }
        self.write()
    }

    /// Hashes `outputs` (keyed by name relative to the output location)
    /// and rewrites the manifest as complete.
    pub fn finish(&mut self, outputs: &[(String, PathBuf)]) -> CliResult<()> {
        for (key, p) in outputs {
            self.manifest.outputs_sha256.insert(key.clone(), sha256_file(p)?);
        }
        self.manifest.complete = true;
        self.write()
    }

    fn write(&self) -> CliResult<()> {
        match &self.path {
            Some(p) => self.manifest.save(p),
            None => Ok(()),
        }
    }
}

/// `<file>.manifest.json` next to a single-file output.
pub fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// File name of `p` as a manifest output key.
pub fn output_key(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
