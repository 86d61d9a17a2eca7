//! Run directories and their manifests.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub step: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub toolkit: String,
    pub version: String,
    pub subcommand: String,
    pub started_utc: String,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timings: Vec<Timing>,
}

pub fn sha256_file(path: &Path) -> Result<FileDigest> {
    let mut reader = BufReader::new(
        File::open(path).with_context(|| format!("cannot read {}", path.display()))?,
    );
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(hasher.finalize()),
        bytes,
    })
}

/// Output directory of one subcommand invocation. Removed on drop unless
/// [`RunDir::finish`] succeeded, so failed runs leave nothing behind.
pub struct RunDir {
    path: PathBuf,
    subcommand: String,
    started_utc: String,
    clock: Instant,
    step_clock: Instant,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
    timings: Vec<Timing>,
    finished: bool,
}

impl RunDir {
    /// Creates `out` if given (it must not exist), otherwise a fresh
    /// `<data_dir>/runs/<subcommand>-<UTC timestamp>-seed<seed>` directory.
    pub fn create(
        data_dir: &Path,
        out: Option<&Path>,
        subcommand: &str,
        seed: Option<u64>,
    ) -> Result<Self> {
        let now = chrono::Utc::now();
        let path = match out {
            Some(dir) => {
                if dir.exists() {
                    bail!("output directory {} already exists", dir.display());
                }
                if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent)?;
                }
                fs::create_dir(dir).with_context(|| format!("cannot create {}", dir.display()))?;
                dir.to_path_buf()
            }
            None => {
                let runs = data_dir.join("runs");
                fs::create_dir_all(&runs)
                    .with_context(|| format!("cannot create {}", runs.display()))?;
                let seed = seed.map(|s| format!("-seed{s}")).unwrap_or_default();
                let stem = format!("{subcommand}-{}{seed}", now.format("%Y%m%dT%H%M%S%.3fZ"));
                let mut attempt = 0;
                loop {
                    let name = if attempt == 0 {
                        stem.clone()
                    } else {
                        format!("{stem}-{attempt}")
                    };
                    let dir = runs.join(name);
                    match fs::create_dir(&dir) {
                        Ok(()) => break dir,
                        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => attempt += 1,
                        Err(e) => {
                            return Err(e)
                                .with_context(|| format!("cannot create {}", dir.display()))
                        }
                    }
                }
            }
        };
        Ok(Self {
            path,
            subcommand: subcommand.to_owned(),
            started_utc: now.to_rfc3339(),
            clock: Instant::now(),
            step_clock: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            finished: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(sha256_file(path)?);
        Ok(())
    }

    /// Records a file written inside the run directory.
    pub fn add_output(&mut self, name: impl AsRef<Path>) {
        self.outputs.push(self.path.join(name));
    }

    /// Creates an output file and records it.
    pub fn create_output(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.file(name);
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("cannot create {}", path.display()))?;
        self.outputs.push(path);
        Ok(BufWriter::new(file))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create_output(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Closes the current timing step.
    pub fn lap(&mut self, step: &str) {
        self.timings.push(Timing {
            step: step.to_owned(),
            seconds: self.step_clock.elapsed().as_secs_f64(),
        });
        self.step_clock = Instant::now();
    }

    /// Digests every output and writes the manifest. The manifest is created
    /// with `create_new`, so an existing one is never replaced.
    pub fn finish(
        mut self,
        config: serde_json::Value,
        seeds: serde_json::Value,
    ) -> Result<PathBuf> {
        self.timings.push(Timing {
            step: "total".into(),
            seconds: self.clock.elapsed().as_secs_f64(),
        });
        let outputs = self
            .outputs
            .iter()
            .map(|p| sha256_file(p))
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            toolkit: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: self.subcommand.clone(),
            started_utc: self.started_utc.clone(),
            config,
            seeds,
            inputs: std::mem::take(&mut self.inputs),
            outputs,
            timings: std::mem::take(&mut self.timings),
        };
        let path = self.file(MANIFEST_NAME);
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("cannot create {}", path.display()))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        writeln!(w)?;
        w.flush()?;
        self.finished = true;
        Ok(self.path.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.finished {
            let _ = fs::remove_dir_all(&self.path);
        }
    }
}
