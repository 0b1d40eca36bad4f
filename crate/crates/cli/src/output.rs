//! Output directory with a lockfile and atomic (temp + rename) writes.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tpa_transport::fields::ScalarField;
use tpa_transport::synthesis::InternalDatum;

use crate::error::{CliError, CliResult};

pub const LOCK_NAME: &str = ".tpa.lock";

/// Exclusive handle on an output directory; the lock is released on drop.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    lock: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn open(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let lock = dir.join(LOCK_NAME);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    CliError::Failed(format!(
                        "output directory {} is in use (remove {} if no run is active)",
                        dir.display(),
                        lock.display()
                    ))
                } else {
                    CliError::io(&lock, e)
                }
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| CliError::io(&lock, e))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            lock,
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Names of the files written so far, in order.
    pub fn written(&self) -> &[String] {
        &self.written
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = write_atomic(&self.dir, name, bytes)?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(path)
    }

    pub fn write_field(&mut self, name: &str, f: &ScalarField) -> CliResult<PathBuf> {
        let mut buf = Vec::new();
        f.write_csv(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn write_json(&mut self, name: &str, v: &impl Serialize) -> CliResult<PathBuf> {
        let mut text = serde_json::to_vec_pretty(v).map_err(|e| CliError::Failed(e.to_string()))?;
        text.push(b'\n');
        self.write_bytes(name, &text)
    }

    /// Datum CSV plus its provenance sidecar, as [`InternalDatum::load`] expects.
    pub fn write_datum(&mut self, stem: &str, d: &InternalDatum) -> CliResult<PathBuf> {
        self.write_json(&format!("{stem}.json"), &d.provenance)?;
        self.write_field(&format!("{stem}.csv"), &d.h)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Writes `dir/name` by way of a hidden temporary file in the same
/// directory, so readers never see a partial file.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, &target).map_err(|e| CliError::io(&target, e))?;
    Ok(target)
}
