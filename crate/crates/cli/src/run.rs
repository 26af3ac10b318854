use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const RUNS_DIR_ENV: &str = "CONFAUG_RUNS_DIR";
const LOCK_NAME: &str = ".lock";

/// Seed of one pipeline stage: the first 8 bytes (little endian) of
/// SHA-256 over the global seed's little-endian bytes followed by the
/// stage name.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    confaug::training::example_seed(global, stage)
}

/// Exclusive handle on a run directory; the lock file goes away on drop.
pub struct RunDir {
    pub path: PathBuf,
    log: File,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(path)?;
        for sub in ["checkpoints", "samples", "reports"] {
            fs::create_dir_all(path.join(sub))?;
        }
        let lock = path.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CliError::Locked(path.to_path_buf())),
            Err(e) => return Err(e.into()),
        }
        let log = OpenOptions::new().create(true).append(true).open(path.join("log.jsonl"))?;
        Ok(Self { path: path.to_path_buf(), log })
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    /// Appends one timestamped event to `log.jsonl`.
    pub fn event(&mut self, event: &str, fields: Value) {
        let time = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        let mut line = json!({ "time": time, "event": event });
        if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
            obj.extend(extra);
        }
        if let Err(e) = writeln!(self.log, "{line}") {
            log::warn!("could not append to log.jsonl: {e}");
        }
    }

    pub fn write_json(&self, rel: &str, value: &impl serde::Serialize) -> Result<PathBuf, CliError> {
        let path = self.join(rel);
        let text = serde_json::to_string_pretty(value).expect("reports serialize");
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn write_error(&self, err: &CliError) {
        let body = json!({ "error": err.kind(), "message": err.to_string(), "exit_code": err.exit_code() });
        if let Err(e) = self.write_json("error.json", &body) {
            log::warn!("could not write error.json: {e}");
        }
    }

    /// Lists every artifact with its size, digest and role.
    pub fn write_manifest(&self) -> Result<(), CliError> {
        let mut files = Vec::new();
        collect_files(&self.path, &mut files)?;
        files.sort();
        let mut out = String::from("# path\tbytes\tsha256\tdescription\n");
        for f in files {
            let rel = f.strip_prefix(&self.path).expect("inside run dir").to_string_lossy().replace('\\', "/");
            if rel == LOCK_NAME || rel == "MANIFEST.txt" {
                continue;
            }
            let bytes = fs::read(&f)?;
            let digest = hex::encode(Sha256::digest(&bytes));
            out.push_str(&format!("{rel}\t{}\t{digest}\t{}\n", bytes.len(), describe(&rel)));
        }
        fs::write(self.join("MANIFEST.txt"), out)?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_NAME));
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn describe(rel: &str) -> &'static str {
    let name = rel.rsplit('/').next().unwrap_or(rel);
    match name {
        "config.json" => "resolved experiment configuration",
        "command.json" => "subcommand and arguments of this run",
        "log.jsonl" => "timestamped events, one JSON object per line",
        "error.json" => "failure description",
        "denoiser.ckpt" => "denoiser weights with schedule",
        "guidance.ckpt" => "noise-aware guidance classifier weights with schedule",
        "pool.jsonl" => "sidecar of generated samples",
        "retained.jsonl" => "sidecar of samples that passed the confidence gate",
        "filter_report.json" => "retention statistics",
        "fid.json" => "Fréchet distance report",
        "eval.json" => "classification reports",
        "comparison.txt" => "comparison table",
        "comparison.csv" => "comparison table as CSV",
        "train_log.jsonl" => "per-epoch training records",
        "train_summary.json" => "training outcome",
        "test_report.json" => "test-split classification report",
        "dataset.json" => "dataset summary",
        "fused_manifest.txt" => "real training split plus retained samples",
        "manifest.txt" => "dataset manifest",
        _ if name.ends_with(".png") && rel.starts_with("samples/") => "generated sample",
        _ if name.ends_with(".png") => "dataset image",
        _ if name.ends_with(".ckpt") => "model checkpoint",
        _ if rel.starts_with("data/") => "dataset manifest",
        _ => "artifact",
    }
}

/// `$CONFAUG_RUNS_DIR/<command>-<digest>`, keyed by the resolved
/// invocation so reruns land in the same place.
pub fn default_run_dir(command: &str, invocation: &Value) -> PathBuf {
    let root = std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let digest = hex::encode(Sha256::digest(invocation.to_string().as_bytes()));
    root.join(format!("{command}-{}", &digest[..12]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let d = tempfile::tempdir().unwrap();
        let a = RunDir::open(d.path()).unwrap();
        assert!(matches!(RunDir::open(d.path()), Err(CliError::Locked(_))));
        drop(a);
        let mut b = RunDir::open(d.path()).unwrap();
        b.event("hello", json!({ "n": 1 }));
        b.write_manifest().unwrap();
        let m = fs::read_to_string(d.path().join("MANIFEST.txt")).unwrap();
        assert!(m.contains("log.jsonl\t"));
        assert!(!m.contains(".lock"));
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(1, "sample"), stage_seed(1, "train-diffusion"));
        assert_ne!(stage_seed(1, "sample"), stage_seed(2, "sample"));
        assert_eq!(stage_seed(1, "sample"), stage_seed(1, "sample"));
    }
}
