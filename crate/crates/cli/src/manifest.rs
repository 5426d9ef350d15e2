//! Run manifests.
//!
//! Every subcommand writes `manifest.json` into its output directory before
//! doing real work and rewrites it when it ends, so a directory always says
//! what produced it and whether its contents are complete. The manifest
//! embeds the fully resolved config (file plus overrides); rerunning the
//! subcommand on the sibling `config.json` reproduces the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde_json::{json, Value};

use crate::files;

pub struct Run {
    out: PathBuf,
    started: Instant,
    manifest: Value,
}

impl Run {
    /// Create the output directory and write the initial manifest with
    /// status "partial". `config` is the resolved config, if the command
    /// takes one.
    pub fn begin(subcommand: &str, out: &Path, config: Option<&Value>) -> Result<Run> {
        std::fs::create_dir_all(out)?;
        let manifest = json!({
            "subcommand": subcommand,
            "config": config,
            "versions": {
                "package": env!("CARGO_PKG_VERSION"),
                "protocol": splitcvr_core::wire::PROTOCOL_VERSION,
            },
            "status": "partial",
            "outputs": [],
        });
        let run = Run {
            out: out.to_path_buf(),
            started: Instant::now(),
            manifest,
        };
        run.write()?;
        if let Some(cfg) = config {
            files::write_json(&run.out.join("config.json"), cfg)?;
        }
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.out
    }

    /// Path under the output directory, registered as a run output.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let outputs = self.manifest["outputs"]
            .as_array_mut()
            .expect("outputs is an array");
        if !outputs.iter().any(|v| v == name) {
            outputs.push(Value::String(name.to_string()));
        }
        self.out.join(name)
    }

    /// Attach extra fields (digests, summary numbers) to the manifest.
    pub fn note(&mut self, key: &str, value: Value) {
        self.manifest[key] = value;
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest["status"] = json!("complete");
        self.manifest["wall_s"] = json!(self.started.elapsed().as_secs_f64());
        self.write()
    }

    pub fn fail(mut self, error: &str) -> Result<()> {
        self.manifest["status"] = json!("failed");
        self.manifest["error"] = json!(error);
        self.manifest["wall_s"] = json!(self.started.elapsed().as_secs_f64());
        self.write()
    }

    fn write(&self) -> Result<()> {
        files::write_json(&self.out.join("manifest.json"), &self.manifest)
    }
}

/// Run a command body under a manifest: write "partial" up front, then
/// "complete" or "failed" depending on how the body ends.
pub fn with_manifest<F>(subcommand: &str, out: &Path, config: Option<&Value>, body: F) -> Result<()>
where
    F: FnOnce(&mut Run) -> Result<()>,
{
    let mut run = Run::begin(subcommand, out, config)?;
    match body(&mut run) {
        Ok(()) => run.finish(),
        Err(e) => {
            run.fail(&format!("{e:#}"))?;
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_flags_partial_then_complete() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = json!({"seed": 1});
        with_manifest("gen-data", &out, Some(&cfg), |run| {
            let m = files::read_json(&out.join("manifest.json")).unwrap();
            assert_eq!(m["status"], "partial");
            let p = run.output("x.bin");
            std::fs::write(p, b"x").unwrap();
            Ok(())
        })
        .unwrap();
        let m = files::read_json(&out.join("manifest.json")).unwrap();
        assert_eq!(m["status"], "complete");
        assert_eq!(m["outputs"][0], "x.bin");
        assert_eq!(m["config"]["seed"], 1);
        assert!(m["wall_s"].as_f64().unwrap() >= 0.0);
        // The resolved config is materialized for reruns.
        assert_eq!(files::read_json(&out.join("config.json")).unwrap(), cfg);
    }

    #[test]
    fn a_failing_body_leaves_a_failed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let err = with_manifest("eval", &out, None, |_| anyhow::bail!("boom")).unwrap_err();
        assert_eq!(err.to_string(), "boom");
        let m = files::read_json(&out.join("manifest.json")).unwrap();
        assert_eq!(m["status"], "failed");
        assert!(m["error"].as_str().unwrap().contains("boom"));
    }
}
