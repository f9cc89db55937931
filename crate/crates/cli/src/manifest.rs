use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cem_core::CemError;
use serde::{Deserialize, Serialize};

use crate::config::LabConfig;
use crate::{LabError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one run directory. Artifact paths are relative to `output_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Seconds since the Unix epoch. Kept out of `run_id` so that identical
    /// runs share an id.
    pub created_at: u64,
    pub config: LabConfig,
    pub output_dir: PathBuf,
    pub input_dim: usize,
    pub n_classes: usize,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub test_accuracy: Option<f64>,
}

impl RunManifest {
    pub fn new(config: LabConfig, output_dir: &Path, input_dim: usize, n_classes: usize) -> Self {
        Self {
            run_id: run_id(&config),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config,
            output_dir: output_dir.to_path_buf(),
            input_dim,
            n_classes,
            artifacts: BTreeMap::new(),
            test_accuracy: None,
        }
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(LabError::MissingArtifact {
                path,
                hint: "run `cem-lab train` with this --out first".into(),
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| CemError::io(&path, e))?;
        let mut m: Self = serde_json::from_str(&text)
            .map_err(|e| CemError::Parse(format!("{}: {e}", path.display())))?;
        // The directory may have moved or been named relative to another cwd.
        m.output_dir = out.to_path_buf();
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.output_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CemError::Parse(format!("manifest: {e}")))?;
        fs::write(&path, text).map_err(|e| CemError::io(&path, e))?;
        Ok(())
    }

    pub fn record(&mut self, name: &str, file: &str) {
        self.artifacts.insert(name.to_string(), PathBuf::from(file));
    }

    /// Absolute location of a recorded artifact, checked to exist.
    pub fn artifact(&self, name: &str) -> Result<PathBuf> {
        let rel = self.artifacts.get(name).ok_or_else(|| LabError::MissingArtifact {
            path: self.output_dir.join(name),
            hint: format!("manifest has no `{name}` entry"),
        })?;
        let path = self.output_dir.join(rel);
        if !path.exists() {
            return Err(LabError::MissingArtifact {
                path,
                hint: "listed in the manifest but not on disk".into(),
            });
        }
        Ok(path)
    }
}

/// Stable id from the configuration (which includes the seed): FNV-1a over
/// its JSON form.
pub fn run_id(config: &LabConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("seed{}-{h:016x}", config.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_is_stable_and_config_sensitive() {
        let a = LabConfig::default();
        assert_eq!(run_id(&a), run_id(&a.clone()));
        let b = LabConfig {
            lambda: 2.0,
            ..a.clone()
        };
        assert_ne!(run_id(&a), run_id(&b));
        assert!(run_id(&a).starts_with("seed0-"));
    }

    #[test]
    fn missing_manifest_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let err = RunManifest::load(dir.path()).unwrap_err();
        assert!(matches!(err, LabError::MissingArtifact { .. }));
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new(LabConfig::default(), dir.path(), 16, 3);
        m.record("history", "history.csv");
        m.save().unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
        assert!(m.artifact("history").is_err());
        assert!(m.artifact("encoder").is_err());
    }
}
