use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use cem_core::adversary::evaluate_attack;
use cem_core::numerics::derive_seed;
use cem_core::{
    load_csv, mi_upper_bound, synth_blobs, train, train_attacker, AttackConfig, AttackReport,
    BoundsReport, CemError, Dataset, GaussianMixture, LossBreakdown, NeuralModule, NoiseModel,
    TrainingConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::LabConfig;
use crate::manifest::RunManifest;
use crate::sweep::{read_sweep, SweepFit, SWEEP_FILE};
use crate::{LabError, Result};

pub const ENCODER_FILE: &str = "encoder.json";
pub const DECODER_FILE: &str = "decoder.json";
pub const MIXTURE_FILE: &str = "mixture.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const ATTACKER_FILE: &str = "attacker.json";
pub const ATTACK_JSON: &str = "attack_report.json";
pub const ATTACK_CSV: &str = "attack_report.csv";
pub const BOUNDS_JSON: &str = "bounds.json";
pub const BOUNDS_CSV: &str = "bounds.csv";
pub const REPORT_FILE: &str = "report.json";

pub(crate) const STREAM_EVAL_ACCURACY: u64 = 21;
pub(crate) const STREAM_FINAL_REFIT: u64 = 22;
pub(crate) const STREAM_ATTACK_EVAL: u64 = 23;

pub fn load_dataset(cfg: &LabConfig) -> Result<Dataset> {
    Ok(match &cfg.data_csv {
        Some(path) => load_csv(path, cfg.n_classes)?,
        None => synth_blobs(cfg.n_classes, cfg.dim, cfg.per_class, cfg.spread, cfg.data_seed)?,
    })
}

/// Noise applied when measuring accuracy.
pub(crate) fn eval_noise(cfg: &TrainingConfig) -> Result<NoiseModel> {
    if cfg.eval_with_noise {
        Ok(cfg.defense.deployed_noise(&cfg.noise()?))
    } else {
        Ok(NoiseModel::new(0.0)?)
    }
}

/// `H(x|z)` estimate for the attack floor. Without training noise the bound
/// is vacuous and the floor is zero.
fn cond_entropy_estimate(mix: &GaussianMixture, cfg: &LabConfig) -> Result<f64> {
    let noise = NoiseModel::new(cfg.noise_std)?;
    if noise.std() == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(cfg.h_x_offset - mi_upper_bound(mix, &noise)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub l_d: f64,
    pub l_c: f64,
    pub total: f64,
    pub accuracy: f64,
    pub rel_cond_entropy: f64,
}

impl From<&LossBreakdown> for HistoryRow {
    fn from(b: &LossBreakdown) -> Self {
        Self {
            epoch: b.epoch,
            l_d: b.l_d,
            l_c: b.l_c,
            total: b.total,
            accuracy: b.accuracy,
            rel_cond_entropy: b.rel_cond_entropy(),
        }
    }
}

const HISTORY_HEADER: [&str; 6] = ["epoch", "l_d", "l_c", "total", "accuracy", "rel_cond_entropy"];

/// Open a CSV that starts with a `# run_id=` comment line and `header`.
pub(crate) fn csv_writer(path: &Path, run_id: &str, header: &[&str]) -> Result<csv::Writer<File>> {
    let mut file = File::create(path).map_err(|e| CemError::io(path, e))?;
    writeln!(file, "# run_id={run_id}").map_err(|e| CemError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    Ok(w)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> LabError {
    CemError::Parse(format!("{}: {e}", path.display())).into()
}

pub(crate) fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CemError::Parse(format!("{}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| CemError::io(path, e))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CemError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CemError::Parse(format!("{}: {e}", path.display())).into())
}

/// Train encoder, decoder and mixture; write checkpoints, history and the
/// manifest into `out`.
pub fn cmd_train(cfg: &LabConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| CemError::io(out, e))?;
    let data = load_dataset(cfg)?;
    let tcfg = cfg.training();
    let outcome = train(&tcfg, &data)?;

    let mut manifest = RunManifest::new(cfg.clone(), out, data.dim(), data.n_classes);
    outcome.encoder.save(&out.join(ENCODER_FILE))?;
    outcome.decoder.save(&out.join(DECODER_FILE))?;
    outcome.mixture.save(&out.join(MIXTURE_FILE))?;
    manifest.record("encoder", ENCODER_FILE);
    manifest.record("decoder", DECODER_FILE);
    manifest.record("mixture", MIXTURE_FILE);

    let path = out.join(HISTORY_FILE);
    let mut w = csv_writer(&path, &manifest.run_id, &HISTORY_HEADER)?;
    for b in &outcome.history {
        w.serialize(HistoryRow::from(b)).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| CemError::io(&path, e))?;
    manifest.record("history", HISTORY_FILE);

    manifest.test_accuracy = Some(cem_core::evaluate_utility(
        &outcome.encoder,
        &outcome.decoder,
        &data.test_inputs(),
        &data.test_labels(),
        &eval_noise(&tcfg)?,
        derive_seed(cfg.seed, STREAM_EVAL_ACCURACY, 0),
    )?);
    manifest.save()?;
    Ok(manifest)
}

/// Train an inversion attacker against the run's encoder and report its
/// reconstruction error on both splits.
pub fn cmd_attack(out: &Path, attack: &AttackConfig) -> Result<AttackReport> {
    let mut manifest = RunManifest::load(out)?;
    let cfg = manifest.config.clone();
    let encoder = NeuralModule::load(&manifest.artifact("encoder")?)?;
    let mixture = GaussianMixture::load(&manifest.artifact("mixture")?)?;
    let data = load_dataset(&cfg)?;
    let tcfg = cfg.training();
    let noise = tcfg.defense.deployed_noise(&tcfg.noise()?);

    let train_x = data.train_inputs();
    let attacker = train_attacker(&encoder, &noise, &train_x, attack)?;
    let report = evaluate_attack(
        &attacker,
        &encoder,
        &noise,
        &train_x,
        &data.test_inputs(),
        derive_seed(attack.seed, STREAM_ATTACK_EVAL, 0),
        cond_entropy_estimate(&mixture, &cfg)?,
    )?;

    attacker.save(&out.join(ATTACKER_FILE))?;
    write_json(&out.join(ATTACK_JSON), &report)?;
    let path = out.join(ATTACK_CSV);
    let mut w = csv_writer(
        &path,
        &manifest.run_id,
        &["mse_train", "mse_infer", "psnr_train", "psnr_infer", "floor"],
    )?;
    w.serialize(report).map_err(|e| csv_error(&path, e))?;
    w.flush().map_err(|e| CemError::io(&path, e))?;

    manifest.record("attacker", ATTACKER_FILE);
    manifest.record("attack_report", ATTACK_JSON);
    manifest.record("attack_csv", ATTACK_CSV);
    manifest.save()?;
    Ok(report)
}

/// Evaluate the information bounds of the run's mixture at the training noise.
pub fn cmd_bounds(out: &Path) -> Result<BoundsReport> {
    let mut manifest = RunManifest::load(out)?;
    let mixture = GaussianMixture::load(&manifest.artifact("mixture")?)?;
    let noise = NoiseModel::new(manifest.config.noise_std)?;
    let report = BoundsReport::compute(&mixture, &noise, manifest.config.h_x_offset, manifest.input_dim)?;

    write_json(&out.join(BOUNDS_JSON), &report)?;
    let path = out.join(BOUNDS_CSV);
    let mut w = csv_writer(
        &path,
        &manifest.run_id,
        &["mi_bound", "rel_cond_entropy", "mse_floor", "h_x_offset", "cem_loss"],
    )?;
    w.serialize(report).map_err(|e| csv_error(&path, e))?;
    w.flush().map_err(|e| CemError::io(&path, e))?;

    manifest.record("bounds", BOUNDS_JSON);
    manifest.record("bounds_csv", BOUNDS_CSV);
    manifest.save()?;
    Ok(report)
}

/// Everything found in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: Option<String>,
    pub test_accuracy: Option<f64>,
    pub final_epoch: Option<HistoryRow>,
    pub bounds: Option<BoundsReport>,
    pub attack: Option<AttackReport>,
    pub sweep: Option<SweepFit>,
}

impl Report {
    pub fn summary(&self) -> String {
        let mut lines = Vec::new();
        if let Some(id) = &self.run_id {
            lines.push(format!("run {id}"));
        }
        if let Some(acc) = self.test_accuracy {
            lines.push(format!("test accuracy     {acc:.4}"));
        }
        if let Some(h) = &self.final_epoch {
            lines.push(format!(
                "epoch {:<4}        l_d {:.4}  l_c {:.4}  total {:.4}",
                h.epoch, h.l_d, h.l_c, h.total
            ));
        }
        if let Some(b) = &self.bounds {
            lines.push(format!(
                "bounds            mi <= {:.4}  rel H(x|z) >= {:.4}  mse floor {:.4e}",
                b.mi_bound, b.rel_cond_entropy, b.mse_floor
            ));
        }
        if let Some(a) = &self.attack {
            lines.push(format!(
                "attack            mse train {:.5}  infer {:.5}  psnr {:.2} / {:.2} dB",
                a.mse_train, a.mse_infer, a.psnr_train, a.psnr_infer
            ));
        }
        if let Some(s) = &self.sweep {
            lines.push(format!(
                "sweep ({} pts)     log mse ~ rel H: slope {:.4}  R2 {:.3}  spearman {:.3}",
                s.points, s.slope, s.r2, s.spearman
            ));
        }
        lines.join("\n")
    }
}

/// Collect whatever artifacts `out` holds into `report.json`.
pub fn cmd_report(out: &Path) -> Result<Report> {
    let manifest = match RunManifest::load(out) {
        Ok(m) => Some(m),
        Err(LabError::MissingArtifact { .. }) => None,
        Err(e) => return Err(e),
    };
    let sweep_path = out.join(SWEEP_FILE);
    let sweep = if sweep_path.exists() {
        Some(SweepFit::from_rows(&read_sweep(&sweep_path)?))
    } else {
        None
    };
    if manifest.is_none() && sweep.is_none() {
        return Err(LabError::MissingArtifact {
            path: out.to_path_buf(),
            hint: "no manifest.json or sweep.csv; run train or sweep first".into(),
        });
    }

    let mut report = Report {
        run_id: None,
        test_accuracy: None,
        final_epoch: None,
        bounds: None,
        attack: None,
        sweep,
    };
    if let Some(m) = &manifest {
        report.run_id = Some(m.run_id.clone());
        report.test_accuracy = m.test_accuracy;
        if let Ok(path) = m.artifact("history") {
            let mut r = csv_reader(&path)?;
            for row in r.deserialize::<HistoryRow>() {
                report.final_epoch = Some(row.map_err(|e| csv_error(&path, e))?);
            }
        }
        if let Ok(path) = m.artifact("bounds") {
            report.bounds = Some(read_json(&path)?);
        }
        if let Ok(path) = m.artifact("attack_report") {
            report.attack = Some(read_json(&path)?);
        }
    }
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}
