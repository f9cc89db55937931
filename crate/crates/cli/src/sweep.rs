use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::mpsc;

use cem_core::adversary::evaluate_attack;
use cem_core::numerics::derive_seed;
use cem_core::{evaluate_utility, final_cem_loss, train, train_attacker, CemError, Dataset};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{
    csv_error, csv_reader, csv_writer, eval_noise, load_dataset, STREAM_ATTACK_EVAL,
    STREAM_EVAL_ACCURACY, STREAM_FINAL_REFIT,
};
use crate::config::LabConfig;
use crate::manifest::run_id;
use crate::{LabError, Result};

pub const SWEEP_FILE: &str = "sweep.csv";

const SWEEP_HEADER: [&str; 7] = [
    "variance",
    "noise_std",
    "rel_cond_entropy",
    "mse_train",
    "mse_infer",
    "accuracy",
    "error",
];

/// One grid point, averaged over replicate seeds. MSEs are geometric means
/// since they are compared on a log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variance: f64,
    pub noise_std: f64,
    pub rel_cond_entropy: f64,
    pub mse_train: f64,
    pub mse_infer: f64,
    pub accuracy: f64,
    /// Empty on success.
    pub error: String,
}

impl SweepRow {
    fn failed(variance: f64, err: &dyn std::fmt::Display) -> Self {
        Self {
            variance,
            noise_std: variance.sqrt(),
            rel_cond_entropy: f64::NAN,
            mse_train: f64::NAN,
            mse_infer: f64::NAN,
            accuracy: f64::NAN,
            error: err.to_string(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_empty()
    }
}

struct Replicate {
    rel_h: f64,
    mse_train: f64,
    mse_infer: f64,
    accuracy: f64,
}

fn replicate(cfg: &LabConfig, data: &Dataset, variance: f64, q: u64) -> Result<Replicate> {
    let mut tcfg = cfg.training();
    tcfg.noise_std = variance.sqrt();
    tcfg.seed = cfg.seed.wrapping_add(q);
    let mut acfg = cfg.attack();
    acfg.seed = acfg.seed.wrapping_add(q);

    let outcome = train(&tcfg, data)?;
    let noise = tcfg.noise()?;
    let train_x = data.train_inputs();
    let l_c = final_cem_loss(
        &outcome.encoder,
        &outcome.mixture,
        &train_x,
        &noise,
        tcfg.gmm_iters,
        derive_seed(tcfg.seed, STREAM_FINAL_REFIT, 0),
    )?;
    let accuracy = evaluate_utility(
        &outcome.encoder,
        &outcome.decoder,
        &data.test_inputs(),
        &data.test_labels(),
        &eval_noise(&tcfg)?,
        derive_seed(tcfg.seed, STREAM_EVAL_ACCURACY, 0),
    )?;
    let deployed = tcfg.defense.deployed_noise(&noise);
    let attacker = train_attacker(&outcome.encoder, &deployed, &train_x, &acfg)?;
    let report = evaluate_attack(
        &attacker,
        &outcome.encoder,
        &deployed,
        &train_x,
        &data.test_inputs(),
        derive_seed(acfg.seed, STREAM_ATTACK_EVAL, 0),
        cfg.h_x_offset - l_c,
    )?;
    Ok(Replicate {
        rel_h: -l_c,
        mse_train: report.mse_train,
        mse_infer: report.mse_infer,
        accuracy,
    })
}

/// Train `cfg.replicates` fresh models at noise variance `variance` and
/// attack each one.
pub fn sweep_point(cfg: &LabConfig, data: &Dataset, variance: f64) -> SweepRow {
    let reps: Result<Vec<Replicate>> =
        (0..cfg.replicates as u64).map(|q| replicate(cfg, data, variance, q)).collect();
    match reps {
        Err(e) => SweepRow::failed(variance, &e),
        Ok(reps) => {
            let n = reps.len() as f64;
            let mean = |f: &dyn Fn(&Replicate) -> f64| reps.iter().map(f).sum::<f64>() / n;
            SweepRow {
                variance,
                noise_std: variance.sqrt(),
                rel_cond_entropy: mean(&|r| r.rel_h),
                mse_train: mean(&|r| r.mse_train.ln()).exp(),
                mse_infer: mean(&|r| r.mse_infer.ln()).exp(),
                accuracy: mean(&|r| r.accuracy),
                error: String::new(),
            }
        }
    }
}

/// Run every grid point (concurrently) and write `sweep.csv` in grid order,
/// one flushed row at a time. Failed points keep their row with the error
/// recorded.
pub fn cmd_sweep(cfg: &LabConfig, out: &Path) -> Result<Vec<SweepRow>> {
    if cfg.grid.is_empty() {
        return Err(LabError::Usage("sweep grid is empty".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| CemError::io(out, e))?;
    let data = load_dataset(cfg)?;
    let path = out.join(SWEEP_FILE);
    let mut writer = csv_writer(&path, &run_id(cfg), &SWEEP_HEADER)?;

    let (tx, rx) = mpsc::channel::<(usize, SweepRow)>();
    std::thread::scope(|s| {
        let handle = s.spawn(move || -> Result<Vec<SweepRow>> {
            let mut pending = BTreeMap::new();
            let mut rows = Vec::new();
            for (i, row) in rx {
                pending.insert(i, row);
                while let Some(row) = pending.remove(&rows.len()) {
                    writer.serialize(&row).map_err(|e| csv_error(&path, e))?;
                    writer.flush().map_err(|e| CemError::io(&path, e))?;
                    rows.push(row);
                }
            }
            Ok(rows)
        });
        cfg.grid
            .par_iter()
            .enumerate()
            .for_each_with(tx, |tx, (i, &v)| {
                // The writer only stops early on an I/O error, reported below.
                let _ = tx.send((i, sweep_point(cfg, &data, v)));
            });
        handle.join().expect("sweep writer panicked")
    })
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv_reader(path)?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

/// Least-squares fit of `ln(mse_infer)` on `rel_cond_entropy`, plus the
/// Spearman rank correlation, over the successful rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepFit {
    pub points: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub spearman: f64,
}

impl SweepFit {
    pub fn from_rows(rows: &[SweepRow]) -> Self {
        let (x, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.is_ok() && r.mse_infer > 0.0)
            .map(|r| (r.rel_cond_entropy, r.mse_infer.ln()))
            .unzip();
        let (slope, intercept, r) = ols(&x, &y);
        let (_, _, rho) = ols(&ranks(&x), &ranks(&y));
        Self {
            points: x.len(),
            slope,
            intercept,
            r2: r * r,
            spearman: rho,
        }
    }
}

/// Slope, intercept and Pearson correlation. NaN when undefined.
fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx, sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(h: f64, mse: f64) -> SweepRow {
        SweepRow {
            variance: 0.1,
            noise_std: 0.1f64.sqrt(),
            rel_cond_entropy: h,
            mse_train: mse,
            mse_infer: mse,
            accuracy: 1.0,
            error: String::new(),
        }
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn exact_exponential_fits_perfectly() {
        let rows: Vec<_> = (0..5).map(|i| row(i as f64, (0.5 * i as f64 - 3.0).exp())).collect();
        let fit = SweepFit::from_rows(&rows);
        assert_eq!(fit.points, 5);
        assert!((fit.slope - 0.5).abs() < 1e-12);
        assert!((fit.intercept + 3.0).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!((fit.spearman - 1.0).abs() < 1e-12);
    }

    #[test]
    fn failed_rows_are_ignored() {
        let mut rows: Vec<_> = (0..3).map(|i| row(i as f64, (i as f64).exp())).collect();
        rows.push(SweepRow::failed(0.3, &"boom"));
        assert_eq!(SweepFit::from_rows(&rows).points, 3);
    }

    #[test]
    fn anticorrelated_spearman_is_negative_one() {
        let rows: Vec<_> = (0..4).map(|i| row(i as f64, (-(i as f64).powi(3)).exp())).collect();
        let fit = SweepFit::from_rows(&rows);
        assert!((fit.spearman + 1.0).abs() < 1e-12);
        assert!(fit.slope < 0.0);
    }
}
