//! Overlap, correlation and landmark metrics, and the registration report.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelVolume, Point3, ScalarVolume, SpatialMap};

/// Per-label and mean Dice overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_label: BTreeMap<u32, f64>,
    pub mean: f64,
}

/// Dice of every non-background label present in either volume.
///
/// A label present in only one volume scores 0.
pub fn dice(warped: &LabelVolume, fixed: &LabelVolume) -> Result<DiceScores> {
    warped.shape.check_dims(&fixed.shape, "dice")?;
    let mut counts: BTreeMap<u32, [usize; 3]> = BTreeMap::new();
    for (&w, &f) in warped.labels.iter().zip(&fixed.labels) {
        if w != 0 {
            counts.entry(w).or_default()[0] += 1;
        }
        if f != 0 {
            counts.entry(f).or_default()[1] += 1;
        }
        if w != 0 && w == f {
            counts.entry(w).or_default()[2] += 1;
        }
    }
    let per_label: BTreeMap<u32, f64> = counts
        .into_iter()
        .map(|(l, [a, b, both])| (l, 2.0 * both as f64 / (a + b) as f64))
        .collect();
    let mean = if per_label.is_empty() {
        0.0
    } else {
        per_label.values().sum::<f64>() / per_label.len() as f64
    };
    Ok(DiceScores { per_label, mean })
}

struct Moments {
    mean_a: f64,
    mean_b: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

fn moments(a: &[f64], b: &[f64]) -> Moments {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    Moments {
        mean_a,
        mean_b,
        saa,
        sbb,
        sab,
    }
}

/// Pearson correlation of the two voxel series.
pub fn ncc(a: &ScalarVolume, b: &ScalarVolume) -> Result<f64> {
    Ok(ncc_with_grad(a, b)?.0)
}

/// NCC and its derivative with respect to every value of `a`.
pub(crate) fn ncc_with_grad(a: &ScalarVolume, b: &ScalarVolume) -> Result<(f64, Vec<f64>)> {
    a.shape.check_dims(&b.shape, "ncc")?;
    let m = moments(&a.values, &b.values);
    if m.saa <= 0.0 || m.sbb <= 0.0 {
        return Err(Error::DegenerateIntensity);
    }
    let denom = (m.saa * m.sbb).sqrt();
    let cc = (m.sab / denom).clamp(-1.0, 1.0);
    let grad = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (y - m.mean_b) / denom - cc * (x - m.mean_a) / m.saa)
        .collect();
    Ok((cc, grad))
}

/// Truncated cubic box sums: `out[c] = Σ_{i : |i − c|∞ ≤ r} v[i]`.
fn box_sum(shape: &GridShape, v: &[f64], r: usize) -> Vec<f64> {
    let mut cur = v.to_vec();
    let d = shape.dims;
    for axis in 0..3 {
        let n = d[axis];
        let stride = match axis {
            0 => d[1] * d[2],
            1 => d[2],
            _ => 1,
        };
        let mut next = vec![0.0; cur.len()];
        let mut prefix = vec![0.0; n + 1];
        for start in 0..cur.len() {
            let c = shape.coord(start);
            if c[axis] != 0 {
                continue;
            }
            for k in 0..n {
                prefix[k + 1] = prefix[k] + cur[start + k * stride];
            }
            for k in 0..n {
                let lo = k.saturating_sub(r);
                let hi = (k + r + 1).min(n);
                next[start + k * stride] = prefix[hi] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

fn check_window(window: usize) -> Result<usize> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::Config(format!("LNCC window {window} must be odd and >= 3")));
    }
    Ok(window / 2)
}

/// Mean over voxels of the correlation within a cubic window centred on each
/// voxel (truncated at the border). Windows with zero variance contribute 0.
pub fn lncc(a: &ScalarVolume, b: &ScalarVolume, window: usize) -> Result<f64> {
    Ok(lncc_with_grad(a, b, window, false)?.0)
}

pub(crate) fn lncc_with_grad(
    a: &ScalarVolume,
    b: &ScalarVolume,
    window: usize,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    a.shape.check_dims(&b.shape, "lncc")?;
    let r = check_window(window)?;
    let shape = a.shape;
    let n_vox = shape.len();
    let (av, bv) = (&a.values, &b.values);
    let sq = |f: &dyn Fn(usize) -> f64| box_sum(&shape, &(0..n_vox).map(f).collect::<Vec<_>>(), r);
    let count = sq(&|_| 1.0);
    let sa = box_sum(&shape, av, r);
    let sb = box_sum(&shape, bv, r);
    let saa = sq(&|i| av[i] * av[i]);
    let sbb = sq(&|i| bv[i] * bv[i]);
    let sab = sq(&|i| av[i] * bv[i]);

    let mut total = 0.0;
    let mut alpha = vec![0.0; n_vox];
    let mut alpha_mb = vec![0.0; n_vox];
    let mut beta = vec![0.0; n_vox];
    let mut beta_ma = vec![0.0; n_vox];
    for c in 0..n_vox {
        let n = count[c];
        let (ma, mb) = (sa[c] / n, sb[c] / n);
        let vaa = saa[c] - n * ma * ma;
        let vbb = sbb[c] - n * mb * mb;
        let vab = sab[c] - n * ma * mb;
        if vaa <= 1e-10 * saa[c] || vbb <= 1e-10 * sbb[c] || vaa <= 0.0 || vbb <= 0.0 {
            continue;
        }
        let denom = (vaa * vbb).sqrt();
        let cc = vab / denom;
        total += cc;
        alpha[c] = 1.0 / denom;
        alpha_mb[c] = mb / denom;
        beta[c] = cc / vaa;
        beta_ma[c] = cc * ma / vaa;
    }
    let mean = total / n_vox as f64;
    if !want_grad {
        return Ok((mean, Vec::new()));
    }
    let (alpha, alpha_mb) = (box_sum(&shape, &alpha, r), box_sum(&shape, &alpha_mb, r));
    let (beta, beta_ma) = (box_sum(&shape, &beta, r), box_sum(&shape, &beta_ma, r));
    let scale = 1.0 / n_vox as f64;
    let grad = (0..n_vox)
        .map(|i| scale * (bv[i] * alpha[i] - alpha_mb[i] - av[i] * beta[i] + beta_ma[i]))
        .collect();
    Ok((mean, grad))
}

/// Mean distance `‖map(x_f) − x_m‖`, scaled to physical units by `spacing`.
pub fn landmark_error<M: SpatialMap>(
    moving: &[Point3],
    fixed: &[Point3],
    map: &M,
    spacing: [f64; 3],
) -> Result<f64> {
    if moving.len() != fixed.len() {
        return Err(Error::PairingError(moving.len(), fixed.len()));
    }
    if moving.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = moving
        .iter()
        .zip(fixed)
        .map(|(m, f)| {
            let p = map.apply(*f);
            (0..3)
                .map(|a| ((p[a] - m[a]) * spacing[a]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / moving.len() as f64)
}

/// Timing and optional landmark error after one pipeline stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub landmark_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub per_label_dice: BTreeMap<u32, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_mean_dice: Option<f64>,
    pub folding_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_landmark_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_landmark_error: Option<f64>,
    /// Number of correspondences kept after thresholding.
    pub matches: usize,
    /// RMS residual of the affine fit, in feature-grid voxels.
    pub affine_residual: f64,
    pub stages: Vec<StageRecord>,
}

impl RegistrationReport {
    pub fn stage_timings(&self) -> BTreeMap<String, f64> {
        self.stages.iter().map(|s| (s.stage.clone(), s.seconds)).collect()
    }

    /// Fixed-width text rendering for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!("{:<24}{:>12}\n", "metric", "value"));
        out.push_str(&format!("{:<24}{:>12}\n", "mean dice", opt(self.mean_dice)));
        out.push_str(&format!("{:<24}{:>12}\n", "initial mean dice", opt(self.initial_mean_dice)));
        out.push_str(&format!("{:<24}{:>12.6}\n", "folding fraction", self.folding_fraction));
        out.push_str(&format!("{:<24}{:>12}\n", "landmark error", opt(self.mean_landmark_error)));
        out.push_str(&format!("{:<24}{:>12}\n", "initial landmark error", opt(self.initial_landmark_error)));
        out.push_str(&format!("{:<24}{:>12}\n", "matches", self.matches));
        out.push_str(&format!("{:<24}{:>12.4}\n", "affine residual", self.affine_residual));
        out.push('\n');
        out.push_str(&format!("{:<12}{:>12}{:>12}{:>12}\n", "stage", "seconds", "landmark", "dice"));
        for s in &self.stages {
            out.push_str(&format!(
                "{:<12}{:>12.3}{:>12}{:>12}\n",
                s.stage,
                s.seconds,
                opt(s.landmark_error),
                opt(s.mean_dice)
            ));
        }
        if !self.per_label_dice.is_empty() {
            out.push('\n');
            out.push_str(&format!("{:<12}{:>12}\n", "label", "dice"));
            for (l, d) in &self.per_label_dice {
                out.push_str(&format!("{l:<12}{d:>12.4}\n"));
            }
        }
        out
    }
}

/// Labels present in either volume, background excluded.
pub fn label_set(vols: &[&LabelVolume]) -> BTreeSet<u32> {
    vols.iter()
        .flat_map(|v| v.labels.iter().copied())
        .filter(|&l| l != 0)
        .collect()
}
