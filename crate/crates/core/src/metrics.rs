//! Image quality metrics for reconstructed conductivities.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::forward::{Bounds, Conductivity, ForwardModel, VoltageFrame};
use crate::graph::DiffMatrix;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    ensure!(a.len() == b.len(), Shape, "lengths differ: {} vs {}", a.len(), b.len());
    ensure!(!a.is_empty(), Shape, "empty conductivity vector");
    Ok(())
}

fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<()> {
    if let Some(w) = weights {
        ensure!(w.len() == n, Shape, "{} weights for {n} elements", w.len());
        ensure!(w.iter().all(|&v| v >= 0.0), InvalidArgument, "negative weight");
        ensure!(w.iter().sum::<f64>() > 0.0, InvalidArgument, "weights sum to zero");
    }
    Ok(())
}

fn weight(weights: Option<&[f64]>, i: usize) -> f64 {
    weights.map_or(1.0, |w| w[i])
}

pub fn mse(sigma_hat: &[f64], sigma_true: &[f64]) -> Result<f64> {
    mse_weighted(sigma_hat, sigma_true, None)
}

/// Weighted mean of squared differences; `None` is the plain mean.
pub fn mse_weighted(sigma_hat: &[f64], sigma_true: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    check_lengths(sigma_hat, sigma_true)?;
    check_weights(weights, sigma_hat.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (h, t)) in sigma_hat.iter().zip(sigma_true).enumerate() {
        let w = weight(weights, i);
        num += w * (t - h).powi(2);
        den += w;
    }
    Ok(num / den)
}

pub fn re_sigma_l1(sigma_hat: &[f64], sigma_true: &[f64]) -> Result<f64> {
    re_sigma_l1_weighted(sigma_hat, sigma_true, None)
}

pub fn re_sigma_l1_weighted(sigma_hat: &[f64], sigma_true: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    check_lengths(sigma_hat, sigma_true)?;
    check_weights(weights, sigma_hat.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (h, t)) in sigma_hat.iter().zip(sigma_true).enumerate() {
        let w = weight(weights, i);
        num += w * (h - t).abs();
        den += w * t.abs();
    }
    ensure!(den > 0.0, InvalidArgument, "true conductivity has zero norm");
    Ok(num / den)
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Dynamic range in percent.
pub fn dynamic_range(sigma_hat: &[f64], sigma_true: &[f64]) -> Result<f64> {
    check_lengths(sigma_hat, sigma_true)?;
    let truth = spread(sigma_true);
    ensure!(truth > 0.0, InvalidArgument, "dynamic range undefined for constant truth");
    Ok(100.0 * (spread(sigma_hat) / truth))
}

/// Total variation ratio in percent.
pub fn tv_ratio(sigma_hat: &[f64], sigma_true: &[f64], diff: &DiffMatrix) -> Result<f64> {
    check_lengths(sigma_hat, sigma_true)?;
    ensure!(
        diff.n_elements() == sigma_hat.len(),
        Shape,
        "difference matrix has {} columns for {} elements",
        diff.n_elements(),
        sigma_hat.len()
    );
    let tv = |s: &[f64]| diff.apply(s).iter().map(|v| v.abs()).sum::<f64>();
    let truth = tv(sigma_true);
    ensure!(truth > 0.0, InvalidArgument, "total variation ratio undefined for constant truth");
    Ok(100.0 * (tv(sigma_hat) / truth))
}

/// `‖U(σ̂) − V‖₂ / ‖V‖₂`, with σ̂ projected onto `bounds` before the solve.
pub fn re_v_l2(sigma_hat: &[f64], measured: &VoltageFrame, model: &ForwardModel, bounds: Bounds) -> Result<f64> {
    let sigma = Conductivity::projected(sigma_hat, bounds);
    let simulated = model.solve(&sigma)?.frame;
    let (u, v) = (simulated.matrix(), measured.matrix());
    ensure!(
        u.shape() == v.shape(),
        Shape,
        "measured frame {:?} does not match the model's {:?}",
        v.shape(),
        u.shape()
    );
    let norm = v.norm();
    ensure!(norm > 0.0, InvalidArgument, "measured voltages are zero");
    Ok((u - v).norm() / norm)
}

/// Mean over masked elements, optionally weighted by element area.
pub fn roi_mean(sigma_hat: &[f64], mask: &[bool], areas: Option<&[f64]>) -> Result<f64> {
    ensure!(mask.len() == sigma_hat.len(), Shape, "mask length {} vs {}", mask.len(), sigma_hat.len());
    check_weights(areas, sigma_hat.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (&s, &m)) in sigma_hat.iter().zip(mask).enumerate() {
        if m {
            let w = weight(areas, i);
            num += w * s;
            den += w;
        }
    }
    ensure!(den > 0.0, InvalidArgument, "empty region of interest");
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sample: usize,
    pub method: String,
    pub mse: f64,
    pub re_sigma_l1: f64,
    pub dr_percent: f64,
    pub tvr_percent: f64,
    pub re_v_l2: Option<f64>,
    pub roi_means: Vec<f64>,
}

/// Inputs for one row of a metric table.
pub struct Evaluation<'a> {
    pub sample: usize,
    pub method: &'a str,
    pub sigma_hat: &'a [f64],
    pub sigma_true: &'a [f64],
    pub diff: &'a DiffMatrix,
    /// Element areas when the area-weighted variants are wanted.
    pub areas: Option<&'a [f64]>,
    pub voltages: Option<(&'a VoltageFrame, &'a ForwardModel, Bounds)>,
    pub roi_masks: &'a [Vec<bool>],
}

pub fn evaluate(e: &Evaluation) -> Result<MetricReport> {
    let re_v = e
        .voltages
        .map(|(v, model, bounds)| re_v_l2(e.sigma_hat, v, model, bounds))
        .transpose()?;
    let roi_means = e
        .roi_masks
        .iter()
        .map(|m| roi_mean(e.sigma_hat, m, e.areas))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        sample: e.sample,
        method: e.method.to_string(),
        mse: mse_weighted(e.sigma_hat, e.sigma_true, e.areas)?,
        re_sigma_l1: re_sigma_l1_weighted(e.sigma_hat, e.sigma_true, e.areas)?,
        dr_percent: dynamic_range(e.sigma_hat, e.sigma_true)?,
        tvr_percent: tv_ratio(e.sigma_hat, e.sigma_true, e.diff)?,
        re_v_l2: re_v,
        roi_means,
    })
}

/// CSV with one row per report; ROI columns are padded to the widest row.
pub fn to_csv(reports: &[MetricReport]) -> String {
    let n_roi = reports.iter().map(|r| r.roi_means.len()).max().unwrap_or(0);
    let mut out = String::from("sample,method,mse,re_sigma_l1,dr_percent,tvr_percent,re_v_l2");
    for k in 0..n_roi {
        let _ = write!(out, ",roi_{k}");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(
            out,
            "{},{},{:e},{:e},{:e},{:e},",
            r.sample, r.method, r.mse, r.re_sigma_l1, r.dr_percent, r.tvr_percent
        );
        if let Some(v) = r.re_v_l2 {
            let _ = write!(out, "{v:e}");
        }
        for k in 0..n_roi {
            out.push(',');
            if let Some(m) = r.roi_means.get(k) {
                let _ = write!(out, "{m:e}");
            }
        }
        out.push('\n');
    }
    out
}
