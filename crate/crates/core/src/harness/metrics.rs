//! ROI error statistics and per-voxel tables.

use std::io::Write;

use crate::error::{Error, Result};
use crate::estimate::VoxelEstimate;
use crate::harness::phantom::SyntheticPhantom;
use crate::pgrid::ParameterGrid;

/// Root mean square of `estimates - truth` as a percentage of `truth`.
pub fn relative_rmse_percent(estimates: &[f64], truth: f64) -> f64 {
    let ms = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / estimates.len() as f64;
    100.0 * ms.sqrt() / truth
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiRow {
    pub label: usize,
    pub count: usize,
    pub t1_ref: f64,
    pub t2_ref: f64,
    pub t1_mean: f64,
    pub t2_mean: f64,
    pub t1_rmse_percent: f64,
    pub t2_rmse_percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiReport {
    pub method: String,
    pub rows: Vec<RoiRow>,
}

/// Indices of the T1 and T2 axes of `grid`.
pub fn relaxation_axes(grid: &ParameterGrid) -> Result<(usize, usize)> {
    grid.axis_index("T1")
        .zip(grid.axis_index("T2"))
        .ok_or_else(|| Error::InvalidGrid("grid needs axes named T1 and T2".into()))
}

impl RoiReport {
    /// Per-ROI statistics of `estimates` (one per phantom voxel).
    pub fn new(
        method: &str,
        phantom: &SyntheticPhantom,
        estimates: &[VoxelEstimate],
        grid: &ParameterGrid,
    ) -> Result<Self> {
        if estimates.len() != phantom.voxel_count() {
            return Err(Error::DimensionMismatch {
                expected: phantom.voxel_count(),
                got: estimates.len(),
            });
        }
        let (a1, a2) = relaxation_axes(grid)?;
        let rows = (1..=phantom.roi_count())
            .filter_map(|label| {
                let voxels = phantom.roi_voxels(label);
                if voxels.is_empty() {
                    return None;
                }
                let t = phantom.roi_tissue(label);
                let t1: Vec<f64> = voxels.iter().map(|&i| estimates[i].theta_hat[a1]).collect();
                let t2: Vec<f64> = voxels.iter().map(|&i| estimates[i].theta_hat[a2]).collect();
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                Some(RoiRow {
                    label,
                    count: voxels.len(),
                    t1_ref: t.t1,
                    t2_ref: t.t2,
                    t1_mean: mean(&t1),
                    t2_mean: mean(&t2),
                    t1_rmse_percent: relative_rmse_percent(&t1, t.t1),
                    t2_rmse_percent: relative_rmse_percent(&t2, t.t2),
                })
            })
            .collect();
        Ok(Self {
            method: method.to_string(),
            rows,
        })
    }

    pub fn median_t1_rmse(&self) -> f64 {
        median(&self.rows.iter().map(|r| r.t1_rmse_percent).collect::<Vec<_>>())
    }

    pub fn median_t2_rmse(&self) -> f64 {
        median(&self.rows.iter().map(|r| r.t2_rmse_percent).collect::<Vec<_>>())
    }

    pub fn write_csv_header<W: Write>(mut w: W) -> Result<()> {
        writeln!(
            w,
            "roi,method,voxels,T1_ref,T2_ref,T1_mean,T2_mean,T1_rmse_pct,T2_rmse_pct"
        )?;
        Ok(())
    }

    pub fn write_csv_rows<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.label,
                self.method,
                r.count,
                r.t1_ref,
                r.t2_ref,
                r.t1_mean,
                r.t2_mean,
                r.t1_rmse_percent,
                r.t2_rmse_percent
            )?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        Self::write_csv_header(&mut w)?;
        self.write_csv_rows(w)
    }
}

/// Mean of `|a - b| / |b|` along `axis` over the voxels in `voxels`.
pub fn mean_abs_relative_deviation(a: &[VoxelEstimate], b: &[VoxelEstimate], axis: usize, voxels: &[usize]) -> f64 {
    voxels
        .iter()
        .map(|&i| ((a[i].theta_hat[axis] - b[i].theta_hat[axis]) / b[i].theta_hat[axis]).abs())
        .sum::<f64>()
        / voxels.len() as f64
}

/// `voxel,<axes...>,abs_rho,arg_rho,residual,iterations,converged`
pub fn write_estimates_csv<W: Write>(mut w: W, grid: &ParameterGrid, estimates: &[VoxelEstimate]) -> Result<()> {
    let names: Vec<&str> = grid.axes().iter().map(|a| a.name()).collect();
    writeln!(
        w,
        "voxel,{},abs_rho,arg_rho,residual,iterations,converged",
        names.join(",")
    )?;
    for (i, e) in estimates.iter().enumerate() {
        let theta: Vec<String> = e.theta_hat.iter().map(|x| format!("{x:.6}")).collect();
        writeln!(
            w,
            "{},{},{:.8},{:.8},{:.8e},{},{}",
            i,
            theta.join(","),
            e.rho_hat.norm(),
            e.rho_hat.arg(),
            e.residual_norm,
            e.iterations,
            u8::from(e.converged)
        )?;
    }
    Ok(())
}
