//! Synthetic relaxometry phantoms with calibrated tissue regions.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::bloch::{simulate_signal, TissueParams};
use crate::error::{Error, Result};
use crate::model::FispModel;

/// Calibrated (T1, T2) in ms of the 14 reference spheres, ROI 1 first.
pub const CALIBRATED_T1_T2: [(f64, f64); 14] = [
    (2480.0, 581.0),
    (2173.0, 404.0),
    (1907.0, 278.0),
    (1604.0, 191.0),
    (1332.0, 133.0),
    (1044.0, 97.0),
    (802.0, 64.0),
    (609.0, 46.0),
    (458.0, 32.0),
    (337.0, 23.0),
    (244.0, 16.0),
    (177.0, 11.0),
    (127.0, 8.0),
    (91.0, 6.0),
];

/// Calibrated tissues at nominal B1.
pub fn calibrated_tissues() -> Vec<TissueParams> {
    CALIBRATED_T1_T2
        .iter()
        .map(|&(t1, t2)| TissueParams::new(t1, t2, 1.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    /// Centre in pixel units (row, column).
    pub row: f64,
    pub col: f64,
    pub radius: f64,
    pub tissue: TissueParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    /// Discs on a canvas; a pixel belongs to a disc when its centre does.
    Circles {
        rows: usize,
        cols: usize,
        circles: Vec<Circle>,
    },
    /// One row of `per_roi` voxels per tissue.
    Blocks { tissues: Vec<TissueParams>, per_roi: usize },
}

impl Layout {
    /// The 14 calibrated tissues as discs of radius 6 on a 4x4 lattice of a
    /// 64x64 canvas.
    pub fn standard() -> Self {
        let circles = calibrated_tissues()
            .into_iter()
            .enumerate()
            .map(|(i, tissue)| Circle {
                row: 8.0 + 16.0 * (i / 4) as f64,
                col: 8.0 + 16.0 * (i % 4) as f64,
                radius: 6.0,
                tissue,
            })
            .collect();
        Layout::Circles {
            rows: 64,
            cols: 64,
            circles,
        }
    }

    pub fn blocks(per_roi: usize) -> Self {
        Layout::Blocks {
            tissues: calibrated_tissues(),
            per_roi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPhantom {
    rows: usize,
    cols: usize,
    /// 0 is background, `r` is ROI `r` (1-based).
    labels: Vec<usize>,
    tissues: Vec<TissueParams>,
    rho: Vec<Complex64>,
}

/// Unit magnitude with a phase that varies smoothly over the canvas.
fn smooth_rho(r: usize, c: usize, rows: usize, cols: usize) -> Complex64 {
    let y = r as f64 / rows as f64;
    let x = c as f64 / cols as f64;
    Complex64::from_polar(1.0, 0.25 * PI * (2.0 * PI * x).sin() + 0.15 * PI * (2.0 * PI * y).cos())
}

fn check_tissue(t: &TissueParams) -> Result<()> {
    t.validate(true)
}

impl SyntheticPhantom {
    pub fn new(layout: &Layout) -> Result<Self> {
        match layout {
            Layout::Circles { rows, cols, circles } => {
                for (i, a) in circles.iter().enumerate() {
                    check_tissue(&a.tissue)?;
                    if !(a.radius > 0.0) {
                        return Err(Error::InvalidParams(format!("ROI {} has non-positive radius", i + 1)));
                    }
                    for (j, b) in circles.iter().enumerate().skip(i + 1) {
                        if (a.row - b.row).hypot(a.col - b.col) < a.radius + b.radius {
                            return Err(Error::LayoutOverlap(i + 1, j + 1));
                        }
                    }
                }
                let mut labels = vec![0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                        if let Some(i) = circles.iter().position(|d| (y - d.row).hypot(x - d.col) <= d.radius) {
                            labels[r * cols + c] = i + 1;
                        }
                    }
                }
                Ok(Self::assemble(
                    *rows,
                    *cols,
                    labels,
                    circles.iter().map(|d| d.tissue).collect(),
                ))
            }
            Layout::Blocks { tissues, per_roi } => {
                tissues.iter().try_for_each(check_tissue)?;
                let labels = (0..tissues.len() * per_roi).map(|i| i / per_roi + 1).collect();
                Ok(Self::assemble(tissues.len(), *per_roi, labels, tissues.clone()))
            }
        }
    }

    fn assemble(rows: usize, cols: usize, labels: Vec<usize>, tissues: Vec<TissueParams>) -> Self {
        let rho = (0..rows * cols)
            .map(|i| {
                if labels[i] == 0 {
                    Complex64::default()
                } else {
                    smooth_rho(i / cols, i % cols, rows, cols)
                }
            })
            .collect();
        Self {
            rows,
            cols,
            labels,
            tissues,
            rho,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn voxel_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn roi_count(&self) -> usize {
        self.tissues.len()
    }

    /// Tissue of ROI `label` (1-based).
    pub fn roi_tissue(&self, label: usize) -> &TissueParams {
        &self.tissues[label - 1]
    }

    pub fn is_background(&self, voxel: usize) -> bool {
        self.labels[voxel] == 0
    }

    pub fn tissue(&self, voxel: usize) -> Option<&TissueParams> {
        match self.labels[voxel] {
            0 => None,
            l => Some(&self.tissues[l - 1]),
        }
    }

    pub fn rho(&self) -> &[Complex64] {
        &self.rho
    }

    /// Voxel indices of ROI `label`.
    pub fn roi_voxels(&self, label: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }

    /// One simulation per ROI, scaled by each voxel's `rho`; background is zero.
    /// Returns `voxels x M` in row-major voxel order.
    pub fn signals(&self, model: &FispModel) -> Result<Vec<Complex64>> {
        let m = model.schedule().len();
        let per_roi: Vec<Vec<Complex64>> = self
            .tissues
            .par_iter()
            .map(|t| simulate_signal(t, model.schedule(), model.ensemble()))
            .collect::<Result<_>>()?;
        let mut out = vec![Complex64::default(); self.voxel_count() * m];
        for (i, chunk) in out.chunks_exact_mut(m).enumerate() {
            if let Some(l) = self.labels[i].checked_sub(1) {
                for (o, s) in chunk.iter_mut().zip(&per_roi[l]) {
                    *o = self.rho[i] * s;
                }
            }
        }
        Ok(out)
    }
}
