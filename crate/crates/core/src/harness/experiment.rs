//! End-to-end experiments: edge error decay, interior audit, resolution
//! versus target error, and matching/fitting parity on a noisy phantom.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use num_complex::Complex64;

use crate::bloch::{AcquisitionSchedule, SpinEnsemble};
use crate::dict::{generate_dictionary, svd_truncate, Basis, Dictionary, Rank};
use crate::error::{Error, Result};
use crate::estimate::{match_batch, Estimator, FitOptions, VoxelEstimate};
use crate::harness::lattice::lattice_match;
use crate::harness::metrics::{write_estimates_csv, RoiReport};
use crate::harness::noise::{add_noise, mean_magnitude, NoiseModel};
use crate::harness::phantom::{Layout, SyntheticPhantom};
use crate::harness::plot::{write_map, write_svg, Plot, Series};
use crate::model::FispModel;
use crate::pgrid::{ParameterAxis, ParameterGrid};
use crate::resolve::{
    estimate_grid_resolution, interior_error_audit, select_count, AuditReport, NearestNodeDictionary, ResolutionConfig,
    ResolutionReport,
};
use crate::spline::SplineModel;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub schedule: AcquisitionSchedule,
    pub ensemble: SpinEnsemble,
    pub axes: Vec<ParameterAxis>,
    pub resolution: ResolutionConfig,
    /// Spline order used for fitting.
    pub fit_order: usize,
    /// Compression rank; `None` fits in the full signal space.
    pub rank: Option<usize>,
    pub snr: f64,
    pub voxels_per_roi: usize,
    pub audit_samples: usize,
    pub alpha_sweep: Vec<f64>,
    pub seed: u64,
    pub fit: FitOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schedule: AcquisitionSchedule::fisp_train(200),
            ensemble: SpinEnsemble::slice_profile(64, 3.0).expect("valid default ensemble"),
            axes: ParameterGrid::relaxometry(2, 2, 2)
                .expect("valid default box")
                .axes()
                .to_vec(),
            resolution: ResolutionConfig {
                max_level: 15,
                safety_factor: 1.0,
                ..ResolutionConfig::default()
            },
            fit_order: 2,
            rank: Some(30),
            snr: 30.0,
            voxels_per_roi: 500,
            audit_samples: 1000,
            alpha_sweep: vec![5e-3, 5e-4, 5e-5],
            seed: 20,
            fit: FitOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn model(&self) -> Result<FispModel> {
        let grid = ParameterGrid::new(self.axes.iter().map(|a| a.with_count(2)).collect::<Result<_>>()?)?;
        FispModel::for_grid(&grid, self.schedule.clone(), self.ensemble.clone())
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Edge error curves for every axis and order: `curves.csv`,
/// `selected.csv` and one `decay_<axis>.svg` per axis.
pub fn error_decay(config: &ExperimentConfig, out: &Path) -> Result<ResolutionReport> {
    std::fs::create_dir_all(out)?;
    let report = estimate_grid_resolution(&config.axes, &config.resolution, &config.model()?)?;
    write_resolution(&report, out)?;
    Ok(report)
}

pub fn write_resolution(report: &ResolutionReport, out: &Path) -> Result<()> {
    report.write_curves_csv(create(out, "curves.csv")?)?;
    report.write_summary_csv(create(out, "selected.csv")?)?;
    for (p, axis) in report.axes.iter().enumerate() {
        let mut plot = Plot::new(
            &format!("Edge interpolation error along {}", axis.name()),
            "atoms K",
            "max error",
            true,
            true,
        );
        for c in report.curves.iter().filter(|c| c.axis == p) {
            let selected = c.selection.count().map_or("not reached".into(), |k| format!("K={k}"));
            plot.series.push(Series {
                label: format!("n={} ({selected})", c.order),
                points: c.points.iter().map(|q| (q.count as f64, q.max_error)).collect(),
                scatter: false,
            });
        }
        plot.reference = Some((report.config.target(), "target".into()));
        write_svg(&plot, out.join(format!("decay_{}.svg", axis.name())))?;
    }
    Ok(())
}

/// Interior audits of the n=0 dictionary and the fitting-order spline sized
/// by `report`: `audit_n<order>.csv`, `audit_summary.csv`, `audit.svg`.
pub fn interior_audit(
    config: &ExperimentConfig,
    report: &ResolutionReport,
    out: &Path,
) -> Result<Vec<(usize, AuditReport)>> {
    std::fs::create_dir_all(out)?;
    let model = config.model()?;
    let alpha = config.resolution.alpha;
    let mut audits = Vec::new();

    let dense = report.grid_for_order(0)?;
    let nearest = NearestNodeDictionary::new(dense.clone(), &model);
    audits.push((
        0,
        interior_error_audit(&nearest, &model, config.audit_samples, alpha, config.seed)?,
    ));

    let n = config.fit_order;
    let sparse = report.grid_for_order(n)?;
    let dict = generate_dictionary(&sparse, &model)?;
    let spline = SplineModel::prefilter(dict.atoms(), dict.channels(), &sparse, n)?;
    audits.push((
        n,
        interior_error_audit(&spline, &model, config.audit_samples, alpha, config.seed)?,
    ));

    let mut summary = create(out, "audit_summary.csv")?;
    writeln!(summary, "n,atoms,samples,exceedance,max_over_alpha,rms")?;
    let mut plot = Plot::new("Interior interpolation error", "sample rank", "error", false, true);
    for (order, audit) in &audits {
        let grid = if *order == 0 { &dense } else { &sparse };
        audit.write_csv(create(out, &format!("audit_n{order}.csv"))?, grid)?;
        writeln!(
            summary,
            "{},{},{},{:.6},{:.6},{:e}",
            order,
            grid.atom_count(),
            audit.samples.len(),
            audit.exceedance(),
            audit.max() / alpha,
            audit.rms()
        )?;
        let mut errors: Vec<f64> = audit.samples.iter().map(|s| s.error).collect();
        errors.sort_by(f64::total_cmp);
        plot.series.push(Series {
            label: format!("n={order}"),
            points: errors.iter().enumerate().map(|(i, &e)| (i as f64, e)).collect(),
            scatter: true,
        });
    }
    summary.flush()?;
    plot.reference = Some((alpha, "alpha".into()));
    write_svg(&plot, out.join("audit.svg"))?;
    Ok(audits)
}

/// Selected counts per axis and order for each target error, `NA` when the
/// curve does not reach it: `alpha_sweep.csv`.
pub fn alpha_sweep(config: &ExperimentConfig, report: &ResolutionReport, out: &Path) -> Result<Vec<AlphaRow>> {
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for &alpha in &config.alpha_sweep {
        let target = alpha / report.config.safety_factor;
        for &n in &report.config.orders {
            let counts: Vec<Option<usize>> = (0..report.axes.len())
                .map(|p| {
                    report
                        .curve(p, n)
                        .and_then(|c| select_count(&c.points, target, report.config.interpolation).count())
                })
                .collect();
            rows.push(AlphaRow {
                alpha,
                order: n,
                counts,
            });
        }
    }
    let mut w = create(out, "alpha_sweep.csv")?;
    let names: Vec<&str> = report.axes.iter().map(|a| a.name()).collect();
    writeln!(
        w,
        "alpha,n,{},total",
        names.iter().map(|n| format!("K_{n}")).collect::<Vec<_>>().join(",")
    )?;
    for r in &rows {
        let ks: Vec<String> = r
            .counts
            .iter()
            .map(|k| k.map_or("NA".into(), |k| k.to_string()))
            .collect();
        let total = r.total().map_or("NA".into(), |t| t.to_string());
        writeln!(w, "{:e},{},{},{}", r.alpha, r.order, ks.join(","), total)?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaRow {
    pub alpha: f64,
    pub order: usize,
    pub counts: Vec<Option<usize>>,
}

impl AlphaRow {
    pub fn total(&self) -> Option<usize> {
        self.counts.iter().copied().product()
    }
}

/// Wall time of one mapping run; loading is filled in by callers that read
/// the dictionary from disk.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MapTiming {
    pub load: Duration,
    pub prefilter: Duration,
    pub estimation: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Match,
    Fit { order: usize, options: FitOptions },
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub estimates: Vec<VoxelEstimate>,
    pub report: RoiReport,
    pub timing: MapTiming,
}

/// Phantom signals with noise at `snr`, where the noise level is the mean
/// over tissue voxels of `mean|m|`, divided by `snr`. Returns the signals
/// and the noise model used.
pub fn phantom_signals(
    phantom: &SyntheticPhantom,
    model: &FispModel,
    snr: Option<f64>,
    seed: u64,
) -> Result<(Vec<Complex64>, NoiseModel)> {
    let clean = phantom.signals(model)?;
    let m = model.schedule().len();
    let noise = match snr {
        None => NoiseModel::new(0.0, seed)?,
        Some(snr) => {
            let tissue: Vec<f64> = (0..phantom.voxel_count())
                .filter(|&i| !phantom.is_background(i))
                .map(|i| mean_magnitude(&clean[i * m..(i + 1) * m]))
                .collect();
            if tissue.is_empty() || !(snr > 0.0) {
                return Err(Error::InvalidParams(
                    "SNR needs tissue voxels and a positive value".into(),
                ));
            }
            NoiseModel::new(tissue.iter().sum::<f64>() / tissue.len() as f64 / snr, seed)?
        }
    };
    Ok((add_noise(&clean, &noise), noise))
}

/// Estimates every voxel of `signals` with `method` on `dictionary`.
pub fn estimate_map(
    dictionary: &Dictionary,
    signals: &[Complex64],
    len: usize,
    method: &Method,
) -> Result<(Vec<VoxelEstimate>, MapTiming)> {
    let mut timing = MapTiming::default();
    let estimates = match method {
        Method::Match => {
            let t = Instant::now();
            let e = match_batch(dictionary, signals, len)?;
            timing.estimation = t.elapsed();
            e
        }
        Method::Fit { order, options } => {
            let t = Instant::now();
            let spline = SplineModel::prefilter(dictionary.atoms(), dictionary.channels(), dictionary.grid(), *order)?;
            timing.prefilter = t.elapsed();
            let estimator = Estimator::from_parts(dictionary.clone(), spline, options.clone())?;
            let t = Instant::now();
            let e = estimator.estimate_batch(signals, len)?;
            timing.estimation = t.elapsed();
            e
        }
    };
    Ok((estimates, timing))
}

/// Simulates the phantom, adds noise, estimates every voxel and reports
/// per-ROI errors.
pub fn run_map(
    phantom: &SyntheticPhantom,
    model: &FispModel,
    dictionary: &Dictionary,
    method: &Method,
    noise: &NoiseModel,
) -> Result<MapResult> {
    let clean = phantom.signals(model)?;
    let signals = add_noise(&clean, noise);
    let (estimates, timing) = estimate_map(dictionary, &signals, model.schedule().len(), method)?;
    let name = match method {
        Method::Match => "match",
        Method::Fit { .. } => "fit",
    };
    let report = RoiReport::new(name, phantom, &estimates, dictionary.grid())?;
    Ok(MapResult {
        estimates,
        report,
        timing,
    })
}

/// Display window per parameter map.
pub fn map_window(axis: &ParameterAxis) -> (f64, f64) {
    match axis.name() {
        "T1" => (0.0, 3000.0),
        "T2" => (0.0, 700.0),
        _ => (axis.min(), axis.max()),
    }
}

/// `<prefix>_<axis>.pgm/.f32` for every axis plus `<prefix>_absrho`.
pub fn write_maps(
    out: &Path,
    prefix: &str,
    phantom: &SyntheticPhantom,
    grid: &ParameterGrid,
    estimates: &[VoxelEstimate],
) -> Result<()> {
    let (rows, cols) = (phantom.rows(), phantom.cols());
    for (p, axis) in grid.axes().iter().enumerate() {
        let values: Vec<f64> = estimates
            .iter()
            .enumerate()
            .map(|(i, e)| if phantom.is_background(i) { 0.0 } else { e.theta_hat[p] })
            .collect();
        write_map(
            out.join(format!("{prefix}_{}", axis.name())),
            &values,
            rows,
            cols,
            map_window(axis),
        )?;
    }
    let rho: Vec<f64> = estimates.iter().map(|e| e.rho_hat.norm()).collect();
    write_map(out.join(format!("{prefix}_absrho")), &rho, rows, cols, (0.0, 1.5))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ParityOutcome {
    pub resolution: ResolutionReport,
    pub fit: MapResult,
    pub dense: MapResult,
    pub noise: NoiseModel,
    /// Distinct dense-lattice atoms simulated by the reference matcher.
    pub dense_simulations: usize,
}

/// Sparse-dictionary fitting versus matching on the dense (n=0 sized)
/// dictionary, on the block phantom with noise at `config.snr`.
///
/// The dense dictionary is never materialised: each voxel is matched by
/// lattice ascent from the node nearest its ROI's calibrated value.
/// Writes `resolution/`, `roi.csv`, `voxels_fit.csv`, `voxels_dense.csv`,
/// maps, and `timing.csv` (wall times, not reproducible).
pub fn parity(config: &ExperimentConfig, out: &Path) -> Result<ParityOutcome> {
    std::fs::create_dir_all(out)?;
    let model = config.model()?;
    let resolution = estimate_grid_resolution(&config.axes, &config.resolution, &model)?;
    let res_dir = out.join("resolution");
    std::fs::create_dir_all(&res_dir)?;
    write_resolution(&resolution, &res_dir)?;
    let dense_grid = resolution.grid_for_order(0)?;
    let sparse_grid = resolution.grid_for_order(config.fit_order)?;

    let phantom = SyntheticPhantom::new(&Layout::blocks(config.voxels_per_roi))?;
    let (signals, noise) = phantom_signals(&phantom, &model, Some(config.snr), config.seed)?;
    let len = model.schedule().len();

    let t = Instant::now();
    let (dictionary, basis) = sparse_dictionary(&sparse_grid, &model, config.rank)?;
    let build = t.elapsed();
    let method = Method::Fit {
        order: config.fit_order,
        options: config.fit.clone(),
    };
    let (fit_estimates, mut fit_timing) = estimate_map(&dictionary, &signals, len, &method)?;
    fit_timing.load = build;

    let starts: Vec<Vec<f64>> = (0..phantom.voxel_count())
        .map(|i| {
            let t = phantom.tissue(i).expect("block phantom has no background");
            vec![t.t1, t.t2, t.b1]
        })
        .collect();
    let t = Instant::now();
    let dense = lattice_match(&dense_grid, &model, basis.as_ref(), &signals, len, &starts)?;
    let dense_timing = MapTiming {
        estimation: t.elapsed(),
        ..MapTiming::default()
    };

    let fit_report = RoiReport::new("fit", &phantom, &fit_estimates, &sparse_grid)?;
    let dense_report = RoiReport::new("dense_match", &phantom, &dense.estimates, &dense_grid)?;

    let mut w = create(out, "roi.csv")?;
    RoiReport::write_csv_header(&mut w)?;
    fit_report.write_csv_rows(&mut w)?;
    dense_report.write_csv_rows(&mut w)?;
    w.flush()?;
    let mut w = create(out, "parity.csv")?;
    writeln!(w, "parameter,fit_median_rmse_pct,dense_median_rmse_pct,ratio")?;
    for (name, f, d) in [
        ("T1", fit_report.median_t1_rmse(), dense_report.median_t1_rmse()),
        ("T2", fit_report.median_t2_rmse(), dense_report.median_t2_rmse()),
    ] {
        writeln!(w, "{name},{f:.6},{d:.6},{:.6}", f / d)?;
    }
    w.flush()?;
    write_estimates_csv(create(out, "voxels_fit.csv")?, &sparse_grid, &fit_estimates)?;
    write_estimates_csv(create(out, "voxels_dense.csv")?, &dense_grid, &dense.estimates)?;
    write_maps(out, "fit", &phantom, &sparse_grid, &fit_estimates)?;
    write_maps(out, "dense", &phantom, &dense_grid, &dense.estimates)?;

    let mut w = create(out, "timing.csv")?;
    writeln!(w, "method,atoms,load_s,prefilter_s,estimation_s")?;
    for (name, atoms, t) in [
        ("fit", sparse_grid.atom_count(), fit_timing),
        ("dense_match", dense_grid.atom_count(), dense_timing),
    ] {
        writeln!(
            w,
            "{name},{atoms},{:.3},{:.3},{:.3}",
            t.load.as_secs_f64(),
            t.prefilter.as_secs_f64(),
            t.estimation.as_secs_f64()
        )?;
    }
    w.flush()?;

    Ok(ParityOutcome {
        resolution,
        fit: MapResult {
            estimates: fit_estimates,
            report: fit_report,
            timing: fit_timing,
        },
        dense: MapResult {
            estimates: dense.estimates,
            report: dense_report,
            timing: dense_timing,
        },
        noise,
        dense_simulations: dense.simulations,
    })
}

/// Simulates the dictionary on `grid`; with a rank, compresses it onto its
/// own truncated SVD basis.
pub fn sparse_dictionary(
    grid: &ParameterGrid,
    model: &FispModel,
    rank: Option<usize>,
) -> Result<(Dictionary, Option<Basis>)> {
    let full = generate_dictionary(grid, model)?;
    match rank {
        None => Ok((full, None)),
        Some(l) => {
            let basis = svd_truncate(&full, Rank::Fixed(l))?;
            Ok((full.compress(&basis)?, Some(basis)))
        }
    }
}
