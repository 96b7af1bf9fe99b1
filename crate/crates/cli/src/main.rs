use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dictfit::bloch::{
    AcquisitionSchedule, SpinEnsemble, DEFAULT_ECHO_TIME, DEFAULT_INVERSION_TIME, DEFAULT_TRAIN_DELAY,
};
use dictfit::dict::{generate_dictionary, svd_truncate, Dictionary, Rank};
use dictfit::estimate::{match_batch, Estimator, FitOptions, VoxelEstimate};
use dictfit::format::{
    load_coefficients, load_dictionary, load_signals, save_coefficients, save_dictionary, save_signals,
    CoefficientCache, SignalBatch,
};
use dictfit::harness::experiment::{
    alpha_sweep, error_decay, interior_audit, parity, phantom_signals, write_maps, write_resolution, ExperimentConfig,
    MapTiming,
};
use dictfit::harness::metrics::{write_estimates_csv, RoiReport};
use dictfit::harness::phantom::{Layout, SyntheticPhantom};
use dictfit::harness::plot::write_map;
use dictfit::model::FispModel;
use dictfit::pgrid::ParameterGrid;
use dictfit::resolve::{
    estimate_grid_resolution, interior_error_audit, CurveInterpolation, NearestNodeDictionary, ResolutionConfig,
};
use dictfit::spline::{BoundaryStencil, SplineModel};

#[derive(Parser)]
#[command(
    name = "dictfit",
    version,
    about = "Dictionary matching and B-spline dictionary fitting for MR fingerprinting"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Seed for noise and random sampling.
    #[arg(long, global = true, default_value_t = 20)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Target interpolation error.
    #[arg(long, global = true, default_value_t = 5e-4)]
    alpha: f64,
    /// B-spline order used for fitting and auditing.
    #[arg(long, global = true, default_value_t = 2)]
    order: usize,
    /// Compression rank; 0 keeps the full signal space.
    #[arg(long = "L", global = true, default_value_t = 30)]
    rank: usize,
}

impl Global {
    fn rank(&self) -> Option<usize> {
        (self.rank > 0).then_some(self.rank)
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Schedule CSV (`flip_deg,tr_ms`); default: built-in train of `--length` rows.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Rows of the built-in schedule.
    #[arg(long, default_value_t = 200)]
    length: usize,
    /// Inversion time in ms.
    #[arg(long, default_value_t = DEFAULT_INVERSION_TIME)]
    ti: f64,
    /// Echo time in ms.
    #[arg(long, default_value_t = DEFAULT_ECHO_TIME)]
    te: f64,
    /// Post-train delay in ms.
    #[arg(long, default_value_t = DEFAULT_TRAIN_DELAY)]
    td: f64,
    /// Spins in the slice-profile ensemble.
    #[arg(long, default_value_t = 64)]
    spins: usize,
    /// Time-bandwidth product of the excitation pulse.
    #[arg(long, default_value_t = 3.0)]
    tbw: f64,
}

impl ModelArgs {
    fn schedule(&self) -> Result<AcquisitionSchedule> {
        Ok(match &self.schedule {
            Some(p) => AcquisitionSchedule::from_csv(
                BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?),
                self.ti,
                self.te,
                self.td,
                true,
            )?,
            None => AcquisitionSchedule::fisp_train(self.length),
        })
    }

    fn ensemble(&self) -> Result<SpinEnsemble> {
        Ok(SpinEnsemble::slice_profile(self.spins, self.tbw)?)
    }

    fn model(&self, grid: &ParameterGrid) -> Result<FispModel> {
        Ok(FispModel::for_grid(grid, self.schedule()?, self.ensemble()?)?)
    }
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Grid config file with `axis NAME SPACING MIN MAX K` lines.
    #[arg(long, conflicts_with_all = ["axis", "counts"])]
    grid: Option<PathBuf>,
    /// One axis in config syntax, e.g. "axis T1 log 5 6000 26"; repeatable.
    #[arg(long, conflicts_with = "counts")]
    axis: Vec<String>,
    /// Node counts for the default T1/T2/B1 box, e.g. 26,22,24.
    #[arg(long, value_delimiter = ',')]
    counts: Vec<usize>,
}

impl GridArgs {
    fn grid(&self) -> Result<ParameterGrid> {
        if let Some(p) = &self.grid {
            return Ok(ParameterGrid::from_config(BufReader::new(File::open(p)?))?);
        }
        if !self.axis.is_empty() {
            return Ok(ParameterGrid::from_config(self.axis.join("\n").as_bytes())?);
        }
        match self.counts.as_slice() {
            [a, b, c] => Ok(ParameterGrid::relaxometry(*a, *b, *c)?),
            [] => Ok(ParameterGrid::relaxometry(2, 2, 2)?),
            _ => bail!("--counts needs three values (T1, T2, B1)"),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Interp {
    Loglog,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stencil {
    Matched,
    Second,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhantomKind {
    /// 14 calibrated discs on a 64x64 canvas.
    Standard,
    /// One row of `--per-roi` voxels per calibrated tissue.
    Blocks,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Fig1,
    Fig2,
    #[value(name = "suppD")]
    SuppD,
    Parity,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Signal file (QDFS) with raw or compressed signals.
    #[arg(long, conflicts_with = "phantom")]
    signals: Option<PathBuf>,
    /// Simulate a synthetic phantom instead of reading signals.
    #[arg(long, value_enum)]
    phantom: Option<PhantomKind>,
    /// Voxels per tissue for the block layout.
    #[arg(long, default_value_t = 500)]
    per_roi: usize,
    /// Noise level of the simulated phantom; noiseless when absent.
    #[arg(long)]
    snr: Option<f64>,
    /// Map shape for signal files, e.g. 64x64.
    #[arg(long)]
    shape: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Write the built-in flip-angle/TR train as CSV.
    GenSchedule {
        /// Rows of the train.
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        /// Output path.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Simulate a dictionary on a grid.
    BuildDict {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Output path.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Compress a dictionary onto its top-L singular vectors.
    Compress {
        /// Dictionary file (QDFD).
        #[arg(long)]
        dict: PathBuf,
        /// Keep the smallest rank reaching this energy fraction instead of `--L`.
        #[arg(long)]
        energy: Option<f64>,
        /// Output path.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Size each axis from its edge error curves.
    EstimateResolution {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Dyadic levels; the finest has 2^(J-1)+1 nodes.
        #[arg(long = "max-level", default_value_t = 10)]
        max_level: u32,
        /// Spline orders to size.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        orders: Vec<usize>,
        /// The target is alpha divided by this factor.
        #[arg(long, default_value_t = 2.0)]
        safety: f64,
        /// Interpolation of the error curve between levels.
        #[arg(long, value_enum, default_value_t = Interp::Loglog)]
        interpolation: Interp,
        /// Boundary stencil of the prefilter.
        #[arg(long, value_enum, default_value_t = Stencil::Matched)]
        stencil: Stencil,
        /// Output directory for curves.csv, selected.csv and the SVG plots.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Interpolation error of an order-`--order` dictionary at random interior points.
    Audit {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Random interior samples.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Output path.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Simulate a synthetic phantom into a signal file.
    Phantom {
        /// Phantom layout.
        #[arg(long, value_enum, default_value_t = PhantomKind::Standard)]
        layout: PhantomKind,
        /// Voxels per tissue for the block layout.
        #[arg(long, default_value_t = 500)]
        per_roi: usize,
        /// Signal-to-noise ratio of the added noise; noiseless when absent.
        #[arg(long)]
        snr: Option<f64>,
        #[command(flatten)]
        model: ModelArgs,
        /// Signal file; a `<stem>_labels.csv` is written next to it.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Exhaustive dictionary matching per voxel.
    Match {
        /// Dictionary file (QDFD).
        #[arg(long)]
        dict: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// Output path.
        #[arg(long, short)]
        out: PathBuf,
        /// Directory for PGM/f32 parameter maps.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Sparse-dictionary matching followed by spline fitting per voxel.
    Fit {
        /// Dictionary file (QDFD).
        #[arg(long)]
        dict: PathBuf,
        /// Prefiltered coefficient cache; written if missing.
        #[arg(long)]
        coefficients: Option<PathBuf>,
        #[command(flatten)]
        input: InputArgs,
        /// Stop when a step lowers the squared residual by less.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Iteration limit per start.
        #[arg(long, default_value_t = 100)]
        max_iterations: usize,
        /// Also start one node away from the match along each axis.
        #[arg(long)]
        multi_start: bool,
        /// Output path.
        #[arg(long, short)]
        out: PathBuf,
        /// Directory for PGM/f32 parameter maps.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Reproduce an experiment into a directory.
    Experiment {
        /// Experiment to run.
        #[arg(value_enum)]
        which: Experiment,
        /// Dyadic levels; the finest has 2^(J-1)+1 nodes.
        #[arg(long = "max-level", default_value_t = 15)]
        max_level: u32,
        /// The target is alpha divided by this factor.
        #[arg(long, default_value_t = 1.0)]
        safety: f64,
        /// Signal-to-noise ratio of the parity phantom.
        #[arg(long, default_value_t = 30.0)]
        snr: f64,
        /// Voxels per tissue for the block layout.
        #[arg(long, default_value_t = 500)]
        per_roi: usize,
        /// Random interior samples.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[command(flatten)]
        model: ModelArgs,
        /// Output path.
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.global.threads {
        pool = pool.num_threads(n);
    }
    pool.build()?.install(|| run(&cli.global, cli.command))
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn run(g: &Global, command: Command) -> Result<()> {
    match command {
        Command::GenSchedule { rows, out } => {
            let mut w = writer(&out)?;
            AcquisitionSchedule::fisp_train(rows).write_csv(&mut w)?;
            w.flush()?;
        }
        Command::BuildDict { model, grid, out } => {
            let grid = grid.grid()?;
            let model = model.model(&grid)?;
            let t = Instant::now();
            let dict = generate_dictionary(&grid, &model)?;
            save_dictionary(&dict, &out)?;
            eprintln!(
                "{} atoms x {} in {:.2} s",
                dict.len(),
                dict.signal_length(),
                t.elapsed().as_secs_f64()
            );
        }
        Command::Compress { dict, energy, out } => {
            let d = load_dictionary(&dict)?;
            let rank = match energy {
                Some(e) => Rank::Energy(e),
                None => Rank::Fixed(g.rank().context("--L 0 keeps the full space; nothing to compress")?),
            };
            let basis = svd_truncate(&d, rank)?;
            if basis.rank_deficient() {
                eprintln!(
                    "warning: dictionary is numerically rank deficient at L = {}",
                    basis.rank()
                );
            }
            if let Some(f) = basis.energy_fraction() {
                eprintln!("L = {}, retained energy {f:.8}", basis.rank());
            }
            save_dictionary(&d.compress(&basis)?, &out)?;
        }
        Command::EstimateResolution {
            model,
            grid,
            max_level,
            orders,
            safety,
            interpolation,
            stencil,
            out,
        } => {
            let grid = grid.grid()?;
            let model = model.model(&grid)?;
            let config = ResolutionConfig {
                alpha: g.alpha,
                max_level,
                orders,
                safety_factor: safety,
                interpolation: match interpolation {
                    Interp::Loglog => CurveInterpolation::LogLog,
                    Interp::Linear => CurveInterpolation::Linear,
                },
                stencil: match stencil {
                    Stencil::Matched => BoundaryStencil::MatchOrder,
                    Stencil::Second => BoundaryStencil::SecondOrder,
                },
            };
            std::fs::create_dir_all(&out)?;
            let report = estimate_grid_resolution(grid.axes(), &config, &model)?;
            write_resolution(&report, &out)?;
            for &n in &config.orders {
                match report.selected_counts(n) {
                    Ok(k) => println!("n={n}: K = {k:?}, {} atoms", k.iter().product::<usize>()),
                    Err(missing) => println!("n={n}: target not reached on axes {missing:?}"),
                }
            }
        }
        Command::Audit {
            model,
            grid,
            samples,
            out,
        } => {
            let grid = grid.grid()?;
            let model = model.model(&grid)?;
            let report = if g.order == 0 {
                let nearest = NearestNodeDictionary::new(grid.clone(), &model);
                interior_error_audit(&nearest, &model, samples, g.alpha, g.seed)?
            } else {
                let dict = generate_dictionary(&grid, &model)?;
                let spline = SplineModel::prefilter(dict.atoms(), dict.channels(), &grid, g.order)?;
                interior_error_audit(&spline, &model, samples, g.alpha, g.seed)?
            };
            let mut w = writer(&out)?;
            report.write_csv(&mut w, &grid)?;
            w.flush()?;
            println!(
                "exceedance {:.4}, max {:.4} alpha, rms {:e}",
                report.exceedance(),
                report.max() / g.alpha,
                report.rms()
            );
        }
        Command::Phantom {
            layout,
            per_roi,
            snr,
            model,
            out,
        } => {
            let phantom = make_phantom(layout, per_roi)?;
            let fisp = model.model(&ParameterGrid::relaxometry(2, 2, 2)?)?;
            let (signals, noise) = phantom_signals(&phantom, &fisp, snr, g.seed)?;
            save_signals(&SignalBatch::new(fisp.schedule().len(), signals)?, &out)?;
            let labels = out.with_file_name(format!(
                "{}_labels.csv",
                out.file_stem().and_then(|s| s.to_str()).unwrap_or("phantom")
            ));
            let mut w = writer(&labels)?;
            writeln!(w, "voxel,row,col,roi,T1,T2,B1,abs_rho,arg_rho")?;
            for i in 0..phantom.voxel_count() {
                let (t1, t2, b1) = phantom.tissue(i).map_or((0.0, 0.0, 0.0), |t| (t.t1, t.t2, t.b1));
                let rho = phantom.rho()[i];
                writeln!(
                    w,
                    "{i},{},{},{},{t1},{t2},{b1},{:.8},{:.8}",
                    i / phantom.cols(),
                    i % phantom.cols(),
                    phantom.labels()[i],
                    rho.norm(),
                    rho.arg()
                )?;
            }
            w.flush()?;
            eprintln!("{} voxels, noise sigma {:e}", phantom.voxel_count(), noise.sigma);
        }
        Command::Match { dict, input, out, maps } => {
            let t = Instant::now();
            let d = load_dictionary(&dict)?;
            let load = t.elapsed();
            let source = read_input(g, &input, &d)?;
            let t = Instant::now();
            let estimates = match_batch(&d, &source.signals, source.len)?;
            let timing = MapTiming {
                load,
                estimation: t.elapsed(),
                ..MapTiming::default()
            };
            finish("match", &d, &source, &estimates, timing, &out, maps.as_deref())?;
        }
        Command::Fit {
            dict,
            coefficients,
            input,
            tol,
            max_iterations,
            multi_start,
            out,
            maps,
        } => {
            let t = Instant::now();
            let d = load_dictionary(&dict)?;
            let cached = match &coefficients {
                Some(p) if p.exists() => Some(load_coefficients(p)?),
                _ => None,
            };
            let load = t.elapsed();
            let t = Instant::now();
            let spline = match cached {
                Some(c) => {
                    if c.spline.grid() != d.grid() || c.spline.order() != g.order || &c.model_hash != d.model_hash() {
                        bail!("coefficient cache does not belong to this dictionary and order");
                    }
                    c.spline
                }
                None => {
                    let s = SplineModel::prefilter(d.atoms(), d.channels(), d.grid(), g.order)?;
                    if let Some(p) = &coefficients {
                        save_coefficients(
                            &CoefficientCache {
                                spline: s.clone(),
                                basis: d.basis().cloned(),
                                model_hash: *d.model_hash(),
                            },
                            p,
                        )?;
                    }
                    s
                }
            };
            let prefilter = t.elapsed();
            let options = FitOptions {
                abs_decrease_tol: tol,
                max_iterations,
                multi_start,
                ..FitOptions::default()
            };
            let source = read_input(g, &input, &d)?;
            let estimator = Estimator::from_parts(d, spline, options)?;
            let t = Instant::now();
            let estimates = estimator.estimate_batch(&source.signals, source.len)?;
            let timing = MapTiming {
                load,
                prefilter,
                estimation: t.elapsed(),
            };
            finish(
                "fit",
                estimator.dictionary(),
                &source,
                &estimates,
                timing,
                &out,
                maps.as_deref(),
            )?;
        }
        Command::Experiment {
            which,
            max_level,
            safety,
            snr,
            per_roi,
            samples,
            model,
            out,
        } => {
            let defaults = ResolutionConfig::default();
            let config = ExperimentConfig {
                schedule: model.schedule()?,
                ensemble: model.ensemble()?,
                resolution: ResolutionConfig {
                    alpha: g.alpha,
                    max_level,
                    safety_factor: safety,
                    ..defaults
                },
                fit_order: g.order,
                rank: g.rank(),
                snr,
                voxels_per_roi: per_roi,
                audit_samples: samples,
                seed: g.seed,
                ..ExperimentConfig::default()
            };
            std::fs::create_dir_all(&out)?;
            match which {
                Experiment::Fig1 => {
                    let r = error_decay(&config, &out)?;
                    for c in &r.curves {
                        println!(
                            "{} n={} slope(3..8) {:.3}",
                            r.axes[c.axis].name(),
                            c.order,
                            c.decay_slope(3..=max_level.min(8))
                        );
                    }
                }
                Experiment::Fig2 => {
                    let r = error_decay(&config, &out.join("resolution"))?;
                    for (n, a) in interior_audit(&config, &r, &out)? {
                        println!(
                            "n={n}: exceedance {:.4}, max {:.3} alpha",
                            a.exceedance(),
                            a.max() / config.resolution.alpha
                        );
                    }
                }
                Experiment::SuppD => {
                    let mut c = config.clone();
                    c.resolution.alpha = c.alpha_sweep.iter().copied().fold(f64::INFINITY, f64::min);
                    let r = error_decay(&c, &out.join("resolution"))?;
                    for row in alpha_sweep(&config, &r, &out)? {
                        println!("alpha {:e} n={}: {:?}", row.alpha, row.order, row.counts);
                    }
                }
                Experiment::Parity => {
                    let o = parity(&config, &out)?;
                    println!(
                        "median RMSE % T1: fit {:.3} dense {:.3}; T2: fit {:.3} dense {:.3}",
                        o.fit.report.median_t1_rmse(),
                        o.dense.report.median_t1_rmse(),
                        o.fit.report.median_t2_rmse(),
                        o.dense.report.median_t2_rmse()
                    );
                }
            }
        }
    }
    Ok(())
}

fn make_phantom(kind: PhantomKind, per_roi: usize) -> Result<SyntheticPhantom> {
    Ok(SyntheticPhantom::new(&match kind {
        PhantomKind::Standard => Layout::standard(),
        PhantomKind::Blocks => Layout::blocks(per_roi),
    })?)
}

struct Source {
    signals: Vec<dictfit::Complex64>,
    len: usize,
    phantom: Option<SyntheticPhantom>,
    shape: (usize, usize),
}

/// Signals in the dictionary's raw signal length. Pre-compressed signals are
/// expanded through the dictionary's basis (projection recovers them).
fn read_input(g: &Global, input: &InputArgs, d: &Dictionary) -> Result<Source> {
    if let Some(kind) = input.phantom {
        let phantom = make_phantom(kind, input.per_roi)?;
        let model = input.model.model(d.grid())?;
        if &model.digest() != d.model_hash() {
            eprintln!("warning: phantom model differs from the model the dictionary was built with");
        }
        let (signals, _) = phantom_signals(&phantom, &model, input.snr, g.seed)?;
        let shape = (phantom.rows(), phantom.cols());
        return Ok(Source {
            signals,
            len: model.schedule().len(),
            phantom: Some(phantom),
            shape,
        });
    }
    let path = input.signals.as_ref().context("need --signals or --phantom")?;
    let batch = load_signals(path)?;
    let (signals, len) = if batch.len == d.signal_length() {
        (batch.signals, batch.len)
    } else if let Some(b) = d.basis().filter(|b| b.rank() == batch.len) {
        let mut raw = Vec::with_capacity(batch.count() * b.signal_length());
        for i in 0..batch.count() {
            raw.extend(b.expand(batch.signal(i))?);
        }
        (raw, b.signal_length())
    } else {
        bail!(
            "signals have length {} but the dictionary expects {}",
            batch.len,
            d.signal_length()
        );
    };
    let count = signals.len() / len;
    let shape = match &input.shape {
        Some(s) => {
            let (r, c) = s.split_once('x').context("--shape is ROWSxCOLS")?;
            let shape = (r.parse()?, c.parse()?);
            if shape.0 * shape.1 != count {
                bail!("--shape {s} does not match {count} voxels");
            }
            shape
        }
        None => (1, count),
    };
    Ok(Source {
        signals,
        len,
        phantom: None,
        shape,
    })
}

fn finish(
    method: &str,
    d: &Dictionary,
    source: &Source,
    estimates: &[VoxelEstimate],
    timing: MapTiming,
    out: &Path,
    maps: Option<&Path>,
) -> Result<()> {
    let mut w = writer(out)?;
    write_estimates_csv(&mut w, d.grid(), estimates)?;
    w.flush()?;
    if let Some(dir) = maps {
        std::fs::create_dir_all(dir)?;
        match &source.phantom {
            Some(p) => write_maps(dir, method, p, d.grid(), estimates)?,
            None => {
                let (rows, cols) = source.shape;
                for (k, axis) in d.grid().axes().iter().enumerate() {
                    let values: Vec<f64> = estimates.iter().map(|e| e.theta_hat[k]).collect();
                    write_map(
                        dir.join(format!("{method}_{}", axis.name())),
                        &values,
                        rows,
                        cols,
                        dictfit::harness::experiment::map_window(axis),
                    )?;
                }
            }
        }
    }
    if let Some(p) = &source.phantom {
        let report = RoiReport::new(method, p, estimates, d.grid())?;
        let path = out.with_file_name(format!(
            "{}_roi.csv",
            out.file_stem().and_then(|s| s.to_str()).unwrap_or(method)
        ));
        let mut w = writer(&path)?;
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    eprintln!(
        "load {:.3} s, prefilter {:.3} s, estimation {:.3} s for {} voxels",
        timing.load.as_secs_f64(),
        timing.prefilter.as_secs_f64(),
        timing.estimation.as_secs_f64(),
        estimates.len()
    );
    Ok(())
}
