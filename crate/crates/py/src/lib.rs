use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

use dictfit_core::bloch::{AcquisitionSchedule, SpinEnsemble, TissueParams};
use dictfit_core::dict::{generate_dictionary, svd_truncate, Dictionary, Rank};
use dictfit_core::estimate::{match_estimate, Estimator, FitOptions, VoxelEstimate};
use dictfit_core::format::{load_dictionary, save_dictionary};
use dictfit_core::harness::experiment::phantom_signals as simulate_phantom;
use dictfit_core::harness::phantom::{Layout, SyntheticPhantom, CALIBRATED_T1_T2};
use dictfit_core::model::{FispModel, SignalModel, TissueRole};
use dictfit_core::pgrid::ParameterGrid;
use dictfit_core::resolve::{estimate_grid_resolution, ResolutionConfig};
use dictfit_core::{Complex64, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for Result<T, Error> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Inversion-prepared FISP simulator with a slice-profile spin ensemble.
#[pyclass(name = "FispModel", frozen)]
struct PyFispModel {
    schedule: AcquisitionSchedule,
    ensemble: SpinEnsemble,
}

impl PyFispModel {
    fn for_grid(&self, grid: &ParameterGrid) -> PyResult<FispModel> {
        FispModel::for_grid(grid, self.schedule.clone(), self.ensemble.clone()).py()
    }
}

#[pymethods]
impl PyFispModel {
    /// Built-in schedule of `length` rows, or a `flip_deg,tr_ms` CSV.
    #[new]
    #[pyo3(signature = (length = 200, spins = 64, tbw = 3.0, schedule_csv = None))]
    fn new(length: usize, spins: usize, tbw: f64, schedule_csv: Option<PathBuf>) -> PyResult<Self> {
        let schedule = match schedule_csv {
            Some(p) => {
                let f = std::fs::File::open(&p).map_err(|e| PyIOError::new_err(e.to_string()))?;
                AcquisitionSchedule::from_csv(
                    std::io::BufReader::new(f),
                    dictfit_core::bloch::DEFAULT_INVERSION_TIME,
                    dictfit_core::bloch::DEFAULT_ECHO_TIME,
                    dictfit_core::bloch::DEFAULT_TRAIN_DELAY,
                    true,
                )
                .py()?
            }
            None => AcquisitionSchedule::fisp_train(length),
        };
        Ok(Self {
            schedule,
            ensemble: SpinEnsemble::slice_profile(spins, tbw).py()?,
        })
    }

    #[getter]
    fn signal_length(&self) -> usize {
        self.schedule.len()
    }

    /// Complex signal of one tissue; T2 > T1 is accepted.
    #[pyo3(signature = (t1, t2, b1 = 1.0))]
    fn simulate(&self, t1: f64, t2: f64, b1: f64) -> PyResult<Vec<Complex64>> {
        let model = FispModel::new(
            self.schedule.clone(),
            self.ensemble.clone(),
            vec![TissueRole::T1, TissueRole::T2, TissueRole::B1],
            TissueParams::new(t1, t2, b1),
        );
        model.simulate(&[t1, t2, b1]).py()
    }
}

/// Tensor grid of parameter axes with 1-based grid coordinates.
#[pyclass(name = "Grid", frozen)]
#[derive(Clone)]
struct PyGrid {
    inner: ParameterGrid,
}

#[pymethods]
impl PyGrid {
    /// The T1/T2/B1 relaxometry box with the given node counts.
    #[new]
    fn new(counts: (usize, usize, usize)) -> PyResult<Self> {
        Ok(Self {
            inner: ParameterGrid::relaxometry(counts.0, counts.1, counts.2).py()?,
        })
    }

    /// Parses `axis NAME SPACING MIN MAX K` lines.
    #[staticmethod]
    fn from_config(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ParameterGrid::from_config(text.as_bytes()).py()?,
        })
    }

    #[getter]
    fn counts(&self) -> Vec<usize> {
        self.inner.counts()
    }

    #[getter]
    fn axis_names(&self) -> Vec<String> {
        self.inner.axes().iter().map(|a| a.name().to_string()).collect()
    }

    #[getter]
    fn atom_count(&self) -> usize {
        self.inner.atom_count()
    }

    fn grid_to_param(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.grid_to_param(&v).py()
    }

    fn param_to_grid(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.param_to_grid(&theta).py()
    }

    fn __repr__(&self) -> String {
        format!("Grid({})", self.inner.to_config().trim().replace('\n', "; "))
    }
}

/// Simulated atoms on a grid, optionally compressed.
#[pyclass(name = "Dictionary", frozen)]
struct PyDictionary {
    inner: Dictionary,
}

#[pymethods]
impl PyDictionary {
    #[staticmethod]
    fn build(grid: &PyGrid, model: &PyFispModel) -> PyResult<Self> {
        let fisp = model.for_grid(&grid.inner)?;
        Ok(Self {
            inner: generate_dictionary(&grid.inner, &fisp).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_dictionary(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dictionary(&self.inner, path).py()
    }

    /// Projection onto the top `rank` left singular vectors.
    fn compress(&self, rank: usize) -> PyResult<Self> {
        let basis = svd_truncate(&self.inner, Rank::Fixed(rank)).py()?;
        Ok(Self {
            inner: self.inner.compress(&basis).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn signal_length(&self) -> usize {
        self.inner.signal_length()
    }

    #[getter]
    fn is_compressed(&self) -> bool {
        self.inner.is_compressed()
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid {
            inner: self.inner.grid().clone(),
        }
    }

    fn atom(&self, index: usize) -> PyResult<Vec<Complex64>> {
        if index >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("atom {index} out of range")));
        }
        Ok(self.inner.atom(index).to_vec())
    }
}

#[pyclass(name = "VoxelEstimate", frozen, get_all)]
struct PyEstimate {
    theta: Vec<f64>,
    v: Vec<f64>,
    rho: Complex64,
    residual: f64,
    iterations: usize,
    converged: bool,
    zero_signal: bool,
}

impl From<VoxelEstimate> for PyEstimate {
    fn from(e: VoxelEstimate) -> Self {
        Self {
            theta: e.theta_hat,
            v: e.v_hat,
            rho: e.rho_hat,
            residual: e.residual_norm,
            iterations: e.iterations,
            converged: e.converged,
            zero_signal: e.zero_signal,
        }
    }
}

#[pymethods]
impl PyEstimate {
    fn __repr__(&self) -> String {
        format!(
            "VoxelEstimate(theta={:?}, |rho|={:.6}, residual={:.3e}, iterations={}, converged={})",
            self.theta,
            self.rho.norm(),
            self.residual,
            self.iterations,
            self.converged
        )
    }
}

/// Sparse-dictionary matching followed by spline fitting.
#[pyclass(name = "Estimator", frozen)]
struct PyEstimator {
    inner: Estimator,
}

#[pymethods]
impl PyEstimator {
    #[new]
    #[pyo3(signature = (dictionary, order = 2, tol = 1e-5, max_iterations = 100, multi_start = false))]
    fn new(
        dictionary: &PyDictionary,
        order: usize,
        tol: f64,
        max_iterations: usize,
        multi_start: bool,
    ) -> PyResult<Self> {
        let options = FitOptions {
            abs_decrease_tol: tol,
            max_iterations,
            multi_start,
            ..FitOptions::default()
        };
        Ok(Self {
            inner: Estimator::new(dictionary.inner.clone(), order, options).py()?,
        })
    }

    /// Fits one raw signal.
    fn fit(&self, signal: Vec<Complex64>) -> PyResult<PyEstimate> {
        Ok(self.inner.estimate_voxel(&signal).py()?.into())
    }

    /// Fits many raw signals in parallel, in input order.
    fn fit_batch(&self, py: Python<'_>, signals: Vec<Vec<Complex64>>) -> PyResult<Vec<PyEstimate>> {
        let len = self.inner.dictionary().signal_length();
        if signals.iter().any(|s| s.len() != len) {
            return Err(PyValueError::new_err(format!("every signal needs length {len}")));
        }
        let flat = signals.concat();
        let out = py.detach(|| self.inner.estimate_batch(&flat, len)).py()?;
        Ok(out.into_iter().map(Into::into).collect())
    }
}

/// Exhaustive matching of one raw signal.
#[pyfunction]
fn match_signal(dictionary: &PyDictionary, signal: Vec<Complex64>) -> PyResult<PyEstimate> {
    let m = dictionary.inner.to_signal_space(&signal).py()?;
    Ok(match_estimate(&m, &dictionary.inner).py()?.into())
}

/// Selected node counts per spline order (`None` when the target is not
/// reached within `max_level` dyadic levels).
#[pyfunction]
#[pyo3(signature = (model, alpha = 5e-4, max_level = 10, orders = vec![0, 1, 2, 3], safety_factor = 2.0))]
fn estimate_resolution(
    py: Python<'_>,
    model: &PyFispModel,
    alpha: f64,
    max_level: u32,
    orders: Vec<usize>,
    safety_factor: f64,
) -> PyResult<BTreeMap<usize, Option<Vec<usize>>>> {
    let grid = ParameterGrid::relaxometry(2, 2, 2).py()?;
    let fisp = model.for_grid(&grid)?;
    let config = ResolutionConfig {
        alpha,
        max_level,
        orders: orders.clone(),
        safety_factor,
        ..ResolutionConfig::default()
    };
    let report = py
        .detach(|| estimate_grid_resolution(grid.axes(), &config, &fisp))
        .py()?;
    Ok(orders
        .into_iter()
        .map(|n| (n, report.selected_counts(n).ok()))
        .collect())
}

/// Signals of the synthetic phantom (`"standard"` discs or `"blocks"`) and
/// the ROI label of every voxel (0 = background).
#[pyfunction]
#[pyo3(signature = (model, layout = "standard", per_roi = 500, snr = None, seed = 0))]
fn phantom_signals(
    model: &PyFispModel,
    layout: &str,
    per_roi: usize,
    snr: Option<f64>,
    seed: u64,
) -> PyResult<(Vec<Vec<Complex64>>, Vec<usize>)> {
    let layout = match layout {
        "standard" => Layout::standard(),
        "blocks" => Layout::blocks(per_roi),
        other => return Err(PyValueError::new_err(format!("unknown layout {other:?}"))),
    };
    let phantom = SyntheticPhantom::new(&layout).py()?;
    let fisp = model.for_grid(&ParameterGrid::relaxometry(2, 2, 2).py()?)?;
    let (signals, _) = simulate_phantom(&phantom, &fisp, snr, seed).py()?;
    let m = fisp.signal_length();
    Ok((
        signals.chunks(m).map(<[Complex64]>::to_vec).collect(),
        phantom.labels().to_vec(),
    ))
}

/// Calibrated (T1, T2) in ms of the 14 reference tissues.
#[pyfunction]
fn calibrated_tissues() -> Vec<(f64, f64)> {
    CALIBRATED_T1_T2.to_vec()
}

#[pymodule]
fn dictfit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFispModel>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyDictionary>()?;
    m.add_class::<PyEstimate>()?;
    m.add_class::<PyEstimator>()?;
    m.add_function(wrap_pyfunction!(match_signal, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_resolution, m)?)?;
    m.add_function(wrap_pyfunction!(phantom_signals, m)?)?;
    m.add_function(wrap_pyfunction!(calibrated_tissues, m)?)?;
    Ok(())
}
