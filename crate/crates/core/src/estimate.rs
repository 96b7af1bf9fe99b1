//! Per-voxel estimation: exhaustive dictionary matching and box-constrained
//! least-squares fitting of a spline-interpolated dictionary.
//!
//! The complex scale is eliminated in closed form, so fitting minimises the
//! reduced objective `min_rho ||m - rho s(v)||^2` over grid coordinates only.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::dict::{Basis, Dictionary};
use crate::error::{Error, Result};
use crate::model::SignalModel;
use crate::pgrid::ParameterGrid;
use crate::spline::SplineModel;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelEstimate {
    /// Grid coordinates, inside `[1, K_p]`.
    pub v_hat: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub rho_hat: Complex64,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the measured signal is identically zero.
    pub zero_signal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Initialization {
    /// Start from the best atom of the sparse dictionary.
    Match,
    /// Start from the given grid coordinates.
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Stop once an accepted step lowers the squared residual by less.
    pub abs_decrease_tol: f64,
    pub max_iterations: usize,
    pub initialization: Initialization,
    /// Also start from the matched node shifted by one step along each axis.
    pub multi_start: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            abs_decrease_tol: 1e-5,
            max_iterations: 100,
            initialization: Initialization::Match,
            multi_start: false,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if !(self.abs_decrease_tol > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidParams("fit tolerances must be positive".into()));
        }
        Ok(())
    }
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm_sqr(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

/// `rho = s^H m / s^H s`, the least-squares scale of `s` onto `m`.
pub fn optimal_scale(m: &[Complex64], s: &[Complex64]) -> Result<Complex64> {
    check_len(s.len(), m.len())?;
    let ss = norm_sqr(s);
    if ss == 0.0 {
        return Err(Error::DegenerateAtom);
    }
    Ok(dot(s, m) / ss)
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub index: usize,
    pub rho: Complex64,
    /// `|m^H s| / ||s||` at the winner.
    pub score: f64,
    pub zero_signal: bool,
}

/// Best atom by normalised correlation among `atoms` (row-major,
/// `channels` wide); ties go to the lowest index. Zero-norm atoms never win.
pub fn match_atoms(m: &[Complex64], atoms: &[Complex64], norms: &[f64], channels: usize) -> Result<MatchResult> {
    check_len(channels, m.len())?;
    if norms.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    if norm_sqr(m) == 0.0 {
        return Ok(MatchResult {
            index: 0,
            rho: Complex64::default(),
            score: 0.0,
            zero_signal: true,
        });
    }
    let mut best = (usize::MAX, f64::NEG_INFINITY, Complex64::default());
    for (k, (atom, &n)) in atoms.chunks_exact(channels).zip(norms).enumerate() {
        if n == 0.0 {
            continue;
        }
        let a = dot(atom, m);
        let score = a.norm() / n;
        if score > best.1 {
            best = (k, score, a);
        }
    }
    if best.0 == usize::MAX {
        return Err(Error::DegenerateAtom);
    }
    let (index, score, a) = best;
    let n = norms[index];
    Ok(MatchResult {
        index,
        rho: a / (n * n),
        score,
        zero_signal: false,
    })
}

/// Exhaustive matching; `m` must already be in the dictionary's space.
pub fn match_dictionary(m: &[Complex64], dict: &Dictionary) -> Result<MatchResult> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    match_atoms(m, dict.atoms(), dict.norms(), dict.channels())
}

fn node_coordinates(grid: &ParameterGrid, index: usize) -> Vec<f64> {
    grid.multi_index(index).iter().map(|&k| k as f64).collect()
}

/// Matching expressed as a voxel estimate (no continuous refinement).
pub fn match_estimate(m: &[Complex64], dict: &Dictionary) -> Result<VoxelEstimate> {
    let r = match_dictionary(m, dict)?;
    let v_hat = node_coordinates(dict.grid(), r.index);
    let residual = if r.zero_signal {
        0.0
    } else {
        let atom = dict.atom(r.index);
        m.iter()
            .zip(atom)
            .map(|(x, s)| (x - r.rho * s).norm_sqr())
            .sum::<f64>()
            .sqrt()
    };
    Ok(VoxelEstimate {
        theta_hat: dict.grid().grid_to_param(&v_hat)?,
        v_hat,
        rho_hat: r.rho,
        residual_norm: residual,
        iterations: 0,
        converged: true,
        zero_signal: r.zero_signal,
    })
}

/// Value, gradient and optimal scale of the reduced objective at `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub rho: Complex64,
}

/// `min_rho ||m - rho s(v)||^2` and its gradient over `v`.
///
/// The value is computed from the residual itself rather than as
/// `||m||^2 - |m^H s|^2 / ||s||^2`, which cancels badly near a perfect fit.
pub fn reduced_objective(m: &[Complex64], model: &SplineModel, v: &[f64]) -> Result<Objective> {
    check_len(model.channels(), m.len())?;
    let (s, ds) = model.evaluate_with_gradient(v)?;
    let rho = optimal_scale(m, &s)?;
    let r: Vec<Complex64> = m.iter().zip(&s).map(|(x, y)| x - rho * y).collect();
    let value = norm_sqr(&r);
    // envelope theorem: rho is stationary, so only s(v) varies
    let gradient = ds.iter().map(|d| -2.0 * (rho.conj() * dot(d, &r)).re).collect();
    Ok(Objective { value, gradient, rho })
}

fn clamp_box(v: &mut [f64], counts: &[usize]) {
    for (x, &k) in v.iter_mut().zip(counts) {
        *x = x.clamp(1.0, k as f64);
    }
}

/// Reduced objective plus the Gauss-Newton matrix `2 Re(J^H J)` of the
/// projected residual `J_p = -(I - s s^H / s^H s) rho ds/dv_p`.
struct Point {
    objective: Objective,
    normal: Vec<f64>,
}

fn evaluate_point(m: &[Complex64], model: &SplineModel, v: &[f64]) -> Result<Point> {
    let (s, ds) = model.evaluate_with_gradient(v)?;
    let ss = norm_sqr(&s);
    if ss == 0.0 {
        return Err(Error::DegenerateAtom);
    }
    let rho = dot(&s, m) / ss;
    let r: Vec<Complex64> = m.iter().zip(&s).map(|(x, y)| x - rho * y).collect();
    let value = norm_sqr(&r);
    let jac: Vec<Vec<Complex64>> = ds
        .iter()
        .map(|d| {
            let w: Vec<Complex64> = d.iter().map(|x| rho * x).collect();
            let c = dot(&s, &w) / ss;
            w.iter().zip(&s).map(|(a, b)| c * b - a).collect()
        })
        .collect();
    let p = jac.len();
    let gradient = jac.iter().map(|j| 2.0 * dot(j, &r).re).collect();
    let mut normal = vec![0.0; p * p];
    for i in 0..p {
        for k in 0..=i {
            let h = 2.0 * dot(&jac[i], &jac[k]).re;
            normal[i * p + k] = h;
            normal[k * p + i] = h;
        }
    }
    Ok(Point {
        objective: Objective { value, gradient, rho },
        normal,
    })
}

/// Solves the free block of `(H + lambda diag H) d = -g`, zero elsewhere.
fn newton_direction(normal: &[f64], g: &[f64], free: &[bool], lambda: f64) -> Option<Vec<f64>> {
    let p = g.len();
    let idx: Vec<usize> = (0..p).filter(|&i| free[i]).collect();
    let n = idx.len();
    let w = n + 1;
    let mut a: Vec<f64> = Vec::with_capacity(n * w);
    for &i in &idx {
        for &k in &idx {
            let h = normal[i * p + k];
            a.push(if i == k { h * (1.0 + lambda) } else { h });
        }
        a.push(-g[i]);
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x * w + col].abs().total_cmp(&a[y * w + col].abs()))?;
        if a[piv * w + col].abs() <= 1e-300 {
            return None;
        }
        for c in 0..w {
            a.swap(col * w + c, piv * w + c);
        }
        for row in col + 1..n {
            let f = a[row * w + col] / a[col * w + col];
            for c in col..w {
                a[row * w + c] -= f * a[col * w + c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|c| a[row * w + c] * x[c]).sum();
        x[row] = (a[row * w + n] - tail) / a[row * w + row];
    }
    let mut d = vec![0.0; p];
    for (&i, v) in idx.iter().zip(x) {
        d[i] = v;
    }
    d.iter().all(|v| v.is_finite()).then_some(d)
}

/// Projected Gauss-Newton descent from `start` with backtracking. Every
/// accepted step lowers the objective; the search stops once an accepted
/// step lowers it by less than the tolerance, or at the iteration cap.
pub fn fit_from(m: &[Complex64], model: &SplineModel, start: &[f64], options: &FitOptions) -> Result<VoxelEstimate> {
    options.validate()?;
    if model.order() == 0 {
        return Err(Error::Unsupported(
            "fitting needs a differentiable model (order >= 1)".into(),
        ));
    }
    let grid = model.grid();
    check_len(grid.dims(), start.len())?;
    check_len(model.channels(), m.len())?;
    let counts = grid.counts();
    let p = counts.len();
    let mut x = start.to_vec();
    clamp_box(&mut x, &counts);
    let mut point = evaluate_point(m, model, &x)?;
    let mut lambda = 0.0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < options.max_iterations {
        let g = &point.objective.gradient;
        let free: Vec<bool> = (0..p)
            .map(|i| !((x[i] <= 1.0 && g[i] > 0.0) || (x[i] >= counts[i] as f64 && g[i] < 0.0)))
            .collect();
        if g.iter().zip(&free).all(|(g, &f)| !f || *g == 0.0) {
            converged = true;
            break;
        }
        let mut d = newton_direction(&point.normal, g, &free, lambda)
            .filter(|d| d.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() < 0.0)
            .unwrap_or_else(|| free.iter().zip(g).map(|(&f, g)| if f { -g } else { 0.0 }).collect());
        // keep trial steps within a couple of grid cells
        let longest = d.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if longest > 2.0 {
            d.iter_mut().for_each(|v| *v *= 2.0 / longest);
        }

        iterations += 1;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            clamp_box(&mut trial, &counts);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if step.iter().all(|s| *s == 0.0) {
                break;
            }
            let predicted: f64 = step.iter().zip(g).map(|(a, b)| a * b).sum();
            let next = evaluate_point(m, model, &trial)?;
            if next.objective.value <= point.objective.value + 1e-4 * predicted.min(0.0)
                && next.objective.value <= point.objective.value
            {
                accepted = Some((trial, next));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, next)) = accepted else {
            // no descent along the projected direction: stationary to precision
            converged = true;
            break;
        };
        lambda = if t < 1.0 {
            (lambda * 4.0f64).max(1e-3)
        } else {
            lambda * 0.25
        };
        let decrease = point.objective.value - next.objective.value;
        x = trial;
        point = next;
        if decrease < options.abs_decrease_tol {
            converged = true;
            break;
        }
    }
    Ok(VoxelEstimate {
        theta_hat: grid.grid_to_param(&x)?,
        v_hat: x,
        rho_hat: point.objective.rho,
        residual_norm: point.objective.value.sqrt(),
        iterations,
        converged,
        zero_signal: false,
    })
}

/// Fits from the options' initialisation, using `dict` (in the same space as
/// `model`) when matching is requested.
pub fn fit_spline(
    m: &[Complex64],
    model: &SplineModel,
    dict: Option<&Dictionary>,
    options: &FitOptions,
) -> Result<VoxelEstimate> {
    let start = match &options.initialization {
        Initialization::Given(v) => v.clone(),
        Initialization::Match => {
            let dict = dict.ok_or_else(|| Error::InvalidParams("matching initialisation needs a dictionary".into()))?;
            let r = match_dictionary(m, dict)?;
            if r.zero_signal {
                return zero_estimate(model.grid());
            }
            node_coordinates(dict.grid(), r.index)
        }
    };
    if norm_sqr(m) == 0.0 {
        return zero_estimate(model.grid());
    }
    let mut best = fit_from(m, model, &start, options)?;
    if options.multi_start {
        for p in 0..start.len() {
            for delta in [-1.0, 1.0] {
                let mut s = start.clone();
                s[p] += delta;
                let e = fit_from(m, model, &s, options)?;
                if e.residual_norm < best.residual_norm {
                    best = e;
                }
            }
        }
    }
    Ok(best)
}

fn zero_estimate(grid: &ParameterGrid) -> Result<VoxelEstimate> {
    let v_hat = vec![1.0; grid.dims()];
    Ok(VoxelEstimate {
        theta_hat: grid.grid_to_param(&v_hat)?,
        v_hat,
        rho_hat: Complex64::default(),
        residual_norm: 0.0,
        iterations: 0,
        converged: true,
        zero_signal: true,
    })
}

/// A sparse dictionary with its prefiltered spline, ready for fitting.
#[derive(Debug, Clone)]
pub struct Estimator {
    dictionary: Dictionary,
    spline: SplineModel,
    options: FitOptions,
}

impl Estimator {
    pub fn new(dictionary: Dictionary, order: usize, options: FitOptions) -> Result<Self> {
        let spline = SplineModel::prefilter(dictionary.atoms(), dictionary.channels(), dictionary.grid(), order)?;
        Self::from_parts(dictionary, spline, options)
    }

    pub fn from_parts(dictionary: Dictionary, spline: SplineModel, options: FitOptions) -> Result<Self> {
        options.validate()?;
        if spline.grid() != dictionary.grid() || spline.channels() != dictionary.channels() {
            return Err(Error::InvalidGrid("spline and dictionary disagree".into()));
        }
        Ok(Self {
            dictionary,
            spline,
            options,
        })
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    pub fn spline(&self) -> &SplineModel {
        &self.spline
    }

    pub fn options(&self) -> &FitOptions {
        &self.options
    }

    pub fn basis(&self) -> Option<&Basis> {
        self.dictionary.basis()
    }

    /// Matches on the sparse dictionary, then fits. `m` is a raw signal.
    pub fn estimate_voxel(&self, m: &[Complex64]) -> Result<VoxelEstimate> {
        let m = self.dictionary.to_signal_space(m)?;
        fit_spline(&m, &self.spline, Some(&self.dictionary), &self.options)
    }

    /// Raw signals `count x len`, results in input order.
    pub fn estimate_batch(&self, signals: &[Complex64], len: usize) -> Result<Vec<VoxelEstimate>> {
        check_len(self.dictionary.signal_length(), len)?;
        signals.par_chunks(len).map(|m| self.estimate_voxel(m)).collect()
    }
}

/// Matching of raw signals `count x len` against `dict`, in input order.
pub fn match_batch(dict: &Dictionary, signals: &[Complex64], len: usize) -> Result<Vec<VoxelEstimate>> {
    check_len(dict.signal_length(), len)?;
    signals
        .par_chunks(len)
        .map(|m| match_estimate(&dict.to_signal_space(m)?, dict))
        .collect()
}

/// Timing of [`match_streaming`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StreamingTimes {
    pub generation: std::time::Duration,
    pub matching: std::time::Duration,
}

/// Exhaustive matching against the dictionary on `grid` without holding it in
/// memory: atoms are simulated (and projected onto `basis`, if given) in
/// blocks of `block` and every voxel's running best is updated per block.
/// Results equal [`match_batch`] on the materialised dictionary.
pub fn match_streaming<M: SignalModel + ?Sized>(
    grid: &ParameterGrid,
    model: &M,
    basis: Option<&Basis>,
    signals: &[Complex64],
    len: usize,
    block: usize,
) -> Result<(Vec<VoxelEstimate>, StreamingTimes)> {
    match_streaming_range(grid, model, basis, signals, len, 0..grid.atom_count(), block)
}

/// [`match_streaming`] restricted to the atoms with canonical index in `atoms`.
pub fn match_streaming_range<M: SignalModel + ?Sized>(
    grid: &ParameterGrid,
    model: &M,
    basis: Option<&Basis>,
    signals: &[Complex64],
    len: usize,
    atoms: std::ops::Range<usize>,
    block: usize,
) -> Result<(Vec<VoxelEstimate>, StreamingTimes)> {
    check_len(model.signal_length(), len)?;
    if atoms.is_empty() || atoms.end > grid.atom_count() {
        return Err(Error::InvalidParams(format!("atom range {atoms:?} outside the grid")));
    }
    let voxels: Vec<Vec<Complex64>> = signals
        .chunks(len)
        .map(|m| match basis {
            Some(b) => b.project(m),
            None => Ok(m.to_vec()),
        })
        .collect::<Result<_>>()?;
    let channels = basis.map_or(len, Basis::rank);
    let mut best: Vec<(usize, f64, Complex64)> =
        vec![(usize::MAX, f64::NEG_INFINITY, Complex64::default()); voxels.len()];
    let mut times = StreamingTimes::default();
    let total = atoms.end;
    let mut start = atoms.start;
    while start < total {
        let end = (start + block.max(1)).min(total);
        let t0 = std::time::Instant::now();
        let atoms: Vec<Vec<Complex64>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let s = model.simulate(&grid.grid_to_param(&node_coordinates(grid, i))?)?;
                match basis {
                    Some(b) => b.project(&s),
                    None => Ok(s),
                }
            })
            .collect::<Result<_>>()?;
        let flat = atoms.concat();
        let norms: Vec<f64> = flat.chunks(channels).map(|a| norm_sqr(a).sqrt()).collect();
        let t1 = std::time::Instant::now();
        best.par_iter_mut().zip(&voxels).for_each(|(b, m)| {
            for (j, (atom, &n)) in flat.chunks_exact(channels).zip(&norms).enumerate() {
                if n == 0.0 {
                    continue;
                }
                let a = dot(atom, m);
                let score = a.norm() / n;
                if score > b.1 {
                    *b = (start + j, score, a / (n * n));
                }
            }
        });
        times.generation += t1 - t0;
        times.matching += t1.elapsed();
        start = end;
    }
    let estimates = voxels
        .iter()
        .zip(best)
        .map(|(m, (index, _, rho))| {
            if norm_sqr(m) == 0.0 {
                return zero_estimate(grid);
            }
            if index == usize::MAX {
                return Err(Error::EmptyDictionary);
            }
            let v_hat = node_coordinates(grid, index);
            Ok(VoxelEstimate {
                theta_hat: grid.grid_to_param(&v_hat)?,
                v_hat,
                rho_hat: rho,
                residual_norm: f64::NAN,
                iterations: 0,
                converged: true,
                zero_signal: false,
            })
        })
        .collect::<Result<_>>()?;
    Ok((estimates, times))
}

/// Squared residual of `rho s` against `m` for every atom; the oracle for
/// matching by correlation.
pub fn residual_scan(m: &[Complex64], dict: &Dictionary) -> Result<Vec<f64>> {
    (0..dict.len())
        .map(|k| {
            let s = dict.atom(k);
            let rho = optimal_scale(m, s)?;
            Ok(m.iter().zip(s).map(|(x, y)| (x - rho * y).norm_sqr()).sum())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::{AcquisitionSchedule, SpinEnsemble};
    use crate::dict::{generate_dictionary, svd_truncate, Rank};
    use crate::model::{FispModel, FnModel};
    use crate::pgrid::{ParameterAxis, Spacing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn crand(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect()
    }

    #[test]
    fn scale_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = crand(&mut rng, 9);
        let m: Vec<Complex64> = s.iter().map(|x| x * Complex64::new(0.0, 3.0)).collect();
        assert!((optimal_scale(&m, &s).unwrap() - Complex64::new(0.0, 3.0)).norm() <= 1e-12);
        let s = vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
        let m = vec![Complex64::new(0.0, 0.0), Complex64::new(2.0, 1.0)];
        assert_eq!(optimal_scale(&m, &s).unwrap(), Complex64::default());
        assert!(matches!(
            optimal_scale(&m, &[Complex64::default(); 2]),
            Err(Error::DegenerateAtom)
        ));
    }

    #[test]
    fn scale_matches_real_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let s = crand(&mut rng, 12);
            let m = crand(&mut rng, 12);
            // m ~ (a + ib) s as a real 2-parameter problem: columns [s, i s]
            let c1: Vec<f64> = s.iter().flat_map(|z| [z.re, z.im]).collect();
            let c2: Vec<f64> = s.iter().flat_map(|z| [-z.im, z.re]).collect();
            let y: Vec<f64> = m.iter().flat_map(|z| [z.re, z.im]).collect();
            let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let (a11, a12, a22) = (d(&c1, &c1), d(&c1, &c2), d(&c2, &c2));
            let (b1, b2) = (d(&c1, &y), d(&c2, &y));
            let det = a11 * a22 - a12 * a12;
            let re = (a22 * b1 - a12 * b2) / det;
            let im = (a11 * b2 - a12 * b1) / det;
            let oracle: f64 = (0..y.len()).map(|i| (y[i] - re * c1[i] - im * c2[i]).powi(2)).sum();
            let rho = optimal_scale(&m, &s).unwrap();
            let ours: f64 = m.iter().zip(&s).map(|(x, z)| (x - rho * z).norm_sqr()).sum();
            assert!((ours - oracle).abs() <= 1e-12 * oracle.max(1.0));
        }
    }

    fn line_dict(atoms: Vec<Complex64>, channels: usize) -> Dictionary {
        let k = atoms.len() / channels;
        let grid = ParameterGrid::new(vec![ParameterAxis::new("x", Spacing::Linear, 0.0, 1.0, k).unwrap()]).unwrap();
        Dictionary::from_parts(grid, channels, atoms, [0; 32], None).unwrap()
    }

    #[test]
    fn matching_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = line_dict(crand(&mut rng, 40 * 6), 6);
        let r = match_dictionary(d.atom(17), &d).unwrap();
        assert_eq!(r.index, 17);
        assert!((r.rho - 1.0).norm() <= 1e-12);
        let c = Complex64::from_polar(2.0, std::f64::consts::FRAC_PI_4);
        let m: Vec<Complex64> = d.atom(5).iter().map(|x| x * c).collect();
        let r = match_dictionary(&m, &d).unwrap();
        assert_eq!(r.index, 5);
        assert!((r.rho - c).norm() <= 1e-12);
        let z = match_dictionary(&[Complex64::default(); 6], &d).unwrap();
        assert!(z.zero_signal && z.rho == Complex64::default());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let a = vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
        let atoms = [
            a.clone(),
            vec![Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
            a.clone(),
            a,
        ]
        .concat();
        let d = line_dict(atoms, 2);
        let r = match_dictionary(&[Complex64::new(2.0, 0.0), Complex64::default()], &d).unwrap();
        assert_eq!(r.index, 0);
        let r = match_dictionary(&[Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)], &d).unwrap();
        assert_eq!(r.index, 0);
    }

    #[test]
    fn correlation_argmax_is_residual_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let d = line_dict(crand(&mut rng, 25 * 8), 8);
            let k = rng.random_range(0..25);
            let noise = crand(&mut rng, 8);
            let m: Vec<Complex64> = d.atom(k).iter().zip(&noise).map(|(a, n)| a * 0.7 + n * 0.5).collect();
            let r = match_dictionary(&m, &d).unwrap();
            let res = residual_scan(&m, &d).unwrap();
            let argmin = (0..res.len()).min_by(|&a, &b| res[a].total_cmp(&res[b])).unwrap();
            assert_eq!(r.index, argmin);
        }
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = line_dict(crand(&mut rng, 30 * 5), 5);
        for _ in 0..20 {
            let m = crand(&mut rng, 5);
            let c = Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let cm: Vec<Complex64> = m.iter().map(|x| x * c).collect();
            let (a, b) = (match_dictionary(&m, &d).unwrap(), match_dictionary(&cm, &d).unwrap());
            assert_eq!(a.index, b.index);
            assert!((b.rho - a.rho * c).norm() <= 1e-10 * b.rho.norm().max(1.0));
        }
    }

    fn relax_setup(k: (usize, usize, usize), m: usize) -> (ParameterGrid, FispModel) {
        let grid = ParameterGrid::relaxometry(k.0, k.1, k.2).unwrap();
        let model = FispModel::for_grid(
            &grid,
            AcquisitionSchedule::fisp_train(m),
            SpinEnsemble::slice_profile(16, 3.0).unwrap(),
        )
        .unwrap();
        (grid, model)
    }

    #[test]
    fn objective_examples() {
        let (grid, model) = relax_setup((6, 5, 4), 40);
        let d = generate_dictionary(&grid, &model).unwrap();
        let s = SplineModel::prefilter(d.atoms(), 40, &grid, 2).unwrap();
        let v = [2.3, 3.7, 1.4];
        let sv = s.evaluate(&v).unwrap();
        let o = reduced_objective(&sv, &s, &v).unwrap();
        assert!(o.value <= 1e-24);
        assert!((o.rho - 1.0).norm() <= 1e-12);
        // a vector orthogonal to s(v)
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = crand(&mut rng, 40);
        let c = dot(&sv, &q) / norm_sqr(&sv);
        let perp: Vec<Complex64> = q.iter().zip(&sv).map(|(a, b)| a - c * b).collect();
        let o = reduced_objective(&perp, &s, &v).unwrap();
        assert!((o.value - norm_sqr(&perp)).abs() <= 1e-12 * norm_sqr(&perp));
        // the closed form agrees with the residual form
        let m = crand(&mut rng, 40);
        let o = reduced_objective(&m, &s, &v).unwrap();
        let closed = norm_sqr(&m) - dot(&sv, &m).norm_sqr() / norm_sqr(&sv);
        assert!((o.value - closed).abs() <= 1e-12 * norm_sqr(&m));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (grid, model) = relax_setup((7, 6, 5), 30);
        let d = generate_dictionary(&grid, &model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for order in [2, 3] {
            let s = SplineModel::prefilter(d.atoms(), 30, &grid, order).unwrap();
            for _ in 0..30 {
                let v: Vec<f64> = grid
                    .counts()
                    .iter()
                    .map(|&k| rng.random_range(1.1..k as f64 - 0.1))
                    .collect();
                let base = s.evaluate(&rng_point(&mut rng, &grid)).unwrap();
                let m: Vec<Complex64> = base
                    .iter()
                    .zip(crand(&mut rng, 30))
                    .map(|(a, n)| a * 1.3 + n * 0.05)
                    .collect();
                let o = reduced_objective(&m, &s, &v).unwrap();
                let h = 1e-5;
                for p in 0..3 {
                    let mut a = v.clone();
                    let mut b = v.clone();
                    a[p] += h;
                    b[p] -= h;
                    let fd = (reduced_objective(&m, &s, &a).unwrap().value
                        - reduced_objective(&m, &s, &b).unwrap().value)
                        / (2.0 * h);
                    let g = o.gradient[p];
                    let scale = g.abs().max(fd.abs()).max(1e-6);
                    assert!((g - fd).abs() <= 1e-5 * scale, "order {order} axis {p}: {g} vs {fd}");
                }
            }
        }
    }

    fn rng_point(rng: &mut ChaCha8Rng, grid: &ParameterGrid) -> Vec<f64> {
        grid.counts().iter().map(|&k| rng.random_range(1.0..k as f64)).collect()
    }

    #[test]
    fn node_signal_is_recovered() {
        let (grid, model) = relax_setup((8, 7, 5), 60);
        let d = generate_dictionary(&grid, &model).unwrap();
        let est = Estimator::new(d.clone(), 2, FitOptions::default()).unwrap();
        for k in [0, 57, 140, grid.atom_count() - 1] {
            let m: Vec<Complex64> = d.atom(k).iter().map(|x| x * Complex64::new(0.4, -1.1)).collect();
            let e = est.estimate_voxel(&m).unwrap();
            let node = node_coordinates(&grid, k);
            assert!(
                e.v_hat.iter().zip(&node).all(|(a, b)| (a - b).abs() <= 1e-6),
                "{:?} vs {node:?}",
                e.v_hat
            );
            assert!(e.residual_norm <= 1e-10);
            assert!((e.rho_hat - Complex64::new(0.4, -1.1)).norm() <= 1e-9);
        }
    }

    #[test]
    fn off_grid_fit_beats_matching() {
        let (grid, model) = relax_setup((12, 10, 7), 60);
        let d = generate_dictionary(&grid, &model).unwrap();
        let est = Estimator::new(d.clone(), 3, FitOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let t1: f64 = rng.random_range(300.0..2000.0);
            let t2 = rng.random_range(30.0..t1.min(300.0));
            let theta = [t1, t2, rng.random_range(0.8..1.2)];
            let m = model.simulate(&theta).unwrap();
            let f = est.estimate_voxel(&m).unwrap();
            let g = match_estimate(&m, &d).unwrap();
            assert!(f.residual_norm <= g.residual_norm);
            assert!(f
                .v_hat
                .iter()
                .zip(grid.counts())
                .all(|(v, k)| *v >= 1.0 && *v <= k as f64));
        }
    }

    #[test]
    fn objective_never_increases() {
        let (grid, model) = relax_setup((9, 8, 6), 40);
        let d = generate_dictionary(&grid, &model).unwrap();
        let s = SplineModel::prefilter(d.atoms(), 40, &grid, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m: Vec<Complex64> = model
            .simulate(&[900.0, 80.0, 1.1])
            .unwrap()
            .iter()
            .zip(crand(&mut rng, 40))
            .map(|(a, n)| a + n * 0.01)
            .collect();
        let start = vec![2.0, 2.0, 2.0];
        let mut last = reduced_objective(&m, &s, &start).unwrap().value;
        for iters in 1..30 {
            let opts = FitOptions {
                max_iterations: iters,
                abs_decrease_tol: 1e-300,
                initialization: Initialization::Given(start.clone()),
                multi_start: false,
            };
            let e = fit_spline(&m, &s, None, &opts).unwrap();
            let value = e.residual_norm.powi(2);
            assert!(value <= last * (1.0 + 1e-12), "iteration {iters}: {value} > {last}");
            last = value;
        }
    }

    #[test]
    fn zero_signal_is_flagged() {
        let (grid, model) = relax_setup((3, 3, 3), 20);
        let est = Estimator::new(generate_dictionary(&grid, &model).unwrap(), 2, FitOptions::default()).unwrap();
        let e = est.estimate_voxel(&[Complex64::default(); 20]).unwrap();
        assert!(e.zero_signal);
        assert_eq!(e.rho_hat, Complex64::default());
        assert_eq!(e.iterations, 0);
    }

    #[test]
    fn compressed_full_rank_matches_uncompressed() {
        let (grid, model) = relax_setup((7, 6, 4), 24);
        let d = generate_dictionary(&grid, &model).unwrap();
        let c = d.compress(&svd_truncate(&d, Rank::Fixed(24)).unwrap()).unwrap();
        let a = Estimator::new(d, 2, FitOptions::default()).unwrap();
        let b = Estimator::new(c, 2, FitOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let theta = [
                rng.random_range(200.0..3000.0),
                rng.random_range(20.0..150.0),
                rng.random_range(0.7..1.3),
            ];
            let m = model.simulate(&theta).unwrap();
            let (x, y) = (a.estimate_voxel(&m).unwrap(), b.estimate_voxel(&m).unwrap());
            assert!(
                x.v_hat.iter().zip(&y.v_hat).all(|(p, q)| (p - q).abs() <= 1e-8),
                "{:?} {:?}",
                x.v_hat,
                y.v_hat
            );
        }
    }

    #[test]
    fn batch_is_worker_independent() {
        let (grid, model) = relax_setup((6, 5, 4), 20);
        let est = Estimator::new(generate_dictionary(&grid, &model).unwrap(), 2, FitOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let signals: Vec<Complex64> = (0..64)
            .flat_map(|_| {
                let theta = [rng.random_range(100.0..3000.0), rng.random_range(10.0..90.0), 1.0];
                let noise = crand(&mut rng, 20);
                model
                    .simulate(&theta)
                    .unwrap()
                    .into_iter()
                    .zip(noise)
                    .map(|(a, n)| a + n * 0.01)
                    .collect::<Vec<_>>()
            })
            .collect();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| est.estimate_batch(&signals, 20).unwrap());
        let b = four.install(|| est.estimate_batch(&signals, 20).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn streaming_matches_materialised() {
        let (grid, model) = relax_setup((5, 4, 3), 16);
        let d = generate_dictionary(&grid, &model).unwrap();
        let basis = svd_truncate(&d, Rank::Fixed(5)).unwrap();
        let c = d.compress(&basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let signals: Vec<Complex64> = (0..20)
            .flat_map(|_| {
                let theta = [
                    rng.random_range(100.0..3000.0),
                    rng.random_range(10.0..90.0),
                    rng.random_range(0.6..1.4),
                ];
                model.simulate(&theta).unwrap()
            })
            .collect();
        for (dict, b) in [(&d, None), (&c, Some(&basis))] {
            let full = match_batch(dict, &signals, 16).unwrap();
            let (streamed, _) = match_streaming(&grid, &model, b, &signals, 16, 7).unwrap();
            for (x, y) in full.iter().zip(&streamed) {
                assert_eq!(x.v_hat, y.v_hat);
                assert!((x.rho_hat - y.rho_hat).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_misuse() {
        let model = FnModel::new(3, |_: &[f64]| vec![Complex64::new(1.0, 0.0); 3]);
        let grid = ParameterGrid::new(vec![ParameterAxis::new("x", Spacing::Linear, 0.0, 1.0, 4).unwrap()]).unwrap();
        let d = generate_dictionary(&grid, &model).unwrap();
        assert!(matches!(
            Estimator::new(d.clone(), 0, FitOptions::default())
                .unwrap()
                .estimate_voxel(&[Complex64::new(1.0, 0.0); 3]),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            match_dictionary(&[Complex64::default(); 2], &d),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = FitOptions {
            abs_decrease_tol: 0.0,
            ..Default::default()
        };
        assert!(Estimator::new(d, 2, bad).is_err());
    }
}
