//! Tensor-product B-spline interpolation of vector-valued complex atoms.
//!
//! Basis functions are the centred B-splines of degree 0 to 3 on integer
//! knots. Orders 0 and 1 interpolate with the atoms themselves as
//! coefficients. Orders 2 and 3 add one coefficient node outside each end of
//! every axis and solve, per axis, the interpolation conditions at the nodes
//! together with a boundary row that sets the interpolant's derivative at the
//! end node to a one-sided finite difference of the data.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pgrid::ParameterGrid;

pub const MAX_ORDER: usize = 3;

/// Coefficient nodes added on each side of every axis for `order`.
pub fn extension_for(order: usize) -> usize {
    usize::from(order >= 2)
}

/// Centred B-spline of degree `order` (0..=3). Degree 0 is the indicator of
/// `(-1/2, 1/2]`, so half-integer ties go to the lower node.
pub fn basis_value(order: usize, x: f64) -> f64 {
    let a = x.abs();
    match order {
        0 => {
            if x > -0.5 && x <= 0.5 {
                1.0
            } else {
                0.0
            }
        }
        1 => (1.0 - a).max(0.0),
        2 => {
            if a < 0.5 {
                0.75 - a * a
            } else if a < 1.5 {
                0.5 * (1.5 - a) * (1.5 - a)
            } else {
                0.0
            }
        }
        3 => {
            if a < 1.0 {
                2.0 / 3.0 - a * a + 0.5 * a * a * a
            } else if a < 2.0 {
                let t = 2.0 - a;
                t * t * t / 6.0
            } else {
                0.0
            }
        }
        _ => panic!("B-spline order {order} not supported"),
    }
}

/// d/dx of [`basis_value`], via `b[n-1](x + 1/2) - b[n-1](x - 1/2)`.
pub fn basis_derivative(order: usize, x: f64) -> Result<f64> {
    if order == 0 {
        return Err(Error::Unsupported("derivative of the order-0 B-spline".into()));
    }
    if order > MAX_ORDER {
        return Err(Error::Unsupported(format!("B-spline order {order}")));
    }
    Ok(basis_value(order - 1, x + 0.5) - basis_value(order - 1, x - 0.5))
}

/// Anything that returns an interpolated signal at a grid coordinate.
pub trait Interpolant: Sync {
    fn grid(&self) -> &ParameterGrid;

    fn interpolate(&self, v: &[f64]) -> Result<Vec<Complex64>>;
}

/// One-sided finite difference used in the boundary rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryStencil {
    /// Three-point, second-order accurate.
    SecondOrder,
    /// Second order for quadratic, four-point third order for cubic splines,
    /// so the boundary does not limit the convergence rate.
    MatchOrder,
}

#[derive(Debug, Clone)]
pub struct SplineModel {
    order: usize,
    grid: ParameterGrid,
    channels: usize,
    ext: usize,
    ext_dims: Vec<usize>,
    strides: Vec<usize>,
    coefficients: Vec<Complex64>,
}

#[derive(Clone, Copy)]
struct AxisWeights {
    // first active coefficient, in extended array coordinates
    start: usize,
    len: usize,
    w: [f64; 4],
    d: [f64; 4],
}

impl SplineModel {
    /// Prefilters `atoms` (canonical order, `channels` values per atom).
    pub fn prefilter(atoms: &[Complex64], channels: usize, grid: &ParameterGrid, order: usize) -> Result<Self> {
        Self::prefilter_with(atoms, channels, grid, order, BoundaryStencil::MatchOrder)
    }

    pub fn prefilter_with(
        atoms: &[Complex64],
        channels: usize,
        grid: &ParameterGrid,
        order: usize,
        stencil: BoundaryStencil,
    ) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::Unsupported(format!("B-spline order {order}")));
        }
        if channels == 0 {
            return Err(Error::InvalidGrid("atoms have no channels".into()));
        }
        let expected = grid.atom_count() * channels;
        if atoms.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: atoms.len(),
            });
        }
        let ext = extension_for(order);
        let ext_dims: Vec<usize> = grid.counts().iter().map(|k| k + 2 * ext).collect();
        let coefficients = if ext == 0 {
            atoms.to_vec()
        } else {
            let mut dims = grid.counts();
            let mut data = atoms.to_vec();
            for p in 0..dims.len() {
                data = filter_axis(&data, &dims, p, channels, order, stencil)?;
                dims[p] += 2;
            }
            data
        };
        if coefficients.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::SingularSystem);
        }
        let mut strides = vec![channels; ext_dims.len()];
        for p in (0..ext_dims.len().saturating_sub(1)).rev() {
            strides[p] = strides[p + 1] * ext_dims[p + 1];
        }
        Ok(Self {
            order,
            grid: grid.clone(),
            channels,
            ext,
            ext_dims,
            strides,
            coefficients,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn grid(&self) -> &ParameterGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of coefficient nodes added beyond each end of every axis.
    pub fn extension(&self) -> usize {
        self.ext
    }

    pub fn extended_dims(&self) -> &[usize] {
        &self.ext_dims
    }

    /// Coefficients over the extended grid, row-major, channels innermost.
    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    /// Rebuilds a model from stored coefficients.
    pub fn from_coefficients(
        coefficients: Vec<Complex64>,
        channels: usize,
        grid: &ParameterGrid,
        order: usize,
    ) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::Unsupported(format!("B-spline order {order}")));
        }
        let ext = extension_for(order);
        let ext_dims: Vec<usize> = grid.counts().iter().map(|k| k + 2 * ext).collect();
        let expected = ext_dims.iter().product::<usize>() * channels;
        if coefficients.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: coefficients.len(),
            });
        }
        let mut strides = vec![channels; ext_dims.len()];
        for p in (0..ext_dims.len().saturating_sub(1)).rev() {
            strides[p] = strides[p + 1] * ext_dims[p + 1];
        }
        Ok(Self {
            order,
            grid: grid.clone(),
            channels,
            ext,
            ext_dims,
            strides,
            coefficients,
        })
    }

    pub fn evaluate(&self, v: &[f64]) -> Result<Vec<Complex64>> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.channels];
        self.evaluate_into(v, &mut out)?;
        Ok(out)
    }

    pub fn evaluate_into(&self, v: &[f64], out: &mut [Complex64]) -> Result<()> {
        let weights = self.weights(v, false)?;
        out.iter_mut().for_each(|o| *o = Complex64::new(0.0, 0.0));
        self.for_each_term(&weights, |offset, j| {
            let w: f64 = weights.iter().zip(j).map(|(a, &jp)| a.w[jp]).product();
            if w != 0.0 {
                let c = &self.coefficients[offset..offset + self.channels];
                out.iter_mut().zip(c).for_each(|(o, c)| *o += c * w);
            }
        });
        Ok(())
    }

    /// Value and partial derivatives; `gradient[p]` is d/dv_p of the value.
    pub fn evaluate_with_gradient(&self, v: &[f64]) -> Result<(Vec<Complex64>, Vec<Vec<Complex64>>)> {
        if self.order == 0 {
            return Err(Error::Unsupported("gradient of an order-0 spline".into()));
        }
        let dims = self.grid.dims();
        let weights = self.weights(v, true)?;
        let zero = Complex64::new(0.0, 0.0);
        let mut value = vec![zero; self.channels];
        let mut gradient = vec![vec![zero; self.channels]; dims];
        let mut dw = vec![0.0; dims];
        self.for_each_term(&weights, |offset, j| {
            let c = &self.coefficients[offset..offset + self.channels];
            let w: f64 = weights.iter().zip(j).map(|(a, &jp)| a.w[jp]).product();
            for (p, slot) in dw.iter_mut().enumerate() {
                *slot = weights
                    .iter()
                    .zip(j)
                    .enumerate()
                    .map(|(q, (a, &jq))| if q == p { a.d[jq] } else { a.w[jq] })
                    .product();
            }
            if w != 0.0 {
                value.iter_mut().zip(c).for_each(|(o, c)| *o += c * w);
            }
            for (g, &d) in gradient.iter_mut().zip(&dw) {
                if d != 0.0 {
                    g.iter_mut().zip(c).for_each(|(o, c)| *o += c * d);
                }
            }
        });
        Ok((value, gradient))
    }

    fn weights(&self, v: &[f64], with_derivative: bool) -> Result<Vec<AxisWeights>> {
        if v.len() != self.grid.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.dims(),
                got: v.len(),
            });
        }
        self.grid
            .axes()
            .iter()
            .zip(v)
            .enumerate()
            .map(|(p, (axis, &x))| {
                let k = axis.count();
                if !(x >= 1.0 && x <= k as f64) {
                    return Err(Error::OutOfDomain { axis: p, value: x });
                }
                Ok(axis_weights(self.order, k, x, with_derivative))
            })
            .collect()
    }

    fn for_each_term(&self, weights: &[AxisWeights], mut f: impl FnMut(usize, &[usize])) {
        let dims = weights.len();
        let mut j = vec![0usize; dims];
        loop {
            let offset: usize = weights
                .iter()
                .zip(&j)
                .zip(&self.strides)
                .map(|((a, &jp), &s)| (a.start + jp) * s)
                .sum();
            f(offset, &j);
            let mut p = dims;
            loop {
                if p == 0 {
                    return;
                }
                p -= 1;
                j[p] += 1;
                if j[p] < weights[p].len {
                    break;
                }
                j[p] = 0;
            }
        }
    }
}

impl Interpolant for SplineModel {
    fn grid(&self) -> &ParameterGrid {
        &self.grid
    }

    fn interpolate(&self, v: &[f64]) -> Result<Vec<Complex64>> {
        self.evaluate(v)
    }
}

fn axis_weights(order: usize, k: usize, x: f64, with_derivative: bool) -> AxisWeights {
    let mut a = AxisWeights {
        start: 0,
        len: order + 1,
        w: [0.0; 4],
        d: [0.0; 4],
    };
    match order {
        0 => {
            let node = ((x - 0.5).ceil() as usize).clamp(1, k);
            a.start = node - 1;
            a.w[0] = 1.0;
        }
        1 => {
            let node = (x.floor() as usize).clamp(1, k - 1);
            let t = x - node as f64;
            a.start = node - 1;
            a.w[0] = 1.0 - t;
            a.w[1] = t;
            a.d[0] = -1.0;
            a.d[1] = 1.0;
        }
        _ => {
            // first active node in 1-based node coordinates, extension node 0 allowed
            let first = if order == 2 {
                (x + 0.5).floor() as isize - 1
            } else {
                x.floor() as isize - 1
            };
            let last_start = (k + 1 - order) as isize;
            let first = first.clamp(0, last_start) as usize;
            a.start = first;
            for i in 0..=order {
                let t = x - (first + i) as f64;
                a.w[i] = basis_value(order, t);
                if with_derivative {
                    a.d[i] = basis_value(order - 1, t + 0.5) - basis_value(order - 1, t - 0.5);
                }
            }
        }
    }
    a
}

/// Filters axis `p` of a row-major array with `dims` (channels innermost),
/// returning an array with that axis extended by one node on each side.
fn filter_axis(
    data: &[Complex64],
    dims: &[usize],
    p: usize,
    channels: usize,
    order: usize,
    stencil: BoundaryStencil,
) -> Result<Vec<Complex64>> {
    let k = dims[p];
    let inner: usize = dims[p + 1..].iter().product::<usize>() * channels;
    let outer: usize = dims[..p].iter().product();
    let solver = AxisSolver::new(k, order, stencil)?;
    let mut out = vec![Complex64::new(0.0, 0.0); outer * (k + 2) * inner];
    out.par_chunks_mut((k + 2) * inner)
        .zip(data.par_chunks(k * inner))
        .for_each(|(dst, src)| solver.solve(src, dst, inner));
    debug_assert_eq!(outer * k * inner, data.len());
    Ok(out)
}

/// Factored tridiagonal system for the interior coefficients `c_1..c_K` after
/// eliminating the two boundary rows.
struct AxisSolver {
    k: usize,
    b1: f64,
    stencil: Vec<f64>,
    sub: Vec<f64>,
    // modified super-diagonal and inverse pivots from the forward sweep
    sup: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl AxisSolver {
    fn new(k: usize, order: usize, stencil: BoundaryStencil) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidGrid("prefilter needs at least 2 nodes per axis".into()));
        }
        let b0 = basis_value(order, 0.0);
        let b1 = basis_value(order, 1.0);
        let stencil = match (k, order, stencil) {
            (2, _, _) => vec![-1.0, 1.0],
            (3, _, _) | (_, 2, _) | (_, _, BoundaryStencil::SecondOrder) => vec![-1.5, 2.0, -0.5],
            _ => vec![-11.0 / 6.0, 3.0, -1.5, 1.0 / 3.0],
        };
        let mut sub = vec![b1; k];
        let mut sup = vec![b1; k];
        sub[0] = 0.0;
        sub[k - 1] = 2.0 * b1;
        sup[0] = 2.0 * b1;
        sup[k - 1] = 0.0;
        let mut inv_pivot = vec![0.0; k];
        let mut prev_sup = 0.0;
        for i in 0..k {
            let pivot = b0 - sub[i] * prev_sup;
            if pivot.abs() < 1e-14 {
                return Err(Error::SingularSystem);
            }
            inv_pivot[i] = 1.0 / pivot;
            sup[i] *= inv_pivot[i];
            prev_sup = sup[i];
        }
        Ok(Self {
            k,
            b1,
            stencil,
            sub,
            sup,
            inv_pivot,
        })
    }

    fn solve(&self, src: &[Complex64], dst: &mut [Complex64], inner: usize) {
        let k = self.k;
        let row = |i: usize| &src[i * inner..(i + 1) * inner];
        for col in 0..inner {
            let at = |i: usize| row(i)[col];
            let dl: Complex64 = self.stencil.iter().enumerate().map(|(i, w)| at(i) * w).sum();
            let dr: Complex64 = self.stencil.iter().enumerate().map(|(i, w)| -at(k - 1 - i) * w).sum();
            // forward sweep, writing into the interior slots c_1..c_K
            let mut prev = Complex64::new(0.0, 0.0);
            for i in 0..k {
                let mut rhs = at(i);
                if i == 0 {
                    rhs += dl * (2.0 * self.b1);
                }
                if i == k - 1 {
                    rhs -= dr * (2.0 * self.b1);
                }
                prev = (rhs - prev * self.sub[i]) * self.inv_pivot[i];
                dst[(i + 1) * inner + col] = prev;
            }
            for i in (0..k - 1).rev() {
                let next = dst[(i + 2) * inner + col];
                dst[(i + 1) * inner + col] -= next * self.sup[i];
            }
            let c2 = dst[2 * inner + col];
            let ck1 = dst[(k - 1) * inner + col];
            dst[col] = c2 - dl * 2.0;
            dst[(k + 1) * inner + col] = ck1 + dr * 2.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgrid::{ParameterAxis, Spacing};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_grid(k: usize) -> ParameterGrid {
        ParameterGrid::new(vec![ParameterAxis::new("x", Spacing::Linear, 0.0, 1.0, k).unwrap()]).unwrap()
    }

    fn grid3(k: [usize; 3]) -> ParameterGrid {
        ParameterGrid::new(
            k.iter()
                .enumerate()
                .map(|(i, &c)| ParameterAxis::new(format!("a{i}"), Spacing::Linear, 0.0, 1.0, c).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn random_atoms(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn basis_values() {
        assert_eq!(basis_value(1, 0.0), 1.0);
        assert_eq!(basis_value(1, 1.0), 0.0);
        assert_eq!(basis_value(1, -1.0), 0.0);
        assert_eq!(basis_value(2, 0.0), 0.75);
        assert_eq!(basis_value(2, 1.0), 0.125);
        assert_eq!(basis_value(2, -1.0), 0.125);
        assert!((basis_value(3, 0.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((basis_value(3, 1.0) - 1.0 / 6.0).abs() < 1e-15);
        assert!((basis_value(3, -1.0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(basis_value(0, 0.5), 1.0);
        assert_eq!(basis_value(0, -0.5), 0.0);
    }

    #[test]
    fn basis_derivatives() {
        assert!(matches!(basis_derivative(0, 0.0), Err(Error::Unsupported(_))));
        assert_eq!(basis_derivative(2, 0.0).unwrap(), 0.0);
        assert_eq!(basis_derivative(1, 0.5).unwrap(), -1.0);
        // frozen from a central difference of basis_value(3, .) at x = 1, h = 1e-6
        let h = 1e-6;
        let fd = (basis_value(3, 1.0 + h) - basis_value(3, 1.0 - h)) / (2.0 * h);
        assert!((fd + 0.5).abs() < 1e-9);
        assert_eq!(basis_derivative(3, 1.0).unwrap(), -0.5);
    }

    #[test]
    fn partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(-10.0..10.0);
            for n in 0..=3 {
                let s: f64 = (-15..=15).map(|k| basis_value(n, x - k as f64)).sum();
                assert!((s - 1.0).abs() < 1e-12, "order {n} at {x}: {s}");
            }
        }
    }

    #[test]
    fn low_orders_use_atoms_as_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = grid3([3, 4, 2]);
        let atoms = random_atoms(g.atom_count() * 5, &mut rng);
        for n in 0..=1 {
            let m = SplineModel::prefilter(&atoms, 5, &g, n).unwrap();
            assert_eq!(m.coefficients(), &atoms[..]);
            assert_eq!(m.extension(), 0);
        }
    }

    #[test]
    fn constants_are_reproduced() {
        let g = grid3([4, 5, 3]);
        let atoms = vec![Complex64::new(1.0, 0.0); g.atom_count() * 2];
        for n in 2..=3 {
            let m = SplineModel::prefilter(&atoms, 2, &g, n).unwrap();
            for c in m.coefficients() {
                assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-12);
            }
            let (val, grad) = m.evaluate_with_gradient(&[2.3, 1.7, 2.9]).unwrap();
            assert!(val.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-12));
            assert!(grad.iter().flatten().all(|d| d.norm() < 1e-12));
        }
    }

    /// Dense collocation system: interpolation rows at every node plus the
    /// derivative boundary rows, solved with a general LU.
    fn dense_coefficients(data: &[f64], order: usize) -> Vec<f64> {
        let k = data.len();
        let n = k + 2;
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for i in 1..=k {
            for j in 0..n {
                a[(i, j)] = basis_value(order, i as f64 - j as f64);
            }
            b[i] = data[i - 1];
        }
        let h = |x: f64| basis_value(order - 1, x + 0.5) - basis_value(order - 1, x - 0.5);
        for j in 0..n {
            a[(0, j)] = h(1.0 - j as f64);
            a[(k + 1, j)] = h(k as f64 - j as f64);
        }
        b[0] = (-3.0 * data[0] + 4.0 * data[1] - data[2]) / 2.0;
        b[k + 1] = (3.0 * data[k - 1] - 4.0 * data[k - 2] + data[k - 3]) / 2.0;
        a.lu().solve(&b).unwrap().iter().copied().collect()
    }

    #[test]
    fn impulse_matches_dense_solve() {
        let mut data = vec![0.0; 9];
        data[4] = 1.0;
        let atoms: Vec<Complex64> = data.iter().map(|&d| Complex64::new(d, 0.0)).collect();
        let m = SplineModel::prefilter(&atoms, 1, &line_grid(9), 2).unwrap();
        let oracle = dense_coefficients(&data, 2);
        for (c, o) in m.coefficients().iter().zip(&oracle) {
            assert!((c.re - o).abs() < 1e-10 && c.im.abs() < 1e-15);
        }
        let m3 = SplineModel::prefilter_with(&atoms, 1, &line_grid(9), 3, BoundaryStencil::SecondOrder).unwrap();
        let oracle3 = dense_coefficients(&data, 3);
        for (c, o) in m3.coefficients().iter().zip(&oracle3) {
            assert!((c.re - o).abs() < 1e-10);
        }
    }

    #[test]
    fn boundary_derivative_condition_holds() {
        let data: Vec<f64> = (0..7).map(|i| (0.4 * i as f64).sin()).collect();
        let atoms: Vec<Complex64> = data.iter().map(|&d| Complex64::new(d, -d)).collect();
        let m = SplineModel::prefilter(&atoms, 1, &line_grid(7), 2).unwrap();
        let (_, g) = m.evaluate_with_gradient(&[1.0]).unwrap();
        let fd = (-3.0 * data[0] + 4.0 * data[1] - data[2]) / 2.0;
        assert!((g[0][0].re - fd).abs() < 1e-12);
        let (_, g) = m.evaluate_with_gradient(&[7.0]).unwrap();
        let fd = (3.0 * data[6] - 4.0 * data[5] + data[4]) / 2.0;
        assert!((g[0][0].re - fd).abs() < 1e-12);
    }

    #[test]
    fn node_exactness_all_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid3([4, 3, 5]);
        let atoms = random_atoms(g.atom_count() * 3, &mut rng);
        for n in 0..=3 {
            let m = SplineModel::prefilter(&atoms, 3, &g, n).unwrap();
            for (i, k) in g.iter_indices().enumerate() {
                let v: Vec<f64> = k.iter().map(|&x| x as f64).collect();
                let got = m.evaluate(&v).unwrap();
                for (a, b) in got.iter().zip(&atoms[i * 3..i * 3 + 3]) {
                    assert!((a - b).norm() <= 1e-10 * b.norm().max(1.0), "order {n} node {k:?}");
                }
            }
        }
    }

    #[test]
    fn linear_midpoint_and_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = grid3([3, 3, 3]);
        let atoms = random_atoms(g.atom_count() * 2, &mut rng);
        let m = SplineModel::prefilter(&atoms, 2, &g, 1).unwrap();
        let a = &atoms[g.linear_index(&[2, 1, 3]) * 2..][..2];
        let b = &atoms[g.linear_index(&[2, 2, 3]) * 2..][..2];
        let (val, grad) = m.evaluate_with_gradient(&[2.0, 1.5, 3.0]).unwrap();
        for c in 0..2 {
            assert!((val[c] - (a[c] + b[c]) * 0.5).norm() < 1e-14);
            assert!((grad[1][c] - (b[c] - a[c])).norm() < 1e-14);
        }
        // one-sided slopes at both ends of an axis
        let (_, g_lo) = m.evaluate_with_gradient(&[2.0, 1.0, 3.0]).unwrap();
        assert!((g_lo[1][0] - (b[0] - a[0])).norm() < 1e-14);
    }

    #[test]
    fn nearest_neighbour_ties_go_low() {
        let data = [1.0, 2.0, 3.0];
        let atoms: Vec<Complex64> = data.iter().map(|&d| Complex64::new(d, 0.0)).collect();
        let m = SplineModel::prefilter(&atoms, 1, &line_grid(3), 0).unwrap();
        assert_eq!(m.evaluate(&[1.5]).unwrap()[0].re, 1.0);
        assert_eq!(m.evaluate(&[1.51]).unwrap()[0].re, 2.0);
        assert_eq!(m.evaluate(&[3.0]).unwrap()[0].re, 3.0);
        assert!(matches!(m.evaluate_with_gradient(&[2.0]), Err(Error::Unsupported(_))));
    }

    fn naive_sum(m: &SplineModel, v: &[f64]) -> Vec<Complex64> {
        let dims = m.extended_dims().to_vec();
        let total: usize = dims.iter().product();
        let ch = m.channels();
        let mut out = vec![Complex64::new(0.0, 0.0); ch];
        for lin in 0..total {
            let mut rem = lin;
            let mut w = 1.0;
            for p in (0..dims.len()).rev() {
                let idx = rem % dims[p];
                rem /= dims[p];
                let node = idx as f64 + 1.0 - m.extension() as f64;
                w *= basis_value(m.order(), v[p] - node);
            }
            for c in 0..ch {
                out[c] += m.coefficients()[lin * ch + c] * w;
            }
        }
        out
    }

    #[test]
    fn tensor_evaluation_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = grid3([5, 4, 6]);
        let atoms = random_atoms(g.atom_count() * 2, &mut rng);
        for n in 0..=3 {
            let m = SplineModel::prefilter(&atoms, 2, &g, n).unwrap();
            let trials = if n == 2 { 1000 } else { 200 };
            for _ in 0..trials {
                let v: Vec<f64> = g
                    .axes()
                    .iter()
                    .map(|a| rng.random_range(1.0..=a.count() as f64))
                    .collect();
                let fast = m.evaluate(&v).unwrap();
                let slow = naive_sum(&m, &v);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).norm() < 1e-12, "order {n} at {v:?}");
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = grid3([5, 6, 4]);
        let atoms = random_atoms(g.atom_count() * 3, &mut rng);
        let h = 1e-5;
        for n in 2..=3 {
            let m = SplineModel::prefilter(&atoms, 3, &g, n).unwrap();
            for _ in 0..100 {
                let v: Vec<f64> = g
                    .axes()
                    .iter()
                    .map(|a| rng.random_range(1.0 + 2.0 * h..a.count() as f64 - 2.0 * h))
                    .collect();
                let (val, grad) = m.evaluate_with_gradient(&v).unwrap();
                let plain = m.evaluate(&v).unwrap();
                assert_eq!(val, plain);
                for p in 0..3 {
                    let mut vp = v.clone();
                    let mut vm = v.clone();
                    vp[p] += h;
                    vm[p] -= h;
                    let (fp, fm) = (m.evaluate(&vp).unwrap(), m.evaluate(&vm).unwrap());
                    for c in 0..3 {
                        let fd = (fp[c] - fm[c]) / (2.0 * h);
                        let scale = grad[p][c].norm().max(1e-3);
                        assert!((fd - grad[p][c]).norm() / scale <= 1e-5, "order {n} axis {p}");
                    }
                }
            }
        }
    }

    #[test]
    fn first_derivative_continuous_across_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let atoms = random_atoms(9, &mut rng);
        let g = line_grid(9);
        for n in 2..=3 {
            let m = SplineModel::prefilter(&atoms, 1, &g, n).unwrap();
            // knots sit at half-integers for even order, integers for odd order
            let knots: Vec<f64> = if n == 2 {
                (1..8).map(|k| k as f64 + 0.5).collect()
            } else {
                (2..9).map(|k| k as f64).collect()
            };
            let h = 1e-7;
            for x in knots {
                let f = |t: f64| m.evaluate(&[t]).unwrap()[0];
                let left = (f(x) - f(x - h)) / h;
                let right = (f(x + h) - f(x)) / h;
                assert!((left - right).norm() < 1e-6, "order {n} knot {x}");
            }
        }
    }

    #[test]
    fn domain_is_enforced() {
        let g = line_grid(4);
        let atoms = vec![Complex64::new(1.0, 0.0); 4];
        let m = SplineModel::prefilter(&atoms, 1, &g, 2).unwrap();
        assert!(matches!(m.evaluate(&[0.99]), Err(Error::OutOfDomain { .. })));
        assert!(matches!(m.evaluate(&[4.01]), Err(Error::OutOfDomain { .. })));
        assert!(matches!(m.evaluate(&[1.0, 1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(SplineModel::prefilter(&atoms[..3], 1, &g, 2).is_err());
    }
}
