//! Matching against a dictionary too large to materialise, by a
//! coarse-to-fine ascent of the matching score over its node lattice.
//!
//! Atoms are simulated on demand and cached per group of voxels that share a
//! starting node. Each stride climbs to a local maximum over all neighbours
//! at that stride; the final stride is 1, so the result is a node whose score
//! is not exceeded by any of its immediate neighbours.

use std::collections::{BTreeMap, HashMap};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::dict::Basis;
use crate::error::{Error, Result};
use crate::estimate::VoxelEstimate;
use crate::model::SignalModel;
use crate::pgrid::ParameterGrid;

const STRIDES: [usize; 6] = [1024, 256, 64, 16, 4, 1];

struct AtomCache<'a, M: ?Sized> {
    grid: &'a ParameterGrid,
    model: &'a M,
    basis: Option<&'a Basis>,
    atoms: HashMap<usize, (Vec<Complex64>, f64)>,
    simulations: usize,
}

/// Canonical index of a 0-based lattice node.
fn key(grid: &ParameterGrid, node: &[usize]) -> usize {
    let one_based: Vec<usize> = node.iter().map(|k| k + 1).collect();
    grid.linear_index(&one_based)
}

impl<M: SignalModel + ?Sized> AtomCache<'_, M> {
    fn get(&mut self, node: &[usize]) -> Result<&(Vec<Complex64>, f64)> {
        let key = key(self.grid, node);
        if !self.atoms.contains_key(&key) {
            let v: Vec<f64> = node.iter().map(|&k| (k + 1) as f64).collect();
            let s = self.model.simulate(&self.grid.grid_to_param(&v)?)?;
            let a = match self.basis {
                Some(b) => b.project(&s)?,
                None => s,
            };
            let n = a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            self.atoms.insert(key, (a, n));
            self.simulations += 1;
        }
        Ok(&self.atoms[&key])
    }

    /// `(score, inner product, norm)`; zero-norm atoms score -inf.
    fn score(&mut self, node: &[usize], m: &[Complex64]) -> Result<(f64, Complex64, f64)> {
        let (a, n) = self.get(node)?;
        if *n == 0.0 {
            return Ok((f64::NEG_INFINITY, Complex64::default(), 0.0));
        }
        let ip: Complex64 = a.iter().zip(m).map(|(x, y)| x.conj() * y).sum();
        Ok((ip.norm() / n, ip, *n))
    }
}

/// Offsets in `{-1, 0, 1}^P` except the origin, in lexicographic order.
fn unit_offsets(dims: usize) -> Vec<Vec<i64>> {
    let total = 3usize.pow(dims as u32);
    (0..total)
        .map(|mut c| {
            let mut o = vec![0i64; dims];
            for d in (0..dims).rev() {
                o[d] = (c % 3) as i64 - 1;
                c /= 3;
            }
            o
        })
        .filter(|o| o.iter().any(|&x| x != 0))
        .collect()
}

/// Steepest ascent over `offsets` scaled by `stride` until no neighbour
/// improves the score; returns the number of moves.
fn climb<M: SignalModel + ?Sized>(
    cache: &mut AtomCache<'_, M>,
    m: &[Complex64],
    node: &mut Vec<usize>,
    best: &mut (f64, Complex64, f64),
    offsets: &[Vec<i64>],
    stride: usize,
) -> Result<usize> {
    let counts = cache.grid.counts();
    let mut moves = 0;
    loop {
        let mut candidate: Option<(Vec<usize>, (f64, Complex64, f64))> = None;
        for o in offsets {
            let next: Option<Vec<usize>> = node
                .iter()
                .zip(o)
                .zip(&counts)
                .map(|((&k, &d), &c)| {
                    let j = k as i64 + d * stride as i64;
                    (0..c as i64).contains(&j).then_some(j as usize)
                })
                .collect();
            let Some(next) = next else { continue };
            let s = cache.score(&next, m)?;
            let current = candidate.as_ref().map_or(best.0, |c| c.1 .0);
            if s.0 > current {
                candidate = Some((next, s));
            }
        }
        match candidate {
            Some((next, s)) => {
                *node = next;
                *best = s;
                moves += 1;
            }
            None => return Ok(moves),
        }
    }
}

fn ascend<M: SignalModel + ?Sized>(
    cache: &mut AtomCache<'_, M>,
    m: &[Complex64],
    start: &[usize],
) -> Result<(Vec<usize>, Complex64, f64, usize)> {
    let counts = cache.grid.counts();
    let offsets = unit_offsets(counts.len());
    let largest = counts.iter().copied().max().unwrap_or(1);
    let mut node = start.to_vec();
    let mut best = cache.score(&node, m)?;
    let mut moves = 0;
    for &stride in STRIDES.iter().filter(|&&s| s == 1 || 2 * s < largest) {
        moves += climb(cache, m, &mut node, &mut best, &offsets, stride)?;
    }
    let (_, ip, n) = best;
    if n == 0.0 {
        return Err(Error::DegenerateAtom);
    }
    let rho = ip / (n * n);
    let (a, _) = cache.get(&node)?;
    let residual = a
        .iter()
        .zip(m)
        .map(|(x, y)| (y - rho * x).norm_sqr())
        .sum::<f64>()
        .sqrt();
    Ok((node, rho, residual, moves))
}

/// Nearest lattice node (0-based) to the physical point `theta`.
pub fn nearest_node(grid: &ParameterGrid, theta: &[f64]) -> Result<Vec<usize>> {
    let v = grid.param_to_grid(theta)?;
    Ok(v.iter()
        .zip(grid.counts())
        .map(|(&x, k)| (x.round() as usize).clamp(1, k) - 1)
        .collect())
}

/// Result of [`lattice_match`].
#[derive(Debug, Clone)]
pub struct LatticeMatch {
    pub estimates: Vec<VoxelEstimate>,
    /// Distinct atoms simulated.
    pub simulations: usize,
}

/// Matches each raw signal (`count x len`) by ascent on the lattice of `grid`
/// starting at `starts[i]` (physical coordinates). Voxels sharing a starting
/// node share an atom cache; groups run in parallel and results are
/// independent of the worker count.
pub fn lattice_match<M: SignalModel + ?Sized>(
    grid: &ParameterGrid,
    model: &M,
    basis: Option<&Basis>,
    signals: &[Complex64],
    len: usize,
    starts: &[Vec<f64>],
) -> Result<LatticeMatch> {
    if model.signal_length() != len || signals.len() != len * starts.len() {
        return Err(Error::DimensionMismatch {
            expected: len * starts.len(),
            got: signals.len(),
        });
    }
    let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, theta) in starts.iter().enumerate() {
        let node = nearest_node(grid, theta)?;
        groups
            .entry(key(grid, &node))
            .or_insert_with(|| (node, Vec::new()))
            .1
            .push(i);
    }
    let groups: Vec<(Vec<usize>, Vec<usize>)> = groups.into_values().collect();
    let results: Vec<(Vec<(usize, VoxelEstimate)>, usize)> = groups
        .par_iter()
        .map(|(start, voxels)| {
            let mut cache = AtomCache {
                grid,
                model,
                basis,
                atoms: HashMap::new(),
                simulations: 0,
            };
            let mut out = Vec::with_capacity(voxels.len());
            for &i in voxels {
                let raw = &signals[i * len..(i + 1) * len];
                let m = match basis {
                    Some(b) => b.project(raw)?,
                    None => raw.to_vec(),
                };
                if m.iter().all(|x| x.norm_sqr() == 0.0) {
                    return Err(Error::InvalidParams(format!("voxel {i} has an all-zero signal")));
                }
                let (node, rho, residual, moves) = ascend(&mut cache, &m, start)?;
                let v_hat: Vec<f64> = node.iter().map(|&k| (k + 1) as f64).collect();
                out.push((
                    i,
                    VoxelEstimate {
                        theta_hat: grid.grid_to_param(&v_hat)?,
                        v_hat,
                        rho_hat: rho,
                        residual_norm: residual,
                        iterations: moves,
                        converged: true,
                        zero_signal: false,
                    },
                ));
            }
            Ok((out, cache.simulations))
        })
        .collect::<Result<_>>()?;
    let mut estimates: Vec<Option<VoxelEstimate>> = vec![None; starts.len()];
    let mut simulations = 0;
    for (group, sims) in results {
        simulations += sims;
        for (i, e) in group {
            estimates[i] = Some(e);
        }
    }
    Ok(LatticeMatch {
        estimates: estimates
            .into_iter()
            .map(|e| e.expect("every voxel is in a group"))
            .collect(),
        simulations,
    })
}
