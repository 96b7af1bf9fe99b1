//! Dictionaries of simulated atoms and their truncated-SVD compression.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::SignalModel;
use crate::pgrid::ParameterGrid;

/// Atoms per parallel QR block; fixed so the result does not depend on the
/// number of worker threads.
const CHUNK: usize = 256;

/// Orthonormal temporal basis `V_L` (M x L) from a truncated SVD.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    signal_length: usize,
    // row-major M x L
    vectors: Vec<Complex64>,
    singular_values: Vec<f64>,
    energy_fraction: Option<f64>,
    rank_deficient: bool,
}

impl Basis {
    /// `vectors` is row-major M x L with orthonormal columns. The energy
    /// fraction is unknown for bases read back from disk.
    pub fn new(
        signal_length: usize,
        vectors: Vec<Complex64>,
        singular_values: Vec<f64>,
        energy_fraction: Option<f64>,
    ) -> Result<Self> {
        let rank = singular_values.len();
        if rank == 0 || vectors.len() != signal_length * rank {
            return Err(Error::DimensionMismatch {
                expected: signal_length * rank.max(1),
                got: vectors.len(),
            });
        }
        let rank_deficient = singular_values[rank - 1] < 1e-12 * singular_values[0];
        Ok(Self {
            signal_length,
            vectors,
            singular_values,
            energy_fraction,
            rank_deficient,
        })
    }

    pub fn signal_length(&self) -> usize {
        self.signal_length
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn vectors(&self) -> &[Complex64] {
        &self.vectors
    }

    /// Column `l` of `V_L`.
    pub fn column(&self, l: usize) -> Vec<Complex64> {
        (0..self.signal_length)
            .map(|t| self.vectors[t * self.rank() + l])
            .collect()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Share of the total atom energy captured by the retained directions.
    pub fn energy_fraction(&self) -> Option<f64> {
        self.energy_fraction
    }

    /// True when the smallest retained singular value is negligible.
    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    /// `V_L^H m`.
    pub fn project(&self, m: &[Complex64]) -> Result<Vec<Complex64>> {
        if m.len() != self.signal_length {
            return Err(Error::DimensionMismatch {
                expected: self.signal_length,
                got: m.len(),
            });
        }
        let l = self.rank();
        let mut out = vec![Complex64::default(); l];
        for (t, &x) in m.iter().enumerate() {
            let row = &self.vectors[t * l..(t + 1) * l];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v.conj() * x;
            }
        }
        Ok(out)
    }

    /// `V_L c`, the signal-space representative of compressed coordinates.
    pub fn expand(&self, c: &[Complex64]) -> Result<Vec<Complex64>> {
        if c.len() != self.rank() {
            return Err(Error::DimensionMismatch {
                expected: self.rank(),
                got: c.len(),
            });
        }
        Ok(self
            .vectors
            .chunks(self.rank())
            .map(|row| row.iter().zip(c).map(|(v, x)| v * x).sum())
            .collect())
    }
}

/// How many singular directions to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rank {
    Fixed(usize),
    /// Smallest L whose energy fraction reaches the given value.
    Energy(f64),
}

/// Atoms on every node of a grid, in canonical order.
#[derive(Debug, Clone)]
pub struct Dictionary {
    grid: ParameterGrid,
    channels: usize,
    atoms: Vec<Complex64>,
    norms: Vec<f64>,
    model_hash: [u8; 32],
    basis: Option<Basis>,
}

impl Dictionary {
    /// `atoms` is row-major `atom_count x channels`. With a basis the atoms
    /// are compressed and `channels` equals its rank.
    pub fn from_parts(
        grid: ParameterGrid,
        channels: usize,
        atoms: Vec<Complex64>,
        model_hash: [u8; 32],
        basis: Option<Basis>,
    ) -> Result<Self> {
        let norms = atoms.chunks(channels.max(1)).map(norm).collect();
        Self::with_norms(grid, channels, atoms, norms, model_hash, basis)
    }

    /// Like [`Dictionary::from_parts`] with precomputed atom norms.
    pub fn with_norms(
        grid: ParameterGrid,
        channels: usize,
        atoms: Vec<Complex64>,
        norms: Vec<f64>,
        model_hash: [u8; 32],
        basis: Option<Basis>,
    ) -> Result<Self> {
        if channels == 0 || atoms.len() != grid.atom_count() * channels {
            return Err(Error::DimensionMismatch {
                expected: grid.atom_count() * channels,
                got: atoms.len(),
            });
        }
        if norms.len() != grid.atom_count() {
            return Err(Error::DimensionMismatch {
                expected: grid.atom_count(),
                got: norms.len(),
            });
        }
        if let Some(b) = &basis {
            if b.rank() != channels {
                return Err(Error::DimensionMismatch {
                    expected: b.rank(),
                    got: channels,
                });
            }
        }
        Ok(Self {
            grid,
            channels,
            atoms,
            norms,
            model_hash,
            basis,
        })
    }

    pub fn grid(&self) -> &ParameterGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// Entries per atom: M uncompressed, L compressed.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Length of the uncompressed signals.
    pub fn signal_length(&self) -> usize {
        self.basis.as_ref().map_or(self.channels, Basis::signal_length)
    }

    pub fn atoms(&self) -> &[Complex64] {
        &self.atoms
    }

    pub fn atom(&self, index: usize) -> &[Complex64] {
        &self.atoms[index * self.channels..(index + 1) * self.channels]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn model_hash(&self) -> &[u8; 32] {
        &self.model_hash
    }

    pub fn basis(&self) -> Option<&Basis> {
        self.basis.as_ref()
    }

    pub fn is_compressed(&self) -> bool {
        self.basis.is_some()
    }

    /// Brings a measured signal into this dictionary's signal space.
    pub fn to_signal_space(&self, m: &[Complex64]) -> Result<Vec<Complex64>> {
        match &self.basis {
            Some(b) => b.project(m),
            None if m.len() == self.channels => Ok(m.to_vec()),
            None => Err(Error::DimensionMismatch {
                expected: self.channels,
                got: m.len(),
            }),
        }
    }

    /// Projects every atom onto `basis`.
    pub fn compress(&self, basis: &Basis) -> Result<Dictionary> {
        if self.is_compressed() {
            return Err(Error::Unsupported("dictionary is already compressed".into()));
        }
        let atoms: Vec<Complex64> = self
            .atoms
            .par_chunks(self.channels)
            .map(|a| basis.project(a))
            .collect::<Result<Vec<_>>>()?
            .concat();
        Dictionary::from_parts(
            self.grid.clone(),
            basis.rank(),
            atoms,
            self.model_hash,
            Some(basis.clone()),
        )
    }
}

fn norm(x: &[Complex64]) -> f64 {
    x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

fn node_params(grid: &ParameterGrid, index: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = grid.multi_index(index).iter().map(|&k| k as f64).collect();
    grid.grid_to_param(&v)
}

/// Simulates one atom per grid node in canonical order.
pub fn generate_dictionary<M: SignalModel + ?Sized>(grid: &ParameterGrid, model: &M) -> Result<Dictionary> {
    let channels = model.signal_length();
    let atoms = simulate_nodes(grid, model, Ok)?;
    Dictionary::from_parts(grid.clone(), channels, atoms, model.fingerprint(), None)
}

/// Like [`generate_dictionary`] but projects each atom onto `basis` as soon as
/// it is simulated, so the uncompressed dictionary is never held in memory.
pub fn generate_compressed<M: SignalModel + ?Sized>(
    grid: &ParameterGrid,
    model: &M,
    basis: &Basis,
) -> Result<Dictionary> {
    if basis.signal_length() != model.signal_length() {
        return Err(Error::DimensionMismatch {
            expected: basis.signal_length(),
            got: model.signal_length(),
        });
    }
    let atoms = simulate_nodes(grid, model, |s| basis.project(&s))?;
    Dictionary::from_parts(
        grid.clone(),
        basis.rank(),
        atoms,
        model.fingerprint(),
        Some(basis.clone()),
    )
}

fn simulate_nodes<M, F>(grid: &ParameterGrid, model: &M, post: F) -> Result<Vec<Complex64>>
where
    M: SignalModel + ?Sized,
    F: Fn(Vec<Complex64>) -> Result<Vec<Complex64>> + Sync,
{
    let parts: Vec<Vec<Complex64>> = (0..grid.atom_count())
        .into_par_iter()
        .map(|i| post(model.simulate(&node_params(grid, i)?)?))
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Top singular directions of the atom matrix along the time dimension.
///
/// The atom matrix is reduced to an M x M triangular factor by a chunked QR
/// whose SVD yields the basis, so memory stays O(M^2) regardless of the
/// number of atoms and small singular values are not squared away.
pub fn svd_truncate(dict: &Dictionary, rank: Rank) -> Result<Basis> {
    if dict.is_compressed() {
        return Err(Error::Unsupported("dictionary is already compressed".into()));
    }
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    svd_from_atoms(dict.atoms(), dict.channels(), rank)
}

fn stacked_r(top: Option<DMatrix<Complex64>>, rows: &[Complex64], m: usize) -> DMatrix<Complex64> {
    let extra = rows.len() / m;
    let head = top.as_ref().map_or(0, |t| t.nrows());
    // rows are conjugated atoms so the right singular vectors span the atoms
    let stacked = DMatrix::from_fn(head + extra, m, |i, j| match &top {
        Some(t) if i < head => t[(i, j)],
        _ => rows[(i - head) * m + j].conj(),
    });
    stacked.qr().r()
}

/// [`svd_truncate`] on a raw row-major `atoms x m` matrix.
pub fn svd_from_atoms(atoms: &[Complex64], m: usize, rank: Rank) -> Result<Basis> {
    if atoms.is_empty() || m == 0 {
        return Err(Error::EmptyDictionary);
    }
    let l = match rank {
        Rank::Fixed(l) if l == 0 || l > m => return Err(Error::InvalidParams(format!("rank {l} outside [1, {m}]"))),
        Rank::Energy(f) if !(f > 0.0 && f <= 1.0) => {
            return Err(Error::InvalidParams(format!("energy fraction {f} outside (0, 1]")))
        }
        _ => None,
    };
    let partial: Vec<DMatrix<Complex64>> = atoms.par_chunks(CHUNK * m).map(|c| stacked_r(None, c, m)).collect();
    let r = partial.into_iter().reduce(|acc, p| {
        let mut flat = Vec::with_capacity(p.nrows() * m);
        for i in 0..p.nrows() {
            flat.extend((0..m).map(|j| p[(i, j)].conj()));
        }
        stacked_r(Some(acc), &flat, m)
    });
    let r = r.ok_or(Error::EmptyDictionary)?;
    let svd = r.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::SingularSystem)?;
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    sigma.resize(m, 0.0);
    let total: f64 = sigma.iter().map(|s| s * s).sum();

    let l = l.unwrap_or(match rank {
        Rank::Fixed(l) => l,
        Rank::Energy(f) => {
            let mut acc = 0.0;
            let mut chosen = m;
            for (i, s) in sigma.iter().enumerate() {
                acc += s * s;
                if acc >= f * total * (1.0 - 1e-12) {
                    chosen = i + 1;
                    break;
                }
            }
            chosen
        }
    });
    if l > k {
        return Err(Error::InvalidParams(format!(
            "rank {l} exceeds the {k} atoms available"
        )));
    }
    let captured: f64 = sigma[..l].iter().map(|s| s * s).sum();
    let mut vectors = Vec::with_capacity(m * l);
    for t in 0..m {
        for &c in &order[..l] {
            vectors.push(v_t[(c, t)].conj());
        }
    }
    let energy = if total > 0.0 { (captured / total).min(1.0) } else { 1.0 };
    Basis::new(m, vectors, sigma[..l].to_vec(), Some(energy))
}

/// `V_L^H m` for the basis of a compressed dictionary.
pub fn project_signal(m: &[Complex64], basis: &Basis) -> Result<Vec<Complex64>> {
    basis.project(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::{AcquisitionSchedule, SpinEnsemble};
    use crate::model::{FispModel, FnModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_atoms(rows: usize, cols: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * cols)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn line_grid(k: usize) -> ParameterGrid {
        ParameterGrid::new(vec![crate::pgrid::ParameterAxis::new(
            "x",
            crate::pgrid::Spacing::Linear,
            0.0,
            1.0,
            k,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn atoms_match_direct_simulation() {
        let grid = ParameterGrid::relaxometry(2, 2, 2).unwrap();
        let model = FispModel::for_grid(
            &grid,
            AcquisitionSchedule::fisp_train(4),
            SpinEnsemble::ideal(8).unwrap(),
        )
        .unwrap();
        let d = generate_dictionary(&grid, &model).unwrap();
        assert_eq!(d.len(), 8);
        assert_eq!(d.channels(), 4);
        for (i, k) in grid.iter_indices().enumerate() {
            let v: Vec<f64> = k.iter().map(|&x| x as f64).collect();
            let s = model.simulate(&grid.grid_to_param(&v).unwrap()).unwrap();
            assert_eq!(d.atom(i), &s[..]);
        }
        assert_eq!(d.model_hash(), &model.digest());
    }

    #[test]
    fn truncation_matches_full_svd() {
        let (n, m, l) = (50, 20, 5);
        let atoms = random_atoms(n, m, 1);
        let basis = svd_from_atoms(&atoms, m, Rank::Fixed(l)).unwrap();

        // columns of D are atoms; left singular vectors live in time
        let d = DMatrix::from_fn(m, n, |t, k| atoms[k * m + t]);
        let svd = d.clone().svd(true, false);
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        for i in 0..l {
            let s = svd.singular_values[idx[i]];
            assert!((basis.singular_values()[i] - s).abs() <= 1e-10 * s);
        }
        // compare projectors, which are unique up to the basis phase
        let u = svd.u.unwrap();
        let ul = DMatrix::from_fn(m, l, |t, c| u[(t, idx[c])]);
        let vl = DMatrix::from_fn(m, l, |t, c| basis.vectors()[t * l + c]);
        let diff = &ul * ul.adjoint() - &vl * vl.adjoint();
        assert!(diff.iter().all(|x| x.norm() <= 1e-10), "{}", diff.norm());
        let all: f64 = svd.singular_values.iter().map(|s| s * s).sum();
        let top: f64 = idx[..l].iter().map(|&i| svd.singular_values[i].powi(2)).sum();
        assert!((basis.energy_fraction().unwrap() - top / all).abs() <= 1e-12);
    }

    #[test]
    fn rank_one_dictionary() {
        let base = random_atoms(1, 12, 2);
        let atoms: Vec<Complex64> = (0..30)
            .flat_map(|k| {
                let c = Complex64::from_polar(1.0 + k as f64, 0.1 * k as f64);
                base.iter().map(move |b| b * c).collect::<Vec<_>>()
            })
            .collect();
        let b = svd_from_atoms(&atoms, 12, Rank::Fixed(1)).unwrap();
        assert!((b.energy_fraction().unwrap() - 1.0).abs() <= 1e-12);
        assert!(!b.rank_deficient());
        let b2 = svd_from_atoms(&atoms, 12, Rank::Fixed(2)).unwrap();
        assert!(b2.rank_deficient());
        assert_eq!(svd_from_atoms(&atoms, 12, Rank::Energy(0.999)).unwrap().rank(), 1);
    }

    #[test]
    fn full_rank_preserves_inner_products() {
        let (n, m) = (40, 10);
        let atoms = random_atoms(n, m, 3);
        let grid = line_grid(n);
        let d = Dictionary::from_parts(grid, m, atoms, [0; 32], None).unwrap();
        let b = svd_truncate(&d, Rank::Fixed(m)).unwrap();
        let c = d.compress(&b).unwrap();
        for i in 0..n {
            for j in 0..n {
                let full: Complex64 = d.atom(i).iter().zip(d.atom(j)).map(|(a, b)| a.conj() * b).sum();
                let comp: Complex64 = c.atom(i).iter().zip(c.atom(j)).map(|(a, b)| a.conj() * b).sum();
                assert!((full - comp).norm() <= 1e-10);
            }
            assert!((d.norms()[i] - c.norms()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_basics() {
        let atoms = random_atoms(30, 8, 4);
        let b = svd_from_atoms(&atoms, 8, Rank::Fixed(3)).unwrap();
        let e1 = b.project(&b.column(0)).unwrap();
        assert!((e1[0] - 1.0).norm() <= 1e-12 && e1[1].norm() <= 1e-12 && e1[2].norm() <= 1e-12);
        assert!(matches!(
            b.project(&[Complex64::default(); 7]),
            Err(Error::DimensionMismatch { expected: 8, got: 7 })
        ));
        // V_L V_L^H is a projection: applying it twice changes nothing
        let m = random_atoms(1, 8, 5);
        let once = b.expand(&b.project(&m).unwrap()).unwrap();
        let twice = b.expand(&b.project(&once).unwrap()).unwrap();
        assert!(once.iter().zip(&twice).all(|(a, b)| (a - b).norm() <= 1e-12));
    }

    #[test]
    fn energy_grows_with_rank() {
        let atoms = random_atoms(60, 15, 6);
        let fractions: Vec<f64> = (1..=15)
            .map(|l| {
                svd_from_atoms(&atoms, 15, Rank::Fixed(l))
                    .unwrap()
                    .energy_fraction()
                    .unwrap()
            })
            .collect();
        assert!(fractions.windows(2).all(|w| w[1] >= w[0]));
        assert!((fractions[14] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn compressed_generation_matches_compressing() {
        let grid = ParameterGrid::relaxometry(4, 3, 2).unwrap();
        let model = FispModel::for_grid(
            &grid,
            AcquisitionSchedule::fisp_train(30),
            SpinEnsemble::ideal(8).unwrap(),
        )
        .unwrap();
        let d = generate_dictionary(&grid, &model).unwrap();
        let b = svd_truncate(&d, Rank::Fixed(6)).unwrap();
        let direct = generate_compressed(&grid, &model, &b).unwrap();
        let after = d.compress(&b).unwrap();
        assert_eq!(direct.atoms(), after.atoms());
        assert!(d.compress(&b).unwrap().compress(&b).is_err());
    }

    #[test]
    fn fixed_chunking_is_thread_independent() {
        let atoms = random_atoms(1000, 6, 7);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| svd_from_atoms(&atoms, 6, Rank::Fixed(3)).unwrap());
        let b = four.install(|| svd_from_atoms(&atoms, 6, Rank::Fixed(3)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_shapes() {
        let grid = line_grid(3);
        assert!(Dictionary::from_parts(grid.clone(), 2, vec![Complex64::default(); 5], [0; 32], None).is_err());
        let model = FnModel::new(2, |_: &[f64]| vec![Complex64::new(1.0, 0.0); 2]);
        let d = generate_dictionary(&grid, &model).unwrap();
        assert!(svd_truncate(&d, Rank::Fixed(3)).is_err());
        assert!(svd_truncate(&d, Rank::Energy(1.5)).is_err());
    }
}
