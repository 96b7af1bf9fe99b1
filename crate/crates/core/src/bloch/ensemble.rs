use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Time-bandwidth product of the modelled excitation pulse.
pub const DEFAULT_TIME_BANDWIDTH: f64 = 3.0;
pub const DEFAULT_SPIN_COUNT: usize = 200;

/// Discretized spin population of one voxel.
///
/// Spin `i` sits at `slice_offsets[i]` (units of the slice FWHM), is excited
/// with relative efficiency `flip_scale[i]` and picks up `dephase_angles[i]`
/// from the spoiler gradient in every TR. Dephasing is linear in the spin
/// index, which mimics a slice-direction spoiler that winds one full cycle
/// across the simulated extent.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinEnsemble {
    slice_offsets: Vec<f64>,
    flip_scale: Vec<f64>,
    dephase_angles: Vec<f64>,
    // cos/sin of dephase_angles
    spoil_rotation: Vec<(f64, f64)>,
    // standard Cauchy quantiles, scaled by 1/T2' at simulation time
    cauchy_offsets: Vec<f64>,
}

impl SpinEnsemble {
    pub fn new(slice_offsets: Vec<f64>, flip_scale: Vec<f64>, dephase_angles: Vec<f64>) -> Result<Self> {
        let n = slice_offsets.len();
        if n == 0 {
            return Err(Error::InvalidParams("spin ensemble is empty".into()));
        }
        if flip_scale.len() != n || dephase_angles.len() != n {
            return Err(Error::InvalidParams("spin ensemble field lengths differ".into()));
        }
        if flip_scale.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidParams("flip_scale outside [0, 1]".into()));
        }
        let spoil_rotation = dephase_angles.iter().map(|a| (a.cos(), a.sin())).collect();
        // golden-ratio permutation decorrelates the frequency offset from slice position
        let golden = 0.618_033_988_749_894_9_f64;
        let cauchy_offsets = (0..n)
            .map(|i| {
                let u = ((i as f64 + 0.5) * golden).fract();
                (PI * (u - 0.5)).tan()
            })
            .collect();
        Ok(Self {
            slice_offsets,
            flip_scale,
            dephase_angles,
            spoil_rotation,
            cauchy_offsets,
        })
    }

    /// `n` spins spread uniformly over twice the slice width, excited according
    /// to the small-tip profile of a truncated-sinc pulse.
    pub fn slice_profile(n: usize, time_bandwidth: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParams("spin ensemble is empty".into()));
        }
        let offsets: Vec<f64> = (0..n).map(|i| -1.0 + (i as f64 + 0.5) * 2.0 / n as f64).collect();
        let raw: Vec<f64> = offsets
            .iter()
            .map(|&u| sinc_pulse_response(u, time_bandwidth))
            .collect();
        let peak = profile_peak(time_bandwidth);
        let scale = raw.iter().map(|r| (r / peak).clamp(0.0, 1.0)).collect();
        Self::new(offsets, scale, uniform_dephasing(n))
    }

    /// Default ensemble: slice profile with the default pulse and spin count.
    pub fn standard() -> Self {
        Self::slice_profile(DEFAULT_SPIN_COUNT, DEFAULT_TIME_BANDWIDTH).expect("valid default ensemble")
    }

    /// `n` spins with perfect excitation and uniform spoiling.
    pub fn ideal(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParams("spin ensemble is empty".into()));
        }
        Self::new(vec![0.0; n], vec![1.0; n], uniform_dephasing(n))
    }

    pub fn len(&self) -> usize {
        self.slice_offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slice_offsets.is_empty()
    }

    pub fn slice_offsets(&self) -> &[f64] {
        &self.slice_offsets
    }

    pub fn flip_scale(&self) -> &[f64] {
        &self.flip_scale
    }

    pub fn dephase_angles(&self) -> &[f64] {
        &self.dephase_angles
    }

    pub(crate) fn spoil_rotation(&self) -> &[(f64, f64)] {
        &self.spoil_rotation
    }

    pub(crate) fn cauchy_offsets(&self) -> &[f64] {
        &self.cauchy_offsets
    }

    pub(crate) fn feed_digest(&self, hasher: &mut impl sha2::Digest) {
        hasher.update((self.len() as u64).to_le_bytes());
        for v in self
            .slice_offsets
            .iter()
            .chain(&self.flip_scale)
            .chain(&self.dephase_angles)
        {
            hasher.update(v.to_le_bytes());
        }
    }
}

fn uniform_dephasing(n: usize) -> Vec<f64> {
    (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Small-tip response at offset `u` (slice widths) of a sinc envelope truncated
/// to `time_bandwidth` lobes, by composite Simpson quadrature over the pulse.
fn sinc_pulse_response(u: f64, time_bandwidth: f64) -> f64 {
    const PANELS: usize = 512;
    let h = 1.0 / PANELS as f64;
    let integrand = |k: usize| {
        let tau = -0.5 + k as f64 * h;
        sinc(time_bandwidth * tau) * (2.0 * PI * u * time_bandwidth * tau).cos()
    };
    let mut acc = integrand(0) + integrand(PANELS);
    for k in 1..PANELS {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * integrand(k);
    }
    acc * h / 3.0
}

fn profile_peak(time_bandwidth: f64) -> f64 {
    (0..=400)
        .map(|i| sinc_pulse_response(i as f64 / 400.0, time_bandwidth))
        .fold(f64::MIN, f64::max)
}
