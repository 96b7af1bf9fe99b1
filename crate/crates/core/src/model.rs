//! Signal models addressed by physical parameter vectors in grid-axis order.

use std::str::FromStr;

use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::bloch::{simulate_signal_unordered, AcquisitionSchedule, SpinEnsemble, TissueParams};
use crate::error::{Error, Result};
use crate::pgrid::ParameterGrid;

/// Anything that maps a physical parameter vector to a complex signal.
pub trait SignalModel: Sync {
    fn signal_length(&self) -> usize;

    fn simulate(&self, theta: &[f64]) -> Result<Vec<Complex64>>;

    /// Identifies the model configuration; zero when not tracked.
    fn fingerprint(&self) -> [u8; 32] {
        [0; 32]
    }
}

impl<T: SignalModel + ?Sized> SignalModel for &T {
    fn signal_length(&self) -> usize {
        (**self).signal_length()
    }

    fn simulate(&self, theta: &[f64]) -> Result<Vec<Complex64>> {
        (**self).simulate(theta)
    }

    fn fingerprint(&self) -> [u8; 32] {
        (**self).fingerprint()
    }
}

/// Adapts a closure into a [`SignalModel`].
pub struct FnModel<F> {
    len: usize,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&[f64]) -> Vec<Complex64> + Sync,
{
    pub fn new(len: usize, f: F) -> Self {
        Self { len, f }
    }
}

impl<F> SignalModel for FnModel<F>
where
    F: Fn(&[f64]) -> Vec<Complex64> + Sync,
{
    fn signal_length(&self) -> usize {
        self.len
    }

    fn simulate(&self, theta: &[f64]) -> Result<Vec<Complex64>> {
        Ok((self.f)(theta))
    }
}

/// Which tissue parameter a grid axis controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TissueRole {
    T1,
    T2,
    B1,
    DeltaOmega0,
    T2Prime,
}

impl FromStr for TissueRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Self::T1),
            "t2" => Ok(Self::T2),
            "b1" | "b1+" | "b1plus" => Ok(Self::B1),
            "dw0" | "domega0" | "delta_omega0" | "off_resonance" => Ok(Self::DeltaOmega0),
            "t2p" | "t2prime" | "t2_prime" | "t2'" => Ok(Self::T2Prime),
            other => Err(Error::Parse(format!("axis {other:?} is not a tissue parameter"))),
        }
    }
}

/// Bloch-simulated FISP signal for grids whose axes name tissue parameters.
#[derive(Debug, Clone)]
pub struct FispModel {
    schedule: AcquisitionSchedule,
    ensemble: SpinEnsemble,
    roles: Vec<TissueRole>,
    base: TissueParams,
}

impl FispModel {
    /// Parameters not covered by `roles` are taken from `base`.
    pub fn new(
        schedule: AcquisitionSchedule,
        ensemble: SpinEnsemble,
        roles: Vec<TissueRole>,
        base: TissueParams,
    ) -> Self {
        Self {
            schedule,
            ensemble,
            roles,
            base,
        }
    }

    /// Roles from the axis names of `grid`; absent parameters default to
    /// T1 = 1000 ms, T2 = 100 ms, B1 = 1.
    pub fn for_grid(grid: &ParameterGrid, schedule: AcquisitionSchedule, ensemble: SpinEnsemble) -> Result<Self> {
        let roles = grid
            .axes()
            .iter()
            .map(|a| a.name().parse())
            .collect::<Result<Vec<TissueRole>>>()?;
        Ok(Self::new(
            schedule,
            ensemble,
            roles,
            TissueParams::new(1000.0, 100.0, 1.0),
        ))
    }

    pub fn schedule(&self) -> &AcquisitionSchedule {
        &self.schedule
    }

    pub fn ensemble(&self) -> &SpinEnsemble {
        &self.ensemble
    }

    pub fn roles(&self) -> &[TissueRole] {
        &self.roles
    }

    pub fn tissue(&self, theta: &[f64]) -> Result<TissueParams> {
        if theta.len() != self.roles.len() {
            return Err(Error::DimensionMismatch {
                expected: self.roles.len(),
                got: theta.len(),
            });
        }
        let mut t = self.base;
        for (role, &v) in self.roles.iter().zip(theta) {
            match role {
                TissueRole::T1 => t.t1 = v,
                TissueRole::T2 => t.t2 = v,
                TissueRole::B1 => t.b1 = v,
                TissueRole::DeltaOmega0 => t.delta_omega0 = Some(v),
                TissueRole::T2Prime => t.t2_prime = Some(v),
            }
        }
        Ok(t)
    }

    /// SHA-256 over the schedule, ensemble and parameter layout.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.schedule.feed_digest(&mut h);
        self.ensemble.feed_digest(&mut h);
        for r in &self.roles {
            h.update([*r as u8]);
        }
        h.finalize().into()
    }
}

impl SignalModel for FispModel {
    fn signal_length(&self) -> usize {
        self.schedule.len()
    }

    fn simulate(&self, theta: &[f64]) -> Result<Vec<Complex64>> {
        simulate_signal_unordered(&self.tissue(theta)?, &self.schedule, &self.ensemble)
    }

    fn fingerprint(&self) -> [u8; 32] {
        self.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_follow_axis_names() {
        let g = ParameterGrid::relaxometry(3, 3, 3).unwrap();
        let m = FispModel::for_grid(&g, AcquisitionSchedule::fisp_train(10), SpinEnsemble::ideal(4).unwrap()).unwrap();
        assert_eq!(m.roles(), &[TissueRole::T1, TissueRole::T2, TissueRole::B1]);
        let t = m.tissue(&[800.0, 60.0, 0.9]).unwrap();
        assert_eq!((t.t1, t.t2, t.b1), (800.0, 60.0, 0.9));
        assert!(m.tissue(&[1.0]).is_err());
        assert_eq!(m.signal_length(), 10);
    }

    #[test]
    fn digest_tracks_schedule() {
        let g = ParameterGrid::relaxometry(3, 3, 3).unwrap();
        let e = SpinEnsemble::ideal(4).unwrap();
        let a = FispModel::for_grid(&g, AcquisitionSchedule::fisp_train(10), e.clone()).unwrap();
        let b = FispModel::for_grid(&g, AcquisitionSchedule::fisp_train(11), e).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
    }
}
