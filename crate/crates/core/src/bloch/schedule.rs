use std::f64::consts::PI;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const DEFAULT_INVERSION_TIME: f64 = 40.0;
pub const DEFAULT_ECHO_TIME: f64 = 2.5;
pub const DEFAULT_TRAIN_DELAY: f64 = 5000.0;

/// Flip-angle / repetition-time train of an inversion-prepared FISP acquisition.
///
/// All times are in milliseconds, flip angles in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSchedule {
    flip_angles: Vec<f64>,
    repetition_times: Vec<f64>,
    inversion_time: f64,
    echo_time: f64,
    train_delay: f64,
    inversion_enabled: bool,
}

impl AcquisitionSchedule {
    pub fn new(
        flip_angles: Vec<f64>,
        repetition_times: Vec<f64>,
        inversion_time: f64,
        echo_time: f64,
        train_delay: f64,
        inversion_enabled: bool,
    ) -> Result<Self> {
        if flip_angles.is_empty() {
            return Err(Error::InvalidSchedule("schedule has no excitations".into()));
        }
        if flip_angles.len() != repetition_times.len() {
            return Err(Error::InvalidSchedule(format!(
                "{} flip angles but {} repetition times",
                flip_angles.len(),
                repetition_times.len()
            )));
        }
        if !(echo_time > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "echo time {echo_time} must be positive"
            )));
        }
        if !(inversion_time >= 0.0) || !(train_delay >= 0.0) {
            return Err(Error::InvalidSchedule("negative inversion time or train delay".into()));
        }
        for (i, (&fa, &tr)) in flip_angles.iter().zip(&repetition_times).enumerate() {
            if !(0.0..=180.0).contains(&fa) {
                return Err(Error::InvalidSchedule(format!(
                    "flip angle {fa} at row {i} outside [0, 180]"
                )));
            }
            if !(tr > echo_time) {
                return Err(Error::InvalidSchedule(format!(
                    "repetition time {tr} at row {i} does not exceed echo time {echo_time}"
                )));
            }
        }
        Ok(Self {
            flip_angles,
            repetition_times,
            inversion_time,
            echo_time,
            train_delay,
            inversion_enabled,
        })
    }

    /// Sinusoidal-lobe flip train with smoothly varying TR in [11.5, 14.5] ms,
    /// modelled on published FISP fingerprinting schedules.
    pub fn fisp_train(len: usize) -> Self {
        const PEAKS: [f64; 4] = [70.0, 40.0, 60.0, 20.0];
        const FLOOR: f64 = 5.0;
        let len = len.max(1);
        let lobe = len.div_ceil(PEAKS.len()).max(1);
        let mut flips = Vec::with_capacity(len);
        let mut trs = Vec::with_capacity(len);
        for i in 0..len {
            let which = (i / lobe).min(PEAKS.len() - 1);
            let t = (i - which * lobe) as f64 / lobe as f64;
            flips.push(FLOOR + (PEAKS[which] - FLOOR) * (PI * t).sin());
            let u = i as f64 / len as f64;
            let wobble = 0.6 * (2.0 * PI * 3.1 * u).sin() + 0.4 * (2.0 * PI * 7.3 * u + 1.0).sin();
            trs.push(13.0 + 1.5 * wobble);
        }
        Self::new(
            flips,
            trs,
            DEFAULT_INVERSION_TIME,
            DEFAULT_ECHO_TIME,
            DEFAULT_TRAIN_DELAY,
            true,
        )
        .expect("generated schedule is valid")
    }

    /// Reads a `flip_deg,tr_ms` CSV; the remaining timings come from the caller.
    pub fn from_csv<R: BufRead>(
        reader: R,
        inversion_time: f64,
        echo_time: f64,
        train_delay: f64,
        inversion_enabled: bool,
    ) -> Result<Self> {
        let mut flips = Vec::new();
        let mut trs = Vec::new();
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty schedule file".into()))??;
        if header.trim() != "flip_deg,tr_ms" {
            return Err(Error::Parse(format!("unexpected schedule header {header:?}")));
        }
        for (row, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let mut next = |what: &str| -> Result<f64> {
                fields
                    .next()
                    .ok_or_else(|| Error::Parse(format!("row {}: missing {what}", row + 1)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {what}: {e}", row + 1)))
            };
            flips.push(next("flip_deg")?);
            trs.push(next("tr_ms")?);
        }
        Self::new(flips, trs, inversion_time, echo_time, train_delay, inversion_enabled)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "flip_deg,tr_ms")?;
        for (fa, tr) in self.flip_angles.iter().zip(&self.repetition_times) {
            writeln!(w, "{fa},{tr}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.flip_angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flip_angles.is_empty()
    }

    pub fn flip_angles(&self) -> &[f64] {
        &self.flip_angles
    }

    pub fn repetition_times(&self) -> &[f64] {
        &self.repetition_times
    }

    pub fn inversion_time(&self) -> f64 {
        self.inversion_time
    }

    pub fn echo_time(&self) -> f64 {
        self.echo_time
    }

    pub fn train_delay(&self) -> f64 {
        self.train_delay
    }

    pub fn inversion_enabled(&self) -> bool {
        self.inversion_enabled
    }

    pub(crate) fn feed_digest(&self, hasher: &mut impl sha2::Digest) {
        hasher.update((self.len() as u64).to_le_bytes());
        for v in self.flip_angles.iter().chain(&self.repetition_times) {
            hasher.update(v.to_le_bytes());
        }
        for v in [self.inversion_time, self.echo_time, self.train_delay] {
            hasher.update(v.to_le_bytes());
        }
        hasher.update([self.inversion_enabled as u8]);
    }
}
