//! Parameter grids and the mapping between grid coordinates and physical values.
//!
//! Grid coordinates are 1-based: axis `p` with `K` nodes maps `[1, K]` onto
//! `[min, max]`, either affinely or affinely in log space.

use std::fmt;
use std::io::BufRead;

use crate::error::{Error, Result};

/// Largest distance outside `[1, K]` at which the mapping is still evaluated
/// (the one-node boundary extension of higher-order splines).
pub const MAX_EXTENSION: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Spacing {
    Linear,
    Log,
}

impl Spacing {
    pub fn code(self) -> u8 {
        match self {
            Spacing::Linear => 0,
            Spacing::Log => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Spacing::Linear),
            1 => Ok(Spacing::Log),
            other => Err(Error::Parse(format!("unknown spacing code {other}"))),
        }
    }
}

impl fmt::Display for Spacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Spacing::Linear => "linear",
            Spacing::Log => "log",
        })
    }
}

impl std::str::FromStr for Spacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "lin" => Ok(Spacing::Linear),
            "log" => Ok(Spacing::Log),
            other => Err(Error::Parse(format!("unknown spacing {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterAxis {
    name: String,
    min: f64,
    max: f64,
    count: usize,
    spacing: Spacing,
}

impl ParameterAxis {
    pub fn new(name: impl Into<String>, spacing: Spacing, min: f64, max: f64, count: usize) -> Result<Self> {
        let name = name.into();
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::InvalidGrid(format!(
                "axis {name}: need min < max, got [{min}, {max}]"
            )));
        }
        if spacing == Spacing::Log && min <= 0.0 {
            return Err(Error::InvalidGrid(format!("axis {name}: log spacing needs min > 0")));
        }
        if count < 2 {
            return Err(Error::InvalidGrid(format!(
                "axis {name}: need at least 2 nodes, got {count}"
            )));
        }
        if name.len() > u8::MAX as usize {
            return Err(Error::InvalidGrid("axis name longer than 255 bytes".into()));
        }
        Ok(Self {
            name,
            min,
            max,
            count,
            spacing,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// Same range and spacing with a different node count.
    pub fn with_count(&self, count: usize) -> Result<Self> {
        Self::new(self.name.clone(), self.spacing, self.min, self.max, count)
    }

    /// Physical value at grid coordinate `v`; exact at both end nodes.
    pub fn to_physical(&self, v: f64) -> f64 {
        let k = self.count as f64;
        if v == 1.0 {
            return self.min;
        }
        if v == k {
            return self.max;
        }
        let t = (v - 1.0) / (k - 1.0);
        match self.spacing {
            Spacing::Linear => self.min + t * (self.max - self.min),
            Spacing::Log => (self.min.ln() + t * (self.max.ln() - self.min.ln())).exp(),
        }
    }

    /// Grid coordinate of a physical value (no domain check).
    pub fn to_grid(&self, theta: f64) -> f64 {
        if theta == self.min {
            return 1.0;
        }
        if theta == self.max {
            return self.count as f64;
        }
        let t = match self.spacing {
            Spacing::Linear => (theta - self.min) / (self.max - self.min),
            Spacing::Log => (theta.ln() - self.min.ln()) / (self.max.ln() - self.min.ln()),
        };
        1.0 + t * (self.count as f64 - 1.0)
    }

    /// Parses `axis NAME SPACING MIN MAX K`.
    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "axis" {
            return Err(Error::Parse(format!(
                "expected `axis NAME SPACING MIN MAX K`, got {line:?}"
            )));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
        let count = fields[5]
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("{:?}: {e}", fields[5])))?;
        Self::new(fields[1], fields[2].parse()?, num(fields[3])?, num(fields[4])?, count)
    }
}

impl fmt::Display for ParameterAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "axis {} {} {} {} {}",
            self.name, self.spacing, self.min, self.max, self.count
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGrid {
    axes: Vec<ParameterAxis>,
}

impl ParameterGrid {
    pub fn new(axes: Vec<ParameterAxis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one axis".into()));
        }
        if axes.len() > u16::MAX as usize {
            return Err(Error::InvalidGrid("too many axes".into()));
        }
        Ok(Self { axes })
    }

    /// T1 in [5, 6000] ms (log), T2 in [5, 2000] ms (log), B1 in [0.5, 1.5] (linear).
    pub fn relaxometry(k_t1: usize, k_t2: usize, k_b1: usize) -> Result<Self> {
        Self::new(vec![
            ParameterAxis::new("T1", Spacing::Log, 5.0, 6000.0, k_t1)?,
            ParameterAxis::new("T2", Spacing::Log, 5.0, 2000.0, k_t2)?,
            ParameterAxis::new("B1", Spacing::Linear, 0.5, 1.5, k_b1)?,
        ])
    }

    /// Reads `axis ...` lines; blank lines and `#` comments are skipped.
    pub fn from_config<R: BufRead>(reader: R) -> Result<Self> {
        let mut axes = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            axes.push(ParameterAxis::parse_line(line)?);
        }
        Self::new(axes)
    }

    pub fn to_config(&self) -> String {
        self.axes.iter().map(|a| format!("{a}\n")).collect()
    }

    pub fn axes(&self) -> &[ParameterAxis] {
        &self.axes
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.count).collect()
    }

    pub fn atom_count(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.name.eq_ignore_ascii_case(name))
    }

    pub fn with_counts(&self, counts: &[usize]) -> Result<Self> {
        if counts.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: counts.len(),
            });
        }
        Self::new(
            self.axes
                .iter()
                .zip(counts)
                .map(|(a, &k)| a.with_count(k))
                .collect::<Result<_>>()?,
        )
    }

    /// Physical parameters at grid coordinate `v`, which may lie up to
    /// [`MAX_EXTENSION`] outside the node range.
    pub fn grid_to_param(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        self.axes
            .iter()
            .zip(v)
            .enumerate()
            .map(|(p, (axis, &vp))| {
                let k = axis.count as f64;
                if !(vp >= 1.0 - MAX_EXTENSION && vp <= k + MAX_EXTENSION) {
                    return Err(Error::OutOfDomain { axis: p, value: vp });
                }
                Ok(axis.to_physical(vp))
            })
            .collect()
    }

    pub fn param_to_grid(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_len(theta.len())?;
        self.axes
            .iter()
            .zip(theta)
            .enumerate()
            .map(|(p, (axis, &t))| {
                if !(t >= axis.min && t <= axis.max) {
                    return Err(Error::OutOfDomain { axis: p, value: t });
                }
                Ok(axis.to_grid(t).clamp(1.0, axis.count as f64))
            })
            .collect()
    }

    /// Whether `v` lies inside the node box `[1, K_p]`.
    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dims() && self.axes.iter().zip(v).all(|(a, &x)| x >= 1.0 && x <= a.count as f64)
    }

    /// Canonical (row-major, last axis fastest) position of a 1-based index vector.
    pub fn linear_index(&self, k: &[usize]) -> usize {
        self.axes
            .iter()
            .zip(k)
            .fold(0, |acc, (a, &kp)| acc * a.count + (kp - 1))
    }

    /// Inverse of [`ParameterGrid::linear_index`].
    pub fn multi_index(&self, mut linear: usize) -> Vec<usize> {
        let mut k = vec![0; self.dims()];
        for (p, axis) in self.axes.iter().enumerate().rev() {
            k[p] = linear % axis.count + 1;
            linear /= axis.count;
        }
        k
    }

    /// All 1-based index vectors in canonical atom order.
    pub fn iter_indices(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.atom_count()).map(move |i| self.multi_index(i))
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got,
            });
        }
        Ok(())
    }
}
