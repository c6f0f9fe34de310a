//! Spatio-temporal feature grid, interaction-field geometry, and the
//! differentiable bilinear sampler (pure reference functions; the tape ops in
//! [`crate::tensor`] share the same coordinate conventions).
//!
//! Coordinates are 0-based: temporal t in [0, T-1], spatial n in [0, N-1].
//! The spatial axis is assumed ordered by person coordinate before grid
//! construction, so slot index doubles as the spatial coordinate.

use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The T x N grid of per-person feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureGrid<S: Scalar> {
    frames: usize,
    persons: usize,
    channels: usize,
    data: Tensor<S>,
    /// Optional presence flags (one per (t, n)); absent persons are
    /// zero-feature slots excluded from the spatial max-pool.
    presence: Option<Vec<bool>>,
}

impl<S: Scalar> FeatureGrid<S> {
    pub fn new(frames: usize, persons: usize, channels: usize, values: Vec<S>) -> Result<Self> {
        let data = Tensor::new(vec![frames, persons, channels], values)?;
        Ok(FeatureGrid {
            frames,
            persons,
            channels,
            data,
            presence: None,
        })
    }

    pub fn from_tensor(data: Tensor<S>) -> Result<Self> {
        if data.rank() != 3 {
            return Err(DinError::BadShape {
                op: "feature_grid",
                expected: "rank-3 tensor [T, N, D]".into(),
                found: format!("{:?}", data.shape()),
            });
        }
        let (frames, persons, channels) = (data.shape()[0], data.shape()[1], data.shape()[2]);
        Ok(FeatureGrid {
            frames,
            persons,
            channels,
            data,
            presence: None,
        })
    }

    pub fn with_presence(mut self, presence: Vec<bool>) -> Result<Self> {
        if presence.len() != self.frames * self.persons {
            return Err(DinError::BadShape {
                op: "feature_grid",
                expected: format!("presence of length {}", self.frames * self.persons),
                found: format!("{}", presence.len()),
            });
        }
        self.presence = Some(presence);
        Ok(self)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn persons(&self) -> usize {
        self.persons
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.data
    }

    pub fn presence(&self) -> Option<&[bool]> {
        self.presence.as_deref()
    }

    pub fn feature(&self, t: usize, n: usize) -> &[S] {
        let base = (t * self.persons + n) * self.channels;
        &self.data.values()[base..base + self.channels]
    }

    pub fn cast<T: Scalar>(&self) -> FeatureGrid<T> {
        FeatureGrid {
            frames: self.frames,
            persons: self.persons,
            channels: self.channels,
            data: self.data.cast(),
            presence: self.presence.clone(),
        }
    }
}

/// The kT x kN interaction field initialized around each grid position.
/// Member k enumerates the lattice row-major; the same order indexes conv
/// kernels, relation weights, and walk offsets everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    kt: usize,
    kn: usize,
}

impl FieldSpec {
    pub fn new(kt: usize, kn: usize) -> Result<Self> {
        if kt == 0 || kn == 0 || kt % 2 == 0 || kn % 2 == 0 {
            return Err(DinError::InvalidField { kt, kn });
        }
        Ok(FieldSpec { kt, kn })
    }

    pub fn kt(&self) -> usize {
        self.kt
    }

    pub fn kn(&self) -> usize {
        self.kn
    }

    /// Field size K = kT * kN.
    pub fn size(&self) -> usize {
        self.kt * self.kn
    }

    /// (dt, dn) displacement of member `k` from the field center.
    pub fn member_offset(&self, k: usize) -> (isize, isize) {
        debug_assert!(k < self.size());
        (
            (k / self.kn) as isize - (self.kt / 2) as isize,
            (k % self.kn) as isize - (self.kn / 2) as isize,
        )
    }

    /// All member displacements in canonical (row-major) order.
    pub fn member_offsets(&self) -> Vec<(isize, isize)> {
        (0..self.size()).map(|k| self.member_offset(k)).collect()
    }
}

impl std::fmt::Display for FieldSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.kt, self.kn)
    }
}

/// A real-valued (temporal, spatial) coordinate on the ST graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coord {
    pub t: f64,
    pub n: f64,
}

impl Coord {
    pub fn new(t: f64, n: f64) -> Self {
        Coord { t, n }
    }
}

/// Componentwise clamp onto [0, T-1] x [0, N-1].
pub fn clamp_coord(c: Coord, frames: usize, persons: usize) -> Coord {
    Coord {
        t: c.t.max(0.0).min((frames - 1) as f64),
        n: c.n.max(0.0).min((persons - 1) as f64),
    }
}

/// Stack the K member features of `center`'s interaction field in canonical
/// order; members falling outside the grid are zero vectors.
pub fn extract_field<S: Scalar>(
    grid: &FeatureGrid<S>,
    center: (usize, usize),
    field: FieldSpec,
) -> Vec<Vec<S>> {
    let d = grid.channels();
    let mut out = Vec::with_capacity(field.size());
    for k in 0..field.size() {
        let (dt, dn) = field.member_offset(k);
        let t = center.0 as isize + dt;
        let n = center.1 as isize + dn;
        if t >= 0 && (t as usize) < grid.frames() && n >= 0 && (n as usize) < grid.persons() {
            out.push(grid.feature(t as usize, n as usize).to_vec());
        } else {
            out.push(vec![S::ZERO; d]);
        }
    }
    out
}

/// Four-neighbor bilinear sample at an already-clamped coordinate.
pub fn bilinear_sample<S: Scalar>(grid: &FeatureGrid<S>, c: Coord) -> Vec<S> {
    let (t, n, d) = (grid.frames(), grid.persons(), grid.channels());
    let (t0, t1, ft) = split(c.t, t);
    let (n0, n1, fn_) = split(c.n, n);
    let ft = S::from_f64(ft);
    let fn_ = S::from_f64(fn_);
    let mut out = vec![S::ZERO; d];
    let corners = [
        (t0, n0, (S::ONE - ft) * (S::ONE - fn_)),
        (t0, n1, (S::ONE - ft) * fn_),
        (t1, n0, ft * (S::ONE - fn_)),
        (t1, n1, ft * fn_),
    ];
    for (ti, ni, w) in corners {
        let row = grid.feature(ti, ni);
        for (o, &x) in out.iter_mut().zip(row) {
            *o += w * x;
        }
    }
    out
}

fn split(c: f64, len: usize) -> (usize, usize, f64) {
    if len == 1 {
        return (0, 0, 0.0);
    }
    let mut lo = c.floor() as usize;
    if lo >= len - 1 {
        lo = len - 2;
    }
    (lo, lo + 1, c - lo as f64)
}
