//! Sampling grids for transverse fields.
//!
//! Position grids are centered: sample `i` sits at `x_i = (i - n/2) * dx` with
//! `dx = extent / n`, so `x = 0` is an actual sample and the window is
//! `[-extent/2, extent/2)`. The conjugate (transverse-wavevector) grid follows
//! the same layout with spacing `dq = 2*pi / extent`; its extent is `2*pi / dx`.
//! `n` must be even so the two grids share the centering convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which representation a field's samples currently live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// Transverse position at a plane, meters.
    Position,
    /// Transverse wavevector q, rad/m (the far-field coordinate; a lens of
    /// focal length f maps it to detector position x_f = q * lambda * f / (2*pi)).
    Angular,
}

/// One-dimensional centered sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1 {
    n: usize,
    extent: f64,
}

impl Grid1 {
    pub fn new(n: usize, extent: f64) -> Result<Self> {
        if n < 2 || n % 2 != 0 {
            return Err(Error::GridMismatch(format!("n = {n} must be even and >= 2")));
        }
        if !(extent.is_finite() && extent > 0.0) {
            return Err(Error::GridMismatch(format!("extent = {extent} must be finite and > 0")));
        }
        Ok(Self { n, extent })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn dx(&self) -> f64 {
        self.extent / self.n as f64
    }

    /// Sample coordinate of index `i`.
    pub fn x(&self, i: usize) -> f64 {
        (i as f64 - (self.n / 2) as f64) * self.dx()
    }

    /// Conjugate-grid spacing, rad/m.
    pub fn dq(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.extent
    }

    /// Conjugate coordinate of index `j`.
    pub fn q(&self, j: usize) -> f64 {
        (j as f64 - (self.n / 2) as f64) * self.dq()
    }

    /// The grid on which this grid's far field lives.
    pub fn conjugate(&self) -> Grid1 {
        Grid1 { n: self.n, extent: self.n as f64 * self.dq() }
    }

    /// Index of the sample at coordinate zero.
    pub fn center(&self) -> usize {
        self.n / 2
    }

    pub fn xs(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(|i| self.x(i))
    }

    /// Index of the sample nearest to coordinate `x` (clamped to the window).
    pub fn index_of(&self, x: f64) -> usize {
        let i = (x / self.dx()).round() + (self.n / 2) as f64;
        i.clamp(0.0, (self.n - 1) as f64) as usize
    }

    pub fn same_as(&self, other: &Grid1) -> bool {
        self.n == other.n && (self.extent - other.extent).abs() <= 1e-9 * self.extent.abs()
    }
}

/// Two-dimensional centered sampling grid (separable, row-major `[y, x]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub gx: Grid1,
    pub gy: Grid1,
}

impl Grid2 {
    pub fn new(nx: usize, ny: usize, extent_x: f64, extent_y: f64) -> Result<Self> {
        Ok(Self { gx: Grid1::new(nx, extent_x)?, gy: Grid1::new(ny, extent_y)? })
    }

    pub fn square(n: usize, extent: f64) -> Result<Self> {
        Self::new(n, n, extent, extent)
    }

    pub fn nx(&self) -> usize {
        self.gx.n()
    }

    pub fn ny(&self) -> usize {
        self.gy.n()
    }

    pub fn conjugate(&self) -> Grid2 {
        Grid2 { gx: self.gx.conjugate(), gy: self.gy.conjugate() }
    }

    pub fn cell_area(&self) -> f64 {
        self.gx.dx() * self.gy.dx()
    }

    pub fn same_as(&self, other: &Grid2) -> bool {
        self.gx.same_as(&other.gx) && self.gy.same_as(&other.gy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_grid_has_zero_sample_and_symmetric_window() {
        let g = Grid1::new(8, 4.0).unwrap();
        assert_eq!(g.dx(), 0.5);
        assert_eq!(g.x(g.center()), 0.0);
        assert_eq!(g.x(0), -2.0);
        assert_eq!(g.x(7), 1.5, "window is [-extent/2, extent/2)");
    }

    #[test]
    fn conjugate_grid_spacing_is_2pi_over_extent() {
        let g = Grid1::new(256, 1.6e-3).unwrap();
        let dq = g.dq();
        assert!((dq - 2.0 * std::f64::consts::PI / 1.6e-3).abs() < 1e-9);
        let gq = g.conjugate();
        assert_eq!(gq.n(), 256);
        assert!((gq.dx() - dq).abs() < 1e-12 * dq);
        // conjugating twice returns the original sampling
        let gxx = gq.conjugate();
        assert!((gxx.dx() - g.dx()).abs() < 1e-15);
    }

    #[test]
    fn odd_sizes_are_rejected() {
        assert!(Grid1::new(7, 1.0).is_err());
        assert!(Grid1::new(0, 1.0).is_err());
        assert!(Grid1::new(8, -1.0).is_err());
    }
}
