//! Scalar complex fields on transverse grids, far-field transforms, and
//! angular-spectrum propagation.
//!
//! All fields are monochromatic scalar envelopes. Far fields live on the
//! transverse-wavevector grid q (rad/m); a lens of focal length f maps q to
//! detector position x_f = q * lambda * f / (2*pi). Propagation uses the exact
//! angular-spectrum kernel with the carrier exp(i k z) removed, so kernels stay
//! numerically well conditioned for kilometer-scale steps.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{Domain, Grid1, Grid2};

/// Fraction of total power allowed near the window edge after a propagation
/// step before the aliasing guard trips.
pub const DEFAULT_ALIAS_GUARD: f64 = 1e-3;
/// Width of the edge band inspected by the guard, as a fraction of the window.
const GUARD_BAND: f64 = 0.05;

// ---------------------------------------------------------------------------
// 1D fields
// ---------------------------------------------------------------------------

/// Complex scalar field sampled on a 1D transverse grid.
#[derive(Debug, Clone)]
pub struct Field1 {
    pub grid: Grid1,
    pub wavelength: f64,
    pub domain: Domain,
    pub values: Array1<Complex64>,
}

/// Real-valued pattern (intensity or probability) on a 1D grid.
#[derive(Debug, Clone)]
pub struct Real1 {
    pub grid: Grid1,
    pub wavelength: f64,
    pub domain: Domain,
    pub values: Array1<f64>,
}

/// Result of a propagation step: the output field plus the fraction of power
/// that sat on evanescent components (|q| >= k) and was clipped.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub field: Field1,
    pub clipped_power_fraction: f64,
}

impl Field1 {
    pub fn new(grid: Grid1, wavelength: f64, domain: Domain, values: Array1<Complex64>) -> Result<Self> {
        if values.len() != grid.n() {
            return Err(Error::GridMismatch(format!(
                "field has {} samples, grid expects {}",
                values.len(),
                grid.n()
            )));
        }
        Ok(Self { grid, wavelength, domain, values })
    }

    /// Gaussian beam at its waist: amplitude exp(-x^2 / w^2), so the intensity
    /// 1/e^2 half-width equals w.
    pub fn gaussian(grid: Grid1, wavelength: f64, waist: f64) -> Self {
        let values = Array1::from_iter(
            grid.xs().map(|x| Complex64::new((-x * x / (waist * waist)).exp(), 0.0)),
        );
        Self { grid, wavelength, domain: Domain::Position, values }
    }

    /// Uniform unit amplitude across the window.
    pub fn flat(grid: Grid1, wavelength: f64) -> Self {
        Self {
            grid,
            wavelength,
            domain: Domain::Position,
            values: Array1::from_elem(grid.n(), Complex64::new(1.0, 0.0)),
        }
    }

    /// Single-sample impulse at the grid center.
    pub fn delta(grid: Grid1, wavelength: f64) -> Self {
        let mut values = Array1::from_elem(grid.n(), Complex64::new(0.0, 0.0));
        values[grid.center()] = Complex64::new(1.0, 0.0);
        Self { grid, wavelength, domain: Domain::Position, values }
    }

    /// Total power, sum |u|^2 times the grid step. The grid always carries the
    /// native coordinate of the field's domain (meters or rad/m), so the step
    /// is `dx()` in either case.
    pub fn power(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.dx()
    }

    pub fn normalize_power(&mut self) {
        let p = self.power();
        if p > 0.0 {
            let s = 1.0 / p.sqrt();
            self.values.mapv_inplace(|v| v * s);
        }
    }

    pub fn intensity(&self) -> Real1 {
        Real1 {
            grid: self.grid,
            wavelength: self.wavelength,
            domain: self.domain,
            values: self.values.mapv(|v| v.norm_sqr()),
        }
    }

    /// Pointwise multiply by a complex transmission map (same grid, position domain).
    pub fn apply_mask(&mut self, mask: &Array1<Complex64>) -> Result<()> {
        if mask.len() != self.grid.n() {
            return Err(Error::GridMismatch(format!(
                "mask has {} samples, field has {}",
                mask.len(),
                self.grid.n()
            )));
        }
        for (v, m) in self.values.iter_mut().zip(mask.iter()) {
            *v *= m;
        }
        Ok(())
    }

    /// Apply a tilt of `angle` radians: multiply by exp(i k angle x).
    pub fn tilt(&mut self, angle: f64) {
        let k = 2.0 * std::f64::consts::PI / self.wavelength;
        for (i, v) in self.values.iter_mut().enumerate() {
            let ph = k * angle * self.grid.x(i);
            *v *= Complex64::new(ph.cos(), ph.sin());
        }
    }

    /// Lens far field: unitary Fourier transform onto the conjugate grid.
    /// The focal length only fixes the q -> detector-position scale
    /// ([`Real1::detector_scale`]); the returned samples live on the q grid.
    pub fn far_field(&self, _focal_length: f64) -> Result<Field1> {
        if self.domain != Domain::Position {
            return Err(Error::GridMismatch("far_field expects a position-domain field".into()));
        }
        let mut buf: Vec<Complex64> = self.values.to_vec();
        fft::unitary_forward(&mut buf, self.grid.dx());
        Ok(Field1 {
            grid: self.grid.conjugate(),
            wavelength: self.wavelength,
            domain: Domain::Angular,
            values: Array1::from_vec(buf),
        })
    }

    /// Inverse of [`Self::far_field`].
    pub fn inverse_far_field(&self) -> Result<Field1> {
        if self.domain != Domain::Angular {
            return Err(Error::GridMismatch("inverse_far_field expects an angular-domain field".into()));
        }
        let mut buf: Vec<Complex64> = self.values.to_vec();
        fft::unitary_inverse(&mut buf, self.grid.dx());
        Ok(Field1 {
            grid: self.grid.conjugate(),
            wavelength: self.wavelength,
            domain: Domain::Position,
            values: Array1::from_vec(buf),
        })
    }

    /// Exact angular-spectrum propagation over distance `z` (meters, may be
    /// negative). Evanescent components are zeroed and reported, never kept
    /// silently. `guard` is the aliasing threshold (None = [`DEFAULT_ALIAS_GUARD`],
    /// Some(1.0) effectively disables the check).
    pub fn propagate(&self, z: f64, guard: Option<f64>) -> Result<Propagated> {
        if self.domain != Domain::Position {
            return Err(Error::GridMismatch("propagate expects a position-domain field".into()));
        }
        let guard = guard.unwrap_or(DEFAULT_ALIAS_GUARD);
        let k = 2.0 * std::f64::consts::PI / self.wavelength;
        let _n = self.grid.n();
        let mut buf: Vec<Complex64> = self.values.to_vec();
        fft::unitary_forward(&mut buf, self.grid.dx());

        let qgrid = self.grid.conjugate();
        let total: f64 = buf.iter().map(|v| v.norm_sqr()).sum();
        let mut clipped = 0.0;
        for (j, v) in buf.iter_mut().enumerate() {
            let q = qgrid.x(j);
            let q2 = q * q;
            if q2 >= k * k {
                clipped += v.norm_sqr();
                *v = Complex64::new(0.0, 0.0);
            } else {
                // kz - k computed in cancellation-free form
                let kz_minus_k = -q2 / ((k * k - q2).sqrt() + k);
                let ph = z * kz_minus_k;
                *v *= Complex64::new(ph.cos(), ph.sin());
            }
        }
        let clipped_power_fraction = if total > 0.0 { clipped / total } else { 0.0 };

        fft::unitary_inverse(&mut buf, qgrid.dx());
        let field = Field1 {
            grid: self.grid,
            wavelength: self.wavelength,
            domain: Domain::Position,
            values: Array1::from_vec(buf),
        };

        let frac = field.edge_power_fraction(GUARD_BAND);
        if frac > guard {
            return Err(Error::AliasingGuard { fraction: frac, guard });
        }
        Ok(Propagated { field, clipped_power_fraction })
    }

    /// Fraction of total power in the outer `band` fraction of the window on
    /// each side. The aliasing guard uses this as its wraparound proxy.
    pub fn edge_power_fraction(&self, band: f64) -> f64 {
        let n = self.grid.n();
        let m = ((n as f64 * band).ceil() as usize).max(1).min(n / 2);
        let total: f64 = self.values.iter().map(|v| v.norm_sqr()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let edge: f64 = self.values.iter().take(m).map(|v| v.norm_sqr()).sum::<f64>()
            + self.values.iter().skip(n - m).map(|v| v.norm_sqr()).sum::<f64>();
        edge / total
    }
}

impl Real1 {
    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    /// Normalize so the samples sum to one (a discrete probability pattern).
    pub fn normalize(&mut self) -> Result<()> {
        let t = self.total();
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Degenerate(format!("pattern total {t}, cannot normalize")));
        }
        self.values.mapv_inplace(|v| v / t);
        Ok(())
    }

    /// Meters of detector displacement per unit q, for a lens of focal length f.
    pub fn detector_scale(&self, focal_length: f64) -> f64 {
        self.wavelength * focal_length / (2.0 * std::f64::consts::PI)
    }
}

// ---------------------------------------------------------------------------
// 2D fields
// ---------------------------------------------------------------------------

/// Complex scalar field on a 2D transverse grid, row-major `[y, x]`.
#[derive(Debug, Clone)]
pub struct Field2 {
    pub grid: Grid2,
    pub wavelength: f64,
    pub domain: Domain,
    pub values: Array2<Complex64>,
}

/// Real-valued 2D pattern.
#[derive(Debug, Clone)]
pub struct Real2 {
    pub grid: Grid2,
    pub wavelength: f64,
    pub domain: Domain,
    pub values: Array2<f64>,
}

impl Field2 {
    pub fn gaussian(grid: Grid2, wavelength: f64, waist: f64) -> Self {
        let (ny, nx) = (grid.ny(), grid.nx());
        let mut values = Array2::from_elem((ny, nx), Complex64::new(0.0, 0.0));
        for iy in 0..ny {
            let y = grid.gy.x(iy);
            for ix in 0..nx {
                let x = grid.gx.x(ix);
                values[[iy, ix]] =
                    Complex64::new((-(x * x + y * y) / (waist * waist)).exp(), 0.0);
            }
        }
        Self { grid, wavelength, domain: Domain::Position, values }
    }

    pub fn flat(grid: Grid2, wavelength: f64) -> Self {
        Self {
            grid,
            wavelength,
            domain: Domain::Position,
            values: Array2::from_elem((grid.ny(), grid.nx()), Complex64::new(1.0, 0.0)),
        }
    }

    pub fn power(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell_area()
    }

    pub fn apply_mask(&mut self, mask: &Array2<Complex64>) -> Result<()> {
        if mask.dim() != self.values.dim() {
            return Err(Error::GridMismatch("2D mask/field shape mismatch".into()));
        }
        for (v, m) in self.values.iter_mut().zip(mask.iter()) {
            *v *= m;
        }
        Ok(())
    }

    pub fn intensity(&self) -> Real2 {
        Real2 {
            grid: self.grid,
            wavelength: self.wavelength,
            domain: self.domain,
            values: self.values.mapv(|v| v.norm_sqr()),
        }
    }

    /// Separable unitary transform along both axes.
    pub fn far_field(&self, _focal_length: f64) -> Result<Field2> {
        if self.domain != Domain::Position {
            return Err(Error::GridMismatch("far_field expects a position-domain field".into()));
        }
        let mut values = self.values.clone();
        fft2_unitary(&mut values, self.grid, true);
        Ok(Field2 {
            grid: self.grid.conjugate(),
            wavelength: self.wavelength,
            domain: Domain::Angular,
            values,
        })
    }

    pub fn inverse_far_field(&self) -> Result<Field2> {
        if self.domain != Domain::Angular {
            return Err(Error::GridMismatch("inverse_far_field expects an angular-domain field".into()));
        }
        let mut values = self.values.clone();
        fft2_unitary_inverse(&mut values, self.grid);
        Ok(Field2 {
            grid: self.grid.conjugate(),
            wavelength: self.wavelength,
            domain: Domain::Position,
            values,
        })
    }

    /// Angular-spectrum propagation, 2D version of [`Field1::propagate`].
    pub fn propagate(&self, z: f64, guard: Option<f64>) -> Result<(Field2, f64)> {
        if self.domain != Domain::Position {
            return Err(Error::GridMismatch("propagate expects a position-domain field".into()));
        }
        let guard = guard.unwrap_or(DEFAULT_ALIAS_GUARD);
        let k = 2.0 * std::f64::consts::PI / self.wavelength;
        let mut spec = self.values.clone();
        fft2_unitary(&mut spec, self.grid, true);
        let (gqx, gqy) = (self.grid.gx.conjugate(), self.grid.gy.conjugate());
        let total: f64 = spec.iter().map(|v| v.norm_sqr()).sum();
        let mut clipped = 0.0;
        for iy in 0..self.grid.ny() {
            let qy = gqy.x(iy);
            for ix in 0..self.grid.nx() {
                let qx = gqx.x(ix);
                let q2 = qx * qx + qy * qy;
                let v = &mut spec[[iy, ix]];
                if q2 >= k * k {
                    clipped += v.norm_sqr();
                    *v = Complex64::new(0.0, 0.0);
                } else {
                    let ph = z * (-q2 / ((k * k - q2).sqrt() + k));
                    *v *= Complex64::new(ph.cos(), ph.sin());
                }
            }
        }
        let mut out = spec;
        let qgrid = self.grid.conjugate();
        fft2_unitary_inverse(&mut out, qgrid);
        let field = Field2 {
            grid: self.grid,
            wavelength: self.wavelength,
            domain: Domain::Position,
            values: out,
        };
        let frac = field.edge_power_fraction(GUARD_BAND);
        if frac > guard {
            return Err(Error::AliasingGuard { fraction: frac, guard });
        }
        Ok((field, if total > 0.0 { clipped / total } else { 0.0 }))
    }

    pub fn edge_power_fraction(&self, band: f64) -> f64 {
        let (ny, nx) = self.values.dim();
        let mx = ((nx as f64 * band).ceil() as usize).max(1).min(nx / 2);
        let my = ((ny as f64 * band).ceil() as usize).max(1).min(ny / 2);
        let total: f64 = self.values.iter().map(|v| v.norm_sqr()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut edge = 0.0;
        for ((iy, ix), v) in self.values.indexed_iter() {
            if ix < mx || ix >= nx - mx || iy < my || iy >= ny - my {
                edge += v.norm_sqr();
            }
        }
        edge / total
    }
}

/// In-place separable unitary forward FFT over both axes of a 2D array.
pub(crate) fn fft2_unitary(values: &mut Array2<Complex64>, grid: Grid2, forward: bool) {
    debug_assert!(forward);
    let (ny, nx) = values.dim();
    let mut row = vec![Complex64::new(0.0, 0.0); nx];
    for iy in 0..ny {
        for ix in 0..nx {
            row[ix] = values[[iy, ix]];
        }
        fft::unitary_forward(&mut row, grid.gx.dx());
        for ix in 0..nx {
            values[[iy, ix]] = row[ix];
        }
    }
    let mut col = vec![Complex64::new(0.0, 0.0); ny];
    for ix in 0..nx {
        for iy in 0..ny {
            col[iy] = values[[iy, ix]];
        }
        fft::unitary_forward(&mut col, grid.gy.dx());
        for iy in 0..ny {
            values[[iy, ix]] = col[iy];
        }
    }
}

pub(crate) fn fft2_unitary_inverse(values: &mut Array2<Complex64>, angular_grid: Grid2) {
    let (ny, nx) = values.dim();
    let mut row = vec![Complex64::new(0.0, 0.0); nx];
    for iy in 0..ny {
        for ix in 0..nx {
            row[ix] = values[[iy, ix]];
        }
        fft::unitary_inverse(&mut row, angular_grid.gx.dx());
        for ix in 0..nx {
            values[[iy, ix]] = row[ix];
        }
    }
    let mut col = vec![Complex64::new(0.0, 0.0); ny];
    for ix in 0..nx {
        for iy in 0..ny {
            col[iy] = values[[iy, ix]];
        }
        fft::unitary_inverse(&mut col, angular_grid.gy.dx());
        for iy in 0..ny {
            values[[iy, ix]] = col[iy];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::fit_gaussian_width;

    const LAMBDA: f64 = 808e-9;

    #[test]
    fn gaussian_far_field_width_is_2_over_w() {
        // amplitude exp(-x^2/w^2) transforms to exp(-q^2 w^2 / 4); the intensity
        // 1/e^2 half-width of the far field is therefore 2/w
        let w = 0.4e-3;
        let grid = Grid1::new(2048, 16e-3).unwrap();
        let f = Field1::gaussian(grid, LAMBDA, w);
        let ff = f.far_field(0.1).unwrap();
        let pat = ff.intensity();
        let qs: Vec<f64> = (0..pat.grid.n()).map(|j| pat.grid.x(j)).collect();
        let fit = fit_gaussian_width(&qs, pat.values.as_slice().unwrap()).unwrap();
        let expect = 2.0 / w;
        assert!(
            (fit.width - expect).abs() < 1e-3 * expect,
            "far-field width {} vs 2/w = {}",
            fit.width,
            expect
        );
    }

    #[test]
    fn far_field_of_delta_is_flat() {
        let grid = Grid1::new(256, 1e-3).unwrap();
        let f = Field1::delta(grid, LAMBDA);
        let ff = f.far_field(0.1).unwrap();
        let mags: Vec<f64> = ff.values.iter().map(|v| v.norm()).collect();
        let (lo, hi) = mags.iter().fold((f64::MAX, f64::MIN), |(a, b), &m| (a.min(m), b.max(m)));
        assert!(hi - lo < 1e-12 * hi, "delta far field not flat: [{lo}, {hi}]");
    }

    #[test]
    fn far_field_preserves_power() {
        let grid = Grid1::new(512, 8e-3).unwrap();
        let mut f = Field1::gaussian(grid, LAMBDA, 1e-3);
        f.values[7] = Complex64::new(3.0, -1.0); // arbitrary non-smooth content
        let p0 = f.power();
        let ff = f.far_field(0.2).unwrap();
        assert!((ff.power() - p0).abs() < 1e-10 * p0);
    }

    #[test]
    fn two_far_fields_give_parity() {
        let grid = Grid1::new(128, 2e-3).unwrap();
        let mut f = Field1::gaussian(grid, LAMBDA, 0.3e-3);
        // break symmetry so parity is observable
        for i in 0..grid.n() {
            let x = grid.x(i) / 1e-3;
            f.values[i] *= Complex64::new(1.0 + 0.3 * x, 0.1 * x * x);
        }
        let ff = f.far_field(0.1).unwrap();
        // treat the angular output as a position field on its own grid
        let ff_as_pos = Field1 {
            grid: ff.grid,
            wavelength: ff.wavelength,
            domain: Domain::Position,
            values: ff.values.clone(),
        };
        let ff2 = ff_as_pos.far_field(0.1).unwrap();
        let n = grid.n();
        for i in 1..n {
            let want = f.values[n - i];
            let got = ff2.values[i];
            assert!(
                (got - want).norm() < 1e-10,
                "parity mismatch at {i}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn gaussian_beam_spreads_by_the_beam_law() {
        // w(z) = w0 sqrt(1 + (z/zR)^2), zR = pi w0^2 / lambda
        let w0 = 0.2e-3;
        let zr = std::f64::consts::PI * w0 * w0 / LAMBDA;
        let grid = Grid1::new(4096, 12e-3).unwrap();
        let f = Field1::gaussian(grid, LAMBDA, w0);
        for z_over_zr in [0.5, 1.0, 2.0] {
            let z = z_over_zr * zr;
            let out = f.propagate(z, None).unwrap();
            assert!(out.clipped_power_fraction == 0.0, "paraxial beam clipped");
            let pat = out.field.intensity();
            let xs: Vec<f64> = (0..grid.n()).map(|i| grid.x(i)).collect();
            let fit = fit_gaussian_width(&xs, pat.values.as_slice().unwrap()).unwrap();
            let expect = w0 * (1.0 + z_over_zr * z_over_zr).sqrt();
            assert!(
                (fit.width - expect).abs() < 0.005 * expect,
                "w({z_over_zr} zR) = {} vs {}",
                fit.width,
                expect
            );
        }
    }

    #[test]
    fn propagation_steps_compose() {
        let grid = Grid1::new(1024, 10e-3).unwrap();
        let f = Field1::gaussian(grid, LAMBDA, 0.5e-3);
        let a = f.propagate(0.7, None).unwrap().field.propagate(0.3, None).unwrap().field;
        let b = f.propagate(1.0, None).unwrap().field;
        let err: f64 = a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-10, "composition error {err}");
    }

    #[test]
    fn evanescent_content_is_clipped_and_reported() {
        // dx far below the wavelength puts most of a delta's spectrum beyond k
        let grid = Grid1::new(256, 256.0 * 100e-9).unwrap();
        let f = Field1::delta(grid, LAMBDA);
        let out = f.propagate(5e-6, Some(1.0)).unwrap();
        assert!(
            out.clipped_power_fraction > 0.5,
            "expected heavy clipping, got {}",
            out.clipped_power_fraction
        );
        assert!(out.clipped_power_fraction <= 1.0);
    }

    #[test]
    fn aliasing_guard_trips_on_overfilled_window() {
        // strong defocus spreads the beam past the window edge
        let grid = Grid1::new(512, 4e-3).unwrap();
        let f = Field1::gaussian(grid, LAMBDA, 1.2e-3);
        let zr = std::f64::consts::PI * 1.2e-3 * 1.2e-3 / LAMBDA;
        let err = f.propagate(30.0 * zr, None);
        match err {
            Err(Error::AliasingGuard { fraction, .. }) => assert!(fraction > DEFAULT_ALIAS_GUARD),
            other => panic!("expected AliasingGuard, got {other:?}"),
        }
    }

    #[test]
    fn far_field_2d_matches_separable_1d() {
        let grid = Grid2::square(64, 2e-3).unwrap();
        let f = Field2::gaussian(grid, LAMBDA, 0.4e-3);
        let ff = f.far_field(0.1).unwrap();
        let g1 = Grid1::new(64, 2e-3).unwrap();
        let f1 = Field1::gaussian(g1, LAMBDA, 0.4e-3);
        let ff1 = f1.far_field(0.1).unwrap();
        // separable Gaussian: F2(qy, qx) = F1(qy) F1(qx)
        for iy in [3usize, 31, 50] {
            for ix in [0usize, 17, 32, 63] {
                let want = ff1.values[iy] * ff1.values[ix];
                let got = ff.values[[iy, ix]];
                assert!((got - want).norm() < 1e-12, "2D/1D mismatch at [{iy},{ix}]");
            }
        }
    }
}
