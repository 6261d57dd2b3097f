//! Two-photon transverse states: construction from a pump spectrum and a
//! phase-matching kernel, double-Gaussian models, Schmidt analysis,
//! coincidence and singles observables, and the factorized thin-crystal fast
//! path.
//!
//! The joint amplitude is one transverse axis of a separable two-axis pair
//! state; every reported Schmidt number refers to the full transverse state
//! and is the square of the one-axis value. Photons are degenerate and
//! co-polarized at twice the pump wavelength.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;
use crate::field::{Field1, Field2, Real1, Real2};
use crate::grid::{Domain, Grid1, Grid2};
use crate::stats::GaussianFit;
use crate::transfer::TransferChain;

/// sin(x)/x with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Bandwidth ratio used when a Gaussian difference-coordinate kernel stands in
/// for the sinc phase-matching kernel: b_matched^2 = MATCH_ALPHA * L/(4k).
///
/// The value is pi*(I4/I2^2)^2 with I2 = integral of sinc^2(u^2) du and
/// I4 = integral of sinc^4(u^2) du, which makes the Gaussian reproduce the
/// sinc kernel's purity (and hence its Schmidt number) rather than its
/// central-lobe width; width-based matching misses the Schmidt number by
/// 6-16% while this choice stays within 1% over the regime of interest.
pub const MATCH_ALPHA: f64 = 0.3929901977753969;

// ---------------------------------------------------------------------------
// Parameter types
// ---------------------------------------------------------------------------

/// Nonlinear crystal and pump-carrier constants.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CrystalSpec {
    /// Crystal length L in meters.
    pub length: f64,
    /// Pump vacuum wavelength in meters.
    pub pump_wavelength: f64,
    /// Refractive index seen by the pump inside the crystal.
    pub n_crystal: f64,
}

impl CrystalSpec {
    pub fn new(length: f64, pump_wavelength: f64, n_crystal: f64) -> Result<Self> {
        if !(length > 0.0 && pump_wavelength > 0.0 && n_crystal > 0.0) {
            return Err(Error::Config(format!(
                "crystal parameters must be positive: L={length}, lambda={pump_wavelength}, n={n_crystal}"
            )));
        }
        Ok(Self { length, pump_wavelength, n_crystal })
    }

    /// Pump wavenumber inside the crystal, 2 pi n / lambda_pump.
    pub fn pump_wavenumber(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.n_crystal / self.pump_wavelength
    }

    /// Degenerate daughter-photon wavelength, twice the pump's.
    pub fn photon_wavelength(&self) -> f64 {
        2.0 * self.pump_wavelength
    }

    /// Nominal difference-coordinate length scale, sqrt(L/4k).
    pub fn b_nominal(&self) -> f64 {
        (self.length / (4.0 * self.pump_wavenumber())).sqrt()
    }

    /// Birth-zone diameter sqrt(lambda_photon * L). Order of magnitude only;
    /// the proportionality constant is taken as 1.
    pub fn correlation_diameter(&self) -> f64 {
        (self.photon_wavelength() * self.length).sqrt()
    }

    /// Emission half-angle sqrt(lambda_photon / L). Order of magnitude only.
    pub fn emission_half_angle(&self) -> f64 {
        (self.photon_wavelength() / self.length).sqrt()
    }
}

/// Parameters of the Gaussian model state
/// psi(q_s, q_i) ∝ exp(-(q_s+q_i)^2/sigma^2) * exp(-b^2 (q_s-q_i)^2).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DoubleGaussianParams {
    /// Pump angular-spectrum 1/e amplitude half-width, rad/m.
    pub sigma: f64,
    /// Difference-coordinate scale in meters.
    pub b: f64,
}

impl DoubleGaussianParams {
    pub fn new(sigma: f64, b: f64) -> Result<Self> {
        if !(sigma > 0.0 && b > 0.0) {
            return Err(Error::Config(format!("sigma and b must be positive: {sigma}, {b}")));
        }
        Ok(Self { sigma, b })
    }

    /// Transverse Schmidt number (1/4)(1/(b sigma) + b sigma)^2. Minimum 1 at
    /// b sigma = 1.
    pub fn schmidt_number(&self) -> f64 {
        let u = self.b * self.sigma;
        0.25 * (1.0 / u + u) * (1.0 / u + u)
    }

    /// Invert the Schmidt relation on the entangled branch b sigma <= 1.
    pub fn from_schmidt_number(k: f64, sigma: f64) -> Result<Self> {
        if !(k >= 1.0) {
            return Err(Error::Config(format!("Schmidt number must be >= 1, got {k}")));
        }
        // per-axis value k1 = sqrt(k); b sigma = k1 - sqrt(k1^2 - 1)
        let k1 = k.sqrt();
        let u = k1 - (k1 * k1 - 1.0).max(0.0).sqrt();
        Self::new(sigma, u / sigma)
    }

    /// Gaussian stand-in for a crystal's sinc kernel at the given pump width,
    /// purity-matched via [`MATCH_ALPHA`].
    pub fn matched_to_crystal(crystal: &CrystalSpec, sigma: f64) -> Result<Self> {
        let b2 = MATCH_ALPHA * crystal.length / (4.0 * crystal.pump_wavenumber());
        Self::new(sigma, b2.sqrt())
    }
}

/// Width-based Schmidt estimate with the propagated fit uncertainty.
#[derive(Debug, Clone, Copy)]
pub struct SchmidtEstimate {
    pub k: f64,
    pub uncertainty: f64,
}

// ---------------------------------------------------------------------------
// Joint amplitude
// ---------------------------------------------------------------------------

/// Discretized two-photon amplitude on one transverse axis, indexed
/// `values[[signal, idler]]`. Normalized so that
/// sum |psi|^2 * step_s * step_i = 1.
#[derive(Debug, Clone)]
pub struct JointAmplitude {
    pub grid_s: Grid1,
    pub grid_i: Grid1,
    pub domain: Domain,
    pub photon_wavelength: f64,
    pub values: Array2<Complex64>,
}

/// Joint coincidence probability density over the two detection coordinates,
/// indexed `values[[signal, idler]]`.
#[derive(Debug, Clone)]
pub struct JointPattern {
    pub grid_s: Grid1,
    pub grid_i: Grid1,
    pub domain: Domain,
    pub values: Array2<f64>,
}

impl JointAmplitude {
    fn steps(&self) -> (f64, f64) {
        (self.grid_s.dx(), self.grid_i.dx())
    }

    pub fn norm_sqr(&self) -> f64 {
        let (ds, di) = self.steps();
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * ds * di
    }

    pub fn normalize(&mut self) -> Result<()> {
        let n = self.norm_sqr();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Degenerate(format!("joint norm {n}, cannot normalize")));
        }
        let s = 1.0 / n.sqrt();
        self.values.mapv_inplace(|v| v * s);
        Ok(())
    }

    /// Largest |psi(a,b) - psi(b,a)| over the grid, relative to the peak
    /// magnitude. Zero for any state built from a symmetric kernel.
    pub fn exchange_asymmetry(&self) -> f64 {
        let n = self.values.nrows().min(self.values.ncols());
        let peak = self.values.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
        if peak == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for j in 0..n {
            for k in 0..j {
                worst = worst.max((self.values[[j, k]] - self.values[[k, j]]).norm());
            }
        }
        worst / peak
    }

    /// Unitary transform of both coordinates to the angular domain.
    pub fn to_angular(&self) -> Result<JointAmplitude> {
        if self.domain != Domain::Position {
            return Err(Error::GridMismatch("to_angular expects a position-domain state".into()));
        }
        let mut values = self.values.clone();
        let g2 = Grid2 { gx: self.grid_i, gy: self.grid_s };
        crate::field::fft2_unitary(&mut values, g2, true);
        Ok(JointAmplitude {
            grid_s: self.grid_s.conjugate(),
            grid_i: self.grid_i.conjugate(),
            domain: Domain::Angular,
            photon_wavelength: self.photon_wavelength,
            values,
        })
    }

    /// Unitary transform of both coordinates to the position domain.
    pub fn to_position(&self) -> Result<JointAmplitude> {
        if self.domain != Domain::Angular {
            return Err(Error::GridMismatch("to_position expects an angular-domain state".into()));
        }
        let mut values = self.values.clone();
        let g2 = Grid2 { gx: self.grid_i, gy: self.grid_s };
        crate::field::fft2_unitary_inverse(&mut values, g2);
        Ok(JointAmplitude {
            grid_s: self.grid_s.conjugate(),
            grid_i: self.grid_i.conjugate(),
            domain: Domain::Position,
            photon_wavelength: self.photon_wavelength,
            values,
        })
    }

    /// Multiply both coordinates by the same thin transmission map
    /// (position domain). Returns the transmitted power fraction; the state is
    /// renormalized when the map is lossy.
    pub fn apply_diffuser(&mut self, a: &Array1<Complex64>) -> Result<f64> {
        if self.domain != Domain::Position {
            return Err(Error::GridMismatch("diffusers act in the position domain".into()));
        }
        let n = self.grid_s.n();
        if a.len() != n || self.grid_i.n() != n {
            return Err(Error::GridMismatch(format!(
                "transmission map has {} samples, state grids have {}x{}",
                a.len(),
                n,
                self.grid_i.n()
            )));
        }
        let before = self.norm_sqr();
        for j in 0..n {
            for k in 0..n {
                self.values[[j, k]] *= a[j] * a[k];
            }
        }
        let after = self.norm_sqr();
        let transmitted = if before > 0.0 { after / before } else { 0.0 };
        if transmitted <= 0.0 {
            return Err(Error::Degenerate("transmission map absorbed the entire state".into()));
        }
        if (transmitted - 1.0).abs() > 1e-12 {
            self.normalize()?;
        }
        Ok(transmitted)
    }

    /// Joint detection probability density |psi(q_s, q_i)|^2, transformed to
    /// the angular domain if needed. Sums to 1 in the grid measure.
    pub fn coincidence_pattern(&self) -> Result<JointPattern> {
        let ang;
        let state = if self.domain == Domain::Angular {
            self
        } else {
            ang = self.to_angular()?;
            &ang
        };
        let mut p = JointPattern {
            grid_s: state.grid_s,
            grid_i: state.grid_i,
            domain: Domain::Angular,
            values: state.values.mapv(|v| v.norm_sqr()),
        };
        let total: f64 = p.values.sum() * p.grid_s.dx() * p.grid_i.dx();
        p.values.mapv_inplace(|v| v / total);
        Ok(p)
    }

    /// Marginal detection density of the signal photon (idler traced out).
    pub fn singles_pattern(&self) -> Result<Real1> {
        let joint = self.coincidence_pattern()?;
        let di = joint.grid_i.dx();
        let values = Array1::from_iter(joint.values.rows().into_iter().map(|r| r.sum() * di));
        Ok(Real1 {
            grid: joint.grid_s,
            wavelength: self.photon_wavelength,
            domain: Domain::Angular,
            values,
        })
    }

    /// Signal-coordinate cut of the coincidence density at a fixed idler bin,
    /// normalized to sum to 1: the stationary-idler measurement protocol.
    pub fn coincidence_slice(&self, idler_index: usize) -> Result<Real1> {
        let joint = self.coincidence_pattern()?;
        if idler_index >= joint.grid_i.n() {
            return Err(Error::GridMismatch(format!(
                "idler index {idler_index} out of range {}",
                joint.grid_i.n()
            )));
        }
        let mut values = joint.values.column(idler_index).to_owned();
        let total: f64 = values.sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("empty coincidence slice".into()));
        }
        values.mapv_inplace(|v| v / total);
        Ok(Real1 {
            grid: joint.grid_s,
            wavelength: self.photon_wavelength,
            domain: Domain::Angular,
            values,
        })
    }

    /// Average coincidence density along each antidiagonal q_s + q_i = Q,
    /// evaluated on the central window of the signal grid. For states whose
    /// density depends only on the sum coordinate this is exact; in general it
    /// is the per-cell conditional average, matching what a stationary-idler
    /// scan measures up to noise.
    pub fn sum_coordinate_pattern(&self) -> Result<Real1> {
        let joint = self.coincidence_pattern()?;
        let n = joint.grid_s.n();
        // antidiagonal m = j + k corresponds to Q = (m - n) dq; keep the
        // central n values, Q index c = m - n/2
        let mut values = Array1::zeros(n);
        for c in 0..n {
            let m = c + n / 2;
            let mut acc = 0.0;
            let mut cnt = 0usize;
            let j_lo = m.saturating_sub(n - 1);
            let j_hi = m.min(n - 1);
            for j in j_lo..=j_hi {
                acc += joint.values[[j, m - j]];
                cnt += 1;
            }
            values[c] = acc / cnt as f64;
        }
        let total: f64 = values.sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("empty sum-coordinate pattern".into()));
        }
        values.mapv_inplace(|v| v / total);
        Ok(Real1 {
            grid: joint.grid_s,
            wavelength: self.photon_wavelength,
            domain: Domain::Angular,
            values,
        })
    }

    /// Schmidt number of the full transverse state from the reduced-state
    /// purity: K = (1/Tr rho^2)^2 with rho the one-photon reduced operator of
    /// this axis. Requires a normalized state.
    pub fn schmidt_number_numeric(&self) -> Result<f64> {
        let norm = self.norm_sqr();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Degenerate(format!(
                "schmidt_number_numeric needs a normalized state; norm^2 = {norm}"
            )));
        }
        let (ds, di) = self.steps();
        let n = self.values.nrows();
        // rho = psi psi^dagger * di; purity = sum |rho_jk|^2 ds^2
        let mut purity = 0.0f64;
        for j in 0..n {
            let row_j = self.values.row(j);
            for k in 0..=j {
                let row_k = self.values.row(k);
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..self.values.ncols() {
                    acc += row_j[i] * row_k[i].conj();
                }
                let term = (acc * di).norm_sqr() * ds * ds;
                purity += if k == j { term } else { 2.0 * term };
            }
        }
        if !(purity.is_finite() && purity > 0.0) {
            return Err(Error::Degenerate(format!("purity {purity} out of range")));
        }
        let k1 = 1.0 / purity;
        Ok(k1 * k1)
    }

    /// Weight of the largest Schmidt mode (in [0, 1]), by power iteration on
    /// the reduced operator. 1 means separable.
    pub fn largest_schmidt_weight(&self) -> Result<f64> {
        let (ds, di) = self.steps();
        let n = self.values.nrows();
        let mut v: Array1<Complex64> =
            Array1::from_elem(n, Complex64::new(1.0 / (n as f64).sqrt(), 0.0));
        // the discrete reduced operator (rho with both grid measures folded
        // in) has unit trace, so its eigenvalues are the Schmidt weights
        let apply_rho = |v: &Array1<Complex64>| -> Array1<Complex64> {
            let mut w = Array1::<Complex64>::zeros(self.values.ncols());
            for j in 0..n {
                let c = v[j] * ds;
                for i in 0..self.values.ncols() {
                    w[i] += self.values[[j, i]].conj() * c;
                }
            }
            let mut out = Array1::<Complex64>::zeros(n);
            for j in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..self.values.ncols() {
                    acc += self.values[[j, i]] * w[i];
                }
                out[j] = acc * di;
            }
            out
        };
        let mut lambda = 0.0f64;
        for _ in 0..300 {
            let w = apply_rho(&v);
            let norm = w.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate("reduced operator annihilated the probe".into()));
            }
            let next = w.mapv(|x| x / norm);
            let delta = (norm - lambda).abs();
            lambda = norm;
            v = next;
            if delta < 1e-13 * lambda.max(1e-300) {
                break;
            }
        }
        let w = apply_rho(&v);
        let num: Complex64 = v.iter().zip(w.iter()).map(|(a, b)| a.conj() * b).sum();
        Ok(num.re.clamp(0.0, 1.0))
    }
}

// ---------------------------------------------------------------------------
// State constructors
// ---------------------------------------------------------------------------

/// Fraction of pump spectral power in the outer band of its grid above which
/// the sum coordinate cannot be represented on the joint grid.
const PUMP_SUPPORT_TOL: f64 = 1e-9;

/// Build the angular-domain state v(q_s+q_i) * sinc(L (q_s-q_i)^2 / 4k) from a
/// sampled pump angular spectrum. The pump is resampled onto the sum
/// coordinate by band-limited interpolation, so its own grid must contain its
/// support.
pub fn build_state_eq1(
    pump_angular: &Field1,
    crystal: &CrystalSpec,
    grid_q: Grid1,
) -> Result<JointAmplitude> {
    if pump_angular.domain != Domain::Angular {
        return Err(Error::GridMismatch("pump spectrum must be in the angular domain".into()));
    }
    if pump_angular.values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("pump angular spectrum"));
    }
    let edge = Field1 {
        grid: pump_angular.grid,
        wavelength: pump_angular.wavelength,
        domain: Domain::Position,
        values: pump_angular.values.clone(),
    }
    .edge_power_fraction(0.05);
    if edge > PUMP_SUPPORT_TOL {
        return Err(Error::Regime(format!(
            "pump spectrum carries {edge:.2e} of its power at the grid edge; \
             the sum coordinate would be truncated"
        )));
    }

    let n = grid_q.n();
    let dq = grid_q.dx();
    let pn = pump_angular.grid.n();
    let pdq = pump_angular.grid.dx();

    // v(Q) on the 2n-1 distinct sum values Q_m = (m - n) dq, m = j + k
    let pump_vals: Vec<Complex64> = pump_angular.values.to_vec();
    let mut positions = Vec::with_capacity(2 * n - 1);
    let mut inside = Vec::with_capacity(2 * n - 1);
    for m in 0..(2 * n - 1) {
        let q_sum = (m as f64 - n as f64) * dq;
        // centered sample coordinate on the pump grid
        let pos = q_sum / pdq;
        let ok = pos >= -(pn as f64) / 2.0 && pos <= pn as f64 / 2.0 - 1.0;
        positions.push(if ok { pos } else { 0.0 });
        inside.push(ok);
    }
    let interp = fft::sinc_interp(&pump_vals, &positions);
    let vsum: Vec<Complex64> = interp
        .into_iter()
        .zip(inside.iter())
        .map(|(v, &ok)| if ok { v } else { Complex64::new(0.0, 0.0) })
        .collect();

    // phase-matching kernel over the difference coordinate
    let c = crystal.length / (4.0 * crystal.pump_wavenumber());
    let phi: Vec<f64> = (0..n)
        .map(|d| {
            let delta = d as f64 * dq;
            sinc(c * delta * delta)
        })
        .collect();

    let mut values = Array2::from_elem((n, n), Complex64::new(0.0, 0.0));
    for j in 0..n {
        for k in 0..n {
            let d = j.abs_diff(k);
            values[[j, k]] = vsum[j + k] * phi[d];
        }
    }
    let mut psi = JointAmplitude {
        grid_s: grid_q,
        grid_i: grid_q,
        domain: Domain::Angular,
        photon_wavelength: crystal.photon_wavelength(),
        values,
    };
    psi.normalize()?;
    Ok(psi)
}

/// Position-correlated state of a vanishing-length crystal: both photons are
/// born at the same point with the pump's local amplitude. Exact on the grid:
/// the joint matrix is diagonal.
pub fn thin_crystal_state(pump_position: &Field1) -> Result<JointAmplitude> {
    if pump_position.domain != Domain::Position {
        return Err(Error::GridMismatch("thin-crystal state needs the pump in position".into()));
    }
    let n = pump_position.grid.n();
    let mut values = Array2::from_elem((n, n), Complex64::new(0.0, 0.0));
    for j in 0..n {
        values[[j, j]] = pump_position.values[j];
    }
    let mut psi = JointAmplitude {
        grid_s: pump_position.grid,
        grid_i: pump_position.grid,
        domain: Domain::Position,
        photon_wavelength: 2.0 * pump_position.wavelength,
        values,
    };
    psi.normalize()?;
    Ok(psi)
}

/// Build the double-Gaussian model state on an angular grid. The grid must
/// cover at least four 1/e widths of both the sum and difference factors.
pub fn build_double_gaussian(
    p: &DoubleGaussianParams,
    grid_q: Grid1,
    photon_wavelength: f64,
) -> Result<JointAmplitude> {
    let n = grid_q.n();
    let q_max = (n as f64 / 2.0) * grid_q.dx();
    // sum spans +-2 q_max, difference likewise
    if 2.0 * q_max < 4.0 * p.sigma {
        return Err(Error::Regime(format!(
            "grid covers |q_s+q_i| <= {:.3e}, need 4 sigma = {:.3e}",
            2.0 * q_max,
            4.0 * p.sigma
        )));
    }
    if 2.0 * q_max < 4.0 / p.b {
        return Err(Error::Regime(format!(
            "grid covers |q_s-q_i| <= {:.3e}, need 4/b = {:.3e}",
            2.0 * q_max,
            4.0 / p.b
        )));
    }
    let mut values = Array2::from_elem((n, n), Complex64::new(0.0, 0.0));
    for j in 0..n {
        let qs = grid_q.x(j);
        for k in 0..n {
            let qi = grid_q.x(k);
            let sum = qs + qi;
            let diff = qs - qi;
            let a = (-(sum * sum) / (p.sigma * p.sigma) - p.b * p.b * diff * diff).exp();
            values[[j, k]] = Complex64::new(a, 0.0);
        }
    }
    let mut psi = JointAmplitude {
        grid_s: grid_q,
        grid_i: grid_q,
        domain: Domain::Angular,
        photon_wavelength,
        values,
    };
    psi.normalize()?;
    Ok(psi)
}

// ---------------------------------------------------------------------------
// Factorized thin-crystal fast path
// ---------------------------------------------------------------------------

/// Coincidence pattern over the sum coordinate for a thin crystal behind a
/// thin medium: |FT[W * A^2]|^2, normalized. `a_photon` is the transmission
/// map at the photon wavelength; the squaring here is what doubles its phase.
pub fn thin_crystal_coincidence(
    pump_profile: &Field1,
    a_photon: &Array1<Complex64>,
) -> Result<Real1> {
    if pump_profile.domain != Domain::Position {
        return Err(Error::GridMismatch("pump profile must be in the position domain".into()));
    }
    if a_photon.len() != pump_profile.grid.n() {
        return Err(Error::GridMismatch(format!(
            "transmission map has {} samples, pump grid has {}",
            a_photon.len(),
            pump_profile.grid.n()
        )));
    }
    let mut f = pump_profile.clone();
    for (v, a) in f.values.iter_mut().zip(a_photon.iter()) {
        *v *= a * a;
    }
    let mut pat = f.far_field(1.0)?.intensity();
    pat.wavelength = 2.0 * pump_profile.wavelength;
    pat.normalize()?;
    Ok(pat)
}

/// 2D version of [`thin_crystal_coincidence`].
pub fn thin_crystal_coincidence_2d(
    pump_profile: &Field2,
    a_photon: &Array2<Complex64>,
) -> Result<Real2> {
    if pump_profile.domain != Domain::Position {
        return Err(Error::GridMismatch("pump profile must be in the position domain".into()));
    }
    if a_photon.dim() != pump_profile.values.dim() {
        return Err(Error::GridMismatch("2D transmission/pump shape mismatch".into()));
    }
    let mut f = pump_profile.clone();
    for (v, a) in f.values.iter_mut().zip(a_photon.iter()) {
        *v *= a * a;
    }
    let mut pat = f.far_field(1.0)?.intensity();
    pat.wavelength = 2.0 * pump_profile.wavelength;
    let total = pat.values.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Degenerate("empty 2D coincidence pattern".into()));
    }
    pat.values.mapv_inplace(|v| v / total);
    Ok(pat)
}

/// Rescale a coincidence pattern's angular axis by exactly 2 onto the pump
/// far-field grid, so both live on a common detector coordinate: a pump bin
/// q_p collects the coincidence density at photon momentum q_p / 2.
pub fn resample_sum_coordinate(coinc: &Real1, pump_ff: &Real1) -> Result<(Real1, Real1)> {
    let cn = coinc.grid.n();
    let cdq = coinc.grid.dx();
    let pn = pump_ff.grid.n();
    let pdq = pump_ff.grid.dx();
    let needed = (pn as f64 / 2.0) * pdq / 2.0;
    let covered = (cn as f64 / 2.0) * cdq;
    if needed > covered * (1.0 + 1e-12) {
        return Err(Error::GridMismatch(format!(
            "pump grid maps to photon momenta up to {needed:.3e}, coincidence grid covers {covered:.3e}"
        )));
    }
    let lifted: Vec<Complex64> =
        coinc.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let positions: Vec<f64> = (0..pn)
        .map(|j| {
            let qp = pump_ff.grid.x(j);
            // centered sample coordinate on the coincidence grid
            qp / 2.0 / cdq
        })
        .collect();
    let interp = fft::sinc_interp(&lifted, &positions);
    let mut values = Array1::from_iter(interp.into_iter().map(|v| v.re.max(0.0)));
    let total: f64 = values.sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("resampled pattern is empty".into()));
    }
    values.mapv_inplace(|v| v / total);
    let out = Real1 {
        grid: pump_ff.grid,
        wavelength: coinc.wavelength,
        domain: Domain::Angular,
        values,
    };
    let mut pump_norm = pump_ff.clone();
    pump_norm.normalize()?;
    Ok((out, pump_norm))
}

/// Schmidt number from the two measured widths: sigma from the fixed-idler
/// coincidence slice, b from the singles envelope via I(q) ∝ exp(-8 b^2 q^2),
/// giving K = (w_singles / w_slice)^2. Valid in the strongly entangled regime
/// only; the implied b*sigma must stay below 0.2.
pub fn estimate_schmidt_from_widths(
    coinc_slice: &GaussianFit,
    singles: &GaussianFit,
) -> Result<SchmidtEstimate> {
    let wc = coinc_slice.width;
    let ws = singles.width;
    if !(wc > 0.0 && ws > 0.0) {
        return Err(Error::Degenerate("nonpositive fitted width".into()));
    }
    let b_sigma = wc / (2.0 * ws);
    if b_sigma > 0.2 {
        return Err(Error::Regime(format!(
            "width ratio implies b sigma = {b_sigma:.3}; the width estimator needs b sigma <= 0.2"
        )));
    }
    let k = (ws / wc) * (ws / wc);
    let rel = 2.0
        * ((coinc_slice.sigma_width / wc).powi(2) + (singles.sigma_width / ws).powi(2)).sqrt();
    Ok(SchmidtEstimate { k, uncertainty: k * rel })
}

// ---------------------------------------------------------------------------
// Low-rank propagation of separable-kernel states
// ---------------------------------------------------------------------------

/// Position-basis two-photon kernel in product form, for slice computations
/// that never materialize the full joint matrix.
#[derive(Debug, Clone)]
pub enum PositionKernel {
    /// psi(x_s, x_i) ∝ w(x) delta_{x_s x_i}: the thin-crystal limit.
    Diagonal { w: Array1<Complex64>, grid: Grid1 },
    /// psi(x_s, x_i) ∝ wsum[j+k] * gdiff[j-k+n-1]: pump envelope on the mean
    /// coordinate times a correlation profile on the difference.
    SumDiff { wsum: Array1<Complex64>, gdiff: Array1<Complex64>, grid: Grid1 },
}

impl PositionKernel {
    pub fn grid(&self) -> Grid1 {
        match self {
            PositionKernel::Diagonal { grid, .. } => *grid,
            PositionKernel::SumDiff { grid, .. } => *grid,
        }
    }

    /// Thin-crystal kernel from a pump profile.
    pub fn thin_crystal(pump_position: &Field1) -> Result<Self> {
        if pump_position.domain != Domain::Position {
            return Err(Error::GridMismatch("kernel needs the pump in position".into()));
        }
        Ok(PositionKernel::Diagonal {
            w: pump_position.values.clone(),
            grid: pump_position.grid,
        })
    }

    /// Double-Gaussian kernel: the position form of [`build_double_gaussian`],
    /// psi(x_s,x_i) ∝ exp(-sigma^2 (x_s+x_i)^2/16) exp(-(x_s-x_i)^2/(16 b^2)).
    pub fn double_gaussian(p: &DoubleGaussianParams, grid: Grid1) -> Self {
        let n = grid.n();
        let dx = grid.dx();
        let wsum = Array1::from_iter((0..(2 * n - 1)).map(|m| {
            let s = (m as f64 - n as f64) * dx;
            Complex64::new((-p.sigma * p.sigma * s * s / 16.0).exp(), 0.0)
        }));
        let gdiff = Array1::from_iter((0..(2 * n - 1)).map(|t| {
            let d = (t as f64 - (n as f64 - 1.0)) * dx;
            Complex64::new((-d * d / (16.0 * p.b * p.b)).exp(), 0.0)
        }));
        PositionKernel::SumDiff { wsum, gdiff, grid }
    }

    /// General product kernel from a pump profile on the mean coordinate and
    /// a correlation profile on the difference coordinate, both sampled from
    /// closures of the physical coordinate in meters.
    pub fn from_profiles(
        grid: Grid1,
        pump_at: impl Fn(f64) -> Complex64,
        corr_at: impl Fn(f64) -> Complex64,
    ) -> Self {
        let n = grid.n();
        let dx = grid.dx();
        let wsum = Array1::from_iter(
            (0..(2 * n - 1)).map(|m| pump_at((m as f64 - n as f64) * dx / 2.0)),
        );
        let gdiff = Array1::from_iter(
            (0..(2 * n - 1)).map(|t| corr_at((t as f64 - (n as f64 - 1.0)) * dx)),
        );
        PositionKernel::SumDiff { wsum, gdiff, grid }
    }

    /// Apply the kernel as an operator: (psi v)(x_s) = sum_k psi[s,k] v[k] dx.
    pub fn apply(&self, v: &Array1<Complex64>) -> Result<Array1<Complex64>> {
        match self {
            PositionKernel::Diagonal { w, grid } => {
                if v.len() != grid.n() {
                    return Err(Error::GridMismatch("kernel/vector size mismatch".into()));
                }
                Ok(Array1::from_iter(w.iter().zip(v.iter()).map(|(a, b)| a * b)))
            }
            PositionKernel::SumDiff { wsum, gdiff, grid } => {
                let n = grid.n();
                if v.len() != n {
                    return Err(Error::GridMismatch("kernel/vector size mismatch".into()));
                }
                let dx = grid.dx();
                let mut out = Array1::from_elem(n, Complex64::new(0.0, 0.0));
                for j in 0..n {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for k in 0..n {
                        acc += wsum[j + k] * gdiff[j + n - 1 - k] * v[k];
                    }
                    out[j] = acc * dx;
                }
                Ok(out)
            }
        }
    }

    /// Materialize the kernel as a normalized [`JointAmplitude`]; for tests
    /// and moderate grids only.
    pub fn dense(&self, photon_wavelength: f64) -> Result<JointAmplitude> {
        let grid = self.grid();
        let n = grid.n();
        let mut values = Array2::from_elem((n, n), Complex64::new(0.0, 0.0));
        match self {
            PositionKernel::Diagonal { w, .. } => {
                for j in 0..n {
                    values[[j, j]] = w[j];
                }
            }
            PositionKernel::SumDiff { wsum, gdiff, .. } => {
                for j in 0..n {
                    for k in 0..n {
                        values[[j, k]] = wsum[j + k] * gdiff[j + n - 1 - k];
                    }
                }
            }
        }
        let mut psi = JointAmplitude {
            grid_s: grid,
            grid_i: grid,
            domain: Domain::Position,
            photon_wavelength,
            values,
        };
        psi.normalize()?;
        Ok(psi)
    }
}

/// Coincidence slice at a fixed idler far-field bin after both photons pass
/// the same optical chain, computed without building the joint matrix:
/// the detection mode is carried backward through the transposed chain,
/// contracted with the kernel, and the result carried forward. Cost is a few
/// chain applications plus one kernel application.
pub fn coincidence_slice_through(
    kernel: &PositionKernel,
    chain: &TransferChain,
    idler_q_index: usize,
) -> Result<Real1> {
    let grid = kernel.grid();
    if !grid.same_as(&chain.grid) {
        return Err(Error::GridMismatch("kernel and chain grids differ".into()));
    }
    let back = chain.backpropagated_detection_mode(idler_q_index)?;
    let mid = kernel.apply(&back)?;
    let fwd = chain.apply(&mid)?;
    let mut buf = fwd.values.to_vec();
    fft::unitary_forward(&mut buf, grid.dx());
    let mut values = Array1::from_iter(buf.into_iter().map(|v| v.norm_sqr()));
    let total: f64 = values.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Degenerate("slice carried no power".into()));
    }
    values.mapv_inplace(|v| v / total);
    Ok(Real1 {
        grid: grid.conjugate(),
        wavelength: chain.wavelength,
        domain: Domain::Angular,
        values,
    })
}

/// Coincidence slice detected in the chain's output plane itself: the idler
/// detector sits at position bin `idler_x_index` and the signal detector
/// scans the same plane. Same contraction as [`coincidence_slice_through`]
/// but with a point detection mode and no final far-field transform.
/// Normalized so the samples sum to one.
pub fn coincidence_slice_at_receiver(
    kernel: &PositionKernel,
    chain: &TransferChain,
    idler_x_index: usize,
) -> Result<Real1> {
    let grid = kernel.grid();
    if !grid.same_as(&chain.grid) {
        return Err(Error::GridMismatch("kernel and chain grids differ".into()));
    }
    let back = chain.backpropagated_point_mode(idler_x_index)?;
    let mid = kernel.apply(&back)?;
    let fwd = chain.apply(&mid)?;
    let mut values = Array1::from_iter(fwd.values.iter().map(|v| v.norm_sqr()));
    let total: f64 = values.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Degenerate("slice carried no power".into()));
    }
    values.mapv_inplace(|v| v / total);
    Ok(Real1 { grid, wavelength: chain.wavelength, domain: Domain::Position, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_schmidt_number_basics() {
        let p = DoubleGaussianParams::new(2.0, 0.5).unwrap();
        assert!((p.schmidt_number() - 1.0).abs() < 1e-14);
        let p = DoubleGaussianParams::new(2.0, 0.25).unwrap();
        assert!((p.schmidt_number() - 1.5625).abs() < 1e-12);
        let p = DoubleGaussianParams::new(2.0, 0.025).unwrap();
        // strongly entangled regime: K ~ 1/(2 b sigma)^2 within 1% below 0.05
        let approx = 1.0 / (2.0 * 0.05f64).powi(2);
        assert!((p.schmidt_number() - approx).abs() / p.schmidt_number() < 0.01);
    }

    #[test]
    fn from_schmidt_number_round_trips() {
        for k in [1.0, 1.5, 10.0, 100.0, 680.0] {
            let p = DoubleGaussianParams::from_schmidt_number(k, 2.0).unwrap();
            assert!(
                (p.schmidt_number() - k).abs() < 1e-9 * k,
                "K = {k} -> {}",
                p.schmidt_number()
            );
        }
    }

    #[test]
    fn double_gaussian_state_is_symmetric_and_normalized() {
        let grid = Grid1::new(256, 64.0).unwrap();
        let p = DoubleGaussianParams::new(2.0, 0.1).unwrap();
        let psi = build_double_gaussian(&p, grid, 808e-9).unwrap();
        assert!((psi.norm_sqr() - 1.0).abs() < 1e-10);
        assert!(psi.exchange_asymmetry() < 1e-10);
    }

    #[test]
    fn double_gaussian_rejects_small_grid() {
        let grid = Grid1::new(64, 4.0).unwrap();
        let p = DoubleGaussianParams::new(100.0, 0.001).unwrap();
        assert!(build_double_gaussian(&p, grid, 808e-9).is_err());
    }

    #[test]
    fn separable_state_has_unit_schmidt_number() {
        let grid = Grid1::new(256, 32.0).unwrap();
        let p = DoubleGaussianParams::new(2.0, 0.5).unwrap(); // b sigma = 1
        let psi = build_double_gaussian(&p, grid, 808e-9).unwrap();
        let k = psi.schmidt_number_numeric().unwrap();
        assert!((k - 1.0).abs() < 1e-6, "K = {k}");
        let w = psi.largest_schmidt_weight().unwrap();
        assert!(w > 0.999, "largest weight {w}");
    }

    #[test]
    fn coincidence_slice_width_matches_sigma() {
        // fixed-idler slice of the model state: intensity width sigma/(1+O((b sigma)^2))
        let grid = Grid1::new(512, 256.0).unwrap();
        let p = DoubleGaussianParams::new(2.0, 0.05).unwrap();
        let psi = build_double_gaussian(&p, grid, 808e-9).unwrap();
        let slice = psi.coincidence_slice(grid.center()).unwrap();
        let qs: Vec<f64> = (0..slice.grid.n()).map(|j| slice.grid.x(j)).collect();
        let fit = crate::stats::fit_gaussian_width(&qs, slice.values.as_slice().unwrap()).unwrap();
        let expect = 1.0 / (1.0 / (p.sigma * p.sigma) + p.b * p.b).sqrt();
        assert!(
            (fit.width - expect).abs() < 0.01 * expect,
            "slice width {} vs {}",
            fit.width,
            expect
        );
    }

    #[test]
    fn singles_width_in_entangled_regime() {
        let grid = Grid1::new(512, 200.0).unwrap();
        let p = DoubleGaussianParams::new(2.0, 0.025).unwrap(); // b sigma = 0.05
        let psi = build_double_gaussian(&p, grid, 808e-9).unwrap();
        let singles = psi.singles_pattern().unwrap();
        let qs: Vec<f64> = (0..singles.grid.n()).map(|j| singles.grid.x(j)).collect();
        let fit =
            crate::stats::fit_gaussian_width(&qs, singles.values.as_slice().unwrap()).unwrap();
        // I(q) ∝ exp(-8 b^2 q^2): 1/e^2 half-width 1/(2b)
        let expect = 1.0 / (2.0 * p.b);
        assert!(
            (fit.width - expect).abs() < 0.02 * expect,
            "singles width {} vs {}",
            fit.width,
            expect
        );
    }

    #[test]
    fn width_estimator_recovers_schmidt_number() {
        let grid = Grid1::new(512, 200.0).unwrap();
        let p = DoubleGaussianParams::from_schmidt_number(100.0, 2.0).unwrap();
        let psi = build_double_gaussian(&p, grid, 808e-9).unwrap();
        let slice = psi.coincidence_slice(grid.center()).unwrap();
        let singles = psi.singles_pattern().unwrap();
        let qgrid: Vec<f64> = (0..slice.grid.n()).map(|j| slice.grid.x(j)).collect();
        let fc = crate::stats::fit_gaussian_width(&qgrid, slice.values.as_slice().unwrap()).unwrap();
        let fs =
            crate::stats::fit_gaussian_width(&qgrid, singles.values.as_slice().unwrap()).unwrap();
        let est = estimate_schmidt_from_widths(&fc, &fs).unwrap();
        assert!((est.k - 100.0).abs() < 5.0, "estimate {} +- {}", est.k, est.uncertainty);
    }

    #[test]
    fn width_estimator_rejects_weak_entanglement() {
        let fc = GaussianFit { width: 1.0, center: 0.0, amplitude: 1.0, sigma_width: 0.01 };
        let fs = GaussianFit { width: 2.0, center: 0.0, amplitude: 1.0, sigma_width: 0.01 };
        // implied b sigma = 0.25 > 0.2
        assert!(estimate_schmidt_from_widths(&fc, &fs).is_err());
    }

    #[test]
    fn local_phase_masks_preserve_schmidt_number() {
        let grid = Grid1::new(256, 64.0).unwrap();
        let p = DoubleGaussianParams::from_schmidt_number(10.0, 2.0).unwrap();
        let psi = build_double_gaussian(&p, grid, 808e-9).unwrap();
        let k0 = psi.schmidt_number_numeric().unwrap();
        let mut masked = psi.clone();
        for j in 0..grid.n() {
            let phs = (j as f64 * 0.37).sin() * 3.0;
            let phi = (j as f64 * 0.11).cos() * 2.0;
            let us = Complex64::new(phs.cos(), phs.sin());
            let ui = Complex64::new(phi.cos(), phi.sin());
            for k in 0..grid.n() {
                masked.values[[j, k]] *= us;
                masked.values[[k, j]] *= ui;
            }
        }
        let k1 = masked.schmidt_number_numeric().unwrap();
        assert!((k0 - k1).abs() < 1e-6 * k0, "{k0} vs {k1}");
        // a far-field transform is a local unitary on each photon too
        let k2 = psi.to_position().unwrap().schmidt_number_numeric().unwrap();
        assert!((k0 - k2).abs() < 1e-6 * k0, "{k0} vs {k2}");
    }

    #[test]
    fn thin_crystal_fast_path_gaussian_width() {
        // no medium: coincidence over the sum coordinate is the pump far
        // field, 1/e^2 half-width 2/w
        let grid = Grid1::new(1024, 16e-3).unwrap();
        let w = 1e-3;
        let pump = Field1::gaussian(grid, 404e-9, w);
        let ones = Array1::from_elem(grid.n(), Complex64::new(1.0, 0.0));
        let pat = thin_crystal_coincidence(&pump, &ones).unwrap();
        let qs: Vec<f64> = (0..pat.grid.n()).map(|j| pat.grid.x(j)).collect();
        let fit = crate::stats::fit_gaussian_width(&qs, pat.values.as_slice().unwrap()).unwrap();
        assert!((fit.width - 2.0 / w).abs() < 1e-3 * (2.0 / w));
    }

    #[test]
    fn diagonal_kernel_slice_equals_fast_path() {
        // with an empty chain the slice at the center idler bin must equal the
        // thin-crystal pattern restricted to the signal window
        let grid = Grid1::new(256, 8e-3).unwrap();
        let pump = Field1::gaussian(grid, 404e-9, 0.8e-3);
        let kernel = PositionKernel::thin_crystal(&pump).unwrap();
        let chain = TransferChain::new(grid, 808e-9);
        let slice = coincidence_slice_through(&kernel, &chain, grid.center()).unwrap();
        let ones = Array1::from_elem(grid.n(), Complex64::new(1.0, 0.0));
        let fast = thin_crystal_coincidence(&pump, &ones).unwrap();
        // A == 1 so A^2 == 1; patterns agree bin by bin after normalization
        for j in 0..grid.n() {
            assert!(
                (slice.values[j] - fast.values[j]).abs() < 1e-10,
                "bin {j}: {} vs {}",
                slice.values[j],
                fast.values[j]
            );
        }
    }

    #[test]
    fn resample_recovers_prestretched_pattern() {
        let grid = Grid1::new(512, 8e-3).unwrap();
        let qgrid = grid.conjugate();
        let w = 8000.0;
        // pump pattern exp(-2 q^2/w^2); coincidence the same shape at half the
        // photon momentum scale (so it appears stretched by 2 after mapping)
        let pump = Real1 {
            grid: qgrid,
            wavelength: 404e-9,
            domain: Domain::Angular,
            values: Array1::from_iter(
                (0..qgrid.n()).map(|j| (-2.0 * (qgrid.x(j) / w).powi(2)).exp()),
            ),
        };
        let coinc = Real1 {
            grid: qgrid,
            wavelength: 808e-9,
            domain: Domain::Angular,
            values: Array1::from_iter(
                (0..qgrid.n()).map(|j| (-2.0 * (2.0 * qgrid.x(j) / w).powi(2)).exp()),
            ),
        };
        let (res, pump_n) = resample_sum_coordinate(&coinc, &pump).unwrap();
        let corr = crate::stats::pearson_correlation(
            res.values.as_slice().unwrap(),
            pump_n.values.as_slice().unwrap(),
            None,
        )
        .unwrap();
        assert!(corr > 1.0 - 1e-6, "corr = {corr}");
    }

    #[test]
    fn exchange_symmetry_of_eq1_state() {
        let grid = Grid1::new(128, 32.0).unwrap();
        let qgrid = grid; // treat directly as an angular grid
        let pump = Field1 {
            grid: qgrid,
            wavelength: 404e-9,
            domain: Domain::Angular,
            values: Array1::from_iter(
                (0..qgrid.n()).map(|j| Complex64::new((-(qgrid.x(j) / 2.0).powi(2)).exp(), 0.0)),
            ),
        };
        let crystal = CrystalSpec::new(5e-3, 404e-9, 1.66).unwrap();
        let psi = build_state_eq1(&pump, &crystal, qgrid).unwrap();
        assert!(psi.exchange_asymmetry() < 1e-10);
        assert!((psi.norm_sqr() - 1.0).abs() < 1e-10);
        // the kernel is flat at this length scale, so the state must reduce
        // to the resampled pump: psi ∝ v(q_s + q_i)
        let n = qgrid.n();
        let mut expect = Array2::from_elem((n, n), Complex64::new(0.0, 0.0));
        for j in 0..n {
            for k in 0..n {
                let q = qgrid.x(j) + qgrid.x(k);
                expect[[j, k]] = Complex64::new((-(q / 2.0).powi(2)).exp(), 0.0);
            }
        }
        let scale = psi.values[[n / 2, n / 2]].re / expect[[n / 2, n / 2]].re;
        for j in 0..n {
            for k in 0..n {
                let err = (psi.values[[j, k]] - expect[[j, k]] * scale).norm();
                assert!(err < 1e-8 * scale, "mismatch at ({j},{k}): {err:.3e}");
            }
        }
    }
}
