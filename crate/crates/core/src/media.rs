//! Thin and volume diffusers: Gaussian-correlated optical path difference
//! maps, optional grain-wise absorption, the half-plane step plate, and the
//! tilt-memory probe.
//!
//! A diffuser is stored as wavelength-free physical maps (OPD in meters,
//! amplitude in [0, 1]); [`DiffuserRealization::transmission_at`] turns them
//! into a complex transmission at any wavelength, which is what lets the pump
//! and the photons see the same physical plate consistently.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fft;
use crate::field::Field1;
use crate::grid::{Grid1, Grid2};
use crate::stats::pearson_correlation;

/// Parameters of a random diffuser. `coherence_length_d` is the 1/e radius of
/// the Gaussian OPD autocorrelation (the transverse grain size).
/// `loss_strength_s` interpolates the grain-wise amplitude between 1 (s = 0,
/// phase-only) and uniform on (0, 1) (s = 1).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DiffuserSpec {
    pub coherence_length_d: f64,
    pub opd_rms: f64,
    pub loss_strength_s: f64,
    pub seed: u64,
}

impl DiffuserSpec {
    fn validate(&self) -> Result<()> {
        if !(self.coherence_length_d > 0.0) {
            return Err(Error::Config(format!(
                "diffuser grain size must be positive, got {}",
                self.coherence_length_d
            )));
        }
        if !(self.opd_rms >= 0.0) {
            return Err(Error::Config(format!("opd_rms must be >= 0, got {}", self.opd_rms)));
        }
        if !(0.0..=1.0).contains(&self.loss_strength_s) {
            return Err(Error::Config(format!(
                "loss_strength_s must lie in [0,1], got {}",
                self.loss_strength_s
            )));
        }
        Ok(())
    }
}

/// One synthesized diffuser on a 1D grid.
#[derive(Debug, Clone)]
pub struct DiffuserRealization {
    pub grid: Grid1,
    /// Optical path difference in meters.
    pub opd_map: Array1<f64>,
    /// Field amplitude transmission in [0, 1].
    pub amplitude_map: Array1<f64>,
}

/// One synthesized diffuser on a 2D grid, row-major `[y, x]`.
#[derive(Debug, Clone)]
pub struct DiffuserRealization2 {
    pub grid: Grid2,
    pub opd_map: Array2<f64>,
    pub amplitude_map: Array2<f64>,
}

impl DiffuserRealization {
    /// The do-nothing plate.
    pub fn unity(grid: Grid1) -> Self {
        Self {
            grid,
            opd_map: Array1::zeros(grid.n()),
            amplitude_map: Array1::from_elem(grid.n(), 1.0),
        }
    }

    /// Complex transmission A(x) = t(x) exp(i 2 pi OPD(x) / lambda). The same
    /// plate gives different phase maps at different wavelengths; material
    /// dispersion over one octave is neglected.
    pub fn transmission_at(&self, wavelength: f64) -> Array1<Complex64> {
        let c = 2.0 * std::f64::consts::PI / wavelength;
        Array1::from_iter(self.opd_map.iter().zip(self.amplitude_map.iter()).map(
            |(&o, &a)| {
                let ph = c * o;
                Complex64::new(a * ph.cos(), a * ph.sin())
            },
        ))
    }

    /// Cyclically shift the plate by `shift` meters (rounded to whole
    /// samples), as a moving diffuser in a periodic window.
    pub fn translate(&self, shift: f64) -> Self {
        let n = self.grid.n();
        let s = ((shift / self.grid.dx()).round() as i64).rem_euclid(n as i64) as usize;
        let mut opd = self.opd_map.to_vec();
        let mut amp = self.amplitude_map.to_vec();
        opd.rotate_right(s);
        amp.rotate_right(s);
        Self {
            grid: self.grid,
            opd_map: Array1::from_vec(opd),
            amplitude_map: Array1::from_vec(amp),
        }
    }
}

impl DiffuserRealization2 {
    pub fn transmission_at(&self, wavelength: f64) -> Array2<Complex64> {
        let c = 2.0 * std::f64::consts::PI / wavelength;
        let mut out = Array2::from_elem(self.opd_map.dim(), Complex64::new(0.0, 0.0));
        for ((o, a), v) in
            self.opd_map.iter().zip(self.amplitude_map.iter()).zip(out.iter_mut())
        {
            let ph = c * o;
            *v = Complex64::new(a * ph.cos(), a * ph.sin());
        }
        out
    }
}

fn grain_resolution_guard(dx: f64, d: f64) -> Result<usize> {
    if dx > d / 4.0 {
        return Err(Error::UnderResolved(format!(
            "grain size {d:.3e} m needs dx <= d/4, grid has dx = {dx:.3e} m"
        )));
    }
    Ok(((d / dx).round() as usize).max(1))
}

/// Synthesize a diffuser with Gaussian autocorrelation
/// opd_rms^2 exp(-r^2/d^2): white complex Gaussian spectral noise shaped by
/// the square root of the matching power spectrum, inverse transformed, and
/// scaled to the requested RMS analytically (from the filter, not from the
/// realization, so stationarity is preserved). The amplitude map is piecewise
/// constant on grain-sized cells.
pub fn synth_diffuser(spec: &DiffuserSpec, grid: Grid1) -> Result<DiffuserRealization> {
    spec.validate()?;
    let n = grid.n();
    let spc = grain_resolution_guard(grid.dx(), spec.coherence_length_d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let opd_map = if spec.opd_rms > 0.0 {
        let qgrid = grid.conjugate();
        let d = spec.coherence_length_d;
        let mut filt2_sum = 0.0f64;
        let mut buf: Vec<Complex64> = (0..n)
            .map(|j| {
                let q = qgrid.x(j);
                let f = (-q * q * d * d / 8.0).exp();
                filt2_sum += f * f;
                let g1: f64 = rng.sample(rand_distr::StandardNormal);
                let g2: f64 = rng.sample(rand_distr::StandardNormal);
                Complex64::new(g1 * f, g2 * f)
            })
            .collect();
        fft::centered_dft(&mut buf, false);
        // Var[Re h] = sum_k f_k^2 under the unnormalized inverse
        let scale = spec.opd_rms / filt2_sum.sqrt();
        Array1::from_iter(buf.iter().map(|v| v.re * scale))
    } else {
        Array1::zeros(n)
    };

    let amplitude_map = if spec.loss_strength_s > 0.0 {
        let mut amp = Array1::from_elem(n, 1.0);
        let cells = n.div_ceil(spc);
        for c in 0..cells {
            let t = 1.0 - spec.loss_strength_s * rng.random::<f64>();
            for i in (c * spc)..((c + 1) * spc).min(n) {
                amp[i] = t;
            }
        }
        amp
    } else {
        Array1::from_elem(n, 1.0)
    };

    Ok(DiffuserRealization { grid, opd_map, amplitude_map })
}

/// 2D analogue of [`synth_diffuser`] with the isotropic autocorrelation
/// opd_rms^2 exp(-(x^2+y^2)/d^2) and square grain cells.
pub fn synth_diffuser_2d(spec: &DiffuserSpec, grid: Grid2) -> Result<DiffuserRealization2> {
    spec.validate()?;
    let (ny, nx) = (grid.ny(), grid.nx());
    let spc_x = grain_resolution_guard(grid.gx.dx(), spec.coherence_length_d)?;
    let spc_y = grain_resolution_guard(grid.gy.dx(), spec.coherence_length_d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let opd_map = if spec.opd_rms > 0.0 {
        let qx = grid.gx.conjugate();
        let qy = grid.gy.conjugate();
        let d = spec.coherence_length_d;
        let mut filt2_sum = 0.0f64;
        let mut buf = Array2::from_elem((ny, nx), Complex64::new(0.0, 0.0));
        for iy in 0..ny {
            let qy2 = qy.x(iy) * qy.x(iy);
            for ix in 0..nx {
                let q2 = qy2 + qx.x(ix) * qx.x(ix);
                let f = (-q2 * d * d / 8.0).exp();
                filt2_sum += f * f;
                let g1: f64 = rng.sample(rand_distr::StandardNormal);
                let g2: f64 = rng.sample(rand_distr::StandardNormal);
                buf[[iy, ix]] = Complex64::new(g1 * f, g2 * f);
            }
        }
        // separable centered inverse along both axes
        let mut row: Vec<Complex64> = Vec::with_capacity(nx);
        for iy in 0..ny {
            row.clear();
            row.extend(buf.row(iy).iter().copied());
            fft::centered_dft(&mut row, false);
            for (ix, v) in row.iter().enumerate() {
                buf[[iy, ix]] = *v;
            }
        }
        let mut col: Vec<Complex64> = Vec::with_capacity(ny);
        for ix in 0..nx {
            col.clear();
            col.extend(buf.column(ix).iter().copied());
            fft::centered_dft(&mut col, false);
            for (iy, v) in col.iter().enumerate() {
                buf[[iy, ix]] = *v;
            }
        }
        let scale = spec.opd_rms / filt2_sum.sqrt();
        buf.mapv(|v| v.re * scale)
    } else {
        Array2::zeros((ny, nx))
    };

    let amplitude_map = if spec.loss_strength_s > 0.0 {
        let mut amp = Array2::from_elem((ny, nx), 1.0);
        let cy = ny.div_ceil(spc_y);
        let cx = nx.div_ceil(spc_x);
        for gy in 0..cy {
            for gx in 0..cx {
                let t = 1.0 - spec.loss_strength_s * rng.random::<f64>();
                for iy in (gy * spc_y)..((gy + 1) * spc_y).min(ny) {
                    for ix in (gx * spc_x)..((gx + 1) * spc_x).min(nx) {
                        amp[[iy, ix]] = t;
                    }
                }
            }
        }
        amp
    } else {
        Array2::from_elem((ny, nx), 1.0)
    };

    Ok(DiffuserRealization2 { grid, opd_map, amplitude_map })
}

/// Half-plane step plate: OPD jumps by a quarter of the design wavelength on
/// each side of x = 0. At the design wavelength the two halves are +-pi/2
/// (relative step pi); at half the design wavelength the step is a full turn.
pub fn pi_step_mask(grid: Grid1, design_wavelength: f64) -> DiffuserRealization {
    let n = grid.n();
    let opd = Array1::from_iter((0..n).map(|i| {
        let side = if grid.x(i) >= 0.0 { 1.0 } else { -1.0 };
        side * design_wavelength / 4.0
    }));
    DiffuserRealization { grid, opd_map: opd, amplitude_map: Array1::from_elem(n, 1.0) }
}

// ---------------------------------------------------------------------------
// Volume diffuser
// ---------------------------------------------------------------------------

/// Two thin plates separated by a free-space gap: the minimal medium with a
/// finite tilt memory range (a single thin plate is tilt-invariant).
#[derive(Debug, Clone)]
pub struct VolumeDiffuser {
    pub first: DiffuserRealization,
    pub second: DiffuserRealization,
    pub gap_z: f64,
}

impl VolumeDiffuser {
    /// Degenerate single-plate medium, for sharing code paths with the thin
    /// case.
    pub fn thin(plate: DiffuserRealization) -> Self {
        let unity = DiffuserRealization::unity(plate.grid);
        Self { first: plate, second: unity, gap_z: 0.0 }
    }

    /// Push a field through plate, gap, plate. Returns the output field and
    /// the evanescent power fraction clipped in the gap.
    pub fn apply(&self, field: &Field1, guard: Option<f64>) -> Result<(Field1, f64)> {
        if !field.grid.same_as(&self.first.grid) || !field.grid.same_as(&self.second.grid) {
            return Err(Error::GridMismatch("field and diffuser grids differ".into()));
        }
        let mut f = field.clone();
        f.apply_mask(&self.first.transmission_at(f.wavelength))?;
        let mut clipped = 0.0;
        if self.gap_z != 0.0 {
            let prop = f.propagate(self.gap_z, guard)?;
            f = prop.field;
            clipped = prop.clipped_power_fraction;
        }
        f.apply_mask(&self.second.transmission_at(f.wavelength))?;
        Ok((f, clipped))
    }
}

/// Tilt-memory curve: the probe is tilted by each angle, pushed through the
/// medium, de-tilted at the exit, and its far-field intensity is correlated
/// against the untilted reference. `mask` restricts the correlation to a
/// region of the angular window (to stay inside the scattering halo).
pub fn memory_effect_curve(
    medium: &VolumeDiffuser,
    probe: &Field1,
    angles: &[f64],
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let (ref_out, _) = medium.apply(probe, None)?;
    let ref_pattern = ref_out.far_field(1.0)?.intensity();
    let mut curve = Vec::with_capacity(angles.len());
    for &a in angles {
        let mut tilted = probe.clone();
        tilted.tilt(a);
        let (mut out, _) = medium.apply(&tilted, None)?;
        out.tilt(-a);
        let pattern = out.far_field(1.0)?.intensity();
        curve.push(pearson_correlation(
            pattern.values.as_slice().unwrap(),
            ref_pattern.values.as_slice().unwrap(),
            mask,
        )?);
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Phase-only correction bounds
// ---------------------------------------------------------------------------

/// Upper bound on the focusing efficiency of phase-only correction behind an
/// amplitude pattern t: aligning the phases of N segments with amplitudes t_i
/// concentrates |sum t_i|^2 out of N sum t_i^2 achievable with full control,
/// giving <t>^2 / <t^2> = 1 / (1 + var/mean^2) as N grows.
pub fn phase_only_efficiency_bound(amplitudes: &[f64]) -> Result<f64> {
    if amplitudes.is_empty() {
        return Err(Error::Degenerate("no amplitudes given".into()));
    }
    let n = amplitudes.len() as f64;
    let mean: f64 = amplitudes.iter().sum::<f64>() / n;
    let m2: f64 = amplitudes.iter().map(|t| t * t).sum::<f64>() / n;
    if !(m2 > 0.0) {
        return Err(Error::Degenerate("all amplitudes vanish".into()));
    }
    Ok(mean * mean / m2)
}

/// Exact bound for amplitudes uniform on (0, 1): mean 1/2, second moment 1/3,
/// so (1/2)^2 / (1/3) = 3/4. This is what a singles or classical detector
/// behind a fully developed lossy diffuser can recover.
pub fn uniform_amplitude_bound() -> f64 {
    0.75
}

/// Exact bound for the squares of amplitudes uniform on (0, 1): the pair
/// channel sees t^2, with mean 1/3 and second moment 1/5, so
/// (1/3)^2 / (1/5) = 5/9.
pub fn uniform_intensity_bound() -> f64 {
    5.0 / 9.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesized_opd_has_requested_rms_and_correlation() {
        let grid = Grid1::new(32768, 32768.0).unwrap(); // dx = 1
        let spec = DiffuserSpec {
            coherence_length_d: 16.0,
            opd_rms: 3.7,
            loss_strength_s: 0.0,
            seed: 11,
        };
        let r = synth_diffuser(&spec, grid).unwrap();
        let n = grid.n();
        let var: f64 = r.opd_map.iter().map(|o| o * o).sum::<f64>() / n as f64;
        assert!(
            (var.sqrt() - spec.opd_rms).abs() < 0.1 * spec.opd_rms,
            "rms {} vs {}",
            var.sqrt(),
            spec.opd_rms
        );
        // autocovariance at lag d must sit at rms^2/e
        let lag = 16usize;
        let mut acf = 0.0;
        for i in 0..n {
            acf += r.opd_map[i] * r.opd_map[(i + lag) % n];
        }
        acf /= n as f64;
        let target = spec.opd_rms * spec.opd_rms / std::f64::consts::E;
        assert!((acf - target).abs() < 0.12 * target, "acf {acf} vs {target}");
    }

    #[test]
    fn lossy_amplitudes_are_grainwise_constant_and_uniform() {
        let grid = Grid1::new(8192, 8192.0).unwrap();
        let spec =
            DiffuserSpec { coherence_length_d: 8.0, opd_rms: 0.0, loss_strength_s: 1.0, seed: 3 };
        let r = synth_diffuser(&spec, grid).unwrap();
        for c in 0..(8192 / 8) {
            let t0 = r.amplitude_map[c * 8];
            assert!((0.0..=1.0).contains(&t0));
            for i in 1..8 {
                assert_eq!(r.amplitude_map[c * 8 + i], t0, "grain {c} not constant");
            }
        }
        let cells: Vec<f64> = (0..(8192 / 8)).map(|c| r.amplitude_map[c * 8]).collect();
        let mean = cells.iter().sum::<f64>() / cells.len() as f64;
        let m2 = cells.iter().map(|t| t * t).sum::<f64>() / cells.len() as f64;
        assert!((mean - 0.5).abs() < 0.03, "mean {mean}");
        assert!((m2 - 1.0 / 3.0).abs() < 0.03, "second moment {m2}");
    }

    #[test]
    fn ballistic_attenuation_matches_phase_variance() {
        // at 1 rad RMS phase the coherent (ballistic) amplitude is e^{-1/2}
        let grid = Grid2::square(1024, 1024.0).unwrap();
        let wavelength = 0.808;
        let spec = DiffuserSpec {
            coherence_length_d: 8.0,
            opd_rms: wavelength / (2.0 * std::f64::consts::PI),
            loss_strength_s: 0.0,
            seed: 21,
        };
        let r = synth_diffuser_2d(&spec, grid).unwrap();
        let a = r.transmission_at(wavelength);
        let mean = a.iter().sum::<Complex64>() / (a.len() as f64);
        let ballistic = mean.norm_sqr();
        let expect = (-1.0f64).exp();
        assert!(
            (ballistic - expect).abs() < 0.1 * expect,
            "ballistic {ballistic} vs {expect}"
        );
    }

    #[test]
    fn step_plate_squares_to_a_global_constant() {
        let grid = Grid1::new(512, 1.0e-2).unwrap();
        let lam = 808e-9;
        let plate = pi_step_mask(grid, lam);
        let a = plate.transmission_at(lam);
        for v in a.iter() {
            let sq = v * v;
            assert!((sq + Complex64::new(1.0, 0.0)).norm() < 1e-12, "A^2 = {sq}");
        }
        // at half the design wavelength the plate is a full turn: invisible
        let a_pump = plate.transmission_at(lam / 2.0);
        for v in a_pump.iter() {
            assert!((v + Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn single_thin_plate_has_unbounded_memory_range() {
        let grid = Grid1::new(2048, 10e-3).unwrap();
        let spec = DiffuserSpec {
            coherence_length_d: 100e-6,
            opd_rms: 404e-9,
            loss_strength_s: 0.0,
            seed: 5,
        };
        let plate = synth_diffuser(&spec, grid).unwrap();
        let medium = VolumeDiffuser::thin(plate);
        let probe = Field1::gaussian(grid, 808e-9, 2.5e-3);
        let angles = [0.0, 5e-3, 20e-3, 50e-3];
        let curve = memory_effect_curve(&medium, &probe, &angles, None).unwrap();
        for (a, c) in angles.iter().zip(curve.iter()) {
            assert!(*c > 1.0 - 1e-9, "angle {a}: corr {c}");
        }
    }

    #[test]
    fn two_plate_memory_range_scales_as_grain_over_gap() {
        // The geometric estimate d/gap presumes a weakly rough screen (about
        // a radian of phase); rougher plates decorrelate measurably faster.
        let grid = Grid1::new(4096, 10e-3).unwrap();
        let gap = 3e-3;
        let d = 100e-6;
        let mk = |seed| {
            synth_diffuser(
                &DiffuserSpec {
                    coherence_length_d: d,
                    opd_rms: 100e-9,
                    loss_strength_s: 0.0,
                    seed,
                },
                grid,
            )
            .unwrap()
        };
        let theta_c = d / gap;
        let angles: Vec<f64> = (0..21).map(|i| i as f64 * theta_c / 10.0).collect();
        // average over a few plate pairs to tame speckle noise
        let mut avg = vec![0.0; angles.len()];
        let runs = 6;
        for s in 0..runs {
            let medium = VolumeDiffuser { first: mk(40 + s), second: mk(80 + s), gap_z: gap };
            let probe = Field1::gaussian(grid, 808e-9, 2.5e-3);
            // correlate inside the scattering halo, away from the unscattered
            // spike a weak screen leaves at the center
            let (out, _) = medium.apply(&probe, None).unwrap();
            let halo = out.far_field(1.0).unwrap().intensity();
            let qgrid = halo.grid;
            let q_excl = 6.0 * qgrid.dx();
            let peak = (0..qgrid.n())
                .filter(|&j| qgrid.x(j).abs() > q_excl)
                .fold(0.0f64, |m, j| m.max(halo.values[j]));
            let mask: Vec<bool> = (0..qgrid.n())
                .map(|j| qgrid.x(j).abs() > q_excl && halo.values[j] > 0.05 * peak)
                .collect();
            let curve = memory_effect_curve(&medium, &probe, &angles, Some(&mask)).unwrap();
            for (a, c) in avg.iter_mut().zip(curve.iter()) {
                *a += c / runs as f64;
            }
        }
        // locate the half-correlation crossing
        let mut theta_half = None;
        for w in 1..angles.len() {
            if avg[w] < 0.5 && avg[w - 1] >= 0.5 {
                let f = (0.5 - avg[w - 1]) / (avg[w] - avg[w - 1]);
                theta_half = Some(angles[w - 1] + f * (angles[w] - angles[w - 1]));
                break;
            }
        }
        let theta_half = theta_half.expect("memory curve never crossed 1/2");
        assert!(
            theta_half > 0.5 * theta_c && theta_half < 2.0 * theta_c,
            "half-memory angle {theta_half:.4} vs d/gap {theta_c:.4}"
        );
    }

    #[test]
    fn efficiency_bound_of_uniform_amplitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t: Vec<f64> = (0..200_000).map(|_| rng.random::<f64>()).collect();
        let b = phase_only_efficiency_bound(&t).unwrap();
        assert!((b - uniform_amplitude_bound()).abs() < 0.01, "bound {b}");
        let t2: Vec<f64> = t.iter().map(|x| x * x).collect();
        let b2 = phase_only_efficiency_bound(&t2).unwrap();
        assert!((b2 - uniform_intensity_bound()).abs() < 0.01, "bound {b2}");
        let flat = vec![0.7; 100];
        assert!((phase_only_efficiency_bound(&flat).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn translate_is_cyclic_in_samples() {
        let grid = Grid1::new(256, 256.0).unwrap();
        let spec =
            DiffuserSpec { coherence_length_d: 8.0, opd_rms: 1.0, loss_strength_s: 0.0, seed: 7 };
        let r = synth_diffuser(&spec, grid).unwrap();
        let t = r.translate(3.0);
        for i in 0..256 {
            assert_eq!(t.opd_map[(i + 3) % 256], r.opd_map[i]);
        }
        let back = t.translate(-3.0);
        for i in 0..256 {
            assert_eq!(back.opd_map[i], r.opd_map[i]);
        }
    }

    #[test]
    fn volume_apply_rejects_foreign_grid() {
        let grid = Grid1::new(256, 1e-2).unwrap();
        let other = Grid1::new(128, 1e-2).unwrap();
        let medium = VolumeDiffuser::thin(DiffuserRealization::unity(grid));
        let probe = Field1::gaussian(other, 808e-9, 2e-3);
        assert!(medium.apply(&probe, None).is_err());
    }
}
