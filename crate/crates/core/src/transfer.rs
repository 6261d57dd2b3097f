//! Linear optical systems as ordered chains of thin masks and free-space
//! propagation steps, with transpose application for reciprocal-path
//! calculations.
//!
//! Every element here is a symmetric matrix in the position basis: masks are
//! diagonal, and the angular-spectrum propagator F^-1 D F equals its own
//! transpose because the kernel D(q) is even in q and the centered unitary DFT
//! F is symmetric. The transpose of a whole chain is therefore the same
//! elements applied in reverse order, which is what `apply_transposed` does.
//! This is the discrete form of optical reciprocity and is what lets a
//! detection mode be carried backward through the system at FFT cost.

use ndarray::Array1;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::{Field1, DEFAULT_ALIAS_GUARD};
use crate::grid::{Domain, Grid1};

/// One thin element of an optical train.
#[derive(Debug, Clone)]
pub enum Element {
    /// Pointwise complex transmission in the position plane.
    Mask(Array1<Complex64>),
    /// Free-space propagation over a distance in meters.
    Propagate(f64),
}

/// An ordered train of elements at a fixed wavelength on a fixed grid.
/// `elements[0]` acts first.
#[derive(Debug, Clone)]
pub struct TransferChain {
    pub grid: Grid1,
    pub wavelength: f64,
    pub elements: Vec<Element>,
    /// Aliasing-guard threshold handed to every propagation step.
    pub alias_guard: f64,
}

/// Output of a chain application with propagation diagnostics.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub values: Array1<Complex64>,
    /// Largest evanescent-clip fraction seen across the propagation steps.
    pub max_clipped_fraction: f64,
}

impl TransferChain {
    pub fn new(grid: Grid1, wavelength: f64) -> Self {
        Self { grid, wavelength, elements: Vec::new(), alias_guard: DEFAULT_ALIAS_GUARD }
    }

    pub fn push_mask(&mut self, mask: Array1<Complex64>) -> Result<()> {
        if mask.len() != self.grid.n() {
            return Err(Error::GridMismatch(format!(
                "mask has {} samples, chain grid has {}",
                mask.len(),
                self.grid.n()
            )));
        }
        self.elements.push(Element::Mask(mask));
        Ok(())
    }

    pub fn push_propagation(&mut self, z: f64) {
        self.elements.push(Element::Propagate(z));
    }

    /// Apply the chain in forward order (position domain in, position domain out).
    pub fn apply(&self, input: &Array1<Complex64>) -> Result<ChainOutput> {
        self.run(input, false)
    }

    /// Apply the transposed chain: same elements, reverse order. See the
    /// module docs for why each element is its own transpose.
    pub fn apply_transposed(&self, input: &Array1<Complex64>) -> Result<ChainOutput> {
        self.run(input, true)
    }

    fn run(&self, input: &Array1<Complex64>, reversed: bool) -> Result<ChainOutput> {
        if input.len() != self.grid.n() {
            return Err(Error::GridMismatch(format!(
                "input has {} samples, chain grid has {}",
                input.len(),
                self.grid.n()
            )));
        }
        let mut field = Field1::new(self.grid, self.wavelength, Domain::Position, input.clone())?;
        let mut max_clip = 0.0f64;
        let order: Box<dyn Iterator<Item = &Element>> = if reversed {
            Box::new(self.elements.iter().rev())
        } else {
            Box::new(self.elements.iter())
        };
        for el in order {
            match el {
                Element::Mask(m) => field.apply_mask(m)?,
                Element::Propagate(z) => {
                    let out = field.propagate(*z, Some(self.alias_guard))?;
                    max_clip = max_clip.max(out.clipped_power_fraction);
                    field = out.field;
                }
            }
        }
        Ok(ChainOutput { values: field.values, max_clipped_fraction: max_clip })
    }

    /// Forward-apply the chain and return the far-field amplitude on the
    /// conjugate grid (the receiver's angular spectrum).
    pub fn apply_to_far_field(&self, input: &Array1<Complex64>) -> Result<Field1> {
        let out = self.apply(input)?;
        let f = Field1::new(self.grid, self.wavelength, Domain::Position, out.values)?;
        f.far_field(1.0)
    }

    /// The detection mode of position bin `x_index` in the chain's output
    /// plane carried backward to the input plane: a unit sample at that bin,
    /// transformed through the transposed chain. Scale is arbitrary; slice
    /// consumers normalize afterwards.
    ///
    /// Detection modes are not power-transport objects: a point's
    /// backpropagation is a spherical wave that fills the window by
    /// construction, so the edge-power guard is suspended for this pass.
    pub fn backpropagated_point_mode(&self, x_index: usize) -> Result<Array1<Complex64>> {
        let n = self.grid.n();
        if x_index >= n {
            return Err(Error::GridMismatch(format!(
                "x index {x_index} out of range for n = {n}"
            )));
        }
        let mut mode = Array1::zeros(n);
        mode[x_index] = Complex64::new(1.0, 0.0);
        let mut relaxed = self.clone();
        relaxed.alias_guard = 1.0;
        Ok(relaxed.apply_transposed(&mode)?.values)
    }

    /// The detection mode of far-field bin `q_index` carried backward to the
    /// input plane: the plane wave exp(-i q x), transformed through the
    /// transposed chain. This is the column the coincidence-slice contraction
    /// needs. The edge-power guard is suspended for the same reason as in
    /// [`Self::backpropagated_point_mode`]: a plane wave occupies the whole
    /// window by definition.
    pub fn backpropagated_detection_mode(&self, q_index: usize) -> Result<Array1<Complex64>> {
        let n = self.grid.n();
        if q_index >= n {
            return Err(Error::GridMismatch(format!(
                "q index {q_index} out of range for n = {n}"
            )));
        }
        let qgrid = self.grid.conjugate();
        let q = qgrid.x(q_index);
        let scale = self.grid.dx() / (2.0 * std::f64::consts::PI).sqrt();
        let mode = Array1::from_iter(self.grid.xs().map(|x| {
            let ph = -q * x;
            Complex64::new(ph.cos(), ph.sin()) * scale
        }));
        let mut relaxed = self.clone();
        relaxed.alias_guard = 1.0;
        Ok(relaxed.apply_transposed(&mode)?.values)
    }
}

/// Verify numerically that a chain is symmetric: <a, T b> = <T a, b> for the
/// bilinear (unconjugated) pairing. Exposed for tests and debugging.
pub fn bilinear_pairing(a: &Array1<Complex64>, b: &Array1<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LAMBDA: f64 = 808e-9;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<Complex64> {
        Array1::from_iter((0..n).map(|_| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        }))
    }

    fn gaussian_windowed(n: usize, grid: Grid1, rng: &mut ChaCha8Rng) -> Array1<Complex64> {
        // random field under a Gaussian envelope so propagation stays in-window
        let w = grid.extent() / 12.0;
        Array1::from_iter((0..n).map(|i| {
            let x = grid.x(i);
            let env = (-x * x / (w * w)).exp();
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * env
        }))
    }

    #[test]
    fn chain_transpose_is_adjoint_under_bilinear_pairing() {
        let grid = Grid1::new(512, 8e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut chain = TransferChain::new(grid, LAMBDA);
        // a smooth random phase mask between two propagation steps
        let mask = Array1::from_iter((0..512).map(|i| {
            let ph = (i as f64 * 0.013).sin() * 2.0;
            Complex64::new(ph.cos(), ph.sin())
        }));
        chain.push_propagation(0.05);
        chain.push_mask(mask).unwrap();
        chain.push_propagation(0.02);

        let a = gaussian_windowed(512, grid, &mut rng);
        let b = gaussian_windowed(512, grid, &mut rng);
        let ta = chain.apply(&a).unwrap().values;
        let ttb = chain.apply_transposed(&b).unwrap().values;
        let lhs = bilinear_pairing(&ta, &b);
        let rhs = bilinear_pairing(&a, &ttb);
        assert!(
            (lhs - rhs).norm() < 1e-10 * lhs.norm().max(1e-30),
            "pairing mismatch: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn mask_only_chain_transpose_equals_forward() {
        let grid = Grid1::new(128, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut chain = TransferChain::new(grid, LAMBDA);
        let m1 = random_vec(128, &mut rng);
        let m2 = random_vec(128, &mut rng);
        chain.push_mask(m1).unwrap();
        chain.push_mask(m2).unwrap();
        let v = random_vec(128, &mut rng);
        let f = chain.apply(&v).unwrap().values;
        let t = chain.apply_transposed(&v).unwrap().values;
        // diagonal matrices commute, so order reversal changes nothing
        for i in 0..128 {
            assert!((f[i] - t[i]).norm() < 1e-14);
        }
    }

    #[test]
    fn backpropagated_mode_of_empty_chain_is_plane_wave() {
        let grid = Grid1::new(256, 4e-3).unwrap();
        let chain = TransferChain::new(grid, LAMBDA);
        let i0 = 200;
        let mode = chain.backpropagated_detection_mode(i0).unwrap();
        let q = grid.conjugate().x(i0);
        let scale = grid.dx() / (2.0 * std::f64::consts::PI).sqrt();
        for i in 0..256 {
            let x = grid.x(i);
            let want = Complex64::new((q * x).cos(), -(q * x).sin()) * scale;
            assert!((mode[i] - want).norm() < 1e-14);
        }
    }
}
