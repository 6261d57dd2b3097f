//! Segmented-mirror pump shaping with classical or photon-counting feedback:
//! SLM segmentation, target-band metrics, stepwise and partitioning
//! optimizers, counting noise, enhancement statistics, and closed-loop runs
//! against a drifting medium.
//!
//! The optimizers are generic over a forward model `mask -> far-field
//! patterns`, so the same loop drives a thin diffuser at the image plane, a
//! two-plate volume diffuser, or a turbulent link. The model returns the
//! pump and coincidence patterns on a common conjugate grid (the geometric
//! q grid is wavelength-free, and the thin-crystal identity puts the pair
//! sum-coordinate pattern and the pump far field on the same bins), so one
//! target-cell list scores both channels.

use ndarray::Array1;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::Real1;
use crate::seeds::derive_seed;
use crate::stats;

// ---------------------------------------------------------------------------
// SLM segmentation
// ---------------------------------------------------------------------------

/// A segmented phase modulator over a 1D pump plane: `layout` holds the
/// half-open cell spans of the N segments, contiguous and non-overlapping.
/// Cells outside every segment pass unmodulated (the region beyond the
/// active aperture).
#[derive(Debug, Clone)]
pub struct SlmConfig {
    pub layout: Vec<(usize, usize)>,
    /// Probe phase levels per segment; >= 3 so a cosine response is
    /// determined.
    pub phase_levels: usize,
    /// Seconds per mask update; every probe advances the clock by this.
    pub response_time: f64,
}

impl SlmConfig {
    /// N equal segments tiling the whole grid.
    pub fn uniform(grid_n: usize, n_segments: usize, phase_levels: usize) -> Result<Self> {
        Self::uniform_over(grid_n, n_segments, (0, grid_n), phase_levels)
    }

    /// N near-equal segments tiling `span` (half-open cell range), identity
    /// outside. A single segment is allowed and controls only a global
    /// phase; it is the no-freedom sanity anchor.
    pub fn uniform_over(
        grid_n: usize,
        n_segments: usize,
        span: (usize, usize),
        phase_levels: usize,
    ) -> Result<Self> {
        let (lo, hi) = span;
        if !(lo < hi && hi <= grid_n) {
            return Err(Error::Config(format!(
                "segment span {lo}..{hi} does not fit a {grid_n}-cell grid"
            )));
        }
        let width = hi - lo;
        if n_segments == 0 || n_segments > width {
            return Err(Error::Config(format!(
                "cannot cut {width} cells into {n_segments} segments"
            )));
        }
        if phase_levels < 3 {
            return Err(Error::Config(format!(
                "need at least 3 phase levels to fit a cosine, got {phase_levels}"
            )));
        }
        let layout = (0..n_segments)
            .map(|t| {
                let a = lo + t * width / n_segments;
                let b = lo + (t + 1) * width / n_segments;
                (a, b)
            })
            .collect();
        Ok(Self { layout, phase_levels, response_time: 0.1 })
    }

    pub fn n_segments(&self) -> usize {
        self.layout.len()
    }

    /// Expand per-segment phases to a full-grid complex mask.
    pub fn mask(&self, phases: &[f64], grid_n: usize) -> Result<Array1<Complex64>> {
        if phases.len() != self.layout.len() {
            return Err(Error::Config(format!(
                "{} phases for {} segments",
                phases.len(),
                self.layout.len()
            )));
        }
        let mut mask = Array1::from_elem(grid_n, Complex64::new(1.0, 0.0));
        for (&(a, b), &ph) in self.layout.iter().zip(phases.iter()) {
            if b > grid_n {
                return Err(Error::GridMismatch(format!(
                    "segment {a}..{b} beyond the {grid_n}-cell grid"
                )));
            }
            let v = Complex64::new(ph.cos(), ph.sin());
            for cell in mask.slice_mut(ndarray::s![a..b]).iter_mut() {
                *cell = v;
            }
        }
        Ok(mask)
    }
}

// ---------------------------------------------------------------------------
// Feedback
// ---------------------------------------------------------------------------

/// Fraction of a pattern's weight inside the target cells.
pub fn beta_metric(pattern: &Real1, target_region: &[usize]) -> Result<f64> {
    if target_region.is_empty() {
        return Err(Error::Config("empty target region".into()));
    }
    let n = pattern.values.len();
    let total: f64 = pattern.values.sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Degenerate(format!("pattern total {total}")));
    }
    let mut hit = 0.0;
    for &i in target_region {
        if i >= n {
            return Err(Error::GridMismatch(format!(
                "target cell {i} outside the {n}-cell pattern"
            )));
        }
        hit += pattern.values[i];
    }
    Ok(hit / total)
}

/// One Poisson draw of detector counts over an integration window,
/// deterministic per seed. Zero rate gives zero counts without consuming
/// entropy.
pub fn poisson_counts(true_rate: f64, integration_time: f64, seed: u64) -> Result<u64> {
    if !(true_rate >= 0.0 && integration_time >= 0.0) {
        return Err(Error::Config(format!(
            "negative rate {true_rate} or window {integration_time}"
        )));
    }
    let lambda = true_rate * integration_time;
    if lambda == 0.0 {
        return Ok(0);
    }
    let dist = rand_distr::Poisson::new(lambda)
        .map_err(|e| Error::Config(format!("poisson({lambda}): {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw: f64 = rng.sample(dist);
    Ok(draw as u64)
}

/// What the optimizer is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackMode {
    /// Noiseless pump-beam band fraction: a bright classical signal.
    PumpIntensity,
    /// Poisson photon-pair counts at rate rate_scale * beta: the faint
    /// channel whose shot noise can starve the loop.
    CoincidencePoisson,
}

/// Feedback channel configuration shared by all optimizers.
#[derive(Debug, Clone)]
pub struct FeedbackChannel {
    pub mode: FeedbackMode,
    pub target_region: Vec<usize>,
    pub integration_time: f64,
    /// Coincidence counts per second at beta = 1.
    pub rate_scale: f64,
    pub seed: u64,
}

impl FeedbackChannel {
    pub fn validate(&self) -> Result<()> {
        if self.target_region.is_empty() {
            return Err(Error::Config("empty target region".into()));
        }
        if self.mode == FeedbackMode::CoincidencePoisson && !(self.rate_scale > 0.0) {
            return Err(Error::Config("counting feedback needs a positive rate scale".into()));
        }
        if !(self.integration_time >= 0.0) {
            return Err(Error::Config("negative integration time".into()));
        }
        Ok(())
    }

    /// Feedback value for one probe: the band fraction itself in pump mode,
    /// a Poisson count in coincidence mode. `probe_index` must be unique per
    /// probe within a run so noise draws never repeat.
    pub fn evaluate(&self, patterns: &ChannelPatterns, probe_index: u64) -> Result<f64> {
        match self.mode {
            FeedbackMode::PumpIntensity => beta_metric(&patterns.pump, &self.target_region),
            FeedbackMode::CoincidencePoisson => {
                let beta = beta_metric(&patterns.coincidence, &self.target_region)?;
                let counts = poisson_counts(
                    self.rate_scale * beta,
                    self.integration_time,
                    derive_seed(self.seed, "probe", probe_index),
                )?;
                Ok(counts as f64)
            }
        }
    }
}

/// Far-field patterns of both channels for one mask, on a common conjugate
/// grid so one target-cell list addresses both.
#[derive(Debug, Clone)]
pub struct ChannelPatterns {
    pub pump: Real1,
    pub coincidence: Real1,
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

/// One accepted optimizer state: the clock, the mask, what the feedback
/// channel reported, and the true band fractions of both channels.
#[derive(Debug, Clone)]
pub struct TraceIteration {
    pub time_s: f64,
    pub phases: Vec<f64>,
    pub feedback: f64,
    pub beta_pump: f64,
    pub beta_coinc: f64,
}

/// Record of one optimization run. Baselines are ensemble averages of the
/// pre-optimization band fractions, attached by the caller (they require
/// medium realizations the optimizer never sees).
#[derive(Debug, Clone, Default)]
pub struct OptimizationTrace {
    pub iterations: Vec<TraceIteration>,
    /// Segments whose whole probe cycle returned zero feedback; their phase
    /// stays untouched.
    pub skipped_segments: Vec<usize>,
    pub baseline_beta_pump: Option<f64>,
    pub baseline_beta_coinc: Option<f64>,
    pub baseline_count: usize,
    pub eta_pump: Option<f64>,
    pub eta_coinc: Option<f64>,
}

impl OptimizationTrace {
    pub fn set_baseline(&mut self, beta_pump: f64, beta_coinc: f64, count: usize) {
        self.baseline_beta_pump = Some(beta_pump);
        self.baseline_beta_coinc = Some(beta_coinc);
        self.baseline_count = count;
    }

    pub fn final_iteration(&self) -> Result<&TraceIteration> {
        self.iterations.last().ok_or_else(|| Error::Degenerate("empty trace".into()))
    }
}

/// Enhancement of both channels: final band fraction over the
/// pre-optimization ensemble baseline. Requires a baseline pooled from at
/// least 10 realizations or cells; a per-run baseline would bias the ratio
/// through its own fluctuations.
pub fn enhancement(trace: &mut OptimizationTrace) -> Result<(f64, f64)> {
    let last = trace.final_iteration()?.clone();
    let (bp, bc) = match (trace.baseline_beta_pump, trace.baseline_beta_coinc) {
        (Some(p), Some(c)) => (p, c),
        _ => return Err(Error::Config("trace has no baseline attached".into())),
    };
    if trace.baseline_count < 10 {
        return Err(Error::Config(format!(
            "baseline pooled from {} samples; need at least 10",
            trace.baseline_count
        )));
    }
    if !(bp > 0.0 && bc > 0.0) {
        return Err(Error::Degenerate("zero baseline".into()));
    }
    let ep = last.beta_pump / bp;
    let ec = last.beta_coinc / bc;
    trace.eta_pump = Some(ep);
    trace.eta_coinc = Some(ec);
    Ok((ep, ec))
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

fn record_state<F>(
    forward: &F,
    fb: &FeedbackChannel,
    phases: &[f64],
    slm: &SlmConfig,
    grid_n: usize,
    time_s: f64,
    probe: &mut u64,
) -> Result<TraceIteration>
where
    F: Fn(&Array1<Complex64>) -> Result<ChannelPatterns>,
{
    let mask = slm.mask(phases, grid_n)?;
    let patterns = forward(&mask)?;
    let feedback = fb.evaluate(&patterns, *probe)?;
    *probe += 1;
    Ok(TraceIteration {
        time_s,
        phases: phases.to_vec(),
        feedback,
        beta_pump: beta_metric(&patterns.pump, &fb.target_region)?,
        beta_coinc: beta_metric(&patterns.coincidence, &fb.target_region)?,
    })
}

/// Sequential segment-by-segment optimization: each segment is probed at M
/// equally spaced phases, the responses are fit to a0 + a1 cos + b1 sin (a
/// single interfering partition has an exactly cosinusoidal response), and
/// the segment is set to the fitted optimum before moving on. A segment
/// whose probes all return zero feedback carries no gradient information
/// (dark counts in the faint channel); it is left alone and flagged.
pub fn stepwise_optimize<F>(
    forward: F,
    slm: &SlmConfig,
    fb: &FeedbackChannel,
    grid_n: usize,
) -> Result<OptimizationTrace>
where
    F: Fn(&Array1<Complex64>) -> Result<ChannelPatterns>,
{
    fb.validate()?;
    let n = slm.n_segments();
    let m = slm.phase_levels;
    let mut phases = vec![0.0f64; n];
    let mut trace = OptimizationTrace::default();
    let mut time = 0.0f64;
    let mut probe: u64 = 0;

    trace.iterations.push(record_state(&forward, fb, &phases, slm, grid_n, time, &mut probe)?);

    for seg in 0..n {
        let mut sum_c = 0.0f64;
        let mut sum_s = 0.0f64;
        let mut any_signal = false;
        let saved = phases[seg];
        for k in 0..m {
            let th = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
            phases[seg] = th;
            let mask = slm.mask(&phases, grid_n)?;
            let patterns = forward(&mask)?;
            let f = fb.evaluate(&patterns, probe)?;
            probe += 1;
            time += slm.response_time;
            if f != 0.0 {
                any_signal = true;
            }
            sum_c += f * th.cos();
            sum_s += f * th.sin();
        }
        if !any_signal {
            phases[seg] = saved;
            trace.skipped_segments.push(seg);
            continue;
        }
        // a0 drops out of the argmax; the first harmonic peaks at atan2
        phases[seg] = sum_s.atan2(sum_c);
        time += slm.response_time;
        trace.iterations.push(record_state(&forward, fb, &phases, slm, grid_n, time, &mut probe)?);
    }
    Ok(trace)
}

/// Partitioning optimization: every iteration draws a random half of the
/// segments, probes M common phase offsets on that half (offset zero
/// included, so the incumbent mask always competes), and keeps the best.
/// With noiseless feedback the recorded sequence is therefore
/// nondecreasing; with counting noise a bad draw can win, which is the
/// mechanism behind feedback starvation at low rates.
pub fn partition_optimize<F>(
    forward: F,
    slm: &SlmConfig,
    fb: &FeedbackChannel,
    grid_n: usize,
    n_iterations: usize,
) -> Result<OptimizationTrace>
where
    F: Fn(&Array1<Complex64>) -> Result<ChannelPatterns>,
{
    fb.validate()?;
    let n = slm.n_segments();
    let m = slm.phase_levels;
    let mut phases = vec![0.0f64; n];
    let mut trace = OptimizationTrace::default();
    let mut time = 0.0f64;
    let mut probe: u64 = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(fb.seed, "partition", 0));

    trace.iterations.push(record_state(&forward, fb, &phases, slm, grid_n, time, &mut probe)?);

    for _ in 0..n_iterations {
        // random half: each segment picked independently with p = 1/2,
        // redrawn if the selection comes up empty
        let mut sel: Vec<usize> = Vec::with_capacity(n / 2 + 1);
        while sel.is_empty() {
            sel.extend((0..n).filter(|_| rng.random::<bool>()));
        }
        let mut best = (f64::NEG_INFINITY, 0.0f64);
        let mut any_signal = false;
        for k in 0..m {
            let delta = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
            let mut trial = phases.clone();
            for &s in &sel {
                trial[s] += delta;
            }
            let mask = slm.mask(&trial, grid_n)?;
            let patterns = forward(&mask)?;
            let f = fb.evaluate(&patterns, probe)?;
            probe += 1;
            time += slm.response_time;
            if f != 0.0 {
                any_signal = true;
            }
            if f > best.0 {
                best = (f, delta);
            }
        }
        if any_signal && best.1 != 0.0 {
            for &s in &sel {
                phases[s] += best.1;
            }
        }
        time += slm.response_time;
        trace.iterations.push(record_state(&forward, fb, &phases, slm, grid_n, time, &mut probe)?);
    }
    Ok(trace)
}

/// Closed-loop run against a drifting medium. The forward model takes the
/// medium displacement in meters; the clock advances by one response time
/// per probe and the displacement is speed * t, so slow loops fight stale
/// corrections exactly as a real feedback system does. `optimizer_active`
/// gates probing by time: when it returns false the mask freezes and the
/// loop just watches the band fractions evolve (the decay phase of an
/// on/off experiment). Iterations are partition steps as in
/// [`partition_optimize`]. speed = 0 with the gate always on reduces to
/// static partitioning.
pub fn dynamic_run<F, G>(
    forward_at: F,
    slm: &SlmConfig,
    fb: &FeedbackChannel,
    grid_n: usize,
    speed: f64,
    duration: f64,
    optimizer_active: G,
) -> Result<OptimizationTrace>
where
    F: Fn(f64, &Array1<Complex64>) -> Result<ChannelPatterns>,
    G: Fn(f64) -> bool,
{
    fb.validate()?;
    let n = slm.n_segments();
    let m = slm.phase_levels;
    let mut phases = vec![0.0f64; n];
    let mut trace = OptimizationTrace::default();
    let mut time = 0.0f64;
    let mut probe: u64 = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(fb.seed, "partition", 0));

    let snapshot = |phases: &[f64], time: f64, probe: &mut u64| -> Result<TraceIteration> {
        let shift = speed * time;
        let fwd = |mask: &Array1<Complex64>| forward_at(shift, mask);
        record_state(&fwd, fb, phases, slm, grid_n, time, probe)
    };

    trace.iterations.push(snapshot(&phases, time, &mut probe)?);

    while time < duration {
        if optimizer_active(time) {
            let mut sel: Vec<usize> = Vec::with_capacity(n / 2 + 1);
            while sel.is_empty() {
                sel.extend((0..n).filter(|_| rng.random::<bool>()));
            }
            let mut best = (f64::NEG_INFINITY, 0.0f64);
            let mut any_signal = false;
            for k in 0..m {
                let delta = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
                let mut trial = phases.clone();
                for &s in &sel {
                    trial[s] += delta;
                }
                let mask = slm.mask(&trial, grid_n)?;
                let patterns = forward_at(speed * time, &mask)?;
                let f = fb.evaluate(&patterns, probe)?;
                probe += 1;
                time += slm.response_time;
                if f != 0.0 {
                    any_signal = true;
                }
                if f > best.0 {
                    best = (f, delta);
                }
            }
            if any_signal && best.1 != 0.0 {
                for &s in &sel {
                    phases[s] += best.1;
                }
            }
        } else {
            // frozen mask, drifting medium: one observation tick
            time += slm.response_time;
        }
        trace.iterations.push(snapshot(&phases, time, &mut probe)?);
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Channel-relation scans
// ---------------------------------------------------------------------------

/// The (beta_pump, beta_coinc) cloud a trace swept through.
pub fn beta_relation_points(trace: &OptimizationTrace) -> Vec<(f64, f64)> {
    trace.iterations.iter().map(|it| (it.beta_pump, it.beta_coinc)).collect()
}

/// Power-law fit beta_coinc = a * beta_pump^p over the positive points:
/// returns (a, p, r^2).
pub fn fit_beta_power(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let xs: Vec<f64> = points.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0).map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0).map(|p| p.1).collect();
    stats::fit_power_law(&xs, &ys)
}

/// Relative band rates of the two channels under a global amplitude
/// transmission t on the pump and on each photon, normalized to the
/// lossless run: the pump rate scales as t^2 and the pair rate as t^4, so
/// the cloud lies on beta_coinc = beta_pump^2 exactly.
pub fn absorption_beta_points(transmissions: &[f64]) -> Vec<(f64, f64)> {
    transmissions.iter().map(|&t| (t * t, t * t * t * t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Domain, Grid1};

    /// Linear interference model: one target cell driven by the coherent
    /// sum of per-segment phasors, one sink cell keeping the total fixed.
    /// Exactly the regime where a segment's response is a pure cosine.
    struct PhasorModel {
        amps: Vec<Complex64>,
        slm: SlmConfig,
        grid: Grid1,
    }

    impl PhasorModel {
        fn new(n_segments: usize, seed: u64) -> Self {
            let grid = Grid1::new(64, 1.0).unwrap();
            let slm = SlmConfig::uniform(64, n_segments, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let amps = (0..n_segments)
                .map(|_| {
                    let re: f64 = rng.sample(rand_distr::StandardNormal);
                    let im: f64 = rng.sample(rand_distr::StandardNormal);
                    Complex64::new(re, im)
                })
                .collect();
            Self { amps, slm, grid }
        }

        fn ceiling(&self) -> f64 {
            let s: f64 = self.amps.iter().map(|a| a.norm()).sum();
            s * s
        }

        fn forward(&self) -> impl Fn(&Array1<Complex64>) -> Result<ChannelPatterns> + '_ {
            move |mask: &Array1<Complex64>| {
                // read one representative cell per segment
                let field: Complex64 = self
                    .slm
                    .layout
                    .iter()
                    .zip(self.amps.iter())
                    .map(|(&(a, _), amp)| amp * mask[a])
                    .sum();
                let hit = field.norm_sqr();
                let total = 2.0 * self.ceiling();
                let mut values = Array1::zeros(self.grid.n());
                values[0] = hit;
                values[1] = total - hit;
                let pattern = Real1 {
                    grid: self.grid.conjugate(),
                    wavelength: 404e-9,
                    domain: Domain::Angular,
                    values,
                };
                Ok(ChannelPatterns { pump: pattern.clone(), coincidence: pattern })
            }
        }
    }

    fn pump_feedback(target: Vec<usize>) -> FeedbackChannel {
        FeedbackChannel {
            mode: FeedbackMode::PumpIntensity,
            target_region: target,
            integration_time: 0.1,
            rate_scale: 0.0,
            seed: 5,
        }
    }

    #[test]
    fn layout_partitions_exactly_and_validates() {
        let slm = SlmConfig::uniform(1024, 32, 8).unwrap();
        assert_eq!(slm.n_segments(), 32);
        let mut covered = 0usize;
        let mut prev_end = 0usize;
        for &(a, b) in &slm.layout {
            assert_eq!(a, prev_end);
            assert!(b > a);
            covered += b - a;
            prev_end = b;
        }
        assert_eq!(covered, 1024);
        assert_eq!(prev_end, 1024);

        let sub = SlmConfig::uniform_over(1024, 4, (100, 200), 8).unwrap();
        assert_eq!(sub.layout.first().unwrap().0, 100);
        assert_eq!(sub.layout.last().unwrap().1, 200);
        // identity outside the active span
        let mask = sub.mask(&[1.0, 2.0, 3.0, 0.5], 1024).unwrap();
        assert_eq!(mask[0], Complex64::new(1.0, 0.0));
        assert_eq!(mask[1023], Complex64::new(1.0, 0.0));
        assert!((mask[100] - Complex64::new(1f64.cos(), 1f64.sin())).norm() < 1e-15);

        assert!(SlmConfig::uniform(64, 1, 8).is_ok(), "single segment is a sanity anchor");
        assert!(SlmConfig::uniform(64, 0, 8).is_err());
        assert!(SlmConfig::uniform(64, 8, 2).is_err());
        assert!(SlmConfig::uniform_over(64, 4, (32, 32), 8).is_err());
    }

    #[test]
    fn beta_metric_fractions_and_errors() {
        let grid = Grid1::new(8, 1.0).unwrap();
        let pat = Real1 {
            grid,
            wavelength: 1e-6,
            domain: Domain::Angular,
            values: Array1::from(vec![1.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 4.0]),
        };
        assert!((beta_metric(&pat, &[1]).unwrap() - 3.0 / 8.0).abs() < 1e-15);
        let all: Vec<usize> = (0..8).collect();
        assert!((beta_metric(&pat, &all).unwrap() - 1.0).abs() < 1e-15);
        assert!(beta_metric(&pat, &[]).is_err());
        assert!(beta_metric(&pat, &[9]).is_err());
        let zero = Real1 { values: Array1::zeros(8), ..pat };
        assert!(beta_metric(&zero, &[1]).is_err());
    }

    #[test]
    fn poisson_counts_moments_and_determinism() {
        assert_eq!(poisson_counts(0.0, 1.0, 3).unwrap(), 0);
        assert_eq!(poisson_counts(5.0, 0.0, 3).unwrap(), 0);
        assert_eq!(
            poisson_counts(7.0, 1.0, 11).unwrap(),
            poisson_counts(7.0, 1.0, 11).unwrap()
        );
        let n = 100_000usize;
        let mut sum = 0.0f64;
        let mut sum2 = 0.0f64;
        for i in 0..n {
            let c = poisson_counts(7.0, 1.0, 1000 + i as u64).unwrap() as f64;
            sum += c;
            sum2 += c * c;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!((mean - 7.0).abs() < 0.1, "mean {mean}");
        assert!((var / mean - 1.0).abs() < 0.05, "variance/mean {}", var / mean);
    }

    #[test]
    fn stepwise_aligns_phasors_and_feedback_never_decreases() {
        let model = PhasorModel::new(16, 2);
        let fb = pump_feedback(vec![0]);
        let trace = stepwise_optimize(model.forward(), &model.slm, &fb, 64).unwrap();
        assert!(trace.skipped_segments.is_empty());
        let final_fb = trace.final_iteration().unwrap().feedback;
        let start_fb = trace.iterations[0].feedback;
        assert!(final_fb >= start_fb);
        for w in trace.iterations.windows(2) {
            assert!(
                w[1].feedback >= w[0].feedback - 1e-12,
                "noiseless stepwise regressed: {} -> {}",
                w[0].feedback,
                w[1].feedback
            );
        }
        // a full pass of exact cosine fits reaches near-perfect alignment
        let best_possible = model.ceiling() / (2.0 * model.ceiling());
        assert!(
            final_fb > 0.95 * best_possible,
            "final {final_fb} vs ideal {best_possible}"
        );
        // clock advanced one tick per probe plus one per applied segment
        let last_t = trace.final_iteration().unwrap().time_s;
        assert!((last_t - (16.0 * 8.0 + 16.0) * 0.1).abs() < 1e-9);
    }

    #[test]
    fn partition_matches_stepwise_and_is_monotone_noiseless() {
        let model = PhasorModel::new(16, 3);
        let fb = pump_feedback(vec![0]);
        let step = stepwise_optimize(model.forward(), &model.slm, &fb, 64).unwrap();
        let part = partition_optimize(model.forward(), &model.slm, &fb, 64, 160).unwrap();
        for w in part.iterations.windows(2) {
            assert!(w[1].feedback >= w[0].feedback - 1e-12, "partition regressed");
        }
        let fs = step.final_iteration().unwrap().feedback;
        let fp = part.final_iteration().unwrap().feedback;
        assert!(
            (fp / fs - 1.0).abs() < 0.20,
            "partition {fp} vs stepwise {fs} after 10N iterations"
        );
    }

    #[test]
    fn starved_counting_feedback_skips_every_segment() {
        let model = PhasorModel::new(8, 4);
        let fb = FeedbackChannel {
            mode: FeedbackMode::CoincidencePoisson,
            target_region: vec![0],
            integration_time: 1.0,
            rate_scale: 1e-9,
            seed: 17,
        };
        let trace = stepwise_optimize(model.forward(), &model.slm, &fb, 64).unwrap();
        assert_eq!(trace.skipped_segments, (0..8).collect::<Vec<_>>());
        let last = trace.final_iteration().unwrap();
        assert!(last.phases.iter().all(|&p| p == 0.0), "mask must stay untouched");
    }

    #[test]
    fn enhancement_needs_a_pooled_baseline() {
        let model = PhasorModel::new(8, 5);
        let fb = pump_feedback(vec![0]);
        let mut trace = stepwise_optimize(model.forward(), &model.slm, &fb, 64).unwrap();
        assert!(enhancement(&mut trace).is_err(), "no baseline attached yet");
        let last = trace.final_iteration().unwrap().clone();
        trace.set_baseline(last.beta_pump / 10.0, last.beta_coinc / 20.0, 4);
        assert!(enhancement(&mut trace).is_err(), "4 samples is not an ensemble");
        trace.baseline_count = 12;
        let (ep, ec) = enhancement(&mut trace).unwrap();
        assert!((ep - 10.0).abs() < 1e-9 && (ec - 20.0).abs() < 1e-9);
        assert_eq!(trace.eta_pump, Some(ep));
    }

    #[test]
    fn dynamic_run_at_zero_speed_reaches_static_result_then_freezes() {
        let model = PhasorModel::new(8, 6);
        let fb = pump_feedback(vec![0]);
        // gate off after 2/3 of the run; speed 0 so nothing decays
        let until = 8.0 * 8.0 * 0.1 * 10.0 * (2.0 / 3.0);
        let forward = model.forward();
        let trace = dynamic_run(
            |_shift, mask| forward(mask),
            &model.slm,
            &fb,
            64,
            0.0,
            8.0 * 8.0 * 0.1 * 10.0,
            |t| t < until,
        )
        .unwrap();
        let static_part =
            partition_optimize(model.forward(), &model.slm, &fb, 64, 80).unwrap();
        let fd = trace.final_iteration().unwrap().feedback;
        let fs = static_part.final_iteration().unwrap().feedback;
        assert!((fd / fs - 1.0).abs() < 0.25, "dynamic {fd} vs static {fs}");
        // after the gate, feedback must be exactly flat
        let frozen: Vec<&TraceIteration> =
            trace.iterations.iter().filter(|it| it.time_s > until).collect();
        assert!(frozen.len() > 2);
        for w in frozen.windows(2) {
            assert!((w[1].feedback - w[0].feedback).abs() < 1e-12);
        }
    }

    #[test]
    fn absorption_cloud_is_exactly_quadratic() {
        let ts: Vec<f64> = (3..=10).map(|i| i as f64 / 10.0).collect();
        let pts = absorption_beta_points(&ts);
        let (a, p, r2) = fit_beta_power(&pts).unwrap();
        assert!((p - 2.0).abs() < 1e-9, "exponent {p}");
        assert!((a - 1.0).abs() < 1e-9);
        assert!(r2 > 1.0 - 1e-12);
    }
}
