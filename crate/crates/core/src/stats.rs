//! Pattern statistics: correlation, speckle contrast, width and power-law
//! fits, and a two-sample Kolmogorov-Smirnov test.

use crate::error::{Error, Result};

/// Pearson correlation between two patterns of equal length. With `mask`
/// given, only samples where the mask is true enter the sums.
pub fn pearson_correlation(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!(
            "correlation inputs differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != a.len() {
            return Err(Error::GridMismatch("mask length mismatch".into()));
        }
    }
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let n = (0..a.len()).filter(|&i| keep(i)).count();
    if n < 2 {
        return Err(Error::Degenerate("fewer than 2 samples in correlation".into()));
    }
    let nf = n as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in 0..a.len() {
        if keep(i) {
            sa += a[i];
            sb += b[i];
        }
    }
    let (ma, mb) = (sa / nf, sb / nf);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        if keep(i) {
            let da = a[i] - ma;
            let db = b[i] - mb;
            cov += da * db;
            va += da * da;
            vb += db * db;
        }
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(Error::Degenerate("zero variance in correlation input".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Speckle contrast sigma_I / <I>. Fully developed speckle gives 1.
pub fn speckle_contrast(intensity: &[f64]) -> Result<f64> {
    if intensity.len() < 2 {
        return Err(Error::Degenerate("contrast needs at least 2 samples".into()));
    }
    let n = intensity.len() as f64;
    let mean = intensity.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(Error::Degenerate("non-positive mean intensity".into()));
    }
    let var = intensity.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Result of a Gaussian intensity fit I(x) = A exp(-2 (x-x0)^2 / w^2).
/// `width` is the 1/e^2 half-width w; `sigma_width` its standard error from
/// the weighted linear regression on log I.
#[derive(Debug, Clone, Copy)]
pub struct GaussianFit {
    pub width: f64,
    pub center: f64,
    pub amplitude: f64,
    pub sigma_width: f64,
}

/// Fit a Gaussian to a nonnegative pattern by intensity-weighted least squares
/// on ln I against (1, x, x^2). The weights suppress the noisy tail, which
/// otherwise dominates a plain log fit.
pub fn fit_gaussian_width(xs: &[f64], ys: &[f64]) -> Result<GaussianFit> {
    if xs.len() != ys.len() {
        return Err(Error::GridMismatch("fit input length mismatch".into()));
    }
    let ymax = ys.iter().cloned().fold(f64::MIN, f64::max);
    if !(ymax.is_finite() && ymax > 0.0) {
        return Err(Error::Degenerate("fit input has no positive samples".into()));
    }
    // weighted normal equations for ln y = c0 + c1 x + c2 x^2, weight = y
    let mut s = [[0.0f64; 3]; 3];
    let mut r = [0.0f64; 3];
    let mut used = 0usize;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        if y <= ymax * 1e-12 {
            continue;
        }
        used += 1;
        let w = y;
        let l = y.ln();
        let b = [1.0, x, x * x];
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += w * b[i] * b[j];
            }
            r[i] += w * b[i] * l;
        }
    }
    if used < 4 {
        return Err(Error::Degenerate("too few positive samples for a width fit".into()));
    }
    let c = solve3(s, r)?;
    if c[2] >= 0.0 {
        return Err(Error::Degenerate("fit curvature is not negative; pattern is not a peak".into()));
    }
    // I = A exp(-2 (x-x0)^2 / w^2)  =>  c2 = -2/w^2, c1 = 4 x0 / w^2
    let width = (-2.0 / c[2]).sqrt();
    let center = -c[1] / (2.0 * c[2]);
    let amplitude = (c[0] - c[1] * c[1] / (4.0 * c[2])).exp();

    // residual variance -> standard error on c2 -> on w
    let mut wsum = 0.0;
    let mut chi2 = 0.0;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        if y <= ymax * 1e-12 {
            continue;
        }
        let model = c[0] + c[1] * x + c[2] * x * x;
        let dy = y.ln() - model;
        chi2 += y * dy * dy;
        wsum += y;
    }
    let dof = (used as f64 - 3.0).max(1.0);
    let sigma2 = chi2 / dof / wsum.max(f64::MIN_POSITIVE);
    // var(c2) = sigma2 * (S^-1)[2][2] with S normalised by total weight
    let inv22 = invert3_diag22(s)?;
    let var_c2 = chi2 / dof * inv22;
    let sigma_width = 0.5 * width / c[2].abs() * var_c2.sqrt();
    let _ = sigma2;
    Ok(GaussianFit { width, center, amplitude, sigma_width })
}

/// Solve a symmetric 3x3 system by Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3]> {
    for col in 0..3 {
        let mut p = col;
        for rrow in col + 1..3 {
            if a[rrow][col].abs() > a[p][col].abs() {
                p = rrow;
            }
        }
        if a[p][col].abs() < 1e-300 {
            return Err(Error::Degenerate("singular system in fit".into()));
        }
        a.swap(col, p);
        b.swap(col, p);
        for rrow in col + 1..3 {
            let f = a[rrow][col] / a[col][col];
            for cc in col..3 {
                a[rrow][cc] -= f * a[col][cc];
            }
            b[rrow] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for cc in row + 1..3 {
            acc -= a[row][cc] * x[cc];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// (S^-1)[2][2] for a symmetric 3x3 matrix, via cofactors.
fn invert3_diag22(s: [[f64; 3]; 3]) -> Result<f64> {
    let det = s[0][0] * (s[1][1] * s[2][2] - s[1][2] * s[2][1])
        - s[0][1] * (s[1][0] * s[2][2] - s[1][2] * s[2][0])
        + s[0][2] * (s[1][0] * s[2][1] - s[1][1] * s[2][0]);
    if det.abs() < 1e-300 {
        return Err(Error::Degenerate("singular system in fit".into()));
    }
    let cof22 = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    Ok(cof22 / det)
}

/// Least-squares power law y = a x^p on log-log axes. Returns (a, p, r2).
/// Nonpositive samples are rejected.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Degenerate("power-law fit needs >= 2 paired samples".into()));
    }
    let mut lx = Vec::with_capacity(xs.len());
    let mut ly = Vec::with_capacity(xs.len());
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        if x <= 0.0 || y <= 0.0 {
            return Err(Error::Degenerate(format!("power-law fit got nonpositive pair ({x}, {y})")));
        }
        lx.push(x.ln());
        ly.push(y.ln());
    }
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..lx.len() {
        let dx = lx[i] - mx;
        let dy = ly[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 {
        return Err(Error::Degenerate("power-law fit has zero x spread".into()));
    }
    let p = sxy / sxx;
    let a = (my - p * mx).exp();
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok((a, p, r2))
}

/// Two-sample Kolmogorov-Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Degenerate("KS test on empty sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("non-finite sample in KS test"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("non-finite sample in KS test"));
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    // advance through ties on both sides before measuring the CDF gap
    while i < na && j < nb {
        let (va, vb) = (sa[i], sb[j]);
        if va <= vb {
            i += 1;
        }
        if vb <= va {
            j += 1;
        }
        let gap = (i as f64 / na as f64 - j as f64 / nb as f64).abs();
        d = d.max(gap);
    }
    let ne = (na as f64 * nb as f64) / (na as f64 + nb as f64);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    // Kolmogorov tail series; it only converges for lambda away from zero,
    // and Q(0) = 1, so bail out to 1 when terms stop shrinking
    let mut p = 0.0;
    let mut prev_term = f64::MAX;
    let mut converged = false;
    for kk in 1..=100 {
        let k = kk as f64;
        let term = 2.0 * (-1.0f64).powi(kk + 1) * (-2.0 * k * k * lambda * lambda).exp();
        p += term;
        let mag = term.abs();
        if mag < 1e-12 || mag < 1e-9 * p.abs() {
            converged = true;
            break;
        }
        if mag >= prev_term {
            break;
        }
        prev_term = mag;
    }
    if !converged && lambda < 0.3 {
        p = 1.0;
    }
    Ok((d, p.clamp(0.0, 1.0)))
}

/// Sample mean.
pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median (copies and sorts).
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample in median"));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
