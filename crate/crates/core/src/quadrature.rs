//! Adaptive Simpson quadrature, used for normalisation checks and the stationary CDF.

/// Analytic tail mass of a weighted Laplace component outside the integration window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tails {
    pub weight: f64,
    pub rate: f64,
}

impl Tails {
    pub fn none() -> Self {
        Self {
            weight: 0.0,
            rate: 1.0,
        }
    }

    pub fn laplace(weight: f64, rate: f64) -> Self {
        Self { weight, rate }
    }

    /// Mass of `weight · Laplace(rate)` below `x` (for `x <= 0`) or above `x` (for `x >= 0`).
    fn beyond(&self, x: f64) -> f64 {
        if self.weight == 0.0 {
            0.0
        } else {
            0.5 * self.weight * (-self.rate * x.abs()).exp()
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Adaptive Simpson integral of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    // a few fixed panels first so narrow peaks are not missed by the initial estimate
    const PANELS: usize = 16;
    let h = (b - a) / PANELS as f64;
    (0..PANELS)
        .map(|i| {
            let lo = a + i as f64 * h;
            let hi = if i + 1 == PANELS { b } else { lo + h };
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            simpson_step(&f, lo, hi, fa, fm, fb, whole, tol / PANELS as f64, 48)
        })
        .sum()
}

/// Integral over the real line of a density centred at `center`: adaptive Simpson on
/// `[center - half_width, center + half_width]` split at the centre and at zero (the Laplace
/// kink), plus the analytic Laplace tail mass outside the window.
pub fn integrate_real_line<F: Fn(f64) -> f64>(
    f: F,
    center: f64,
    half_width: f64,
    tails: Tails,
    tol: f64,
) -> f64 {
    let lo = center - half_width;
    let hi = center + half_width;
    let mut cuts = vec![lo, center, hi];
    if lo < 0.0 && 0.0 < hi && center != 0.0 {
        cuts.push(0.0);
    }
    cuts.sort_by(f64::total_cmp);
    let body: f64 = cuts
        .windows(2)
        .map(|w| adaptive_simpson(&f, w[0], w[1], tol))
        .sum();
    body + tails.beyond(lo.min(0.0)) + tails.beyond(hi.max(0.0))
}

/// Values of the CDF `F(x) = ∫_{-∞}^x f` at each of the ascending `points`, accumulated
/// interval by interval. Mass below `lower` is taken from `tails`; points below `lower` get that
/// analytic mass alone.
pub fn cdf_at_sorted<F: Fn(f64) -> f64>(
    f: F,
    points: &[f64],
    lower: f64,
    tails: Tails,
    tol: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let base = tails.beyond(lower.min(0.0));
    let mut acc = base;
    let mut last = lower;
    // kinks of the Laplace component sit at zero; split there
    for &x in points {
        if x <= lower {
            out.push(tails.beyond(x.min(0.0)));
            continue;
        }
        if x > last {
            acc += if last < 0.0 && x > 0.0 {
                adaptive_simpson(&f, last, 0.0, tol) + adaptive_simpson(&f, 0.0, x, tol)
            } else {
                adaptive_simpson(&f, last, x, tol)
            };
            last = x;
        }
        out.push(acc);
    }
    out
}
