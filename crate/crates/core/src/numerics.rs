//! Small numerical kernels shared by the pipeline stages.

use num_complex::Complex64 as C64;

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d != 0.0 { d } else { dp };
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p, d)
}

/// Gauss–Legendre rule on [0, half], graded toward 0 when `graded`: panel
/// breaks at half·2^-l for l = 1..=levels. Points are distances from the end.
pub fn graded_half_rule(half: f64, graded: bool, levels: usize, per_panel: usize) -> (Vec<f64>, Vec<f64>) {
    let mut breaks = vec![0.0];
    if graded {
        for l in (1..=levels).rev() {
            breaks.push(half * 0.5f64.powi(l as i32));
        }
    }
    breaks.push(half);
    let (gx, gw) = gauss_legendre(per_panel);
    let mut pts = Vec::new();
    let mut wts = Vec::new();
    for win in breaks.windows(2) {
        let (p, q) = (win[0], win[1]);
        let mid = 0.5 * (p + q);
        let rad = 0.5 * (q - p);
        for (x, w) in gx.iter().zip(&gw) {
            pts.push(mid + rad * x);
            wts.push(rad * w);
        }
    }
    (pts, wts)
}

/// (e^x - 1)/x, accurate near zero.
pub fn exprel(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 + x / 2.0 + x * x / 6.0
    } else {
        x.exp_m1() / x
    }
}

/// ln(1 + x)/x, accurate near zero.
pub fn log1prel(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 - x / 2.0 + x * x / 3.0
    } else {
        x.ln_1p() / x
    }
}

/// e^z - 1 without cancellation for small |z|.
pub fn expm1_c(z: C64) -> C64 {
    let (x, y) = (z.re, z.im);
    let s = (0.5 * y).sin();
    let re = x.exp_m1() * y.cos() - 2.0 * s * s;
    let im = x.exp() * y.sin();
    C64::new(re, im)
}

pub fn exprel_c(z: C64) -> C64 {
    if z.norm() < 1e-5 {
        C64::new(1.0, 0.0) + z / 2.0 + z * z / 6.0
    } else {
        expm1_c(z) / z
    }
}

/// Root of a monotone function on [lo, hi] by Newton steps safeguarded with
/// bisection. `fd` returns (value, derivative). The bracket must straddle a sign change.
pub fn safeguarded_newton<F>(mut fd: F, lo: f64, hi: f64, x0: f64, xtol: f64) -> Option<f64>
where
    F: FnMut(f64) -> (f64, f64),
{
    let (flo, _) = fd(lo);
    let (fhi, _) = fd(hi);
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    // orient so that f(a) < 0 < f(b)
    let (mut a, mut b) = if flo < 0.0 { (lo, hi) } else { (hi, lo) };
    let mut x = if x0 > lo.min(hi) && x0 < lo.max(hi) { x0 } else { 0.5 * (lo + hi) };
    let mut dx_old = (hi - lo).abs();
    let mut dx = dx_old;
    let (mut fx, mut dfx) = fd(x);
    for _ in 0..200 {
        if fx == 0.0 {
            return Some(x);
        }
        if fx < 0.0 {
            a = x;
        } else {
            b = x;
        }
        let newton_ok = dfx != 0.0 && {
            let xn = x - fx / dfx;
            (xn - a) * (xn - b) < 0.0 && (2.0 * fx).abs() <= (dx_old * dfx).abs()
        };
        dx_old = dx;
        if newton_ok {
            dx = fx / dfx;
            x -= dx;
        } else {
            dx = 0.5 * (b - a);
            x = a + dx;
        }
        if dx.abs() <= xtol * x.abs() || (a - b).abs() <= xtol * x.abs() || dx == 0.0 {
            return Some(x);
        }
        let r = fd(x);
        fx = r.0;
        dfx = r.1;
    }
    Some(x)
}

/// Chebyshev–Gauss points cos(π(i+1/2)/n), i = 0..n.
pub fn chebyshev_gauss_points(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos())
        .collect()
}

/// Clenshaw evaluation of Σ a_n T_n(x).
pub fn clenshaw(a: &[f64], x: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &c in a.iter().skip(1).rev() {
        let b0 = 2.0 * x * b1 - b2 + c;
        b2 = b1;
        b1 = b0;
    }
    a.first().copied().unwrap_or(0.0) + x * b1 - b2
}

/// Σ a_n T_n(x) and its x-derivative.
pub fn clenshaw_with_derivative(a: &[f64], x: f64) -> (f64, f64) {
    let d = chebyshev_derivative(a);
    (clenshaw(a, x), clenshaw(&d, x))
}

/// Coefficients of d/dx Σ a_n T_n (same length, last entry zero).
pub fn chebyshev_derivative(a: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut d = vec![0.0; n];
    if n < 2 {
        return d;
    }
    for k in (0..n - 1).rev() {
        let next = if k + 2 < n { d[k + 2] } else { 0.0 };
        d[k] = next + 2.0 * (k as f64 + 1.0) * a[k + 1];
    }
    d[0] *= 0.5;
    d
}

/// Coefficients of an antiderivative of Σ a_n T_n with value 0 at x = -1,
/// truncated to the input length.
pub fn chebyshev_antiderivative(a: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut b = vec![0.0; n + 1];
    let get = |k: usize| if k < n { a[k] } else { 0.0 };
    for k in 1..=n {
        let am = if k == 1 { 2.0 * get(0) } else { get(k - 1) };
        b[k] = (am - get(k + 1)) / (2.0 * k as f64);
    }
    b.truncate(n);
    // fix the constant so the antiderivative vanishes at -1
    let val_m1: f64 = (1..n).map(|k| if k % 2 == 0 { b[k] } else { -b[k] }).sum();
    b[0] = -val_m1;
    b
}

/// ∫_{-1}^{1} T_n(x) dx.
pub fn chebyshev_integral(n: usize) -> f64 {
    if n % 2 == 1 {
        0.0
    } else {
        2.0 / (1.0 - (n * n) as f64)
    }
}

/// Chebyshev coefficients (degree n-1) from values at the n Chebyshev–Gauss points.
pub fn chebyshev_from_gauss_values(vals: &[f64]) -> Vec<f64> {
    let n = vals.len();
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let s: f64 = vals
                .iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / nf).cos())
                .sum();
            if k == 0 {
                s / nf
            } else {
                2.0 * s / nf
            }
        })
        .collect()
}

/// Values T_0(z)..T_{n-1}(z) at a complex point.
pub fn chebyshev_t_c(n: usize, z: C64) -> Vec<C64> {
    let mut t = Vec::with_capacity(n);
    if n == 0 {
        return t;
    }
    t.push(C64::new(1.0, 0.0));
    if n > 1 {
        t.push(z);
    }
    for k in 2..n {
        let v = 2.0 * z * t[k - 1] - t[k - 2];
        t.push(v);
    }
    t
}

/// Least-squares slope of log(y) against log(x).
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(12);
        for k in 0..24 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-14, "k={k} q={q}");
        }
    }

    #[test]
    fn chebyshev_calculus_roundtrip() {
        let a = vec![0.3, -1.2, 0.7, 0.25, -0.1, 0.05];
        let d = chebyshev_derivative(&a);
        let ad = chebyshev_antiderivative(&d);
        let x = 0.37;
        let lhs = clenshaw(&ad, x) - clenshaw(&ad, -1.0);
        let rhs = clenshaw(&a, x) - clenshaw(&a, -1.0);
        assert!((lhs - rhs).abs() < 1e-14);
        let h = 1e-6;
        let fd = (clenshaw(&a, x + h) - clenshaw(&a, x - h)) / (2.0 * h);
        assert!((fd - clenshaw(&d, x)).abs() < 1e-8);
    }

    #[test]
    fn gauss_values_transform_is_exact() {
        let a = vec![1.0, 0.5, -0.25, 0.125];
        let pts = chebyshev_gauss_points(4);
        let vals: Vec<f64> = pts.iter().map(|&x| clenshaw(&a, x)).collect();
        let back = chebyshev_from_gauss_values(&vals);
        for (u, v) in a.iter().zip(&back) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn safeguarded_newton_finds_sqrt2() {
        let r = safeguarded_newton(|x| (x * x - 2.0, 2.0 * x), 0.0, 2.0, 1.0, 1e-15).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn complex_expm1_small_argument() {
        let z = C64::new(1e-9, 2e-9);
        let e = expm1_c(z);
        assert!((e - z).norm() < 1e-17);
    }
}
