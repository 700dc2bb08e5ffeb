//! Polynomial discretization of 𝓛 and 𝓛₀, spectra, the invariant density,
//! and structural checks (mass, positivity, H₁ boundary behaviour).
//!
//! Functions on each J_k are stored as coefficients in the scaled Chebyshev
//! basis T_n(x)/ρⁿ, x the affine coordinate of J_k on [-1, 1]. Operator
//! columns are computed from values of ψ on the Bernstein ellipse E_ρ around
//! each J_k, so the matrix is well conditioned and its small eigenvalues are
//! resolved to near machine precision.

use crate::chart_atlas::{lift_then_loop, BranchFamily, Loc};
use crate::error::{Error, Result};
use crate::numerics::{
    chebyshev_antiderivative, chebyshev_derivative, chebyshev_from_gauss_values, chebyshev_gauss_points,
    chebyshev_integral, chebyshev_t_c, clenshaw, gauss_legendre,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::Serialize;
use std::f64::consts::PI;

/// Per-interval polynomial space of degree D on J_1, …, J_m.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub degree: usize,
    pub rho: f64,
    pub lengths: Vec<f64>,
    /// Chebyshev–Gauss points on [-1, 1] (interior collocation nodes).
    pub nodes: Vec<f64>,
    /// Gauss–Legendre rule on [-1, 1] with D + 1 interior points.
    pub quad_x: Vec<f64>,
    pub quad_w: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(degree: usize, rho: f64, lengths: &[f64]) -> Self {
        let n = degree + 1;
        let (quad_x, quad_w) = gauss_legendre(n);
        SpectralBasis { degree, rho, lengths: lengths.to_vec(), nodes: chebyshev_gauss_points(n), quad_x, quad_w }
    }

    /// Coefficients per interval.
    pub fn n(&self) -> usize {
        self.degree + 1
    }

    pub fn dim(&self) -> usize {
        self.n() * self.lengths.len()
    }

    pub fn block(&self, k: usize) -> std::ops::Range<usize> {
        k * self.n()..(k + 1) * self.n()
    }

    /// Point of J_k for x ∈ [-1, 1], with both end distances accurate.
    pub fn loc(&self, k: usize, x: f64) -> Loc {
        let l = self.lengths[k];
        Loc { t: 0.5 * l * (1.0 + x), s: 0.5 * l * (1.0 - x) }
    }

    pub fn x_of(&self, k: usize, p: Loc) -> f64 {
        let l = self.lengths[k];
        if p.near_left() {
            2.0 * p.t / l - 1.0
        } else {
            1.0 - 2.0 * p.s / l
        }
    }

    /// Unscaled Chebyshev coefficients of block k.
    pub fn unscaled(&self, v: &DVector<f64>, k: usize) -> Vec<f64> {
        let mut f = 1.0;
        v.as_slice()[self.block(k)]
            .iter()
            .map(|c| {
                let r = c * f;
                f /= self.rho;
                r
            })
            .collect()
    }

    fn rescale(&self, a: &[f64]) -> Vec<f64> {
        let mut f = 1.0;
        a.iter()
            .map(|c| {
                let r = c * f;
                f *= self.rho;
                r
            })
            .collect()
    }

    pub fn eval(&self, v: &DVector<f64>, k: usize, p: Loc) -> f64 {
        clenshaw(&self.unscaled(v, k), self.x_of(k, p))
    }

    /// d/dy of the function at a point of J_k.
    pub fn eval_deriv(&self, v: &DVector<f64>, k: usize, p: Loc) -> f64 {
        let d = chebyshev_derivative(&self.unscaled(v, k));
        clenshaw(&d, self.x_of(k, p)) * 2.0 / self.lengths[k]
    }

    pub fn node_locs(&self, k: usize) -> Vec<Loc> {
        self.nodes.iter().map(|&x| self.loc(k, x)).collect()
    }

    /// Interpolate a function sampled at the collocation nodes.
    pub fn project<F: FnMut(usize, Loc) -> f64>(&self, mut f: F) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for k in 0..self.lengths.len() {
            let vals: Vec<f64> = self.node_locs(k).into_iter().map(|p| f(k, p)).collect();
            let a = self.rescale(&chebyshev_from_gauss_values(&vals));
            out.as_mut_slice()[self.block(k)].copy_from_slice(&a);
        }
        out
    }

    pub fn node_values(&self, v: &DVector<f64>) -> Vec<Vec<f64>> {
        (0..self.lengths.len())
            .map(|k| self.node_locs(k).into_iter().map(|p| self.eval(v, k, p)).collect())
            .collect()
    }

    /// Row vector Φ ↦ ∫_J Φ, exact on the polynomial space.
    pub fn mass(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (k, &l) in self.lengths.iter().enumerate() {
            let mut f = 1.0;
            for i in 0..self.n() {
                m[self.block(k).start + i] = 0.5 * l * chebyshev_integral(i) * f;
                f /= self.rho;
            }
        }
        m
    }

    pub fn derivative(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (k, &l) in self.lengths.iter().enumerate() {
            let d: Vec<f64> = chebyshev_derivative(&self.unscaled(v, k)).iter().map(|c| c * 2.0 / l).collect();
            out.as_mut_slice()[self.block(k)].copy_from_slice(&self.rescale(&d));
        }
        out
    }

    /// Antiderivative vanishing at the left end of J and continuous across joins.
    /// Returns it together with its value at the right end of J.
    pub fn antiderivative(&self, v: &DVector<f64>) -> (DVector<f64>, f64) {
        let mut out = DVector::zeros(self.dim());
        let mut start = 0.0;
        for (k, &l) in self.lengths.iter().enumerate() {
            let mut a: Vec<f64> = chebyshev_antiderivative(&self.unscaled(v, k)).iter().map(|c| c * 0.5 * l).collect();
            a[0] += start;
            start = clenshaw(&a, 1.0);
            out.as_mut_slice()[self.block(k)].copy_from_slice(&self.rescale(&a));
        }
        (out, start)
    }

    /// Gauss–Legendre points and weights on J_k.
    pub fn quadrature(&self, k: usize) -> Vec<(Loc, f64)> {
        let l = self.lengths[k];
        self.quad_x.iter().zip(&self.quad_w).map(|(&x, &w)| (self.loc(k, x), 0.5 * l * w)).collect()
    }

    /// Row vector of Φ ↦ ∫_J B Φ for a weight B evaluated pointwise.
    pub fn weighted_functional<F: FnMut(usize, Loc) -> f64>(&self, mut b: F, extra_points: usize) -> DVector<f64> {
        let q = self.n() + extra_points;
        let (gx, gw) = gauss_legendre(q);
        let mut g = DVector::zeros(self.dim());
        for (k, &l) in self.lengths.iter().enumerate() {
            for (&x, &w) in gx.iter().zip(&gw) {
                let bw = b(k, self.loc(k, x)) * 0.5 * l * w;
                let (mut t0, mut t1) = (1.0, x);
                let mut f = 1.0;
                for i in 0..self.n() {
                    let ti = if i == 0 {
                        t0
                    } else if i == 1 {
                        t1
                    } else {
                        let t2 = 2.0 * x * t1 - t0;
                        t0 = t1;
                        t1 = t2;
                        t2
                    };
                    g[self.block(k).start + i] += bw * ti * f;
                    f /= self.rho;
                }
            }
        }
        g
    }
}

#[derive(Debug, Clone)]
pub struct OperatorDiscretization {
    pub basis: SpectralBasis,
    /// 𝓛 in the scaled Chebyshev basis.
    pub l: DMatrix<f64>,
    /// 𝓛₀ in the same basis.
    pub l0: DMatrix<f64>,
    pub mass: DVector<f64>,
    /// Largest imaginary part discarded from the FFT columns.
    pub imag_residual: f64,
    /// Largest Bernstein parameter of ψ_jk(E_ρ(J_k)) relative to J_j.
    pub ellipse_image_rho: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BasisConfig {
    pub degree: usize,
    /// Fixed ellipse parameter; chosen automatically when `None`.
    pub rho: Option<f64>,
}

const RHO_CANDIDATES: [f64; 7] = [2.0, 1.8, 1.6, 1.45, 1.3, 1.2, 1.12];

/// Bernstein parameter |x + √(x²-1)| ≥ 1 of a complex point.
fn bernstein_rho(x: C64) -> f64 {
    let s = (x * x - 1.0).sqrt();
    (x + s).norm().max((x - s).norm())
}

/// ψ and ψ' for every edge at the M-point ellipse grid, with the largest image
/// Bernstein parameter; continuation failure means a singularity inside E_ρ.
type EllipseSamples = Vec<Vec<(C64, C64)>>;

fn ellipse_samples<B: BranchFamily>(sys: &B, rho: f64, m: usize) -> Result<(EllipseSamples, f64)> {
    let lens = sys.lengths();
    let mut all = Vec::new();
    let mut worst: f64 = 0.0;
    for (e, edge) in sys.edges().iter().enumerate() {
        let lk = lens[edge.to];
        let lj = lens[edge.from];
        let z_of = |m_idx: usize| {
            let w = C64::from_polar(rho, 2.0 * PI * m_idx as f64 / m as f64);
            0.5 * lk * (1.0 + 0.5 * (w + 1.0 / w))
        };
        let quarter = m / 4;
        let lp: Vec<C64> = (0..=m).map(|i| z_of((quarter + i) % m)).collect();
        let path = lift_then_loop(0.5 * lk, lp[0], 8, &lp);
        let vals = sys.eval_path(e, 0.5 * lk, &path)?;
        let loop_vals = &vals[7..];
        let gap = (loop_vals[0].0 - loop_vals[m].0).norm();
        if gap > 1e-9 * (1.0 + lj) {
            return Err(Error::AssumptionAUnverified(format!(
                "ψ along E_{rho}(J_{}) does not close (gap {gap:e})",
                edge.to
            )));
        }
        let mut samples = vec![(C64::new(0.0, 0.0), C64::new(0.0, 0.0)); m];
        for (i, v) in loop_vals[..m].iter().enumerate() {
            samples[(quarter + i) % m] = *v;
            worst = worst.max(bernstein_rho(2.0 * v.0 / lj - 1.0));
        }
        all.push(samples);
    }
    Ok((all, worst))
}

/// Assembles 𝓛 and 𝓛₀. The ellipse parameter is the largest candidate for
/// which every branch maps E_ρ(J_k) strictly into E_ρ(J_j).
pub fn assemble_operators<B: BranchFamily>(sys: &B, cfg: BasisConfig) -> Result<OperatorDiscretization> {
    let n = cfg.degree + 1;
    let m_fft = 4 * n;
    let candidates: Vec<f64> = match cfg.rho {
        Some(r) => vec![r],
        None => RHO_CANDIDATES.to_vec(),
    };
    let mut last_err = None;
    for rho in candidates {
        match ellipse_samples(sys, rho, m_fft) {
            Ok((samples, worst)) if worst < rho || cfg.rho.is_some() => {
                return Ok(assemble_from_samples(sys, SpectralBasis::new(cfg.degree, rho, sys.lengths()), &samples, worst));
            }
            Ok((_, worst)) => {
                last_err = Some(Error::AssumptionAUnverified(format!("ψ(E_{rho}) reaches Bernstein parameter {worst}")))
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::AssumptionAUnverified("no ellipse parameter".into())))
}

fn assemble_from_samples<B: BranchFamily>(
    sys: &B,
    basis: SpectralBasis,
    samples: &EllipseSamples,
    worst: f64,
) -> OperatorDiscretization {
    let n = basis.n();
    let dim = basis.dim();
    let m_fft = samples.first().map_or(4 * n, |s| s.len());
    let rho = basis.rho;
    let mut l = DMatrix::zeros(dim, dim);
    let mut l0 = DMatrix::zeros(dim, dim);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(m_fft);
    let mut imag: f64 = 0.0;
    let lens = sys.lengths();
    for (e, edge) in sys.edges().iter().enumerate() {
        let (j, k) = (edge.from, edge.to);
        let sg = edge.sign as f64;
        let tvals: Vec<Vec<C64>> = samples[e]
            .iter()
            .map(|(tau, _)| chebyshev_t_c(n, 2.0 * tau / lens[j] - 1.0))
            .collect();
        for col in 0..n {
            let scale = sg / rho.powi(col as i32);
            for (weighted, target) in [(true, &mut l), (false, &mut l0)] {
                let mut buf: Vec<C64> = samples[e]
                    .iter()
                    .zip(&tvals)
                    .map(|((_, d), t)| if weighted { *d * t[col] * scale } else { t[col] * scale })
                    .collect();
                fft.process(&mut buf);
                for row in 0..n {
                    let b = buf[row] / m_fft as f64;
                    let a = if row == 0 { b } else { 2.0 * b };
                    imag = imag.max(a.im.abs());
                    target[(basis.block(k).start + row, basis.block(j).start + col)] += a.re;
                }
            }
        }
    }
    let mass = basis.mass();
    OperatorDiscretization { basis, l, l0, mass, imag_residual: imag, ellipse_image_rho: worst }
}

#[derive(Debug, Clone, Serialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
    pub modulus: f64,
    /// |Δμ| against the run at degree D + 8.
    pub delta: Option<f64>,
    pub converged: Option<bool>,
}

impl OperatorDiscretization {
    pub fn eigenvalues(&self) -> Result<Vec<C64>> {
        let ev = self.l.clone().complex_eigenvalues();
        let mut v: Vec<C64> = ev.iter().copied().collect();
        if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::EigensolveFailure("non-finite eigenvalue".into()));
        }
        v.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.im.total_cmp(&a.im)));
        Ok(v)
    }

    /// σ₀ with ∫σ₀ = 1, from the bordered system (I - 𝓛 + e·massᵀ)σ = e.
    pub fn invariant_density(&self) -> Result<DVector<f64>> {
        let dim = self.basis.dim();
        let mut e = DVector::zeros(dim);
        e[0] = 1.0 / self.mass[0];
        let a = DMatrix::identity(dim, dim) - &self.l + &e * self.mass.transpose();
        let sigma = a
            .lu()
            .solve(&e)
            .ok_or_else(|| Error::EigensolveFailure("singular bordered system for σ₀".into()))?;
        let min = self.basis.node_values(&sigma).iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        if min <= 0.0 {
            return Err(Error::NonPositiveDensity(min));
        }
        Ok(sigma)
    }

    /// Projector Π = σ₀ massᵀ onto the leading eigenvector.
    pub fn projector(&self, sigma: &DVector<f64>) -> DMatrix<f64> {
        sigma * self.mass.transpose()
    }
}

/// Leading eigenvalues of 𝓛 with convergence flags from a second run at degree D + 8.
pub fn spectrum<B: BranchFamily>(sys: &B, op: &OperatorDiscretization, n_keep: usize) -> Result<Vec<Eigenvalue>> {
    let ev = op.eigenvalues()?;
    let finer = assemble_operators(sys, BasisConfig { degree: op.basis.degree + 8, rho: Some(op.basis.rho) })
        .and_then(|o| o.eigenvalues())
        .ok();
    Ok(ev
        .iter()
        .take(n_keep)
        .map(|z| {
            let delta = finer
                .as_ref()
                .map(|f| f.iter().map(|w| (w - z).norm()).fold(f64::INFINITY, f64::min));
            Eigenvalue { re: z.re, im: z.im, modulus: z.norm(), delta, converged: delta.map(|d| d < 1e-8) }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    pub n_random: usize,
    pub max_mass_drift: f64,
    pub min_positive_image: f64,
    pub mass_left_eigen_residual: f64,
    pub sigma_residual: f64,
    /// Worst violation of the H₁ conditions by 𝓛φ, φ and φ' vanishing at all ends.
    pub h1_residual: f64,
    /// Interior joins whose H₁ condition is not defined (one side polar only).
    pub h1_skipped_joins: Vec<usize>,
}

/// Mass, positivity and H₁-invariance checks with a fixed seed.
pub fn check_structure(op: &OperatorDiscretization, sigma: &DVector<f64>, polar: &[(bool, bool)], n_random: usize, seed: u64) -> StructureReport {
    let basis = &op.basis;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = basis.dim();
    let mut drift: f64 = 0.0;
    let mut minpos = f64::INFINITY;
    for _ in 0..n_random {
        let phi = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        let img = &op.l * &phi;
        drift = drift.max((op.mass.dot(&img) - op.mass.dot(&phi)).abs());
        // square of a random polynomial of degree D/2 on each interval
        let deg = basis.degree / 2;
        let coeffs: Vec<Vec<f64>> = (0..basis.lengths.len())
            .map(|_| (0..=deg).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let sq = basis.project(|k, p| {
            let v = clenshaw(&coeffs[k], basis.x_of(k, p));
            v * v
        });
        let img = &op.l * &sq;
        for vals in basis.node_values(&img) {
            for v in vals {
                minpos = minpos.min(v);
            }
        }
    }
    let left = (op.l.transpose() * &op.mass - &op.mass).amax();
    let sres = basis.node_values(&(&op.l * sigma - sigma)).iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    // H₁: φ_k = (t s)² · random polynomial
    let coeffs: Vec<Vec<f64>> = (0..basis.lengths.len())
        .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let phi = basis.project(|k, p| {
        let b = p.t * p.s;
        b * b * (1.5 + clenshaw(&coeffs[k], basis.x_of(k, p)))
    });
    let img = &op.l * &phi;
    let (h1, skipped) = h1_residual(basis, &img, polar);
    StructureReport {
        n_random,
        max_mass_drift: drift,
        min_positive_image: minpos,
        mass_left_eigen_residual: left,
        sigma_residual: sres,
        h1_residual: h1,
        h1_skipped_joins: skipped,
    }
}

/// Largest violation of the H₁ boundary conditions, relative to the sup of the
/// function at the nodes. `polar[k]` = (left end polar, right end polar) of J_k.
pub fn h1_residual(basis: &SpectralBasis, v: &DVector<f64>, polar: &[(bool, bool)]) -> (f64, Vec<usize>) {
    let m = basis.lengths.len();
    let scale = basis.node_values(v).iter().flatten().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-300);
    let at = |k: usize, right: bool| if right { Loc::from_right(0.0, basis.lengths[k]) } else { Loc::from_left(0.0, basis.lengths[k]) };
    let mut res: f64 = 0.0;
    res = res.max(basis.eval_deriv(v, 0, at(0, false)).abs());
    res = res.max(basis.eval_deriv(v, m - 1, at(m - 1, true)).abs());
    let mut skipped = Vec::new();
    for k in 0..m.saturating_sub(1) {
        let (lp, rp) = (polar[k].1, polar[k + 1].0);
        let (pl, pr) = (at(k, true), at(k + 1, false));
        match (lp, rp) {
            (false, false) => res = res.max((basis.eval(v, k, pl) - basis.eval(v, k + 1, pr)).abs()),
            (true, true) => {
                res = res.max((-basis.eval_deriv(v, k, pl) - basis.eval_deriv(v, k + 1, pr)).abs())
            }
            _ => skipped.push(k + 1),
        }
    }
    (res / scale, skipped)
}
