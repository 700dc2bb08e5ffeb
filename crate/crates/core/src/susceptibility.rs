//! The susceptibility function Ψ(λ) = Σ λⁿ ∫ρ X (A∘fⁿ)'.
//!
//! Ψ is evaluated two ways: directly, as Σ λⁿ ∫(𝓛₀ⁿY)B' over admissible
//! branch compositions; and as a meromorphic function, after splitting
//! Y = Y₀ + Y₁ + Y₂ into an H₀ part handled by resolvents of 𝓛, a part on the
//! 𝓛₀-invariant span of the pole functions P_α - w_α, and a preperiodic part.
//!
//! Pole functions use the signed convention P(y) = 1/(y-γ) - (y-γ)/(e-γ)²;
//! "residue" always means the coefficient of 1/(y-γ).

use crate::chart_atlas::{BranchFamily, BranchSystem, Loc};
use crate::error::{Error, Result};
use crate::map_model::MapModel;
use crate::numerics::{gauss_legendre, graded_half_rule};
use crate::transfer_operator::OperatorDiscretization;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// A polynomial observable in the coordinate x of I (ascending coefficients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    pub coeffs: Vec<f64>,
}

impl Observable {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Observable { coeffs }
    }
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |a, &c| a * x + c)
    }
    pub fn deriv(&self, x: f64) -> f64 {
        let n = self.coeffs.len();
        (1..n).rev().fold(0.0, |a, k| a * x + k as f64 * self.coeffs[k])
    }
}

/// A polar end of some J_k: the left end is a + endpoint, the right end a - endpoint.
#[derive(Debug, Clone, Serialize)]
pub struct PolarEnd {
    pub interval: usize,
    pub right: bool,
    pub x: f64,
    pub orbit_index: usize,
    pub periodic: bool,
    /// |f'(x)|^{1/2}, the factor picked up by one application of 𝓛₀.
    pub weight: f64,
    /// Index of the polar end that the pole moves to under 𝓛₀.
    pub next: usize,
}

impl PolarEnd {
    /// y - γ for a point of J_k (accurate near γ).
    fn offset(&self, p: Loc) -> f64 {
        if self.right {
            -p.s
        } else {
            p.t
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PoleBasis {
    pub ends: Vec<PolarEnd>,
    /// Polar ends of the periodic cycle γ_1, …, γ_p, in dynamical order.
    pub cycle: Vec<usize>,
    /// Preperiodic polar ends γ̃_1, …, γ̃_q (orbit order).
    pub pre: Vec<usize>,
    /// Weights |f'(γ_α)|^{1/2} along the cycle.
    pub weights: Vec<f64>,
    pub big_lambda: f64,
    /// Cycle position α(β) paired with each γ̃_β.
    pub alpha_of: Vec<usize>,
    /// Product of |f'|^{1/2} over q steps starting at γ̃_β.
    pub stretch_weight: Vec<f64>,
    /// Λ̃_β = stretch_weight_β / (product of the cycle weights over q steps from α(β)).
    pub lambda_tilde: Vec<f64>,
    /// Orbit preperiod q.
    pub q: usize,
    pub lengths: Vec<f64>,
}

impl PoleBasis {
    pub fn p(&self) -> usize {
        self.cycle.len()
    }

    /// P for the polar end `end` at a point of J_k.
    pub fn pole_fn(&self, end: usize, k: usize, p: Loc) -> f64 {
        let pe = &self.ends[end];
        if pe.interval != k {
            return 0.0;
        }
        let d = pe.offset(p);
        let l = self.lengths[k];
        1.0 / d - d / (l * l)
    }

    pub fn omega_ell(&self) -> Vec<C64> {
        let p = self.p();
        (0..p)
            .map(|l| C64::from_polar(self.big_lambda.powf(1.0 / p as f64), 2.0 * PI * l as f64 / p as f64))
            .collect()
    }
}

pub fn pole_basis(model: &MapModel, lengths: &[f64]) -> Result<PoleBasis> {
    let part = &model.partition;
    let orbit = &model.orbit;
    let mut ends = Vec::new();
    for (k, iv) in part.intervals.iter().enumerate() {
        for (right, polar, cut) in [(false, iv.left_polar, iv.left_cut), (true, iv.right_polar, iv.right_cut)] {
            if !polar {
                continue;
            }
            let crate::map_model::CutKind::Post(oi) = part.cut_kind[cut] else {
                return Err(Error::NonPolarCycle("critical point marked polar".into()));
            };
            let x = part.cuts[cut];
            ends.push(PolarEnd {
                interval: k,
                right,
                x,
                orbit_index: oi,
                periodic: oi >= orbit.preperiod,
                weight: model.map.d1(x).abs().sqrt(),
                next: usize::MAX,
            });
        }
    }
    // 𝓛₀ moves a pole at (x, side) to (f(x), side'), side' flipped where f' < 0
    for i in 0..ends.len() {
        let e = &ends[i];
        let flip = model.map.d1(e.x) < 0.0;
        let right_next = e.right != flip;
        let oi = orbit.next(e.orbit_index);
        let target = ends
            .iter()
            .position(|g| g.orbit_index == oi && g.right == right_next)
            .ok_or_else(|| Error::NonPolarCycle(format!("image of polar end at {} is not polar", e.x)))?;
        ends[i].next = target;
    }
    let start = ends
        .iter()
        .position(|e| e.periodic)
        .ok_or_else(|| Error::NonPolarCycle("no periodic polar end".into()))?;
    let mut cycle = vec![start];
    let mut cur = ends[start].next;
    while cur != start {
        if cycle.len() > ends.len() {
            return Err(Error::NonPolarCycle("polar ends do not close into a cycle".into()));
        }
        cycle.push(cur);
        cur = ends[cur].next;
    }
    for (i, e) in ends.iter().enumerate() {
        if e.periodic && !cycle.contains(&i) {
            return Err(Error::NonPolarCycle(format!("periodic polar end at {} off the cycle", e.x)));
        }
    }
    for oi in orbit.preperiod..orbit.len() {
        if !ends.iter().any(|e| e.orbit_index == oi) {
            return Err(Error::NonPolarCycle(format!("periodic point {} has no polar side", orbit.points[oi])));
        }
    }
    let weights: Vec<f64> = cycle.iter().map(|&i| ends[i].weight).collect();
    let big_lambda: f64 = weights.iter().product();
    let mut pre: Vec<usize> = (0..ends.len()).filter(|&i| !ends[i].periodic).collect();
    pre.sort_by_key(|&i| ends[i].orbit_index);
    let q = orbit.preperiod;
    let p = cycle.len();
    let mut alpha_of = Vec::new();
    let mut stretch_weight = Vec::new();
    let mut lambda_tilde = Vec::new();
    for &b in &pre {
        let mut cur = b;
        let mut w = 1.0;
        for _ in 0..q {
            w *= ends[cur].weight;
            cur = ends[cur].next;
        }
        let pos = cycle
            .iter()
            .position(|&c| c == cur)
            .ok_or_else(|| Error::NonPolarCycle("preperiodic pole does not reach the cycle".into()))?;
        let alpha = (pos + p * q - q % p) % p;
        let wc: f64 = (0..q).map(|i| weights[(alpha + i) % p]).product();
        alpha_of.push(alpha);
        stretch_weight.push(w);
        lambda_tilde.push(w / wc);
    }
    Ok(PoleBasis {
        ends,
        cycle,
        pre,
        weights,
        big_lambda,
        alpha_of,
        stretch_weight,
        lambda_tilde,
        q,
        lengths: lengths.to_vec(),
    })
}

/// Shared evaluation context.
pub struct Context<'a> {
    pub model: &'a MapModel,
    pub sys: &'a BranchSystem,
    pub op: &'a OperatorDiscretization,
    pub sigma: &'a DVector<f64>,
    /// edges grouped by covered interval
    into: Vec<Vec<usize>>,
}

impl<'a> Context<'a> {
    pub fn new(model: &'a MapModel, sys: &'a BranchSystem, op: &'a OperatorDiscretization, sigma: &'a DVector<f64>) -> Self {
        let m = sys.lengths.len();
        let mut into = vec![Vec::new(); m];
        for (e, edge) in sys.edges.iter().enumerate() {
            into[edge.to].push(e);
        }
        Context { model, sys, op, sigma, into }
    }

    pub fn m(&self) -> usize {
        self.sys.lengths.len()
    }

    pub fn sigma_at(&self, k: usize, p: Loc) -> f64 {
        self.op.basis.eval(self.sigma, k, p)
    }

    /// (𝓛₀ⁿF)(p) by explicit summation over admissible compositions.
    pub fn l0_power<F: Fn(usize, Loc) -> f64>(&self, f: &F, n: usize, k: usize, p: Loc) -> Result<f64> {
        if n == 0 {
            return Ok(f(k, p));
        }
        let mut acc = 0.0;
        for &e in &self.into[k] {
            let edge = &self.sys.edges[e];
            let (q, _) = self.sys.eval_real(e, p)?;
            acc += edge.sign as f64 * self.l0_power(f, n - 1, edge.from, q)?;
        }
        Ok(acc)
    }

    /// Project a pointwise function, propagating evaluation errors.
    pub fn project_fallible<F: Fn(usize, Loc) -> Result<f64>>(&self, f: F) -> Result<DVector<f64>> {
        let mut err = None;
        let v = self.op.basis.project(|k, p| match f(k, p) {
            Ok(x) => x,
            Err(e) => {
                err.get_or_insert(e);
                f64::NAN
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(v),
        }
    }

    /// B = A∘ω and B' on J_k.
    pub fn b_and_bprime(&self, a: &Observable, k: usize, p: Loc) -> (f64, f64) {
        let ch = &self.sys.charts[k];
        let x = ch.omega(p);
        (a.eval(x), a.deriv(x) * ch.omega_prime(p))
    }

    /// Graded quadrature on J_k (toward polar ends), points with both end distances.
    pub fn graded_rule(&self, k: usize, levels: usize, per_panel: usize) -> Vec<(Loc, f64)> {
        let ch = &self.sys.charts[k];
        let l = ch.len;
        let mut out = Vec::new();
        for (right, polar) in [(false, ch.left_polar), (true, ch.right_polar)] {
            let (xs, ws) = graded_half_rule(0.5 * l, polar, levels, per_panel);
            for (x, w) in xs.into_iter().zip(ws) {
                let p = if right { Loc { t: l - x, s: x } } else { Loc { t: x, s: l - x } };
                out.push((p, w));
            }
        }
        out
    }
}

/// Y = σ₀·(X∘ω)/ω' with its pole data.
#[derive(Debug, Clone, Serialize)]
pub struct YData {
    /// Signed residue at each polar end (closed form σ₀(γ)X(q), signed by side).
    pub residues: Vec<f64>,
    /// Richardson estimates of A^± = lim ξY.
    pub extrapolated: Vec<f64>,
    /// Largest |B⁺ - B⁻| over interior joins.
    pub join_mismatch: f64,
}

pub fn y_value(ctx: &Context, x: &Observable, k: usize, p: Loc) -> f64 {
    let ch = &ctx.sys.charts[k];
    ctx.sigma_at(k, p) * x.eval(ch.omega(p)) / ch.omega_prime(p)
}

/// Two-stage Richardson extrapolation to ξ → 0 from ξ, ξ/2, ξ/4.
fn richardson_from(xi: f64, g: impl Fn(f64) -> f64) -> f64 {
    let h = [xi, 0.5 * xi, 0.25 * xi];
    let v: Vec<f64> = h.iter().map(|&x| g(x)).collect();
    let r1 = 2.0 * v[1] - v[0];
    let r2 = 2.0 * v[2] - v[1];
    (4.0 * r2 - r1) / 3.0
}

fn richardson(g: impl Fn(f64) -> f64) -> f64 {
    richardson_from(1e-2, g)
}

pub fn build_y(ctx: &Context, pb: &PoleBasis, x: &Observable) -> Result<YData> {
    let lens = &pb.lengths;
    let mut residues = Vec::new();
    let mut extrapolated = Vec::new();
    for pe in &pb.ends {
        let l = lens[pe.interval];
        let at_end = if pe.right { Loc::from_right(0.0, l) } else { Loc::from_left(0.0, l) };
        let a_closed = ctx.sigma_at(pe.interval, at_end) * x.eval(pe.x);
        let a_extra = richardson(|xi| {
            let p = if pe.right { Loc::from_right(xi, l) } else { Loc::from_left(xi, l) };
            xi * y_value(ctx, x, pe.interval, p)
        });
        let scale = 1.0 + a_closed.abs();
        if (a_closed - a_extra).abs() > 1e-6 * scale {
            return Err(Error::ResidueMismatch { extrapolated: a_extra, closed: a_closed });
        }
        residues.push(if pe.right { -a_closed } else { a_closed });
        extrapolated.push(a_extra);
    }
    // constant terms on both sides of every interior join
    let mut join_mismatch: f64 = 0.0;
    for k in 0..ctx.m().saturating_sub(1) {
        let side = |kk: usize, right: bool| {
            let l = lens[kk];
            let ch = &ctx.sys.charts[kk];
            let polar = if right { ch.right_polar } else { ch.left_polar };
            let end = if right { Loc::from_right(0.0, l) } else { Loc::from_left(0.0, l) };
            let a = if polar { ctx.sigma_at(kk, end) * x.eval(if right { ch.v } else { ch.u }) } else { 0.0 };
            richardson_from(1e-4, |xi| {
                let p = if right { Loc::from_right(xi, l) } else { Loc::from_left(xi, l) };
                y_value(ctx, x, kk, p) - a / xi
            })
        };
        join_mismatch = join_mismatch.max((side(k, true) - side(k + 1, false)).abs());
    }
    Ok(YData { residues, extrapolated, join_mismatch })
}

/// The 𝓛₀-invariant span of E_α = P_α - w_α.
#[derive(Debug, Clone)]
pub struct PoleSpan {
    /// w_α in the operator basis.
    pub w: Vec<DVector<f64>>,
    /// H₀ cocycle defects h_α = 𝓛₀P_α - W_α P_{α+1}.
    pub h: Vec<DVector<f64>>,
    /// w(ϖb) before any correction (should vanish).
    pub w_end: f64,
    pub solve_residual: f64,
    /// max |(𝓛₀^p - Λ)E_1| at interior nodes.
    pub eigen_relation: f64,
    /// 𝓛₀ on span{E_α}, fitted by least squares at interior nodes.
    pub m_matrix: DMatrix<f64>,
    pub m_fit_residual: f64,
    pub m_eigenvalues: Vec<C64>,
}

impl PoleSpan {
    pub fn e_value(&self, ctx: &Context, pb: &PoleBasis, alpha: usize, k: usize, p: Loc) -> f64 {
        pb.pole_fn(pb.cycle[alpha], k, p) - ctx.op.basis.eval(&self.w[alpha], k, p)
    }
}

pub fn solve_w(ctx: &Context, pb: &PoleBasis) -> Result<PoleSpan> {
    let p = pb.p();
    let basis = &ctx.op.basis;
    let dim = basis.dim();
    let mut h = Vec::new();
    for a in 0..p {
        let (ea, eb) = (pb.cycle[a], pb.cycle[(a + 1) % p]);
        let wa = pb.weights[a];
        let pa = |k: usize, q: Loc| pb.pole_fn(ea, k, q);
        h.push(ctx.project_fallible(|k, q| Ok(ctx.l0_power(&pa, 1, k, q)? - wa * pb.pole_fn(eb, k, q)))?);
    }
    // u = Σ_i (W_1⋯W_{i-1}) 𝓛₀^{p-i} h_i
    let mut u = DVector::zeros(dim);
    let mut pre = 1.0;
    for (i, hi) in h.iter().enumerate() {
        let mut t = hi.clone();
        for _ in 0..(p - 1 - i) {
            t = &ctx.op.l0 * t;
        }
        u += t * pre;
        pre *= pb.weights[i];
    }
    let du = basis.derivative(&u);
    let mut lp = DMatrix::identity(dim, dim);
    for _ in 0..p {
        lp = &ctx.op.l * lp;
    }
    let a = lp - DMatrix::identity(dim, dim) * pb.big_lambda;
    let v = a
        .clone()
        .lu()
        .solve(&du)
        .ok_or(Error::ResolventIllConditioned(f64::INFINITY))?;
    let solve_residual = (&a * &v - &du).amax() / du.amax().max(1e-300);
    if solve_residual > 1e-8 {
        return Err(Error::ResolventIllConditioned(solve_residual));
    }
    let (w1, w_end) = basis.antiderivative(&v);
    let mut w = vec![w1];
    for a in 0..p.saturating_sub(1) {
        let next = (&ctx.op.l0 * &w[a] - &h[a]) / pb.weights[a];
        w.push(next);
    }
    let mut span = PoleSpan {
        w,
        h,
        w_end,
        solve_residual,
        eigen_relation: 0.0,
        m_matrix: DMatrix::zeros(p, p),
        m_fit_residual: 0.0,
        m_eigenvalues: Vec::new(),
    };
    // eigen-relation and the fitted matrix of 𝓛₀ on span{E_α}
    let e1 = |k: usize, q: Loc| span.e_value(ctx, pb, 0, k, q);
    let mut rel: f64 = 0.0;
    let mut rows = Vec::new();
    for k in 0..ctx.m() {
        for q in basis.node_locs(k) {
            rel = rel.max((ctx.l0_power(&e1, p, k, q)? - pb.big_lambda * e1(k, q)).abs());
            rows.push((k, q));
        }
    }
    let g = DMatrix::from_fn(rows.len(), p, |r, b| span.e_value(ctx, pb, b, rows[r].0, rows[r].1));
    let mut mm = DMatrix::zeros(p, p);
    let mut fit: f64 = 0.0;
    let svd = g.clone().svd(true, true);
    for a in 0..p {
        let ea = |k: usize, q: Loc| span.e_value(ctx, pb, a, k, q);
        let mut rhs = DVector::zeros(rows.len());
        for (r, (k, q)) in rows.iter().enumerate() {
            rhs[r] = ctx.l0_power(&ea, 1, *k, *q)?;
        }
        let col = svd.solve(&rhs, 1e-14).map_err(|e| Error::EigensolveFailure(e.into()))?;
        fit = fit.max((&g * &col - &rhs).amax() / rhs.amax().max(1e-300));
        mm.set_column(a, &col);
    }
    let mut ev: Vec<C64> = mm.clone().complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
    span.eigen_relation = rel;
    span.m_matrix = mm;
    span.m_fit_residual = fit;
    span.m_eigenvalues = ev;
    Ok(span)
}

/// Y = Y₀ + Y₁ + Y₂ for one perturbation X.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub x: Observable,
    pub y: YData,
    /// c_α, on the cycle.
    pub c: Vec<f64>,
    /// c̃_β, on the preperiodic polar ends.
    pub c_tilde: Vec<f64>,
    pub y0: DVector<f64>,
    /// Ỹ_β = 𝓛₀^q(P̃_β - Λ̃_β E_α(β)).
    pub y_tilde: Vec<DVector<f64>>,
    /// Worst |ξ·(Y - Y₁ - Y₂)| near polar ends (leftover residue).
    pub y0_residue: f64,
    /// H₀ defect of Y₀: end values and jumps at joins.
    pub y0_h0_defect: f64,
    pub y_tilde_h0_defect: f64,
}

fn h0_defect(basis: &crate::transfer_operator::SpectralBasis, v: &DVector<f64>) -> f64 {
    let m = basis.lengths.len();
    let l = |k: usize| basis.lengths[k];
    let mut d = basis.eval(v, 0, Loc::from_left(0.0, l(0))).abs();
    d = d.max(basis.eval(v, m - 1, Loc::from_right(0.0, l(m - 1))).abs());
    for k in 0..m - 1 {
        d = d.max((basis.eval(v, k, Loc::from_right(0.0, l(k))) - basis.eval(v, k + 1, Loc::from_left(0.0, l(k + 1)))).abs());
    }
    d
}

pub fn decompose_y(ctx: &Context, pb: &PoleBasis, span: &PoleSpan, x: &Observable) -> Result<Decomposition> {
    let y = build_y(ctx, pb, x)?;
    let p = pb.p();
    let c_tilde: Vec<f64> = pb.pre.iter().map(|&i| y.residues[i]).collect();
    let mut c: Vec<f64> = pb.cycle.iter().map(|&i| y.residues[i]).collect();
    for (b, &ct) in c_tilde.iter().enumerate() {
        c[pb.alpha_of[b]] += ct * pb.lambda_tilde[b];
    }
    let y2 = |k: usize, q: Loc| -> f64 {
        c_tilde
            .iter()
            .enumerate()
            .map(|(b, ct)| ct * (pb.pole_fn(pb.pre[b], k, q) - pb.lambda_tilde[b] * span.e_value(ctx, pb, pb.alpha_of[b], k, q)))
            .sum()
    };
    let y1 = |k: usize, q: Loc| -> f64 { (0..p).map(|a| c[a] * span.e_value(ctx, pb, a, k, q)).sum() };
    let rest = |k: usize, q: Loc| y_value(ctx, x, k, q) - y1(k, q) - y2(k, q);
    let y0 = ctx.op.basis.project(rest);
    // ξ·(Y - Y₁ - Y₂) cancels benignly, so small ξ keeps the extrapolation error down
    let mut y0_residue: f64 = 0.0;
    for pe in &pb.ends {
        let l = pb.lengths[pe.interval];
        let r = richardson_from(1e-4, |xi| {
            let q = if pe.right { Loc::from_right(xi, l) } else { Loc::from_left(xi, l) };
            xi * rest(pe.interval, q)
        });
        y0_residue = y0_residue.max(r.abs());
    }
    if y0_residue > 1e-7 {
        return Err(Error::DecompositionResidual(format!("Y₀ keeps a residue {y0_residue:e}")));
    }
    let y0_h0 = h0_defect(&ctx.op.basis, &y0);
    if y0_h0 > 1e-6 {
        return Err(Error::DecompositionResidual(format!("Y₀ violates H₀ by {y0_h0:e}")));
    }
    let mut y_tilde = Vec::new();
    let mut yt_h0: f64 = 0.0;
    for b in 0..pb.pre.len() {
        let (pre, alpha, lt) = (pb.pre[b], pb.alpha_of[b], pb.lambda_tilde[b]);
        let g = |k: usize, q: Loc| pb.pole_fn(pre, k, q) - lt * span.e_value(ctx, pb, alpha, k, q);
        let v = ctx.project_fallible(|k, q| ctx.l0_power(&g, pb.q, k, q))?;
        yt_h0 = yt_h0.max(h0_defect(&ctx.op.basis, &v));
        y_tilde.push(v);
    }
    Ok(Decomposition {
        x: x.clone(),
        y,
        c,
        c_tilde,
        y0,
        y_tilde,
        y0_residue,
        y0_h0_defect: y0_h0,
        y_tilde_h0_defect: yt_h0,
    })
}

/// Meromorphic evaluator for one (X, A) pair.
pub struct Meromorphic<'a> {
    ctx: &'a Context<'a>,
    /// Row vector Φ ↦ ∫BΦ.
    g: DVector<f64>,
    y0p: DVector<f64>,
    ytp: Vec<DVector<f64>>,
    /// m_α = ∫E_α B'.
    pub m: Vec<f64>,
    pub c: Vec<f64>,
    pub c_tilde: Vec<f64>,
    m_matrix: DMatrix<f64>,
    /// ∫(𝓛₀ⁿY₂)B' for n < q.
    pub y2_terms: Vec<f64>,
    /// ∫Y₀' and ∫Ỹ'_β (residues at λ = 1).
    pub int_y0p: f64,
    pub int_ytp: Vec<f64>,
    deflated: DMatrix<f64>,
    g_sigma: f64,
    poles: Vec<C64>,
    pub residue_tol: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PsiValue {
    pub re: f64,
    pub im: f64,
    /// distance to the nearest known pole fell below 1e-6
    pub near_pole: bool,
}

impl<'a> Meromorphic<'a> {
    pub fn new(ctx: &'a Context<'a>, pb: &PoleBasis, span: &PoleSpan, dec: &Decomposition, a: &Observable) -> Result<Self> {
        let basis = &ctx.op.basis;
        let g = basis.weighted_functional(|k, p| ctx.b_and_bprime(a, k, p).0, 16);
        let y0p = basis.derivative(&dec.y0);
        let ytp: Vec<DVector<f64>> = dec.y_tilde.iter().map(|v| basis.derivative(v)).collect();
        let p = pb.p();
        let mut m = vec![0.0; p];
        for k in 0..ctx.m() {
            for (q, w) in ctx.graded_rule(k, 12, 12) {
                let bp = ctx.b_and_bprime(a, k, q).1;
                for (alpha, ma) in m.iter_mut().enumerate() {
                    *ma += w * bp * span.e_value(ctx, pb, alpha, k, q);
                }
            }
        }
        let y2 = |k: usize, q: Loc| -> f64 {
            dec.c_tilde
                .iter()
                .enumerate()
                .map(|(b, ct)| {
                    ct * (pb.pole_fn(pb.pre[b], k, q) - pb.lambda_tilde[b] * span.e_value(ctx, pb, pb.alpha_of[b], k, q))
                })
                .sum()
        };
        let mut y2_terms = vec![0.0; pb.q];
        if dec.c_tilde.iter().any(|c| *c != 0.0) {
            for k in 0..ctx.m() {
                for (q, w) in ctx.graded_rule(k, 12, 12) {
                    let bp = ctx.b_and_bprime(a, k, q).1;
                    for (n, t) in y2_terms.iter_mut().enumerate() {
                        *t += w * bp * ctx.l0_power(&y2, n, k, q)?;
                    }
                }
            }
        }
        let pi = ctx.op.projector(ctx.sigma);
        let deflated = &ctx.op.l - &pi;
        let g_sigma = g.dot(ctx.sigma);
        let int_y0p = ctx.op.mass.dot(&y0p);
        let int_ytp = ytp.iter().map(|v| ctx.op.mass.dot(v)).collect();
        let mut poles: Vec<C64> = ctx
            .op
            .eigenvalues()?
            .into_iter()
            .skip(1)
            .filter(|z| z.norm() > 1e-300)
            .map(|z| 1.0 / z)
            .collect();
        poles.extend(pb.omega_ell().into_iter().map(|w| 1.0 / w));
        // remove the deflated part from the data vectors
        let sig = ctx.sigma.clone();
        let mass = ctx.op.mass.clone();
        let strip = |v: &DVector<f64>| v - &sig * mass.dot(v);
        Ok(Meromorphic {
            ctx,
            g,
            y0p: strip(&y0p),
            ytp: ytp.iter().map(strip).collect(),
            m,
            c: dec.c.clone(),
            c_tilde: dec.c_tilde.clone(),
            m_matrix: span.m_matrix.clone(),
            y2_terms,
            int_y0p,
            int_ytp,
            deflated,
            g_sigma,
            poles,
            residue_tol: 1e-9,
        })
    }

    fn resolvent_pair(&self, lambda: C64) -> Result<(C64, Vec<C64>)> {
        let dim = self.deflated.nrows();
        let a = DMatrix::from_fn(dim, dim, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            C64::new(id, 0.0) - lambda * self.deflated[(i, j)]
        });
        let lu = a.lu();
        let gc: DVector<C64> = self.g.map(|x| C64::new(x, 0.0));
        let solve = |v: &DVector<f64>| -> Result<C64> {
            let rhs: DVector<C64> = v.map(|x| C64::new(x, 0.0));
            let s = lu
                .solve(&rhs)
                .ok_or(Error::ResolventIllConditioned(f64::INFINITY))?;
            Ok(-gc.dot(&s))
        };
        let p0 = solve(&self.y0p)?;
        let pt = self.ytp.iter().map(solve).collect::<Result<Vec<_>>>()?;
        Ok((p0, pt))
    }

    /// Ψ₀, Ψ₁, Ψ₂ at λ.
    pub fn parts(&self, lambda: C64) -> Result<(C64, C64, C64)> {
        let (mut p0, mut pt) = self.resolvent_pair(lambda)?;
        // the λ = 1 pole survives only if the H₀ integrals fail to vanish
        let one = C64::new(1.0, 0.0);
        if self.int_y0p.abs() > self.residue_tol {
            p0 -= self.g_sigma * self.int_y0p / (one - lambda);
        }
        for (v, i) in pt.iter_mut().zip(&self.int_ytp) {
            if i.abs() > self.residue_tol {
                *v -= self.g_sigma * i / (one - lambda);
            }
        }
        let p = self.m.len();
        let a = DMatrix::from_fn(p, p, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            C64::new(id, 0.0) - lambda * self.m_matrix[(i, j)]
        });
        let cvec = DVector::from_iterator(p, self.c.iter().map(|&x| C64::new(x, 0.0)));
        let s = a.lu().solve(&cvec).ok_or(Error::ResolventIllConditioned(f64::INFINITY))?;
        let p1: C64 = self.m.iter().zip(s.iter()).map(|(m, v)| *m * v).sum();
        let mut p2 = C64::new(0.0, 0.0);
        let mut lp = one;
        for t in &self.y2_terms {
            p2 += lp * t;
            lp *= lambda;
        }
        for (ct, v) in self.c_tilde.iter().zip(&pt) {
            p2 += lp * ct * v;
        }
        Ok((p0, p1, p2))
    }

    pub fn eval(&self, lambda: C64) -> Result<PsiValue> {
        let (a, b, c) = self.parts(lambda)?;
        let v = a + b + c;
        let near = self.poles.iter().any(|p| (p - lambda).norm() < 1e-6);
        Ok(PsiValue { re: v.re, im: v.im, near_pole: near })
    }

    pub fn eval_c(&self, lambda: C64) -> Result<C64> {
        let v = self.eval(lambda)?;
        Ok(C64::new(v.re, v.im))
    }

    /// Every pole of the discretized Ψ: operator family 1/μ (μ ≠ 1) and polar family 1/ω_ℓ.
    pub fn poles(&self) -> &[C64] {
        &self.poles
    }

    pub fn context(&self) -> &Context<'a> {
        self.ctx
    }
}

/// Terms t_n = ∫(𝓛₀ⁿY)B' of the defining series, n = 0..=n_terms.
#[derive(Debug, Clone, Serialize)]
pub struct DirectSeries {
    pub terms: Vec<f64>,
    /// Ratio r with t_{n+s} ≈ r t_n at the end of the computed range, and its step s.
    pub tail_ratio: Option<f64>,
    pub tail_step: usize,
    /// |r|^{-1/s}: estimated radius of convergence.
    pub radius_estimate: Option<f64>,
}

pub fn direct_terms(ctx: &Context, x: &Observable, a: &Observable, n_terms: usize, quad_points: usize, step_hint: usize) -> Result<DirectSeries> {
    let mut terms = vec![0.0; n_terms + 1];
    let (gx, gw) = gauss_legendre(quad_points);
    for k in 0..ctx.m() {
        let l = ctx.sys.lengths[k];
        for (&xq, &wq) in gx.iter().zip(&gw) {
            let p = Loc { t: 0.5 * l * (1.0 + xq), s: 0.5 * l * (1.0 - xq) };
            let w = 0.5 * l * wq * ctx.b_and_bprime(a, k, p).1;
            if w == 0.0 {
                continue;
            }
            let mut stack = vec![(k, p, 1.0f64, 0usize)];
            while let Some((j, q, sg, d)) = stack.pop() {
                terms[d] += w * sg * y_value(ctx, x, j, q);
                if d < n_terms {
                    for &e in &ctx.into[j] {
                        let edge = &ctx.sys.edges[e];
                        let (qq, _) = ctx.sys.eval_real(e, q)?;
                        stack.push((edge.from, qq, sg * edge.sign as f64, d + 1));
                    }
                }
            }
        }
    }
    let (ratio, step) = tail_ratio(&terms, step_hint);
    Ok(DirectSeries {
        radius_estimate: ratio.map(|r| r.abs().powf(-1.0 / step as f64)),
        terms,
        tail_ratio: ratio,
        tail_step: step,
    })
}

/// Geometric tail model t_{n+s} ≈ r t_n from the last terms, when consistent.
fn tail_ratio(t: &[f64], hint: usize) -> (Option<f64>, usize) {
    let n = t.len() - 1;
    let big = t.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if t[n].abs() <= 1e-14 * big {
        return (None, 1);
    }
    let mut steps = vec![hint.max(1)];
    for s in [1, 2] {
        if !steps.contains(&s) {
            steps.push(s);
        }
    }
    let mut best: Option<(f64, usize, f64)> = None;
    for s in steps {
        if n < s + 2 {
            continue;
        }
        let r1 = t[n] / t[n - s];
        let r0 = t[n - 1] / t[n - 1 - s];
        if !r1.is_finite() || !r0.is_finite() {
            continue;
        }
        let spread = (r1 - r0).abs() / r1.abs().max(1e-300);
        if best.is_none_or(|b| spread < b.2) {
            best = Some((r1, s, spread));
        }
    }
    match best {
        Some((r, s, spread)) if spread < 1e-3 => (Some(r), s),
        _ => (None, 1),
    }
}

impl DirectSeries {
    /// Partial sum plus the closed-form geometric tail.
    pub fn sum(&self, lambda: C64) -> Result<C64> {
        let n = self.terms.len() - 1;
        let mut acc = C64::new(0.0, 0.0);
        let mut lp = C64::new(1.0, 0.0);
        let mut powers = Vec::with_capacity(n + 1);
        for t in &self.terms {
            acc += lp * t;
            powers.push(lp);
            lp *= lambda;
        }
        if let Some(r) = self.tail_ratio {
            let s = self.tail_step;
            let z = r * lambda.powu(s as u32);
            if z.norm() >= 1.0 {
                return Err(Error::SeriesDivergence(format!("|r λ^{s}| = {} at λ = {lambda}", z.norm())));
            }
            let block: C64 = (n + 1 - s..=n).map(|i| powers[i] * self.terms[i]).sum();
            acc += block * z / (1.0 - z);
        } else {
            let big = self.terms.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let last = self.terms[n].abs() * lambda.norm().powi(n as i32);
            if last > 1e-8 * big.max(1e-300) && lambda.norm() > 0.0 {
                return Err(Error::SeriesDivergence(format!("no geometric tail and last term {last:e}")));
            }
        }
        Ok(acc)
    }

    /// Continuation of the series past its radius through the geometric tail
    /// model (a one-pole resummation). `None` when there is no consistent tail
    /// and the terms are not negligible.
    pub fn continued_sum(&self, lambda: C64) -> Option<C64> {
        let n = self.terms.len() - 1;
        let mut acc = C64::new(0.0, 0.0);
        let mut lp = C64::new(1.0, 0.0);
        let mut powers = Vec::with_capacity(n + 1);
        for t in &self.terms {
            acc += lp * t;
            powers.push(lp);
            lp *= lambda;
        }
        match self.tail_ratio {
            Some(r) => {
                let s = self.tail_step;
                let z = r * lambda.powu(s as u32);
                let block: C64 = (n + 1 - s..=n).map(|i| powers[i] * self.terms[i]).sum();
                Some(acc + block * z / (1.0 - z))
            }
            None => {
                let big = self.terms.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let last = self.terms[n].abs() * lambda.norm().powi(n as i32);
                (last <= 1e-12 * big.max(1e-300)).then_some(acc)
            }
        }
    }
}

/// Pole of Ψ with provenance.
#[derive(Debug, Clone, Serialize)]
pub struct PoleEntry {
    pub re: f64,
    pub im: f64,
    pub modulus: f64,
    pub family: String,
    pub residue_re: f64,
    pub residue_im: f64,
    /// Winding number of Ψ along a small circle around the pole (−1 for a simple pole).
    pub winding: i32,
}

/// Polar family λ = 1/ω_ℓ and the leading operator family λ = 1/μ_k, with
/// residues from contour integrals.
pub fn pole_table(mero: &Meromorphic, pb: &PoleBasis, n_operator: usize) -> Result<Vec<PoleEntry>> {
    let mut out = Vec::new();
    let all = mero.poles().to_vec();
    let min_gap = |z: C64| {
        all.iter()
            .filter(|w| (*w - z).norm() > 1e-9)
            .map(|w| (w - z).norm())
            .fold(f64::INFINITY, f64::min)
    };
    let contour = |z: C64, r: f64, f: &dyn Fn(C64) -> Result<C64>| -> Result<(C64, i32)> {
        let n = 128;
        let mut acc = C64::new(0.0, 0.0);
        let mut wind = 0.0;
        let mut prev: Option<C64> = None;
        let mut first = None;
        for i in 0..n {
            let th = 2.0 * PI * i as f64 / n as f64;
            let e = C64::from_polar(1.0, th);
            let v = f(z + r * e)?;
            acc += v * r * e / n as f64;
            if let Some(pv) = prev {
                wind += (v / pv).arg();
            } else {
                first = Some(v);
            }
            prev = Some(v);
        }
        if let (Some(pv), Some(fv)) = (prev, first) {
            wind += (fv / pv).arg();
        }
        Ok((acc, (wind / (2.0 * PI)).round() as i32))
    };
    for w in pb.omega_ell() {
        let z = 1.0 / w;
        let r = 0.1 * min_gap(z).min(z.norm());
        let psi1 = |l: C64| mero.parts(l).map(|(_, b, _)| b);
        let (res, _) = contour(z, r, &psi1)?;
        let full = |l: C64| mero.eval_c(l);
        let (_, wind) = contour(z, r, &full)?;
        out.push(PoleEntry {
            re: z.re,
            im: z.im,
            modulus: z.norm(),
            family: "polar".into(),
            residue_re: res.re,
            residue_im: res.im,
            winding: wind,
        });
    }
    let eig = mero.context().op.eigenvalues()?;
    for mu in eig.iter().skip(1).take(n_operator) {
        if mu.norm() < 1e-12 {
            continue;
        }
        let z = 1.0 / mu;
        let r = 0.1 * min_gap(z).min(z.norm());
        let full = |l: C64| mero.eval_c(l);
        let (res, wind) = contour(z, r, &full)?;
        out.push(PoleEntry {
            re: z.re,
            im: z.im,
            modulus: z.norm(),
            family: "operator".into(),
            residue_re: res.re,
            residue_im: res.im,
            winding: wind,
        });
    }
    Ok(out)
}
