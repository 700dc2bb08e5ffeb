//! Singular charts ω_j: J_j → I_j, the conjugated inverse branches
//! ψ_jk = ϖ_j ∘ (f|I_j)⁻¹ ∘ ω_k, and the Assumption A check.
//!
//! Points of J are kept in interval-local coordinates. A real point carries
//! its distances to both ends of its interval so that quantities which blow
//! up at an end (poles, square-root charts) are evaluated without cancellation.

use crate::error::{Error, Result};
use crate::map_model::{taylor_increment, AnalyticMap, Edge, MapModel};
use crate::numerics::{exprel, exprel_c, gauss_legendre, log1prel, loglog_slope, safeguarded_newton};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

/// A real point of J_k: distance `t` from the left end and `s` from the right end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loc {
    pub t: f64,
    pub s: f64,
}

impl Loc {
    pub fn from_left(t: f64, len: f64) -> Self {
        Loc { t, s: len - t }
    }
    pub fn from_right(s: f64, len: f64) -> Self {
        Loc { t: len - s, s }
    }
    pub fn near_left(&self) -> bool {
        self.t <= self.s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    /// slope one, both ends nonpolar
    Affine,
    /// u + h sin²(πt/2L), both ends polar
    Sin2,
    /// ω' = t exp(r t²) from the polar end, which is on the left
    MixedPolarLeft,
    MixedPolarRight,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntervalChart {
    pub u: f64,
    pub v: f64,
    pub len: f64,
    /// Position of the left end of J_j in the global coordinate on J.
    pub offset: f64,
    pub kind: ChartKind,
    pub r: f64,
    /// quartic coefficient of a mixed chart (zero for the quadratic rule)
    pub s: f64,
    pub left_polar: bool,
    pub right_polar: bool,
}

/// How the free parameter of a mixed chart ω' = t·exp(r t² + s t⁴) is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixedRule {
    /// s = 0: ω' = t exp(r t²), closed-form throughout.
    #[default]
    Quadratic,
    /// ω''(L) = 0 as well: the chart is flat to second order at the nonpolar end,
    /// which keeps branches through that end from being stretched.
    FlatEnd,
}

/// Gauss–Legendre nodes and weights on [0, 1] for the s ≠ 0 chart integrals.
fn unit_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let (x, w) = gauss_legendre(32);
        (x.iter().map(|x| 0.5 * (x + 1.0)).collect(), w.iter().map(|w| 0.5 * w).collect())
    })
}

/// ∫₀¹ exp(a u + b u²) du.
fn exp_quad_mean(a: f64, b: f64) -> f64 {
    let (x, w) = unit_rule();
    x.iter().zip(w).map(|(u, w)| w * (a * u + b * u * u).exp()).sum()
}

fn exp_quad_mean_c(a: C64, b: C64) -> C64 {
    let (x, w) = unit_rule();
    x.iter().zip(w).map(|(u, w)| *w * (a * *u + b * *u * *u).exp()).sum()
}

/// End-profile of a chart seen from one end: displacement of ω, its inverse and ω'.
#[derive(Clone, Copy)]
enum Profile {
    Linear,
    Sine { h: f64, len: f64 },
    /// ∫₀ˣ t exp(r t² + s t⁴) dt
    Polar { r: f64, s: f64, len: f64 },
    /// the slope-one end of a mixed chart, with distance x from that end
    Flat { r: f64, s: f64, len: f64 },
}

impl Profile {
    fn disp(self, x: f64) -> f64 {
        match self {
            Profile::Linear => x,
            Profile::Sine { h, len } => {
                let s = (PI * x / (2.0 * len)).sin();
                h * s * s
            }
            Profile::Polar { r, s, .. } => {
                let x2 = x * x;
                if s == 0.0 {
                    0.5 * x2 * exprel(r * x2)
                } else {
                    0.5 * x2 * exp_quad_mean(r * x2, s * x2 * x2)
                }
            }
            Profile::Flat { r, s, len } => {
                if s == 0.0 {
                    let k = x * (2.0 * len - x);
                    k / (2.0 * len) * exprel(-r * k)
                } else {
                    let (nodes, w) = unit_rule();
                    x * nodes.iter().zip(w).map(|(u, w)| w * Profile::Polar { r, s, len }.deriv(len - x * u)).sum::<f64>()
                }
            }
        }
    }

    fn inv(self, d: f64) -> f64 {
        match self {
            Profile::Linear => d,
            Profile::Sine { h, len } => 2.0 * len / PI * (d / h).clamp(0.0, 1.0).sqrt().asin(),
            Profile::Polar { r, s, .. } if s == 0.0 => (2.0 * d * log1prel(2.0 * r * d)).max(0.0).sqrt(),
            Profile::Flat { r, s, len } if s == 0.0 => {
                let k = 2.0 * len * d * log1prel(-2.0 * r * len * d);
                k / (len + (len * len - k).max(0.0).sqrt())
            }
            Profile::Polar { len, .. } | Profile::Flat { len, .. } => {
                if d <= 0.0 {
                    return 0.0;
                }
                let guess = if matches!(self, Profile::Polar { .. }) { (2.0 * d).sqrt() } else { d };
                safeguarded_newton(|x| (self.disp(x) - d, self.deriv(x)), 0.0, len, guess.min(len), 1e-15).unwrap_or(len)
            }
        }
    }

    fn deriv(self, x: f64) -> f64 {
        match self {
            Profile::Linear => 1.0,
            Profile::Sine { len, .. } => len / PI * (PI * x / len).sin(),
            Profile::Polar { r, s, .. } => {
                let x2 = x * x;
                x * (r * x2 + s * x2 * x2).exp()
            }
            Profile::Flat { r, s, len } => {
                let y = len - x;
                let y2 = y * y;
                y * (r * y2 + s * y2 * y2).exp()
            }
        }
    }
}

impl IntervalChart {
    pub fn new(u: f64, v: f64, left_polar: bool, right_polar: bool, offset: f64) -> Result<Self> {
        Self::with_rule(u, v, left_polar, right_polar, offset, MixedRule::Quadratic)
    }

    pub fn with_rule(u: f64, v: f64, left_polar: bool, right_polar: bool, offset: f64, rule: MixedRule) -> Result<Self> {
        let h = v - u;
        let (kind, len, r, s) = match (left_polar, right_polar) {
            (false, false) => (ChartKind::Affine, h, 0.0, 0.0),
            (true, true) => (ChartKind::Sin2, PI * (h / 2.0).sqrt(), 0.0, 0.0),
            (lp, _) => {
                let (len, r, s) = match rule {
                    MixedRule::Quadratic => {
                        let (len, r) = solve_mixed(h)?;
                        (len, r, 0.0)
                    }
                    MixedRule::FlatEnd => solve_mixed_flat(h)?,
                };
                (if lp { ChartKind::MixedPolarLeft } else { ChartKind::MixedPolarRight }, len, r, s)
            }
        };
        Ok(IntervalChart { u, v, len, offset, kind, r, s, left_polar, right_polar })
    }

    pub fn h(&self) -> f64 {
        self.v - self.u
    }

    fn left(&self) -> Profile {
        match self.kind {
            ChartKind::Affine => Profile::Linear,
            ChartKind::Sin2 => Profile::Sine { h: self.h(), len: self.len },
            ChartKind::MixedPolarLeft => Profile::Polar { r: self.r, s: self.s, len: self.len },
            ChartKind::MixedPolarRight => Profile::Flat { r: self.r, s: self.s, len: self.len },
        }
    }

    fn right(&self) -> Profile {
        match self.kind {
            ChartKind::Affine => Profile::Linear,
            ChartKind::Sin2 => Profile::Sine { h: self.h(), len: self.len },
            ChartKind::MixedPolarLeft => Profile::Flat { r: self.r, s: self.s, len: self.len },
            ChartKind::MixedPolarRight => Profile::Polar { r: self.r, s: self.s, len: self.len },
        }
    }

    /// ω(t) - u for t measured from the left end.
    pub fn disp_left(&self, t: f64) -> f64 {
        self.left().disp(t)
    }
    /// v - ω for s measured from the right end.
    pub fn disp_right(&self, s: f64) -> f64 {
        self.right().disp(s)
    }
    pub fn inv_left(&self, d: f64) -> f64 {
        self.left().inv(d)
    }
    pub fn inv_right(&self, d: f64) -> f64 {
        self.right().inv(d)
    }

    pub fn omega(&self, p: Loc) -> f64 {
        if p.near_left() {
            self.u + self.disp_left(p.t)
        } else {
            self.v - self.disp_right(p.s)
        }
    }

    pub fn omega_prime(&self, p: Loc) -> f64 {
        if p.near_left() {
            self.left().deriv(p.t)
        } else {
            self.right().deriv(p.s)
        }
    }

    /// ϖ(x) as a point of J_j.
    pub fn varpi(&self, x: f64) -> Loc {
        let dl = x - self.u;
        let dr = self.v - x;
        if dl <= dr {
            Loc::from_left(self.inv_left(dl.max(0.0)), self.len)
        } else {
            Loc::from_right(self.inv_right(dr.max(0.0)), self.len)
        }
    }

    /// Holomorphic extension: ω(τ) and ω'(τ) for complex τ measured from the left end.
    pub fn omega_c(&self, tau: C64) -> (C64, C64) {
        let h = self.h();
        match self.kind {
            ChartKind::Affine => (self.u + tau, C64::new(1.0, 0.0)),
            ChartKind::Sin2 => {
                let a = tau * (PI / (2.0 * self.len));
                let s = a.sin();
                (self.u + h * s * s, (2.0 * a).sin() * (self.len / PI))
            }
            ChartKind::MixedPolarLeft => {
                let (d, dd) = self.polar_c(tau);
                (self.u + d, dd)
            }
            ChartKind::MixedPolarRight => {
                let (d, dd) = self.polar_c(self.len - tau);
                (self.v - d, dd)
            }
        }
    }
}

impl IntervalChart {
    /// ∫₀^σ t exp(r t² + s t⁴) dt and its integrand at complex σ.
    fn polar_c(&self, sg: C64) -> (C64, C64) {
        let q = sg * sg;
        let e = self.r * q + self.s * q * q;
        let d = if self.s == 0.0 { 0.5 * q * exprel_c(e) } else { 0.5 * q * exp_quad_mean_c(self.r * q, self.s * q * q) };
        (d, sg * e.exp())
    }
}

/// Flat-end mixed chart: ω'(L) = 1, ω''(L) = 0 and ∫ω' = h. With A = rL², B = sL⁴
/// the end conditions give A = 1/2 - 2 ln L, B = ln L - 1/2, leaving
/// (L²/2)∫₀¹ exp(A u + B u²) du = h for L.
fn solve_mixed_flat(h: f64) -> Result<(f64, f64, f64)> {
    let g = |l: f64| {
        let len = l.exp();
        0.5 * len * len * exp_quad_mean(0.5 - 2.0 * l, l - 0.5) - h
    };
    let (mut lo, mut hi) = (-20.0, 5.0);
    if !(g(lo) < 0.0 && g(hi) > 0.0) {
        return Err(Error::ChartSolveFailure(format!("flat-end chart: interval length {h} out of range")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let l = 0.5 * (lo + hi);
    let len = l.exp();
    let (a, b) = (0.5 - 2.0 * l, l - 0.5);
    if (g(l) / h).abs() > 1e-13 {
        return Err(Error::ChartSolveFailure(format!("flat-end chart: residual {}", g(l))));
    }
    Ok((len, a / (len * len), b / (len * len * len * len)))
}

/// Mixed chart ω'(t) = t exp(r t²) on [0, L] with ω'(L) = 1 and ∫ω' = h.
/// Writing L = e^ℓ gives r = -ℓ/L² and e^ℓ·exprel(ℓ)/2 = h, monotone in ℓ.
fn solve_mixed(h: f64) -> Result<(f64, f64)> {
    let g = |l: f64| 0.5 * l.exp() * exprel(l) - h;
    let (mut lo, mut hi) = (-60.0, 60.0);
    if !(g(lo) < 0.0 && g(hi) > 0.0) {
        return Err(Error::ChartSolveFailure(format!("interval length {h} out of range")));
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let l = if g(lo).abs() <= g(hi).abs() { lo } else { hi };
    let len = l.exp();
    let r = -l / (len * len);
    let slope = len * (r * len * len).exp();
    if (slope - 1.0).abs() > 1e-12 || !(len > 0.0) {
        return Err(Error::ChartSolveFailure(format!("mixed chart slope {slope}")));
    }
    Ok((len, r))
}

pub fn build_atlas(model: &MapModel) -> Result<Vec<IntervalChart>> {
    build_atlas_with(model, MixedRule::Quadratic)
}

pub fn build_atlas_with(model: &MapModel, rule: MixedRule) -> Result<Vec<IntervalChart>> {
    let mut offset = 0.0;
    let mut charts = Vec::new();
    for iv in &model.partition.intervals {
        let ch = IntervalChart::with_rule(iv.u, iv.v, iv.left_polar, iv.right_polar, offset, rule)?;
        offset += ch.len;
        charts.push(ch);
    }
    Ok(charts)
}

#[derive(Debug, Clone, Serialize)]
pub struct EndAsymptotics {
    pub polar: bool,
    /// Fitted order of the defect of ω against ±ξ²/2 (polar) or ±ξ (nonpolar);
    /// `None` when the defect vanishes identically to rounding.
    pub order: Option<f64>,
    /// Polar: estimate of the quadratic coefficient; nonpolar: ω' at the end.
    pub coefficient: f64,
    /// Polar only: fitted order of ω' - ξ.
    pub derivative_order: Option<f64>,
    pub max_defect: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChartAsymptotics {
    pub left: EndAsymptotics,
    pub right: EndAsymptotics,
}

impl ChartAsymptotics {
    pub fn passes(&self) -> bool {
        [&self.left, &self.right].iter().all(|e| {
            if e.polar {
                e.order.is_none_or(|o| o >= 3.9)
                    && (e.coefficient - 0.5).abs() <= 1e-6
                    && e.derivative_order.is_none_or(|o| o >= 2.9)
            } else {
                e.order.is_none_or(|o| o >= 1.9) && (e.coefficient - 1.0).abs() <= 1e-10
            }
        })
    }
}

/// Log–log regression of the endpoint defects over ξ ∈ [1e-4, 1e-2].
pub fn verify_chart_asymptotics(ch: &IntervalChart) -> ChartAsymptotics {
    let xi: Vec<f64> = (0..=20).map(|i| 1e-4 * 100f64.powf(i as f64 / 20.0)).collect();
    let end = |polar: bool, prof: Profile| {
        let (defects, dderiv): (Vec<f64>, Vec<f64>) = xi
            .iter()
            .map(|&x| {
                let d = prof.disp(x);
                if polar {
                    ((d - 0.5 * x * x).abs(), (prof.deriv(x) - x).abs())
                } else {
                    ((d - x).abs(), 0.0)
                }
            })
            .unzip();
        let fit = |vals: &[f64], scale: &dyn Fn(f64) -> f64| {
            // a defect at rounding level relative to the leading term counts as exact
            let exact = vals.iter().zip(&xi).all(|(v, x)| *v <= 4.0 * f64::EPSILON * scale(*x));
            (!exact).then(|| loglog_slope(&xi, vals))
        };
        let order = if polar { fit(&defects, &|x| 0.5 * x * x) } else { fit(&defects, &|x| x) };
        let derivative_order = if polar { fit(&dderiv, &|x| x) } else { None };
        let coefficient = if polar { prof.disp(1e-4) / 1e-8 } else { prof.deriv(0.0) };
        EndAsymptotics {
            polar,
            order,
            coefficient,
            derivative_order,
            max_defect: defects.iter().cloned().fold(0.0, f64::max),
        }
    };
    ChartAsymptotics { left: end(ch.left_polar, ch.left()), right: end(ch.right_polar, ch.right()) }
}

/// Reference for solving f(y) = ω_k near one end of J_k, when that end of I_k is
/// the image of an end of I_j.
#[derive(Debug, Clone)]
struct Anchor {
    /// the end of I_j mapped onto this end of I_k: false = left (u_j), true = right (v_j)
    from_right: bool,
    taylor: Vec<f64>,
}

#[derive(Debug, Clone)]
struct EdgeData {
    /// anchors for the left and right ends of J_k
    anchors: [Option<Anchor>; 2],
}

/// Conjugated inverse branches ψ_jk for every edge j ≻ k.
#[derive(Debug, Clone)]
pub struct BranchSystem {
    pub map: AnalyticMap,
    pub charts: Vec<IntervalChart>,
    pub edges: Vec<Edge>,
    pub lengths: Vec<f64>,
    data: Vec<EdgeData>,
}

/// Interface the operator discretization needs from a family of inverse branches.
pub trait BranchFamily: Sync {
    fn lengths(&self) -> &[f64];
    fn edges(&self) -> &[Edge];
    /// ψ_e and ψ'_e at a real point of J_to.
    fn eval_real(&self, e: usize, p: Loc) -> Result<(Loc, f64)>;
    /// ψ_e and ψ'_e along a complex path in J_to (local coordinates), by
    /// continuation from the real point `start`.
    fn eval_path(&self, e: usize, start: f64, path: &[C64]) -> Result<Vec<(C64, C64)>>;
}

impl BranchSystem {
    pub fn new(model: &MapModel, charts: Vec<IntervalChart>) -> Result<Self> {
        let part = &model.partition;
        let mut data = Vec::new();
        for e in &model.graph.edges {
            let (j, k) = (e.from, e.to);
            let ij = &part.intervals[j];
            let ik = &part.intervals[k];
            let img_u = part.cut_image[ij.left_cut];
            let img_v = part.cut_image[ij.right_cut];
            let anchor_for = |cut: usize| {
                if img_u == cut {
                    Some(Anchor { from_right: false, taylor: model.map.taylor_at(ij.u) })
                } else if img_v == cut {
                    Some(Anchor { from_right: true, taylor: model.map.taylor_at(ij.v) })
                } else {
                    None
                }
            };
            data.push(EdgeData { anchors: [anchor_for(ik.left_cut), anchor_for(ik.right_cut)] });
        }
        Ok(BranchSystem {
            map: model.map.clone(),
            lengths: charts.iter().map(|c| c.len).collect(),
            charts,
            edges: model.graph.edges.clone(),
            data,
        })
    }

    /// Solve f(y) = ω_k(p) on I_j. Returns the point of I_j as (distance from u_j,
    /// distance from v_j) and f'(y).
    fn preimage(&self, e: usize, p: Loc) -> Result<(f64, f64, f64)> {
        let edge = &self.edges[e];
        let (cj, ck) = (&self.charts[edge.from], &self.charts[edge.to]);
        let hj = cj.h();
        let near_left = p.near_left();
        let anchor = &self.data[e].anchors[if near_left { 0 } else { 1 }];
        // signed displacement of x = ω_k(p) from the chosen end of I_k
        let target = if near_left { ck.disp_left(p.t) } else { -ck.disp_right(p.s) };
        if let Some(a) = anchor {
            let dir = if a.from_right { -1.0 } else { 1.0 };
            let phi = |d: f64| {
                let (v, dv) = taylor_increment(&a.taylor, dir * d);
                (v - target, dv * dir)
            };
            let delta = if target == 0.0 {
                0.0
            } else {
                let (_, d0) = phi(0.0);
                let guess = if d0 != 0.0 {
                    target / d0
                } else {
                    let c2 = a.taylor.get(2).copied().unwrap_or(0.0);
                    (target / c2).abs().sqrt()
                };
                match safeguarded_newton(phi, 0.0, hj, guess.abs().min(hj), 1e-16) {
                    Some(d) => d,
                    // target at the far end of f(I_j) up to rounding
                    None if phi(hj).0.abs() <= 1e-12 * (1.0 + target.abs()) => hj,
                    None => return Err(Error::BranchInversionFailure(format!("edge {e} at {p:?}"))),
                }
            };
            let (_, fp) = taylor_increment(&a.taylor, dir * delta);
            return Ok(if a.from_right { (hj - delta, delta, fp) } else { (delta, hj - delta, fp) });
        }
        let x = if near_left { ck.u + target } else { ck.v + target };
        let f = |y: f64| (self.map.eval(y) - x, self.map.d1(y));
        let y = match safeguarded_newton(f, cj.u, cj.v, 0.5 * (cj.u + cj.v), 1e-16) {
            Some(y) => y,
            None => {
                // x at an end of f(I_j) up to rounding
                let (fu, fv) = (f(cj.u).0.abs(), f(cj.v).0.abs());
                if fu.min(fv) < 1e-12 {
                    if fu < fv {
                        cj.u
                    } else {
                        cj.v
                    }
                } else {
                    return Err(Error::BranchInversionFailure(format!("edge {e} at {p:?}")));
                }
            }
        };
        Ok((y - cj.u, cj.v - y, self.map.d1(y)))
    }

    /// Conjugated map g = ϖ ∘ f ∘ ω on J_j: returns the interval containing the image and the image point.
    pub fn g_real(&self, j: usize, p: Loc) -> (usize, Loc) {
        let x = self.map.eval(self.charts[j].omega(p));
        let k = self
            .charts
            .iter()
            .position(|c| x <= c.v)
            .unwrap_or(self.charts.len() - 1);
        (k, self.charts[k].varpi(x))
    }

    fn newton_c(&self, e: usize, z: C64, tau0: C64) -> Option<(C64, C64)> {
        let edge = &self.edges[e];
        let (cj, ck) = (&self.charts[edge.from], &self.charts[edge.to]);
        let (x, wk) = ck.omega_c(z);
        let mut tau = tau0;
        let mut prev = f64::INFINITY;
        for _ in 0..40 {
            let (y, wj) = cj.omega_c(tau);
            let fp = self.map.d1_c(y);
            let fval = self.map.eval_c(y) - x;
            let step = fval / (fp * wj);
            if !step.re.is_finite() || !step.im.is_finite() {
                return None;
            }
            tau -= step;
            let s = step.norm();
            // rounding in f (large coefficients) can keep steps above 1e-15;
            // stagnation at a tiny size counts as convergence
            if s <= 1e-15 * (1.0 + tau.norm()) || (s <= 1e-11 * cj.len && s >= 0.5 * prev) {
                let (y, wj) = cj.omega_c(tau);
                return Some((tau, wk / (self.map.d1_c(y) * wj)));
            }
            prev = s;
        }
        None
    }
}

impl BranchFamily for BranchSystem {
    fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    fn edges(&self) -> &[Edge] {
        &self.edges
    }

    fn eval_real(&self, e: usize, p: Loc) -> Result<(Loc, f64)> {
        let edge = &self.edges[e];
        let (cj, ck) = (&self.charts[edge.from], &self.charts[edge.to]);
        let (dl, dr, fp) = self.preimage(e, p)?;
        let q = if dl <= dr {
            Loc::from_left(cj.inv_left(dl), cj.len)
        } else {
            Loc::from_right(cj.inv_right(dr), cj.len)
        };
        let d = ck.omega_prime(p) / (fp * cj.omega_prime(q));
        Ok((q, d))
    }

    fn eval_path(&self, e: usize, start: f64, path: &[C64]) -> Result<Vec<(C64, C64)>> {
        let len_k = self.lengths[self.edges[e].to];
        let (q0, d0) = self.eval_real(e, Loc::from_left(start, len_k))?;
        let mut z = C64::new(start, 0.0);
        let mut tau = C64::new(q0.t, 0.0);
        let mut der = C64::new(d0, 0.0);
        let mut out = Vec::with_capacity(path.len());
        for &target in path {
            let (t, d) = march(self, e, z, tau, der, target, 0)?;
            z = target;
            tau = t;
            der = d;
            out.push((tau, der));
        }
        Ok(out)
    }
}

fn march(
    sys: &BranchSystem,
    e: usize,
    z0: C64,
    tau0: C64,
    d0: C64,
    z1: C64,
    depth: usize,
) -> Result<(C64, C64)> {
    let pred = tau0 + d0 * (z1 - z0);
    if let Some((tau, d)) = sys.newton_c(e, z1, pred) {
        let step = (pred - tau0).norm();
        if (tau - pred).norm() <= 0.2 * step + 1e-13 {
            return Ok((tau, d));
        }
    }
    if depth > 40 {
        return Err(Error::BranchInversionFailure(format!("continuation stalled on edge {e} near {z1}")));
    }
    let mid = 0.5 * (z0 + z1);
    let (tm, dm) = march(sys, e, z0, tau0, d0, mid, depth + 1)?;
    march(sys, e, mid, tm, dm, z1, depth + 1)
}

/// Boundary of the ε-neighbourhood (stadium) of [0, L], traversed once
/// counterclockwise starting and ending at L/2 + iε.
pub fn stadium_boundary(len: f64, eps: f64, n: usize) -> Vec<C64> {
    let perim = 2.0 * len + 2.0 * PI * eps;
    (0..=n)
        .map(|i| {
            // arclength measured from the top midpoint, moving left
            let mut a = perim * i as f64 / n as f64;
            if a <= 0.5 * len {
                return C64::new(0.5 * len - a, eps);
            }
            a -= 0.5 * len;
            if a <= PI * eps {
                let th = 0.5 * PI + a / eps;
                return C64::new(eps * th.cos(), eps * th.sin());
            }
            a -= PI * eps;
            if a <= len {
                return C64::new(a, -eps);
            }
            a -= len;
            if a <= PI * eps {
                let th = -0.5 * PI + a / eps;
                return C64::new(len + eps * th.cos(), eps * th.sin());
            }
            a -= PI * eps;
            C64::new(len - a, eps)
        })
        .collect()
}

/// Distance of a complex point from the real segment [0, L].
pub fn dist_to_segment(z: C64, len: f64) -> f64 {
    if z.re < 0.0 {
        z.norm()
    } else if z.re > len {
        (z - len).norm()
    } else {
        z.im.abs()
    }
}

/// Path from the real midpoint up to the top of a closed loop, then around it.
pub fn lift_then_loop(mid: f64, top: C64, lifts: usize, lp: &[C64]) -> Vec<C64> {
    let mut path: Vec<C64> = (1..=lifts)
        .map(|i| C64::new(mid, 0.0) + (top - mid) * (i as f64 / lifts as f64))
        .collect();
    path.extend_from_slice(&lp[1..]);
    path
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionAReport {
    pub epsilon: f64,
    pub boundary_points: usize,
    /// min over edges and boundary points of ε - dist(ψ(z), J_j)
    pub margin: f64,
    pub closure_error: f64,
    pub tried: Vec<(f64, f64)>,
}

/// Maps the boundary of each stadium U_k through every ψ_jk and measures how
/// far inside U_j the images stay. Searches a geometric ε grid if needed.
pub fn verify_assumption_a<B: BranchFamily>(sys: &B, eps0: f64, n_boundary: usize) -> Result<AssumptionAReport> {
    let mut tried = Vec::new();
    let mut eps = eps0;
    for _ in 0..8 {
        match assumption_a_margin(sys, eps, n_boundary) {
            Ok((margin, closure)) => {
                tried.push((eps, margin));
                if margin > 0.0 {
                    return Ok(AssumptionAReport {
                        epsilon: eps,
                        boundary_points: n_boundary,
                        margin,
                        closure_error: closure,
                        tried,
                    });
                }
            }
            Err(_) => tried.push((eps, f64::NEG_INFINITY)),
        }
        eps /= 1.6;
    }
    Err(Error::AssumptionAUnverified(format!("margins over the ε grid: {tried:?}")))
}

/// (margin, closure error) for a single ε; a loop that fails to close means a
/// branch point inside U_k and is reported as an error.
pub fn assumption_a_margin<B: BranchFamily>(sys: &B, eps: f64, n_boundary: usize) -> Result<(f64, f64)> {
    let lens = sys.lengths();
    let mut margin = f64::INFINITY;
    let mut closure: f64 = 0.0;
    for (e, edge) in sys.edges().iter().enumerate() {
        let lk = lens[edge.to];
        let lj = lens[edge.from];
        let lp = stadium_boundary(lk, eps, n_boundary);
        let path = lift_then_loop(0.5 * lk, lp[0], 8, &lp);
        let vals = sys.eval_path(e, 0.5 * lk, &path)?;
        let start = vals[7].0;
        let end = vals[vals.len() - 1].0;
        let gap = (start - end).norm();
        closure = closure.max(gap);
        if gap > 1e-8 * (1.0 + lj) {
            return Err(Error::AssumptionAUnverified(format!("branch point inside U_{} (monodromy {gap:e})", edge.to)));
        }
        for (tau, _) in &vals[7..] {
            margin = margin.min(eps - dist_to_segment(*tau, lj));
        }
    }
    Ok((margin, closure))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_chart_for_half_length_is_quadratic() {
        let ch = IntervalChart::new(0.0, 0.5, true, false, 0.0).unwrap();
        assert!((ch.len - 1.0).abs() < 1e-15);
        assert!(ch.r.abs() < 1e-15);
        assert!((ch.disp_left(0.3) - 0.045).abs() < 1e-16);
    }

    #[test]
    fn profile_inverses_roundtrip() {
        for (lp, rp) in [(true, false), (false, true), (true, true), (false, false)] {
            let ch = IntervalChart::new(0.2, 0.9, lp, rp, 0.0).unwrap();
            for &x in &[1e-9, 1e-4, 0.05, 0.3] {
                let t = ch.inv_left(ch.disp_left(x));
                let s = ch.inv_right(ch.disp_right(x));
                assert!((t - x).abs() <= 1e-13 * (1.0 + x), "{lp} {rp} {x} {t}");
                assert!((s - x).abs() <= 1e-13 * (1.0 + x), "{lp} {rp} {x} {s}");
            }
        }
    }

    #[test]
    fn complex_chart_matches_real() {
        let ch = IntervalChart::new(0.2, 0.9, false, true, 0.0).unwrap();
        for &t in &[0.1, 0.5, 0.9 * ch.len] {
            let p = Loc::from_left(t, ch.len);
            let (w, dw) = ch.omega_c(C64::new(t, 0.0));
            assert!((w.re - ch.omega(p)).abs() < 1e-14);
            assert!((dw.re - ch.omega_prime(p)).abs() < 1e-13);
        }
    }

    #[test]
    fn stadium_is_closed() {
        let b = stadium_boundary(1.0, 0.1, 64);
        assert!((b[0] - b[64]).norm() < 1e-14);
        for z in &b {
            assert!((dist_to_segment(*z, 1.0) - 0.1).abs() < 1e-12);
        }
    }
}
