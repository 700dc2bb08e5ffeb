//! The interval map, its postcritical orbit, Markov partition, covering graph
//! and the polarity of partition endpoints.

use crate::error::{Error, Result};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

/// Map configuration as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MapSpec {
    Logistic { lambda: f64 },
    Polynomial { coeffs: Vec<f64>, domain: [f64; 2] },
}

/// A unimodal polynomial map f on I = [a, b] with a = f²(c), b = f(c).
#[derive(Debug, Clone)]
pub struct AnalyticMap {
    pub spec: MapSpec,
    /// Coefficients in ascending powers of x.
    pub coeffs: Vec<f64>,
    pub domain: (f64, f64),
}

const ENDPOINT_TOL: f64 = 1e-12;

impl AnalyticMap {
    pub fn logistic(lambda: f64) -> Result<Self> {
        if !(lambda > 2.0 && lambda <= 4.0) {
            return Err(Error::InvalidMap(format!("logistic parameter {lambda} outside (2, 4]")));
        }
        let coeffs = vec![0.0, lambda, -lambda];
        let b = lambda / 4.0;
        let a = lambda * b * (1.0 - b);
        let map = AnalyticMap { spec: MapSpec::Logistic { lambda }, coeffs, domain: (a, b) };
        map.validate()?;
        Ok(map)
    }

    pub fn polynomial(coeffs: Vec<f64>, domain: [f64; 2]) -> Result<Self> {
        if coeffs.len() < 3 || !(domain[0] < domain[1]) {
            return Err(Error::InvalidMap("need degree >= 2 and a nonempty domain".into()));
        }
        if coeffs.iter().chain(domain.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidMap("non-finite coefficient or domain".into()));
        }
        let map = AnalyticMap {
            spec: MapSpec::Polynomial { coeffs: coeffs.clone(), domain },
            coeffs,
            domain: (domain[0], domain[1]),
        };
        map.validate()?;
        Ok(map)
    }

    pub fn from_spec(spec: &MapSpec) -> Result<Self> {
        match spec {
            MapSpec::Logistic { lambda } => Self::logistic(*lambda),
            MapSpec::Polynomial { coeffs, domain } => Self::polynomial(coeffs.clone(), *domain),
        }
    }

    fn validate(&self) -> Result<()> {
        let c = find_critical_point(self)?;
        let (a, b) = self.domain;
        if self.d2(c) >= 0.0 {
            return Err(Error::InvalidMap("f''(c) must be negative".into()));
        }
        let scale = 1.0 + a.abs().max(b.abs());
        let fc = self.eval(c);
        let ffc = self.eval(fc);
        if (fc - b).abs() > ENDPOINT_TOL * scale || (ffc - a).abs() > ENDPOINT_TOL * scale {
            return Err(Error::InvalidMap(format!(
                "domain must be [f^2(c), f(c)] = [{ffc}, {fc}], got [{a}, {b}]"
            )));
        }
        let lo = self.eval(a).min(self.eval(b));
        if lo < a - ENDPOINT_TOL * scale {
            return Err(Error::InvalidMap("f does not map I into I".into()));
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn d1(&self, x: f64) -> f64 {
        let n = self.coeffs.len();
        (1..n).rev().fold(0.0, |acc, k| acc * x + k as f64 * self.coeffs[k])
    }

    pub fn d2(&self, x: f64) -> f64 {
        let n = self.coeffs.len();
        (2..n).rev().fold(0.0, |acc, k| acc * x + (k * (k - 1)) as f64 * self.coeffs[k])
    }

    pub fn eval_c(&self, z: C64) -> C64 {
        self.coeffs.iter().rev().fold(C64::new(0.0, 0.0), |acc, &c| acc * z + c)
    }

    pub fn d1_c(&self, z: C64) -> C64 {
        let n = self.coeffs.len();
        (1..n).rev().fold(C64::new(0.0, 0.0), |acc, k| acc * z + k as f64 * self.coeffs[k])
    }

    /// Taylor coefficients of δ ↦ f(q + δ) (ascending). Evaluating
    /// f(q+δ) - f(q) from these avoids cancellation for small δ.
    pub fn taylor_at(&self, q: f64) -> Vec<f64> {
        let mut a = self.coeffs.clone();
        let n = a.len();
        for i in 0..n {
            for j in (i..n - 1).rev() {
                a[j] += q * a[j + 1];
            }
        }
        a
    }

    /// f^n(x) and (f^n)'(x).
    pub fn iterate_with_derivative(&self, x: f64, n: usize) -> (f64, f64) {
        let mut y = x;
        let mut d = 1.0;
        for _ in 0..n {
            d *= self.d1(y);
            y = self.eval(y);
        }
        (y, d)
    }
}

/// Increment f(q + δ) - f(q) and its δ-derivative from Taylor coefficients at q.
pub fn taylor_increment(t: &[f64], delta: f64) -> (f64, f64) {
    let n = t.len();
    let mut v = 0.0;
    let mut d = 0.0;
    for k in (1..n).rev() {
        v = v * delta + t[k];
        d = d * delta + k as f64 * t[k];
    }
    (v * delta, d)
}

/// The critical point c, where f' changes sign from + to -.
pub fn find_critical_point(map: &AnalyticMap) -> Result<f64> {
    let (a, b) = map.domain;
    let n = 2048;
    let xs: Vec<f64> = (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect();
    let mut changes = Vec::new();
    for w in xs.windows(2) {
        let (d0, d1) = (map.d1(w[0]), map.d1(w[1]));
        if d0 > 0.0 && d1 <= 0.0 {
            changes.push((w[0], w[1]));
        } else if d0 < 0.0 && d1 >= 0.0 {
            return Err(Error::NoSignChange);
        }
    }
    if changes.len() != 1 {
        return Err(Error::NoSignChange);
    }
    let (lo, hi) = changes[0];
    let c = crate::numerics::safeguarded_newton(|x| (map.d1(x), map.d2(x)), lo, hi, 0.5 * (lo + hi), 1e-17)
        .ok_or(Error::NoSignChange)?;
    if !(c > a && c < b) {
        return Err(Error::NoSignChange);
    }
    Ok(c)
}

#[derive(Debug, Clone, Serialize)]
pub struct PostcriticalOrbit {
    /// p_1 = f(c), p_{i+1} = f(p_i); the last `period` entries form the cycle.
    pub points: Vec<f64>,
    pub preperiod: usize,
    pub period: usize,
    pub tol: f64,
    /// (f^p)' along the cycle.
    pub cycle_multiplier: f64,
}

impl PostcriticalOrbit {
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    /// Index of the orbit point following `i`.
    pub fn next(&self, i: usize) -> usize {
        if i + 1 < self.points.len() {
            i + 1
        } else {
            self.preperiod
        }
    }
}

/// Iterates f from f(c) until it recurs; snaps the cycle with Newton on f^p(x) = x.
pub fn postcritical_orbit(map: &AnalyticMap, c: f64, max_iter: usize, tol: f64) -> Result<PostcriticalOrbit> {
    const PERSIST: usize = 3;
    let mut xs = vec![map.eval(c)];
    let scale = map.domain.1 - map.domain.0;
    for n in 1..max_iter {
        let x = map.eval(xs[n - 1]);
        xs.push(x);
        // earlier iterate within tol whose continuation keeps matching
        let hit = (0..n).find(|&i| (xs[i] - x).abs() <= tol * scale);
        if let Some(i) = hit {
            let mut ok = true;
            let (mut y, mut z) = (xs[i], x);
            for _ in 0..PERSIST {
                y = map.eval(y);
                z = map.eval(z);
                if (y - z).abs() > tol * scale {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            let period = n - i;
            let preperiod = i;
            let mut pts = xs[..n].to_vec();
            // Newton refinement of the cycle
            let mut x0 = pts[i];
            for _ in 0..50 {
                let (y, d) = map.iterate_with_derivative(x0, period);
                let step = (y - x0) / (d - 1.0);
                x0 -= step;
                if step.abs() < 1e-16 * (1.0 + x0.abs()) {
                    break;
                }
            }
            if (x0 - pts[i]).abs() > 10.0 * tol * scale {
                return Err(Error::OrbitNotFinite(max_iter));
            }
            pts[i] = x0;
            for k in 1..period {
                pts[i + k] = map.eval(pts[i + k - 1]);
            }
            let (_, mult) = map.iterate_with_derivative(x0, period);
            if mult.abs() <= 1.0 + 1e-6 {
                return Err(Error::NonRepellingCycle(mult.abs()));
            }
            return Ok(PostcriticalOrbit { points: pts, preperiod, period, tol, cycle_multiplier: mult });
        }
    }
    Err(Error::OrbitNotFinite(max_iter))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CutKind {
    Critical,
    /// Index into the postcritical orbit.
    Post(usize),
}

/// One subinterval I_j = [u, v] together with the polarity of its two ends:
/// the left end is the + side of its cut point, the right end the - side.
#[derive(Debug, Clone, Serialize)]
pub struct PartInterval {
    pub u: f64,
    pub v: f64,
    pub left_cut: usize,
    pub right_cut: usize,
    pub left_polar: bool,
    pub right_polar: bool,
    /// +1 where f is increasing on I_j, -1 where decreasing.
    pub sign: i32,
}

#[derive(Debug, Clone, Serialize)]
pub struct MarkovPartition {
    pub critical_point: f64,
    pub cuts: Vec<f64>,
    pub cut_kind: Vec<CutKind>,
    /// Index of f(cut) among the cuts.
    pub cut_image: Vec<usize>,
    pub intervals: Vec<PartInterval>,
    /// Cut indices bounding f(I_j).
    pub image_cuts: Vec<(usize, usize)>,
    pub markov_residual: f64,
    /// Per cut: polar as - endpoint, polar as + endpoint.
    pub polar_minus: Vec<bool>,
    pub polar_plus: Vec<bool>,
    /// Interior cuts that are polar on exactly one side.
    pub mixed_joins: Vec<usize>,
}

impl MarkovPartition {
    pub fn len(&self) -> usize {
        self.intervals.len()
    }
    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

pub fn build_partition(map: &AnalyticMap, c: f64, orbit: &PostcriticalOrbit) -> Result<MarkovPartition> {
    let scale = map.domain.1 - map.domain.0;
    let mut cuts: Vec<(f64, CutKind)> = vec![(c, CutKind::Critical)];
    for (i, &p) in orbit.points.iter().enumerate() {
        cuts.push((p, CutKind::Post(i)));
    }
    cuts.sort_by(|x, y| x.0.total_cmp(&y.0));
    for w in cuts.windows(2) {
        if w[1].0 - w[0].0 <= 100.0 * orbit.tol * scale {
            return Err(Error::NotMarkov(format!("cut points {} and {} coincide", w[0].0, w[1].0)));
        }
    }
    let (a, b) = map.domain;
    let tol = 1e-9 * scale;
    if (cuts[0].0 - a).abs() > tol || (cuts[cuts.len() - 1].0 - b).abs() > tol {
        return Err(Error::NotMarkov("cut set does not span the domain".into()));
    }
    let values: Vec<f64> = cuts.iter().map(|c| c.0).collect();
    let locate = |x: f64| -> Option<(usize, f64)> {
        let (i, d) = values
            .iter()
            .enumerate()
            .map(|(i, v)| (i, (v - x).abs()))
            .min_by(|p, q| p.1.total_cmp(&q.1))
            .unwrap();
        (d <= tol).then_some((i, d))
    };
    let mut residual: f64 = 0.0;
    let mut cut_image = Vec::new();
    for &x in &values {
        let (i, d) = locate(map.eval(x))
            .ok_or_else(|| Error::NotMarkov(format!("image of cut {x} is not a cut point")))?;
        residual = residual.max(d);
        cut_image.push(i);
    }
    let mut intervals = Vec::new();
    let mut image_cuts = Vec::new();
    for j in 0..values.len() - 1 {
        let (u, v) = (values[j], values[j + 1]);
        let sign = if v <= c + tol { 1 } else { -1 };
        let (i0, i1) = (cut_image[j], cut_image[j + 1]);
        image_cuts.push((i0.min(i1), i0.max(i1)));
        intervals.push(PartInterval {
            u,
            v,
            left_cut: j,
            right_cut: j + 1,
            left_polar: false,
            right_polar: false,
            sign,
        });
    }
    let n = values.len();
    Ok(MarkovPartition {
        critical_point: c,
        cuts: values,
        cut_kind: cuts.iter().map(|c| c.1).collect(),
        cut_image,
        intervals,
        image_cuts,
        markov_residual: residual,
        polar_minus: vec![false; n],
        polar_plus: vec![false; n],
        mixed_joins: Vec::new(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Edge {
    /// Covering interval j (ψ maps J_k into J_j).
    pub from: usize,
    /// Covered interval k.
    pub to: usize,
    pub sign: i32,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoveringGraph {
    pub edges: Vec<Edge>,
    pub adjacency: Vec<Vec<bool>>,
    pub mixing_exponent: usize,
}

pub fn covering_graph(part: &MarkovPartition) -> Result<CoveringGraph> {
    let m = part.len();
    let mut adjacency = vec![vec![false; m]; m];
    let mut edges = Vec::new();
    for (j, iv) in part.intervals.iter().enumerate() {
        let (lo, hi) = part.image_cuts[j];
        for (k, row) in adjacency[j].iter_mut().enumerate() {
            if k >= lo && k < hi {
                *row = true;
                edges.push(Edge { from: j, to: k, sign: iv.sign });
            }
        }
    }
    let mut power = adjacency.clone();
    for n in 1..=2 * m * m {
        if power.iter().all(|r| r.iter().all(|&b| b)) {
            return Ok(CoveringGraph { edges, adjacency, mixing_exponent: n });
        }
        power = bool_mul(&power, &adjacency);
    }
    Err(Error::NotMixing(format!(
        "no power of the {m}x{m} covering matrix up to {} is positive",
        2 * m * m
    )))
}

fn bool_mul(x: &[Vec<bool>], y: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let m = x.len();
    (0..m)
        .map(|i| (0..m).map(|k| (0..m).any(|j| x[i][j] && y[j][k])).collect())
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PolarityReport {
    pub n_probe: usize,
    /// (orbit index, polar as -, polar as +) from extremal values of f^n.
    pub sampled: Vec<(usize, bool, bool)>,
    pub propagated: Vec<(usize, bool, bool)>,
}

/// Marks P-points polar as − endpoints (local maximum values of f^n) and
/// as + endpoints (local minimum values), cross-checked against
/// propagation of the side of b = f(c) along the orbit.
pub fn classify_polarity(
    map: &AnalyticMap,
    part: &mut MarkovPartition,
    orbit: &PostcriticalOrbit,
    n_probe: usize,
) -> Result<PolarityReport> {
    let m = orbit.len();
    // propagation: b is a maximum value; sides flip where f' < 0
    let mut prop = vec![(false, false); m];
    let mut i = 0usize;
    let mut minus = true;
    for _ in 0..2 * m + 2 {
        if minus {
            prop[i].0 = true;
        } else {
            prop[i].1 = true;
        }
        if map.d1(orbit.points[i]) < 0.0 {
            minus = !minus;
        }
        i = orbit.next(i);
    }
    // sampling: extremal values of f^n at its interior critical points
    let (a, b) = map.domain;
    let grid = 100_000;
    let dn = |x: f64| map.iterate_with_derivative(x, n_probe).1;
    let mut samp = vec![(false, false); m];
    let scale = b - a;
    // shifted grid so that no sample lands exactly on a critical point
    let node = |g: usize| a + scale * (g as f64 + std::f64::consts::FRAC_1_PI) / (grid as f64 + 1.0);
    let mut prev_x = node(0);
    let mut prev_d = dn(prev_x);
    let mut unmatched = Vec::new();
    for g in 1..=grid {
        let x = node(g);
        let d = dn(x);
        if prev_d != 0.0 && d != 0.0 && prev_d.signum() != d.signum() {
            let is_max = prev_d > 0.0;
            let root = bisect_sign_change(&dn, prev_x, x);
            let val = map.iterate_with_derivative(root, n_probe).0;
            match orbit
                .points
                .iter()
                .position(|p| (p - val).abs() <= 1e-7 * scale)
            {
                Some(k) => {
                    if is_max {
                        samp[k].0 = true;
                    } else {
                        samp[k].1 = true;
                    }
                }
                None => unmatched.push(val),
            }
        }
        prev_x = x;
        prev_d = d;
    }
    let report = PolarityReport {
        n_probe,
        sampled: samp.iter().enumerate().map(|(k, s)| (k, s.0, s.1)).collect(),
        propagated: prop.iter().enumerate().map(|(k, s)| (k, s.0, s.1)).collect(),
    };
    if !unmatched.is_empty() {
        return Err(Error::UnstableClassification(format!(
            "critical values of f^{n_probe} not in P: {unmatched:?}"
        )));
    }
    if samp != prop {
        return Err(Error::UnstableClassification(format!(
            "sampling {:?} disagrees with propagation {:?}",
            report.sampled, report.propagated
        )));
    }
    for (ci, kind) in part.cut_kind.iter().enumerate() {
        if let CutKind::Post(k) = kind {
            part.polar_minus[ci] = prop[*k].0;
            part.polar_plus[ci] = prop[*k].1;
        }
    }
    let ncut = part.cuts.len();
    for iv in part.intervals.iter_mut() {
        iv.left_polar = part.polar_plus[iv.left_cut];
        iv.right_polar = part.polar_minus[iv.right_cut];
    }
    part.mixed_joins = (1..ncut - 1)
        .filter(|&ci| part.polar_minus[ci] != part.polar_plus[ci])
        .collect();
    Ok(report)
}

fn bisect_sign_change<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Everything the later stages need from the map.
#[derive(Debug, Clone)]
pub struct MapModel {
    pub map: AnalyticMap,
    pub orbit: PostcriticalOrbit,
    pub partition: MarkovPartition,
    pub graph: CoveringGraph,
    pub polarity: PolarityReport,
}

impl MapModel {
    pub fn build(map: AnalyticMap, max_iter: usize, tol: f64) -> Result<Self> {
        let c = find_critical_point(&map)?;
        let orbit = postcritical_orbit(&map, c, max_iter, tol)?;
        let mut partition = build_partition(&map, c, &orbit)?;
        let graph = covering_graph(&partition)?;
        let n_probe = orbit.preperiod + 2 * orbit.period + 3;
        let polarity = classify_polarity(&map, &mut partition, &orbit, n_probe)?;
        Ok(MapModel { map, orbit, partition, graph, polarity })
    }

    pub fn critical_point(&self) -> f64 {
        self.partition.critical_point
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taylor_shift_matches_direct_evaluation() {
        let m = AnalyticMap::logistic(4.0).unwrap();
        let t = m.taylor_at(0.3);
        let (inc, d) = taylor_increment(&t, 0.05);
        assert!((inc - (m.eval(0.35) - m.eval(0.3))).abs() < 1e-15);
        assert!((d - m.d1(0.35)).abs() < 1e-14);
    }

    #[test]
    fn ulam_orbit_and_partition() {
        let mm = MapModel::build(AnalyticMap::logistic(4.0).unwrap(), 10_000, 1e-10).unwrap();
        assert_eq!(mm.orbit.points, vec![1.0, 0.0]);
        assert_eq!((mm.orbit.preperiod, mm.orbit.period), (1, 1));
        assert_eq!(mm.partition.cuts, vec![0.0, 0.5, 1.0]);
        assert_eq!(mm.graph.mixing_exponent, 1);
        assert!(mm.partition.intervals[0].left_polar && !mm.partition.intervals[0].right_polar);
        assert!(!mm.partition.intervals[1].left_polar && mm.partition.intervals[1].right_polar);
    }

    #[test]
    fn bad_domain_is_rejected() {
        assert!(AnalyticMap::polynomial(vec![0.0, 4.0, -4.0], [0.0, 0.9]).is_err());
    }
}
