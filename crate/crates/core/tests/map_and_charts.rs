mod common;

use unimodal_response::chart_atlas::{assumption_a_margin, build_atlas_with, verify_chart_asymptotics, BranchSystem, IntervalChart, Loc, MixedRule};
use unimodal_response::map_model::{
    build_partition, classify_polarity, covering_graph, find_critical_point, postcritical_orbit, AnalyticMap, MapModel,
    MarkovPartition,
};
use unimodal_response::Error;

const BAND_MERGING: f64 = 3.678573510428322;

fn partition_of(map: &AnalyticMap) -> MarkovPartition {
    let c = find_critical_point(map).unwrap();
    let orbit = postcritical_orbit(map, c, 64, 1e-10).unwrap();
    let mut part = build_partition(map, c, &orbit).unwrap();
    classify_polarity(map, &mut part, &orbit, orbit.preperiod + 2 * orbit.period + 3).unwrap();
    part
}

fn cut_index(part: &MarkovPartition, x: f64) -> usize {
    part.cuts.iter().position(|&c| (c - x).abs() < 1e-9).unwrap()
}

#[test]
fn band_merging_parameter_is_the_cubic_root() {
    let l = BAND_MERGING;
    assert!((l * l * l - 2.0 * l * l - 4.0 * l - 8.0).abs() < 1e-12);
}

#[test]
fn ulam_polarity_matches_extremes_of_the_fifth_iterate() {
    let map = AnalyticMap::logistic(4.0).unwrap();
    let n = 100_000;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..=n {
        let mut x = i as f64 / n as f64;
        for _ in 0..5 {
            x = 4.0 * x * (1.0 - x);
        }
        lo = lo.min(x);
        hi = hi.max(x);
    }
    assert!(hi > 1.0 - 1e-9 && lo < 1e-12);
    let part = partition_of(&map);
    assert!(part.polar_minus[cut_index(&part, 1.0)]);
    assert!(part.polar_plus[cut_index(&part, 0.0)]);
    let c = cut_index(&part, 0.5);
    assert!(!part.polar_minus[c] && !part.polar_plus[c]);
}

#[test]
fn band_merging_critical_value_is_polar_minus() {
    let map = AnalyticMap::logistic(BAND_MERGING).unwrap();
    let part = partition_of(&map);
    assert_eq!(part.intervals.len(), 3);
    assert!(part.polar_minus[cut_index(&part, map.eval(0.5))]);
}

#[test]
fn band_merging_map_is_not_mixing() {
    // f exchanges [f²(c), p] and [p, f(c)], p the interior fixed point
    let map = AnalyticMap::logistic(BAND_MERGING).unwrap();
    let (c1, p) = (map.eval(0.5), 1.0 - 1.0 / BAND_MERGING);
    let c2 = map.eval(c1);
    for i in 0..=1000 {
        let t = i as f64 / 1000.0;
        let x = p + t * (c1 - p);
        assert!(map.eval(x) >= c2 - 1e-12 && map.eval(x) <= p + 1e-12);
        let y = c2 + t * (p - c2);
        assert!(map.eval(y) >= p - 1e-12);
    }
    let part = partition_of(&map);
    assert!(matches!(covering_graph(&part), Err(Error::NotMixing(_))));
    assert!(matches!(MapModel::build(map, 64, 1e-10), Err(Error::NotMixing(_))));
}

#[test]
fn non_recurrent_parameter_is_rejected() {
    let map = AnalyticMap::logistic(3.7).unwrap();
    let c = find_critical_point(&map).unwrap();
    assert!(matches!(postcritical_orbit(&map, c, 64, 1e-10), Err(Error::OrbitNotFinite(_))));
}

#[test]
fn charts_have_the_required_endpoint_behavior() {
    for p in [common::ulam(24), common::band_return()] {
        for ch in &p.sys.charts {
            let asym = verify_chart_asymptotics(ch);
            assert!(asym.passes(), "{asym:?}");
            // ω covers the whole interval
            assert!((ch.omega(Loc::from_left(0.0, ch.len)) - ch.u).abs() < 1e-14);
            assert!((ch.omega(Loc::from_right(0.0, ch.len)) - ch.v).abs() < 1e-12);
        }
    }
}

#[test]
fn flat_end_rule_matches_slope_and_curvature_at_the_nonpolar_end() {
    let ch = IntervalChart::with_rule(0.2, 0.6, true, false, 0.0, MixedRule::FlatEnd).unwrap();
    let h = 1e-4;
    let d1 = ch.omega_prime(Loc::from_right(0.0, ch.len));
    let d2 = (ch.omega_prime(Loc::from_right(h, ch.len)) - d1) / h;
    assert!((d1 - 1.0).abs() < 1e-12);
    assert!(d2.abs() < 1e-3, "ω'' at the flat end {d2}");
    let q = IntervalChart::with_rule(0.2, 0.6, true, false, 0.0, MixedRule::Quadratic).unwrap();
    let dq = (q.omega_prime(Loc::from_right(h, q.len)) - 1.0) / h;
    assert!(dq.abs() > 0.1, "the quadratic rule bends at the nonpolar end");
}

#[test]
fn assumption_a_holds_for_ulam_and_fails_for_huge_neighborhoods() {
    let model = MapModel::build(AnalyticMap::logistic(4.0).unwrap(), 64, 1e-10).unwrap();
    let sys = BranchSystem::new(&model, build_atlas_with(&model, MixedRule::Quadratic).unwrap()).unwrap();
    let l = sys.lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    let (margin, closure) = assumption_a_margin(&sys, 0.15 * l, 512).unwrap();
    assert!(margin > 0.0 && closure < 1e-8, "{margin} {closure}");
    let total: f64 = sys.lengths.iter().sum();
    let huge = assumption_a_margin(&sys, 2.0 * total, 512);
    assert!(huge.map_or(true, |(m, _)| m <= 0.0));
}
