#![allow(dead_code)]

use nalgebra::DVector;
use std::path::PathBuf;
use unimodal_response::chart_atlas::{build_atlas_with, BranchSystem, MixedRule};
use unimodal_response::map_model::{AnalyticMap, MapModel};
use unimodal_response::report::RunConfig;
use unimodal_response::transfer_operator::{assemble_operators, BasisConfig, OperatorDiscretization};

pub fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::from_file(&path).unwrap()
}

/// Map model, branch system, discretized operator and invariant density.
pub struct Pipeline {
    pub model: MapModel,
    pub sys: BranchSystem,
    pub op: OperatorDiscretization,
    pub sigma: DVector<f64>,
}

pub fn pipeline(map: AnalyticMap, rule: MixedRule, degree: usize) -> Pipeline {
    let model = MapModel::build(map, 64, 1e-10).unwrap();
    let charts = build_atlas_with(&model, rule).unwrap();
    let sys = BranchSystem::new(&model, charts).unwrap();
    let op = assemble_operators(&sys, BasisConfig { degree, rho: None }).unwrap();
    let sigma = op.invariant_density().unwrap();
    Pipeline { model, sys, op, sigma }
}

pub fn ulam(degree: usize) -> Pipeline {
    pipeline(AnalyticMap::logistic(4.0).unwrap(), MixedRule::Quadratic, degree)
}

pub fn band_return() -> Pipeline {
    let cfg = config("band_return.json");
    pipeline(AnalyticMap::from_spec(&cfg.map).unwrap(), cfg.mixed_chart, cfg.degree)
}
