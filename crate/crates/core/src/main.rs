use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use std::path::PathBuf;
use std::process::ExitCode;
use unimodal_response::report::{error_json, run_pipeline, verify, write_artifacts, RunConfig, Target};
use unimodal_response::Error;

/// Transfer operators, invariant densities and susceptibility functions of
/// postcritically finite unimodal maps.
#[derive(Parser)]
#[command(name = "unimodal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Postcritical orbit, Markov partition, polarity and covering graph.
    Partition(Common),
    /// Singular charts, their endpoint asymptotics and the Assumption A margin.
    Atlas(Common),
    /// Leading eigenvalues of the discretized transfer operator.
    Spectrum(Common),
    /// Invariant density sampled on an interior grid.
    Density(Common),
    /// Ψ(λ) on the configured λ grid.
    Psi(Common),
    /// Pole table of Ψ with residues and winding numbers.
    Poles(Common),
    /// Full invariant suite; exit 0 iff every check passes.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Use the logistic map x ↦ λx(1-x) with this λ.
    #[arg(long)]
    logistic: Option<f64>,
    /// Mixed chart rule: quadratic or flat_end.
    #[arg(long)]
    mixed_chart: Option<String>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    n_keep: Option<usize>,
    #[arg(long)]
    n_certified: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    orbit_tol: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    density_points: Option<usize>,
    #[arg(long)]
    series_terms: Option<usize>,
    #[arg(long)]
    series_quad: Option<usize>,
    #[arg(long)]
    overlap_radius: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// λ grid as JSON, e.g. '{"kind":"circle","n":64,"radius":1.0}'.
    #[arg(long)]
    grid: Option<String>,
    /// Perturbation X: a name (one, x, x^2, x(1-x)) or JSON coefficients; repeatable.
    #[arg(long = "x")]
    x: Vec<String>,
    /// Observable A: a name or JSON coefficients.
    #[arg(long = "a")]
    a: Option<String>,
}

fn observable_value(s: &str) -> Value {
    match serde_json::from_str::<Value>(s) {
        Ok(Value::Array(a)) => json!({ "coeffs": a }),
        Ok(v @ Value::Object(_)) => v,
        _ => Value::String(s.to_string()),
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let mut v: Value = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => json!({}),
    };
    let obj = v.as_object_mut().ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
    let mut set = |k: &str, val: Value| {
        obj.insert(k.to_string(), val);
    };
    if let Some(l) = c.logistic {
        set("map", json!({"family": "logistic", "lambda": l}));
    }
    macro_rules! flag {
        ($($f:ident),*) => {$( if let Some(x) = &c.$f { set(stringify!($f), json!(x)); } )*};
    }
    flag!(mixed_chart, degree, rho, n_keep, n_certified, max_iter, orbit_tol, output_dir, density_points, series_terms, series_quad, overlap_radius, seed);
    if let Some(g) = &c.grid {
        set("grid", serde_json::from_str(g)?);
    }
    if !c.x.is_empty() || c.a.is_some() {
        let mut o = obj.get("observables").cloned().unwrap_or_else(|| json!({}));
        if !c.x.is_empty() {
            o["x"] = Value::Array(c.x.iter().map(|s| observable_value(s)).collect());
        }
        if let Some(a) = &c.a {
            o["a"] = observable_value(a);
        }
        obj.insert("observables".into(), o);
    }
    let text = serde_json::to_string(&v)?;
    RunConfig::from_json(&text)
}

fn emit(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (target, common) = match &cli.command {
        Command::Partition(c) => (Target::Partition, c),
        Command::Atlas(c) => (Target::Atlas, c),
        Command::Spectrum(c) => (Target::Spectrum, c),
        Command::Density(c) => (Target::Density, c),
        Command::Psi(c) => (Target::Psi, c),
        Command::Poles(c) => (Target::Poles, c),
        Command::Verify(c) => (Target::Verify, c),
    };
    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(e) => {
            // anything wrong with the configuration itself is a usage error
            let e = match e {
                Error::Json(_) | Error::Config(_) => e,
                other => Error::Config(other.to_string()),
            };
            eprintln!("error: {e}");
            emit(&error_json(None, &e));
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if target == Target::Verify {
        let (code, summary) = verify(&cfg);
        emit(&summary);
        return ExitCode::from(code as u8);
    }
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    match run_pipeline(&cfg, target) {
        Ok(b) => match write_artifacts(&b, &dir, target) {
            Ok(files) => {
                emit(&json!({
                    "schema_version": unimodal_response::report::SCHEMA_VERSION,
                    "output_dir": dir,
                    "files": files,
                    "checks_passed": b.verification.passed,
                    "n_failed": b.verification.n_failed,
                }));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                emit(&error_json(None, &e));
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            emit(&error_json(Some(e.stage), &e.source));
            ExitCode::from(e.source.exit_code() as u8)
        }
    }
}
