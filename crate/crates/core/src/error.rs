use thiserror::Error;

/// Pipeline stage that raised an error, used for reporting provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    MapModel,
    ChartAtlas,
    TransferOperator,
    Susceptibility,
    Report,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("map is not unimodal: f' does not change sign on the domain")]
    NoSignChange,
    #[error("map invalid: {0}")]
    InvalidMap(String),
    #[error("postcritical orbit did not recur within {0} iterations")]
    OrbitNotFinite(usize),
    #[error("postcritical cycle is not repelling: |(f^p)'| = {0}")]
    NonRepellingCycle(f64),
    #[error("partition is not Markov: {0}")]
    NotMarkov(String),
    #[error("covering graph is not mixing: {0}")]
    NotMixing(String),
    #[error("polarity classification unstable: {0}")]
    UnstableClassification(String),
    #[error("chart solve failed: {0}")]
    ChartSolveFailure(String),
    #[error("chart asymptotics violated: {0}")]
    AsymptoticsViolation(String),
    #[error("branch inversion failed: {0}")]
    BranchInversionFailure(String),
    #[error("Assumption A could not be verified: {0}")]
    AssumptionAUnverified(String),
    #[error("eigensolve failed: {0}")]
    EigensolveFailure(String),
    #[error("invariant density changes sign: min node value {0:e}")]
    NonPositiveDensity(f64),
    #[error("residue mismatch: extrapolated {extrapolated:e}, closed form {closed:e}")]
    ResidueMismatch { extrapolated: f64, closed: f64 },
    #[error("periodic postcritical point lacks a polar side: {0}")]
    NonPolarCycle(String),
    #[error("resolvent solve ill-conditioned: residual {0:e}")]
    ResolventIllConditioned(f64),
    #[error("decomposition residual too large: {0}")]
    DecompositionResidual(String),
    #[error("direct series diverges: {0}")]
    SeriesDivergence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 1 for maps outside the verified class,
    /// 2 for usage problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            NoSignChange
            | InvalidMap(_)
            | OrbitNotFinite(_)
            | NonRepellingCycle(_)
            | NotMarkov(_)
            | NotMixing(_)
            | UnstableClassification(_)
            | AssumptionAUnverified(_)
            | NonPolarCycle(_)
            | AsymptoticsViolation(_)
            | NonPositiveDensity(_)
            | ResidueMismatch { .. }
            | DecompositionResidual(_) => 1,
            Config(_) | Json(_) => 2,
            ChartSolveFailure(_)
            | BranchInversionFailure(_)
            | EigensolveFailure(_)
            | ResolventIllConditioned(_)
            | SeriesDivergence(_)
            | Io(_)
            | Csv(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        use Error::*;
        match self {
            NoSignChange => "NoSignChange",
            InvalidMap(_) => "InvalidMap",
            OrbitNotFinite(_) => "OrbitNotFinite",
            NonRepellingCycle(_) => "NonRepellingCycle",
            NotMarkov(_) => "NotMarkov",
            NotMixing(_) => "NotMixing",
            UnstableClassification(_) => "UnstableClassification",
            ChartSolveFailure(_) => "ChartSolveFailure",
            AsymptoticsViolation(_) => "AsymptoticsViolation",
            BranchInversionFailure(_) => "BranchInversionFailure",
            AssumptionAUnverified(_) => "AssumptionAUnverified",
            EigensolveFailure(_) => "EigensolveFailure",
            NonPositiveDensity(_) => "NonPositiveDensity",
            ResidueMismatch { .. } => "ResidueMismatch",
            NonPolarCycle(_) => "NonPolarCycle",
            ResolventIllConditioned(_) => "ResolventIllConditioned",
            DecompositionResidual(_) => "DecompositionResidual",
            SeriesDivergence(_) => "SeriesDivergence",
            Config(_) => "Config",
            Io(_) => "Io",
            Json(_) => "Json",
            Csv(_) => "Csv",
        }
    }
}

/// An error tagged with the stage that produced it.
#[derive(Debug, Error)]
#[error("{stage:?}: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub type Result<T> = std::result::Result<T, Error>;
