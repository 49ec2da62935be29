//! Three-valued verdicts and the evidence records behind them.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::quadrature::DivergenceVerdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FdOutcome {
    FellerDynkin,
    NotFellerDynkin,
    Inconclusive,
}

impl FdOutcome {
    pub fn label(self) -> &'static str {
        match self {
            FdOutcome::FellerDynkin => "feller_dynkin",
            FdOutcome::NotFellerDynkin => "not_feller_dynkin",
            FdOutcome::Inconclusive => "inconclusive",
        }
    }

    pub fn is_definite(self) -> bool {
        self != FdOutcome::Inconclusive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evidence {
    pub test: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env: Option<usize>,
    pub verdict: DivergenceVerdict,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Prerequisites {
    /// Per environment: both sides of the non-explosion test diverge.
    pub feller_nonexplosion: BTreeMap<usize, bool>,
    pub cb_feller_assumed: bool,
    pub chain_fd_assumed: bool,
    pub holder_assumed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub outcome: FdOutcome,
    pub evidence: Vec<Evidence>,
    pub prerequisites: Prerequisites,
    pub notes: Vec<String>,
}
