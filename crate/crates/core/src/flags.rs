use std::fmt;

use serde::{Deserialize, Serialize};

/// Condition attached to an estimate or prediction row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    SingleCluster,
    ZeroVariance,
    VarianceImputed,
    Island,
    Clamped,
    DisconnectedOut,
    BoundaryRho,
    NotConverged,
    SmallBootstrap,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::SingleCluster => "single_cluster",
            Flag::ZeroVariance => "zero_variance",
            Flag::VarianceImputed => "variance_imputed",
            Flag::Island => "island",
            Flag::Clamped => "clamped",
            Flag::DisconnectedOut => "disconnected_out",
            Flag::BoundaryRho => "boundary_rho",
            Flag::NotConverged => "not_converged",
            Flag::SmallBootstrap => "small_bootstrap",
        }
    }

    pub fn parse(s: &str) -> Option<Flag> {
        ALL.iter().copied().find(|f| f.as_str() == s)
    }
}

const ALL: [Flag; 9] = [
    Flag::SingleCluster,
    Flag::ZeroVariance,
    Flag::VarianceImputed,
    Flag::Island,
    Flag::Clamped,
    Flag::DisconnectedOut,
    Flag::BoundaryRho,
    Flag::NotConverged,
    Flag::SmallBootstrap,
];

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Small sorted set of flags, rendered as `a|b|c` in CSV output.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags(Vec<Flag>);

impl Flags {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, flag: Flag) {
        if let Err(pos) = self.0.binary_search(&flag) {
            self.0.insert(pos, flag);
        }
    }

    pub fn with(mut self, flag: Flag) -> Self {
        self.insert(flag);
        self
    }

    pub fn contains(&self, flag: Flag) -> bool {
        self.0.binary_search(&flag).is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Flag> + '_ {
        self.0.iter().copied()
    }

    pub fn extend(&mut self, other: &Flags) {
        for f in other.iter() {
            self.insert(f);
        }
    }

    pub fn parse(s: &str) -> Self {
        let mut out = Flags::new();
        for part in s.split('|').filter(|p| !p.is_empty()) {
            if let Some(f) = Flag::parse(part) {
                out.insert(f);
            }
        }
        out
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.0.iter().map(|f| f.as_str()).collect();
        f.write_str(&parts.join("|"))
    }
}
