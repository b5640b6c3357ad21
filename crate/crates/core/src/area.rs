use std::fmt;

use serde::{Deserialize, Serialize};

/// The three labour-force target variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Employed,
    Unemployed,
    Hours,
}

impl Variable {
    pub const ALL: [Variable; 3] = [Variable::Employed, Variable::Unemployed, Variable::Hours];

    pub fn index(self) -> usize {
        match self {
            Variable::Employed => 0,
            Variable::Unemployed => 1,
            Variable::Hours => 2,
        }
    }

    pub fn from_index(k: usize) -> Option<Variable> {
        Self::ALL.get(k).copied()
    }

    pub fn is_binary(self) -> bool {
        !matches!(self, Variable::Hours)
    }

    pub fn key(self) -> &'static str {
        match self {
            Variable::Employed => "employed",
            Variable::Unemployed => "unemployed",
            Variable::Hours => "hours",
        }
    }

    /// Table label.
    pub fn label(self) -> &'static str {
        match self {
            Variable::Employed => "Employed",
            Variable::Unemployed => "Unemployed",
            Variable::Hours => "Hours Worked",
        }
    }

    pub fn parse(s: &str) -> Option<Variable> {
        match s.to_ascii_lowercase().as_str() {
            "employed" | "employment" => Some(Variable::Employed),
            "unemployed" | "unemployment" => Some(Variable::Unemployed),
            "hours" | "hours_worked" => Some(Variable::Hours),
            _ => None,
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// A publication or design area. Domain indices are zero-based internally
/// and printed one-based, so that `d = 0` stays the national level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Area {
    National,
    Domain(usize),
    Stratum(usize),
}

impl Area {
    /// `d` index of the constraint grid: 0 is national, domains are 1..=D.
    pub fn publication_index(self) -> Option<usize> {
        match self {
            Area::National => Some(0),
            Area::Domain(d) => Some(d + 1),
            Area::Stratum(_) => None,
        }
    }

    /// National followed by every domain.
    pub fn publication_areas(domains: usize) -> Vec<Area> {
        std::iter::once(Area::National).chain((0..domains).map(Area::Domain)).collect()
    }
}

impl fmt::Display for Area {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Area::National => f.write_str("national"),
            Area::Domain(d) => write!(f, "domain_{}", d + 1),
            Area::Stratum(h) => write!(f, "stratum_{h}"),
        }
    }
}
