use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Four-level ordinal quality scale used for keypoint scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Missing = 0,
    Weak = 1,
    Adequate = 2,
    Strong = 3,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Missing, Level::Weak, Level::Adequate, Level::Strong];

    pub fn ordinal(self) -> u32 {
        self as u32
    }

    /// `weak` and `missing` mark a chunk as failure evidence.
    pub fn is_deficient(self) -> bool {
        matches!(self, Level::Missing | Level::Weak)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Missing => "missing",
            Level::Weak => "weak",
            Level::Adequate => "adequate",
            Level::Strong => "strong",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "missing" => Ok(Level::Missing),
            "weak" => Ok(Level::Weak),
            "adequate" => Ok(Level::Adequate),
            "strong" => Ok(Level::Strong),
            other => Err(format!("unknown level {other:?}")),
        }
    }
}

pub fn level_order(a: Level, b: Level) -> Ordering {
    a.ordinal().cmp(&b.ordinal())
}
