use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upper,
    Lower,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Upper => 1.0,
            Direction::Lower => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Upper => "upper",
            Direction::Lower => "lower",
        }
    }
}

/// One axis of a set-probability region. Infinite ends mean unbounded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_open: bool,
    pub hi_open: bool,
}

impl Interval {
    pub fn closed(lo: f64, hi: f64) -> Interval {
        Interval {
            lo,
            hi,
            lo_open: false,
            hi_open: false,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        let above = if self.lo_open { v > self.lo } else { v >= self.lo };
        let below = if self.hi_open { v < self.hi } else { v <= self.hi };
        above && below
    }

    fn is_empty(&self) -> bool {
        self.lo > self.hi || (self.lo == self.hi && (self.lo_open || self.hi_open))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Functional {
    Expectation { index: usize },
    SetProbability { region: Vec<Interval> },
    Quantile { level: f64, index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QueryJson", into = "QueryJson")]
pub struct QuerySpec {
    pub functional: Functional,
    pub direction: Direction,
}

#[derive(Serialize, Deserialize)]
struct QueryJson {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region: Option<Vec<[Option<f64>; 2]>>,
    /// Per-axis `[lo_open, hi_open]`; closed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    open: Option<Vec<[bool; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    index: Option<usize>,
    direction: Direction,
}

impl TryFrom<QueryJson> for QuerySpec {
    type Error = Error;

    fn try_from(j: QueryJson) -> Result<Self> {
        let functional = match j.kind.as_str() {
            "expectation" => Functional::Expectation {
                index: j.index.unwrap_or(0),
            },
            "quantile" => Functional::Quantile {
                level: j.level.ok_or_else(|| Error::config("quantile query needs `level`"))?,
                index: j.index.unwrap_or(0),
            },
            "set_prob" => {
                let region = j.region.ok_or_else(|| Error::config("set_prob query needs `region`"))?;
                let open = j.open.unwrap_or_else(|| vec![[false, false]; region.len()]);
                if open.len() != region.len() {
                    return Err(Error::config("`open` must have one entry per region axis"));
                }
                Functional::SetProbability {
                    region: region
                        .iter()
                        .zip(&open)
                        .map(|(r, o)| Interval {
                            lo: r[0].unwrap_or(f64::NEG_INFINITY),
                            hi: r[1].unwrap_or(f64::INFINITY),
                            lo_open: o[0],
                            hi_open: o[1],
                        })
                        .collect(),
                }
            }
            other => return Err(Error::config(format!("unknown query type `{other}`"))),
        };
        QuerySpec::new(functional, j.direction)
    }
}

impl From<QuerySpec> for QueryJson {
    fn from(q: QuerySpec) -> QueryJson {
        let finite = |v: f64| if v.is_finite() { Some(v) } else { None };
        let mut j = QueryJson {
            kind: String::new(),
            region: None,
            open: None,
            level: None,
            index: None,
            direction: q.direction,
        };
        match q.functional {
            Functional::Expectation { index } => {
                j.kind = "expectation".into();
                j.index = Some(index);
            }
            Functional::Quantile { level, index } => {
                j.kind = "quantile".into();
                j.level = Some(level);
                j.index = Some(index);
            }
            Functional::SetProbability { region } => {
                j.kind = "set_prob".into();
                j.region = Some(region.iter().map(|i| [finite(i.lo), finite(i.hi)]).collect());
                if region.iter().any(|i| i.lo_open || i.hi_open) {
                    j.open = Some(region.iter().map(|i| [i.lo_open, i.hi_open]).collect());
                }
            }
        }
        j
    }
}

impl QuerySpec {
    pub fn new(functional: Functional, direction: Direction) -> Result<QuerySpec> {
        match &functional {
            Functional::Quantile { level, .. } if !(*level > 0.0 && *level < 1.0) => {
                return Err(Error::config(format!("quantile level {level} must lie in (0, 1)")));
            }
            Functional::SetProbability { region } if region.is_empty() || region.iter().any(Interval::is_empty) => {
                return Err(Error::config("set-probability region is empty"));
            }
            _ => {}
        }
        Ok(QuerySpec { functional, direction })
    }

    pub fn expectation(direction: Direction) -> QuerySpec {
        QuerySpec {
            functional: Functional::Expectation { index: 0 },
            direction,
        }
    }

    pub fn with_direction(&self, direction: Direction) -> QuerySpec {
        QuerySpec {
            functional: self.functional.clone(),
            direction,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.functional {
            Functional::Expectation { .. } => "expectation",
            Functional::SetProbability { .. } => "set_prob",
            Functional::Quantile { .. } => "quantile",
        }
    }

    /// Check the query against the outcome dimension.
    pub fn validate_dims(&self, d_y: usize) -> Result<()> {
        let bad = match &self.functional {
            Functional::Expectation { index } | Functional::Quantile { index, .. } => *index >= d_y,
            Functional::SetProbability { region } => region.len() != d_y,
        };
        if bad {
            return Err(Error::Dimension {
                expected: d_y,
                got: match &self.functional {
                    Functional::SetProbability { region } => region.len(),
                    Functional::Expectation { index } | Functional::Quantile { index, .. } => index + 1,
                },
                context: "query outcome dimension".into(),
            });
        }
        Ok(())
    }

    /// Same query with region thresholds mapped into standardised outcome
    /// units.
    pub fn standardized(&self, y_std: &Standardizer) -> QuerySpec {
        let functional = match &self.functional {
            Functional::SetProbability { region } => Functional::SetProbability {
                region: region
                    .iter()
                    .enumerate()
                    .map(|(j, i)| Interval {
                        lo: (i.lo - y_std.mean[j]) / y_std.std[j],
                        hi: (i.hi - y_std.mean[j]) / y_std.std[j],
                        ..*i
                    })
                    .collect(),
            },
            other => other.clone(),
        };
        QuerySpec {
            functional,
            direction: self.direction,
        }
    }
}
