use serde::{Deserialize, Serialize};

use super::weight_expr::WeightExpr;
use crate::autodiff::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FDivergence {
    Kl,
    Tv,
    He,
    Chi2,
}

impl FDivergence {
    pub const ALL: [FDivergence; 4] = [FDivergence::Kl, FDivergence::Tv, FDivergence::He, FDivergence::Chi2];

    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            FDivergence::Kl => x * x.ln(),
            FDivergence::Tv => (x - 1.0).abs() * 0.5,
            FDivergence::He => (x.sqrt() - 1.0).square(),
            FDivergence::Chi2 => (x - 1.0).square(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FDivergence::Kl => "kl",
            FDivergence::Tv => "tv",
            FDivergence::He => "he",
            FDivergence::Chi2 => "chi2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SensitivityKind {
    Msm,
    Cmsm,
    F(FDivergence),
    Rosenbaum,
    WeightedMsm,
}

impl SensitivityKind {
    /// Short label used in reports: `msm`, `kl`, `rosenbaum`, ...
    pub fn label(self) -> &'static str {
        match self {
            SensitivityKind::Msm => "msm",
            SensitivityKind::Cmsm => "cmsm",
            SensitivityKind::F(f) => f.name(),
            SensitivityKind::Rosenbaum => "rosenbaum",
            SensitivityKind::WeightedMsm => "wmsm",
        }
    }

    /// Inverse of [`SensitivityKind::label`].
    pub fn from_label(label: &str) -> Result<SensitivityKind> {
        let kind = match label {
            "msm" => SensitivityKind::Msm,
            "cmsm" => SensitivityKind::Cmsm,
            "rosenbaum" => SensitivityKind::Rosenbaum,
            "wmsm" => SensitivityKind::WeightedMsm,
            "kl" => SensitivityKind::F(FDivergence::Kl),
            "tv" => SensitivityKind::F(FDivergence::Tv),
            "he" => SensitivityKind::F(FDivergence::He),
            "chi2" => SensitivityKind::F(FDivergence::Chi2),
            other => return Err(Error::config(format!("unknown sensitivity model `{other}`"))),
        };
        Ok(kind)
    }

    pub fn unconfounded_gamma(self) -> f64 {
        match self {
            SensitivityKind::F(_) => 0.0,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecJson", into = "SpecJson")]
pub struct SensitivitySpec {
    pub kind: SensitivityKind,
    pub gamma: f64,
    pub weight: Option<WeightExpr>,
}

#[derive(Serialize, Deserialize)]
struct SpecJson {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    f: Option<FDivergence>,
    gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<String>,
}

impl TryFrom<SpecJson> for SensitivitySpec {
    type Error = Error;

    fn try_from(j: SpecJson) -> Result<Self> {
        let kind = match (j.kind.as_str(), j.f) {
            ("msm", None) => SensitivityKind::Msm,
            ("cmsm", None) => SensitivityKind::Cmsm,
            ("rosenbaum", None) => SensitivityKind::Rosenbaum,
            ("wmsm", None) => SensitivityKind::WeightedMsm,
            ("f", Some(f)) => SensitivityKind::F(f),
            ("f", None) => return Err(Error::config("kind `f` requires field `f`")),
            (k, Some(_)) if k != "f" => {
                return Err(Error::config(format!(
                    "field `f` is only valid with kind `f`, not `{k}`"
                )))
            }
            (k, _) => return Err(Error::config(format!("unknown sensitivity kind `{k}`"))),
        };
        let weight = match j.weight {
            Some(w) if kind == SensitivityKind::WeightedMsm => Some(WeightExpr::parse(&w)?),
            Some(_) => return Err(Error::config("`weight` is only valid with kind `wmsm`")),
            None => None,
        };
        SensitivitySpec::new(kind, j.gamma).map(|s| SensitivitySpec { weight, ..s })
    }
}

impl From<SensitivitySpec> for SpecJson {
    fn from(s: SensitivitySpec) -> SpecJson {
        let (kind, f) = match s.kind {
            SensitivityKind::Msm => ("msm", None),
            SensitivityKind::Cmsm => ("cmsm", None),
            SensitivityKind::Rosenbaum => ("rosenbaum", None),
            SensitivityKind::WeightedMsm => ("wmsm", None),
            SensitivityKind::F(f) => ("f", Some(f)),
        };
        SpecJson {
            kind: kind.into(),
            f,
            gamma: s.gamma,
            weight: s.weight.map(|w| w.source().to_owned()),
        }
    }
}

impl SensitivitySpec {
    pub fn new(kind: SensitivityKind, gamma: f64) -> Result<SensitivitySpec> {
        let min = kind.unconfounded_gamma();
        if !gamma.is_finite() || gamma < min {
            return Err(Error::config(format!(
                "gamma = {gamma} is invalid for {}; need a finite value >= {min}",
                kind.label()
            )));
        }
        Ok(SensitivitySpec {
            kind,
            gamma,
            weight: None,
        })
    }

    pub fn msm(gamma: f64) -> Result<SensitivitySpec> {
        Self::new(SensitivityKind::Msm, gamma)
    }

    pub fn f(div: FDivergence, gamma: f64) -> Result<SensitivitySpec> {
        Self::new(SensitivityKind::F(div), gamma)
    }

    pub fn with_weight(mut self, expr: WeightExpr) -> Self {
        self.weight = Some(expr);
        self
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<SensitivitySpec> {
        let mut s = Self::new(self.kind, gamma)?;
        s.weight = self.weight.clone();
        Ok(s)
    }

    pub fn unconfounded_value(&self) -> f64 {
        self.kind.unconfounded_gamma()
    }

    pub fn label(&self) -> &'static str {
        self.kind.label()
    }

    /// The propensity-like offset subtracted inside `rho`: the mixing
    /// probability itself, zero for the CMSM, `q(pi)` for the weighted MSM.
    pub fn rho_offset(&self, pi_mix: f64) -> Result<f64> {
        match self.kind {
            SensitivityKind::Cmsm => Ok(0.0),
            SensitivityKind::WeightedMsm => match &self.weight {
                Some(w) => w.eval(pi_mix),
                None => Ok(pi_mix),
            },
            _ => Ok(pi_mix),
        }
    }
}
