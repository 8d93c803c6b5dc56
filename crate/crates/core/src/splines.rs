//! Dose transforms: linear, quadratic, and 3-knot restricted cubic spline.
//!
//! A transform maps a dose x to a vector of p basis values; dose-response
//! contrasts are differences of basis vectors between a dose and the study's
//! reference dose. The restricted cubic spline uses the normalization
//!
//! f2(x) = [(x-t1)+^3 - (x-t2)+^3 (t3-t1)/(t3-t2) + (x-t3)+^3 (t2-t1)/(t3-t2)] / (t3-t1)^2
//!
//! which keeps f2 on the scale of x, is 0 at and below the first knot, and is
//! linear beyond the last knot.

use crate::error::{Error, Result};
use crate::stats;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Linear,
    Quadratic,
    Rcs3,
}

/// A validated dose transform. `knots` is empty unless `kind` is `Rcs3`,
/// in which case it holds 3 strictly increasing knot locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct Transform {
    kind: TransformKind,
    knots: Vec<f64>,
}

/// Wire form of [`Transform`]; deserialization re-runs the constructor checks.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    kind: TransformKind,
    #[serde(default)]
    knots: Vec<f64>,
}

impl From<Transform> for TransformRepr {
    fn from(t: Transform) -> Self {
        TransformRepr {
            kind: t.kind,
            knots: t.knots,
        }
    }
}

impl TryFrom<TransformRepr> for Transform {
    type Error = Error;

    fn try_from(r: TransformRepr) -> Result<Self> {
        match r.kind {
            TransformKind::Linear => Ok(Transform::linear()),
            TransformKind::Quadratic => Ok(Transform::quadratic()),
            TransformKind::Rcs3 => {
                if r.knots.len() != 3 {
                    return Err(Error::Knots(format!(
                        "rcs3 needs exactly 3 knots, got {}",
                        r.knots.len()
                    )));
                }
                Transform::rcs3([r.knots[0], r.knots[1], r.knots[2]])
            }
        }
    }
}

impl Transform {
    pub fn linear() -> Self {
        Transform {
            kind: TransformKind::Linear,
            knots: Vec::new(),
        }
    }

    pub fn quadratic() -> Self {
        Transform {
            kind: TransformKind::Quadratic,
            knots: Vec::new(),
        }
    }

    pub fn rcs3(knots: [f64; 3]) -> Result<Self> {
        if !(knots[0] < knots[1] && knots[1] < knots[2]) {
            return Err(Error::Knots(format!(
                "knots must be strictly increasing, got {:?}",
                knots
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Knots("knots must be finite".into()));
        }
        Ok(Transform {
            kind: TransformKind::Rcs3,
            knots: knots.to_vec(),
        })
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of regression coefficients the transform carries.
    pub fn p(&self) -> usize {
        match self.kind {
            TransformKind::Linear => 1,
            TransformKind::Quadratic | TransformKind::Rcs3 => 2,
        }
    }

    /// Basis vector (length p) at dose x.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        match self.kind {
            TransformKind::Linear => vec![x],
            TransformKind::Quadratic => vec![x, x * x],
            TransformKind::Rcs3 => vec![x, self.rcs_component(x)],
        }
    }

    /// basis(x) - basis(x0), componentwise.
    pub fn contrast(&self, x: f64, x0: f64) -> Vec<f64> {
        let mut b = self.basis(x);
        for (bk, b0) in b.iter_mut().zip(self.basis(x0)) {
            *bk -= b0;
        }
        b
    }

    fn rcs_component(&self, x: f64) -> f64 {
        let (t1, t2, t3) = (self.knots[0], self.knots[1], self.knots[2]);
        let cube_plus = |u: f64| {
            let v = u.max(0.0);
            v * v * v
        };
        let span = t3 - t1;
        (cube_plus(x - t1) - cube_plus(x - t2) * span / (t3 - t2)
            + cube_plus(x - t3) * (t2 - t1) / (t3 - t2))
            / (span * span)
    }
}

/// Percentile-based knot placement over the pooled dose distribution.
///
/// Percentiles are given on the (0,100) scale and evaluated with the type-7
/// convention (linear interpolation between order statistics). Requires at
/// least 3 distinct dose values; coincident resulting knots are rejected.
pub fn place_knots(doses: &[f64], percentiles: &[f64]) -> Result<Vec<f64>> {
    if percentiles.is_empty() {
        return Err(Error::Knots("no percentiles given".into()));
    }
    if percentiles
        .iter()
        .any(|p| !(*p > 0.0 && *p < 100.0) || !p.is_finite())
    {
        return Err(Error::Knots(format!(
            "percentiles must lie in (0,100), got {:?}",
            percentiles
        )));
    }
    if percentiles.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Knots(
            "percentiles must be strictly increasing".into(),
        ));
    }
    let mut distinct = doses.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Knots(format!(
            "need at least 3 distinct dose values, found {}",
            distinct.len()
        )));
    }
    let mut sorted = doses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let knots: Vec<f64> = percentiles
        .iter()
        .map(|p| stats::percentile_sorted(&sorted, p / 100.0))
        .collect();
    if knots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Knots(format!(
            "percentiles of the pooled doses produce coincident knots: {:?}",
            knots
        )));
    }
    Ok(knots)
}

/// `place_knots` at 25/50/75 followed by rcs3 construction; the common path.
pub fn rcs3_from_doses(doses: &[f64], percentiles: &[f64]) -> Result<Transform> {
    let knots = place_knots(doses, percentiles)?;
    if knots.len() != 3 {
        return Err(Error::Knots(format!(
            "rcs3 needs exactly 3 knots, got {}",
            knots.len()
        )));
    }
    Transform::rcs3([knots[0], knots[1], knots[2]])
}
