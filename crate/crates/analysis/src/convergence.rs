//! Convergence descriptors of a logged loss curve.

use std::fs;
use std::path::Path;

use metapico_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Ordered `(step, value)` pairs with strictly increasing steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    points: Vec<(f64, f64)>,
}

impl LossCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Data("empty loss curve".into()));
        }
        if points.iter().any(|(s, v)| !s.is_finite() || !v.is_finite()) {
            return Err(Error::Data("loss curve holds a non-finite point".into()));
        }
        if let Some(w) = points.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(Error::Data(format!("steps must increase strictly, got {} then {}", w[0].0, w[1].0)));
        }
        Ok(Self { points })
    }

    pub fn from_values(steps: &[f64], values: &[f64]) -> Result<Self> {
        if steps.len() != values.len() {
            return Err(Error::Data(format!("{} steps for {} values", steps.len(), values.len())));
        }
        Self::new(steps.iter().copied().zip(values.iter().copied()).collect())
    }

    /// `(step, field)` from every JSON line of a metrics file that has a numeric `field`.
    pub fn from_metrics_jsonl(path: &Path, field: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            let step = v["step"].as_f64().ok_or_else(|| Error::Parse { line: i + 1, msg: "missing step".into() })?;
            if let Some(value) = v[field].as_f64() {
                points.push((step, value));
            }
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn need(&self, n: usize, what: &str) -> Result<()> {
        if self.points.len() < n {
            return Err(Error::Data(format!("{what} needs at least {n} points, curve has {}", self.points.len())));
        }
        Ok(())
    }
}

/// Smallest logged step whose value is within 10% of the total descent
/// from the first to the last value. No interpolation between log points.
pub fn t90(curve: &LossCurve) -> Result<f64> {
    curve.need(2, "t90")?;
    let p = curve.points();
    let (init, fin) = (p[0].1, p[p.len() - 1].1);
    if init == fin {
        return Ok(p[0].0);
    }
    let threshold = fin + 0.10 * (init - fin);
    Ok(p.iter().find(|(_, v)| *v <= threshold).expect("the last point meets the threshold").0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedAuc {
    pub value: f64,
    /// The curve is constant, so the area is the 0 convention.
    pub degenerate: bool,
}

/// Trapezoidal area under the min-max normalised curve over the
/// `[0, 1]`-normalised step axis.
pub fn normalized_auc(curve: &LossCurve) -> Result<NormalizedAuc> {
    curve.need(2, "normalized_auc")?;
    let p = curve.points();
    let lo = p.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let hi = p.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(NormalizedAuc { value: 0.0, degenerate: true });
    }
    let span = p[p.len() - 1].0 - p[0].0;
    let value = p
        .windows(2)
        .map(|w| {
            let dx = (w[1].0 - w[0].0) / span;
            let (a, b) = ((w[0].1 - lo) / (hi - lo), (w[1].1 - lo) / (hi - lo));
            dx * (a + b) / 2.0
        })
        .sum::<f64>();
    Ok(NormalizedAuc { value, degenerate: false })
}

pub const DEFAULT_SLOPE_POINTS: usize = 5;

/// Least-squares slope of value against step over the first `k` logged
/// points (all points when the curve is shorter). Units: loss per step.
pub fn initial_slope(curve: &LossCurve, k: usize) -> Result<f64> {
    curve.need(2, "initial_slope")?;
    if k < 2 {
        return Err(Error::Data(format!("a slope needs k ≥ 2, got {k}")));
    }
    let p = &curve.points()[..k.min(curve.len())];
    let n = p.len() as f64;
    let mx = p.iter().map(|x| x.0).sum::<f64>() / n;
    let my = p.iter().map(|x| x.1).sum::<f64>() / n;
    let sxy: f64 = p.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = p.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Convergence descriptors of one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub t90: f64,
    pub auc: f64,
    pub auc_degenerate: bool,
    pub slope: f64,
}

pub fn convergence(curve: &LossCurve, k: usize) -> Result<Convergence> {
    let auc = normalized_auc(curve)?;
    Ok(Convergence {
        t90: t90(curve)?,
        auc: auc.value,
        auc_degenerate: auc.degenerate,
        slope: initial_slope(curve, k)?,
    })
}

pub fn macro_mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Macro average over tasks of (treatment − baseline) for each descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceDeltas {
    pub tasks: usize,
    pub delta_t90: f64,
    pub delta_auc: f64,
    pub delta_slope: f64,
}

pub fn convergence_deltas(baseline: &[LossCurve], treatment: &[LossCurve], k: usize) -> Result<ConvergenceDeltas> {
    if baseline.len() != treatment.len() || baseline.is_empty() {
        return Err(Error::Data(format!(
            "{} baseline curves for {} treatment curves",
            baseline.len(),
            treatment.len()
        )));
    }
    let mut d = [Vec::new(), Vec::new(), Vec::new()];
    for (b, t) in baseline.iter().zip(treatment) {
        let (b, t) = (convergence(b, k)?, convergence(t, k)?);
        d[0].push(t.t90 - b.t90);
        d[1].push(t.auc - b.auc);
        d[2].push(t.slope - b.slope);
    }
    let m = |v: &[f64]| macro_mean(v).expect("non-empty");
    Ok(ConvergenceDeltas { tasks: baseline.len(), delta_t90: m(&d[0]), delta_auc: m(&d[1]), delta_slope: m(&d[2]) })
}
