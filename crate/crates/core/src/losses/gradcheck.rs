use crate::error::{Error, Result};

/// Probes closer than this to a hinge or selection threshold are skipped.
pub const BREAKPOINT_SKIP: f64 = 1e-7;

/// One evaluation of a loss at a parameter vector.
#[derive(Clone, Debug)]
pub struct Probe {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Distance to the nearest non-smooth point; `INFINITY` for smooth losses.
    pub breakpoint_gap: f64,
    /// Fingerprint of the active piece of a piecewise-smooth loss.
    pub activity: u64,
}

impl Probe {
    pub fn smooth(value: f64, gradient: Vec<f64>) -> Self {
        Probe {
            value,
            gradient,
            breakpoint_gap: f64::INFINITY,
            activity: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because a probe straddled or sat near a breakpoint.
    pub skipped: usize,
}

/// Max relative error between the analytic gradient and central differences.
pub fn grad_check<F>(loss: F, params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    grad_check_report(loss, params, step).map(|r| r.max_rel_error)
}

/// Central-difference gradient check over every coordinate.
///
/// Relative error per coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`. A coordinate is
/// skipped when either probe lands within [`BREAKPOINT_SKIP`] of a breakpoint
/// or on a different smooth piece than the base point.
pub fn grad_check_report<F>(mut loss: F, params: &[f64], step: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step {step} must be > 0")));
    }
    let base = loss(params)?;
    ensure_finite(&base, "base point")?;
    if base.gradient.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            base.gradient.len(),
            params.len()
        )));
    }
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    let mut theta = params.to_vec();
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let plus = loss(&theta)?;
        theta[i] = orig - step;
        let minus = loss(&theta)?;
        theta[i] = orig;
        ensure_finite(&plus, "probe")?;
        ensure_finite(&minus, "probe")?;

        let near_kink = base.breakpoint_gap < BREAKPOINT_SKIP
            || plus.breakpoint_gap < BREAKPOINT_SKIP
            || minus.breakpoint_gap < BREAKPOINT_SKIP
            || plus.activity != base.activity
            || minus.activity != base.activity;
        if near_kink {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * step);
        let analytic = base.gradient[i];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

fn ensure_finite(p: &Probe, at: &str) -> Result<()> {
    if p.value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss is {} at {at}", p.value)))
    }
}
