//! Central finite-difference verification of analytic gradients.

/// Default central-difference step for `f64` inputs.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one gradient check. A failing check is a report, not an error.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinate that produced `max_rel_error`.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tolerance: f64,
    /// Candidates passed over because `f` has a kink within the step.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<40} {} max rel err {:.3e} (tol {:.0e}, {} coords; worst #{}: analytic {:.6e} numeric {:.6e})",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.checked,
            self.worst_index,
            self.analytic_at_worst,
            self.numeric_at_worst,
        )?;
        if self.skipped > 0 {
            write!(f, " [{} skipped at kinks]", self.skipped)?;
        }
        Ok(())
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic[i]` against `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for each
/// `i` in `indices` (all coordinates when `None`).
pub fn grad_check(
    name: impl Into<String>,
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    indices: Option<&[usize]>,
    step: f64,
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(point.len(), analytic.len(), "gradient length differs from point");
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        name: name.into(),
        checked: idx.len(),
        max_rel_error: 0.0,
        worst_index: idx.first().copied().unwrap_or(0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tolerance,
        skipped: 0,
    };
    for &i in idx {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report
}

/// As [`grad_check`], walking `candidates` until `count` coordinates where
/// `f` is smooth over `[x − h, x + h]` have been compared. A kink inside the
/// window moves the central difference by half the gap between the two
/// one-sided differences, so candidates whose gap exceeds twice the allowed
/// error are counted in `skipped` instead.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_smooth(
    name: impl Into<String>,
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    candidates: &[usize],
    count: usize,
    step: f64,
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(point.len(), analytic.len(), "gradient length differs from point");
    let mut x = point.to_vec();
    let centre = f(&x);
    let mut report = GradCheckReport {
        name: name.into(),
        checked: 0,
        max_rel_error: 0.0,
        worst_index: candidates.first().copied().unwrap_or(0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tolerance,
        skipped: 0,
    };
    for &i in candidates {
        if report.checked == count {
            break;
        }
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let gap = ((up - centre) - (centre - down)).abs() / step;
        if gap > 2.0 * tolerance * numeric.abs().max(analytic[i].abs()).max(1e-8) {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report
}

/// Evenly spaced subset of `0..len` of at most `count` coordinates.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    (0..count).map(|k| k * len / count).collect()
}
