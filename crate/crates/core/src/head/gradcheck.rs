use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::precise::{central, dd, exact_sum, lift, Dd, PreciseHead};
use super::{head_backward, head_forward, logits_after_change, HeadParams};

/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Worst coordinate of a finite-difference comparison.
///
/// Every coordinate is first differenced in f64. Coordinates that miss
/// [`REFINE_TOLERANCE`] by an absolute amount that f64 rounding could explain
/// are differenced again with the same step in double-double, so that
/// gradients near the rounding floor (about `1e-16 / h`) are judged against an
/// accurate difference rather than noise. `refined` counts them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_relative_error < threshold
    }
}

/// Tolerance that triggers a double-double refinement.
pub const REFINE_TOLERANCE: f64 = 1e-6;

/// Generous bound on the absolute f64 rounding error of a central difference
/// of an objective whose terms have magnitude `scale`.
pub(crate) fn rounding_floor(scale: f64, h: f64) -> f64 {
    1e-13 * scale.max(1.0) / h
}

pub(crate) fn check_coordinates(
    analytic: &[f64],
    noise_floor: f64,
    mut coarse: impl FnMut(usize) -> Result<f64>,
    mut precise: impl FnMut(usize) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
        checked: 0,
        refined: 0,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut numeric = coarse(i)?;
        let mut err = relative_error(a, numeric);
        if err >= REFINE_TOLERANCE && (a - numeric).abs() <= noise_floor {
            numeric = precise(i)?;
            err = relative_error(a, numeric);
            report.refined += 1;
        }
        report.checked += 1;
        if err > report.max_relative_error || !err.is_finite() {
            report.max_relative_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Checks [`head_backward`] on the objective `sum(logits)` against central
/// differences with step `h`, over every parameter and then every hidden-input
/// coordinate (indices `params.len()..`).
pub fn head_grad_check(params: &HeadParams, hidden: &Matrix, h: f64) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (logits, trace) = head_forward(params, hidden)?;
    let grads = head_backward(params, &trace, &vec![1.0; logits.len()])?;
    let mut analytic = grads.params;
    analytic.extend_from_slice(grads.hidden.as_slice());
    let np = params.len();
    let sum = |v: Vec<f64>| v.into_iter().sum::<f64>();

    let mut probe = params.clone();
    let mut probe_hidden = hidden.clone();
    let coarse = |i: usize| -> Result<f64> {
        let (up, down) = if i < np {
            let orig = params.values()[i];
            probe.values_mut()[i] = orig + h;
            let up = sum(logits_after_change(&probe, &trace, hidden, i)?);
            probe.values_mut()[i] = orig - h;
            let down = sum(logits_after_change(&probe, &trace, hidden, i)?);
            probe.values_mut()[i] = orig;
            (up, down)
        } else {
            let j = i - np;
            let orig = hidden.as_slice()[j];
            let eval = |hid: &Matrix| head_forward(params, hid).map(|(l, _)| sum(l));
            probe_hidden.as_mut_slice()[j] = orig + h;
            let up = eval(&probe_hidden)?;
            probe_hidden.as_mut_slice()[j] = orig - h;
            let down = eval(&probe_hidden)?;
            probe_hidden.as_mut_slice()[j] = orig;
            (up, down)
        };
        Ok((up - down) / (2.0 * h))
    };

    let mut ph = PreciseHead::new(params);
    let base_hidden = lift(hidden);
    let rows = hidden.rows();
    let mut prep = None;
    let sum_dd = |v: Vec<Dd>| v.into_iter().fold(dd(0.0), |a, v| a + v);
    let precise = |i: usize| -> Result<f64> {
        let total = |ph: &PreciseHead, hid: &[Dd]| sum_dd(ph.logits(hid, rows));
        if i < np {
            let prep = prep.get_or_insert_with(|| ph.prepare(&base_hidden, rows));
            ph.shift(i, h);
            let up = sum_dd(ph.logits_from(prep, i));
            ph.shift(i, -h);
            let down = sum_dd(ph.logits_from(prep, i));
            ph.reset(i);
            Ok(central(up, down, h))
        } else {
            let j = i - np;
            let orig = hidden.as_slice()[j];
            let mut hid = base_hidden.clone();
            hid[j] = exact_sum(orig, h);
            let up = total(&ph, &hid);
            hid[j] = exact_sum(orig, -h);
            let down = total(&ph, &hid);
            Ok(central(up, down, h))
        }
    };
    let scale = logits.iter().map(|v| v.abs()).sum::<f64>();
    check_coordinates(&analytic, rounding_floor(scale, h), coarse, precise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{init_head, HeadConfig};
    use crate::rng::RngState;

    #[test]
    fn relative_error_is_symmetric_and_floored() {
        assert_eq!(relative_error(1.0, 2.0), relative_error(2.0, 1.0));
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(0.0, 1e-13), 0.1);
        assert!((relative_error(1.0, 1.0 + 1e-8) - 1e-8).abs() < 1e-15);
    }

    #[test]
    fn precise_logits_agree_with_fast_path() {
        let head = init_head(HeadConfig::default(), 3).unwrap();
        let mut rng = RngState::new(3, "test");
        let hidden = Matrix::from_vec(6, 32, rng.gaussian(6 * 32, 1.0)).unwrap();
        let (fast, _) = head_forward(&head, &hidden).unwrap();
        let slow = PreciseHead::new(&head).logits(&lift(&hidden), 6);
        for (a, b) in fast.iter().zip(slow) {
            assert!((a - super::super::precise::lower(b)).abs() < 1e-13);
        }
    }

    #[test]
    fn full_size_head_passes() {
        let mut head = init_head(HeadConfig::default(), 11).unwrap();
        let mut rng = RngState::new(11, "test");
        for (v, e) in head.values_mut().iter_mut().zip(rng.gaussian(21_284, 0.1)) {
            *v += e;
        }
        let hidden = Matrix::from_vec(5, 32, rng.gaussian(5 * 32, 1.0)).unwrap();
        let r = head_grad_check(&head, &hidden, 1e-5).unwrap();
        assert_eq!(r.checked, 21_284 + 5 * 32);
        assert!(r.passes(1e-5), "{r:?}");
    }
}
