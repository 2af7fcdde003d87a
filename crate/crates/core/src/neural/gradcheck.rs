use super::{NeuralModel, Unit};

/// Gradients below this magnitude are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
    pub all_finite: bool,
}

/// Compares the analytic gradient of the mean per-step loss with central
/// differences, one parameter at a time. Intended for models with a few
/// thousand parameters.
pub fn grad_check<M: NeuralModel + Clone>(model: &M, units: &[Unit<'_>], h: f64) -> GradCheckReport {
    let (_, count, grad) = model.loss_and_grad(units);
    let norm = 1.0 / count.max(1) as f64;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        n_checked: 0,
        all_finite: grad.all_finite(),
    };
    for (ti, name) in model.params().names.iter().enumerate() {
        let n = model.params().tensors[ti].len();
        for k in 0..n {
            let original = model.params().tensors[ti].as_slice().expect("standard layout")[k];
            let set = |m: &mut M, v: f64| {
                m.params_mut().tensors[ti].as_slice_mut().expect("standard layout")[k] = v;
            };
            set(&mut probe, original + h);
            let up = probe.loss(units).0 * norm;
            set(&mut probe, original - h);
            let down = probe.loss(units).0 * norm;
            set(&mut probe, original);

            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.tensors[ti].as_slice().expect("standard layout")[k] * norm;
            if !numeric.is_finite() || !analytic.is_finite() {
                report.all_finite = false;
                continue;
            }
            let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let err = (analytic - numeric).abs() / denom;
            report.n_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    report
}
