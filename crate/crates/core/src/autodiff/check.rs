//! Finite-difference verification of analytic gradients.

use super::{Gradients, Param};

/// A checkable loss. `loss` must rebuild the forward pass from current
/// parameter values on every call; `grads` does the same and runs
/// backward. Both must be deterministic given the parameter values.
pub trait GradCheckProbe {
    fn params(&mut self) -> Vec<&mut Param>;
    fn loss(&mut self) -> f64;
    fn grads(&mut self) -> Gradients;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_coords: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_fd: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max rel err {:.3e} over {} coords (worst {}[{}]: analytic {:.6e}, fd {:.6e})",
            self.max_rel_err,
            self.n_coords,
            self.worst_param,
            self.worst_index,
            self.worst_analytic,
            self.worst_fd
        )
    }
}

/// |a - b| / max(|a|, |b|, 1e-8).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences with step `h`, one coordinate at a time. Every
/// trainable parameter reported by the probe is perturbed and restored
/// exactly; parameters the loss never touches must come back with zero
/// finite differences too, so they are still checked.
pub fn check_gradients(probe: &mut dyn GradCheckProbe, h: f64) -> GradCheckReport {
    let analytic = probe.grads();
    let metas: Vec<(String, usize, bool)> = probe
        .params()
        .iter()
        .map(|p| (p.name().to_string(), p.value.len(), p.trainable))
        .collect();

    let mut report = GradCheckReport {
        n_coords: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
    };

    for (pi, (name, len, trainable)) in metas.iter().enumerate() {
        if !trainable {
            continue;
        }
        let grad_arr = analytic
            .get(name)
            .map(|a| a.as_standard_layout().to_owned());
        for k in 0..*len {
            let orig = {
                let mut ps = probe.params();
                let s = ps[pi].value.as_slice_mut().expect("standard layout");
                let o = s[k];
                s[k] = o + h;
                o
            };
            let f_plus = probe.loss();
            {
                let mut ps = probe.params();
                ps[pi].value.as_slice_mut().unwrap()[k] = orig - h;
            }
            let f_minus = probe.loss();
            {
                let mut ps = probe.params();
                ps[pi].value.as_slice_mut().unwrap()[k] = orig;
            }
            let fd = (f_plus - f_minus) / (2.0 * h);
            let a = grad_arr
                .as_ref()
                .map_or(0.0, |arr| arr.as_slice().unwrap()[k]);
            let rel = relative_error(a, fd);
            report.n_coords += 1;
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = k;
                report.worst_analytic = a;
                report.worst_fd = fd;
            }
        }
    }
    report
}
