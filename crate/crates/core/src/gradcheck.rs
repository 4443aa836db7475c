//! Central finite-difference verification of [`Graph::backward`].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_ad − g_fd| / max(1, |g_fd|)` over every element of every leaf.
    pub max_rel_error: f64,
    /// Leaf index and flat element index where the maximum was attained.
    pub worst: (usize, usize),
    /// False when two evaluations at the same point disagreed, which makes the
    /// finite differences meaningless (e.g. dropout without a fixed seed).
    pub deterministic: bool,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// `(f(x+h) − f(x−h)) / 2h`, element by element. `h` must lie in
/// `[1e-7, 1e-4]`.
///
/// `f` is called once per perturbation with fresh leaves, so it must be a
/// pure function of the leaf values.
pub fn grad_check<F>(f: F, leaves: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Domain(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    let grads = g.backward(out)?;
    let deterministic = eval(leaves)? == base;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        deterministic,
    };
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, *var);
        for ei in 0..leaves[li].numel() {
            let orig = leaves[li].data()[ei];
            work[li].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[li].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[li].data_mut()[ei] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let err = (analytic.data()[ei] - fd).abs() / fd.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (li, ei);
            }
        }
    }
    Ok(report)
}
