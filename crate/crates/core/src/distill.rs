//! Distillation losses: temperature-softened KL on pose outputs, its
//! uncertainty-weighted combination, and a cosine feature loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::pose::weighted_term;

pub const DEFAULT_TEMPERATURE: f64 = 10.0;
/// Rows with a norm at or below this are rejected by [`feature_loss`].
pub const FEATURE_EPS: f64 = 1e-12;

/// Which distribution serves as the reference in the KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`.
    #[default]
    TeacherStudent,
    /// `KL(student ‖ teacher)`.
    StudentTeacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub beta_soft0: f64,
    pub gamma_soft0: f64,
    pub direction: KlDirection,
    /// Student width as a fraction of the teacher's token width.
    pub width_ratio: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: DEFAULT_TEMPERATURE,
            beta_soft0: -0.5,
            gamma_soft0: -6.5,
            direction: KlDirection::TeacherStudent,
            width_ratio: 0.5,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.width_ratio > 0.0 && self.width_ratio <= 1.0) {
            return Err(Error::Config(format!("width ratio {} outside (0, 1]", self.width_ratio)));
        }
        Ok(())
    }
}

/// `KL(softmax(y_t/T) ‖ softmax(y_s/T))·T²`, summed over the last axis and
/// averaged over the remaining ones. Pass the teacher as a constant so that
/// only `y_s` receives gradient.
pub fn kl_temperature(g: &mut Graph, y_s: Var, y_t: Var, t: f64, direction: KlDirection) -> Result<Var> {
    if g.shape(y_s) != g.shape(y_t) {
        return Err(Error::shape("kl_temperature", g.shape(y_s), g.shape(y_t)));
    }
    if g.shape(y_s).last().map_or(true, |&k| k < 2) {
        return Err(Error::InvalidShape {
            shape: g.shape(y_s).to_vec(),
            reason: "KL needs at least two logits".into(),
        });
    }
    let s = g.scale(y_s, 1.0 / t)?;
    let te = g.scale(y_t, 1.0 / t)?;
    let ls = g.log_softmax(s)?;
    let lt = g.log_softmax(te)?;
    let (lp, lq) = match direction {
        KlDirection::TeacherStudent => (lt, ls),
        KlDirection::StudentTeacher => (ls, lt),
    };
    let p = g.exp(lp)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let rows = g.sum_last(terms)?;
    let kl = g.mean(rows)?;
    g.scale(kl, t * t)
}

/// `KL_x·e^{−β_soft} + β_soft + KL_q·e^{−γ_soft} + γ_soft`.
#[allow(clippy::too_many_arguments)]
pub fn soft_loss(
    g: &mut Graph,
    x_s: Var,
    q_s: Var,
    x_t: Var,
    q_t: Var,
    beta_soft: Var,
    gamma_soft: Var,
    t: f64,
    direction: KlDirection,
) -> Result<Var> {
    let kx = kl_temperature(g, x_s, x_t, t, direction)?;
    let kq = kl_temperature(g, q_s, q_t, t, direction)?;
    let lx = weighted_term(g, kx, beta_soft)?;
    let lq = weighted_term(g, kq, gamma_soft)?;
    g.add(lx, lq)
}

/// `1 − mean_b cos(ft_b, fs_b)` over `[B, F]` rows.
pub fn feature_loss(g: &mut Graph, ft: Var, fs: Var) -> Result<Var> {
    if g.shape(ft) != g.shape(fs) || g.shape(ft).len() != 2 {
        return Err(Error::shape("feature_loss", g.shape(ft), g.shape(fs)));
    }
    let nt = g.l2norm(ft)?;
    let ns = g.l2norm(fs)?;
    for n in [nt, ns] {
        if let Some(row) = g.value(n).data().iter().position(|&v| !(v > FEATURE_EPS)) {
            return Err(Error::DegenerateFeature(row));
        }
    }
    let prod = g.mul(ft, fs)?;
    let dots = g.sum_last(prod)?;
    let denom = g.mul(nt, ns)?;
    let cos = g.div(dots, denom)?;
    let m = g.mean(cos)?;
    let neg = g.scale(m, -1.0)?;
    g.offset(neg, 1.0)
}

/// `L_D = L_L + L_S + L_F`.
pub fn distill_total(g: &mut Graph, hard: Var, soft: Var, feat: Var) -> Result<Var> {
    let s = g.add(hard, soft)?;
    g.add(s, feat)
}
