//! Pose representation, regression heads, the uncertainty-weighted pose
//! loss and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Predicted quaternions with a norm at or below this are rejected.
pub const QUAT_EPS: f64 = 1e-8;
/// Tolerance on the unit norm of quaternions handed to the rotation metric.
pub const UNIT_TOL: f64 = 1e-6;

pub const BETA_INIT: f64 = -0.5;
pub const GAMMA_INIT: f64 = -6.5;

/// Camera-to-world pose; `q` is `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: [f64; 3],
    pub q: [f64; 4],
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

impl Pose {
    pub fn new(x: [f64; 3], q: [f64; 4]) -> Self {
        Pose { x, q }
    }

    pub fn identity() -> Self {
        Pose::new([0.0; 3], [1.0, 0.0, 0.0, 0.0])
    }

    /// Rescales `q` to unit length.
    pub fn normalized(mut self) -> Result<Self> {
        let n = norm(&self.q);
        if !(n > QUAT_EPS) {
            return Err(Error::DegenerateQuaternion(n));
        }
        self.q.iter_mut().for_each(|v| *v /= n);
        Ok(self)
    }

    /// Flips the sign of `q` so that `w ≥ 0`.
    pub fn canonical(mut self) -> Self {
        if self.q[0] < 0.0 {
            self.q.iter_mut().for_each(|v| *v = -*v);
        }
        self
    }

    /// Rotation matrix (row-major) of the normalised quaternion.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let n = norm(&self.q);
        let [w, x, y, z] = self.q.map(|v| v / n);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }
}

/// Learnable log-variance weights of the pose loss.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: ParamId,
    pub gamma: ParamId,
}

impl LossWeights {
    pub fn new(store: &mut ParamStore, name: &str, beta0: f64, gamma0: f64) -> Self {
        LossWeights {
            beta: store.add(format!("{name}.beta"), Tensor::scalar(beta0)),
            gamma: store.add(format!("{name}.gamma"), Tensor::scalar(gamma0)),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Head {
    fc1: Linear,
    fc2: Linear,
}

impl Head {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, p, h)
    }
}

/// Two independent MLP heads: `C → hidden (gelu) → 3` for position and
/// `C → hidden (gelu) → 4` for orientation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseHeads {
    pub width: usize,
    pub hidden: usize,
    x_head: Head,
    q_head: Head,
}

impl PoseHeads {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut head = |tag: &str, k: usize| Head {
            fc1: Linear::new(store, &format!("{name}.{tag}.fc1"), width, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.{tag}.fc2"), hidden, k, true, rng),
        };
        let x_head = head("x", 3);
        let q_head = head("q", 4);
        PoseHeads {
            width,
            hidden,
            x_head,
            q_head,
        }
    }

    /// Parameter count of one head with `k` outputs.
    pub fn head_params(width: usize, hidden: usize, k: usize) -> usize {
        width * hidden + hidden + hidden * k + k
    }

    pub fn num_params(&self) -> usize {
        Self::head_params(self.width, self.hidden, 3) + Self::head_params(self.width, self.hidden, 4)
    }

    fn flatten(&self, g: &mut Graph, v: Var) -> Result<Var> {
        match *g.shape(v) {
            [b, 1, c] if c == self.width => g.reshape(v, &[b, c]),
            [_, c] if c == self.width => Ok(v),
            ref s => Err(Error::shape("regress_heads", s, &[0, 1, self.width])),
        }
    }

    /// `(Ĝ_x, Ĝ_q): [B, 1, C] → (x̂: [B, 3], q̂: [B, 4])`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, gx: Var, gq: Var) -> Result<(Var, Var)> {
        let gx = self.flatten(g, gx)?;
        let gq = self.flatten(g, gq)?;
        Ok((self.x_head.forward(g, p, gx)?, self.q_head.forward(g, p, gq)?))
    }
}

/// Batched ground truth as `[B, 3]` and `[B, 4]` tensors.
pub fn pose_targets(poses: &[&Pose]) -> (Tensor, Tensor) {
    let b = poses.len();
    let x = poses.iter().flat_map(|p| p.x).collect();
    let q = poses.iter().flat_map(|p| p.q).collect();
    (Tensor::from_raw(vec![b, 3], x), Tensor::from_raw(vec![b, 4], q))
}

/// `q̂ / ‖q̂‖` row-wise, rejecting near-zero rows.
pub fn normalize_quat(g: &mut Graph, q_hat: Var) -> Result<Var> {
    let n = g.l2norm(q_hat)?;
    if let Some(&bad) = g.value(n).data().iter().find(|&&v| !(v > QUAT_EPS)) {
        return Err(Error::DegenerateQuaternion(bad));
    }
    let shape = g.shape(q_hat).to_vec();
    let mut col = shape.clone();
    *col.last_mut().unwrap() = 1;
    let n = g.reshape(n, &col)?;
    g.div(q_hat, n)
}

/// `r·e^{−w} + w` for a scalar residual `r` and log-weight `w`.
pub fn weighted_term(g: &mut Graph, residual: Var, w: Var) -> Result<Var> {
    let neg = g.scale(w, -1.0)?;
    let e = g.exp(neg)?;
    let t = g.mul(residual, e)?;
    g.add(t, w)
}

/// `mean‖x − x̂‖·e^{−β} + β + mean‖q − q̂/‖q̂‖‖·e^{−γ} + γ`, residuals averaged
/// over the batch.
pub fn pose_loss(g: &mut Graph, x_hat: Var, q_hat: Var, x_gt: Var, q_gt: Var, beta: Var, gamma: Var) -> Result<Var> {
    if g.shape(x_hat) != g.shape(x_gt) {
        return Err(Error::shape("pose_loss", g.shape(x_hat), g.shape(x_gt)));
    }
    if g.shape(q_hat) != g.shape(q_gt) {
        return Err(Error::shape("pose_loss", g.shape(q_hat), g.shape(q_gt)));
    }
    let dx = g.sub(x_gt, x_hat)?;
    let ex = g.l2norm(dx)?;
    let ex = g.mean(ex)?;
    let qn = normalize_quat(g, q_hat)?;
    let dq = g.sub(q_gt, qn)?;
    let eq = g.l2norm(dq)?;
    let eq = g.mean(eq)?;
    let lx = weighted_term(g, ex, beta)?;
    let lq = weighted_term(g, eq, gamma)?;
    g.add(lx, lq)
}

/// Single-pose loss evaluated directly on floats.
pub fn pose_loss_value(pred: &Pose, gt: &Pose, beta: f64, gamma: f64) -> Result<f64> {
    let qn = pred.normalized()?.q;
    let ex = norm(&[gt.x[0] - pred.x[0], gt.x[1] - pred.x[1], gt.x[2] - pred.x[2]]);
    let eq = norm(&[gt.q[0] - qn[0], gt.q[1] - qn[1], gt.q[2] - qn[2], gt.q[3] - qn[3]]);
    Ok(ex * (-beta).exp() + beta + eq * (-gamma).exp() + gamma)
}

pub fn translation_error(a: &Pose, b: &Pose) -> f64 {
    norm(&[a.x[0] - b.x[0], a.x[1] - b.x[1], a.x[2] - b.x[2]])
}

/// Angle in degrees between two unit quaternions, insensitive to sign.
pub fn rotation_error_deg(q1: &[f64; 4], q2: &[f64; 4]) -> Result<f64> {
    for q in [q1, q2] {
        let n = norm(q);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitQuaternion(n));
        }
    }
    let dot: f64 = q1.iter().zip(q2).map(|(a, b)| a * b).sum();
    Ok(2.0 * dot.abs().min(1.0).acos().to_degrees())
}

/// Element of rank `(n − 1) / 2` after sorting; the lower median for even `n`.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub median_translation_error: f64,
    pub median_rotation_error: f64,
    pub translation_errors: Vec<f64>,
    pub rotation_errors: Vec<f64>,
}

impl PoseMetrics {
    /// Per-frame errors of predictions against ground truth. Predicted
    /// quaternions are normalised first.
    pub fn from_predictions(pred: &[Pose], gt: &[Pose]) -> Result<Self> {
        if pred.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if pred.len() != gt.len() {
            return Err(Error::shape("evaluate", &[pred.len()], &[gt.len()]));
        }
        let mut translation_errors = Vec::with_capacity(pred.len());
        let mut rotation_errors = Vec::with_capacity(pred.len());
        for (p, t) in pred.iter().zip(gt) {
            let p = p.normalized()?;
            let t = t.normalized()?;
            translation_errors.push(translation_error(&p, &t));
            rotation_errors.push(rotation_error_deg(&p.q, &t.q)?);
        }
        Ok(PoseMetrics {
            median_translation_error: lower_median(&translation_errors).unwrap(),
            median_rotation_error: lower_median(&rotation_errors).unwrap(),
            translation_errors,
            rotation_errors,
        })
    }
}
