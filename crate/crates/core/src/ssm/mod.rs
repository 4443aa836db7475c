//! Selective state-space layer.
//!
//! The continuous system `h' = A h + B x`, `y = C h` is kept diagonal per
//! channel: `A` is a `[D, N]` table of negative rates, stored as
//! `A_log = ln(−A)` so that `A = −exp(A_log)` can never become unstable.
//! `B`, `C` and the step `Δ` are produced from the input (selectivity), the
//! system is discretised with the exact zero-order hold, and the recurrence
//! is evaluated by a scan.

pub mod kernels;

use serde::{Deserialize, Serialize};

pub use kernels::{
    discretize, scan_chunked, scan_sequential, zoh_decay, zoh_input, DiscretizedSystem, ScanPair,
    DEFAULT_CHUNK,
};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{uniform_init, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STATE_DIM: usize = 16;

/// Inner width of the `Δ` projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaRank {
    /// `max(1, D / 16)`.
    Sixteenth,
    /// A single shared scalar broadcast to every channel.
    One,
}

impl DeltaRank {
    pub fn resolve(self, d: usize) -> usize {
        match self {
            DeltaRank::Sixteenth => (d / 16).max(1),
            DeltaRank::One => 1,
        }
    }
}

/// Diagonal HiPPO-derived initialisation: `A[d, n] = −(n + 1)`, returned in
/// log form `A_log[d, n] = ln(n + 1)`, identical for every channel.
pub fn hippo_init(d: usize, n: usize) -> Tensor {
    Tensor::from_fn(vec![d, n], |i| ((i % n) as f64 + 1.0).ln())
}

/// Continuous parameters of one selective SSM over `d` channels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SsmParams {
    pub d: usize,
    pub n: usize,
    pub rank: usize,
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_dt_down: ParamId,
    pub w_dt_up: ParamId,
    pub dt_bias: ParamId,
}

/// Input-dependent `(B, C, Δ)` for a `[B, L, D]` input.
#[derive(Clone, Copy, Debug)]
pub struct Selection {
    pub b_sel: Var,
    pub c_sel: Var,
    pub delta: Var,
}

/// Graph handles of a discretised system.
#[derive(Clone, Copy, Debug)]
pub struct DiscretizedVars {
    pub abar: Var,
    pub bbar: Var,
    pub c: Var,
}

impl SsmParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n: usize, rank: DeltaRank, rng: &mut Rng) -> Self {
        let r = rank.resolve(d);
        // Δ starts log-uniform in [0.1, 1] through the inverse softplus
        let dt_bias = Tensor::from_fn(vec![d], |_| {
            let u: f64 = rand::Rng::gen(rng);
            let dt = (1e-1f64.ln() + u * (1f64.ln() - 1e-1f64.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        SsmParams {
            d,
            n,
            rank: r,
            a_log: store.add(format!("{name}.a_log"), hippo_init(d, n)),
            w_b: store.add(format!("{name}.w_b"), uniform_init(rng, vec![d, n], d)),
            w_c: store.add(format!("{name}.w_c"), uniform_init(rng, vec![d, n], d)),
            w_dt_down: store.add(format!("{name}.w_dt_down"), uniform_init(rng, vec![d, r], d)),
            w_dt_up: store.add(format!("{name}.w_dt_up"), uniform_init(rng, vec![r, d], r)),
            dt_bias: store.add(format!("{name}.dt_bias"), dt_bias),
        }
    }

    /// `D·N` for `A`, `2·D·N` for the `B`/`C` projections, `2·D·R` for the
    /// low-rank `Δ` projection and `D` for its bias.
    pub fn num_params(&self) -> usize {
        3 * self.d * self.n + 2 * self.d * self.rank + self.d
    }

    /// `A = −exp(A_log)`.
    pub fn a(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        let e = g.exp(p[self.a_log])?;
        g.scale(e, -1.0)
    }

    /// `B = x·W_B`, `C = x·W_C`, `Δ = softplus((x·W_down)·W_up + Δ_bias)`.
    pub fn selectivity(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Selection> {
        if g.shape(x).len() != 3 || g.shape(x)[2] != self.d {
            return Err(Error::shape("selectivity", g.shape(x), &[0, 0, self.d]));
        }
        let b_sel = g.matmul(x, p[self.w_b])?;
        let c_sel = g.matmul(x, p[self.w_c])?;
        let low = g.matmul(x, p[self.w_dt_down])?;
        let up = g.matmul(low, p[self.w_dt_up])?;
        let pre = g.add(up, p[self.dt_bias])?;
        let delta = g.softplus(pre)?;
        Ok(Selection { b_sel, c_sel, delta })
    }

    pub fn discretize(&self, g: &mut Graph, p: &Bound, sel: &Selection) -> Result<DiscretizedVars> {
        let a = self.a(g, p)?;
        let abar = g.zoh_decay(sel.delta, a)?;
        let bbar = g.zoh_input(sel.delta, a, sel.b_sel)?;
        Ok(DiscretizedVars {
            abar,
            bbar,
            c: sel.c_sel,
        })
    }

    /// Full selective SSM: `[B, L, D] → [B, L, D]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, chunk: Option<usize>) -> Result<Var> {
        let sel = self.selectivity(g, p, x)?;
        let sys = self.discretize(g, p, &sel)?;
        g.selective_scan(sys.abar, sys.bbar, sys.c, x, chunk)
    }
}
