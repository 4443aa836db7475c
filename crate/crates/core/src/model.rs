//! The two-branch pose regressor: patch embedding, token + positional
//! encoding, transformer encoder, global information selector and MLP head
//! per branch, plus the learnable loss weights.

use serde::{Deserialize, Serialize};

use crate::data::{center_crop, stack, Dataset};
use crate::encoder::{add_token_and_pos, Encoder, EncoderConfig, PatchEmbed, PosEncoding2D};
use crate::error::{Error, Result};
use crate::gis::{Combine, GisBlock, GisConfig, GisMode};
use crate::graph::{Graph, Var};
use crate::nn::{uniform_init, Bound, ParamId, ParamStore};
use crate::pose::{self, LossWeights, Pose, PoseHeads, PoseMetrics};
use crate::rng::{self, Rng};
use crate::ssm::{DeltaRank, DEFAULT_STATE_DIM};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub c_in: usize,
    /// Input grid extents after cropping.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Patch stride of the position branch (the coarser map).
    pub stride_x: usize,
    /// Patch stride of the orientation branch.
    pub stride_q: usize,
    pub c_t: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub head_hidden: usize,
    pub gis_mode: GisMode,
    pub gis_combine: Combine,
    pub state_dim: usize,
    pub delta_rank: DeltaRank,
    pub scan_chunk: Option<usize>,
    pub beta0: f64,
    pub gamma0: f64,
}

impl ModelConfig {
    /// Full-width configuration: 256 channels, six 8-head blocks, 1024-wide
    /// heads, on a 224×224 three-channel input with 14×14 and 28×28 maps.
    pub fn paper() -> Self {
        ModelConfig {
            c_in: 3,
            grid_h: 224,
            grid_w: 224,
            stride_x: 16,
            stride_q: 8,
            c_t: 256,
            n_blocks: 6,
            n_heads: 8,
            mlp_ratio: 4,
            dropout: 0.1,
            head_hidden: 1024,
            gis_mode: GisMode::Bidirectional,
            gis_combine: Combine::Slice,
            state_dim: DEFAULT_STATE_DIM,
            delta_rank: DeltaRank::Sixteenth,
            scan_chunk: None,
            beta0: pose::BETA_INIT,
            gamma0: pose::GAMMA_INIT,
        }
    }

    /// Desk-scale configuration used for the synthetic experiments.
    pub fn toy() -> Self {
        ModelConfig {
            c_in: 8,
            grid_h: 16,
            grid_w: 16,
            stride_x: 8,
            stride_q: 4,
            c_t: 32,
            n_blocks: 2,
            n_heads: 2,
            mlp_ratio: 2,
            head_hidden: 128,
            ..ModelConfig::paper()
        }
    }

    /// Same network at `ratio` of the width (rounded to a multiple of the
    /// head count and of 2).
    pub fn scaled_width(&self, ratio: f64) -> Self {
        let step = self.n_heads.max(2) * 2 / gcd(self.n_heads.max(2), 2);
        let c_t = (((self.c_t as f64 * ratio) / step as f64).round() as usize).max(1) * step;
        ModelConfig {
            c_t,
            head_hidden: ((self.head_hidden as f64 * ratio).round() as usize).max(1),
            ..self.clone()
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
            c_t: self.c_t,
        }
    }

    pub fn gis(&self) -> GisConfig {
        GisConfig {
            d: self.c_t,
            state_dim: self.state_dim,
            delta_rank: self.delta_rank,
            mode: self.gis_mode,
            combine: self.gis_combine,
            chunk: self.scan_chunk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        for s in [self.stride_x, self.stride_q] {
            if s == 0 || self.grid_h % s != 0 || self.grid_w % s != 0 {
                return Err(Error::Config(format!(
                    "stride {s} does not tile a {}×{} grid",
                    self.grid_h, self.grid_w
                )));
            }
        }
        if self.c_t % 2 != 0 {
            return Err(Error::Config(format!("C_t = {} must be even", self.c_t)));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchLayers {
    pub embed: PatchEmbed,
    pub pos: PosEncoding2D,
    pub token: ParamId,
    pub encoder: Encoder,
    pub gis: GisBlock,
}

impl BranchLayers {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, stride: usize, rng: &mut Rng) -> Result<Self> {
        let embed = PatchEmbed::new(store, &format!("{name}.embed"), cfg.c_in, stride, cfg.c_t, rng);
        let pos = PosEncoding2D::new(
            store,
            &format!("{name}.pos"),
            cfg.grid_h / stride,
            cfg.grid_w / stride,
            cfg.c_t,
            rng,
        )?;
        let token = store.add(format!("{name}.token"), uniform_init(rng, vec![cfg.c_t], cfg.c_t));
        let encoder = Encoder::new(store, &format!("{name}.encoder"), cfg.encoder(), rng)?;
        let gis = GisBlock::new(store, &format!("{name}.gis"), cfg.gis(), rng);
        Ok(BranchLayers {
            embed,
            pos,
            token,
            encoder,
            gis,
        })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, grids: &Tensor, seed: u64) -> Result<BranchOutput> {
        let map = self.embed.forward(g, p, grids)?;
        let (seq, table) = add_token_and_pos(g, p, &map, self.token, &self.pos)?;
        let trace = self.encoder.forward(g, p, seq, table, seed)?;
        let selected = self.gis.forward(g, p, trace.g_in)?;
        Ok(BranchOutput {
            g_in: trace.g_in,
            selected,
            attention: trace.attention,
        })
    }
}

pub struct BranchOutput {
    /// Encoder output at the task token, `[B, 1, C_t]`.
    pub g_in: Var,
    /// After the selector, `[B, 1, C_t]`.
    pub selected: Var,
    pub attention: Vec<Var>,
}

pub struct ModelOutput {
    pub x_hat: Var,
    pub q_hat: Var,
    pub position: BranchOutput,
    pub orientation: BranchOutput,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MambaLoc {
    pub cfg: ModelConfig,
    pub position: BranchLayers,
    pub orientation: BranchLayers,
    pub heads: PoseHeads,
    pub loss_weights: LossWeights,
}

impl MambaLoc {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::seeded(seed);
        let position = BranchLayers::new(store, "position", &cfg, cfg.stride_x, &mut rng)?;
        let orientation = BranchLayers::new(store, "orientation", &cfg, cfg.stride_q, &mut rng)?;
        let heads = PoseHeads::new(store, "head", cfg.c_t, cfg.head_hidden, &mut rng);
        let loss_weights = LossWeights::new(store, "loss", cfg.beta0, cfg.gamma0);
        Ok(MambaLoc {
            cfg,
            position,
            orientation,
            heads,
            loss_weights,
        })
    }

    /// Scalar parameters owned by the two selector blocks.
    pub fn gis_params(&self) -> usize {
        self.position.gis.num_params() + self.orientation.gis.num_params()
    }

    /// `[B, H, W, C_in]` grids to `(x̂: [B, 3], q̂: [B, 4])`. `seed` drives
    /// dropout when the graph is in training mode.
    pub fn forward(&self, g: &mut Graph, p: &Bound, grids: &Tensor, seed: u64) -> Result<ModelOutput> {
        let position = self.position.forward(g, p, grids, rng::derive(seed, 1))?;
        let orientation = self.orientation.forward(g, p, grids, rng::derive(seed, 2))?;
        let (x_hat, q_hat) = self.heads.forward(g, p, position.selected, orientation.selected)?;
        Ok(ModelOutput {
            x_hat,
            q_hat,
            position,
            orientation,
        })
    }

    /// Pre-head global feature `concat(Ĝ_x, Ĝ_q)` as `[B, 2·C_t]`.
    pub fn features(&self, g: &mut Graph, out: &ModelOutput) -> Result<Var> {
        let b = g.shape(out.x_hat)[0];
        let cat = g.concat(&[out.position.selected, out.orientation.selected], 2)?;
        g.reshape(cat, &[b, 2 * self.cfg.c_t])
    }

    /// Uncertainty-weighted pose loss against batched targets.
    pub fn loss(&self, g: &mut Graph, p: &Bound, out: &ModelOutput, x_gt: &Tensor, q_gt: &Tensor) -> Result<Var> {
        let xt = g.constant(x_gt.clone());
        let qt = g.constant(q_gt.clone());
        pose::pose_loss(
            g,
            out.x_hat,
            out.q_hat,
            xt,
            qt,
            p[self.loss_weights.beta],
            p[self.loss_weights.gamma],
        )
    }

    /// Evaluation-mode predictions on centre-cropped grids.
    pub fn predict(&self, store: &ParamStore, ds: &Dataset, batch: usize) -> Result<Vec<Pose>> {
        let mut out = Vec::with_capacity(ds.len());
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let grids = chunk
                .iter()
                .map(|&i| center_crop(&ds.get(i).grid, self.cfg.grid_h, self.cfg.grid_w))
                .collect::<Result<Vec<_>>>()?;
            let grids = stack(&grids)?;
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let o = self.forward(&mut g, &p, &grids, 0)?;
            let xs = g.value(o.x_hat).data();
            let qs = g.value(o.q_hat).data();
            for k in 0..chunk.len() {
                out.push(Pose::new(
                    [xs[3 * k], xs[3 * k + 1], xs[3 * k + 2]],
                    [qs[4 * k], qs[4 * k + 1], qs[4 * k + 2], qs[4 * k + 3]],
                ));
            }
        }
        Ok(out)
    }

    /// Median translation and rotation error over a dataset.
    pub fn evaluate(&self, store: &ParamStore, ds: &Dataset) -> Result<PoseMetrics> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let pred = self.predict(store, ds, 32)?;
        let gt: Vec<Pose> = ds.iter().map(|s| s.pose).collect();
        PoseMetrics::from_predictions(&pred, &gt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_forward_shapes() {
        let mut store = ParamStore::new();
        let m = MambaLoc::new(&mut store, ModelConfig::toy(), 0).unwrap();
        let mut g = Graph::training();
        let p = store.bind(&mut g);
        let grids = Tensor::from_fn(vec![2, 16, 16, 8], |i| ((i % 17) as f64 * 0.1).sin());
        let out = m.forward(&mut g, &p, &grids, 5).unwrap();
        assert_eq!(g.shape(out.x_hat), &[2, 3]);
        assert_eq!(g.shape(out.q_hat), &[2, 4]);
        assert_eq!(g.shape(out.position.selected), &[2, 1, 32]);
        let f = m.features(&mut g, &out).unwrap();
        assert_eq!(g.shape(f), &[2, 64]);
    }

    #[test]
    fn off_arm_differs_by_exactly_the_selector_blocks() {
        let mut a = ParamStore::new();
        let gis = MambaLoc::new(&mut a, ModelConfig::toy(), 0).unwrap();
        let mut b = ParamStore::new();
        let cfg = ModelConfig {
            gis_mode: GisMode::Off,
            ..ModelConfig::toy()
        };
        MambaLoc::new(&mut b, cfg.clone(), 0).unwrap();
        assert_eq!(a.num_scalars() - b.num_scalars(), 2 * ModelConfig::toy().gis().num_params());
        assert_eq!(gis.gis_params(), a.num_scalars_under("position.gis") + a.num_scalars_under("orientation.gis"));
    }

    #[test]
    fn half_width_keeps_head_divisibility() {
        let s = ModelConfig::toy().scaled_width(0.5);
        assert_eq!(s.c_t, 16);
        assert_eq!(s.head_hidden, 64);
        s.validate().unwrap();
        assert_eq!(ModelConfig::paper().scaled_width(0.5).c_t, 128);
    }
}
