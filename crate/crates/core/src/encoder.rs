//! Front half of the pose network: patch-embedding feature extractor,
//! separable learned 2-D positional encodings, a learnable task token and a
//! pre-norm transformer encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{uniform_init, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Position,
    Orientation,
}

/// Rearranges a `[B, H, W, C]` grid into non-overlapping `stride × stride`
/// patches: `[B, (H/s)·(W/s), s·s·C]`, patches in row-major `(i, j)` order and
/// each patch flattened as `(di, dj, c)`.
pub fn patchify(grid: &Tensor, stride: usize) -> Result<(Tensor, usize, usize)> {
    let &[b, h, w, c] = grid.shape() else {
        return Err(Error::InvalidShape {
            shape: grid.shape().to_vec(),
            reason: "feature grid must be [B, H, W, C]".into(),
        });
    };
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::shape("patchify", grid.shape(), &[stride, stride]));
    }
    let (hm, wm) = (h / stride, w / stride);
    let plen = stride * stride * c;
    let src = grid.data();
    let mut out = Vec::with_capacity(grid.numel());
    for bi in 0..b {
        for i in 0..hm {
            for j in 0..wm {
                for di in 0..stride {
                    let y = i * stride + di;
                    let start = ((bi * h + y) * w + j * stride) * c;
                    out.extend_from_slice(&src[start..start + stride * c]);
                }
            }
        }
    }
    Ok((Tensor::from_raw(vec![b, hm * wm, plen], out), hm, wm))
}

/// Flattened activation map of one branch.
#[derive(Clone, Copy, Debug)]
pub struct ActivationMap {
    pub h_m: usize,
    pub w_m: usize,
    pub c_t: usize,
    /// `[B, H_m·W_m, C_t]`, token index `i·W_m + j`.
    pub data: Var,
}

/// Stand-in for the convolutional backbone: a learned linear map of each
/// non-overlapping patch to `C_t` channels. The position branch uses a
/// coarser stride than the orientation branch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchEmbed {
    pub stride: usize,
    pub c_in: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, stride: usize, c_t: usize, rng: &mut Rng) -> Self {
        PatchEmbed {
            stride,
            c_in,
            proj: Linear::new(store, &format!("{name}.proj"), stride * stride * c_in, c_t, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, grid: &Tensor) -> Result<ActivationMap> {
        if grid.shape().last() != Some(&self.c_in) {
            return Err(Error::shape("backbone", grid.shape(), &[self.c_in]));
        }
        let (patches, h_m, w_m) = patchify(grid, self.stride)?;
        let x = g.constant(patches);
        let data = self.proj.forward(g, p, x)?;
        Ok(ActivationMap {
            h_m,
            w_m,
            c_t: self.proj.fan_out,
            data,
        })
    }
}

/// Two learned 1-D tables, `E_x: [W_m+1, C_t/2]` and `E_y: [H_m+1, C_t/2]`.
/// Row 0 of each table belongs to the task token; spatial position `(i, j)`
/// uses rows `j+1` and `i+1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosEncoding2D {
    pub h_m: usize,
    pub w_m: usize,
    pub c_t: usize,
    pub e_x: ParamId,
    pub e_y: ParamId,
}

impl PosEncoding2D {
    pub fn new(store: &mut ParamStore, name: &str, h_m: usize, w_m: usize, c_t: usize, rng: &mut Rng) -> Result<Self> {
        if c_t % 2 != 0 {
            return Err(Error::Config(format!("C_t = {c_t} must be even")));
        }
        let half = c_t / 2;
        Ok(PosEncoding2D {
            h_m,
            w_m,
            c_t,
            e_x: store.add(format!("{name}.e_x"), uniform_init(rng, vec![w_m + 1, half], c_t)),
            e_y: store.add(format!("{name}.e_y"), uniform_init(rng, vec![h_m + 1, half], c_t)),
        })
    }

    /// One-hot row selectors for the token followed by the spatial grid.
    fn selectors(&self) -> (Tensor, Tensor) {
        let s = self.h_m * self.w_m + 1;
        let mut sx = Tensor::zeros(vec![s, self.w_m + 1]);
        let mut sy = Tensor::zeros(vec![s, self.h_m + 1]);
        sx.data_mut()[0] = 1.0;
        sy.data_mut()[0] = 1.0;
        for i in 0..self.h_m {
            for j in 0..self.w_m {
                let t = 1 + i * self.w_m + j;
                sx.data_mut()[t * (self.w_m + 1) + j + 1] = 1.0;
                sy.data_mut()[t * (self.h_m + 1) + i + 1] = 1.0;
            }
        }
        (sx, sy)
    }

    /// `[H_m·W_m + 1, C_t]`; row `1 + i·W_m + j` is `concat(E_x[j+1], E_y[i+1])`.
    pub fn table(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        let (sx, sy) = self.selectors();
        let sx = g.constant(sx);
        let sy = g.constant(sy);
        let px = g.matmul(sx, p[self.e_x])?;
        let py = g.matmul(sy, p[self.e_y])?;
        g.concat(&[px, py], 1)
    }
}

/// Prepends the task token and adds positional encodings:
/// `[B, H_m·W_m, C_t] → [B, H_m·W_m + 1, C_t]`. Returns the sequence and the
/// positional table so the encoder can re-add it.
pub fn add_token_and_pos(
    g: &mut Graph,
    p: &Bound,
    map: &ActivationMap,
    token: ParamId,
    pos: &PosEncoding2D,
) -> Result<(Var, Var)> {
    if (pos.h_m, pos.w_m, pos.c_t) != (map.h_m, map.w_m, map.c_t) {
        return Err(Error::shape(
            "add_token_and_pos",
            &[map.h_m, map.w_m, map.c_t],
            &[pos.h_m, pos.w_m, pos.c_t],
        ));
    }
    let b = g.shape(map.data)[0];
    let tok = g.reshape(p[token], &[1, 1, map.c_t])?;
    let zeros = g.constant(Tensor::zeros(vec![b, 1, map.c_t]));
    let tok = g.add(zeros, tok)?;
    let seq = g.concat(&[tok, map.data], 1)?;
    let table = pos.table(g, p)?;
    let seq = g.add(seq, table)?;
    Ok((seq, table))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub c_t: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_blocks: 6,
            n_heads: 8,
            mlp_ratio: 4,
            dropout: 0.1,
            c_t: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.c_t % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "C_t = {} is not divisible by {} heads",
                self.c_t, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EncoderBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
}

/// Encoder outputs plus the per-block attention probabilities
/// (`[B, heads, S, S]` each).
pub struct EncoderTrace {
    pub g_in: Var,
    pub attention: Vec<Var>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.c_t;
        let hidden = c * cfg.mlp_ratio;
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                let n = format!("{name}.block{i}");
                EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), c),
                    wq: Linear::new(store, &format!("{n}.wq"), c, c, true, rng),
                    wk: Linear::new(store, &format!("{n}.wk"), c, c, true, rng),
                    wv: Linear::new(store, &format!("{n}.wv"), c, c, true, rng),
                    wo: Linear::new(store, &format!("{n}.wo"), c, c, true, rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), c),
                    fc1: Linear::new(store, &format!("{n}.fc1"), c, hidden, true, rng),
                    fc2: Linear::new(store, &format!("{n}.fc2"), hidden, c, true, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.final_ln"), c);
        Ok(Encoder { cfg, blocks, final_ln })
    }

    fn attention(&self, g: &mut Graph, p: &Bound, blk: &EncoderBlock, h: Var, pos: Var) -> Result<(Var, Var)> {
        let (b, s, c) = match *g.shape(h) {
            [b, s, c] => (b, s, c),
            ref sh => return Err(Error::shape("attention", sh, &[0, 0, self.cfg.c_t])),
        };
        let heads = self.cfg.n_heads;
        let dh = c / heads;
        let qk_in = g.add(h, pos)?;
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let r = g.reshape(v, &[b, s, heads, dh])?;
            g.permute(r, &[0, 2, 1, 3])
        };
        let q = blk.wq.forward(g, p, qk_in)?;
        let q = split(g, q)?;
        let k = blk.wk.forward(g, p, qk_in)?;
        let k = split(g, k)?;
        let v = blk.wv.forward(g, p, h)?;
        let v = split(g, v)?;
        let kt = g.transpose_last(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, s, c])?;
        Ok((blk.wo.forward(g, p, ctx)?, attn))
    }

    /// Pre-norm blocks (`x += drop(MHA(LN(x)))`, `x += drop(MLP(LN(x)))`) with
    /// the positional table re-added to the query/key input of every block,
    /// a final LayerNorm, and the task-token slice `[B, 1, C_t]` as output.
    pub fn forward(&self, g: &mut Graph, p: &Bound, seq: Var, pos: Var, seed: u64) -> Result<EncoderTrace> {
        let mut x = seq;
        let mut attention = Vec::with_capacity(self.blocks.len());
        let drop = self.cfg.dropout;
        for (i, blk) in self.blocks.iter().enumerate() {
            let site = 4 * i as u64;
            let h = blk.ln1.forward(g, p, x)?;
            let (a, probs) = self.attention(g, p, blk, h, pos)?;
            attention.push(probs);
            let a = g.dropout(a, drop, rng::derive(seed, site))?;
            x = g.add(x, a)?;
            let h = blk.ln2.forward(g, p, x)?;
            let m = blk.fc1.forward(g, p, h)?;
            let m = g.gelu(m)?;
            let m = g.dropout(m, drop, rng::derive(seed, site + 1))?;
            let m = blk.fc2.forward(g, p, m)?;
            let m = g.dropout(m, drop, rng::derive(seed, site + 2))?;
            x = g.add(x, m)?;
        }
        let out = self.final_ln.forward(g, p, x)?;
        let g_in = g.slice(out, 1, 0, 1)?;
        Ok(EncoderTrace { g_in, attention })
    }

    pub fn num_params(&self) -> usize {
        let c = self.cfg.c_t;
        let hidden = c * self.cfg.mlp_ratio;
        let per_block = 4 * (c * c + c) + 2 * (2 * c) + (c * hidden + hidden) + (hidden * c + c);
        self.cfg.n_blocks * per_block + 2 * c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn patch_shapes_and_errors() {
        let grid = Tensor::from_fn(vec![1, 32, 32, 8], |i| i as f64);
        let (p, hm, wm) = patchify(&grid, 8).unwrap();
        assert_eq!((hm, wm), (4, 4));
        assert_eq!(p.shape(), &[1, 16, 512]);
        assert!(patchify(&grid, 7).is_err());
        // first element of patch (0, 1) is pixel (0, 8)
        assert_eq!(p.data()[512], (8 * 8) as f64);
    }

    #[test]
    fn backbone_maps_to_token_grid() {
        let mut store = ParamStore::new();
        let emb = PatchEmbed::new(&mut store, "bb", 8, 8, 256, &mut seeded(0));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let grid = Tensor::from_fn(vec![2, 32, 32, 8], |i| (i as f64).sin());
        let map = emb.forward(&mut g, &p, &grid).unwrap();
        assert_eq!(g.shape(map.data), &[2, 16, 256]);
        assert_eq!((map.h_m, map.w_m), (4, 4));
    }

    #[test]
    fn zero_input_zero_bias_is_zero_map() {
        let mut store = ParamStore::new();
        let emb = PatchEmbed::new(&mut store, "bb", 2, 4, 8, &mut seeded(0));
        *store.get_mut(emb.proj.bias.unwrap()) = Tensor::zeros(vec![8]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let map = emb.forward(&mut g, &p, &Tensor::zeros(vec![1, 8, 8, 2])).unwrap();
        assert!(g.value(map.data).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positional_table_is_separable() {
        let mut store = ParamStore::new();
        let pos = PosEncoding2D::new(&mut store, "pos", 3, 4, 8, &mut seeded(5)).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let table = pos.table(&mut g, &p).unwrap();
        assert_eq!(g.shape(table), &[13, 8]);
        let tv = g.value(table).data().to_vec();
        let ex = store.get(pos.e_x).data();
        let ey = store.get(pos.e_y).data();
        for i in 0..3 {
            for j in 0..4 {
                let row = &tv[(1 + i * 4 + j) * 8..(2 + i * 4 + j) * 8];
                assert_eq!(&row[..4], &ex[(j + 1) * 4..(j + 2) * 4]);
                assert_eq!(&row[4..], &ey[(i + 1) * 4..(i + 2) * 4]);
            }
        }
        // same column j ⇒ same first half
        assert_eq!(&tv[(1 + 1) * 8..(1 + 1) * 8 + 4], &tv[(1 + 4 + 1) * 8..(1 + 4 + 1) * 8 + 4]);
        assert!(PosEncoding2D::new(&mut store, "odd", 1, 1, 7, &mut seeded(0)).is_err());
    }

    #[test]
    fn token_and_pos_sequence_length() {
        let mut store = ParamStore::new();
        let mut rng = seeded(9);
        let emb = PatchEmbed::new(&mut store, "bb", 2, 2, 8, &mut rng);
        let pos = PosEncoding2D::new(&mut store, "pos", 2, 3, 8, &mut rng).unwrap();
        let token = store.add("tok", Tensor::full(vec![8], 0.5));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let map = emb.forward(&mut g, &p, &Tensor::zeros(vec![2, 4, 6, 2])).unwrap();
        let (seq, _) = add_token_and_pos(&mut g, &p, &map, token, &pos).unwrap();
        assert_eq!(g.shape(seq), &[2, 2 * 3 + 1, 8]);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = EncoderConfig {
            n_heads: 3,
            c_t: 16,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_formula() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            n_blocks: 2,
            n_heads: 2,
            mlp_ratio: 2,
            dropout: 0.1,
            c_t: 16,
        };
        let enc = Encoder::new(&mut store, "enc", cfg, &mut seeded(0)).unwrap();
        assert_eq!(enc.num_params(), store.num_scalars());
    }
}
