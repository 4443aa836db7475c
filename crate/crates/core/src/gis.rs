//! Global information selector: a single gated selective-SSM layer applied to
//! the pooled encoder token of a branch.
//!
//! In bidirectional mode the `[B, 1, D]` token is paired with its
//! channel-reversed copy to form a two-step sequence
//! `[flip(G_in), G_in]`, which runs through the gated SSM; the step aligned
//! with the original token is returned. Because the reversed copy is scanned
//! first, the returned step sees both orientations through the state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Linear, ParamStore};
use crate::rng::Rng;
use crate::ssm::{DeltaRank, SsmParams, DEFAULT_STATE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GisMode {
    /// Flip/concat pairing, then the gated SSM.
    #[serde(rename = "gis")]
    Bidirectional,
    /// The gated SSM on the single token, no flip/concat.
    Classical,
    /// Identity; the block owns no parameters.
    Off,
}

impl std::str::FromStr for GisMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gis" | "bidirectional" => Ok(GisMode::Bidirectional),
            "classical" => Ok(GisMode::Classical),
            "off" | "none" => Ok(GisMode::Off),
            other => Err(Error::Config(format!("unknown gis mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for GisMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GisMode::Bidirectional => "gis",
            GisMode::Classical => "classical",
            GisMode::Off => "off",
        })
    }
}

/// How the two output steps of the bidirectional pair are reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// Keep the step aligned with the original token (index 1).
    Slice,
    Sum,
    Mean,
}

impl std::str::FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slice" => Ok(Combine::Slice),
            "sum" => Ok(Combine::Sum),
            "mean" => Ok(Combine::Mean),
            other => Err(Error::Config(format!("unknown gis combine `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GisConfig {
    pub d: usize,
    pub state_dim: usize,
    pub delta_rank: DeltaRank,
    pub mode: GisMode,
    pub combine: Combine,
    /// Chunk length for the scan kernel; `None` runs the plain recurrence.
    pub chunk: Option<usize>,
}

impl GisConfig {
    pub fn new(d: usize, mode: GisMode) -> Self {
        GisConfig {
            d,
            state_dim: DEFAULT_STATE_DIM,
            delta_rank: DeltaRank::Sixteenth,
            mode,
            combine: Combine::Slice,
            chunk: None,
        }
    }

    /// Scalar parameter count of a block with this configuration.
    pub fn num_params(&self) -> usize {
        if self.mode == GisMode::Off {
            return 0;
        }
        let d = self.d;
        let n = self.state_dim;
        let r = self.delta_rank.resolve(d);
        let in_proj = d * 2 * d + 2 * d;
        let ssm = 3 * d * n + 2 * d * r + d;
        let out_proj = d * d + d;
        in_proj + ssm + out_proj
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GisLayers {
    pub in_proj: Linear,
    pub ssm: SsmParams,
    pub out_proj: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GisBlock {
    pub cfg: GisConfig,
    pub layers: Option<GisLayers>,
}

impl GisBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: GisConfig, rng: &mut Rng) -> Self {
        let layers = (cfg.mode != GisMode::Off).then(|| {
            let d = cfg.d;
            GisLayers {
                in_proj: Linear::new(store, &format!("{name}.in_proj"), d, 2 * d, true, rng),
                ssm: SsmParams::new(store, &format!("{name}.ssm"), d, cfg.state_dim, cfg.delta_rank, rng),
                out_proj: Linear::new(store, &format!("{name}.out_proj"), d, d, true, rng),
            }
        });
        GisBlock { cfg, layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers.as_ref().map_or(0, |l| {
            l.in_proj.num_params() + l.ssm.num_params() + l.out_proj.num_params()
        })
    }

    fn check_input(&self, g: &Graph, g_in: Var) -> Result<usize> {
        match *g.shape(g_in) {
            [b, 1, d] if d == self.cfg.d => Ok(b),
            ref s => Err(Error::shape("gis", s, &[0, 1, self.cfg.d])),
        }
    }

    fn layers(&self) -> Result<&GisLayers> {
        self.layers.as_ref().ok_or(Error::ModeError)
    }

    /// `G_in: [B, 1, D] → Ĝ: [B, 1, D]` according to the configured mode.
    pub fn forward(&self, g: &mut Graph, p: &Bound, g_in: Var) -> Result<Var> {
        match self.cfg.mode {
            GisMode::Off => {
                self.check_input(g, g_in)?;
                Ok(g_in)
            }
            GisMode::Bidirectional => self.bidirectional_forward(g, p, g_in),
            GisMode::Classical => self.classical_forward(g, p, g_in),
        }
    }

    /// Input projection split into hidden and gate halves, selective SSM on
    /// the hidden half, SiLU gating, output projection. `[B, L, D] → [B, L, D]`.
    pub fn gated_ssm(&self, g: &mut Graph, p: &Bound, seq: Var) -> Result<Var> {
        let layers = self.layers()?;
        let d = self.cfg.d;
        let proj = layers.in_proj.forward(g, p, seq)?;
        let hidden = g.slice(proj, 2, 0, d)?;
        let gate = g.slice(proj, 2, d, d)?;
        let y = layers.ssm.forward(g, p, hidden, self.cfg.chunk)?;
        let act = g.silu(gate)?;
        let gated = g.mul(y, act)?;
        layers.out_proj.forward(g, p, gated)
    }

    pub fn bidirectional_forward(&self, g: &mut Graph, p: &Bound, g_in: Var) -> Result<Var> {
        self.layers()?;
        self.check_input(g, g_in)?;
        let flipped = g.flip_last(g_in)?;
        let pair = g.concat(&[flipped, g_in], 1)?;
        let out = self.gated_ssm(g, p, pair)?;
        let aligned = g.slice(out, 1, 1, 1)?;
        match self.cfg.combine {
            Combine::Slice => Ok(aligned),
            Combine::Sum | Combine::Mean => {
                let first = g.slice(out, 1, 0, 1)?;
                let s = g.add(first, aligned)?;
                if self.cfg.combine == Combine::Mean {
                    g.scale(s, 0.5)
                } else {
                    Ok(s)
                }
            }
        }
    }

    pub fn classical_forward(&self, g: &mut Graph, p: &Bound, g_in: Var) -> Result<Var> {
        self.layers()?;
        self.check_input(g, g_in)?;
        self.gated_ssm(g, p, g_in)
    }
}
