//! Parameter-efficient tuning attachments: bottleneck adapters, scale-and-shift
//! modulation, and visual prompts. Exactly one is active on a model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::weights::{BackboneConfig, EncoderWeights, FrozenWeights};
use crate::error::{CilError, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

/// SSF insertion points inside each block, in forward order.
pub const SSF_POINTS: [&str; 4] = ["ln1", "attn_out", "ln2", "mlp_out"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PetKind {
    None,
    Adapter,
    Ssf,
    VptShallow,
    VptDeep,
    Full,
}

impl PetKind {
    pub const ALL: [PetKind; 6] = [
        PetKind::None,
        PetKind::Adapter,
        PetKind::Ssf,
        PetKind::VptShallow,
        PetKind::VptDeep,
        PetKind::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PetKind::None => "none",
            PetKind::Adapter => "adapter",
            PetKind::Ssf => "ssf",
            PetKind::VptShallow => "vpt-shallow",
            PetKind::VptDeep => "vpt-deep",
            PetKind::Full => "full",
        }
    }
}

impl fmt::Display for PetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PetKind {
    type Err = CilError;

    fn from_str(s: &str) -> Result<Self> {
        PetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CilError::Config(format!("unknown PET kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Branch runs alongside the block MLP.
    Parallel,
    /// Branch runs on the block output.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Bottleneck width; `None` means `3·embed_dim / 4`.
    pub bottleneck: Option<usize>,
    pub scale: f64,
    pub placement: Placement,
    pub bias: bool,
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck: None,
            scale: 1.0,
            placement: Placement::Parallel,
            bias: false,
            init_std: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PetConfig {
    pub kind: PetKind,
    pub adapter: AdapterConfig,
    /// Prompt count `n` for the VPT kinds.
    pub prompts: usize,
    pub prompt_init_std: f64,
}

impl Default for PetConfig {
    fn default() -> Self {
        Self {
            kind: PetKind::Adapter,
            adapter: AdapterConfig::default(),
            prompts: 4,
            prompt_init_std: 0.02,
        }
    }
}

/// Forward-relevant adapter settings that are not trainable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterSpec {
    pub scale: f64,
    pub placement: Placement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBlock<T> {
    pub down: T,
    pub up: T,
    pub down_bias: Option<T>,
    pub up_bias: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsfPoint<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    Shallow,
    Deep,
}

/// One active attachment; `Pet<Tensor>` stores it, `Pet<Var>` is it bound to a graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Pet<T> {
    None,
    Adapter {
        spec: AdapterSpec,
        blocks: Vec<AdapterBlock<T>>,
    },
    /// `SSF_POINTS.len()` points per block, block-major.
    Ssf { points: Vec<SsfPoint<T>> },
    /// One prompt matrix for shallow mode, one per block for deep mode.
    Prompt { mode: PromptMode, layers: Vec<T> },
    /// Trainable copy of the whole encoder.
    Full(EncoderWeights<T>),
}

pub type PetAttachment = Pet<Tensor>;

impl<T> Pet<T> {
    pub fn kind(&self) -> PetKind {
        match self {
            Pet::None => PetKind::None,
            Pet::Adapter { .. } => PetKind::Adapter,
            Pet::Ssf { .. } => PetKind::Ssf,
            Pet::Prompt {
                mode: PromptMode::Shallow,
                ..
            } => PetKind::VptShallow,
            Pet::Prompt { .. } => PetKind::VptDeep,
            Pet::Full(_) => PetKind::Full,
        }
    }

    /// Trainable leaves with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        match self {
            Pet::None => Vec::new(),
            Pet::Adapter { blocks, .. } => {
                let mut out = Vec::new();
                for (i, b) in blocks.iter().enumerate() {
                    out.push((format!("adapter.{i}.down"), &b.down));
                    if let Some(t) = &b.down_bias {
                        out.push((format!("adapter.{i}.down_bias"), t));
                    }
                    out.push((format!("adapter.{i}.up"), &b.up));
                    if let Some(t) = &b.up_bias {
                        out.push((format!("adapter.{i}.up_bias"), t));
                    }
                }
                out
            }
            Pet::Ssf { points } => points
                .iter()
                .enumerate()
                .flat_map(|(i, p)| {
                    let name = format!("ssf.{}.{}", i / SSF_POINTS.len(), SSF_POINTS[i % SSF_POINTS.len()]);
                    [(format!("{name}.gamma"), &p.gamma), (format!("{name}.beta"), &p.beta)]
                })
                .collect(),
            Pet::Prompt { layers, .. } => layers
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("prompt.{i}"), p))
                .collect(),
            Pet::Full(w) => w.named(),
        }
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        match self {
            Pet::None => Vec::new(),
            Pet::Adapter { blocks, .. } => {
                let mut out = Vec::new();
                for b in blocks {
                    out.push(&mut b.down);
                    if let Some(t) = &mut b.down_bias {
                        out.push(t);
                    }
                    out.push(&mut b.up);
                    if let Some(t) = &mut b.up_bias {
                        out.push(t);
                    }
                }
                out
            }
            Pet::Ssf { points } => points.iter_mut().flat_map(|p| [&mut p.gamma, &mut p.beta]).collect(),
            Pet::Prompt { layers, .. } => layers.iter_mut().collect(),
            Pet::Full(w) => w.leaves_mut(),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Pet<U> {
        match self {
            Pet::None => Pet::None,
            Pet::Adapter { spec, blocks } => Pet::Adapter {
                spec: *spec,
                blocks: blocks
                    .iter()
                    .map(|b| {
                        let down = f(&b.down);
                        let down_bias = b.down_bias.as_ref().map(&mut f);
                        let up = f(&b.up);
                        let up_bias = b.up_bias.as_ref().map(&mut f);
                        AdapterBlock {
                            down,
                            up,
                            down_bias,
                            up_bias,
                        }
                    })
                    .collect(),
            },
            Pet::Ssf { points } => Pet::Ssf {
                points: points
                    .iter()
                    .map(|p| {
                        let gamma = f(&p.gamma);
                        SsfPoint { gamma, beta: f(&p.beta) }
                    })
                    .collect(),
            },
            Pet::Prompt { mode, layers } => Pet::Prompt {
                mode: *mode,
                layers: layers.iter().map(f).collect(),
            },
            Pet::Full(w) => Pet::Full(w.map(f)),
        }
    }
}

impl Pet<Var> {
    /// Prompt count `n` (0 for non-prompt kinds).
    pub fn prompt_count(&self, g: &Graph) -> usize {
        match self {
            Pet::Prompt { layers, .. } => layers.first().map_or(0, |&p| g.value(p).rows()),
            _ => 0,
        }
    }
}

impl PetAttachment {
    /// Identity-initialized attachment: adapter `W_up = 0`, SSF `γ = 1, β = 0`,
    /// random prompts (prompts have no identity value except `n = 0`).
    pub fn init(cfg: &PetConfig, frozen: &FrozenWeights, rng: &mut Rng) -> Result<Self> {
        let bc: &BackboneConfig = &frozen.config;
        let d = bc.embed_dim;
        Ok(match cfg.kind {
            PetKind::None => Pet::None,
            PetKind::Adapter => {
                let hidden = cfg.adapter.bottleneck.unwrap_or((3 * d / 4).max(1));
                if hidden == 0 || hidden >= d {
                    return Err(CilError::Config(format!(
                        "adapter bottleneck {hidden} must be in 1..{d}"
                    )));
                }
                let blocks = (0..bc.depth)
                    .map(|_| AdapterBlock {
                        down: Tensor::matrix(d, hidden, rng.normal_vec(d * hidden, cfg.adapter.init_std))
                            .expect("shape"),
                        up: Tensor::zeros(&[hidden, d]),
                        down_bias: cfg.adapter.bias.then(|| Tensor::zeros(&[hidden])),
                        up_bias: cfg.adapter.bias.then(|| Tensor::zeros(&[d])),
                    })
                    .collect();
                Pet::Adapter {
                    spec: AdapterSpec {
                        scale: cfg.adapter.scale,
                        placement: cfg.adapter.placement,
                    },
                    blocks,
                }
            }
            PetKind::Ssf => Pet::Ssf {
                points: (0..bc.depth * SSF_POINTS.len())
                    .map(|_| SsfPoint {
                        gamma: Tensor::filled(&[d], 1.0),
                        beta: Tensor::zeros(&[d]),
                    })
                    .collect(),
            },
            PetKind::VptShallow | PetKind::VptDeep => {
                let (mode, count) = if cfg.kind == PetKind::VptShallow {
                    (PromptMode::Shallow, 1)
                } else {
                    (PromptMode::Deep, bc.depth)
                };
                if cfg.prompts == 0 {
                    Pet::Prompt { mode, layers: Vec::new() }
                } else {
                    let n = cfg.prompts;
                    Pet::Prompt {
                        mode,
                        layers: (0..count)
                            .map(|_| {
                                Tensor::matrix(n, d, rng.normal_vec(n * d, cfg.prompt_init_std)).expect("shape")
                            })
                            .collect(),
                    }
                }
            }
            PetKind::Full => Pet::Full(frozen.weights.clone()),
        })
    }

    /// Number of trainable scalars the attachment contributes.
    pub fn trainable_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn fingerprint(&self) -> Vec<u8> {
        self.named().iter().flat_map(|(_, t)| t.to_le_bytes()).collect()
    }

    /// Euclidean norm of the difference to another attachment of the same layout.
    pub fn distance(&self, other: &PetAttachment) -> Result<f64> {
        let (a, b) = (self.named(), other.named());
        if a.len() != b.len() {
            return Err(CilError::contract("PET layouts differ"));
        }
        let mut acc = 0.0;
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            if x.shape() != y.shape() {
                return Err(CilError::dim("pet_distance", x.shape(), y.shape()));
            }
            acc += x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        }
        Ok(acc.sqrt())
    }
}

/// `out = x + s · σ(x·W_down)·W_up` on a graph.
pub fn adapter_apply(g: &mut Graph, x: Var, block: &AdapterBlock<Var>, scale: f64) -> Result<Var> {
    let branch = adapter_branch(g, x, block, scale)?;
    g.add(x, branch)
}

/// The scaled bottleneck branch `s · σ(x·W_down)·W_up` without the residual.
pub fn adapter_branch(g: &mut Graph, x: Var, block: &AdapterBlock<Var>, scale: f64) -> Result<Var> {
    let mut h = g.matmul(x, block.down)?;
    if let Some(b) = block.down_bias {
        h = g.add_row(h, b)?;
    }
    let h = g.relu(h);
    let mut out = g.matmul(h, block.up)?;
    if let Some(b) = block.up_bias {
        out = g.add_row(out, b)?;
    }
    Ok(g.scale(out, scale))
}

/// `y = γ ⊙ x + β` applied to every row.
pub fn ssf_apply(g: &mut Graph, x: Var, point: &SsfPoint<Var>) -> Result<Var> {
    let scaled = g.mul_row(x, point.gamma)?;
    g.add_row(scaled, point.beta)
}

/// `[x, P]` for every sample: each sample's `tokens` rows followed by the
/// prompt rows. With no prompts the input is returned unchanged.
pub fn vpt_prepend(g: &mut Graph, x: Var, prompts: Option<Var>, batch: usize, tokens: usize) -> Result<Var> {
    match prompts {
        Some(p) => g.append_prompts(x, p, batch, tokens),
        None => Ok(x),
    }
}
