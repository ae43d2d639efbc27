use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::container::Container;
use crate::error::{CilError, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub token_count: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            token_count: 4,
            embed_dim: 32,
            depth: 2,
            mlp_hidden: 64,
            heads: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.input_dim,
            self.token_count,
            self.embed_dim,
            self.depth,
            self.mlp_hidden,
            self.heads,
        ];
        if fields.contains(&0) {
            return Err(CilError::Config("backbone extents must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(CilError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.input_dim % self.token_count != 0 {
            return Err(CilError::Config(format!(
                "input_dim {} not divisible by token_count {}",
                self.input_dim, self.token_count
            )));
        }
        Ok(())
    }

    /// Width of each input chunk that becomes one token.
    pub fn chunk(&self) -> usize {
        self.input_dim / self.token_count
    }

    pub(crate) fn to_ints(self) -> Vec<u32> {
        [
            self.input_dim,
            self.token_count,
            self.embed_dim,
            self.depth,
            self.mlp_hidden,
            self.heads,
        ]
        .iter()
        .map(|&v| v as u32)
        .collect()
    }

    pub(crate) fn from_ints(v: &[u32]) -> Result<Self> {
        if v.len() != 6 {
            return Err(CilError::Config(format!("expected 6 backbone integers, got {}", v.len())));
        }
        let cfg = Self {
            input_dim: v[0] as usize,
            token_count: v[1] as usize,
            embed_dim: v[2] as usize,
            depth: v[3] as usize,
            mlp_hidden: v[4] as usize,
            heads: v[5] as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub qkv_w: T,
    pub qkv_b: T,
    pub proj_w: T,
    pub proj_b: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub fc1_w: T,
    pub fc1_b: T,
    pub fc2_w: T,
    pub fc2_b: T,
}

impl<T> BlockWeights<T> {
    const NAMES: [&'static str; 12] = [
        "ln1.gamma", "ln1.beta", "qkv.w", "qkv.b", "proj.w", "proj.b", "ln2.gamma", "ln2.beta",
        "fc1.w", "fc1.b", "fc2.w", "fc2.b",
    ];

    fn fields(&self) -> [&T; 12] {
        [
            &self.ln1_gamma, &self.ln1_beta, &self.qkv_w, &self.qkv_b, &self.proj_w, &self.proj_b,
            &self.ln2_gamma, &self.ln2_beta, &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.qkv_w, &mut self.qkv_b,
            &mut self.proj_w, &mut self.proj_b, &mut self.ln2_gamma, &mut self.ln2_beta,
            &mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            ln1_gamma: it.next()?,
            ln1_beta: it.next()?,
            qkv_w: it.next()?,
            qkv_b: it.next()?,
            proj_w: it.next()?,
            proj_b: it.next()?,
            ln2_gamma: it.next()?,
            ln2_beta: it.next()?,
            fc1_w: it.next()?,
            fc1_b: it.next()?,
            fc2_w: it.next()?,
            fc2_b: it.next()?,
        })
    }
}

/// Encoder parameters, generic over the leaf type so the same layout serves
/// as storage (`Tensor`) and as a bound graph (`Var`).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub embed_w: T,
    pub embed_b: T,
    pub pos: T,
    pub blocks: Vec<BlockWeights<T>>,
    pub norm_gamma: T,
    pub norm_beta: T,
}

impl<T> EncoderWeights<T> {
    /// Every leaf with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("embed.w".to_string(), &self.embed_w),
            ("embed.b".to_string(), &self.embed_b),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in BlockWeights::<T>::NAMES.iter().zip(b.fields()) {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        out.push(("norm.gamma".to_string(), &self.norm_gamma));
        out.push(("norm.beta".to_string(), &self.norm_beta));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.norm_gamma);
        out.push(&mut self.norm_beta);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderWeights<U> {
        let leaves: Vec<U> = self.named().into_iter().map(|(_, t)| f(t)).collect();
        EncoderWeights::from_leaves(leaves, self.blocks.len()).expect("same layout")
    }

    /// Rebuilds from leaves in [`named`](Self::named) order.
    pub fn from_leaves(leaves: Vec<T>, depth: usize) -> Option<Self> {
        if leaves.len() != 5 + 12 * depth {
            return None;
        }
        let mut it = leaves.into_iter();
        let embed_w = it.next()?;
        let embed_b = it.next()?;
        let pos = it.next()?;
        let mut blocks = Vec::with_capacity(depth);
        for _ in 0..depth {
            blocks.push(BlockWeights::from_fields(it.by_ref().take(12))?);
        }
        Some(Self {
            embed_w,
            embed_b,
            pos,
            blocks,
            norm_gamma: it.next()?,
            norm_beta: it.next()?,
        })
    }
}

impl EncoderWeights<Tensor> {
    /// Scaled-normal initialization: weights `N(0, 1/fan_in)`, biases 0,
    /// norm scales 1, positional table `N(0, 0.5²)`.
    pub fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let mut w = |rows: usize, cols: usize| {
            let std = 1.0 / (rows as f64).sqrt();
            Tensor::matrix(rows, cols, rng.normal_vec(rows * cols, std)).expect("shape")
        };
        let embed_w = w(cfg.chunk(), d);
        let blocks = (0..cfg.depth)
            .map(|_| BlockWeights {
                ln1_gamma: Tensor::filled(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                qkv_w: w(d, 3 * d),
                qkv_b: Tensor::zeros(&[3 * d]),
                proj_w: w(d, d),
                proj_b: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::filled(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                fc1_w: w(d, cfg.mlp_hidden),
                fc1_b: Tensor::zeros(&[cfg.mlp_hidden]),
                fc2_w: w(cfg.mlp_hidden, d),
                fc2_b: Tensor::zeros(&[d]),
            })
            .collect();
        let pos = Tensor::matrix(cfg.token_count, d, rng.normal_vec(cfg.token_count * d, 0.5)).expect("shape");
        Self {
            embed_w,
            embed_b: Tensor::zeros(&[d]),
            pos,
            blocks,
            norm_gamma: Tensor::filled(&[d], 1.0),
            norm_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Byte image of every leaf, for freeze checks.
    pub fn fingerprint(&self) -> Vec<u8> {
        self.named().iter().flat_map(|(_, t)| t.to_le_bytes()).collect()
    }
}

/// The pre-trained encoder. Nothing in the crate mutates it after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenWeights {
    pub config: BackboneConfig,
    pub weights: EncoderWeights<Tensor>,
}

impl FrozenWeights {
    pub fn init(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            weights: EncoderWeights::init(&config, rng),
        })
    }

    pub fn fingerprint(&self) -> Vec<u8> {
        self.weights.fingerprint()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.config.to_ints());
        for (name, t) in self.weights.named() {
            c.push(name, t.clone());
        }
        c
    }

    /// Rebuilds weights from a container, checking every array's name and
    /// shape against the layout implied by the stored config.
    pub fn from_container(c: &Container) -> Result<Self> {
        let config = BackboneConfig::from_ints(&c.config)?;
        let template = EncoderWeights::init(&config, &mut Rng::new(0));
        let expected = template.named();
        if c.arrays.len() != expected.len() {
            return Err(CilError::Format {
                offset: 0,
                field: "array count".into(),
                message: format!("expected {} arrays, found {}", expected.len(), c.arrays.len()),
            });
        }
        let mut leaves = Vec::with_capacity(expected.len());
        for ((name, want), (got_name, got)) in expected.iter().zip(&c.arrays) {
            if name != got_name || want.shape() != got.shape() {
                return Err(CilError::Format {
                    offset: 0,
                    field: got_name.clone(),
                    message: format!("expected {name} {:?}, found {got_name} {:?}", want.shape(), got.shape()),
                });
            }
            leaves.push(got.clone());
        }
        let weights = EncoderWeights::from_leaves(leaves, config.depth).expect("layout checked");
        Ok(Self { config, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
