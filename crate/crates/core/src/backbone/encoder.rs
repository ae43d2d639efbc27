use std::sync::Arc;

use super::pet::{adapter_apply, adapter_branch, ssf_apply, vpt_prepend, Pet, PetAttachment, Placement, SSF_POINTS};
use super::weights::{BackboneConfig, EncoderWeights, FrozenWeights};
use crate::error::{CilError, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Feature-extraction batch size used outside training.
const EVAL_CHUNK: usize = 512;

/// Encoder leaves plus attachment, bound to one graph.
#[derive(Debug)]
pub struct Bound {
    pub weights: EncoderWeights<Var>,
    pub pet: Pet<Var>,
}

impl Bound {
    /// Leaves the optimizer updates, in [`PetAttachment::named`] order.
    pub fn trainable(&self) -> Vec<Var> {
        self.pet.named().into_iter().map(|(_, v)| *v).collect()
    }
}

/// Frozen backbone with one attachment.
#[derive(Clone, Debug)]
pub struct Model {
    pub frozen: Arc<FrozenWeights>,
    pub pet: PetAttachment,
}

impl Model {
    pub fn new(frozen: Arc<FrozenWeights>, pet: PetAttachment) -> Self {
        Self { frozen, pet }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.frozen.config
    }

    pub fn embed_dim(&self) -> usize {
        self.frozen.config.embed_dim
    }

    /// Binds the model onto `g`. Frozen weights are always constants; the
    /// attachment's leaves are trainable when `train_pet` is set.
    pub fn bind(&self, g: &mut Graph, train_pet: bool) -> Bound {
        let pet = self.pet.map(|t| g.leaf(t.clone(), train_pet));
        let weights = match &pet {
            Pet::Full(w) => w.clone(),
            _ => self.frozen.weights.map(|t| g.constant(t.clone())),
        };
        Bound { weights, pet }
    }

    /// Pooled features for a batch, without gradient tracking.
    pub fn features(&self, inputs: &Tensor) -> Result<Tensor> {
        let d = self.embed_dim();
        let n = inputs.rows();
        let cols = inputs.cols();
        let mut out = Vec::with_capacity(n * d);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let chunk = Tensor::matrix(end - start, cols, inputs.data()[start * cols..end * cols].to_vec())?;
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let f = encode(&mut g, &bound, self.config(), &chunk)?;
            out.extend_from_slice(g.value(f).data());
        }
        Tensor::matrix(n, d, out)
    }
}

/// Token sequence → pooled feature, on a graph.
///
/// Each input row is cut into `token_count` equal chunks, linearly embedded
/// and given a positional offset. Prompts (if any) follow the input tokens.
/// Blocks are pre-norm: `h += attn(LN₁h)`, then `h += mlp(LN₂h)` with the
/// adapter branch either parallel to the MLP or applied after it. The output
/// is the mean of the input-token states (prompt slots excluded) passed
/// through the final norm.
pub fn encode(g: &mut Graph, bound: &Bound, cfg: &BackboneConfig, inputs: &Tensor) -> Result<Var> {
    encode_traced(g, bound, cfg, inputs, None)
}

/// [`encode`] that also records the token matrix entering each block.
pub fn encode_traced(
    g: &mut Graph,
    bound: &Bound,
    cfg: &BackboneConfig,
    inputs: &Tensor,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    if inputs.rank() != 2 || inputs.cols() != cfg.input_dim {
        return Err(CilError::dim("encode", inputs.shape(), &[0, cfg.input_dim]));
    }
    if !inputs.is_finite() {
        return Err(CilError::Degenerate("non-finite input batch".into()));
    }
    let batch = inputs.rows();
    let t = cfg.token_count;
    let w = &bound.weights;
    let tokens = inputs.clone().reshape(vec![batch * t, cfg.chunk()])?;
    let x = g.constant(tokens);
    let mut h = g.matmul(x, w.embed_w)?;
    h = g.add_row(h, w.embed_b)?;
    let pos = g.concat(&vec![w.pos; batch], 0)?;
    h = g.add(h, pos)?;

    let prompts: &[Var] = match &bound.pet {
        Pet::Prompt { layers, .. } => layers,
        _ => &[],
    };
    h = vpt_prepend(g, h, prompts.first().copied(), batch, t)?;
    let stride = t + bound.pet.prompt_count(g);

    for (l, bw) in w.blocks.iter().enumerate() {
        if l > 0 && prompts.len() > 1 {
            h = g.replace_prompts(h, prompts[l], batch, t)?;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(h);
        }
        let ssf = |p: usize| match &bound.pet {
            Pet::Ssf { points } => Some(&points[l * SSF_POINTS.len() + p]),
            _ => None,
        };

        let mut a = g.layer_norm(h)?;
        a = g.mul_row(a, bw.ln1_gamma)?;
        a = g.add_row(a, bw.ln1_beta)?;
        if let Some(p) = ssf(0) {
            a = ssf_apply(g, a, p)?;
        }
        let mut qkv = g.matmul(a, bw.qkv_w)?;
        qkv = g.add_row(qkv, bw.qkv_b)?;
        let att = g.attention(qkv, batch, stride, cfg.heads)?;
        let mut o = g.matmul(att, bw.proj_w)?;
        o = g.add_row(o, bw.proj_b)?;
        if let Some(p) = ssf(1) {
            o = ssf_apply(g, o, p)?;
        }
        h = g.add(h, o)?;

        let mut m = g.layer_norm(h)?;
        m = g.mul_row(m, bw.ln2_gamma)?;
        m = g.add_row(m, bw.ln2_beta)?;
        if let Some(p) = ssf(2) {
            m = ssf_apply(g, m, p)?;
        }
        let normed = m;
        m = g.matmul(m, bw.fc1_w)?;
        m = g.add_row(m, bw.fc1_b)?;
        m = g.relu(m);
        m = g.matmul(m, bw.fc2_w)?;
        m = g.add_row(m, bw.fc2_b)?;
        if let Some(p) = ssf(3) {
            m = ssf_apply(g, m, p)?;
        }

        h = match &bound.pet {
            Pet::Adapter { spec, blocks } => match spec.placement {
                // Parallel branch reads the same normalized input as the MLP.
                Placement::Parallel => {
                    let branch = adapter_branch(g, normed, &blocks[l], spec.scale)?;
                    let with_mlp = g.add(h, m)?;
                    g.add(with_mlp, branch)?
                }
                Placement::Sequential => {
                    let with_mlp = g.add(h, m)?;
                    adapter_apply(g, with_mlp, &blocks[l], spec.scale)?
                }
            },
            _ => g.add(h, m)?,
        };
    }

    let pooled = g.mean_tokens(h, stride, t)?;
    let mut f = g.layer_norm(pooled)?;
    f = g.mul_row(f, w.norm_gamma)?;
    g.add_row(f, w.norm_beta)
}
