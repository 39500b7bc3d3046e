//! Micro transformer encoder with optional per-block bottleneck adapters.
//!
//! Every block runs post-norm attention and feed-forward sublayers. When
//! adapters are enabled, a bottleneck layer (down-projection, nonlinearity,
//! up-projection) is applied to each sublayer's output and added back
//! residually: `h_adapted = h + f_adapter(h)`. The up-projection is
//! zero-initialized, so a fresh adapter model computes exactly the same
//! function as its adapter-free twin.
//!
//! Parameters live in named groups ("embeddings", "block_0.attention",
//! "block_0.adapter", "pooler", ...) with a per-group trainable flag; the flag
//! is the freezing mechanism used by adapter-only training. Backbone and
//! adapter weights draw from independent seeded streams, so enabling adapters
//! never perturbs the backbone initialization.

use crate::error::{Error, Result};
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::{Activation, Graph, NodeId};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// Large negative logit added at masked-out key positions before softmax.
/// Finite on purpose: `exp(ATTN_MASK_VALUE - max)` underflows to exactly 0.
const ATTN_MASK_VALUE: f64 = -1e30;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Bottleneck adapter hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Inner width of the bottleneck; must be smaller than `d_model`.
    pub bottleneck_dim: usize,
    #[serde(default = "default_adapter_nonlinearity")]
    pub nonlinearity: Activation,
    /// Init std of the down-projection. The up-projection is always zero, so
    /// the adapter is the identity at init either way; a larger down std only
    /// scales the up-projection's first gradients, which sets how quickly a
    /// fresh adapter leaves the identity.
    #[serde(default = "default_down_init_std")]
    pub down_init_std: f64,
}

fn default_adapter_nonlinearity() -> Activation {
    Activation::Gelu
}

fn default_down_init_std() -> f64 {
    0.2
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck_dim: 8,
            nonlinearity: Activation::Gelu,
            down_init_std: default_down_init_std(),
        }
    }
}

/// Architecture description. `adapter: None` is the plain "full fine-tuning"
/// model; `Some(..)` inserts two adapters per block, one after each sublayer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    /// Truncated-normal std for backbone weights and embeddings. The 0.02
    /// default matches full-size encoders (d_model ~ 768); narrow desk
    /// models need roughly 1/sqrt(d_model) for token signals to survive the
    /// layer norms, so presets set this explicitly.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_layers, n_heads, d_ff must all be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.init_std <= 0.0 {
            return bad(format!("init_std ({}) must be positive", self.init_std));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate ({}) must lie in [0, 1)",
                self.dropout_rate
            ));
        }
        if let Some(a) = &self.adapter {
            if a.bottleneck_dim == 0 {
                return bad("adapter bottleneck_dim must be positive".into());
            }
            if a.bottleneck_dim >= self.d_model {
                return bad(format!(
                    "adapter bottleneck_dim ({}) must be smaller than d_model ({})",
                    a.bottleneck_dim, self.d_model
                ));
            }
        }
        Ok(())
    }

    /// Twin config with adapters stripped.
    pub fn without_adapter(&self) -> Self {
        let mut c = self.clone();
        c.adapter = None;
        c
    }
}

/// Index of a parameter inside a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One named parameter tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Role of a group in the architecture; drives freezing patterns and the
/// adapter parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Backbone,
    Adapter,
    Head,
}

/// Named collection of parameters with a trainable flag. Every model
/// parameter belongs to exactly one group.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub kind: GroupKind,
    pub params: Vec<ParamId>,
    pub trainable: bool,
}

/// The four parameters of one bottleneck adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterLayer {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    adapter_attn: Option<AdapterLayer>,
    adapter_ffn: Option<AdapterLayer>,
}

#[derive(Debug, Clone)]
struct ClassifierLayout {
    w: ParamId,
    b: ParamId,
    n_classes: usize,
}

/// A batch of encoded token ids plus the 0/1 attention mask, both flattened
/// row-major `[batch, seq]`.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>, mask: Vec<u8>) -> Result<Self> {
        if ids.len() != batch * seq || mask.len() != batch * seq {
            return Err(Error::Dimension(format!(
                "batch {batch} x seq {seq} needs {} ids/mask entries, got {}/{}",
                batch * seq,
                ids.len(),
                mask.len()
            )));
        }
        if mask.iter().any(|m| *m > 1) {
            return Err(Error::Data("attention mask values must be 0 or 1".into()));
        }
        Ok(Self {
            batch,
            seq,
            ids,
            mask,
        })
    }
}

/// One forward pass: the graph plus handles into it. Head logits are built on
/// top of this by the training losses.
pub struct ForwardPass {
    pub graph: Graph,
    /// `[batch, seq, d_model]` final block output.
    pub sequence_output: NodeId,
    /// `[batch, d_model]` tanh-affine of the first token.
    pub pooled: NodeId,
    /// Graph leaf for every model parameter, indexed by `ParamId.0`.
    param_nodes: Vec<NodeId>,
    pub batch: usize,
    pub seq: usize,
}

impl ForwardPass {
    pub fn param_node(&self, pid: ParamId) -> NodeId {
        self.param_nodes[pid.0]
    }

    /// Add the gradients computed by `backward` into the model's parameter
    /// gradient buffers.
    pub fn accumulate_grads(&self, model: &mut Model) {
        for (i, node) in self.param_nodes.iter().enumerate() {
            if let Some(g) = self.graph.grad(*node) {
                let dst = &mut model.params[i].grad;
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

/// Encoder with embeddings, `n_layers` blocks, a pooler, and optional task
/// heads attached by the training phases.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Param>,
    groups: Vec<ParamGroup>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    blocks: Vec<BlockLayout>,
    pooler_w: ParamId,
    pooler_b: ParamId,
    classifier: Option<ClassifierLayout>,
    mlm_bias: Option<ParamId>,
}

/// Deterministically build a model from a config and seed. Backbone weights
/// come from one seeded stream and adapter weights from another, so the
/// backbone is parameter-for-parameter identical with and without adapters.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut backbone_rng = rng::stream_rng(seed, rng::stream::BACKBONE_INIT);
    let mut adapter_rng = rng::stream_rng(seed, rng::stream::ADAPTER_INIT);

    let mut m = Model {
        config: config.clone(),
        params: Vec::new(),
        groups: Vec::new(),
        tok_emb: ParamId(0),
        pos_emb: ParamId(0),
        emb_ln_g: ParamId(0),
        emb_ln_b: ParamId(0),
        blocks: Vec::new(),
        pooler_w: ParamId(0),
        pooler_b: ParamId(0),
        classifier: None,
        mlm_bias: None,
    };

    let d = config.d_model;
    let v = config.vocab_size;

    // embeddings
    let mut group = Vec::new();
    m.tok_emb = m.push_param(
        "embeddings.token",
        &[v, d],
        init_normal(&mut backbone_rng, v * d, config.init_std),
        &mut group,
    );
    m.pos_emb = m.push_param(
        "embeddings.position",
        &[config.max_seq_len, d],
        init_normal(&mut backbone_rng, config.max_seq_len * d, config.init_std),
        &mut group,
    );
    m.emb_ln_g = m.push_param("embeddings.ln_gain", &[d], vec![1.0; d], &mut group);
    m.emb_ln_b = m.push_param("embeddings.ln_bias", &[d], vec![0.0; d], &mut group);
    m.push_group("embeddings", GroupKind::Backbone, group);

    for layer in 0..config.n_layers {
        let base = format!("block_{layer}");
        let mut attn = Vec::new();
        let wq = m.push_param(
            &format!("{base}.attention.wq"),
            &[d, d],
            init_normal(&mut backbone_rng, d * d, config.init_std),
            &mut attn,
        );
        let bq = m.push_param(&format!("{base}.attention.bq"), &[d], vec![0.0; d], &mut attn);
        let wk = m.push_param(
            &format!("{base}.attention.wk"),
            &[d, d],
            init_normal(&mut backbone_rng, d * d, config.init_std),
            &mut attn,
        );
        let bk = m.push_param(&format!("{base}.attention.bk"), &[d], vec![0.0; d], &mut attn);
        let wv = m.push_param(
            &format!("{base}.attention.wv"),
            &[d, d],
            init_normal(&mut backbone_rng, d * d, config.init_std),
            &mut attn,
        );
        let bv = m.push_param(&format!("{base}.attention.bv"), &[d], vec![0.0; d], &mut attn);
        let wo = m.push_param(
            &format!("{base}.attention.wo"),
            &[d, d],
            init_normal(&mut backbone_rng, d * d, config.init_std),
            &mut attn,
        );
        let bo = m.push_param(&format!("{base}.attention.bo"), &[d], vec![0.0; d], &mut attn);
        let ln1_g = m.push_param(&format!("{base}.attention.ln_gain"), &[d], vec![1.0; d], &mut attn);
        let ln1_b = m.push_param(&format!("{base}.attention.ln_bias"), &[d], vec![0.0; d], &mut attn);
        m.push_group(&format!("{base}.attention"), GroupKind::Backbone, attn);

        let mut ffn = Vec::new();
        let w1 = m.push_param(
            &format!("{base}.ffn.w1"),
            &[d, config.d_ff],
            init_normal(&mut backbone_rng, d * config.d_ff, config.init_std),
            &mut ffn,
        );
        let b1 = m.push_param(
            &format!("{base}.ffn.b1"),
            &[config.d_ff],
            vec![0.0; config.d_ff],
            &mut ffn,
        );
        let w2 = m.push_param(
            &format!("{base}.ffn.w2"),
            &[config.d_ff, d],
            init_normal(&mut backbone_rng, config.d_ff * d, config.init_std),
            &mut ffn,
        );
        let b2 = m.push_param(&format!("{base}.ffn.b2"), &[d], vec![0.0; d], &mut ffn);
        let ln2_g = m.push_param(&format!("{base}.ffn.ln_gain"), &[d], vec![1.0; d], &mut ffn);
        let ln2_b = m.push_param(&format!("{base}.ffn.ln_bias"), &[d], vec![0.0; d], &mut ffn);
        m.push_group(&format!("{base}.ffn"), GroupKind::Backbone, ffn);

        let (adapter_attn, adapter_ffn) = if let Some(ac) = &config.adapter {
            let mut ad = Vec::new();
            let a1 = m.push_adapter(&format!("{base}.adapter.attn"), ac, d, &mut adapter_rng, &mut ad);
            let a2 = m.push_adapter(&format!("{base}.adapter.ffn"), ac, d, &mut adapter_rng, &mut ad);
            m.push_group(&format!("{base}.adapter"), GroupKind::Adapter, ad);
            (Some(a1), Some(a2))
        } else {
            (None, None)
        };

        m.blocks.push(BlockLayout {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln1_g,
            ln1_b,
            w1,
            b1,
            w2,
            b2,
            ln2_g,
            ln2_b,
            adapter_attn,
            adapter_ffn,
        });
    }

    let mut pooler = Vec::new();
    m.pooler_w = m.push_param(
        "pooler.w",
        &[d, d],
        init_normal(&mut backbone_rng, d * d, config.init_std),
        &mut pooler,
    );
    m.pooler_b = m.push_param("pooler.b", &[d], vec![0.0; d], &mut pooler);
    m.push_group("pooler", GroupKind::Backbone, pooler);

    Ok(m)
}

fn init_normal(rng_: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng::trunc_normal(rng_, std)).collect()
}

impl Model {
    fn push_param(
        &mut self,
        name: &str,
        shape: &[usize],
        data: Vec<f64>,
        group: &mut Vec<ParamId>,
    ) -> ParamId {
        let id = ParamId(self.params.len());
        let n = data.len();
        debug_assert_eq!(shape.iter().product::<usize>(), n);
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad: vec![0.0; n],
        });
        group.push(id);
        id
    }

    fn push_adapter(
        &mut self,
        prefix: &str,
        ac: &AdapterConfig,
        d: usize,
        rng_: &mut ChaCha8Rng,
        group: &mut Vec<ParamId>,
    ) -> AdapterLayer {
        let mdim = ac.bottleneck_dim;
        let down_data = (0..d * mdim)
            .map(|_| rng::trunc_normal(rng_, ac.down_init_std))
            .collect();
        let down_w = self.push_param(&format!("{prefix}.down_w"), &[d, mdim], down_data, group);
        let down_b = self.push_param(&format!("{prefix}.down_b"), &[mdim], vec![0.0; mdim], group);
        // zero-initialized up-projection: the adapter starts as the identity
        let up_w = self.push_param(&format!("{prefix}.up_w"), &[mdim, d], vec![0.0; mdim * d], group);
        let up_b = self.push_param(&format!("{prefix}.up_b"), &[d], vec![0.0; d], group);
        AdapterLayer {
            down_w,
            down_b,
            up_w,
            up_b,
        }
    }

    fn push_group(&mut self, name: &str, kind: GroupKind, params: Vec<ParamId>) {
        self.groups.push(ParamGroup {
            name: name.to_string(),
            kind,
            params,
            trainable: true,
        });
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.classifier.as_ref().map(|c| c.n_classes)
    }

    pub fn has_mlm_head(&self) -> bool {
        self.mlm_bias.is_some()
    }

    pub fn classifier_params(&self) -> Option<(ParamId, ParamId)> {
        self.classifier.as_ref().map(|c| (c.w, c.b))
    }

    pub fn mlm_bias_param(&self) -> Option<ParamId> {
        self.mlm_bias
    }

    pub fn token_embedding_param(&self) -> ParamId {
        self.tok_emb
    }

    /// Attach (or re-initialize) the classification head. Fine-tuning calls
    /// this at phase start so the head never carries state across phases.
    pub fn attach_classifier(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        if n_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let d = self.config.d_model;
        let mut head_rng = rng::stream_rng(seed, rng::stream::HEAD_INIT);
        let w_data = init_normal(&mut head_rng, d * n_classes, self.config.init_std);
        match &self.classifier {
            Some(c) => {
                let (wid, bid) = (c.w, c.b);
                {
                    let w = &mut self.params[wid.0];
                    w.shape = vec![d, n_classes];
                    w.data = w_data;
                    w.grad = vec![0.0; d * n_classes];
                }
                {
                    let b = &mut self.params[bid.0];
                    b.shape = vec![n_classes];
                    b.data = vec![0.0; n_classes];
                    b.grad = vec![0.0; n_classes];
                }
                self.classifier = Some(ClassifierLayout {
                    w: wid,
                    b: bid,
                    n_classes,
                });
            }
            None => {
                let mut group = Vec::new();
                let w = self.push_param("classifier.w", &[d, n_classes], w_data, &mut group);
                let b = self.push_param("classifier.b", &[n_classes], vec![0.0; n_classes], &mut group);
                self.push_group("classifier", GroupKind::Head, group);
                self.classifier = Some(ClassifierLayout { w, b, n_classes });
            }
        }
        Ok(())
    }

    /// Attach the masked-language-model head: a trainable bias over the
    /// vocabulary on top of logits tied to the token embedding.
    pub fn attach_mlm_head(&mut self) {
        if self.mlm_bias.is_some() {
            return;
        }
        let v = self.config.vocab_size;
        let mut group = Vec::new();
        let b = self.push_param("mlm_head.bias", &[v], vec![0.0; v], &mut group);
        self.push_group("mlm_head", GroupKind::Head, group);
        self.mlm_bias = Some(b);
    }

    /// Set groups matching the `|`-separated glob pattern trainable and all
    /// others frozen. Returns the number of trainable scalar parameters.
    /// Zero matches is allowed and freezes everything.
    pub fn set_trainable(&mut self, pattern: &str) -> usize {
        let mut count = 0;
        for gi in 0..self.groups.len() {
            let on = pattern_matches(pattern, &self.groups[gi].name);
            self.groups[gi].trainable = on;
            if on {
                count += self.groups[gi]
                    .params
                    .iter()
                    .map(|p| self.params[p.0].numel())
                    .sum::<usize>();
            }
        }
        count
    }

    pub fn trainable_param_count(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| g.trainable)
            .flat_map(|g| g.params.iter())
            .map(|p| self.params[p.0].numel())
            .sum()
    }

    /// Adapter parameters as a fraction of all non-head parameters
    /// (backbone + adapters). 0.0 when adapters are off.
    pub fn adapter_param_fraction(&self) -> f64 {
        let mut adapter = 0usize;
        let mut total = 0usize;
        for g in &self.groups {
            let n: usize = g.params.iter().map(|p| self.params[p.0].numel()).sum();
            match g.kind {
                GroupKind::Adapter => {
                    adapter += n;
                    total += n;
                }
                GroupKind::Backbone => total += n,
                GroupKind::Head => {}
            }
        }
        if total == 0 {
            0.0
        } else {
            adapter as f64 / total as f64
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Raw little-endian bytes of every parameter in groups accepted by
    /// `pred`, in group order. Used for byte-exact freezing checks.
    pub fn param_bytes_where(&self, pred: impl Fn(&ParamGroup) -> bool) -> Vec<u8> {
        let mut out = Vec::new();
        for g in self.groups.iter().filter(|g| pred(g)) {
            for pid in &g.params {
                for v in &self.params[pid.0].data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn backbone_bytes(&self) -> Vec<u8> {
        self.param_bytes_where(|g| g.kind == GroupKind::Backbone)
    }

    // ── Forward ─────────────────────────────────────────────────────────

    /// Run the encoder. `dropout_rng: Some(..)` enables dropout (training
    /// mode); `None` runs deterministic evaluation. Masked positions receive
    /// a large negative attention logit so they contribute nothing after
    /// softmax.
    pub fn forward(
        &self,
        batch: &TokenBatch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        self.forward_probed(batch, dropout_rng, false)
    }

    /// Like [`Model::forward`] but optionally computing gradients for frozen
    /// groups too (analysis runs that want telemetry on frozen layers).
    pub fn forward_probed(
        &self,
        batch: &TokenBatch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        probe_frozen_grads: bool,
    ) -> Result<ForwardPass> {
        let (b, s, d) = (batch.batch, batch.seq, self.config.d_model);
        if s > self.config.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {s} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let mut g = Graph::new();

        // bind every parameter as a leaf; trainability controls grad flow
        let trainable_of: Vec<bool> = {
            let mut t = vec![false; self.params.len()];
            for group in &self.groups {
                for pid in &group.params {
                    t[pid.0] = group.trainable || probe_frozen_grads;
                }
            }
            t
        };
        let mut param_nodes = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let node = g.leaf(&p.shape, p.data.clone(), trainable_of[i])?;
            param_nodes.push(node);
        }
        let pn = |pid: ParamId| param_nodes[pid.0];

        // embeddings + positions
        let tok = g.embedding(pn(self.tok_emb), &batch.ids, &[b, s])?;
        let pos_ids: Vec<usize> = (0..s).collect();
        let pos = g.embedding(pn(self.pos_emb), &pos_ids, &[s])?;
        let summed = g.add(tok, pos)?;
        let mut x = g.layer_norm(summed, pn(self.emb_ln_g), pn(self.emb_ln_b), LAYER_NORM_EPS)?;
        x = self.maybe_dropout(&mut g, x, &mut dropout_rng)?;

        // additive attention mask [b, 1, 1, s]
        let mask_data: Vec<f64> = batch
            .mask
            .iter()
            .map(|m| if *m == 1 { 0.0 } else { ATTN_MASK_VALUE })
            .collect();
        let attn_mask = g.constant(&[b, 1, 1, s], mask_data)?;

        let heads = self.config.n_heads;
        let dh = d / heads;
        for block in &self.blocks {
            // self-attention
            let flat = g.reshape(x, &[b * s, d])?;
            let q = linear(&mut g, flat, pn(block.wq), pn(block.bq))?;
            let k = linear(&mut g, flat, pn(block.wk), pn(block.bk))?;
            let v = linear(&mut g, flat, pn(block.wv), pn(block.bv))?;
            let split = |g: &mut Graph, t: NodeId| -> Result<NodeId> {
                let r = g.reshape(t, &[b, s, heads, dh])?;
                g.swap_axes_1_2(r) // [b, heads, s, dh]
            };
            let qh = split(&mut g, q)?;
            let kh = split(&mut g, k)?;
            let vh = split(&mut g, v)?;
            let kt = g.transpose_last2(kh)?;
            let scores = g.bmm(qh, kt)?;
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = g.add(scaled, attn_mask)?;
            let probs = g.softmax(masked, 3)?;
            let ctx = g.bmm(probs, vh)?;
            let merged = g.swap_axes_1_2(ctx)?;
            let ctx_flat = g.reshape(merged, &[b * s, d])?;
            let attn_out = linear(&mut g, ctx_flat, pn(block.wo), pn(block.bo))?;
            let mut attn_out = g.reshape(attn_out, &[b, s, d])?;
            attn_out = self.maybe_dropout(&mut g, attn_out, &mut dropout_rng)?;
            if let Some(a) = &block.adapter_attn {
                attn_out = apply_adapter(
                    &mut g,
                    attn_out,
                    pn(a.down_w),
                    pn(a.down_b),
                    pn(a.up_w),
                    pn(a.up_b),
                    self.adapter_nonlinearity(),
                )?;
            }
            let res1 = g.add(x, attn_out)?;
            x = g.layer_norm(res1, pn(block.ln1_g), pn(block.ln1_b), LAYER_NORM_EPS)?;

            // feed-forward
            let flat2 = g.reshape(x, &[b * s, d])?;
            let h1 = linear(&mut g, flat2, pn(block.w1), pn(block.b1))?;
            let h1a = g.activation(h1, Activation::Gelu);
            let h2 = linear(&mut g, h1a, pn(block.w2), pn(block.b2))?;
            let mut ffn_out = g.reshape(h2, &[b, s, d])?;
            ffn_out = self.maybe_dropout(&mut g, ffn_out, &mut dropout_rng)?;
            if let Some(a) = &block.adapter_ffn {
                ffn_out = apply_adapter(
                    &mut g,
                    ffn_out,
                    pn(a.down_w),
                    pn(a.down_b),
                    pn(a.up_w),
                    pn(a.up_b),
                    self.adapter_nonlinearity(),
                )?;
            }
            let res2 = g.add(x, ffn_out)?;
            x = g.layer_norm(res2, pn(block.ln2_g), pn(block.ln2_b), LAYER_NORM_EPS)?;
        }

        // pooled output: tanh-affine of the first token
        let first = g.select_axis1(x, 0)?;
        let pooled_pre = linear(&mut g, first, pn(self.pooler_w), pn(self.pooler_b))?;
        let pooled = g.activation(pooled_pre, Activation::Tanh);

        Ok(ForwardPass {
            graph: g,
            sequence_output: x,
            pooled,
            param_nodes,
            batch: b,
            seq: s,
        })
    }

    fn adapter_nonlinearity(&self) -> Activation {
        self.config
            .adapter
            .as_ref()
            .map(|a| a.nonlinearity)
            .unwrap_or(Activation::Gelu)
    }

    fn maybe_dropout(
        &self,
        g: &mut Graph,
        x: NodeId,
        rng_: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        match rng_ {
            Some(r) if self.config.dropout_rate > 0.0 => g.dropout(x, self.config.dropout_rate, r),
            _ => Ok(x),
        }
    }
}

/// `x @ w + b` on a 2-d `x`.
fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let mm = g.matmul(x, w)?;
    g.add(mm, b)
}

/// Residual bottleneck adapter on the graph:
/// `h + up(nonlinearity(down(h)))`, preserving `h`'s shape. A freshly built
/// adapter has a zero up-projection, so this is the identity at init.
pub fn apply_adapter(
    g: &mut Graph,
    h: NodeId,
    down_w: NodeId,
    down_b: NodeId,
    up_w: NodeId,
    up_b: NodeId,
    nonlinearity: Activation,
) -> Result<NodeId> {
    let shape = g.shape(h).to_vec();
    let d = *shape
        .last()
        .ok_or_else(|| Error::Dimension("adapter input needs at least one dimension".into()))?;
    if g.shape(down_w)[0] != d {
        return Err(Error::Dimension(format!(
            "adapter down projection {:?} does not accept feature size {d}",
            g.shape(down_w)
        )));
    }
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(h, &[rows, d])?;
    let down = linear(g, flat, down_w, down_b)?;
    let act = g.activation(down, nonlinearity);
    let up = linear(g, act, up_w, up_b)?;
    let restored = g.reshape(up, &shape)?;
    g.add(h, restored)
}

/// `|`-separated glob alternation; `*` matches any (possibly empty) substring.
pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    pattern.split('|').any(|p| glob_match(p.trim(), name))
}

fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    // segments between wildcards must appear in order
    let first = parts[0];
    let last = parts[parts.len() - 1];
    if !name.starts_with(first) {
        return false;
    }
    let mut pos = first.len();
    for part in &parts[1..parts.len() - 1] {
        if part.is_empty() {
            continue;
        }
        match name[pos..].find(part) {
            Some(at) => pos = pos + at + part.len(),
            None => return false,
        }
    }
    if last.is_empty() {
        true
    } else {
        name.len() >= pos + last.len() && name.ends_with(last)
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

const CKPT_MAGIC: &str = "abench-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct CkptParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload that follows the header.
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct CkptGroupEntry {
    name: String,
    kind: GroupKind,
    trainable: bool,
    params: Vec<CkptParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    format: String,
    config: ModelConfig,
    n_classes: Option<usize>,
    has_mlm_head: bool,
    groups: Vec<CkptGroupEntry>,
}

impl Model {
    /// Write a checkpoint: an 8-byte little-endian header length, a JSON
    /// header (config, group names, shapes, byte offsets), then raw
    /// little-endian f64 parameter blocks. Round-trips bit-exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.save_checkpoint_where(path, |_| true)
    }

    /// Checkpoint only the groups accepted by `pred` (e.g. backbone
    /// snapshots). Partial checkpoints can be compared byte-for-byte but only
    /// full ones can be loaded back into a model.
    pub fn save_checkpoint_where(
        &self,
        path: &Path,
        pred: impl Fn(&ParamGroup) -> bool,
    ) -> Result<()> {
        let mut groups = Vec::new();
        let mut offset = 0u64;
        for g in self.groups.iter().filter(|g| pred(g)) {
            let mut entries = Vec::new();
            for pid in &g.params {
                let p = &self.params[pid.0];
                let len = (p.data.len() * 8) as u64;
                entries.push(CkptParamEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                    len,
                });
                offset += len;
            }
            groups.push(CkptGroupEntry {
                name: g.name.clone(),
                kind: g.kind,
                trainable: g.trainable,
                params: entries,
            });
        }
        let header = CkptHeader {
            format: CKPT_MAGIC.to_string(),
            config: self.config.clone(),
            n_classes: self.n_classes(),
            has_mlm_head: self.has_mlm_head(),
            groups,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for g in self.groups.iter().filter(|g| pred(g)) {
            for pid in &g.params {
                for v in &self.params[pid.0].data {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Load a full checkpoint written by [`Model::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: CkptHeader = serde_json::from_slice(&header_bytes)?;
        if header.format != CKPT_MAGIC {
            return Err(Error::Data(format!(
                "unrecognized checkpoint format '{}'",
                header.format
            )));
        }
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;

        // rebuild the structure deterministically, then overwrite values
        let mut model = build_model(&header.config, 0)?;
        if header.has_mlm_head {
            model.attach_mlm_head();
        }
        if let Some(nc) = header.n_classes {
            model.attach_classifier(nc, 0)?;
        }
        let mut by_name: HashMap<String, (u64, u64, Vec<usize>)> = HashMap::new();
        let mut trainable_by_group: HashMap<String, bool> = HashMap::new();
        for g in &header.groups {
            trainable_by_group.insert(g.name.clone(), g.trainable);
            for p in &g.params {
                by_name.insert(p.name.clone(), (p.offset, p.len, p.shape.clone()));
            }
        }
        for p in &mut model.params {
            let (offset, len, shape) = by_name.remove(&p.name).ok_or_else(|| {
                Error::Data(format!("checkpoint is missing parameter '{}'", p.name))
            })?;
            if shape != p.shape {
                return Err(Error::Data(format!(
                    "checkpoint shape {:?} for '{}' does not match model shape {:?}",
                    shape, p.name, p.shape
                )));
            }
            let (start, end) = (offset as usize, (offset + len) as usize);
            if end > payload.len() || len as usize != p.data.len() * 8 {
                return Err(Error::Data(format!(
                    "checkpoint payload truncated for parameter '{}'",
                    p.name
                )));
            }
            for (i, chunk) in payload[start..end].chunks_exact(8).enumerate() {
                p.data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if !by_name.is_empty() {
            let extra: Vec<&String> = by_name.keys().collect();
            return Err(Error::Data(format!(
                "checkpoint has parameters unknown to this config: {extra:?}"
            )));
        }
        for g in &mut model.groups {
            if let Some(t) = trainable_by_group.get(&g.name) {
                g.trainable = *t;
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_config(adapter: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 50,
            max_seq_len: 16,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            dropout_rate: 0.1,
            init_std: 0.02,
            adapter: adapter.then(|| AdapterConfig {
                bottleneck_dim: 4,
                nonlinearity: Activation::Gelu,
                down_init_std: 0.2,
            }),
        }
    }

    fn batch(b: usize, s: usize, vocab: usize) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let ids: Vec<usize> = (0..b * s).map(|_| rng.gen_range(5..vocab)).collect();
        TokenBatch::new(b, s, ids, vec![1; b * s]).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny_config(true);
        let a = build_model(&cfg, 42).unwrap();
        let b = build_model(&cfg, 42).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert!(pa
                .data
                .iter()
                .zip(&pb.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn no_adapter_build_has_no_adapter_groups() {
        let m = build_model(&tiny_config(false), 1).unwrap();
        assert!(m.groups().iter().all(|g| g.kind != GroupKind::Adapter));
        assert!(!m.groups().iter().any(|g| g.name.ends_with(".adapter")));
        assert_eq!(m.adapter_param_fraction(), 0.0);
    }

    #[test]
    fn adapter_param_count_closed_form() {
        // d_model=64, bottleneck=8, n_layers=2:
        // 2 blocks x 2 adapters x (64*8+8 + 8*64+64) = 4384
        let cfg = ModelConfig {
            vocab_size: 100,
            max_seq_len: 16,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            dropout_rate: 0.0,
            init_std: 0.02,
            adapter: Some(AdapterConfig {
                bottleneck_dim: 8,
                nonlinearity: Activation::Gelu,
                down_init_std: 0.2,
            }),
        };
        let m = build_model(&cfg, 0).unwrap();
        let counted: usize = m
            .groups()
            .iter()
            .filter(|g| g.kind == GroupKind::Adapter)
            .flat_map(|g| g.params.iter())
            .map(|p| m.param(*p).numel())
            .sum();
        assert_eq!(counted, 4384);
        assert_eq!(counted, 2 * 2 * (64 * 8 + 8 + 8 * 64 + 64));
    }

    #[test]
    fn invalid_configs_name_the_constraint() {
        let mut cfg = tiny_config(false);
        cfg.n_heads = 3; // 16 % 3 != 0
        let err = build_model(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");

        let mut cfg = tiny_config(true);
        cfg.adapter.as_mut().unwrap().bottleneck_dim = 16;
        let err = build_model(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("bottleneck"), "{err}");
    }

    #[test]
    fn backbone_identical_with_and_without_adapter() {
        let with = build_model(&tiny_config(true), 7).unwrap();
        let without = build_model(&tiny_config(false), 7).unwrap();
        assert_eq!(with.backbone_bytes(), without.backbone_bytes());
    }

    #[test]
    fn fresh_adapter_is_identity_and_twin_logits_match() {
        let with = build_model(&tiny_config(true), 5).unwrap();
        let without = build_model(&tiny_config(false), 5).unwrap();
        let b = batch(2, 8, 50);
        let fw = with.forward(&b, None).unwrap();
        let fo = without.forward(&b, None).unwrap();
        let a = fw.graph.data(fw.sequence_output);
        let c = fo.graph.data(fo.sequence_output);
        assert!(a.iter().zip(c).all(|(x, y)| x.to_bits() == y.to_bits()));
        let pa = fw.graph.data(fw.pooled);
        let pc = fo.graph.data(fo.pooled);
        assert!(pa.iter().zip(pc).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn apply_adapter_hand_trace() {
        // bottleneck=1 with hand-set weights on a 1x1x2 input:
        // down = 1*0.5 + 2*(-1.0) + 0.25 = -1.25
        // relu(-1.25) = 0 -> up = 0*uw + ub = [0.3, -0.7]
        // out = h + [0.3, -0.7] = [1.3, 1.3]
        let mut g = Graph::new();
        let h = g.constant(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let dw = g.constant(&[2, 1], vec![0.5, -1.0]).unwrap();
        let db = g.constant(&[1], vec![0.25]).unwrap();
        let uw = g.constant(&[1, 2], vec![0.9, 1.1]).unwrap();
        let ub = g.constant(&[2], vec![0.3, -0.7]).unwrap();
        let out = apply_adapter(&mut g, h, dw, db, uw, ub, Activation::Relu).unwrap();
        assert_eq!(g.shape(out), &[1, 1, 2]);
        assert_eq!(g.data(out), &[1.0 + 0.3, 2.0 - 0.7]);
    }

    #[test]
    fn apply_adapter_grad_flows_through_both_paths() {
        // residual + adapter path gradient vs finite differences
        let h0 = [0.4, -0.2, 0.8, 0.1];
        let f = |h: &[f64]| -> f64 {
            let mut g = Graph::new();
            let hn = g.constant(&[2, 2], h.to_vec()).unwrap();
            let dw = g.constant(&[2, 1], vec![0.7, -0.3]).unwrap();
            let db = g.constant(&[1], vec![0.1]).unwrap();
            let uw = g.constant(&[1, 2], vec![0.5, 0.6]).unwrap();
            let ub = g.constant(&[2], vec![0.0, 0.0]).unwrap();
            let out = apply_adapter(&mut g, hn, dw, db, uw, ub, Activation::Gelu).unwrap();
            let s = g.sum_all(out);
            g.data(s)[0]
        };
        let mut g = Graph::new();
        let hn = g.leaf(&[2, 2], h0.to_vec(), true).unwrap();
        let dw = g.constant(&[2, 1], vec![0.7, -0.3]).unwrap();
        let db = g.constant(&[1], vec![0.1]).unwrap();
        let uw = g.constant(&[1, 2], vec![0.5, 0.6]).unwrap();
        let ub = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let out = apply_adapter(&mut g, hn, dw, db, uw, ub, Activation::Gelu).unwrap();
        let loss = g.sum_all(out);
        g.backward(loss).unwrap();
        let grad = g.grad(hn).unwrap().to_vec();
        for i in 0..4 {
            let mut hp = h0;
            let mut hm = h0;
            hp[i] += 1e-5;
            hm[i] -= 1e-5;
            let num = (f(&hp) - f(&hm)) / 2e-5;
            assert!(
                (grad[i] - num).abs() / num.abs().max(1e-8) < 1e-4,
                "coord {i}: {} vs {num}",
                grad[i]
            );
        }
    }

    #[test]
    fn forward_shapes_and_batch_independence() {
        let m = build_model(&tiny_config(true), 11).unwrap();
        let b = batch(2, 16, 50);
        let fp = m.forward(&b, None).unwrap();
        assert_eq!(fp.graph.shape(fp.sequence_output), &[2, 16, 16]);
        assert_eq!(fp.graph.shape(fp.pooled), &[2, 16]);

        // identical rows in, identical rows out
        let ids: Vec<usize> = (0..8).map(|i| 5 + (i % 20)).collect();
        let mut both = ids.clone();
        both.extend_from_slice(&ids);
        let tb = TokenBatch::new(2, 8, both, vec![1; 16]).unwrap();
        let fp = m.forward(&tb, None).unwrap();
        let out = fp.graph.data(fp.sequence_output);
        let half = out.len() / 2;
        assert_eq!(&out[..half], &out[half..]);
    }

    #[test]
    fn padding_does_not_affect_other_positions() {
        let m = build_model(&tiny_config(true), 13).unwrap();
        let ids: Vec<usize> = vec![2, 7, 9, 11, 3]; // CLS w w w SEP
        let short = TokenBatch::new(1, 5, ids.clone(), vec![1; 5]).unwrap();
        let mut padded_ids = ids.clone();
        padded_ids.extend_from_slice(&[0, 0, 0]);
        let mut mask = vec![1u8; 5];
        mask.extend_from_slice(&[0, 0, 0]);
        let padded = TokenBatch::new(1, 8, padded_ids, mask).unwrap();

        let fs = m.forward(&short, None).unwrap();
        let fpd = m.forward(&padded, None).unwrap();
        let a = fs.graph.data(fs.sequence_output); // [1,5,16]
        let b = fpd.graph.data(fpd.sequence_output); // [1,8,16]
        for i in 0..5 * 16 {
            assert!(
                (a[i] - b[i]).abs() < 1e-10,
                "position {} differs: {} vs {}",
                i / 16,
                a[i],
                b[i]
            );
        }
    }

    #[test]
    fn forward_deterministic_given_dropout_seed() {
        let m = build_model(&tiny_config(true), 17).unwrap();
        let b = batch(2, 8, 50);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fp = m.forward(&b, Some(&mut rng)).unwrap();
            fp.graph.data(fp.sequence_output).to_vec()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn token_out_of_range_is_a_data_error() {
        let m = build_model(&tiny_config(false), 1).unwrap();
        let b = TokenBatch::new(1, 2, vec![2, 50], vec![1, 1]).unwrap();
        assert!(matches!(m.forward(&b, None), Err(Error::Data(_))));
    }

    #[test]
    fn set_trainable_patterns() {
        let mut m = build_model(&tiny_config(true), 1).unwrap();
        m.attach_mlm_head();
        m.attach_classifier(2, 1).unwrap();

        let n_all = m.set_trainable("*");
        let total: usize = m.params().iter().map(|p| p.numel()).sum();
        assert_eq!(n_all, total);

        let n_adapter = m.set_trainable("*.adapter|classifier|mlm_head");
        assert!(n_adapter < n_all);
        for g in m.groups() {
            let expect = g.kind != GroupKind::Backbone;
            assert_eq!(g.trainable, expect, "group {}", g.name);
        }

        assert_eq!(m.set_trainable("no_such_group"), 0);
        assert!(m.groups().iter().all(|g| !g.trainable));
    }

    #[test]
    fn adapter_fraction_by_enumeration() {
        let cfg = ModelConfig {
            vocab_size: 1000,
            max_seq_len: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            dropout_rate: 0.0,
            init_std: 0.02,
            adapter: Some(AdapterConfig {
                bottleneck_dim: 8,
                nonlinearity: Activation::Gelu,
                down_init_std: 0.2,
            }),
        };
        let m = build_model(&cfg, 0).unwrap();
        let mut adapter = 0usize;
        let mut non_head = 0usize;
        for g in m.groups() {
            let n: usize = g.params.iter().map(|p| m.param(*p).numel()).sum();
            if g.kind == GroupKind::Adapter {
                adapter += n;
            }
            if g.kind != GroupKind::Head {
                non_head += n;
            }
        }
        let expect = adapter as f64 / non_head as f64;
        assert_eq!(m.adapter_param_fraction(), expect);
        assert!(expect > 0.0 && expect < 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut m = build_model(&tiny_config(true), 23).unwrap();
        m.attach_mlm_head();
        m.attach_classifier(3, 23).unwrap();
        m.set_trainable("*.adapter|classifier|mlm_head");
        m.save_checkpoint(&path).unwrap();
        let loaded = Model::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.n_classes(), Some(3));
        assert!(loaded.has_mlm_head());
        for (a, b) in m.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert!(a
                .data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (ga, gb) in m.groups().iter().zip(loaded.groups()) {
            assert_eq!(ga.trainable, gb.trainable);
        }
    }

    #[test]
    fn glob_patterns() {
        assert!(pattern_matches("*", "anything"));
        assert!(pattern_matches("*.adapter", "block_3.adapter"));
        assert!(!pattern_matches("*.adapter", "block_3.attention"));
        assert!(pattern_matches("block_0.*|pooler", "pooler"));
        assert!(pattern_matches("block_0.*|pooler", "block_0.ffn"));
        assert!(!pattern_matches("block_0.*|pooler", "block_1.ffn"));
        assert!(pattern_matches("exact", "exact"));
        assert!(!pattern_matches("exact", "exactly"));
    }
}
