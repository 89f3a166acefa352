//! Decoder-only transformer that pools the final hidden state at EOS.
//!
//! Weights use the row-vector convention `y = x · W`, so a projection from
//! `a` to `b` channels is stored as an `a × b` matrix: its rows index input
//! channels and its columns index output channels.

mod checkpoint;
mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Graph, NodeId, Scalar, Tensor, RMS_EPS};

pub(crate) use checkpoint::{read_bundle, write_bundle};
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ManifestEntry};
pub use tokenizer::{ByteTokenizer, TokenId, BYTE_VOCAB_SIZE, EOS, PAD};

/// Standard deviation of the normal initializer.
pub const INIT_STD: f64 = 0.02;

fn default_max_seq_len() -> usize {
    512
}

fn default_rope_base() -> u64 {
    10_000
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub mlp_intermediate_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: u64,
}

impl ModelConfig {
    /// A byte-vocabulary config for desk-scale runs.
    pub fn toy(hidden: usize, mlp: usize, layers: usize, heads: usize, kv_heads: usize, head_dim: usize) -> Self {
        ModelConfig {
            hidden_size: hidden,
            mlp_intermediate_size: mlp,
            num_layers: layers,
            num_heads: heads,
            num_kv_heads: kv_heads,
            head_dim,
            vocab_size: BYTE_VOCAB_SIZE,
            max_seq_len: 128,
            rope_base: default_rope_base(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("hidden_size", self.hidden_size),
            ("mlp_intermediate_size", self.mlp_intermediate_size),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::Config(format!(
                "num_heads {} is not divisible by num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head_dim {} must be even for rotary embedding", self.head_dim)));
        }
        if self.rope_base == 0 {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        Ok(())
    }

    pub fn q_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub embedding: u64,
    pub non_embedding: u64,
    pub total: u64,
}

/// Exact parameter count from the config alone.
pub fn param_count(config: &ModelConfig) -> ParamCount {
    let h = config.hidden_size as u64;
    let q = config.q_width() as u64;
    let kv = config.kv_width() as u64;
    let mlp = config.mlp_intermediate_size as u64;
    let hd = config.head_dim as u64;
    let per_layer = h * q + 2 * h * kv + q * h + 3 * h * mlp + 2 * h + 2 * hd;
    let embedding = config.vocab_size as u64 * h;
    let non_embedding = config.num_layers as u64 * per_layer + h;
    ParamCount {
        embedding,
        non_embedding,
        total: embedding + non_embedding,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<F: Scalar = f32> {
    pub attn_norm: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub q_norm: Tensor<F>,
    pub k_norm: Tensor<F>,
    pub mlp_norm: Tensor<F>,
    pub w_gate: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
}

pub(crate) const LAYER_TENSOR_NAMES: [&str; 11] = [
    "attn_norm", "wq", "wk", "wv", "wo", "q_norm", "k_norm", "mlp_norm", "w_gate", "w_up", "w_down",
];

impl<F: Scalar> LayerWeights<F> {
    fn tensors(&self) -> [&Tensor<F>; 11] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.q_norm,
            &self.k_norm,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 11] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.q_norm,
            &mut self.k_norm,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Expected `(name, shape)` of every tensor, in canonical order.
pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, q, kv, mlp, hd) = (
        config.hidden_size,
        config.q_width(),
        config.kv_width(),
        config.mlp_intermediate_size,
        config.head_dim,
    );
    let mut out = vec![("embed_tokens".to_string(), vec![config.vocab_size, h])];
    for l in 0..config.num_layers {
        let shapes = [
            vec![h],
            vec![h, q],
            vec![h, kv],
            vec![h, kv],
            vec![q, h],
            vec![hd],
            vec![hd],
            vec![h],
            vec![h, mlp],
            vec![h, mlp],
            vec![mlp, h],
        ];
        for (name, shape) in LAYER_TENSOR_NAMES.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("final_norm".to_string(), vec![h]));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel<F: Scalar = f32> {
    pub config: ModelConfig,
    pub embed_tokens: Tensor<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub final_norm: Tensor<F>,
}

/// Graph handles for every parameter of a model, in canonical order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Substitutes the node used for parameter `index` (canonical order).
    pub fn replace(&mut self, index: usize, node: NodeId) {
        self.ids[index] = node;
    }

    fn embed(&self) -> NodeId {
        self.ids[0]
    }

    fn layer(&self, l: usize, slot: usize) -> NodeId {
        self.ids[1 + l * LAYER_TENSOR_NAMES.len() + slot]
    }

    fn final_norm(&self) -> NodeId {
        *self.ids.last().expect("final norm is always bound")
    }
}

/// Nodes of one forward pass that pruning and pooling read from.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Residual stream after each block.
    pub block_outputs: Vec<NodeId>,
    /// `silu(gate) · up` per layer.
    pub mlp_acts: Vec<NodeId>,
    /// Final-normed hidden states (`seq_len × hidden`).
    pub hidden: NodeId,
}

impl<F: Scalar> EmbeddingModel<F> {
    /// Random init: N(0, 0.02) weights, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |shape: Vec<usize>| -> Tensor<F> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| F::of(normal.sample(&mut rng))).collect();
            Tensor::new(shape, data).expect("shape matches data")
        };
        let ones = |n: usize| Tensor::filled(vec![n], F::one());
        let (h, q, kv, mlp, hd) = (
            config.hidden_size,
            config.q_width(),
            config.kv_width(),
            config.mlp_intermediate_size,
            config.head_dim,
        );
        let embed_tokens = draw(vec![config.vocab_size, h]);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: ones(h),
                wq: draw(vec![h, q]),
                wk: draw(vec![h, kv]),
                wv: draw(vec![h, kv]),
                wo: draw(vec![q, h]),
                q_norm: ones(hd),
                k_norm: ones(hd),
                mlp_norm: ones(h),
                w_gate: draw(vec![h, mlp]),
                w_up: draw(vec![h, mlp]),
                w_down: draw(vec![mlp, h]),
            })
            .collect();
        Ok(EmbeddingModel {
            final_norm: ones(h),
            config,
            embed_tokens,
            layers,
        })
    }

    /// Assembles a model from tensors in canonical order, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let layout = tensor_layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let embed_tokens = it.next().expect("length checked");
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let mut next = || it.next().expect("length checked");
            layers.push(LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                q_norm: next(),
                k_norm: next(),
                mlp_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            });
        }
        let final_norm = it.next().expect("length checked");
        Ok(EmbeddingModel {
            config,
            embed_tokens,
            layers,
            final_norm,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![&self.embed_tokens];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.final_norm);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.embed_tokens];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        tensor_layout(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tensors())
            .collect()
    }

    /// Number of allocated parameter values.
    pub fn allocated_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> EmbeddingModel<G> {
        EmbeddingModel::from_tensors(self.config.clone(), self.tensors().into_iter().map(Tensor::cast).collect())
            .expect("casting preserves shapes")
    }

    /// Adds every parameter to `graph`, trainable or frozen.
    pub fn bind<'p>(&'p self, graph: &mut Graph<'p, F>, trainable: bool) -> BoundParams {
        let ids = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { graph.param(t) } else { graph.frozen(t) })
            .collect();
        BoundParams { ids }
    }

    /// Adds copies of every parameter as constants, so the graph does not
    /// borrow the model.
    pub fn bind_owned(&self, graph: &mut Graph<'_, F>) -> BoundParams {
        let ids = self.tensors().into_iter().map(|t| graph.constant(t.clone())).collect();
        BoundParams { ids }
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some((position, &id)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                position,
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass of one sequence into `graph`.
    pub fn forward_graph(&self, graph: &mut Graph<'_, F>, params: &BoundParams, tokens: &[TokenId]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let eps = F::of(RMS_EPS);
        let hd = cfg.head_dim;
        let group = cfg.num_heads / cfg.num_kv_heads;
        let attn_scale = F::of(1.0 / (hd as f64).sqrt());
        let base = cfg.rope_base as f64;
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();

        let mut x = graph.select_rows(params.embed(), &rows)?;
        let mut block_outputs = Vec::with_capacity(cfg.num_layers);
        let mut mlp_acts = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = |slot: usize| params.layer(l, slot);
            let h = graph.rms_norm(x, p(0), eps)?;
            let q = graph.matmul(h, p(1))?;
            let k = graph.matmul(h, p(2))?;
            let v = graph.matmul(h, p(3))?;

            let mut keys_t = Vec::with_capacity(cfg.num_kv_heads);
            let mut values = Vec::with_capacity(cfg.num_kv_heads);
            for kv in 0..cfg.num_kv_heads {
                let kh = graph.slice_cols(k, kv * hd, hd)?;
                let kh = graph.rms_norm(kh, p(6), eps)?;
                let kh = graph.rope(kh, hd, base, 0)?;
                keys_t.push(graph.transpose(kh)?);
                values.push(graph.slice_cols(v, kv * hd, hd)?);
            }
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for head in 0..cfg.num_heads {
                let kv = head / group;
                let qh = graph.slice_cols(q, head * hd, hd)?;
                let qh = graph.rms_norm(qh, p(5), eps)?;
                let qh = graph.rope(qh, hd, base, 0)?;
                let scores = graph.matmul(qh, keys_t[kv])?;
                let scores = graph.scale(scores, attn_scale)?;
                let probs = graph.softmax_rows(scores, true)?;
                heads.push(graph.matmul(probs, values[kv])?);
            }
            let attn = if heads.len() == 1 { heads[0] } else { graph.concat_cols(&heads)? };
            let attn = graph.matmul(attn, p(4))?;
            x = graph.add(x, attn)?;

            let h = graph.rms_norm(x, p(7), eps)?;
            let gate = graph.matmul(h, p(8))?;
            let up = graph.matmul(h, p(9))?;
            let gate = graph.silu(gate)?;
            let act = graph.mul(gate, up)?;
            mlp_acts.push(act);
            let down = graph.matmul(act, p(10))?;
            x = graph.add(x, down)?;
            block_outputs.push(x);
        }
        let hidden = graph.rms_norm(x, params.final_norm(), eps)?;
        Ok(ForwardTrace {
            block_outputs,
            mlp_acts,
            hidden,
        })
    }

    /// Final hidden states, `seq_len × hidden_size`.
    pub fn forward_hidden(&self, tokens: &[TokenId]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let trace = self.forward_graph(&mut g, &params, tokens)?;
        Ok(g.value(trace.hidden).clone())
    }

    /// Records the un-normalized EOS state (`1 × hidden`) of a sequence whose
    /// only EOS is its final token.
    pub fn eos_state_graph(&self, graph: &mut Graph<'_, F>, params: &BoundParams, tokens: &[TokenId]) -> Result<NodeId> {
        check_terminal_eos(tokens)?;
        let trace = self.forward_graph(graph, params, tokens)?;
        graph.select_rows(trace.hidden, &[tokens.len() - 1])
    }

    /// EOS-pooled, L2-normalized embedding.
    pub fn embed_sequence(&self, tokens: &[TokenId]) -> Result<Vec<F>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let eos = self.eos_state_graph(&mut g, &params, tokens)?;
        let unit = g.l2_normalize_rows(eos)?;
        Ok(g.value(unit).data().to_vec())
    }

    pub fn tokenizer(&self) -> ByteTokenizer {
        ByteTokenizer::new(self.config.max_seq_len)
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<F>> {
        self.embed_sequence(&self.tokenizer().tokenize(text))
    }
}

pub fn check_terminal_eos(tokens: &[TokenId]) -> Result<()> {
    match tokens.iter().position(|&t| t == EOS) {
        None => Err(Error::Eos("sequence has no EOS token".into())),
        Some(p) if p + 1 != tokens.len() => Err(Error::Eos(format!(
            "EOS at position {p} is not the final token of {}",
            tokens.len()
        ))),
        Some(_) => Ok(()),
    }
}

/// Normalizes `v` to unit length in place; zero vectors are left unchanged.
pub fn normalize<F: Scalar>(v: &mut [F]) {
    let n = kernels::l2_norm(v);
    if n > F::zero() {
        for x in v.iter_mut() {
            *x = *x / n;
        }
    }
}
