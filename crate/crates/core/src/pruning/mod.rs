//! Structured pruning along hidden, MLP-intermediate and depth axes, ranked
//! by activation norms on calibration sequences.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ByteTokenizer, EmbeddingModel, LayerWeights, ModelConfig, TokenId};
use crate::numerics::{kernels, Graph, Scalar, Tensor, RMS_EPS};

/// Where hidden-channel activations are read: the residual stream after
/// each block (after the MLP residual add), summed over every block. A
/// model without layers taps the token embeddings instead.
pub const HIDDEN_TAP: &str = "block_output";

/// Calibration sequences drawn when none are given explicitly.
pub const DEFAULT_CALIBRATION_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStrategy {
    /// Keep the first `target_layers` blocks.
    #[default]
    Prefix,
    /// Keep the blocks whose output norm differs most from their input norm.
    NormChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorms {
    pub hidden_norms: Vec<f64>,
    pub mlp_norms: Vec<Vec<f64>>,
    /// Per layer: Σ over positions of `| ‖block out‖ − ‖block in‖ |`.
    pub layer_deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneSpec {
    pub target_hidden: usize,
    pub target_mlp: usize,
    pub target_layers: usize,
    pub calibration: Vec<Vec<TokenId>>,
    pub layer_strategy: LayerStrategy,
}

impl PruneSpec {
    pub fn new(target_hidden: usize, target_mlp: usize, target_layers: usize, calibration: Vec<Vec<TokenId>>) -> Self {
        PruneSpec {
            target_hidden,
            target_mlp,
            target_layers,
            calibration,
            layer_strategy: LayerStrategy::Prefix,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub source_config: ModelConfig,
    pub target_config: ModelConfig,
    pub kept_hidden: Vec<usize>,
    /// Indexed by position in `kept_layers`.
    pub kept_mlp: Vec<Vec<usize>>,
    pub kept_layer_count: usize,
    pub kept_layers: Vec<usize>,
    pub norms: Option<ChannelNorms>,
}

impl PruneReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Default)]
struct NormSums {
    hidden: Vec<f64>,
    mlp: Vec<Vec<f64>>,
    deltas: Vec<f64>,
}

impl NormSums {
    fn zeros(cfg: &ModelConfig) -> Self {
        NormSums {
            hidden: vec![0.0; cfg.hidden_size],
            mlp: vec![vec![0.0; cfg.mlp_intermediate_size]; cfg.num_layers],
            deltas: vec![0.0; cfg.num_layers],
        }
    }

    fn add(&mut self, other: &NormSums) {
        let pairs = [(&mut self.hidden, &other.hidden), (&mut self.deltas, &other.deltas)];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.mlp.iter_mut().zip(&other.mlp) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

fn accumulate_squares<F: Scalar>(acc: &mut [f64], t: &Tensor<F>) {
    let c = acc.len();
    for row in t.data().chunks(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            let v = v.as_f64();
            *a += v * v;
        }
    }
}

fn row_norms<F: Scalar>(t: &Tensor<F>) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect()
}

fn sequence_sums<F: Scalar>(model: &EmbeddingModel<F>, tokens: &[TokenId]) -> Result<NormSums> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let trace = model.forward_graph(&mut g, &params, tokens)?;
    let mut sums = NormSums::zeros(&model.config);
    if trace.block_outputs.is_empty() {
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = g.select_rows(params.ids()[0], &rows)?;
        accumulate_squares(&mut sums.hidden, g.value(emb));
    }
    let mut prev: Option<Vec<f64>> = None;
    for (l, (&out, &act)) in trace.block_outputs.iter().zip(&trace.mlp_acts).enumerate() {
        accumulate_squares(&mut sums.hidden, g.value(out));
        accumulate_squares(&mut sums.mlp[l], g.value(act));
        let before = match prev.take() {
            Some(p) => p,
            None => {
                let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                let emb = g.select_rows(params.ids()[0], &rows)?;
                row_norms(g.value(emb))
            }
        };
        let after = row_norms(g.value(out));
        sums.deltas[l] = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).sum();
        prev = Some(after);
    }
    Ok(sums)
}

/// L2 activation norms per hidden channel and per MLP channel, summed over
/// every calibration position.
pub fn collect_activation_norms<F: Scalar>(model: &EmbeddingModel<F>, calibration: &[Vec<TokenId>]) -> Result<ChannelNorms> {
    if calibration.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    let partial: Vec<NormSums> = calibration
        .par_iter()
        .map(|t| sequence_sums(model, t))
        .collect::<Result<_>>()?;
    let mut total = NormSums::zeros(&model.config);
    for p in &partial {
        total.add(p);
    }
    Ok(ChannelNorms {
        hidden_norms: total.hidden.iter().map(|s| s.sqrt()).collect(),
        mlp_norms: total.mlp.iter().map(|l| l.iter().map(|s| s.sqrt()).collect()).collect(),
        layer_deltas: total.deltas,
    })
}

/// Indices of the `k` largest scores (ties to the lower index), ascending.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Samples up to `n` texts and tokenizes them for calibration.
pub fn calibration_from_texts<R: Rng>(texts: &[String], n: usize, tokenizer: &ByteTokenizer, rng: &mut R) -> Vec<Vec<TokenId>> {
    let mut picked: Vec<usize> = index::sample(rng, texts.len(), n.min(texts.len())).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| tokenizer.tokenize(&texts[i])).collect()
}

fn gather_rows<F: Scalar>(t: &Tensor<F>, rows: &[usize]) -> Tensor<F> {
    let c = t.cols();
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        out.extend_from_slice(t.row(r));
    }
    Tensor::matrix(rows.len(), c, out).expect("gathered shape")
}

fn gather_cols<F: Scalar>(t: &Tensor<F>, cols: &[usize]) -> Tensor<F> {
    let mut out = Vec::with_capacity(t.rows() * cols.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        out.extend(cols.iter().map(|&c| row[c]));
    }
    Tensor::matrix(t.rows(), cols.len(), out).expect("gathered shape")
}

fn gather_vec<F: Scalar>(t: &Tensor<F>, idx: &[usize]) -> Tensor<F> {
    Tensor::new(vec![idx.len()], idx.iter().map(|&i| t.data()[i]).collect()).expect("gathered shape")
}

fn check_indices(what: &str, idx: &[usize], bound: usize) -> Result<()> {
    if idx.is_empty() || idx.windows(2).any(|w| w[0] >= w[1]) || idx.iter().any(|&i| i >= bound) {
        return Err(Error::invalid(format!(
            "{what} indices must be nonempty, strictly ascending and below {bound}"
        )));
    }
    Ok(())
}

/// Removes rows and columns of `model` to match `spec`.
pub fn prune_model<F: Scalar>(model: &EmbeddingModel<F>, spec: &PruneSpec) -> Result<(EmbeddingModel<F>, PruneReport)> {
    let src = &model.config;
    let targets = [
        ("target_hidden", spec.target_hidden, src.hidden_size),
        ("target_mlp", spec.target_mlp, src.mlp_intermediate_size),
        ("target_layers", spec.target_layers, src.num_layers),
    ];
    for (name, t, s) in targets {
        if t > s {
            return Err(Error::invalid(format!("{name} {t} exceeds the source size {s}")));
        }
        if t == 0 && name != "target_layers" {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
    }
    let needs_norms = spec.target_hidden < src.hidden_size
        || spec.target_mlp < src.mlp_intermediate_size
        || (spec.layer_strategy == LayerStrategy::NormChange && spec.target_layers < src.num_layers);
    let norms = if needs_norms {
        Some(collect_activation_norms(model, &spec.calibration)?)
    } else {
        None
    };
    let kept_layers: Vec<usize> = match (spec.layer_strategy, &norms) {
        (LayerStrategy::NormChange, Some(n)) => top_k_indices(&n.layer_deltas, spec.target_layers),
        _ => (0..spec.target_layers).collect(),
    };
    let kept_hidden = match &norms {
        Some(n) => top_k_indices(&n.hidden_norms, spec.target_hidden),
        None => (0..src.hidden_size).collect(),
    };
    let kept_mlp: Vec<Vec<usize>> = kept_layers
        .iter()
        .map(|&l| match &norms {
            Some(n) => top_k_indices(&n.mlp_norms[l], spec.target_mlp),
            None => (0..src.mlp_intermediate_size).collect(),
        })
        .collect();
    let pruned = slice_model(model, &kept_hidden, &kept_mlp, &kept_layers)?;
    let report = PruneReport {
        source_config: src.clone(),
        target_config: pruned.config.clone(),
        kept_hidden,
        kept_mlp,
        kept_layer_count: kept_layers.len(),
        kept_layers,
        norms,
    };
    Ok((pruned, report))
}

/// Builds the smaller model keeping the given channels and layers.
pub fn slice_model<F: Scalar>(
    model: &EmbeddingModel<F>,
    kept_hidden: &[usize],
    kept_mlp: &[Vec<usize>],
    layers: &[usize],
) -> Result<EmbeddingModel<F>> {
    let src = &model.config;
    check_indices("hidden", kept_hidden, src.hidden_size)?;
    if !layers.is_empty() {
        check_indices("layer", layers, src.num_layers)?;
    }
    if kept_mlp.len() != layers.len() {
        return Err(Error::invalid("one MLP index set per kept layer"));
    }
    let mlp_width = kept_mlp.first().map_or(src.mlp_intermediate_size, Vec::len);
    for m in kept_mlp {
        check_indices("mlp", m, src.mlp_intermediate_size)?;
        if m.len() != mlp_width {
            return Err(Error::invalid("every layer must keep the same number of MLP channels"));
        }
    }
    let h = kept_hidden;
    let new_layers = layers
        .iter()
        .zip(kept_mlp)
        .map(|(&l, m)| {
            let w = &model.layers[l];
            LayerWeights {
                attn_norm: gather_vec(&w.attn_norm, h),
                wq: gather_rows(&w.wq, h),
                wk: gather_rows(&w.wk, h),
                wv: gather_rows(&w.wv, h),
                wo: gather_cols(&w.wo, h),
                q_norm: w.q_norm.clone(),
                k_norm: w.k_norm.clone(),
                mlp_norm: gather_vec(&w.mlp_norm, h),
                w_gate: gather_cols(&gather_rows(&w.w_gate, h), m),
                w_up: gather_cols(&gather_rows(&w.w_up, h), m),
                w_down: gather_cols(&gather_rows(&w.w_down, m), h),
            }
        })
        .collect();
    let config = ModelConfig {
        hidden_size: h.len(),
        mlp_intermediate_size: mlp_width,
        num_layers: layers.len(),
        ..src.clone()
    };
    config.validate()?;
    Ok(EmbeddingModel {
        config,
        embed_tokens: gather_cols(&model.embed_tokens, h),
        layers: new_layers,
        final_norm: gather_vec(&model.final_norm, h),
    })
}

/// Final hidden states of the original model run with its weights read
/// through the given index sets, using only the slice kernels. Keeps the
/// first `n_layers` blocks.
pub fn sliced_forward_oracle<F: Scalar>(
    model: &EmbeddingModel<F>,
    kept_hidden: &[usize],
    kept_mlp: &[Vec<usize>],
    n_layers: usize,
    tokens: &[TokenId],
) -> Result<Tensor<F>> {
    let layers: Vec<usize> = (0..n_layers).collect();
    sliced_forward(model, kept_hidden, kept_mlp, &layers, tokens)
}

/// [`sliced_forward_oracle`] over an arbitrary ascending layer list.
pub fn sliced_forward<F: Scalar>(
    model: &EmbeddingModel<F>,
    kept_hidden: &[usize],
    kept_mlp: &[Vec<usize>],
    layers: &[usize],
    tokens: &[TokenId],
) -> Result<Tensor<F>> {
    model.check_tokens(tokens)?;
    let cfg = &model.config;
    let t = tokens.len();
    let hk = kept_hidden.len();
    let hd = cfg.head_dim;
    let (qw, kvw) = (cfg.q_width(), cfg.kv_width());
    let group = cfg.num_heads / cfg.num_kv_heads;
    let eps = F::of(RMS_EPS);
    let attn_scale = F::of(1.0 / (hd as f64).sqrt());

    // weight (r, c) of the original matrix, read through index maps
    let at = |w: &Tensor<F>, r: usize, c: usize| w.data()[r * w.cols() + c];
    let pick = |rows: usize, cols: usize, f: &dyn Fn(usize, usize) -> F| -> Vec<F> {
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(f(r, c));
            }
        }
        out
    };
    let gains = |g: &Tensor<F>| -> Vec<F> { gather_slice(g.data(), kept_hidden) };

    let mut x = pick(t, hk, &|r, c| at(&model.embed_tokens, tokens[r] as usize, kept_hidden[c]));
    let (cos, sin) = kernels::rope_tables::<F>(t, 0, hd, cfg.rope_base as f64);
    for (&l, mlp) in layers.iter().zip(kept_mlp) {
        let w = &model.layers[l];
        let mk = mlp.len();
        let (h, _) = kernels::rms_norm(&x, t, hk, &gains(&w.attn_norm), eps);
        let wq = pick(hk, qw, &|r, c| at(&w.wq, kept_hidden[r], c));
        let wk = pick(hk, kvw, &|r, c| at(&w.wk, kept_hidden[r], c));
        let wv = pick(hk, kvw, &|r, c| at(&w.wv, kept_hidden[r], c));
        let q = kernels::matmul(&h, &wq, t, hk, qw);
        let k = kernels::matmul(&h, &wk, t, hk, kvw);
        let v = kernels::matmul(&h, &wv, t, hk, kvw);
        let head = |m: &[F], width: usize, i: usize| pick(t, hd, &|r, c| m[r * width + i * hd + c]);

        let mut keys_t = Vec::with_capacity(cfg.num_kv_heads);
        let mut values = Vec::with_capacity(cfg.num_kv_heads);
        for kv in 0..cfg.num_kv_heads {
            let (kh, _) = kernels::rms_norm(&head(&k, kvw, kv), t, hd, w.k_norm.data(), eps);
            let kh = kernels::rope_apply(&kh, t, hd, hd, &cos, &sin, false);
            keys_t.push(kernels::transpose(&kh, t, hd));
            values.push(head(&v, kvw, kv));
        }
        let mut attn = vec![F::zero(); t * qw];
        for hi in 0..cfg.num_heads {
            let kv = hi / group;
            let (qh, _) = kernels::rms_norm(&head(&q, qw, hi), t, hd, w.q_norm.data(), eps);
            let qh = kernels::rope_apply(&qh, t, hd, hd, &cos, &sin, false);
            let scores: Vec<F> = kernels::matmul(&qh, &keys_t[kv], t, hd, t).into_iter().map(|s| s * attn_scale).collect();
            let probs = kernels::softmax_rows(&scores, t, t, true);
            let out = kernels::matmul(&probs, &values[kv], t, t, hd);
            for r in 0..t {
                attn[r * qw + hi * hd..r * qw + (hi + 1) * hd].copy_from_slice(&out[r * hd..(r + 1) * hd]);
            }
        }
        let wo = pick(qw, hk, &|r, c| at(&w.wo, r, kept_hidden[c]));
        let proj = kernels::matmul(&attn, &wo, t, qw, hk);
        x = x.iter().zip(&proj).map(|(&a, &b)| a + b).collect();

        let (h, _) = kernels::rms_norm(&x, t, hk, &gains(&w.mlp_norm), eps);
        let wg = pick(hk, mk, &|r, c| at(&w.w_gate, kept_hidden[r], mlp[c]));
        let wu = pick(hk, mk, &|r, c| at(&w.w_up, kept_hidden[r], mlp[c]));
        let wd = pick(mk, hk, &|r, c| at(&w.w_down, mlp[r], kept_hidden[c]));
        let gate = kernels::matmul(&h, &wg, t, hk, mk);
        let up = kernels::matmul(&h, &wu, t, hk, mk);
        let act: Vec<F> = gate.iter().map(|&g| kernels::silu(g)).zip(&up).map(|(g, &u)| g * u).collect();
        let down = kernels::matmul(&act, &wd, t, mk, hk);
        x = x.iter().zip(&down).map(|(&a, &b)| a + b).collect();
    }
    let (out, _) = kernels::rms_norm(&x, t, hk, &gains(&model.final_norm), eps);
    Tensor::matrix(t, hk, out)
}

fn gather_slice<F: Scalar>(v: &[F], idx: &[usize]) -> Vec<F> {
    idx.iter().map(|&i| v[i]).collect()
}

#[cfg(test)]
mod tests;
