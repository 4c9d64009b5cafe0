use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore};

use super::{LayerParams, ModelConfig, ParamSet};
use crate::error::{invalid, Result};

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Token ids with a padding mask (`true` = real token).
///
/// Position 0 is pooled by the classifier and must be a real token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() {
            return invalid(format!("{} ids but {} mask entries", ids.len(), mask.len()));
        }
        Ok(Self { ids, mask })
    }

    /// Sequence without padding.
    pub fn unpadded(ids: Vec<usize>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_real(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = self.ids.len();
        if n == 0 || n > config.max_seq_len {
            return invalid(format!(
                "sequence length {n} outside 1..={}",
                config.max_seq_len
            ));
        }
        if self.mask.len() != n {
            return invalid("mask length differs from id count");
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id >= config.vocab_size) {
            return invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                config.vocab_size
            ));
        }
        if !self.mask[0] {
            return invalid("position 0 is pooled and must not be padding");
        }
        Ok(())
    }
}

/// A labelled sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Example {
    pub tokens: TokenSequence,
    pub label: usize,
}

/// Which heads, FFN neurons and layers take part in a forward pass.
///
/// Width pruning keeps a prefix of heads and neurons in each retained layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Structure {
    pub layers: Vec<LayerWidth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerWidth {
    /// Index into `ParamSet::layers`.
    pub index: usize,
    pub heads: usize,
    pub neurons: usize,
}

impl Structure {
    pub fn full(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.num_layers)
                .map(|index| LayerWidth {
                    index,
                    heads: config.num_heads,
                    neurons: config.ffn_dim,
                })
                .collect(),
        }
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.is_empty() {
            return invalid("structure retains no layers");
        }
        let mut prev = None;
        for w in &self.layers {
            if w.index >= config.num_layers || prev.is_some_and(|p| p >= w.index) {
                return invalid(format!("bad or non-increasing layer index {}", w.index));
            }
            prev = Some(w.index);
            if w.heads == 0 || w.heads > config.num_heads {
                return invalid(format!("layer {} keeps {} heads", w.index, w.heads));
            }
            if w.neurons == 0 || w.neurons > config.ffn_dim {
                return invalid(format!("layer {} keeps {} neurons", w.index, w.neurons));
            }
        }
        Ok(())
    }
}

/// Projection weights of a single attention head.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams<'a> {
    pub wq: ArrayView2<'a, f64>,
    pub bq: ArrayView1<'a, f64>,
    pub wk: ArrayView2<'a, f64>,
    pub bk: ArrayView1<'a, f64>,
    pub wv: ArrayView2<'a, f64>,
    pub bv: ArrayView1<'a, f64>,
}

impl LayerParams {
    pub fn head(&self, h: usize, head_dim: usize) -> HeadParams<'_> {
        let r = h * head_dim..(h + 1) * head_dim;
        HeadParams {
            wq: self.wq.slice(s![r.clone(), ..]),
            bq: self.bq.slice(s![r.clone()]),
            wk: self.wk.slice(s![r.clone(), ..]),
            bk: self.bk.slice(s![r.clone()]),
            wv: self.wv.slice(s![r.clone(), ..]),
            bv: self.bv.slice(s![r]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `d_v × n`, column `i` is `V·a_i`.
    pub output: Array2<f64>,
    /// `n × n`, column `i` is the attention distribution of query `i`.
    pub attn: Array2<f64>,
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
}

/// Forward activations needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub width: LayerWidth,
    pub query: Vec<Array2<f64>>,
    pub key: Vec<Array2<f64>>,
    pub head_out: Vec<Array2<f64>>,
    pub attn_drop: Option<Array2<f64>>,
    pub ln1: NormTrace,
    pub pre_act: Array2<f64>,
    pub act: Array2<f64>,
    pub ffn_drop: Option<Array2<f64>>,
    pub ln2: NormTrace,
}

#[derive(Debug, Clone)]
pub(crate) struct NormTrace {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub ids: Vec<usize>,
    pub layers: Vec<LayerTrace>,
}

/// Everything a forward pass exposes to the distillation losses.
///
/// `reps[0]` is the embedding output `E`; `reps[t]` for `t ≥ 1` is the output
/// of the `t`-th executed block. `attn[t-1][h]` and `values[t-1][h]` belong to
/// the block producing `reps[t]`.
#[derive(Debug, Clone)]
pub struct LayerStates {
    pub reps: Vec<Array2<f64>>,
    pub attn: Vec<Vec<Array2<f64>>>,
    pub values: Vec<Vec<Array2<f64>>>,
    pub logits: Array1<f64>,
    pub mask: Vec<bool>,
    pub(crate) trace: Option<Trace>,
}

impl LayerStates {
    /// Hand-built states without recorded activations. Losses accept these;
    /// [`super::backward`] rejects them.
    pub fn from_parts(
        reps: Vec<Array2<f64>>,
        attn: Vec<Vec<Array2<f64>>>,
        values: Vec<Vec<Array2<f64>>>,
        logits: Array1<f64>,
        mask: Vec<bool>,
    ) -> Self {
        Self {
            reps,
            attn,
            values,
            logits,
            mask,
            trace: None,
        }
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.reps[0]
    }

    /// Number of executed blocks.
    pub fn depth(&self) -> usize {
        self.reps.len() - 1
    }

    pub fn seq_len(&self) -> usize {
        self.mask.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.reps[0].nrows()
    }

    /// Heads in the last executed block.
    pub fn num_heads(&self) -> usize {
        self.attn.last().map_or(0, |a| a.len())
    }

    pub fn has_trace(&self) -> bool {
        self.trace.is_some()
    }
}

/// Token plus learned absolute position embedding, `d × n`.
pub fn embed(tokens: &TokenSequence, params: &ParamSet) -> Result<Array2<f64>> {
    tokens.validate(&params.config)?;
    let d = params.config.hidden_dim;
    let mut e = Array2::zeros((d, tokens.len()));
    for (i, &id) in tokens.ids.iter().enumerate() {
        let mut col = e.column_mut(i);
        col.assign(&params.token_embed.row(id));
        col += &params.pos_embed.row(i);
    }
    Ok(e)
}

/// Softmax over each column, restricted to rows where `mask` is true.
pub(crate) fn masked_softmax_columns(scores: &Array2<f64>, mask: &[bool]) -> Array2<f64> {
    let mut out = Array2::zeros(scores.raw_dim());
    for (i, col) in scores.columns().into_iter().enumerate() {
        let max = col
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &x) in col.iter().enumerate() {
            if mask[j] {
                let e = (x - max).exp();
                out[[j, i]] = e;
                sum += e;
            }
        }
        out.column_mut(i).mapv_inplace(|x| x / sum);
    }
    out
}

/// One scaled dot-product attention head: `a_i = softmax(Kᵀq_i / √d_q)`
/// over unpadded keys, `o_i = V a_i`.
pub fn attention_head(x: &Array2<f64>, head: HeadParams<'_>, mask: &[bool]) -> HeadOutput {
    let affine = |w: ArrayView2<f64>, b: ArrayView1<f64>| {
        let mut y = w.dot(x);
        y += &b.insert_axis(Axis(1));
        y
    };
    let query = affine(head.wq, head.bq);
    let key = affine(head.wk, head.bk);
    let value = affine(head.wv, head.bv);
    let scale = (query.nrows() as f64).sqrt().recip();
    let scores = key.t().dot(&query) * scale;
    let attn = masked_softmax_columns(&scores, mask);
    let output = value.dot(&attn);
    HeadOutput {
        output,
        attn,
        query,
        key,
        value,
    }
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Array2<f64>, NormTrace) {
    let d = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / d;
    let centered = x - &mean.view().insert_axis(Axis(0));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / d;
    let inv_std = var.mapv(|v| (v + LN_EPS).sqrt().recip());
    let xhat = centered * &inv_std.view().insert_axis(Axis(0));
    let y = &xhat * &gamma.view().insert_axis(Axis(1)) + &beta.view().insert_axis(Axis(1));
    (y, NormTrace { xhat, inv_std })
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut dyn RngCore) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Full-network evaluation-mode forward pass.
pub fn encoder_forward(tokens: &TokenSequence, params: &ParamSet) -> Result<LayerStates> {
    forward(tokens, params, &Structure::full(&params.config), None)
}

/// Forward pass over a (possibly pruned) structure. Dropout is applied only
/// when `rng` is given and the configured rate is positive.
pub fn forward(
    tokens: &TokenSequence,
    params: &ParamSet,
    structure: &Structure,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<LayerStates> {
    let config = &params.config;
    structure.validate(config)?;
    let mut x = embed(tokens, params)?;
    let n = tokens.len();
    let dk = config.head_dim();
    let p_drop = config.dropout;

    let mut reps = Vec::with_capacity(structure.layers.len() + 1);
    let mut attn = Vec::with_capacity(structure.layers.len());
    let mut values = Vec::with_capacity(structure.layers.len());
    let mut traces = Vec::with_capacity(structure.layers.len());

    for &width in &structure.layers {
        let lp = &params.layers[width.index];
        let mut concat = Array2::zeros((width.heads * dk, n));
        let mut layer_attn = Vec::with_capacity(width.heads);
        let mut layer_values = Vec::with_capacity(width.heads);
        let mut query = Vec::with_capacity(width.heads);
        let mut key = Vec::with_capacity(width.heads);
        let mut head_out = Vec::with_capacity(width.heads);
        for h in 0..width.heads {
            let out = attention_head(&x, lp.head(h, dk), &tokens.mask);
            concat
                .slice_mut(s![h * dk..(h + 1) * dk, ..])
                .assign(&out.output);
            layer_attn.push(out.attn);
            layer_values.push(out.value);
            query.push(out.query);
            key.push(out.key);
            head_out.push(out.output);
        }
        let hd = width.heads * dk;
        let mut attn_out = lp.wo.slice(s![.., ..hd]).dot(&concat);
        attn_out += &lp.bo.view().insert_axis(Axis(1));
        let attn_drop = match rng.as_deref_mut() {
            Some(r) if p_drop > 0.0 => {
                let m = dropout_mask(attn_out.dim(), p_drop, r);
                attn_out *= &m;
                Some(m)
            }
            _ => None,
        };
        let (y1, ln1) = layer_norm(&(&x + &attn_out), &lp.ln1_gamma, &lp.ln1_beta);

        let f = width.neurons;
        let mut pre_act = lp.w1.slice(s![..f, ..]).dot(&y1);
        pre_act += &lp.b1.slice(s![..f]).insert_axis(Axis(1));
        let act = pre_act.mapv(gelu);
        let mut ffn_out = lp.w2.slice(s![.., ..f]).dot(&act);
        ffn_out += &lp.b2.view().insert_axis(Axis(1));
        let ffn_drop = match rng.as_deref_mut() {
            Some(r) if p_drop > 0.0 => {
                let m = dropout_mask(ffn_out.dim(), p_drop, r);
                ffn_out *= &m;
                Some(m)
            }
            _ => None,
        };
        let (out, ln2) = layer_norm(&(&y1 + &ffn_out), &lp.ln2_gamma, &lp.ln2_beta);

        reps.push(std::mem::replace(&mut x, out));
        attn.push(layer_attn);
        values.push(layer_values);
        traces.push(LayerTrace {
            width,
            query,
            key,
            head_out,
            attn_drop,
            ln1,
            pre_act,
            act,
            ffn_drop,
            ln2,
        });
    }
    let logits = params.cls_w.dot(&x.column(0)) + &params.cls_b;
    reps.push(x);

    Ok(LayerStates {
        reps,
        attn,
        values,
        logits,
        mask: tokens.mask.clone(),
        trace: Some(Trace {
            ids: tokens.ids.clone(),
            layers: traces,
        }),
    })
}
