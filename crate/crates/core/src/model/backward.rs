use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};

use super::forward::{gelu_grad, NormTrace};
use super::{LayerStates, ParamSet};
use crate::error::{usage, Result};

/// Upstream gradients of a scalar loss with respect to exposed tensors.
///
/// Indices follow [`LayerStates`]: `reps` is keyed by representation index
/// (0 = embedding output), `attn`/`values` by `(block, head)` with `block`
/// indexing `LayerStates::attn`. Adding to the same key accumulates.
#[derive(Debug, Clone, Default)]
pub struct StateGrads {
    pub logits: Option<Array1<f64>>,
    pub reps: BTreeMap<usize, Array2<f64>>,
    pub attn: BTreeMap<(usize, usize), Array2<f64>>,
    pub values: BTreeMap<(usize, usize), Array2<f64>>,
}

fn accumulate<K: Ord>(map: &mut BTreeMap<K, Array2<f64>>, key: K, g: Array2<f64>) {
    match map.get_mut(&key) {
        Some(acc) => *acc += &g,
        None => {
            map.insert(key, g);
        }
    }
}

impl StateGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_logits(&mut self, g: Array1<f64>) {
        match &mut self.logits {
            Some(acc) => *acc += &g,
            None => self.logits = Some(g),
        }
    }

    pub fn add_rep(&mut self, index: usize, g: Array2<f64>) {
        accumulate(&mut self.reps, index, g);
    }

    pub fn add_attn(&mut self, block: usize, head: usize, g: Array2<f64>) {
        accumulate(&mut self.attn, (block, head), g);
    }

    pub fn add_values(&mut self, block: usize, head: usize, g: Array2<f64>) {
        accumulate(&mut self.values, (block, head), g);
    }

    /// `self += scale * other`.
    pub fn merge_scaled(&mut self, other: StateGrads, scale: f64) {
        if let Some(g) = other.logits {
            self.add_logits(g * scale);
        }
        for (k, g) in other.reps {
            self.add_rep(k, g * scale);
        }
        for ((b, h), g) in other.attn {
            self.add_attn(b, h, g * scale);
        }
        for ((b, h), g) in other.values {
            self.add_values(b, h, g * scale);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_none() && self.reps.is_empty() && self.attn.is_empty() && self.values.is_empty()
    }
}

/// Parameter gradients plus gate gradients used for importance estimation.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamSet,
    /// `∂loss/∂ξ` for a unit gate scaling each head's output, `[layer][head]`.
    pub head_gates: Vec<Vec<f64>>,
    /// `∂loss/∂ξ` for a unit gate on each FFN neuron's activation.
    pub neuron_gates: Vec<Array1<f64>>,
}

fn check_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return usage(format!("{what}: gradient shape {got:?}, tensor shape {want:?}"));
    }
    Ok(())
}

fn validate(states: &LayerStates, up: &StateGrads) -> Result<()> {
    if let Some(g) = &up.logits {
        check_shape("logits", g.shape(), states.logits.shape())?;
    }
    for (&t, g) in &up.reps {
        let Some(r) = states.reps.get(t) else {
            return usage(format!("representation {t} was not produced by the forward pass"));
        };
        check_shape(&format!("reps[{t}]"), g.shape(), r.shape())?;
    }
    for (name, map, src) in [
        ("attn", &up.attn, &states.attn),
        ("values", &up.values, &states.values),
    ] {
        for (&(b, h), g) in map {
            let Some(t) = src.get(b).and_then(|blk| blk.get(h)) else {
                return usage(format!("{name}[{b}][{h}] was not produced by the forward pass"));
            };
            check_shape(&format!("{name}[{b}][{h}]"), g.shape(), t.shape())?;
        }
    }
    Ok(())
}

fn norm_backward(
    dy: &Array2<f64>,
    trace: &NormTrace,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    *dgamma += &(dy * &trace.xhat).sum_axis(Axis(1));
    *dbeta += &dy.sum_axis(Axis(1));
    let d = dy.nrows() as f64;
    let dxhat = dy * &gamma.view().insert_axis(Axis(1));
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &trace.xhat).sum_axis(Axis(0));
    let mut dx = dxhat * d;
    dx -= &sum_dxhat.view().insert_axis(Axis(0));
    dx -= &(&trace.xhat * &sum_dxhat_xhat.view().insert_axis(Axis(0)));
    dx *= &(&trace.inv_std / d).view().insert_axis(Axis(0));
    dx
}

/// Column-wise softmax backward: `dS_i = a_i ⊙ (dA_i − ⟨a_i, dA_i⟩)`.
pub(crate) fn softmax_columns_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let dots = (a * da).sum_axis(Axis(0));
    let mut ds = da - &dots.view().insert_axis(Axis(0));
    ds *= a;
    ds
}

/// Back-propagates upstream gradients on any exposed tensor of `states` into
/// gradients for every parameter of `params`.
pub fn backward(params: &ParamSet, states: &LayerStates, upstream: &StateGrads) -> Result<Gradients> {
    let Some(trace) = &states.trace else {
        return usage("states carry no recorded activations; run forward first");
    };
    validate(states, upstream)?;
    let config = &params.config;
    let dk = config.head_dim();
    let depth = states.depth();
    let n = states.seq_len();

    let mut grads = ParamSet::zeros(config);
    let mut head_gates = vec![vec![0.0; config.num_heads]; config.num_layers];
    let mut neuron_gates = vec![Array1::zeros(config.ffn_dim); config.num_layers];

    let mut dx = upstream
        .reps
        .get(&depth)
        .cloned()
        .unwrap_or_else(|| Array2::zeros((config.hidden_dim, n)));
    if let Some(dz) = &upstream.logits {
        let pooled = states.reps[depth].column(0);
        for (c, &g) in dz.iter().enumerate() {
            grads.cls_w.row_mut(c).scaled_add(g, &pooled);
        }
        grads.cls_b += dz;
        let dpool = params.cls_w.t().dot(dz);
        let mut col = dx.column_mut(0);
        col += &dpool;
    }

    for t in (0..depth).rev() {
        let lt = &trace.layers[t];
        let idx = lt.width.index;
        let lp = &params.layers[idx];
        let g = &mut grads.layers[idx];
        let x_in = &states.reps[t];
        let f = lt.width.neurons;
        let hd = lt.width.heads * dk;

        // second sub-layer: out = LN(y1 + drop(W2 gelu(W1 y1 + b1) + b2))
        let ds2 = norm_backward(&dx, &lt.ln2, &lp.ln2_gamma, &mut g.ln2_gamma, &mut g.ln2_beta);
        let mut dffn = ds2.clone();
        if let Some(m) = &lt.ffn_drop {
            dffn *= m;
        }
        g.b2 += &dffn.sum_axis(Axis(1));
        {
            let mut w2 = g.w2.slice_mut(s![.., ..f]);
            w2 += &dffn.dot(&lt.act.t());
        }
        let dact = lp.w2.slice(s![.., ..f]).t().dot(&dffn);
        let gates = (&dact * &lt.act).sum_axis(Axis(1));
        neuron_gates[idx].slice_mut(s![..f]).assign(&gates);
        let dpre = dact * &lt.pre_act.mapv(gelu_grad);
        {
            let mut b1 = g.b1.slice_mut(s![..f]);
            b1 += &dpre.sum_axis(Axis(1));
        }
        let y1 = &lt.ln1.xhat * &lp.ln1_gamma.view().insert_axis(Axis(1))
            + &lp.ln1_beta.view().insert_axis(Axis(1));
        {
            let mut w1 = g.w1.slice_mut(s![..f, ..]);
            w1 += &dpre.dot(&y1.t());
        }
        let mut dy1 = ds2;
        dy1 += &lp.w1.slice(s![..f, ..]).t().dot(&dpre);

        // first sub-layer: y1 = LN(x + drop(Wo concat + bo))
        let ds1 = norm_backward(&dy1, &lt.ln1, &lp.ln1_gamma, &mut g.ln1_gamma, &mut g.ln1_beta);
        let mut dattn_out = ds1.clone();
        if let Some(m) = &lt.attn_drop {
            dattn_out *= m;
        }
        g.bo += &dattn_out.sum_axis(Axis(1));
        let dconcat = lp.wo.slice(s![.., ..hd]).t().dot(&dattn_out);
        let mut dx_in = ds1;
        let scale = (dk as f64).sqrt().recip();
        for h in 0..lt.width.heads {
            let rows = h * dk..(h + 1) * dk;
            let d_out = dconcat.slice(s![rows.clone(), ..]);
            {
                let mut wo = g.wo.slice_mut(s![.., rows.clone()]);
                wo += &dattn_out.dot(&lt.head_out[h].t());
            }
            head_gates[idx][h] = (&d_out * &lt.head_out[h]).sum();

            let a = &states.attn[t][h];
            let v = &states.values[t][h];
            let mut dv = d_out.dot(&a.t());
            if let Some(u) = upstream.values.get(&(t, h)) {
                dv += u;
            }
            let mut da = v.t().dot(&d_out);
            if let Some(u) = upstream.attn.get(&(t, h)) {
                da += u;
            }
            let ds = softmax_columns_backward(a, &da) * scale;
            let dq = lt.key[h].dot(&ds);
            let dkey = lt.query[h].dot(&ds.t());

            for (dy, w, dw, db) in [
                (&dq, &lp.wq, &mut g.wq, &mut g.bq),
                (&dkey, &lp.wk, &mut g.wk, &mut g.bk),
                (&dv, &lp.wv, &mut g.wv, &mut g.bv),
            ] {
                let mut dw = dw.slice_mut(s![rows.clone(), ..]);
                dw += &dy.dot(&x_in.t());
                let mut db = db.slice_mut(s![rows.clone()]);
                db += &dy.sum_axis(Axis(1));
                dx_in += &w.slice(s![rows.clone(), ..]).t().dot(dy);
            }
        }
        if let Some(u) = upstream.reps.get(&t) {
            dx_in += u;
        }
        dx = dx_in;
    }

    for (i, &id) in trace.ids.iter().enumerate() {
        let col = dx.column(i);
        let mut tok = grads.token_embed.row_mut(id);
        tok += &col;
        let mut pos = grads.pos_embed.row_mut(i);
        pos += &col;
    }

    Ok(Gradients {
        params: grads,
        head_gates,
        neuron_gates,
    })
}
