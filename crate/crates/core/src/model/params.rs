use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

/// Weights of one transformer block.
///
/// Head `h` owns rows `h*dk..(h+1)*dk` of the query/key/value projections
/// and the same range of columns of `wo`. FFN neuron `k` owns row `k` of
/// `w1`, entry `k` of `b1` and column `k` of `w2`. Width pruning keeps
/// prefixes of these ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

/// All trainable tensors of an encoder plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub config: ModelConfig,
    /// `vocab_size × d`, row per token id.
    pub token_embed: Array2<f64>,
    /// `max_seq_len × d`, row per position.
    pub pos_embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// `num_classes × d`.
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
}

macro_rules! layer_tensors {
    ($m:ident) => {
        [
            ("wq", $m!(wq)),
            ("bq", $m!(bq)),
            ("wk", $m!(wk)),
            ("bk", $m!(bk)),
            ("wv", $m!(wv)),
            ("bv", $m!(bv)),
            ("wo", $m!(wo)),
            ("bo", $m!(bo)),
            ("ln1_gamma", $m!(ln1_gamma)),
            ("ln1_beta", $m!(ln1_beta)),
            ("w1", $m!(w1)),
            ("b1", $m!(b1)),
            ("w2", $m!(w2)),
            ("b2", $m!(b2)),
            ("ln2_gamma", $m!(ln2_gamma)),
            ("ln2_beta", $m!(ln2_beta)),
        ]
    };
}

impl LayerParams {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.hidden_dim;
        let f = c.ffn_dim;
        Self {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1_gamma: Array1::zeros(d),
            ln1_beta: Array1::zeros(d),
            w1: Array2::zeros((f, d)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((d, f)),
            b2: Array1::zeros(d),
            ln2_gamma: Array1::zeros(d),
            ln2_beta: Array1::zeros(d),
        }
    }

    fn slices(&self) -> [(&'static str, (&[f64], Vec<usize>)); 16] {
        macro_rules! get {
            ($f:ident) => {
                (
                    self.$f.as_slice().expect("standard layout"),
                    self.$f.shape().to_vec(),
                )
            };
        }
        layer_tensors!(get)
    }

    fn slices_mut(&mut self) -> [(&'static str, &mut [f64]); 16] {
        macro_rules! get {
            ($f:ident) => {
                self.$f.as_slice_mut().expect("standard layout")
            };
        }
        layer_tensors!(get)
    }
}

impl ParamSet {
    /// All-zero parameters, including layer-norm scales. Used for gradient buffers.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        Self {
            config: config.clone(),
            token_embed: Array2::zeros((config.vocab_size, d)),
            pos_embed: Array2::zeros((config.max_seq_len, d)),
            layers: (0..config.num_layers)
                .map(|_| LayerParams::zeros(config))
                .collect(),
            cls_w: Array2::zeros((config.num_classes, d)),
            cls_b: Array1::zeros(config.num_classes),
        }
    }

    /// BERT-style initialisation: weights `N(0, std²)`, zero biases, unit
    /// layer-norm scales.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut fill = |a: &mut [f64]| a.iter_mut().for_each(|x| *x = normal.sample(rng));
        fill(p.token_embed.as_slice_mut().unwrap());
        fill(p.pos_embed.as_slice_mut().unwrap());
        for l in &mut p.layers {
            for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
                fill(w.as_slice_mut().unwrap());
            }
            l.ln1_gamma.fill(1.0);
            l.ln2_gamma.fill(1.0);
        }
        fill(p.cls_w.as_slice_mut().unwrap());
        p
    }

    /// Visits every tensor in a fixed order as `(name, data, shape)`.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[f64], &[usize])) {
        f(
            "embed.token",
            self.token_embed.as_slice().unwrap(),
            self.token_embed.shape(),
        );
        f(
            "embed.position",
            self.pos_embed.as_slice().unwrap(),
            self.pos_embed.shape(),
        );
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, (data, shape)) in layer.slices() {
                f(&format!("layers.{i}.{name}"), data, &shape);
            }
        }
        f("classifier.w", self.cls_w.as_slice().unwrap(), self.cls_w.shape());
        f("classifier.b", self.cls_b.as_slice().unwrap(), self.cls_b.shape());
    }

    /// Mutable counterpart of [`ParamSet::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        f("embed.token", self.token_embed.as_slice_mut().unwrap());
        f("embed.position", self.pos_embed.as_slice_mut().unwrap());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, data) in layer.slices_mut() {
                f(&format!("layers.{i}.{name}"), data);
            }
        }
        f("classifier.w", self.cls_w.as_slice_mut().unwrap());
        f("classifier.b", self.cls_b.as_slice_mut().unwrap());
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, d, _| n += d.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_tensor(|_, d, _| out.extend_from_slice(d));
        out
    }

    /// Overwrites all tensors from a flat vector produced by [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        self.for_each_tensor_mut(|_, d| {
            let len = d.len();
            d.copy_from_slice(&flat[off..off + len]);
            off += len;
        });
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        let src = other.flatten();
        let mut off = 0;
        self.for_each_tensor_mut(|_, d| {
            let len = d.len();
            for (x, y) in d.iter_mut().zip(&src[off..off + len]) {
                *x += scale * y;
            }
            off += len;
        });
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_tensor_mut(|_, d| d.iter_mut().for_each(|x| *x *= s));
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.for_each_tensor(|_, d, _| {
            m = d.iter().fold(m, |acc, x| acc.max(x.abs()));
        });
        m
    }
}
