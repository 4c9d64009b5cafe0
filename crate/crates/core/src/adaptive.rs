//! Adaptive width and depth training (DynaBERT-style) with CKD as the
//! sub-network objective.
//!
//! Phase 1 scores heads and FFN neurons and rewires each layer so the most
//! important ones come first. Phase 2 trains every width in a list against a
//! fixed teacher. Phase 3 trains every (width, depth) pair against the
//! Phase-2 model evaluated at the same width.

use std::collections::BTreeSet;

use ndarray::{s, Array1};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineTerm;
use crate::distill::{
    align_layers, log_softmax, logit_kd_loss, total_objective, DistillConfig, LayerAlignment,
    LossBreakdown,
};
use crate::error::{invalid, usage, Error, Result, Violation};
use crate::model::{
    backward, forward, Example, LayerStates, LayerWidth, ModelConfig, ParamSet, StateGrads,
    Structure, TokenSequence,
};
use crate::optim::{BertAdam, OptimConfig};

/// Width and depth multipliers `(m_w, m_d)`, each in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubnetSpec {
    pub width: f64,
    pub depth: f64,
}

fn retained(mult: f64, total: usize, what: &str) -> Result<usize> {
    let k = (mult * total as f64).round() as usize;
    if k == 0 {
        return invalid(format!("multiplier {mult} keeps no {what} out of {total}"));
    }
    Ok(k.min(total))
}

impl SubnetSpec {
    pub fn new(width: f64, depth: f64) -> Result<Self> {
        for m in [width, depth] {
            if !(m > 0.0 && m <= 1.0) {
                return invalid(format!("multiplier {m} outside (0, 1]"));
            }
        }
        Ok(Self { width, depth })
    }

    pub fn full() -> Self {
        Self {
            width: 1.0,
            depth: 1.0,
        }
    }

    pub fn heads(&self, config: &ModelConfig) -> Result<usize> {
        retained(self.width, config.num_heads, "heads")
    }

    pub fn neurons(&self, config: &ModelConfig) -> Result<usize> {
        retained(self.width, config.ffn_dim, "neurons")
    }

    pub fn num_layers(&self, config: &ModelConfig) -> Result<usize> {
        retained(self.depth, config.num_layers, "layers")
    }

    /// Prefix heads and neurons in each layer chosen by [`depth_selection`].
    pub fn structure(&self, config: &ModelConfig) -> Result<Structure> {
        Self::new(self.width, self.depth)?;
        let heads = self.heads(config)?;
        let neurons = self.neurons(config)?;
        let layers = depth_selection(config.num_layers, self.num_layers(config)?)?;
        Ok(Structure {
            layers: layers
                .into_iter()
                .map(|t| LayerWidth {
                    index: t - 1,
                    heads,
                    neurons,
                })
                .collect(),
        })
    }
}

/// Representation indices (1-based block numbers) kept when `kept` of
/// `total` blocks remain: `⌈t·total/kept⌉` for `t = 1..=kept`.
///
/// When `kept` divides `total` this is the teacher side of
/// [`align_layers`]`(total, kept)` without the embedding.
pub fn depth_selection(total: usize, kept: usize) -> Result<Vec<usize>> {
    if kept == 0 || kept > total {
        return invalid(format!("cannot keep {kept} of {total} layers"));
    }
    Ok((1..=kept).map(|t| (t * total).div_ceil(kept)).collect())
}

/// Flat indices (in [`ParamSet::flatten`] order) of parameters that a forward
/// pass over `structure` reads.
pub fn active_parameters(config: &ModelConfig, structure: &Structure) -> BTreeSet<usize> {
    let mut used = ParamSet::zeros(config);
    used.token_embed.fill(1.0);
    used.pos_embed.fill(1.0);
    used.cls_w.fill(1.0);
    used.cls_b.fill(1.0);
    let dk = config.head_dim();
    for w in &structure.layers {
        let l = &mut used.layers[w.index];
        let hd = w.heads * dk;
        let f = w.neurons;
        for m in [&mut l.wq, &mut l.wk, &mut l.wv] {
            m.slice_mut(s![..hd, ..]).fill(1.0);
        }
        for b in [&mut l.bq, &mut l.bk, &mut l.bv] {
            b.slice_mut(s![..hd]).fill(1.0);
        }
        l.wo.slice_mut(s![.., ..hd]).fill(1.0);
        l.w1.slice_mut(s![..f, ..]).fill(1.0);
        l.b1.slice_mut(s![..f]).fill(1.0);
        l.w2.slice_mut(s![.., ..f]).fill(1.0);
        for v in [
            &mut l.bo,
            &mut l.b2,
            &mut l.ln1_gamma,
            &mut l.ln1_beta,
            &mut l.ln2_gamma,
            &mut l.ln2_beta,
        ] {
            v.fill(1.0);
        }
    }
    used.flatten()
        .into_iter()
        .enumerate()
        .filter(|(_, x)| *x == 1.0)
        .map(|(i, _)| i)
        .collect()
}

pub fn subnet_forward(params: &ParamSet, spec: SubnetSpec, tokens: &TokenSequence) -> Result<LayerStates> {
    forward(tokens, params, &spec.structure(&params.config)?, None)
}

/// Per-layer head and FFN-neuron importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    /// `[layer][head]`.
    pub heads: Vec<Vec<f64>>,
    /// `[layer][neuron]`.
    pub neurons: Vec<Vec<f64>>,
}

fn cross_entropy_grad(logits: &Array1<f64>, label: usize) -> Result<Array1<f64>> {
    if label >= logits.len() {
        return invalid(format!("label {label} out of range for {} classes", logits.len()));
    }
    let mut g = log_softmax(logits).mapv(f64::exp);
    g[label] -= 1.0;
    Ok(g)
}

/// First-order Taylor importance on the cross-entropy dev loss.
///
/// For a unit gate ξ on a head output (or neuron activation), `∂L/∂ξ` is the
/// sum of activation × gradient over its coordinates. Each batch contributes
/// `|Σ_examples ∂L/∂ξ|`.
pub fn estimate_importance(
    params: &ParamSet,
    dev: &[Example],
    batch_size: usize,
) -> Result<ImportanceScores> {
    if dev.is_empty() {
        return usage("importance estimation needs a non-empty dev set");
    }
    if batch_size == 0 {
        return usage("batch size must be positive");
    }
    let c = &params.config;
    let mut heads = vec![vec![0.0; c.num_heads]; c.num_layers];
    let mut neurons = vec![vec![0.0; c.ffn_dim]; c.num_layers];
    let structure = Structure::full(c);
    for batch in dev.chunks(batch_size) {
        let mut bh = vec![vec![0.0; c.num_heads]; c.num_layers];
        let mut bn = vec![Array1::zeros(c.ffn_dim); c.num_layers];
        for ex in batch {
            let states = forward(&ex.tokens, params, &structure, None)?;
            let mut up = StateGrads::new();
            up.add_logits(cross_entropy_grad(&states.logits, ex.label)?);
            let g = backward(params, &states, &up)?;
            for l in 0..c.num_layers {
                for h in 0..c.num_heads {
                    bh[l][h] += g.head_gates[l][h];
                }
                bn[l] += &g.neuron_gates[l];
            }
        }
        for l in 0..c.num_layers {
            for h in 0..c.num_heads {
                heads[l][h] += bh[l][h].abs();
            }
            for (acc, v) in neurons[l].iter_mut().zip(&bn[l]) {
                *acc += v.abs();
            }
        }
    }
    Ok(ImportanceScores { heads, neurons })
}

fn descending(scores: &[f64]) -> Result<Vec<usize>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("importance score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

/// Reorders heads and FFN neurons in each layer by descending importance,
/// permuting the adjoining projections so the full network is unchanged.
/// Ties keep their original order.
pub fn rewire(params: &ParamSet, scores: &ImportanceScores) -> Result<ParamSet> {
    let c = &params.config;
    let shape_ok = scores.heads.len() == c.num_layers
        && scores.neurons.len() == c.num_layers
        && scores.heads.iter().all(|h| h.len() == c.num_heads)
        && scores.neurons.iter().all(|n| n.len() == c.ffn_dim);
    if !shape_ok {
        return usage("importance scores do not match the model shape");
    }
    let dk = c.head_dim();
    let mut out = params.clone();
    for (l, (src, dst)) in params.layers.iter().zip(&mut out.layers).enumerate() {
        for (p, &o) in descending(&scores.heads[l])?.iter().enumerate() {
            let (to, from) = (p * dk..(p + 1) * dk, o * dk..(o + 1) * dk);
            for (d, sm) in [(&mut dst.wq, &src.wq), (&mut dst.wk, &src.wk), (&mut dst.wv, &src.wv)] {
                d.slice_mut(s![to.clone(), ..]).assign(&sm.slice(s![from.clone(), ..]));
            }
            for (d, sv) in [(&mut dst.bq, &src.bq), (&mut dst.bk, &src.bk), (&mut dst.bv, &src.bv)] {
                d.slice_mut(s![to.clone()]).assign(&sv.slice(s![from.clone()]));
            }
            dst.wo
                .slice_mut(s![.., to.clone()])
                .assign(&src.wo.slice(s![.., from.clone()]));
        }
        for (p, &o) in descending(&scores.neurons[l])?.iter().enumerate() {
            dst.w1.row_mut(p).assign(&src.w1.row(o));
            dst.b1[p] = src.b1[o];
            dst.w2.column_mut(p).assign(&src.w2.column(o));
        }
    }
    Ok(out)
}

/// Mean squared difference of aligned representations over real entries,
/// summed over aligned pairs. The hidden-state term of the original DynaBERT
/// objective; requires equal hidden sizes.
pub fn dynabert_hidden_loss(
    student: &LayerStates,
    teacher: &LayerStates,
    alignment: &LayerAlignment,
) -> Result<BaselineTerm> {
    if student.hidden_dim() != teacher.hidden_dim() {
        return Err(Error::ConstraintViolation(vec![Violation::EmbeddingSize {
            teacher: teacher.hidden_dim(),
            student: student.hidden_dim(),
        }]));
    }
    crate::distill::check_pair(student, teacher, alignment)?;
    let real: Vec<usize> = (0..student.seq_len()).filter(|&i| student.mask[i]).collect();
    let count = (real.len() * student.hidden_dim()) as f64;
    let mut out = BaselineTerm::default();
    for &(ls, lt) in &alignment.pairs {
        let mut g = ndarray::Array2::zeros(student.reps[ls].raw_dim());
        for &i in &real {
            let diff = &student.reps[ls].column(i) - &teacher.reps[lt].column(i);
            out.loss += diff.dot(&diff) / count;
            g.column_mut(i).assign(&(diff * (2.0 / count)));
        }
        out.grads.add_rep(ls, g);
    }
    Ok(out)
}

/// Sub-network objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveObjective {
    /// Logit term plus `λ_CKD · (L_WR + L_LTR)`.
    #[default]
    Ckd,
    /// Logit term plus `λ_CKD ·` hidden-state MSE.
    Dynabert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub distill: DistillConfig,
    pub objective: AdaptiveObjective,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            // sub-networks match only the teacher's soft labels
            distill: DistillConfig {
                alpha: 1.0,
                ..Default::default()
            },
            objective: AdaptiveObjective::Ckd,
            optim: OptimConfig::default(),
            batch_size: 8,
            steps: 200,
            seed: 0,
        }
    }
}

/// One accumulated loss term: a student sub-network against a teacher
/// sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetTerm {
    pub spec: SubnetSpec,
    pub teacher: Structure,
    pub student: Structure,
    pub alignment: LayerAlignment,
}

/// Phase 2: full teacher against each width of the student.
pub fn width_terms(
    teacher: &ModelConfig,
    student: &ModelConfig,
    widths: &[f64],
) -> Result<Vec<SubnetTerm>> {
    if widths.is_empty() {
        return usage("width list is empty");
    }
    let alignment = align_layers(teacher.num_layers, student.num_layers)?;
    widths
        .iter()
        .map(|&w| {
            let spec = SubnetSpec::new(w, 1.0)?;
            Ok(SubnetTerm {
                spec,
                teacher: Structure::full(teacher),
                student: spec.structure(student)?,
                alignment: alignment.clone(),
            })
        })
        .collect()
}

/// Phase 3: the width-`m_w` teacher against the `(m_w, m_d)` student, with
/// student block `t` aligned to the teacher block it was selected from.
pub fn width_depth_terms(config: &ModelConfig, widths: &[f64], depths: &[f64]) -> Result<Vec<SubnetTerm>> {
    if widths.is_empty() || depths.is_empty() {
        return usage("width and depth lists must be non-empty");
    }
    let mut terms = Vec::with_capacity(widths.len() * depths.len());
    for &w in widths {
        let teacher = SubnetSpec::new(w, 1.0)?.structure(config)?;
        for &d in depths {
            let spec = SubnetSpec::new(w, d)?;
            let kept = depth_selection(config.num_layers, spec.num_layers(config)?)?;
            let mut pairs = vec![(0, 0)];
            pairs.extend(kept.iter().enumerate().map(|(t, &l)| (t + 1, l)));
            terms.push(SubnetTerm {
                spec,
                teacher: teacher.clone(),
                student: spec.structure(config)?,
                alignment: LayerAlignment::from_pairs(pairs)?,
            });
        }
    }
    Ok(terms)
}

fn term_objective(
    student: &LayerStates,
    teacher: &LayerStates,
    label: usize,
    term: &SubnetTerm,
    config: &AdaptiveConfig,
) -> Result<(LossBreakdown, StateGrads)> {
    let d = &config.distill;
    match config.objective {
        AdaptiveObjective::Ckd => {
            let obj = total_objective(student, teacher, label, &term.alignment, d)?;
            Ok((obj.breakdown, obj.grads))
        }
        AdaptiveObjective::Dynabert => {
            let logit = logit_kd_loss(&student.logits, &teacher.logits, label, d.alpha, d.temperature)?;
            let hidden = dynabert_hidden_loss(student, teacher, &term.alignment)?;
            let mut grads = StateGrads::new();
            grads.add_logits(logit.grad);
            grads.merge_scaled(hidden.grads, d.lambda_ckd);
            let b = LossBreakdown {
                total: logit.loss + d.lambda_ckd * hidden.loss,
                logit: logit.loss,
                ..Default::default()
            };
            Ok((b, grads))
        }
    }
}

/// Batch-mean losses and gradients of each term, plus their sum.
#[derive(Debug, Clone)]
pub struct TermGradients {
    pub losses: Vec<LossBreakdown>,
    pub grads: Vec<ParamSet>,
    /// `Σ_k grads[k]`, reduced in term order.
    pub total: ParamSet,
}

fn run_terms(
    teacher: &ParamSet,
    student: &ParamSet,
    terms: &[SubnetTerm],
    batch: &[Example],
    config: &AdaptiveConfig,
    mut rng: Option<&mut dyn RngCore>,
    with_grads: bool,
) -> Result<TermGradients> {
    if terms.is_empty() {
        return usage("no sub-network terms");
    }
    if batch.is_empty() {
        return usage("empty batch");
    }
    let scale = 1.0 / batch.len() as f64;
    let mut losses = vec![LossBreakdown::default(); terms.len()];
    let mut grads = if with_grads {
        vec![ParamSet::zeros(&student.config); terms.len()]
    } else {
        vec![]
    };
    for ex in batch {
        // one teacher pass per distinct teacher sub-network
        let mut cache: Vec<(&Structure, LayerStates)> = Vec::new();
        for (k, term) in terms.iter().enumerate() {
            let pos = match cache.iter().position(|(s, _)| *s == &term.teacher) {
                Some(p) => p,
                None => {
                    cache.push((&term.teacher, forward(&ex.tokens, teacher, &term.teacher, None)?));
                    cache.len() - 1
                }
            };
            let t_states = &cache[pos].1;
            let r: Option<&mut dyn RngCore> = match &mut rng {
                Some(r) => Some(&mut **r),
                None => None,
            };
            let s_states = forward(&ex.tokens, student, &term.student, r)?;
            let (b, up) = term_objective(&s_states, t_states, ex.label, term, config)?;
            if !b.total.is_finite() {
                return Err(Error::NonFinite(format!("loss of sub-network {:?}", term.spec)));
            }
            losses[k].add_scaled(&b, scale);
            if with_grads {
                let g = backward(student, &s_states, &up)?;
                grads[k].add_scaled(&g.params, scale);
            }
        }
    }
    let mut total = ParamSet::zeros(&student.config);
    for g in &grads {
        total.add_scaled(g, 1.0);
    }
    Ok(TermGradients {
        losses,
        grads,
        total,
    })
}

/// Gradients of every term on one batch, accumulated into a single buffer.
pub fn accumulate_gradients(
    teacher: &ParamSet,
    student: &ParamSet,
    terms: &[SubnetTerm],
    batch: &[Example],
    config: &AdaptiveConfig,
) -> Result<TermGradients> {
    run_terms(teacher, student, terms, batch, config, None, true)
}

/// Mean loss of every term over `data`.
pub fn evaluate_terms(
    teacher: &ParamSet,
    student: &ParamSet,
    terms: &[SubnetTerm],
    data: &[Example],
    config: &AdaptiveConfig,
) -> Result<Vec<LossBreakdown>> {
    Ok(run_terms(teacher, student, terms, data, config, None, false)?.losses)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveStep {
    pub step: usize,
    pub lr: f64,
    /// Batch-mean breakdown per term, in term order.
    pub losses: Vec<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct AdaptiveRun {
    pub student: ParamSet,
    pub specs: Vec<SubnetSpec>,
    pub history: Vec<AdaptiveStep>,
}

/// Trains `student` on the sum of all term losses, one optimizer update per
/// batch. Batches are drawn from per-epoch shuffles seeded by `config.seed`.
pub fn train_terms(
    teacher: &ParamSet,
    mut student: ParamSet,
    terms: &[SubnetTerm],
    data: &[Example],
    config: &AdaptiveConfig,
) -> Result<AdaptiveRun> {
    if data.is_empty() {
        return usage("training set is empty");
    }
    if config.batch_size == 0 {
        return usage("batch size must be positive");
    }
    config.distill.validate()?;
    let mut optim = BertAdam::new(
        OptimConfig {
            total_steps: config.steps.max(1),
            ..config.optim.clone()
        },
        student.num_params(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(data.len()) {
            if cursor == data.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let lr = optim.current_lr();
        let tg = run_terms(teacher, &student, terms, &batch, config, Some(&mut rng), true)?;
        optim.step(&mut student, &tg.total)?;
        history.push(AdaptiveStep {
            step,
            lr,
            losses: tg.losses,
        });
    }
    Ok(AdaptiveRun {
        student,
        specs: terms.iter().map(|t| t.spec).collect(),
        history,
    })
}

/// Phase 2: adaptive-width training against a fixed teacher.
pub fn train_adaptive_width(
    teacher: &ParamSet,
    student: ParamSet,
    widths: &[f64],
    data: &[Example],
    config: &AdaptiveConfig,
) -> Result<AdaptiveRun> {
    let terms = width_terms(&teacher.config, &student.config, widths)?;
    train_terms(teacher, student, &terms, data, config)
}

/// Phase 3: adaptive width and depth, with the Phase-2 model as teacher.
pub fn train_adaptive_full(
    teacher_w: &ParamSet,
    student: ParamSet,
    widths: &[f64],
    depths: &[f64],
    data: &[Example],
    config: &AdaptiveConfig,
) -> Result<AdaptiveRun> {
    if teacher_w.config != student.config {
        return usage("phase 3 teacher and student must share an architecture");
    }
    let terms = width_depth_terms(&student.config, widths, depths)?;
    train_terms(teacher_w, student, &terms, data, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_selection_matches_alignment_when_divisible() {
        for total in 1..=12 {
            for kept in 1..=total {
                let sel = depth_selection(total, kept).unwrap();
                assert_eq!(sel.len(), kept);
                assert_eq!(*sel.last().unwrap(), total);
                assert!(sel.windows(2).all(|w| w[0] < w[1]));
                if total % kept == 0 {
                    let a: Vec<usize> = align_layers(total, kept).unwrap().teacher_indices().skip(1).collect();
                    assert_eq!(sel, a);
                }
            }
        }
        assert_eq!(depth_selection(4, 2).unwrap(), vec![2, 4]);
    }

    #[test]
    fn spec_rounding_and_errors() {
        let c = ModelConfig {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 10,
            max_seq_len: 8,
            num_classes: 2,
            dropout: 0.0,
        };
        let s = SubnetSpec::new(0.25, 0.5).unwrap();
        assert_eq!((s.heads(&c).unwrap(), s.neurons(&c).unwrap(), s.num_layers(&c).unwrap()), (1, 32, 2));
        assert!(SubnetSpec::new(0.1, 1.0).unwrap().heads(&c).is_err());
        assert!(SubnetSpec::new(0.0, 1.0).is_err());
        assert!(SubnetSpec::new(1.0, 1.5).is_err());
        assert_eq!(SubnetSpec::full().structure(&c).unwrap(), Structure::full(&c));
    }
}
