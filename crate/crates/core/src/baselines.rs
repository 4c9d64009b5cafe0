//! Baseline distillation objectives and their architectural constraints.
//!
//! DistilBERT's cosine loss and PKD's normalized MSE compare student and
//! teacher vectors directly, so they need equal embedding sizes. TinyBERT and
//! MiniLM compare attention maps head by head, so they need equal head counts.
//! CKD and logit-only distillation compare only relations and outputs.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::distill::{
    check_pair, logit_kd_loss, total_objective, DistillConfig, LayerAlignment, LossBreakdown,
};
use crate::error::{usage, Error, Result, Violation};
use crate::model::{masked_softmax_columns, softmax_columns_backward, LayerStates, ModelConfig, StateGrads};
use crate::relations::EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    DistilbertCos,
    PkdPatient,
    Tinybert,
    Minilm,
    LogitOnly,
    Ckd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    EqualEmbedding,
    EqualHeads,
    None,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 6] = [
        ObjectiveKind::DistilbertCos,
        ObjectiveKind::PkdPatient,
        ObjectiveKind::Tinybert,
        ObjectiveKind::Minilm,
        ObjectiveKind::LogitOnly,
        ObjectiveKind::Ckd,
    ];

    pub fn constraint(self) -> Constraint {
        match self {
            ObjectiveKind::DistilbertCos | ObjectiveKind::PkdPatient => Constraint::EqualEmbedding,
            ObjectiveKind::Tinybert | ObjectiveKind::Minilm => Constraint::EqualHeads,
            ObjectiveKind::LogitOnly | ObjectiveKind::Ckd => Constraint::None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::DistilbertCos => "distilbert_cos",
            ObjectiveKind::PkdPatient => "pkd_patient",
            ObjectiveKind::Tinybert => "tinybert",
            ObjectiveKind::Minilm => "minilm",
            ObjectiveKind::LogitOnly => "logit_only",
            ObjectiveKind::Ckd => "ckd",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::InvalidInput(format!("unknown objective {s:?}")))
    }
}

/// Every constraint of `objective` that the pair of architectures violates.
pub fn check_compatibility(
    teacher: &ModelConfig,
    student: &ModelConfig,
    objective: ObjectiveKind,
) -> Vec<Violation> {
    violations(
        objective,
        (teacher.embed_dim(), student.embed_dim()),
        (teacher.num_heads, student.num_heads),
    )
}

fn violations(objective: ObjectiveKind, dims: (usize, usize), heads: (usize, usize)) -> Vec<Violation> {
    match objective.constraint() {
        Constraint::EqualEmbedding if dims.0 != dims.1 => vec![Violation::EmbeddingSize {
            teacher: dims.0,
            student: dims.1,
        }],
        Constraint::EqualHeads if heads.0 != heads.1 => vec![Violation::AttentionHead {
            teacher: heads.0,
            student: heads.1,
        }],
        _ => vec![],
    }
}

fn require(objective: ObjectiveKind, student: &LayerStates, teacher: &LayerStates) -> Result<()> {
    let v = violations(
        objective,
        (teacher.hidden_dim(), student.hidden_dim()),
        (teacher.num_heads(), student.num_heads()),
    );
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::ConstraintViolation(v))
    }
}

/// A baseline loss value with its gradients on the student states.
#[derive(Debug, Clone, Default)]
pub struct BaselineTerm {
    pub loss: f64,
    pub grads: StateGrads,
}

fn real_tokens(mask: &[bool]) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask[i]).collect()
}

/// `Σ_layers mean_tokens (1 − cos(s_i, t_i))`.
pub fn distilbert_cos_loss(
    student: &LayerStates,
    teacher: &LayerStates,
    alignment: &LayerAlignment,
) -> Result<BaselineTerm> {
    require(ObjectiveKind::DistilbertCos, student, teacher)?;
    check_pair(student, teacher, alignment)?;
    let tokens = real_tokens(&student.mask);
    let count = tokens.len() as f64;
    let mut out = BaselineTerm::default();
    for &(ls, lt) in &alignment.pairs {
        let (rs, rt) = (&student.reps[ls], &teacher.reps[lt]);
        let mut g = Array2::zeros(rs.raw_dim());
        for &i in &tokens {
            let (s, t) = (rs.column(i), rt.column(i));
            let (ns, nt) = (s.dot(&s).sqrt(), t.dot(&t).sqrt());
            if ns < EPS || nt < EPS {
                out.loss += 1.0 / count;
                continue;
            }
            let cos = s.dot(&t) / (ns * nt);
            out.loss += (1.0 - cos) / count;
            let dc = (&t / (ns * nt)) - &(&s * (cos / (ns * ns)));
            g.column_mut(i).assign(&(dc * (-1.0 / count)));
        }
        out.grads.add_rep(ls, g);
    }
    Ok(out)
}

fn unit(v: ArrayView1<f64>) -> Option<(Array1<f64>, f64)> {
    let n = v.dot(&v).sqrt();
    (n >= EPS).then(|| (&v / n, n))
}

/// `Σ_layers mean_tokens ‖s_i/‖s_i‖ − t_i/‖t_i‖‖²`.
///
/// Vectors shorter than the relation ε are treated as zero and pass no
/// gradient.
pub fn pkd_patient_loss(
    student: &LayerStates,
    teacher: &LayerStates,
    alignment: &LayerAlignment,
) -> Result<BaselineTerm> {
    require(ObjectiveKind::PkdPatient, student, teacher)?;
    check_pair(student, teacher, alignment)?;
    let tokens = real_tokens(&student.mask);
    let count = tokens.len() as f64;
    let mut out = BaselineTerm::default();
    for &(ls, lt) in &alignment.pairs {
        let (rs, rt) = (&student.reps[ls], &teacher.reps[lt]);
        let mut g = Array2::zeros(rs.raw_dim());
        for &i in &tokens {
            let us = unit(rs.column(i));
            let ut = unit(rt.column(i)).map_or_else(|| Array1::zeros(rt.nrows()), |u| u.0);
            let Some((u, n)) = us else {
                out.loss += ut.dot(&ut) / count;
                continue;
            };
            let diff = &u - &ut;
            out.loss += diff.dot(&diff) / count;
            // (I − uuᵀ)·2(u − t̂)/‖s‖
            let proj = &diff - &(&u * u.dot(&diff));
            g.column_mut(i).assign(&(proj * (2.0 / (n * count))));
        }
        out.grads.add_rep(ls, g);
    }
    Ok(out)
}

/// Learnable `d_t × d_s` map from student to teacher hidden space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub w: Array2<f64>,
}

impl Projection {
    /// Identity on the shared leading coordinates, zero elsewhere. The rows
    /// (or columns, when `d_t ≥ d_s`) are orthonormal.
    pub fn identity_padded(teacher_dim: usize, student_dim: usize) -> Self {
        let mut w = Array2::zeros((teacher_dim, student_dim));
        for i in 0..teacher_dim.min(student_dim) {
            w[[i, i]] = 1.0;
        }
        Self { w }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TinybertTerm {
    pub hidden: f64,
    pub attention: f64,
    pub loss: f64,
    pub grads: StateGrads,
    /// Gradient of `loss` with respect to `W_r`.
    pub projection_grad: Array2<f64>,
}

/// Hidden-state MSE through `W_r` on every aligned pair, plus attention-map
/// MSE on every aligned pair of blocks. Both are means over real entries.
/// The logit term is added by [`baseline_objective`].
pub fn tinybert_loss(
    student: &LayerStates,
    teacher: &LayerStates,
    alignment: &LayerAlignment,
    projection: &Projection,
) -> Result<TinybertTerm> {
    require(ObjectiveKind::Tinybert, student, teacher)?;
    check_pair(student, teacher, alignment)?;
    let (dt, ds) = (teacher.hidden_dim(), student.hidden_dim());
    if projection.w.dim() != (dt, ds) {
        return usage(format!(
            "projection is {:?}, expected ({dt}, {ds})",
            projection.w.dim()
        ));
    }
    let tokens = real_tokens(&student.mask);
    let mut out = TinybertTerm {
        projection_grad: Array2::zeros((dt, ds)),
        ..Default::default()
    };
    let hidden_count = (tokens.len() * dt) as f64;
    for &(ls, lt) in &alignment.pairs {
        let (rs, rt) = (&student.reps[ls], &teacher.reps[lt]);
        let mut g = Array2::zeros(rs.raw_dim());
        for &i in &tokens {
            let s = rs.column(i);
            let diff = projection.w.dot(&s) - rt.column(i);
            out.hidden += diff.dot(&diff) / hidden_count;
            let d = diff * (2.0 / hidden_count);
            g.column_mut(i).assign(&projection.w.t().dot(&d));
            out.projection_grad += &(d.view().insert_axis(Axis(1)).dot(&s.insert_axis(Axis(0))));
        }
        out.grads.add_rep(ls, g);

        if ls == 0 || lt == 0 {
            continue;
        }
        let (bs, bt) = (ls - 1, lt - 1);
        let heads = student.attn[bs].len();
        let count = (heads * tokens.len() * tokens.len()) as f64;
        for h in 0..heads {
            let (a_s, a_t) = (&student.attn[bs][h], &teacher.attn[bt][h]);
            let mut ga = Array2::zeros(a_s.raw_dim());
            for &i in &tokens {
                for &j in &tokens {
                    let diff = a_s[[j, i]] - a_t[[j, i]];
                    out.attention += diff * diff / count;
                    ga[[j, i]] = 2.0 * diff / count;
                }
            }
            out.grads.add_attn(bs, h, ga);
        }
    }
    out.loss = out.hidden + out.attention;
    Ok(out)
}

/// `Σ_i p_i (ln p_i − ln q_i)` over `rows`, with `0 ln 0 = 0`, plus the
/// derivative with respect to `q`.
fn kl_column(p: ArrayView1<f64>, q: ArrayView1<f64>, rows: &[usize]) -> (f64, Array1<f64>) {
    let mut kl = 0.0;
    let mut dq = Array1::zeros(q.len());
    for &j in rows {
        if p[j] > 0.0 {
            let qj = q[j].max(f64::MIN_POSITIVE);
            kl += p[j] * (p[j].ln() - qj.ln());
            dq[j] = -p[j] / qj;
        }
    }
    (kl, dq)
}

/// Column softmax of `VᵀV / √d_v` over real keys.
fn value_relation(v: &Array2<f64>, mask: &[bool]) -> Array2<f64> {
    let scale = (v.nrows() as f64).sqrt().recip();
    masked_softmax_columns(&(v.t().dot(v) * scale), mask)
}

#[derive(Debug, Clone, Default)]
pub struct MinilmTerm {
    pub attention: f64,
    pub value: f64,
    pub loss: f64,
    pub grads: StateGrads,
}

/// Last-block attention KL plus value-relation KL, each averaged over heads
/// and real query positions.
pub fn minilm_loss(student: &LayerStates, teacher: &LayerStates) -> Result<MinilmTerm> {
    require(ObjectiveKind::Minilm, student, teacher)?;
    crate::distill::check_pair(
        student,
        teacher,
        &LayerAlignment::from_pairs(vec![(0, 0)])?,
    )?;
    if student.depth() == 0 || teacher.depth() == 0 {
        return usage("MiniLM needs at least one block on each side");
    }
    let (bs, bt) = (student.depth() - 1, teacher.depth() - 1);
    let mask = &student.mask;
    let tokens = real_tokens(mask);
    let heads = student.attn[bs].len();
    let count = (heads * tokens.len()) as f64;
    let mut out = MinilmTerm::default();
    for h in 0..heads {
        let (a_s, a_t) = (&student.attn[bs][h], &teacher.attn[bt][h]);
        let mut ga = Array2::zeros(a_s.raw_dim());
        for &i in &tokens {
            let (kl, dq) = kl_column(a_t.column(i), a_s.column(i), &tokens);
            out.attention += kl / count;
            ga.column_mut(i).assign(&(dq / count));
        }
        out.grads.add_attn(bs, h, ga);

        let (v_s, v_t) = (&student.values[bs][h], &teacher.values[bt][h]);
        let (p_s, p_t) = (value_relation(v_s, mask), value_relation(v_t, mask));
        let mut dp = Array2::zeros(p_s.raw_dim());
        for &i in &tokens {
            let (kl, dq) = kl_column(p_t.column(i), p_s.column(i), &tokens);
            out.value += kl / count;
            dp.column_mut(i).assign(&(dq / count));
        }
        let scale = (v_s.nrows() as f64).sqrt().recip();
        let dscores = softmax_columns_backward(&p_s, &dp) * scale;
        let gv = v_s.dot(&(&dscores + &dscores.t()));
        out.grads.add_values(bs, h, gv);
    }
    out.loss = out.attention + out.value;
    Ok(out)
}

/// Objective value for any [`ObjectiveKind`], with gradients on the states.
#[derive(Debug, Clone)]
pub struct BaselineObjective {
    /// `total = logit + λ_aux · aux` for baselines. For CKD the breakdown is
    /// the CKD one and `aux = L_WR + L_LTR`.
    pub breakdown: LossBreakdown,
    pub aux: f64,
    pub grads: StateGrads,
    pub projection_grad: Option<Array2<f64>>,
}

/// Dispatches to the objective named by `kind`.
///
/// Every objective includes the logit term of `config` (α, T). Baselines
/// weight their own term by `config.lambda_ckd`; `LogitOnly` evaluates the CKD
/// objective with `λ_CKD = 0`.
pub fn baseline_objective(
    kind: ObjectiveKind,
    student: &LayerStates,
    teacher: &LayerStates,
    label: usize,
    alignment: &LayerAlignment,
    config: &DistillConfig,
    projection: Option<&Projection>,
) -> Result<BaselineObjective> {
    let ckd = |config: &DistillConfig| -> Result<BaselineObjective> {
        let obj = total_objective(student, teacher, label, alignment, config)?;
        Ok(BaselineObjective {
            aux: obj.breakdown.wr(config) + obj.breakdown.ltr(config),
            breakdown: obj.breakdown,
            grads: obj.grads,
            projection_grad: None,
        })
    };
    let (aux, aux_grads, projection_grad) = match kind {
        ObjectiveKind::Ckd => return ckd(config),
        ObjectiveKind::LogitOnly => {
            let mut obj = ckd(&DistillConfig {
                lambda_ckd: 0.0,
                ..config.clone()
            })?;
            obj.aux = 0.0;
            return Ok(obj);
        }
        ObjectiveKind::DistilbertCos => {
            let t = distilbert_cos_loss(student, teacher, alignment)?;
            (t.loss, t.grads, None)
        }
        ObjectiveKind::PkdPatient => {
            let t = pkd_patient_loss(student, teacher, alignment)?;
            (t.loss, t.grads, None)
        }
        ObjectiveKind::Tinybert => {
            let Some(p) = projection else {
                return usage("tinybert objective needs a projection");
            };
            let t = tinybert_loss(student, teacher, alignment, p)?;
            (t.loss, t.grads, Some(t.projection_grad * config.lambda_ckd))
        }
        ObjectiveKind::Minilm => {
            let t = minilm_loss(student, teacher)?;
            (t.loss, t.grads, None)
        }
    };
    config.validate()?;
    let logit = logit_kd_loss(
        &student.logits,
        &teacher.logits,
        label,
        config.alpha,
        config.temperature,
    )?;
    let mut grads = StateGrads::new();
    grads.add_logits(logit.grad);
    grads.merge_scaled(aux_grads, config.lambda_ckd);
    Ok(BaselineObjective {
        breakdown: LossBreakdown {
            total: logit.loss + config.lambda_ckd * aux,
            logit: logit.loss,
            ..Default::default()
        },
        aux,
        grads,
        projection_grad,
    })
}
