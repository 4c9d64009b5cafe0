//! Finite-difference checks of every loss, and the compatibility table.

use ckd_core::baselines::{
    check_compatibility, distilbert_cos_loss, minilm_loss, pkd_patient_loss, tinybert_loss, ObjectiveKind,
    Projection,
};
use ckd_core::distill::{
    align_layers, ckd_ltr_loss, ckd_wr_loss, logit_kd_loss, total_objective, CkdTerm, DistillConfig,
    LayerAlignment,
};
use ckd_core::gradcheck::{gradcheck, gradcheck_params, GradcheckReport};
use ckd_core::model::{backward, encoder_forward, LayerStates, ModelConfig, ParamSet, StateGrads, TokenSequence};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One gradient check: a loss against one group of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub target: String,
    /// `params`, `reps`, `logits` or `projection`.
    pub wrt: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl CheckRow {
    fn new(target: &str, wrt: &str, r: GradcheckReport) -> Self {
        Self {
            target: target.into(),
            wrt: wrt.into(),
            checked: r.checked,
            max_rel_error: r.max_rel_error,
            worst: r.worst_tensor.unwrap_or_else(|| format!("[{}]", r.worst_index)),
        }
    }
}

/// Shapes of the checked models.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSetup {
    pub student: ModelConfig,
    pub teacher: ModelConfig,
    /// Teacher for objectives that need equal embedding sizes.
    pub equal_dim_teacher: ModelConfig,
    pub tokens: TokenSequence,
    pub label: usize,
    pub init_std: f64,
    pub eps: f64,
    pub seed: u64,
}

fn arch(layers: usize, d: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: d,
        num_heads: heads,
        ffn_dim: 2 * d,
        vocab_size: 12,
        max_seq_len: 8,
        num_classes: 3,
        dropout: 0.0,
    }
}

impl Default for CheckSetup {
    fn default() -> Self {
        Self {
            student: arch(2, 16, 2),
            teacher: arch(3, 24, 2),
            equal_dim_teacher: arch(3, 16, 2),
            tokens: TokenSequence::new(vec![1, 4, 9, 3, 7, 5, 0], vec![true, true, true, true, true, true, false])
                .expect("valid sequence"),
            label: 1,
            init_std: 0.4,
            eps: ckd_core::gradcheck::DEFAULT_EPS,
            seed: 0,
        }
    }
}

fn flat(a: &[Array2<f64>]) -> Vec<f64> {
    a.iter().flat_map(|m| m.iter().copied()).collect()
}

fn with_reps(states: &LayerStates, v: &[f64]) -> LayerStates {
    let mut reps = states.reps.clone();
    let mut off = 0;
    for r in &mut reps {
        for x in r.iter_mut() {
            *x = v[off];
            off += 1;
        }
    }
    LayerStates::from_parts(reps, states.attn.clone(), states.values.clone(), states.logits.clone(), states.mask.clone())
}

/// Dense gradient over all representations from a sparse [`StateGrads`].
fn reps_grad(states: &LayerStates, g: &StateGrads) -> Vec<f64> {
    let full: Vec<Array2<f64>> = (0..states.reps.len())
        .map(|t| g.reps.get(&t).cloned().unwrap_or_else(|| Array2::zeros(states.reps[t].raw_dim())))
        .collect();
    flat(&full)
}

type CkdLoss = fn(&LayerStates, &LayerStates, &LayerAlignment, &DistillConfig) -> ckd_core::Result<CkdTerm>;

/// Checks each distillation loss against central differences over every
/// student parameter, and the relation losses also over every student
/// representation.
pub fn loss_gradchecks(setup: &CheckSetup) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let student = ParamSet::init(&setup.student, setup.init_std, &mut rng);
    let teacher = ParamSet::init(&setup.teacher, setup.init_std, &mut rng);
    let teacher16 = ParamSet::init(&setup.equal_dim_teacher, setup.init_std, &mut rng);
    let (tok, label, eps) = (&setup.tokens, setup.label, setup.eps);
    let align = align_layers(setup.teacher.num_layers, setup.student.num_layers)?;
    let cfg = DistillConfig {
        delta: 2,
        ..Default::default()
    };
    let s = encoder_forward(tok, &student)?;
    let t = encoder_forward(tok, &teacher)?;
    let t16 = encoder_forward(tok, &teacher16)?;
    let mut rows = Vec::new();

    // parameter check of a loss given as states → (value, state gradients)
    let mut by_params = |name: &str, f: &dyn Fn(&LayerStates) -> ckd_core::Result<(f64, StateGrads)>| -> Result<()> {
        let (_, up) = f(&s)?;
        let g = backward(&student, &s, &up)?;
        let report = gradcheck_params(
            &student,
            |p| {
                let st = encoder_forward(tok, p).expect("probe forward");
                f(&st).expect("probe loss").0
            },
            &g.params,
            eps,
        )?;
        rows.push(CheckRow::new(name, "params", report));
        Ok(())
    };

    let ckd_losses: [(&str, CkdLoss); 2] = [("ckd_wr_loss", ckd_wr_loss), ("ckd_ltr_loss", ckd_ltr_loss)];
    for (name, loss) in ckd_losses {
        by_params(name, &|st| loss(st, &t, &align, &cfg).map(|c| (c.weighted, c.grads)))?;
    }
    by_params("logit_kd_loss", &|st| {
        let l = logit_kd_loss(&st.logits, &t.logits, label, cfg.alpha, cfg.temperature)?;
        let mut g = StateGrads::new();
        g.add_logits(l.grad);
        Ok((l.loss, g))
    })?;
    by_params("total_objective", &|st| {
        total_objective(st, &t, label, &align, &cfg).map(|o| (o.breakdown.total, o.grads))
    })?;
    by_params("distilbert_cos_loss", &|st| {
        distilbert_cos_loss(st, &t16, &align).map(|b| (b.loss, b.grads))
    })?;
    by_params("pkd_patient_loss", &|st| pkd_patient_loss(st, &t16, &align).map(|b| (b.loss, b.grads)))?;
    let proj = Projection {
        w: Array2::from_shape_fn((setup.teacher.hidden_dim, setup.student.hidden_dim), |_| {
            rng.random_range(-0.5..0.5)
        }),
    };
    by_params("tinybert_loss", &|st| {
        tinybert_loss(st, &t, &align, &proj).map(|b| (b.loss, b.grads))
    })?;
    by_params("minilm_loss", &|st| minilm_loss(st, &t).map(|b| (b.loss, b.grads)))?;

    for (name, loss) in ckd_losses {
        let term = loss(&s, &t, &align, &cfg)?;
        let report = gradcheck(
            |v| loss(&with_reps(&s, v), &t, &align, &cfg).expect("probe loss").weighted,
            &flat(&s.reps),
            &reps_grad(&s, &term.grads),
            eps,
        )?;
        rows.push(CheckRow::new(name, "reps", report));
    }

    let l = logit_kd_loss(&s.logits, &t.logits, label, cfg.alpha, cfg.temperature)?;
    let report = gradcheck(
        |z| {
            logit_kd_loss(&Array1::from(z.to_vec()), &t.logits, label, cfg.alpha, cfg.temperature)
                .expect("probe loss")
                .loss
        },
        s.logits.as_slice().expect("contiguous logits"),
        l.grad.as_slice().expect("contiguous gradient"),
        eps,
    )?;
    rows.push(CheckRow::new("logit_kd_loss", "logits", report));

    let tb = tinybert_loss(&s, &t, &align, &proj)?;
    let report = gradcheck(
        |w| {
            let p = Projection {
                w: Array2::from_shape_vec(proj.w.raw_dim(), w.to_vec()).expect("projection shape"),
            };
            tinybert_loss(&s, &t, &align, &p).expect("probe loss").loss
        },
        proj.w.as_slice().expect("contiguous projection"),
        tb.projection_grad.as_slice().expect("contiguous gradient"),
        eps,
    )?;
    rows.push(CheckRow::new("tinybert_loss", "projection", report));
    Ok(rows)
}

/// One line of the compatibility table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatRow {
    pub teacher: String,
    pub student: String,
    pub objective: String,
    pub compatible: bool,
    /// Violated constraints, `;`-separated.
    pub violations: String,
}

/// `L/d/h` label of an architecture.
pub fn arch_label(c: &ModelConfig) -> String {
    format!("{}/{}/{}", c.num_layers, c.hidden_dim, c.num_heads)
}

pub fn compat_table(pairs: &[(ModelConfig, ModelConfig)]) -> Vec<CompatRow> {
    let mut rows = Vec::new();
    for (t, s) in pairs {
        for kind in ObjectiveKind::ALL {
            let v = check_compatibility(t, s, kind);
            rows.push(CompatRow {
                teacher: arch_label(t),
                student: arch_label(s),
                objective: kind.name().into(),
                compatible: v.is_empty(),
                violations: v.iter().map(|x| x.constraint()).collect::<Vec<_>>().join(";"),
            });
        }
    }
    rows
}

/// Teacher/student pairs at BERT-like and desk scales, including equal and
/// mismatched embedding sizes and head counts.
pub fn compat_grid() -> Vec<(ModelConfig, ModelConfig)> {
    let c = |layers, d, heads| ModelConfig {
        num_layers: layers,
        hidden_dim: d,
        num_heads: heads,
        ffn_dim: 4 * d,
        vocab_size: 30,
        max_seq_len: 16,
        num_classes: 2,
        dropout: 0.0,
    };
    vec![
        (c(12, 768, 12), c(6, 768, 12)),
        (c(12, 768, 12), c(4, 312, 12)),
        (c(12, 768, 12), c(4, 512, 8)),
        (c(12, 768, 12), c(6, 384, 12)),
        (c(12, 768, 12), c(4, 768, 8)),
        (c(12, 768, 12), c(3, 384, 6)),
        (c(24, 1024, 16), c(6, 768, 12)),
        (c(4, 64, 4), c(2, 32, 2)),
        (c(4, 64, 4), c(2, 64, 4)),
        (c(4, 64, 4), c(2, 32, 4)),
        (c(4, 64, 4), c(2, 64, 2)),
        (c(3, 24, 2), c(2, 16, 2)),
    ]
}
