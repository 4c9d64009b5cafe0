use super::relation_match::relation_match;
use super::{check_pair, CkdTerm, DistillConfig, LayerAlignment};
use crate::error::{usage, Result};
use crate::model::{LayerStates, StateGrads};
use crate::relations::Window;

/// Word-relation loss: for each aligned `(student, teacher)` layer, the
/// masked mean discrepancy of pair relations among word representations plus
/// `λ_WR` times that of windowed triple angles, summed over aligned layers.
///
/// Gradients are returned for the student representations only.
pub fn ckd_wr_loss(
    student: &LayerStates,
    teacher: &LayerStates,
    alignment: &LayerAlignment,
    config: &DistillConfig,
) -> Result<CkdTerm> {
    check_pair(student, teacher, alignment)?;
    let window = Window {
        pair: if config.window_pairs {
            config.delta
        } else {
            usize::MAX
        },
        triple: config.delta,
    };
    let mut out = CkdTerm::default();
    for &(s, t) in &alignment.pairs {
        let m = relation_match(
            student.reps[s].view(),
            teacher.reps[t].view(),
            window,
            config.pair_kind,
            config.match_kind,
            &student.mask,
            true,
        );
        out.pair += m.pair;
        out.triple += m.triple;
        let grad = m.pair_grad + &(m.triple_grad * config.lambda_wr);
        out.grads.add_rep(s, grad);
    }
    out.weighted = out.pair + config.lambda_wr * out.triple;
    Ok(out)
}

pub(crate) fn check_masks(student: &LayerStates, teacher: &LayerStates) -> Result<()> {
    if student.seq_len() != teacher.seq_len() {
        return usage(format!(
            "student saw {} tokens, teacher {}",
            student.seq_len(),
            teacher.seq_len()
        ));
    }
    if student.mask != teacher.mask {
        return usage("student and teacher padding masks differ");
    }
    Ok(())
}

impl CkdTerm {
    pub(crate) fn empty() -> Self {
        Self {
            grads: StateGrads::new(),
            ..Default::default()
        }
    }
}
