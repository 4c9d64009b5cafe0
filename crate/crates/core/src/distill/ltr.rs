use ndarray::Array2;

use super::relation_match::relation_match;
use super::{check_pair, CkdTerm, DistillConfig, LayerAlignment};
use crate::error::Result;
use crate::model::LayerStates;
use crate::relations::Window;

/// Layer-transforming-relation loss: for every real word, relations among its
/// representations at the aligned layer indices (its trajectory), compared
/// between student and teacher with all weights 1 and averaged over words.
///
/// Fewer than two aligned indices give a zero pair term and fewer than three
/// a zero triple term.
pub fn ckd_ltr_loss(
    student: &LayerStates,
    teacher: &LayerStates,
    alignment: &LayerAlignment,
    config: &DistillConfig,
) -> Result<CkdTerm> {
    check_pair(student, teacher, alignment)?;
    let points = alignment.len();
    let words: Vec<usize> = (0..student.seq_len()).filter(|&w| student.mask[w]).collect();
    let mut out = CkdTerm::empty();
    if points < 2 || words.is_empty() {
        return Ok(out);
    }
    let ds = student.hidden_dim();
    let dt = teacher.hidden_dim();
    let per_word = 1.0 / words.len() as f64;
    let all = vec![true; points];
    let mut grads: Vec<Array2<f64>> = alignment
        .pairs
        .iter()
        .map(|&(s, _)| Array2::zeros(student.reps[s].raw_dim()))
        .collect();
    for &w in &words {
        let traj_s = Array2::from_shape_fn((ds, points), |(x, p)| {
            student.reps[alignment.pairs[p].0][[x, w]]
        });
        let traj_t = Array2::from_shape_fn((dt, points), |(x, p)| {
            teacher.reps[alignment.pairs[p].1][[x, w]]
        });
        let m = relation_match(
            traj_s.view(),
            traj_t.view(),
            Window::full(),
            config.pair_kind,
            config.match_kind,
            &all,
            points >= 3,
        );
        out.pair += m.pair * per_word;
        out.triple += m.triple * per_word;
        let g = (m.pair_grad + &(m.triple_grad * config.lambda_ltr)) * per_word;
        for (p, grad) in grads.iter_mut().enumerate() {
            let mut col = grad.column_mut(w);
            col += &g.column(p);
        }
    }
    for (&(s, _), g) in alignment.pairs.iter().zip(grads) {
        out.grads.add_rep(s, g);
    }
    out.weighted = out.pair + config.lambda_ltr * out.triple;
    Ok(out)
}
