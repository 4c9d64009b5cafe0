//! Matching loss between student and teacher relation sets, with the
//! analytic gradient with respect to the student vectors.

use ndarray::{Array2, ArrayView2};

use super::MatchKind;
use crate::relations::{locality_weights, pairs_with_band, PairKind, Window, EPS};

/// Masked means of the pair and triple discrepancies, and their gradients
/// with respect to the student columns (kept separate so callers can weight
/// them).
#[derive(Debug, Clone)]
pub(crate) struct RelationMatch {
    pub pair: f64,
    pub triple: f64,
    pub pair_grad: Array2<f64>,
    pub triple_grad: Array2<f64>,
}

pub(crate) fn relation_match(
    student: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
    window: Window,
    kind: PairKind,
    match_kind: MatchKind,
    mask: &[bool],
    with_triples: bool,
) -> RelationMatch {
    let n = student.ncols();
    let (t_pair, t_band) = pairs_with_band(teacher, window, kind, mask);
    let (s_pair, band) = pairs_with_band(student, window, kind, mask);

    let mut pair_grad = Array2::zeros(student.raw_dim());
    let mut pair_sum = 0.0;
    let mut coeffs = Vec::new();
    let pw = locality_weights(n, window.pair, Some(mask));
    for i in 0..n {
        for j in 0..n {
            if i != j && pw.pair(i, j) {
                let diff = s_pair[[i, j]] - t_pair[[i, j]];
                pair_sum += match_kind.value(diff);
                coeffs.push((i, j, match_kind.grad(diff)));
            }
        }
    }
    let pair_terms = coeffs.len();
    if pair_terms > 0 {
        let scale = 1.0 / pair_terms as f64;
        for (i, j, g) in coeffs {
            let c = g * scale;
            if c == 0.0 {
                continue;
            }
            let ri = student.column(i);
            let rj = student.column(j);
            match kind {
                PairKind::L2 => {
                    let dist = s_pair[[i, j]];
                    if dist < EPS {
                        continue;
                    }
                    let w = c / dist;
                    for x in 0..student.nrows() {
                        let v = w * (ri[x] - rj[x]);
                        pair_grad[[x, i]] += v;
                        pair_grad[[x, j]] -= v;
                    }
                }
                PairKind::Cosine => {
                    let ni = ri.dot(&ri).sqrt();
                    let nj = rj.dot(&rj).sqrt();
                    if ni < EPS || nj < EPS {
                        continue;
                    }
                    let cos = s_pair[[i, j]];
                    for x in 0..student.nrows() {
                        pair_grad[[x, i]] += c * (rj[x] / (ni * nj) - cos * ri[x] / (ni * ni));
                        pair_grad[[x, j]] += c * (ri[x] / (ni * nj) - cos * rj[x] / (nj * nj));
                    }
                }
            }
        }
    }

    let mut triple_sum = 0.0;
    let mut triple_terms = 0usize;
    let mut triple_grad = Array2::zeros(student.raw_dim());
    if with_triples {
        let d = student.nrows();
        // column-contiguous accumulator, column c at c·d
        let mut acc = vec![0.0; n * d];
        for j in (0..n).filter(|&j| mask[j]) {
            let win = band.window(j);
            let w = win.len();
            let valid: Vec<bool> = win.clone().map(|i| i != j && mask[i]).collect();
            let live: Vec<bool> = win.clone().map(|i| !band.is_guarded(j, i)).collect();
            // ψ_ik = u_i·u_k for every i, k in the window; guarded rows are zero
            let us = band.block(j);
            let ut = t_band.block(j);
            let ps = us.dot(&us.t()).as_standard_layout().into_owned();
            let pt = ut.dot(&ut.t()).as_standard_layout().into_owned();
            let (ps, pt) = (ps.as_slice().expect("standard layout"), pt.as_slice().expect("standard layout"));
            let mut coef = Array2::<f64>::zeros((w, w));
            let mut row_psi = vec![0.0; w];
            {
                let cs = coef.as_slice_mut().expect("owned");
                for a in (0..w).filter(|&a| valid[a]) {
                    for b in (0..w).filter(|&b| valid[b]) {
                        let sv = ps[a * w + b].clamp(-1.0, 1.0);
                        let diff = sv - pt[a * w + b].clamp(-1.0, 1.0);
                        triple_sum += match_kind.value(diff);
                        triple_terms += 1;
                        if a != b && live[a] && live[b] {
                            let g = match_kind.grad(diff);
                            cs[a * w + b] = g;
                            row_psi[a] += g * sv;
                        }
                    }
                }
            }
            // ∂ψ_ik/∂r_i = (u_k − ψ u_i)/‖r_i − r_j‖; (i, k) and (k, i) both
            // count, and r_j receives the negated sum.
            let cu = coef.dot(&us).as_standard_layout().into_owned();
            let (cu, us) = (cu.as_slice().expect("standard layout"), us.as_slice().expect("contiguous band"));
            let mut gj = vec![0.0; d];
            for a in (0..w).filter(|&a| valid[a] && live[a]) {
                let i = win.start + a;
                let f = 2.0 / band.norm(j, i);
                let (c, u) = (&cu[a * d..(a + 1) * d], &us[a * d..(a + 1) * d]);
                let gi = &mut acc[i * d..(i + 1) * d];
                for x in 0..d {
                    let v = f * (c[x] - row_psi[a] * u[x]);
                    gi[x] += v;
                    gj[x] += v;
                }
            }
            acc[j * d..(j + 1) * d].iter_mut().zip(&gj).for_each(|(a, g)| *a -= g);
        }
        if triple_terms > 0 {
            let scale = 1.0 / triple_terms as f64;
            acc.iter_mut().for_each(|v| *v *= scale);
            triple_grad = Array2::from_shape_vec((n, d), acc)
                .expect("n·d accumulator")
                .reversed_axes();
        }
    }

    RelationMatch {
        pair: if pair_terms > 0 { pair_sum / pair_terms as f64 } else { 0.0 },
        triple: if triple_terms > 0 { triple_sum / triple_terms as f64 } else { 0.0 },
        pair_grad,
        triple_grad,
    }
}
