//! Pair-wise and triple-wise relations among representation vectors.
//!
//! Inputs are `d × n` matrices whose columns are the vectors being related
//! (word representations of one layer, or one word's trajectory across
//! layers). Pair relations are cosine similarity or Euclidean distance;
//! triple relations are the cosine of the angle at the middle vertex.
//!
//! The windowed kernel only relates positions within `δ` of the vertex `j`.
//! It materialises the unit relative vectors `(r_i − r_j)/‖r_i − r_j‖` in an
//! `n × (2δ+1) × d` band instead of the full `n × n × d` tensor, and gets
//! pair distances from `‖r_i‖² + ‖r_j‖² − 2⟨r_i, r_j⟩` without any
//! intermediate.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

/// Guard for divisions by near-zero norms.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    /// Cosine similarity in `[−1, 1]`.
    Cosine,
    /// Euclidean distance.
    #[default]
    L2,
}

impl std::str::FromStr for PairKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "l2" => Ok(Self::L2),
            _ => Err(format!("unknown pair kind {s:?} (cosine|l2)")),
        }
    }
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn pair_relation(a: ArrayView1<f64>, b: ArrayView1<f64>, kind: PairKind) -> f64 {
    match kind {
        PairKind::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na < EPS || nb < EPS {
                0.0
            } else {
                (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
            }
        }
        PairKind::L2 => a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Cosine of the angle at `r_j`, or `None` when `r_i` or `r_k` coincides with
/// `r_j` (within [`EPS`]).
pub fn triple_angle_checked(
    ri: ArrayView1<f64>,
    rj: ArrayView1<f64>,
    rk: ArrayView1<f64>,
) -> Option<f64> {
    let a = &ri - &rj;
    let b = &rk - &rj;
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < EPS || nb < EPS {
        return None;
    }
    let ua = a / na;
    let ub = b / nb;
    Some(ua.dot(&ub).clamp(-1.0, 1.0))
}

/// Cosine of the angle at `r_j`; 0 for degenerate triples.
pub fn triple_angle(ri: ArrayView1<f64>, rj: ArrayView1<f64>, rk: ArrayView1<f64>) -> f64 {
    triple_angle_checked(ri, rj, rk).unwrap_or(0.0)
}

/// 0/1 locality weights: `w_ij = 1` iff `|i−j| ≤ δ`, `w_ijk = 1` iff
/// `|i−j| ≤ δ` and `|k−j| ≤ δ`, and all involved positions are real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalityWeights {
    pub delta: usize,
    pub mask: Vec<bool>,
}

pub fn locality_weights(n: usize, delta: usize, mask: Option<&[bool]>) -> LocalityWeights {
    let mask = match mask {
        Some(m) => {
            assert_eq!(m.len(), n, "mask length");
            m.to_vec()
        }
        None => vec![true; n],
    };
    LocalityWeights { delta, mask }
}

impl LocalityWeights {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn pair(&self, i: usize, j: usize) -> bool {
        self.mask[i] && self.mask[j] && i.abs_diff(j) <= self.delta
    }

    pub fn triple(&self, i: usize, j: usize, k: usize) -> bool {
        self.pair(i, j) && self.pair(k, j)
    }

    pub fn pair_matrix(&self) -> Array2<f64> {
        let n = self.len();
        Array2::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(self.pair(i, j))))
    }
}

/// Windows for pairs and triples. `usize::MAX` means unwindowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub pair: usize,
    pub triple: usize,
}

impl Window {
    pub fn both(delta: usize) -> Self {
        Self {
            pair: delta,
            triple: delta,
        }
    }

    pub fn full() -> Self {
        Self::both(usize::MAX)
    }
}

/// Instrumentation of one kernel call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct KernelStats {
    /// Multiply-adds spent on triple angle dot products.
    pub triple_ops: u64,
    /// Multiply-adds spent building relative vectors and pair relations.
    pub prep_ops: u64,
    /// Elements of auxiliary (non-output) storage allocated.
    pub aux_elems: usize,
    /// Relative vectors that hit the ε-guard.
    pub guarded: usize,
}

/// Unit relative vectors `(r_i − r_j)/‖r_i − r_j‖` for every real `i ≠ j`
/// within `δ` of each vertex `j`, stored as an `n × (2δ+1) × d` band.
#[derive(Debug, Clone)]
pub(crate) struct AngleBand {
    pub n: usize,
    pub d: usize,
    pub delta: usize,
    width: usize,
    unit: Vec<f64>,
    norm: Vec<f64>,
    guarded: usize,
}

impl AngleBand {
    pub fn build(r: ArrayView2<f64>, delta: usize, mask: &[bool], stats: &mut KernelStats) -> Self {
        let (d, n) = r.dim();
        let delta = delta.min(n.saturating_sub(1));
        let width = 2 * delta + 1;
        let mut band = Self {
            n,
            d,
            delta,
            width,
            unit: vec![0.0; n * width * d],
            norm: vec![0.0; n * width],
            guarded: 0,
        };
        stats.aux_elems += band.unit.len() + band.norm.len();
        let live = |j: usize, i: usize| mask[j] && i != j && mask[i];
        // rows of r are contiguous, so fill differences one coordinate at a time
        for (x, row) in r.rows().into_iter().enumerate() {
            for j in 0..n {
                for i in band.window(j) {
                    if live(j, i) {
                        let s = band.slot(j, i);
                        band.unit[s * d + x] = row[i] - row[j];
                    }
                }
            }
        }
        for j in 0..n {
            for i in band.window(j) {
                if !live(j, i) {
                    continue;
                }
                let s = band.slot(j, i);
                let u = &mut band.unit[s * d..(s + 1) * d];
                let nrm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                stats.prep_ops += 3 * d as u64;
                if nrm < EPS {
                    u.fill(0.0);
                    band.guarded += 1;
                } else {
                    u.iter_mut().for_each(|x| *x /= nrm);
                }
                band.norm[s] = nrm;
            }
        }
        stats.guarded += band.guarded;
        band
    }

    pub fn window(&self, j: usize) -> std::ops::Range<usize> {
        j.saturating_sub(self.delta)..(j + self.delta + 1).min(self.n)
    }

    fn slot(&self, j: usize, i: usize) -> usize {
        j * self.width + (i + self.delta - j)
    }

    pub fn unit(&self, j: usize, i: usize) -> &[f64] {
        let s = self.slot(j, i);
        &self.unit[s * self.d..(s + 1) * self.d]
    }

    pub fn norm(&self, j: usize, i: usize) -> f64 {
        self.norm[self.slot(j, i)]
    }

    pub fn is_guarded(&self, j: usize, i: usize) -> bool {
        self.norm(j, i) < EPS
    }

    /// Unit vectors of every `i` in `window(j)`, one row each.
    pub fn block(&self, j: usize) -> ArrayView2<'_, f64> {
        let w = self.window(j);
        let first = self.slot(j, w.start) * self.d;
        ArrayView2::from_shape((w.len(), self.d), &self.unit[first..first + w.len() * self.d])
            .expect("band rows are contiguous")
    }

    pub fn angle(&self, j: usize, i: usize, k: usize) -> f64 {
        let u = self.unit(j, i);
        let v = self.unit(j, k);
        u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0)
    }
}

/// All masked pair and triple relations of one set of vectors.
#[derive(Debug, Clone)]
pub struct RelationSet {
    pub kind: PairKind,
    pub window: Window,
    pub mask: Vec<bool>,
    /// `n × n`; entries outside the pair window are 0.
    pub pair: Array2<f64>,
    tri_delta: usize,
    tri_width: usize,
    triples: Vec<f64>,
    pub stats: KernelStats,
}

impl RelationSet {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn pair_weights(&self) -> LocalityWeights {
        locality_weights(self.len(), self.window.pair, Some(&self.mask))
    }

    pub fn triple_weights(&self) -> LocalityWeights {
        locality_weights(self.len(), self.window.triple, Some(&self.mask))
    }

    /// Pair relation for an off-diagonal pair inside the window.
    pub fn pair_value(&self, i: usize, j: usize) -> Option<f64> {
        (i != j && self.pair_weights().pair(i, j)).then(|| self.pair[[i, j]])
    }

    /// Triple relation for a non-degenerate triple inside the window.
    pub fn triple(&self, i: usize, j: usize, k: usize) -> Option<f64> {
        let d = self.tri_delta;
        let inside = |a: usize| a != j && a < self.mask.len() && self.mask[a] && a.abs_diff(j) <= d;
        if j >= self.mask.len() || !self.mask[j] || !inside(i) || !inside(k) {
            return None;
        }
        let base = j * self.tri_width * self.tri_width;
        let si = i + self.tri_delta - j;
        let sk = k + self.tri_delta - j;
        Some(self.triples[base + si * self.tri_width + sk])
    }

    /// Every defined triple as `(i, j, k, value)`, ordered by `j`, then `i`, then `k`.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        let n = self.len();
        let d = self.tri_delta;
        (0..n).flat_map(move |j| {
            let lo = j.saturating_sub(d);
            let hi = (j + d + 1).min(n);
            (lo..hi).flat_map(move |i| {
                (lo..hi).filter_map(move |k| self.triple(i, j, k).map(|v| (i, j, k, v)))
            })
        })
    }
}

fn check_input(r: &ArrayView2<f64>, mask: &[bool]) {
    assert_eq!(r.ncols(), mask.len(), "mask length must equal column count");
}

/// Pair relations via the Gram identity. Touches only `O(n)` extra storage.
fn pair_matrix(
    r: ArrayView2<f64>,
    kind: PairKind,
    weights: &LocalityWeights,
    stats: &mut KernelStats,
) -> Array2<f64> {
    let n = r.ncols();
    let d = r.nrows() as u64;
    let sq: Vec<f64> = r.columns().into_iter().map(|c| c.dot(&c)).collect();
    stats.aux_elems += n;
    stats.prep_ops += n as u64 * d;
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            if !weights.pair(i, j) {
                continue;
            }
            let ip = r.column(i).dot(&r.column(j));
            stats.prep_ops += d;
            let v = match kind {
                PairKind::L2 => (sq[i] + sq[j] - 2.0 * ip).max(0.0).sqrt(),
                PairKind::Cosine => {
                    let (ni, nj) = (sq[i].sqrt(), sq[j].sqrt());
                    if ni < EPS || nj < EPS {
                        0.0
                    } else {
                        (ip / (ni * nj)).clamp(-1.0, 1.0)
                    }
                }
            };
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
        if weights.mask[i] {
            out[[i, i]] = match kind {
                PairKind::L2 => 0.0,
                PairKind::Cosine => f64::from(u8::from(sq[i].sqrt() >= EPS)),
            };
        }
    }
    out
}

/// Pair relations and the angle band, without enumerating triples.
pub(crate) fn pairs_with_band(
    r: ArrayView2<f64>,
    window: Window,
    kind: PairKind,
    mask: &[bool],
) -> (Array2<f64>, AngleBand) {
    check_input(&r, mask);
    let mut stats = KernelStats::default();
    let pair = pair_matrix(r, kind, &locality_weights(r.ncols(), window.pair, Some(mask)), &mut stats);
    (pair, AngleBand::build(r, window.triple, mask, &mut stats))
}

pub(crate) fn windowed_with_band(
    r: ArrayView2<f64>,
    window: Window,
    kind: PairKind,
    mask: &[bool],
) -> (RelationSet, AngleBand) {
    check_input(&r, mask);
    let n = r.ncols();
    let mut stats = KernelStats::default();
    let pair = pair_matrix(r, kind, &locality_weights(n, window.pair, Some(mask)), &mut stats);
    let band = AngleBand::build(r, window.triple, mask, &mut stats);
    let tri_delta = band.delta;
    let tri_width = 2 * tri_delta + 1;
    let mut triples = vec![0.0; n * tri_width * tri_width];
    let d = band.d as u64;
    for j in 0..n {
        if !mask[j] {
            continue;
        }
        let win = band.window(j);
        for i in win.clone() {
            if i == j || !mask[i] {
                continue;
            }
            // ψ is symmetric in (i, k): compute once, store both orders
            for k in i..win.end {
                if k == j || !mask[k] {
                    continue;
                }
                let v = band.angle(j, i, k);
                stats.triple_ops += d;
                let si = i + tri_delta - j;
                let sk = k + tri_delta - j;
                let base = j * tri_width * tri_width;
                triples[base + si * tri_width + sk] = v;
                triples[base + sk * tri_width + si] = v;
            }
        }
    }
    let set = RelationSet {
        kind,
        window: Window {
            pair: window.pair,
            triple: tri_delta,
        },
        mask: mask.to_vec(),
        pair,
        tri_delta,
        tri_width,
        triples,
        stats,
    };
    (set, band)
}

/// Windowed evaluation of all masked pair and triple relations.
///
/// Auxiliary memory is `n·(2δ+1)·(d+1) + n` elements; triple arithmetic is
/// `d` multiply-adds per unordered pair `{i, k}` of non-degenerate windowed triples.
pub fn windowed_relations(
    r: ArrayView2<f64>,
    delta: usize,
    kind: PairKind,
    mask: &[bool],
) -> RelationSet {
    windowed_with_band(r, Window::both(delta), kind, mask).0
}

/// Same as [`windowed_relations`] with separate pair and triple windows.
pub fn windowed_relations_with(
    r: ArrayView2<f64>,
    window: Window,
    kind: PairKind,
    mask: &[bool],
) -> RelationSet {
    windowed_with_band(r, window, kind, mask).0
}

/// Reference kernel: materialises the full `n × n × d` relative tensor and
/// evaluates every one of the `n³` index triples before applying weights.
pub fn naive_relations(
    r: ArrayView2<f64>,
    delta: usize,
    kind: PairKind,
    mask: &[bool],
) -> RelationSet {
    check_input(&r, mask);
    let (d, n) = r.dim();
    let mut stats = KernelStats::default();
    let weights = locality_weights(n, delta, Some(mask));
    let mut pair = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if weights.pair(i, j) {
                pair[[i, j]] = pair_relation(r.column(i), r.column(j), kind);
                stats.prep_ops += d as u64;
            }
        }
    }

    let mut rel = vec![0.0; n * n * d];
    stats.aux_elems += rel.len();
    for j in 0..n {
        for i in 0..n {
            let u = &mut rel[(j * n + i) * d..(j * n + i + 1) * d];
            let mut sq = 0.0;
            for (x, (a, b)) in u.iter_mut().zip(r.column(i).iter().zip(r.column(j).iter())) {
                *x = a - b;
                sq += *x * *x;
            }
            let nrm = sq.sqrt();
            if nrm < EPS {
                u.fill(0.0);
            } else {
                u.iter_mut().for_each(|x| *x /= nrm);
            }
            stats.prep_ops += 3 * d as u64;
        }
    }

    let tri_delta = delta.min(n.saturating_sub(1));
    let tri_width = 2 * tri_delta + 1;
    let mut triples = vec![0.0; n * tri_width * tri_width];
    for j in 0..n {
        for i in 0..n {
            let u = &rel[(j * n + i) * d..(j * n + i + 1) * d];
            for k in 0..n {
                let v = &rel[(j * n + k) * d..(j * n + k + 1) * d];
                let c = u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
                stats.triple_ops += d as u64;
                if i != j && k != j && weights.triple(i, j, k) {
                    let si = i + tri_delta - j;
                    let sk = k + tri_delta - j;
                    triples[j * tri_width * tri_width + si * tri_width + sk] = c;
                }
            }
        }
    }
    RelationSet {
        kind,
        window: Window {
            pair: delta,
            triple: tri_delta,
        },
        mask: mask.to_vec(),
        pair,
        tri_delta,
        tri_width,
        triples,
        stats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_vectors() {
        let a = arr1(&[0.3, -1.2, 2.0]);
        assert_abs_diff_eq!(pair_relation(a.view(), a.view(), PairKind::Cosine), 1.0, epsilon = 1e-15);
        assert_eq!(pair_relation(a.view(), a.view(), PairKind::L2), 0.0);
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0, 1.0]);
        assert_eq!(pair_relation(a.view(), b.view(), PairKind::Cosine), 0.0);
        assert_abs_diff_eq!(pair_relation(a.view(), b.view(), PairKind::L2), 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn cosine_with_zero_vector_is_zero() {
        let z = Array1::<f64>::zeros(3);
        let a = arr1(&[1.0, 2.0, 3.0]);
        assert_eq!(pair_relation(z.view(), a.view(), PairKind::Cosine), 0.0);
    }

    #[test]
    fn random_pair_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        let mut diff = 0.0;
        for k in 0..16 {
            ab += a[k] * b[k];
            aa += a[k] * a[k];
            bb += b[k] * b[k];
            diff += (a[k] - b[k]).powi(2);
        }
        let (va, vb) = (arr1(&a), arr1(&b));
        assert_abs_diff_eq!(
            pair_relation(va.view(), vb.view(), PairKind::Cosine),
            ab / (aa.sqrt() * bb.sqrt()),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(pair_relation(va.view(), vb.view(), PairKind::L2), diff.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn angle_examples() {
        let o = arr1(&[0.0, 0.0]);
        let x = arr1(&[1.0, 0.0]);
        let y = arr1(&[0.0, 1.0]);
        let back = arr1(&[-2.0, 0.0]);
        assert_eq!(triple_angle(x.view(), o.view(), y.view()), 0.0);
        assert_abs_diff_eq!(triple_angle(y.view(), x.view(), y.view()), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(triple_angle(x.view(), o.view(), back.view()), -1.0, epsilon = 1e-15);
        assert_eq!(triple_angle_checked(x.view(), x.view(), y.view()), None);
        assert_eq!(triple_angle(x.view(), x.view(), y.view()), 0.0);
    }

    #[test]
    fn locality_masks() {
        let w = locality_weights(4, 3, None);
        assert!((0..4).all(|i| (0..4).all(|j| w.pair(i, j))));
        let w = locality_weights(4, 0, None);
        assert_eq!(w.pair_matrix(), Array2::eye(4));
        assert!(w.triple(2, 2, 2));
        assert!(!w.triple(1, 2, 2));
        let w = locality_weights(5, 1, None);
        let m = w.pair_matrix();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m[[i, j]] == 1.0, i.abs_diff(j) <= 1);
            }
        }
        let w = locality_weights(3, 5, Some(&[true, false, true]));
        assert!(!w.pair(0, 1));
        assert!(w.pair(0, 2));
    }

    #[test]
    fn repeated_column_is_degenerate() {
        let r = Array2::from_shape_fn((3, 5), |(k, _)| k as f64 + 0.5);
        let set = windowed_relations(r.view(), 2, PairKind::L2, &[true; 5]);
        assert!(set.pair.iter().all(|&v| v == 0.0));
        assert!(set.triples().all(|(_, _, _, v)| v == 0.0));
        assert!(set.triples().count() > 0);
        assert!(set.stats.guarded > 0);
    }

    #[test]
    fn op_count_ratio_follows_window_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Array2::from_shape_fn((16, 64), |_| rng.random_range(-1.0..1.0));
        let a = windowed_relations(r.view(), 4, PairKind::L2, &[true; 64]).stats.triple_ops;
        let b = windowed_relations(r.view(), 8, PairKind::L2, &[true; 64]).stats.triple_ops;
        let ratio = a as f64 / b as f64;
        assert!((ratio / 0.25 - 1.0).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn naive_and_windowed_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = Array2::from_shape_fn((4, 9), |_| rng.random_range(-1.0..1.0));
        let mask = [true, true, true, true, true, true, true, false, false];
        for delta in [1, 3, 8] {
            let a = windowed_relations(r.view(), delta, PairKind::L2, &mask);
            let b = naive_relations(r.view(), delta, PairKind::L2, &mask);
            let ta: Vec<_> = a.triples().collect();
            let tb: Vec<_> = b.triples().collect();
            assert_eq!(ta.len(), tb.len());
            for (x, y) in ta.iter().zip(&tb) {
                assert_eq!((x.0, x.1, x.2), (y.0, y.1, y.2));
                assert_abs_diff_eq!(x.3, y.3, epsilon = 1e-12);
            }
            for (x, y) in a.pair.iter().zip(b.pair.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }
}
