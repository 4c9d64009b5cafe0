#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// `rows × cols` matrix with orthonormal columns (`rows ≥ cols`), by
/// Gram–Schmidt on a random matrix.
pub fn orthonormal_columns<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    assert!(rows >= cols);
    let mut q = random_matrix(rng, rows, cols);
    for c in 0..cols {
        for p in 0..c {
            let proj = q.column(c).dot(&q.column(p));
            let prev = q.column(p).to_owned();
            q.column_mut(c).scaled_add(-proj, &prev);
        }
        let norm = q.column(c).dot(&q.column(c)).sqrt();
        q.column_mut(c).mapv_inplace(|x| x / norm);
    }
    q
}

/// Direct angle formula, independent of the library kernels.
pub fn angle_oracle(r: &Array2<f64>, i: usize, j: usize, k: usize) -> f64 {
    let d = r.nrows();
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for x in 0..d {
        let a = r[[x, i]] - r[[x, j]];
        let b = r[[x, k]] - r[[x, j]];
        ab += a * b;
        aa += a * a;
        bb += b * b;
    }
    if aa.sqrt() < 1e-8 || bb.sqrt() < 1e-8 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

pub fn distance_oracle(r: &Array2<f64>, i: usize, j: usize) -> f64 {
    (0..r.nrows())
        .map(|x| (r[[x, i]] - r[[x, j]]).powi(2))
        .sum::<f64>()
        .sqrt()
}
