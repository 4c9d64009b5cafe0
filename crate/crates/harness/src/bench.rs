//! Cost of the naive and windowed relation kernels, with power-law fits.

use std::time::Instant;

use ckd_core::relations::{naive_relations, windowed_relations, KernelStats, PairKind};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Sequence lengths for the naive kernel and the windowed memory series.
    pub ns: Vec<usize>,
    /// Window sizes for the windowed op series.
    pub deltas: Vec<usize>,
    pub d: usize,
    /// Sequence length of the δ series.
    pub delta_series_n: usize,
    /// Window of the n series.
    pub n_series_delta: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ns: vec![32, 64, 128, 256],
            deltas: vec![4, 8, 16, 32],
            d: 16,
            delta_series_n: 1024,
            n_series_delta: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Naive,
    Windowed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kernel: Kernel,
    /// `n` for the n series, `delta` for the δ series.
    pub series: String,
    pub n: usize,
    pub d: usize,
    pub delta: usize,
    pub wall_time_s: f64,
    pub triple_ops: u64,
    pub total_ops: u64,
    pub aux_elems: usize,
}

/// Least-squares line `y = slope·x + intercept` and its R².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    assert_eq!(xs.len(), ys.len(), "fit needs paired samples");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r2,
    }
}

/// Exponent of a power law fitted in log-log space.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly).slope
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Naive triple ops against n.
    pub naive_ops_slope_n: f64,
    /// Windowed triple ops against δ at fixed n.
    pub windowed_ops_slope_delta: f64,
    /// Windowed auxiliary elements against n at fixed δ.
    pub windowed_aux_fit_n: LinearFit,
}

fn row(kernel: Kernel, series: &str, n: usize, d: usize, delta: usize, secs: f64, s: KernelStats) -> BenchRow {
    BenchRow {
        kernel,
        series: series.into(),
        n,
        d,
        delta,
        wall_time_s: secs,
        triple_ops: s.triple_ops,
        total_ops: s.triple_ops + s.prep_ops,
        aux_elems: s.aux_elems,
    }
}

pub fn bench_relations(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.ns.len() < 2 || cfg.deltas.len() < 2 {
        return config_err("benchmark fits need at least two n and two δ values");
    }
    if cfg.d == 0 || cfg.ns.iter().chain(&cfg.deltas).any(|&x| x == 0) {
        return config_err("benchmark sizes must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input = |n: usize| Array2::from_shape_fn((cfg.d, n), |_| rng.random_range(-1.0..1.0));
    let mut rows = Vec::new();

    for &n in &cfg.ns {
        let r = input(n);
        let mask = vec![true; n];
        let t = Instant::now();
        let set = naive_relations(r.view(), n, PairKind::L2, &mask);
        rows.push(row(Kernel::Naive, "n", n, cfg.d, n, t.elapsed().as_secs_f64(), set.stats));
        let t = Instant::now();
        let set = windowed_relations(r.view(), cfg.n_series_delta, PairKind::L2, &mask);
        rows.push(row(
            Kernel::Windowed,
            "n",
            n,
            cfg.d,
            cfg.n_series_delta,
            t.elapsed().as_secs_f64(),
            set.stats,
        ));
    }
    let n = cfg.delta_series_n;
    let r = input(n);
    let mask = vec![true; n];
    for &delta in &cfg.deltas {
        let t = Instant::now();
        let set = windowed_relations(r.view(), delta, PairKind::L2, &mask);
        rows.push(row(Kernel::Windowed, "delta", n, cfg.d, delta, t.elapsed().as_secs_f64(), set.stats));
    }

    let pick = |kernel: Kernel, series: &str| -> Vec<&BenchRow> {
        rows.iter().filter(|r| r.kernel == kernel && r.series == series).collect()
    };
    let naive = pick(Kernel::Naive, "n");
    let win_n = pick(Kernel::Windowed, "n");
    let win_d = pick(Kernel::Windowed, "delta");
    let f = |v: &[&BenchRow], x: fn(&BenchRow) -> f64, y: fn(&BenchRow) -> f64| -> (Vec<f64>, Vec<f64>) {
        (v.iter().map(|r| x(r)).collect(), v.iter().map(|r| y(r)).collect())
    };
    let (nx, ny) = f(&naive, |r| r.n as f64, |r| r.triple_ops as f64);
    let (dx, dy) = f(&win_d, |r| r.delta as f64, |r| r.triple_ops as f64);
    let (mx, my) = f(&win_n, |r| r.n as f64, |r| r.aux_elems as f64);
    Ok(BenchReport {
        naive_ops_slope_n: loglog_slope(&nx, &ny),
        windowed_ops_slope_delta: loglog_slope(&dx, &dy),
        windowed_aux_fit_n: linear_fit(&mx, &my),
        rows,
    })
}
