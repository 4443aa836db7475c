//! Wall-clock scaling of the scan kernels.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::ssm::{scan_chunked, scan_sequential, DiscretizedSystem, DEFAULT_CHUNK};
use crate::tensor::Tensor;

/// A stable random discretised system (`Ā ∈ (0.5, 1)`) and input.
pub fn random_system(b: usize, l: usize, d: usize, n: usize, seed: u64) -> (DiscretizedSystem, Tensor) {
    let mut r = rng::seeded(seed);
    let mut draw = |shape: Vec<usize>, lo: f64, hi: f64| Tensor::from_fn(shape, |_| r.gen_range(lo..hi));
    let sys = DiscretizedSystem {
        abar: draw(vec![b, l, d, n], 0.5, 1.0),
        bbar: draw(vec![b, l, d, n], -1.0, 1.0),
        c: draw(vec![b, l, n], -1.0, 1.0),
    };
    let x = draw(vec![b, l, d], -1.0, 1.0);
    (sys, x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub l: usize,
    pub chunked_mean_s: f64,
    pub chunked_std_s: f64,
    pub chunked_median_s: f64,
    pub sequential_mean_s: f64,
    pub sequential_std_s: f64,
    /// Largest `|chunked − sequential|` seen at this length.
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub d: usize,
    pub n: usize,
    pub b: usize,
    pub reps: usize,
    pub rows: Vec<BenchRow>,
    /// Log-log slope of the median chunked time against `L`, with its fit R².
    pub slope: f64,
    pub r_squared: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("L,chunked_mean_s,chunked_std_s,chunked_median_s,sequential_mean_s,sequential_std_s,max_abs_diff\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:e}",
                r.l, r.chunked_mean_s, r.chunked_std_s, r.chunked_median_s, r.sequential_mean_s, r.sequential_std_s, r.max_abs_diff
            );
        }
        s
    }
}

/// Ordinary least squares `y = a + b·x`; returns `(b, R²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Times both scans at each length. One warm-up call per kernel and length
/// is discarded; `reps ≥ 5` timed calls follow. The scaling fit uses the
/// median, which shrugs off the occasional descheduled repetition.
pub fn bench_scan(lengths: &[usize], d: usize, n: usize, b: usize, reps: usize) -> Result<BenchReport> {
    if reps < 5 {
        return Err(Error::Config(format!("bench needs at least 5 repetitions, got {reps}")));
    }
    if lengths.len() < 2 {
        return Err(Error::Config("bench needs at least two lengths".into()));
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let (sys, x) = random_system(b, l, d, n, l as u64);
        let reference = scan_sequential(&sys, &x)?;
        let warm = scan_chunked(&sys, &x, DEFAULT_CHUNK)?;
        let max_abs_diff = warm.max_abs_diff(&reference);
        let time = |f: &dyn Fn() -> Result<Tensor>| -> Result<Vec<f64>> {
            (0..reps)
                .map(|_| {
                    let t = Instant::now();
                    let y = f()?;
                    let dt = t.elapsed().as_secs_f64();
                    std::hint::black_box(y);
                    Ok(dt)
                })
                .collect()
        };
        let chunked = time(&|| scan_chunked(&sys, &x, DEFAULT_CHUNK))?;
        let sequential = time(&|| scan_sequential(&sys, &x))?;
        let (cm, cs) = mean_std(&chunked);
        let (sm, ss) = mean_std(&sequential);
        rows.push(BenchRow {
            l,
            chunked_mean_s: cm,
            chunked_std_s: cs,
            chunked_median_s: median(&chunked),
            sequential_mean_s: sm,
            sequential_std_s: ss,
            max_abs_diff,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.l as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.chunked_median_s.ln()).collect();
    let (slope, r_squared) = linear_fit(&xs, &ys);
    Ok(BenchReport {
        d,
        n,
        b,
        reps,
        rows,
        slope,
        r_squared,
    })
}
