//! Convolution timing across segmentation rates.
//!
//! The sweep convolves a `(batch, base/k, base/k, base/k, k^3)` input with a
//! `(k^3, 3, 3, 3, filters)` filter for each `k`. Every member of the family
//! performs the same number of multiply-accumulates (`k^3*27 * batch*(base/k)^3
//! * filters` does not depend on `k`); only the operand shapes of the lowered
//! product change, from `k = 27` rows by millions of columns at `k = 1` to a
//! million-row reduction over a handful of columns at `k = base/2`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conv::{conv3d_forward_with, ConvFilter, ConvWorkspace, GemmShape};
use crate::error::{arg_err, Result};
use crate::rng::{rng_uniform, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub k: usize,
    pub gemm: GemmShape,
    pub reps: usize,
    pub threads: usize,
    pub total_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Floating point operations of one forward product, `2*m*k*n`.
    pub flop_count: u128,
    #[serde(skip)]
    pub samples_ms: Vec<f64>,
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str = "k,m,kdim,n,reps,threads,total_ms,mean_ms,std_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4}",
            self.k, self.gemm.m, self.gemm.k, self.gemm.n, self.reps, self.threads, self.total_ms, self.mean_ms, self.std_ms
        )
    }
}

/// Time `reps` GEMM-path forward convolutions on seeded random data.
///
/// One untimed warm-up pass sizes the scratch buffers first, so the samples
/// measure steady state (im2col, product and bias add; no allocation).
pub fn timed_conv(
    input_shape: &[usize],
    filter_shape: &[usize],
    reps: usize,
    threads: usize,
    seed: u64,
) -> Result<BenchRecord> {
    if reps == 0 {
        return Err(arg_err!("reps must be at least 1"));
    }
    if threads == 0 {
        return Err(arg_err!("threads must be at least 1"));
    }
    let gemm = GemmShape::for_conv(input_shape, filter_shape)?;
    let mut rng = Rng::new(seed);
    let input: Tensor<f32> = rng_uniform(&mut rng, input_shape, -1.0, 1.0)?;
    let filter = ConvFilter::new(
        rng_uniform(&mut rng, filter_shape, -0.1, 0.1)?,
        rng_uniform(&mut rng, &[filter_shape[4]], -0.1, 0.1)?,
    )?;
    let mut ws = ConvWorkspace::with_threads(threads);
    std::hint::black_box(conv3d_forward_with(&input, &filter, &mut ws)?);

    let mut samples_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let out = conv3d_forward_with(&input, &filter, &mut ws)?;
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let total_ms: f64 = samples_ms.iter().sum();
    let mean_ms = total_ms / reps as f64;
    let var = samples_ms.iter().map(|s| (s - mean_ms).powi(2)).sum::<f64>() / reps as f64;
    Ok(BenchRecord {
        k: integer_cbrt(input_shape[4]),
        gemm,
        reps,
        threads,
        total_ms,
        mean_ms,
        std_ms: var.sqrt(),
        flop_count: 2 * gemm.macs(),
        samples_ms,
    })
}

fn integer_cbrt(c: usize) -> usize {
    let mut k = (c as f64).cbrt().round() as usize;
    while k * k * k > c {
        k -= 1;
    }
    k
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    pub base: usize,
    pub batch: usize,
    pub filters: usize,
    pub reps: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ks: vec![1, 2, 3, 4, 6, 8, 9, 12, 18, 24, 36],
            base: 72,
            batch: 4,
            filters: 8,
            reps: 500,
            threads: 1,
            seed: 0,
        }
    }
}

impl SweepConfig {
    /// Input and filter shapes for rate `k`.
    pub fn shapes(&self, k: usize) -> Result<([usize; 5], [usize; 5])> {
        if k == 0 || !self.base.is_multiple_of(k) {
            return Err(arg_err!("segmentation rate {} does not divide {}", k, self.base));
        }
        let side = self.base / k;
        let c = k * k * k;
        Ok(([self.batch, side, side, side, c], [c, 3, 3, 3, self.filters]))
    }

    pub fn gemm_shapes(&self) -> Result<Vec<(usize, GemmShape)>> {
        let mut ks = self.ks.clone();
        ks.sort_unstable();
        ks.dedup();
        ks.into_iter()
            .map(|k| {
                let (input, filter) = self.shapes(k)?;
                Ok((k, GemmShape::for_conv(&input, &filter)?))
            })
            .collect()
    }
}

/// Run the constant-work timing sweep; records come back sorted by `k`.
pub fn bench_conv_sweep(cfg: &SweepConfig) -> Result<Vec<BenchRecord>> {
    if cfg.ks.is_empty() {
        return Err(arg_err!("no segmentation rates given"));
    }
    let shapes = cfg.gemm_shapes()?;
    let work = shapes[0].1.macs();
    if let Some((k, s)) = shapes.iter().find(|(_, s)| s.macs() != work) {
        return Err(arg_err!("rate {} performs {} MACs, rate {} performs {}", k, s.macs(), shapes[0].0, work));
    }
    shapes
        .iter()
        .map(|&(k, _)| {
            let (input, filter) = cfg.shapes(k)?;
            let mut rec = timed_conv(&input, &filter, cfg.reps, cfg.threads, cfg.seed.wrapping_add(k as u64))?;
            rec.k = k;
            Ok(rec)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UShapeVerdict {
    pub pass: bool,
    pub argmin_k: usize,
    pub min_ms: f64,
    pub first_ms: f64,
    pub last_ms: f64,
    pub reason: String,
}

/// Pass iff the fastest rate is strictly interior, at least 10% faster than
/// the first rate, and the last rate is slower than the fastest.
pub fn check_ushape(records: &[BenchRecord]) -> Result<UShapeVerdict> {
    if records.len() < 3 {
        return Err(arg_err!("need at least 3 records, got {}", records.len()));
    }
    if records.windows(2).any(|w| w[0].k >= w[1].k) {
        return Err(arg_err!("records must be sorted by strictly increasing k"));
    }
    let (imin, min) = records
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean_ms.total_cmp(&b.1.mean_ms))
        .expect("non-empty");
    let first = &records[0];
    let last = &records[records.len() - 1];
    let interior = imin != 0 && imin != records.len() - 1;
    let faster = min.mean_ms < 0.9 * first.mean_ms;
    let rises = last.mean_ms > min.mean_ms;
    let reason = if !interior {
        format!("minimum at boundary rate k={}", min.k)
    } else if !faster {
        format!("k={} is not 10% faster than k={}", min.k, first.k)
    } else if !rises {
        format!("k={} is not slower than k={}", last.k, min.k)
    } else {
        format!("interior minimum at k={}", min.k)
    };
    Ok(UShapeVerdict {
        pass: interior && faster && rises,
        argmin_k: min.k,
        min_ms: min.mean_ms,
        first_ms: first.mean_ms,
        last_ms: last.mean_ms,
        reason,
    })
}
