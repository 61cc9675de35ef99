//! Runtime and memory scaling benchmarks.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::memory::measure_peak;
use crate::error::Result;
use crate::model::{CrwkvModel, ModelConfig};
use crate::numerics::FeatureMap;
use crate::wkv::{biwkv_reference, biwkv_scan, TokenSequence, WkvParams};

pub const CSV_HEADER: &str = "size,wall_ms,peak_bytes,variant";
pub const WARMUPS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    /// `None` marks a size skipped for exceeding the memory budget.
    pub wall_ms: Option<f64>,
    pub peak_bytes: usize,
    pub variant: String,
}

pub fn rows_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        match r.wall_ms {
            Some(ms) => writeln!(s, "{},{ms:.6},{},{}", r.size, r.peak_bytes, r.variant),
            None => writeln!(s, "{},OOM,{},{}", r.size, r.peak_bytes, r.variant),
        }
        .expect("string write");
    }
    s
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time in milliseconds over `repeats` runs after the warmups,
/// with the largest peak allocation seen.
pub fn time_median(repeats: usize, mut f: impl FnMut()) -> (f64, usize) {
    for _ in 0..WARMUPS {
        f();
    }
    let mut times = Vec::with_capacity(repeats);
    let mut peak = 0;
    for _ in 0..repeats {
        let ((), bytes) = measure_peak(|| {
            let t0 = Instant::now();
            f();
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        });
        peak = peak.max(bytes);
    }
    (median(times), peak)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub struct WkvBench {
    pub scan_sizes: Vec<usize>,
    pub reference_sizes: Vec<usize>,
    pub channels: usize,
    pub repeats: usize,
    pub budget_bytes: usize,
    pub seed: u64,
}

fn wkv_bytes(len: usize, channels: usize) -> usize {
    // k, v, output, and the per-token forward states of the scan
    len * channels * 8 * 6
}

fn wkv_inputs(len: usize, channels: usize, seed: u64) -> (TokenSequence<f64>, WkvParams<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ len as u64);
    let k = FeatureMap::<f64>::randn([1, channels, 1, len], &mut rng);
    let v = FeatureMap::<f64>::randn([1, channels, 1, len], &mut rng);
    (TokenSequence::from_maps(&k, &v).expect("same shape"), WkvParams::init(channels))
}

pub fn bench_wkv(cfg: &WkvBench) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    if cfg.repeats == 0 {
        return Ok(rows);
    }
    for (variant, sizes) in [("scan", &cfg.scan_sizes), ("reference", &cfg.reference_sizes)] {
        for &len in sizes {
            let need = wkv_bytes(len, cfg.channels);
            if need > cfg.budget_bytes {
                rows.push(BenchRow {
                    size: len,
                    wall_ms: None,
                    peak_bytes: need,
                    variant: variant.into(),
                });
                continue;
            }
            let (seq, params) = wkv_inputs(len, cfg.channels, cfg.seed);
            let (ms, peak) = time_median(cfg.repeats, || {
                let out = if variant == "scan" {
                    biwkv_scan(&seq, &params)
                } else {
                    biwkv_reference(&seq, &params)
                };
                std::hint::black_box(out.expect("valid inputs"));
            });
            rows.push(BenchRow {
                size: len,
                wall_ms: Some(ms),
                peak_bytes: peak,
                variant: variant.into(),
            });
        }
    }
    Ok(rows)
}

pub struct ModelBench {
    pub config: ModelConfig,
    /// Square image sides.
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub budget_bytes: usize,
    pub seed: u64,
}

/// Rough forward working set: a few dozen maps of the widest activation.
pub fn model_bytes(cfg: &ModelConfig, side: usize) -> usize {
    let px = side * side;
    px * cfg.base_channels * cfg.expansion.max(2) * 4 * 24
}

pub fn bench_model(cfg: &ModelBench) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    if cfg.repeats == 0 {
        return Ok(rows);
    }
    let model = CrwkvModel::<f32>::build(&cfg.config, cfg.seed)?;
    for &side in &cfg.sizes {
        let need = model_bytes(&cfg.config, side);
        if need > cfg.budget_bytes {
            rows.push(BenchRow {
                size: side,
                wall_ms: None,
                peak_bytes: need,
                variant: "model".into(),
            });
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ side as u64);
        let x = FeatureMap::<f32>::randn([1, cfg.config.in_channels, side, side], &mut rng);
        let mut err = None;
        let (ms, peak) = time_median(cfg.repeats, || {
            if let Err(e) = model.forward(&x) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        rows.push(BenchRow {
            size: side,
            wall_ms: Some(ms),
            peak_bytes: peak,
            variant: "model".into(),
        });
    }
    Ok(rows)
}

/// Log-log slope of wall time against `x(size)` for one variant.
pub fn time_slope(rows: &[BenchRow], variant: &str, x: impl Fn(usize) -> f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .filter_map(|r| r.wall_ms.map(|ms| (x(r.size), ms)))
        .collect();
    loglog_slope(&pts)
}

pub fn memory_slope(rows: &[BenchRow], variant: &str, x: impl Fn(usize) -> f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.variant == variant && r.wall_ms.is_some())
        .map(|r| (x(r.size), r.peak_bytes as f64))
        .collect();
    loglog_slope(&pts)
}
