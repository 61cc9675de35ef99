//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! Everything runs inside one test so that timings and allocation peaks are
//! not disturbed by sibling tests.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crwkv::cli::bench::{bench_model, bench_wkv, memory_slope, time_slope, ModelBench, WkvBench};
use crwkv::cli::memory::CountingAlloc;
use crwkv::cli::selftest::{run_selftest, Faults};
use crwkv::data::{psnr, ssim, Dataset, NoiseKind, NoiseSpec};
use crwkv::model::{CrwkvModel, ModelConfig};
use crwkv::numerics::{fft2d, ifft2d, FeatureMap};
use crwkv::shift::{cts, partition_channels, OffsetDictionary};
use crwkv::training::{evaluate, loss, lr_schedule, LossKind, RunConfig, Trainer};
use crwkv::wkv::{biwkv_reference, biwkv_scan, reverse_lanes, TokenSequence, WkvParams};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

type Verdict = Result<String, String>;

fn within(label: &str, value: f64, limit: f64) -> Verdict {
    if value <= limit {
        Ok(format!("{label} {value:.3e} <= {limit:e}"))
    } else {
        Err(format!("{label} {value:.3e} > {limit:e}"))
    }
}

fn in_range(label: &str, value: Option<f64>, lo: f64, hi: f64) -> Verdict {
    match value {
        Some(v) if (lo..=hi).contains(&v) => Ok(format!("{label} {v:.3} in [{lo}, {hi}]")),
        Some(v) => Err(format!("{label} {v:.3} outside [{lo}, {hi}]")),
        None => Err(format!("{label}: not enough points")),
    }
}

// Direct softmax form of the operator, no exponent shifting.
fn wkv_oracle(k: &[f64], v: &[f64], w: f64, u: f64) -> Vec<f64> {
    let n = k.len();
    (0..n)
        .map(|t| {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                let e = if i == t {
                    (u + k[t]).exp()
                } else {
                    let dist = (t as f64 - i as f64).abs();
                    (-(dist - 1.0) / n as f64 * w + k[i]).exp()
                };
                num += e * v[i];
                den += e;
            }
            num / den
        })
        .collect()
}

struct Instance {
    batch: usize,
    channels: usize,
    len: usize,
    k: Vec<f64>,
    v: Vec<f64>,
    w: Vec<f64>,
    u: Vec<f64>,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let (batch, channels, len) = (rng.gen_range(1..=2), rng.gen_range(1..=8), rng.gen_range(1..=64));
        let n = batch * channels * len;
        Self {
            batch,
            channels,
            len,
            k: (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            v: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            w: (0..channels).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            u: (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn seq<T: crwkv::numerics::Scalar>(&self) -> (TokenSequence<T>, WkvParams<T>) {
        let c = |x: &[f64]| x.iter().map(|&v| T::of(v)).collect::<Vec<T>>();
        (
            TokenSequence::new(c(&self.k), c(&self.v), self.batch, self.channels, self.len).unwrap(),
            WkvParams::new(c(&self.w), c(&self.u)).unwrap(),
        )
    }

    fn oracle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k.len());
        for lane in 0..self.batch * self.channels {
            let r = lane * self.len..(lane + 1) * self.len;
            let ch = lane % self.channels;
            out.extend(wkv_oracle(&self.k[r.clone()], &self.v[r], self.w[ch], self.u[ch]));
        }
        out
    }
}

fn rel_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

fn operator_equivalence() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut e64, mut e32, mut e_ref) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let inst = Instance::random(&mut rng);
        let (s, p) = inst.seq::<f64>();
        let reference = biwkv_reference(&s, &p).unwrap();
        e64 = e64.max(rel_gap(&biwkv_scan(&s, &p).unwrap(), &reference));
        e_ref = e_ref.max(rel_gap(&reference, &inst.oracle()));
        let (s32, p32) = inst.seq::<f32>();
        let up = |x: Vec<f32>| x.into_iter().map(f64::from).collect::<Vec<_>>();
        e32 = e32.max(rel_gap(&up(biwkv_scan(&s32, &p32).unwrap()), &up(biwkv_reference(&s32, &p32).unwrap())));
    }
    let secs = t0.elapsed().as_secs_f64();
    let a = within("f64 scan vs reference", e64, 1e-10)?;
    let b = within("f32", e32, 1e-5)?;
    let c = within("reference vs naive softmax", e_ref, 1e-10)?;
    let d = within("seconds", secs, 10.0)?;
    Ok(format!("{a}; {b}; {c}; {d}"))
}

fn linear_complexity() -> Verdict {
    let rows = bench_wkv(&WkvBench {
        scan_sizes: vec![1024, 2048, 4096, 8192, 16384],
        reference_sizes: vec![256, 512, 1024, 2048, 4096],
        channels: 8,
        repeats: 5,
        budget_bytes: usize::MAX,
        seed: 2,
    })
    .map_err(|e| e.to_string())?;
    let t = |s: usize| s as f64;
    let scan = in_range("scan time slope", time_slope(&rows, "scan", t), 0.8, 1.3)?;
    let reference = match time_slope(&rows, "reference", t) {
        Some(s) if s >= 1.7 => format!("reference time slope {s:.3} >= 1.7"),
        other => return Err(format!("reference time slope {other:?} < 1.7")),
    };
    let model = bench_model(&ModelBench {
        config: ModelConfig::toy(16, [1, 1, 1, 2]),
        sizes: vec![64, 128, 256, 512],
        repeats: 1,
        budget_bytes: usize::MAX,
        seed: 3,
    })
    .map_err(|e| e.to_string())?;
    let mem = in_range("model memory slope", memory_slope(&model, "model", |s| (s * s) as f64), 0.8, 1.3)?;
    Ok(format!("{scan}; {reference}; {mem}"))
}

fn spatial_symmetry() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let inst = Instance::random(&mut rng);
        let (s, p) = inst.seq::<f64>();
        let direct = biwkv_scan(&s, &p).unwrap();
        let mirrored = reverse_lanes(&biwkv_scan(&s.reversed(), &p).unwrap(), s.len);
        worst = worst.max(direct.iter().zip(&mirrored).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    within("max |y - R(f(R(x)))|", worst, 1e-6)
}

fn gradient_correctness() -> Verdict {
    let t0 = Instant::now();
    let mut outcomes = run_selftest(Some("grad."), &Faults::default());
    outcomes.extend(run_selftest(Some("wkv.gradient"), &Faults::default()));
    let secs = t0.elapsed().as_secs_f64();
    if let Some(bad) = outcomes.iter().find(|o| !o.passed) {
        return Err(format!("{}: {}", bad.name, bad.detail));
    }
    let names: Vec<&str> = outcomes.iter().map(|o| o.name).collect();
    let t = within("seconds", secs, 60.0)?;
    Ok(format!("{} checks ({}); {t}", outcomes.len(), names.join(" ")))
}

fn cts_arithmetic() -> Verdict {
    let dict = OffsetDictionary::context();
    if dict.len() != 12 {
        return Err(format!("dictionary has {} offsets", dict.len()));
    }
    let counts: Vec<usize> = partition_channels(&dict, 48).map_err(|e| e.to_string())?.iter().map(|s| s.count).collect();
    if counts != [6, 6, 6, 6, 3, 3, 3, 3, 3, 3, 3, 3] || counts.iter().sum::<usize>() != 48 {
        return Err(format!("C = 48 spans {counts:?}"));
    }
    for c in 12..=256 {
        let mut owner = vec![0usize; c];
        for s in partition_channels(&dict, c).map_err(|e| e.to_string())? {
            for ch in s.start..s.start + s.count {
                *owner.get_mut(ch).ok_or(format!("C = {c}: span past the end"))? += 1;
            }
        }
        if let Some(ch) = owner.iter().position(|&n| n != 1) {
            return Err(format!("C = {c}: channel {ch} covered {} times", owner[ch]));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = FeatureMap::<f64>::randn([2, 48, 10, 10], &mut rng);
    let y = cts(&x, &dict, 0.0).map_err(|e| e.to_string())?;
    if y != x {
        return Err("omega = 0 is not the identity".into());
    }
    Ok("C = 48 -> 6x4 + 3x8; exact cover for C in 12..=256; omega = 0 identity".into())
}

fn fft_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = FeatureMap::<f64>::randn([2, 3, 12, 10], &mut rng);
    let z = fft2d(&x);
    let (back, _) = ifft2d(&z);
    let norm = x.dot(&x).sqrt();
    let diff = back.zip_map(&x, |a, b| a - b).unwrap();
    let round = within("round trip", diff.dot(&diff).sqrt() / norm, 1e-6)?;

    let small = FeatureMap::<f64>::randn([1, 1, 4, 4], &mut rng);
    let zs = fft2d(&small);
    let mut gap = 0.0f64;
    for u in 0..4 {
        for v in 0..4 {
            let (mut re, mut im) = (0.0, 0.0);
            for m in 0..4 {
                for n in 0..4 {
                    let a = -2.0 * std::f64::consts::PI * ((u * m + v * n) as f64) / 4.0;
                    re += small.at(0, 0, m, n) * a.cos();
                    im += small.at(0, 0, m, n) * a.sin();
                }
            }
            gap = gap.max((zs.re.at(0, 0, u, v) - re).abs()).max((zs.im.at(0, 0, u, v) - im).abs());
        }
    }
    let naive = within("4x4 vs naive DFT", gap, 1e-6)?;

    let spectral: f64 = z.re.data().iter().chain(z.im.data()).map(|v| v * v).sum();
    let parseval = (spectral / 120.0 - norm * norm).abs() / (norm * norm);
    let p = within("parseval", parseval, 1e-5)?;
    Ok(format!("{round}; {naive}; {p}"))
}

fn naive_psnr(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        s += (x - y) * (x - y);
    }
    10.0 * (1.0 / (s / a.len() as f64)).log10()
}

// Explicit 2-D Gaussian windows at every valid position.
fn naive_ssim(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
    let [n, c, h, w] = a.shape();
    let k = 11;
    let g1: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let total: f64 = g1.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for ib in 0..n {
        for ic in 0..c {
            for y0 in 0..=h - k {
                for x0 in 0..=w - k {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..k {
                        for dx in 0..k {
                            let wt = g1[dy] * g1[dx] / total;
                            let p = a.at(ib, ic, y0 + dy, x0 + dx);
                            let q = b.at(ib, ic, y0 + dy, x0 + dx);
                            mx += wt * p;
                            my += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    acc / count as f64
}

fn metric_oracles() -> Verdict {
    let a = FeatureMap::<f64>::full([1, 3, 32, 32], 0.5);
    let b = a.map(|v| v + 1.0 / 255.0);
    let p = psnr(&a, &b).map_err(|e| e.to_string())?;
    let first = within("|psnr - 48.13|", (p - 48.13).abs(), 0.01)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = FeatureMap::<f64>::from_fn([1, 3, 24, 20], |_| rng.gen());
    let y = FeatureMap::from_fn(x.shape(), |[b, c, i, j]| (x.at(b, c, i, j) + 0.1 * rng.gen_range(-1.0..1.0f64)).clamp(0.0, 1.0));
    let self_ssim = ssim(&x, &x).map_err(|e| e.to_string())?;
    if self_ssim != 1.0 {
        return Err(format!("ssim(a, a) = {self_ssim:e}"));
    }
    let dp = within("psnr vs naive", (psnr(&x, &y).unwrap() - naive_psnr(&x, &y)).abs(), 1e-9)?;
    let ds = within("ssim vs naive", (ssim(&x, &y).unwrap() - naive_ssim(&x, &y)).abs(), 1e-9)?;
    Ok(format!("psnr {p:.4} dB ({first}); ssim(a, a) = 1; {dp}; {ds}"))
}

fn parameter_count() -> Verdict {
    let model = CrwkvModel::<f32>::build(&ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let n = model.count_parameters();
    let m = n as f64 / 1e6;
    if (15.1..=25.2).contains(&m) {
        Ok(format!("default config has {n} parameters ({m:.2} M, reported 20.19 M)"))
    } else {
        Err(format!("default config has {n} parameters ({m:.2} M)"))
    }
}

fn trainability() -> Verdict {
    let t0 = Instant::now();
    let mut cfg = RunConfig {
        model: ModelConfig::toy(16, [1, 1, 1, 2]),
        ..RunConfig::default()
    };
    let t = &mut cfg.train;
    t.iterations = 2000;
    t.batch_size = 4;
    t.patch_size = 32;
    t.noise = NoiseKind::Awgn;
    t.noise_sigma = 25.0;
    t.log_every = 500;
    let train_set = Dataset::synthetic(32, 64, 11);
    let test_set = Dataset::synthetic(8, 64, 12);
    let mut tr = Trainer::new(cfg, 7).map_err(|e| e.to_string())?;
    tr.run(&train_set, &mut |_| Ok(()), &mut |_| Ok(())).map_err(|e| e.to_string())?;
    let rep = evaluate(&tr.model, &test_set.clean, &NoiseSpec::awgn(25.0), 99).map_err(|e| e.to_string())?;
    let gain = rep.denoised_psnr - rep.noisy_psnr;
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    let detail = format!(
        "noisy {:.2} dB, denoised {:.2} dB, gain {gain:.2} dB, {mins:.1} min",
        rep.noisy_psnr, rep.denoised_psnr
    );
    if gain >= 3.0 && mins <= 30.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn schedule_endpoints() -> Verdict {
    let (start, end) = (lr_schedule(0), lr_schedule(288_000));
    if start != 3e-4 || end != 1e-6 {
        return Err(format!("lr(0) = {start:e}, lr(288000) = {end:e}"));
    }
    let mut prev = lr_schedule(192_000);
    for t in 192_001..=288_000 {
        let lr = lr_schedule(t);
        if lr > prev {
            return Err(format!("lr rises at t = {t}"));
        }
        prev = lr;
    }
    Ok("lr(0) = 3e-4, lr(288000) = 1e-6, non-increasing on [192000, 288000]".into())
}

fn loss_behavior() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target = FeatureMap::<f64>::from_fn([2, 3, 4, 4], |_| rng.gen());
    // keep every residual away from the L1 kink
    let y = FeatureMap::from_fn(target.shape(), |[b, c, i, j]| {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        target.at(b, c, i, j) + sign * rng.gen_range(0.05..0.3)
    });
    let d: Vec<f64> = y.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let mse = d.iter().map(|v| v * v).sum::<f64>() / n;
    let expected = [
        (LossKind::L1, d.iter().map(|v| v.abs()).sum::<f64>() / n),
        (LossKind::charbonnier(), d.iter().map(|v| (v * v + 1e-6).sqrt()).sum::<f64>() / n),
        (LossKind::Mse, mse),
        (LossKind::Psnr, 10.0 * mse.log10()),
    ];
    let mut worst_value = 0.0f64;
    let mut worst_grad = 0.0f64;
    for (kind, want) in expected {
        let (got, g) = loss(kind, &y, &target).map_err(|e| e.to_string())?;
        worst_value = worst_value.max((got - want).abs() / want.abs().max(1.0));
        for i in 0..y.len() {
            let h = 1e-6;
            let mut up = y.clone();
            up.data_mut()[i] += h;
            let mut down = y.clone();
            down.data_mut()[i] -= h;
            let num = (loss(kind, &up, &target).unwrap().0 - loss(kind, &down, &target).unwrap().0) / (2.0 * h);
            let a = g.data()[i];
            worst_grad = worst_grad.max((a - num).abs() / a.abs().max(num.abs()).max(1e-4));
        }
    }
    let v = within("value vs closed form", worst_value, 1e-12)?;
    let g = within("gradient vs finite differences", worst_grad, 1e-4)?;
    Ok(format!("l1, charbonnier, mse, psnr: {v}; {g}"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_crwkv"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let config = d.join("smoke.toml");
    fs::write(
        &config,
        "base_channels = 8\nstage_depths = [1, 1, 1, 2]\nfmix_split = [[0, 1], [0, 1], [0, 1], [2, 0]]\n\
         iterations = 30\nbatch_size = 4\npatch_size = 32\nnoise = \"awgn\"\nnoise_sigma = 25.0\n\
         synthetic_images = 8\nsynthetic_size = 48\nlog_every = 1\ncheckpoint_every = 1000\n",
    )
    .map_err(|e| e.to_string())?;
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let st = d.join(format!("selftest_{run}.csv"));
        let out = d.join(format!("train_{run}"));
        run_cli(&["--threads", "1", "selftest", "--csv", st.to_str().unwrap()])?;
        run_cli(&[
            "--threads",
            "1",
            "--seed",
            "7",
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])?;
        csvs.push((read(&st)?, read(&out.join("metrics.csv"))?, read(&out.join("model.ckpt"))?));
    }
    let (a, b) = (&csvs[0], &csvs[1]);
    if a.0 != b.0 {
        return Err("selftest CSVs differ".into());
    }
    if a.1 != b.1 {
        return Err("training metrics CSVs differ".into());
    }
    if a.2 != b.2 {
        return Err("checkpoints differ".into());
    }
    let rows = a.1.iter().filter(|&&c| c == b'\n').count() - 1;
    Ok(format!(
        "selftest CSV ({} bytes) and training CSV ({rows} rows) byte-identical across runs; checkpoints too",
        a.0.len()
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 12] = [
        ("operator equivalence", operator_equivalence),
        ("linear complexity", linear_complexity),
        ("spatial symmetry", spatial_symmetry),
        ("gradient correctness", gradient_correctness),
        ("cts arithmetic", cts_arithmetic),
        ("fft correctness", fft_correctness),
        ("metric oracles", metric_oracles),
        ("parameter count", parameter_count),
        ("trainability", trainability),
        ("lr schedule endpoints", schedule_endpoints),
        ("loss behavior", loss_behavior),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let verdict = check();
        let secs = t0.elapsed().as_secs_f64();
        match &verdict {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
