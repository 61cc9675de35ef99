//! Fast invariant suite behind the `selftest` subcommand.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Cmix, Crb, Crm, Fmix, MixerKind};
use crate::data::metrics::{psnr, ssim};
use crate::model::{CrwkvModel, ModelConfig};
use crate::numerics::gradcheck::{check_input, check_params, probe_loss, GradReport};
use crate::numerics::{fft2d, ifft2d, Conv2d, FeatureMap, LayerNorm, Linear};
use crate::shift::{partition_channels, OffsetDictionary, ShiftVariant, TokenShift};
use crate::training::{loss, lr_schedule, LossKind};
use crate::wkv::{biwkv_backward, biwkv_reference, biwkv_scan, TokenSequence, WkvParams};

/// Deliberate defects used to prove that the suite can fail.
#[derive(Clone, Copy, Debug, Default)]
pub struct Faults {
    pub corrupt_scan: bool,
}

type CheckResult = Result<String, String>;

pub struct Check {
    pub name: &'static str,
    run: fn(&Faults) -> CheckResult,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn scan(seq: &TokenSequence<f64>, p: &WkvParams<f64>, faults: &Faults) -> Vec<f64> {
    let mut out = biwkv_scan(seq, p).expect("valid sequence");
    if faults.corrupt_scan {
        for (i, v) in out.iter_mut().enumerate() {
            if i % 7 == 3 {
                *v += 1e-3;
            }
        }
    }
    out
}

fn random_instance<T: crate::numerics::Scalar>(rng: &mut ChaCha8Rng, max_len: usize, max_c: usize) -> (TokenSequence<T>, WkvParams<T>) {
    let len = rng.gen_range(1..=max_len);
    let c = rng.gen_range(1..=max_c);
    let b = rng.gen_range(1..=2);
    let k: Vec<T> = (0..b * c * len).map(|_| T::of(rng.gen_range(-3.0..3.0))).collect();
    let v: Vec<T> = (0..b * c * len).map(|_| T::of(rng.gen_range(-2.0..2.0))).collect();
    let w = (0..c).map(|_| T::of(rng.gen_range(-2.0..2.0))).collect();
    let u = (0..c).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
    (TokenSequence::new(k, v, b, c, len).expect("consistent"), WkvParams::new(w, u).expect("consistent"))
}

fn rel_gap<T: crate::numerics::Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.f64() - y.f64()).abs() / y.f64().abs().max(1.0))
        .fold(0.0, f64::max)
}

fn bound(name: &str, value: f64, limit: f64) -> CheckResult {
    if value <= limit {
        Ok(format!("{name} {value:.3e} <= {limit:.0e}"))
    } else {
        Err(format!("{name} {value:.3e} > {limit:.0e}"))
    }
}

fn grad(rep: GradReport, limit: f64) -> CheckResult {
    if rep.max_rel_err <= limit {
        Ok(format!("max rel err {:.3e} over {} coords", rep.max_rel_err, rep.checked))
    } else {
        Err(format!("max rel err {:.3e} at {}", rep.max_rel_err, rep.worst))
    }
}

fn wkv_scan_vs_reference(faults: &Faults) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst64: f64 = 0.0;
    for _ in 0..200 {
        let (seq, p) = random_instance::<f64>(&mut rng, 64, 8);
        worst64 = worst64.max(rel_gap(&scan(&seq, &p, faults), &biwkv_reference(&seq, &p).expect("valid")));
    }
    let mut worst32: f64 = 0.0;
    for _ in 0..200 {
        let (seq, p) = random_instance::<f32>(&mut rng, 64, 8);
        worst32 = worst32.max(rel_gap(&biwkv_scan(&seq, &p).expect("valid"), &biwkv_reference(&seq, &p).expect("valid")));
    }
    let a = bound("f64", worst64, 1e-10)?;
    let b = bound("f32", worst32, 1e-5)?;
    Ok(format!("{a}; {b}"))
}

fn wkv_reversal(faults: &Faults) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (seq, p) = random_instance::<f64>(&mut rng, 64, 4);
        let direct = scan(&seq, &p, faults);
        let flipped = scan(&seq.reversed(), &p, faults);
        let back = crate::wkv::reverse_lanes(&flipped, seq.len);
        worst = worst.max(direct.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    bound("max deviation", worst, 1e-6)
}

fn wkv_gradient(_: &Faults) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (seq, p) = random_instance::<f64>(&mut rng, 24, 3);
    let g: Vec<f64> = (0..seq.k.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grads = biwkv_backward(&seq, &p, &g).map_err(|e| e.to_string())?;
    let obj = |s: &TokenSequence<f64>, p: &WkvParams<f64>| -> f64 {
        biwkv_scan(s, p).expect("valid").iter().zip(&g).map(|(a, b)| a * b).sum()
    };
    let (b, c, n) = (seq.batch, seq.channels, seq.len);
    let rep = crate::numerics::gradcheck::check_vec("k", &seq.k, &grads.k, &mut |k| obj(&TokenSequence::new(k.to_vec(), seq.v.clone(), b, c, n).expect("same"), &p), usize::MAX, &mut rng)
        .merge(crate::numerics::gradcheck::check_vec("v", &seq.v, &grads.v, &mut |v| obj(&TokenSequence::new(seq.k.clone(), v.to_vec(), b, c, n).expect("same"), &p), usize::MAX, &mut rng))
        .merge(crate::numerics::gradcheck::check_vec("w", &p.w, &grads.w, &mut |w| obj(&seq, &WkvParams::new(w.to_vec(), p.u.clone()).expect("same")), usize::MAX, &mut rng))
        .merge(crate::numerics::gradcheck::check_vec("u", &p.u, &grads.u, &mut |u| obj(&seq, &WkvParams::new(p.w.clone(), u.to_vec()).expect("same")), usize::MAX, &mut rng));
    grad(rep, 1e-4)
}

macro_rules! module_grad {
    ($fn:ident, $seed:expr, $shape:expr, $make:expr, $fwd:expr, $bwd:expr) => {
        fn $fn(_: &Faults) -> CheckResult {
            let mut rng = ChaCha8Rng::seed_from_u64($seed);
            let mut m = $make(&mut rng);
            let x = FeatureMap::<f64>::randn($shape, &mut rng);
            let (y0, cache) = $fwd(&m, &x);
            let probe = FeatureMap::randn(y0.shape(), &mut rng);
            let dx = $bwd(&mut m, &x, cache, &probe);
            let frozen = m.clone();
            let rep = check_params(&mut m, &mut |mm| probe_loss(&$fwd(mm, &x).0, &probe), 24, &mut rng)
                .merge(check_input(&x, &dx, &mut |xx| probe_loss(&$fwd(&frozen, xx).0, &probe), 48, &mut rng));
            grad(rep, 1e-4)
        }
    };
}

module_grad!(grad_linear, 110, [2, 3, 3, 4], |r: &mut ChaCha8Rng| Linear::<f64>::new(3, 5, r),
    |m: &Linear<f64>, x: &FeatureMap<f64>| (m.forward(x).expect("shape"), ()),
    |m: &mut Linear<f64>, x: &FeatureMap<f64>, _: (), d: &FeatureMap<f64>| m.backward(x, d));
module_grad!(grad_conv, 111, [2, 2, 5, 4], |r: &mut ChaCha8Rng| Conv2d::<f64>::same(2, 3, 3, r),
    |m: &Conv2d<f64>, x: &FeatureMap<f64>| (m.forward(x).expect("shape"), ()),
    |m: &mut Conv2d<f64>, x: &FeatureMap<f64>, _: (), d: &FeatureMap<f64>| m.backward(x, d));
module_grad!(grad_layer_norm, 112, [2, 4, 3, 3], |r: &mut ChaCha8Rng| {
        let mut n = LayerNorm::<f64>::new(4);
        n.gamma.value.iter_mut().for_each(|g| *g = r.gen_range(0.5..1.5));
        n
    },
    |m: &LayerNorm<f64>, x: &FeatureMap<f64>| m.forward(x),
    |m: &mut LayerNorm<f64>, _: &FeatureMap<f64>, c, d: &FeatureMap<f64>| m.backward(&c, d));
module_grad!(grad_shift, 113, [1, 12, 5, 5], |_: &mut ChaCha8Rng| {
        let mut s = TokenShift::<f64>::new(ShiftVariant::Cts, 12).expect("valid");
        s.omega_raw.value[0] = 0.4;
        s
    },
    |m: &TokenShift<f64>, x: &FeatureMap<f64>| m.forward(x),
    |m: &mut TokenShift<f64>, _: &FeatureMap<f64>, c, d: &FeatureMap<f64>| m.backward(&c, d));
module_grad!(grad_crm, 114, [1, 4, 4, 4], |r: &mut ChaCha8Rng| Crm::<f64>::new(4, ShiftVariant::Cts, r).expect("valid"),
    |m: &Crm<f64>, x: &FeatureMap<f64>| m.forward(x).expect("shape"),
    |m: &mut Crm<f64>, _: &FeatureMap<f64>, c, d: &FeatureMap<f64>| m.backward(&c, d).expect("shape"));
module_grad!(grad_cmix, 115, [1, 4, 4, 4], |r: &mut ChaCha8Rng| Cmix::<f64>::new(4, 4, ShiftVariant::Cts, r).expect("valid"),
    |m: &Cmix<f64>, x: &FeatureMap<f64>| m.forward(x).expect("shape"),
    |m: &mut Cmix<f64>, _: &FeatureMap<f64>, c, d: &FeatureMap<f64>| m.backward(&c, d).expect("shape"));
module_grad!(grad_fmix, 116, [1, 2, 4, 4], |r: &mut ChaCha8Rng| Fmix::<f64>::new(2, 0.2, r),
    |m: &Fmix<f64>, x: &FeatureMap<f64>| m.forward(x).expect("shape"),
    |m: &mut Fmix<f64>, _: &FeatureMap<f64>, c, d: &FeatureMap<f64>| m.backward(&c, d).expect("shape"));
module_grad!(grad_crb_fmix, 117, [1, 4, 4, 4], |r: &mut ChaCha8Rng| Crb::<f64>::new(MixerKind::Fmix, 4, 2, ShiftVariant::Cts, r).expect("valid"),
    |m: &Crb<f64>, x: &FeatureMap<f64>| m.forward(x).expect("shape"),
    |m: &mut Crb<f64>, _: &FeatureMap<f64>, c, d: &FeatureMap<f64>| m.backward(&c, d).expect("shape"));
module_grad!(grad_crb_crm, 118, [1, 4, 4, 4], |r: &mut ChaCha8Rng| Crb::<f64>::new(MixerKind::Crm, 4, 2, ShiftVariant::Cts, r).expect("valid"),
    |m: &Crb<f64>, x: &FeatureMap<f64>| m.forward(x).expect("shape"),
    |m: &mut Crb<f64>, _: &FeatureMap<f64>, c, d: &FeatureMap<f64>| m.backward(&c, d).expect("shape"));

fn grad_fft(_: &Faults) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(119);
    let x = FeatureMap::<f64>::randn([1, 2, 4, 3], &mut rng);
    let g = crate::numerics::ComplexMap::new(FeatureMap::randn(x.shape(), &mut rng), FeatureMap::randn(x.shape(), &mut rng)).expect("same");
    let dx = crate::numerics::fft::fft2d_backward(&g);
    let rep = check_input(&x, &dx, &mut |xx| {
        let z = fft2d(xx);
        z.re.dot(&g.re) + z.im.dot(&g.im)
    }, usize::MAX, &mut rng);
    grad(rep, 1e-4)
}

fn grad_model(_: &Faults) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(120);
    let mut m = CrwkvModel::<f64>::build(&ModelConfig::toy(4, [1, 1, 1, 1]), 120).map_err(|e| e.to_string())?;
    let x = FeatureMap::randn([1, 3, 16, 16], &mut rng);
    let probe = FeatureMap::randn(x.shape(), &mut rng);
    let (_, cache) = m.forward_train(&x).map_err(|e| e.to_string())?;
    let dx = m.backward(&cache, &probe).map_err(|e| e.to_string())?;
    let frozen = m.clone();
    let rep = check_params(&mut m, &mut |mm: &CrwkvModel<f64>| probe_loss(&mm.forward(&x).expect("shape"), &probe), 1, &mut rng)
        .merge(check_input(&x, &dx, &mut |xx| probe_loss(&frozen.forward(xx).expect("shape"), &probe), 24, &mut rng));
    grad(rep, 1e-3)
}

fn naive_dft(x: &FeatureMap<f64>) -> (Vec<f64>, Vec<f64>) {
    let [_, _, h, w] = x.shape();
    let (mut re, mut im) = (vec![0.0; h * w], vec![0.0; h * w]);
    for u in 0..h {
        for v in 0..w {
            for m in 0..h {
                for n in 0..w {
                    let a = -std::f64::consts::TAU * ((u * m) as f64 / h as f64 + (v * n) as f64 / w as f64);
                    re[u * w + v] += x.at(0, 0, m, n) * a.cos();
                    im[u * w + v] += x.at(0, 0, m, n) * a.sin();
                }
            }
        }
    }
    (re, im)
}

fn fft_checks(_: &Faults) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(130);
    let x = FeatureMap::<f64>::randn([2, 3, 8, 6], &mut rng);
    let z = fft2d(&x);
    let (back, _) = ifft2d(&z);
    let scale = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let a = bound("round trip", back.max_abs_diff(&x) / scale, 1e-6)?;
    let small = FeatureMap::<f64>::randn([1, 1, 4, 4], &mut rng);
    let zs = fft2d(&small);
    let (re, im) = naive_dft(&small);
    let gap = zs.re.data().iter().zip(&re).chain(zs.im.data().iter().zip(&im)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let b = bound("4x4 vs naive", gap, 1e-6)?;
    let parseval = (z.energy() - 48.0 * x.dot(&x)).abs() / (48.0 * x.dot(&x));
    let c = bound("parseval", parseval, 1e-5)?;
    Ok(format!("{a}; {b}; {c}"))
}

fn cts_partition(_: &Faults) -> CheckResult {
    let spans = partition_channels(&OffsetDictionary::context(), 48).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = spans.iter().map(|s| s.count).collect();
    if counts != [6, 6, 6, 6, 3, 3, 3, 3, 3, 3, 3, 3] {
        return Err(format!("C=48 spans {counts:?}"));
    }
    for c in 12..=256 {
        for v in ShiftVariant::ALL {
            let spans = partition_channels(&v.dictionary(), c).map_err(|e| e.to_string())?;
            let mut next = 0;
            for s in &spans {
                if s.start != next {
                    return Err(format!("{v} C={c}: gap or overlap at channel {next}"));
                }
                next += s.count;
            }
            if next != c {
                return Err(format!("{v} C={c}: covers {next} channels"));
            }
        }
    }
    Ok("C=48 spans 6x4,3x8; coverage exact for C in 12..=256".into())
}

fn cts_identity(_: &Faults) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(131);
    let x = FeatureMap::<f64>::randn([2, 48, 9, 9], &mut rng);
    let y = crate::shift::cts(&x, &OffsetDictionary::context(), 0.0).map_err(|e| e.to_string())?;
    if y == x {
        Ok("omega = 0 is the identity".into())
    } else {
        Err(format!("omega = 0 changed values by {:.3e}", y.max_abs_diff(&x)))
    }
}

fn metrics_checks(_: &Faults) -> CheckResult {
    let a = FeatureMap::<f64>::full([1, 3, 16, 16], 0.4);
    let b = a.map(|v| v + 1.0 / 255.0);
    let p = psnr(&a, &b).map_err(|e| e.to_string())?;
    let first = bound("|psnr - 48.13|", (p - 48.13).abs(), 0.01)?;
    let mut rng = ChaCha8Rng::seed_from_u64(132);
    let img = FeatureMap::<f64>::from_fn([1, 3, 20, 20], |_| rng.gen());
    let s = ssim(&img, &img).map_err(|e| e.to_string())?;
    if s != 1.0 {
        return Err(format!("ssim(a, a) = {s}"));
    }
    Ok(format!("psnr {p:.4} dB ({first}); ssim(a, a) = 1"))
}

fn schedule_checks(_: &Faults) -> CheckResult {
    let ends = (lr_schedule(0), lr_schedule(288_000));
    if ends != (3e-4, 1e-6) {
        return Err(format!("endpoints {ends:?}"));
    }
    let mut last = lr_schedule(192_000);
    for t in (192_000..=288_000).step_by(97) {
        let lr = lr_schedule(t);
        if lr > last {
            return Err(format!("increase at t = {t}"));
        }
        last = lr;
    }
    Ok("lr(0) = 3e-4, lr(288000) = 1e-6, non-increasing after 192000".into())
}

fn loss_checks(_: &Faults) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(133);
    let t = FeatureMap::<f64>::randn([1, 2, 3, 3], &mut rng);
    let y = t.zip_map(&FeatureMap::randn(t.shape(), &mut rng), |a, n| a + n.signum() * (0.1 + n.abs())).expect("same");
    let mut rep = GradReport::default();
    for kind in [LossKind::L1, LossKind::charbonnier(), LossKind::Mse, LossKind::Psnr] {
        let (_, g) = loss(kind, &y, &t).map_err(|e| e.to_string())?;
        rep = rep.merge(check_input(&y, &g, &mut |yy| loss(kind, yy, &t).expect("shape").0, usize::MAX, &mut rng));
    }
    grad(rep, 1e-5)
}

pub fn checks() -> Vec<Check> {
    macro_rules! c {
        ($name:expr, $f:ident) => {
            Check { name: $name, run: $f }
        };
    }
    vec![
        c!("wkv.scan_vs_reference", wkv_scan_vs_reference),
        c!("wkv.reversal", wkv_reversal),
        c!("wkv.gradient", wkv_gradient),
        c!("grad.linear", grad_linear),
        c!("grad.conv", grad_conv),
        c!("grad.layer_norm", grad_layer_norm),
        c!("grad.fft", grad_fft),
        c!("grad.shift", grad_shift),
        c!("grad.crm", grad_crm),
        c!("grad.cmix", grad_cmix),
        c!("grad.fmix", grad_fmix),
        c!("grad.crb_fmix", grad_crb_fmix),
        c!("grad.crb_crm", grad_crb_crm),
        c!("grad.model", grad_model),
        c!("fft.transform", fft_checks),
        c!("cts.partition", cts_partition),
        c!("cts.identity", cts_identity),
        c!("metrics.oracles", metrics_checks),
        c!("train.schedule", schedule_checks),
        c!("train.losses", loss_checks),
    ]
}

/// Runs every check whose name contains `filter`.
pub fn run_selftest(filter: Option<&str>, faults: &Faults) -> Vec<Outcome> {
    checks()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| {
            let t0 = Instant::now();
            let r = (c.run)(faults);
            let seconds = t0.elapsed().as_secs_f64();
            let (passed, detail) = match r {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            Outcome {
                name: c.name,
                passed,
                detail,
                seconds,
            }
        })
        .collect()
}

/// Deterministic CSV: timings are left out.
pub fn outcomes_csv(outcomes: &[Outcome]) -> String {
    let mut s = String::from("check,status,detail\n");
    for o in outcomes {
        let detail = o.detail.replace('"', "'");
        writeln!(s, "{},{},\"{detail}\"", o.name, if o.passed { "pass" } else { "fail" }).expect("string write");
    }
    s
}

pub fn outcomes_table(outcomes: &[Outcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(5);
    let mut s = String::new();
    for o in outcomes {
        writeln!(s, "{:<width$}  {}  {:>7.2}s  {}", o.name, if o.passed { "PASS" } else { "FAIL" }, o.seconds, o.detail).expect("string write");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    writeln!(s, "{} checks, {} failed", outcomes.len(), failed).expect("string write");
    s
}
