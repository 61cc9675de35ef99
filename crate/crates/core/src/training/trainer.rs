use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::loss::loss;
use super::optim::{clip_grad_norm, AdamW};
use crate::data::metrics::psnr;
use crate::data::{add_noise, random_crop, Dataset, Dihedral, NoiseSpec};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{crop, pad_reflect, CrwkvModel, SIZE_MULTIPLE};
use crate::numerics::{FeatureMap, HasParams};

pub const METRICS_HEADER: &str = "iter,lr,loss,psnr";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    /// Batch PSNR of the network output against the clean target.
    pub psnr: f64,
}

impl LogRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.iter, self.lr, self.loss, self.psnr)
    }
}

pub fn metrics_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub seed: u64,
    pub model: CrwkvModel<f32>,
    pub opt: AdamW<f32>,
    /// Number of completed iterations.
    pub iteration: u64,
}

fn stack(items: &[FeatureMap<f32>]) -> Result<FeatureMap<f32>> {
    let [_, c, h, w] = items[0].shape();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for it in items {
        it.expect_shape([1, c, h, w], "batch item")?;
        data.extend_from_slice(it.data());
    }
    FeatureMap::from_vec([items.len(), c, h, w], data)
}

impl Trainer {
    pub fn new(config: RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = CrwkvModel::build(&config.model, seed)?;
        let opt = AdamW::new(&model, config.train.weight_decay);
        Ok(Self {
            config,
            seed,
            model,
            opt,
            iteration: 0,
        })
    }

    /// Continues from `ck`, which must have been written under the same
    /// run configuration.
    pub fn resume(config: RunConfig, ck: &Checkpoint) -> Result<Self> {
        let want = config.hash();
        if ck.run_hash.as_deref() != Some(want.as_str()) {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint has {}, current config is {want}",
                ck.run_hash.as_deref().unwrap_or("none")
            )));
        }
        let mut tr = Self::new(config, ck.seed)?;
        tr.model = ck.to_model()?;
        let mut missing = None;
        let mut idx = 0;
        let (ms, vs) = (&mut tr.opt.m, &mut tr.opt.v);
        tr.model.visit("", &mut |name, p| {
            for (prefix, store) in [("adam.m.", &mut *ms), ("adam.v.", &mut *vs)] {
                match ck.tensor(&format!("{prefix}{name}")) {
                    Some((_, data)) if data.len() == p.len() => store[idx] = data.to_vec(),
                    _ => missing = Some(format!("{prefix}{name}")),
                }
            }
            idx += 1;
        });
        if let Some(name) = missing {
            return Err(Error::Checkpoint(format!("optimizer state {name} missing or malformed")));
        }
        tr.opt.t = ck.iteration;
        tr.iteration = ck.iteration;
        Ok(tr)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.seed, self.iteration);
        ck.run_hash = Some(self.config.hash());
        let mut extra = Vec::new();
        let mut idx = 0;
        self.model.visit("", &mut |name, p| {
            extra.push((format!("adam.m.{name}"), p.shape.clone(), self.opt.m[idx].clone()));
            extra.push((format!("adam.v.{name}"), p.shape.clone(), self.opt.v[idx].clone()));
            idx += 1;
        });
        ck.tensors.extend(extra);
        ck
    }

    /// Noisy and clean batches for iteration `t`; a pure function of
    /// `(seed, t)`.
    pub fn sample_batch(&self, data: &Dataset, t: u64) -> Result<(FeatureMap<f32>, FeatureMap<f32>)> {
        if data.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let ts = &self.config.train;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(t + 1);
        let spec = self.config.noise();
        let (mut noisy, mut clean) = (Vec::new(), Vec::new());
        for _ in 0..ts.batch_size {
            let i = rng.gen_range(0..data.len());
            let img = &data.clean[i];
            if img.height() < ts.patch_size || img.width() < ts.patch_size {
                return Err(Error::shape(format!(
                    "{} is {}x{}, smaller than the {} training patch",
                    data.names[i],
                    img.height(),
                    img.width(),
                    ts.patch_size
                )));
            }
            let (c, (top, left)) = random_crop(img, ts.patch_size, &mut rng);
            let n = match &data.noisy {
                Some(noisy) => crate::data::patches::crop_at(&noisy[i], top, left, ts.patch_size, ts.patch_size),
                None => add_noise(&c, &spec, rng.gen())?,
            };
            let (c, n) = if ts.augment {
                let d = Dihedral::sample(&mut rng);
                (d.apply(&c), d.apply(&n))
            } else {
                (c, n)
            };
            clean.push(c);
            noisy.push(n);
        }
        Ok((stack(&noisy)?, stack(&clean)?))
    }

    /// Runs iteration `self.iteration` and advances the counter.
    pub fn step(&mut self, data: &Dataset) -> Result<LogRow> {
        let t = self.iteration;
        let lr = self.config.schedule().lr(t);
        let (noisy, clean) = self.sample_batch(data, t)?;
        self.model.zero_grad();
        let (y, cache) = self.model.forward_train(&noisy)?;
        let (value, dy) = loss(self.config.loss()?, &y, &clean)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss became {value} at iteration {t}")));
        }
        self.model.backward(&cache, &dy)?;
        drop(cache);
        clip_grad_norm(&mut self.model, self.config.train.clip_norm);
        self.opt.step(&mut self.model, lr)?;
        self.iteration += 1;
        Ok(LogRow {
            iter: t,
            lr,
            loss: value,
            psnr: psnr(&y, &clean)?,
        })
    }

    /// Trains to the configured iteration count. `on_log` sees every
    /// `log_every`-th row, `on_checkpoint` runs every `checkpoint_every`
    /// iterations and once at the end.
    pub fn run(
        &mut self,
        data: &Dataset,
        on_log: &mut dyn FnMut(&LogRow) -> Result<()>,
        on_checkpoint: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        let total = self.config.train.iterations;
        let (log_every, ck_every) = (self.config.train.log_every, self.config.train.checkpoint_every);
        let mut dirty = false;
        while self.iteration < total {
            let row = self.step(data)?;
            dirty = true;
            if row.iter % log_every == 0 {
                on_log(&row)?;
            }
            if self.iteration.is_multiple_of(ck_every) {
                on_checkpoint(self)?;
                dirty = false;
            }
        }
        if dirty {
            on_checkpoint(self)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the trainer with every logged row.
pub fn train(config: RunConfig, data: &Dataset, seed: u64) -> Result<(Trainer, Vec<LogRow>)> {
    let mut tr = Trainer::new(config, seed)?;
    let mut rows = Vec::new();
    tr.run(data, &mut |r| {
        rows.push(*r);
        Ok(())
    }, &mut |_| Ok(()))?;
    Ok((tr, rows))
}

/// Pads to the size multiple, denoises and crops back, clamping to [0, 1].
pub fn denoise(model: &CrwkvModel<f32>, img: &FeatureMap<f32>) -> Result<FeatureMap<f32>> {
    let [_, _, h, w] = img.shape();
    let y = model.forward(&pad_reflect(img, SIZE_MULTIPLE))?;
    Ok(crop(&y, h, w).map(|v| v.clamp(0.0, 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub noisy_psnr: f64,
    pub denoised_psnr: f64,
}

/// Mean PSNR of noisy inputs and of denoised outputs over `clean`, with
/// noise drawn from `seed + index`.
pub fn evaluate(model: &CrwkvModel<f32>, clean: &[FeatureMap<f32>], spec: &NoiseSpec, seed: u64) -> Result<EvalReport> {
    let (mut np, mut dp) = (0.0, 0.0);
    for (i, c) in clean.iter().enumerate() {
        let n = add_noise(c, spec, seed.wrapping_add(i as u64))?;
        np += psnr(&n, c)?;
        dp += psnr(&denoise(model, &n)?, c)?;
    }
    let k = clean.len().max(1) as f64;
    Ok(EvalReport {
        noisy_psnr: np / k,
        denoised_psnr: dp / k,
    })
}
