//! Dequantization, AdamW with a cosine schedule, and the train and eval loops.
//!
//! The optimized loss is the mean bits per dimension over a batch, so its
//! gradient is the gradient of the summed nats NLL divided by `B · D · ln 2`.
//!
//! Metrics are written one record per line as space-separated `key=value`
//! pairs, keys in the order `step lr train_bpd [eval_bpd]`. Floats use the
//! shortest representation that parses back to the same value.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{self, Checkpoint, Dataset, NamedTensor};
use crate::error::{JetError, Result};
use crate::flow::{build_jet, JetConfig, JetModel};
use crate::numerics::{DType, Float, ParamStore, Tape, Tensor};
use crate::patchify::{patchify_slice, PatchGeometry};
use crate::rng::{rng_for, stream};

/// Named starting points for [`TrainConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Small-machine defaults: 500 warmup steps.
    Desk,
    /// No warmup and no clipping.
    PaperStrict,
    /// Fine-tuning after pretraining: lr 1e-5 for 30 epochs.
    FinetuneI1k,
    /// Fine-tuning on CIFAR-10: lr 3e-6 for 100 epochs.
    FinetuneCifar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data_order: u64,
    pub dequant: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data_order: 1,
            dequant: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub warmup_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip_norm: Option<f64>,
    /// Evaluate every this many steps (and at the end) when an eval set is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    /// Checkpoint every this many steps (and at the end) when an output directory is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let base = TrainConfig {
            base_lr: 3e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            epochs: 10,
            steps: None,
            batch_size: 64,
            warmup_steps: 500,
            grad_clip_norm: None,
            eval_every: None,
            checkpoint_every: None,
            seeds: Seeds::default(),
        };
        match p {
            Preset::Desk => base,
            Preset::PaperStrict => TrainConfig {
                warmup_steps: 0,
                grad_clip_norm: None,
                ..base
            },
            Preset::FinetuneI1k => TrainConfig {
                base_lr: 1e-5,
                epochs: 30,
                ..base
            },
            Preset::FinetuneCifar => TrainConfig {
                base_lr: 3e-6,
                epochs: 100,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(JetError::config(format!("train.{what}")));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if matches!(self.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return bad("grad_clip_norm must be positive");
        }
        if self.eval_every == Some(0) || self.checkpoint_every == Some(0) {
            return bad("eval_every and checkpoint_every must be positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        (n / self.batch_size.min(n).max(1)).max(1)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.steps.unwrap_or(self.epochs * self.steps_per_epoch(n))
    }
}

/// `(pixel + u) / 256 - 0.5` with one `u ~ U[0, 1)` per subpixel.
///
/// Rounding to `F` can land exactly on 0.5; such values are pulled down to
/// the largest `F` below it so the range stays half-open.
pub fn dequantize<F: Float>(pixels: &[u8], rng: &mut impl Rng) -> Vec<F> {
    let half = F::of(0.5);
    let below_half = half - F::epsilon() / F::of(4.0);
    pixels
        .iter()
        .map(|&p| {
            let v = F::of((p as f64 + rng.gen::<f64>()) / 256.0 - 0.5);
            if v >= half {
                below_half
            } else {
                v
            }
        })
        .collect()
}

/// Linear warmup to `base_lr` over `warmup_steps`, then half-cosine decay
/// reaching zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW moments, aligned with the parameter store's order.
#[derive(Clone, Debug)]
pub struct OptState<F> {
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Float> OptState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        OptState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layer")?.split('.').next()?.parse().ok()
}

/// One decoupled-weight-decay Adam update with bias correction. Rejects
/// non-finite gradients without touching any state.
pub fn adamw_step<F: Float>(
    store: &mut ParamStore<F>,
    opt: &mut OptState<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if opt.m.len() != store.len() {
        return Err(JetError::Usage(format!(
            "optimizer state has {} slots for {} parameters",
            opt.m.len(),
            store.len()
        )));
    }
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        let err = JetError::numeric(
            None,
            format!("non-finite gradient for {} at step {}", p.name, opt.t + 1),
        );
        return Err(match layer_of(&p.name) {
            Some(l) => err.in_layer(l),
            None => err,
        });
    }
    opt.t += 1;
    let t = opt.t as i32;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let c1 = F::one() - F::of(cfg.beta1.powi(t));
    let c2 = F::one() - F::of(cfg.beta2.powi(t));
    let (lr, wd, eps) = (F::of(lr), F::of(cfg.weight_decay), F::of(cfg.eps));
    for ((p, m), v) in store.iter_mut().zip(&mut opt.m).zip(&mut opt.v) {
        let g = p.grad.data();
        for (((w, mi), vi), &gi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g)
        {
            *mi = b1 * *mi + (F::one() - b1) * gi;
            *vi = b2 * *vi + (F::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = store.grad_norm().as_f64();
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Dequantized, patchified tokens `[idx.len(), K, 2d]` for the selected images.
/// Dequantize and patchify the images at `idx` into `[B, K, 2d]`.
pub fn batch_tokens<F: Float>(
    data: &Dataset,
    idx: &[usize],
    geom: &PatchGeometry,
    rng: &mut impl Rng,
) -> Result<Tensor<F>> {
    let mut pixels = Vec::with_capacity(idx.len() * data.image_len());
    for &i in idx {
        pixels.extend_from_slice(data.image(i));
    }
    let values: Vec<F> = dequantize(&pixels, rng);
    Tensor::new(
        &[idx.len(), geom.tokens(), geom.token_width()],
        patchify_slice(&values, geom),
    )
}

fn check_geometry(data: &Dataset, geom: &PatchGeometry) -> Result<()> {
    if (data.height, data.width, data.channels) != (geom.height, geom.width, geom.channels) {
        return Err(JetError::Data(format!(
            "images are {}x{}x{} but the model expects {}x{}x{}",
            data.height, data.width, data.channels, geom.height, geom.width, geom.channels
        )));
    }
    Ok(())
}

/// Per-image bits per dimension under one seeded dequantization draw.
///
/// Image `i` uses noise stream `(noise_seed, EVAL_NOISE, repeat, i)`, so the
/// result does not depend on batch size or thread count.
pub fn eval_per_image<F: Float>(
    model: &JetModel<F>,
    data: &Dataset,
    noise_seed: u64,
    repeat: u64,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let geom = *model.geometry();
    check_geometry(data, &geom)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Result<Vec<f64>>> = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let mut values: Vec<F> = Vec::with_capacity(chunk.len() * data.image_len());
            for &i in chunk {
                let mut r = rng_for(noise_seed, &[stream::EVAL_NOISE, repeat, i as u64]);
                values.extend(dequantize::<F>(data.image(i), &mut r));
            }
            let x = Tensor::new(
                &[chunk.len(), geom.tokens(), geom.token_width()],
                patchify_slice(&values, &geom),
            )?;
            model.bpd_per_sample(&x)
        })
        .collect();
    let mut out = Vec::with_capacity(data.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Mean bits per dimension over the whole dataset.
pub fn evaluate<F: Float>(
    model: &JetModel<F>,
    data: &Dataset,
    noise_seed: u64,
    repeat: u64,
    batch_size: usize,
) -> Result<f64> {
    let per = eval_per_image(model, data, noise_seed, repeat, batch_size)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub train_bpd: f64,
    pub eval_bpd: Option<f64>,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={} train_bpd={}",
            self.step, self.lr, self.train_bpd
        )?;
        if let Some(e) = self.eval_bpd {
            write!(f, " eval_bpd={e}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for MetricRecord {
    type Err = JetError;

    fn from_str(line: &str) -> Result<Self> {
        let bad = || JetError::Data(format!("malformed metrics line: {line:?}"));
        let mut rec = MetricRecord {
            step: 0,
            lr: 0.0,
            train_bpd: 0.0,
            eval_bpd: None,
        };
        let mut seen = 0;
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            match k {
                "step" => rec.step = v.parse().map_err(|_| bad())?,
                "lr" => rec.lr = v.parse().map_err(|_| bad())?,
                "train_bpd" => rec.train_bpd = v.parse().map_err(|_| bad())?,
                "eval_bpd" => rec.eval_bpd = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
            seen += 1;
        }
        if seen < 3 {
            return Err(bad());
        }
        Ok(rec)
    }
}

/// Where the training loop writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Directory for `metrics.log` and `checkpoint.jetf`.
    pub dir: Option<PathBuf>,
    /// Extra text stored with checkpoints (e.g. data source).
    pub extra_config: String,
}

pub const METRICS_FILE: &str = "metrics.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.jetf";

#[derive(Clone, Debug)]
pub struct TrainReport<F> {
    pub metrics: Vec<MetricRecord>,
    pub opt: OptState<F>,
    pub steps: usize,
}

/// Optimize `model` on `train_set`. The eval set, if given, is scored with
/// noise seed `eval_noise_seed`.
///
/// A numeric failure aborts the run; whatever checkpoint was written last
/// stays on disk.
pub fn train<F: Float>(
    model: &mut JetModel<F>,
    train_set: &Dataset,
    cfg: &TrainConfig,
    eval: Option<(&Dataset, u64)>,
    outputs: &TrainOutputs,
) -> Result<TrainReport<F>> {
    cfg.validate()?;
    let geom = *model.geometry();
    check_geometry(train_set, &geom)?;
    if let Some((e, _)) = eval {
        check_geometry(e, &geom)?;
    }
    let n = train_set.len();
    let batch = cfg.batch_size.min(n);
    let per_epoch = cfg.steps_per_epoch(n);
    let total = cfg.total_steps(n);
    let mut opt = OptState::new(model.params());
    let mut metrics = Vec::with_capacity(total);
    let mut log = match &outputs.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| JetError::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&path)
                .map_err(|e| JetError::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut order: Vec<usize> = Vec::new();

    for step in 0..total {
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            order = (0..n).collect();
            order.shuffle(&mut rng_for(
                cfg.seeds.data_order,
                &[stream::DATA_ORDER, epoch as u64],
            ));
        }
        let k = step % per_epoch;
        let idx = &order[k * batch..(k + 1) * batch];
        let mut noise = rng_for(cfg.seeds.dequant, &[stream::DEQUANT, step as u64]);
        let x: Tensor<F> = batch_tokens(train_set, idx, &geom, &mut noise)?;

        let tape = Tape::new();
        let loss = model.bpd_var(&tape, tape.constant(x), false)?;
        tape.check_finite()
            .map_err(|e| JetError::numeric(None, format!("{e} at step {}", step + 1)))?;
        let train_bpd = loss.value().item().as_f64();
        model.params_mut().zero_grads();
        tape.backward(loss, model.params_mut())?;
        drop(tape);
        if let Some(c) = cfg.grad_clip_norm {
            clip_grad_norm(model.params_mut(), c);
        }
        let lr = cosine_lr(step, total, cfg.base_lr, cfg.warmup_steps);
        adamw_step(model.params_mut(), &mut opt, lr, cfg)?;

        let done = step + 1;
        let eval_bpd = match (eval, cfg.eval_every) {
            (Some((e, seed)), every) if every.is_some_and(|k| done % k == 0) || done == total => {
                Some(evaluate(model, e, seed, 0, cfg.batch_size)?)
            }
            _ => None,
        };
        let rec = MetricRecord {
            step: done,
            lr,
            train_bpd,
            eval_bpd,
        };
        if let Some((f, path)) = &mut log {
            writeln!(f, "{rec}").map_err(|e| JetError::io(path.as_path(), e))?;
        }
        metrics.push(rec);
        if let Some(dir) = &outputs.dir {
            if cfg.checkpoint_every.is_some_and(|k| done % k == 0) || done == total {
                save_state(
                    &dir.join(CHECKPOINT_FILE),
                    model,
                    cfg,
                    Some(&opt),
                    done as u64,
                    &outputs.extra_config,
                )?;
            }
        }
    }
    if total == 0 {
        if let Some(dir) = &outputs.dir {
            save_state(
                &dir.join(CHECKPOINT_FILE),
                model,
                cfg,
                None,
                0,
                &outputs.extra_config,
            )?;
        }
    }
    Ok(TrainReport {
        metrics,
        opt,
        steps: total,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    dtype: DType,
    model: JetConfig,
    train: TrainConfig,
}

fn meta_text<F: Float>(model: &JetModel<F>, cfg: &TrainConfig, extra: &str) -> Result<String> {
    let meta = StateMeta {
        dtype: F::DTYPE,
        model: model.config().clone(),
        train: cfg.clone(),
    };
    let mut text = toml::to_string(&meta)
        .map_err(|e| JetError::config(format!("cannot serialize config: {e}")))?;
    if !extra.is_empty() {
        // Appended as comments so the blob still parses as the meta table.
        for line in extra.lines() {
            text.push_str("# ");
            text.push_str(line);
            text.push('\n');
        }
    }
    Ok(text)
}

/// Pack a model, its training config and optionally the optimizer moments.
pub fn state_checkpoint<F: Float>(
    model: &JetModel<F>,
    cfg: &TrainConfig,
    opt: Option<&OptState<F>>,
    step: u64,
    extra: &str,
) -> Result<Checkpoint> {
    let mut tensors: Vec<NamedTensor> = model
        .params()
        .iter()
        .map(|p| NamedTensor::from_tensor(&p.name, &p.value))
        .collect();
    if let Some(o) = opt {
        for (p, m) in model.params().iter().zip(&o.m) {
            tensors.push(NamedTensor::from_tensor(format!("opt.m.{}", p.name), m));
        }
        for (p, v) in model.params().iter().zip(&o.v) {
            tensors.push(NamedTensor::from_tensor(format!("opt.v.{}", p.name), v));
        }
    }
    Ok(Checkpoint {
        step,
        config: meta_text(model, cfg, extra)?,
        tensors,
    })
}

pub fn save_state<F: Float>(
    path: &Path,
    model: &JetModel<F>,
    cfg: &TrainConfig,
    opt: Option<&OptState<F>>,
    step: u64,
    extra: &str,
) -> Result<()> {
    data_io::save_checkpoint(&state_checkpoint(model, cfg, opt, step, extra)?, path)
}

/// Everything recovered from a checkpoint.
#[derive(Clone)]
pub struct LoadedState<F> {
    pub model: JetModel<F>,
    pub train: TrainConfig,
    pub opt: Option<OptState<F>>,
    pub step: u64,
}

/// Storage dtype recorded in a checkpoint's config blob.
pub fn checkpoint_dtype(ck: &Checkpoint, path: &Path) -> Result<DType> {
    let meta: StateMeta = toml::from_str(&ck.config)
        .map_err(|e| JetError::format(path, format!("bad config blob: {e}")))?;
    Ok(meta.dtype)
}

/// Rebuild a model from a checkpoint. Every parameter must be present with
/// its exact shape; unknown tensors are an error.
pub fn restore_state<F: Float>(ck: &Checkpoint, path: &Path) -> Result<LoadedState<F>> {
    let meta: StateMeta = toml::from_str(&ck.config)
        .map_err(|e| JetError::format(path, format!("bad config blob: {e}")))?;
    if meta.dtype != F::DTYPE {
        return Err(JetError::config(format!(
            "checkpoint stores {}, requested {}",
            meta.dtype,
            F::DTYPE
        )));
    }
    let mut model: JetModel<F> = build_jet(&meta.model)?;
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let fetch = |name: &str| -> Result<Tensor<F>> {
        ck.get(name)
            .ok_or_else(|| JetError::format(path, format!("missing tensor {name:?}")))?
            .to_tensor()
    };
    for (i, name) in names.iter().enumerate() {
        let id = model.params().find(name).expect("registered");
        debug_assert_eq!(id.index(), i);
        model
            .params_mut()
            .set_value(id, fetch(name)?)
            .map_err(|e| JetError::format(path, e.to_string()))?;
    }
    let has_opt = ck.tensors.iter().any(|t| t.name.starts_with("opt."));
    let opt = if has_opt {
        let mut o = OptState::new(model.params());
        o.t = ck.step;
        for (i, name) in names.iter().enumerate() {
            o.m[i] = fetch(&format!("opt.m.{name}"))?;
            o.v[i] = fetch(&format!("opt.v.{name}"))?;
        }
        Some(o)
    } else {
        None
    };
    let expected = names.len() * if has_opt { 3 } else { 1 };
    if ck.tensors.len() != expected {
        return Err(JetError::format(
            path,
            format!("{} tensors, expected {expected}", ck.tensors.len()),
        ));
    }
    Ok(LoadedState {
        model,
        train: meta.train,
        opt,
        step: ck.step,
    })
}

pub fn load_state<F: Float>(path: &Path) -> Result<LoadedState<F>> {
    restore_state(&data_io::load_checkpoint(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingMode;
    use crate::data_io::{synth_dataset, SynthKind};
    use crate::flow::{uniform_baseline_bpd, ChannelRatio, SpatialPolicy};
    use crate::vit::ViTTemplate;

    fn small_cfg() -> JetConfig {
        JetConfig {
            num_couplings: 2,
            channel_ratio: ChannelRatio::Ratio(1),
            spatial_policy: SpatialPolicy::CheckerOnly,
            vit: ViTTemplate::new(1, 16, 2),
            geom: PatchGeometry::new(4, 4, 3, 2).unwrap(),
            mode: CouplingMode::Pairing,
            seed: 5,
        }
    }

    #[test]
    fn dequantize_edges() {
        struct Fixed(u64);
        impl rand::RngCore for Fixed {
            fn next_u32(&mut self) -> u32 {
                self.0 as u32
            }
            fn next_u64(&mut self) -> u64 {
                self.0
            }
            fn fill_bytes(&mut self, d: &mut [u8]) {
                d.fill(0)
            }
            fn try_fill_bytes(&mut self, d: &mut [u8]) -> std::result::Result<(), rand::Error> {
                d.fill(0);
                Ok(())
            }
        }
        let lo: Vec<f64> = dequantize(&[0], &mut Fixed(0));
        assert_eq!(lo, vec![-0.5]);
        let hi: Vec<f64> = dequantize(&[255], &mut Fixed(u64::MAX));
        assert!(hi[0] < 0.5 && hi[0] > 0.5 - 1e-6);
        let hi32: Vec<f32> = dequantize(&[255], &mut Fixed(u64::MAX));
        assert!(hi32[0] < 0.5 && hi32[0] > 0.4999);
    }

    #[test]
    fn cosine_anchors() {
        assert_eq!(cosine_lr(10, 110, 1.0, 10), 1.0);
        assert_eq!(cosine_lr(110, 110, 1.0, 10), 0.0);
        assert!((cosine_lr(60, 110, 1.0, 10) - 0.5).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 100, 2.0, 0), 2.0);
        assert!((cosine_lr(4, 100, 1.0, 10) - 0.5).abs() < 1e-15);
    }

    fn scalar_store(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p));
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn adamw_single_step_examples() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut s = scalar_store(1.0, 1.0);
        let mut o = OptState::new(&s);
        adamw_step(&mut s, &mut o, 0.1, &cfg).unwrap();
        assert!((s.iter().next().unwrap().value.item() - 0.9).abs() < 1e-7);

        let mut s = scalar_store(1.0, 0.0);
        let mut o = OptState::new(&s);
        adamw_step(&mut s, &mut o, 0.1, &cfg).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item(), 1.0);

        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..cfg
        };
        let mut s = scalar_store(1.0, 0.0);
        let mut o = OptState::new(&s);
        adamw_step(&mut s, &mut o, 0.1, &cfg).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item(), 1.0 - 0.1 * 0.1);
    }

    #[test]
    fn adamw_rejects_non_finite_with_step_and_layer() {
        let mut s = ParamStore::new();
        let id = s.add("layer3.head.w", Tensor::scalar(1.0));
        s.get_mut(id).grad = Tensor::scalar(f64::NAN);
        let mut o = OptState::new(&s);
        let err = adamw_step(&mut s, &mut o, 0.1, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, JetError::Numeric { layer: Some(3), .. }));
        assert!(err.to_string().contains("step 1"));
        assert_eq!(o.t, 0);
        assert_eq!(s.value(id).item(), 1.0);
    }

    #[test]
    fn metric_lines_round_trip() {
        let r = MetricRecord {
            step: 3,
            lr: 0.1 + 0.2,
            train_bpd: 9.385_9,
            eval_bpd: Some(1.0 / 3.0),
        };
        let line = r.to_string();
        assert!(line.starts_with("step=3 lr=0.30000000000000004 train_bpd=9.3859 eval_bpd="));
        assert_eq!(line.parse::<MetricRecord>().unwrap(), r);
        assert!("step=1 lr=2".parse::<MetricRecord>().is_err());
        assert!("step=1 lr=2 train_bpd=3 extra=1"
            .parse::<MetricRecord>()
            .is_err());
    }

    #[test]
    fn only_backbone_tensors_are_trainable() {
        let m = build_jet::<f64>(&small_cfg()).unwrap();
        let expected: usize = m
            .layers()
            .iter()
            .map(|l| l.vit().config().param_count())
            .sum();
        assert_eq!(m.params().num_scalars(), expected);
        assert!(m.params().iter().all(|p| layer_of(&p.name).is_some()));
    }

    #[test]
    fn eval_is_independent_of_batching() {
        let m = build_jet::<f64>(&small_cfg()).unwrap();
        let d = synth_dataset(SynthKind::UNIFORM, 19, (4, 4, 3), 1).unwrap();
        let a = eval_per_image(&m, &d, 9, 0, 4).unwrap();
        let b = eval_per_image(&m, &d, 9, 0, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, eval_per_image(&m, &d, 9, 1, 7).unwrap());
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!((mean - uniform_baseline_bpd()).abs() < 0.2);
    }

    #[test]
    fn short_run_is_deterministic_and_checkpoints() {
        let d = synth_dataset(SynthKind::GaussianBlobs, 16, (4, 4, 3), 2).unwrap();
        let cfg = TrainConfig {
            steps: Some(6),
            batch_size: 8,
            warmup_steps: 2,
            eval_every: Some(3),
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs {
            dir: Some(dir.path().to_path_buf()),
            extra_config: "data = synth".into(),
        };
        let mut m1 = build_jet::<f64>(&small_cfg()).unwrap();
        let r1 = train(&mut m1, &d, &cfg, Some((&d, 4)), &out).unwrap();
        let mut m2 = build_jet::<f64>(&small_cfg()).unwrap();
        let r2 = train(&mut m2, &d, &cfg, Some((&d, 4)), &TrainOutputs::default()).unwrap();
        assert_eq!(r1.metrics, r2.metrics);
        assert_eq!(
            r1.metrics.iter().filter(|r| r.eval_bpd.is_some()).count(),
            2
        );

        let log = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let parsed: Vec<MetricRecord> = log.lines().map(|l| l.parse().unwrap()).collect();
        assert_eq!(parsed, r1.metrics);

        let st = load_state::<f64>(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(st.step, 6);
        assert_eq!(st.train, cfg);
        for (a, b) in st.model.params().iter().zip(m1.params().iter()) {
            assert_eq!(a.value, b.value);
        }
        let opt = st.opt.unwrap();
        assert_eq!(opt.m, r1.opt.m);
        assert_eq!(opt.v, r1.opt.v);
        assert!(load_state::<f32>(&dir.path().join(CHECKPOINT_FILE)).is_err());
    }

    #[test]
    fn bpd_gradient_is_scaled_nats_gradient() {
        let mut m = build_jet::<f64>(&small_cfg()).unwrap();
        m.randomize_heads(0.1, 3);
        let mut r = rng_for(1, &[]);
        let x: Tensor<f64> = crate::rng::normal_tensor(&mut r, &[3, 4, 12], 0.3);
        let d = m.dims() as f64;
        let grad_of = |m: &mut JetModel<f64>, nats: bool| -> Vec<f64> {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let loss = if nats {
                let (z, ld) = m.forward_var(&tape, xv).unwrap();
                z.square()
                    .sum_per_batch()
                    .unwrap()
                    .scale(0.5)
                    .add(ld.scale(-1.0))
                    .unwrap()
                    .sum()
            } else {
                m.bpd_var(&tape, xv, false).unwrap()
            };
            m.params_mut().zero_grads();
            tape.backward(loss, m.params_mut()).unwrap();
            m.params()
                .iter()
                .flat_map(|p| p.grad.data().to_vec())
                .collect()
        };
        let gb = grad_of(&mut m, false);
        let gn = grad_of(&mut m, true);
        let scale = 1.0 / (3.0 * d * std::f64::consts::LN_2);
        for (a, b) in gb.iter().zip(&gn) {
            assert!((a - b * scale).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
