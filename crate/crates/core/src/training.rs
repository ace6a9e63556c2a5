//! Adversarial objectives, the optimizer and the alternating training schedule.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairTensors;
use crate::error::{Error, Result};
use crate::wnet::{d1_bundle, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ParamStore, SkipWarp};

/// Scores are clamped to `[SCORE_EPS, 1 - SCORE_EPS]` before taking logs.
pub const SCORE_EPS: f64 = 1e-7;
const ADAM_EPS: f64 = 1e-8;

fn clamped(scores: &Tensor) -> Result<Tensor> {
    Ok(scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)?)
}

fn adversarial_value(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let real_term = clamped(real)?.log()?.mean_all()?;
    let fake_term = clamped(fake)?.affine(-1.0, 1.0)?.log()?.mean_all()?;
    Ok((real_term + fake_term)?)
}

/// `E[log D1(real | y)] + E[log(1 - D1(fake | y))]`, averaged over maps and batch.
pub fn cgan_loss(d1_real: &Tensor, d1_fake: &Tensor) -> Result<Tensor> {
    adversarial_value(d1_real, d1_fake)
}

/// `E[log D2(x_tgt)] + E[log(1 - D2(x̂))]`.
pub fn gan_loss(d2_real: &Tensor, d2_fake: &Tensor) -> Result<Tensor> {
    adversarial_value(d2_real, d2_fake)
}

/// Non-saturating generator term `-E[log D(fake)]`.
pub fn generator_adversarial_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(clamped(fake)?.log()?.mean_all()?.neg()?)
}

/// Mean absolute difference.
pub fn l1_loss(generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    if generated.dims() != target.dims() {
        return Err(Error::invalid(format!(
            "L1 operands differ in shape: {:?} vs {:?}",
            generated.dims(),
            target.dims()
        )));
    }
    Ok((generated - target)?.abs()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weights of the combined objective `L_cGAN + λ1·L_GAN + λ2·L1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Objective {
    pub fn combine(&self, cgan: f64, gan: f64, l1: f64) -> f64 {
        cgan + self.lambda1 * gan + self.lambda2 * l1
    }

    pub fn combine_tensors(&self, cgan: &Tensor, gan: &Tensor, l1: &Tensor) -> Result<Tensor> {
        Ok(((cgan + gan.affine(self.lambda1, 0.0)?)? + l1.affine(self.lambda2, 0.0)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub d_steps_per_g_step: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 90,
            iterations_per_epoch: 500,
            d_steps_per_g_step: 2,
            lambda1: 1.0,
            lambda2: 0.01,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        Objective {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("beta1", self.beta1), ("beta2", self.beta2)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::invalid("Adam betas must be below 1"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        let counts = [
            ("epochs", self.epochs),
            ("iterations_per_epoch", self.iterations_per_epoch),
            ("d_steps_per_g_step", self.d_steps_per_g_step),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction. One instance per network.
#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    step: u64,
    slots: Vec<AdamSlot>,
}

#[derive(Debug)]
struct AdamSlot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let slots = params
            .iter()
            .map(|(name, var)| {
                Ok(AdamSlot {
                    name: name.clone(),
                    var: var.clone(),
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lr,
            beta1,
            beta2,
            step: 0,
            slots,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            slot.m = (slot.m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?.detach();
            slot.v = (slot.v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?.detach();
            let m_hat = slot.m.affine(1.0 / bc1, 0.0)?;
            let v_hat = slot.v.affine(1.0 / bc2, 0.0)?;
            let update = (m_hat / v_hat.sqrt()?.affine(1.0, ADAM_EPS)?)?;
            slot.var
                .set(&(slot.var.as_tensor() - update.affine(self.lr, 0.0)?)?.detach())?;
        }
        Ok(())
    }

    fn export(&self, prefix: &str, out: &mut HashMap<String, Tensor>) -> Result<()> {
        for s in &self.slots {
            out.insert(format!("{prefix}.m.{}", s.name), s.m.copy()?);
            out.insert(format!("{prefix}.v.{}", s.name), s.v.copy()?);
        }
        out.insert(
            format!("{prefix}.step"),
            Tensor::new(&[self.step as i64], &Device::Cpu)?,
        );
        Ok(())
    }

    fn import(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let get = |key: String| {
            tensors
                .get(&key)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {key}")))
        };
        for s in &mut self.slots {
            s.m = get(format!("{prefix}.m.{}", s.name))?.to_dtype(s.var.dtype())?;
            s.v = get(format!("{prefix}.v.{}", s.name))?.to_dtype(s.var.dtype())?;
        }
        self.step = get(format!("{prefix}.step"))?.to_vec1::<i64>()?[0] as u64;
        Ok(())
    }
}

/// Layouts of all three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub generator: GeneratorSpec,
    pub d1: DiscriminatorSpec,
    pub d2: DiscriminatorSpec,
}

impl ModelSpec {
    pub fn from_generator(generator: GeneratorSpec) -> Self {
        Self {
            generator,
            d1: DiscriminatorSpec::d1(),
            d2: DiscriminatorSpec::d2(),
        }
    }

    /// All channel counts divided by `divisor`.
    pub fn scaled(generator: GeneratorSpec, divisor: usize) -> Self {
        Self {
            generator: generator.with_channel_divisor(divisor),
            d1: DiscriminatorSpec::d1().with_channel_divisor(divisor),
            d2: DiscriminatorSpec::d2().with_channel_divisor(divisor),
        }
    }
}

#[derive(Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub generator: Generator,
    pub d1: Discriminator,
    pub d2: Discriminator,
}

impl Model {
    pub fn new(spec: ModelSpec, dtype: DType, seed: u64) -> Result<Self> {
        let generator = Generator::new(spec.generator.clone(), dtype, seed ^ 0x6765_6e00)?;
        let d1 = Discriminator::new(spec.d1.clone(), dtype, seed ^ 0x6431_0000)?;
        let d2 = Discriminator::new(spec.d2.clone(), dtype, seed ^ 0x6432_0000)?;
        Ok(Self {
            spec,
            generator,
            d1,
            d2,
        })
    }

    pub fn dtype(&self) -> DType {
        self.generator.params().dtype()
    }

    pub fn export(&self) -> HashMap<String, Tensor> {
        let mut out = self.generator.params().export("g.");
        out.extend(self.d1.params().export("d1."));
        out.extend(self.d2.params().export("d2."));
        out
    }

    pub fn import(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.generator.params().import("g.", tensors)?;
        self.d1.params().import("d1.", tensors)?;
        self.d2.params().import("d2.", tensors)
    }
}

/// A stacked mini-batch on the model's device and dtype.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src_in: Tensor,
    pub tgt_in: Tensor,
    pub tgt_image: Tensor,
    pub tgt_heatmaps: Tensor,
    pub warps: Vec<SkipWarp>,
}

fn stack(arrays: &[&ndarray::Array3<f32>], dtype: DType) -> Result<Tensor> {
    let (c, h, w) = arrays[0].dim();
    let mut flat = Vec::with_capacity(arrays.len() * c * h * w);
    for a in arrays {
        if a.dim() != (c, h, w) {
            return Err(Error::invalid("batch members differ in shape"));
        }
        flat.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(flat, (arrays.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Batch {
    pub fn from_pairs(pairs: &[&PairTensors], dtype: DType) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let levels = pairs[0].warps.len();
        let warps = (0..levels)
            .map(|l| {
                let plans: Vec<_> = pairs.iter().map(|p| &p.warps[l]).collect();
                SkipWarp::from_plans(&plans, &Device::Cpu)
            })
            .collect::<Result<Vec<_>>>()?;
        let get = |f: fn(&PairTensors) -> &ndarray::Array3<f32>| {
            stack(&pairs.iter().map(|p| f(p)).collect::<Vec<_>>(), dtype)
        };
        Ok(Self {
            src_in: get(|p| &p.src_in)?,
            tgt_in: get(|p| &p.tgt_in)?,
            tgt_image: get(|p| &p.tgt_image)?,
            tgt_heatmaps: get(|p| &p.tgt_heatmaps)?,
            warps,
        })
    }
}

/// Raw discriminator outputs for one batch.
pub struct Scores {
    pub fake: Tensor,
    pub d1_real: Tensor,
    pub d1_fake: Tensor,
    pub d2_real: Tensor,
    pub d2_fake: Tensor,
}

impl Model {
    pub fn generate(&self, batch: &Batch, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        self.generator
            .forward(&batch.src_in, &batch.tgt_in, &batch.warps, dropout_rng)
    }

    /// Inference forward (no dropout), one image per batch entry.
    pub fn generate_images(&self, batch: &Batch) -> Result<Vec<crate::image::ImagePlane>> {
        let out = self.generate(batch, None)?.to_dtype(DType::F32)?;
        let (n, c, h, w) = out.dims4()?;
        let v = out.flatten_all()?.to_vec1::<f32>()?;
        (0..n)
            .map(|k| {
                let chw = ndarray::Array3::from_shape_vec((c, h, w), v[k * c * h * w..(k + 1) * c * h * w].to_vec())
                    .map_err(|e| Error::invalid(e.to_string()))?;
                crate::image::ImagePlane::from_chw(&chw)
            })
            .collect()
    }

    /// Scores real and generated images with both discriminators.
    pub fn score(&self, batch: &Batch, fake: Tensor) -> Result<Scores> {
        Ok(Scores {
            d1_real: self
                .d1
                .forward(&d1_bundle(&batch.src_in, &batch.tgt_image, &batch.tgt_heatmaps)?)?,
            d1_fake: self
                .d1
                .forward(&d1_bundle(&batch.src_in, &fake, &batch.tgt_heatmaps)?)?,
            d2_real: self.d2.forward(&batch.tgt_image)?,
            d2_fake: self.d2.forward(&fake)?,
            fake,
        })
    }

    /// `L_cGAN + λ1·L_GAN + λ2·L1` evaluated end to end.
    pub fn total_objective(&self, batch: &Batch, objective: &Objective) -> Result<Tensor> {
        let fake = self.generate(batch, None)?;
        let l1 = l1_loss(&fake, &batch.tgt_image)?;
        let s = self.score(batch, fake)?;
        objective.combine_tensors(
            &cgan_loss(&s.d1_real, &s.d1_fake)?,
            &gan_loss(&s.d2_real, &s.d2_fake)?,
            &l1,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    D,
    G,
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepKind::D => "d",
            StepKind::G => "g",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_cgan: f64,
    pub l_gan: f64,
    pub l1: f64,
    pub d1_loss: f64,
    pub d2_loss: f64,
    pub g_loss: f64,
}

impl StepLosses {
    fn all_finite(&self) -> bool {
        [
            self.l_cgan,
            self.l_gan,
            self.l1,
            self.d1_loss,
            self.d2_loss,
            self.g_loss,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 1-based.
    pub epoch: usize,
    /// 1-based within the epoch.
    pub iteration: usize,
    /// 1-based within the iteration and kind.
    pub step: usize,
    pub kind: StepKind,
    pub losses: StepLosses,
}

pub const LOG_HEADER: &str = "epoch,iteration,step,kind,l_cgan,l_gan,l1,d1_loss,d2_loss,g_loss";

impl LogRecord {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch, self.iteration, self.step, self.kind, l.l_cgan, l.l_gan, l.l1, l.d1_loss, l.d2_loss, l.g_loss
        )
    }
}

/// State captured when a loss turns non-finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub epoch: usize,
    pub iteration: usize,
    pub kind: StepKind,
    pub losses: StepLosses,
    pub grad_norms: Vec<(String, f64)>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} iteration {} ({} step): {:?}; grad norms:",
            self.epoch, self.iteration, self.kind, self.losses
        )?;
        for (name, n) in &self.grad_norms {
            write!(f, " {name}={n:e}")?;
        }
        Ok(())
    }
}

fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut total = 0.0;
    for (_, var) in params.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(total.sqrt())
}

/// Receives training progress.
pub trait TrainSink {
    fn record(&mut self, record: &LogRecord) -> Result<()>;
    fn epoch_end(&mut self, epoch: usize, trainer: &Trainer) -> Result<()>;
}

/// Keeps records in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<LogRecord>,
    pub epochs: Vec<usize>,
}

impl TrainSink for MemorySink {
    fn record(&mut self, record: &LogRecord) -> Result<()> {
        self.records.push(*record);
        Ok(())
    }

    fn epoch_end(&mut self, epoch: usize, _: &Trainer) -> Result<()> {
        self.epochs.push(epoch);
        Ok(())
    }
}

pub const LOSS_LOG: &str = "losses.csv";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch}.safetensors")
}

/// Writes `losses.csv` and one checkpoint per epoch into a run directory.
#[derive(Debug)]
pub struct RunDirSink {
    dir: PathBuf,
    log: fs::File,
}

impl RunDirSink {
    /// Opens the log for appending, first truncating it to records of epochs
    /// `<= epochs_done` so a resumed run continues a consistent trace.
    pub fn open(dir: &Path, epochs_done: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOSS_LOG);
        let mut kept = String::from(LOG_HEADER);
        kept.push('\n');
        if let Ok(text) = fs::read_to_string(&path) {
            for line in text.lines().skip(1) {
                let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
                if epoch.is_some_and(|e| e <= epochs_done) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        let log = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }
}

impl TrainSink for RunDirSink {
    fn record(&mut self, record: &LogRecord) -> Result<()> {
        writeln!(self.log, "{}", record.to_csv()).map_err(|e| Error::io(self.dir.join(LOSS_LOG), e))
    }

    fn epoch_end(&mut self, epoch: usize, trainer: &Trainer) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(self.dir.join(LOSS_LOG), e))?;
        trainer.save_checkpoint(&self.dir.join(checkpoint_name(epoch)))
    }
}

/// Latest `ckpt_epoch_<n>` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n = name
                .strip_prefix("ckpt_epoch_")?
                .strip_suffix(".safetensors")?
                .parse::<usize>()
                .ok()?;
            Some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
}

/// Update counters, by network kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub discriminator: u64,
    pub generator: u64,
}

/// Owns the model, the three optimizers and the schedule position.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    opt_g: Adam,
    opt_d1: Adam,
    opt_d2: Adam,
    epochs_done: usize,
}

fn bytes_tensor(bytes: &[u8]) -> Result<Tensor> {
    Ok(Tensor::from_vec(bytes.to_vec(), bytes.len(), &Device::Cpu)?)
}

impl Trainer {
    pub fn new(config: TrainConfig, spec: ModelSpec, dtype: DType) -> Result<Self> {
        config.validate()?;
        let model = Model::new(spec, dtype, config.seed)?;
        let adam = |p: &ParamStore| Adam::new(p, config.lr, config.beta1, config.beta2);
        Ok(Self {
            opt_g: adam(model.generator.params())?,
            opt_d1: adam(model.d1.params())?,
            opt_d2: adam(model.d2.params())?,
            model,
            config,
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn update_counts(&self) -> UpdateCounts {
        UpdateCounts {
            discriminator: self.opt_d1.steps(),
            generator: self.opt_g.steps(),
        }
    }

    /// RNG for batch sampling and dropout of one iteration, independent of history.
    fn iteration_rng(&self, global_iteration: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7472_6169_6e00);
        rng.set_stream(global_iteration);
        rng
    }

    pub fn d_step(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<(StepLosses, GradStore)> {
        let fake = self.model.generate(batch, Some(rng))?.detach();
        let l1 = l1_loss(&fake, &batch.tgt_image)?;
        let s = self.model.score(batch, fake)?;
        let l_cgan = cgan_loss(&s.d1_real, &s.d1_fake)?;
        let l_gan = gan_loss(&s.d2_real, &s.d2_fake)?;
        let d1_loss = l_cgan.neg()?;
        let d2_loss = l_gan.neg()?;
        let grads = (&d1_loss + &d2_loss)?.backward()?;
        let obj = self.config.objective();
        let g_loss = scalar(&generator_adversarial_loss(&s.d1_fake)?)?
            + obj.lambda1 * scalar(&generator_adversarial_loss(&s.d2_fake)?)?
            + obj.lambda2 * scalar(&l1)?;
        let losses = StepLosses {
            l_cgan: scalar(&l_cgan)?,
            l_gan: scalar(&l_gan)?,
            l1: scalar(&l1)?,
            d1_loss: scalar(&d1_loss)?,
            d2_loss: scalar(&d2_loss)?,
            g_loss,
        };
        Ok((losses, grads))
    }

    pub fn g_step(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<(StepLosses, GradStore)> {
        let fake = self.model.generate(batch, Some(rng))?;
        let l1 = l1_loss(&fake, &batch.tgt_image)?;
        let s = self.model.score(batch, fake)?;
        let adv1 = generator_adversarial_loss(&s.d1_fake)?;
        let adv2 = generator_adversarial_loss(&s.d2_fake)?;
        let obj = self.config.objective();
        let g_loss = ((&adv1 + adv2.affine(obj.lambda1, 0.0)?)? + l1.affine(obj.lambda2, 0.0)?)?;
        let grads = g_loss.backward()?;
        let l_cgan = cgan_loss(&s.d1_real, &s.d1_fake)?;
        let l_gan = gan_loss(&s.d2_real, &s.d2_fake)?;
        let losses = StepLosses {
            l_cgan: scalar(&l_cgan)?,
            l_gan: scalar(&l_gan)?,
            l1: scalar(&l1)?,
            d1_loss: -scalar(&l_cgan)?,
            d2_loss: -scalar(&l_gan)?,
            g_loss: scalar(&g_loss)?,
        };
        Ok((losses, grads))
    }

    fn diagnostic(
        &self,
        epoch: usize,
        iteration: usize,
        kind: StepKind,
        losses: StepLosses,
        grads: &GradStore,
    ) -> Result<Error> {
        let grad_norms = vec![
            (
                "generator".to_string(),
                grad_norm(self.model.generator.params(), grads)?,
            ),
            ("d1".to_string(), grad_norm(self.model.d1.params(), grads)?),
            ("d2".to_string(), grad_norm(self.model.d2.params(), grads)?),
        ];
        Ok(Error::NonFiniteLoss(Box::new(Diagnostic {
            epoch,
            iteration,
            kind,
            losses,
            grad_norms,
        })))
    }

    /// Trains until `config.epochs` are done.
    pub fn run(&mut self, data: &[PairTensors], sink: &mut dyn TrainSink) -> Result<()> {
        self.run_until(data, self.config.epochs, sink)
    }

    /// Trains until `last_epoch` (clamped to `config.epochs`) epochs are done.
    pub fn run_until(&mut self, data: &[PairTensors], last_epoch: usize, sink: &mut dyn TrainSink) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("no training pairs"));
        }
        let dtype = self.model.dtype();
        let last_epoch = last_epoch.min(self.config.epochs);
        let iters = self.config.iterations_per_epoch;
        while self.epochs_done < last_epoch {
            let epoch = self.epochs_done + 1;
            for it in 1..=iters {
                let global = (self.epochs_done * iters + it - 1) as u64;
                let mut rng = self.iteration_rng(global);
                let picks: Vec<&PairTensors> = (0..self.config.batch_size)
                    .map(|_| &data[rng.gen_range(0..data.len())])
                    .collect();
                let batch = Batch::from_pairs(&picks, dtype)?;
                for step in 1..=self.config.d_steps_per_g_step {
                    let (losses, grads) = self.d_step(&batch, &mut rng)?;
                    if !losses.all_finite() {
                        return Err(self.diagnostic(epoch, it, StepKind::D, losses, &grads)?);
                    }
                    self.opt_d1.step(&grads)?;
                    self.opt_d2.step(&grads)?;
                    sink.record(&LogRecord {
                        epoch,
                        iteration: it,
                        step,
                        kind: StepKind::D,
                        losses,
                    })?;
                }
                let (losses, grads) = self.g_step(&batch, &mut rng)?;
                if !losses.all_finite() {
                    return Err(self.diagnostic(epoch, it, StepKind::G, losses, &grads)?);
                }
                self.opt_g.step(&grads)?;
                sink.record(&LogRecord {
                    epoch,
                    iteration: it,
                    step: 1,
                    kind: StepKind::G,
                    losses,
                })?;
            }
            self.epochs_done = epoch;
            log::info!("epoch {epoch}/{} done", self.config.epochs);
            sink.epoch_end(epoch, self)?;
        }
        Ok(())
    }

    /// Parameters, optimizer state, epoch counter, model layout and config in one file.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.export();
        self.opt_g.export("opt_g", &mut tensors)?;
        self.opt_d1.export("opt_d1", &mut tensors)?;
        self.opt_d2.export("opt_d2", &mut tensors)?;
        tensors.insert(
            "meta.epoch".into(),
            Tensor::new(&[self.epochs_done as i64], &Device::Cpu)?,
        );
        tensors.insert(
            "meta.model_spec".into(),
            bytes_tensor(&serde_json::to_vec(&self.model.spec)?)?,
        );
        tensors.insert(
            "meta.train_config".into(),
            bytes_tensor(&serde_json::to_vec(&self.config)?)?,
        );
        candle_core::safetensors::save(&tensors, path).map_err(|e| match e {
            candle_core::Error::Io(io) => Error::io(path, io),
            other => other.into(),
        })
    }

    /// Restores a trainer; `config` overrides the stored one when given (e.g. more epochs).
    pub fn load_checkpoint(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let config = config.unwrap_or(ckpt.config.clone());
        let mut trainer = Trainer::new(config, ckpt.spec.clone(), ckpt.dtype)?;
        trainer.model.import(&ckpt.tensors)?;
        trainer.opt_g.import("opt_g", &ckpt.tensors)?;
        trainer.opt_d1.import("opt_d1", &ckpt.tensors)?;
        trainer.opt_d2.import("opt_d2", &ckpt.tensors)?;
        trainer.epochs_done = ckpt.epoch;
        Ok(trainer)
    }
}

/// A checkpoint file read back into memory.
#[derive(Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub dtype: DType,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| match e {
            candle_core::Error::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.to_path_buf(),
                field: "checkpoint".into(),
                message: other.to_string(),
            },
        })?;
        let field = |name: &str| {
            tensors.get(name).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                field: name.into(),
                message: "missing".into(),
            })
        };
        let json = |name: &str| -> Result<Vec<u8>> { Ok(field(name)?.to_vec1::<u8>()?) };
        let spec: ModelSpec = serde_json::from_slice(&json("meta.model_spec")?)?;
        let config: TrainConfig = serde_json::from_slice(&json("meta.train_config")?)?;
        let epoch = field("meta.epoch")?.to_vec1::<i64>()?[0] as usize;
        let dtype = field("g.e1.0.weight")?.dtype();
        Ok(Self {
            epoch,
            spec,
            config,
            dtype,
            tensors,
        })
    }

    /// Builds the model with the stored weights.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.spec.clone(), self.dtype, self.config.seed)?;
        model.import(&self.tensors)?;
        Ok(model)
    }
}
