//! Alternating discriminator/generator optimization with a step-decay
//! learning rate, per-epoch checkpoints and development-set monitoring.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{collate, epoch_sampler, AugmentConfig, Plane, PreparedCase, SliceDataset};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionMode, SliceSynthesizer, INFERENCE_BATCH};
use crate::losses::{lsgan_d_loss_grad, LossConfig, LossEngine, LossReport};
use crate::metrics::{evaluate_case, mean_row, MetricRow};
use crate::nn::layers::concat_channels;
use crate::nn::{Adam, Checkpoint, CheckpointMeta, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::par;
use crate::phantom::case_seed;
use crate::volume::{Sequence, Volume};

const GEN_SALT: u64 = 0x47_45_4e;
const DISC_SALT: u64 = 0x44_49_53_43;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub target_sequence: Sequence,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Samples drawn (with replacement) per epoch.
    pub epoch_size: usize,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub planes: Vec<Plane>,
    pub dev_fusion: FusionMode,
    pub loss: LossConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target_sequence: Sequence::T2f,
            lr0: 1e-4,
            beta1: 0.5,
            beta2: 0.99,
            batch_size: 64,
            epochs: 100,
            epoch_size: 400_000,
            lr_decay_every: 10,
            lr_decay_factor: 0.5,
            seed: 0,
            planes: Plane::ALL.to_vec(),
            dev_fusion: FusionMode::Nine,
            loss: LossConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Laptop-sized run: 2 epochs of 64 samples in batches of 8 on 64×64 crops.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 2,
            epoch_size: 64,
            lr0: 1.5e-3,
            dev_fusion: FusionMode::Three,
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            augment: AugmentConfig::desk(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epoch_size < self.batch_size {
            return bad(format!(
                "epoch_size {} smaller than batch_size {}",
                self.epoch_size, self.batch_size
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.lr_decay_every == 0 || !(self.lr_decay_factor > 0.0) {
            return bad("lr decay needs a positive period and factor".into());
        }
        if self.planes.is_empty() {
            return bad("at least one training plane is required".into());
        }
        self.loss.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.augment.validate()?;
        let m = self.generator.size_multiple();
        if self.augment.crop_to.iter().any(|c| c % m != 0) {
            return bad(format!(
                "crop {:?} must be a multiple of the generator's {m}",
                self.augment.crop_to
            ));
        }
        if self.loss.weights.adv > 0.0 {
            let c = &self.augment.crop_to;
            if self.discriminator.output_size(c[0], c[1]).is_none() {
                return bad(format!("discriminator cannot process {}x{} crops", c[0], c[1]));
            }
        }
        Ok(())
    }

    /// Learning rate for zero-based epoch `e`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    /// SHA-256 of the TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub d_loss: Option<f64>,
    pub report: LossReport,
}

pub const LOG_HEADER: &str = "step,epoch,lr,d_loss,l1,l1_masked,adv,ssim,vgg,freq,total";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| v.to_string())
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let terms: Vec<String> = self.report.terms().iter().map(|(_, t)| opt(*t)).collect();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            opt(self.d_loss),
            terms.join(","),
            self.report.total
        )
    }
}

/// Generator, optional discriminator, their optimizers and the loss engine.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    opt_g: Adam,
    opt_d: Option<Adam>,
    engine: LossEngine,
    pub global_step: u64,
}

/// The discriminator sees the candidate image, plus the center slice of the
/// first input sequence when conditional.
fn disc_input(d: &Discriminator, image: &Array4<f64>, x: &Array4<f64>) -> Array4<f64> {
    if d.cfg.conditional {
        concat_channels(image, &x.slice(s![.., 1..2, .., ..]).to_owned())
    } else {
        image.clone()
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let engine = LossEngine::new(cfg.loss.clone())?;
        let mut grng = ChaCha8Rng::seed_from_u64(case_seed(cfg.seed ^ GEN_SALT, 0));
        let generator = Generator::new(cfg.generator.clone(), &mut grng)?;
        let opt_g = Adam::new(&generator.convs(), cfg.lr0, cfg.beta1, cfg.beta2);
        let (discriminator, opt_d) = if engine.needs_discriminator() {
            let mut drng = ChaCha8Rng::seed_from_u64(case_seed(cfg.seed ^ DISC_SALT, 0));
            let d = Discriminator::new(cfg.discriminator.clone(), &mut drng)?;
            let o = Adam::new(&d.convs(), cfg.lr0, cfg.beta1, cfg.beta2);
            (Some(d), Some(o))
        } else {
            (None, None)
        };
        Ok(Trainer {
            cfg,
            generator,
            discriminator,
            opt_g,
            opt_d,
            engine,
            global_step: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_g.lr = lr;
        if let Some(o) = self.opt_d.as_mut() {
            o.lr = lr;
        }
    }

    /// One discriminator update on real `y` against the current generator's
    /// output for `x`. Returns the discriminator loss.
    pub fn discriminator_step(&mut self, x: &Array4<f64>, y: &Array4<f64>) -> Result<f64> {
        let (Some(d), Some(opt)) = (self.discriminator.as_mut(), self.opt_d.as_mut()) else {
            return Err(Error::Argument("no discriminator in this configuration".into()));
        };
        d.refresh(d.cfg.power_iterations);
        let fake = self.generator.forward(x)?;
        let (s_real, t_real) = d.forward_trace(&disc_input(d, y, x))?;
        let (s_fake, t_fake) = d.forward_trace(&disc_input(d, &fake, x))?;
        let (loss, g_real, g_fake) = lsgan_d_loss_grad(&s_real, &s_fake);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.global_step,
                terms: format!("d_loss={loss}"),
            });
        }
        let mut grads = d.zero_grads();
        d.backward(&t_real, &g_real, Some(&mut grads));
        d.backward(&t_fake, &g_fake, Some(&mut grads));
        opt.step(d.convs_mut(), &grads);
        Ok(loss)
    }

    /// One generator update. The adversarial gradient flows through the
    /// discriminator to its input only; discriminator parameters are untouched.
    pub fn generator_step(&mut self, x: &Array4<f64>, y: &Array4<f64>, mask: &Array4<f64>) -> Result<LossReport> {
        if let Some(d) = self.discriminator.as_mut() {
            d.refresh(d.cfg.power_iterations);
        }
        let (yhat, trace) = self.generator.forward_trace(x)?;
        let scored = match &self.discriminator {
            Some(d) => Some(d.forward_trace(&disc_input(d, &yhat, x))?),
            None => None,
        };
        let out = self
            .engine
            .evaluate(&yhat, y, mask, scored.as_ref().map(|(s, _)| s))?;
        if !out.report.is_finite() {
            return Err(Error::NonFinite {
                step: self.global_step,
                terms: out.report.describe(),
            });
        }
        let mut grad = out.grad_yhat;
        if let (Some(gd), Some(d), Some((_, dtrace))) = (&out.grad_d_fake, &self.discriminator, &scored) {
            let gin = d.backward(dtrace, gd, None);
            grad += &gin.slice(s![.., 0..1, .., ..]);
        }
        let mut grads = self.generator.zero_grads();
        self.generator.backward(&trace, &grad, &mut grads);
        self.opt_g.step(self.generator.convs_mut(), &grads);
        Ok(out.report)
    }

    /// Discriminator update (when adversarial) followed by a generator update.
    pub fn step(&mut self, x: &Array4<f64>, y: &Array4<f64>, mask: &Array4<f64>) -> Result<(Option<f64>, LossReport)> {
        let d_loss = if self.discriminator.is_some() {
            Some(self.discriminator_step(x, y)?)
        } else {
            None
        };
        let report = self.generator_step(x, y, mask)?;
        self.global_step += 1;
        Ok((d_loss, report))
    }

    /// Runs one epoch (zero-based index) and returns its step records.
    /// Each record is also written to `log` as a CSV line.
    pub fn run_epoch(&mut self, data: &SliceDataset, epoch: usize, log: &mut dyn Write) -> Result<Vec<StepRecord>> {
        let lr = self.cfg.lr_at(epoch);
        self.set_lr(lr);
        let order = epoch_sampler(data.len(), self.cfg.epoch_size, self.cfg.seed, epoch as u64)?;
        let base = (epoch * self.cfg.epoch_size) as u64;
        let mut records = Vec::new();
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let first = base + (bi * self.cfg.batch_size) as u64;
            let samples = par::map_range(chunk.len(), |k| {
                data.sample(chunk[k], first + k as u64, self.cfg.seed, &self.cfg.augment)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let (x, y, mask) = collate(&samples)?;
            let step = self.global_step;
            let (d_loss, report) = self.step(&x, &y, &mask)?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                d_loss,
                report,
            };
            writeln!(log, "{}", rec.csv_line()).map_err(|e| Error::io("<training log>", e))?;
            log::debug!("step {step} {}", report.describe());
            records.push(rec);
        }
        Ok(records)
    }

    pub fn checkpoint(&self, epoch: usize, dev_metrics: BTreeMap<String, f64>) -> Checkpoint {
        let mut meta = CheckpointMeta::new(self.cfg.target_sequence, self.generator.cfg.clone());
        meta.epoch = epoch as u64;
        meta.global_step = self.global_step;
        meta.dev_metrics = dev_metrics;
        meta.config_hash = self.cfg.hash();
        meta.discriminator = self.discriminator.as_ref().map(|d| d.cfg.clone());
        Checkpoint {
            meta,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
        }
    }
}

/// Per-case fused prediction scored against the case's own (normalized) target.
/// A case without segmentation is scored on the whole volume.
pub fn evaluate_dev<S: SliceSynthesizer + ?Sized>(
    gen: &S,
    dev: &[PreparedCase],
    mode: FusionMode,
    batch: usize,
) -> Result<Vec<MetricRow>> {
    dev.iter()
        .map(|c| {
            let reference = c.set.get(c.target).ok_or_else(|| {
                Error::MissingInput(format!("dev case {} lacks target {}", c.set.case_id, c.target))
            })?;
            let fused = fuse(gen, &c.set, c.target, mode, batch)?;
            let pred = reference.with_data(fused.volume);
            evaluate_case(&c.set.case_id, &pred, reference, c.set.seg.as_ref())
        })
        .collect()
}

/// Finite column means of a metric table, keyed by column name.
pub fn metric_snapshot(rows: &[MetricRow]) -> BTreeMap<String, f64> {
    let m = mean_row(rows);
    [
        ("ssim_h", Some(m.ssim_h)),
        ("ssim_t", m.ssim_t),
        ("psnr_h", Some(m.psnr_h)),
        ("psnr_t", m.psnr_t),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.filter(|v| v.is_finite()).map(|v| (k.to_string(), v)))
    .collect()
}

/// Model-selection score: mean of the available mean SSIM columns.
pub fn selection_score(rows: &[MetricRow]) -> f64 {
    let m = mean_row(rows);
    match m.ssim_t {
        Some(t) => (m.ssim_h + t) / 2.0,
        None => m.ssim_h,
    }
}

#[derive(Debug, Clone)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_l1: Option<f64>,
    pub dev: Vec<MetricRow>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    /// Epoch whose checkpoint was kept as best.
    pub best_epoch: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Where checkpoints for `target` live under `root`.
pub fn checkpoint_dir(root: &Path, target: Sequence) -> PathBuf {
    root.join(target.as_str())
}

/// Full training run. With `ckpt_root` set, every epoch is saved as
/// `<root>/<target>/<epoch>.bin` and the best one is copied to `best.bin`;
/// with dev cases the best is the highest mean dev SSIM, otherwise the last.
pub fn train(
    cfg: TrainConfig,
    data: &SliceDataset,
    dev: &[PreparedCase],
    ckpt_root: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Argument("training set has no usable slices".into()));
    }
    let mut t = Trainer::new(cfg)?;
    log::info!(
        "training {} generator with {} parameters on {} slices",
        t.cfg.target_sequence,
        t.generator.param_count(),
        data.len()
    );
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io("<training log>", e))?;
    let dir = ckpt_root.map(|r| checkpoint_dir(r, t.cfg.target_sequence));
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for e in 0..t.cfg.epochs {
        let recs = t.run_epoch(data, e, log)?;
        let n = recs.len() as f64;
        let mean_total = recs.iter().map(|r| r.report.total).sum::<f64>() / n;
        let mean_l1 = recs
            .iter()
            .map(|r| r.report.l1)
            .sum::<Option<f64>>()
            .map(|s| s / n);
        let rows = if dev.is_empty() {
            Vec::new()
        } else {
            evaluate_dev(&t.generator, dev, t.cfg.dev_fusion, INFERENCE_BATCH)?
        };
        let score = if rows.is_empty() { e as f64 } else { selection_score(&rows) };
        let improved = best.is_none_or(|(b, _)| score > b);
        if improved {
            best = Some((score, e));
        }
        log::info!("epoch {e}: mean loss {mean_total:.6}, selection score {score:.6}");
        if let Some(dir) = &dir {
            let ck = t.checkpoint(e, metric_snapshot(&rows));
            ck.save(dir.join(format!("{e}.bin")))?;
            if improved {
                ck.save(dir.join("best.bin"))?;
            }
        }
        epochs.push(EpochSummary {
            epoch: e,
            lr: t.cfg.lr_at(e),
            mean_total,
            mean_l1,
            dev: rows,
        });
        steps.extend(recs);
    }
    Ok(TrainOutcome {
        steps,
        epochs,
        best_epoch: best.map_or(0, |(_, e)| e),
        checkpoint_dir: dir,
    })
}

/// Denormalizes a fused prediction back to the target's intensity scale when
/// that scale is known.
pub fn to_output_scale(pred: &Volume, case: &PreparedCase) -> Volume {
    match &case.target_scale {
        Some(sc) => pred.with_data(pred.data.mapv(|v| sc.invert_value(v as f64) as f32)),
        None => pred.clone(),
    }
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::dataset::prepare_case;
    use crate::fusion::{ChannelEcho, ConstantSlice};
    use crate::losses::preset_weights;
    use crate::phantom::{generate_corpus, PhantomSpec};

    fn tiny(preset: &str) -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.loss.weights = preset_weights(preset).unwrap();
        c.loss.vgg_source = crate::nn::VggSource::Random {
            seed: 3,
            width_divisor: 16,
        };
        c.generator.depth = 4;
        c.generator.base_width = 4;
        c.discriminator.base_width = 4;
        c.augment = AugmentConfig {
            pad_to: [36, 36],
            crop_to: [32, 32],
            ..AugmentConfig::desk()
        };
        c.batch_size = 2;
        c.epoch_size = 4;
        c.epochs = 1;
        c
    }

    fn cases(n: usize, target: Sequence) -> Vec<PreparedCase> {
        generate_corpus(&PhantomSpec::cube(20, 9), n)
            .unwrap()
            .iter()
            .map(|c| prepare_case(c, target, None).unwrap())
            .collect()
    }

    #[test]
    fn lr_schedule_closed_form() {
        let c = TrainConfig::default();
        assert!((c.lr_at(25) - 2.5e-5).abs() < 1e-18);
        for e in 0..100 {
            assert_eq!(c.lr_at(e), 1e-4 * 0.5f64.powi((e / 10) as i32));
        }
    }

    #[test]
    fn config_invariants() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.epoch_size = 10;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.lr0 = 0.0;
        assert!(c.validate().is_err());
        let back: TrainConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn generator_step_leaves_discriminator_alone() {
        let mut t = Trainer::new(tiny("l1m_adv")).unwrap();
        let data = SliceDataset::new(cases(2, Sequence::T2f), &Plane::ALL).unwrap();
        let s: Vec<_> = (0..2)
            .map(|i| data.sample(i, i as u64, 0, &t.cfg.augment).unwrap())
            .collect();
        let (x, y, m) = collate(&s).unwrap();
        t.discriminator_step(&x, &y).unwrap();
        let before: Vec<_> = t.discriminator.as_ref().unwrap().convs().into_iter().cloned().collect();
        let g_before = t.generator.enc[0].weight.clone();
        let r = t.generator_step(&x, &y, &m).unwrap();
        assert!(r.adv.is_some());
        let after: Vec<_> = t.discriminator.as_ref().unwrap().convs().into_iter().cloned().collect();
        assert_eq!(before, after);
        assert_ne!(g_before, t.generator.enc[0].weight);
    }

    #[test]
    fn training_is_reproducible_and_checkpoints_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let all = cases(3, Sequence::T1c);
        let data = SliceDataset::new(all[..2].to_vec(), &Plane::ALL).unwrap();
        let dev = &all[2..];
        let run = |root: Option<&Path>| {
            let mut log = Vec::new();
            let out = train(tiny("l1"), &data, dev, root, &mut log).unwrap();
            (out, String::from_utf8(log).unwrap())
        };
        let (o1, l1) = run(Some(dir.path()));
        let (_, l2) = run(None);
        assert_eq!(l1, l2);
        assert_eq!(l1.lines().next().unwrap(), LOG_HEADER);
        assert_eq!(o1.steps.len(), 2);
        assert_eq!(o1.epochs[0].dev.len(), dev.len());
        let ck_dir = o1.checkpoint_dir.unwrap();
        assert!(ck_dir.join("0.bin").exists() && ck_dir.join("best.bin").exists());
        let ck = Checkpoint::load(ck_dir.join("0.bin")).unwrap();
        assert_eq!(ck.meta.global_step, 2);
        assert_eq!(ck.meta.config_hash, tiny("l1").hash());
        let rows = evaluate_dev(&ck.generator, dev, FusionMode::Three, 4).unwrap();
        assert_eq!(rows, o1.epochs[0].dev);
    }

    #[test]
    fn dev_stubs() {
        let dev = cases(2, Sequence::T1n);
        let zero = evaluate_dev(&ConstantSlice(0.0), &dev, FusionMode::Three, 8).unwrap();
        assert_eq!(zero.len(), 2);
        for r in &zero {
            assert!(r.ssim_h < 1.0 && r.psnr_h.is_finite());
        }
        // Feeding the target as an input sequence turns the echo stub into an oracle.
        let mut oracle = dev[0].clone();
        let t = oracle.set.get(Sequence::T1n).unwrap().clone();
        oracle.set.sequences.insert(Sequence::T1c, t);
        oracle.target = Sequence::T1n;
        let rows = evaluate_dev(&ChannelEcho { channel: 1 }, &[oracle], FusionMode::Three, 8).unwrap();
        assert!((rows[0].ssim_h - 1.0).abs() < 1e-6);
        assert!((rows[0].ssim_t.unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut t = Trainer::new(tiny("l1")).unwrap();
        let x = Array4::from_elem((1, 9, 32, 32), 0.5);
        let mut y = Array4::from_elem((1, 1, 32, 32), 0.5);
        y[[0, 0, 3, 3]] = f64::NAN;
        let m = Array4::zeros((1, 1, 32, 32));
        match t.step(&x, &y, &m) {
            Err(Error::NonFinite { step, terms }) => {
                assert_eq!(step, 0);
                assert!(terms.contains("l1="));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
