//! Optimization loop: balanced batches, alternating critic and generator
//! updates, per-epoch validation and checkpoint selection.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{critic_loss_with_grad, flatten_latent, pseudo_healthy_loss, CriticBatch, CriticConfig};
use crate::decoders::{probabilities, SpadeDecoderConfig};
use crate::encoder::{EncoderConfig, EncoderGrads, LatentPair, SkipStack};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{combo_loss, combo_loss_with_grad, overall_loss, recon_loss_with_grad, LossReport, LossWeights};
use crate::model::{Method, Model, ModelConfig};
use crate::nn::{Mode, Module};
use crate::optim::{Adam, AdamConfig};
use crate::phantom::{CaseRecord, Label, Split};
use crate::tensor::Tensor;

pub const HEALTHY_PER_BATCH: usize = 2;
pub const DISEASE_PER_BATCH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    /// Falls back to `lr`.
    pub critic_lr: Option<f64>,
    pub epochs: usize,
    pub n_critic: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Let reconstruction gradients reach the segmentation decoder through
    /// the predicted mask.
    pub mask_grad: bool,
    pub weights: LossWeights,
    pub critic: CriticConfig,
    pub encoder: EncoderConfig,
    pub image_decoder: SpadeDecoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Disentangler,
            lr: 1e-3,
            critic_lr: None,
            epochs: 60,
            n_critic: 1,
            seed: 0,
            max_steps: None,
            mask_grad: true,
            weights: LossWeights::default(),
            critic: CriticConfig::default(),
            encoder: EncoderConfig::default(),
            image_decoder: SpadeDecoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |lr: f64| lr > 0.0 && lr.is_finite();
        if !lr_ok(self.lr) || !self.critic_lr.map_or(true, lr_ok) {
            return Err(Error::Config("learning rates must be finite and > 0".into()));
        }
        if self.n_critic == 0 && self.method.is_disentangler() {
            return Err(Error::Config("n_critic must be >= 1".into()));
        }
        self.weights.validate()?;
        self.critic.validate()
    }

    pub fn model_config(&self, grid_size: usize) -> ModelConfig {
        ModelConfig {
            method: self.method,
            grid_size,
            encoder: self.encoder.clone(),
            image_decoder: self.image_decoder.clone(),
            critic: self.critic.clone(),
            mask_grad: self.mask_grad,
            seed: self.seed,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing train config: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_combo: f64,
    pub path: Option<PathBuf>,
}

/// Fails with a scheduling error unless the batch holds exactly two healthy
/// and two disease cases.
pub fn check_batch(batch: &[&CaseRecord]) -> Result<()> {
    let healthy = batch.iter().filter(|c| c.label == Label::Healthy).count();
    let disease = batch.len() - healthy;
    if healthy != HEALTHY_PER_BATCH || disease != DISEASE_PER_BATCH {
        return Err(Error::Scheduling(format!(
            "batch has {healthy} healthy and {disease} disease cases, expected {HEALTHY_PER_BATCH} + {DISEASE_PER_BATCH}"
        )));
    }
    Ok(())
}

/// Masks fed to the image decoder: the predicted mask for disease cases and
/// the empty mask for healthy ones.
pub fn decoder_masks(probs: &Tensor, labels: &[Label]) -> Tensor {
    let mut m = probs.clone();
    for (i, label) in labels.iter().enumerate() {
        if *label == Label::Healthy {
            m.sample_mut(i).fill(0.0);
        }
    }
    m
}

/// Reconstruction loss and its gradient with respect to `r`. The
/// healthy-only baseline ignores disease cases.
pub fn recon_terms(method: Method, x: &Tensor, r: &Tensor, labels: &[Label]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; r.data().len()];
    let used: Vec<usize> = (0..labels.len())
        .filter(|&i| method != Method::SegReconHealthy || labels[i] == Label::Healthy)
        .collect();
    if used.is_empty() {
        return Ok((0.0, grad));
    }
    let gather = |t: &Tensor| -> Vec<f64> { used.iter().flat_map(|&i| t.sample(i).iter().map(|&v| v as f64)).collect() };
    let (loss, g) = recon_loss_with_grad(&gather(x), &gather(r))?;
    let len = r.sample_len();
    for (k, &i) in used.iter().enumerate() {
        grad[i * len..(i + 1) * len].copy_from_slice(&g[k * len..(k + 1) * len]);
    }
    Ok((loss, grad))
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to_tensor(shape: [usize; 5], v: &[f64], scale: f64) -> Tensor {
    Tensor::from_vec(shape, v.iter().map(|&g| (g * scale) as f32).collect()).expect("shape matches")
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    gen_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, grid_size: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model_config(grid_size))?;
        let adam = |lr| Adam::new(AdamConfig { lr, ..AdamConfig::default() });
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            gen_opt: adam(cfg.lr),
            critic_opt: adam(cfg.critic_lr.unwrap_or(cfg.lr)),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_C417),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Encodes a batch in training mode.
    pub fn encode(&mut self, batch: &[&CaseRecord]) -> Result<(Tensor, LatentPair, SkipStack)> {
        check_batch(batch)?;
        let parts: Vec<Tensor> = batch.iter().map(|c| c.volume.to_tensor()).collect();
        let x = Tensor::stack(&parts.iter().collect::<Vec<_>>());
        let (lat, skips) = self.model.encoder.forward(&x, Mode::Train)?;
        Ok((x, lat, skips))
    }

    /// One full step for any method: encode, critic update(s) on detached
    /// healthy latents for the disentangler, then one generator update.
    pub fn train_step(&mut self, batch: &[&CaseRecord]) -> Result<LossReport> {
        let (x, lat, skips) = self.encode(batch)?;
        let labels: Vec<Label> = batch.iter().map(|c| c.label).collect();
        let l_critic = if self.cfg.method.is_disentangler() { self.critic_update(&lat.z_h, &labels)? } else { 0.0 };
        let gt: Vec<f64> = batch.iter().flat_map(|c| c.gt_mask.data().iter().map(|&v| v as f64)).collect();
        let mut report = self.generator_update(&x, &gt, &labels, lat, skips)?;
        report.l_critic = l_critic;
        Ok(report)
    }

    /// `n_critic` critic updates; touches critic parameters only. Returns
    /// the last critic loss.
    pub fn critic_update(&mut self, z_h: &Tensor, labels: &[Label]) -> Result<f64> {
        let pick = |want: Label| -> Vec<Vec<f64>> {
            (0..labels.len()).filter(|&i| labels[i] == want).map(|i| flatten_latent(z_h, i)).collect()
        };
        let (neg, pos) = (pick(Label::Healthy), pick(Label::Disease));
        let critic = self.model.critic.as_mut().ok_or_else(|| Error::Config("model has no critic".into()))?;
        let mut last = 0.0;
        for _ in 0..self.cfg.n_critic {
            let pairs = neg.len().min(pos.len());
            let alphas = (0..pairs).map(|_| self.rng.gen::<f64>()).collect();
            let batch = CriticBatch { z_h_neg: neg.clone(), z_h_pos: pos.clone(), alphas };
            let (loss, grad) = critic_loss_with_grad(&batch, &critic.net(), &self.cfg.critic)?;
            critic.zero_grad();
            critic.accumulate(&grad);
            self.critic_opt.step(|f| critic.visit("critic", f));
            last = loss.value;
        }
        Ok(last)
    }

    /// Decodes, computes the overall loss and applies one update to the
    /// encoder and decoders. The critic is read but not updated.
    pub fn generator_update(
        &mut self,
        x: &Tensor,
        gt: &[f64],
        labels: &[Label],
        lat: LatentPair,
        skips: SkipStack,
    ) -> Result<LossReport> {
        let report = self.generator_backward(x, gt, labels, lat, skips)?;
        let model = &mut self.model;
        self.gen_opt.step(|f| model.visit_generator(f));
        Ok(report)
    }

    /// Everything in [`Trainer::generator_update`] except the optimizer step:
    /// gradients of the overall loss are left accumulated on the encoder and
    /// decoder parameters.
    pub fn generator_backward(
        &mut self,
        x: &Tensor,
        gt: &[f64],
        labels: &[Label],
        lat: LatentPair,
        skips: SkipStack,
    ) -> Result<LossReport> {
        let method = self.cfg.method;
        let w = self.cfg.weights.clone();
        let model = &mut self.model;
        let logits = model.seg.forward(&lat.z_d, &skips, Mode::Train)?;
        let probs = probabilities(&logits);
        let ((l_seg, l_dice, l_ce), dseg) = combo_loss_with_grad(&to_f64(&probs), gt, w.dice_eps)?;
        let mut dprob: Vec<f64> = dseg.iter().map(|g| g * w.w_s).collect();

        let mut l_recon = 0.0;
        let mut drecon = None;
        if let Some(img) = model.img.as_mut() {
            let masks = img.is_spade().then(|| decoder_masks(&probs, labels));
            let r = img.forward(&lat.z_h, &skips, masks.as_ref(), Mode::Train)?;
            let (l, g) = recon_terms(method, x, &r, labels)?;
            l_recon = l;
            drecon = Some(to_tensor(r.shape(), &g, w.w_r));
        }

        let mut l_ph = 0.0;
        let mut dph = None;
        if let Some(critic) = model.critic.as_ref() {
            let disease: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Disease).collect();
            let pos: Vec<Vec<f64>> = disease.iter().map(|&i| flatten_latent(&lat.z_h, i)).collect();
            let (l, g) = pseudo_healthy_loss(&pos, &critic.net())?;
            l_ph = l;
            let mut dz = Tensor::zeros(lat.z_h.shape());
            for (k, &i) in disease.iter().enumerate() {
                for (d, gv) in dz.sample_mut(i).iter_mut().zip(&g[k]) {
                    *d = (gv * w.w_ph) as f32;
                }
            }
            dph = Some(dz);
        }

        self.step += 1;
        let report = LossReport {
            step: self.step,
            l_seg,
            l_dice,
            l_ce,
            l_recon,
            l_pseudo_healthy: l_ph,
            l_overall: overall_loss(l_seg, l_recon, l_ph, &w),
            l_critic: 0.0,
        };
        if ![l_seg, l_recon, l_ph, report.l_overall].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss at step {}: {}", self.step, report.to_tsv())));
        }

        let mut grads = EncoderGrads::default();
        if let (Some(img), Some(dr)) = (model.img.as_mut(), drecon) {
            let (dz_h, img_skips, dmask) = img.backward(&dr);
            if let (true, Some(dm)) = (self.cfg.mask_grad, dmask) {
                for (i, label) in labels.iter().enumerate() {
                    if *label == Label::Disease {
                        let len = dm.sample_len();
                        for (a, b) in dprob[i * len..(i + 1) * len].iter_mut().zip(dm.sample(i)) {
                            *a += *b as f64;
                        }
                    }
                }
            }
            grads.z_h = Some(dz_h);
            grads.img_skips = img_skips;
        }
        if let Some(dz) = dph {
            match grads.z_h.as_mut() {
                Some(acc) => acc.add_assign(&dz),
                None => grads.z_h = Some(dz),
            }
        }
        let dlogits: Vec<f64> = dprob.iter().zip(probs.data()).map(|(g, &p)| g * p as f64 * (1.0 - p as f64)).collect();
        let (dz_d, seg_skips) = model.seg.backward(&to_tensor(logits.shape(), &dlogits, 1.0));
        grads.z_d = Some(dz_d);
        grads.seg_skips = seg_skips;
        model.encoder.backward(grads);
        Ok(report)
    }
}

/// Pooled ComboLoss of the predicted masks over all given cases.
pub fn validation_combo(model: &mut Model, cases: &[&CaseRecord], eps: f64) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for case in cases {
        let p = model.predict(&case.volume)?;
        pred.extend(p.data().iter().map(|&v| v as f64));
        gt.extend(case.gt_mask.data().iter().map(|&v| v as f64));
    }
    Ok(combo_loss(&pred, &gt, eps)?.0)
}

/// Balanced batches for one epoch: shuffled healthy and disease cases are
/// paired off two by two; leftovers wait for the next epoch.
pub fn epoch_batches(healthy: &[usize], disease: &[usize], rng: &mut ChaCha8Rng) -> Vec<[usize; 4]> {
    let mut h = healthy.to_vec();
    let mut d = disease.to_vec();
    h.shuffle(rng);
    d.shuffle(rng);
    let n = (h.len() / HEALTHY_PER_BATCH).min(d.len() / DISEASE_PER_BATCH);
    (0..n).map(|b| [h[2 * b], h[2 * b + 1], d[2 * b], d[2 * b + 1]]).collect()
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: CheckpointMeta,
    pub last: CheckpointMeta,
    pub reports: Vec<LossReport>,
    /// Validation ComboLoss after each epoch, starting with epoch 0.
    pub val_history: Vec<f64>,
    pub best_model: Model,
    pub last_model: Model,
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    seed: u64,
    method: String,
    epochs: usize,
    steps: usize,
    best_epoch: usize,
    best_val_combo: f64,
    last_val_combo: f64,
    val_history: &'a [f64],
}

struct RunDir {
    dir: PathBuf,
    log: BufWriter<fs::File>,
}

impl RunDir {
    fn create(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_atomic(&dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
        let path = dir.join("loss.tsv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = BufWriter::new(file);
        writeln!(log, "{}", LossReport::HEADER).map_err(|e| Error::io(&path, e))?;
        Ok(RunDir { dir: dir.to_path_buf(), log })
    }

    fn log(&mut self, r: &LossReport) -> Result<()> {
        writeln!(self.log, "{}", r.to_tsv()).map_err(|e| Error::io(self.dir.join("loss.tsv"), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(self.dir.join("loss.tsv"), e))
    }
}

/// Trains on the train split, validates on the val split after every epoch
/// and keeps the checkpoint with the lowest validation ComboLoss. With `out`
/// set, writes the run directory.
pub fn fit(cases: &[CaseRecord], cfg: &TrainConfig, out: Option<&Path>) -> Result<FitOutcome> {
    cfg.validate()?;
    for c in cases {
        c.validate()?;
    }
    let train: Vec<&CaseRecord> = cases.iter().filter(|c| c.split == Split::Train).collect();
    let val: Vec<&CaseRecord> = cases.iter().filter(|c| c.split == Split::Val).collect();
    let healthy: Vec<usize> = (0..train.len()).filter(|&i| train[i].label == Label::Healthy).collect();
    let disease: Vec<usize> = (0..train.len()).filter(|&i| train[i].label == Label::Disease).collect();
    if healthy.len() < HEALTHY_PER_BATCH || disease.len() < DISEASE_PER_BATCH {
        return Err(Error::Data(format!(
            "train split has {} healthy and {} disease cases; need at least {HEALTHY_PER_BATCH} of each",
            healthy.len(),
            disease.len()
        )));
    }
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let grid = train[0].volume.dims()[0];
    if let Some(c) = cases.iter().find(|c| c.volume.dims() != [grid; 3]) {
        return Err(Error::Data(format!("case {} has shape {:?}, expected {grid}³", c.case_id, c.volume.dims())));
    }

    let mut trainer = Trainer::new(cfg, grid)?;
    let mut run = out.map(|d| RunDir::create(d, cfg)).transpose()?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xBA7C_0DE5);
    let eps = cfg.weights.dice_eps;
    let save = |model: &mut Model, name: &str, run: &Option<RunDir>| -> Result<Option<PathBuf>> {
        match run {
            Some(r) => {
                let path = r.dir.join(name);
                model.save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    };

    let v0 = validation_combo(&mut trainer.model, &val, eps)?;
    let mut val_history = vec![v0];
    let mut best = CheckpointMeta { epoch: 0, val_combo: v0, path: save(&mut trainer.model, "best.ckpt", &run)? };
    let mut best_model = trainer.model.clone();
    let mut reports = Vec::new();
    let mut epoch = 0;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);

    while epoch < cfg.epochs && trainer.steps_taken() < budget {
        epoch += 1;
        for b in epoch_batches(&healthy, &disease, &mut data_rng) {
            if trainer.steps_taken() >= budget {
                break;
            }
            let batch: Vec<&CaseRecord> = b.iter().map(|&i| train[i]).collect();
            let report = match trainer.train_step(&batch) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(r) = run.as_mut() {
                        r.flush()?;
                        let note = format!("training aborted at epoch {epoch}, step {}: {e}\n", trainer.steps_taken());
                        io::write_atomic(&r.dir.join("diagnostic.txt"), note.as_bytes())?;
                    }
                    return Err(e);
                }
            };
            if let Some(r) = run.as_mut() {
                r.log(&report)?;
            }
            reports.push(report);
        }
        if let Some(r) = run.as_mut() {
            r.flush()?;
        }
        let v = validation_combo(&mut trainer.model, &val, eps)?;
        val_history.push(v);
        if v < best.val_combo {
            best = CheckpointMeta { epoch, val_combo: v, path: save(&mut trainer.model, "best.ckpt", &run)? };
            best_model = trainer.model.clone();
        }
    }

    let last_val = *val_history.last().expect("nonempty");
    let last = CheckpointMeta { epoch, val_combo: last_val, path: save(&mut trainer.model, "last.ckpt", &run)? };
    if let Some(r) = run.as_ref() {
        let meta = RunMetadata {
            seed: cfg.seed,
            method: cfg.method.to_string(),
            epochs: epoch,
            steps: trainer.steps_taken(),
            best_epoch: best.epoch,
            best_val_combo: best.val_combo,
            last_val_combo: last_val,
            val_history: &val_history,
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        io::write_atomic(&r.dir.join("meta.json"), text.as_bytes())?;
    }
    Ok(FitOutcome { best, last, reports, val_history, best_model, last_model: trainer.model })
}
