//! Two-stage training: warmup/plateau schedule, chunking, channel sampling,
//! Adam with global-norm clipping, and resumable checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::datagen::{stream_rng, Utterance};
use crate::model::{load_checkpoint, read_weights, save_checkpoint, write_weights, CheckpointMeta, Model, Network};
use crate::nn::{ParamBuilder, ParamEntry, ParameterSet};
use crate::objective::{loss_tensor, LossConfig};
use crate::{Error, Result};

pub const TRAINER_FILE: &str = "trainer.json";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFilter {
    SingleChannel,
    MultiChannel,
}

/// Stage 1 trains everything except channel modules on 1-ch data; stage 2 trains
/// only channel modules on multi-channel data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    stage: u8,
}

impl StageSpec {
    pub fn new(stage: u8) -> Result<Self> {
        match stage {
            1 | 2 => Ok(Self { stage }),
            s => Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
        }
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    pub fn trainable(&self, channel_module: bool) -> bool {
        (self.stage == 2) == channel_module
    }

    pub fn data_filter(&self) -> DataFilter {
        if self.stage == 1 {
            DataFilter::SingleChannel
        } else {
            DataFilter::MultiChannel
        }
    }

    pub fn accepts(&self, channels: usize) -> bool {
        match self.data_filter() {
            DataFilter::SingleChannel => channels == 1,
            DataFilter::MultiChannel => channels >= 2,
        }
    }

    /// Keeps the utterances this stage trains on; errors when none remain.
    pub fn filter(&self, data: Vec<Utterance>) -> Result<Vec<Utterance>> {
        let kept: Vec<_> = data.into_iter().filter(|u| self.accepts(u.mixture.channels())).collect();
        if kept.is_empty() {
            return Err(Error::Training(format!(
                "no {:?} utterances for stage {}",
                self.data_filter(),
                self.stage
            )));
        }
        Ok(kept)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Non-improving validation epochs before the learning rate is halved.
    pub plateau_patience: u32,
    pub halving_factor: f64,
    pub batch: usize,
    pub chunk_seconds: f64,
    pub max_channels: usize,
    pub seed: u64,
    pub max_steps: u64,
    /// Steps between validations; defaults to one pass over the training data.
    pub steps_per_epoch: Option<u64>,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 4e-4,
            warmup_steps: 4000,
            plateau_patience: 2,
            halving_factor: 0.5,
            batch: 4,
            chunk_seconds: 4.0,
            max_channels: 4,
            seed: 0,
            max_steps: 200_000,
            steps_per_epoch: None,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train config: {what}")));
        if !(self.peak_lr > 0.0) || self.warmup_steps == 0 || self.plateau_patience == 0 {
            return bad("peak_lr, warmup_steps and plateau_patience must be positive");
        }
        if !(self.halving_factor > 0.0 && self.halving_factor < 1.0) {
            return bad("halving_factor must be in (0, 1)");
        }
        if self.batch == 0 || !(self.chunk_seconds > 0.0) || self.max_channels < 2 {
            return bad("batch and chunk_seconds must be positive and max_channels >= 2");
        }
        if self.steps_per_epoch == Some(0) || !(self.clip_norm > 0.0) {
            return bad("steps_per_epoch and clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must be in [0, 1) and eps positive");
        }
        self.loss.validate()
    }

    pub fn chunk_samples(&self, rate_hz: u32) -> usize {
        (self.chunk_seconds * rate_hz as f64).round().max(1.0) as usize
    }
}

/// `peak_lr * min(step / warmup, 1) * halving_factor^halvings`.
pub fn lr_at(step: u64, halvings: u32, cfg: &TrainConfig) -> f64 {
    let ramp = (step as f64 / cfg.warmup_steps as f64).min(1.0);
    cfg.peak_lr * ramp * cfg.halving_factor.powi(halvings as i32)
}

/// Learning rate at `step` after replaying the validation losses seen so far.
pub fn lr_after_history(step: u64, val_history: &[f64], cfg: &TrainConfig) -> f64 {
    let mut p = Plateau::default();
    for &v in val_history {
        p.observe(v, cfg.plateau_patience);
    }
    lr_at(step, p.halvings, cfg)
}

/// Halves after `patience` consecutive validation epochs without a strictly lower loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub best: Option<f64>,
    pub bad_epochs: u32,
    pub halvings: u32,
}

impl Plateau {
    /// Records one validation loss; returns true when it triggers a halving.
    pub fn observe(&mut self, val: f64, patience: u32) -> bool {
        if self.best.map_or(true, |b| val < b) {
            self.best = Some(val);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= patience {
            self.bad_epochs = 0;
            self.halvings += 1;
            return true;
        }
        false
    }
}

fn crop_or_pad(w: &Waveform, start: usize, len: usize) -> Result<Waveform> {
    let chans: Vec<Vec<f32>> = (0..w.channels())
        .map(|c| {
            let src = w.channel(c);
            let mut v: Vec<f32> = src[start.min(src.len())..src.len().min(start + len)].to_vec();
            v.resize(len, 0.0);
            v
        })
        .collect();
    Waveform::from_channels(&chans, w.rate_hz())
}

/// Random `len`-sample crop of aligned `mixture` and `target`, or both zero-padded
/// at the end when shorter.
pub fn sample_chunk(
    mixture: &Waveform,
    target: &Waveform,
    len: usize,
    rng: &mut impl Rng,
) -> Result<(Waveform, Waveform)> {
    if mixture.is_empty() {
        return Err(Error::EmptySignal);
    }
    if mixture.len() != target.len() {
        return Err(Error::LengthMismatch(mixture.len(), target.len()));
    }
    let start = if mixture.len() > len {
        rng.gen_range(0..=mixture.len() - len)
    } else {
        0
    };
    Ok((crop_or_pad(mixture, start, len)?, crop_or_pad(target, start, len)?))
}

/// Stage 1: one channel uniformly. Stage 2: a shuffled subset of uniform size in
/// `2..=min(channels, max_channels)`. The first entry becomes the reference.
pub fn sample_channels(channels: usize, stage: StageSpec, max_channels: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if channels == 0 {
        return Err(Error::EmptySignal);
    }
    if stage.stage() == 1 {
        return Ok(vec![rng.gen_range(0..channels)]);
    }
    if channels < 2 {
        return Err(Error::Training("stage 2 needs at least 2 channels".into()));
    }
    let mut order: Vec<usize> = (0..channels).collect();
    order.shuffle(rng);
    let k = rng.gen_range(2..=channels.min(max_channels.max(2)));
    order.truncate(k);
    Ok(order)
}

#[derive(Debug, Clone)]
pub struct Example {
    pub mixture: Waveform,
    pub target: Waveform,
}

pub fn make_example(utt: &Utterance, stage: StageSpec, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Example> {
    let order = sample_channels(utt.mixture.channels(), stage, cfg.max_channels, rng)?;
    let target = utt.target_for(order[0])?;
    let mixture = utt.mixture.select_channels(&order)?;
    let (mixture, target) = sample_chunk(&mixture, &target, cfg.chunk_samples(mixture.rate_hz()), rng)?;
    Ok(Example { mixture, target })
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub t: u64,
    m: ParameterSet,
    v: ParameterSet,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            t: 0,
            m: ParameterSet::default(),
            v: ParameterSet::default(),
        }
    }

    fn moment(set: &mut ParameterSet, e: &ParamEntry) -> Result<Var> {
        if let Some(m) = set.get(&e.name) {
            return Ok(m.var.clone());
        }
        let var = Var::from_tensor(&e.var.as_tensor().zeros_like()?)?;
        set.push(ParamEntry {
            var: var.clone(),
            ..e.clone()
        })?;
        Ok(var)
    }

    pub fn step(&mut self, updates: &[(&ParamEntry, Tensor)], lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (e, g) in updates {
            let m = Self::moment(&mut self.m, e)?;
            let v = Self::moment(&mut self.v, e)?;
            let m_new = ((m.as_tensor() * cfg.beta1)? + (g * (1.0 - cfg.beta1))?)?;
            let v_new = ((v.as_tensor() * cfg.beta2)? + (g.sqr()? * (1.0 - cfg.beta2))?)?;
            let denom = ((&v_new / c2)?.sqrt()? + cfg.adam_eps)?;
            let delta = ((&m_new / c1)? / denom)?;
            e.var.set(&(e.var.as_tensor() - (delta * lr)?)?)?;
            m.set(&m_new)?;
            v.set(&v_new)?;
        }
        Ok(())
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut all = ParameterSet::default();
        for (tag, set) in [("m", &self.m), ("v", &self.v)] {
            for e in set.iter() {
                all.push(ParamEntry {
                    name: format!("{tag}:{}", e.name),
                    ..e.clone()
                })?;
            }
        }
        write_weights(path, &all)
    }

    fn load(path: &Path, t: u64, params: &ParameterSet) -> Result<Self> {
        let mut out = Self { t, ..Self::new() };
        for r in read_weights(path)? {
            let (tag, name) = r
                .name
                .split_once(':')
                .ok_or_else(|| Error::Checkpoint(format!("bad optimizer record {}", r.name)))?;
            let e = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            let value = Tensor::from_vec(r.values, r.dims, e.var.device())?.to_dtype(e.var.dtype())?;
            let var = Var::from_tensor(&value)?;
            let set = if tag == "m" { &mut out.m } else { &mut out.v };
            set.push(ParamEntry { var, ..e.clone() })?;
        }
        Ok(out)
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub train_loss: f64,
    /// Present on the last step of each epoch.
    pub val_loss: Option<f64>,
    /// Whether the gradient was rescaled to the clipping norm.
    pub clipped: bool,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    stage: u8,
    step: u64,
    epoch: u64,
    plateau: Plateau,
    adam_t: u64,
    clip_count: u64,
    config: TrainConfig,
}

pub struct Trainer {
    pub model: Model,
    pub stage: StageSpec,
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub plateau: Plateau,
    pub step: u64,
    pub epoch: u64,
    pub clip_count: u64,
    pub log: Vec<LogRecord>,
}

impl Trainer {
    /// Stage-1 trainer on a freshly built model.
    pub fn new(model: Model, stage: StageSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if stage.stage() == 2 {
            return Err(Error::Training("stage 2 starts from a stage-1 checkpoint".into()));
        }
        Ok(Self::with_model(model, stage, cfg))
    }

    fn with_model(model: Model, stage: StageSpec, cfg: TrainConfig) -> Self {
        Self {
            model,
            stage,
            cfg,
            adam: Adam::new(),
            plateau: Plateau::default(),
            step: 0,
            epoch: 0,
            clip_count: 0,
            log: Vec::new(),
        }
    }

    /// Starts `stage` from the weights of a finished earlier stage.
    pub fn from_checkpoint(dir: &Path, stage: StageSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, meta) = load_checkpoint(dir)?;
        if stage.stage() == 2 && meta.stage < 1 {
            return Err(Error::Training(format!(
                "{} is not a stage-1 checkpoint (stage {})",
                dir.display(),
                meta.stage
            )));
        }
        Ok(Self::with_model(model, stage, cfg))
    }

    /// Continues an interrupted run saved by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(TRAINER_FILE))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(TRAINER_FILE).display())))?;
        let st: TrainerState = serde_json::from_str(&text)?;
        let (model, _) = load_checkpoint(dir)?;
        let adam = Adam::load(&dir.join(OPTIMIZER_FILE), st.adam_t, &model.params)?;
        let mut log = Vec::new();
        if let Ok(text) = fs::read_to_string(dir.join(LOG_FILE)) {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                log.push(serde_json::from_str(line)?);
            }
        }
        Ok(Self {
            model,
            stage: StageSpec::new(st.stage)?,
            cfg: st.config,
            adam,
            plateau: st.plateau,
            step: st.step,
            epoch: st.epoch,
            clip_count: st.clip_count,
            log,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            stage: self.stage.stage(),
            step: self.step,
            epoch: self.epoch,
            seed: self.cfg.seed,
        };
        save_checkpoint(dir, &self.model, &meta)?;
        self.adam.save(&dir.join(OPTIMIZER_FILE))?;
        let st = TrainerState {
            stage: self.stage.stage(),
            step: self.step,
            epoch: self.epoch,
            plateau: self.plateau.clone(),
            adam_t: self.adam.t,
            clip_count: self.clip_count,
            config: self.cfg.clone(),
        };
        fs::write(dir.join(TRAINER_FILE), serde_json::to_string_pretty(&st)?)?;
        let mut f = fs::File::create(dir.join(LOG_FILE))?;
        for r in &self.log {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    /// Learning rate for the next update.
    pub fn lr(&self) -> f64 {
        lr_at(self.step + 1, self.plateau.halvings, &self.cfg)
    }

    fn steps_per_epoch(&self, n: usize) -> u64 {
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| n.div_ceil(self.cfg.batch) as u64)
    }

    /// Utterance index of global example `g`: consecutive passes over the data, each
    /// in its own seeded order.
    fn example_index(&self, g: u64, n: usize) -> usize {
        let pass = g / n as u64;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, &[self.stage.stage() as u64, 1, pass]));
        order[(g % n as u64) as usize]
    }

    /// One optimizer update on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[Utterance]) -> Result<LogRecord> {
        if data.is_empty() {
            return Err(Error::Training("empty training set".into()));
        }
        let stage = self.stage;
        let vb = ParamBuilder::load_selective(&self.model.params, move |_, cm| stage.trainable(cm));
        let net = Network::new(&vb, &self.model.config)?;
        let dtype = self.model.params.dtype().unwrap_or(candle_core::DType::F32);
        let trainable: Vec<&ParamEntry> = self
            .model
            .params
            .iter()
            .filter(|e| stage.trainable(e.channel_module))
            .collect();
        let mut acc: Vec<Option<Tensor>> = vec![None; trainable.len()];
        let mut total = 0.0;
        let b = self.cfg.batch;
        for slot in 0..b {
            let g = self.step * b as u64 + slot as u64;
            let utt = &data[self.example_index(g, data.len())];
            let mut rng = stream_rng(self.cfg.seed, &[stage.stage() as u64, 2, self.step, slot as u64]);
            let ex = make_example(utt, stage, &self.cfg, &mut rng)?;
            let est = net.forward_tensor(&ex.mixture.to_tensor(dtype)?, ex.mixture.rate_hz())?;
            let l = (loss_tensor(&est, &ex.target.to_tensor(dtype)?, &self.cfg.loss)? / b as f64)?;
            total += l.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            let grads = l.backward()?;
            for (a, e) in acc.iter_mut().zip(&trainable) {
                if let Some(gr) = grads.get(e.var.as_tensor()) {
                    *a = Some(match a.take() {
                        Some(prev) => (prev + gr)?,
                        None => gr.clone(),
                    });
                }
            }
        }
        let mut sq = 0.0;
        for g in acc.iter().flatten() {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        let clipped = norm > self.cfg.clip_norm;
        let scale = if clipped { self.cfg.clip_norm / norm } else { 1.0 };
        if clipped {
            self.clip_count += 1;
        }
        let mut updates = Vec::with_capacity(trainable.len());
        for (a, e) in acc.into_iter().zip(&trainable) {
            if let Some(g) = a {
                updates.push((*e, (g * scale)?));
            }
        }
        let lr = self.lr();
        self.adam.step(&updates, lr, &self.cfg)?;
        self.step += 1;
        let rec = LogRecord {
            step: self.step,
            stage: stage.stage(),
            lr,
            train_loss: total,
            val_loss: None,
            clipped,
        };
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Mean loss over `data` on the first chunk of each utterance with channels in
    /// stored order (reference first, at most `max_channels`).
    pub fn validate(&self, data: &[Utterance]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Training("empty validation set".into()));
        }
        let net = self.model.network(false)?;
        let dtype = self.model.params.dtype().unwrap_or(candle_core::DType::F32);
        let mut sum = 0.0;
        for u in data {
            let c = u.mixture.channels();
            let keep = if self.stage.stage() == 1 { 1 } else { c.min(self.cfg.max_channels) };
            let order: Vec<usize> = (0..keep).collect();
            let len = self.cfg.chunk_samples(u.mixture.rate_hz()).min(u.mixture.len());
            let mix = crop_or_pad(&u.mixture.select_channels(&order)?, 0, len)?;
            let tgt = crop_or_pad(&u.reference, 0, len)?;
            let est = net.forward_tensor(&mix.to_tensor(dtype)?, mix.rate_hz())?;
            let l = loss_tensor(&est, &tgt.to_tensor(dtype)?, &self.cfg.loss)?;
            sum += l.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(sum / data.len() as f64)
    }

    /// Trains until `cfg.max_steps`, validating (and checkpointing into `out`) at the
    /// end of every epoch. `on_log` sees every record as it is produced.
    pub fn run(
        &mut self,
        train: &[Utterance],
        dev: &[Utterance],
        out: Option<&Path>,
        mut on_log: impl FnMut(&LogRecord),
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Training(format!("no training data for stage {}", self.stage.stage())));
        }
        let spe = self.steps_per_epoch(train.len());
        while self.step < self.cfg.max_steps {
            let rec = self.train_step(train)?;
            if self.step % spe == 0 || self.step == self.cfg.max_steps {
                let val = self.validate(if dev.is_empty() { train } else { dev })?;
                self.plateau.observe(val, self.cfg.plateau_patience);
                self.epoch += 1;
                self.log.last_mut().unwrap().val_loss = Some(val);
                if let Some(dir) = out {
                    self.save(dir)?;
                }
            }
            on_log(self.log.last().unwrap_or(&rec));
        }
        Ok(())
    }
}

/// Parameters selected by `pred` as `(name, values)` pairs, for freeze checks.
pub fn snapshot(params: &ParameterSet, pred: impl Fn(&ParamEntry) -> bool) -> Result<Vec<(String, Vec<f32>)>> {
    params
        .iter()
        .filter(|e| pred(e))
        .map(|e| Ok((e.name.clone(), e.to_vec_f32()?)))
        .collect()
}
