//! Pre-training loop: batches → encoders → losses → backward → Adam.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{augment_audio, augmentation_seed, make_batches, Batch, Dataset, Split};
use crate::encoders::{embed_batch, EncoderStack};
use crate::error::{Error, Result};
use crate::losses::{loss_total, LossBreakdown};
use crate::optim::{clip_grad_norm, collect_grads, Adam, CosineSchedule};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    /// 1-based epoch the step belongs to.
    pub epoch: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub wall_ms: f64,
}

pub struct Trainer {
    pub config: Config,
    pub stack: EncoderStack,
    pub adam: Adam,
    /// Optimizer steps taken so far (batches processed).
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    seed: u64,
    steps_per_epoch: u64,
    schedule: CosineSchedule,
    epoch_batches: Option<(u64, Vec<Batch>)>,
    skipped_in_epoch: u64,
}

fn check_dataset(cfg: &Config, ds: &Dataset) -> Result<()> {
    let m = &cfg.model;
    if ds.d_v_raw != m.d_v_raw {
        return Err(Error::Config(format!("dataset video width {} does not match model.d_v_raw {}", ds.d_v_raw, m.d_v_raw)));
    }
    if let Some(d) = ds.d_a_raw {
        if d != m.d_a_raw {
            return Err(Error::Config(format!("dataset audio width {d} does not match model.d_a_raw {}", m.d_a_raw)));
        }
    }
    Ok(())
}

impl Trainer {
    /// Fresh model. `config.train.seed` must be set.
    pub fn new(config: &Config, ds: &Dataset) -> Result<Self> {
        config.validate()?;
        let seed = config
            .train
            .seed
            .ok_or_else(|| Error::Config("a training seed is required (train.seed or --seed)".into()))?;
        let stack = EncoderStack::new(&config.model, seed)?;
        let adam = Adam::new(&config.optim);
        Self::assemble(config.clone(), stack, adam, 0, 0, ds)
    }

    /// Continue from a checkpoint; the run length comes from its embedded config.
    pub fn from_checkpoint(ckpt: Checkpoint, ds: &Dataset) -> Result<Self> {
        Self::assemble(ckpt.config, ckpt.stack, ckpt.adam, ckpt.step, ckpt.epoch, ds)
    }

    fn assemble(config: Config, stack: EncoderStack, adam: Adam, step: u64, epoch: u64, ds: &Dataset) -> Result<Self> {
        check_dataset(&config, ds)?;
        let seed = config
            .train
            .seed
            .ok_or_else(|| Error::Config("a training seed is required (train.seed or --seed)".into()))?;
        let n_train = ds.split_indices(Split::Train).len() as u64;
        if n_train < 2 {
            return Err(Error::Invalid(format!("training split has {n_train} samples; need at least 2")));
        }
        let bs = config.train.batch_size as u64;
        let steps_per_epoch = n_train.div_ceil(bs);
        let total = (config.train.epochs * steps_per_epoch).max(1);
        let o = &config.optim;
        let schedule = CosineSchedule::new(o.lr_max, o.lr_min, total)?.with_warmup(o.warmup_steps);
        Ok(Self {
            config,
            stack,
            adam,
            step,
            epoch,
            seed,
            steps_per_epoch,
            schedule,
            epoch_batches: None,
            skipped_in_epoch: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.config.train.epochs * self.steps_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            stack: self.stack.clone(),
            adam: self.adam.clone(),
            step: self.step,
            epoch: self.epoch,
        }
    }

    /// Forward, backward and update on one batch.
    ///
    /// `epoch` and `batch_index` only key the augmentation noise. On error the
    /// model and optimizer state are unchanged.
    pub fn train_step(&mut self, batch: &Batch, epoch: u64, batch_index: u64) -> Result<StepLog> {
        let start = Instant::now();
        let sigma = self.config.train.audio_noise_sigma;
        let mut items = batch.items.clone();
        if sigma > 0.0 {
            for (pos, it) in items.iter_mut().enumerate() {
                if let Some(a) = &it.audio {
                    let s = augmentation_seed(self.seed, epoch, batch_index, pos as u64);
                    it.audio = Some(augment_audio(a, sigma, s)?);
                }
            }
        }
        let step = self.step;
        let numeric = |e: Error| match e {
            Error::NonFinite { op } => Error::Numeric(format!("non-finite value in {op} at step {step}")),
            other => other,
        };
        let lr = self.schedule.lr_at(self.step);
        let mut g = Graph::new();
        let e = embed_batch(&mut g, &self.stack, &items).map_err(numeric)?;
        let (loss, losses) = loss_total(&mut g, &e, &self.config.loss).map_err(numeric)?;
        if !losses.total.is_finite() {
            return Err(Error::Numeric(format!("loss is {} at step {step}", losses.total)));
        }
        g.backward(loss).map_err(numeric)?;
        let mut grads = collect_grads(&g, &self.stack);
        drop(g);
        if let Some(c) = self.config.optim.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        if !grads.is_empty() {
            self.adam.step(&mut self.stack, &grads, lr)?;
        }
        if losses.skipped_terms.len() == self.config.loss.terms.len() {
            self.skipped_in_epoch += 1;
        }
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            epoch: epoch + 1,
            lr,
            losses,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Run the next step of the schedule, building the epoch's batches on
    /// demand. Returns `None` when training is finished.
    pub fn next_step(&mut self, ds: &Dataset) -> Result<Option<StepLog>> {
        if self.is_finished() {
            return Ok(None);
        }
        let epoch = self.step / self.steps_per_epoch;
        let b = self.step % self.steps_per_epoch;
        if self.epoch_batches.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let batches = make_batches(ds, Split::Train, self.config.train.batch_size, self.seed, epoch, true)?;
            self.epoch_batches = Some((epoch, batches));
        }
        let batch = self.epoch_batches.as_ref().unwrap().1[b as usize].clone();
        let log = self.train_step(&batch, epoch, b)?;
        if b + 1 == self.steps_per_epoch {
            self.epoch = epoch + 1;
            if self.skipped_in_epoch * 2 > self.steps_per_epoch {
                log::warn!(
                    "epoch {}: {} of {} batches had every loss term skipped; check modality availability",
                    self.epoch,
                    self.skipped_in_epoch,
                    self.steps_per_epoch
                );
            }
            self.skipped_in_epoch = 0;
        }
        Ok(Some(log))
    }

    /// Train to the end of the schedule. `on_step` sees every log line;
    /// `on_epoch` runs after each completed epoch.
    pub fn run(
        &mut self,
        ds: &Dataset,
        on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
        on_epoch: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while let Some(log) = self.next_step(ds)? {
            on_step(&log)?;
            if self.step.is_multiple_of(self.steps_per_epoch) {
                on_epoch(self)?;
            }
        }
        Ok(())
    }
}

/// Files written by [`pretrain`].
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epoch_checkpoints: Vec<PathBuf>,
    pub final_losses: Option<LossBreakdown>,
}

/// `<stem>.epoch<N>.lavc` next to `out`.
pub fn epoch_checkpoint_path(out: &Path, epoch: u64) -> PathBuf {
    out.with_extension(format!("epoch{epoch}.lavc"))
}

/// Training log path for checkpoint `out`.
pub fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

/// Full pre-training run writing the final checkpoint to `out`, periodic
/// checkpoints per `train.checkpoint_every` and the JSONL log beside it.
/// The log opens with one `{"config": ...}` line holding the resolved config.
pub fn pretrain(
    config: &Config,
    ds: &Dataset,
    out: &Path,
    on_epoch: &mut dyn FnMut(&Trainer) -> Result<()>,
) -> Result<PretrainOutput> {
    let mut trainer = Trainer::new(config, ds)?;
    let lp = log_path(out);
    let file = File::create(&lp).map_err(|e| Error::io(&lp, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::json!({ "config": trainer.config });
    writeln!(w, "{header}").map_err(|e| Error::io(&lp, e))?;

    let every = config.train.checkpoint_every;
    let mut epoch_checkpoints = Vec::new();
    let mut last = None;
    trainer.run(
        ds,
        &mut |log| {
            last = Some(log.losses.clone());
            let line = serde_json::to_string(log).expect("log line serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(&lp, e))
        },
        &mut |t| {
            if every > 0 && t.epoch % every == 0 && !t.is_finished() {
                let p = epoch_checkpoint_path(out, t.epoch);
                t.checkpoint().save(&p)?;
                epoch_checkpoints.push(p);
            }
            on_epoch(t)
        },
    )?;
    w.flush().map_err(|e| Error::io(&lp, e))?;
    trainer.checkpoint().save(out)?;
    Ok(PretrainOutput {
        checkpoint: out.to_path_buf(),
        log: lp,
        epoch_checkpoints,
        final_losses: last,
    })
}
