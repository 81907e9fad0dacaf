//! Training loop: weighted main + auxiliary cross-entropy, AdamW, periodic
//! evaluation, metrics log and checkpoints.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode};
use crate::config::{DataSource, RunConfig};
use crate::data::{augment, gen_synthetic, load_directory, stack, Sample, SyntheticConfig};
use crate::error::{Error, Result};
use crate::infer::{evaluate, Protocol};
use crate::metrics::format_record;
use crate::model::SegModel;
use crate::optim::{warmup_lr, AdamW};
use crate::params::ParamStore;

/// Training and evaluation sets named by the data section. Synthetic data
/// draws the evaluation set from the next seed; a directory serves as both.
pub fn load_datasets(config: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &config.data;
    match &d.source {
        DataSource::Synthetic => {
            let syn = SyntheticConfig::new(d.image_size, d.image_size, config.model.classes);
            Ok((gen_synthetic(d.seed, d.train_count, &syn)?, gen_synthetic(d.seed.wrapping_add(1), d.eval_count, &syn)?))
        }
        DataSource::Directory(path) => {
            let samples: Vec<Sample> = load_directory(path)?.into_iter().map(|(_, s)| s).collect();
            Ok((samples.clone(), samples))
        }
    }
}

/// Result of a finished (or early-stopped) run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    /// `(step, train mIoU)` at every evaluation.
    pub train_miou: Vec<(usize, f64)>,
    pub eval_miou: Vec<(usize, f64)>,
    pub log: Vec<String>,
}

impl TrainReport {
    pub fn best_train_miou(&self) -> f64 {
        self.train_miou.iter().map(|m| m.1).fold(0.0, f64::max)
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: SegModel,
    pub params: ParamStore<f32>,
    opt: AdamW<f32>,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let (model, params) = SegModel::new::<f32>(&config.model, config.train.seed)?;
        Ok(Trainer {
            config: config.clone(),
            model,
            params,
            opt: AdamW::new(config.optimizer),
            rng: ChaCha8Rng::seed_from_u64(config.data.seed ^ 0x5eed_0f_da7a),
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Header line of the metrics log.
    pub fn log_header(&self) -> String {
        let o = &self.config.optimizer;
        format!(
            "# decoder={} backbone={} lr={} weight_decay={} betas={},{} eps={} warmup={} batch={} seed={}",
            self.model.config.decoder,
            self.model.config.backbone.name,
            o.lr,
            o.weight_decay,
            o.beta1,
            o.beta2,
            o.eps,
            self.config.train.warmup,
            self.config.train.batch_size,
            self.config.train.seed
        )
    }

    /// Random augmented batch drawn from `samples`.
    pub fn sample_batch(&mut self, samples: &[Sample]) -> Result<Vec<Sample>> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let crop = self.config.data.crop;
        let flip = self.config.data.flip_p;
        Ok((0..self.config.train.batch_size)
            .map(|_| {
                let i = self.rng.gen_range(0..samples.len());
                augment(&samples[i], crop, flip, &mut self.rng)
            })
            .collect())
    }

    /// Total loss of `batch` with the current parameters, no update.
    pub fn batch_loss(&self, batch: &[Sample], mode: Mode) -> Result<f64> {
        let refs: Vec<&Sample> = batch.iter().collect();
        let (img, labels) = stack(&refs)?;
        let g = Graph::with_params(&self.params, mode);
        let out = self.model.forward(&g, g.input(img), true)?;
        Ok(self.model.loss(&out, &labels)?.value().data()[0] as f64)
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    /// A non-finite loss or gradient aborts without changing parameters.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<f64> {
        let refs: Vec<&Sample> = batch.iter().collect();
        let (img, labels) = stack(&refs)?;
        let (loss, grads, buffers) = {
            let g = Graph::with_params(&self.params, Mode::Train).with_seed(self.config.train.seed.wrapping_add(self.step as u64));
            let out = self.model.forward(&g, g.input(img), true)?;
            let loss = self.model.loss(&out, &labels)?;
            let value = loss.value().data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value} at step {}", self.step + 1)));
            }
            let grads = g.backward(loss)?;
            let owned: Vec<_> = grads.params().into_iter().map(|(id, t)| (id, t.clone())).collect();
            (value, owned, g.take_buffer_updates())
        };
        let lr = warmup_lr(self.config.optimizer.lr, self.step, self.config.train.warmup);
        let refs: Vec<_> = grads.iter().map(|(id, t)| (*id, t)).collect();
        self.opt.step(&mut self.params, &refs, lr)?;
        for (id, t) in buffers {
            self.params.set(id, t)?;
        }
        self.step += 1;
        Ok(loss)
    }

    /// Runs up to `train.steps` steps, evaluating every `train.eval_every`
    /// steps and at the end. Stops early once training mIoU reaches
    /// `train.stop_miou`. A failed step leaves the parameters untouched, so
    /// on error they are written to the configured checkpoint as the last
    /// good state.
    pub fn run(&mut self, train: &[Sample], eval: &[Sample]) -> Result<TrainReport> {
        let mut report = TrainReport { steps: 0, final_loss: f64::NAN, train_miou: Vec::new(), eval_miou: Vec::new(), log: vec![self.log_header()] };
        let mut log_file = match &self.config.train.log {
            Some(p) => Some(File::create(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        emit(&mut log_file, &report.log[0])?;
        let total = self.config.train.steps;
        let every = self.config.train.eval_every.max(1);
        let ss = Protocol::single_scale();
        while self.step < total {
            let batch = self.sample_batch(train)?;
            let loss = match self.train_step(&batch) {
                Ok(l) => l,
                Err(e) => {
                    if let Some(p) = &self.config.train.checkpoint {
                        self.params.save(p)?;
                    }
                    emit(&mut log_file, &format!("# aborted at step {}: {e}", self.step + 1))?;
                    return Err(e);
                }
            };
            report.final_loss = loss;
            let step = self.step;
            let lr = warmup_lr(self.config.optimizer.lr, step - 1, self.config.train.warmup);
            let mut fields = vec![("step", step.to_string()), ("loss", format!("{loss:.6}")), ("lr", format!("{lr:.3e}"))];
            let mut stop = false;
            if step % every == 0 || step == total {
                let cm = evaluate(&self.model, &self.params, train, &ss)?;
                let miou = cm.miou()?;
                report.train_miou.push((step, miou));
                fields.push(("miou", format!("{miou:.6}")));
                fields.push(("pixel_acc", format!("{:.6}", cm.pixel_accuracy()?)));
                if !eval.is_empty() {
                    let em = evaluate(&self.model, &self.params, eval, &ss)?.miou()?;
                    report.eval_miou.push((step, em));
                    fields.push(("eval_miou", format!("{em:.6}")));
                }
                stop = self.config.train.stop_miou.is_some_and(|t| miou >= t);
            }
            let line = format_record(&fields);
            emit(&mut log_file, &line)?;
            report.log.push(line);
            if stop {
                break;
            }
        }
        report.steps = self.step;
        if let Some(p) = &self.config.train.checkpoint {
            self.params.save(p)?;
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }
}

fn emit(file: &mut Option<File>, line: &str) -> Result<()> {
    if let Some(f) = file {
        writeln!(f, "{line}").map_err(|e| Error::Data(format!("metrics log: {e}")))?;
    }
    Ok(())
}
