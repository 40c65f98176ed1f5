//! The training loop: augment, encode, distill, one backward pass, SGD on
//! the student, EMA on the teachers, then refresh the queues.

mod checkpoint;
mod metrics;
mod optim;

use std::path::PathBuf;
use std::time::Instant;

pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{read_metrics, MetricsWriter, StepMetrics};
pub use optim::{sgd_step, Schedule};

pub use crate::config::{Method, TrainConfig};
use crate::augment::{apply_policy, AugmentPolicy};
use crate::data::{batches, LabeledImageDataset};
use crate::error::{Error, Result};
use crate::image::{ChannelNorm, ImageBatch, Size};
use crate::memory::{NegativeQueue, UNIT_TOLERANCE};
use crate::model::{EncoderSpec, Network, TriNetwork};
use crate::numcore::{Scalar, Tape, Tensor, NORM_EPS};
use crate::relation::{loss_moco, loss_mq, loss_msv, loss_msvq, loss_ressl, teacher_entropy, Temperatures};
use crate::rng::SeededRng;

/// Everything needed to continue training bit-for-bit.
///
/// Random draws are keyed by `(seed, step)` and `(seed, epoch)`, so the
/// counters double as the RNG state.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub config: TrainConfig,
    pub encoder: EncoderSpec,
    pub nets: TriNetwork<T>,
    pub queue1: NegativeQueue<T>,
    pub queue2: NegativeQueue<T>,
    /// Momentum buffers aligned with the student parameters.
    pub velocity: Vec<Tensor<T>>,
    pub norm: ChannelNorm,
    pub step: u64,
    pub epoch: u64,
    pub steps_per_epoch: u64,
}

/// The four augmented views of one minibatch.
#[derive(Debug, Clone)]
pub struct Views {
    pub x1: ImageBatch,
    pub x2: ImageBatch,
    pub x3: Option<ImageBatch>,
    pub x4: Option<ImageBatch>,
}

/// Where `run` sends metrics and checkpoints.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub metrics: Option<&'a mut MetricsWriter>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// File name of the checkpoint written after `epoch` epochs.
pub fn checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state: random student, teachers copied from it, random queues,
    /// zero momentum, normalization statistics from `dataset`.
    pub fn new(config: &TrainConfig, dataset: &LabeledImageDataset) -> Result<Self> {
        config.validate()?;
        let dims = config.dataset.dims();
        let images = &dataset.images;
        if (images.channels, images.height, images.width) != dims {
            return Err(Error::shape(
                "dataset dims",
                &[images.channels, images.height, images.width],
                &[dims.0, dims.1, dims.2],
            ));
        }
        let steps_per_epoch = (dataset.len() / config.pretraining.batch_size) as u64;
        Self::initial(config, ChannelNorm::from_batch(images), steps_per_epoch)
    }

    pub(crate) fn initial(config: &TrainConfig, norm: ChannelNorm, steps_per_epoch: u64) -> Result<Self> {
        let p = &config.pretraining;
        let encoder = config.encoder_spec();
        let root = SeededRng::new(p.seed);
        let nets = TriNetwork::new(&encoder, &root.named("init"), T::of(p.m1), T::of(p.m2))?;
        let mut queue1 = NegativeQueue::new(p.queue_size, encoder.embed_dim, &root.named("queue").substream(1))?;
        let mut queue2 = NegativeQueue::new(p.queue_size, encoder.embed_dim, &root.named("queue").substream(2))?;
        if p.analysis_mode {
            queue1 = queue1.with_labels();
            queue2 = queue2.with_labels();
        }
        let velocity = nets.student.params().iter().map(|v| Tensor::zeros(v.value.shape())).collect();
        Ok(TrainState {
            config: config.clone(),
            encoder,
            nets,
            queue1,
            queue2,
            velocity,
            norm,
            step: 0,
            epoch: 0,
            steps_per_epoch,
        })
    }

    pub fn method(&self) -> Method {
        self.config.pretraining.method
    }

    pub fn schedule(&self) -> Schedule {
        let p = &self.config.pretraining;
        Schedule::new(p.base_lr, p.warmup_epochs, p.epochs, self.steps_per_epoch)
    }

    pub fn temperatures(&self) -> Result<Temperatures<T>> {
        let p = &self.config.pretraining;
        Temperatures::new(T::of(p.tau_s), T::of(p.tau_t))
    }

    fn image_size(&self) -> Size {
        let (_, h, w) = self.config.dataset.dims();
        Size::new(h, w)
    }

    /// Views for the current step. X¹ is strong; X²–X⁴ are weak and drawn
    /// from independent streams. Views a method does not use are skipped.
    pub fn views(&self, batch: &ImageBatch) -> Result<Views> {
        let method = self.method();
        let size = self.image_size();
        let (strong, weak) = (AugmentPolicy::strong(size), AugmentPolicy::weak(size));
        let key_policy = if method == Method::Moco { &strong } else { &weak };
        let stream = SeededRng::new(self.config.pretraining.seed).named("augment").substream(self.step);
        Ok(Views {
            x1: apply_policy(batch, &strong, &stream.named("x1"))?,
            x2: apply_policy(batch, key_policy, &stream.named("x2"))?,
            x3: method
                .uses_view3()
                .then(|| apply_policy(batch, &weak, &stream.named("x3")))
                .transpose()?,
            x4: method
                .uses_queue2()
                .then(|| apply_policy(batch, &weak, &stream.named("x4")))
                .transpose()?,
        })
    }

    /// Unit-norm teacher embedding of one view; never touches a tape.
    pub fn teacher_embedding(&self, teacher: &Network<T>, view: &ImageBatch) -> Result<Tensor<T>> {
        teacher.embed(&view.to_tensor(&self.norm)?)?.l2_normalize_rows(T::of(NORM_EPS))
    }

    /// Rejects rows that cannot enter a queue: zero, non-finite or off the unit sphere.
    fn check_unit_rows(&self, z: &Tensor<T>, name: &str) -> Result<()> {
        let (n, _) = z.dims2()?;
        for i in 0..n {
            let norm = z.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
                return Err(Error::Degenerate {
                    step: self.step,
                    what: format!("{name} row {i} has norm {norm}"),
                });
            }
        }
        Ok(())
    }

    /// One optimization step on `batch`. `labels` are stored in the queues
    /// only in analysis mode and never reach the loss.
    pub fn train_step(&mut self, batch: &ImageBatch, labels: Option<&[u32]>) -> Result<StepMetrics> {
        let started = Instant::now();
        let method = self.method();
        let temps = self.temperatures()?;
        let lr = self.schedule().lr_at(self.step);
        let views = self.views(batch)?;

        let z2 = self.teacher_embedding(&self.nets.teacher1, &views.x2)?;
        let z3 = views.x3.as_ref().map(|x| self.teacher_embedding(&self.nets.teacher1, x)).transpose()?;
        let z4 = views.x4.as_ref().map(|x| self.teacher_embedding(&self.nets.teacher2, x)).transpose()?;
        for (name, z) in [("teacher-1 embedding of x2", Some(&z2)), ("teacher-2 embedding of x4", z4.as_ref())] {
            if let Some(z) = z {
                self.check_unit_rows(z, name)?;
            }
        }
        let q1 = self.queue1.as_matrix();

        let mut tape = Tape::new();
        let x1 = tape.constant(views.x1.to_tensor(&self.norm)?);
        let pass = self.nets.student.forward(&mut tape, x1)?;
        let z1 = tape.l2_normalize_rows(pass.embedding, T::of(NORM_EPS))?;

        let mut entropies = [None; 3];
        let (loss, l11) = if method == Method::Moco {
            (loss_moco(&mut tape, z1, &z2, &q1, temps.student)?, None)
        } else {
            let q1v = tape.constant(q1.clone());
            let l11 = tape.matmul(z1, q1v)?;
            let l21 = z2.matmul(&q1)?;
            entropies[0] = Some(teacher_entropy(&l21, temps.teacher)?.as_f64());
            let l31 = z3.as_ref().map(|z| z.matmul(&q1)).transpose()?;
            if let Some(l) = &l31 {
                entropies[1] = Some(teacher_entropy(l, temps.teacher)?.as_f64());
            }
            let second = match &z4 {
                Some(z4) => {
                    let q2 = self.queue2.as_matrix();
                    let q2v = tape.constant(q2.clone());
                    let l12 = tape.matmul(z1, q2v)?;
                    let l42 = z4.matmul(&q2)?;
                    entropies[2] = Some(teacher_entropy(&l42, temps.teacher)?.as_f64());
                    Some((l12, l42))
                }
                None => None,
            };
            let loss = match (method, l31, second) {
                (Method::Ressl, None, None) => loss_ressl(&mut tape, l11, &l21, &temps)?,
                (Method::Msv, Some(l31), None) => loss_msv(&mut tape, l11, &l21, &l31, &temps)?,
                (Method::Mq, None, Some((l12, l42))) => loss_mq(&mut tape, l11, &l21, l12, &l42, &temps)?,
                (Method::Msvq, Some(l31), Some((l12, l42))) => loss_msvq(&mut tape, l11, l12, &l21, &l31, &l42, &temps)?,
                _ => unreachable!("views are gated by method"),
            };
            (loss, Some(l11))
        };

        let loss_value = tape.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            let logits = l11.map(|v| tape.value(v).clone()).unwrap_or_else(|| z2.clone());
            return Err(Error::NonFinite {
                step: self.step,
                diagnostic: logit_stats(&logits),
            });
        }

        let grads = tape.backward(loss)?;
        let student = &mut self.nets.student;
        student.zero_grad();
        for (&var, param) in pass.params.iter().zip(student.params_mut()) {
            grads.accumulate(var, param)?;
        }
        let p = &self.config.pretraining;
        sgd_step(
            student.params_mut(),
            &mut self.velocity,
            T::of(lr),
            T::of(p.momentum),
            T::of(p.weight_decay),
        )?;

        self.nets.update_teacher1()?;
        if method.uses_queue2() {
            self.nets.update_teacher2()?;
        }
        let labels = labels.filter(|_| self.queue1.tracks_labels());
        self.queue1.enqueue_dequeue(&z2, labels)?;
        if let Some(z4) = &z4 {
            self.queue2.enqueue_dequeue(z4, labels)?;
        }

        let metrics = StepMetrics {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss: loss_value,
            teacher_entropy_21: entropies[0],
            teacher_entropy_31: entropies[1],
            teacher_entropy_42: entropies[2],
            wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
            backward_passes: tape.backward_passes(),
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Trains until the configured epoch count.
    pub fn run(&mut self, dataset: &LabeledImageDataset, opts: TrainOptions<'_>) -> Result<Vec<StepMetrics>> {
        let remaining = self.config.pretraining.epochs.saturating_sub(self.epoch);
        self.run_epochs(dataset, remaining, opts)
    }

    /// Trains at most `count` more epochs, reshuffling each one, dropping
    /// the final partial batch and checkpointing after every epoch.
    pub fn run_epochs(&mut self, dataset: &LabeledImageDataset, count: u64, mut opts: TrainOptions<'_>) -> Result<Vec<StepMetrics>> {
        let n = self.config.pretraining.batch_size;
        if (dataset.len() / n) as u64 != self.steps_per_epoch {
            return Err(Error::shape(
                "steps per epoch",
                &[dataset.len() / n],
                &[self.steps_per_epoch as usize],
            ));
        }
        let started = Instant::now();
        let last = (self.epoch + count).min(self.config.pretraining.epochs);
        let mut log = Vec::new();
        while self.epoch < last {
            for idx in batches(dataset.len(), n, self.config.pretraining.seed, self.epoch) {
                let batch = dataset.images.select(&idx);
                let labels = self.queue1.tracks_labels().then(|| dataset.labels_of(&idx));
                let mut m = self.train_step(&batch, labels.as_deref())?;
                m.wallclock_ms = started.elapsed().as_secs_f64() * 1e3;
                if let Some(w) = opts.metrics.as_deref_mut() {
                    w.write(&m)?;
                }
                log.push(m);
            }
            self.epoch += 1;
            if let Some(m) = log.last() {
                log::info!("epoch {} step {} loss {:.5} lr {:.5}", self.epoch, m.step + 1, m.loss, m.lr);
            }
            if let Some(dir) = &opts.checkpoint_dir {
                save_checkpoint(self, &dir.join(checkpoint_name(self.epoch)))?;
            }
        }
        Ok(log)
    }
}

/// `train(cfg, dataset)`: fresh state run to completion.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    dataset: &LabeledImageDataset,
    opts: TrainOptions<'_>,
) -> Result<(TrainState<T>, Vec<StepMetrics>)> {
    let mut state = TrainState::new(config, dataset)?;
    let log = state.run(dataset, opts)?;
    Ok((state, log))
}

fn logit_stats<T: Scalar>(t: &Tensor<T>) -> String {
    let vals: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    format!(
        "logits shape {:?}: {} non-finite of {}, finite min {lo:.4e} max {hi:.4e} mean {mean:.4e}",
        t.shape(),
        vals.len() - finite.len(),
        vals.len()
    )
}
