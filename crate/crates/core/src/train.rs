//! Training loop, evaluation, crop voting and diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::decoder::DecodeOutput;
use crate::error::{DanError, Result};
use crate::graph::Graph;
use crate::layers::BN_MOMENTUM;
use crate::metrics::{self, MisalignmentReport};
use crate::model::Recognizer;
use crate::optim::Adadelta;
use crate::synth::{self, Sample};
use crate::tensor::Tensor;

/// Checkpoint entry holding `[next_epoch]`.
pub const TRAIN_STATE_KEY: &str = "meta.train";
pub const METRICS_HEADER: &str = "epoch,loss,cer,wer,seq_acc";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Images decoded together during evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-image sequence loss over the epoch.
    pub loss: f64,
    /// Validation scores; `None` when no validation set is given.
    pub cer: Option<f64>,
    pub wer: Option<f64>,
    pub seq_acc: Option<f64>,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{},{}",
            self.epoch,
            self.loss,
            metrics::fmt_opt(self.cer),
            metrics::fmt_opt(self.wer),
            metrics::fmt_opt(self.seq_acc)
        )
    }
}

pub struct Trainer {
    pub run: RunConfig,
    pub model: Recognizer,
    pub opt: Adadelta,
    pub next_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

/// Batches of sample indices for one epoch, deterministic in `(seed, epoch)`.
///
/// Indices are shuffled, sorted by width inside windows of four batches to
/// limit padding, cut into batches, and the batch order is shuffled again.
pub fn epoch_batches(widths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = synth::sample_rng(seed ^ 0xba7c4, epoch as u64);
    let mut idx: Vec<usize> = (0..widths.len()).collect();
    idx.shuffle(&mut rng);
    let bs = batch_size.max(1);
    let mut batches = Vec::new();
    for window in idx.chunks_mut(4 * bs) {
        window.sort_by_key(|&i| widths[i]);
        batches.extend(window.chunks(bs).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

impl Trainer {
    pub fn new(run: &RunConfig) -> Result<Self> {
        let model = Recognizer::new(&run.model, run.seed)?;
        let opt = Adadelta::new(model.store(), run.rho, run.eps);
        Ok(Self {
            run: run.clone(),
            model,
            opt,
            next_epoch: 0,
            history: Vec::new(),
        })
    }

    /// Continue from a checkpoint written by [`save`](Self::save).
    pub fn resume(path: &Path) -> Result<Self> {
        let (model, ckpt) = Recognizer::load_checkpoint(path)?;
        let mut opt = Adadelta::new(model.store(), ckpt.run.rho, ckpt.run.eps);
        opt.load_state(model.store(), &ckpt.extra)?;
        let next_epoch = ckpt
            .extra
            .iter()
            .find(|(n, _)| n == TRAIN_STATE_KEY)
            .map(|(_, t)| t.data()[0] as usize)
            .ok_or_else(|| DanError::Checkpoint("checkpoint has no training state".into()))?;
        Ok(Self {
            run: ckpt.run,
            model,
            opt,
            next_epoch,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extra = self.opt.state_tensors(self.model.store());
        extra.push((TRAIN_STATE_KEY.to_string(), Tensor::new(&[1], vec![self.next_epoch as f64])?));
        self.model.save_checkpoint(path, &self.run, &extra)
    }

    /// One optimizer step on a batch; returns the batch loss (mean per image).
    pub fn train_step(&mut self, images: &[&Tensor], labels: &[Vec<usize>], lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.model.loss(&mut g, images, labels)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(DanError::Graph(format!("loss became {value}")));
        }
        g.backward(loss)?;
        let store = self.model.store_mut();
        store.zero_grads();
        g.accumulate_param_grads(store)?;
        self.opt.step(store, lr)?;
        g.update_running_stats(store, BN_MOMENTUM);
        store.round_to_f32();
        self.opt.round_to_f32();
        Ok(value)
    }

    /// Train one epoch (the next one) and evaluate on `val` if it is non-empty.
    pub fn train_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(DanError::Data("training set is empty".into()));
        }
        let labels = self.model.encode_labels(&train.iter().map(|s| s.label.as_str()).collect::<Vec<_>>())?;
        let epoch = self.next_epoch;
        let max_len = labels.iter().map(Vec::len).max().unwrap_or(0);
        let cap = self.run.length_cap(epoch, max_len);
        let active: Vec<usize> = (0..train.len()).filter(|&i| labels[i].len() <= cap).collect();
        let widths: Vec<usize> = active.iter().map(|&i| train[i].image.shape()[2]).collect();
        let lr = self.run.lr_at(epoch);
        let mut total = 0.0;
        for batch in epoch_batches(&widths, self.run.batch_size, self.run.seed, epoch) {
            let imgs: Vec<&Tensor> = batch.iter().map(|&j| &train[active[j]].image).collect();
            let labs: Vec<Vec<usize>> = batch.iter().map(|&j| labels[active[j]].clone()).collect();
            total += self.train_step(&imgs, &labs, lr)? * batch.len() as f64;
        }
        let (cer, wer, seq_acc) = if val.is_empty() {
            (None, None, None)
        } else {
            let r = evaluate(&self.model, val)?;
            (Some(r.cer), Some(r.wer), Some(r.seq_acc))
        };
        self.next_epoch += 1;
        let m = EpochMetrics {
            epoch,
            loss: total / active.len().max(1) as f64,
            cer,
            wer,
            seq_acc,
        };
        self.history.push(m.clone());
        Ok(m)
    }

    /// Train until `run.epochs`, writing the checkpoint and metrics log into
    /// `out_dir` after every epoch. Rows of a resumed log from epochs not yet
    /// reached are discarded.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample], out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        let log_path = out_dir.join(METRICS_FILE);
        let mut log = String::from(METRICS_HEADER);
        log.push('\n');
        if self.next_epoch > 0 {
            if let Ok(old) = fs::read_to_string(&log_path) {
                for line in old.lines().skip(1) {
                    let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
                    if epoch.is_some_and(|e| e < self.next_epoch) {
                        log.push_str(line);
                        log.push('\n');
                    }
                }
            }
        }
        fs::write(&log_path, &log)?;
        while self.next_epoch < self.run.epochs {
            let m = self.train_epoch(train, val)?;
            self.save(&out_dir.join(CHECKPOINT_FILE))?;
            log.push_str(&m.csv_row());
            log.push('\n');
            fs::write(&log_path, &log)?;
        }
        Ok(())
    }
}

/// Rescale an arbitrary single-channel image to the model's input height and
/// squeeze it horizontally if it is wider than the model allows.
pub fn fit_image(model: &Recognizer, img: &Tensor) -> Result<Tensor> {
    let enc = &model.config().encoder;
    let mut out = if img.shape()[1] == enc.input_height {
        img.clone()
    } else {
        synth::resize_to_height(img, enc.input_height)?
    };
    if out.shape()[2] > model.max_image_width() {
        out = synth::resize(&out, enc.input_height, model.max_image_width())?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub preds: Vec<String>,
    pub gts: Vec<String>,
    pub outputs: Vec<DecodeOutput>,
    pub cer: f64,
    pub wer: f64,
    pub seq_acc: f64,
}

impl EvalReport {
    fn from_outputs(outputs: Vec<DecodeOutput>, samples: &[Sample]) -> Self {
        let preds: Vec<String> = outputs.iter().map(|o| o.text.clone()).collect();
        let gts: Vec<String> = samples.iter().map(|s| s.label.clone()).collect();
        Self {
            cer: metrics::cer(&preds, &gts),
            wer: metrics::wer(&preds, &gts),
            seq_acc: metrics::seq_acc(&preds, &gts),
            preds,
            gts,
            outputs,
        }
    }

    /// Misalignments per sample from the character-emitting attention centers.
    pub fn misalignment(&self, buckets: &[(usize, usize)]) -> MisalignmentReport {
        let samples: Vec<(usize, usize)> = self
            .outputs
            .iter()
            .zip(&self.gts)
            .map(|(o, g)| {
                let xs: Vec<usize> = o.text_centers().iter().map(|c| c.0).collect();
                (g.chars().count(), metrics::measure_misalignment(&xs))
            })
            .collect();
        metrics::mm_per_image(&samples, buckets)
    }
}

/// Decode every sample and score against its label.
pub fn evaluate(model: &Recognizer, samples: &[Sample]) -> Result<EvalReport> {
    model.check_labels(&samples.iter().map(|s| s.label.as_str()).collect::<Vec<_>>())?;
    let images = samples
        .iter()
        .map(|s| fit_image(model, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let outputs = model.decode_all(&refs, EVAL_BATCH)?;
    Ok(EvalReport::from_outputs(outputs, samples))
}

/// `(top, bottom)` crop amounts as percentages of the image height.
pub const DEFAULT_CROPS: [(usize, usize); 6] = [(0, 0), (5, 0), (0, 5), (10, 0), (0, 10), (10, 10)];

/// Decode each cropped variant and keep the one with the highest mean
/// per-step maximum probability; the earliest strategy wins ties.
pub fn crop_vote(model: &Recognizer, image: &Tensor, strategies: &[(usize, usize)]) -> Result<DecodeOutput> {
    if strategies.is_empty() {
        return Err(DanError::Config("crop voting needs at least one strategy".into()));
    }
    let h = image.shape()[1];
    let mut best: Option<(f64, DecodeOutput)> = None;
    for &(top, bottom) in strategies {
        let rows = |pct: usize| (pct as f64 / 100.0 * h as f64).round() as usize;
        let cropped = synth::crop_rows(image, rows(top), rows(bottom))?;
        let out = model.decode(&fit_image(model, &cropped)?)?;
        let score = out.confidence();
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, out));
        }
    }
    Ok(best.expect("at least one strategy").1)
}

pub fn evaluate_crop_vote(model: &Recognizer, samples: &[Sample], strategies: &[(usize, usize)]) -> Result<EvalReport> {
    model.check_labels(&samples.iter().map(|s| s.label.as_str()).collect::<Vec<_>>())?;
    let outputs = samples
        .iter()
        .map(|s| crop_vote(model, &s.image, strategies))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_outputs(outputs, samples))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    /// Replicated-border padding by this fraction on every side.
    Pad(f64),
    /// Random outward corner stretch up to this fraction.
    Stretch(f64),
}

impl Perturbation {
    pub fn name(&self) -> &'static str {
        match self {
            Perturbation::Pad(_) => "pad",
            Perturbation::Stretch(_) => "stretch",
        }
    }

    pub fn apply(&self, img: &Tensor, seed: u64) -> Result<Tensor> {
        match *self {
            Perturbation::Pad(f) => synth::perturb_pad(img, f, f),
            Perturbation::Stretch(f) => synth::perturb_random_stretch(img, f, seed),
        }
    }
}

/// Perturbed copies of `samples`; stretch seeds derive from `(seed, id)`.
pub fn perturb_samples(samples: &[Sample], p: Perturbation, seed: u64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            let sub = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(s.id);
            Ok(Sample {
                image: p.apply(&s.image, sub)?,
                label: s.label.clone(),
                id: s.id,
            })
        })
        .collect()
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub split: String,
    pub n: usize,
    pub cer: f64,
    pub wer: f64,
    /// Sequence accuracy.
    pub accuracy: f64,
    /// Accuracy minus clean accuracy.
    pub gap: f64,
    /// Relative decrease `-gap / clean`.
    pub ratio: f64,
}

pub const REPORT_HEADER: &str = "split,n,cer,wer,accuracy,gap,ratio";

impl EvalRow {
    fn new(split: &str, r: &EvalReport, clean: f64) -> Self {
        let gap = r.seq_acc - clean;
        Self {
            split: split.into(),
            n: r.gts.len(),
            cer: r.cer,
            wer: r.wer,
            accuracy: r.seq_acc,
            gap,
            ratio: if clean > 0.0 { -gap / clean } else { 0.0 },
        }
    }
}

/// Clean evaluation followed by each perturbed variant and, optionally,
/// crop voting on the clean images.
pub fn eval_rows(
    model: &Recognizer,
    samples: &[Sample],
    perturbations: &[Perturbation],
    crops: Option<&[(usize, usize)]>,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let clean = evaluate(model, samples)?;
    let base = clean.seq_acc;
    let mut rows = vec![EvalRow::new("clean", &clean, base)];
    for &p in perturbations {
        let r = evaluate(model, &perturb_samples(samples, p, seed)?)?;
        rows.push(EvalRow::new(p.name(), &r, base));
    }
    if let Some(c) = crops {
        rows.push(EvalRow::new("crop_vote", &evaluate_crop_vote(model, samples, c)?, base));
    }
    Ok(rows)
}

pub fn report_csv(rows: &[EvalRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.split, r.n, r.cer, r.wer, r.accuracy, r.gap, r.ratio
        );
    }
    out
}

/// Side-by-side misalignment and CER per bucket for two evaluations.
/// `cer_improvement` is the CER of `b` minus the CER of `a`.
pub fn compare_csv(a: &EvalReport, b: &EvalReport, buckets: &[(usize, usize)]) -> String {
    let (ma, mb) = (a.misalignment(buckets), b.misalignment(buckets));
    let (ca, cb) = (
        metrics::bucket_cer(&a.preds, &a.gts, buckets),
        metrics::bucket_cer(&b.preds, &b.gts, buckets),
    );
    let mut out = String::from("bucket_lo,bucket_hi,n,mm_per_img_a,mm_per_img_b,cer_a,cer_b,cer_improvement\n");
    for i in 0..buckets.len() {
        let improvement = ca[i].zip(cb[i]).map(|(x, y)| y - x);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            buckets[i].0,
            buckets[i].1,
            ma.buckets[i].n,
            metrics::fmt_opt(ma.buckets[i].mm_per_img),
            metrics::fmt_opt(mb.buckets[i].mm_per_img),
            metrics::fmt_opt(ca[i]),
            metrics::fmt_opt(cb[i]),
            metrics::fmt_opt(improvement)
        );
    }
    out
}
