//! Full recognizer: encoder plus either the decoupled head or a coupled baseline.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baseline::CoupledDecoder;
use crate::cam::Cam;
use crate::config::{DecoderKind, ModelConfig, RunConfig};
use crate::decoder::{sequence_loss, teacher_forcing_plan, DecodeOutput, DecoupledDecoder, Vocabulary};
use crate::encoder::{EncodedFeatures, Encoder};
use crate::error::{DanError, Result};
use crate::graph::{Graph, Var};
use crate::params::{read_tensors, write_tensors, ParamStore};
use crate::tensor::Tensor;

/// Checkpoint entry holding the UTF-8 run configuration, one byte per value.
pub const CONFIG_KEY: &str = "meta.config";

#[derive(Clone, Debug)]
pub enum Head {
    Decoupled { cam: Cam, decoder: DecoupledDecoder },
    Coupled(CoupledDecoder),
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    cfg: ModelConfig,
    vocab: Vocabulary,
    store: ParamStore,
    encoder: Encoder,
    head: Head,
}

/// Everything read back from a checkpoint besides the parameters.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    /// Non-parameter entries (optimizer and training state).
    pub extra: Vec<(String, Tensor)>,
}

impl Recognizer {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::new(&cfg.alphabet)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, &cfg.encoder, cfg.mode)?;
        let channels = encoder.out_channels();
        let head = match cfg.decoder {
            DecoderKind::Dan => {
                let quantum = cfg.encoder.ratio().1 << (cfg.cam.layers / 2);
                if cfg.encoder.max_width % quantum != 0 {
                    return Err(DanError::Config(format!(
                        "max_width {} must be a multiple of {quantum}",
                        cfg.encoder.max_width
                    )));
                }
                let shapes = encoder.stage_shapes(cfg.encoder.max_width);
                let cam = Cam::new(&mut store, &mut rng, &cfg.cam, cfg.mode, &shapes)?;
                let decoder = DecoupledDecoder::new(&mut store, &mut rng, vocab.len(), channels, cfg.hidden)?;
                Head::Decoupled { cam, decoder }
            }
            kind => Head::Coupled(CoupledDecoder::new(
                &mut store,
                &mut rng,
                kind,
                vocab.len(),
                channels,
                cfg.hidden,
                cfg.attn_dim,
            )?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            store,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn max_t(&self) -> usize {
        self.cfg.cam.max_t
    }

    /// Parameters outside the encoder.
    pub fn decoder_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(n, _)| !n.starts_with("enc."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Input widths are right-padded to a multiple of this.
    pub fn width_quantum(&self) -> usize {
        let rw = self.cfg.encoder.ratio().1;
        match &self.head {
            Head::Decoupled { cam, .. } => rw * cam.width_quantum(),
            Head::Coupled(_) => rw,
        }
    }

    /// Blank input columns always left after the image, so the end of the
    /// text is followed by at least two feature columns.
    pub fn right_margin(&self) -> usize {
        2 * self.cfg.encoder.ratio().1
    }

    /// Padded input width for an image `w` pixels wide: `w` plus the right
    /// margin, rounded up to the width quantum.
    pub fn padded_width(&self, w: usize) -> usize {
        (w + self.right_margin()).div_ceil(self.width_quantum()) * self.width_quantum()
    }

    /// Widest image whose padded width still fits `max_width`.
    pub fn max_image_width(&self) -> usize {
        let q = self.width_quantum();
        (self.cfg.encoder.max_width / q * q).saturating_sub(self.right_margin())
    }

    /// Stack `[1, H, W_i]` images into `[n, 1, H, W]`, zero-padding on the right.
    pub fn batch_tensor(&self, images: &[&Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(DanError::Data("empty batch".into()));
        }
        let h = self.cfg.encoder.input_height;
        let mut widest = 0;
        for img in images {
            match img.shape() {
                [1, ih, w] if *ih == h => widest = widest.max(*w),
                s => {
                    return Err(DanError::Data(format!(
                        "expected a [1, {h}, W] image, got {s:?}"
                    )))
                }
            }
        }
        let w = self.padded_width(widest);
        if w > self.cfg.encoder.max_width {
            return Err(DanError::Data(format!(
                "image width {widest} (padded {w}) exceeds max width {}",
                self.cfg.encoder.max_width
            )));
        }
        let mut data = vec![0.0; images.len() * h * w];
        for (b, img) in images.iter().enumerate() {
            let iw = img.shape()[2];
            for (r, row) in img.data().chunks(iw).enumerate() {
                data[(b * h + r) * w..][..iw].copy_from_slice(row);
            }
        }
        Tensor::new(&[images.len(), 1, h, w], data)
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<EncodedFeatures> {
        self.encoder.encode(g, &self.store, x)
    }

    /// Attention maps `[n, maxT, h, w]` for a batch; decoupled head only.
    pub fn attention(&self, g: &mut Graph, feats: &EncodedFeatures) -> Result<Var> {
        match &self.head {
            Head::Decoupled { cam, .. } => cam.forward(g, &self.store, &feats.stages),
            Head::Coupled(_) => Err(DanError::Config("coupled decoders have no standalone attention".into())),
        }
    }

    /// Encode label strings to class indices, checking the step budget.
    pub fn encode_labels<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<Vec<usize>>> {
        labels
            .iter()
            .map(|l| {
                let ids = self.vocab.encode(l.as_ref())?;
                if ids.len() + 1 > self.max_t() {
                    return Err(DanError::Data(format!(
                        "label of length {} needs {} steps, maxT is {}",
                        ids.len(),
                        ids.len() + 1,
                        self.max_t()
                    )));
                }
                Ok(ids)
            })
            .collect()
    }

    /// Teacher-forced sequence loss for a batch (summed over steps, mean over images).
    /// Batch norms run on batch statistics.
    pub fn loss(&self, g: &mut Graph, images: &[&Tensor], labels: &[Vec<usize>]) -> Result<Var> {
        if images.len() != labels.len() {
            return Err(DanError::Data(format!("{} images for {} labels", images.len(), labels.len())));
        }
        let x = g.input(self.batch_tensor(images)?);
        self.loss_on(g, x, labels)
    }

    /// Same as [`loss`](Self::loss) for an already batched input node.
    pub fn loss_on(&self, g: &mut Graph, x: Var, labels: &[Vec<usize>]) -> Result<Var> {
        g.set_training(true);
        let (inputs, targets) = teacher_forcing_plan(labels);
        let feats = self.encode(g, x)?;
        let logits = match &self.head {
            Head::Decoupled { cam, decoder } => {
                let attn = cam.forward_steps(g, &self.store, &feats.stages, inputs.len())?;
                let ctx = decoder.contexts(g, feats.final_map, attn, inputs.len())?;
                decoder.teacher_forced(g, &self.store, ctx, &inputs)?
            }
            Head::Coupled(dec) => dec.teacher_forced(g, &self.store, feats.final_map, &inputs)?,
        };
        sequence_loss(g, &logits, &targets)
    }

    /// Greedy decoding of images padded to one common width.
    pub fn decode_batch(&self, images: &[&Tensor]) -> Result<Vec<DecodeOutput>> {
        let mut g = Graph::new();
        let x = g.input(self.batch_tensor(images)?);
        let feats = self.encode(&mut g, x)?;
        match &self.head {
            Head::Decoupled { cam, decoder } => {
                let attn = cam.forward(&mut g, &self.store, &feats.stages)?;
                let maps = g.value(attn).clone();
                let ctx = decoder.contexts(&mut g, feats.final_map, attn, self.max_t())?;
                decoder.greedy(&mut g, &self.store, ctx, &maps, &self.vocab)
            }
            Head::Coupled(dec) => dec.greedy(&mut g, &self.store, feats.final_map, self.max_t(), &self.vocab),
        }
    }

    pub fn decode(&self, image: &Tensor) -> Result<DecodeOutput> {
        Ok(self.decode_batch(&[image])?.remove(0))
    }

    /// Decode many images. Images are grouped by padded width so each result
    /// matches what decoding that image within its group would give.
    pub fn decode_all(&self, images: &[&Tensor], batch: usize) -> Result<Vec<DecodeOutput>> {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let pw = |i: usize| self.padded_width(images[i].shape().last().copied().unwrap_or(0));
        order.sort_by_key(|&i| (pw(i), i));
        let mut out: Vec<Option<DecodeOutput>> = vec![None; images.len()];
        let mut start = 0;
        while start < order.len() {
            let w = pw(order[start]);
            let mut end = start;
            while end < order.len() && end - start < batch.max(1) && pw(order[end]) == w {
                end += 1;
            }
            let group: Vec<&Tensor> = order[start..end].iter().map(|&i| images[i]).collect();
            for (&i, d) in order[start..end].iter().zip(self.decode_batch(&group)?) {
                out[i] = Some(d);
            }
            start = end;
        }
        Ok(out.into_iter().map(|d| d.expect("every image decoded")).collect())
    }

    /// Attention maps `[maxT, h, w]` of a single image; decoupled head only.
    pub fn attention_maps(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(self.batch_tensor(&[image])?);
        let feats = self.encode(&mut g, x)?;
        let attn = self.attention(&mut g, &feats)?;
        let s = g.shape(attn).to_vec();
        g.value(attn).clone().reshape(&s[1..])
    }

    /// Write parameters, the run configuration and `extra` entries.
    pub fn save_checkpoint(&self, path: &Path, run: &RunConfig, extra: &[(String, Tensor)]) -> Result<()> {
        if run.model != self.cfg {
            return Err(DanError::Config("run configuration does not describe this model".into()));
        }
        let text = run.to_text();
        let cfg_tensor = Tensor::new(&[text.len()], text.bytes().map(f64::from).collect())?;
        let mut entries: Vec<(&str, &Tensor)> = self.store.iter().collect();
        entries.push((CONFIG_KEY, &cfg_tensor));
        entries.extend(extra.iter().map(|(n, t)| (n.as_str(), t)));
        let tmp = path.with_extension("tmp");
        {
            let mut out = BufWriter::new(fs::File::create(&tmp)?);
            write_tensors(&mut out, &entries)?;
            out.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, Checkpoint)> {
        let file = fs::File::open(path)
            .map_err(|e| DanError::Checkpoint(format!("{}: {e}", path.display())))?;
        let tensors = read_tensors(&mut BufReader::new(file))?;
        let cfg_bytes = tensors
            .iter()
            .find(|(n, _)| n == CONFIG_KEY)
            .map(|(_, t)| t.data().iter().map(|&v| v as u8).collect::<Vec<u8>>())
            .ok_or_else(|| DanError::Checkpoint(format!("{}: no stored configuration", path.display())))?;
        let text = String::from_utf8(cfg_bytes)
            .map_err(|_| DanError::Checkpoint("stored configuration is not UTF-8".into()))?;
        let run = RunConfig::parse(&text).map_err(|e| DanError::Checkpoint(format!("stored configuration: {e}")))?;
        let mut model = Self::new(&run.model, 0)?;
        model.store.copy_values_from(&tensors)?;
        let extra = tensors
            .into_iter()
            .filter(|(n, _)| n != CONFIG_KEY && model.store.id(n).is_none())
            .collect();
        Ok((model, Checkpoint { run, extra }))
    }

    /// Fail unless the dataset's symbols all belong to this model's vocabulary.
    pub fn check_labels<S: AsRef<str>>(&self, labels: &[S]) -> Result<()> {
        for l in labels {
            if let Some(c) = l.as_ref().chars().find(|&c| !self.vocab.contains(c)) {
                return Err(DanError::Vocab(format!(
                    "label {:?} uses symbol {c:?} outside the model vocabulary {:?}",
                    l.as_ref(),
                    self.vocab.alphabet()
                )));
            }
        }
        Ok(())
    }
}
