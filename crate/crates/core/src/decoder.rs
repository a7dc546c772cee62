//! Decoupled text decoder: attention pooling, GRU recurrence and classification.

use rand::Rng;

use crate::error::{shape_err, DanError, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Embedding, GruParams, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Symbol table with reserved end- and start-of-sequence classes.
///
/// Class 0 is EOS, class 1 is SOS, symbol `i` of the alphabet is class `i + 2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Vocabulary {
    pub const EOS: usize = 0;
    pub const SOS: usize = 1;

    pub fn new(alphabet: &str) -> Result<Self> {
        let symbols: Vec<char> = alphabet.chars().collect();
        if symbols.is_empty() {
            return Err(DanError::Config("empty alphabet".into()));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(DanError::Config(format!("symbol {c:?} repeated in alphabet")));
            }
        }
        Ok(Self { symbols })
    }

    /// Number of classes including EOS and SOS.
    pub fn len(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn alphabet(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn contains(&self, c: char) -> bool {
        self.symbols.contains(&c)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.symbols
                    .iter()
                    .position(|&s| s == c)
                    .map(|i| i + 2)
                    .ok_or_else(|| DanError::Vocab(format!("symbol {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Map class indices to text, dropping EOS and SOS.
    pub fn decode(&self, classes: &[usize]) -> String {
        classes
            .iter()
            .filter(|&&c| c >= 2)
            .filter_map(|&c| self.symbols.get(c - 2))
            .collect()
    }
}

/// Result of greedy decoding for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub text: String,
    /// Raw class scores, `[steps, K]`.
    pub logits: Tensor,
    /// Attention argmax `(x, y)` per step, including the terminating step.
    pub centers: Vec<(usize, usize)>,
    pub steps: usize,
    /// Attention map used at each step, `[steps, h, w]`.
    pub maps: Tensor,
}

impl DecodeOutput {
    /// Mean over steps of the largest softmax probability.
    pub fn confidence(&self) -> f64 {
        let k = self.logits.shape()[1];
        let total: f64 = self
            .logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut p = row.to_vec();
                crate::graph::softmax_in_place(&mut p);
                p.into_iter().fold(0.0, f64::max)
            })
            .sum();
        total / self.steps as f64
    }

    /// Centers of the character-emitting steps (the terminating EOS step excluded).
    pub fn text_centers(&self) -> &[(usize, usize)] {
        let n = self.text.chars().count().min(self.centers.len());
        &self.centers[..n]
    }
}

/// Spatial argmax of an `h×w` map; ties go to the smallest `(y, x)`.
pub fn attention_center(map: &[f64], h: usize, w: usize) -> (usize, usize) {
    debug_assert_eq!(map.len(), h * w);
    let best = argmax(map);
    (best % w, best / w)
}

/// `c[k] = Σ_{x,y} α[y, x] · F[k, y, x]` for a single image.
pub fn context_vector(features: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let fs = features.shape();
    if fs.len() != 3 || alpha.shape() != &fs[1..] {
        return Err(shape_err!(
            "context_vector: features {fs:?} vs attention {:?}",
            alpha.shape()
        ));
    }
    let mut g = Graph::new();
    let f = g.input(features.clone().reshape(&[1, fs[0], fs[1] * fs[2]])?);
    let a = g.input(alpha.clone().reshape(&[1, 1, fs[1] * fs[2]])?);
    let c = g.context(f, a)?;
    g.value(c).clone().reshape(&[fs[0]])
}

/// GRU decoder that reads pre-computed attention maps.
#[derive(Clone, Debug)]
pub struct DecoupledDecoder {
    pub embedding: Embedding,
    pub gru: GruParams,
    pub classifier: Linear,
    pub feature_channels: usize,
}

impl DecoupledDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        classes: usize,
        feature_channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        let embedding = Embedding::new(store, rng, "dec.embed", classes, hidden)?;
        let gru = GruParams::new(store, rng, "dec.gru", hidden + feature_channels, hidden)?;
        let classifier = Linear::new(store, rng, "dec.out", hidden, classes, true)?;
        Ok(Self {
            embedding,
            gru,
            classifier,
            feature_channels,
        })
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden_size
    }

    /// Context vectors for the first `steps` attention channels: `[n, steps, C]`.
    pub fn contexts(&self, g: &mut Graph, features: Var, attention: Var, steps: usize) -> Result<Var> {
        let fs = g.shape(features).to_vec();
        let as_ = g.shape(attention).to_vec();
        if fs.len() != 4 || as_.len() != 4 || fs[0] != as_[0] || fs[2..] != as_[2..] {
            return Err(shape_err!("features {fs:?} vs attention maps {as_:?}"));
        }
        if steps > as_[1] {
            return Err(shape_err!("{steps} steps requested, only {} maps", as_[1]));
        }
        let p = fs[2] * fs[3];
        let f = g.reshape(features, &[fs[0], fs[1], p])?;
        let a = if steps == as_[1] {
            g.reshape(attention, &[as_[0], as_[1], p])?
        } else {
            // keep only the leading channels
            let a = g.reshape(attention, &[as_[0], as_[1] * p])?;
            let a = g.slice_cols(a, 0, steps * p)?;
            g.reshape(a, &[as_[0], steps, p])?
        };
        g.context(f, a)
    }

    /// One recurrence: `h_t = GRU([e_prev, c_t], h_prev)`, `y_t = W h_t + b`.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        e_prev: Var,
        c_t: Var,
        h_prev: Var,
    ) -> Result<(Var, Var)> {
        let x = g.concat(&[e_prev, c_t])?;
        let h = self.gru.cell(g, store, x, h_prev)?;
        let y = self.classifier.forward(g, store, h)?;
        Ok((y, h))
    }

    /// Teacher-forced logits for every step, one `[n, K]` node per step.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        contexts: Var,
        inputs: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        let n = g.shape(contexts)[0];
        let mut h = g.input(Tensor::zeros(&[n, self.hidden()]));
        let mut out = Vec::with_capacity(inputs.len());
        for (t, prev) in inputs.iter().enumerate() {
            let e = self.embedding.forward(g, store, prev)?;
            let c = g.select_step(contexts, t)?;
            let (y, h_next) = self.step(g, store, e, c, h)?;
            h = h_next;
            out.push(y);
        }
        Ok(out)
    }

    /// Greedy decoding from SOS with a zero initial state, for a batch that
    /// shares one spatial size.
    ///
    /// `contexts` is `[n, maxT, C]` and `maps` the matching attention tensor
    /// `[n, maxT, h, w]`. Each item stops at its first EOS or after `maxT` steps.
    pub fn greedy(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        contexts: Var,
        maps: &Tensor,
        vocab: &Vocabulary,
    ) -> Result<Vec<DecodeOutput>> {
        let cs = g.shape(contexts).to_vec();
        let ms = maps.shape();
        if cs.len() != 3 || ms.len() != 4 || ms[..2] != cs[..2] {
            return Err(shape_err!("contexts {cs:?} vs maps {ms:?}"));
        }
        let (n, max_t) = (cs[0], cs[1]);
        let (h, w) = (ms[2], ms[3]);
        let k = vocab.len();
        let mut hidden = g.input(Tensor::zeros(&[n, self.hidden()]));
        let mut prev = vec![Vocabulary::SOS; n];
        let mut classes: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut logits: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for t in 0..max_t {
            let e = self.embedding.forward(g, store, &prev)?;
            let c = g.select_step(contexts, t)?;
            let (y, h_next) = self.step(g, store, e, c, hidden)?;
            hidden = h_next;
            let scores = g.value(y).data();
            for b in 0..n {
                if done[b] {
                    continue;
                }
                let row = &scores[b * k..][..k];
                let best = argmax(row);
                logits[b].extend_from_slice(row);
                classes[b].push(best);
                prev[b] = best;
                done[b] = best == Vocabulary::EOS;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        let plane = h * w;
        (0..n)
            .map(|b| {
                let steps = classes[b].len();
                let mut map_data = Vec::with_capacity(steps * plane);
                let mut centers = Vec::with_capacity(steps);
                for t in 0..steps {
                    let m = &maps.data()[(b * max_t + t) * plane..][..plane];
                    centers.push(attention_center(m, h, w));
                    map_data.extend_from_slice(m);
                }
                let text_len = classes[b].iter().take_while(|&&c| c != Vocabulary::EOS).count();
                Ok(DecodeOutput {
                    text: vocab.decode(&classes[b][..text_len]),
                    logits: Tensor::new(&[steps, k], std::mem::take(&mut logits[b]))?,
                    centers,
                    steps,
                    maps: Tensor::new(&[steps, h, w], map_data)?,
                })
            })
            .collect()
    }
}

/// Index of the largest entry; the first wins on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-step decoder inputs (previous symbol) and targets for a padded batch.
///
/// Step `t` feeds SOS at `t = 0` and the ground-truth symbol `t-1` after that;
/// the target is symbol `t`, then EOS, then nothing for shorter labels.
pub fn teacher_forcing_plan(labels: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<Option<usize>>>) {
    let steps = labels.iter().map(Vec::len).max().unwrap_or(0) + 1;
    let mut inputs = vec![Vec::with_capacity(labels.len()); steps];
    let mut targets = vec![Vec::with_capacity(labels.len()); steps];
    for t in 0..steps {
        for l in labels {
            let prev = if t == 0 {
                Vocabulary::SOS
            } else {
                l.get(t - 1).copied().unwrap_or(Vocabulary::EOS)
            };
            inputs[t].push(prev);
            targets[t].push(match t.cmp(&l.len()) {
                std::cmp::Ordering::Less => Some(l[t]),
                std::cmp::Ordering::Equal => Some(Vocabulary::EOS),
                std::cmp::Ordering::Greater => None,
            });
        }
    }
    (inputs, targets)
}

/// `Σ_t -log P(g_t)` summed over steps, averaged over the batch.
pub fn sequence_loss(g: &mut Graph, logits: &[Var], targets: &[Vec<Option<usize>>]) -> Result<Var> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(shape_err!("{} logit steps for {} target steps", logits.len(), targets.len()));
    }
    let n = targets[0].len();
    let mut total: Option<Var> = None;
    for (&y, t) in logits.iter().zip(targets) {
        let l = g.cross_entropy(y, t)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / n as f64))
}
