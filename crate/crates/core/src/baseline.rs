//! Coupled attention decoders used as baselines.
//!
//! Both score every feature position against the previous decoder state, so
//! alignment and decoding share one recurrence. Recognition head (embedding,
//! GRU over `[e_prev, c_t]`, linear classifier) matches the decoupled decoder.

use rand::Rng;

use crate::config::DecoderKind;
use crate::decoder::{argmax, attention_center, DecodeOutput, Vocabulary};
use crate::error::{config_err, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Embedding, GruParams, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Scorer {
    /// `e = v · tanh(W_f f + W_h h + b)`
    Additive { w_f: Linear, w_h: Linear, v: Linear },
    /// `e = h^T W f`
    General { w: Linear },
}

#[derive(Clone, Debug)]
pub struct CoupledDecoder {
    kind: DecoderKind,
    scorer: Scorer,
    pub embedding: Embedding,
    pub gru: GruParams,
    pub classifier: Linear,
    pub feature_channels: usize,
}

/// Features flattened for repeated scoring: `[n, C, P]` plus cached projections.
pub struct PreparedFeatures {
    feat: Var,
    projected: Option<Var>,
    n: usize,
    h: usize,
    w: usize,
}

impl CoupledDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        kind: DecoderKind,
        classes: usize,
        feature_channels: usize,
        hidden: usize,
        attn_dim: usize,
    ) -> Result<Self> {
        let scorer = match kind {
            DecoderKind::Bahdanau => Scorer::Additive {
                w_f: Linear::new(store, rng, "att.w_f", feature_channels, attn_dim, true)?,
                w_h: Linear::new(store, rng, "att.w_h", hidden, attn_dim, false)?,
                v: Linear::new(store, rng, "att.v", attn_dim, 1, false)?,
            },
            DecoderKind::Luong => Scorer::General {
                w: Linear::new(store, rng, "att.w", hidden, feature_channels, false)?,
            },
            DecoderKind::Dan => return Err(config_err!("dan is not a coupled decoder")),
        };
        let embedding = Embedding::new(store, rng, "dec.embed", classes, hidden)?;
        let gru = GruParams::new(store, rng, "dec.gru", hidden + feature_channels, hidden)?;
        let classifier = Linear::new(store, rng, "dec.out", hidden, classes, true)?;
        Ok(Self {
            kind,
            scorer,
            embedding,
            gru,
            classifier,
            feature_channels,
        })
    }

    pub fn kind(&self) -> DecoderKind {
        self.kind
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden_size
    }

    /// Flatten `[n, C, h, w]` features and precompute the state-independent part
    /// of the score.
    pub fn prepare(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<PreparedFeatures> {
        let s = g.shape(features).to_vec();
        let [n, c, h, w] = s[..] else {
            return Err(shape_err!("coupled decoder needs [n,c,h,w] features, got {s:?}"));
        };
        if c != self.feature_channels {
            return Err(shape_err!("expected {} feature channels, got {c}", self.feature_channels));
        }
        let p = h * w;
        let feat = g.reshape(features, &[n, c, p])?;
        let projected = match &self.scorer {
            Scorer::Additive { w_f, .. } => {
                let t = g.swap_last(feat)?;
                let t = g.reshape(t, &[n * p, c])?;
                let t = w_f.forward(g, store, t)?;
                let a = g.shape(t)[1];
                Some(g.reshape(t, &[n, p, a])?)
            }
            Scorer::General { .. } => None,
        };
        Ok(PreparedFeatures {
            feat,
            projected,
            n,
            h,
            w,
        })
    }

    /// Attention weights `[n, P]` from the previous hidden state.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, pf: &PreparedFeatures, h_prev: Var) -> Result<Var> {
        let p = pf.h * pf.w;
        let scores = match &self.scorer {
            Scorer::Additive { w_h, v, .. } => {
                let q = w_h.forward(g, store, h_prev)?;
                let proj = pf.projected.expect("additive scorer caches projections");
                let e = g.add_rows(proj, q)?;
                let e = g.tanh(e);
                let a = g.shape(e)[2];
                let e = g.reshape(e, &[pf.n * p, a])?;
                let e = v.forward(g, store, e)?;
                g.reshape(e, &[pf.n, p])?
            }
            Scorer::General { w } => {
                let q = w.forward(g, store, h_prev)?;
                g.query_score(q, pf.feat)?
            }
        };
        Ok(g.softmax(scores))
    }

    /// One coupled step; returns `(logits, h_t, alpha_t)`.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pf: &PreparedFeatures,
        prev: &[usize],
        h_prev: Var,
    ) -> Result<(Var, Var, Var)> {
        let alpha = self.attend(g, store, pf, h_prev)?;
        let p = pf.h * pf.w;
        let a3 = g.reshape(alpha, &[pf.n, 1, p])?;
        let c = g.context(pf.feat, a3)?;
        let c = g.reshape(c, &[pf.n, self.feature_channels])?;
        let e = self.embedding.forward(g, store, prev)?;
        let x = g.concat(&[e, c])?;
        let h = self.gru.cell(g, store, x, h_prev)?;
        let y = self.classifier.forward(g, store, h)?;
        Ok((y, h, alpha))
    }

    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        inputs: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        let pf = self.prepare(g, store, features)?;
        let mut h = g.input(Tensor::zeros(&[pf.n, self.hidden()]));
        let mut out = Vec::with_capacity(inputs.len());
        for prev in inputs {
            let (y, h_next, _) = self.step(g, store, &pf, prev, h)?;
            h = h_next;
            out.push(y);
        }
        Ok(out)
    }

    /// Greedy decoding for a batch sharing one spatial size, at most `max_t` steps.
    pub fn greedy(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        max_t: usize,
        vocab: &Vocabulary,
    ) -> Result<Vec<DecodeOutput>> {
        let pf = self.prepare(g, store, features)?;
        let (n, h, w) = (pf.n, pf.h, pf.w);
        let plane = h * w;
        let k = vocab.len();
        let mut hidden = g.input(Tensor::zeros(&[n, self.hidden()]));
        let mut prev = vec![Vocabulary::SOS; n];
        let mut classes: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut logits: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut maps: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for _ in 0..max_t {
            let (y, h_next, alpha) = self.step(g, store, &pf, &prev, hidden)?;
            hidden = h_next;
            let (scores, a) = (g.value(y).data(), g.value(alpha).data());
            for b in 0..n {
                if done[b] {
                    continue;
                }
                let row = &scores[b * k..][..k];
                let best = argmax(row);
                logits[b].extend_from_slice(row);
                maps[b].extend_from_slice(&a[b * plane..][..plane]);
                classes[b].push(best);
                prev[b] = best;
                done[b] = best == Vocabulary::EOS;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        (0..n)
            .map(|b| {
                let steps = classes[b].len();
                let centers = maps[b].chunks(plane).map(|m| attention_center(m, h, w)).collect();
                let text_len = classes[b].iter().take_while(|&&c| c != Vocabulary::EOS).count();
                Ok(DecodeOutput {
                    text: vocab.decode(&classes[b][..text_len]),
                    logits: Tensor::new(&[steps, k], std::mem::take(&mut logits[b]))?,
                    centers,
                    steps,
                    maps: Tensor::new(&[steps, h, w], std::mem::take(&mut maps[b]))?,
                })
            })
            .collect()
    }
}
