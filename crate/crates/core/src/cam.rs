//! Convolutional alignment module.
//!
//! Multi-scale encoder features are cascaded down to the final feature size and
//! summed, passed through a U-shaped stack of `L/2` strided convolutions and
//! `L/2` transposed convolutions with additive skips, and projected to `maxT`
//! channels. Each channel is squashed by a sigmoid and divided by its spatial
//! sum, giving one attention map per decoding step. Nothing here reads decoder
//! state.

use rand::Rng;

use crate::config::{CamConfig, Mode};
use crate::error::{config_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm2d, Conv2d, ConvBnRelu, ConvTranspose2d};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Cam {
    cfg: CamConfig,
    mode: Mode,
    fuse: Vec<ConvBnRelu>,
    down: Vec<ConvBnRelu>,
    up: Vec<(ConvTranspose2d, BatchNorm2d)>,
    head: Conv2d,
}

/// Strides of the down path for a map of height `h`.
///
/// 1-D mode halves only the width. 2-D mode halves both axes while the height
/// stays even, then falls back to width-only.
pub fn down_strides(mode: Mode, layers: usize, mut h: usize) -> Vec<(usize, usize)> {
    (0..layers / 2)
        .map(|_| {
            let sh = if mode == Mode::TwoD && h >= 2 && h % 2 == 0 { 2 } else { 1 };
            h /= sh;
            (sh, 2)
        })
        .collect()
}

impl Cam {
    /// `stage_shapes` lists `(channels, h, w)` of every encoder stage output for
    /// a reference width; the last entry is the final feature map.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &CamConfig,
        mode: Mode,
        stage_shapes: &[(usize, usize, usize)],
    ) -> Result<Self> {
        cfg.validate()?;
        if stage_shapes.is_empty() {
            return Err(config_err!("CAM needs at least one encoder stage"));
        }
        let mut fuse = Vec::new();
        for (i, pair) in stage_shapes.windows(2).enumerate() {
            let ((c0, h0, w0), (c1, h1, w1)) = (pair[0], pair[1]);
            if h0 % h1 != 0 || w0 % w1 != 0 {
                return Err(config_err!(
                    "stage {i} ({h0}x{w0}) cannot reach stage {} ({h1}x{w1}) by an integer stride",
                    i + 1
                ));
            }
            let stride = (h0 / h1, w0 / w1);
            fuse.push(ConvBnRelu::new(store, rng, &format!("cam.fuse{i}"), c0, c1, (3, 3), stride, (1, 1))?);
        }
        let (c_final, h_final, _) = *stage_shapes.last().unwrap();
        let strides = down_strides(mode, cfg.layers, h_final);
        let mut down = Vec::new();
        let mut in_ch = c_final;
        for (i, &s) in strides.iter().enumerate() {
            down.push(ConvBnRelu::new(store, rng, &format!("cam.down{i}"), in_ch, cfg.channels, (3, 3), s, (1, 1))?);
            in_ch = cfg.channels;
        }
        let mut up = Vec::new();
        for (i, &s) in strides.iter().rev().enumerate() {
            let deconv = ConvTranspose2d::new(
                store,
                rng,
                &format!("cam.up{i}"),
                cfg.channels,
                cfg.channels,
                (3, 3),
                s,
                (1, 1),
                (s.0 - 1, s.1 - 1),
            )?;
            up.push((deconv, BatchNorm2d::new(store, &format!("cam.up{i}.bn"), cfg.channels)?));
        }
        let head = Conv2d::new(store, rng, "cam.head", cfg.channels, cfg.max_t, (1, 1), (1, 1), (0, 0))?;
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            fuse,
            down,
            up,
            head,
        })
    }

    pub fn config(&self) -> &CamConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Width divisor required of the final feature map.
    pub fn width_quantum(&self) -> usize {
        1 << (self.cfg.layers / 2)
    }

    /// Cascade every stage down to the deepest one and sum.
    pub fn fuse_multiscale(&self, g: &mut Graph, store: &ParamStore, stages: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = stages.split_first() else {
            return Err(config_err!("fuse_multiscale needs at least one stage"));
        };
        if rest.len() != self.fuse.len() {
            return Err(config_err!(
                "CAM built for {} stages, got {}",
                self.fuse.len() + 1,
                stages.len()
            ));
        }
        let mut x = first;
        for (conv, &next) in self.fuse.iter().zip(rest) {
            let y = conv.forward(g, store, x)?;
            if g.shape(y) != g.shape(next) {
                return Err(config_err!(
                    "cascaded stage {:?} does not match next stage {:?}",
                    g.shape(y),
                    g.shape(next)
                ));
            }
            x = g.add(y, next)?;
        }
        Ok(x)
    }

    /// Sigmoid activations of the U-net head before channel normalization.
    pub fn raw_maps(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var> {
        self.raw_maps_for(g, store, fused, self.cfg.max_t)
    }

    /// [`raw_maps`](Self::raw_maps) restricted to the first `steps` channels.
    /// Channels are computed independently, so these equal the leading
    /// channels of the full output.
    pub fn raw_maps_for(&self, g: &mut Graph, store: &ParamStore, fused: Var, steps: usize) -> Result<Var> {
        if steps == 0 || steps > self.cfg.max_t {
            return Err(config_err!("{steps} attention maps requested, CAM has {}", self.cfg.max_t));
        }
        let w = g.shape(fused)[3];
        if w % self.width_quantum() != 0 {
            return Err(config_err!(
                "feature width {w} must be a multiple of {} for CAM depth {}",
                self.width_quantum(),
                self.cfg.layers
            ));
        }
        let mut x = fused;
        let mut skips = Vec::with_capacity(self.down.len());
        for conv in &self.down {
            x = conv.forward(g, store, x)?;
            skips.push(x);
        }
        let depth = self.up.len();
        for (i, (deconv, bn)) in self.up.iter().enumerate() {
            let y = deconv.forward(g, store, x)?;
            let y = bn.forward(g, store, y)?;
            x = g.relu(y);
            if i + 1 < depth {
                x = g.add(x, skips[depth - 2 - i])?;
            }
        }
        let logits = if steps == self.cfg.max_t {
            self.head.forward(g, store, x)?
        } else {
            let c = self.cfg.channels;
            let w = g.param(store, self.head.w);
            let w = g.reshape(w, &[1, self.cfg.max_t * c])?;
            let w = g.slice_cols(w, 0, steps * c)?;
            let w = g.reshape(w, &[steps, c, 1, 1])?;
            let b = match self.head.b {
                Some(id) => {
                    let b = g.param(store, id);
                    let b = g.reshape(b, &[1, self.cfg.max_t])?;
                    let b = g.slice_cols(b, 0, steps)?;
                    Some(g.reshape(b, &[steps])?)
                }
                None => None,
            };
            g.conv2d(x, w, b, (1, 1), (0, 0))?
        };
        Ok(g.sigmoid(logits))
    }

    /// Attention maps `[n, maxT, h, w]`; each channel sums to one over space.
    pub fn compute_attention(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var> {
        let raw = self.raw_maps(g, store, fused)?;
        g.channel_normalize(raw)
    }

    /// Fuse the stages and compute attention in one call.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, stages: &[Var]) -> Result<Var> {
        self.forward_steps(g, store, stages, self.cfg.max_t)
    }

    /// Attention maps for the first `steps` decoding steps only.
    pub fn forward_steps(&self, g: &mut Graph, store: &ParamStore, stages: &[Var], steps: usize) -> Result<Var> {
        let fused = self.fuse_multiscale(g, store, stages)?;
        let raw = self.raw_maps_for(g, store, fused, steps)?;
        g.channel_normalize(raw)
    }
}
