//! Residual CNN feature encoder.

use rand::Rng;

use crate::config::{EncoderConfig, Mode};
use crate::error::{config_err, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm2d, Conv2d, ConvBnRelu};
use crate::params::ParamStore;

/// Residual block: 1×1 conv then 3×3 conv (carrying the stride),
/// with an identity shortcut or a strided 1×1 projection when shapes change.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: ConvBnRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResBlock {
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: (usize, usize),
    ) -> Result<Self> {
        let conv1 = ConvBnRelu::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, (1, 1), (1, 1), (0, 0))?;
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, (3, 3), stride, (1, 1))?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.conv2.bn"), out_ch)?;
        let shortcut = if in_ch != out_ch || stride != (1, 1) {
            Some((
                Conv2d::new(store, rng, &format!("{name}.proj"), in_ch, out_ch, (1, 1), stride, (0, 0))?,
                BatchNorm2d::new(store, &format!("{name}.proj.bn"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            bn2,
            shortcut,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, store, x)?;
        let y = self.conv2.forward(g, store, y)?;
        let y = self.bn2.forward(g, store, y)?;
        let s = match &self.shortcut {
            Some((p, bn)) => {
                let s = p.forward(g, store, x)?;
                bn.forward(g, store, s)?
            }
            None => x,
        };
        let y = g.add(y, s)?;
        Ok(g.relu(y))
    }
}

/// Output of [`Encoder::encode`].
#[derive(Clone, Debug)]
pub struct EncodedFeatures {
    /// Final feature map `[n, C, H/r_h, W/r_w]` (height 1 in 1-D mode).
    pub final_map: Var,
    /// Every stage output, shallowest first. In 1-D mode with a reduction
    /// layer the reduced map is appended as the last entry.
    pub stages: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stem: ConvBnRelu,
    stages: Vec<Vec<ResBlock>>,
    reduce: Option<ConvBnRelu>,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &EncoderConfig,
        mode: Mode,
    ) -> Result<Self> {
        cfg.validate()?;
        let s0 = cfg.stages[0];
        let stem = ConvBnRelu::new(store, rng, "enc.stem", cfg.in_channels, s0.channels, (3, 3), s0.ratio, (1, 1))?;
        let mut stages = Vec::new();
        let mut in_ch = s0.channels;
        for (si, stage) in cfg.stages.iter().enumerate().skip(1) {
            let mut blocks = Vec::with_capacity(stage.blocks);
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.ratio } else { (1, 1) };
                blocks.push(ResBlock::new(
                    store,
                    rng,
                    &format!("enc.s{si}.b{bi}"),
                    in_ch,
                    stage.channels,
                    stride,
                )?);
                in_ch = stage.channels;
            }
            stages.push(blocks);
        }
        let h = cfg.stage_output_height();
        let reduce = if mode == Mode::OneD && h > 1 {
            Some(ConvBnRelu::new(store, rng, "enc.reduce", in_ch, in_ch, (h, 1), (1, 1), (0, 0))?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            reduce,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.out_channels()
    }

    /// `[n, channels]` widths and spatial sizes of each stage for an input width.
    pub fn stage_shapes(&self, width: usize) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.cfg.input_height, width);
        let mut out = Vec::new();
        for s in &self.cfg.stages {
            h = h.div_ceil(s.ratio.0);
            w = w.div_ceil(s.ratio.1);
            out.push((s.channels, h, w));
        }
        if self.reduce.is_some() {
            out.push((self.out_channels(), 1, w));
        }
        out
    }

    /// Map `[n, c, H, W]` images to the final feature map and all stage outputs.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<EncodedFeatures> {
        let s = g.shape(x).to_vec();
        let [_, c, h, w] = s[..] else {
            return Err(shape_err!("encoder input must be [n,c,h,w], got {s:?}"));
        };
        if c != self.cfg.in_channels {
            return Err(config_err!("encoder expects {} channels, got {c}", self.cfg.in_channels));
        }
        if h != self.cfg.input_height {
            return Err(config_err!(
                "image height {h} differs from configured height {}",
                self.cfg.input_height
            ));
        }
        if w > self.cfg.max_width {
            return Err(config_err!(
                "image width {w} exceeds max width {}; rescale first",
                self.cfg.max_width
            ));
        }
        let mut stages = Vec::with_capacity(self.stages.len() + 2);
        let mut y = self.stem.forward(g, store, x)?;
        stages.push(y);
        for blocks in &self.stages {
            for b in blocks {
                y = b.forward(g, store, y)?;
            }
            stages.push(y);
        }
        if let Some(r) = &self.reduce {
            y = reduce_to_1d(g, store, r, y)?;
            stages.push(y);
        }
        Ok(EncodedFeatures {
            final_map: y,
            stages,
        })
    }
}

/// Collapse feature height to 1 with a full-height `h×1` convolution.
/// A map that is already one row high passes through unchanged.
pub fn reduce_to_1d(g: &mut Graph, store: &ParamStore, layer: &ConvBnRelu, f: Var) -> Result<Var> {
    let h = g.shape(f)[2];
    if h == 1 {
        return Ok(f);
    }
    if layer.conv.kernel != (h, 1) {
        return Err(config_err!(
            "reduction kernel {:?} does not match feature height {h}",
            layer.conv.kernel
        ));
    }
    layer.forward(g, store, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encode_shape(cfg: &EncoderConfig, mode: Mode, w: usize) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, &mut rng, cfg, mode).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, cfg.input_height, w]));
        let f = enc.encode(&mut g, &store, x).unwrap();
        (
            g.shape(f.final_map).to_vec(),
            f.stages.iter().map(|s| g.shape(*s).to_vec()).collect(),
        )
    }

    #[test]
    fn desk_config_shapes() {
        let (f, stages) = encode_shape(&EncoderConfig::desk(), Mode::TwoD, 128);
        assert_eq!(f, vec![1, 128, 4, 32]);
        assert_eq!(stages.len(), 4);
        assert_eq!(stages[0], vec![1, 16, 32, 128]);
    }

    #[test]
    fn desk_config_1d_reduces_height() {
        let (f, stages) = encode_shape(&EncoderConfig::desk(), Mode::OneD, 128);
        assert_eq!(f, vec![1, 128, 1, 32]);
        assert_eq!(stages.len(), 5);
    }

    #[test]
    fn width_limit_enforced() {
        let cfg = EncoderConfig::toy();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg, Mode::OneD).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 16, cfg.max_width + 4]));
        assert!(enc.encode(&mut g, &store, x).is_err());
    }

    #[test]
    fn reduce_identity_at_height_one() {
        let mut store = ParamStore::new();
        let conv = ConvBnRelu::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "r", 2, 2, (3, 1), (1, 1), (0, 0)).unwrap();
        let mut g = Graph::new();
        let f = g.input(Tensor::full(&[1, 2, 1, 5], 0.5));
        let y = reduce_to_1d(&mut g, &store, &conv, f).unwrap();
        assert_eq!(y, f);
        let f3 = g.input(Tensor::full(&[1, 2, 3, 5], 0.5));
        let y3 = reduce_to_1d(&mut g, &store, &conv, f3).unwrap();
        assert_eq!(g.shape(y3), &[1, 2, 1, 5]);
    }
}
