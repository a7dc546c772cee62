//! Parameterised building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let w = store.add_he_uniform(
            format!("{name}.w"),
            &[out_ch, in_ch, kernel.0, kernel.1],
            fan_in,
            rng,
        )?;
        let b = store.add_zeros(format!("{name}.b"), &[out_ch])?;
        Ok(Self {
            w,
            b: Some(b),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution; the kernel is stored `[in_ch, out_ch, kh, kw]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_pad: (usize, usize),
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        out_pad: (usize, usize),
    ) -> Result<Self> {
        // each output sees about in_ch·kh·kw / (sh·sw) taps
        let fan_in = (in_ch * kernel.0 * kernel.1 / (stride.0 * stride.1)).max(1);
        let w = store.add_he_uniform(
            format!("{name}.w"),
            &[in_ch, out_ch, kernel.0, kernel.1],
            fan_in,
            rng,
        )?;
        let b = store.add_zeros(format!("{name}.b"), &[out_ch])?;
        Ok(Self {
            w,
            b: Some(b),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            out_pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv_transpose2d(x, w, b, self.stride, self.pad, self.out_pad)
    }
}

/// Batch normalization over `[n, c, ..]` with running statistics kept in the
/// store as `<name>.mean` and `<name>.var`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub channels: usize,
}

/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add_zeros(format!("{name}.beta"), &[channels])?,
            mean: store.add_zeros(format!("{name}.mean"), &[channels])?,
            var: store.add(format!("{name}.var"), Tensor::full(&[channels], 1.0))?,
            channels,
        })
    }

    /// Batch statistics when the graph is training, running statistics otherwise.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let running = (!g.training()).then(|| (store.get(self.mean).data(), store.get(self.var).data()));
        g.batch_norm(x, gamma, beta, running, (self.mean, self.var))
    }
}

/// Convolution, batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let conv = Conv2d::new(store, rng, name, in_ch, out_ch, kernel, stride, pad)?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_ch)?;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), &[out_dim, in_dim], in_dim, rng)?;
        let b = if bias {
            Some(store.add_uniform(format!("{name}.b"), &[out_dim], in_dim, rng)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        rows: usize,
        dim: usize,
    ) -> Result<Self> {
        let table = store.add_uniform(format!("{name}.table"), &[rows, dim], 1, rng)?;
        Ok(Self { table, rows, dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, idx: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.embedding(t, idx)
    }
}

/// Gated recurrent unit parameters.
///
/// Gate rows are stacked reset, update, candidate in both weight matrices:
/// `input_weights [3h, input]`, `recurrent_weights [3h, h]`, and the two
/// bias vectors `[3h]`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub input_weights: ParamId,
    pub recurrent_weights: ParamId,
    pub input_bias: ParamId,
    pub recurrent_bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_size: usize,
        hidden_size: usize,
    ) -> Result<Self> {
        let h3 = 3 * hidden_size;
        Ok(Self {
            input_weights: store.add_uniform(
                format!("{name}.w_ih"),
                &[h3, input_size],
                hidden_size,
                rng,
            )?,
            recurrent_weights: store.add_uniform(
                format!("{name}.w_hh"),
                &[h3, hidden_size],
                hidden_size,
                rng,
            )?,
            input_bias: store.add_uniform(format!("{name}.b_ih"), &[h3], hidden_size, rng)?,
            recurrent_bias: store.add_uniform(format!("{name}.b_hh"), &[h3], hidden_size, rng)?,
            input_size,
            hidden_size,
        })
    }

    /// One GRU update for a batch: `x [n, input]`, `h_prev [n, hidden]`.
    ///
    /// ```text
    /// r = σ(W_ir x + b_ir + W_hr h + b_hr)
    /// z = σ(W_iz x + b_iz + W_hz h + b_hz)
    /// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
    /// h' = (1 - z) ⊙ n + z ⊙ h
    /// ```
    pub fn cell(&self, g: &mut Graph, store: &ParamStore, x: Var, h_prev: Var) -> Result<Var> {
        let hs = self.hidden_size;
        if g.shape(x).get(1) != Some(&self.input_size) || g.shape(h_prev).get(1) != Some(&hs) {
            return Err(shape_err!(
                "gru cell expects x [n,{}] and h [n,{hs}], got {:?} and {:?}",
                self.input_size,
                g.shape(x),
                g.shape(h_prev)
            ));
        }
        let (w_ih, w_hh) = (
            g.param(store, self.input_weights),
            g.param(store, self.recurrent_weights),
        );
        let (b_ih, b_hh) = (
            g.param(store, self.input_bias),
            g.param(store, self.recurrent_bias),
        );
        let gi = g.linear(x, w_ih, Some(b_ih))?;
        let gh = g.linear(h_prev, w_hh, Some(b_hh))?;
        let (gi_r, gh_r) = (g.slice_cols(gi, 0, hs)?, g.slice_cols(gh, 0, hs)?);
        let (gi_z, gh_z) = (g.slice_cols(gi, hs, hs)?, g.slice_cols(gh, hs, hs)?);
        let (gi_n, gh_n) = (g.slice_cols(gi, 2 * hs, hs)?, g.slice_cols(gh, 2 * hs, hs)?);
        let r = g.add(gi_r, gh_r)?;
        let r = g.sigmoid(r);
        let z = g.add(gi_z, gh_z)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, gh_n)?;
        let n = g.add(gi_n, rn)?;
        let n = g.tanh(n);
        let diff = g.sub(h_prev, n)?;
        let keep = g.mul(z, diff)?;
        g.add(n, keep)
    }
}
