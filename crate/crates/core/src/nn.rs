//! Neural-net building blocks on top of the autodiff tape.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng as _;

use crate::autodiff::{NodeId, Param, Tape};
use crate::impl_module_via_fields;
use crate::rng::Rng;

/// Xavier/Glorot uniform init: U(-limit, limit), limit = sqrt(6/(fan_in+fan_out)).
pub fn xavier_uniform(
    name: impl Into<String>,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Param {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let value = ArrayD::from_shape_fn(IxDyn(shape), |_| (rng.gen::<f64>() * 2.0 - 1.0) * limit);
    Param::new(name, value)
}

pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Param {
    Param::new(name, ArrayD::zeros(IxDyn(shape)))
}

pub fn ones(name: impl Into<String>, shape: &[usize]) -> Param {
    Param::new(name, ArrayD::from_elem(IxDyn(shape), 1.0))
}

/// Dense layer; `w` is (d_in, d_out) so forward is `x @ w + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        Linear {
            w: xavier_uniform(format!("{name}.w"), &[d_in, d_out], d_in, d_out, rng),
            b: bias.then(|| zeros(format!("{name}.b"), &[d_out])),
        }
    }

    /// Square identity map (zero bias when present).
    pub fn identity(name: &str, d: usize, bias: bool) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), Array2::<f64>::eye(d).into_dyn()),
            b: bias.then(|| zeros(format!("{name}.b"), &[d])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.value.shape()[1]
    }

    /// `x`: [n, d_in] -> [n, d_out].
    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let w = t.param(&self.w);
        let y = t.matmul(x, w);
        match &self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

impl_module_via_fields!(Linear, w, b);

/// Per-row layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: ones(format!("{name}.gamma"), &[d]),
            beta: zeros(format!("{name}.beta"), &[d]),
            eps: 1e-5,
        }
    }

    /// `x`: [n, d] normalized along the last axis.
    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let mu = t.mean_axis(x, 1);
        let neg_mu = t.neg(mu);
        let xc = t.add_col(x, neg_mu);
        let sq = t.square(xc);
        let var = t.mean_axis(sq, 1);
        let std = t.sqrt_eps(var, self.eps);
        let inv = t.recip(std);
        let xn = t.mul_col(xc, inv);
        let gamma = t.param(&self.gamma);
        let beta = t.param(&self.beta);
        let scaled = t.mul_row(xn, gamma);
        t.add_row(scaled, beta)
    }
}

impl_module_via_fields!(LayerNorm, gamma, beta);

/// 2-d convolution layer with bias, NCHW.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        Conv2dLayer {
            w: xavier_uniform(format!("{name}.w"), &[c_out, c_in, k, k], fan_in, fan_out, rng),
            b: zeros(format!("{name}.b"), &[c_out]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let w = t.param(&self.w);
        let b = t.param(&self.b);
        let y = t.conv2d(x, w, self.stride, self.pad);
        t.add_chan(y, b)
    }
}

impl_module_via_fields!(Conv2dLayer, w, b);

/// Batch normalization over (batch, height, width) per channel.
///
/// Training mode normalizes by batch statistics (differentiable through
/// them) and updates running statistics as a side effect; eval mode uses
/// the stored running statistics as constants. Running variance keeps
/// the same biased (1/N) convention as the batch statistic.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, c: usize) -> Self {
        BatchNorm2d {
            gamma: ones(format!("{name}.gamma"), &[c]),
            beta: zeros(format!("{name}.beta"), &[c]),
            running_mean: Param::buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[c]))),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                ArrayD::from_elem(IxDyn(&[c]), 1.0),
            ),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, t: &mut Tape, x: NodeId, train: bool) -> NodeId {
        if !train {
            return self.forward_eval(t, x);
        }
        let m2 = t.mean_axis(x, 3);
        let m1 = t.mean_axis(m2, 2);
        let mean = t.mean_axis(m1, 0);
        let neg_mean = t.neg(mean);
        let xc = t.add_chan(x, neg_mean);
        let sq = t.square(xc);
        let v2 = t.mean_axis(sq, 3);
        let v1 = t.mean_axis(v2, 2);
        let var = t.mean_axis(v1, 0);

        let mom = self.momentum;
        self.running_mean
            .value
            .zip_mut_with(t.value(mean), |r, &b| *r = (1.0 - mom) * *r + mom * b);
        self.running_var
            .value
            .zip_mut_with(t.value(var), |r, &b| *r = (1.0 - mom) * *r + mom * b);
        self.affine(t, x, mean, var)
    }

    /// Normalization by the stored running statistics; no state changes,
    /// so frozen-weight use needs only a shared reference.
    pub fn forward_eval(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let mean = t.constant(self.running_mean.value.clone());
        let var = t.constant(self.running_var.value.clone());
        self.affine(t, x, mean, var)
    }

    fn affine(&self, t: &mut Tape, x: NodeId, mean_id: NodeId, var_id: NodeId) -> NodeId {
        let neg_mean = t.neg(mean_id);
        let xc = t.add_chan(x, neg_mean);
        let std = t.sqrt_eps(var_id, self.eps);
        let inv = t.recip(std);
        let xn = t.mul_chan(xc, inv);
        let gamma = t.param(&self.gamma);
        let beta = t.param(&self.beta);
        let scaled = t.mul_chan(xn, gamma);
        t.add_chan(scaled, beta)
    }
}

impl_module_via_fields!(BatchNorm2d, gamma, beta, running_mean, running_var);

/// Fully-connected scalar-valued network with tanh between layers and a
/// raw (unsquashed) final output. Exposes its input gradient as tape
/// operations, so expressions like a gradient penalty stay
/// differentiable with respect to the weights.
pub struct TanhMlp {
    pub layers: Vec<Linear>,
}

impl_module_via_fields!(TanhMlp, layers);

impl TanhMlp {
    pub fn new(name: &str, d_in: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut widths = vec![d_in];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = (0..widths.len() - 1)
            .map(|i| Linear::new(&format!("{name}.l{i}"), widths[i], widths[i + 1], true, rng))
            .collect();
        TanhMlp { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    /// x: [B, d_in] -> [B, 1].
    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(t, h);
            if i + 1 < self.layers.len() {
                h = t.tanh(h);
            }
        }
        h
    }

    /// Builds grad_x of the scalar output, per row: [B, d_in]. The chain
    /// rule is written out as tape ops over the stored activations, so
    /// the result can itself be differentiated (w.r.t. the weights).
    pub fn input_gradient(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let bsz = t.value(x).shape()[0];
        let mut acts = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(t, h);
            if i + 1 < self.layers.len() {
                h = t.tanh(h);
                acts.push(h);
            }
        }
        let last = self.layers.last().unwrap();
        let w_last = t.param(&last.w);
        let wt = t.transpose(w_last);
        let ones = t.constant(ArrayD::ones(IxDyn(&[bsz, 1])));
        let mut g = t.matmul(ones, wt);
        for (layer, &act) in self.layers[..self.layers.len() - 1].iter().zip(acts.iter()).rev() {
            let sq = t.square(act);
            let one = t.constant(ArrayD::ones(t.value(sq).shape().to_vec()));
            let dtanh = t.sub(one, sq);
            let gated = t.mul(g, dtanh);
            let w = t.param(&layer.w);
            let wt = t.transpose(w);
            g = t.matmul(gated, wt);
        }
        g
    }
}

/// Classic sinusoidal position table: row `pos`, even columns
/// sin(pos/10000^(2i/d)), odd columns cos of the same angle.
pub fn sinusoidal_encoding(max_len: usize, d: usize) -> Array2<f64> {
    assert!(d % 2 == 0, "positional encoding needs even d");
    let mut pe = Array2::<f64>::zeros((max_len, d));
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[(pos, 2 * i)] = angle.sin();
            pe[(pos, 2 * i + 1)] = angle.cos();
        }
    }
    pe
}

/// Mean over unmasked time steps. `x`: [b, t, d]; `mask[b][t]` is 1.0 for
/// real positions and 0.0 for padding. Every row must keep at least one
/// real position (callers validate).
pub fn masked_mean_pool(t: &mut Tape, x: NodeId, mask: &Array2<f64>) -> NodeId {
    let (b, tt) = mask.dim();
    let d = t.value(x).shape()[2];
    assert_eq!(t.value(x).shape(), &[b, tt, d]);

    let counts = mask.sum_axis(ndarray::Axis(1));
    assert!(
        counts.iter().all(|&c| c > 0.0),
        "masked_mean_pool: empty row"
    );

    let mask3 = ArrayD::from_shape_fn(IxDyn(&[b, tt, d]), |ix| mask[(ix[0], ix[1])]);
    let m = t.constant(mask3);
    let xm = t.mul(x, m);
    let summed = t.sum_axis(xm, 1);
    let inv = t.constant(counts.mapv(|c| 1.0 / c).into_dyn());
    let invn = t.reshape(inv, &[b]);
    t.mul_col(summed, invn)
}
