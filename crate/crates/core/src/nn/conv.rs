use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{invalid, Result};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, relu: bool },
    /// Non-overlapping average pooling by `factor`.
    AvgPool { factor: usize },
}

impl LayerSpec {
    pub fn conv3(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        LayerSpec::Conv { in_ch, out_ch, kernel: 3, stride, padding: 1, relu: true }
    }

    pub fn linear1x1(in_ch: usize, out_ch: usize) -> Self {
        LayerSpec::Conv { in_ch, out_ch, kernel: 1, stride: 1, padding: 0, relu: false }
    }

    fn num_params(&self) -> usize {
        match *self {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => out_ch * in_ch * kernel * kernel + out_ch,
            LayerSpec::AvgPool { .. } => 0,
        }
    }

    fn stride(&self) -> usize {
        match *self {
            LayerSpec::Conv { stride, .. } => stride,
            LayerSpec::AvgPool { factor } => factor,
        }
    }

    fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match *self {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, padding, .. } => {
                if c != in_ch {
                    return invalid(format!("conv expects {in_ch} input channels, got {c}"));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return invalid(format!("input {h}x{w} smaller than kernel {kernel}"));
                }
                Ok((out_ch, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1))
            }
            LayerSpec::AvgPool { factor } => {
                if h < factor || w < factor {
                    return invalid(format!("input {h}x{w} smaller than pooling factor {factor}"));
                }
                Ok((c, h / factor, w / factor))
            }
        }
    }
}

/// Plain feed-forward convolutional network with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet<T> {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<T>,
}

/// Activations kept for the backward pass: the input followed by every layer output.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    activations: Vec<Tensor<T>>,
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let top = in_len + pad;
    let hi = if top > k { ((top - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

impl<T: Scalar> ConvNet<T> {
    /// He-normal weights, zero biases.
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, layer) in net.layers.clone().iter().enumerate() {
            if let LayerSpec::Conv { in_ch, out_ch, kernel, .. } = *layer {
                let fan_in = (in_ch * kernel * kernel) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let n_w = out_ch * in_ch * kernel * kernel;
                let off = net.offsets[i];
                for p in &mut net.params[off..off + n_w] {
                    *p = lit(normal.sample(&mut rng));
                }
            }
        }
        Ok(net)
    }

    pub fn zeroed(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("network needs at least one layer");
        }
        for pair in layers.windows(2) {
            if let (LayerSpec::Conv { out_ch, .. }, LayerSpec::Conv { in_ch, .. }) = (pair[0], pair[1]) {
                if out_ch != in_ch {
                    return invalid(format!("layer output {out_ch} channels feeds a layer expecting {in_ch}"));
                }
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.num_params();
        }
        Ok(ConvNet { layers, offsets, params: vec![T::zero(); total] })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn stride(&self) -> usize {
        self.layers.iter().map(LayerSpec::stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match *l {
                LayerSpec::Conv { out_ch, .. } => Some(out_ch),
                LayerSpec::AvgPool { .. } => None,
            })
            .unwrap_or(3)
    }

    pub fn in_channels(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match *l {
            LayerSpec::Conv { in_ch, .. } => Some(in_ch),
            LayerSpec::AvgPool { .. } => None,
        })
    }

    /// Set the bias of output channel `ch` in layer `layer`.
    pub fn set_bias(&mut self, layer: usize, ch: usize, value: T) {
        if let LayerSpec::Conv { in_ch, out_ch, kernel, .. } = self.layers[layer] {
            let off = self.offsets[layer] + out_ch * in_ch * kernel * kernel;
            self.params[off + ch] = value;
        }
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let mut shape = x.shape();
        for l in &self.layers {
            shape = l.output_shape(shape)?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for i in 0..self.layers.len() {
            cur = self.layer_forward(i, &cur);
        }
        cur
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for i in 0..self.layers.len() {
            let next = self.layer_forward(i, activations.last().expect("input pushed"));
            activations.push(next);
        }
        let out = activations.last().expect("at least one layer").clone();
        (out, ConvCache { activations })
    }

    /// Accumulate parameter gradients into `grads` (same layout as
    /// `params`). Returns the gradient with respect to the input when
    /// `input_grad` is set.
    pub fn backward(&self, cache: &ConvCache<T>, grad_out: &Tensor<T>, grads: &mut [T], input_grad: bool) -> Option<Tensor<T>> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let need_input = i > 0 || input_grad;
            match self.layers[i] {
                LayerSpec::Conv { relu, .. } => {
                    if relu {
                        let out = &cache.activations[i + 1];
                        for (gv, ov) in g.data.iter_mut().zip(&out.data) {
                            if *ov <= T::zero() {
                                *gv = T::zero();
                            }
                        }
                    }
                    let n = self.layers[i].num_params();
                    let off = self.offsets[i];
                    let gx = self.conv_backward(i, &cache.activations[i], &g, &mut grads[off..off + n], need_input);
                    match gx {
                        Some(gx) => g = gx,
                        None => return None,
                    }
                }
                LayerSpec::AvgPool { factor } => {
                    if !need_input {
                        return None;
                    }
                    let input = &cache.activations[i];
                    let mut gx = Tensor::zeros(input.channels, input.height, input.width);
                    let inv = T::one() / lit::<T>((factor * factor) as f64);
                    for c in 0..g.channels {
                        for oy in 0..g.height {
                            for ox in 0..g.width {
                                let v = g.at(c, oy, ox) * inv;
                                for dy in 0..factor {
                                    let row = (c * gx.height + oy * factor + dy) * gx.width;
                                    for dx in 0..factor {
                                        gx.data[row + ox * factor + dx] = v;
                                    }
                                }
                            }
                        }
                    }
                    g = gx;
                }
            }
        }
        Some(g)
    }

    fn layer_forward(&self, i: usize, x: &Tensor<T>) -> Tensor<T> {
        match self.layers[i] {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, padding, relu } => {
                let (_, oh, ow) = self.layers[i].output_shape(x.shape()).expect("input shape checked");
                let off = self.offsets[i];
                let n_w = out_ch * in_ch * kernel * kernel;
                let weights = &self.params[off..off + n_w];
                let bias = &self.params[off + n_w..off + n_w + out_ch];
                let mut out = Tensor::zeros(out_ch, oh, ow);
                let (ih, iw) = (x.height, x.width);
                for oc in 0..out_ch {
                    let plane = out.plane_mut(oc);
                    plane.iter_mut().for_each(|v| *v = bias[oc]);
                    for ic in 0..in_ch {
                        let inp = x.plane(ic);
                        for ky in 0..kernel {
                            let (oy_lo, oy_hi) = valid_range(ky, padding, stride, ih, oh);
                            for kx in 0..kernel {
                                let wv = weights[((oc * in_ch + ic) * kernel + ky) * kernel + kx];
                                let (ox_lo, ox_hi) = valid_range(kx, padding, stride, iw, ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - padding;
                                    let in_row = &inp[iy * iw..(iy + 1) * iw];
                                    let out_row = &mut plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                    let ix0 = ox_lo * stride + kx - padding;
                                    if stride == 1 {
                                        let src = &in_row[ix0..ix0 + out_row.len()];
                                        for (o, s) in out_row.iter_mut().zip(src) {
                                            *o += wv * *s;
                                        }
                                    } else {
                                        for (j, o) in out_row.iter_mut().enumerate() {
                                            *o += wv * in_row[ix0 + j * stride];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if relu {
                        plane.iter_mut().for_each(|v| *v = v.max(T::zero()));
                    }
                }
                out
            }
            LayerSpec::AvgPool { factor } => {
                let (c, oh, ow) = self.layers[i].output_shape(x.shape()).expect("input shape checked");
                let mut out = Tensor::zeros(c, oh, ow);
                let inv = T::one() / lit::<T>((factor * factor) as f64);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = T::zero();
                            for dy in 0..factor {
                                for dx in 0..factor {
                                    acc += x.at(ch, oy * factor + dy, ox * factor + dx);
                                }
                            }
                            out.data[(ch * oh + oy) * ow + ox] = acc * inv;
                        }
                    }
                }
                out
            }
        }
    }

    fn conv_backward(&self, i: usize, x: &Tensor<T>, g: &Tensor<T>, grads: &mut [T], need_input: bool) -> Option<Tensor<T>> {
        let LayerSpec::Conv { in_ch, out_ch, kernel, stride, padding, .. } = self.layers[i] else {
            unreachable!("conv_backward on a pooling layer")
        };
        let off = self.offsets[i];
        let n_w = out_ch * in_ch * kernel * kernel;
        let weights = &self.params[off..off + n_w];
        let (gw, gb) = grads.split_at_mut(n_w);
        let (ih, iw) = (x.height, x.width);
        let (oh, ow) = (g.height, g.width);
        let mut gx = need_input.then(|| Tensor::zeros(in_ch, ih, iw));
        for oc in 0..out_ch {
            let gplane = g.plane(oc);
            gb[oc] += gplane.iter().copied().sum::<T>();
            for ic in 0..in_ch {
                let inp = x.plane(ic);
                for ky in 0..kernel {
                    let (oy_lo, oy_hi) = valid_range(ky, padding, stride, ih, oh);
                    for kx in 0..kernel {
                        let widx = ((oc * in_ch + ic) * kernel + ky) * kernel + kx;
                        let wv = weights[widx];
                        let (ox_lo, ox_hi) = valid_range(kx, padding, stride, iw, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let g_row = &gplane[oy * ow + ox_lo..oy * ow + ox_hi];
                            let ix0 = ox_lo * stride + kx - padding;
                            let in_row = &inp[iy * iw..(iy + 1) * iw];
                            if stride == 1 {
                                let src = &in_row[ix0..ix0 + g_row.len()];
                                for (gv, s) in g_row.iter().zip(src) {
                                    acc += *gv * *s;
                                }
                            } else {
                                for (j, gv) in g_row.iter().enumerate() {
                                    acc += *gv * in_row[ix0 + j * stride];
                                }
                            }
                            if let Some(gx) = gx.as_mut() {
                                let gx_row = &mut gx.plane_mut(ic)[iy * iw..(iy + 1) * iw];
                                if stride == 1 {
                                    let dst = &mut gx_row[ix0..ix0 + g_row.len()];
                                    for (d, gv) in dst.iter_mut().zip(g_row) {
                                        *d += wv * *gv;
                                    }
                                } else {
                                    for (j, gv) in g_row.iter().enumerate() {
                                        gx_row[ix0 + j * stride] += wv * *gv;
                                    }
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        gx
    }
}

/// Feature extractor with a declared forward/backward contract. Any network
/// satisfying it can stand in for the bundled reference convolutional net.
pub trait Backbone<T: Scalar>: Send + Sync {
    type Cache: Send;

    fn out_channels(&self) -> usize;

    /// Total downsampling factor from input pixels to output cells.
    fn stride(&self) -> usize;

    fn params(&self) -> &[T];

    fn params_mut(&mut self) -> &mut [T];

    fn check_input(&self, x: &Tensor<T>) -> Result<()>;

    fn forward(&self, x: &Tensor<T>) -> Tensor<T>;

    fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, Self::Cache);

    /// Accumulate parameter gradients for `grad_out` into `grads`.
    fn backward(&self, cache: &Self::Cache, grad_out: &Tensor<T>, grads: &mut [T]);
}

impl<T: Scalar> Backbone<T> for ConvNet<T> {
    type Cache = ConvCache<T>;

    fn out_channels(&self) -> usize {
        ConvNet::out_channels(self)
    }

    fn stride(&self) -> usize {
        ConvNet::stride(self)
    }

    fn params(&self) -> &[T] {
        ConvNet::params(self)
    }

    fn params_mut(&mut self) -> &mut [T] {
        ConvNet::params_mut(self)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        ConvNet::check_input(self, x)
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        ConvNet::forward(self, x)
    }

    fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, Self::Cache) {
        ConvNet::forward_train(self, x)
    }

    fn backward(&self, cache: &Self::Cache, grad_out: &Tensor<T>, grads: &mut [T]) {
        ConvNet::backward(self, cache, grad_out, grads, false);
    }
}
