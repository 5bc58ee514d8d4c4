use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use crate::error::{Error, Result};

/// Role of a network inside the model bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetKind {
    Encoder,
    Decoder,
    Energy,
    Flow,
    PriorFlow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Silu,
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "silu" | "swish" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}`"
            ))),
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Geometry of a square-kernel 2-D convolution over a CHW image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_height: usize,
    pub in_width: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    /// Unfolds one CHW image into a `(C·k·k, H_out·W_out)` patch matrix.
    fn im2col(&self, image: &[f64], cols: &mut Array2<f64>) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let (h, w, k) = (self.in_height as isize, self.in_width as isize, self.kernel);
        cols.fill(0.0);
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj >= w {
                                continue;
                            }
                            cols[[row, oi * wo + oj]] = image
                                [(c * self.in_height + ii as usize) * self.in_width + jj as usize];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back onto the image.
    fn col2im_add(&self, cols: &Array2<f64>, image: &mut [f64]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let (h, w, k) = (self.in_height as isize, self.in_width as isize, self.kernel);
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj >= w {
                                continue;
                            }
                            image[(c * self.in_height + ii as usize) * self.in_width
                                + jj as usize] += cols[[row, oi * wo + oj]];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Layer {
    /// `y = x W + b` with `W` stored as `[input, output]`.
    Dense {
        input: usize,
        output: usize,
        weight: String,
        bias: String,
    },
    /// Convolution with `W` stored as `[out_channels, in_channels·k·k]`.
    Conv2d {
        geometry: ConvGeometry,
        weight: String,
        bias: String,
    },
    /// Nearest-neighbour 2× upsampling of a CHW image.
    Upsample2x {
        channels: usize,
        height: usize,
        width: usize,
    },
    Activation {
        activation: Activation,
    },
}

impl Layer {
    fn in_len(&self) -> Option<usize> {
        match self {
            Layer::Dense { input, .. } => Some(*input),
            Layer::Conv2d { geometry, .. } => Some(geometry.in_len()),
            Layer::Upsample2x {
                channels,
                height,
                width,
            } => Some(channels * height * width),
            Layer::Activation { .. } => None,
        }
    }

    fn out_len(&self) -> Option<usize> {
        match self {
            Layer::Dense { output, .. } => Some(*output),
            Layer::Conv2d { geometry, .. } => Some(geometry.out_len()),
            Layer::Upsample2x {
                channels,
                height,
                width,
            } => Some(channels * height * width * 4),
            Layer::Activation { .. } => None,
        }
    }
}

/// Architecture of one differentiable function family.
///
/// Activations are carried as a batch-major `Array2` with each row the
/// flattened (CHW for images) example. Parameters live outside the spec in a
/// [`ParameterSet`], keyed by the names recorded in the layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetKind,
    pub activation: Activation,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Per-layer inputs recorded by a forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
}

impl NetworkSpec {
    /// Fully connected stack: `input → hidden… → output`, activation after
    /// every hidden layer and none on the output.
    pub fn mlp(
        kind: NetKind,
        prefix: &str,
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for (i, &width) in hidden
            .iter()
            .chain(std::iter::once(&output_dim))
            .enumerate()
        {
            if i > 0 {
                layers.push(Layer::Activation { activation });
            }
            layers.push(Layer::Dense {
                input: prev,
                output: width,
                weight: format!("{prefix}dense{i}.weight"),
                bias: format!("{prefix}dense{i}.bias"),
            });
            prev = width;
        }
        Self {
            kind,
            activation,
            input_shape: vec![input_dim],
            output_shape: vec![output_dim],
            layers,
        }
    }

    /// Strided-convolution stack for images: each stage is a 4×4, stride-2
    /// convolution halving the resolution, followed by a dense head.
    pub fn conv_encoder(
        kind: NetKind,
        prefix: &str,
        image: [usize; 3],
        channels: &[usize],
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let [c, mut h, mut w] = image;
        let mut layers = Vec::new();
        let mut in_ch = c;
        for (i, &ch) in channels.iter().enumerate() {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "conv stage {i} needs even resolution, got {h}x{w}"
                )));
            }
            let geometry = ConvGeometry {
                in_channels: in_ch,
                out_channels: ch,
                kernel: 4,
                stride: 2,
                padding: 1,
                in_height: h,
                in_width: w,
            };
            layers.push(Layer::Conv2d {
                geometry,
                weight: format!("{prefix}conv{i}.weight"),
                bias: format!("{prefix}conv{i}.bias"),
            });
            layers.push(Layer::Activation { activation });
            in_ch = ch;
            h /= 2;
            w /= 2;
        }
        layers.push(Layer::Dense {
            input: in_ch * h * w,
            output: output_dim,
            weight: format!("{prefix}head.weight"),
            bias: format!("{prefix}head.bias"),
        });
        Ok(Self {
            kind,
            activation,
            input_shape: image.to_vec(),
            output_shape: vec![output_dim],
            layers,
        })
    }

    /// Mirror of [`conv_encoder`](Self::conv_encoder): a dense stem to the
    /// coarsest feature map, then (2× upsample, 3×3 conv) stages. `channels`
    /// runs from coarse to fine; the last stage maps to the image channels.
    pub fn conv_decoder(
        prefix: &str,
        latent_dim: usize,
        image: [usize; 3],
        channels: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        let [c, h, w] = image;
        let stages = channels.len();
        let scale = 1usize << stages;
        if stages == 0 || h % scale != 0 || w % scale != 0 {
            return Err(Error::InvalidArgument(format!(
                "decoder with {stages} upsampling stages cannot produce {h}x{w}"
            )));
        }
        let (mut ch, mut hh, mut ww) = (channels[0], h / scale, w / scale);
        let mut layers = vec![
            Layer::Dense {
                input: latent_dim,
                output: ch * hh * ww,
                weight: format!("{prefix}stem.weight"),
                bias: format!("{prefix}stem.bias"),
            },
            Layer::Activation { activation },
        ];
        for i in 0..stages {
            let next = channels.get(i + 1).copied().unwrap_or(c);
            layers.push(Layer::Upsample2x {
                channels: ch,
                height: hh,
                width: ww,
            });
            hh *= 2;
            ww *= 2;
            layers.push(Layer::Conv2d {
                geometry: ConvGeometry {
                    in_channels: ch,
                    out_channels: next,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    in_height: hh,
                    in_width: ww,
                },
                weight: format!("{prefix}conv{i}.weight"),
                bias: format!("{prefix}conv{i}.bias"),
            });
            if i + 1 < stages {
                layers.push(Layer::Activation { activation });
            }
            ch = next;
        }
        Ok(Self {
            kind: NetKind::Decoder,
            activation,
            input_shape: vec![latent_dim],
            output_shape: image.to_vec(),
            layers,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    /// Checks that consecutive layers chain and the end shapes match the
    /// declared input and output shapes.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_len();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(n) = layer.in_len() {
                if n != width {
                    return Err(Error::shape(format!("layer {i} input"), &[n], &[width]));
                }
            }
            if let Some(n) = layer.out_len() {
                width = n;
            }
        }
        if width != self.output_len() {
            return Err(Error::shape(
                "network output",
                &[self.output_len()],
                &[width],
            ));
        }
        if self.kind == NetKind::Energy && self.output_len() != 1 {
            return Err(Error::shape("energy output", &[1], &self.output_shape));
        }
        Ok(())
    }

    /// Fresh parameters: fan-in scaled Gaussian weights, zero biases. The last
    /// parametrised layer of energy and flow networks starts at zero, giving
    /// a flat energy and identity couplings.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterSet> {
        self.validate()?;
        let last = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense { .. } | Layer::Conv2d { .. }));
        let zero_last = matches!(
            self.kind,
            NetKind::Energy | NetKind::Flow | NetKind::PriorFlow
        );
        let mut params = ParameterSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (shape, fan_in, weight, bias, out) = match layer {
                Layer::Dense {
                    input,
                    output,
                    weight,
                    bias,
                } => (vec![*input, *output], *input, weight, bias, *output),
                Layer::Conv2d {
                    geometry,
                    weight,
                    bias,
                } => (
                    vec![geometry.out_channels, geometry.patch_len()],
                    geometry.patch_len(),
                    weight,
                    bias,
                    geometry.out_channels,
                ),
                _ => continue,
            };
            let std = if zero_last && Some(i) == last {
                0.0
            } else {
                1.0 / (fan_in.max(1) as f64).sqrt()
            };
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            params.insert(
                weight.clone(),
                ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap(),
            )?;
            params.insert(bias.clone(), ParameterSet::zeros(&[out]))?;
        }
        Ok(params)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_len() {
            return Err(Error::shape(
                format!("{:?} network input", self.kind),
                &self.input_shape,
                &[x.ncols()],
            ));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParameterSet, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer_forward(layer, params, h.view())?;
        }
        Ok(h)
    }

    /// Forward pass that records what `backward` needs.
    pub fn forward_tape(
        &self,
        params: &ParameterSet,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let next = layer_forward(layer, params, h.view())?;
            inputs.push(h);
            h = next;
        }
        Ok((h, Tape { inputs }))
    }

    /// Reverse pass. Returns the cotangent of the input; parameter cotangents
    /// are accumulated into `grads` when given.
    pub fn backward(
        &self,
        params: &ParameterSet,
        tape: &Tape,
        dout: Array2<f64>,
        mut grads: Option<&mut ParameterSet>,
    ) -> Result<Array2<f64>> {
        if dout.ncols() != self.output_len() {
            return Err(Error::shape(
                "output cotangent",
                &[self.output_len()],
                &[dout.ncols()],
            ));
        }
        let mut d = dout;
        for (layer, input) in self.layers.iter().zip(&tape.inputs).rev() {
            d = layer_backward(layer, params, input, d, grads.as_deref_mut())?;
        }
        Ok(d)
    }

    /// Vector-Jacobian product with respect to the input only.
    pub fn input_vjp(
        &self,
        params: &ParameterSet,
        x: ArrayView2<f64>,
        dout: Array2<f64>,
    ) -> Result<Array2<f64>> {
        let (_, tape) = self.forward_tape(params, x)?;
        self.backward(params, &tape, dout, None)
    }
}

fn view2<'a>(params: &'a ParameterSet, name: &str) -> Result<ndarray::ArrayView2<'a, f64>> {
    params
        .require(name)?
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::ParameterMismatch(format!("`{name}` is not a matrix")))
}

fn view1<'a>(params: &'a ParameterSet, name: &str) -> Result<ndarray::ArrayView1<'a, f64>> {
    params
        .require(name)?
        .view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::ParameterMismatch(format!("`{name}` is not a vector")))
}

fn layer_forward(layer: &Layer, params: &ParameterSet, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    match layer {
        Layer::Dense { weight, bias, .. } => {
            let w = view2(params, weight)?;
            let b = view1(params, bias)?;
            if w.nrows() != x.ncols() {
                return Err(Error::shape(
                    format!("`{weight}` rows"),
                    &[x.ncols()],
                    &[w.nrows()],
                ));
            }
            let mut y = x.dot(&w);
            y += &b;
            Ok(y)
        }
        Layer::Conv2d {
            geometry,
            weight,
            bias,
        } => {
            let w = view2(params, weight)?;
            let b = view1(params, bias)?;
            let g = geometry;
            let spatial = g.out_height() * g.out_width();
            let mut y = Array2::zeros((x.nrows(), g.out_len()));
            let mut cols = Array2::zeros((g.patch_len(), spatial));
            for (xi, mut yi) in x.outer_iter().zip(y.outer_iter_mut()) {
                let xi = xi.as_standard_layout();
                g.im2col(xi.as_slice().unwrap(), &mut cols);
                let mut out = w.dot(&cols);
                for (mut row, bv) in out.outer_iter_mut().zip(b.iter()) {
                    row += *bv;
                }
                for (dst, src) in yi.iter_mut().zip(out.iter()) {
                    *dst = *src;
                }
            }
            Ok(y)
        }
        Layer::Upsample2x {
            channels,
            height,
            width,
        } => {
            let (c, h, w) = (*channels, *height, *width);
            let mut y = Array2::zeros((x.nrows(), c * h * w * 4));
            for (xi, mut yi) in x.outer_iter().zip(y.outer_iter_mut()) {
                for ch in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            yi[(ch * 2 * h + i) * 2 * w + j] = xi[(ch * h + i / 2) * w + j / 2];
                        }
                    }
                }
            }
            Ok(y)
        }
        Layer::Activation { activation } => {
            let a = *activation;
            Ok(x.mapv(|v| a.apply(v)))
        }
    }
}

fn layer_backward(
    layer: &Layer,
    params: &ParameterSet,
    input: &Array2<f64>,
    dout: Array2<f64>,
    grads: Option<&mut ParameterSet>,
) -> Result<Array2<f64>> {
    match layer {
        Layer::Dense { weight, bias, .. } => {
            let w = view2(params, weight)?;
            if let Some(g) = grads {
                let dw = input.t().dot(&dout);
                *g.require_mut(weight)? += &dw.into_dyn();
                let db = dout.sum_axis(Axis(0));
                *g.require_mut(bias)? += &db.into_dyn();
            }
            Ok(dout.dot(&w.t()))
        }
        Layer::Conv2d {
            geometry,
            weight,
            bias,
        } => {
            let w = view2(params, weight)?;
            let g = geometry;
            let spatial = g.out_height() * g.out_width();
            let mut dx = Array2::zeros((input.nrows(), g.in_len()));
            let mut cols = Array2::zeros((g.patch_len(), spatial));
            let mut dw = Array2::<f64>::zeros(w.raw_dim());
            let mut db = ndarray::Array1::<f64>::zeros(g.out_channels);
            let want = grads.is_some();
            for ((xi, di), mut dxi) in input
                .outer_iter()
                .zip(dout.outer_iter())
                .zip(dx.outer_iter_mut())
            {
                let di = di
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((g.out_channels, spatial))
                    .expect("conv output cotangent reshape");
                if want {
                    let xi = xi.as_standard_layout();
                    g.im2col(xi.as_slice().unwrap(), &mut cols);
                    dw += &di.dot(&cols.t());
                    db += &di.sum_axis(Axis(1));
                }
                let dcols = w.t().dot(&di);
                g.col2im_add(&dcols, dxi.as_slice_mut().unwrap());
            }
            if let Some(gr) = grads {
                *gr.require_mut(weight)? += &dw.into_dyn();
                *gr.require_mut(bias)? += &db.into_dyn();
            }
            Ok(dx)
        }
        Layer::Upsample2x {
            channels,
            height,
            width,
        } => {
            let (c, h, w) = (*channels, *height, *width);
            let mut dx = Array2::zeros((dout.nrows(), c * h * w));
            for (di, mut dxi) in dout.outer_iter().zip(dx.outer_iter_mut()) {
                for ch in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dxi[(ch * h + i / 2) * w + j / 2] += di[(ch * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
            }
            Ok(dx)
        }
        Layer::Activation { activation } => {
            let a = *activation;
            let mut d = dout;
            d.zip_mut_with(input, |dv, &xv| *dv *= a.derivative(xv));
            Ok(d)
        }
    }
}
