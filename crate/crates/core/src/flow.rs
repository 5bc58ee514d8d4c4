//! Affine-coupling normalizing flow with a standard-normal base.
//!
//! `forward` maps data `x` to base coordinates `z` and accumulates
//! `log|det ∂z/∂x|`, so `log p(x) = log N(z; 0, I) + logdet`. Coupling `i`
//! leaves one half of the coordinates unchanged and uses them to predict a
//! log-scale and shift for the other half; halves alternate between layers.
//! Log-scales pass through `B·tanh(raw/B)` so every layer's Jacobian stays
//! bounded.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nets::{Activation, NetKind, NetworkSpec, ParameterSet, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingFlow {
    dim: usize,
    scale_bound: f64,
    conditioners: Vec<NetworkSpec>,
    pub params: ParameterSet,
}

struct LayerTape {
    net_tape: Tape,
    raw: Array2<f64>,
    /// The transformed half as it entered the layer (data side).
    x_b: Array2<f64>,
    scale: Array2<f64>,
}

/// Intermediate values of a forward (data → base) pass.
pub struct FlowTape {
    layers: Vec<LayerTape>,
}

/// Intermediate values of an inverse (base → data) pass.
pub struct InverseTape {
    layers: Vec<LayerTape>,
}

impl CouplingFlow {
    pub fn new<R: Rng + ?Sized>(
        kind: NetKind,
        dim: usize,
        num_layers: usize,
        hidden: &[usize],
        activation: Activation,
        scale_bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "coupling flow needs dimension ≥ 2, got {dim}"
            )));
        }
        if !(scale_bound > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale bound must be positive, got {scale_bound}"
            )));
        }
        let mut conditioners = Vec::with_capacity(num_layers);
        let mut params = ParameterSet::new();
        for i in 0..num_layers {
            let (a, b) = Self::halves(dim, i);
            let spec = NetworkSpec::mlp(
                kind,
                &format!("coupling{i}."),
                a.len(),
                hidden,
                2 * b.len(),
                activation,
            );
            params.extend_prefixed("", &spec.init(rng)?)?;
            conditioners.push(spec);
        }
        Ok(Self {
            dim,
            scale_bound,
            conditioners,
            params,
        })
    }

    /// Rebuilds a flow from stored parts (checkpoint loading).
    pub fn from_parts(
        dim: usize,
        scale_bound: f64,
        conditioners: Vec<NetworkSpec>,
        params: ParameterSet,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "coupling flow needs dimension ≥ 2, got {dim}"
            )));
        }
        for (i, spec) in conditioners.iter().enumerate() {
            let (a, b) = Self::halves(dim, i);
            if spec.input_len() != a.len() || spec.output_len() != 2 * b.len() {
                return Err(Error::shape(
                    format!("coupling {i} conditioner"),
                    &[a.len(), 2 * b.len()],
                    &[spec.input_len(), spec.output_len()],
                ));
            }
            spec.forward(&params, Array2::zeros((1, a.len())).view())?;
        }
        Ok(Self {
            dim,
            scale_bound,
            conditioners,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale_bound(&self) -> f64 {
        self.scale_bound
    }

    pub fn num_layers(&self) -> usize {
        self.conditioners.len()
    }

    pub fn conditioners(&self) -> &[NetworkSpec] {
        &self.conditioners
    }

    /// (conditioning indices, transformed indices) for layer `i`.
    fn halves(dim: usize, i: usize) -> (Vec<usize>, Vec<usize>) {
        let h = dim / 2;
        let first: Vec<usize> = (0..h).collect();
        let second: Vec<usize> = (h..dim).collect();
        if i % 2 == 0 {
            (first, second)
        } else {
            (second, first)
        }
    }

    fn check(&self, x: &ArrayView2<f64>, what: &str) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::shape(what, &[self.dim], &[x.ncols()]));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(what));
        }
        Ok(())
    }

    fn bounded(&self, raw: &Array2<f64>) -> Array2<f64> {
        let b = self.scale_bound;
        raw.mapv(|r| b * (r / b).tanh())
    }

    fn run_conditioner(
        &self,
        i: usize,
        cond: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, Tape)> {
        let (out, tape) = self.conditioners[i].forward_tape(&self.params, cond.view())?;
        let nb = out.ncols() / 2;
        let raw = out.slice(s![.., ..nb]).to_owned();
        let shift = out.slice(s![.., nb..]).to_owned();
        let scale = self.bounded(&raw);
        Ok((raw, scale, shift, tape))
    }

    fn finite_or(&self, m: &Array2<f64>, layer: usize) -> Result<()> {
        if m.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::non_finite(format!("flow coupling layer {layer}")))
        }
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, FlowTape)> {
        self.check(&x, "flow input")?;
        let mut h = x.to_owned();
        let mut logdet = Array1::zeros(x.nrows());
        let mut layers = Vec::with_capacity(self.num_layers());
        for i in 0..self.num_layers() {
            let (a, b) = Self::halves(self.dim, i);
            let cond = h.select(Axis(1), &a);
            let x_b = h.select(Axis(1), &b);
            let (raw, scale, shift, net_tape) = self.run_conditioner(i, &cond)?;
            let z_b = &x_b * &scale.mapv(f64::exp) + &shift;
            self.finite_or(&z_b, i)?;
            for (k, &col) in b.iter().enumerate() {
                h.column_mut(col).assign(&z_b.column(k));
            }
            logdet += &scale.sum_axis(Axis(1));
            layers.push(LayerTape {
                net_tape,
                raw,
                x_b,
                scale,
            });
        }
        Ok((h, logdet, FlowTape { layers }))
    }

    /// `(z, log|det ∂z/∂x|)`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let (z, logdet, _) = self.forward_tape(x)?;
        Ok((z, logdet))
    }

    /// Reverse pass of [`forward_tape`](Self::forward_tape) given cotangents
    /// on `z` and on the per-example log-determinant. Returns the cotangent
    /// on `x`; parameter cotangents are accumulated into `grads`.
    pub fn forward_backward(
        &self,
        tape: &FlowTape,
        dz: Array2<f64>,
        dlogdet: &Array1<f64>,
        mut grads: Option<&mut ParameterSet>,
    ) -> Result<Array2<f64>> {
        let mut d = dz;
        for (i, lt) in tape.layers.iter().enumerate().rev() {
            let (a, b) = Self::halves(self.dim, i);
            let dz_b = d.select(Axis(1), &b);
            let exp_s = lt.scale.mapv(f64::exp);
            let dx_b = &dz_b * &exp_s;
            // ds = dz_b ⊙ x_b ⊙ e^s + dlogdet
            let mut ds = &dz_b * &lt.x_b * &exp_s;
            for (mut row, &w) in ds.outer_iter_mut().zip(dlogdet.iter()) {
                row += w;
            }
            let dout = self.conditioner_cotangent(&lt.raw, ds, dz_b);
            let dcond = self.conditioners[i].backward(
                &self.params,
                &lt.net_tape,
                dout,
                grads.as_deref_mut(),
            )?;
            for (k, &col) in b.iter().enumerate() {
                d.column_mut(col).assign(&dx_b.column(k));
            }
            for (k, &col) in a.iter().enumerate() {
                let mut c = d.column_mut(col);
                c += &dcond.column(k);
            }
        }
        Ok(d)
    }

    /// Packs (d scale, d shift) into the conditioner output cotangent,
    /// pulling the scale part back through the bounded nonlinearity.
    fn conditioner_cotangent(
        &self,
        raw: &Array2<f64>,
        dscale: Array2<f64>,
        dshift: Array2<f64>,
    ) -> Array2<f64> {
        let nb = raw.ncols();
        let bnd = self.scale_bound;
        let mut dout = Array2::zeros((raw.nrows(), 2 * nb));
        let mut draw = dscale;
        draw.zip_mut_with(raw, |dv, &r| {
            let t = (r / bnd).tanh();
            *dv *= 1.0 - t * t;
        });
        dout.slice_mut(s![.., ..nb]).assign(&draw);
        dout.slice_mut(s![.., nb..]).assign(&dshift);
        dout
    }

    pub fn inverse_tape(&self, z: ArrayView2<f64>) -> Result<(Array2<f64>, InverseTape)> {
        self.check(&z, "flow base sample")?;
        let mut h = z.to_owned();
        let mut layers = Vec::with_capacity(self.num_layers());
        for i in (0..self.num_layers()).rev() {
            let (a, b) = Self::halves(self.dim, i);
            let cond = h.select(Axis(1), &a);
            let z_b = h.select(Axis(1), &b);
            let (raw, scale, shift, net_tape) = self.run_conditioner(i, &cond)?;
            let x_b = (&z_b - &shift) * &scale.mapv(|v| (-v).exp());
            self.finite_or(&x_b, i)?;
            for (k, &col) in b.iter().enumerate() {
                h.column_mut(col).assign(&x_b.column(k));
            }
            layers.push(LayerTape {
                net_tape,
                raw,
                x_b,
                scale,
            });
        }
        layers.reverse();
        Ok((h, InverseTape { layers }))
    }

    /// Exact inverse of [`forward`](Self::forward).
    pub fn inverse(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.inverse_tape(z)?.0)
    }

    /// Reverse pass of [`inverse_tape`](Self::inverse_tape): cotangent on `x`
    /// in, cotangent on `z` out, parameter cotangents accumulated.
    pub fn inverse_backward(
        &self,
        tape: &InverseTape,
        dx: Array2<f64>,
        mut grads: Option<&mut ParameterSet>,
    ) -> Result<Array2<f64>> {
        let mut d = dx;
        for (i, lt) in tape.layers.iter().enumerate() {
            let (a, b) = Self::halves(self.dim, i);
            let dx_b = d.select(Axis(1), &b);
            let inv_s = lt.scale.mapv(|v| (-v).exp());
            // x_b = (z_b − t)·e^{−s}
            let dz_b = &dx_b * &inv_s;
            let dshift = -&dz_b;
            let dscale = -(&dx_b * &lt.x_b);
            let dout = self.conditioner_cotangent(&lt.raw, dscale, dshift);
            let dcond = self.conditioners[i].backward(
                &self.params,
                &lt.net_tape,
                dout,
                grads.as_deref_mut(),
            )?;
            for (k, &col) in b.iter().enumerate() {
                d.column_mut(col).assign(&dz_b.column(k));
            }
            for (k, &col) in a.iter().enumerate() {
                let mut c = d.column_mut(col);
                c += &dcond.column(k);
            }
        }
        Ok(d)
    }

    pub fn log_prob(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (z, logdet) = self.forward(x)?;
        Ok(standard_normal_log_density(&z) + logdet)
    }

    /// Log-density plus the gradients of `Σ_i weights_i · log p(x_i)` with
    /// respect to `x` and, when `want_params`, the flow parameters.
    pub fn weighted_log_prob_grads(
        &self,
        x: ArrayView2<f64>,
        weights: &Array1<f64>,
        want_params: bool,
    ) -> Result<(Array1<f64>, Array2<f64>, Option<ParameterSet>)> {
        if weights.len() != x.nrows() {
            return Err(Error::shape(
                "log-prob weights",
                &[x.nrows()],
                &[weights.len()],
            ));
        }
        let (z, logdet, tape) = self.forward_tape(x)?;
        let logp = standard_normal_log_density(&z) + &logdet;
        let mut dz = -&z;
        for (mut row, &wi) in dz.outer_iter_mut().zip(weights.iter()) {
            row *= wi;
        }
        let mut grads = want_params.then(|| self.params.zeros_like());
        let dx = self.forward_backward(&tape, dz, weights, grads.as_mut())?;
        Ok((logp, dx, grads))
    }

    /// Log-density and its per-example gradient in `x`.
    pub fn log_prob_input_grad(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let w = Array1::ones(x.nrows());
        let (logp, dx, _) = self.weighted_log_prob_grads(x, &w, false)?;
        Ok((logp, dx))
    }

    /// Mean negative log-likelihood and its parameter gradient.
    pub fn nll_and_grad(&self, x: ArrayView2<f64>) -> Result<(f64, ParameterSet)> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let w = Array1::from_elem(n, -1.0 / n as f64);
        let (logp, _, grads) = self.weighted_log_prob_grads(x, &w, true)?;
        Ok((-logp.mean().unwrap(), grads.expect("weights given")))
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let z = Array2::from_shape_simple_fn((n, self.dim), || rng.sample(StandardNormal));
        let x = self.inverse(z.view())?;
        Ok((x, z))
    }
}

/// Per-row log-density of `N(0, I)`.
pub fn standard_normal_log_density(z: &Array2<f64>) -> Array1<f64> {
    let d = z.ncols() as f64;
    z.map_axis(Axis(1), |row| {
        -0.5 * row.dot(&row) - 0.5 * d * (2.0 * PI).ln()
    })
}

/// Negative log-likelihood per example under a flow.
pub fn flow_nll(flow: &CouplingFlow, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    Ok(-flow.log_prob(x)?)
}
