//! Energy-based correction model and its contrastive training loss.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nets::{Network, ParameterSet};

/// Anything that assigns a scalar energy per row and can differentiate it.
pub trait EnergyFunction {
    fn energy(&self, x: ArrayView2<f64>) -> Result<Array1<f64>>;

    /// Energies and `∇_x E` per example.
    fn energy_and_grad(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)>;
}

fn check_finite(e: &Array1<f64>) -> Result<()> {
    match e.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteEnergy { index }),
        None => Ok(()),
    }
}

/// Scalar energy network `E_ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ebm {
    pub net: Network,
}

/// Loss value, diagnostics and parameter gradient of one EBM step.
#[derive(Clone, Debug)]
pub struct EbmLoss {
    pub loss: f64,
    pub e_real: f64,
    pub e_neg: f64,
    pub grads: ParameterSet,
}

impl Ebm {
    pub fn new(net: Network) -> Result<Self> {
        if net.spec.output_len() != 1 {
            return Err(Error::shape("energy output", &[1], &net.spec.output_shape));
        }
        Ok(Self { net })
    }

    /// `mean E(real) − mean E(neg)`; negatives are treated as constants.
    pub fn training_loss(&self, real: ArrayView2<f64>, neg: ArrayView2<f64>) -> Result<f64> {
        let er = self.energy(real)?;
        let en = self.energy(neg)?;
        Ok(er.mean().unwrap_or(0.0) - en.mean().unwrap_or(0.0))
    }

    pub fn training_loss_and_grad(
        &self,
        real: ArrayView2<f64>,
        neg: ArrayView2<f64>,
    ) -> Result<EbmLoss> {
        if real.nrows() == 0 || neg.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "EBM loss needs non-empty real and negative batches".into(),
            ));
        }
        let mut grads = self.net.params.zeros_like();
        let mut side = |x: ArrayView2<f64>, sign: f64| -> Result<f64> {
            let (out, tape) = self.net.forward_tape(x)?;
            let e = out.column(0).to_owned();
            check_finite(&e)?;
            let d = Array2::from_elem((x.nrows(), 1), sign / x.nrows() as f64);
            self.net.backward(&tape, d, Some(&mut grads))?;
            Ok(e.mean().unwrap())
        };
        let e_real = side(real, 1.0)?;
        let e_neg = side(neg, -1.0)?;
        Ok(EbmLoss {
            loss: e_real - e_neg,
            e_real,
            e_neg,
            grads,
        })
    }
}

impl EnergyFunction for Ebm {
    fn energy(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let e = self.net.forward(x)?.index_axis_move(Axis(1), 0);
        check_finite(&e)?;
        Ok(e)
    }

    fn energy_and_grad(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let (out, tape) = self.net.forward_tape(x)?;
        let e = out.index_axis_move(Axis(1), 0);
        check_finite(&e)?;
        let dx = self
            .net
            .backward(&tape, Array2::ones((x.nrows(), 1)), None)?;
        Ok((e, dx))
    }
}

/// `E(u) = ½ κ ‖u − c‖²`, used as a closed-form stand-in in tests and benches.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticEnergy {
    pub center: Array1<f64>,
    pub curvature: f64,
}

impl EnergyFunction for QuadraticEnergy {
    fn energy(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.energy_and_grad(x)?.0)
    }

    fn energy_and_grad(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        if x.ncols() != self.center.len() {
            return Err(Error::shape(
                "quadratic energy input",
                &[self.center.len()],
                &[x.ncols()],
            ));
        }
        let d = &x - &self.center;
        let e = d.map_axis(Axis(1), |r| 0.5 * self.curvature * r.dot(&r));
        check_finite(&e)?;
        Ok((e, d * self.curvature))
    }
}

/// Flat energy: the unconditional chain then becomes pure diffusion.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroEnergy;

impl EnergyFunction for ZeroEnergy {
    fn energy(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(Array1::zeros(x.nrows()))
    }

    fn energy_and_grad(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        Ok((Array1::zeros(x.nrows()), Array2::zeros(x.raw_dim())))
    }
}

/// `E(x̃) + ‖x̃ − x‖² / (2σ²)` per example.
pub fn conditional_energy<E: EnergyFunction + ?Sized>(
    energy: &E,
    x_tilde: ArrayView2<f64>,
    anchor: ArrayView2<f64>,
    sigma: f64,
) -> Result<Array1<f64>> {
    Ok(conditional_energy_and_grad(energy, x_tilde, anchor, sigma)?.0)
}

pub fn conditional_energy_and_grad<E: EnergyFunction + ?Sized>(
    energy: &E,
    x_tilde: ArrayView2<f64>,
    anchor: ArrayView2<f64>,
    sigma: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "conditional sigma must be positive, got {sigma}"
        )));
    }
    if x_tilde.dim() != anchor.dim() {
        return Err(Error::shape(
            "conditional anchor",
            &[x_tilde.nrows(), x_tilde.ncols()],
            &[anchor.nrows(), anchor.ncols()],
        ));
    }
    let (e, g) = energy.energy_and_grad(x_tilde)?;
    let d = &x_tilde - &anchor;
    let inv = 1.0 / (sigma * sigma);
    let u = e + d.map_axis(Axis(1), |r| 0.5 * inv * r.dot(&r));
    Ok((u, g + d * inv))
}
