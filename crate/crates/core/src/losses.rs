//! Training objectives.
//!
//! Per-sample squared norms are summed over all elements of a sample and
//! averaged over the batch. Reductions run in f64.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Gamma, ModelBundle};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub perceptual: f64,
    pub disc: f64,
    pub gen_adv: f64,
    pub regress_prior: f64,
    pub regress_cycle: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,perceptual,disc,gen_adv,regress_prior,regress_cycle,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.perceptual, self.disc, self.gen_adv, self.regress_prior, self.regress_cycle, self.total
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<(u64, Self)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return None;
        }
        let v = |i: usize| f[i].parse::<f64>().ok();
        Some((
            f[0].parse().ok()?,
            Self {
                perceptual: v(1)?,
                disc: v(2)?,
                gen_adv: v(3)?,
                regress_prior: v(4)?,
                regress_cycle: v(5)?,
                total: v(6)?,
            },
        ))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<usize> {
    if a.dims() != b.dims() || a.rank() == 0 {
        return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    let n = a.dims()[0];
    if n == 0 {
        return Err(Error::Shape(format!("{what}: empty batch")));
    }
    Ok(n)
}

/// `(1/N) Σ_i ‖a_i − b_i‖²` over the leading axis.
pub fn batch_squared_error(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = same_shape(a, b, "squared error")?;
    let d = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?;
    Ok((d.sqr()?.sum_all()? / n as f64)?)
}

/// Distance between reconstructed and input images in feature space.
pub fn perceptual_loss(gamma: &Gamma, x_rec: &Tensor, x: &Tensor) -> Result<Tensor> {
    same_shape(x_rec, x, "perceptual loss")?;
    let target = gamma.features(&x.detach())?.detach();
    batch_squared_error(&gamma.features(x_rec)?, &target)
}

/// Discriminator objective: prior skeletons are pushed toward 0 and
/// predicted skeletons toward 1.
pub fn disc_loss(d_prior: &Tensor, d_pred: &Tensor) -> Result<Tensor> {
    if d_prior.elem_count() == 0 || d_pred.elem_count() == 0 {
        return Err(Error::Shape("adversarial loss needs non-empty score batches".into()));
    }
    let prior = d_prior.to_dtype(DType::F64)?.sqr()?.mean_all()?;
    let pred = d_pred.to_dtype(DType::F64)?.affine(-1.0, 1.0)?.sqr()?.mean_all()?;
    Ok((prior + pred)?)
}

/// Generator objective: predicted skeletons are pushed toward the label the
/// discriminator gives the prior (0).
pub fn gen_adv_loss(d_pred: &Tensor) -> Result<Tensor> {
    if d_pred.elem_count() == 0 {
        return Err(Error::Shape("adversarial loss needs a non-empty score batch".into()));
    }
    Ok(d_pred.to_dtype(DType::F64)?.sqr()?.mean_all()?)
}

/// `(disc, generator)` pair on the same scores.
pub fn adversarial_losses(d_prior: &Tensor, d_pred: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((disc_loss(d_prior, d_pred)?, gen_adv_loss(d_pred)?))
}

#[derive(Debug, Clone)]
pub struct RegressionTerms {
    /// regressor on prior skeleton images vs the prior poses
    pub prior: Tensor,
    /// rasterized regressed pose vs the encoder's skeleton image
    pub cycle: Tensor,
}

impl RegressionTerms {
    pub fn combined(&self, lambda: f64) -> Result<Tensor> {
        Ok((&self.prior + (&self.cycle * lambda)?)?)
    }
}

/// Both regression residuals from precomputed network outputs.
pub fn regression_terms(
    eta_on_prior: &Tensor,
    v_hat: &Tensor,
    rendered: &Tensor,
    s: &Tensor,
) -> Result<RegressionTerms> {
    Ok(RegressionTerms {
        prior: batch_squared_error(eta_on_prior, v_hat)?,
        cycle: batch_squared_error(rendered, s)?,
    })
}

/// Runs the regressor on `s_hat` and `s` and returns
/// `‖η(ŝ) − v̂‖² + λ‖β(η(s)) − s‖²` with its two parts.
pub fn regression_loss(
    bundle: &ModelBundle,
    s_hat: &Tensor,
    v_hat: &Tensor,
    s: &Tensor,
    lambda: f64,
) -> Result<(Tensor, RegressionTerms)> {
    if s_hat.dims()[1..] != s.dims()[1..] {
        return Err(Error::Raster(format!(
            "prior skeleton images {:?} and predicted skeleton images {:?} come from different raster settings",
            s_hat.dims(),
            s.dims()
        )));
    }
    let terms = regression_terms(
        &bundle.eta_forward(s_hat)?,
        v_hat,
        &bundle.beta(&bundle.eta_forward(s)?)?,
        s,
    )?;
    Ok((terms.combined(lambda)?, terms))
}

/// Logged objective `disc + regression + perceptual`; rejects non-finite parts.
pub fn total_loss(perceptual: f64, disc: f64, regression: f64, step: u64) -> Result<f64> {
    for (term, v) in [("perceptual", perceptual), ("disc", disc), ("regression", regression)] {
        if !v.is_finite() {
            return Err(Error::Divergence { term, step });
        }
    }
    Ok(disc + regression + perceptual)
}

/// Relative weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub perceptual: f64,
    pub regression: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 1.0,
            regression: 1.0,
            adversarial: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn adversarial_closed_forms() {
        let (ld, lg) = adversarial_losses(&t(&[0.0, 0.0]), &t(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(scalar(&ld), 0.0);
        assert_eq!(scalar(&lg), 1.0);
        let (ld, _) = adversarial_losses(&t(&[0.5; 4]), &t(&[0.5; 4])).unwrap();
        assert_eq!(scalar(&ld), 0.5);
        assert!(adversarial_losses(&t(&[]), &t(&[0.5])).is_err());
    }

    #[test]
    fn total_sums_and_names_divergent_term() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0).unwrap(), 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0).unwrap(), 6.0);
        match total_loss(1.0, f64::NAN, 0.0, 7) {
            Err(Error::Divergence { term, step }) => assert_eq!((term, step), ("disc", 7)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn regression_lambda_zero_and_monotone() {
        let a = Tensor::new(&[[0.1f32, 0.2], [0.3, 0.4]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[0.0f32, 0.2], [0.3, 0.0]], &Device::Cpu).unwrap();
        let terms = regression_terms(&a, &b, &a, &b).unwrap();
        let l0 = scalar(&terms.combined(0.0).unwrap());
        assert!((l0 - scalar(&terms.prior)).abs() < 1e-12);
        let l1 = scalar(&terms.combined(0.1).unwrap());
        let l2 = scalar(&terms.combined(0.2).unwrap());
        assert!(l0 < l1 && l1 < l2);
    }

    #[test]
    fn csv_row_round_trip() {
        let r = LossReport {
            perceptual: 0.1,
            disc: 0.5,
            gen_adv: 0.25,
            regress_prior: 1e-7,
            regress_cycle: 3.0,
            total: 3.6000001,
        };
        assert_eq!(LossReport::parse_csv_row(&r.csv_row(12)), Some((12, r)));
    }
}
