//! Logistic loss of the quadratic classifier.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{classifier_outputs, ClassifierParams};

/// `ℓ(z) = log(1 + e^{−z})`, evaluated without overflow.
pub fn logistic_loss(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `ℓ′(z) = −1 / (1 + e^{z})`.
pub fn logistic_loss_deriv(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

fn check(params: &ClassifierParams, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    if params.d() != ds.d() {
        return Err(Error::shape(ds.d(), params.d()));
    }
    Ok(())
}

/// Margins `y_i f(W, x_i)`.
pub fn margins(params: &ClassifierParams, ds: &Dataset) -> Array1<f64> {
    classifier_outputs(params, ds.x1(), ds.x2()) * ds.labels()
}

pub fn classification_loss(params: &ClassifierParams, ds: &Dataset) -> Result<f64> {
    check(params, ds)?;
    Ok(margins(params, ds).mapv(logistic_loss).mean().expect("non-empty"))
}

/// Block gradient `Σ_p c_p ⟨w_r, x_p⟩ x_p` for per-patch weights `c`.
fn block_grad(w: &Array2<f64>, patches: ArrayView2<f64>, c: &Array1<f64>) -> Array2<f64> {
    let mut a = patches.dot(&w.t());
    a *= &c.view().insert_axis(Axis(1));
    a.t().dot(&patches)
}

/// Empirical logistic loss and its exact gradient:
/// `∇_{w_{j,r}} = (2/(nm)) Σ_i ℓ′_i j y_i (⟨w, x1_i⟩ x1_i + ⟨w, x2_i⟩ x2_i)`.
pub fn classification_loss_grad(params: &ClassifierParams, ds: &Dataset) -> Result<(f64, ClassifierParams)> {
    check(params, ds)?;
    let n = ds.n();
    let z = margins(params, ds);
    let loss = z.mapv(logistic_loss).mean().expect("non-empty");
    let scale = 2.0 / (n as f64 * params.m() as f64);
    // Per-sample coefficient for the +1 block; the −1 block uses its negation.
    let c = z.mapv(logistic_loss_deriv) * ds.labels() * scale;
    let c2 = ndarray::concatenate(Axis(0), &[c.view(), c.view()]).expect("same length");
    let patches = ds.patches();
    let g_pos = block_grad(&params.w_pos, patches, &c2);
    let g_neg = block_grad(&params.w_neg, patches, &(-&c2));
    Ok((loss, ClassifierParams { w_pos: g_pos, w_neg: g_neg }))
}
