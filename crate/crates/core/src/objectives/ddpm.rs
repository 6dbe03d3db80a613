//! Expected DDPM loss of the quadratic denoiser at one diffusion time.
//!
//! For a clean patch `x`, noise `ε ~ N(0, I)` and `x_t = αx + βε`, the
//! per-patch loss is `E‖f(W, x_t) − ε‖²`. With `a_r = ⟨w_r, x⟩`,
//! `G = WWᵀ`, `n_r = G_rr` and `c_r = α²a_r² + β²n_r`, Gaussian moment
//! identities give
//!
//! ```text
//! E‖f − ε‖² = d + (1/m) Σ_{r,r'} G_rr' (c_r c_r' + 2β⁴ G_rr'² + 4α²β² a_r a_r' G_rr')
//!               − (4αβ/√m) Σ_r n_r a_r
//! ```
//!
//! where the `r = r'` terms form the single-neuron part and the `r ≠ r'`
//! terms the cross-neuron part. The dataset loss averages over all `2n`
//! patches and therefore equals `d` at `W = 0`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{denoise_batch, DenoiserParams};
use crate::objectives::schedule::NoiseSchedule;
use crate::rng::Rng;

/// Deliberate corruptions of the analytic gradient, used to check that the
/// gradient checker catches errors.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the single-neuron `−(4αβ/√m) n_r a_r` contribution.
    FlipSingleNeuronCrossTerm,
}

fn check(params: &DenoiserParams, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    if params.d() != ds.d() {
        return Err(Error::shape(ds.d(), params.d()));
    }
    Ok(())
}

struct Pieces {
    g: Array2<f64>,
    gg: Array2<f64>,
    nr: Array1<f64>,
    a: Array2<f64>,
    c: Array2<f64>,
    cg: Array2<f64>,
}

fn pieces(w: &Array2<f64>, x: ArrayView2<f64>, s: &NoiseSchedule) -> Pieces {
    let (a2, b2) = (s.alpha * s.alpha, s.beta * s.beta);
    let g = w.dot(&w.t());
    let gg = &g * &g;
    let nr = g.diag().to_owned();
    let a = x.dot(&w.t());
    let c = a.mapv(|v| a2 * v * v) + &(&nr * b2);
    let cg = c.dot(&g);
    Pieces { g, gg, nr, a, c, cg }
}

fn loss_from(p: &Pieces, m: usize, d: usize, n_patches: usize, s: &NoiseSchedule) -> f64 {
    let (al, be) = (s.alpha, s.beta);
    let mf = m as f64;
    let pf = n_patches as f64;
    let t1 = (&p.cg * &p.c).sum();
    let t2 = pf * 2.0 * be.powi(4) * (&p.gg * &p.g).sum();
    let t3 = 4.0 * al * al * be * be * (&p.a.dot(&p.gg) * &p.a).sum();
    let t4 = -4.0 * al * be / mf.sqrt() * p.a.sum_axis(Axis(0)).dot(&p.nr);
    (pf * d as f64 + (t1 + t2 + t3) / mf + t4) / pf
}

fn grad_from(p: &Pieces, w: &Array2<f64>, x: ArrayView2<f64>, s: &NoiseSchedule, fault: Option<Fault>) -> Array2<f64> {
    let (al, be) = (s.alpha, s.beta);
    let (a2, b2) = (al * al, be * be);
    let m = w.nrows() as f64;
    let pf = x.nrows() as f64;
    let lin = if fault == Some(Fault::FlipSingleNeuronCrossTerm) { -1.0 } else { 1.0 } * 4.0 * al * be / m.sqrt();

    // Terms proportional to W.
    let mut mm = p.c.t().dot(&p.c) * (2.0 / m);
    mm.scaled_add(12.0 * be.powi(4) * pf / m, &p.gg);
    mm.scaled_add(16.0 * a2 * b2 / m, &(p.a.t().dot(&p.a) * &p.g));
    let diag = p.cg.sum_axis(Axis(0)) * (4.0 * b2 / m) - p.a.sum_axis(Axis(0)) * (2.0 * lin);
    for (r, v) in diag.iter().enumerate() {
        mm[[r, r]] += v;
    }
    // Terms proportional to the data patches.
    let mut b = &p.cg * &p.a * (4.0 * a2 / m);
    b.scaled_add(8.0 * a2 * b2 / m, &p.a.dot(&p.gg));
    let mut grad = mm.dot(w) + b.t().dot(&x);
    let xsum = x.sum_axis(Axis(0));
    for (mut row, &nr) in grad.rows_mut().into_iter().zip(p.nr.iter()) {
        row.scaled_add(-lin * nr, &xsum);
    }
    grad / pf
}

/// Closed-form expectation of the DDPM loss over the diffusion noise.
pub fn ddpm_expected_loss(params: &DenoiserParams, ds: &Dataset, sched: &NoiseSchedule) -> Result<f64> {
    check(params, ds)?;
    let x = ds.patches();
    let p = pieces(&params.w, x, sched);
    Ok(loss_from(&p, params.m(), ds.d(), x.nrows(), sched))
}

/// Exact gradient of [`ddpm_expected_loss`].
pub fn ddpm_expected_grad(params: &DenoiserParams, ds: &Dataset, sched: &NoiseSchedule) -> Result<DenoiserParams> {
    Ok(ddpm_expected_loss_grad(params, ds, sched)?.1)
}

pub fn ddpm_expected_loss_grad(
    params: &DenoiserParams,
    ds: &Dataset,
    sched: &NoiseSchedule,
) -> Result<(f64, DenoiserParams)> {
    ddpm_expected_loss_grad_with(params, ds, sched, None)
}

#[doc(hidden)]
pub fn ddpm_expected_loss_grad_with(
    params: &DenoiserParams,
    ds: &Dataset,
    sched: &NoiseSchedule,
    fault: Option<Fault>,
) -> Result<(f64, DenoiserParams)> {
    check(params, ds)?;
    let x = ds.patches();
    let p = pieces(&params.w, x, sched);
    let loss = loss_from(&p, params.m(), ds.d(), x.nrows(), sched);
    let grad = grad_from(&p, &params.w, x, sched, fault);
    Ok((loss, DenoiserParams::new(grad)))
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_err: f64,
}

const CHUNK: usize = 512;

/// Draw `k` independent noise matrices for all patches at once.
fn noise_chunk(k: usize, n_patches: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((k * n_patches, d), || rng.sample::<f64, _>(StandardNormal))
}

fn mc_impl(
    params: &DenoiserParams,
    ds: &Dataset,
    sched: &NoiseSchedule,
    n_eps: usize,
    rng: &mut Rng,
    want_grad: bool,
) -> Result<(McEstimate, Option<DenoiserParams>)> {
    check(params, ds)?;
    if n_eps < 2 {
        return Err(Error::config(format!("n_eps must be >= 2, got {n_eps}")));
    }
    let w = &params.w;
    let x = ds.patches();
    let (np, d) = x.dim();
    let m = w.nrows() as f64;
    let mut grad = want_grad.then(|| Array2::<f64>::zeros(w.dim()));
    let mut values = Vec::with_capacity(n_eps);
    let mut done = 0;
    while done < n_eps {
        let k = CHUNK.min(n_eps - done);
        let eps = noise_chunk(k, np, d, rng);
        let mut xt = eps.clone() * sched.beta;
        for b in 0..k {
            let mut blk = xt.slice_mut(ndarray::s![b * np..(b + 1) * np, ..]);
            blk.scaled_add(sched.alpha, &x);
        }
        let err = denoise_batch(w, xt.view()) - &eps;
        let sq = (&err * &err).sum_axis(Axis(1));
        for b in 0..k {
            values.push(sq.slice(ndarray::s![b * np..(b + 1) * np]).sum() / np as f64);
        }
        if let Some(g) = grad.as_mut() {
            // ∇_{w_r} ‖f(z) − ε‖² = (2/√m) (s_r² e + 2 s_r ⟨w_r, e⟩ z), s = Wz.
            let s = xt.dot(&w.t());
            let q = err.dot(&w.t());
            let s2 = s.mapv(|v| v * v);
            let sq2 = &s * &q * 2.0;
            let contrib = s2.t().dot(&err) + sq2.t().dot(&xt);
            g.scaled_add(2.0 / m.sqrt(), &contrib);
        }
        done += k;
    }
    let nf = n_eps as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    let est = McEstimate {
        estimate: mean,
        std_err: (var / nf).sqrt(),
    };
    let grad = grad.map(|g| DenoiserParams::new(g / (nf * np as f64)));
    Ok((est, grad))
}

/// `(1/2n) Σ_i` mean over `n_eps` draws of `Σ_p ‖f(W, αx_p + βε_p) − ε_p‖²`,
/// with independent noise for every patch and draw.
pub fn ddpm_mc_loss(
    params: &DenoiserParams,
    ds: &Dataset,
    sched: &NoiseSchedule,
    n_eps: usize,
    rng: &mut Rng,
) -> Result<McEstimate> {
    Ok(mc_impl(params, ds, sched, n_eps, rng, false)?.0)
}

/// Monte-Carlo loss and the gradient of the same sampled objective
/// (common random numbers).
pub fn ddpm_mc_loss_grad(
    params: &DenoiserParams,
    ds: &Dataset,
    sched: &NoiseSchedule,
    n_eps: usize,
    rng: &mut Rng,
) -> Result<(McEstimate, DenoiserParams)> {
    let (est, g) = mc_impl(params, ds, sched, n_eps, rng, true)?;
    Ok((est, g.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticConfig};
    use crate::models::{init_denoiser, InitConfig, ParamSet};
    use crate::objectives::gradcheck::{finite_diff_grad, max_rel_err, FdStep};
    use crate::objectives::schedule::make_schedule;
    use crate::rng::{stream, Stream};

    /// Double loop over neuron pairs using the Gaussian moment identities
    /// `E[s_r² s_r'²] = c_r c_r' + 2β⁴G² + 4α²β² a_r a_r' G` (in units where the
    /// means are `α a`) and `E[s_r² ⟨w_r, ε⟩] = 2αβ a_r n_r`.
    fn naive_loss(w: &Array2<f64>, ds: &Dataset, s: &NoiseSchedule) -> f64 {
        let (m, d) = w.dim();
        let (al, be) = (s.alpha, s.beta);
        let x = ds.patches();
        let mut total = 0.0;
        for p in 0..x.nrows() {
            let xp = x.row(p);
            let mut lp = d as f64;
            for r in 0..m {
                let ar = w.row(r).dot(&xp);
                let nr = w.row(r).dot(&w.row(r));
                lp -= 2.0 / (m as f64).sqrt() * 2.0 * al * be * ar * nr;
                for q in 0..m {
                    let aq = w.row(q).dot(&xp);
                    let nq = w.row(q).dot(&w.row(q));
                    let g = w.row(r).dot(&w.row(q));
                    let mr = al * ar;
                    let mq = al * aq;
                    let e4 = (mr * mr + be * be * nr) * (mq * mq + be * be * nq)
                        + 2.0 * be.powi(4) * g * g
                        + 4.0 * mr * mq * be * be * g;
                    lp += g * e4 / m as f64;
                }
            }
            total += lp;
        }
        total / x.nrows() as f64
    }

    fn instance(seed: u64) -> (DenoiserParams, Dataset, NoiseSchedule) {
        let ds = generate_dataset(&SyntheticConfig::new(10, 4, 2.0, 1.0, seed)).unwrap();
        let p = init_denoiser(3, 10, &InitConfig { sigma0: 0.3, seed }).unwrap();
        (p, ds, make_schedule(0.2).unwrap())
    }

    #[test]
    fn zero_weights_give_dimension() {
        let (_, ds, s) = instance(0);
        let l = ddpm_expected_loss(&DenoiserParams::zeros(5, 10), &ds, &s).unwrap();
        assert_eq!(l, 10.0);
        let g = ddpm_expected_grad(&DenoiserParams::zeros(5, 10), &ds, &s).unwrap();
        assert_eq!(g.frobenius_norm(), 0.0);
    }

    #[test]
    fn matches_naive_double_loop() {
        for seed in 0..5 {
            let (p, ds, s) = instance(seed);
            let fast = ddpm_expected_loss(&p, &ds, &s).unwrap();
            let slow = naive_loss(&p.w, &ds, &s);
            assert!((fast - slow).abs() <= 1e-12 * slow.abs(), "{fast} vs {slow}");
        }
    }

    #[test]
    fn single_neuron_has_no_cross_terms() {
        let (p, ds, s) = instance(3);
        let one = DenoiserParams::new(p.w.slice(ndarray::s![0..1, ..]).to_owned());
        let w = one.w.row(0);
        let (al, be) = (s.alpha, s.beta);
        let nr = w.dot(&w);
        let mut l1 = 0.0;
        for xp in ds.patches().rows() {
            let a = w.dot(&xp);
            let c = al * al * a * a + be * be * nr;
            l1 += nr * (c * c + 2.0 * be.powi(4) * nr * nr + 4.0 * al * al * be * be * a * a * nr)
                - 4.0 * al * be * nr * a;
        }
        let expected = 10.0 + l1 / (2 * ds.n()) as f64;
        let got = ddpm_expected_loss(&one, &ds, &s).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (p, ds, s) = instance(seed);
            let g = ddpm_expected_grad(&p, &ds, &s).unwrap();
            let fd = finite_diff_grad(|q| ddpm_expected_loss(q, &ds, &s).unwrap(), &p, FdStep::Scaled(1e-5));
            assert!(max_rel_err(&g, &fd) < 1e-6);
        }
    }

    #[test]
    fn fault_is_detectable() {
        let (p, ds, s) = instance(1);
        let (_, g) = ddpm_expected_loss_grad_with(&p, &ds, &s, Some(Fault::FlipSingleNeuronCrossTerm)).unwrap();
        let fd = finite_diff_grad(|q| ddpm_expected_loss(q, &ds, &s).unwrap(), &p, FdStep::Scaled(1e-5));
        assert!(max_rel_err(&g, &fd) > 1e-3);
    }

    #[test]
    fn monte_carlo_at_zero_weights() {
        let (_, ds, s) = instance(0);
        let p = DenoiserParams::zeros(2, 10);
        let est = ddpm_mc_loss(&p, &ds, &s, 10_000, &mut stream(0, Stream::Diffusion)).unwrap();
        assert!((est.estimate - 10.0).abs() <= 3.0 * est.std_err, "{est:?}");

        let two = ddpm_mc_loss(&p, &ds, &s, 2, &mut stream(0, Stream::Diffusion)).unwrap();
        assert!(two.std_err.is_finite() && two.std_err > 0.0);
        assert!(ddpm_mc_loss(&p, &ds, &s, 1, &mut stream(0, Stream::Diffusion)).is_err());
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        let (p, ds, s) = instance(2);
        let exact = ddpm_expected_loss(&p, &ds, &s).unwrap();
        let est = ddpm_mc_loss(&p, &ds, &s, 50_000, &mut stream(1, Stream::Diffusion)).unwrap();
        assert!((est.estimate - exact).abs() <= 3.0 * est.std_err, "{est:?} vs {exact}");
    }

    #[test]
    fn monte_carlo_gradient_is_unbiased() {
        let (p, ds, s) = instance(4);
        let exact = ddpm_expected_grad(&p, &ds, &s).unwrap();
        let (_, g) = ddpm_mc_loss_grad(&p, &ds, &s, 100_000, &mut stream(2, Stream::Diffusion)).unwrap();
        let diff = (&g.w - &exact.w).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        let scale = exact.w.mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(diff < 0.05 * scale, "diff {diff} scale {scale}");
    }

    #[test]
    fn monte_carlo_gradient_matches_its_own_finite_differences() {
        // Common random numbers: the sampled objective is a smooth function of W.
        let (p, ds, s) = instance(5);
        let (_, g) = ddpm_mc_loss_grad(&p, &ds, &s, 200, &mut stream(3, Stream::Diffusion)).unwrap();
        let fd = finite_diff_grad(
            |q| {
                ddpm_mc_loss(q, &ds, &s, 200, &mut stream(3, Stream::Diffusion))
                    .unwrap()
                    .estimate
            },
            &p,
            FdStep::Scaled(1e-5),
        );
        assert!(max_rel_err(&g, &fd) < 1e-6);
    }
}
