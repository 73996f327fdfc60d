//! The denoiser stage: a per-frame rectified autoencoder that refines the
//! masker's voice estimate.
//!
//! Each frame passes independently through a bottleneck of half the bin
//! count and back out, and the reconstruction multiplies the input frame
//! (a skip connection, like the masker's). Weights are shared across time,
//! so the stage commutes with any permutation of the frames.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Denoiser weights. The bottleneck is `n_bins / 2` (rounded down).
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

impl DenoiserParams {
    /// Bottleneck width for a given bin count.
    pub fn bottleneck(n_bins: usize) -> usize {
        n_bins / 2
    }

    pub fn zeros(n_bins: usize) -> Self {
        let hidden = Self::bottleneck(n_bins);
        DenoiserParams {
            w_enc: Array2::zeros((n_bins, hidden)),
            b_enc: Array1::zeros(hidden),
            w_dec: Array2::zeros((hidden, n_bins)),
            b_dec: Array1::zeros(n_bins),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.w_enc.nrows()
    }

    fn validate(&self) -> Result<()> {
        let n = self.w_enc.nrows();
        let hidden = self.w_enc.ncols();
        if hidden != Self::bottleneck(n) {
            return Err(Error::InvalidArgument(format!(
                "bottleneck {hidden} must be half the bin count {n}"
            )));
        }
        if self.w_dec.dim() != (hidden, n)
            || self.b_enc.len() != hidden
            || self.b_dec.len() != n
        {
            return Err(Error::InvalidArgument(
                "denoiser tensor shapes are inconsistent".into(),
            ));
        }
        Ok(())
    }
}

/// Saved activations for the backward pass.
#[derive(Debug, Clone)]
pub struct DenoiserCache {
    v: Array2<f64>,
    pre_enc: Array2<f64>,
    h_enc: Array2<f64>,
    pre_dec: Array2<f64>,
    h_dec: Array2<f64>,
}

/// Runs the denoiser, keeping intermediates for backpropagation.
pub fn forward_cached(
    params: &DenoiserParams,
    v: &Array2<f64>,
) -> Result<(Array2<f64>, DenoiserCache)> {
    params.validate()?;
    if v.ncols() != params.n_bins() {
        return Err(Error::InvalidArgument(format!(
            "input has {} bins, denoiser expects {}",
            v.ncols(),
            params.n_bins()
        )));
    }
    let mut pre_enc = v.dot(&params.w_enc);
    pre_enc += &params.b_enc;
    let h_enc = pre_enc.mapv(|x| x.max(0.0));
    let mut pre_dec = h_enc.dot(&params.w_dec);
    pre_dec += &params.b_dec;
    let h_dec = pre_dec.mapv(|x| x.max(0.0));
    let out = &h_dec * v;
    Ok((
        out,
        DenoiserCache {
            v: v.clone(),
            pre_enc,
            h_enc,
            pre_dec,
            h_dec,
        },
    ))
}

/// Denoises a block of frames (`frames x n_bins`).
pub fn denoise(params: &DenoiserParams, v: &Array2<f64>) -> Result<Array2<f64>> {
    forward_cached(params, v).map(|(out, _)| out)
}

/// Backpropagates through the denoiser. Returns parameter gradients and the
/// gradient with respect to the input, which flows both through the
/// autoencoder and through the skip product.
pub fn denoiser_backward(
    params: &DenoiserParams,
    cache: &DenoiserCache,
    d_out: &Array2<f64>,
) -> (DenoiserParams, Array2<f64>) {
    let mut d_pre_dec = d_out * &cache.v;
    d_pre_dec.zip_mut_with(&cache.pre_dec, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let gw_dec = cache.h_enc.t().dot(&d_pre_dec);
    let gb_dec = d_pre_dec.sum_axis(Axis(0));

    let mut d_pre_enc = d_pre_dec.dot(&params.w_dec.t());
    d_pre_enc.zip_mut_with(&cache.pre_enc, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let gw_enc = cache.v.t().dot(&d_pre_enc);
    let gb_enc = d_pre_enc.sum_axis(Axis(0));

    let d_v = d_pre_enc.dot(&params.w_enc.t()) + d_out * &cache.h_dec;
    (
        DenoiserParams {
            w_enc: gw_enc,
            b_enc: gb_enc,
            w_dec: gw_dec,
            b_dec: gb_dec,
        },
        d_v,
    )
}

/// Standalone gradient check for this stage: compares the analytic
/// gradients of a divergence loss on random data against central finite
/// differences and returns the worst relative error.
pub fn denoiser_gradient_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (frames, n) = (4, 10);
    let mut params = DenoiserParams::zeros(n);
    for w in [&mut params.w_enc, &mut params.w_dec] {
        w.mapv_inplace(|_| rng.gen_range(-0.4..0.4));
    }
    for b in [&mut params.b_enc, &mut params.b_dec] {
        b.mapv_inplace(|_| rng.gen_range(0.0..0.2));
    }
    let v = Array2::from_shape_fn((frames, n), |_| rng.gen_range(0.2..1.5));
    let target = Array2::from_shape_fn((frames, n), |_| rng.gen_range(0.2..1.5));

    let loss = |p: &DenoiserParams| -> f64 {
        let out = denoise(p, &v).unwrap();
        crate::training::generalized_kl(&target, &out).unwrap()
    };

    let (out, cache) = forward_cached(&params, &v)?;
    let d_out = crate::training::generalized_kl_grad(&target, &out);
    let (grads, _) = denoiser_backward(&params, &cache, &d_out);

    let h = 1e-5;
    let mut worst = 0.0f64;
    type Getter = fn(&DenoiserParams) -> &[f64];
    type GetterMut = fn(&mut DenoiserParams) -> &mut [f64];
    let fields: [(Getter, GetterMut); 4] = [
        (
            |p| p.w_enc.as_slice().unwrap(),
            |p| p.w_enc.as_slice_mut().unwrap(),
        ),
        (
            |p| p.b_enc.as_slice().unwrap(),
            |p| p.b_enc.as_slice_mut().unwrap(),
        ),
        (
            |p| p.w_dec.as_slice().unwrap(),
            |p| p.w_dec.as_slice_mut().unwrap(),
        ),
        (
            |p| p.b_dec.as_slice().unwrap(),
            |p| p.b_dec.as_slice_mut().unwrap(),
        ),
    ];
    let grads_flat: Vec<&[f64]> = fields.iter().map(|(g, _)| g(&grads)).collect();
    for (fi, (get, get_mut)) in fields.iter().enumerate() {
        for idx in 0..get(&params).len() {
            let mut p = params.clone();
            let orig = get(&p)[idx];
            get_mut(&mut p)[idx] = orig + h;
            let plus = loss(&p);
            get_mut(&mut p)[idx] = orig - h;
            let minus = loss(&p);
            let fd = (plus - minus) / (2.0 * h);
            let analytic = grads_flat[fi][idx];
            let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
