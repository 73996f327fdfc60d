//! The twin branch: a second decoder that reads the encoder output in
//! reverse time order and regularizes the forward decoder during training.
//!
//! The twin decoder produces states `h_twin` that anticipate the future
//! rather than summarize the past. An affine bridge maps forward-decoder
//! states onto them, and the regularization term sums the per-frame
//! Euclidean distances `|| bridge(h_dec_t) - h_twin_t ||`. By default the
//! twin states are treated as constants inside that term (the gradient is
//! stopped), so the bridge and forward decoder chase the twin, never the
//! reverse; the twin branch itself learns from its own mask loss, which
//! does propagate through the twin decoder into the encoder.
//!
//! Inference never evaluates anything in this module.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::masker::MaskerParams;
use crate::rnn::{gru_backward, gru_forward, GruCache, GruParams};

/// Distances below this are treated as zero when normalizing difference
/// vectors, sidestepping the non-differentiable point of the norm.
const NORM_GUARD: f64 = 1e-12;

/// Whether the regularization term's gradient may flow into the twin states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TwinBackprop {
    /// Twin states are constants inside the regularization term.
    #[default]
    Stop,
    /// The term also trains the twin decoder (and, through it, the encoder).
    Full,
}

/// Twin-branch configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwinOptions {
    pub enabled: bool,
    pub backprop: TwinBackprop,
    /// Reuse the masker's mask projection instead of a private one.
    pub shares_projection: bool,
}

impl Default for TwinOptions {
    fn default() -> Self {
        TwinOptions {
            enabled: true,
            backprop: TwinBackprop::Stop,
            shares_projection: false,
        }
    }
}

/// A private mask projection for the twin branch.
#[derive(Debug, Clone)]
pub struct TwinProjection {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Twin-branch weights.
#[derive(Debug, Clone)]
pub struct TwinParams {
    pub dec: GruParams,
    /// `None` when the projection is shared with the masker.
    pub proj: Option<TwinProjection>,
    /// Affine bridge from forward-decoder states to twin states,
    /// `trim_bins x trim_bins` plus bias.
    pub bridge_w: Array2<f64>,
    pub bridge_b: Array1<f64>,
}

impl TwinParams {
    pub fn zeros(trim_bins: usize, n_bins: usize, shares_projection: bool) -> Self {
        TwinParams {
            dec: GruParams::zeros(2 * trim_bins, trim_bins),
            proj: if shares_projection {
                None
            } else {
                Some(TwinProjection {
                    w: Array2::zeros((trim_bins, n_bins)),
                    b: Array1::zeros(n_bins),
                })
            },
            bridge_w: Array2::zeros((trim_bins, trim_bins)),
            bridge_b: Array1::zeros(trim_bins),
        }
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TwinCache {
    h_enc_rev: Array2<f64>,
    states_rev: Array2<f64>,
    gru_cache: GruCache,
    pub h_twin: Array2<f64>,
    mask_pre: Array2<f64>,
    v_central: Array2<f64>,
}

fn reverse_rows(m: &Array2<f64>) -> Array2<f64> {
    m.slice(s![..;-1, ..]).as_standard_layout().into_owned()
}

fn projection<'a>(
    params: &'a TwinParams,
    masker: &'a MaskerParams,
) -> (&'a Array2<f64>, &'a Array1<f64>) {
    match &params.proj {
        Some(p) => (&p.w, &p.b),
        None => (&masker.w_mask, &masker.b_mask),
    }
}

/// Runs the twin decoder over the encoder output in reverse time order and
/// produces its own masked voice estimate. Returns the estimate, the twin
/// states in forward time order, and the backward-pass cache.
pub fn forward_cached(
    params: &TwinParams,
    masker: &MaskerParams,
    h_enc: &Array2<f64>,
    v_central: &Array2<f64>,
) -> Result<(Array2<f64>, TwinCache)> {
    let h_enc_rev = reverse_rows(h_enc);
    let (states_rev, gru_cache) = gru_forward(&params.dec, &h_enc_rev)?;
    let h_twin = reverse_rows(&states_rev);
    let (w, b) = projection(params, masker);
    if h_twin.ncols() != w.nrows() {
        return Err(Error::InvalidArgument(format!(
            "twin width {} does not match projection rows {}",
            h_twin.ncols(),
            w.nrows()
        )));
    }
    if v_central.dim() != (h_twin.nrows(), w.ncols()) {
        return Err(Error::InvalidArgument(format!(
            "central frames shape {:?} does not match twin output {:?}",
            v_central.dim(),
            (h_twin.nrows(), w.ncols())
        )));
    }
    let mut mask_pre = h_twin.dot(w);
    mask_pre += b;
    let v_twin = mask_pre.mapv(|v| v.max(0.0)) * v_central;
    Ok((
        v_twin,
        TwinCache {
            h_enc_rev,
            states_rev,
            gru_cache,
            h_twin,
            mask_pre,
            v_central: v_central.clone(),
        },
    ))
}

/// Twin voice estimate and twin states (forward time order).
pub fn twin_forward(
    params: &TwinParams,
    masker: &MaskerParams,
    h_enc: &Array2<f64>,
    v_central: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    forward_cached(params, masker, h_enc, v_central)
        .map(|(v, cache)| (v, cache.h_twin))
}

/// Gradients produced by [`twin_backward`].
pub struct TwinBackwardResult {
    pub dec: GruParams,
    /// Projection gradients; routed into the masker's projection when the
    /// twin shares it.
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    /// Gradient with respect to the encoder output.
    pub d_henc: Array2<f64>,
}

/// Backpropagates through the twin branch.
///
/// `d_v_twin` is the loss gradient at the twin's masked output;
/// `d_htwin_extra` carries the regularization term's gradient into the twin
/// states when backpropagation through them is enabled.
pub fn twin_backward(
    params: &TwinParams,
    masker: &MaskerParams,
    cache: &TwinCache,
    d_v_twin: &Array2<f64>,
    d_htwin_extra: Option<&Array2<f64>>,
) -> TwinBackwardResult {
    let (w, _) = projection(params, masker);
    let mut d_pre = d_v_twin * &cache.v_central;
    d_pre.zip_mut_with(&cache.mask_pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });

    let proj_w = cache.h_twin.t().dot(&d_pre);
    let proj_b = d_pre.sum_axis(Axis(0));

    let mut d_htwin = d_pre.dot(&w.t());
    if let Some(extra) = d_htwin_extra {
        d_htwin += extra;
    }
    let d_states_rev = reverse_rows(&d_htwin);
    let (dec_grads, d_henc_rev) = gru_backward(
        &params.dec,
        &cache.h_enc_rev,
        &cache.states_rev,
        &cache.gru_cache,
        &d_states_rev,
    );
    TwinBackwardResult {
        dec: dec_grads,
        proj_w,
        proj_b,
        d_henc: reverse_rows(&d_henc_rev),
    }
}

/// Per-frame difference directions cached by the regularization loss.
pub struct TwinLossCache {
    /// Row t is `(bridge(h_dec_t) - h_twin_t) / || . ||`, or zero where the
    /// distance vanishes.
    unit: Array2<f64>,
}

/// Sum over frames of the Euclidean distance between the bridged forward
/// state and the twin state.
pub fn twin_regularization_loss(
    h_dec: &Array2<f64>,
    h_twin: &Array2<f64>,
    bridge_w: &Array2<f64>,
    bridge_b: &Array1<f64>,
) -> Result<f64> {
    twin_loss_cached(h_dec, h_twin, bridge_w, bridge_b).map(|(l, _)| l)
}

/// As [`twin_regularization_loss`], also returning what the backward pass
/// needs.
pub fn twin_loss_cached(
    h_dec: &Array2<f64>,
    h_twin: &Array2<f64>,
    bridge_w: &Array2<f64>,
    bridge_b: &Array1<f64>,
) -> Result<(f64, TwinLossCache)> {
    if h_dec.dim() != h_twin.dim() {
        return Err(Error::InvalidArgument(format!(
            "decoder states {:?} vs twin states {:?}",
            h_dec.dim(),
            h_twin.dim()
        )));
    }
    if bridge_w.nrows() != h_dec.ncols() || bridge_w.ncols() != h_twin.ncols() {
        return Err(Error::InvalidArgument(format!(
            "bridge shape {:?} does not map width {} to {}",
            bridge_w.dim(),
            h_dec.ncols(),
            h_twin.ncols()
        )));
    }
    let mut diff = h_dec.dot(bridge_w);
    diff += bridge_b;
    diff -= h_twin;
    let mut total = 0.0;
    let mut unit = diff;
    for mut row in unit.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += norm;
        if norm > NORM_GUARD {
            row.mapv_inplace(|v| v / norm);
        } else {
            row.fill(0.0);
        }
    }
    Ok((total, TwinLossCache { unit }))
}

/// Gradients of the regularization term, already scaled by `scale`.
///
/// Returns gradients for the bridge weight and bias, the forward-decoder
/// states, and the twin states. The twin-state gradient is what the stop
/// contract discards; callers apply it only under [`TwinBackprop::Full`].
pub fn twin_loss_backward(
    cache: &TwinLossCache,
    h_dec: &Array2<f64>,
    bridge_w: &Array2<f64>,
    scale: f64,
) -> (Array2<f64>, Array1<f64>, Array2<f64>, Array2<f64>) {
    let scaled = cache.unit.mapv(|v| v * scale);
    let d_bridge_w = h_dec.t().dot(&scaled);
    let d_bridge_b = scaled.sum_axis(Axis(0));
    let d_hdec = scaled.dot(&bridge_w.t());
    let d_htwin = scaled.mapv(|v| -v);
    (d_bridge_w, d_bridge_b, d_hdec, d_htwin)
}
