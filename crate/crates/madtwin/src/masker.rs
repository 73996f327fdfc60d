//! The masker stage: predicts a non-negative time-frequency mask for the
//! voice from a mixture-magnitude window and applies it through a skip
//! connection.
//!
//! Pipeline for one window of `total_len` frames by `n_bins` bins:
//!
//! 1. [`trim`] keeps the lowest `trim_bins` bins (the voice lives well below
//!    Nyquist, and the recurrent width follows the trimmed size).
//! 2. [`encode`]: two GRUs read the trimmed window forwards and backwards;
//!    each state gets its input frame added back (a residual connection),
//!    the two directions are concatenated, and the `context` frames at both
//!    ends are dropped.
//! 3. [`decode`]: a forward GRU over the encoding; states lie in [-1, 1].
//! 4. [`sparsify`]: an affine projection through a rectifier yields the
//!    mask over all `n_bins` bins.
//! 5. [`apply_skip_filter`]: the mask multiplies the central input frames.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::data::SequenceConfig;
use crate::error::{Error, Result};
use crate::rnn::{gru_backward, gru_forward, GruCache, GruParams};

/// How the backward encoder stream is paired with the forward one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EncoderAlignment {
    /// Position `t` takes the backward stream's own position `t` (the state
    /// that has consumed the last `t + 1` frames).
    Literal,
    /// The backward stream is flipped back to input time order, as in a
    /// standard bidirectional RNN.
    #[default]
    Realigned,
}

/// Masker geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskerConfig {
    /// Spectral bins per frame entering and leaving the stage (`N`).
    pub n_bins: usize,
    /// Bins kept by [`trim`]; also the recurrent width (`F`).
    pub trim_bins: usize,
    pub seq: SequenceConfig,
    pub alignment: EncoderAlignment,
}

impl MaskerConfig {
    pub fn validate(&self) -> Result<()> {
        self.seq.validate()?;
        if self.trim_bins == 0 || self.n_bins == 0 {
            return Err(Error::InvalidArgument("bin counts must be positive".into()));
        }
        if self.trim_bins > self.n_bins {
            return Err(Error::InvalidArgument(format!(
                "cannot trim to {} bins out of {}",
                self.trim_bins, self.n_bins
            )));
        }
        Ok(())
    }
}

/// Masker weights.
#[derive(Debug, Clone)]
pub struct MaskerParams {
    pub enc_fwd: GruParams,
    pub enc_bwd: GruParams,
    pub dec: GruParams,
    /// Mask projection, `trim_bins x n_bins`.
    pub w_mask: Array2<f64>,
    pub b_mask: Array1<f64>,
}

impl MaskerParams {
    pub fn zeros(trim_bins: usize, n_bins: usize) -> Self {
        MaskerParams {
            enc_fwd: GruParams::zeros(trim_bins, trim_bins),
            enc_bwd: GruParams::zeros(trim_bins, trim_bins),
            dec: GruParams::zeros(2 * trim_bins, trim_bins),
            w_mask: Array2::zeros((trim_bins, n_bins)),
            b_mask: Array1::zeros(n_bins),
        }
    }
}

/// Keeps the lowest `trim_bins` bins of a window.
pub fn trim(v_in: &Array2<f64>, cfg: &MaskerConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    if v_in.ncols() != cfg.n_bins {
        return Err(Error::InvalidArgument(format!(
            "window has {} bins, config expects {}",
            v_in.ncols(),
            cfg.n_bins
        )));
    }
    Ok(v_in.slice(s![.., ..cfg.trim_bins]).to_owned())
}

/// Everything the forward pass keeps around for backpropagation.
#[derive(Debug, Clone)]
pub struct MaskerCache {
    pub v_tr: Array2<f64>,
    pub v_rev: Array2<f64>,
    pub fwd_states: Array2<f64>,
    fwd_cache: GruCache,
    pub bwd_states: Array2<f64>,
    bwd_cache: GruCache,
    pub h_enc: Array2<f64>,
    dec_cache: GruCache,
    pub h_dec: Array2<f64>,
    pub mask_pre: Array2<f64>,
    pub mask: Array2<f64>,
    pub v_central: Array2<f64>,
}

/// Outputs of one masker pass.
#[derive(Debug, Clone)]
pub struct MaskerOutput {
    /// Masked central frames, `central_len x n_bins`.
    pub filtered: Array2<f64>,
    /// Decoder states, `central_len x trim_bins`.
    pub h_dec: Array2<f64>,
    /// Encoder output, `central_len x 2 * trim_bins`.
    pub h_enc: Array2<f64>,
}

fn reverse_rows(m: &Array2<f64>) -> Array2<f64> {
    m.slice(s![..;-1, ..]).as_standard_layout().into_owned()
}

fn encode_impl(
    params: &MaskerParams,
    v_tr: &Array2<f64>,
    cfg: &MaskerConfig,
) -> Result<(Array2<f64>, Array2<f64>, GruCache, Array2<f64>, GruCache, Array2<f64>)> {
    let t_len = cfg.seq.total_len;
    if v_tr.nrows() != t_len {
        return Err(Error::InvalidArgument(format!(
            "window has {} frames, config expects {}",
            v_tr.nrows(),
            t_len
        )));
    }
    let v_rev = reverse_rows(v_tr);
    let (fwd_states, fwd_cache) = gru_forward(&params.enc_fwd, v_tr)?;
    let (bwd_states, bwd_cache) = gru_forward(&params.enc_bwd, &v_rev)?;

    // Residual connections: each direction's states get their own input
    // frames added back, then the backward half is aligned and both halves
    // are concatenated and cropped to the central frames.
    let first = &fwd_states + v_tr;
    let second_rev = &bwd_states + &v_rev;
    let second = match cfg.alignment {
        EncoderAlignment::Literal => second_rev,
        EncoderAlignment::Realigned => reverse_rows(&second_rev),
    };
    let full = concatenate(Axis(1), &[first.view(), second.view()])
        .expect("halves share a row count");
    let l = cfg.seq.context;
    let h_enc = full.slice(s![l..t_len - l, ..]).to_owned();
    Ok((h_enc, fwd_states, fwd_cache, bwd_states, bwd_cache, v_rev))
}

/// Bidirectional residual encoding of a trimmed window; returns
/// `central_len x 2 * trim_bins`.
pub fn encode(
    params: &MaskerParams,
    v_tr: &Array2<f64>,
    cfg: &MaskerConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if v_tr.ncols() != cfg.trim_bins {
        return Err(Error::InvalidArgument(format!(
            "trimmed window has {} bins, config expects {}",
            v_tr.ncols(),
            cfg.trim_bins
        )));
    }
    encode_impl(params, v_tr, cfg).map(|(h_enc, ..)| h_enc)
}

/// Forward GRU over the encoder output; every state entry is in [-1, 1].
pub fn decode(params: &MaskerParams, h_enc: &Array2<f64>) -> Result<Array2<f64>> {
    gru_forward(&params.dec, h_enc).map(|(states, _)| states)
}

/// Rectified affine mask projection: `relu(h_dec W + b)`, entries >= 0.
pub fn sparsify(params: &MaskerParams, h_dec: &Array2<f64>) -> Result<Array2<f64>> {
    if h_dec.ncols() != params.w_mask.nrows() {
        return Err(Error::InvalidArgument(format!(
            "decoder width {} does not match projection rows {}",
            h_dec.ncols(),
            params.w_mask.nrows()
        )));
    }
    let mut pre = h_dec.dot(&params.w_mask);
    pre += &params.b_mask;
    Ok(pre.mapv(|v| v.max(0.0)))
}

/// Skip connection: the mask multiplies the input frames elementwise.
pub fn apply_skip_filter(mask: &Array2<f64>, v_central: &Array2<f64>) -> Result<Array2<f64>> {
    if mask.dim() != v_central.dim() {
        return Err(Error::InvalidArgument(format!(
            "mask shape {:?} does not match frames shape {:?}",
            mask.dim(),
            v_central.dim()
        )));
    }
    Ok(mask * v_central)
}

/// Full masker pass with cached intermediates for training.
pub fn forward_cached(
    params: &MaskerParams,
    v_in: &Array2<f64>,
    cfg: &MaskerConfig,
) -> Result<(MaskerOutput, MaskerCache)> {
    cfg.validate()?;
    if v_in.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("masker input contains non-finite values".into()));
    }
    let v_tr = trim(v_in, cfg)?;
    let (h_enc, fwd_states, fwd_cache, bwd_states, bwd_cache, v_rev) =
        encode_impl(params, &v_tr, cfg)?;
    let (h_dec, dec_cache) = gru_forward(&params.dec, &h_enc)?;
    let mut mask_pre = h_dec.dot(&params.w_mask);
    mask_pre += &params.b_mask;
    let mask = mask_pre.mapv(|v| v.max(0.0));
    let l = cfg.seq.context;
    let v_central = v_in
        .slice(s![l..cfg.seq.total_len - l, ..])
        .to_owned();
    let filtered = &mask * &v_central;
    let out = MaskerOutput {
        filtered,
        h_dec: h_dec.clone(),
        h_enc: h_enc.clone(),
    };
    let cache = MaskerCache {
        v_tr,
        v_rev,
        fwd_states,
        fwd_cache,
        bwd_states,
        bwd_cache,
        h_enc,
        dec_cache,
        h_dec,
        mask_pre,
        mask,
        v_central,
    };
    Ok((out, cache))
}

/// Full masker pass: trim, encode, decode, sparsify, skip-filter.
pub fn masker_forward(
    params: &MaskerParams,
    v_in: &Array2<f64>,
    cfg: &MaskerConfig,
) -> Result<MaskerOutput> {
    forward_cached(params, v_in, cfg).map(|(out, _)| out)
}

/// Backpropagates through one masker pass.
///
/// `d_filtered` is the loss gradient at the masked output. The twin branch
/// feeds additional gradient into the decoder states (through the bridge)
/// and into the encoder output (through the twin decoder); those arrive via
/// `d_hdec_extra` and `d_henc_extra`.
pub fn masker_backward(
    params: &MaskerParams,
    cache: &MaskerCache,
    cfg: &MaskerConfig,
    d_filtered: &Array2<f64>,
    d_hdec_extra: Option<&Array2<f64>>,
    d_henc_extra: Option<&Array2<f64>>,
) -> MaskerParams {
    let t_len = cfg.seq.total_len;
    let l = cfg.seq.context;
    let f = cfg.trim_bins;

    let d_mask = d_filtered * &cache.v_central;
    let mut d_pre = d_mask;
    d_pre.zip_mut_with(&cache.mask_pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });

    let gw_mask = cache.h_dec.t().dot(&d_pre);
    let gb_mask = d_pre.sum_axis(Axis(0));

    let mut d_hdec = d_pre.dot(&params.w_mask.t());
    if let Some(extra) = d_hdec_extra {
        d_hdec += extra;
    }
    let (dec_grads, mut d_henc) = gru_backward(
        &params.dec,
        &cache.h_enc,
        &cache.h_dec,
        &cache.dec_cache,
        &d_hdec,
    );
    if let Some(extra) = d_henc_extra {
        d_henc += extra;
    }

    // Undo the crop: central gradients land at rows [context, total - context).
    let mut d_full = Array2::<f64>::zeros((t_len, 2 * f));
    d_full.slice_mut(s![l..t_len - l, ..]).assign(&d_henc);
    let d_first = d_full.slice(s![.., ..f]).to_owned();
    let d_second = d_full.slice(s![.., f..]).to_owned();
    // Undo the alignment: map gradients back to the backward stream's own
    // time order.
    let d_b = match cfg.alignment {
        EncoderAlignment::Literal => d_second,
        EncoderAlignment::Realigned => reverse_rows(&d_second),
    };

    let (fwd_grads, _) = gru_backward(
        &params.enc_fwd,
        &cache.v_tr,
        &cache.fwd_states,
        &cache.fwd_cache,
        &d_first,
    );
    let (bwd_grads, _) = gru_backward(
        &params.enc_bwd,
        &cache.v_rev,
        &cache.bwd_states,
        &cache.bwd_cache,
        &d_b,
    );

    MaskerParams {
        enc_fwd: fwd_grads,
        enc_bwd: bwd_grads,
        dec: dec_grads,
        w_mask: gw_mask,
        b_mask: gb_mask,
    }
}
