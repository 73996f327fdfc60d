//! Training: the composite divergence objective with hand-derived gradients,
//! global-norm clipping, Adam, and a deterministic epoch loop over pooled
//! subsequence windows.
//!
//! The batch objective averages four data terms over the items (the masker,
//! denoiser, and twin reconstruction divergences plus the bridged twin-state
//! regularizer at weight 0.5) and adds two parameter penalties once: an L1
//! penalty on the main diagonal of the mask projection and a squared
//! Frobenius penalty on the denoiser's decode matrix.
//!
//! Everything here is bitwise reproducible for a fixed seed, config, and
//! data: batch items may be processed in parallel, but gradients are reduced
//! in item order.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;

use std::sync::OnceLock;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{self, TrackEntry, TrackPair};
use crate::denoiser;
use crate::error::{Error, Result};
use crate::masker::{self, MaskerConfig};
use crate::signal::{stft, StftConfig};
use crate::training::adam::clip_global_norm;
use crate::twinnet::{self, TwinBackprop, TwinOptions};

pub use crate::training::adam::AdamState;
pub use crate::training::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use crate::training::gradcheck::{gradient_check_full, GradCheckReport};
pub use crate::training::params::{init_parameters, NetDims, ParameterSet};

/// Floor applied to both arguments inside the divergence logarithm.
pub const KL_EPSILON: f64 = 1e-6;

/// Weight of the twin-state regularization term in the total objective.
pub const TWIN_LOSS_WEIGHT: f64 = 0.5;

/// Environment variable capping the worker thread pool used for batch and
/// track parallelism. Unset or unparsable means one thread per core.
pub const THREADS_ENV: &str = "MADT_THREADS";

/// Shared thread pool for per-item parallel work, sized once from
/// [`THREADS_ENV`].
pub fn worker_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("worker pool construction cannot fail")
    })
}

/// Generalized Kullback-Leibler divergence between non-negative matrices:
/// `sum over entries of a * ln(max(a, eps) / max(b, eps)) - a + b`.
///
/// Flooring the logarithm arguments keeps the value finite at zeros while
/// leaving entries above the floor untouched, so `d(a, a) = 0` exactly and
/// the sum can undershoot zero only by the floor times the entry count.
pub fn generalized_kl(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "divergence arguments have shapes {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut total = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Numeric(
                "non-finite value in divergence argument".into(),
            ));
        }
        if x < 0.0 || y < 0.0 {
            return Err(Error::InvalidArgument(
                "divergence arguments must be non-negative".into(),
            ));
        }
        total += x * (x.max(KL_EPSILON) / y.max(KL_EPSILON)).ln() - x + y;
    }
    Ok(total)
}

/// Gradient of [`generalized_kl`] with respect to the estimate `b`. Below
/// the floor the logarithm is frozen, leaving only the linear term.
pub fn generalized_kl_grad(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut g = Array2::zeros(b.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(a)
        .and(b)
        .for_each(|g, &x, &y| {
            *g = if y > KL_EPSILON { 1.0 - x / y } else { 1.0 };
        });
    g
}

/// Network architecture plus twin-branch behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub masker: MaskerConfig,
    pub twin: TwinOptions,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.masker.validate()
    }

    pub fn dims(&self) -> NetDims {
        NetDims {
            n_bins: self.masker.n_bins,
            trim_bins: self.masker.trim_bins,
        }
    }

    /// Seeded parameter initialization matching this architecture.
    pub fn init(&self, seed: u64) -> Result<ParameterSet> {
        init_parameters(seed, &self.dims(), self.twin.shares_projection)
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global L2 gradient norm above which the whole gradient is rescaled.
    pub grad_clip: f64,
    /// Weight of the L1 penalty on the mask projection's main diagonal.
    pub lambda_diag: f64,
    /// Weight of the squared Frobenius penalty on the denoiser decode matrix.
    pub lambda_dec: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            grad_clip: 0.5,
            lambda_diag: 1e-2,
            lambda_dec: 1e-4,
            epochs: 2,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive and finite".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::InvalidArgument(
                "gradient clip must be positive and finite".into(),
            ));
        }
        if self.lambda_diag < 0.0 || self.lambda_dec < 0.0 {
            return Err(Error::InvalidArgument(
                "penalty weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// The objective value split into its reported terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    /// Divergence of the denoiser output from the target.
    pub l_d: f64,
    /// Divergence of the masker output from the target.
    pub l_m: f64,
    /// Divergence of the twin branch's output from the target.
    pub l_tw: f64,
    /// Twin-state regularization (before its 0.5 weight).
    pub l_twin: f64,
    /// L1 norm of the mask projection's main diagonal.
    pub diag_l1: f64,
    /// Squared Frobenius norm of the denoiser decode matrix.
    pub dec_l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn compose(
        cfg: &TrainConfig,
        l_d: f64,
        l_m: f64,
        l_tw: f64,
        l_twin: f64,
        diag_l1: f64,
        dec_l2: f64,
    ) -> Self {
        let total = l_d
            + l_m
            + l_tw
            + TWIN_LOSS_WEIGHT * l_twin
            + cfg.lambda_diag * diag_l1
            + cfg.lambda_dec * dec_l2;
        LossBreakdown {
            l_d,
            l_m,
            l_tw,
            l_twin,
            diag_l1,
            dec_l2,
            total,
        }
    }

    /// Recomputes the total from the reported terms, for consistency checks.
    pub fn recomposed_total(&self, cfg: &TrainConfig) -> f64 {
        self.l_d
            + self.l_m
            + self.l_tw
            + TWIN_LOSS_WEIGHT * self.l_twin
            + cfg.lambda_diag * self.diag_l1
            + cfg.lambda_dec * self.dec_l2
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_d,
            self.l_m,
            self.l_tw,
            self.l_twin,
            self.diag_l1,
            self.dec_l2,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One training example: a mixture-magnitude window and the voice target
/// over its central frames.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    /// `total_len x n_bins` mixture magnitudes.
    pub window: Array2<f64>,
    /// `central_len x n_bins` target magnitudes.
    pub target: Array2<f64>,
}

fn kl_term(name: &str, a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    generalized_kl(a, b).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("{name}: {msg}")),
        other => other,
    })
}

struct ItemResult {
    l_d: f64,
    l_m: f64,
    l_tw: f64,
    l_twin: f64,
    grads: ParameterSet,
}

fn item_forward_backward(
    p: &ParameterSet,
    model: &ModelConfig,
    item: &TrainingItem,
) -> Result<ItemResult> {
    let (m_out, m_cache) = masker::forward_cached(&p.masker, &item.window, &model.masker)?;
    let (den_out, den_cache) = denoiser::forward_cached(&p.denoiser, &m_out.filtered)?;
    let l_m = kl_term("L_M", &item.target, &m_out.filtered)?;
    let l_d = kl_term("L_D", &item.target, &den_out)?;

    let mut grads = ParameterSet::zeros(&model.dims(), p.twin_shares_projection())?;

    let g_den = generalized_kl_grad(&item.target, &den_out);
    let (den_grads, d_filtered_den) = denoiser::denoiser_backward(&p.denoiser, &den_cache, &g_den);
    grads.denoiser = den_grads;
    let d_filtered = d_filtered_den + generalized_kl_grad(&item.target, &m_out.filtered);

    let mut l_tw = 0.0;
    let mut l_twin = 0.0;
    let mut d_hdec_extra: Option<Array2<f64>> = None;
    let mut d_henc_extra: Option<Array2<f64>> = None;
    let mut shared_proj: Option<(Array2<f64>, Array1<f64>)> = None;
    if model.twin.enabled {
        let v_central = data::central_frames(&item.window, &model.masker.seq);
        let (v_twin, t_cache) =
            twinnet::forward_cached(&p.twin, &p.masker, &m_out.h_enc, &v_central)?;
        l_tw = kl_term("L_TW", &item.target, &v_twin)?;
        let (loss_twin, tl_cache) = twinnet::twin_loss_cached(
            &m_out.h_dec,
            &t_cache.h_twin,
            &p.twin.bridge_w,
            &p.twin.bridge_b,
        )?;
        l_twin = loss_twin;
        let (g_bw, g_bb, d_hdec_twin, d_htwin) = twinnet::twin_loss_backward(
            &tl_cache,
            &m_out.h_dec,
            &p.twin.bridge_w,
            TWIN_LOSS_WEIGHT,
        );
        let d_v_twin = generalized_kl_grad(&item.target, &v_twin);
        let htwin_extra = match model.twin.backprop {
            TwinBackprop::Full => Some(d_htwin),
            TwinBackprop::Stop => None,
        };
        let res = twinnet::twin_backward(
            &p.twin,
            &p.masker,
            &t_cache,
            &d_v_twin,
            htwin_extra.as_ref(),
        );
        grads.twin.dec = res.dec;
        grads.twin.bridge_w = g_bw;
        grads.twin.bridge_b = g_bb;
        match &mut grads.twin.proj {
            Some(proj) => {
                proj.w = res.proj_w;
                proj.b = res.proj_b;
            }
            None => shared_proj = Some((res.proj_w, res.proj_b)),
        }
        d_hdec_extra = Some(d_hdec_twin);
        d_henc_extra = Some(res.d_henc);
    }

    grads.masker = masker::masker_backward(
        &p.masker,
        &m_cache,
        &model.masker,
        &d_filtered,
        d_hdec_extra.as_ref(),
        d_henc_extra.as_ref(),
    );
    if let Some((gw, gb)) = shared_proj {
        grads.masker.w_mask += &gw;
        grads.masker.b_mask += &gb;
    }

    Ok(ItemResult {
        l_d,
        l_m,
        l_tw,
        l_twin,
        grads,
    })
}

fn diag_len(p: &ParameterSet) -> usize {
    p.masker.w_mask.nrows().min(p.masker.w_mask.ncols())
}

/// The two parameter penalties: diagonal L1 of the mask projection and
/// squared Frobenius norm of the denoiser decode matrix. Both unweighted.
pub fn penalty_terms(p: &ParameterSet) -> (f64, f64) {
    let diag_l1 = (0..diag_len(p))
        .map(|i| p.masker.w_mask[[i, i]].abs())
        .sum();
    let dec_l2 = p.denoiser.w_dec.iter().map(|v| v * v).sum();
    (diag_l1, dec_l2)
}

fn add_penalty_gradients(p: &ParameterSet, cfg: &TrainConfig, grads: &mut ParameterSet) {
    for i in 0..diag_len(p) {
        let v = p.masker.w_mask[[i, i]];
        let sign = if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        };
        grads.masker.w_mask[[i, i]] += cfg.lambda_diag * sign;
    }
    grads
        .denoiser
        .w_dec
        .zip_mut_with(&p.denoiser.w_dec, |g, &w| *g += 2.0 * cfg.lambda_dec * w);
}

fn check_twin_layout(p: &ParameterSet, model: &ModelConfig) -> Result<()> {
    if p.twin_shares_projection() != model.twin.shares_projection {
        return Err(Error::InvalidArgument(
            "parameter set and model disagree on twin projection sharing".into(),
        ));
    }
    Ok(())
}

/// Forward and backward over one batch: losses averaged over the items,
/// penalties added once, gradients reduced in item order.
pub fn batch_forward_backward(
    p: &ParameterSet,
    model: &ModelConfig,
    cfg: &TrainConfig,
    batch: &[&TrainingItem],
) -> Result<(LossBreakdown, ParameterSet)> {
    model.validate()?;
    cfg.validate()?;
    check_twin_layout(p, model)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let results: Vec<ItemResult> = worker_pool().install(|| {
        batch
            .par_iter()
            .map(|item| item_forward_backward(p, model, item))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut grads = ParameterSet::zeros(&model.dims(), p.twin_shares_projection())?;
    let (mut l_d, mut l_m, mut l_tw, mut l_twin) = (0.0, 0.0, 0.0, 0.0);
    for r in &results {
        l_d += r.l_d;
        l_m += r.l_m;
        l_tw += r.l_tw;
        l_twin += r.l_twin;
        grads.add_assign(&r.grads);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    let (diag_l1, dec_l2) = penalty_terms(p);
    add_penalty_gradients(p, cfg, &mut grads);
    let losses = LossBreakdown::compose(
        cfg,
        l_d * inv,
        l_m * inv,
        l_tw * inv,
        l_twin * inv,
        diag_l1,
        dec_l2,
    );
    Ok((losses, grads))
}

/// Twin states per item at the current parameters, in forward time order.
/// Used to hold the regularization target fixed in finite-difference checks
/// under the stop-gradient contract.
pub fn twin_states(
    p: &ParameterSet,
    model: &ModelConfig,
    items: &[TrainingItem],
) -> Result<Vec<Array2<f64>>> {
    items
        .iter()
        .map(|item| {
            let out = masker::masker_forward(&p.masker, &item.window, &model.masker)?;
            let v_central = data::central_frames(&item.window, &model.masker.seq);
            let (_, h_twin) = twinnet::twin_forward(&p.twin, &p.masker, &out.h_enc, &v_central)?;
            Ok(h_twin)
        })
        .collect()
}

/// Loss-only evaluation of the batch objective, matching
/// [`batch_forward_backward`] bit for bit at the same parameters.
///
/// `frozen_twin`, when given, substitutes per-item twin states inside the
/// regularization term; the twin's own divergence term still uses live
/// states. This mirrors what the analytic gradient differentiates under the
/// stop contract.
pub fn composite_losses(
    p: &ParameterSet,
    model: &ModelConfig,
    cfg: &TrainConfig,
    items: &[TrainingItem],
    frozen_twin: Option<&[Array2<f64>]>,
) -> Result<LossBreakdown> {
    model.validate()?;
    cfg.validate()?;
    check_twin_layout(p, model)?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(f) = frozen_twin {
        if f.len() != items.len() {
            return Err(Error::InvalidArgument(
                "frozen twin states do not match item count".into(),
            ));
        }
    }
    let (mut l_d, mut l_m, mut l_tw, mut l_twin) = (0.0, 0.0, 0.0, 0.0);
    for (i, item) in items.iter().enumerate() {
        let (m_out, _) = masker::forward_cached(&p.masker, &item.window, &model.masker)?;
        let den_out = denoiser::denoise(&p.denoiser, &m_out.filtered)?;
        l_m += kl_term("L_M", &item.target, &m_out.filtered)?;
        l_d += kl_term("L_D", &item.target, &den_out)?;
        if model.twin.enabled {
            let v_central = data::central_frames(&item.window, &model.masker.seq);
            let (v_twin, h_twin) =
                twinnet::twin_forward(&p.twin, &p.masker, &m_out.h_enc, &v_central)?;
            l_tw += kl_term("L_TW", &item.target, &v_twin)?;
            let target_states = match frozen_twin {
                Some(f) => &f[i],
                None => &h_twin,
            };
            l_twin += twinnet::twin_regularization_loss(
                &m_out.h_dec,
                target_states,
                &p.twin.bridge_w,
                &p.twin.bridge_b,
            )?;
        }
    }
    let inv = 1.0 / items.len() as f64;
    let (diag_l1, dec_l2) = penalty_terms(p);
    Ok(LossBreakdown::compose(
        cfg,
        l_d * inv,
        l_m * inv,
        l_tw * inv,
        l_twin * inv,
        diag_l1,
        dec_l2,
    ))
}

/// Scalar batch objective, for finite differencing.
pub fn composite_total(
    p: &ParameterSet,
    model: &ModelConfig,
    cfg: &TrainConfig,
    items: &[TrainingItem],
    frozen_twin: Option<&[Array2<f64>]>,
) -> Result<f64> {
    composite_losses(p, model, cfg, items, frozen_twin).map(|l| l.total)
}

/// One optimizer step: backward pass, global-norm clip, Adam update.
/// Returns the batch losses and the pre-clip gradient norm. Non-finite
/// losses, gradients, or updated parameters abort with a numeric error.
pub fn train_step(
    p: &mut ParameterSet,
    opt: &mut AdamState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    batch: &[&TrainingItem],
) -> Result<(LossBreakdown, f64)> {
    let (losses, grads) = batch_forward_backward(p, model, cfg, batch)?;
    if !losses.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss term in {losses:?}"
        )));
    }
    let mut flat = grads.flatten();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient entry".into()));
    }
    let grad_norm = clip_global_norm(&mut flat, cfg.grad_clip);
    let mut theta = p.flatten();
    opt.update(&mut theta, &flat, cfg.learning_rate)?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite parameter after optimizer update".into(),
        ));
    }
    p.assign_flat(&theta)?;
    Ok((losses, grad_norm))
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    pub grad_norm: f64,
}

/// Header of the training log CSV.
pub const LOG_HEADER: &str = "step,L_D,L_M,L_TW,L_twin,diag_l1,dec_l2,total,grad_norm";

/// Renders step records as CSV. Float formatting is Rust's shortest
/// round-trip representation, so equal trajectories give equal bytes.
pub fn log_csv(records: &[StepRecord]) -> String {
    use std::fmt::Write;
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(LOG_HEADER);
    out.push('\n');
    for r in records {
        let l = &r.losses;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step, l.l_d, l.l_m, l.l_tw, l.l_twin, l.diag_l1, l.dec_l2, l.total, r.grad_norm
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// A finished (or checkpointed) training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: ParameterSet,
    pub opt: AdamState,
    pub records: Vec<StepRecord>,
}

/// Trains from a seeded initialization. See [`train_from`].
pub fn train(model: &ModelConfig, cfg: &TrainConfig, items: &[TrainingItem]) -> Result<TrainRun> {
    train_with(model, cfg, items, |_, _, _| Ok(()))
}

/// As [`train`], invoking `on_epoch(epoch, params, opt)` after every
/// completed epoch (checkpointing hook).
pub fn train_with(
    model: &ModelConfig,
    cfg: &TrainConfig,
    items: &[TrainingItem],
    on_epoch: impl FnMut(usize, &ParameterSet, &AdamState) -> Result<()>,
) -> Result<TrainRun> {
    let params = model.init(cfg.seed)?;
    let opt = AdamState::new(params.flat_len());
    train_from(model, cfg, items, params, opt, 0, on_epoch)
}

/// The epoch loop over pooled items, resumable from existing parameters and
/// optimizer state.
///
/// Weight initialization and data ordering draw from separate streams of
/// the same seed, so the shuffle sequence never depends on how many values
/// initialization consumed.
pub fn train_from(
    model: &ModelConfig,
    cfg: &TrainConfig,
    items: &[TrainingItem],
    mut params: ParameterSet,
    mut opt: AdamState,
    start_step: u64,
    mut on_epoch: impl FnMut(usize, &ParameterSet, &AdamState) -> Result<()>,
) -> Result<TrainRun> {
    model.validate()?;
    cfg.validate()?;
    check_twin_layout(&params, model)?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("no training items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut records = Vec::new();
    let mut step = start_step;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&TrainingItem> = chunk.iter().map(|&i| &items[i]).collect();
            let (losses, grad_norm) = train_step(&mut params, &mut opt, model, cfg, &batch)?;
            step += 1;
            records.push(StepRecord {
                step,
                losses,
                grad_norm,
            });
        }
        on_epoch(epoch, &params, &opt)?;
    }
    Ok(TrainRun {
        params,
        opt,
        records,
    })
}

/// Training items from one loaded track: magnitude subsequences of the
/// mixture paired with scaled ideal-ratio-mask voice targets over the
/// central frames.
pub fn track_items(
    stft_cfg: &StftConfig,
    model: &ModelConfig,
    track: &TrackPair,
) -> Result<Vec<TrainingItem>> {
    let mix = stft(&track.mixture, stft_cfg)?.magnitude();
    let voice = stft(&track.voice, stft_cfg)?.magnitude();
    let accomp = stft(&track.accompaniment, stft_cfg)?.magnitude();
    if mix.bins() != model.masker.n_bins {
        return Err(Error::Config(format!(
            "transform yields {} bins but the model expects {}",
            mix.bins(),
            model.masker.n_bins
        )));
    }
    let target_full = data::make_training_target(&voice, &[&voice, &accomp])?;
    let seq = &model.masker.seq;
    let windows = data::make_subsequences(&mix.data, seq)?;
    let target_windows = data::make_subsequences(&target_full, seq)?;
    let mut items = Vec::with_capacity(windows.count());
    for b in 0..windows.count() {
        let window = windows.windows.index_axis(ndarray::Axis(0), b).to_owned();
        let target_window = target_windows.windows.index_axis(ndarray::Axis(0), b).to_owned();
        items.push(TrainingItem {
            window,
            target: data::central_frames(&target_window, seq),
        });
    }
    Ok(items)
}

/// Pools training items across all listed tracks.
pub fn collect_items(
    stft_cfg: &StftConfig,
    model: &ModelConfig,
    tracks: &[TrackEntry],
) -> Result<Vec<TrainingItem>> {
    model.validate()?;
    let mut items = Vec::new();
    for entry in tracks {
        let track = data::load_track(entry)?;
        items.extend(track_items(stft_cfg, model, &track)?);
    }
    if items.is_empty() {
        return Err(Error::DatasetLayout(
            "dataset yields no training windows".into(),
        ));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SequenceConfig;
    use crate::masker::EncoderAlignment;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn tiny_model(twin: TwinOptions) -> ModelConfig {
        ModelConfig {
            masker: MaskerConfig {
                n_bins: 6,
                trim_bins: 3,
                seq: SequenceConfig {
                    total_len: 6,
                    context: 1,
                },
                alignment: EncoderAlignment::Realigned,
            },
            twin,
        }
    }

    fn tiny_items(model: &ModelConfig, count: usize, seed: u64) -> Vec<TrainingItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = model.masker.seq.total_len;
        let c = model.masker.seq.central_len();
        let n = model.masker.n_bins;
        (0..count)
            .map(|_| TrainingItem {
                window: Array2::from_shape_fn((t, n), |_| rng.gen_range(0.2..1.2)),
                target: Array2::from_shape_fn((c, n), |_| rng.gen_range(0.2..1.5)),
            })
            .collect()
    }

    #[test]
    fn kl_of_equal_matrices_is_exactly_zero() {
        let a = array![[0.0, 1.5, 2.0], [1e-9, 0.3, 7.0]];
        assert_eq!(generalized_kl(&a, &a.clone()).unwrap(), 0.0);
    }

    #[test]
    fn kl_two_against_one_matches_hand_value() {
        let a = array![[2.0]];
        let b = array![[1.0]];
        let kl = generalized_kl(&a, &b).unwrap();
        assert!((kl - (2.0 * std::f64::consts::LN_2 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_against_one_is_one() {
        let a = array![[0.0]];
        let b = array![[1.0]];
        assert_eq!(generalized_kl(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        let a = array![[1.0, 2.0]];
        assert!(matches!(
            generalized_kl(&a, &array![[1.0]]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            generalized_kl(&a, &array![[-0.5, 1.0]]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            generalized_kl(&a, &array![[f64::NAN, 1.0]]),
            Err(Error::Numeric(_))
        ));
    }

    /// The divergence can undershoot zero only by the log floor times the
    /// entry count.
    #[test]
    fn kl_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let a = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.0..3.0));
            let b = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.0..3.0));
            let kl = generalized_kl(&a, &b).unwrap();
            assert!(kl >= -KL_EPSILON * a.len() as f64, "kl = {kl}");
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.0..2.0));
        let b = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.1..2.0));
        let g = generalized_kl_grad(&a, &b);
        let h = 1e-7;
        for idx in 0..b.len() {
            let mut bp = b.clone();
            bp.as_slice_mut().unwrap()[idx] += h;
            let plus = generalized_kl(&a, &bp).unwrap();
            bp.as_slice_mut().unwrap()[idx] -= 2.0 * h;
            let minus = generalized_kl(&a, &bp).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            let analytic = g.as_slice().unwrap()[idx];
            assert!(
                (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0) < 1e-6,
                "entry {idx}: {analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn breakdown_compose_arithmetic() {
        let cfg = TrainConfig::default();
        let perfect = LossBreakdown::compose(&cfg, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0);
        assert_eq!(perfect.total, 1.5);
        let l = LossBreakdown::compose(&cfg, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        assert_abs_diff_eq!(
            l.total,
            1.0 + 2.0 + 3.0 + 2.0 + 0.05 + 0.0006,
            epsilon = 1e-15
        );
        assert_eq!(l.recomposed_total(&cfg), l.total);
    }

    #[test]
    fn penalties_by_hand() {
        let model = tiny_model(TwinOptions::default());
        let mut p = ParameterSet::zeros(&model.dims(), false).unwrap();
        p.masker.w_mask[[0, 0]] = 2.0;
        p.masker.w_mask[[1, 1]] = -3.0;
        p.masker.w_mask[[0, 5]] = 100.0; // off the diagonal, not penalized
        p.denoiser.w_dec[[0, 1]] = 2.0;
        p.denoiser.w_dec[[2, 3]] = -1.0;
        let (diag, dec) = penalty_terms(&p);
        assert_eq!(diag, 5.0);
        assert_eq!(dec, 5.0);

        let cfg = TrainConfig::default();
        let mut grads = ParameterSet::zeros(&model.dims(), false).unwrap();
        add_penalty_gradients(&p, &cfg, &mut grads);
        assert_abs_diff_eq!(grads.masker.w_mask[[0, 0]], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(grads.masker.w_mask[[1, 1]], -0.01, epsilon = 1e-15);
        assert_eq!(grads.masker.w_mask[[2, 2]], 0.0); // zero entry, zero subgradient
        assert_eq!(grads.masker.w_mask[[0, 5]], 0.0);
        assert_abs_diff_eq!(grads.denoiser.w_dec[[0, 1]], 4e-4, epsilon = 1e-18);
    }

    #[test]
    fn batch_total_matches_loss_only_evaluation() {
        for twin in [
            TwinOptions::default(),
            TwinOptions {
                enabled: false,
                ..TwinOptions::default()
            },
            TwinOptions {
                shares_projection: true,
                ..TwinOptions::default()
            },
        ] {
            let model = tiny_model(twin);
            let cfg = TrainConfig::default();
            let p = model.init(5).unwrap();
            let items = tiny_items(&model, 3, 17);
            let refs: Vec<&TrainingItem> = items.iter().collect();
            let (losses, _) = batch_forward_backward(&p, &model, &cfg, &refs).unwrap();
            let check = composite_losses(&p, &model, &cfg, &items, None).unwrap();
            assert_eq!(losses, check);
            assert!(
                (losses.total - losses.recomposed_total(&cfg)).abs()
                    <= 1e-12 * losses.total.abs().max(1.0)
            );
        }
    }

    #[test]
    fn term_gating_without_twin_and_penalties() {
        let model = tiny_model(TwinOptions {
            enabled: false,
            ..TwinOptions::default()
        });
        let cfg = TrainConfig {
            lambda_diag: 0.0,
            lambda_dec: 0.0,
            ..TrainConfig::default()
        };
        let p = model.init(2).unwrap();
        let items = tiny_items(&model, 2, 3);
        let refs: Vec<&TrainingItem> = items.iter().collect();
        let (losses, grads) = batch_forward_backward(&p, &model, &cfg, &refs).unwrap();
        assert_eq!(losses.l_tw, 0.0);
        assert_eq!(losses.l_twin, 0.0);
        assert_eq!(losses.total, losses.l_d + losses.l_m);
        // Twin tensors receive no gradient when the branch is off.
        assert!(grads.twin.dec.w_ir.iter().all(|&v| v == 0.0));
        assert!(grads.twin.bridge_w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_steps_decrease_loss_on_fixed_batch() {
        let model = tiny_model(TwinOptions::default());
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            ..TrainConfig::default()
        };
        let mut p = model.init(7).unwrap();
        let mut opt = AdamState::new(p.flat_len());
        let items = tiny_items(&model, 4, 9);
        let refs: Vec<&TrainingItem> = items.iter().collect();
        let (first, _) = train_step(&mut p, &mut opt, &model, &cfg, &refs).unwrap();
        let (second, _) = train_step(&mut p, &mut opt, &model, &cfg, &refs).unwrap();
        assert!(
            second.total < first.total,
            "step 2 total {} not below step 1 total {}",
            second.total,
            first.total
        );
    }

    #[test]
    fn train_step_aborts_on_poisoned_parameters() {
        let model = tiny_model(TwinOptions::default());
        let cfg = TrainConfig::default();
        let mut p = model.init(1).unwrap();
        p.masker.dec.w_in[[0, 0]] = f64::NAN;
        let mut opt = AdamState::new(p.flat_len());
        let items = tiny_items(&model, 2, 2);
        let refs: Vec<&TrainingItem> = items.iter().collect();
        let err = train_step(&mut p, &mut opt, &model, &cfg, &refs).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "got {err:?}");
    }

    #[test]
    fn training_is_deterministic_and_respects_step_limit() {
        let model = tiny_model(TwinOptions::default());
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let items = tiny_items(&model, 5, 4);
        let a = train(&model, &cfg, &items).unwrap();
        let b = train(&model, &cfg, &items).unwrap();
        // 5 items in batches of 2 -> 3 steps per epoch.
        assert_eq!(a.records.len(), 9);
        assert_eq!(log_csv(&a.records), log_csv(&b.records));
        assert_eq!(a.params.flatten(), b.params.flatten());

        let limited = train(
            &model,
            &TrainConfig {
                max_steps: Some(4),
                ..cfg
            },
            &items,
        )
        .unwrap();
        assert_eq!(limited.records.len(), 4);
        // The truncated run retraces the full run's first steps.
        for (x, y) in limited.records.iter().zip(a.records.iter()) {
            assert_eq!(x.losses, y.losses);
        }
    }

    #[test]
    fn epoch_callback_sees_every_epoch() {
        let model = tiny_model(TwinOptions::default());
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let items = tiny_items(&model, 4, 6);
        let mut seen = Vec::new();
        train_with(&model, &cfg, &items, |epoch, _, _| {
            seen.push(epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn csv_layout_is_stable() {
        let records = vec![StepRecord {
            step: 1,
            losses: LossBreakdown {
                l_d: 1.5,
                l_m: 2.0,
                l_tw: 0.25,
                l_twin: 4.0,
                diag_l1: 0.5,
                dec_l2: 0.125,
                total: 6.0,
            },
            grad_norm: 0.75,
        }];
        let csv = log_csv(&records);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), LOG_HEADER);
        assert_eq!(lines.next().unwrap(), "1,1.5,2,0.25,4,0.5,0.125,6,0.75");
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn track_items_have_matching_shapes() {
        let stft_cfg = StftConfig {
            frame_length: 256,
            fft_length: 256,
            hop: 64,
            sample_rate: 8000,
        };
        let model = ModelConfig {
            masker: MaskerConfig {
                n_bins: stft_cfg.retained_bins(),
                trim_bins: 40,
                seq: SequenceConfig {
                    total_len: 10,
                    context: 2,
                },
                alignment: EncoderAlignment::Realigned,
            },
            twin: TwinOptions::default(),
        };
        let track = data::synth_fixture(3, 0.5, 8000).unwrap();
        let items = track_items(&stft_cfg, &model, &track).unwrap();
        let frames = stft_cfg.frame_count(track.mixture.len());
        assert_eq!(items.len(), frames.div_ceil(model.masker.seq.central_len()));
        for item in &items {
            assert_eq!(item.window.dim(), (10, 129));
            assert_eq!(item.target.dim(), (6, 129));
            assert!(item.target.iter().all(|&v| v >= 0.0));
        }
        // Wrong bin count is a config error.
        let mut bad = model;
        bad.masker.n_bins = 64;
        bad.masker.trim_bins = 32;
        assert!(matches!(
            track_items(&stft_cfg, &bad, &track),
            Err(Error::Config(_))
        ));
    }
}
