//! Full-network gradient verification: central finite differences of the
//! batch objective against the hand-derived analytic gradient, swept over
//! every parameter.
//!
//! Under the stop-gradient contract the finite-difference oracle must
//! differentiate the same function the backward pass does: the twin states
//! inside the regularization term are captured once at the base point and
//! held fixed while parameters are perturbed. With full backpropagation the
//! live objective is differenced directly.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SequenceConfig;
use crate::error::Result;
use crate::masker::{EncoderAlignment, MaskerConfig};
use crate::training::{
    batch_forward_backward, composite_total, twin_states, ModelConfig, TrainConfig, TrainingItem,
};
use crate::twinnet::{TwinBackprop, TwinOptions};

/// Deliberate-fault hook: when this environment variable is set to a
/// non-empty value, a constant is added to one analytic gradient entry
/// before comparison, so the check must fail and name that tensor.
pub const GRAD_FAULT_ENV: &str = "MADT_INJECT_GRAD_FAULT";

/// Outcome of a full sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Dotted name of the tensor holding the worst entry.
    pub worst_name: String,
    /// Flat index of the worst entry within that tensor.
    pub worst_index: usize,
    /// Number of parameters compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Architecture small enough to difference every parameter in seconds.
pub fn small_check_model(twin: TwinOptions) -> ModelConfig {
    ModelConfig {
        masker: MaskerConfig {
            n_bins: 16,
            trim_bins: 8,
            seq: SequenceConfig {
                total_len: 8,
                context: 2,
            },
            alignment: EncoderAlignment::Realigned,
        },
        twin,
    }
}

/// Sweeps every parameter of `model` (at a seeded initialization, on two
/// seeded random items) with step 1e-5 and returns the worst relative
/// error, `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
pub fn gradient_check_full(seed: u64, model: &ModelConfig) -> Result<GradCheckReport> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let t = model.masker.seq.total_len;
    let c = model.masker.seq.central_len();
    let n = model.masker.n_bins;
    let items: Vec<TrainingItem> = (0..2)
        .map(|_| TrainingItem {
            window: Array2::from_shape_fn((t, n), |_| rng.gen_range(0.2..1.2)),
            target: Array2::from_shape_fn((c, n), |_| rng.gen_range(0.2..1.5)),
        })
        .collect();
    let params = model.init(seed)?;
    let cfg = TrainConfig::default();
    let refs: Vec<&TrainingItem> = items.iter().collect();
    let (_, mut grads) = batch_forward_backward(&params, model, &cfg, &refs)?;

    if std::env::var_os(GRAD_FAULT_ENV).is_some_and(|v| !v.is_empty()) {
        grads.masker.w_mask[[0, 0]] += 1.0;
    }

    let frozen = if model.twin.enabled && model.twin.backprop == TwinBackprop::Stop {
        Some(twin_states(&params, model, &items)?)
    } else {
        None
    };

    let mut layout: Vec<(String, usize)> = Vec::new();
    params.visit(&mut |name, tensor| layout.push((name, tensor.len())));
    let analytic = grads.flatten();
    let theta0 = params.flatten();
    let h = 1e-5;

    let mut scratch = params.clone();
    let mut theta = theta0.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_name: "none".into(),
        worst_index: 0,
        checked: 0,
    };
    let mut at = 0;
    for (name, len) in &layout {
        for k in 0..*len {
            theta[at] = theta0[at] + h;
            scratch.assign_flat(&theta)?;
            let plus = composite_total(&scratch, model, &cfg, &items, frozen.as_deref())?;
            theta[at] = theta0[at] - h;
            scratch.assign_flat(&theta)?;
            let minus = composite_total(&scratch, model, &cfg, &items, frozen.as_deref())?;
            theta[at] = theta0[at];
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[at];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_name = name.clone();
                report.worst_index = k;
            }
            at += 1;
        }
    }
    report.checked = at;
    Ok(report)
}
