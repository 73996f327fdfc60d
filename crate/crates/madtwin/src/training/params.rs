//! The full trainable parameter set: construction, initialization, named
//! traversal, and flat-vector views used by the optimizer and the
//! finite-difference checks.
//!
//! Every tensor has a stable dotted name (`masker.enc_fwd.w_ir`,
//! `twin.bridge.w`, ...) and the traversal order is fixed, so flattened
//! vectors, optimizer state, and checkpoints all agree on the layout.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::masker::MaskerParams;
use crate::rnn::GruParams;
use crate::twinnet::{TwinParams, TwinProjection};

/// Widths that determine every tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetDims {
    /// Spectral bins entering the masker and leaving every stage (`N`).
    pub n_bins: usize,
    /// Trimmed bins and recurrent width (`F`).
    pub trim_bins: usize,
}

impl NetDims {
    pub fn validate(&self) -> Result<()> {
        if self.trim_bins == 0 || self.n_bins == 0 {
            return Err(Error::InvalidArgument("bin counts must be positive".into()));
        }
        if self.trim_bins > self.n_bins {
            return Err(Error::InvalidArgument(format!(
                "trimmed width {} exceeds bin count {}",
                self.trim_bins, self.n_bins
            )));
        }
        Ok(())
    }
}

/// Borrowed view of one named tensor.
pub enum TensorRef<'a> {
    Mat(&'a Array2<f64>),
    Vec(&'a Array1<f64>),
}

impl<'a> TensorRef<'a> {
    pub fn len(&self) -> usize {
        match self {
            TensorRef::Mat(m) => m.len(),
            TensorRef::Vec(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major shape of the tensor.
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Mat(m) => m.shape().to_vec(),
            TensorRef::Vec(v) => vec![v.len()],
        }
    }

    /// Row-major contiguous values.
    pub fn as_slice(&self) -> &'a [f64] {
        match self {
            TensorRef::Mat(m) => m.as_slice().expect("parameters are standard layout"),
            TensorRef::Vec(v) => v.as_slice().expect("parameters are standard layout"),
        }
    }
}

/// Mutable view of one named tensor.
pub enum TensorMut<'a> {
    Mat(&'a mut Array2<f64>),
    Vec(&'a mut Array1<f64>),
}

impl TensorMut<'_> {
    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        match self {
            TensorMut::Mat(m) => m.as_slice_mut().expect("parameters are standard layout"),
            TensorMut::Vec(v) => v.as_slice_mut().expect("parameters are standard layout"),
        }
    }
}

/// All trainable weights of the pipeline.
///
/// Twin parameters are always materialized, including when the twin branch
/// is disabled for a run, so checkpoints and optimizer state keep one layout
/// per architecture.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub masker: MaskerParams,
    pub twin: TwinParams,
    pub denoiser: DenoiserParams,
}

fn visit_gru<'a>(prefix: &str, g: &'a GruParams, f: &mut dyn FnMut(String, TensorRef<'a>)) {
    f(format!("{prefix}.w_ir"), TensorRef::Mat(&g.w_ir));
    f(format!("{prefix}.w_iz"), TensorRef::Mat(&g.w_iz));
    f(format!("{prefix}.w_in"), TensorRef::Mat(&g.w_in));
    f(format!("{prefix}.w_hr"), TensorRef::Mat(&g.w_hr));
    f(format!("{prefix}.w_hz"), TensorRef::Mat(&g.w_hz));
    f(format!("{prefix}.w_hn"), TensorRef::Mat(&g.w_hn));
    f(format!("{prefix}.b_r"), TensorRef::Vec(&g.b_r));
    f(format!("{prefix}.b_z"), TensorRef::Vec(&g.b_z));
    f(format!("{prefix}.b_n"), TensorRef::Vec(&g.b_n));
}

fn visit_gru_mut<'a>(
    prefix: &str,
    g: &'a mut GruParams,
    f: &mut dyn FnMut(String, TensorMut<'a>),
) {
    f(format!("{prefix}.w_ir"), TensorMut::Mat(&mut g.w_ir));
    f(format!("{prefix}.w_iz"), TensorMut::Mat(&mut g.w_iz));
    f(format!("{prefix}.w_in"), TensorMut::Mat(&mut g.w_in));
    f(format!("{prefix}.w_hr"), TensorMut::Mat(&mut g.w_hr));
    f(format!("{prefix}.w_hz"), TensorMut::Mat(&mut g.w_hz));
    f(format!("{prefix}.w_hn"), TensorMut::Mat(&mut g.w_hn));
    f(format!("{prefix}.b_r"), TensorMut::Vec(&mut g.b_r));
    f(format!("{prefix}.b_z"), TensorMut::Vec(&mut g.b_z));
    f(format!("{prefix}.b_n"), TensorMut::Vec(&mut g.b_n));
}

impl ParameterSet {
    /// All-zero parameters, also the shape template for gradients.
    pub fn zeros(dims: &NetDims, twin_shares_projection: bool) -> Result<Self> {
        dims.validate()?;
        Ok(ParameterSet {
            masker: MaskerParams::zeros(dims.trim_bins, dims.n_bins),
            twin: TwinParams::zeros(dims.trim_bins, dims.n_bins, twin_shares_projection),
            denoiser: DenoiserParams::zeros(dims.n_bins),
        })
    }

    pub fn dims(&self) -> NetDims {
        NetDims {
            n_bins: self.masker.w_mask.ncols(),
            trim_bins: self.masker.w_mask.nrows(),
        }
    }

    pub fn twin_shares_projection(&self) -> bool {
        self.twin.proj.is_none()
    }

    /// Visits every tensor with its dotted name, in the fixed layout order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        visit_gru("masker.enc_fwd", &self.masker.enc_fwd, f);
        visit_gru("masker.enc_bwd", &self.masker.enc_bwd, f);
        visit_gru("masker.dec", &self.masker.dec, f);
        f("masker.proj.w".into(), TensorRef::Mat(&self.masker.w_mask));
        f("masker.proj.b".into(), TensorRef::Vec(&self.masker.b_mask));
        visit_gru("twin.dec", &self.twin.dec, f);
        if let Some(p) = &self.twin.proj {
            f("twin.proj.w".into(), TensorRef::Mat(&p.w));
            f("twin.proj.b".into(), TensorRef::Vec(&p.b));
        }
        f("twin.bridge.w".into(), TensorRef::Mat(&self.twin.bridge_w));
        f("twin.bridge.b".into(), TensorRef::Vec(&self.twin.bridge_b));
        f("denoiser.enc.w".into(), TensorRef::Mat(&self.denoiser.w_enc));
        f("denoiser.enc.b".into(), TensorRef::Vec(&self.denoiser.b_enc));
        f("denoiser.dec.w".into(), TensorRef::Mat(&self.denoiser.w_dec));
        f("denoiser.dec.b".into(), TensorRef::Vec(&self.denoiser.b_dec));
    }

    /// Mutable traversal in the same order as [`ParameterSet::visit`].
    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, TensorMut<'a>)) {
        visit_gru_mut("masker.enc_fwd", &mut self.masker.enc_fwd, f);
        visit_gru_mut("masker.enc_bwd", &mut self.masker.enc_bwd, f);
        visit_gru_mut("masker.dec", &mut self.masker.dec, f);
        f(
            "masker.proj.w".into(),
            TensorMut::Mat(&mut self.masker.w_mask),
        );
        f(
            "masker.proj.b".into(),
            TensorMut::Vec(&mut self.masker.b_mask),
        );
        visit_gru_mut("twin.dec", &mut self.twin.dec, f);
        if let Some(p) = &mut self.twin.proj {
            f("twin.proj.w".into(), TensorMut::Mat(&mut p.w));
            f("twin.proj.b".into(), TensorMut::Vec(&mut p.b));
        }
        f(
            "twin.bridge.w".into(),
            TensorMut::Mat(&mut self.twin.bridge_w),
        );
        f(
            "twin.bridge.b".into(),
            TensorMut::Vec(&mut self.twin.bridge_b),
        );
        f(
            "denoiser.enc.w".into(),
            TensorMut::Mat(&mut self.denoiser.w_enc),
        );
        f(
            "denoiser.enc.b".into(),
            TensorMut::Vec(&mut self.denoiser.b_enc),
        );
        f(
            "denoiser.dec.w".into(),
            TensorMut::Mat(&mut self.denoiser.w_dec),
        );
        f(
            "denoiser.dec.b".into(),
            TensorMut::Vec(&mut self.denoiser.b_dec),
        );
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Concatenates all tensors into one row-major vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        self.visit(&mut |_, t| out.extend_from_slice(t.as_slice()));
        out
    }

    /// Writes a flat vector produced by [`ParameterSet::flatten`] back.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::InvalidArgument(format!(
                "flat vector has {} entries, parameters need {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut at = 0;
        self.visit_mut(&mut |_, mut t| {
            let dst = t.as_slice_mut();
            dst.copy_from_slice(&flat[at..at + dst.len()]);
            at += dst.len();
        });
        Ok(())
    }

    /// Elementwise accumulation; shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        let mut slices: Vec<&[f64]> = Vec::new();
        other.visit(&mut |_, t| slices.push(t.as_slice()));
        let mut i = 0;
        self.visit_mut(&mut |_, mut t| {
            let dst = t.as_slice_mut();
            for (d, s) in dst.iter_mut().zip(slices[i]) {
                *d += s;
            }
            i += 1;
        });
    }

    /// Multiplies every parameter by a constant.
    pub fn scale(&mut self, c: f64) {
        self.visit_mut(&mut |_, mut t| {
            for v in t.as_slice_mut() {
                *v *= c;
            }
        });
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| {
            if t.as_slice().iter().any(|v| !v.is_finite()) {
                ok = false;
            }
        });
        ok
    }

    /// Largest absolute entrywise difference, for change detection in tests.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let a = self.flatten();
        let b = other.flatten();
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// A random matrix with orthonormal columns (and rows; it is square),
/// obtained from the QR factorization of a standard normal matrix with the
/// sign convention that makes the factor unique.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let mut r = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(rng));
    // Householder QR: collect the reflectors, then apply them to the
    // identity in reverse to form Q.
    let mut reflectors: Vec<(usize, Vec<f64>)> = Vec::new();
    for k in 0..n {
        let norm: f64 = (k..n).map(|i| r[[i, k]] * r[[i, k]]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[[k, k]] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| r[[i, k]]).collect();
        v[0] -= alpha;
        let vnorm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm < 1e-300 {
            continue;
        }
        for x in &mut v {
            *x /= vnorm;
        }
        for j in k..n {
            let dot: f64 = (k..n).map(|i| v[i - k] * r[[i, j]]).sum();
            for i in k..n {
                r[[i, j]] -= 2.0 * v[i - k] * dot;
            }
        }
        reflectors.push((k, v));
    }
    let mut q = Array2::<f64>::eye(n);
    for (k, v) in reflectors.iter().rev() {
        for j in 0..n {
            let dot: f64 = (*k..n).map(|i| v[i - k] * q[[i, j]]).sum();
            for i in *k..n {
                q[[i, j]] -= 2.0 * v[i - k] * dot;
            }
        }
    }
    // Make the factorization unique: flip columns where the triangular
    // factor has a negative diagonal.
    for j in 0..n {
        if r[[j, j]] < 0.0 {
            for i in 0..n {
                q[[i, j]] = -q[[i, j]];
            }
        }
    }
    q
}

fn glorot_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn init_gru(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> GruParams {
    GruParams {
        w_ir: glorot_normal(rng, input, hidden),
        w_iz: glorot_normal(rng, input, hidden),
        w_in: glorot_normal(rng, input, hidden),
        w_hr: random_orthogonal(rng, hidden),
        w_hz: random_orthogonal(rng, hidden),
        w_hn: random_orthogonal(rng, hidden),
        b_r: Array1::zeros(hidden),
        b_z: Array1::zeros(hidden),
        b_n: Array1::zeros(hidden),
    }
}

/// Seeded initialization: recurrent (hidden-to-hidden) matrices are random
/// orthogonal per gate, every other weight matrix is Glorot normal, and all
/// biases start at zero.
pub fn init_parameters(
    seed: u64,
    dims: &NetDims,
    twin_shares_projection: bool,
) -> Result<ParameterSet> {
    dims.validate()?;
    let f = dims.trim_bins;
    let n = dims.n_bins;
    let hidden = DenoiserParams::bottleneck(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ParameterSet {
        masker: MaskerParams {
            enc_fwd: init_gru(&mut rng, f, f),
            enc_bwd: init_gru(&mut rng, f, f),
            dec: init_gru(&mut rng, 2 * f, f),
            w_mask: glorot_normal(&mut rng, f, n),
            b_mask: Array1::zeros(n),
        },
        twin: TwinParams {
            dec: init_gru(&mut rng, 2 * f, f),
            proj: if twin_shares_projection {
                None
            } else {
                Some(TwinProjection {
                    w: glorot_normal(&mut rng, f, n),
                    b: Array1::zeros(n),
                })
            },
            bridge_w: glorot_normal(&mut rng, f, f),
            bridge_b: Array1::zeros(f),
        },
        denoiser: DenoiserParams {
            w_enc: glorot_normal(&mut rng, n, hidden),
            b_enc: Array1::zeros(hidden),
            w_dec: glorot_normal(&mut rng, hidden, n),
            b_dec: Array1::zeros(n),
        },
    })
}
