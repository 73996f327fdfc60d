//! Gated recurrent unit over full sequences, with a hand-written backward
//! pass.
//!
//! Conventions: row vectors and `x * W` projections, update gate `z`, reset
//! gate `r`, candidate `n`, and the reset applied to the recurrent side of
//! the candidate before its bias:
//!
//! ```text
//! r_t = sigmoid(x_t W_ir + h_{t-1} W_hr + b_r)
//! z_t = sigmoid(x_t W_iz + h_{t-1} W_hz + b_z)
//! n_t = tanh(x_t W_in + r_t * (h_{t-1} W_hn) + b_n)
//! h_t = (1 - z_t) * n_t + z_t * h_{t-1}
//! ```
//!
//! The initial state is zero, so every state entry stays in [-1, 1]: each
//! step is a convex combination of the previous state and a tanh output.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Weights for one GRU direction.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_ir: Array2<f64>,
    pub w_iz: Array2<f64>,
    pub w_in: Array2<f64>,
    pub w_hr: Array2<f64>,
    pub w_hz: Array2<f64>,
    pub w_hn: Array2<f64>,
    pub b_r: Array1<f64>,
    pub b_z: Array1<f64>,
    pub b_n: Array1<f64>,
}

impl GruParams {
    /// All-zero parameters, also used as a gradient accumulator.
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_ir: Array2::zeros((input, hidden)),
            w_iz: Array2::zeros((input, hidden)),
            w_in: Array2::zeros((input, hidden)),
            w_hr: Array2::zeros((hidden, hidden)),
            w_hz: Array2::zeros((hidden, hidden)),
            w_hn: Array2::zeros((hidden, hidden)),
            b_r: Array1::zeros(hidden),
            b_z: Array1::zeros(hidden),
            b_n: Array1::zeros(hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ir.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ir.ncols()
    }
}

/// Per-step activations saved by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct GruCache {
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    /// Recurrent candidate projection `h_{t-1} W_hn`, needed for the reset
    /// gate's gradient.
    hn_lin: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Runs the GRU over `inputs` (`steps x input_dim`) from a zero initial
/// state. Returns the state sequence (`steps x hidden_dim`) and the cache
/// for [`gru_backward`].
pub fn gru_forward(params: &GruParams, inputs: &Array2<f64>) -> Result<(Array2<f64>, GruCache)> {
    let steps = inputs.nrows();
    let hidden = params.hidden_dim();
    if inputs.ncols() != params.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "input dim {} does not match GRU input dim {}",
            inputs.ncols(),
            params.input_dim()
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("empty input sequence".into()));
    }

    // Input-side projections for every step at once.
    let xr = inputs.dot(&params.w_ir);
    let xz = inputs.dot(&params.w_iz);
    let xn = inputs.dot(&params.w_in);

    let mut states = Array2::<f64>::zeros((steps, hidden));
    let mut cache = GruCache {
        r: Array2::zeros((steps, hidden)),
        z: Array2::zeros((steps, hidden)),
        n: Array2::zeros((steps, hidden)),
        hn_lin: Array2::zeros((steps, hidden)),
    };
    let mut h = Array1::<f64>::zeros(hidden);
    for t in 0..steps {
        let hr = h.dot(&params.w_hr);
        let hz = h.dot(&params.w_hz);
        let hn = h.dot(&params.w_hn);
        for k in 0..hidden {
            let r = sigmoid(xr[[t, k]] + hr[k] + params.b_r[k]);
            let z = sigmoid(xz[[t, k]] + hz[k] + params.b_z[k]);
            let n = (xn[[t, k]] + r * hn[k] + params.b_n[k]).tanh();
            cache.r[[t, k]] = r;
            cache.z[[t, k]] = z;
            cache.n[[t, k]] = n;
            cache.hn_lin[[t, k]] = hn[k];
            states[[t, k]] = (1.0 - z) * n + z * h[k];
        }
        h.assign(&states.row(t));
    }
    Ok((states, cache))
}

/// Backpropagates through a GRU run.
///
/// `d_states` holds the loss gradient with respect to each output state from
/// its direct consumers; the recurrent flow between steps is handled here.
/// Returns the parameter gradients and the gradient with respect to the
/// inputs.
pub fn gru_backward(
    params: &GruParams,
    inputs: &Array2<f64>,
    states: &Array2<f64>,
    cache: &GruCache,
    d_states: &Array2<f64>,
) -> (GruParams, Array2<f64>) {
    let steps = inputs.nrows();
    let hidden = params.hidden_dim();

    let mut dpre_r = Array2::<f64>::zeros((steps, hidden));
    let mut dpre_z = Array2::<f64>::zeros((steps, hidden));
    let mut dpre_n = Array2::<f64>::zeros((steps, hidden));
    let mut dhn = Array2::<f64>::zeros((steps, hidden));

    let mut carry = Array1::<f64>::zeros(hidden);
    for t in (0..steps).rev() {
        let mut next_carry = Array1::<f64>::zeros(hidden);
        for k in 0..hidden {
            let dh = d_states[[t, k]] + carry[k];
            let h_prev = if t > 0 { states[[t - 1, k]] } else { 0.0 };
            let r = cache.r[[t, k]];
            let z = cache.z[[t, k]];
            let n = cache.n[[t, k]];
            let hn = cache.hn_lin[[t, k]];

            let dn = dh * (1.0 - z);
            let dz = dh * (h_prev - n);
            next_carry[k] = dh * z;

            let dpn = dn * (1.0 - n * n);
            let dr = dpn * hn;
            dhn[[t, k]] = dpn * r;
            dpre_n[[t, k]] = dpn;
            dpre_z[[t, k]] = dz * z * (1.0 - z);
            dpre_r[[t, k]] = dr * r * (1.0 - r);
        }
        // Recurrent flow into h_{t-1} through the three projections.
        next_carry += &dpre_r.row(t).dot(&params.w_hr.t());
        next_carry += &dpre_z.row(t).dot(&params.w_hz.t());
        next_carry += &dhn.row(t).dot(&params.w_hn.t());
        carry = next_carry;
    }

    // States shifted one step: row t holds h_{t-1}, with a zero first row.
    let mut h_prevs = Array2::<f64>::zeros((steps, hidden));
    for t in 1..steps {
        h_prevs.row_mut(t).assign(&states.row(t - 1));
    }

    let grads = GruParams {
        w_ir: inputs.t().dot(&dpre_r),
        w_iz: inputs.t().dot(&dpre_z),
        w_in: inputs.t().dot(&dpre_n),
        w_hr: h_prevs.t().dot(&dpre_r),
        w_hz: h_prevs.t().dot(&dpre_z),
        w_hn: h_prevs.t().dot(&dhn),
        b_r: dpre_r.sum_axis(Axis(0)),
        b_z: dpre_z.sum_axis(Axis(0)),
        b_n: dpre_n.sum_axis(Axis(0)),
    };
    let d_inputs =
        dpre_r.dot(&params.w_ir.t()) + dpre_z.dot(&params.w_iz.t()) + dpre_n.dot(&params.w_in.t());
    (grads, d_inputs)
}
