//! The regression head: three sigmoid dense layers and a linear output layer
//! producing, per mixture component, an unnormalized mean direction (3
//! values), a pre-softplus concentration, and a mixing logit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::mixture::{LossKind, VmfMixture};
use crate::sphere::{norm3, UnitVec3};
use crate::vmf::{self, VmfComponent, KAPPA_MAX};

pub const HIDDEN_LAYERS: usize = 3;
/// Raw outputs per component: mu_raw (3), kappa_raw, rho_logit.
pub const OUTPUTS_PER_COMPONENT: usize = 5;
pub const KAPPA_MIN: f64 = 1e-6;
/// Concentration produced by a freshly initialized head.
pub const INITIAL_KAPPA: f64 = 10.0;
const DEGENERATE_MU_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub input: usize,
    pub hidden: usize,
    pub components: usize,
}

impl HeadDims {
    pub fn new(input: usize, hidden: usize, components: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || components == 0 {
            return Err(Error::InvalidParameter(format!(
                "head dimensions must be positive, got ({input}, {hidden}, {components})"
            )));
        }
        Ok(HeadDims {
            input,
            hidden,
            components,
        })
    }

    pub fn outputs(&self) -> usize {
        OUTPUTS_PER_COMPONENT * self.components
    }

    /// `(fan_in, fan_out)` of each of the four dense layers.
    pub fn layer_shapes(&self) -> [(usize, usize); HIDDEN_LAYERS + 1] {
        let (d, h) = (self.input, self.hidden);
        [(d, h), (h, h), (h, h), (h, self.outputs())]
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }
}

impl std::fmt::Display for HeadDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.input, self.hidden, self.components)
    }
}

/// All trainable weights, stored flat as `W₁ b₁ W₂ b₂ W₃ b₃ W_out b_out`
/// with each `W` row-major (`fan_out × fan_in`).
///
/// The same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    dims: HeadDims,
    values: Vec<f64>,
}

/// Pre-activation outputs of one component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureRawOutput {
    pub mu_raw: [f64; 3],
    pub kappa_raw: f64,
    pub rho_logit: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inverse(y: f64) -> f64 {
    // log(e^y - 1)
    y + (-(-y).exp_m1()).ln()
}

impl HeadParams {
    pub fn zeros(dims: HeadDims) -> Self {
        HeadParams {
            dims,
            values: vec![0.0; dims.param_count()],
        }
    }

    pub fn from_values(dims: HeadDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.param_count() {
            return Err(Error::LengthMismatch {
                expected: dims.param_count(),
                actual: values.len(),
            });
        }
        Ok(HeadParams { dims, values })
    }

    /// Xavier-uniform weights, zero biases, and concentration biases set so
    /// every component starts near [`INITIAL_KAPPA`].
    pub fn init(seed: u64, dims: HeadDims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = HeadParams::zeros(dims);
        for (layer, (fan_in, fan_out)) in dims.layer_shapes().into_iter().enumerate() {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = params.layer_mut(layer);
            for v in w.iter_mut() {
                *v = rng.random_range(-a..a);
            }
        }
        let kappa_bias = softplus_inverse(INITIAL_KAPPA);
        let (_, b_out) = params.layer_mut(HIDDEN_LAYERS);
        for k in 0..dims.components {
            b_out[k * OUTPUTS_PER_COMPONENT + 3] = kappa_bias;
        }
        params
    }

    pub fn dims(&self) -> HeadDims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.dims.layer_shapes()[..layer]
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }

    /// `(weights, bias)` of dense layer `layer` (0..=3).
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = self.dims.layer_shapes()[layer];
        let start = self.layer_offset(layer);
        let (w, rest) = self.values[start..].split_at(fan_in * fan_out);
        (w, &rest[..fan_out])
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (fan_in, fan_out) = self.dims.layer_shapes()[layer];
        let start = self.layer_offset(layer);
        let (w, rest) = self.values[start..].split_at_mut(fan_in * fan_out);
        (w, &mut rest[..fan_out])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Activations kept from a forward pass for backpropagation.
struct Trace {
    nonzero: Vec<usize>,
    hidden: [Vec<f64>; HIDDEN_LAYERS],
    raw: Vec<MixtureRawOutput>,
}

fn check_input(f: &FeatureVector, w: &HeadParams) -> Result<()> {
    if f.dim() != w.dims.input {
        return Err(Error::DimensionMismatch {
            expected: w.dims.input,
            actual: f.dim(),
        });
    }
    Ok(())
}

fn dense(w: &[f64], b: &[f64], input: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    b.iter()
        .enumerate()
        .map(|(j, &bj)| {
            let row = &w[j * n_in..(j + 1) * n_in];
            bj + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
        })
        .collect()
}

fn run(f: &FeatureVector, w: &HeadParams) -> Trace {
    let x = f.as_slice();
    let nonzero: Vec<usize> = (0..x.len()).filter(|&i| x[i] != 0.0).collect();

    // first layer exploits sparsity of hashed features
    let (w1, b1) = w.layer(0);
    let d = w.dims.input;
    let h1: Vec<f64> = b1
        .iter()
        .enumerate()
        .map(|(j, &bj)| {
            let row = &w1[j * d..(j + 1) * d];
            sigmoid(bj + nonzero.iter().map(|&i| row[i] * x[i]).sum::<f64>())
        })
        .collect();
    let (w2, b2) = w.layer(1);
    let h2: Vec<f64> = dense(w2, b2, &h1).into_iter().map(sigmoid).collect();
    let (w3, b3) = w.layer(2);
    let h3: Vec<f64> = dense(w3, b3, &h2).into_iter().map(sigmoid).collect();
    let (wo, bo) = w.layer(3);
    let out = dense(wo, bo, &h3);
    let raw = out
        .chunks_exact(OUTPUTS_PER_COMPONENT)
        .map(|c| MixtureRawOutput {
            mu_raw: [c[0], c[1], c[2]],
            kappa_raw: c[3],
            rho_logit: c[4],
        })
        .collect();
    Trace {
        nonzero,
        hidden: [h1, h2, h3],
        raw,
    }
}

/// Raw output-layer values for `f`.
pub fn raw_outputs(f: &FeatureVector, w: &HeadParams) -> Result<Vec<MixtureRawOutput>> {
    check_input(f, w)?;
    Ok(run(f, w).raw)
}

fn kappa_of(raw: f64) -> (f64, f64) {
    let sp = softplus(raw);
    if sp <= KAPPA_MIN {
        (KAPPA_MIN, 0.0)
    } else if sp >= KAPPA_MAX {
        (KAPPA_MAX, 0.0)
    } else {
        (sp, sigmoid(raw))
    }
}

fn softmax(logits: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn mean_direction(mu_raw: [f64; 3]) -> Option<UnitVec3> {
    let n = norm3(mu_raw);
    if n < DEGENERATE_MU_NORM || !n.is_finite() {
        return None;
    }
    Some(UnitVec3::from_unit_unchecked([
        mu_raw[0] / n,
        mu_raw[1] / n,
        mu_raw[2] / n,
    ]))
}

/// Maps raw outputs to a valid mixture.
///
/// `μ = mu_raw/‖mu_raw‖` (a vanishing `mu_raw` falls back to the north pole),
/// `κ = softplus(kappa_raw)` clamped to `[KAPPA_MIN, KAPPA_MAX]`, and
/// `ρ = softmax(rho_logits)`.
pub fn mixture_from_raw(raw: &[MixtureRawOutput]) -> VmfMixture {
    let rho = softmax(raw.iter().map(|r| r.rho_logit));
    let components = raw
        .iter()
        .map(|r| VmfComponent {
            mu: mean_direction(r.mu_raw).unwrap_or(UnitVec3::NORTH_POLE),
            kappa: kappa_of(r.kappa_raw).0,
        })
        .collect();
    VmfMixture::new(components, rho).expect("softmax weights are a valid simplex point")
}

pub fn forward(f: &FeatureVector, w: &HeadParams) -> Result<VmfMixture> {
    Ok(mixture_from_raw(&raw_outputs(f, w)?))
}

/// Both per-observation loss values, computed in one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationLoss {
    pub weighted_nll: f64,
    pub mixture_nll: f64,
}

impl ObservationLoss {
    pub fn get(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::WeightedNll => self.weighted_nll,
            LossKind::MixtureNll => self.mixture_nll,
        }
    }
}

/// Adds `scale · ∂loss/∂W` for one observation into `grad`.
///
/// Returns both loss values at the current parameters.
pub fn accumulate_gradient(
    f: &FeatureVector,
    w: &HeadParams,
    target: UnitVec3,
    loss: LossKind,
    scale: f64,
    grad: &mut HeadParams,
) -> Result<ObservationLoss> {
    check_input(f, w)?;
    if grad.dims != w.dims {
        return Err(Error::ShapeMismatch {
            expected: w.dims.to_string(),
            actual: grad.dims.to_string(),
        });
    }
    let trace = run(f, w);
    let dims = w.dims;
    let k_count = dims.components;

    let rho = softmax(trace.raw.iter().map(|r| r.rho_logit));
    let mut log_f = Vec::with_capacity(k_count);
    let mut kappas = Vec::with_capacity(k_count);
    let mut mus = Vec::with_capacity(k_count);
    for r in &trace.raw {
        let mu = mean_direction(r.mu_raw);
        let (kappa, dkappa) = kappa_of(r.kappa_raw);
        let c = VmfComponent {
            mu: mu.unwrap_or(UnitVec3::NORTH_POLE),
            kappa,
        };
        log_f.push(c.log_density(target));
        kappas.push((kappa, dkappa));
        mus.push(mu);
    }

    let weighted_nll = -rho.iter().zip(&log_f).map(|(r, l)| r * l).sum::<f64>();
    let joint: Vec<f64> = rho.iter().zip(&log_f).map(|(r, l)| r.ln() + l).collect();
    let lse = crate::mixture::log_sum_exp(joint.iter().copied());
    let nll = -lse;

    // ∂loss/∂log f_k and ∂loss/∂logit_k
    let (d_logf, d_logit): (Vec<f64>, Vec<f64>) = match loss {
        LossKind::MixtureNll => {
            let resp: Vec<f64> = joint.iter().map(|j| (j - lse).exp()).collect();
            (
                resp.iter().map(|r| -r).collect(),
                rho.iter().zip(&resp).map(|(p, r)| p - r).collect(),
            )
        }
        LossKind::WeightedNll => {
            let mean_logf: f64 = rho.iter().zip(&log_f).map(|(r, l)| r * l).sum();
            (
                rho.iter().map(|r| -r).collect(),
                rho.iter()
                    .zip(&log_f)
                    .map(|(r, l)| -r * (l - mean_logf))
                    .collect(),
            )
        }
    };

    let mut d_out = vec![0.0; dims.outputs()];
    for k in 0..k_count {
        let base = k * OUTPUTS_PER_COMPONENT;
        let (kappa, dkappa) = kappas[k];
        if mus[k].is_some() {
            let g = vmf::grad_log_density(target, trace.raw[k].mu_raw, kappa);
            for a in 0..3 {
                d_out[base + a] = d_logf[k] * g.mu_raw[a];
            }
            d_out[base + 3] = d_logf[k] * g.kappa * dkappa;
        } else {
            let cos = UnitVec3::NORTH_POLE.dot(&target);
            d_out[base + 3] = d_logf[k] * (cos - vmf::mean_resultant_length(kappa)) * dkappa;
        }
        d_out[base + 4] = d_logit[k];
    }

    backprop(&trace, f.as_slice(), w, &d_out, scale, grad);
    Ok(ObservationLoss {
        weighted_nll,
        mixture_nll: nll,
    })
}

fn backprop(trace: &Trace, x: &[f64], w: &HeadParams, d_out: &[f64], scale: f64, grad: &mut HeadParams) {
    // delta holds ∂loss/∂(pre-activation) of the current layer
    let mut delta: Vec<f64> = d_out.to_vec();
    for layer in (0..=HIDDEN_LAYERS).rev() {
        let (fan_in, _) = w.dims.layer_shapes()[layer];
        {
            let (gw, gb) = grad.layer_mut(layer);
            if layer == 0 {
                for (j, &dj) in delta.iter().enumerate() {
                    gb[j] += scale * dj;
                    let row = &mut gw[j * fan_in..(j + 1) * fan_in];
                    for &i in &trace.nonzero {
                        row[i] += scale * dj * x[i];
                    }
                }
            } else {
                let input = &trace.hidden[layer - 1];
                for (j, &dj) in delta.iter().enumerate() {
                    gb[j] += scale * dj;
                    let row = &mut gw[j * fan_in..(j + 1) * fan_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += scale * dj * a;
                    }
                }
            }
        }
        if layer == 0 {
            break;
        }
        let (wl, _) = w.layer(layer);
        let h = &trace.hidden[layer - 1];
        let mut next = vec![0.0; fan_in];
        for (j, &dj) in delta.iter().enumerate() {
            let row = &wl[j * fan_in..(j + 1) * fan_in];
            for (n, a) in next.iter_mut().zip(row) {
                *n += dj * a;
            }
        }
        for (n, a) in next.iter_mut().zip(h) {
            *n *= a * (1.0 - a);
        }
        delta = next;
    }
}

/// Gradient of one observation's loss with respect to every parameter.
pub fn backward(
    f: &FeatureVector,
    w: &HeadParams,
    target: UnitVec3,
    loss: LossKind,
) -> Result<(ObservationLoss, HeadParams)> {
    let mut grad = HeadParams::zeros(w.dims);
    let l = accumulate_gradient(f, w, target, loss, 1.0, &mut grad)?;
    Ok((l, grad))
}

/// Loss of one observation without gradients.
pub fn observation_loss(f: &FeatureVector, w: &HeadParams, target: UnitVec3, loss: LossKind) -> Result<f64> {
    let m = forward(f, w)?;
    Ok(crate::mixture::observation_loss(target, &m, loss))
}
