//! Two-hidden-layer tanh MLP with a policy head and a block of value heads,
//! exact backpropagation, Adam, and generalized advantage estimation.
//!
//! Parameters live in one flat `Vec<f64>` so that the optimizer and the
//! checkpoint format treat them uniformly. Layout, row-major:
//!
//! ```text
//! W1 [h1 x in]  b1 [h1]
//! W2 [h2 x h1]  b2 [h2]
//! Wp [A x h2]   bp [A]     policy logits
//! Wv [V x h2]   bv [V]     value heads
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub num_actions: usize,
    pub num_values: usize,
}

impl MlpShape {
    pub fn new(input_dim: usize, hidden: [usize; 2], num_actions: usize, num_values: usize) -> Self {
        Self { input_dim, hidden, num_actions, num_values }
    }

    fn offsets(&self) -> Offsets {
        let [h1, h2] = self.hidden;
        let w1 = 0;
        let b1 = w1 + h1 * self.input_dim;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let wp = b2 + h2;
        let bp = wp + self.num_actions * h2;
        let wv = bp + self.num_actions;
        let bv = wv + self.num_values * h2;
        let len = bv + self.num_values;
        Offsets { w1, b1, w2, b2, wp, bp, wv, bv, len }
    }

    pub fn num_params(&self) -> usize {
        self.offsets().len
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wp: usize,
    bp: usize,
    wv: usize,
    bv: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    shape: MlpShape,
    pub data: Vec<f64>,
}

/// Accumulated gradients, laid out like [`MlpParams::data`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub data: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(shape: &MlpShape) -> Self {
        Self { data: vec![0.0; shape.num_params()] }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub logits: Vec<f64>,
    pub values: Vec<f64>,
}

/// Matrix with orthonormal rows (or columns, whichever is fewer), scaled.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut CounterRng) -> Vec<f64> {
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.gaussian()).collect();
        for u in &vecs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = gain * if rows <= cols { vecs[i][j] } else { vecs[j][i] };
        }
    }
    out
}

impl MlpParams {
    pub fn zeros(shape: MlpShape) -> Self {
        Self { shape, data: vec![0.0; shape.num_params()] }
    }

    /// Orthogonal weights (gain `sqrt 2` on hidden layers, 0.01 on the policy
    /// head, 1 on value heads), zero biases.
    pub fn init(shape: MlpShape, rng: &mut CounterRng) -> Self {
        let mut p = Self::zeros(shape);
        let o = shape.offsets();
        let [h1, h2] = shape.hidden;
        let blocks = [
            (o.w1, h1, shape.input_dim, std::f64::consts::SQRT_2),
            (o.w2, h2, h1, std::f64::consts::SQRT_2),
            (o.wp, shape.num_actions, h2, 0.01),
            (o.wv, shape.num_values, h2, 1.0),
        ];
        for (off, r, c, gain) in blocks {
            if r > 0 && c > 0 {
                p.data[off..off + r * c].copy_from_slice(&orthogonal(r, c, gain, rng));
            }
        }
        p
    }

    pub fn from_data(shape: MlpShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.num_params() {
            return Err(Error::LengthMismatch { expected: shape.num_params(), actual: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn forward(&self, observation: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut cache = ForwardCache::default();
        self.forward_cached(observation, &mut cache)?;
        Ok((cache.logits, cache.values))
    }

    pub fn forward_cached(&self, observation: &[f64], cache: &mut ForwardCache) -> Result<()> {
        let s = &self.shape;
        if observation.len() != s.input_dim {
            return Err(Error::DimensionMismatch { expected: s.input_dim, actual: observation.len() });
        }
        let o = s.offsets();
        let [h1, h2] = s.hidden;
        let d = &self.data;
        cache.input.clear();
        cache.input.extend_from_slice(observation);
        dense(&d[o.w1..o.b1], &d[o.b1..o.w2], observation, h1, &mut cache.h1);
        cache.h1.iter_mut().for_each(|x| *x = x.tanh());
        dense(&d[o.w2..o.b2], &d[o.b2..o.wp], &cache.h1, h2, &mut cache.h2);
        cache.h2.iter_mut().for_each(|x| *x = x.tanh());
        dense(&d[o.wp..o.bp], &d[o.bp..o.wv], &cache.h2, s.num_actions, &mut cache.logits);
        dense(&d[o.wv..o.bv], &d[o.bv..o.len], &cache.h2, s.num_values, &mut cache.values);
        Ok(())
    }

    /// Accumulates `dL/dtheta` into `grads` given `dL/dlogits` and
    /// `dL/dvalues` at the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], dvalues: &[f64], grads: &mut GradientBuffer) {
        let s = &self.shape;
        let o = s.offsets();
        let [h1, h2] = s.hidden;
        let d = &self.data;
        let g = &mut grads.data;
        assert_eq!(dlogits.len(), s.num_actions);
        assert_eq!(dvalues.len(), s.num_values);

        let mut dh2 = vec![0.0; h2];
        for (a, &up) in dlogits.iter().enumerate() {
            if up == 0.0 {
                continue;
            }
            let row = o.wp + a * h2;
            for j in 0..h2 {
                g[row + j] += up * cache.h2[j];
                dh2[j] += up * d[row + j];
            }
            g[o.bp + a] += up;
        }
        for (v, &up) in dvalues.iter().enumerate() {
            if up == 0.0 {
                continue;
            }
            let row = o.wv + v * h2;
            for j in 0..h2 {
                g[row + j] += up * cache.h2[j];
                dh2[j] += up * d[row + j];
            }
            g[o.bv + v] += up;
        }
        // through tanh: d pre = d post * (1 - post^2)
        for j in 0..h2 {
            dh2[j] *= 1.0 - cache.h2[j] * cache.h2[j];
        }
        let mut dh1 = vec![0.0; h1];
        for (i, &up) in dh2.iter().enumerate() {
            let row = o.w2 + i * h1;
            for j in 0..h1 {
                g[row + j] += up * cache.h1[j];
                dh1[j] += up * d[row + j];
            }
            g[o.b2 + i] += up;
        }
        for j in 0..h1 {
            dh1[j] *= 1.0 - cache.h1[j] * cache.h1[j];
        }
        let n = s.input_dim;
        for (i, &up) in dh1.iter().enumerate() {
            let row = o.w1 + i * n;
            for j in 0..n {
                g[row + j] += up * cache.input[j];
            }
            g[o.b1 + i] += up;
        }
    }

    /// Binary checkpoint: `u64 LE header length`, JSON header
    /// `{"shape": MlpShape, "len": n}`, then `n` little-endian `f64`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader { shape: self.shape, len: self.data.len() }).expect("header");
        let mut out = Vec::with_capacity(8 + header.len() + 8 * self.data.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Parse("checkpoint truncated".into());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(short)?.try_into().expect("8 bytes");
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| short())?;
        let header_end = 8usize.checked_add(header_len).ok_or_else(short)?;
        let header: CheckpointHeader = serde_json::from_slice(bytes.get(8..header_end).ok_or_else(short)?)?;
        let s = header.shape;
        let expected = s
            .input_dim
            .checked_mul(s.hidden[0])
            .and_then(|_| s.hidden[0].checked_mul(s.hidden[1]))
            .and_then(|_| s.num_actions.checked_add(s.num_values))
            .and_then(|av| av.checked_mul(s.hidden[1] + 1))
            .map(|_| s.num_params())
            .ok_or_else(|| Error::Parse("checkpoint shape overflows".into()))?;
        if header.len != expected {
            return Err(Error::LengthMismatch { expected, actual: header.len });
        }
        let body = &bytes[header_end..];
        if body.len() != expected.checked_mul(8).ok_or_else(short)? {
            return Err(Error::LengthMismatch { expected: expected * 8, actual: body.len() });
        }
        let data: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse("non-finite weight in checkpoint".into()));
        }
        Self::from_data(s, data)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    shape: MlpShape,
    len: usize,
}

fn dense(w: &[f64], b: &[f64], x: &[f64], rows: usize, out: &mut Vec<f64>) {
    let cols = x.len();
    out.clear();
    out.extend((0..rows).map(|i| {
        let row = &w[i * cols..(i + 1) * cols];
        b[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }));
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::LengthMismatch { expected: self.m.len(), actual: grads.len() });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}` by backward recursion, with
/// `delta_t = r_t + gamma V_{t+1} - V_t`. `values` has one more entry than
/// `rewards` (the bootstrap value, 0 at episode end).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::LengthMismatch { expected: rewards.len() + 1, actual: values.len() });
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    Ok(adv)
}
