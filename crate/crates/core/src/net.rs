//! Small dense networks with hand-written reverse mode.
//!
//! Parameters live in one flat `Vec<f64>` per module so optimizers,
//! checkpoints and gradient buffers are plain slices. Layer `l` stores its
//! weight matrix row-major (`out × in`) followed by its bias.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize, n: usize, scale: f64) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| scale * rng.random_range(-a..=a)).collect()
}

/// Feed-forward net: tanh hidden layers, linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Per-layer inputs recorded by [`Mlp::forward`]. `acts[0]` is the network
/// input and `acts[l]` the (post-tanh) input of layer `l`.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases; output layer scaled by `out_scale`.
    pub fn new(sizes: &[usize], rng: &mut Rng, out_scale: f64) -> Mlp {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let mut params = Vec::new();
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (i, o) = (sizes[l], sizes[l + 1]);
            let scale = if l + 1 == layers { out_scale } else { 1.0 };
            params.extend(glorot(rng, i, o, i * o, scale));
            params.extend(std::iter::repeat_n(0.0, o));
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn zeros(sizes: &[usize]) -> Mlp {
        let n = Self::count(sizes);
        Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        }
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Mlp> {
        let n = Self::count(sizes);
        if params.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: params.len(),
                context: "mlp parameters".into(),
            });
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.len(),
                context: "mlp input".into(),
            });
        }
        Ok(())
    }

    fn run(&self, x: &[f64], mut cache: Option<&mut MlpCache>) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut off = 0;
        let mut cur = x.to_vec();
        for l in 0..layers {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + ni * no];
            let b = &self.params[off + ni * no..off + ni * no + no];
            off += ni * no + no;
            let mut y: Vec<f64> = w
                .chunks_exact(ni)
                .zip(b)
                .map(|(row, bi)| bi + row.iter().zip(&cur).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if l + 1 < layers {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            if let Some(c) = cache.as_deref_mut() {
                c.acts.push(std::mem::replace(&mut cur, y));
            } else {
                cur = y;
            }
        }
        cur
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        self.check_input(x)?;
        let mut cache = MlpCache {
            acts: Vec::with_capacity(self.sizes.len()),
        };
        let y = self.run(x, Some(&mut cache));
        Ok((y, cache))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.run(x, None))
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    /// The cache must come from a forward pass on these same parameters.
    pub fn backward_into(&self, cache: &MlpCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        self.backprop(cache, dy, grad, true)
    }

    /// Like [`Mlp::backward_into`] but skips the input gradient.
    pub fn accumulate_grad(&self, cache: &MlpCache, dy: &[f64], grad: &mut [f64]) {
        self.backprop(cache, dy, grad, false);
    }

    fn backprop(&self, cache: &MlpCache, dy: &[f64], grad: &mut [f64], want_dx: bool) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        let layers = self.sizes.len() - 1;
        let mut offs = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offs.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = dy.to_vec();
        for l in (0..layers).rev() {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let o = offs[l];
            let input = &cache.acts[l];
            let (gw, gb) = grad[o..o + ni * no + no].split_at_mut(ni * no);
            for ((grow, gbi), &d) in gw.chunks_exact_mut(ni).zip(gb.iter_mut()).zip(&delta) {
                *gbi += d;
                if d != 0.0 {
                    for (g, x) in grow.iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            if l == 0 && !want_dx {
                return Vec::new();
            }
            let w = &self.params[o..o + ni * no];
            let mut dx = vec![0.0; ni];
            for (row, &d) in w.chunks_exact(ni).zip(&delta) {
                if d != 0.0 {
                    for (acc, wij) in dx.iter_mut().zip(row) {
                        *acc += wij * d;
                    }
                }
            }
            if l > 0 {
                // input of layer l is tanh output of layer l-1
                for (v, a) in dx.iter_mut().zip(input) {
                    *v *= 1.0 - a * a;
                }
            }
            delta = dx;
        }
        delta
    }

    /// Fresh gradient vector for `(p, cache, dy)`; returns `(dparams, dx)`.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = vec![0.0; self.params.len()];
        let dx = self.backward_into(cache, dy, &mut g);
        (g, dx)
    }
}

/// Single-head scaled dot-product self-attention over `n` tokens.
///
/// Parameters: `Wq`, `Wk`, `Wv`, each `d_k × d_in` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub d_in: usize,
    pub d_k: usize,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct AttnCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    a: Vec<f64>,
    n: usize,
}

fn proj(w: &[f64], x: &[f64], n: usize, d_in: usize, d_k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d_k];
    for t in 0..n {
        let xt = &x[t * d_in..(t + 1) * d_in];
        for (j, row) in w.chunks_exact(d_in).enumerate() {
            out[t * d_k + j] = row.iter().zip(xt).map(|(a, b)| a * b).sum();
        }
    }
    out
}

impl Attention {
    pub fn new(d_in: usize, d_k: usize, rng: &mut Rng) -> Attention {
        Attention {
            d_in,
            d_k,
            params: glorot(rng, d_in, d_k, 3 * d_in * d_k, 1.0),
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn mats(&self) -> (&[f64], &[f64], &[f64]) {
        let m = self.d_in * self.d_k;
        (&self.params[..m], &self.params[m..2 * m], &self.params[2 * m..])
    }

    /// `x` is `n × d_in` row-major; output is `n × d_k`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, AttnCache)> {
        if x.is_empty() || x.len() % self.d_in != 0 {
            return Err(Error::Shape {
                expected: self.d_in,
                got: x.len(),
                context: "attention tokens".into(),
            });
        }
        let n = x.len() / self.d_in;
        let (wq, wk, wv) = self.mats();
        let q = proj(wq, x, n, self.d_in, self.d_k);
        let k = proj(wk, x, n, self.d_in, self.d_k);
        let v = proj(wv, x, n, self.d_in, self.d_k);
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let dk = self.d_k;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            let row = &mut a[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] = scale
                    * q[i * dk..(i + 1) * dk]
                        .iter()
                        .zip(&k[j * dk..(j + 1) * dk])
                        .map(|(x, y)| x * y)
                        .sum::<f64>();
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let mut out = vec![0.0; n * dk];
        for i in 0..n {
            for j in 0..n {
                let aij = a[i * n + j];
                for c in 0..dk {
                    out[i * dk + c] += aij * v[j * dk + c];
                }
            }
        }
        Ok((
            out,
            AttnCache {
                x: x.to_vec(),
                q,
                k,
                v,
                a,
                n,
            },
        ))
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx`.
    pub fn backward_into(&self, c: &AttnCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (n, dk, di) = (c.n, self.d_k, self.d_in);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dv = vec![0.0; n * dk];
        let mut da = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for col in 0..dk {
                    dv[j * dk + col] += c.a[i * n + j] * dy[i * dk + col];
                    s += dy[i * dk + col] * c.v[j * dk + col];
                }
                da[i * n + j] = s;
            }
        }
        // softmax backward, then through the scaled scores
        let mut dq = vec![0.0; n * dk];
        let mut dkm = vec![0.0; n * dk];
        for i in 0..n {
            let row = &c.a[i * n..(i + 1) * n];
            let dot: f64 = row.iter().zip(&da[i * n..(i + 1) * n]).map(|(a, d)| a * d).sum();
            for j in 0..n {
                let ds = row[j] * (da[i * n + j] - dot) * scale;
                for col in 0..dk {
                    dq[i * dk + col] += ds * c.k[j * dk + col];
                    dkm[j * dk + col] += ds * c.q[i * dk + col];
                }
            }
        }
        let m = di * dk;
        let mut dx = vec![0.0; n * di];
        for (which, dproj) in [&dq, &dkm, &dv].into_iter().enumerate() {
            let w = &self.params[which * m..(which + 1) * m];
            let g = &mut grad[which * m..(which + 1) * m];
            for t in 0..n {
                let xt = &c.x[t * di..(t + 1) * di];
                for j in 0..dk {
                    let d = dproj[t * dk + j];
                    let (grow, wrow) = (&mut g[j * di..(j + 1) * di], &w[j * di..(j + 1) * di]);
                    for e in 0..di {
                        grow[e] += d * xt[e];
                        dx[t * di + e] += d * wrow[e];
                    }
                }
            }
        }
        dx
    }
}

/// Adam moments and step count for one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update in place. Rejects non-finite results.
pub fn adam_step(p: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if p.len() != grads.len() || p.len() != state.m.len() {
        return Err(Error::Shape {
            expected: p.len(),
            got: grads.len(),
            context: "adam step".into(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.t += 1;
    let b1t = 1.0 - cfg.beta1.powi(state.t as i32);
    let b2t = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..p.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / b1t;
        let vh = state.v[i] / b2t;
        p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameters after adam step".into()));
    }
    Ok(())
}

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Diagonal Gaussian policy around an MLP mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(mean: Mlp, log_std: Vec<f64>) -> Result<Self> {
        if log_std.len() != mean.output_dim() {
            return Err(Error::Shape {
                expected: mean.output_dim(),
                got: log_std.len(),
                context: "log_std".into(),
            });
        }
        let mut p = GaussianPolicy { mean, log_std };
        p.clamp_log_std();
        Ok(p)
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn clamp_log_std(&mut self) {
        for v in &mut self.log_std {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn sample_from_mean(&self, mu: &[f64], rng: &mut Rng) -> (Vec<f64>, f64) {
        let a: Vec<f64> = mu
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect();
        let lp = self.log_prob_from_mean(mu, &a);
        (a, lp)
    }

    pub fn log_prob_from_mean(&self, mu: &[f64], a: &[f64]) -> f64 {
        mu.iter()
            .zip(a)
            .zip(&self.log_std)
            .map(|((m, x), ls)| {
                let z = (x - m) / ls.exp();
                -0.5 * z * z - ls - 0.5 * LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
    }
}

pub fn policy_sample(pol: &GaussianPolicy, x: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
    let mu = pol.mean.predict(x)?;
    Ok(pol.sample_from_mean(&mu, rng))
}

pub fn policy_log_prob(pol: &GaussianPolicy, x: &[f64], action: &[f64]) -> Result<f64> {
    let mu = pol.mean.predict(x)?;
    Ok(pol.log_prob_from_mean(&mu, action))
}

pub fn policy_entropy(pol: &GaussianPolicy) -> f64 {
    pol.entropy()
}

/// Running per-feature mean/variance (parallel Welford merge).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        RunningNorm {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0.0,
        }
    }

    pub fn update(&mut self, rows: &[Vec<f64>]) {
        if rows.is_empty() {
            return;
        }
        let n = rows.len() as f64;
        let d = self.mean.len();
        let mut bm = vec![0.0; d];
        for r in rows {
            for (m, x) in bm.iter_mut().zip(r) {
                *m += x / n;
            }
        }
        let mut bv = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in bv.iter_mut().zip(r).zip(&bm) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let tot = self.count + n;
        for i in 0..d {
            let delta = bm[i] - self.mean[i];
            let m2 = self.var[i] * self.count + bv[i] * n + delta * delta * self.count * n / tot;
            self.mean[i] += delta * n / tot;
            self.var[i] = m2 / tot;
        }
        self.count = tot;
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| ((x - m) / (v + 1e-8).sqrt()).clamp(-10.0, 10.0))
            .collect()
    }
}

/// Named flat tensor inside a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// JSON sidecar describing a `.bin` file of little-endian f64 values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub tensors: Vec<TensorMeta>,
    /// Free-form structured extras (network sizes, priors, ...).
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: &str, seed: u64, extra: serde_json::Value) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                kind: kind.into(),
                config_hash: config_hash.into(),
                seed,
                tensors: Vec::new(),
                extra,
            },
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        self.meta.tensors.push(TensorMeta {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
            len: values.len(),
        });
        self.data.extend_from_slice(values);
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let t = self
            .meta
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::MissingArtifact(format!("tensor `{name}` in checkpoint")))?;
        self.data
            .get(t.offset..t.offset + t.len)
            .ok_or_else(|| Error::Invalid(format!("tensor `{name}` out of range")))
    }

    fn sidecar(path: &Path) -> std::path::PathBuf {
        path.with_extension("json")
    }

    /// Writes `path` (binary) and `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar(path);
        let mut f = fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
        serde_json::to_writer_pretty(&mut f, &self.meta)?;
        f.write_all(b"\n").map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let side = Self::sidecar(path);
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(
            &fs::read(&side).map_err(|e| Error::io(&side, e))?,
        )?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Invalid(format!("{}: truncated checkpoint", path.display())));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let need = meta.tensors.iter().map(|t| t.offset + t.len).max().unwrap_or(0);
        if need > data.len() {
            return Err(Error::Shape {
                expected: need,
                got: data.len(),
                context: "checkpoint payload".into(),
            });
        }
        Ok(Checkpoint { meta, data })
    }
}
