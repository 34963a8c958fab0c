//! Layers with hand-derived backward passes.
//!
//! Each layer's `forward` takes `&self` and returns the output together with
//! a cache value; `backward` consumes that cache, accumulates parameter
//! gradients and returns the gradient with respect to the layer input. A
//! backward call therefore cannot be issued without a matching forward.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad_scalar, gelu_scalar, gemm, softmax_in_place, Matrix, Parameter};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Named view over a module's parameters, in a fixed traversal order.
pub trait Module {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>);
    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>);

    fn params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        self.visit_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let mut out = Vec::new();
        self.visit_params_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.data().len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Parameter::new(Matrix::uniform_init(input, output, input, rng)),
            bias: Parameter::new(Matrix::zeros(1, output)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Parameter::new(Matrix::zeros(input, output)),
            bias: Parameter::new(Matrix::zeros(1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        debug_assert_eq!(x.cols(), self.input_dim());
        let mut y = x.mm(&self.weight.value);
        y.add_row_broadcast(&self.bias.value);
        y
    }

    /// `x` is the input seen by the matching forward call.
    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Matrix {
        gemm(1.0, x, true, dy, false, 1.0, &mut self.weight.grad);
        self.bias.grad.add_assign(&dy.sum_rows());
        dy.mmt(&self.weight.value)
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub shift: Parameter,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Parameter::new(Matrix::filled(1, dim, 1.0)),
            shift: Parameter::new(Matrix::zeros(1, dim)),
        }
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)`, before the affine part.
    pub fn normalize(x: &Matrix) -> (Matrix, Vec<f64>) {
        let n = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        (out, inv_std)
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let (normalized, inv_std) = Self::normalize(x);
        let mut y = normalized.clone();
        let g = self.gain.value.data();
        let s = self.shift.value.data();
        for r in 0..y.rows() {
            for ((v, gi), si) in y.row_mut(r).iter_mut().zip(g).zip(s) {
                *v = *v * gi + si;
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Matrix) -> Matrix {
        let xhat = &cache.normalized;
        let n = dy.cols() as f64;
        let mut dx = Matrix::zeros(dy.rows(), dy.cols());
        let g = self.gain.value.data().to_vec();
        {
            let gg = self.gain.grad.data_mut();
            for r in 0..dy.rows() {
                for ((acc, d), xh) in gg.iter_mut().zip(dy.row(r)).zip(xhat.row(r)) {
                    *acc += d * xh;
                }
            }
        }
        self.shift.grad.add_assign(&dy.sum_rows());
        for r in 0..dy.rows() {
            let dxhat: Vec<f64> = dy.row(r).iter().zip(&g).map(|(d, gi)| d * gi).collect();
            let sum: f64 = dxhat.iter().sum();
            let dot: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
            let is = cache.inv_std[r];
            for ((o, dh), xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                *o = is / n * (n * dh - sum - xh * dot);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        out.push((join(prefix, "gain"), &self.gain));
        out.push((join(prefix, "shift"), &self.shift));
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        out.push((join(prefix, "gain"), &mut self.gain));
        out.push((join(prefix, "shift"), &mut self.shift));
    }
}

pub fn gelu_backward(pre: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(pre.data()) {
        *d *= gelu_grad_scalar(x);
    }
    dx
}

/// `LayerNorm(x + fc2(GELU(fc1(x))))`, the residual block shared by the
/// policy and value heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct ResidualMlpCache {
    input: Matrix,
    pre_act: Matrix,
    hidden: Matrix,
    norm: LayerNormCache,
}

impl ResidualMlp {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
            norm: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, ResidualMlpCache) {
        let pre_act = self.fc1.forward(x);
        let hidden = pre_act.map(gelu_scalar);
        let mut sum = self.fc2.forward(&hidden);
        sum.add_assign(x);
        let (y, norm) = self.norm.forward(&sum);
        (
            y,
            ResidualMlpCache {
                input: x.clone(),
                pre_act,
                hidden,
                norm,
            },
        )
    }

    pub fn backward(&mut self, cache: &ResidualMlpCache, dy: &Matrix) -> Matrix {
        let dsum = self.norm.backward(&cache.norm, dy);
        let dhidden = self.fc2.backward(&cache.hidden, &dsum);
        let dpre = gelu_backward(&cache.pre_act, &dhidden);
        let mut dx = self.fc1.backward(&cache.input, &dpre);
        dx.add_assign(&dsum);
        dx
    }
}

impl Module for ResidualMlp {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        self.fc1.visit_params(&join(prefix, "fc1"), out);
        self.fc2.visit_params(&join(prefix, "fc2"), out);
        self.norm.visit_params(&join(prefix, "norm"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        self.fc1.visit_params_mut(&join(prefix, "fc1"), out);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), out);
        self.norm.visit_params_mut(&join(prefix, "norm"), out);
    }
}

/// Multi-head self-attention followed by a residual connection and
/// LayerNorm: `LayerNorm(X + Concat(head_1..head_h) W_O)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub w_q: Parameter,
    pub w_k: Parameter,
    pub w_v: Parameter,
    pub w_o: Parameter,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Vec<Matrix>,
    concat: Matrix,
    norm: LayerNormCache,
}

impl AttentionCache {
    /// Softmax attention weights of head `h`.
    pub fn weights(&self, h: usize) -> &Matrix {
        &self.weights[h]
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("model width {dim} is not divisible by {heads} heads"),
            ));
        }
        let mut init = || Parameter::new(Matrix::uniform_init(dim, dim, dim, rng));
        Ok(Self {
            heads,
            w_q: init(),
            w_k: init(),
            w_v: init(),
            w_o: init(),
            norm: LayerNorm::new(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.value.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, AttentionCache)> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::dim(
                "multi_head_attention",
                format!("input has {} columns, model width is {d}", x.cols()),
            ));
        }
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let q = x.mm(&self.w_q.value);
        let k = x.mm(&self.w_k.value);
        let v = x.mm(&self.w_v.value);
        let mut concat = Matrix::zeros(x.rows(), d);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.col_block(h * dk, dk);
            let kh = k.col_block(h * dk, dk);
            let vh = v.col_block(h * dk, dk);
            let mut scores = qh.mmt(&kh);
            for r in 0..scores.rows() {
                let row = scores.row_mut(r);
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            concat.set_col_block(h * dk, &scores.mm(&vh));
            weights.push(scores);
        }
        let mut sum = concat.mm(&self.w_o.value);
        sum.add_assign(x);
        let (y, norm) = self.norm.forward(&sum);
        Ok((
            y,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                weights,
                concat,
                norm,
            },
        ))
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Matrix) -> Matrix {
        let d = self.dim();
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let x = &cache.input;
        let dsum = self.norm.backward(&cache.norm, dy);
        gemm(1.0, &cache.concat, true, &dsum, false, 1.0, &mut self.w_o.grad);
        let dconcat = dsum.mmt(&self.w_o.value);

        let n = x.rows();
        let mut dq = Matrix::zeros(n, d);
        let mut dk_all = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for h in 0..self.heads {
            let a = &cache.weights[h];
            let qh = cache.q.col_block(h * dk, dk);
            let kh = cache.k.col_block(h * dk, dk);
            let vh = cache.v.col_block(h * dk, dk);
            let dout = dconcat.col_block(h * dk, dk);
            let da = dout.mmt(&vh);
            dv.set_col_block(h * dk, &a.tmm(&dout));
            // softmax backward, folded with the 1/sqrt(dk) score scale
            let mut ds = Matrix::zeros(n, n);
            for r in 0..n {
                let ar = a.row(r);
                let dar = da.row(r);
                let dot: f64 = ar.iter().zip(dar).map(|(p, g)| p * g).sum();
                for ((o, p), g) in ds.row_mut(r).iter_mut().zip(ar).zip(dar) {
                    *o = p * (g - dot) * scale;
                }
            }
            dq.set_col_block(h * dk, &ds.mm(&kh));
            dk_all.set_col_block(h * dk, &ds.tmm(&qh));
        }
        gemm(1.0, x, true, &dq, false, 1.0, &mut self.w_q.grad);
        gemm(1.0, x, true, &dk_all, false, 1.0, &mut self.w_k.grad);
        gemm(1.0, x, true, &dv, false, 1.0, &mut self.w_v.grad);
        let mut dx = dsum;
        gemm(1.0, &dq, false, &self.w_q.value, true, 1.0, &mut dx);
        gemm(1.0, &dk_all, false, &self.w_k.value, true, 1.0, &mut dx);
        gemm(1.0, &dv, false, &self.w_v.value, true, 1.0, &mut dx);
        dx
    }
}

impl Module for MultiHeadAttention {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        out.push((join(prefix, "w_q"), &self.w_q));
        out.push((join(prefix, "w_k"), &self.w_k));
        out.push((join(prefix, "w_v"), &self.w_v));
        out.push((join(prefix, "w_o"), &self.w_o));
        self.norm.visit_params(&join(prefix, "norm"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        out.push((join(prefix, "w_q"), &mut self.w_q));
        out.push((join(prefix, "w_k"), &mut self.w_k));
        out.push((join(prefix, "w_v"), &mut self.w_v));
        out.push((join(prefix, "w_o"), &mut self.w_o));
        self.norm.visit_params_mut(&join(prefix, "norm"), out);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. The gradient buffer is left untouched.
pub fn adam_step(name: &str, p: &mut Parameter, s: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if s.first_moment.shape() != p.shape() || p.grad.shape() != p.shape() {
        return Err(Error::dim(
            "adam_step",
            format!("parameter `{name}` {:?} vs state {:?}", p.shape(), s.first_moment.shape()),
        ));
    }
    if !p.grad.is_finite() {
        return Err(Error::NonFinite {
            name: name.to_string(),
            phase: "adam_step",
        });
    }
    s.step += 1;
    let t = s.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let g = p.grad.data();
    let m = s.first_moment.data_mut();
    for (mi, gi) in m.iter_mut().zip(g) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
    }
    let v = s.second_moment.data_mut();
    for (vi, gi) in v.iter_mut().zip(g) {
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
    }
    let m = s.first_moment.data();
    let v = s.second_moment.data();
    for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a whole module, with one moment pair per named parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<(String, AdamState)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    /// Checks every gradient before touching any value, so a failed step
    /// leaves all parameters unchanged.
    pub fn step(&mut self, params: Vec<(String, &mut Parameter)>) -> Result<()> {
        for (name, p) in &params {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite {
                    name: name.clone(),
                    phase: "adam_step",
                });
            }
        }
        if self.states.is_empty() {
            self.states = params
                .iter()
                .map(|(n, p)| (n.clone(), AdamState::new(p.shape().0, p.shape().1)))
                .collect();
        }
        if self.states.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {}",
                self.states.len(),
                params.len()
            )));
        }
        for ((name, p), (sname, s)) in params.into_iter().zip(self.states.iter_mut()) {
            if &name != sname {
                return Err(Error::State(format!("parameter order changed: `{name}` vs `{sname}`")));
            }
            adam_step(&name, p, s, &self.config)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::uniform_init(rows, cols, 1, &mut rng(seed))
    }

    /// Scalar probe `sum(out .* probe)` so every output element contributes.
    fn probe_loss(out: &Matrix, probe: &Matrix) -> f64 {
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    /// Central differences over every parameter entry of `module`, compared
    /// against the analytic gradient already stored in the parameters.
    fn check_params<M: Module + Clone>(module: &M, loss: impl Fn(&M) -> f64) -> f64 {
        let h = 1e-5;
        let names: Vec<String> = module.params().into_iter().map(|(n, _)| n).collect();
        let mut worst: f64 = 0.0;
        for (pi, _) in names.iter().enumerate() {
            let len = module.params()[pi].1.value.data().len();
            for e in 0..len {
                let mut plus = module.clone();
                plus.params_mut()[pi].1.value.data_mut()[e] += h;
                let mut minus = module.clone();
                minus.params_mut()[pi].1.value.data_mut()[e] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = module.params()[pi].1.grad.data()[e];
                if fd.abs() > 1e-7 || an.abs() > 1e-7 {
                    worst = worst.max(rel_err(fd, an));
                }
            }
        }
        worst
    }

    fn check_input(x: &Matrix, dx: &Matrix, loss: impl Fn(&Matrix) -> f64) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for e in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[e] += h;
            let mut m = x.clone();
            m.data_mut()[e] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            worst = worst.max(rel_err(fd, dx.data()[e]));
        }
        worst
    }

    #[test]
    fn layer_norm_examples() {
        let ln = LayerNorm::new(3);
        let (y, _) = ln.forward(&Matrix::from_rows(&[[2.0, 2.0, 2.0]]));
        assert!(y.data().iter().all(|v| *v == 0.0));

        let ln = LayerNorm::new(2);
        let (y, _) = ln.forward(&Matrix::from_rows(&[[1.0, 3.0]]));
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.get(0, 0) + expect).abs() < 1e-15);
        assert!((y.get(0, 1) - expect).abs() < 1e-15);

        let x = random(6, 9, 4).scale(30.0);
        let (y, _) = LayerNorm::new(9).forward(&x);
        for r in 0..6 {
            let mean: f64 = y.row(r).iter().sum::<f64>() / 9.0;
            assert!(mean.abs() <= 1e-10);
        }
    }

    #[test]
    fn linear_gradients() {
        for seed in 0..5 {
            let mut lin = Linear::new(5, 3, &mut rng(seed));
            let x = random(4, 5, seed + 10);
            let probe = random(4, 3, seed + 20);
            let dx = lin.backward(&x, &probe);
            let worst = check_params(&lin, |l| probe_loss(&l.forward(&x), &probe));
            assert!(worst <= 1e-6, "linear param rel err {worst}");
            let lin0 = lin.clone();
            let worst = check_input(&x, &dx, |xx| probe_loss(&lin0.forward(xx), &probe));
            assert!(worst <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        for seed in 0..5 {
            let mut ln = LayerNorm::new(6);
            let mut r = rng(seed);
            ln.gain.value = Matrix::uniform_init(1, 6, 1, &mut r);
            ln.shift.value = Matrix::uniform_init(1, 6, 1, &mut r);
            let x = random(3, 6, seed + 1);
            let probe = random(3, 6, seed + 2);
            let (_, cache) = ln.forward(&x);
            let dx = ln.backward(&cache, &probe);
            let worst = check_params(&ln, |l| probe_loss(&l.forward(&x).0, &probe));
            assert!(worst <= 1e-6);
            let ln0 = ln.clone();
            let worst = check_input(&x, &dx, |xx| probe_loss(&ln0.forward(xx).0, &probe));
            assert!(worst <= 1e-5, "layernorm input rel err {worst}");
        }
    }

    #[test]
    fn residual_mlp_gradients() {
        for seed in 0..5 {
            let mut block = ResidualMlp::new(8, 12, &mut rng(seed));
            let x = random(4, 8, seed + 3);
            let probe = random(4, 8, seed + 4);
            let (_, cache) = block.forward(&x);
            let dx = block.backward(&cache, &probe);
            let worst = check_params(&block, |b| probe_loss(&b.forward(&x).0, &probe));
            assert!(worst <= 1e-4, "residual mlp rel err {worst}");
            let b0 = block.clone();
            let worst = check_input(&x, &dx, |xx| probe_loss(&b0.forward(xx).0, &probe));
            assert!(worst <= 1e-4);
        }
    }

    #[test]
    fn attention_gradients() {
        for seed in 0..5 {
            let mut attn = MultiHeadAttention::new(8, 2, &mut rng(seed)).unwrap();
            let x = random(4, 8, seed + 5).scale(2.0);
            let probe = random(4, 8, seed + 6);
            let (_, cache) = attn.forward(&x).unwrap();
            let dx = attn.backward(&cache, &probe);
            let worst = check_params(&attn, |a| probe_loss(&a.forward(&x).unwrap().0, &probe));
            assert!(worst <= 1e-4, "attention param rel err {worst}");
            let a0 = attn.clone();
            let worst = check_input(&x, &dx, |xx| probe_loss(&a0.forward(xx).unwrap().0, &probe));
            assert!(worst <= 1e-4, "attention input rel err {worst}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut attn = MultiHeadAttention::new(8, 4, &mut rng(1)).unwrap();
        let x = random(3, 8, 2);
        let (_, cache) = attn.forward(&x).unwrap();
        let dx = attn.backward(&cache, &Matrix::zeros(3, 8));
        assert!(dx.data().iter().all(|v| *v == 0.0));
        for (_, p) in attn.params() {
            assert!(p.grad.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let attn = MultiHeadAttention::new(8, 2, &mut rng(3)).unwrap();
        let x = random(1, 8, 4);
        let (y, cache) = attn.forward(&x).unwrap();
        for h in 0..2 {
            assert_eq!(cache.weights(h).data(), &[1.0]);
        }
        let mut sum = x.mm(&attn.w_v.value).mm(&attn.w_o.value);
        sum.add_assign(&x);
        let (expect, _) = attn.norm.forward(&sum);
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn multi_head_equals_independent_single_heads() {
        // Each head is an ordinary single-head attention on its slice of the
        // projections; recombining the slices must reproduce the fused path.
        let attn = MultiHeadAttention::new(8, 2, &mut rng(11)).unwrap();
        let x = random(3, 8, 12);
        let (fused, _) = attn.forward(&x).unwrap();
        let dk = 4;
        let mut concat = Matrix::zeros(3, 8);
        for h in 0..2 {
            let wq = attn.w_q.value.col_block(h * dk, dk);
            let wk = attn.w_k.value.col_block(h * dk, dk);
            let wv = attn.w_v.value.col_block(h * dk, dk);
            let scores = x.mm(&wq).mmt(&x.mm(&wk)).scale(1.0 / 2.0);
            let head = softmax_rows(&scores).mm(&x.mm(&wv));
            concat.set_col_block(h * dk, &head);
        }
        let mut sum = concat.mm(&attn.w_o.value);
        sum.add_assign(&x);
        let (expect, _) = attn.norm.forward(&sum);
        assert!(fused.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let attn = MultiHeadAttention::new(8, 4, &mut rng(5)).unwrap();
        let x = random(5, 8, 6);
        let perm = [3, 0, 4, 1, 2];
        let (y, _) = attn.forward(&x).unwrap();
        let (yp, _) = attn.forward(&x.select_rows(&perm)).unwrap();
        assert!(yp.max_abs_diff(&y.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        assert!(matches!(
            MultiHeadAttention::new(10, 4, &mut rng(0)),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameter() {
        let mut p = Parameter::new(random(2, 3, 1));
        let before = p.value.clone();
        let mut s = AdamState::new(2, 3);
        adam_step("p", &mut p, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p.value, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut p = Parameter::new(Matrix::zeros(1, 4));
        p.grad = Matrix::from_rows(&[[0.3, -2.0, 1e-2, -7.0]]);
        let grad = p.grad.clone();
        let mut s = AdamState::new(1, 4);
        let cfg = AdamConfig::with_lr(0.01);
        adam_step("p", &mut p, &mut s, &cfg).unwrap();
        // m_hat = g and v_hat = g^2 after bias correction
        for (w, g) in p.value.data().iter().zip(grad.data()) {
            assert!((w + 0.01 * g.signum()).abs() < 1e-8);
        }
        assert_eq!(p.grad, grad);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut p = Parameter::new(Matrix::from_rows(&[[1.0, -1.0]]));
        p.grad = Matrix::from_rows(&[[0.5, -0.5]]);
        let mut s = AdamState::new(1, 2);
        let cfg = AdamConfig::default();
        let x0 = p.value.clone();
        adam_step("p", &mut p, &mut s, &cfg).unwrap();
        let x1 = p.value.clone();
        adam_step("p", &mut p, &mut s, &cfg).unwrap();
        let x2 = p.value.clone();
        assert!(x1.get(0, 0) < x0.get(0, 0) && x2.get(0, 0) < x1.get(0, 0));
        assert!(x1.get(0, 1) > x0.get(0, 1) && x2.get(0, 1) > x1.get(0, 1));
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut lin = Linear::new(2, 2, &mut rng(0));
        lin.bias.grad.set(0, 1, f64::NAN);
        let before = lin.clone();
        let mut opt = Adam::new(AdamConfig::default());
        match opt.step(lin.params_mut()) {
            Err(Error::NonFinite { name, .. }) => assert_eq!(name, "bias"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert_eq!(lin.weight.value, before.weight.value);
    }
}
