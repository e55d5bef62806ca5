//! Synthetic tasks: linear regression and a small residual tanh MLP classifier
//! trained on teacher-generated labels.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{ModelLayout, TensorKind, TensorSpec};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Vec<f64>),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub x: Vec<f64>,
    pub y: Targets,
}

impl Batch {
    /// The batch repeated `k` times.
    pub fn repeated(&self, k: usize) -> Batch {
        let y = match &self.y {
            Targets::Values(v) => Targets::Values(v.repeat(k)),
            Targets::Classes(c) => Targets::Classes(c.repeat(k)),
        };
        Batch { n: self.n * k, x: self.x.repeat(k), y }
    }
}

pub trait Task: Send + Sync {
    fn layout(&self) -> Arc<ModelLayout>;
    fn init_params(&self) -> Vec<f64>;
    /// Counter "tokens" contributed by one example.
    fn tokens_per_example(&self) -> u64;
    /// Deterministic minibatch from `shard` for local step `step`.
    fn batch(&self, shard: u16, step: u64, examples: usize) -> Batch;
    fn loss_and_grad(&self, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)>;
    fn eval_loss(&self, params: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    LinearRegression,
    MlpClassifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub classes: usize,
    pub dataset_seed: u64,
    pub shards: usize,
    pub shard_size: usize,
    pub eval_size: usize,
    pub batch: usize,
    pub noise: f64,
    pub init_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            family: Family::MlpClassifier,
            dim: 16,
            hidden: 48,
            depth: 4,
            classes: 4,
            dataset_seed: 1,
            shards: 8,
            shard_size: 4096,
            eval_size: 2048,
            batch: 32,
            noise: 0.0,
            init_seed: 0,
        }
    }
}

impl TaskSpec {
    /// Model layout without generating any data.
    pub fn layout(&self) -> ModelLayout {
        match self.family {
            Family::LinearRegression => LinearRegression::model_layout(self.dim),
            Family::MlpClassifier => Mlp::model_layout(self),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Task>> {
        if self.dim == 0 || self.shards == 0 || self.shard_size == 0 || self.batch == 0 {
            return Err(Error::config("task", "dim, shards, shard_size and batch must be positive"));
        }
        Ok(match self.family {
            Family::LinearRegression => Arc::new(LinearRegression::new(self)),
            Family::MlpClassifier => {
                if self.hidden == 0 || self.classes < 2 {
                    return Err(Error::config("task.hidden", "mlp needs hidden > 0 and classes >= 2"));
                }
                Arc::new(Mlp::new(self))
            }
        })
    }
}

fn normal<R: Rng>(r: &mut R) -> f64 {
    r.sample::<f64, _>(StandardNormal)
}

fn batch_indices(seed: u64, shard: u16, step: u64, examples: usize, shard_size: usize) -> Vec<usize> {
    let mut r = rng::stream_at(seed, "batch", shard as u64, step);
    (0..examples).map(|_| r.gen_range(0..shard_size)).collect()
}

/// `y = w.x + b + noise`, squared loss `mean 0.5 (pred - y)^2`.
pub struct LinearRegression {
    spec: TaskSpec,
    layout: Arc<ModelLayout>,
    w_true: Vec<f64>,
    b_true: f64,
    shards: Vec<(Vec<f64>, Vec<f64>)>,
    eval: (Vec<f64>, Vec<f64>),
}

impl LinearRegression {
    pub fn new(spec: &TaskSpec) -> Self {
        let d = spec.dim;
        let layout = Arc::new(Self::model_layout(d));
        let mut r = rng::stream(spec.dataset_seed, "teacher", 0);
        let w_true: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
        let b_true = normal(&mut r);
        let gen = |purpose: &str, worker: u64, n: usize| {
            let mut r = rng::stream(spec.dataset_seed, purpose, worker);
            let mut x = Vec::with_capacity(n * d);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let row: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
                let mut t = b_true + row.iter().zip(&w_true).map(|(a, b)| a * b).sum::<f64>();
                if spec.noise > 0.0 {
                    t += spec.noise * normal(&mut r);
                }
                x.extend(row);
                y.push(t);
            }
            (x, y)
        };
        let shards = (0..spec.shards).map(|m| gen("shard", m as u64, spec.shard_size)).collect();
        let eval = gen("eval", 0, spec.eval_size);
        LinearRegression { spec: *spec, layout, w_true, b_true, shards, eval }
    }

    pub fn model_layout(dim: usize) -> ModelLayout {
        ModelLayout::new(vec![
            TensorSpec::new("w", dim, TensorKind::Other),
            TensorSpec::new("b", 1, TensorKind::Other),
        ])
        .expect("valid layout")
    }

    pub fn true_params(&self) -> Vec<f64> {
        let mut v = self.w_true.clone();
        v.push(self.b_true);
        v
    }

    /// All examples of the given shards, row-major.
    pub fn data(&self, shards: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &s in shards {
            x.extend_from_slice(&self.shards[s].0);
            y.extend_from_slice(&self.shards[s].1);
        }
        (x, y)
    }

    fn loss_on(&self, params: &[f64], x: &[f64], y: &[f64]) -> f64 {
        let d = self.spec.dim;
        let n = y.len();
        let mut total = 0.0;
        for i in 0..n {
            let pred = params[d] + x[i * d..(i + 1) * d].iter().zip(params).map(|(a, w)| a * w).sum::<f64>();
            total += 0.5 * (pred - y[i]) * (pred - y[i]);
        }
        total / n as f64
    }
}

impl Task for LinearRegression {
    fn layout(&self) -> Arc<ModelLayout> {
        self.layout.clone()
    }

    fn init_params(&self) -> Vec<f64> {
        let mut r = rng::stream(self.spec.init_seed, "init", 0);
        (0..=self.spec.dim).map(|_| 0.1 * normal(&mut r)).collect()
    }

    fn tokens_per_example(&self) -> u64 {
        self.spec.dim as u64
    }

    fn batch(&self, shard: u16, step: u64, examples: usize) -> Batch {
        let d = self.spec.dim;
        let (sx, sy) = &self.shards[shard as usize % self.shards.len()];
        let idx = batch_indices(self.spec.dataset_seed, shard, step, examples, self.spec.shard_size);
        let mut x = Vec::with_capacity(examples * d);
        let mut y = Vec::with_capacity(examples);
        for i in idx {
            x.extend_from_slice(&sx[i * d..(i + 1) * d]);
            y.push(sy[i]);
        }
        Batch { n: examples, x, y: Targets::Values(y) }
    }

    fn loss_and_grad(&self, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let d = self.spec.dim;
        check_len(d + 1, params.len())?;
        check_len(batch.n * d, batch.x.len())?;
        let Targets::Values(y) = &batch.y else {
            return Err(Error::InvalidArgument("regression needs real targets".into()));
        };
        let n = batch.n as f64;
        let mut grad = vec![0.0; d + 1];
        let mut loss = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let row = &batch.x[i * d..(i + 1) * d];
            let pred = params[d] + row.iter().zip(params).map(|(a, w)| a * w).sum::<f64>();
            let r = pred - yi;
            loss += 0.5 * r * r;
            for (g, a) in grad.iter_mut().zip(row) {
                *g += r * a;
            }
            grad[d] += r;
        }
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    fn eval_loss(&self, params: &[f64]) -> f64 {
        self.loss_on(params, &self.eval.0, &self.eval.1)
    }
}

/// Residual tanh MLP: `h0 = tanh(W_in x + b_in)`, `h_l = h_{l-1} + tanh(W_l h_{l-1} + b_l)`,
/// logits `W_out h_L + b_out`, mean cross-entropy.
pub struct Mlp {
    spec: TaskSpec,
    layout: Arc<ModelLayout>,
    shards: Vec<(Vec<f64>, Vec<usize>)>,
    eval: (Vec<f64>, Vec<usize>),
}

struct Net<'a> {
    d: usize,
    h: usize,
    c: usize,
    depth: usize,
    p: &'a [f64],
}

impl<'a> Net<'a> {
    // Offsets follow the layout order: W_in, b_in, (W_l, b_l)*, W_out, b_out.
    fn w_in(&self) -> &'a [f64] {
        &self.p[..self.h * self.d]
    }
    fn b_in(&self) -> &'a [f64] {
        let o = self.h * self.d;
        &self.p[o..o + self.h]
    }
    fn layer_offset(&self, l: usize) -> usize {
        self.h * self.d + self.h + l * (self.h * self.h + self.h)
    }
    fn w_l(&self, l: usize) -> &'a [f64] {
        let o = self.layer_offset(l);
        &self.p[o..o + self.h * self.h]
    }
    fn b_l(&self, l: usize) -> &'a [f64] {
        let o = self.layer_offset(l) + self.h * self.h;
        &self.p[o..o + self.h]
    }
    fn out_offset(&self) -> usize {
        self.layer_offset(self.depth)
    }
    fn w_out(&self) -> &'a [f64] {
        let o = self.out_offset();
        &self.p[o..o + self.c * self.h]
    }
    fn b_out(&self) -> &'a [f64] {
        let o = self.out_offset() + self.c * self.h;
        &self.p[o..o + self.c]
    }
}

fn matvec(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = b[i] + w[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

fn log_softmax_ce(logits: &[f64], label: usize, probs: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        z += *p;
    }
    probs.iter_mut().for_each(|p| *p /= z);
    -(logits[label] - max - z.ln())
}

impl Mlp {
    pub fn new(spec: &TaskSpec) -> Self {
        let layout = Arc::new(Self::model_layout(spec));
        let teacher = Self::random_params(spec, &layout, spec.dataset_seed, "teacher", 2.0);
        let gen = |purpose: &str, worker: u64, n: usize| {
            let mut r = rng::stream(spec.dataset_seed, purpose, worker);
            let mut x = Vec::with_capacity(n * spec.dim);
            let mut y = Vec::with_capacity(n);
            let mut probs = vec![0.0; spec.classes];
            for _ in 0..n {
                let row: Vec<f64> = (0..spec.dim).map(|_| normal(&mut r)).collect();
                let logits = Self::forward_logits(spec, &teacher, &row);
                log_softmax_ce(&logits, 0, &mut probs);
                let u: f64 = r.gen();
                let mut acc = 0.0;
                let mut label = spec.classes - 1;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        label = k;
                        break;
                    }
                }
                x.extend(row);
                y.push(label);
            }
            (x, y)
        };
        let shards = (0..spec.shards).map(|m| gen("shard", m as u64, spec.shard_size)).collect();
        let eval = gen("eval", 0, spec.eval_size);
        Mlp { spec: *spec, layout, shards, eval }
    }

    pub fn model_layout(spec: &TaskSpec) -> ModelLayout {
        let (d, h, c) = (spec.dim, spec.hidden, spec.classes);
        let mut t = vec![
            TensorSpec::new("w_in", h * d, TensorKind::Embedding),
            TensorSpec::new("b_in", h, TensorKind::Embedding),
        ];
        for l in 1..=spec.depth {
            t.push(TensorSpec::new(format!("w_{l}"), h * h, TensorKind::Transformer).in_layer(l));
            t.push(TensorSpec::new(format!("b_{l}"), h, TensorKind::Transformer).in_layer(l));
        }
        t.push(TensorSpec::new("w_out", c * h, TensorKind::Other));
        t.push(TensorSpec::new("b_out", c, TensorKind::Other));
        ModelLayout::new(t).expect("valid layout")
    }

    fn random_params(spec: &TaskSpec, layout: &ModelLayout, seed: u64, purpose: &str, gain: f64) -> Vec<f64> {
        let mut r = rng::stream(seed, purpose, 0);
        let mut out = Vec::with_capacity(layout.len());
        for t in layout.tensors() {
            let fan_in = match t.name.as_str() {
                "w_in" => spec.dim,
                n if n.starts_with('w') => spec.hidden,
                _ => 0,
            };
            let scale = if fan_in == 0 {
                0.0
            } else if t.kind == TensorKind::Transformer {
                0.5 * gain / (fan_in as f64).sqrt()
            } else {
                gain / (fan_in as f64).sqrt()
            };
            for _ in 0..t.size {
                out.push(scale * normal(&mut r));
            }
        }
        out
    }

    fn forward_logits(spec: &TaskSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
        let net = Net { d: spec.dim, h: spec.hidden, c: spec.classes, depth: spec.depth, p: params };
        let mut h = vec![0.0; net.h];
        matvec(net.w_in(), net.b_in(), x, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut u = vec![0.0; net.h];
        for l in 0..net.depth {
            matvec(net.w_l(l), net.b_l(l), &h, &mut u);
            h.iter_mut().zip(&u).for_each(|(hv, uv)| *hv += uv.tanh());
        }
        let mut logits = vec![0.0; net.c];
        matvec(net.w_out(), net.b_out(), &h, &mut logits);
        logits
    }

    fn mean_loss(&self, params: &[f64], x: &[f64], y: &[usize]) -> f64 {
        let mut probs = vec![0.0; self.spec.classes];
        let d = self.spec.dim;
        let total: f64 = y
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let logits = Self::forward_logits(&self.spec, params, &x[i * d..(i + 1) * d]);
                log_softmax_ce(&logits, label, &mut probs)
            })
            .sum();
        total / y.len() as f64
    }
}

impl Task for Mlp {
    fn layout(&self) -> Arc<ModelLayout> {
        self.layout.clone()
    }

    fn init_params(&self) -> Vec<f64> {
        Self::random_params(&self.spec, &self.layout, self.spec.init_seed, "init", 1.0)
    }

    fn tokens_per_example(&self) -> u64 {
        self.spec.dim as u64
    }

    fn batch(&self, shard: u16, step: u64, examples: usize) -> Batch {
        let d = self.spec.dim;
        let (sx, sy) = &self.shards[shard as usize % self.shards.len()];
        let idx = batch_indices(self.spec.dataset_seed, shard, step, examples, self.spec.shard_size);
        let mut x = Vec::with_capacity(examples * d);
        let mut y = Vec::with_capacity(examples);
        for i in idx {
            x.extend_from_slice(&sx[i * d..(i + 1) * d]);
            y.push(sy[i]);
        }
        Batch { n: examples, x, y: Targets::Classes(y) }
    }

    fn loss_and_grad(&self, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let s = &self.spec;
        check_len(self.layout.len(), params.len())?;
        check_len(batch.n * s.dim, batch.x.len())?;
        let Targets::Classes(labels) = &batch.y else {
            return Err(Error::InvalidArgument("classifier needs class targets".into()));
        };
        let net = Net { d: s.dim, h: s.hidden, c: s.classes, depth: s.depth, p: params };
        let (d, h, c, depth) = (net.d, net.h, net.c, net.depth);
        let mut grad = vec![0.0; params.len()];
        let inv_n = 1.0 / batch.n as f64;
        let mut loss = 0.0;

        let mut hs = vec![vec![0.0; h]; depth + 1];
        let mut acts = vec![vec![0.0; h]; depth];
        let mut logits = vec![0.0; c];
        let mut probs = vec![0.0; c];
        let mut g_h = vec![0.0; h];
        let mut g_u = vec![0.0; h];
        let out_off = net.out_offset();

        for (i, &label) in labels.iter().enumerate() {
            let x = &batch.x[i * d..(i + 1) * d];
            matvec(net.w_in(), net.b_in(), x, &mut hs[0]);
            hs[0].iter_mut().for_each(|v| *v = v.tanh());
            for l in 0..depth {
                let (prev, rest) = hs.split_at_mut(l + 1);
                matvec(net.w_l(l), net.b_l(l), &prev[l], &mut acts[l]);
                acts[l].iter_mut().for_each(|v| *v = v.tanh());
                for ((o, p), a) in rest[0].iter_mut().zip(&prev[l]).zip(&acts[l]) {
                    *o = p + a;
                }
            }
            matvec(net.w_out(), net.b_out(), &hs[depth], &mut logits);
            loss += log_softmax_ce(&logits, label, &mut probs);

            // Output layer.
            g_h.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..c {
                let gl = (probs[k] - if k == label { 1.0 } else { 0.0 }) * inv_n;
                let row = out_off + k * h;
                for j in 0..h {
                    grad[row + j] += gl * hs[depth][j];
                    g_h[j] += net.w_out()[k * h + j] * gl;
                }
                grad[out_off + c * h + k] += gl;
            }
            // Residual layers.
            for l in (0..depth).rev() {
                for j in 0..h {
                    g_u[j] = g_h[j] * (1.0 - acts[l][j] * acts[l][j]);
                }
                let off = net.layer_offset(l);
                let w = net.w_l(l);
                for r in 0..h {
                    let gu = g_u[r];
                    if gu == 0.0 {
                        continue;
                    }
                    let row = off + r * h;
                    for j in 0..h {
                        grad[row + j] += gu * hs[l][j];
                        g_h[j] += w[r * h + j] * gu;
                    }
                    grad[off + h * h + r] += gu;
                }
            }
            // Input layer.
            for r in 0..h {
                let gz = g_h[r] * (1.0 - hs[0][r] * hs[0][r]);
                for j in 0..d {
                    grad[r * d + j] += gz * x[j];
                }
                grad[h * d + r] += gz;
            }
        }
        Ok((loss * inv_n, grad))
    }

    fn eval_loss(&self, params: &[f64]) -> f64 {
        self.mean_loss(params, &self.eval.0, &self.eval.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_mlp() -> TaskSpec {
        TaskSpec { dim: 5, hidden: 6, depth: 2, classes: 3, shards: 2, shard_size: 64, eval_size: 64, ..Default::default() }
    }

    fn lr_spec() -> TaskSpec {
        TaskSpec { family: Family::LinearRegression, dim: 4, shards: 2, shard_size: 64, eval_size: 64, ..Default::default() }
    }

    fn finite_difference(task: &dyn Task, params: &[f64], batch: &Batch) {
        let (_, grad) = task.loss_and_grad(params, batch).unwrap();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params.to_vec();
            p[i] += h;
            let up = task.loss_and_grad(&p, batch).unwrap().0;
            p[i] -= 2.0 * h;
            let down = task.loss_and_grad(&p, batch).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() / scale < 1e-5, "param {i}: fd {fd} vs analytic {}", grad[i]);
        }
    }

    #[test]
    fn mlp_layout_shape() {
        let l = Mlp::model_layout(&TaskSpec::default());
        assert_eq!(l.tensors().len(), 12);
        assert_eq!(l.len(), 10_420);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let task = small_mlp().build().unwrap();
        let mut params = task.init_params();
        let mut r = rng::stream(9, "perturb", 0);
        params.iter_mut().for_each(|p| *p += 0.3 * normal(&mut r));
        let batch = task.batch(0, 1, 7);
        finite_difference(task.as_ref(), &params, &batch);
    }

    #[test]
    fn regression_gradient_matches_finite_differences() {
        let task = lr_spec().build().unwrap();
        let batch = task.batch(1, 3, 9);
        finite_difference(task.as_ref(), &task.init_params(), &batch);
    }

    #[test]
    fn regression_optimum_has_zero_loss() {
        let task = LinearRegression::new(&lr_spec());
        let batch = task.batch(0, 0, 16);
        let (loss, grad) = task.loss_and_grad(&task.true_params(), &batch).unwrap();
        assert!(loss < 1e-28);
        assert!(grad.iter().all(|g| g.abs() < 1e-14));
    }

    #[test]
    fn duplicated_batch_keeps_mean() {
        for spec in [small_mlp(), lr_spec()] {
            let task = spec.build().unwrap();
            let params = task.init_params();
            let b = task.batch(0, 2, 5);
            let (l1, g1) = task.loss_and_grad(&params, &b).unwrap();
            let (l2, g2) = task.loss_and_grad(&params, &b.repeated(2)).unwrap();
            assert!((l1 - l2).abs() < 1e-14);
            for (a, b) in g1.iter().zip(&g2) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn batches_are_deterministic_and_sharded() {
        let task = small_mlp().build().unwrap();
        assert_eq!(task.batch(0, 5, 4), task.batch(0, 5, 4));
        assert_ne!(task.batch(0, 5, 4), task.batch(1, 5, 4));
        assert_ne!(task.batch(0, 5, 4), task.batch(0, 6, 4));
    }
}
