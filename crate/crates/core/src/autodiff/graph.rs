use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::ParamStore;
use crate::math;
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    NtXent {
        z: Var,
        tau: f64,
        probs: Vec<f64>,
    },
    MaskedHuber {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        delta: f64,
    },
    Bce {
        logits: Var,
        labels: Vec<f64>,
        mask: Vec<bool>,
        pos_weight: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics of one training-mode batchnorm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (used for running statistics).
    pub var_unbiased: Vec<f64>,
}

/// A pending running-statistics update produced by a training-mode forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub stats: BatchStats,
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    bn_updates: Vec<BnUpdate>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Output positions `o` of a strided conv for which `o*stride + k - pad`
/// falls inside `[0, len)`.
#[inline]
fn conv_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o*stride + k - pad <= len - 1
    let hi_excl = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!("expected a scalar, found shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// A leaf that never receives gradient (inputs, targets).
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    /// A leaf tracked by the tape; its gradient is available after `backward`.
    pub fn input(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, true)
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != value.len() || shape.contains(&0) {
            return Err(Error::shape(
                "leaf",
                format!("shape {shape:?} with {} values", value.len()),
            ));
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    /// Binds a named tensor from `store`. Repeated calls with the same name
    /// return the same node. Non-trainable entries bind as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.tensor(name)?;
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            store.is_trainable(name),
        );
        self.params.insert(String::from(name), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn push_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Folds recorded batch statistics into the running buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&self, store: &mut ParamStore, momentum: f64) -> Result<()> {
        for u in &self.bn_updates {
            for (name, stat) in [(&u.mean_name, &u.stats.mean), (&u.var_name, &u.stats.var_unbiased)] {
                let t = store.tensor_mut(name)?;
                if t.numel() != stat.len() {
                    return Err(Error::shape("apply_bn_updates", format!("{name}: {} vs {}", t.numel(), stat.len())));
                }
                for (r, s) in t.data_mut().iter_mut().zip(stat) {
                    *r = (1.0 - momentum) * *r + momentum * s;
                }
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| math::exp(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).iter().position(|&x| x <= 0.0) {
            return Err(Error::Validation(format!("ln of non-positive value at index {i}")));
        }
        let v = self.value(a).iter().map(|&x| math::ln(x)).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Ln(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Relu(a), rg)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let s = vals.iter().sum::<f64>() / vals.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    // ---- linear maps ----

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                add_scaled(row, &bv[p * n..(p + 1) * n], x);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Fully connected layer: `x (batch, in)`, `w (out, in)`, `b (out)`;
    /// returns `x wᵀ + b` of shape `(batch, out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("dense", format!("input {sx:?} vs weight {sw:?}")));
        }
        let (batch, fin, fout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("dense", format!("bias {:?} vs out {fout}", self.shape(b))));
            }
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; batch * fout];
        for r in 0..batch {
            let xr = &xv[r * fin..(r + 1) * fin];
            for o in 0..fout {
                out[r * fout + o] = dot(xr, &wv[o * fin..(o + 1) * fin]);
            }
            if let Some(b) = b {
                add_into(&mut out[r * fout..(r + 1) * fout], self.value(b));
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![batch, fout], out, Op::Dense { x, w, b }, rg))
    }

    /// Strided, zero-padded 1-D convolution (cross-correlation).
    ///
    /// `x (batch, c_in, len)`, `w (c_out, c_in, k)`, `b (c_out)`; output length
    /// is `(len + 2 pad - k) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv1d", format!("input {sx:?} vs weight {sw:?} (stride {stride})")));
        }
        let (batch, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if len + 2 * pad < k {
            return Err(Error::shape("conv1d", format!("input {sx:?} shorter than kernel {sw:?} with pad {pad}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv1d", format!("bias {:?} vs c_out {cout}", self.shape(b))));
            }
        }
        let out_len = (len + 2 * pad - k) / stride + 1;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; batch * cout * out_len];
        for bi in 0..batch {
            for co in 0..cout {
                let y = &mut out[(bi * cout + co) * out_len..(bi * cout + co + 1) * out_len];
                if let Some(b) = b {
                    y.fill(self.nodes[b.0].value[co]);
                }
                for ci in 0..cin {
                    let xr = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                    let wr = &wv[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                    for (kk, &wk) in wr.iter().enumerate() {
                        let (lo, hi) = conv_range(kk, pad, stride, len, out_len);
                        if lo >= hi {
                            continue;
                        }
                        let start = lo * stride + kk - pad;
                        if stride == 1 {
                            add_scaled(&mut y[lo..hi], &xr[start..start + (hi - lo)], wk);
                        } else {
                            for (o, yo) in y[lo..hi].iter_mut().enumerate() {
                                *yo += wk * xr[start + o * stride];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![batch, cout, out_len], out, Op::Conv1d { x, w, b, stride, pad }, rg))
    }

    // ---- normalization / pooling ----

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input {sx:?} needs (batch, channels, ...)")));
        }
        let (batch, ch) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma {:?} / beta {:?} vs channels {ch}", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((batch, ch, spatial))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (batch, ch, spatial) = self.bn_dims(x, gamma, beta)?;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * spatial;
                for i in off..off + spatial {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gv[c] * h + bv[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, rg))
    }

    /// Training-mode batchnorm over every axis except channels (axis 1).
    /// Normalizes with biased batch variance; returns the batch statistics
    /// for the caller to fold into running buffers.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (batch, ch, spatial) = self.bn_dims(x, gamma, beta)?;
        let m = (batch * spatial) as f64;
        let xv = self.value(x);
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for c in 0..ch {
            let mut s = 0.0;
            for b in 0..batch {
                let off = (b * ch + c) * spatial;
                s += xv[off..off + spatial].iter().sum::<f64>();
            }
            let mu = s / m;
            let mut ss = 0.0;
            for b in 0..batch {
                let off = (b * ch + c) * spatial;
                ss += xv[off..off + spatial].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[c] = mu;
            var[c] = ss / m;
        }
        let inv_std = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let var_unbiased = if m > 1.0 { var.iter().map(|v| v * m / (m - 1.0)).collect() } else { var };
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Evaluation-mode batchnorm: a fixed affine map from running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, ch, _) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(Error::shape("batch_norm", format!("running stats for {} channels, input has {ch}", running_mean.len())));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    /// `(batch, channels, len) -> (batch, channels)` time-axis mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 {
            return Err(Error::shape("global_avg_pool", format!("input {sx:?}")));
        }
        let (batch, ch, len) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x);
        let out = (0..batch * ch)
            .map(|r| xv[r * len..(r + 1) * len].iter().sum::<f64>() / len as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![batch, ch], out, Op::GlobalAvgPool(x), rg))
    }

    /// Divides each row of a `(rows, dim)` matrix by its Euclidean norm.
    /// A zero row is an error: its direction is undefined.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape("l2_normalize", format!("input {sx:?}")));
        }
        let (rows, dim) = (sx[0], sx[1]);
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows * dim];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let n = math::sqrt(dot(row, row));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateEmbedding { row: r });
            }
            for (o, v) in out[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, dim], out, Op::L2Normalize { x, norms }, rg))
    }

    // ---- fused losses ----

    /// NT-Xent over already-normalized rows `z (n, dim)` with positives at
    /// `k ^ 1`. The softmax denominator runs over every `l != k`.
    pub fn nt_xent(&mut self, z: Var, tau: f64) -> Result<Var> {
        let sz = self.shape(z);
        if sz.len() != 2 {
            return Err(Error::shape("nt_xent", format!("input {sz:?}")));
        }
        let (n, dim) = (sz[0], sz[1]);
        if n < 2 || n % 2 != 0 {
            return Err(Error::Contract(format!("nt_xent needs an even batch of at least 2 rows, got {n}")));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
        }
        let zv = self.value(z);
        let mut probs = vec![0.0; n * n];
        let mut loss = 0.0;
        for k in 0..n {
            let zk = &zv[k * dim..(k + 1) * dim];
            let logits: Vec<f64> = (0..n).map(|l| dot(zk, &zv[l * dim..(l + 1) * dim]) / tau).collect();
            let max = logits
                .iter()
                .enumerate()
                .filter(|&(l, _)| l != k)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (l, &s) in logits.iter().enumerate() {
                if l != k {
                    let e = math::exp(s - max);
                    probs[k * n + l] = e;
                    denom += e;
                }
            }
            for l in 0..n {
                probs[k * n + l] /= denom;
            }
            let lse = max + math::ln(denom);
            loss += lse - logits[k ^ 1];
        }
        loss /= n as f64;
        let rg = self.rg(z);
        Ok(self.push(vec![1], vec![loss], Op::NtXent { z, tau, probs }, rg))
    }

    /// Per-column masked Huber loss. `pred` is `(batch, targets)`; `target`
    /// and `mask` are flattened in the same layout. Column `t` of the output
    /// is the mean Huber loss over rows whose mask bit is set, or 0 when no
    /// row is present.
    pub fn masked_huber(&mut self, pred: Var, target: Vec<f64>, mask: Vec<bool>, delta: f64) -> Result<Var> {
        let sp = self.shape(pred);
        if sp.len() != 2 || target.len() != sp[0] * sp[1] || mask.len() != target.len() {
            return Err(Error::shape(
                "masked_huber",
                format!("pred {sp:?}, {} targets, {} mask bits", target.len(), mask.len()),
            ));
        }
        if !(delta > 0.0) {
            return Err(Error::Config(format!("huber delta must be > 0, got {delta}")));
        }
        let (rows, cols) = (sp[0], sp[1]);
        if let Some(i) = (0..target.len()).find(|&i| mask[i] && !target[i].is_finite()) {
            return Err(Error::Validation(format!("non-finite regression target at row {}, column {}", i / cols, i % cols)));
        }
        let pv = self.value(pred);
        let mut out = vec![0.0; cols];
        for (c, o) in out.iter_mut().enumerate() {
            let mut count = 0usize;
            let mut s = 0.0;
            for r in 0..rows {
                let i = r * cols + c;
                if mask[i] {
                    count += 1;
                    let res = math::abs(pv[i] - target[i]);
                    s += if res <= delta { 0.5 * res * res } else { delta * (res - 0.5 * delta) };
                }
            }
            if count > 0 {
                *o = s / count as f64;
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(vec![cols], out, Op::MaskedHuber { pred, target, mask, delta }, rg))
    }

    /// Per-column masked binary cross entropy from logits, in the stable
    /// softplus form. `pos_weight[t]` scales the positive-label term.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        labels: Vec<f64>,
        mask: Vec<bool>,
        pos_weight: Vec<f64>,
    ) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || labels.len() != sl[0] * sl[1] || mask.len() != labels.len() || pos_weight.len() != sl[1] {
            return Err(Error::shape(
                "bce",
                format!("logits {sl:?}, {} labels, {} mask bits, {} weights", labels.len(), mask.len(), pos_weight.len()),
            ));
        }
        let (rows, cols) = (sl[0], sl[1]);
        if let Some(i) = (0..labels.len()).find(|&i| mask[i] && labels[i] != 0.0 && labels[i] != 1.0) {
            return Err(Error::Validation(format!("label {} at row {} is not 0/1", labels[i], i / cols)));
        }
        let lv = self.value(logits);
        let mut out = vec![0.0; cols];
        for (c, o) in out.iter_mut().enumerate() {
            let mut count = 0usize;
            let mut s = 0.0;
            for r in 0..rows {
                let i = r * cols + c;
                if mask[i] {
                    count += 1;
                    s += if labels[i] == 1.0 {
                        pos_weight[c] * math::softplus(-lv[i])
                    } else {
                        math::softplus(lv[i])
                    };
                }
            }
            if count > 0 {
                *o = s / count as f64;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(vec![cols], out, Op::Bce { logits, labels, mask, pos_weight }, rg))
    }

    // ---- diagnostics ----

    /// Hash of the sign pattern of every relu input on the tape, plus a flag
    /// for inputs sitting exactly on the kink.
    pub fn relu_signature(&self) -> (u64, bool) {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut on_kink = false;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for &x in &self.nodes[a.0].value {
                    on_kink |= x == 0.0;
                    h ^= (x > 0.0) as u64 + 1;
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        (h, on_kink)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (name, v) in &self.params {
            if let Some(g) = grads.get(*v) {
                store.tensor_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| add_scaled(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &|d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::AddScalar(a) => acc(*a, &|d| add_into(d, g)),
            Op::Scale(a, c) => acc(*a, &|d| add_scaled(d, g, *c)),
            Op::Exp(a) => acc(*a, &|d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(&node.value) {
                    *d += g * y;
                }
            }),
            Op::Ln(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &|d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g / x;
                    }
                });
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &|d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &|d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = G Bᵀ, dB = Aᵀ G
                acc(*a, &|d| {
                    for r in 0..m {
                        for p in 0..k {
                            d[r * k + p] += dot(&g[r * n..(r + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &|d| {
                    for r in 0..m {
                        for p in 0..k {
                            add_scaled(&mut d[p * n..(p + 1) * n], &g[r * n..(r + 1) * n], av[r * k + p]);
                        }
                    }
                });
            }
            Op::Dense { x, w, b } => {
                let (batch, fin) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let fout = nodes[w.0].shape[0];
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                acc(*x, &|d| {
                    for r in 0..batch {
                        let dr = &mut d[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            add_scaled(dr, &wv[o * fin..(o + 1) * fin], g[r * fout + o]);
                        }
                    }
                });
                acc(*w, &|d| {
                    for r in 0..batch {
                        let xr = &xv[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            add_scaled(&mut d[o * fin..(o + 1) * fin], xr, g[r * fout + o]);
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &|d| {
                        for r in 0..batch {
                            add_into(d, &g[r * fout..(r + 1) * fout]);
                        }
                    });
                }
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let (batch, cin, len) = (nodes[x.0].shape[0], nodes[x.0].shape[1], nodes[x.0].shape[2]);
                let (cout, k) = (nodes[w.0].shape[0], nodes[w.0].shape[2]);
                let out_len = node.shape[2];
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                acc(*x, &|d| {
                    for bi in 0..batch {
                        for co in 0..cout {
                            let gy = &g[(bi * cout + co) * out_len..(bi * cout + co + 1) * out_len];
                            for ci in 0..cin {
                                let dx = &mut d[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                                let wr = &wv[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                for (kk, &wk) in wr.iter().enumerate() {
                                    let (lo, hi) = conv_range(kk, pad, stride, len, out_len);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let start = lo * stride + kk - pad;
                                    if stride == 1 {
                                        add_scaled(&mut dx[start..start + (hi - lo)], &gy[lo..hi], wk);
                                    } else {
                                        for (o, go) in gy[lo..hi].iter().enumerate() {
                                            dx[start + o * stride] += wk * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &|d| {
                    for bi in 0..batch {
                        for co in 0..cout {
                            let gy = &g[(bi * cout + co) * out_len..(bi * cout + co + 1) * out_len];
                            for ci in 0..cin {
                                let xr = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                                let dw = &mut d[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                for (kk, dwk) in dw.iter_mut().enumerate() {
                                    let (lo, hi) = conv_range(kk, pad, stride, len, out_len);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let start = lo * stride + kk - pad;
                                    *dwk += if stride == 1 {
                                        dot(&gy[lo..hi], &xr[start..start + (hi - lo)])
                                    } else {
                                        gy[lo..hi]
                                            .iter()
                                            .enumerate()
                                            .map(|(o, go)| go * xr[start + o * stride])
                                            .sum::<f64>()
                                    };
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &|d| {
                        for bi in 0..batch {
                            for (co, dco) in d.iter_mut().enumerate() {
                                *dco += g[(bi * cout + co) * out_len..(bi * cout + co + 1) * out_len].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = &nodes[x.0].shape;
                let (batch, ch) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let m = (batch * spatial) as f64;
                let gv = &nodes[gamma.0].value;
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * spatial;
                        for j in off..off + spatial {
                            sum_g[c] += g[j];
                            sum_gx[c] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*gamma, &|d| add_into(d, &sum_gx));
                acc(*beta, &|d| add_into(d, &sum_g));
                acc(*x, &|d| {
                    for b in 0..batch {
                        for c in 0..ch {
                            let off = (b * ch + c) * spatial;
                            let s = gv[c] * inv_std[c];
                            for j in off..off + spatial {
                                d[j] += if *batch_stats {
                                    s * (g[j] - sum_g[c] / m - xhat[j] * sum_gx[c] / m)
                                } else {
                                    s * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let len = nodes[x.0].shape[2];
                acc(*x, &|d| {
                    for (r, gr) in g.iter().enumerate() {
                        d[r * len..(r + 1) * len].iter_mut().for_each(|v| *v += gr / len as f64);
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let dim = node.shape[1];
                let y = &node.value;
                acc(*x, &|d| {
                    for (r, n) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * dim..(r + 1) * dim], &g[r * dim..(r + 1) * dim]);
                        let proj = dot(yr, gr);
                        for j in 0..dim {
                            d[r * dim + j] += (gr[j] - yr[j] * proj) / n;
                        }
                    }
                });
            }
            Op::NtXent { z, tau, probs } => {
                let (n, dim) = (nodes[z.0].shape[0], nodes[z.0].shape[1]);
                let zv = &nodes[z.0].value;
                let scale = g[0] / (n as f64 * tau);
                acc(*z, &|d| {
                    for k in 0..n {
                        for l in 0..n {
                            if l == k {
                                continue;
                            }
                            let coef = scale * (probs[k * n + l] - if l == (k ^ 1) { 1.0 } else { 0.0 });
                            if coef == 0.0 {
                                continue;
                            }
                            // s_kl = z_k . z_l
                            for j in 0..dim {
                                d[k * dim + j] += coef * zv[l * dim + j];
                                d[l * dim + j] += coef * zv[k * dim + j];
                            }
                        }
                    }
                });
            }
            Op::MaskedHuber { pred, target, mask, delta } => {
                let cols = node.shape[0];
                let rows = target.len() / cols;
                let pv = &nodes[pred.0].value;
                let mut counts = vec![0usize; cols];
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        counts[i % cols] += 1;
                    }
                }
                acc(*pred, &|d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            if !mask[i] {
                                continue;
                            }
                            let res = pv[i] - target[i];
                            let psi = res.clamp(-*delta, *delta);
                            d[i] += g[c] * psi / counts[c] as f64;
                        }
                    }
                });
            }
            Op::Bce { logits, labels, mask, pos_weight } => {
                let cols = node.shape[0];
                let rows = labels.len() / cols;
                let lv = &nodes[logits.0].value;
                let mut counts = vec![0usize; cols];
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        counts[i % cols] += 1;
                    }
                }
                acc(*logits, &|d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            if !mask[i] {
                                continue;
                            }
                            let s = math::sigmoid(lv[i]);
                            let dl = if labels[i] == 1.0 { pos_weight[c] * (s - 1.0) } else { s };
                            d[i] += g[c] * dl / counts[c] as f64;
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
