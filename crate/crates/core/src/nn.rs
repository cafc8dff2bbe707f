//! Small dense-network toolkit: row-major matrices, layers with hand-written
//! backward passes, and an ADAM optimizer.
//!
//! Everything is `f64`; gradient correctness is enforced against central
//! finite differences in the embedding tests.

use rand::Rng;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn uniform_init<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Mat {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self (r×k) · other (k×c).
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// self (r×k) · otherᵀ where other is (c×k).
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut s = 0.0;
                for (a, b) in self.row(i).iter().zip(other.row(j)) {
                    s += a * b;
                }
                *out.at_mut(i, j) = s;
            }
        }
        out
    }

    /// selfᵀ · other where self is (k×r), other is (k×c).
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let srow = self.row(k);
            let orow = other.row(k);
            for (i, &a) in srow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    pub fn add_into_cols(&self, dst: &mut Mat, start: usize) {
        for r in 0..self.rows {
            for (c, &v) in self.row(r).iter().enumerate() {
                *dst.at_mut(r, start + c) += v;
            }
        }
    }
}

/// A trainable tensor: value plus accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub v: Mat,
    pub g: Mat,
}

impl Param {
    pub fn new(v: Mat) -> Param {
        let g = Mat::zeros(v.rows, v.cols);
        Param { v, g }
    }

    pub fn zero_grad(&mut self) {
        self.g.data.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn len(&self) -> usize {
        self.v.data.len()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let t = (GELU_S * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

/// In-place row softmax.
pub fn softmax_rows(m: &mut Mat) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Softmax over a plain slice, returning the probability vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Affine layer y = x·W + b with W of shape (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Linear {
        Linear {
            w: Param::new(Mat::uniform_init(d_in, d_out, d_in, rng)),
            b: Param::new(Mat::uniform_init(1, d_out, d_in, rng)),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.matmul(&self.w.v);
        for r in 0..y.rows {
            for (o, b) in y.row_mut(r).iter_mut().zip(self.b.v.row(0)) {
                *o += b;
            }
        }
        y
    }

    /// Accumulates weight gradients and returns dL/dx.
    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        self.w.g.add_assign(&x.matmul_tn(dy));
        for (g, s) in self.b.g.row_mut(0).iter_mut().zip(dy.col_sums()) {
            *g += s;
        }
        dy.matmul_nt(&self.w.v)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

const LN_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Param::new(Mat::from_vec(1, dim, vec![1.0; dim])),
            beta: Param::new(Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let d = x.cols;
        let mut y = Mat::zeros(x.rows, d);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..d {
                let xhat = (row[c] - mean) * rstd;
                *y.at_mut(r, c) = xhat * self.gamma.v.at(0, c) + self.beta.v.at(0, c);
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        let d = x.cols;
        let mut dx = Mat::zeros(x.rows, d);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();

            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for c in 0..d {
                let xhat = (row[c] - mean) * rstd;
                let dyv = dy.at(r, c);
                let dxhat = dyv * self.gamma.v.at(0, c);
                *self.gamma.g.at_mut(0, c) += dyv * xhat;
                *self.beta.g.at_mut(0, c) += dyv;
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            for c in 0..d {
                let xhat = (row[c] - mean) * rstd;
                let dxhat = dy.at(r, c) * self.gamma.v.at(0, c);
                *dx.at_mut(r, c) = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

const MASK_NEG: f64 = -1e30;

/// Multi-head scaled-dot-product self-attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

pub struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Vec<Mat>,
    concat: Mat,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(d_model: usize, n_heads: usize, rng: &mut R) -> MultiHeadAttention {
        assert_eq!(d_model % n_heads, 0, "d_model must be divisible by the head count");
        MultiHeadAttention {
            n_heads,
            wq: Linear::new(d_model, d_model, rng),
            wk: Linear::new(d_model, d_model, rng),
            wv: Linear::new(d_model, d_model, rng),
            wo: Linear::new(d_model, d_model, rng),
        }
    }

    /// `mask[j] == false` hides key position j (padding). A fully-masked
    /// sequence attends uniformly instead so the output stays finite.
    pub fn forward(&self, x: &Mat, mask: Option<&[bool]>) -> (Mat, AttnCache) {
        let d = x.cols;
        let dk = d / self.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let effective_mask = mask.filter(|m| m.iter().any(|&b| b));

        let mut concat = Mat::zeros(x.rows, d);
        let mut attn = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.slice_cols(h * dk, dk);
            let kh = k.slice_cols(h * dk, dk);
            let vh = v.slice_cols(h * dk, dk);
            let mut scores = qh.matmul_nt(&kh);
            scores.scale(scale);
            if let Some(m) = effective_mask {
                for r in 0..scores.rows {
                    for (c, &keep) in m.iter().enumerate() {
                        if !keep {
                            *scores.at_mut(r, c) = MASK_NEG;
                        }
                    }
                }
            }
            softmax_rows(&mut scores);
            let oh = scores.matmul(&vh);
            oh.add_into_cols(&mut concat, h * dk);
            attn.push(scores);
        }
        let y = self.wo.forward(&concat);
        (y, AttnCache { q, k, v, attn, concat })
    }

    pub fn backward(&mut self, x: &Mat, cache: &AttnCache, dy: &Mat) -> Mat {
        let d = x.cols;
        let dk = d / self.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let dconcat = self.wo.backward(&cache.concat, dy);

        let mut dq = Mat::zeros(x.rows, d);
        let mut dkm = Mat::zeros(x.rows, d);
        let mut dv = Mat::zeros(x.rows, d);
        for h in 0..self.n_heads {
            let doh = dconcat.slice_cols(h * dk, dk);
            let a = &cache.attn[h];
            let qh = cache.q.slice_cols(h * dk, dk);
            let kh = cache.k.slice_cols(h * dk, dk);
            let vh = cache.v.slice_cols(h * dk, dk);

            let da = doh.matmul_nt(&vh);
            let dvh = a.matmul_tn(&doh);

            // Softmax backward row by row: ds = a ⊙ (da - <da, a>).
            let mut ds = Mat::zeros(a.rows, a.cols);
            for r in 0..a.rows {
                let arow = a.row(r);
                let darow = da.row(r);
                let dot: f64 = arow.iter().zip(darow).map(|(p, g)| p * g).sum();
                for c in 0..a.cols {
                    *ds.at_mut(r, c) = arow[c] * (darow[c] - dot);
                }
            }
            ds.scale(scale);

            let dqh = ds.matmul(&kh);
            let dkh = ds.matmul_tn(&qh);
            dqh.add_into_cols(&mut dq, h * dk);
            dkh.add_into_cols(&mut dkm, h * dk);
            dvh.add_into_cols(&mut dv, h * dk);
        }

        let mut dx = self.wq.backward(x, &dq);
        dx.add_assign(&self.wk.backward(x, &dkm));
        dx.add_assign(&self.wv.backward(x, &dv));
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.wq.params_mut();
        ps.extend(self.wk.params_mut());
        ps.extend(self.wv.params_mut());
        ps.extend(self.wo.params_mut());
        ps
    }
}

/// Two-layer position-wise feed-forward with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

pub struct FfCache {
    pre: Mat,
    act: Mat,
}

impl FeedForward {
    pub fn new<R: Rng>(d_model: usize, d_ff: usize, rng: &mut R) -> FeedForward {
        FeedForward { l1: Linear::new(d_model, d_ff, rng), l2: Linear::new(d_ff, d_model, rng) }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, FfCache) {
        let pre = self.l1.forward(x);
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.l2.forward(&act);
        (y, FfCache { pre, act })
    }

    pub fn backward(&mut self, x: &Mat, cache: &FfCache, dy: &Mat) -> Mat {
        let mut dact = self.l2.backward(&cache.act, dy);
        for (d, &p) in dact.data.iter_mut().zip(&cache.pre.data) {
            *d *= gelu_prime(p);
        }
        self.l1.backward(x, &dact)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.l1.params_mut();
        ps.extend(self.l2.params_mut());
        ps
    }
}

/// Post-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff: FeedForward,
    pub ln2: LayerNorm,
}

pub struct BlockCache {
    x: Mat,
    attn: AttnCache,
    u: Mat,
    h: Mat,
    ff: FfCache,
    s: Mat,
}

impl TransformerBlock {
    pub fn new<R: Rng>(d_model: usize, n_heads: usize, d_ff: usize, rng: &mut R) -> TransformerBlock {
        TransformerBlock {
            attn: MultiHeadAttention::new(d_model, n_heads, rng),
            ln1: LayerNorm::new(d_model),
            ff: FeedForward::new(d_model, d_ff, rng),
            ln2: LayerNorm::new(d_model),
        }
    }

    pub fn forward(&self, x: &Mat, mask: Option<&[bool]>) -> (Mat, BlockCache) {
        let (a, attn_cache) = self.attn.forward(x, mask);
        let mut u = x.clone();
        u.add_assign(&a);
        let h = self.ln1.forward(&u);
        let (f, ff_cache) = self.ff.forward(&h);
        let mut s = h.clone();
        s.add_assign(&f);
        let y = self.ln2.forward(&s);
        (y, BlockCache { x: x.clone(), attn: attn_cache, u, h, ff: ff_cache, s })
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Mat) -> Mat {
        let ds = self.ln2.backward(&cache.s, dy);
        // s = h + ff(h)
        let mut dh = ds.clone();
        dh.add_assign(&self.ff.backward(&cache.h, &cache.ff, &ds));
        let du = self.ln1.backward(&cache.u, &dh);
        // u = x + attn(x)
        let mut dx = du.clone();
        dx.add_assign(&self.attn.backward(&cache.x, &cache.attn, &du));
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.attn.params_mut();
        ps.extend(self.ln1.params_mut());
        ps.extend(self.ff.params_mut());
        ps.extend(self.ln2.params_mut());
        ps
    }
}

/// ADAM with bias correction. State is kept per parameter, aligned with the
/// order of `params_mut()` on the trained model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Adam {
        Adam { learning_rate, beta1, beta2, epsilon, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for (i, g) in p.g.data.iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.v.data[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_agrees_with_hand_product() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
        let c2 = a.matmul_nt(&Mat::from_vec(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]));
        assert_eq!(c2.data, c.data);
        let c3 = Mat::from_vec(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).matmul_tn(&b);
        assert_eq!(c3.data, c.data);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        softmax_rows(&mut m);
        for r in 0..2 {
            let s: f64 = m.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(3, 2, &mut rng);
        let x = Mat::uniform_init(4, 3, 3, &mut rng);
        // Loss = sum of outputs; dL/dy = ones.
        let dy = Mat::from_vec(4, 2, vec![1.0; 8]);
        let _ = lin.backward(&x, &dy);
        let eps = 1e-6;
        let analytic = lin.w.g.at(1, 0);
        *lin.w.v.at_mut(1, 0) += eps;
        let up: f64 = lin.forward(&x).data.iter().sum();
        *lin.w.v.at_mut(1, 0) -= 2.0 * eps;
        let down: f64 = lin.forward(&x).data.iter().sum();
        let numeric = (up - down) / (2.0 * eps);
        assert!((analytic - numeric).abs() < 1e-6, "{analytic} vs {numeric}");
    }

    #[test]
    fn adam_with_zero_learning_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new(2, 2, &mut rng);
        let before = lin.w.v.clone();
        lin.w.g.data.iter_mut().for_each(|g| *g = 1.0);
        let mut adam = Adam::new(0.0, 0.9, 0.999, 1e-8);
        adam.step(&mut lin.params_mut());
        assert_eq!(lin.w.v, before);
    }
}
