//! Layers with explicit forward and backward passes.
//!
//! Activations travel as row-major `rows × features` buffers. A batch of
//! `n` token sequences of length `t` is a single `(n·t) × d` matrix for the
//! position-wise layers; attention splits it back per sample.
//!
//! Every forward returns a cache value that the matching backward consumes,
//! so a layer never holds per-call state.

use rayon::prelude::*;

use crate::adapters::{SiteAdapter, SiteCache};
use crate::error::{Error, Result};
use crate::tensor::{gemm, mm, MatRef, Scalar, Tensor};

/// A trainable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Adds `g` into the gradient buffer. Frozen parameters ignore it.
    pub(crate) fn accumulate(&mut self, g: &[T]) {
        if self.trainable {
            for (d, &s) in self.grad.data_mut().iter_mut().zip(g) {
                *d += s;
            }
        }
    }
}

fn check_len<T>(op: &'static str, x: &[T], rows: usize, width: usize) -> Result<()> {
    if x.len() != rows * width {
        return Err(Error::shape(
            op,
            format!("{} values for {rows} rows of width {width}", x.len()),
        ));
    }
    Ok(())
}

/// `y = x Wᵀ + b`, weight stored `out × in`.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.ndim() != 2 || bias.shape() != [weight.rows()] {
            return Err(Error::shape(
                "Linear::new",
                format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Linear {
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.rows()
    }

    pub(crate) fn forward_rows(&self, x: &[T], rows: usize) -> Result<Vec<T>> {
        let (inp, out) = (self.in_features(), self.out_features());
        check_len("linear_forward", x, rows, inp)?;
        let mut y = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            y.extend_from_slice(self.bias.value.data());
        }
        gemm(
            T::one(),
            MatRef::new(x, rows, inp),
            self.weight.value.mat().t(),
            T::one(),
            &mut y,
        );
        Ok(y)
    }

    /// Accumulates weight/bias gradients (when trainable) and returns `dx`
    /// if `want_dx`.
    pub(crate) fn backward_rows(&mut self, x: &[T], dy: &[T], rows: usize, want_dx: bool) -> Option<Vec<T>> {
        let (inp, out) = (self.in_features(), self.out_features());
        let dym = MatRef::new(dy, rows, out);
        if self.weight.trainable {
            gemm(
                T::one(),
                dym.t(),
                MatRef::new(x, rows, inp),
                T::one(),
                self.weight.grad.data_mut(),
            );
        }
        if self.bias.trainable {
            let g = self.bias.grad.data_mut();
            for row in dy.chunks_exact(out) {
                for (gi, &d) in g.iter_mut().zip(row) {
                    *gi += d;
                }
            }
        }
        want_dx.then(|| mm(dym, self.weight.value.mat()))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = x.rows();
        Tensor::new(&[rows, self.out_features()], self.forward_rows(x.data(), rows)?)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = x.rows();
        check_len("linear_backward", dy.data(), rows, self.out_features())?;
        let dx = self.backward_rows(x.data(), dy.data(), rows, true).unwrap_or_default();
        Tensor::new(&[rows, self.in_features()], dx)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            weight: Param::new(Tensor::full(&[dim], T::one())),
            bias: Param::new(Tensor::zeros(&[dim])),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub(crate) fn forward_rows(&self, x: &[T], rows: usize) -> Result<(Vec<T>, LayerNormCache<T>)> {
        let d = self.dim();
        check_len("layer_norm", x, rows, d)?;
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let (g, b) = (self.weight.value.data(), self.bias.value.data());
        let mut y = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = Vec::with_capacity(rows);
        for ((xr, yr), hr) in x
            .chunks_exact(d)
            .zip(y.chunks_exact_mut(d))
            .zip(xhat.chunks_exact_mut(d))
        {
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            for j in 0..d {
                hr[j] = (xr[j] - mean) * r;
                yr[j] = hr[j] * g[j] + b[j];
            }
            rstd.push(r);
        }
        Ok((y, LayerNormCache { xhat, rstd }))
    }

    pub(crate) fn backward_rows(&mut self, cache: &LayerNormCache<T>, dy: &[T]) -> Vec<T> {
        let d = self.dim();
        let dn = T::from_usize(d).unwrap();
        let g = self.weight.value.data();
        let mut dx = vec![T::zero(); dy.len()];
        let mut dg = vec![T::zero(); d];
        let mut db = vec![T::zero(); d];
        for (((dyr, hr), dxr), &r) in dy
            .chunks_exact(d)
            .zip(cache.xhat.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .zip(&cache.rstd)
        {
            let mut mean_dh = T::zero();
            let mut mean_dh_h = T::zero();
            for j in 0..d {
                let dh = dyr[j] * g[j];
                mean_dh += dh;
                mean_dh_h += dh * hr[j];
                dg[j] += dyr[j] * hr[j];
                db[j] += dyr[j];
            }
            mean_dh /= dn;
            mean_dh_h /= dn;
            for j in 0..d {
                dxr[j] = r * (dyr[j] * g[j] - mean_dh - hr[j] * mean_dh_h);
            }
        }
        self.weight.accumulate(&dg);
        self.bias.accumulate(&db);
        dx
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        let (y, c) = self.forward_rows(x.data(), x.rows())?;
        Ok((Tensor::new(x.shape(), y)?, c))
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        check_len("layer_norm_backward", dy.data(), cache.rstd.len(), self.dim())?;
        Tensor::new(dy.shape(), self.backward_rows(cache, dy.data()))
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Row-wise numerically stable softmax, in place.
pub fn softmax_rows<T: Scalar>(x: &mut [T], width: usize) {
    for row in x.chunks_exact_mut(width) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Given softmax output `y` and upstream `dy`, writes `dx` into `dy`.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &mut [T], width: usize) {
    for (yr, dr) in y.chunks_exact(width).zip(dy.chunks_exact_mut(width)) {
        let dot: T = yr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
        for (d, &yv) in dr.iter_mut().zip(yr) {
            *d = yv * (*d - dot);
        }
    }
}

/// Mean over groups of `group` consecutive rows: `(n·group) × d → n × d`.
pub fn mean_pool<T: Scalar>(x: &[T], group: usize, d: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize(group).unwrap();
    x.chunks_exact(group * d)
        .flat_map(|sample| {
            let mut acc = vec![T::zero(); d];
            for row in sample.chunks_exact(d) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc.into_iter().map(move |a| a * inv)
        })
        .collect()
}

pub fn mean_pool_backward<T: Scalar>(dy: &[T], group: usize, d: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize(group).unwrap();
    dy.chunks_exact(d)
        .flat_map(|row| std::iter::repeat_n(row, group).flatten().map(move |&v| v * inv))
        .collect()
}

/// Mean cross-entropy of `logits` (`n × k`) against integer labels in
/// `[0, k)`. Returns the loss and `d loss / d logits`.
pub fn cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], k: usize) -> Result<(T, Vec<T>)> {
    check_len("cross_entropy", logits, labels.len(), k)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range [0, {k})")));
    }
    let n = T::from_usize(labels.len().max(1)).unwrap();
    let mut grad = logits.to_vec();
    let mut loss = T::zero();
    for (row, &label) in grad.chunks_exact_mut(k).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[label];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / n;
        }
        row[label] -= T::one() / n;
    }
    Ok((loss / n, grad))
}

/// Multi-head self-attention. Adapters attach to the query and value
/// projections only.
#[derive(Clone, Debug)]
pub struct Attention<T: Scalar> {
    pub q_proj: Linear<T>,
    pub k_proj: Linear<T>,
    pub v_proj: Linear<T>,
    pub out_proj: Linear<T>,
    pub heads: usize,
    pub q_adapter: Option<SiteAdapter<T>>,
    pub v_adapter: Option<SiteAdapter<T>>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T: Scalar> {
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    q_site: Option<SiteCache<T>>,
    v_site: Option<SiteCache<T>>,
}

impl<T: Scalar> Attention<T> {
    pub fn new(q: Linear<T>, k: Linear<T>, v: Linear<T>, out: Linear<T>, heads: usize) -> Result<Self> {
        let d = q.out_features();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {d} not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            q_proj: q,
            k_proj: k,
            v_proj: v,
            out_proj: out,
            heads,
            q_adapter: None,
            v_adapter: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.q_proj.out_features()
    }

    fn project(
        proj: &Linear<T>,
        site: &Option<SiteAdapter<T>>,
        x: &[T],
        rows: usize,
    ) -> Result<(Vec<T>, Option<SiteCache<T>>)> {
        let mut y = proj.forward_rows(x, rows)?;
        let cache = match site {
            Some(adapter) => {
                let (delta, cache) = adapter.forward_rows(x, rows)?;
                for (a, b) in y.iter_mut().zip(&delta) {
                    *a += *b;
                }
                Some(cache)
            }
            None => None,
        };
        Ok((y, cache))
    }

    /// `x` holds `batch` sequences of `tokens` rows each.
    pub(crate) fn forward_rows(&self, x: &[T], batch: usize, tokens: usize) -> Result<(Vec<T>, AttentionCache<T>)> {
        let d = self.dim();
        let rows = batch * tokens;
        check_len("attention_forward", x, rows, d)?;
        let (q, q_site) = Self::project(&self.q_proj, &self.q_adapter, x, rows)?;
        let k = self.k_proj.forward_rows(x, rows)?;
        let (v, v_site) = Self::project(&self.v_proj, &self.v_adapter, x, rows)?;

        let h = self.heads;
        let dh = d / h;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let block = tokens * d;
        let pblock = h * tokens * tokens;
        let mut probs = vec![T::zero(); batch * pblock];
        let mut ctx = vec![T::zero(); rows * d];
        probs
            .par_chunks_mut(pblock)
            .zip(ctx.par_chunks_mut(block))
            .enumerate()
            .for_each(|(s, (pr, cr))| {
                let (qs, ks, vs) = (&q[s * block..], &k[s * block..], &v[s * block..]);
                let mut out = vec![T::zero(); tokens * dh];
                for head in 0..h {
                    let off = head * dh;
                    let qh = strided(&qs[off..block], tokens, dh, d);
                    let kh = strided(&ks[off..block], tokens, dh, d);
                    let vh = strided(&vs[off..block], tokens, dh, d);
                    let p = &mut pr[head * tokens * tokens..(head + 1) * tokens * tokens];
                    gemm(scale, qh, kh.t(), T::zero(), p);
                    softmax_rows(p, tokens);
                    gemm(T::one(), MatRef::new(p, tokens, tokens), vh, T::zero(), &mut out);
                    for t in 0..tokens {
                        cr[t * d + off..t * d + off + dh].copy_from_slice(&out[t * dh..(t + 1) * dh]);
                    }
                }
            });
        let y = self.out_proj.forward_rows(&ctx, rows)?;
        Ok((
            y,
            AttentionCache {
                x: x.to_vec(),
                q,
                k,
                v,
                probs,
                ctx,
                q_site,
                v_site,
            },
        ))
    }

    pub(crate) fn backward_rows(&mut self, cache: &AttentionCache<T>, dy: &[T], batch: usize, tokens: usize) -> Vec<T> {
        let d = self.dim();
        let rows = batch * tokens;
        let dctx = self
            .out_proj
            .backward_rows(&cache.ctx, dy, rows, true)
            .expect("dx requested");

        let h = self.heads;
        let dh = d / h;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let block = tokens * d;
        let pblock = h * tokens * tokens;
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        dq.par_chunks_mut(block)
            .zip(dk.par_chunks_mut(block))
            .zip(dv.par_chunks_mut(block))
            .enumerate()
            .for_each(|(s, ((dqs, dks), dvs))| {
                let (qs, ks, vs) = (&cache.q[s * block..], &cache.k[s * block..], &cache.v[s * block..]);
                let dcs = &dctx[s * block..];
                let pr = &cache.probs[s * pblock..(s + 1) * pblock];
                let mut dp = vec![T::zero(); tokens * tokens];
                let mut tmp = vec![T::zero(); tokens * dh];
                for head in 0..h {
                    let off = head * dh;
                    let qh = strided(&qs[off..block], tokens, dh, d);
                    let kh = strided(&ks[off..block], tokens, dh, d);
                    let vh = strided(&vs[off..block], tokens, dh, d);
                    let doh = strided(&dcs[off..block], tokens, dh, d);
                    let p = &pr[head * tokens * tokens..(head + 1) * tokens * tokens];
                    let pm = MatRef::new(p, tokens, tokens);
                    // dV = Pᵀ dO
                    gemm(T::one(), pm.t(), doh, T::zero(), &mut tmp);
                    scatter(dvs, &tmp, tokens, dh, d, off);
                    // dP = dO Vᵀ, then through softmax and the 1/√dh scale
                    gemm(T::one(), doh, vh.t(), T::zero(), &mut dp);
                    softmax_rows_backward(p, &mut dp, tokens);
                    let dsm = MatRef::new(&dp, tokens, tokens);
                    gemm(scale, dsm, kh, T::zero(), &mut tmp);
                    scatter(dqs, &tmp, tokens, dh, d, off);
                    gemm(scale, dsm.t(), qh, T::zero(), &mut tmp);
                    scatter(dks, &tmp, tokens, dh, d, off);
                }
            });

        let x = &cache.x;
        let mut dx = self.q_proj.backward_rows(x, &dq, rows, true).unwrap();
        add_into(&mut dx, &self.k_proj.backward_rows(x, &dk, rows, true).unwrap());
        add_into(&mut dx, &self.v_proj.backward_rows(x, &dv, rows, true).unwrap());
        if let (Some(adapter), Some(site)) = (self.q_adapter.as_mut(), cache.q_site.as_ref()) {
            add_into(&mut dx, &adapter.backward_rows(site, x, &dq, rows));
        }
        if let (Some(adapter), Some(site)) = (self.v_adapter.as_mut(), cache.v_site.as_ref()) {
            add_into(&mut dx, &adapter.backward_rows(site, x, &dv, rows));
        }
        dx
    }

    pub fn forward(&self, x: &Tensor<T>, batch: usize) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let tokens = x.rows() / batch.max(1);
        let (y, c) = self.forward_rows(x.data(), batch, tokens)?;
        Ok((Tensor::new(x.shape(), y)?, c))
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
        let tokens = dy.rows() / batch.max(1);
        check_len("attention_backward", dy.data(), cache.x.len() / self.dim(), self.dim())?;
        Tensor::new(dy.shape(), self.backward_rows(cache, dy.data(), batch, tokens))
    }
}

/// `rows × cols` view with row stride `stride` into `data`.
fn strided<T: Scalar>(data: &[T], rows: usize, cols: usize, stride: usize) -> MatRef<'_, T> {
    MatRef::strided(data, rows, cols, stride)
}

fn scatter<T: Scalar>(dst: &mut [T], src: &[T], rows: usize, cols: usize, stride: usize, off: usize) {
    for r in 0..rows {
        dst[r * stride + off..r * stride + off + cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
    }
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Pre-norm transformer block with a 4× GELU MLP.
#[derive(Clone, Debug)]
pub struct EncoderBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T: Scalar> {
    n1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    n2: LayerNormCache<T>,
    n2_out: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn dim(&self) -> usize {
        self.norm1.dim()
    }

    pub(crate) fn forward_rows(&self, x: &[T], batch: usize, tokens: usize) -> Result<(Vec<T>, BlockCache<T>)> {
        let rows = batch * tokens;
        let (n1_out, n1) = self.norm1.forward_rows(x, rows)?;
        let (a, attn) = self.attn.forward_rows(&n1_out, batch, tokens)?;
        let mut h = x.to_vec();
        add_into(&mut h, &a);
        let (n2_out, n2) = self.norm2.forward_rows(&h, rows)?;
        let pre_act = self.fc1.forward_rows(&n2_out, rows)?;
        let act: Vec<T> = pre_act.iter().map(|&v| gelu(v)).collect();
        let m = self.fc2.forward_rows(&act, rows)?;
        add_into(&mut h, &m);
        Ok((
            h,
            BlockCache {
                n1,
                attn,
                n2,
                n2_out,
                pre_act,
                act,
            },
        ))
    }

    pub(crate) fn backward_rows(&mut self, cache: &BlockCache<T>, dy: &[T], batch: usize, tokens: usize) -> Vec<T> {
        let rows = batch * tokens;
        let dact = self.fc2.backward_rows(&cache.act, dy, rows, true).unwrap();
        let dpre: Vec<T> = dact
            .iter()
            .zip(&cache.pre_act)
            .map(|(&g, &z)| g * gelu_grad(z))
            .collect();
        let dn2 = self.fc1.backward_rows(&cache.n2_out, &dpre, rows, true).unwrap();
        let mut dh = self.norm2.backward_rows(&cache.n2, &dn2);
        add_into(&mut dh, dy);
        let dn1 = self.attn.backward_rows(&cache.attn, &dh, batch, tokens);
        let dx1 = self.norm1.backward_rows(&cache.n1, &dn1);
        add_into(&mut dh, &dx1);
        dh
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_linear(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Linear<f64> {
        Linear::new(
            Tensor::new(&[out, inp], rand_vec(out * inp, rng)).unwrap(),
            Tensor::new(&[out], rand_vec(out, rng)).unwrap(),
        )
        .unwrap()
    }

    /// Scalar objective `Σ w ⊙ y` so that `dy = w`.
    fn weighted_sum(y: &[f64], w: &[f64]) -> f64 {
        y.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_identity() {
        let layer = Linear::new(Tensor::<f32>::eye(3), Tensor::zeros(&[3])).unwrap();
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 4.0]]);
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut layer = rand_linear(6, 4, &mut rng);
        let x = rand_vec(3 * 6, &mut rng);
        let w = rand_vec(3 * 4, &mut rng);
        layer.backward_rows(&x, &w, 3, true);
        let dx = layer.backward_rows(&x, &w, 3, true).unwrap();
        // Two backward calls accumulate twice.
        let analytic: Vec<f64> = layer.weight.grad.data().iter().map(|g| g / 2.0).collect();
        let base = layer.clone();
        let numeric = central_difference(base.weight.value.data(), 1e-4, |wv| {
            let mut l = base.clone();
            l.weight.value.data_mut().copy_from_slice(wv);
            weighted_sum(&l.forward_rows(&x, 3).unwrap(), &w)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) <= 1e-6, "{a} vs {n}");
        }
        let numeric_x = central_difference(&x, 1e-4, |xv| weighted_sum(&base.forward_rows(xv, 3).unwrap(), &w));
        for (a, n) in dx.iter().zip(&numeric_x) {
            assert!(rel_err(*a, *n) <= 1e-6);
        }
        let numeric_b = central_difference(base.bias.value.data(), 1e-4, |bv| {
            let mut l = base.clone();
            l.bias.value.data_mut().copy_from_slice(bv);
            weighted_sum(&l.forward_rows(&x, 3).unwrap(), &w)
        });
        for (a, n) in layer.bias.grad.data().iter().zip(&numeric_b) {
            assert!(rel_err(a / 2.0, *n) <= 1e-6);
        }
    }

    #[test]
    fn frozen_weight_keeps_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layer = rand_linear(4, 3, &mut rng);
        layer.weight.trainable = false;
        let x = rand_vec(8, &mut rng);
        let dy = rand_vec(6, &mut rng);
        layer.backward_rows(&x, &dy, 2, true);
        assert!(layer.weight.grad.data().iter().all(|&g| g == 0.0));
        assert!(layer.bias.grad.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let mut v = vec![3.0f64; 5];
        softmax_rows(&mut v, 5);
        assert!(v.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut v: Vec<f32> = (0..40).map(|_| rng.random_range(-20.0..20.0)).collect();
        softmax_rows(&mut v, 8);
        for row in v.chunks(8) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn cross_entropy_two_equal_logits() {
        let (loss, _) = cross_entropy(&[0.0f64, 0.0], &[0], 2).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(matches!(
            cross_entropy(&[0.0f64, 0.0], &[2], 2),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn elementwise_ops_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_vec(12, &mut rng);
        let w = rand_vec(12, &mut rng);

        // GELU
        let analytic: Vec<f64> = x.iter().zip(&w).map(|(&v, &g)| g * gelu_grad(v)).collect();
        let numeric = central_difference(&x, 1e-5, |xv| {
            weighted_sum(&xv.iter().map(|&v| gelu(v)).collect::<Vec<_>>(), &w)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) <= 1e-5, "gelu {a} vs {n}");
        }

        // softmax over rows of 4
        let mut y = x.clone();
        softmax_rows(&mut y, 4);
        let mut analytic = w.clone();
        softmax_rows_backward(&y, &mut analytic, 4);
        let numeric = central_difference(&x, 1e-5, |xv| {
            let mut s = xv.to_vec();
            softmax_rows(&mut s, 4);
            weighted_sum(&s, &w)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) <= 1e-5, "softmax {a} vs {n}");
        }

        // mean pool over groups of 3 rows of width 2
        let pooled_w = rand_vec(4, &mut rng);
        let analytic = mean_pool_backward(&pooled_w, 3, 2);
        let numeric = central_difference(&x, 1e-5, |xv| weighted_sum(&mean_pool(xv, 3, 2), &pooled_w));
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) <= 1e-5, "pool {a} vs {n}");
        }

        // cross-entropy over 3 rows of 4 classes
        let labels = [1usize, 3, 0];
        let (_, analytic) = cross_entropy(&x, &labels, 4).unwrap();
        let numeric = central_difference(&x, 1e-5, |xv| cross_entropy(xv, &labels, 4).unwrap().0);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) <= 1e-5, "ce {a} vs {n}");
        }
    }

    #[test]
    fn layer_norm_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut ln = LayerNorm::<f64>::new(5);
        ln.weight.value = Tensor::new(&[5], rand_vec(5, &mut rng)).unwrap();
        ln.bias.value = Tensor::new(&[5], rand_vec(5, &mut rng)).unwrap();
        let x = rand_vec(15, &mut rng);
        let w = rand_vec(15, &mut rng);
        let (_, cache) = ln.forward_rows(&x, 3).unwrap();
        let dx = ln.backward_rows(&cache, &w);
        let base = ln.clone();
        let numeric = central_difference(&x, 1e-5, |xv| weighted_sum(&base.forward_rows(xv, 3).unwrap().0, &w));
        for (a, n) in dx.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) <= 1e-5, "{a} vs {n}");
        }
        let numeric_g = central_difference(base.weight.value.data(), 1e-5, |g| {
            let mut l = base.clone();
            l.weight.value.data_mut().copy_from_slice(g);
            weighted_sum(&l.forward_rows(&x, 3).unwrap().0, &w)
        });
        for (a, n) in ln.weight.grad.data().iter().zip(&numeric_g) {
            assert!(rel_err(*a, *n) <= 1e-5);
        }
    }

    fn rand_attention(d: usize, h: usize, rng: &mut ChaCha8Rng) -> Attention<f64> {
        Attention::new(
            rand_linear(d, d, rng),
            rand_linear(d, d, rng),
            rand_linear(d, d, rng),
            rand_linear(d, d, rng),
            h,
        )
        .unwrap()
    }

    #[test]
    fn attention_head_divisibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let l = rand_linear(6, 6, &mut rng);
        assert!(matches!(
            Attention::new(l.clone(), l.clone(), l.clone(), l, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let attn = rand_attention(8, 2, &mut rng);
        let x = rand_vec(8, &mut rng);
        let (y, _) = attn.forward_rows(&x, 1, 1).unwrap();
        let v = attn.v_proj.forward_rows(&x, 1).unwrap();
        let want = attn.out_proj.forward_rows(&v, 1).unwrap();
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut attn = rand_attention(8, 2, &mut rng);
        let (batch, tokens) = (2, 3);
        let x = rand_vec(batch * tokens * 8, &mut rng);
        let w = rand_vec(batch * tokens * 8, &mut rng);
        let (_, cache) = attn.forward_rows(&x, batch, tokens).unwrap();
        let dx = attn.backward_rows(&cache, &w, batch, tokens);
        let base = attn.clone();
        let f = |a: &Attention<f64>, xv: &[f64]| weighted_sum(&a.forward_rows(xv, batch, tokens).unwrap().0, &w);
        let numeric = central_difference(&x, 1e-5, |xv| f(&base, xv));
        for (a, n) in dx.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) <= 1e-5, "dx {a} vs {n}");
        }
        type Getter = fn(&mut Attention<f64>) -> &mut Param<f64>;
        let params: [(&str, Getter); 4] = [
            ("q.weight", |a| &mut a.q_proj.weight),
            ("k.weight", |a| &mut a.k_proj.weight),
            ("v.bias", |a| &mut a.v_proj.bias),
            ("o.weight", |a| &mut a.out_proj.weight),
        ];
        for (name, get) in params {
            let mut probe = base.clone();
            let start = get(&mut probe).value.data().to_vec();
            let numeric = central_difference(&start, 1e-5, |pv| {
                let mut a = base.clone();
                get(&mut a).value.data_mut().copy_from_slice(pv);
                f(&a, &x)
            });
            for (a, n) in get(&mut attn).grad.data().iter().zip(&numeric) {
                assert!(rel_err(*a, *n) <= 1e-5, "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let attn = rand_attention(8, 2, &mut rng);
        let tokens = 4;
        let x = rand_vec(tokens * 8, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let xp: Vec<f64> = perm.iter().flat_map(|&p| x[p * 8..(p + 1) * 8].to_vec()).collect();
        let (y, _) = attn.forward_rows(&x, 1, tokens).unwrap();
        let (yp, _) = attn.forward_rows(&xp, 1, tokens).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp[i * 8 + c] - y[p * 8 + c]).abs() < 1e-12);
            }
        }
    }
}
