//! Differentiable operations recorded on a [`Tape`].

use super::conv::{
    check_bias, conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, ConvGeom,
    TransposedGeom,
};
use super::{Float, Result, Tape, Tensor, TensorError, Var};

/// Elementwise broadcasting between equal-rank shapes where each axis either
/// matches or is 1 on one side.
#[derive(Clone, Debug)]
struct Broadcast {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch { op, detail: format!("{a:?} vs {b:?}") };
        if a.len() != b.len() {
            return Err(mismatch());
        }
        let (sa_full, sb_full) = (strides(a), strides(b));
        let mut out = Vec::with_capacity(a.len());
        let mut sa = Vec::with_capacity(a.len());
        let mut sb = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let d = match (a[i], b[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(mismatch()),
            };
            out.push(d);
            sa.push(if a[i] == 1 && d > 1 { 0 } else { sa_full[i] });
            sb.push(if b[i] == 1 && d > 1 { 0 } else { sb_full[i] });
        }
        Ok(Broadcast { out, sa, sb })
    }

    fn numel(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` in row-major output order.
    #[inline(always)]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let last = rank - 1;
        let inner = self.out[last];
        let (ia_step, ib_step) = (self.sa[last], self.sb[last]);
        let rows = self.numel() / inner;
        let mut idx = vec![0usize; last];
        for row in 0..rows {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..last {
                ia += idx[d] * self.sa[d];
                ib += idx[d] * self.sb[d];
            }
            let base = row * inner;
            for j in 0..inner {
                f(base + j, ia + j * ia_step, ib + j * ib_step);
            }
            for d in (0..last).rev() {
                idx[d] += 1;
                if idx[d] < self.out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

fn expect_rank<T: Float>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected a {rank}-d tensor, got {:?}", t.shape()),
        });
    }
    Ok(())
}

impl<T: Float> Tape<T> {
    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        forward: impl Fn(T, T) -> T,
        partials: impl Fn(T, T) -> (T, T) + Send + Sync + 'static,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a)?.clone(), self.value(b)?.clone());
        let bc = Broadcast::new(op, ta.shape(), tb.shape())?;
        let mut out = vec![T::zero(); bc.numel()];
        {
            let (da, db) = (ta.data(), tb.data());
            bc.for_each(|o, i, j| out[o] = forward(da[i], db[j]));
        }
        let value = Tensor::new(&bc.out, out)?;
        self.push(value, &[a, b], move |g, need| {
            let (da, db) = (ta.data(), tb.data());
            let mut ga = need[0].then(|| vec![T::zero(); da.len()]);
            let mut gb = need[1].then(|| vec![T::zero(); db.len()]);
            bc.for_each(|o, i, j| {
                let (pa, pb) = partials(da[i], db[j]);
                if let Some(ga) = ga.as_mut() {
                    ga[i] += g[o] * pa;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += g[o] * pb;
                }
            });
            vec![ga, gb]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| (T::one(), T::one()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| (T::one(), -T::one()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    /// Elementwise maximum. On ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "maximum",
            a,
            b,
            |x, y| if x >= y { x } else { y },
            |x, y| if x >= y { (T::one(), T::zero()) } else { (T::zero(), T::one()) },
        )
    }

    fn unary(
        &mut self,
        x: Var,
        forward: impl Fn(T) -> T,
        // derivative from (input, output)
        derivative: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Result<Var> {
        let input = self.value(x)?.clone();
        let value = input.map(&forward);
        let output = value.clone();
        self.push(value, &[x], move |g, _| {
            let grad =
                input.data().iter().zip(output.data()).zip(g).map(|((&i, &o), &g)| g * derivative(i, o)).collect();
            vec![Some(grad)]
        })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.unary(x, move |v| v * factor, move |_, _| factor)
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Result<Var> {
        self.unary(x, move |v| v + offset, |_, _| T::one())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |i, _| if i > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, |_, o| o * (T::one() - o))
    }

    /// Softmax across axis 1 (channels) at every other position.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x)?.clone();
        if input.ndim() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_channel",
                detail: format!("needs a channel axis, got {:?}", input.shape()),
            });
        }
        let (n, c) = (input.shape()[0], input.shape()[1]);
        let inner: usize = input.shape()[2..].iter().product();
        let mut out = vec![T::zero(); input.numel()];
        let d = input.data();
        for b in 0..n {
            for i in 0..inner {
                let base = b * c * inner + i;
                let m = (0..c).map(|k| d[base + k * inner]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..c {
                    let e = (d[base + k * inner] - m).exp();
                    out[base + k * inner] = e;
                    z += e;
                }
                for k in 0..c {
                    out[base + k * inner] /= z;
                }
            }
        }
        let value = Tensor::new(input.shape(), out)?;
        let s = value.clone();
        self.push(value, &[x], move |g, _| {
            let s = s.data();
            let mut dx = vec![T::zero(); s.len()];
            for b in 0..n {
                for i in 0..inner {
                    let base = b * c * inner + i;
                    let dot = (0..c).fold(T::zero(), |acc, k| acc + g[base + k * inner] * s[base + k * inner]);
                    for k in 0..c {
                        let j = base + k * inner;
                        dx[j] = s[j] * (g[j] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x)?;
        let numel = input.numel();
        let total = input.data().iter().fold(T::zero(), |s, &v| s + v);
        self.push(Tensor::scalar(total), &[x], move |g, _| vec![Some(vec![g[0]; numel])])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x)?.numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Mean over H and W: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x)?;
        expect_rank("mean_spatial", input, 4)?;
        let [n, c, h, w] = input.shape().try_into().unwrap();
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let out: Vec<T> =
            input.data().chunks_exact(plane).map(|p| p.iter().fold(T::zero(), |s, &v| s + v) * inv).collect();
        self.push(Tensor::new(&[n, c, 1, 1], out)?, &[x], move |g, _| {
            let mut dx = Vec::with_capacity(n * c * plane);
            for &gv in g {
                dx.extend(std::iter::repeat_n(gv * inv, plane));
            }
            vec![Some(dx)]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x)?.reshape(shape)?;
        self.push(value, &[x], |g, _| vec![Some(g.to_vec())])
    }

    /// `x: [N, in]`, `weight: [out, in]`, `bias: [out]` -> `[N, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x)?.clone(), self.value(weight)?.clone(), self.value(bias)?.clone());
        let (n, fin) = match *tx.shape() {
            [n, f] => (n, f),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    detail: format!("input must be [N, features], got {:?}", tx.shape()),
                })
            }
        };
        let fout = match *tw.shape() {
            [o, i] if i == fin => o,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    detail: format!("weight {:?} does not accept {fin} features", tw.shape()),
                })
            }
        };
        if tb.shape() != [fout] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("bias {:?}, expected [{fout}]", tb.shape()),
            });
        }
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = Vec::with_capacity(n * fout);
        for b in 0..n {
            for o in 0..fout {
                let acc = (0..fin).fold(T::zero(), |s, i| s + xd[b * fin + i] * wd[o * fin + i]);
                out.push(acc + bd[o]);
            }
        }
        self.push(Tensor::new(&[n, fout], out)?, &[x, weight, bias], move |g, need| {
            let (xd, wd) = (tx.data(), tw.data());
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); n * fin];
                for b in 0..n {
                    for o in 0..fout {
                        let gv = g[b * fout + o];
                        for i in 0..fin {
                            dx[b * fin + i] += gv * wd[o * fin + i];
                        }
                    }
                }
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); fout * fin];
                for b in 0..n {
                    for o in 0..fout {
                        let gv = g[b * fout + o];
                        for i in 0..fin {
                            dw[o * fin + i] += gv * xd[b * fin + i];
                        }
                    }
                }
                dw
            });
            let db = need[2].then(|| {
                let mut db = vec![T::zero(); fout];
                for b in 0..n {
                    for o in 0..fout {
                        db[o] += g[b * fout + o];
                    }
                }
                db
            });
            vec![dx, dw, db]
        })
    }

    /// 2-D convolution, `[N, C_in, H, W]` with `[C_out, C_in, kH, kW]` weights.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x)?.clone(), self.value(weight)?.clone(), self.value(bias)?.clone());
        let g = ConvGeom::new(tx.shape(), tw.shape(), stride, padding)?;
        check_bias(&tb, g.cout)?;
        let out = conv2d_forward(tx.data(), tw.data(), tb.data(), &g);
        let value = Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)?;
        self.push(value, &[x, weight, bias], move |dy, need| {
            conv2d_backward(tx.data(), tw.data(), dy, &g, [need[0], need[1], need[2]]).into()
        })
    }

    /// Transposed convolution without padding; `weight` is `[C_in, C_out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x)?.clone(), self.value(weight)?.clone(), self.value(bias)?.clone());
        let tg = TransposedGeom::new(tx.shape(), tw.shape(), stride)?;
        let [n, cout, h, w] = tg.output_shape();
        check_bias(&tb, cout)?;
        let out = conv_transpose2d_forward(tx.data(), tw.data(), tb.data(), &tg);
        let value = Tensor::new(&[n, cout, h, w], out)?;
        self.push(value, &[x, weight, bias], move |dy, need| {
            conv_transpose2d_backward(tx.data(), tw.data(), dy, &tg, [need[0], need[1], need[2]]).into()
        })
    }

    /// 2x2 max pooling with stride 2. The gradient of each window goes to its
    /// first maximal element in row-major order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x)?;
        expect_rank("maxpool2x2", input, 4)?;
        let [n, c, h, w] = input.shape().try_into().unwrap();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2x2",
                detail: format!("spatial extents must be even, got {h}x{w}"),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let d = input.data();
        let numel = d.len();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Tensor::new(&[n, c, ho, wo], out)?, &[x], move |g, _| {
            let mut dx = vec![T::zero(); numel];
            for (&i, &gv) in argmax.iter().zip(g) {
                dx[i] += gv;
            }
            vec![Some(dx)]
        })
    }

    /// Concatenation along axis 1 of two `[N, C, H, W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        expect_rank("concat_channels", ta, 4)?;
        expect_rank("concat_channels", tb, 4)?;
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(TensorError::ShapeMismatch { op: "concat_channels", detail: format!("{sa:?} vs {sb:?}") });
        }
        let n = sa[0];
        let (la, lb) = (ta.numel() / n, tb.numel() / n);
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for i in 0..n {
            out.extend_from_slice(&ta.data()[i * la..(i + 1) * la]);
            out.extend_from_slice(&tb.data()[i * lb..(i + 1) * lb]);
        }
        let shape = [n, sa[1] + sb[1], sa[2], sa[3]];
        self.push(Tensor::new(&shape, out)?, &[a, b], move |g, need| {
            let ga =
                need[0].then(|| (0..n).flat_map(|i| g[i * (la + lb)..i * (la + lb) + la].iter().copied()).collect());
            let gb = need[1]
                .then(|| (0..n).flat_map(|i| g[i * (la + lb) + la..(i + 1) * (la + lb)].iter().copied()).collect());
            vec![ga, gb]
        })
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (tx, tg, tb) = (self.value(x)?.clone(), self.value(gamma)?.clone(), self.value(beta)?.clone());
        expect_rank("batch_norm", &tx, 4)?;
        let [n, c, h, w] = tx.shape().try_into().unwrap();
        check_affine(&tg, &tb, c)?;
        let plane = h * w;
        let count = n * plane;
        if count < 2 {
            return Err(TensorError::InvalidArgument(format!(
                "batch norm in training mode needs at least 2 values per channel, got {count}"
            )));
        }
        let d = tx.data();
        let inv_count = T::one() / T::lit(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s = d[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().fold(s, |s, &v| s + v);
            }
            let m = s * inv_count;
            let mut sq = T::zero();
            for b in 0..n {
                sq = d[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().fold(sq, |s, &v| s + (v - m) * (v - m));
            }
            mean[ch] = m;
            var[ch] = sq * inv_count;
        }
        let eps_t = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); d.len()];
        let mut out = vec![T::zero(); d.len()];
        let (gd, bd) = (tg.data(), tb.data());
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in r {
                    let xh = (d[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let var_out = self.push(value, &[x, gamma, beta], move |g, need| {
            let gd = tg.data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); g.len()];
                let m = T::lit(count as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let k = gd[ch] * inv_std[ch] * inv_count;
                        for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                            dx[i] = k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                        }
                    }
                }
                dx
            });
            vec![dx, need[1].then(|| sum_gx.clone()), need[2].then(|| sum_g.clone())]
        })?;
        Ok((var_out, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x)?.clone(), self.value(gamma)?.clone(), self.value(beta)?.clone());
        expect_rank("batch_norm", &tx, 4)?;
        let [n, c, h, w] = tx.shape().try_into().unwrap();
        check_affine(&tg, &tb, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("running statistics must have {c} entries"),
            });
        }
        let plane = h * w;
        let eps_t = T::lit(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mean = running_mean.to_vec();
        let d = tx.data();
        let (gd, bd) = (tg.data(), tb.data());
        let mut out = vec![T::zero(); d.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    out[i] = gd[ch] * ((d[i] - mean[ch]) * inv_std[ch]) + bd[ch];
                }
            }
        }
        self.push(Tensor::new(tx.shape(), out)?, &[x, gamma, beta], move |g, need| {
            let (d, gd) = (tx.data(), tg.data());
            let mut dx = need[0].then(|| vec![T::zero(); g.len()]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                        let xh = (d[i] - mean[ch]) * inv_std[ch];
                        dgamma[ch] += g[i] * xh;
                        dbeta[ch] += g[i];
                        if let Some(dx) = dx.as_mut() {
                            dx[i] = g[i] * gd[ch] * inv_std[ch];
                        }
                    }
                }
            }
            vec![dx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
        })
    }

    /// Mean over pixels of `-log softmax(logits)[label]`, with logits
    /// `[N, K, ...]` and labels `[N, ...]`.
    pub fn sparse_cross_entropy(&mut self, logits: Var, labels: &Tensor<u8>) -> Result<Var> {
        let tl = self.value(logits)?.clone();
        if tl.ndim() < 2
            || labels.ndim() + 1 != tl.ndim()
            || labels.shape()[0] != tl.shape()[0]
            || labels.shape()[1..] != tl.shape()[2..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "sparse_cross_entropy",
                detail: format!("logits {:?} vs labels {:?}", tl.shape(), labels.shape()),
            });
        }
        let (n, k) = (tl.shape()[0], tl.shape()[1]);
        let inner: usize = tl.shape()[2..].iter().product();
        if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= k) {
            return Err(TensorError::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let labels = labels.clone();
        let d = tl.data();
        let ld = labels.data();
        let mut total = 0.0f64;
        for b in 0..n {
            for i in 0..inner {
                let base = b * k * inner + i;
                let m = (0..k).map(|c| d[base + c * inner]).fold(T::neg_infinity(), T::max);
                let z = (0..k).fold(T::zero(), |s, c| s + (d[base + c * inner] - m).exp());
                let lse = m + z.ln();
                total += (lse - d[base + ld[b * inner + i] as usize * inner]).as_f64();
            }
        }
        let pixels = n * inner;
        let loss = T::lit(total / pixels as f64);
        self.push(Tensor::scalar(loss), &[logits], move |g, _| {
            let d = tl.data();
            let ld = labels.data();
            let scale = g[0] / T::lit(pixels as f64);
            let mut dx = vec![T::zero(); d.len()];
            for b in 0..n {
                for i in 0..inner {
                    let base = b * k * inner + i;
                    let m = (0..k).map(|c| d[base + c * inner]).fold(T::neg_infinity(), T::max);
                    let z = (0..k).fold(T::zero(), |s, c| s + (d[base + c * inner] - m).exp());
                    let label = ld[b * inner + i] as usize;
                    for c in 0..k {
                        let p = (d[base + c * inner] - m).exp() / z;
                        let onehot = if c == label { T::one() } else { T::zero() };
                        dx[base + c * inner] = scale * (p - onehot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}

fn check_affine<T: Float>(gamma: &Tensor<T>, beta: &Tensor<T>, channels: usize) -> Result<()> {
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            detail: format!("gamma {:?} / beta {:?} for {channels} channels", gamma.shape(), beta.shape()),
        });
    }
    Ok(())
}

#[inline]
/// Kept strictly inside (0, 1): saturated inputs land on the smallest normal
/// value or the largest float below one instead of rounding onto the bounds.
pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    s.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::lit(2.0))
}
