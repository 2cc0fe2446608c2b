//! Differentiable tensor operations.
//!
//! Every op builds its output eagerly and, when any input requires grad,
//! records a backward closure that maps the output gradient onto the
//! inputs. Closures capture parent handles (cheap `Arc` clones) and, for
//! transcendental ops, the forward result as a plain `Vec` so no reference
//! cycles are created.


use super::{check_same_shape, BackwardFn, Scalar, TensorBase};
use crate::error::{Error, Result};

/// Row-major matrix product: (m×k)·(k×n) → m×n.
pub(crate) fn matmul_raw<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a·bᵀ where a is m×n and b is k×n, giving m×k.
fn matmul_bt<E: Scalar>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = E::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// aᵀ·b where a is m×k and b is m×n, giving k×n.
fn matmul_at<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

impl<E: Scalar> TensorBase<E> {
    fn view_2d(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape().len() {
            1 => Ok((1, self.shape()[0])),
            2 => Ok((self.shape()[0], self.shape()[1])),
            _ => Err(Error::Shape(format!(
                "{op}: expected 1-D or 2-D tensor, got shape {:?}",
                self.shape()
            ))),
        }
    }

    fn binary_elementwise(
        &self,
        other: &Self,
        op: &str,
        forward: impl Fn(E, E) -> E,
        backward: impl Fn(E, E, E) -> (E, E) + Send + Sync + 'static,
    ) -> Result<Self> {
        check_same_shape(op, self, other)?;
        let out: Vec<E> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| forward(x, y)).collect()
        };
        let needs = self.requires_grad() || other.requires_grad();
        let back: Option<BackwardFn<E>> = if needs {
            let a = self.clone();
            let b = other.clone();
            Some(Box::new(move |g, sink| {
                let av = a.data();
                let bv = b.data();
                let ga = a.requires_grad();
                let gb = b.requires_grad();
                let mut da = if ga { vec![E::zero(); av.len()] } else { Vec::new() };
                let mut db = if gb { vec![E::zero(); bv.len()] } else { Vec::new() };
                for i in 0..g.len() {
                    let (dx, dy) = backward(av[i], bv[i], g[i]);
                    if ga {
                        da[i] = dx;
                    }
                    if gb {
                        db[i] = dy;
                    }
                }
                drop(av);
                drop(bv);
                if ga {
                    sink.add_to(&a, &da);
                }
                if gb {
                    sink.add_to(&b, &db);
                }
            }))
        } else {
            None
        };
        Ok(Self::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            back,
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary_elementwise(other, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary_elementwise(other, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary_elementwise(other, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary_elementwise(
            other,
            "div",
            |x, y| x / y,
            |x, y, g| (g / y, -g * x / (y * y)),
        )
    }

    fn unary_with_saved(
        &self,
        out: Vec<E>,
        saved: Vec<E>,
        dfn: impl Fn(E /*saved*/, E /*x*/, E /*g*/) -> E + Send + Sync + 'static,
    ) -> Self {
        let back: Option<BackwardFn<E>> = if self.requires_grad() {
            let x = self.clone();
            Some(Box::new(move |g, sink| {
                let xv = x.data();
                let dx: Vec<E> = (0..g.len())
                    .map(|i| {
                        let s = if saved.is_empty() { E::zero() } else { saved[i] };
                        dfn(s, xv[i], g[i])
                    })
                    .collect();
                drop(xv);
                sink.add_to(&x, &dx);
            }))
        } else {
            None
        };
        Self::from_op(out, self.shape().to_vec(), vec![self.clone()], back)
    }

    /// Elementwise a·x + b for scalar constants.
    pub fn affine(&self, a: E, b: E) -> Self {
        let out: Vec<E> = self.data().iter().map(|&x| a * x + b).collect();
        let back: Option<BackwardFn<E>> = if self.requires_grad() {
            let x = self.clone();
            Some(Box::new(move |g, sink| {
                let dx: Vec<E> = g.iter().map(|&gv| a * gv).collect();
                sink.add_to(&x, &dx);
            }))
        } else {
            None
        };
        Self::from_op(out, self.shape().to_vec(), vec![self.clone()], back)
    }

    pub fn scale(&self, c: E) -> Self {
        self.affine(c, E::zero())
    }

    pub fn neg(&self) -> Self {
        self.affine(-E::one(), E::zero())
    }

    pub fn exp(&self) -> Self {
        let out: Vec<E> = self.data().iter().map(|&x| x.exp()).collect();
        self.unary_with_saved(out.clone(), out, |y, _, g| g * y)
    }

    pub fn ln(&self) -> Self {
        let out: Vec<E> = self.data().iter().map(|&x| x.ln()).collect();
        self.unary_with_saved(out, Vec::new(), |_, x, g| g / x)
    }

    pub fn sqrt(&self) -> Self {
        let out: Vec<E> = self.data().iter().map(|&x| x.sqrt()).collect();
        let two = E::from_f64(2.0);
        self.unary_with_saved(out.clone(), out, move |y, _, g| g / (two * y))
    }

    pub fn abs(&self) -> Self {
        let out: Vec<E> = self.data().iter().map(|&x| x.abs()).collect();
        self.unary_with_saved(out, Vec::new(), |_, x, g| {
            if x > E::zero() {
                g
            } else if x < E::zero() {
                -g
            } else {
                E::zero()
            }
        })
    }

    pub fn tanh(&self) -> Self {
        let out: Vec<E> = self.data().iter().map(|&x| x.tanh()).collect();
        self.unary_with_saved(out.clone(), out, |y, _, g| g * (E::one() - y * y))
    }

    pub fn sigmoid(&self) -> Self {
        let out: Vec<E> = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        self.unary_with_saved(out.clone(), out, |y, _, g| g * y * (E::one() - y))
    }

    /// Numerically stable ln(1 + eˣ).
    pub fn softplus(&self) -> Self {
        let out: Vec<E> = self
            .data()
            .iter()
            .map(|&x| x.max(E::zero()) + (-(x.abs())).exp().ln_1p())
            .collect();
        self.unary_with_saved(out, Vec::new(), |_, x, g| g * sigmoid_scalar(x))
    }

    /// x · sigmoid(x).
    pub fn silu(&self) -> Self {
        let sig: Vec<E> = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let out: Vec<E> = self.data().iter().zip(&sig).map(|(&x, &s)| x * s).collect();
        self.unary_with_saved(out, sig, |s, x, g| g * (s + x * s * (E::one() - s)))
    }

    /// Parametric ReLU with a learnable scalar slope for x < 0.
    pub fn prelu(&self, slope: &Self) -> Result<Self> {
        if slope.numel() != 1 {
            return Err(Error::Shape(format!(
                "prelu: slope must be a scalar tensor, got shape {:?}",
                slope.shape()
            )));
        }
        let a = slope.item()?;
        let out: Vec<E> = self
            .data()
            .iter()
            .map(|&x| if x >= E::zero() { x } else { a * x })
            .collect();
        let needs = self.requires_grad() || slope.requires_grad();
        let back: Option<BackwardFn<E>> = if needs {
            let x = self.clone();
            let s = slope.clone();
            Some(Box::new(move |g, sink| {
                let xv = x.data();
                let a = s.data()[0];
                if x.requires_grad() {
                    let dx: Vec<E> = xv
                        .iter()
                        .zip(g)
                        .map(|(&xi, &gi)| if xi >= E::zero() { gi } else { a * gi })
                        .collect();
                    sink.add_to(&x, &dx);
                }
                if s.requires_grad() {
                    let mut da = E::zero();
                    for (&xi, &gi) in xv.iter().zip(g) {
                        if xi < E::zero() {
                            da += gi * xi;
                        }
                    }
                    drop(xv);
                    sink.add_to(&s, &[da]);
                }
            }))
        } else {
            None
        };
        Ok(Self::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), slope.clone()],
            back,
        ))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.view_2d("matmul")?;
        let (k2, n) = other.view_2d("matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree ({:?} vs {:?})",
                self.shape(),
                other.shape()
            )));
        }
        let out = matmul_raw(&self.data(), &other.data(), m, k, n);
        let needs = self.requires_grad() || other.requires_grad();
        let back: Option<BackwardFn<E>> = if needs {
            let a = self.clone();
            let b = other.clone();
            Some(Box::new(move |g, sink| {
                if a.requires_grad() {
                    let da = matmul_bt(g, &b.data(), m, n, k);
                    sink.add_to(&a, &da);
                }
                if b.requires_grad() {
                    let db = matmul_at(&a.data(), g, m, k, n);
                    sink.add_to(&b, &db);
                }
            }))
        } else {
            None
        };
        let out_shape = if self.shape().len() == 1 && other.shape().len() == 2 {
            vec![n]
        } else {
            vec![m, n]
        };
        Ok(Self::from_op(
            out,
            out_shape,
            vec![self.clone(), other.clone()],
            back,
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.view_2d("transpose")?;
        let src = self.data();
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        drop(src);
        let back: Option<BackwardFn<E>> = if self.requires_grad() {
            let x = self.clone();
            Some(Box::new(move |g, sink| {
                let mut dx = vec![E::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                sink.add_to(&x, &dx);
            }))
        } else {
            None
        };
        Ok(Self::from_op(out, vec![n, m], vec![self.clone()], back))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        let out = self.to_vec();
        let back: Option<BackwardFn<E>> = if self.requires_grad() {
            let x = self.clone();
            Some(Box::new(move |g, sink| {
                sink.add_to(&x, g);
            }))
        } else {
            None
        };
        Ok(Self::from_op(out, shape.to_vec(), vec![self.clone()], back))
    }

    pub fn sum_all(&self) -> Self {
        let s: E = self.data().iter().copied().sum();
        let back: Option<BackwardFn<E>> = if self.requires_grad() {
            let x = self.clone();
            Some(Box::new(move |g, sink| {
                let gv = g[0];
                let dx = vec![gv; x.numel()];
                sink.add_to(&x, &dx);
            }))
        } else {
            None
        };
        Self::from_op(vec![s], vec![1], vec![self.clone()], back)
    }

    pub fn mean_all(&self) -> Self {
        let n = E::from_f64(self.numel() as f64);
        self.sum_all().scale(E::one() / n)
    }

    /// Column sums: (m, n) → (1, n).
    pub fn sum_rows(&self) -> Result<Self> {
        let (m, n) = self.view_2d("sum_rows")?;
        let src = self.data();
        let mut out = vec![E::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        drop(src);
        let back: Option<BackwardFn<E>> = if self.requires_grad() {
            let x = self.clone();
            Some(Box::new(move |g, sink| {
                let mut dx = vec![E::zero(); m * n];
                for i in 0..m {
                    dx[i * n..(i + 1) * n].copy_from_slice(g);
                }
                sink.add_to(&x, &dx);
            }))
        } else {
            None
        };
        Ok(Self::from_op(out, vec![1, n], vec![self.clone()], back))
    }

    /// Add a length-n vector to every row of an (m, n) tensor.
    pub fn add_rowvec(&self, v: &Self) -> Result<Self> {
        let (m, n) = self.view_2d("add_rowvec")?;
        if v.numel() != n {
            return Err(Error::Shape(format!(
                "add_rowvec: vector length {} does not match {} columns",
                v.numel(),
                n
            )));
        }
        let out: Vec<E> = {
            let x = self.data();
            let vv = v.data();
            let mut out = x.clone();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += vv[j];
                }
            }
            out
        };
        let needs = self.requires_grad() || v.requires_grad();
        let back: Option<BackwardFn<E>> = if needs {
            let x = self.clone();
            let vt = v.clone();
            Some(Box::new(move |g, sink| {
                if x.requires_grad() {
                    sink.add_to(&x, g);
                }
                if vt.requires_grad() {
                    let mut dv = vec![E::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            dv[j] += g[i * n + j];
                        }
                    }
                    sink.add_to(&vt, &dv);
                }
            }))
        } else {
            None
        };
        Ok(Self::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), v.clone()],
            back,
        ))
    }

    /// Multiply every row of an (m, n) tensor by a length-n vector.
    pub fn mul_rowvec(&self, v: &Self) -> Result<Self> {
        let (m, n) = self.view_2d("mul_rowvec")?;
        if v.numel() != n {
            return Err(Error::Shape(format!(
                "mul_rowvec: vector length {} does not match {} columns",
                v.numel(),
                n
            )));
        }
        let out: Vec<E> = {
            let x = self.data();
            let vv = v.data();
            let mut out = x.clone();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] *= vv[j];
                }
            }
            out
        };
        let needs = self.requires_grad() || v.requires_grad();
        let back: Option<BackwardFn<E>> = if needs {
            let x = self.clone();
            let vt = v.clone();
            Some(Box::new(move |g, sink| {
                let xv = x.data();
                let vv = vt.data();
                if x.requires_grad() {
                    let mut dx = vec![E::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[i * n + j] * vv[j];
                        }
                    }
                    drop(vv);
                    sink.add_to(&x, &dx);
                } else {
                    drop(vv);
                }
                if vt.requires_grad() {
                    let mut dv = vec![E::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            dv[j] += g[i * n + j] * xv[i * n + j];
                        }
                    }
                    drop(xv);
                    sink.add_to(&vt, &dv);
                }
            }))
        } else {
            None
        };
        Ok(Self::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), v.clone()],
            back,
        ))
    }

    /// Multiply row i of an (m, n) tensor by element i of a length-m vector.
    pub fn mul_colvec(&self, c: &Self) -> Result<Self> {
        let (m, n) = self.view_2d("mul_colvec")?;
        if c.numel() != m {
            return Err(Error::Shape(format!(
                "mul_colvec: vector length {} does not match {} rows",
                c.numel(),
                m
            )));
        }
        let out: Vec<E> = {
            let x = self.data();
            let cv = c.data();
            let mut out = x.clone();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] *= cv[i];
                }
            }
            out
        };
        let needs = self.requires_grad() || c.requires_grad();
        let back: Option<BackwardFn<E>> = if needs {
            let x = self.clone();
            let ct = c.clone();
            Some(Box::new(move |g, sink| {
                let xv = x.data();
                let cv = ct.data();
                if x.requires_grad() {
                    let mut dx = vec![E::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[i * n + j] * cv[i];
                        }
                    }
                    drop(cv);
                    sink.add_to(&x, &dx);
                } else {
                    drop(cv);
                }
                if ct.requires_grad() {
                    let mut dc = vec![E::zero(); m];
                    for i in 0..m {
                        for j in 0..n {
                            dc[i] += g[i * n + j] * xv[i * n + j];
                        }
                    }
                    drop(xv);
                    sink.add_to(&ct, &dc);
                }
            }))
        } else {
            None
        };
        Ok(Self::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), c.clone()],
            back,
        ))
    }

    /// Softmax along `axis` (0 or 1) of a 1-D or 2-D tensor, log-sum-exp
    /// stabilized so arbitrarily large inputs cannot overflow.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (m, n) = self.view_2d("softmax")?;
        if axis > 1 {
            return Err(Error::Contract(format!("softmax: axis {axis} out of range")));
        }
        // Normalize along rows; for axis 0 transpose in and out.
        if axis == 0 && m > 1 {
            return Ok(self.transpose()?.softmax(1)?.transpose()?);
        }
        // Rows are normalized in f64 so that even f32 outputs sum to one
        // within a few ULPs.
        let out: Vec<E> = {
            let x = self.data();
            let mut out = vec![E::zero(); m * n];
            let mut exps = vec![0.0f64; n];
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let max = row
                    .iter()
                    .map(|&v| Scalar::to_f64(v))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0f64;
                for (j, &v) in row.iter().enumerate() {
                    let e = (Scalar::to_f64(v) - max).exp();
                    exps[j] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[i * n + j] = E::from_f64(exps[j] / sum);
                }
            }
            out
        };
        let back: Option<BackwardFn<E>> = if self.requires_grad() {
            let x = self.clone();
            let s = out.clone();
            Some(Box::new(move |g, sink| {
                let mut dx = vec![E::zero(); m * n];
                for i in 0..m {
                    let srow = &s[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let dot: E = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                    for j in 0..n {
                        dx[i * n + j] = srow[j] * (grow[j] - dot);
                    }
                }
                sink.add_to(&x, &dx);
            }))
        } else {
            None
        };
        Ok(Self::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            back,
        ))
    }

    /// Last-axis layer normalization with affine gain/bias.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: E) -> Result<Self> {
        let (m, n) = self.view_2d("layer_norm")?;
        if gain.numel() != n || bias.numel() != n {
            return Err(Error::Shape(format!(
                "layer_norm: gain/bias length must be {n}, got {} and {}",
                gain.numel(),
                bias.numel()
            )));
        }
        if eps <= E::zero() {
            return Err(Error::Contract("layer_norm: eps must be positive".into()));
        }
        let mut normalized = vec![E::zero(); m * n];
        let mut inv_std = vec![E::zero(); m];
        let out: Vec<E> = {
            let x = self.data();
            let gv = gain.data();
            let bv = bias.data();
            let nf = E::from_f64(n as f64);
            let mut out = vec![E::zero(); m * n];
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let mean = row.iter().copied().sum::<E>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nf;
                let istd = E::one() / (var + eps).sqrt();
                inv_std[i] = istd;
                for j in 0..n {
                    let xn = (row[j] - mean) * istd;
                    normalized[i * n + j] = xn;
                    out[i * n + j] = xn * gv[j] + bv[j];
                }
            }
            out
        };
        let needs = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let back: Option<BackwardFn<E>> = if needs {
            let x = self.clone();
            let gt = gain.clone();
            let bt = bias.clone();
            Some(Box::new(move |g, sink| {
                let gv = gt.data();
                let nf = E::from_f64(n as f64);
                if x.requires_grad() {
                    let mut dx = vec![E::zero(); m * n];
                    for i in 0..m {
                        let xn = &normalized[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        // d/dxn with gain folded in
                        let dxn: Vec<E> =
                            (0..n).map(|j| grow[j] * gv[j]).collect();
                        let mean_dxn = dxn.iter().copied().sum::<E>() / nf;
                        let mean_dxn_xn =
                            dxn.iter().zip(xn).map(|(&d, &v)| d * v).sum::<E>() / nf;
                        for j in 0..n {
                            dx[i * n + j] =
                                inv_std[i] * (dxn[j] - mean_dxn - xn[j] * mean_dxn_xn);
                        }
                    }
                    sink.add_to(&x, &dx);
                }
                drop(gv);
                if gt.requires_grad() {
                    let mut dg = vec![E::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * normalized[i * n + j];
                        }
                    }
                    sink.add_to(&gt, &dg);
                }
                if bt.requires_grad() {
                    let mut db = vec![E::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    sink.add_to(&bt, &db);
                }
            }))
        } else {
            None
        };
        Ok(Self::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            back,
        ))
    }

    /// Rows r0..r1 of a 2-D tensor (contiguous copy).
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Self> {
        let (m, n) = self.view_2d("slice_rows")?;
        if r0 >= r1 || r1 > m {
            return Err(Error::Shape(format!(
                "slice_rows: range {r0}..{r1} invalid for {m} rows"
            )));
        }
        let out = self.data()[r0 * n..r1 * n].to_vec();
        let back: Option<BackwardFn<E>> = if self.requires_grad() {
            let x = self.clone();
            Some(Box::new(move |g, sink| {
                let mut dx = vec![E::zero(); m * n];
                dx[r0 * n..r1 * n].copy_from_slice(g);
                sink.add_to(&x, &dx);
            }))
        } else {
            None
        };
        Ok(Self::from_op(
            out,
            vec![r1 - r0, n],
            vec![self.clone()],
            back,
        ))
    }

    /// Columns c0..c1 of a 2-D tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Self> {
        let (m, n) = self.view_2d("slice_cols")?;
        if c0 >= c1 || c1 > n {
            return Err(Error::Shape(format!(
                "slice_cols: range {c0}..{c1} invalid for {n} columns"
            )));
        }
        let w = c1 - c0;
        let out: Vec<E> = {
            let x = self.data();
            let mut out = vec![E::zero(); m * w];
            for i in 0..m {
                out[i * w..(i + 1) * w].copy_from_slice(&x[i * n + c0..i * n + c1]);
            }
            out
        };
        let back: Option<BackwardFn<E>> = if self.requires_grad() {
            let x = self.clone();
            Some(Box::new(move |g, sink| {
                let mut dx = vec![E::zero(); m * n];
                for i in 0..m {
                    dx[i * n + c0..i * n + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                sink.add_to(&x, &dx);
            }))
        } else {
            None
        };
        Ok(Self::from_op(out, vec![m, w], vec![self.clone()], back))
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: empty input".into()));
        }
        let n = parts[0].cols();
        let mut total_rows = 0;
        for p in parts {
            let (r, c) = p.view_2d("concat_rows")?;
            if c != n {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch {c} vs {n}"
                )));
            }
            total_rows += r;
        }
        let mut out = Vec::with_capacity(total_rows * n);
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        let needs = parts.iter().any(|p| p.requires_grad());
        let back: Option<BackwardFn<E>> = if needs {
            let handles: Vec<Self> = parts.to_vec();
            Some(Box::new(move |g, sink| {
                let mut offset = 0;
                for p in &handles {
                    let len = p.numel();
                    if p.requires_grad() {
                        sink.add_to(p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }))
        } else {
            None
        };
        Ok(Self::from_op(out, vec![total_rows, n], parts.to_vec(), back))
    }

    /// Stack 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: empty input".into()));
        }
        let m = parts[0].rows();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_cols = 0;
        for p in parts {
            let (r, c) = p.view_2d("concat_cols")?;
            if r != m {
                return Err(Error::Shape(format!("concat_cols: row mismatch {r} vs {m}")));
            }
            widths.push(c);
            total_cols += c;
        }
        let mut out = vec![E::zero(); m * total_cols];
        {
            let mut col = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = p.data();
                for i in 0..m {
                    out[i * total_cols + col..i * total_cols + col + w]
                        .copy_from_slice(&src[i * w..(i + 1) * w]);
                }
                col += w;
            }
        }
        let needs = parts.iter().any(|p| p.requires_grad());
        let back: Option<BackwardFn<E>> = if needs {
            let handles: Vec<Self> = parts.to_vec();
            let widths = widths.clone();
            Some(Box::new(move |g, sink| {
                let mut col = 0;
                for (p, &w) in handles.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut dp = vec![E::zero(); m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total_cols + col..i * total_cols + col + w]);
                        }
                        sink.add_to(p, &dp);
                    }
                    col += w;
                }
            }))
        } else {
            None
        };
        Ok(Self::from_op(
            out,
            vec![m, total_cols],
            parts.to_vec(),
            back,
        ))
    }

    /// Interpret the tensor as logical (a, b, c) row-major and swap the two
    /// leading axes, returning shape (b, a·c).
    pub fn permute_swap(&self, a: usize, b: usize, c: usize) -> Result<Self> {
        if a * b * c != self.numel() {
            return Err(Error::Shape(format!(
                "permute_swap: ({a},{b},{c}) does not tile {} elements",
                self.numel()
            )));
        }
        let src = self.data();
        let mut out = vec![E::zero(); a * b * c];
        for i in 0..a {
            for j in 0..b {
                let from = (i * b + j) * c;
                let to = (j * a + i) * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
        drop(src);
        let back: Option<BackwardFn<E>> = if self.requires_grad() {
            let x = self.clone();
            Some(Box::new(move |g, sink| {
                let mut dx = vec![E::zero(); a * b * c];
                for i in 0..a {
                    for j in 0..b {
                        let from = (j * a + i) * c;
                        let to = (i * b + j) * c;
                        dx[to..to + c].copy_from_slice(&g[from..from + c]);
                    }
                }
                sink.add_to(&x, &dx);
            }))
        } else {
            None
        };
        Ok(Self::from_op(out, vec![b, a * c], vec![self.clone()], back))
    }

    /// Mean squared error against another tensor of the same shape.
    pub fn mse(&self, other: &Self) -> Result<Self> {
        let d = self.sub(other)?;
        Ok(d.mul(&d)?.mean_all())
    }
}

pub(crate) fn sigmoid_scalar<E: Scalar>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}
