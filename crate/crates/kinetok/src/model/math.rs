//! Dense row-major tensors and the handful of primitives the transformer
//! needs: matrix products in the three orientations backprop requires,
//! layer normalization, tanh-approximated GELU, rotary rotations, and a
//! Box–Muller Gaussian sampler for initialization.

use rand_chacha::ChaCha8Rng;

/// Row-major 2-D array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * gauss(rng)).collect();
        Tensor { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Standard normal sample via Box–Muller (keeps the dependency set small and
/// the byte stream deterministic).
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// c = a · b for a: m×k, b: k×n.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.rows);
    let mut c = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for l in 0..a.cols {
            let av = a.at(i, l);
            if av == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                *c.at_mut(i, j) += av * b.at(l, j);
            }
        }
    }
    c
}

/// c = aᵀ · b for a: k×m, b: k×n (gradient w.r.t. a right factor).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.rows, b.rows);
    let mut c = Tensor::zeros(a.cols, b.cols);
    for l in 0..a.rows {
        for i in 0..a.cols {
            let av = a.at(l, i);
            if av == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                *c.at_mut(i, j) += av * b.at(l, j);
            }
        }
    }
    c
}

/// c = a · bᵀ for a: m×k, b: n×k (gradient w.r.t. a left factor).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.cols);
    let mut c = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let mut s = 0.0;
            for l in 0..a.cols {
                s += a.at(i, l) * b.at(j, l);
            }
            *c.at_mut(i, j) = s;
        }
    }
    c
}

/// Add a 1×n bias row to every row of x.
pub fn add_bias(x: &mut Tensor, bias: &Tensor) {
    debug_assert_eq!(bias.rows, 1);
    debug_assert_eq!(bias.cols, x.cols);
    for i in 0..x.rows {
        for j in 0..x.cols {
            *x.at_mut(i, j) += bias.at(0, j);
        }
    }
}

/// Row-wise layer normalization with learned gain/bias.
/// Returns (y, xhat, rstd) — xhat and rstd are needed by the backward pass.
pub fn layernorm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    const EPS: f64 = 1e-5;
    let mut y = Tensor::zeros(x.rows, x.cols);
    let mut xhat = Tensor::zeros(x.rows, x.cols);
    let mut rstds = Vec::with_capacity(x.rows);
    let n = x.cols as f64;
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + EPS).sqrt();
        rstds.push(rstd);
        for j in 0..x.cols {
            let xh = (row[j] - mean) * rstd;
            *xhat.at_mut(i, j) = xh;
            *y.at_mut(i, j) = gamma.at(0, j) * xh + beta.at(0, j);
        }
    }
    (y, xhat, rstds)
}

/// Backward of [`layernorm_forward`]; accumulates dgamma/dbeta in place.
pub fn layernorm_backward(
    dy: &Tensor,
    xhat: &Tensor,
    rstds: &[f64],
    gamma: &Tensor,
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
) -> Tensor {
    let n = dy.cols as f64;
    let mut dx = Tensor::zeros(dy.rows, dy.cols);
    for i in 0..dy.rows {
        let mut sum_g = 0.0; // Σ dy·γ
        let mut sum_gx = 0.0; // Σ dy·γ·xhat
        for j in 0..dy.cols {
            let g = dy.at(i, j) * gamma.at(0, j);
            sum_g += g;
            sum_gx += g * xhat.at(i, j);
            *dgamma.at_mut(0, j) += dy.at(i, j) * xhat.at(i, j);
            *dbeta.at_mut(0, j) += dy.at(i, j);
        }
        for j in 0..dy.cols {
            let g = dy.at(i, j) * gamma.at(0, j);
            *dx.at_mut(i, j) =
                rstds[i] * (g - sum_g / n - xhat.at(i, j) * sum_gx / n);
        }
    }
    dx
}

const GELU_C: f64 = 0.044_715;

/// GELU with the tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

/// d/dx of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

/// Rotary base frequency.
pub const ROPE_BASE: f64 = 10_000.0;

/// Apply the rotary rotation in place to a T×d tensor organized as `heads`
/// contiguous blocks of `head_dim` columns. `sign` +1 rotates forward, −1
/// applies the transpose (used for gradients).
pub fn rope_apply(x: &mut Tensor, heads: usize, head_dim: usize, sign: f64) {
    debug_assert_eq!(heads * head_dim, x.cols);
    debug_assert_eq!(head_dim % 2, 0);
    for pos in 0..x.rows {
        for h in 0..heads {
            let base_col = h * head_dim;
            for i in 0..head_dim / 2 {
                let theta = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = sign * pos as f64 * theta;
                let (s, c) = angle.sin_cos();
                let a = x.at(pos, base_col + 2 * i);
                let b = x.at(pos, base_col + 2 * i + 1);
                *x.at_mut(pos, base_col + 2 * i) = a * c - b * s;
                *x.at_mut(pos, base_col + 2 * i + 1) = a * s + b * c;
            }
        }
    }
}
