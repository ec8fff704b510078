//! Neural-network building blocks with handwritten backward passes.
//!
//! Layers are plain structs of matrices; a layer type doubles as the
//! container for its own gradients (`zeros_like`), and every `backward`
//! *accumulates* into the gradient container so one container serves a whole
//! batch or several call sites (e.g. tied weights).
//!
//! Row reductions inside layer norm run in `f64` so the `f32` and `f64`
//! instantiations of a model stay close enough for finite-difference checks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::{gemm, Matrix, Scalar};

/// Named read-only view of one parameter (or gradient) tensor.
///
/// `decay` marks tensors that weight decay applies to: two-dimensional
/// weights yes, biases and gains no.
pub struct TensorView<'a, S> {
    pub name: String,
    pub data: &'a [S],
    pub decay: bool,
}

/// Mutable counterpart of [`TensorView`].
pub struct TensorViewMut<'a, S> {
    pub name: String,
    pub data: &'a mut [S],
    pub decay: bool,
}

/// Draw i.i.d. normal values into a slice.
pub fn fill_normal<S: Scalar>(rng: &mut impl Rng, data: &mut [S], std: f64) {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    for v in data {
        *v = S::from_f64(dist.sample(rng));
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map `y = x·W + b` with `W` stored as `(fan_in, fan_out)`.
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub w: Matrix<S>,
    pub b: Option<Vec<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            w: Matrix::zeros(fan_in, fan_out),
            b: bias.then(|| vec![S::zero(); fan_out]),
        }
    }

    /// Normal-initialised weights, zero bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, bias: bool, std: f64) -> Self {
        let mut layer = Self::zeros(fan_in, fan_out, bias);
        fill_normal(rng, &mut layer.w.data, std);
        layer
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Matrix::zeros_like(&self.w),
            b: self.b.as_ref().map(|b| vec![S::zero(); b.len()]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols
    }

    /// `y = x·W + b` for a batch of rows.
    pub fn forward(&self, x: &Matrix<S>) -> Matrix<S> {
        assert_eq!(x.cols, self.fan_in(), "linear input width");
        let mut y = Matrix::zeros(x.rows, self.fan_out());
        gemm(S::one(), x, false, &self.w, false, S::zero(), &mut y);
        if let Some(b) = &self.b {
            for i in 0..y.rows {
                for (v, add) in y.row_mut(i).iter_mut().zip(b) {
                    *v += *add;
                }
            }
        }
        y
    }

    /// Accumulate parameter gradients and return `∂L/∂x`.
    pub fn backward(&self, x: &Matrix<S>, dy: &Matrix<S>, grad: &mut Linear<S>) -> Matrix<S> {
        assert_eq!(dy.cols, self.fan_out());
        assert_eq!(dy.rows, x.rows);
        // dW += xᵀ · dy
        gemm(S::one(), x, true, dy, false, S::one(), &mut grad.w);
        // db += column sums of dy
        if let Some(db) = &mut grad.b {
            for i in 0..dy.rows {
                for (g, d) in db.iter_mut().zip(dy.row(i)) {
                    *g += *d;
                }
            }
        }
        // dx = dy · Wᵀ
        let mut dx = Matrix::zeros(x.rows, self.fan_in());
        gemm(S::one(), dy, false, &self.w, true, S::zero(), &mut dx);
        dx
    }

    pub fn tensors(&self, prefix: &str) -> Vec<TensorView<'_, S>> {
        let mut v = vec![TensorView {
            name: format!("{prefix}.w"),
            data: &self.w.data,
            decay: true,
        }];
        if let Some(b) = &self.b {
            v.push(TensorView {
                name: format!("{prefix}.b"),
                data: b,
                decay: false,
            });
        }
        v
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorViewMut<'_, S>> {
        let mut v = vec![TensorViewMut {
            name: format!("{prefix}.w"),
            data: &mut self.w.data,
            decay: true,
        }];
        if let Some(b) = &mut self.b {
            v.push(TensorViewMut {
                name: format!("{prefix}.b"),
                data: b,
                decay: false,
            });
        }
        v
    }
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

/// Variance floor inside layer norm.
pub const LN_EPS: f64 = 1e-5;

/// Per-row normalisation with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm<S> {
    pub g: Vec<S>,
    pub b: Vec<S>,
}

/// Intermediates [`LayerNorm::forward`] saves for the backward pass.
pub struct LnCache<S> {
    /// Normalised inputs x̂.
    pub xhat: Matrix<S>,
    /// Reciprocal standard deviation per row.
    pub rstd: Vec<f64>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            g: vec![S::one(); width],
            b: vec![S::zero(); width],
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            g: vec![S::zero(); self.g.len()],
            b: vec![S::zero(); self.b.len()],
        }
    }

    pub fn width(&self) -> usize {
        self.g.len()
    }

    pub fn forward(&self, x: &Matrix<S>) -> (Matrix<S>, LnCache<S>) {
        let d = self.width();
        assert_eq!(x.cols, d, "layer norm width");
        let mut out = Matrix::zeros(x.rows, d);
        let mut xhat = Matrix::zeros(x.rows, d);
        let mut rstd = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let row = x.row(i);
            let mut mean = 0.0f64;
            for v in row {
                mean += v.as_f64();
            }
            mean /= d as f64;
            let mut var = 0.0f64;
            for v in row {
                let c = v.as_f64() - mean;
                var += c * c;
            }
            var /= d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            let o = out.row_mut(i);
            for j in 0..d {
                let h = (row[j].as_f64() - mean) * r;
                xh[j] = S::from_f64(h);
                o[j] = S::from_f64(h * self.g[j].as_f64() + self.b[j].as_f64());
            }
        }
        (out, LnCache { xhat, rstd })
    }

    /// Accumulate gain/bias gradients and return `∂L/∂x`.
    pub fn backward(&self, cache: &LnCache<S>, dy: &Matrix<S>, grad: &mut LayerNorm<S>) -> Matrix<S> {
        let d = self.width();
        assert_eq!(dy.cols, d);
        let mut dx = Matrix::zeros(dy.rows, d);
        for i in 0..dy.rows {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            let r = cache.rstd[i];
            // Row means of dŷ and dŷ⊙x̂, where dŷ = dy ⊙ g.
            let mut m1 = 0.0f64;
            let mut m2 = 0.0f64;
            for j in 0..d {
                let dh = dyr[j].as_f64() * self.g[j].as_f64();
                m1 += dh;
                m2 += dh * xh[j].as_f64();
                grad.g[j] += S::from_f64(dyr[j].as_f64() * xh[j].as_f64());
                grad.b[j] += dyr[j];
            }
            m1 /= d as f64;
            m2 /= d as f64;
            let dxr = dx.row_mut(i);
            for j in 0..d {
                let dh = dyr[j].as_f64() * self.g[j].as_f64();
                dxr[j] = S::from_f64(r * (dh - m1 - xh[j].as_f64() * m2));
            }
        }
        dx
    }

    pub fn tensors(&self, prefix: &str) -> Vec<TensorView<'_, S>> {
        vec![
            TensorView {
                name: format!("{prefix}.g"),
                data: &self.g,
                decay: false,
            },
            TensorView {
                name: format!("{prefix}.b"),
                data: &self.b,
                decay: false,
            },
        ]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorViewMut<'_, S>> {
        vec![
            TensorViewMut {
                name: format!("{prefix}.g"),
                data: &mut self.g,
                decay: false,
            },
            TensorViewMut {
                name: format!("{prefix}.b"),
                data: &mut self.b,
                decay: false,
            },
        ]
    }
}

// ---------------------------------------------------------------------------
// Embedding gather/scatter
// ---------------------------------------------------------------------------

/// Copy table rows `ids` into a fresh matrix.
pub fn gather_rows<S: Scalar>(table: &Matrix<S>, ids: &[u32]) -> Matrix<S> {
    let mut out = Matrix::zeros(ids.len(), table.cols);
    for (i, &id) in ids.iter().enumerate() {
        out.row_mut(i).copy_from_slice(table.row(id as usize));
    }
    out
}

/// `grad_table[ids[i]] += dy[i]`, sequential so accumulation order is fixed.
pub fn scatter_add_rows<S: Scalar>(grad_table: &mut Matrix<S>, ids: &[u32], dy: &Matrix<S>) {
    assert_eq!(ids.len(), dy.rows);
    assert_eq!(grad_table.cols, dy.cols);
    for (i, &id) in ids.iter().enumerate() {
        for (g, d) in grad_table.row_mut(id as usize).iter_mut().zip(dy.row(i)) {
            *g += *d;
        }
    }
}
