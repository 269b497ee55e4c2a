//! Small dense-network building blocks shared by the toy encoder and the
//! transform module: affine layers, row normalization, and Adam.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// `y = x · w + b`, with `x` holding one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

pub(crate) struct DenseGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn init(rng: &mut impl Rng, inputs: usize, outputs: usize, std: f64) -> Self {
        let w = Array2::from_shape_simple_fn((inputs, outputs), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            w,
            b: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        matmul(x, &self.w.view()) + &self.b
    }

    /// Parameter gradients and the gradient flowing back into `x`.
    pub fn backward(&self, x: &Array2<f64>, gy: &Array2<f64>) -> (DenseGrad, Array2<f64>) {
        let grad = DenseGrad {
            w: x.t().dot(gy),
            b: gy.sum_axis(Axis(0)),
        };
        (grad, matmul(gy, &self.w.t()))
    }

    pub fn to_record(&self, name: &str) -> [Tensor; 2] {
        [
            Tensor::from_array2(&format!("{name}.w"), &self.w),
            Tensor {
                name: format!("{name}.b"),
                shape: vec![self.b.len()],
                values: self.b.to_vec(),
            },
        ]
    }

    pub fn from_record(name: &str, tensors: &[Tensor]) -> Option<Self> {
        let w = find(tensors, &format!("{name}.w"))?.to_array2()?;
        let b = find(tensors, &format!("{name}.b"))?;
        if b.shape != [w.ncols()] || b.values.len() != w.ncols() {
            return None;
        }
        Some(Self {
            w,
            b: Array1::from(b.values.clone()),
        })
    }
}

/// A named flat parameter array, the checkpoint unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub(crate) fn from_array2(name: &str, a: &Array2<f64>) -> Self {
        Self {
            name: name.to_string(),
            shape: vec![a.nrows(), a.ncols()],
            values: a.iter().copied().collect(),
        }
    }

    pub(crate) fn to_array2(&self) -> Option<Array2<f64>> {
        match self.shape[..] {
            [r, c] => Array2::from_shape_vec((r, c), self.values.clone()).ok(),
            _ => None,
        }
    }
}

pub(crate) fn find<'a>(tensors: &'a [Tensor], name: &str) -> Option<&'a Tensor> {
    tensors.iter().find(|t| t.name == name)
}

/// `a · b`. Single-row products go through the vector path, which skips the
/// panel packing a general product does on every call.
pub(crate) fn matmul(a: &Array2<f64>, b: &ndarray::ArrayView2<f64>) -> Array2<f64> {
    if a.nrows() == 1 {
        let x = a.row(0);
        let out = if b.is_standard_layout() {
            let mut acc = Array1::zeros(b.ncols());
            for (xi, row) in x.iter().zip(b.rows()) {
                acc.scaled_add(*xi, &row);
            }
            acc
        } else {
            b.t().dot(&x)
        };
        out.insert_axis(Axis(0))
    } else {
        a.dot(b)
    }
}

pub(crate) fn tanh(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(f64::tanh)
}

/// Backprop through `h = tanh(a)` given `h`.
pub(crate) fn tanh_backward(h: &Array2<f64>, gh: &Array2<f64>) -> Array2<f64> {
    gh * &h.mapv(|v| 1.0 - v * v)
}

/// Scales every row to unit length; returns the unit rows and the norms.
pub(crate) fn normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = z.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    let u = z / &norms.view().insert_axis(Axis(1));
    (u, norms)
}

/// Backprop through `u = z / ‖z‖` row-wise.
pub(crate) fn normalize_backward(u: &Array2<f64>, norms: &Array1<f64>, gu: &Array2<f64>) -> Array2<f64> {
    let along = (gu * u).sum_axis(Axis(1)).insert_axis(Axis(1));
    (gu - &(u * &along)) / &norms.view().insert_axis(Axis(1))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
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
    fn normalize_backward_matches_finite_differences() {
        let z = Array2::from_shape_vec((2, 3), vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4]).unwrap();
        let w = Array2::from_shape_vec((2, 3), vec![0.7, 0.2, -0.9, -0.3, 1.1, 0.4]).unwrap();
        let f = |z: &Array2<f64>| (&normalize_rows(z).0 * &w).sum();
        let (u, n) = normalize_rows(&z);
        let g = normalize_backward(&u, &n, &w);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut zp = z.clone();
                zp[[i, j]] += h;
                let mut zm = z.clone();
                zm[[i, j]] -= h;
                let fd = (f(&zp) - f(&zm)) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-8, "({i},{j}) {fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Dense::init(&mut rng, 3, 2, 1.0);
        let x = Array2::from_shape_vec((2, 3), vec![0.5, -0.1, 0.3, 0.2, 0.9, -0.7]).unwrap();
        let gy = Array2::from_shape_vec((2, 2), vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        let (grad, gx) = layer.backward(&x, &gy);
        let f = |l: &Dense, x: &Array2<f64>| (&l.forward(x) * &gy).sum();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut lp = layer.clone();
                lp.w[[i, j]] += h;
                let mut lm = layer.clone();
                lm.w[[i, j]] -= h;
                assert!(((f(&lp, &x) - f(&lm, &x)) / (2.0 * h) - grad.w[[i, j]]).abs() < 1e-8);
            }
        }
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                assert!(((f(&layer, &xp) - f(&layer, &xm)) / (2.0 * h) - gx[[i, j]]).abs() < 1e-8);
            }
        }
        assert_eq!(grad.b.to_vec(), vec![1.5, -1.75]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(0.1, &[2]);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut [&mut p[..]], &[&g[..]]);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn tensor_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = Dense::init(&mut rng, 4, 3, 0.5);
        let back = Dense::from_record("l", &layer.to_record("l")).unwrap();
        assert_eq!(layer, back);
        assert!(Dense::from_record("other", &layer.to_record("l")).is_none());
    }
}
