//! Fully connected LeakyReLU network with a scalar output, trained by
//! Adam on per-origin softmax cross-entropy.

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub trait Real:
    Float + FromPrimitive + ScalarOperand + ndarray::LinalgScalar + Debug + Send + Sync + Serialize + DeserializeOwned
{
}
impl Real for f32 {}
impl Real for f64 {}

pub const LEAKY_SLOPE: f64 = 0.02;

/// `[input, 6×256, 9×128, 1]`.
pub fn deep_gravity_sizes(input: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(std::iter::repeat_n(256, 6));
    s.extend(std::iter::repeat_n(128, 9));
    s.push(1);
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Dense<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Dense<T> {
    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub slope: T,
}

pub struct Cache<T> {
    // inputs to each layer, then pre-activations of each layer
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

impl<T: Real> Mlp<T> {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng>(sizes: &[usize], slope: f64, rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|io| {
                let std = (2.0 / io[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let w = Array2::from_shape_simple_fn((io[0], io[1]), || {
                    T::from_f64(normal.sample(rng)).unwrap()
                });
                Dense { w, b: Array1::zeros(io[1]) }
            })
            .collect();
        Self {
            layers,
            slope: T::from_f64(slope).unwrap(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_len()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn activate(&self, z: &mut Array2<T>) {
        let s = self.slope;
        z.mapv_inplace(|v| if v > T::zero() { v } else { v * s });
    }

    /// Scores for each row of `x`.
    pub fn forward(&self, x: ArrayView2<T>) -> Array1<T> {
        let mut a = affine(x, &self.layers[0]);
        for layer in &self.layers[1..] {
            self.activate(&mut a);
            a = affine(a.view(), layer);
        }
        a.index_axis_move(Axis(1), 0)
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> (Array1<T>, Cache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.as_standard_layout().into_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = affine(a.view(), layer);
            inputs.push(a);
            a = z.clone();
            if l + 1 < self.layers.len() {
                self.activate(&mut a);
            }
            pre.push(z);
        }
        (a.index_axis_move(Axis(1), 0), Cache { inputs, pre })
    }

    pub fn zero_grads(&self) -> Vec<Dense<T>> {
        self.layers.iter().map(Dense::zeros_like).collect()
    }

    /// Parameter gradients given d(loss)/d(score) per row, written into
    /// `grads` (shaped like the layers).
    pub fn backward_into(&self, cache: &Cache<T>, dscore: ArrayView1<T>, grads: &mut [Dense<T>]) {
        let mut dz = dscore.to_owned().insert_axis(Axis(1));
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            matmul(cache.inputs[l].t(), dz.view(), &mut grads[l].w, false);
            grads[l].b.assign(&dz.sum_axis(Axis(0)));
            if l > 0 {
                let mut da = Array2::zeros((dz.nrows(), layer.w.nrows()));
                matmul(dz.view(), layer.w.t(), &mut da, false);
                let s = self.slope;
                Zip::from(&mut da).and(&cache.pre[l - 1]).for_each(|d, &z| {
                    if z <= T::zero() {
                        *d = *d * s
                    }
                });
                dz = da;
            }
        }
    }

    pub fn backward(&self, cache: &Cache<T>, dscore: ArrayView1<T>) -> Vec<Dense<T>> {
        let mut grads = self.zero_grads();
        self.backward_into(cache, dscore, &mut grads);
        grads
    }

    /// Weighted cross-entropy between observed fractions `target` and the
    /// softmax of the scores over the rows of `x`; gradients go to `grads`.
    pub fn origin_loss_grad_into(
        &self,
        x: ArrayView2<T>,
        target: &[f64],
        weight: f64,
        grads: &mut [Dense<T>],
    ) -> f64 {
        let (scores, cache) = self.forward_cached(x);
        let s: Vec<f64> = scores.iter().map(|v| v.to_f64().unwrap()).collect();
        let (loss, ds) = softmax_cross_entropy(&s, target, weight);
        let ds = Array1::from_iter(ds.into_iter().map(|v| T::from_f64(v).unwrap()));
        self.backward_into(&cache, ds.view(), grads);
        loss
    }

    pub fn origin_loss_grad(&self, x: ArrayView2<T>, target: &[f64], weight: f64) -> (f64, Vec<Dense<T>>) {
        let mut grads = self.zero_grads();
        let loss = self.origin_loss_grad_into(x, target, weight, &mut grads);
        (loss, grads)
    }

    pub fn origin_loss(&self, x: ArrayView2<T>, target: &[f64], weight: f64) -> f64 {
        let s: Vec<f64> = self.forward(x).iter().map(|v| v.to_f64().unwrap()).collect();
        softmax_cross_entropy(&s, target, weight).0
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `−weight · Σ y log softmax(s)` and its gradient `weight · (p − y)`.
pub fn softmax_cross_entropy(scores: &[f64], target: &[f64], weight: f64) -> (f64, Vec<f64>) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (s, y) in scores.iter().zip(target) {
        if *y > 0.0 {
            loss -= y * (s - lse);
        }
        grad.push(weight * ((s - lse).exp() - y));
    }
    (weight * loss, grad)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients with a larger global L2 norm are rescaled to it.
    pub clip_norm: Option<f64>,
    t: i32,
    m: Vec<Dense<T>>,
    v: Vec<Dense<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(net: &Mlp<T>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            t: 0,
            m: net.layers.iter().map(Dense::zeros_like).collect(),
            v: net.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    fn coefficients(&mut self) -> [T; 6] {
        self.t += 1;
        let c = |x: f64| T::from_f64(x).unwrap();
        [
            c(self.beta1),
            c(self.beta2),
            c(1.0 - self.beta1),
            c(1.0 - self.beta2),
            c(self.lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t))),
            c(self.eps),
        ]
    }

    fn update_layer(&mut self, k: &[T; 6], scale: T, l: usize, layer: &mut Dense<T>, g: &Dense<T>) {
        let [b1, b2, one_b1, one_b2, step, eps] = *k;
        let update = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = &(*g * scale);
                *m = b1 * *m + one_b1 * *g;
                *v = b2 * *v + one_b2 * *g * *g;
                *p = *p - step * *m / (v.sqrt() + eps);
            }
        };
        let (m, v) = (&mut self.m[l], &mut self.v[l]);
        update(
            contiguous(&mut layer.w),
            g.w.as_slice().expect("standard layout"),
            contiguous(&mut m.w),
            contiguous(&mut v.w),
        );
        update(
            contiguous(&mut layer.b),
            g.b.as_slice().expect("standard layout"),
            contiguous(&mut m.b),
            contiguous(&mut v.b),
        );
    }

    pub fn step(&mut self, net: &mut Mlp<T>, grads: &[Dense<T>]) {
        let k = self.coefficients();
        let scale = match self.clip_norm {
            Some(c) => {
                let sq: f64 = grads
                    .iter()
                    .flat_map(|g| g.w.iter().chain(g.b.iter()))
                    .map(|v| v.to_f64().unwrap().powi(2))
                    .sum();
                let norm = sq.sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let scale = T::from_f64(scale).unwrap();
        for (l, (layer, g)) in net.layers.iter_mut().zip(grads).enumerate() {
            self.update_layer(&k, scale, l, layer, g);
        }
    }
}

impl<T: Real> Mlp<T> {
    /// One optimiser step on a single origin's candidate set; returns the
    /// weighted loss before the update.
    pub fn train_step(
        &mut self,
        x: ArrayView2<T>,
        target: &[f64],
        weight: f64,
        opt: &mut Adam<T>,
        grads: &mut [Dense<T>],
    ) -> f64 {
        let loss = self.origin_loss_grad_into(x, target, weight, grads);
        opt.step(self, grads);
        loss
    }
}

/// Row-major `x · W + b`.
fn affine<T: Real>(x: ArrayView2<T>, layer: &Dense<T>) -> Array2<T> {
    let mut z = Array2::from_shape_fn((x.nrows(), layer.w.ncols()), |(_, j)| layer.b[j]);
    matmul(x, layer.w.view(), &mut z, true);
    z
}

/// `c = a·b`, or `c += a·b` when `accumulate`.
fn matmul<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>, c: &mut Array2<T>, accumulate: bool) {
    let (m, k) = a.dim();
    let n = b.ncols();
    assert_eq!(b.nrows(), k);
    assert_eq!(c.dim(), (m, n));
    let (ars, acs) = (a.strides()[0], a.strides()[1]);
    let (brs, bcs) = (b.strides()[0], b.strides()[1]);
    let (crs, ccs) = (c.strides()[0], c.strides()[1]);
    // SAFETY: shapes are checked above and the strides come from live views
    // of the same arrays, so every index gemm forms stays in bounds.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            ccs,
            crs,
            accumulate,
            a.as_ptr(),
            acs,
            ars,
            b.as_ptr(),
            bcs,
            brs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn contiguous<T, D: ndarray::Dimension>(a: &mut ndarray::Array<T, D>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mini(seed: u64) -> (Mlp<f64>, Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::<f64>::new(&[5, 7, 6, 1], LEAKY_SLOPE, &mut rng);
        let x = Array2::from_shape_fn((6, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
        let y = vec![0.1, 0.0, 0.4, 0.2, 0.3, 0.0];
        (net, x, y)
    }

    #[test]
    fn gradients_match_central_differences() {
        let (mut net, x, y) = mini(11);
        let (_, grads) = net.origin_loss_grad(x.view(), &y, 1.7);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for l in 0..net.layers.len() {
            for idx in 0..net.layers[l].w.len() {
                let (r, c) = (idx / net.layers[l].w.ncols(), idx % net.layers[l].w.ncols());
                let orig = net.layers[l].w[[r, c]];
                net.layers[l].w[[r, c]] = orig + h;
                let up = net.origin_loss(x.view(), &y, 1.7);
                net.layers[l].w[[r, c]] = orig - h;
                let down = net.origin_loss(x.view(), &y, 1.7);
                net.layers[l].w[[r, c]] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[l].w[[r, c]];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
            for j in 0..net.layers[l].b.len() {
                let orig = net.layers[l].b[j];
                net.layers[l].b[j] = orig + h;
                let up = net.origin_loss(x.view(), &y, 1.7);
                net.layers[l].b[j] = orig - h;
                let down = net.origin_loss(x.view(), &y, 1.7);
                net.layers[l].b[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[l].b[j];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn forward_paths_agree() {
        let (net, x, _) = mini(3);
        let a = net.forward(x.view());
        let (b, _) = net.forward_cached(x.view());
        assert_eq!(a, b);
    }

    #[test]
    fn architecture_shape() {
        let s = deep_gravity_sizes(35);
        assert_eq!(s.len(), 17);
        assert_eq!(s.iter().filter(|&&w| w == 256).count(), 6);
        assert_eq!(s.iter().filter(|&&w| w == 128).count(), 9);
    }

    #[test]
    fn adam_reduces_loss() {
        let (mut net, x, y) = mini(5);
        let before = net.origin_loss(x.view(), &y, 1.0);
        let mut opt = Adam::new(&net, 1e-2);
        for _ in 0..200 {
            let (_, g) = net.origin_loss_grad(x.view(), &y, 1.0);
            opt.step(&mut net, &g);
        }
        assert!(net.origin_loss(x.view(), &y, 1.0) < 0.9 * before);
    }

    #[test]
    fn clipping_rescales_to_the_threshold() {
        let (net, x, y) = mini(8);
        let (_, g) = net.origin_loss_grad(x.view(), &y, 1.0);
        let norm: f64 = g.iter().flat_map(|d| d.w.iter().chain(d.b.iter())).map(|v| v * v).sum::<f64>().sqrt();
        let big: Vec<Dense<f64>> = g
            .iter()
            .map(|d| Dense { w: &d.w * 1000.0, b: &d.b * 1000.0 })
            .collect();
        let unit: Vec<Dense<f64>> = g
            .iter()
            .map(|d| Dense { w: &d.w / norm, b: &d.b / norm })
            .collect();
        let (mut a, mut b) = (net.clone(), net.clone());
        let mut oa = Adam::new(&a, 1e-2);
        oa.clip_norm = Some(1.0);
        let mut ob = Adam::new(&b, 1e-2);
        oa.step(&mut a, &big);
        ob.step(&mut b, &unit);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert!(la.w.iter().zip(lb.w.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn stable_softmax_extremes() {
        let p = softmax(&[1e6, -1e6, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-15 && p.iter().all(|v| v.is_finite()));
    }
}
