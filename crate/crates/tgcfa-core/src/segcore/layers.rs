//! Minimal CPU layer kernels with hand-rolled backprop.
//!
//! Convolutions run as im2col + GEMM on f32. Each forward takes the
//! parameter store by reference; backward returns gradients aligned with
//! the parameter ids so batch-parallel workers can reduce them
//! deterministically.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index of a tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: ArrayD<f32>,
}

/// Named trainable tensors; ids are stable across the model's life.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> ParamId {
        self.params.push(ParamTensor {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.params[id.0].value
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn zero_grads(&self) -> GradVec {
        GradVec(
            self.params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        )
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradients aligned index-for-index with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradVec(pub Vec<ArrayD<f32>>);

impl GradVec {
    pub fn add_assign(&mut self, other: &GradVec) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.0 {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

/// 2D convolution, stride 1. Kernel size 3 uses padding 1 (same output
/// size); kernel size 1 uses no padding. Weight layout is
/// (out_c, in_c * k * k).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((out_channels, fan_in), |_| {
            rng.random_range(-bound..bound) as f32
        });
        let weight = params.push(format!("{name}.weight"), weight.into_dyn());
        let bias = params.push(format!("{name}.bias"), Array1::zeros(out_channels).into_dyn());
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let w2d = params
            .value(self.weight)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("conv weight is 2d");
        let bias = params
            .value(self.bias)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv bias is 1d");
        let mut y2d = if self.kernel == 1 {
            let x2d = x.view().into_shape_with_order((c, h * w)).expect("contiguous");
            w2d.dot(&x2d)
        } else {
            let col = im2col3(x);
            w2d.dot(&col)
        };
        for (mut row, &b) in y2d.rows_mut().into_iter().zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        y2d.into_shape_with_order((self.out_channels, h, w))
            .expect("contiguous gemm output")
    }

    /// Returns the gradient w.r.t. the input and accumulates weight/bias
    /// gradients into `grads`.
    pub fn backward(
        &self,
        params: &ParamSet,
        x: &Array3<f32>,
        dy: &Array3<f32>,
        grads: &mut GradVec,
    ) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let dy2d = dy
            .view()
            .into_shape_with_order((self.out_channels, h * w))
            .expect("contiguous");
        let w2d = params
            .value(self.weight)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("conv weight is 2d");

        let db = dy2d.sum_axis(Axis(1));
        grads.0[self.bias.0] += &db.into_dyn();

        if self.kernel == 1 {
            let x2d = x.view().into_shape_with_order((c, h * w)).expect("contiguous");
            let dw = dy2d.dot(&x2d.t());
            grads.0[self.weight.0] += &dw.into_dyn();
            let dx2d = w2d.t().dot(&dy2d);
            dx2d.into_shape_with_order((c, h, w)).expect("contiguous")
        } else {
            let col = im2col3(x);
            let dw = dy2d.dot(&col.t());
            grads.0[self.weight.0] += &dw.into_dyn();
            let dcol = w2d.t().dot(&dy2d);
            col2im3(&dcol, c, h, w)
        }
    }
}

/// Unrolls 3x3 patches (padding 1) into a (c*9, h*w) matrix.
fn im2col3(x: &Array3<f32>) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let mut col = Array2::<f32>::zeros((c * 9, h * w));
    let cs = col.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ci * 9 + ky * 3 + kx) * (h * w);
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    // valid output columns: sx = x + kx - 1 in [0, w)
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    let src = ci * h * w + sy * w;
                    let dst = row + y * w;
                    for xi in x0..x1 {
                        cs[dst + xi] = xs[src + xi + kx - 1];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col3`]: scatter-adds patch gradients back to the input.
fn col2im3(dcol: &Array2<f32>, c: usize, h: usize, w: usize) -> Array3<f32> {
    let mut dx = Array3::<f32>::zeros((c, h, w));
    let ds = dcol.as_slice().expect("standard layout");
    let out = dx.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ci * 9 + ky * 3 + kx) * (h * w);
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    let src = row + y * w;
                    let dst = ci * h * w + sy * w;
                    for xi in x0..x1 {
                        out[dst + xi + kx - 1] += ds[src + xi];
                    }
                }
            }
        }
    }
    dx
}

pub fn relu(x: &Array3<f32>) -> Array3<f32> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU using the cached output (y > 0 iff input > 0).
pub fn relu_backward(y: &Array3<f32>, dy: &Array3<f32>) -> Array3<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// 2x2 max pooling with stride 2; also returns the in-window argmax
/// (0..4, row-major) needed for the backward scatter.
pub fn maxpool2(x: &Array3<f32>) -> Result<(Array3<f32>, Array3<u8>)> {
    let (c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Validation(format!(
            "maxpool2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::<f32>::zeros((c, oh, ow));
    let mut arg = Array3::<u8>::zeros((c, oh, ow));
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_ix = 0u8;
                for dy in 0..2usize {
                    for dx in 0..2usize {
                        let v = x[[ci, 2 * oy + dy, 2 * ox + dx]];
                        if v > best {
                            best = v;
                            best_ix = (dy * 2 + dx) as u8;
                        }
                    }
                }
                y[[ci, oy, ox]] = best;
                arg[[ci, oy, ox]] = best_ix;
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2_backward(dy: &Array3<f32>, arg: &Array3<u8>) -> Array3<f32> {
    let (c, oh, ow) = dy.dim();
    let mut dx = Array3::<f32>::zeros((c, oh * 2, ow * 2));
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let a = arg[[ci, oy, ox]] as usize;
                dx[[ci, 2 * oy + a / 2, 2 * ox + a % 2]] = dy[[ci, oy, ox]];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<f32>::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for yy in 0..h * 2 {
            for xx in 0..w * 2 {
                y[[ci, yy, xx]] = x[[ci, yy / 2, xx / 2]];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Array3<f32>) -> Array3<f32> {
    let (c, h2, w2) = dy.dim();
    let mut dx = Array3::<f32>::zeros((c, h2 / 2, w2 / 2));
    for ci in 0..c {
        for yy in 0..h2 {
            for xx in 0..w2 {
                dx[[ci, yy / 2, xx / 2]] += dy[[ci, yy, xx]];
            }
        }
    }
    dx
}

/// Channel concatenation [a; b].
pub fn concat_channels(a: &Array3<f32>, b: &Array3<f32>) -> Array3<f32> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits a concat gradient back into the two channel groups.
pub fn split_channels(d: &Array3<f32>, first: usize) -> (Array3<f32>, Array3<f32>) {
    let da = d.slice(ndarray::s![..first, .., ..]).to_owned();
    let db = d.slice(ndarray::s![first.., .., ..]).to_owned();
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn seeded(x: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(x)
    }

    fn rand3(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0f32..1.0))
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv3_reference(x: &Array3<f32>, w: &Array2<f32>, b: &[f32], out_c: usize) -> Array3<f32> {
        let (c, h, wd) = x.dim();
        let mut y = Array3::<f32>::zeros((out_c, h, wd));
        for oc in 0..out_c {
            for yy in 0..h {
                for xx in 0..wd {
                    let mut acc = b[oc];
                    for ci in 0..c {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w[[oc, ci * 9 + ky * 3 + kx]]
                                    * x[[ci, sy as usize, sx as usize]];
                            }
                        }
                    }
                    y[[oc, yy, xx]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv3_matches_reference() {
        let mut rng = seeded(1);
        let mut params = ParamSet::default();
        let conv = Conv2d::init(&mut params, "c", 3, 4, 3, &mut rng);
        let x = rand3(3, 6, 5, &mut rng);
        let y = conv.forward(&params, &x);
        let w2d = params
            .value(conv.weight)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let b: Vec<f32> = params.value(conv.bias).iter().copied().collect();
        let want = conv3_reference(&x, &w2d, &b, 4);
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = seeded(2);
        for kernel in [1usize, 3] {
            let mut params = ParamSet::default();
            let conv = Conv2d::init(&mut params, "c", 2, 3, kernel, &mut rng);
            let x = rand3(2, 4, 4, &mut rng);
            // Objective: 0.5 * sum(y^2)
            let y = conv.forward(&params, &x);
            let mut grads = params.zero_grads();
            let dx = conv.backward(&params, &x, &y.clone(), &mut grads);

            let objective = |params: &ParamSet, x: &Array3<f32>| -> f64 {
                let y = conv.forward(params, x);
                0.5 * y.iter().map(|v| (*v as f64).powi(2)).sum::<f64>()
            };
            let h = 1e-2f32;
            // weight grads
            let wlen = params.value(conv.weight).len();
            for i in (0..wlen).step_by(3) {
                let mut plus = params.clone();
                plus.value_mut(conv.weight).as_slice_mut().unwrap()[i] += h;
                let mut minus = params.clone();
                minus.value_mut(conv.weight).as_slice_mut().unwrap()[i] -= h;
                let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h as f64);
                let a = grads.0[conv.weight.0].as_slice().unwrap()[i] as f64;
                assert!(
                    (a - fd).abs() <= 1e-2 * a.abs().max(fd.abs()).max(1.0),
                    "kernel {kernel} dW[{i}]: analytic {a}, fd {fd}"
                );
            }
            // input grads
            for i in (0..x.len()).step_by(5) {
                let mut plus = x.clone();
                plus.as_slice_mut().unwrap()[i] += h;
                let mut minus = x.clone();
                minus.as_slice_mut().unwrap()[i] -= h;
                let fd = (objective(&params, &plus) - objective(&params, &minus)) / (2.0 * h as f64);
                let a = dx.as_slice().unwrap()[i] as f64;
                assert!(
                    (a - fd).abs() <= 1e-2 * a.abs().max(fd.abs()).max(1.0),
                    "kernel {kernel} dx[{i}]: analytic {a}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn maxpool_and_backward_route_to_argmax() {
        let mut x = Array3::<f32>::zeros((1, 4, 4));
        x[[0, 0, 1]] = 5.0;
        x[[0, 2, 2]] = 3.0;
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y[[0, 0, 0]], 5.0);
        assert_eq!(y[[0, 1, 1]], 3.0);
        let dy = Array3::from_elem((1, 2, 2), 1.0f32);
        let dx = maxpool2_backward(&dy, &arg);
        assert_eq!(dx[[0, 0, 1]], 1.0);
        assert_eq!(dx[[0, 2, 2]], 1.0);
        assert_eq!(dx.sum(), 4.0);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        assert!(maxpool2(&Array3::<f32>::zeros((1, 3, 4))).is_err());
    }

    #[test]
    fn upsample_round_trip_sums() {
        let mut rng = seeded(3);
        let x = rand3(2, 3, 3, &mut rng);
        let y = upsample2(&x);
        assert_eq!(y.dim(), (2, 6, 6));
        assert_eq!(y[[1, 5, 4]], x[[1, 2, 2]]);
        let dy = Array3::from_elem((2, 6, 6), 1.0f32);
        let dx = upsample2_backward(&dy);
        assert!(dx.iter().all(|&v| (v - 4.0).abs() < 1e-6));
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = seeded(4);
        let a = rand3(2, 3, 3, &mut rng);
        let b = rand3(3, 3, 3, &mut rng);
        let cat = concat_channels(&a, &b);
        assert_eq!(cat.dim(), (5, 3, 3));
        let (da, db) = split_channels(&cat, 2);
        assert_eq!(da, a);
        assert_eq!(db, b);
    }
}
