//! Dense f32 tensors and the handful of kernels the detector is built from.
//!
//! Layout is row-major, channels-first (`[C, H, W]` for feature maps). All
//! kernels are single-threaded and evaluate in a fixed order, so identical
//! inputs give bitwise-identical outputs.

use rand::Rng;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {:?} needs {} values, got {}", shape, n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => shape_err(format!("expected rank-3 tensor, got shape {:?}", self.shape)),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(format!("expected rank-2 tensor, got shape {:?}", self.shape)),
        }
    }

    /// One channel plane of a `[C, H, W]` tensor.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane: usize = self.shape[1..].iter().product();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane: usize = self.shape[1..].iter().product();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Output side length of a convolution or pooling window.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

const CONV_TILE: usize = 512;

/// 2-D cross-correlation of `input [C_in, H, W]` with `weights [C_out, C_in, k, k]`.
pub fn conv2d(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3()?;
    let (c_out, wc_in, k) = match weights.shape()[..] {
        [o, i, kh, kw] if kh == kw => (o, i, kh),
        _ => {
            return shape_err(format!(
                "conv2d weights must be [C_out, C_in, k, k], got {:?}",
                weights.shape()
            ))
        }
    };
    if wc_in != c_in {
        return shape_err(format!(
            "conv2d channel mismatch: input has {c_in}, weights expect {wc_in}"
        ));
    }
    if k % 2 == 0 {
        return shape_err(format!("conv2d kernel size must be odd, got {k}"));
    }
    if stride == 0 {
        return shape_err("conv2d stride must be positive");
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return shape_err(format!(
            "conv2d input {h}x{w} with padding {padding} is smaller than kernel {k}"
        ));
    }
    let ho = conv_out_dim(h, k, stride, padding);
    let wo = conv_out_dim(w, k, stride, padding);
    let plane = ho * wo;
    let mut out = vec![0.0f32; c_out * plane];
    let wdata = weights.data();
    let idata = input.data();

    if k == 1 && stride == 1 && padding == 0 {
        for o in 0..c_out {
            let dst = &mut out[o * plane..(o + 1) * plane];
            for ci in 0..c_in {
                let a = wdata[o * c_in + ci];
                let src = &idata[ci * plane..(ci + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        return Tensor::new(vec![c_out, ho, wo], out);
    }

    // im2col over tiles of whole output rows
    let taps = c_in * k * k;
    let rows_per_tile = (CONV_TILE / wo).max(1);
    let cap = rows_per_tile * wo;
    let mut cols = vec![0.0f32; taps * cap];
    let mut y0 = 0;
    while y0 < ho {
        let y1 = (y0 + rows_per_tile).min(ho);
        let len = (y1 - y0) * wo;
        for ci in 0..c_in {
            let src = &idata[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let tap = (ci * k + ky) * k + kx;
                    // output columns whose input column lies inside the image
                    let xa = padding.saturating_sub(kx).div_ceil(stride).min(wo);
                    let xb = if w + padding > kx {
                        ((w + padding - kx - 1) / stride + 1).min(wo)
                    } else {
                        0
                    }
                    .max(xa);
                    for y in y0..y1 {
                        let row = &mut cols[tap * cap + (y - y0) * wo..tap * cap + (y - y0 + 1) * wo];
                        let iy = (y * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            row.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        row[..xa].fill(0.0);
                        row[xb..].fill(0.0);
                        let first = xa * stride + kx - padding;
                        if stride == 1 {
                            row[xa..xb].copy_from_slice(&srow[first..first + (xb - xa)]);
                        } else {
                            for (i, slot) in row[xa..xb].iter_mut().enumerate() {
                                *slot = srow[first + i * stride];
                            }
                        }
                    }
                }
            }
        }
        let p0 = y0 * wo;
        for o in 0..c_out {
            let dst = &mut out[o * plane + p0..o * plane + p0 + len];
            let wrow = &wdata[o * taps..(o + 1) * taps];
            for (tap, &a) in wrow.iter().enumerate() {
                let src = &cols[tap * cap..tap * cap + len];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        y0 = y1;
    }
    Tensor::new(vec![c_out, ho, wo], out)
}

/// `a [M, K] × b [K, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return shape_err(format!("matmul inner dimensions differ: [{m}, {k}] x [{kb}, {n}]"));
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (d, bv) in dst.iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let src = a.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = a.data().to_vec();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn add_channel_bias(x: &mut Tensor, bias: &[f32]) -> Result<()> {
    let (c, _, _) = x.dims3()?;
    if bias.len() != c {
        return shape_err(format!("bias has {} entries for {c} channels", bias.len()));
    }
    for (ch, &b) in bias.iter().enumerate() {
        if b != 0.0 {
            x.channel_mut(ch).iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(())
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

pub fn clamp01_inplace(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

pub fn add_inplace(x: &mut Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return shape_err(format!("elementwise add of {:?} and {:?}", x.shape(), y.shape()));
    }
    x.data_mut().iter_mut().zip(y.data()).for_each(|(a, b)| *a += b);
    Ok(())
}

/// 2×2 average pooling with stride 2 in ceil mode. Out-of-range taps count
/// as zero, so each output is the mean over a full 2×2 window.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for y in 0..h {
            let drow = &mut dst[(y / 2) * wo..(y / 2 + 1) * wo];
            for (xi, v) in src[y * w..(y + 1) * w].iter().enumerate() {
                drow[xi / 2] += v;
            }
        }
        dst.iter_mut().for_each(|v| *v *= 0.25);
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Nearest-neighbour upsampling by an integer factor, cropped to `h × w`.
pub fn upsample_nearest(x: &Tensor, factor: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, hi, wi) = x.dims3()?;
    if factor == 0 || hi * factor < h || wi * factor < w {
        return shape_err(format!("cannot upsample {hi}x{wi} by {factor} to cover {h}x{w}"));
    }
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let src = x.channel(ch);
        for y in 0..h {
            let srow = &src[(y / factor) * wi..(y / factor + 1) * wi];
            let drow = &mut out[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d = srow[xo / factor];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Stacks rows into a `[rows, cols]` tensor.
pub fn stack_rows(rows: &[&[f32]], cols: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::Shape(format!(
                "row of length {} in a {cols}-column stack",
                r.len()
            )));
        }
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(input: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (ci, h, w) = input.dims3().unwrap();
        let (co, k) = (weights.shape()[0], weights.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[co, ho, wo]);
        for o in 0..co {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = 0.0f64;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let iv = input.data()[(c * h + iy as usize) * w + ix as usize];
                                let wv = weights.data()[((o * ci + c) * k + ky) * k + kx];
                                acc += iv as f64 * wv as f64;
                            }
                        }
                    }
                    out.data_mut()[(o * ho + y) * wo + x] = acc as f32;
                }
            }
        }
        out
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let n = b.shape()[1];
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k)
                .map(|p| a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64)
                .sum::<f64>() as f32
        })
    }

    #[test]
    fn conv_one_by_one_scales() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_output_shape_formula() {
        let x = Tensor::full(&[1, 4, 4], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
    }

    #[test]
    fn conv_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::random_uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);
        let w = Tensor::random_uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 0)] {
            let fast = conv2d(&x, &w, stride, pad).unwrap();
            let slow = naive_conv(&x, &w, stride, pad);
            assert!(fast.max_abs_diff(&slow) <= 1e-5, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_large_plane_crosses_tiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::random_uniform(&[3, 40, 37], -1.0, 1.0, &mut rng);
        let w = Tensor::random_uniform(&[5, 3, 3, 3], -1.0, 1.0, &mut rng);
        let fast = conv2d(&x, &w, 1, 1).unwrap();
        assert!(fast.max_abs_diff(&naive_conv(&x, &w, 1, 1)) <= 1e-5);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[2, 5, 5]);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), 1, 0),
            Err(Error::Shape(_))
        ));
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), 1, 0).is_err());
        assert!(conv2d(&Tensor::zeros(&[2, 1, 1]), &Tensor::zeros(&[1, 2, 3, 3]), 1, 0).is_err());
    }

    #[test]
    fn matmul_hand_cases() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);

        let m = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn matmul_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::random_uniform(&[5, 7], -1.0, 1.0, &mut rng);
        let b = Tensor::random_uniform(&[7, 3], -1.0, 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-5);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]).unwrap();
        let s = softmax_rows(&t).unwrap();
        for v in &s.data()[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!((s.data()[3] - 1.0).abs() < 1e-7);
        assert!(s.data()[4] < 1e-30);
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::random_uniform(&[4, 6], -5.0, 5.0, &mut rng);
        let s = softmax_rows(&t).unwrap();
        for i in 0..4 {
            let sum: f64 = s.row(i).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() <= 1e-6);
            assert!(s.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn avg_pool_ceil_mode_zero_pads() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn upsample_crops() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest(&x, 2, 3, 4).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(seed in 0u64..1000, shift in -50.0f32..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::random_uniform(&[3, 5], -4.0, 4.0, &mut rng);
            let shifted = Tensor::from_fn(&[3, 5], |i| t.data()[i] + shift);
            let a = softmax_rows(&t).unwrap();
            let b = softmax_rows(&shifted).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-6);
        }

        #[test]
        fn conv_deterministic(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::random_uniform(&[2, 9, 7], -1.0, 1.0, &mut rng);
            let w = Tensor::random_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let a = conv2d(&x, &w, 2, 1).unwrap();
            let b = conv2d(&x, &w, 2, 1).unwrap();
            prop_assert!(a.bitwise_eq(&b));
            prop_assert!(a.all_finite());
        }
    }
}
