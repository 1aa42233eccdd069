//! Matrix multiplication, layout ops, im2col convolution, and pooling.

use super::{Error, Gradients, Result, Tensor};
use crate::num::Element;
use rayon::prelude::*;

// Below this many scalar multiplies the rayon dispatch overhead dominates.
const PAR_FLOP_THRESHOLD: usize = 1 << 15;

fn matmul_raw<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |out_row: &mut [T], i: usize| {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(r, i));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(r, i);
        }
    }
    out
}

impl<T: Element> Tensor<T> {
    /// `[M,K] x [K,N] -> [M,N]`, differentiable in both operands.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let out = matmul_raw(&self.data, &other.data, m, k, n);
        let tape = super::merged_tape(self, other)?;
        let (na, nb) = (self.node, other.node);
        let (adata, bdata) = (self.data.clone(), other.data.clone());
        Ok(Tensor::result(tape, out, vec![m, n], move || {
            Box::new(move |gout: &[T], grads: &mut Gradients<T>| {
                if let Some(na) = na {
                    let slot = grads.slot_mut(na, m * k);
                    // dA[i,k] += sum_j G[i,j] * B[k,j]
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc += gout[i * n + j] * bdata[kk * n + j];
                            }
                            slot[i * k + kk] += acc;
                        }
                    }
                }
                if let Some(nb) = nb {
                    let slot = grads.slot_mut(nb, k * n);
                    // dB[k,j] += sum_i A[i,k] * G[i,j]
                    for i in 0..m {
                        for kk in 0..k {
                            let av = adata[i * k + kk];
                            if av == T::zero() {
                                continue;
                            }
                            for j in 0..n {
                                slot[kk * n + j] += av * gout[i * n + j];
                            }
                        }
                    }
                }
            })
        }))
    }

    /// Reorders axes; `perm` must be a permutation of `0..ndim`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract(format!(
                "permute: {:?} is not a permutation for shape {:?}",
                perm, self.shape
            )));
        }
        let in_strides = row_major_strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let map_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        let mut mapping = vec![0usize; n];
        odometer(&out_shape, &map_strides, |o, src| mapping[o] = src);
        let out: Vec<T> = mapping.iter().map(|&s| self.data[s]).collect();
        let tape = self.tape.clone();
        let node = self.node;
        Ok(Tensor::result(tape, out, out_shape, move || {
            Box::new(move |gout: &[T], grads: &mut Gradients<T>| {
                if let Some(node) = node {
                    let slot = grads.slot_mut(node, n);
                    for (o, &src) in mapping.iter().enumerate() {
                        slot[src] += gout[o];
                    }
                }
            })
        }))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        self.permute(&[1, 0])
    }

    /// Non-overlapping max pooling over the two trailing axes of `[B,C,H,W]`.
    pub fn max_pool2d(&self, k: usize) -> Result<Tensor<T>> {
        self.pool2d(k, true)
    }

    /// Non-overlapping average pooling over the two trailing axes of `[B,C,H,W]`.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor<T>> {
        self.pool2d(k, false)
    }

    fn pool2d(&self, k: usize, max: bool) -> Result<Tensor<T>> {
        if self.shape.len() != 4 || k == 0 {
            return Err(Error::contract(format!(
                "pool2d expects [B,C,H,W] and window > 0, got {:?} window {}",
                self.shape, k
            )));
        }
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (oh, ow) = (h / k, w / k);
        if oh == 0 || ow == 0 {
            return Err(Error::contract(format!(
                "pool2d window {} larger than input {}x{}",
                k, h, w
            )));
        }
        let n_out = b * c * oh * ow;
        let mut out = vec![T::zero(); n_out];
        let mut arg = vec![0usize; if max { n_out } else { 0 }];
        let inv = T::one() / T::from_usize_(k * k);
        for bi in 0..b {
            for ci in 0..c {
                let plane = (bi * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let oidx = ((bi * c + ci) * oh + oy) * ow + ox;
                        if max {
                            let mut best = T::neg_infinity();
                            let mut best_at = 0usize;
                            for dy in 0..k {
                                for dx in 0..k {
                                    let src = plane + (oy * k + dy) * w + ox * k + dx;
                                    if self.data[src] > best {
                                        best = self.data[src];
                                        best_at = src;
                                    }
                                }
                            }
                            out[oidx] = best;
                            arg[oidx] = best_at;
                        } else {
                            let mut acc = T::zero();
                            for dy in 0..k {
                                for dx in 0..k {
                                    acc += self.data[plane + (oy * k + dy) * w + ox * k + dx];
                                }
                            }
                            out[oidx] = acc * inv;
                        }
                    }
                }
            }
        }
        let tape = self.tape.clone();
        let node = self.node;
        let len = self.numel();
        let oshape = vec![b, c, oh, ow];
        Ok(Tensor::result(tape, out, oshape, move || {
            Box::new(move |gout: &[T], grads: &mut Gradients<T>| {
                let Some(node) = node else { return };
                let slot = grads.slot_mut(node, len);
                if max {
                    for (oidx, &src) in arg.iter().enumerate() {
                        slot[src] += gout[oidx];
                    }
                } else {
                    for bi in 0..b {
                        for ci in 0..c {
                            let plane = (bi * c + ci) * h * w;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g =
                                        gout[((bi * c + ci) * oh + oy) * ow + ox] * inv;
                                    for dy in 0..k {
                                        for dx in 0..k {
                                            slot[plane + (oy * k + dy) * w + ox * k + dx] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            })
        }))
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn odometer(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    let nd = shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for o in 0..n {
        f(o, src);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            src -= strides[d] * shape[d];
        }
    }
}

/// Output spatial size of a convolution, or an error if the kernel does not
/// fit into the padded input.
pub fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::contract("conv2d: stride must be positive"));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: vec![h + 2 * pad, w + 2 * pad],
            rhs: vec![kh, kw],
        });
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

/// Unrolls `[B,C,H,W]` into patch rows `[B*OH*OW, C*kh*kw]` so a convolution
/// becomes one dot product per output element. Differentiable (backward is
/// the col2im scatter).
pub fn im2col<T: Element>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.shape.len() != 4 {
        return Err(Error::contract(format!(
            "im2col expects [B,C,H,W], got {:?}",
            x.shape
        )));
    }
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad)?;
    let patch = c * kh * kw;
    let rows = b * oh * ow;
    let mut out = vec![T::zero(); rows * patch];
    // mapping[row*patch + col] = source index + 1, 0 for padding
    let mut mapping = vec![0usize; rows * patch];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for ci in 0..c {
                    for dy in 0..kh {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        for dx in 0..kw {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            let col = (ci * kh + dy) * kw + dx;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                let src =
                                    ((bi * c + ci) * h + iy as usize) * w + ix as usize;
                                out[row * patch + col] = x.data[src];
                                mapping[row * patch + col] = src + 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let tape = x.tape.clone();
    let node = x.node;
    let len = x.numel();
    Ok(Tensor::result(tape, out, vec![rows, patch], move || {
        Box::new(move |gout: &[T], grads: &mut Gradients<T>| {
            if let Some(node) = node {
                let slot = grads.slot_mut(node, len);
                for (o, &m) in mapping.iter().enumerate() {
                    if m > 0 {
                        slot[m - 1] += gout[o];
                    }
                }
            }
        })
    }))
}

/// 2-D convolution of `[B,C,H,W]` with kernels `[O,C,kh,kw]`, realized as
/// im2col followed by matmul so every dot product shares one code path.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.shape.len() != 4 || w.shape.len() != 4 || x.shape[1] != w.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let (b, _c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let (oh, ow) = conv_out_dims(h, wd, kh, kw, stride, pad)?;
    let patches = im2col(x, kh, kw, stride, pad)?;
    let wmat = w.reshape(vec![o, w.numel() / o])?;
    let y = patches.matmul(&wmat.transpose()?)?; // [B*OH*OW, O]
    y.reshape(vec![b, oh, ow, o])?.permute(&[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(a.matmul(&eye).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_hand_example() {
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[3.0, 4.0], &[2, 1]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[0.0; 6], &[2, 3]);
        let b = t(&[0.0; 8], &[4, 2]);
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::randn(&mut rng, vec![5, 7]);
        let b = Tensor::<f64>::randn(&mut rng, vec![7, 3]);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                assert_abs_diff_eq!(c.data()[i * 3 + j], acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matmul_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let b = tape.leaf(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]).unwrap();
        let loss = a.matmul(&b).unwrap().sum_all();
        let grads = loss.backward().unwrap();
        // dL/dA[i,k] = sum_j B[k,j]
        assert_eq!(grads.wrt(&a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        // dL/dB[k,j] = sum_i A[i,k]
        assert_eq!(grads.wrt(&b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[1, 1, 3, 3]);
        let w = t(&[1.0], &[1, 1, 1, 1]);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_ones_sum() {
        let x = t(&[1.0; 9], &[1, 1, 3, 3]);
        let w = t(&[1.0; 9], &[1, 1, 3, 3]);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let x = t(&[1.0; 9], &[1, 1, 3, 3]);
        let w = t(&[1.0; 25], &[1, 1, 5, 5]);
        assert!(matches!(
            conv2d(&x, &w, 1, 0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    /// Direct 6-loop convolution oracle, independent of the im2col path.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (oh, ow) = conv_out_dims(h, wd, kh, kw, stride, pad).unwrap();
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (oy * stride + dy) as isize - pad as isize;
                                    let ix = (ox * stride + dx) as isize - pad as isize;
                                    if iy >= 0
                                        && (iy as usize) < h
                                        && ix >= 0
                                        && (ix as usize) < wd
                                    {
                                        acc += x.data()
                                            [((bi * c + ci) * h + iy as usize) * wd
                                                + ix as usize]
                                            * w.data()[((oi * c + ci) * kh + dy) * kw + dx];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::randn(&mut rng, vec![2, 3, 8, 8]);
        let w = Tensor::<f64>::randn(&mut rng, vec![4, 3, 3, 3]);
        let y = conv2d(&x, &w, 2, 1).unwrap();
        let oracle = conv_oracle(&x, &w, 2, 1);
        assert_eq!(y.numel(), oracle.len());
        for (a, b) in y.data().iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn pooling_values_and_grads() {
        let tape = Tape::new();
        let x = tape
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], vec![1, 2, 2, 2])
            .unwrap();
        let mx = x.max_pool2d(2).unwrap();
        assert_eq!(mx.data(), &[4.0, 8.0]);
        let grads = mx.sum_all().backward().unwrap();
        assert_eq!(
            grads.wrt(&x).unwrap(),
            &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );

        let av = x.avg_pool2d(2).unwrap();
        assert_eq!(av.data(), &[2.5, 6.5]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&mut rng, vec![2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        assert_eq!(x.data(), y.data());
    }
}
