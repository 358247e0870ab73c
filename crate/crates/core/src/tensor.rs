//! Dense NCHW tensors in `f64` and the few structural ops the network needs.

use crate::error::{Result, TsfError};
use crate::geometry::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], v: f64) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(TsfError::ShapeMismatch(format!(
                "{} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Stack images into a batch, scaling intensities to `[0, 1]`.
    pub fn from_images(images: &[&Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| TsfError::InvalidArgument("empty image batch".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if (img.channels, img.height, img.width) != (c, h, w) {
                return Err(TsfError::ShapeMismatch(
                    "images in a batch must share dimensions".into(),
                ));
            }
            data.extend(img.data.iter().map(|&v| v as f64 / 255.0));
        }
        Ok(Tensor {
            shape: [images.len(), c, h, w],
            data,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    /// Contiguous slice holding sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * per..(n + 1) * per]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * per..(n + 1) * per]
    }

    /// Copy of one sample as a batch of one.
    pub fn select(&self, n: usize) -> Tensor {
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.sample(n).to_vec(),
        }
    }

    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| TsfError::InvalidArgument("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(TsfError::ShapeMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Center crop of the spatial dimensions to `size x size`.
    pub fn center_crop(&self, size: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        if size > h || size > w || (h - size) % 2 != 0 || (w - size) % 2 != 0 {
            return Err(TsfError::ShapeMismatch(format!(
                "cannot center-crop {h}x{w} to {size}x{size}"
            )));
        }
        if size == h && size == w {
            return Ok(self.clone());
        }
        let (oy, ox) = ((h - size) / 2, (w - size) / 2);
        let mut out = Tensor::zeros([n, c, size, size]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..size {
                    let src = self.idx(b, ch, y + oy, ox);
                    let dst = out.idx(b, ch, y, 0);
                    out.data[dst..dst + size].copy_from_slice(&self.data[src..src + size]);
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Tensor::center_crop`]: embed into a zero tensor of the original size.
    pub fn uncrop(&self, h: usize, w: usize) -> Tensor {
        let [n, c, sh, sw] = self.shape;
        if sh == h && sw == w {
            return self.clone();
        }
        let (oy, ox) = ((h - sh) / 2, (w - sw) / 2);
        let mut out = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..sh {
                    let src = self.idx(b, ch, y, 0);
                    let dst = out.idx(b, ch, y + oy, ox);
                    out.data[dst..dst + sw].copy_from_slice(&self.data[src..src + sw]);
                }
            }
        }
        out
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TsfError::InvalidArgument("empty concat".into()))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.shape[0] != n || p.shape[2] != h || p.shape[3] != w {
                return Err(TsfError::ShapeMismatch(format!(
                    "concat of {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(b));
            }
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Split along the channel axis into pieces of the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Vec<Tensor> {
        let [n, c, h, w] = self.shape;
        debug_assert_eq!(counts.iter().sum::<usize>(), c);
        let hw = h * w;
        let mut out: Vec<Tensor> = counts
            .iter()
            .map(|&k| Tensor::zeros([n, k, h, w]))
            .collect();
        for b in 0..n {
            let src = self.sample(b);
            let mut off = 0;
            for (piece, &k) in out.iter_mut().zip(counts) {
                piece
                    .sample_mut(b)
                    .copy_from_slice(&src[off * hw..(off + k) * hw]);
                off += k;
            }
        }
        out
    }
}

/// Row-major GEMM: `c = a' * b' + beta * c` where `a'` is `m x k` and `b'` is `k x n`.
/// With `trans_a`, `a` is stored `k x m`; with `trans_b`, `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
