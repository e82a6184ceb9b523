//! Dense matrix kernels shared by the convolution and linear ops.

/// Row-major matrix view with explicit strides, so transposes are free.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `out = beta * out + a * b`, with `out` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output extent");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `out` is an exclusive borrow of exactly rows * cols elements.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input column range valid for kernel column `kx` (as output indices).
    fn valid_out(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        // out index o is valid when 0 <= o*stride + k - pad < extent
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        let limit = extent + self.pad;
        let hi = if limit > k {
            ((limit - k - 1) / self.stride + 1).min(out_extent)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one sample (`c_in x h x w`) into a `patch_len x out_len` matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    cols.iter_mut().for_each(|v| *v = 0.0);
    let out_len = g.out_len();
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_out(ky, g.h, g.out_h);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_out(kx, g.w, g.out_w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox0..ox1 {
                        drow[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into one sample.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, input_grad: &mut [f64]) {
    let out_len = g.out_len();
    for c in 0..g.c_in {
        let plane = &mut input_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_out(ky, g.h, g.out_h);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_out(kx, g.w, g.out_w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        drow[ox * g.stride + kx - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}
