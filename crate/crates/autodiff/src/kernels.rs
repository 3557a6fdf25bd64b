//! Dense kernels shared by forward and backward rules.

/// Row/column strides of a row-major matrix, optionally read transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl Layout {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, transposed: false }
    }

    /// Logical shape and (row stride, col stride) after the optional transpose.
    fn view(self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }
}

/// `c = beta * c + a · b` for row-major buffers.
pub(crate) fn gemm(a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64], beta: f64) {
    let (m, k, rsa, csa) = la.view();
    let (k2, n, rsb, csb) = lb.view();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(a.len(), la.rows * la.cols);
    assert_eq!(b.len(), lb.rows * lb.cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside the
    // three slices, and `c` does not alias `a` or `b` (distinct borrows).
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

/// Geometry of a 2-D convolution over NCHW input with OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_plane()
    }

    /// Unfolds one image into `[C*kh*kw, Ho*Wo]` columns.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let plane = ho * wo;
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * wo + ox] = if iy >= 0
                                && (iy as usize) < self.height
                                && ix >= 0
                                && (ix as usize) < self.width
                            {
                                image[(c * self.height + iy as usize) * self.width + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back into an image (accumulating).
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let plane = ho * wo;
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            image[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (patch, plane) = (g.patch_len(), g.out_plane());
    let image_len = g.in_channels * g.height * g.width;
    let mut out = vec![0.0; g.output_len()];
    let mut cols = vec![0.0; patch * plane];
    for b in 0..g.batch {
        g.im2col(&input[b * image_len..(b + 1) * image_len], &mut cols);
        gemm(
            weight,
            Layout::new(g.out_channels, patch),
            &cols,
            Layout::new(patch, plane),
            &mut out[b * g.out_channels * plane..(b + 1) * g.out_channels * plane],
            0.0,
        );
    }
    out
}

/// Gradient of a convolution with respect to its input (a transposed convolution).
pub(crate) fn conv2d_input_grad(g: &ConvGeometry, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let (patch, plane) = (g.patch_len(), g.out_plane());
    let image_len = g.in_channels * g.height * g.width;
    let mut dx = vec![0.0; g.input_len()];
    let mut cols = vec![0.0; patch * plane];
    for b in 0..g.batch {
        gemm(
            weight,
            Layout::new(g.out_channels, patch).t(),
            &grad_out[b * g.out_channels * plane..(b + 1) * g.out_channels * plane],
            Layout::new(g.out_channels, plane),
            &mut cols,
            0.0,
        );
        g.col2im(&cols, &mut dx[b * image_len..(b + 1) * image_len]);
    }
    dx
}

/// Gradient of a convolution with respect to its weights, accumulated into `dw`.
pub(crate) fn conv2d_weight_grad(g: &ConvGeometry, input: &[f64], grad_out: &[f64], dw: &mut [f64]) {
    let (patch, plane) = (g.patch_len(), g.out_plane());
    let image_len = g.in_channels * g.height * g.width;
    let mut cols = vec![0.0; patch * plane];
    for b in 0..g.batch {
        g.im2col(&input[b * image_len..(b + 1) * image_len], &mut cols);
        gemm(
            &grad_out[b * g.out_channels * plane..(b + 1) * g.out_channels * plane],
            Layout::new(g.out_channels, plane),
            &cols,
            Layout::new(patch, plane).t(),
            dw,
            1.0,
        );
    }
}
