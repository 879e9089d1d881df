//! Patch extraction (`im2col`) and its adjoint (`col2im`).
//!
//! Column layout: row `(c * kh + i) * kw + j`, column `(b * oh + y) * ow + x`.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
    cols: [usize; 2],
    image: [usize; 4],
}

impl ConvGeometry {
    /// Geometry of a forward convolution over a `[B, C, H, W]` input.
    pub fn forward(
        input: [usize; 4],
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        let [b, c, h, w] = input;
        assert!(h + 2 * padding.0 >= kernel.0 && w + 2 * padding.1 >= kernel.1, "kernel larger than padded input");
        let out_h = (h + 2 * padding.0 - kernel.0) / stride.0 + 1;
        let out_w = (w + 2 * padding.1 - kernel.1) / stride.1 + 1;
        Self::build(b, c, h, w, kernel, stride, padding, out_h, out_w)
    }

    /// Geometry of a transposed convolution producing `[B, C, H_out, W_out]`
    /// from a `[B, _, in_h, in_w]` input.
    pub fn transposed(
        batch: usize,
        out_channels: usize,
        in_hw: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        let h = (in_hw.0 - 1) * stride.0 + kernel.0 - 2 * padding.0;
        let w = (in_hw.1 - 1) * stride.1 + kernel.1 - 2 * padding.1;
        let g = Self::build(batch, out_channels, h, w, kernel, stride, padding, in_hw.0, in_hw.1);
        debug_assert_eq!((h + 2 * padding.0 - kernel.0) / stride.0 + 1, in_hw.0);
        g
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        b: usize,
        c: usize,
        h: usize,
        w: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        out_h: usize,
        out_w: usize,
    ) -> Self {
        ConvGeometry {
            batch: b,
            channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
            cols: [c * kernel.0 * kernel.1, b * out_h * out_w],
            image: [b, c, h, w],
        }
    }

    pub fn cols_shape(&self) -> &[usize] {
        &self.cols
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image
    }
}

pub(crate) fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (kh, kw) = g.kernel;
    let ncols = g.cols[1];
    let mut out = vec![0.0f32; g.cols[0] * ncols];
    for c in 0..g.channels {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for y in 0..g.out_h {
                        let iy = (y * g.stride.0 + i) as isize - g.padding.0 as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.width..][..g.width];
                        let base = (b * g.out_h + y) * g.out_w;
                        for xo in 0..g.out_w {
                            let ix = (xo * g.stride.1 + j) as isize - g.padding.1 as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[base + xo] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (kh, kw) = g.kernel;
    let ncols = g.cols[1];
    let mut out = vec![0.0f32; g.batch * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut out[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for y in 0..g.out_h {
                        let iy = (y * g.stride.0 + i) as isize - g.padding.0 as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.width..][..g.width];
                        let base = (b * g.out_h + y) * g.out_w;
                        for xo in 0..g.out_w {
                            let ix = (xo * g.stride.1 + j) as isize - g.padding.1 as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += src[base + xo];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
