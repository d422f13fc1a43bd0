//! Custom CPU tensor ops.
//!
//! candle's built-in CPU convolution backward goes through a naive
//! `conv_transpose2d` kernel that is far too slow for the training loops here.
//! Convolutions are instead expressed as an explicit `im2col` custom op followed
//! by a plain matmul, which keeps both directions of the computation on the
//! gemm fast path. The gradient-reversal gate also lives here.

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

/// Geometry of a 2-D convolution lowering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kh) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kw) / self.stride + 1;
        (oh, ow)
    }
}

/// Lowers (b, c, h, w) into a (c*kh*kw, b*oh*ow) column matrix.
///
/// Row order matches a (c_out, c*kh*kw) flattened kernel, so the convolution is
/// `w_mat.matmul(cols)`. The backward pass is the col2im scatter-add.
struct Im2Col {
    geom: ConvGeometry,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn im2col_kernel<T: Copy + Default>(
    src: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
) -> Vec<T> {
    let (oh, ow) = g.out_hw(h, w);
    let n = b * oh * ow;
    let rows = c * g.kh * g.kw;
    let mut out = vec![T::default(); rows * n];
    for ci in 0..c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut out[r * n..(r + 1) * n];
                for bi in 0..b {
                    let plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        let base = (bi * oh + oy) * ow;
                        if iy < 0 || iy >= h as isize {
                            continue; // row stays zero
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[base + ox] = plane[iy * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_kernel<T: Copy + Default + std::ops::AddAssign>(
    grad_cols: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
) -> Vec<T> {
    let (oh, ow) = g.out_hw(h, w);
    let n = b * oh * ow;
    let mut grad_x = vec![T::default(); b * c * h * w];
    for ci in 0..c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &grad_cols[r * n..(r + 1) * n];
                for bi in 0..b {
                    let plane = &mut grad_x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let base = (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            plane[iy * w + ix as usize] += row[base + ox];
                        }
                    }
                }
            }
        }
    }
    grad_x
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        if layout.start_offset() != 0 || !layout.is_contiguous() {
            candle_core::bail!("im2col: input must be contiguous");
        }
        let (oh, ow) = self.geom.out_hw(self.h, self.w);
        let shape = Shape::from_dims(&[self.c * self.geom.kh * self.geom.kw, self.b * oh * ow]);
        let storage = match storage {
            CpuStorage::F32(s) => {
                CpuStorage::F32(im2col_kernel(s, self.b, self.c, self.h, self.w, self.geom))
            }
            CpuStorage::F64(s) => {
                CpuStorage::F64(im2col_kernel(s, self.b, self.c, self.h, self.w, self.geom))
            }
            _ => candle_core::bail!("im2col: only f32/f64 supported"),
        };
        Ok((storage, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let grad_res = grad_res.contiguous()?;
        let grad = grad_res.apply_op1_no_bwd(&Col2Im {
            geom: self.geom,
            b: self.b,
            c: self.c,
            h: self.h,
            w: self.w,
        })?;
        debug_assert_eq!(grad.shape(), arg.shape());
        Ok(Some(grad))
    }
}

struct Col2Im {
    geom: ConvGeometry,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        if layout.start_offset() != 0 || !layout.is_contiguous() {
            candle_core::bail!("col2im: input must be contiguous");
        }
        let shape = Shape::from_dims(&[self.b, self.c, self.h, self.w]);
        let storage = match storage {
            CpuStorage::F32(s) => {
                CpuStorage::F32(col2im_kernel(s, self.b, self.c, self.h, self.w, self.geom))
            }
            CpuStorage::F64(s) => {
                CpuStorage::F64(col2im_kernel(s, self.b, self.c, self.h, self.w, self.geom))
            }
            _ => candle_core::bail!("col2im: only f32/f64 supported"),
        };
        Ok((storage, shape))
    }
}

/// Differentiable im2col lowering of a (b, c, h, w) tensor.
pub fn im2col(x: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h + 2 * geom.padding) < geom.kh || (w + 2 * geom.padding) < geom.kw {
        candle_core::bail!("im2col: input {h}x{w} too small for kernel");
    }
    x.contiguous()?.apply_op1(Im2Col { geom, b, c, h, w })
}

/// 2-D convolution via im2col + matmul. `weight` is (c_out, c_in, kh, kw),
/// `bias` is (c_out). Differentiable w.r.t. input, weight and bias.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    let (c_out, c_in_k, kh, kw) = weight.dims4()?;
    if c_in != c_in_k {
        candle_core::bail!("conv2d: input has {c_in} channels, kernel expects {c_in_k}");
    }
    let geom = ConvGeometry {
        kh,
        kw,
        stride,
        padding,
    };
    let (oh, ow) = geom.out_hw(h, w);
    let cols = im2col(x, geom)?;
    let w_mat = weight.reshape((c_out, c_in * kh * kw))?;
    let y = w_mat.matmul(&cols)?; // (c_out, b*oh*ow)
    let y = y
        .reshape((c_out, b, oh, ow))?
        .permute((1, 0, 2, 3))?
        .contiguous()?;
    match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, c_out, 1, 1))?),
        None => Ok(y),
    }
}

/// Gradient reversal gate: identity forward, `-lambda * upstream` backward.
struct GradReverse {
    lambda: f64,
}

impl CustomOp1 for GradReverse {
    fn name(&self) -> &'static str {
        "grad-reverse"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        if layout.start_offset() != 0 || !layout.is_contiguous() {
            candle_core::bail!("grad-reverse: input must be contiguous");
        }
        Ok((storage.clone(), layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some((grad_res * (-self.lambda))?))
    }
}

pub fn reverse_gradient(x: &Tensor, lambda: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(GradReverse { lambda })
}

/// Max pooling with independent kernel/stride/padding, needed for the ResNet
/// stem (candle's CPU backward only covers kernel == stride).
struct MaxPool2d {
    geom: ConvGeometry,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn maxpool_fwd<T: Copy + PartialOrd>(
    src: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    lowest: T,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = g.out_hw(h, w);
    let planes = b * c;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = lowest;
                let mut best_idx = 0u32;
                let mut seen = false;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = plane[idx];
                        if !seen || v > best {
                            best = v;
                            best_idx = idx as u32;
                            seen = true;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

impl CustomOp1 for MaxPool2d {
    fn name(&self) -> &'static str {
        "max-pool2d"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        if layout.start_offset() != 0 || !layout.is_contiguous() {
            candle_core::bail!("max-pool2d: input must be contiguous");
        }
        let (oh, ow) = self.geom.out_hw(self.h, self.w);
        let shape = Shape::from_dims(&[self.b, self.c, oh, ow]);
        let storage = match storage {
            CpuStorage::F32(s) => {
                let (out, _) = maxpool_fwd(s, self.b, self.c, self.h, self.w, self.geom, f32::MIN);
                CpuStorage::F32(out)
            }
            CpuStorage::F64(s) => {
                let (out, _) = maxpool_fwd(s, self.b, self.c, self.h, self.w, self.geom, f64::MIN);
                CpuStorage::F64(out)
            }
            _ => candle_core::bail!("max-pool2d: only f32/f64 supported"),
        };
        Ok((storage, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        // Recompute the argmax on the forward input, scatter upstream grads.
        let g = self.geom;
        let (b, c, h, w) = (self.b, self.c, self.h, self.w);
        let (oh, ow) = g.out_hw(h, w);
        let grad = match arg.dtype() {
            candle_core::DType::F32 => {
                let src = arg.flatten_all()?.to_vec1::<f32>()?;
                let up = grad_res.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
                let (_, argmax) = maxpool_fwd(&src, b, c, h, w, g, f32::MIN);
                let mut gx = vec![0f32; b * c * h * w];
                for p in 0..b * c {
                    for o in 0..oh * ow {
                        gx[p * h * w + argmax[p * oh * ow + o] as usize] += up[p * oh * ow + o];
                    }
                }
                Tensor::from_vec(gx, (b, c, h, w), arg.device())?
            }
            candle_core::DType::F64 => {
                let src = arg.flatten_all()?.to_vec1::<f64>()?;
                let up = grad_res.contiguous()?.flatten_all()?.to_vec1::<f64>()?;
                let (_, argmax) = maxpool_fwd(&src, b, c, h, w, g, f64::MIN);
                let mut gx = vec![0f64; b * c * h * w];
                for p in 0..b * c {
                    for o in 0..oh * ow {
                        gx[p * h * w + argmax[p * oh * ow + o] as usize] += up[p * oh * ow + o];
                    }
                }
                Tensor::from_vec(gx, (b, c, h, w), arg.device())?
            }
            dt => candle_core::bail!("max-pool2d bwd: unsupported dtype {dt:?}"),
        };
        Ok(Some(grad))
    }
}

pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.contiguous()?.apply_op1(MaxPool2d {
        geom: ConvGeometry {
            kh: kernel,
            kw: kernel,
            stride,
            padding,
        },
        b,
        c,
        h,
        w,
    })
}
