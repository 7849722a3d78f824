use crate::error::{shape_err, Result};
use crate::scalar::Float;

/// Resolved geometry of a 2-D convolution (dense or depthwise).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// `weight` is `(cout, cin_per_group, kh, kw)`; `depthwise` means one group per channel.
    pub fn new(
        op: &'static str,
        input: &[usize],
        weight: &[usize],
        stride: (usize, usize),
        pad: (usize, usize),
        depthwise: bool,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(shape_err(op, format!("input must be (B,C,H,W), got {:?}", input)));
        }
        if weight.len() != 4 {
            return Err(shape_err(op, format!("weight must be 4-D, got {:?}", weight)));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err(op, "stride must be >= 1"));
        }
        let [batch, cin, h, w] = [input[0], input[1], input[2], input[3]];
        let [cout, wcin, kh, kw] = [weight[0], weight[1], weight[2], weight[3]];
        if depthwise {
            if wcin != 1 {
                return Err(shape_err(op, format!("depthwise weight dim 1 must be 1, got {wcin}")));
            }
            if cout != cin {
                return Err(shape_err(
                    op,
                    format!("channel dimension: input has {cin} channels, weight has {cout}"),
                ));
            }
        } else if wcin != cin {
            return Err(shape_err(
                op,
                format!("channel dimension: input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if h + 2 * pad.0 < kh {
            return Err(shape_err(
                op,
                format!("height: kernel {kh} exceeds padded input {}", h + 2 * pad.0),
            ));
        }
        if w + 2 * pad.1 < kw {
            return Err(shape_err(
                op,
                format!("width: kernel {kw} exceeds padded input {}", w + 2 * pad.1),
            ));
        }
        let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let wo = (w + 2 * pad.1 - kw) / stride.1 + 1;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }

    // Input coordinate for output position `o` and kernel tap `k` along one axis.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oh in 0..g.ho {
                    let d = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    match ConvGeom::src(oh, i, g.stride.0, g.pad.0, g.h) {
                        None => d.fill(T::zero()),
                        Some(ih) => {
                            let xr = &xc[ih * g.w..(ih + 1) * g.w];
                            for (ow, v) in d.iter_mut().enumerate() {
                                *v = match ConvGeom::src(ow, j, g.stride.1, g.pad.1, g.w) {
                                    Some(iw) => xr[iw],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                for oh in 0..g.ho {
                    let Some(ih) = ConvGeom::src(oh, i, g.stride.0, g.pad.0, g.h) else {
                        continue;
                    };
                    let s = &src[oh * g.wo..(oh + 1) * g.wo];
                    let dr = &mut dxc[ih * g.w..(ih + 1) * g.w];
                    for (ow, &v) in s.iter().enumerate() {
                        if let Some(iw) = ConvGeom::src(ow, j, g.stride.1, g.pad.1, g.w) {
                            dr[iw] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Dense cross-correlation via im2col + GEMM.
pub fn conv2d_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.ho * g.wo;
    let k = g.col_rows();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let mut out = vec![T::zero(); g.batch * out_sz];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * plane] };
    for b in 0..g.batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(plane).enumerate() {
                row.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.cout,
            k,
            plane,
            T::one(),
            w,
            (k as isize, 1),
            cols,
            (plane as isize, 1),
            beta,
            ob,
            (plane as isize, 1),
        );
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let plane = g.ho * g.wo;
    let k = g.col_rows();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for b in 0..g.batch {
            for (co, row) in dy[b * out_sz..(b + 1) * out_sz].chunks(plane).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
    let mut dcol = if need.0 && !pointwise { vec![T::zero(); k * plane] } else { Vec::new() };
    for b in 0..g.batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            // dW += dY · colᵀ
            T::gemm(
                g.cout,
                plane,
                k,
                T::one(),
                dyb,
                (plane as isize, 1),
                cols,
                (1, plane as isize),
                T::one(),
                dw,
                (k as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            let target: &mut [T] = if pointwise { dxb } else { &mut dcol };
            // dcol = Wᵀ · dY
            T::gemm(
                k,
                g.cout,
                plane,
                T::one(),
                w,
                (1, k as isize),
                dyb,
                (plane as isize, 1),
                T::zero(),
                target,
                (plane as isize, 1),
            );
            if !pointwise {
                col2im(&dcol, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Channel-wise convolution, `groups == channels`.
pub fn depthwise_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.cout * g.ho * g.wo];
    let taps = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xc = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let wc = &w[c * taps..(c + 1) * taps];
            let oc = &mut out[(b * g.cin + c) * g.ho * g.wo..][..g.ho * g.wo];
            let b0 = bias.map_or(T::zero(), |bs| bs[c]);
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let mut acc = b0;
                    for i in 0..g.kh {
                        let Some(ih) = ConvGeom::src(oh, i, g.stride.0, g.pad.0, g.h) else {
                            continue;
                        };
                        for j in 0..g.kw {
                            if let Some(iw) = ConvGeom::src(ow, j, g.stride.1, g.pad.1, g.w) {
                                acc += xc[ih * g.w + iw] * wc[i * g.kw + j];
                            }
                        }
                    }
                    oc[oh * g.wo + ow] = acc;
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let taps = g.kh * g.kw;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut db = need.2.then(|| vec![T::zero(); g.cin]);
    for b in 0..g.batch {
        for c in 0..g.cin {
            let base_in = (b * g.cin + c) * g.h * g.w;
            let xc = &x[base_in..base_in + g.h * g.w];
            let wc = &w[c * taps..(c + 1) * taps];
            let dyc = &dy[(b * g.cin + c) * g.ho * g.wo..][..g.ho * g.wo];
            if let Some(db) = db.as_mut() {
                db[c] += dyc.iter().copied().sum::<T>();
            }
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let gy = dyc[oh * g.wo + ow];
                    for i in 0..g.kh {
                        let Some(ih) = ConvGeom::src(oh, i, g.stride.0, g.pad.0, g.h) else {
                            continue;
                        };
                        for j in 0..g.kw {
                            let Some(iw) = ConvGeom::src(ow, j, g.stride.1, g.pad.1, g.w) else {
                                continue;
                            };
                            if let Some(dx) = dx.as_mut() {
                                dx[base_in + ih * g.w + iw] += gy * wc[i * g.kw + j];
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[c * taps + i * g.kw + j] += gy * xc[ih * g.w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_reports_offending_dimension() {
        let err = ConvGeom::new("conv2d", &[1, 3, 8, 8], &[4, 2, 3, 3], (1, 1), (0, 0), false)
            .unwrap_err()
            .to_string();
        assert!(err.contains("channel dimension"), "{err}");
        let err = ConvGeom::new("conv2d", &[1, 1, 2, 8], &[1, 1, 3, 3], (1, 1), (0, 0), false)
            .unwrap_err()
            .to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeom::new("conv2d", &[1, 1, 9, 7], &[1, 1, 3, 2], (2, 1), (1, 0), false).unwrap();
        assert_eq!((g.ho, g.wo), ((9 + 2 - 3) / 2 + 1, 7 - 2 + 1));
    }
}
