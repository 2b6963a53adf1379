use rand::Rng;

use super::kernels::{col2im_acc, gemm_acc, gemm_nt_acc, gemm_tn_acc, im2col, ConvGeom};
use super::{AutodiffError, Dual6, Graph, Node, Op, Var};
use crate::geometry::{exp_se3_generic, Pose};
use crate::imaging::sample::cell;
use crate::imaging::{Intrinsics, MIN_PROJECTION_DEPTH};

/// Branch code of an out-of-frame sample; cells pack `x0 | y0 << 16`.
const NO_CELL: u32 = u32::MAX;

/// Batch statistics computed by a training-mode batch normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// Sampling coordinates produced by [`Graph::warp_coords`].
pub struct WarpOutput {
    pub coords: Var,
    /// False where the transformed point is behind the camera.
    pub valid: Vec<bool>,
}

fn nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize), AutodiffError> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(AutodiffError::shape(op, format!("expected NCHW, got {shape:?}"))),
    }
}

impl Graph {
    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let shape = self.same_shape("add", a, b)?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x + y).collect();
        self.push("add", shape, data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let shape = self.same_shape("sub", a, b)?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x - y).collect();
        self.push("sub", shape, data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let shape = self.same_shape("mul", a, b)?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x * y).collect();
        self.push("mul", shape, data, Op::Mul(a, b), &[a, b])
    }

    /// `a [N,C,H,W] * m [N,1,H,W]`, broadcasting `m` over channels.
    pub fn mul_channel(&mut self, a: Var, m: Var) -> Result<Var, AutodiffError> {
        let (n, c, h, w) = nchw(self.shape(a), "mul_channel")?;
        if self.shape(m) != [n, 1, h, w] {
            return Err(AutodiffError::shape(
                "mul_channel",
                format!("{:?} vs {:?}", self.shape(a), self.shape(m)),
            ));
        }
        let hw = h * w;
        let (av, mv) = (self.val(a), self.val(m));
        let mut data = vec![0.0; av.len()];
        for i in 0..n {
            for ch in 0..c {
                let o = (i * c + ch) * hw;
                for p in 0..hw {
                    data[o + p] = av[o + p] * mv[i * hw + p];
                }
            }
        }
        self.push("mul_channel", vec![n, c, h, w], data, Op::MulChannel(a, m), &[a, m])
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Result<Var, AutodiffError> {
        if k.len() != self.val(a).len() {
            return Err(AutodiffError::shape(
                "mul_const",
                format!("{} constants for {} values", k.len(), self.val(a).len()),
            ));
        }
        let shape = self.shape(a).to_vec();
        let data = self.val(a).iter().zip(&k).map(|(x, y)| x * y).collect();
        self.push("mul_const", shape, data, Op::MulConst(a, k), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let data = self.val(a).iter().map(|x| x * s).collect();
        self.push("scale", shape, data, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let data = self.val(a).iter().map(|x| x + s).collect();
        self.push("add_scalar", shape, data, Op::AddScalar(a), &[a])
    }

    /// |x|, with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let fresh = self.val(a).iter().map(|x| (*x >= 0.0) as u32 + (*x > 0.0) as u32).collect();
        let sign = self.decide("abs", fresh)?;
        let data = self
            .val(a)
            .iter()
            .zip(&sign)
            .map(|(x, s)| (*s as f64 - 1.0) * x)
            .collect();
        self.push("abs", shape, data, Op::Abs(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let data = self.val(a).iter().map(|x| x.ln()).collect();
        self.push("log", shape, data, Op::Log(a), &[a])
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let data = self.val(a).iter().map(|x| 1.0 / x).collect();
        self.push("reciprocal", shape, data, Op::Reciprocal(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        // the backward pass treats 0 as inactive, like any negative input
        let fresh = self.val(a).iter().map(|x| (*x > 0.0) as u32).collect();
        let active = self.decide("relu", fresh)?;
        let data = self
            .val(a)
            .iter()
            .zip(&active)
            .map(|(x, k)| if *k == 1 { *x } else { 0.0 })
            .collect();
        self.push("relu", shape, data, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let data = self.val(a).iter().map(|x| sigmoid(*x)).collect();
        self.push("sigmoid", shape, data, Op::Sigmoid(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s: f64 = self.val(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.val(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        if shape.iter().product::<usize>() != self.val(a).len() {
            return Err(AutodiffError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.val(a).to_vec();
        self.push("reshape", shape, data, Op::Reshape(a), &[a])
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(AutodiffError::shape("concat", format!("rank of {first:?}")));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total_c = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(AutodiffError::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(n * total_c * inner);
        for i in 0..n {
            for p in parts {
                let c = self.shape(*p)[1];
                data.extend_from_slice(&self.val(*p)[i * c * inner..(i + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = total_c;
        self.push("concat", shape, data, Op::Concat(parts.to_vec()), parts)
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var, AutodiffError> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.val(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let shape = self.shape(a).to_vec();
        let data = self.val(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.push("dropout", shape, data, Op::Dropout(a, mask), &[a])
    }

    /// `x [N,in] * w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1] && bs == [ws[0]];
        if !ok {
            return Err(AutodiffError::shape("linear", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut data = Vec::with_capacity(n * fout);
        for _ in 0..n {
            data.extend_from_slice(self.val(b));
        }
        gemm_nt_acc(n, fout, fin, self.val(x), self.val(w), &mut data);
        self.push("linear", vec![n, fout], data, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Square-kernel convolution; `w` is `[Co, Ci, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let (n, ci, h, wd) = nchw(self.shape(x), "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != ci || ws[2] != ws[3] || self.shape(b) != [ws[0]] {
            return Err(AutodiffError::shape(
                "conv2d",
                format!("x {:?}, w {ws:?}, b {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let (co, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(AutodiffError::shape("conv2d", format!("kernel {k} on {h}x{wd}")));
        }
        let geom = ConvGeom {
            channels: ci,
            in_h: h,
            in_w: wd,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
            kernel: k,
            stride,
            pad,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let mut colbuf = vec![0.0; rows * cols];
        let mut data = vec![0.0; n * co * cols];
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        for i in 0..n {
            im2col(&geom, &xv[i * ci * h * wd..(i + 1) * ci * h * wd], &mut colbuf);
            let out = &mut data[i * co * cols..(i + 1) * co * cols];
            for (c, chunk) in out.chunks_exact_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[c]);
            }
            gemm_acc(co, cols, rows, wv, &colbuf, out);
        }
        let shape = vec![n, co, geom.out_h, geom.out_w];
        self.push("conv2d", shape, data, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// Transposed convolution; `w` is `[Ci, Co, k, k]` and the output is
    /// `(H - 1) * stride - 2 * pad + k + out_pad` high (likewise wide).
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: (usize, usize),
    ) -> Result<Var, AutodiffError> {
        let (n, ci, h, wd) = nchw(self.shape(x), "conv_transpose2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != ci || ws[2] != ws[3] || self.shape(b) != [ws[1]] {
            return Err(AutodiffError::shape(
                "conv_transpose2d",
                format!("x {:?}, w {ws:?}, b {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let (co, k) = (ws[1], ws[2]);
        if out_pad.0 >= stride || out_pad.1 >= stride || (h.max(1) - 1) * stride + k + out_pad.0 <= 2 * pad {
            return Err(AutodiffError::shape("conv_transpose2d", "invalid padding"));
        }
        let oh = (h - 1) * stride + k + out_pad.0 - 2 * pad;
        let ow = (wd - 1) * stride + k + out_pad.1 - 2 * pad;
        // the forward pass is the adjoint of a conv from the output grid
        let geom = ConvGeom {
            channels: co,
            in_h: oh,
            in_w: ow,
            out_h: h,
            out_w: wd,
            kernel: k,
            stride,
            pad,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let mut colbuf = vec![0.0; rows * cols];
        let mut data = vec![0.0; n * co * oh * ow];
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        for i in 0..n {
            colbuf.iter_mut().for_each(|v| *v = 0.0);
            gemm_tn_acc(rows, cols, ci, wv, &xv[i * ci * cols..(i + 1) * ci * cols], &mut colbuf);
            let out = &mut data[i * co * oh * ow..(i + 1) * co * oh * ow];
            for (c, chunk) in out.chunks_exact_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[c]);
            }
            col2im_acc(&geom, &colbuf, out);
        }
        let shape = vec![n, co, oh, ow];
        self.push(
            "conv_transpose2d",
            shape,
            data,
            Op::ConvTranspose2d { x, w, b, geom },
            &[x, w, b],
        )
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize), AutodiffError> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(AutodiffError::shape("batch_norm", format!("{s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(AutodiffError::shape(
                "batch_norm",
                format!("{c} channels, gamma {:?}", self.shape(gamma)),
            ));
        }
        Ok((n, c, inner))
    }

    /// Batch normalisation with statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchNormStats), AutodiffError> {
        let (n, c, inner) = self.bn_layout(x, gamma, beta)?;
        let count = n * inner;
        let xv = self.val(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                s += xv[(i * c + ch) * inner..(i * c + ch + 1) * inner].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut ss = 0.0;
            for i in 0..n {
                ss += xv[(i * c + ch) * inner..(i * c + ch + 1) * inner]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.val(gamma), self.val(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut data = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let o = (i * c + ch) * inner;
                for p in 0..inner {
                    let h = (xv[o + p] - mean[ch]) * inv_std[ch];
                    xhat[o + p] = h;
                    data[o + p] = gv[ch] * h + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        let out = self.push("batch_norm", shape, data, op, &[x, gamma, beta])?;
        Ok((out, BatchNormStats { mean, var, count }))
    }

    /// Batch normalisation with frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let (n, c, inner) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(AutodiffError::shape("batch_norm", "running statistics size"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xv, gv, bv) = (self.val(x), self.val(gamma), self.val(beta));
        let mut data = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let o = (i * c + ch) * inner;
                for p in 0..inner {
                    data[o + p] = gv[ch] * (xv[o + p] - running_mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            inv_std,
        };
        self.push("batch_norm", shape, data, op, &[x, gamma, beta])
    }

    /// Samples `img [N,C,H,W]` at `coords [N,2,Ho,Wo]` (x plane, then y
    /// plane). Out-of-frame samples are zero, flagged invalid and pass no
    /// gradient.
    pub fn bilinear_sample(&mut self, img: Var, coords: Var) -> Result<(Var, Vec<bool>), AutodiffError> {
        let (n, c, h, w) = nchw(self.shape(img), "bilinear_sample")?;
        let (cn, two, oh, ow) = nchw(self.shape(coords), "bilinear_sample")?;
        if cn != n || two != 2 {
            return Err(AutodiffError::shape(
                "bilinear_sample",
                format!("img {:?}, coords {:?}", self.shape(img), self.shape(coords)),
            ));
        }
        let (hw, ohw) = (h * w, oh * ow);
        let cv = self.val(coords);
        let fresh = (0..n * ohw)
            .map(|q| {
                let (i, p) = (q / ohw, q % ohw);
                cell(w, h, cv[(i * 2) * ohw + p], cv[(i * 2 + 1) * ohw + p])
                    .map_or(NO_CELL, |cl| cl.x0 as u32 | (cl.y0 as u32) << 16)
            })
            .collect();
        let cells = self.decide("bilinear_sample", fresh)?;
        let (iv, cv) = (self.val(img), self.val(coords));
        let mut data = vec![0.0; n * c * ohw];
        let mut valid = vec![false; n * ohw];
        for i in 0..n {
            for p in 0..ohw {
                let code = cells[i * ohw + p];
                if code == NO_CELL {
                    continue;
                }
                let (x0, y0) = ((code & 0xffff) as usize, (code >> 16) as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let fx = cv[(i * 2) * ohw + p] - x0 as f64;
                let fy = cv[(i * 2 + 1) * ohw + p] - y0 as f64;
                valid[i * ohw + p] = true;
                let (w00, w10) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy));
                let (w01, w11) = ((1.0 - fx) * fy, fx * fy);
                for ch in 0..c {
                    let plane = &iv[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    data[(i * c + ch) * ohw + p] = w00 * plane[y0 * w + x0]
                        + w10 * plane[y0 * w + x1]
                        + w01 * plane[y1 * w + x0]
                        + w11 * plane[y1 * w + x1];
                }
            }
        }
        let out = self.push(
            "bilinear_sample",
            vec![n, c, oh, ow],
            data,
            Op::BilinearSample { img, coords },
            &[img, coords],
        )?;
        Ok((out, valid))
    }

    /// SE(3) exponential of each row of `twist [N,6]` (translation first),
    /// returned as the row-major upper 3x4 block, `[N,12]`.
    pub fn se3_exp(&mut self, twist: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(twist);
        if s.len() != 2 || s[1] != 6 {
            return Err(AutodiffError::shape("se3_exp", format!("{s:?}")));
        }
        let n = s[0];
        let tv = self.val(twist);
        let mut data = Vec::with_capacity(12 * n);
        let mut jacobian = Vec::with_capacity(72 * n);
        for i in 0..n {
            let xi: [Dual6; 6] = std::array::from_fn(|k| Dual6::variable(tv[i * 6 + k], k));
            let (r, t) = exp_se3_generic(xi);
            let entries = [
                r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
                r[2][2], t[2],
            ];
            for e in entries {
                data.push(e.v);
                jacobian.extend_from_slice(&e.d);
            }
        }
        self.push("se3_exp", vec![n, 12], data, Op::Se3Exp { twist, jacobian }, &[twist])
    }

    /// `pose_i * right_i` for 3x4 poses `[N,12]` and constant right factors.
    pub fn compose_right(&mut self, pose: Var, right: &[Pose]) -> Result<Var, AutodiffError> {
        let s = self.shape(pose);
        if s.len() != 2 || s[1] != 12 || s[0] != right.len() {
            return Err(AutodiffError::shape(
                "compose_right",
                format!("{s:?} with {} right factors", right.len()),
            ));
        }
        let pv = self.val(pose);
        let mut data = Vec::with_capacity(pv.len());
        for (i, b) in right.iter().enumerate() {
            let a = &pv[i * 12..(i + 1) * 12];
            let br = b.rotation();
            let bt = b.translation();
            for r in 0..3 {
                let row = &a[r * 4..r * 4 + 4];
                for col in 0..3 {
                    data.push(row[0] * br[(0, col)] + row[1] * br[(1, col)] + row[2] * br[(2, col)]);
                }
                data.push(row[0] * bt.x + row[1] * bt.y + row[2] * bt.z + row[3]);
            }
        }
        let shape = self.shape(pose).to_vec();
        self.push(
            "compose_right",
            shape,
            data,
            Op::ComposeRight {
                pose,
                right: right.to_vec(),
            },
            &[pose],
        )
    }

    /// For every pixel of a source grid with depth `depth [N,1,H,W]`,
    /// backprojects, applies `pose [N,12]` and projects; returns pixel
    /// coordinates `[N,2,H,W]` in the other view. Points that land behind
    /// the camera get coordinates (-1, -1) and no gradient.
    pub fn warp_coords(
        &mut self,
        pose: Var,
        depth: Var,
        k: &Intrinsics,
    ) -> Result<WarpOutput, AutodiffError> {
        let (n, one, h, w) = nchw(self.shape(depth), "warp_coords")?;
        if one != 1 || self.shape(pose) != [n, 12] || h != k.height || w != k.width {
            return Err(AutodiffError::shape(
                "warp_coords",
                format!(
                    "pose {:?}, depth {:?}, intrinsics {}x{}",
                    self.shape(pose),
                    self.shape(depth),
                    k.height,
                    k.width
                ),
            ));
        }
        let hw = h * w;
        let (pv, dv) = (self.val(pose), self.val(depth));
        let mut q = vec![[0.0; 3]; n * hw];
        for i in 0..n {
            let m = &pv[i * 12..(i + 1) * 12];
            for y in 0..h {
                let ry = (y as f64 - k.cv) / k.fv;
                for x in 0..w {
                    let p = y * w + x;
                    let rx = (x as f64 - k.cu) / k.fu;
                    let d = dv[i * hw + p];
                    let (px, py, pz) = (d * rx, d * ry, d);
                    q[i * hw + p] = [
                        m[0] * px + m[1] * py + m[2] * pz + m[3],
                        m[4] * px + m[5] * py + m[6] * pz + m[7],
                        m[8] * px + m[9] * py + m[10] * pz + m[11],
                    ];
                }
            }
        }
        let fresh = q.iter().map(|v| (v[2] > MIN_PROJECTION_DEPTH) as u32).collect();
        let in_front = self.decide("warp_coords", fresh)?;
        let mut data = vec![-1.0; n * 2 * hw];
        let mut valid = vec![false; n * hw];
        for i in 0..n {
            for p in 0..hw {
                if in_front[i * hw + p] == 1 {
                    let [qx, qy, qz] = q[i * hw + p];
                    data[i * 2 * hw + p] = k.fu * qx / qz + k.cu;
                    data[(i * 2 + 1) * hw + p] = k.fv * qy / qz + k.cv;
                    valid[i * hw + p] = true;
                }
            }
        }
        let coords = self.push(
            "warp_coords",
            vec![n, 2, h, w],
            data,
            Op::WarpCoords {
                pose,
                depth,
                intrinsics: *k,
                valid: valid.clone(),
            },
            &[pose, depth],
        )?;
        Ok(WarpOutput { coords, valid })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adds the contribution of `node`'s output gradient `g` to its inputs,
/// which all live in `before`.
pub(crate) fn backward_node(node: &Node, g: &[f64], before: &mut [Node]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(before, *a, |d| add_into(d, g));
            acc(before, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(before, *a, |d| add_into(d, g));
            acc(before, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let bv = before[b.0].value.data.clone();
            let av = before[a.0].value.data.clone();
            acc(before, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            acc(before, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        Op::MulChannel(a, m) => {
            let s = before[a.0].value.shape.clone();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let mv = before[m.0].value.data.clone();
            let av = before[a.0].value.data.clone();
            acc(before, *a, |d| {
                for i in 0..n {
                    for ch in 0..c {
                        let o = (i * c + ch) * hw;
                        for p in 0..hw {
                            d[o + p] += g[o + p] * mv[i * hw + p];
                        }
                    }
                }
            });
            acc(before, *m, |d| {
                for i in 0..n {
                    for ch in 0..c {
                        let o = (i * c + ch) * hw;
                        for p in 0..hw {
                            d[i * hw + p] += g[o + p] * av[o + p];
                        }
                    }
                }
            });
        }
        Op::MulConst(a, k) => acc(before, *a, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * k[i];
            }
        }),
        Op::Scale(a, s) => acc(before, *a, |d| {
            d.iter_mut().zip(g).for_each(|(x, y)| *x += y * s)
        }),
        Op::AddScalar(a) | Op::Reshape(a) => acc(before, *a, |d| add_into(d, g)),
        Op::Abs(a) => {
            let av = before[a.0].value.data.clone();
            acc(before, *a, |d| {
                for i in 0..d.len() {
                    let s = if av[i] > 0.0 {
                        1.0
                    } else if av[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    d[i] += g[i] * s;
                }
            })
        }
        Op::Log(a) => {
            let av = before[a.0].value.data.clone();
            acc(before, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / av[i];
                }
            })
        }
        Op::Reciprocal(a) => {
            let y = &node.value.data;
            acc(before, *a, |d| {
                for i in 0..d.len() {
                    d[i] -= g[i] * y[i] * y[i];
                }
            })
        }
        Op::Relu(a) => {
            let av = before[a.0].value.data.clone();
            acc(before, *a, |d| {
                for i in 0..d.len() {
                    if av[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            })
        }
        Op::Sigmoid(a) => {
            let y = &node.value.data;
            acc(before, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            })
        }
        Op::Sum(a) => acc(before, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
        Op::Mean(a) => acc(before, *a, |d| {
            let s = g[0] / d.len() as f64;
            d.iter_mut().for_each(|x| *x += s)
        }),
        Op::Concat(parts) => {
            let n = node.value.shape[0];
            let inner: usize = node.value.shape[2..].iter().product();
            let total_c = node.value.shape[1];
            let mut offset = 0;
            for p in parts {
                let c = before[p.0].value.shape[1];
                acc(before, *p, |d| {
                    for i in 0..n {
                        let src = &g[(i * total_c + offset) * inner..(i * total_c + offset + c) * inner];
                        add_into(&mut d[i * c * inner..(i + 1) * c * inner], src);
                    }
                });
                offset += c;
            }
        }
        Op::Dropout(a, mask) => acc(before, *a, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * mask[i];
            }
        }),
        Op::Linear { x, w, b } => {
            let (n, fin) = (before[x.0].value.shape[0], before[x.0].value.shape[1]);
            let fout = before[w.0].value.shape[0];
            let xv = before[x.0].value.data.clone();
            let wv = before[w.0].value.data.clone();
            acc(before, *x, |d| gemm_acc(n, fin, fout, g, &wv, d));
            acc(before, *w, |d| gemm_tn_acc(fout, fin, n, g, &xv, d));
            acc(before, *b, |d| {
                for i in 0..n {
                    add_into(d, &g[i * fout..(i + 1) * fout]);
                }
            });
        }
        Op::Conv2d { x, w, b, geom } => {
            let n = before[x.0].value.shape[0];
            let co = before[w.0].value.shape[0];
            let (rows, cols) = (geom.rows(), geom.cols());
            let in_sz = geom.channels * geom.in_h * geom.in_w;
            let xv = before[x.0].value.data.clone();
            let wv = before[w.0].value.data.clone();
            let need_x = before[x.0].requires_grad;
            let need_w = before[w.0].requires_grad;
            let mut colbuf = vec![0.0; rows * cols];
            let mut dcol = vec![0.0; rows * cols];
            let mut dw = vec![0.0; wv.len()];
            let mut dx = vec![0.0; xv.len()];
            for i in 0..n {
                let gi = &g[i * co * cols..(i + 1) * co * cols];
                if need_w {
                    im2col(geom, &xv[i * in_sz..(i + 1) * in_sz], &mut colbuf);
                    gemm_nt_acc(co, rows, cols, gi, &colbuf, &mut dw);
                }
                if need_x {
                    dcol.iter_mut().for_each(|v| *v = 0.0);
                    gemm_tn_acc(rows, cols, co, &wv, gi, &mut dcol);
                    col2im_acc(geom, &dcol, &mut dx[i * in_sz..(i + 1) * in_sz]);
                }
            }
            acc(before, *x, |d| add_into(d, &dx));
            acc(before, *w, |d| add_into(d, &dw));
            acc(before, *b, |d| {
                for i in 0..n {
                    for (c, chunk) in g[i * co * cols..(i + 1) * co * cols].chunks_exact(cols).enumerate() {
                        d[c] += chunk.iter().sum::<f64>();
                    }
                }
            });
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let n = before[x.0].value.shape[0];
            let ci = before[w.0].value.shape[0];
            let co = geom.channels;
            let (rows, cols) = (geom.rows(), geom.cols());
            let out_sz = co * geom.in_h * geom.in_w;
            let xv = before[x.0].value.data.clone();
            let wv = before[w.0].value.data.clone();
            let mut colbuf = vec![0.0; rows * cols];
            let mut dw = vec![0.0; wv.len()];
            let mut dx = vec![0.0; xv.len()];
            for i in 0..n {
                im2col(geom, &g[i * out_sz..(i + 1) * out_sz], &mut colbuf);
                gemm_acc(ci, cols, rows, &wv, &colbuf, &mut dx[i * ci * cols..(i + 1) * ci * cols]);
                gemm_nt_acc(ci, rows, cols, &xv[i * ci * cols..(i + 1) * ci * cols], &colbuf, &mut dw);
            }
            acc(before, *x, |d| add_into(d, &dx));
            acc(before, *w, |d| add_into(d, &dw));
            let plane = geom.in_h * geom.in_w;
            acc(before, *b, |d| {
                for i in 0..n {
                    for (c, chunk) in g[i * out_sz..(i + 1) * out_sz].chunks_exact(plane).enumerate() {
                        d[c] += chunk.iter().sum::<f64>();
                    }
                }
            });
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let s = &before[x.0].value.shape;
            let (n, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let m = (n * inner) as f64;
            let gv = before[gamma.0].value.data.clone();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let o = (i * c + ch) * inner;
                    for p in 0..inner {
                        dgamma[ch] += g[o + p] * xhat[o + p];
                        dbeta[ch] += g[o + p];
                    }
                }
            }
            acc(before, *x, |d| {
                for i in 0..n {
                    for ch in 0..c {
                        let o = (i * c + ch) * inner;
                        let k = gv[ch] * inv_std[ch] / m;
                        for p in 0..inner {
                            d[o + p] += k * (m * g[o + p] - dbeta[ch] - xhat[o + p] * dgamma[ch]);
                        }
                    }
                }
            });
            acc(before, *gamma, |d| add_into(d, &dgamma));
            acc(before, *beta, |d| add_into(d, &dbeta));
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let s = &before[x.0].value.shape;
            let (n, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let xv = before[x.0].value.data.clone();
            let gv = before[gamma.0].value.data.clone();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let o = (i * c + ch) * inner;
                    for p in 0..inner {
                        dgamma[ch] += g[o + p] * (xv[o + p] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += g[o + p];
                    }
                }
            }
            acc(before, *x, |d| {
                for i in 0..n {
                    for ch in 0..c {
                        let o = (i * c + ch) * inner;
                        for p in 0..inner {
                            d[o + p] += g[o + p] * gv[ch] * inv_std[ch];
                        }
                    }
                }
            });
            acc(before, *gamma, |d| add_into(d, &dgamma));
            acc(before, *beta, |d| add_into(d, &dbeta));
        }
        Op::BilinearSample { img, coords } => {
            let s = before[img.0].value.shape.clone();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (node.value.shape[2], node.value.shape[3]);
            let (hw, ohw) = (h * w, oh * ow);
            let iv = before[img.0].value.data.clone();
            let cv = before[coords.0].value.data.clone();
            let need_img = before[img.0].requires_grad;
            let need_coords = before[coords.0].requires_grad;
            let mut dimg = if need_img { vec![0.0; iv.len()] } else { Vec::new() };
            let mut dcoords = vec![0.0; cv.len()];
            for i in 0..n {
                for p in 0..ohw {
                    let x = cv[(i * 2) * ohw + p];
                    let y = cv[(i * 2 + 1) * ohw + p];
                    let Some(cl) = cell(w, h, x, y) else { continue };
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for ch in 0..c {
                        let go = g[(i * c + ch) * ohw + p];
                        if go == 0.0 {
                            continue;
                        }
                        let base = (i * c + ch) * hw;
                        let i00 = base + cl.y0 * w + cl.x0;
                        let i10 = base + cl.y0 * w + cl.x1;
                        let i01 = base + cl.y1 * w + cl.x0;
                        let i11 = base + cl.y1 * w + cl.x1;
                        if need_coords {
                            gx += go
                                * ((1.0 - cl.fy) * (iv[i10] - iv[i00]) + cl.fy * (iv[i11] - iv[i01]));
                            gy += go
                                * ((1.0 - cl.fx) * (iv[i01] - iv[i00]) + cl.fx * (iv[i11] - iv[i10]));
                        }
                        if need_img {
                            dimg[i00] += go * (1.0 - cl.fx) * (1.0 - cl.fy);
                            dimg[i10] += go * cl.fx * (1.0 - cl.fy);
                            dimg[i01] += go * (1.0 - cl.fx) * cl.fy;
                            dimg[i11] += go * cl.fx * cl.fy;
                        }
                    }
                    dcoords[(i * 2) * ohw + p] += gx;
                    dcoords[(i * 2 + 1) * ohw + p] += gy;
                }
            }
            if need_img {
                acc(before, *img, |d| add_into(d, &dimg));
            }
            acc(before, *coords, |d| add_into(d, &dcoords));
        }
        Op::Se3Exp { twist, jacobian } => acc(before, *twist, |d| {
            let n = d.len() / 6;
            for i in 0..n {
                for e in 0..12 {
                    let ge = g[i * 12 + e];
                    let j = &jacobian[(i * 12 + e) * 6..(i * 12 + e + 1) * 6];
                    for k in 0..6 {
                        d[i * 6 + k] += ge * j[k];
                    }
                }
            }
        }),
        Op::ComposeRight { pose, right } => acc(before, *pose, |d| {
            for (i, b) in right.iter().enumerate() {
                let gi = &g[i * 12..(i + 1) * 12];
                let br = b.rotation();
                let bt = b.translation();
                let bt = [bt.x, bt.y, bt.z];
                for r in 0..3 {
                    for k in 0..3 {
                        // C[r][c] = sum_k A[r][k] B[k][c];  Ct[r] = sum_k A[r][k] Bt[k] + At[r]
                        let mut s = gi[r * 4 + 3] * bt[k];
                        for c in 0..3 {
                            s += gi[r * 4 + c] * br[(k, c)];
                        }
                        d[i * 12 + r * 4 + k] += s;
                    }
                    d[i * 12 + r * 4 + 3] += gi[r * 4 + 3];
                }
            }
        }),
        Op::WarpCoords {
            pose,
            depth,
            intrinsics: k,
            valid,
        } => {
            let s = before[depth.0].value.shape.clone();
            let (n, h, w) = (s[0], s[2], s[3]);
            let hw = h * w;
            let pv = before[pose.0].value.data.clone();
            let dv = before[depth.0].value.data.clone();
            let mut dpose = vec![0.0; pv.len()];
            let mut ddepth = vec![0.0; dv.len()];
            for i in 0..n {
                let m = &pv[i * 12..(i + 1) * 12];
                for y in 0..h {
                    let ry = (y as f64 - k.cv) / k.fv;
                    for x in 0..w {
                        let p = y * w + x;
                        if !valid[i * hw + p] {
                            continue;
                        }
                        let gu = g[i * 2 * hw + p];
                        let gv = g[(i * 2 + 1) * hw + p];
                        if gu == 0.0 && gv == 0.0 {
                            continue;
                        }
                        let rx = (x as f64 - k.cu) / k.fu;
                        let d = dv[i * hw + p];
                        let pt = [d * rx, d * ry, d];
                        let q = [
                            m[0] * pt[0] + m[1] * pt[1] + m[2] * pt[2] + m[3],
                            m[4] * pt[0] + m[5] * pt[1] + m[6] * pt[2] + m[7],
                            m[8] * pt[0] + m[9] * pt[1] + m[10] * pt[2] + m[11],
                        ];
                        let iz = 1.0 / q[2];
                        let gq = [
                            gu * k.fu * iz,
                            gv * k.fv * iz,
                            -(gu * k.fu * q[0] + gv * k.fv * q[1]) * iz * iz,
                        ];
                        for r in 0..3 {
                            for c in 0..3 {
                                dpose[i * 12 + r * 4 + c] += gq[r] * pt[c];
                            }
                            dpose[i * 12 + r * 4 + 3] += gq[r];
                        }
                        // dq/dd = R * ray
                        let ray = [rx, ry, 1.0];
                        let mut gd = 0.0;
                        for r in 0..3 {
                            gd += gq[r] * (m[r * 4] * ray[0] + m[r * 4 + 1] * ray[1] + m[r * 4 + 2] * ray[2]);
                        }
                        ddepth[i * hw + p] += gd;
                    }
                }
            }
            acc(before, *pose, |d| add_into(d, &dpose));
            acc(before, *depth, |d| add_into(d, &ddepth));
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
}

fn acc(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let len = node.value.data.len();
    let grad = node.grad.get_or_insert_with(|| vec![0.0; len]);
    f(grad);
}
