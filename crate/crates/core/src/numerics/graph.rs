//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products into the inputs
//! that require gradients. A `Graph` is built for one forward pass and dropped
//! after its gradients have been read.

use super::tensor::{gemm, matmul_dims, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Spatial geometry of a channels-last convolution `[T, H, W, C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ph = self.kh / 2;
        let pw = self.kw / 2;
        (
            (h + 2 * ph - self.kh) / self.stride + 1,
            (w + 2 * pw - self.kw) / self.stride + 1,
        )
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Swish(Var),
    Relu(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MaskedCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        rows: Vec<usize>,
        probs: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    RelShift(Var),
    DepthwiseConv1d(Var, Var),
    Conv3d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    SpatialMean(Var),
    SumAll(Var),
    MaskRows {
        x: Var,
        replacement: Var,
        mask: Vec<bool>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape for one forward/backward pair.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.dims[v.0].clone(), g.clone()).expect("grad dims"))
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.dims[v.0].clone()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.dims(v) {
            [r, c] => Ok((*r, *c)),
            d => Err(shape_err!("{what} expects a matrix, got {d:?}")),
        }
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.dims(a), self.dims(b))?;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err!(
                "matmul_nt inner extents differ: lhs has {k} columns, rhs has {k2} columns"
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshape(dims)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err!(
                "{what}: operand dims {:?} and {:?} differ",
                self.dims(a),
                self.dims(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.dims().to_vec(), data).expect("same dims")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[D]` bias to every row of `x: [..., D]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.dims(bias) != [d] {
            return Err(shape_err!(
                "bias of dims {:?} does not match last extent {d}",
                self.dims(bias)
            ));
        }
        let mut t = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in t.data_mut().chunks_mut(d) {
            for (y, bb) in row.iter_mut().zip(&b) {
                *y += bb;
            }
        }
        Ok(self.push(t, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// `x · σ(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push(t, Op::Swish(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    /// Gated linear unit over the last axis: first half times σ(second half).
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let d2 = v.last_dim();
        if !d2.is_multiple_of(2) {
            return Err(shape_err!("glu needs an even last extent, got {d2}"));
        }
        let d = d2 / 2;
        let mut out = Vec::with_capacity(v.len() / 2);
        for row in v.data().chunks(d2) {
            for j in 0..d {
                out.push(row[j] * sigmoid(row[d + j]));
            }
        }
        let mut dims = v.dims().to_vec();
        *dims.last_mut().unwrap() = d;
        let t = Tensor::new(dims, out)?;
        Ok(self.push(t, Op::Glu(a), &[a]))
    }

    // ---- normalisation --------------------------------------------------

    /// Normalises every row of `x: [..., D]` to zero mean and unit variance,
    /// then applies `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(shape_err!(
                "layer_norm over {d} features got gamma {:?} and beta {:?}",
                self.dims(gamma),
                self.dims(beta)
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::new(xv.dims().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Group normalisation of channels-last activations `[N, ..., C]`: statistics
    /// are taken per leading index `N` over all spatial positions and the
    /// channels of one group; affine parameters are per channel.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(shape_err!("{c} channels cannot form {groups} groups"));
        }
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(shape_err!("group_norm affine parameters must have {c} entries"));
        }
        let n = xv.dims()[0];
        let per_sample = xv.len() / n;
        let spatial = per_sample / c;
        let cg = c / groups;
        let count = (spatial * cg) as f64;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data = xv.data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        let mut inv_std = Vec::with_capacity(n * groups);
        for s in 0..n {
            let base = s * per_sample;
            for gi in 0..groups {
                let mut sum = 0.0;
                for p in 0..spatial {
                    let off = base + p * c + gi * cg;
                    sum += data[off..off + cg].iter().sum::<f64>();
                }
                let mean = sum / count;
                let mut var = 0.0;
                for p in 0..spatial {
                    let off = base + p * c + gi * cg;
                    var += data[off..off + cg]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let inv = 1.0 / (var / count + eps).sqrt();
                inv_std.push(inv);
                for p in 0..spatial {
                    let off = base + p * c + gi * cg;
                    for j in 0..cg {
                        let h = (data[off + j] - mean) * inv;
                        let ch = gi * cg + j;
                        xhat[off + j] = h;
                        out[off + j] = g[ch] * h + b[ch];
                    }
                }
            }
        }
        let t = Tensor::new(xv.dims().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- softmax family -------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.dims().to_vec(), out).expect("dims");
        self.push(t, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(v.dims().to_vec(), out).expect("dims");
        self.push(t, Op::LogSoftmaxRows(a), &[a])
    }

    /// Mean cross-entropy of `logits: [T, K]` against `labels` over the rows
    /// where `mask` is set. Rows outside the mask are never read. Returns the
    /// scalar loss and the number of rows used; an empty mask yields zero.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<(Var, usize)> {
        let (t, k) = self.matrix_dims(logits, "masked_cross_entropy")?;
        if labels.len() != t || mask.len() != t {
            return Err(shape_err!(
                "logits have {t} rows but labels have {} and mask {}",
                labels.len(),
                mask.len()
            ));
        }
        let lv = self.value(logits).data();
        let mut rows = Vec::new();
        let mut used_labels = Vec::new();
        let mut probs = Vec::new();
        let mut total = 0.0;
        for (i, (&m, &y)) in mask.iter().zip(labels).enumerate() {
            if !m {
                continue;
            }
            if y >= k {
                return Err(Error::Data(format!("label {y} outside [0, {k})")));
            }
            let row = &lv[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            total += lse - row[y];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
            rows.push(i);
            used_labels.push(y);
        }
        let count = rows.len();
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let var = self.push(
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy {
                logits,
                labels: used_labels,
                rows,
                probs,
            },
            &[logits],
        );
        Ok((var, count))
    }

    // ---- structural -----------------------------------------------------

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(shape_err!("column slice {start}+{len} outside {c} columns"));
        }
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new([r, len], out)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat_cols of nothing"));
        }
        let mut r0 = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if *r0.get_or_insert(r) != r {
                return Err(shape_err!(
                    "concat_cols row counts differ: {} vs {r}",
                    r0.unwrap()
                ));
            }
            widths.push(c);
        }
        let r = r0.unwrap();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new([r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Maps `[T, 2T-1]` scores indexed by relative offset (column `c` holds
    /// offset `T-1-c`) onto `[T, T]` with entry `(i, j)` taken at offset `i-j`.
    pub fn rel_shift(&mut self, a: Var) -> Result<Var> {
        let (t, w) = self.matrix_dims(a, "rel_shift")?;
        if w != 2 * t - 1 {
            return Err(shape_err!("rel_shift expects [T, 2T-1], got [{t}, {w}]"));
        }
        let v = self.value(a).data();
        let mut out = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                out[i * t + j] = v[i * w + (t - 1 + j - i)];
            }
        }
        let tt = Tensor::new([t, t], out)?;
        Ok(self.push(tt, Op::RelShift(a), &[a]))
    }

    /// Replaces rows of `x: [T, D]` where `mask` is set by `replacement: [D]`.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool], replacement: Var) -> Result<Var> {
        let (t, d) = self.matrix_dims(x, "mask_rows")?;
        if mask.len() != t || self.dims(replacement) != [d] {
            return Err(shape_err!(
                "mask_rows: {t} rows with mask of {} and replacement {:?}",
                mask.len(),
                self.dims(replacement)
            ));
        }
        let mut out = self.value(x).clone();
        let r = self.value(replacement).data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(i).copy_from_slice(&r);
            }
        }
        Ok(self.push(
            out,
            Op::MaskRows {
                x,
                replacement,
                mask: mask.to_vec(),
            },
            &[x, replacement],
        ))
    }

    /// Rows of `table: [V, D]` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(shape_err!("gather_rows with no ids"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Data(format!("row id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let t = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    // ---- convolutions ---------------------------------------------------

    /// Channel-independent 1-D convolution over time with zero "same" padding.
    /// `x: [T, D]`, `kernel: [K, D]` with odd `K`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, d) = self.matrix_dims(x, "depthwise_conv1d")?;
        let (k, dk) = self.matrix_dims(kernel, "depthwise_conv1d kernel")?;
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size {k} must be odd")));
        }
        if dk != d {
            return Err(shape_err!("kernel has {dk} channels, input has {d}"));
        }
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let pad = k / 2;
        let mut out = vec![0.0; t * d];
        for ti in 0..t {
            let o = &mut out[ti * d..(ti + 1) * d];
            for kk in 0..k {
                let src = ti + kk;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xr = &xv[(src - pad) * d..(src - pad + 1) * d];
                let kr = &kv[kk * d..(kk + 1) * d];
                for j in 0..d {
                    o[j] += xr[j] * kr[j];
                }
            }
        }
        let tt = Tensor::new([t, d], out)?;
        Ok(self.push(tt, Op::DepthwiseConv1d(x, kernel), &[x, kernel]))
    }

    /// Dense convolution over channels-last `x: [T, H, W, C]` with weights
    /// `w: [kt·kh·kw·C, C_out]` (patch order time, row, column, channel).
    /// Zero "same" padding in all axes, stride 1 in time and `geom.stride`
    /// spatially. A 2-D convolution is the `kt = 1` case.
    pub fn conv3d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let [t, h, wd, c] = xd[..] else {
            return Err(shape_err!("conv3d expects [T, H, W, C], got {xd:?}"));
        };
        let patch = geom.kt * geom.kh * geom.kw * c;
        let (wr, cout) = self.matrix_dims(w, "conv3d weight")?;
        if wr != patch {
            return Err(shape_err!(
                "conv3d weight has {wr} rows, patch size is {patch}"
            ));
        }
        if geom.kt.is_multiple_of(2) || geom.kh.is_multiple_of(2) || geom.kw.is_multiple_of(2) {
            return Err(Error::Config("conv3d kernels must have odd extents".into()));
        }
        let (ho, wo) = geom.out_hw(h, wd);
        let cols = im2col(self.value(x).data(), [t, h, wd, c], geom);
        let rows = t * ho * wo;
        let mut out = vec![0.0; rows * cout];
        gemm(
            rows,
            patch,
            cout,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            0.0,
        );
        let tt = Tensor::new([t, ho, wo, cout], out)?;
        Ok(self.push(tt, Op::Conv3d { x, w, geom }, &[x, w]))
    }

    /// Per-channel 2-D convolution of `x: [N, H, W, C]` with `w: [kh·kw, C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let [n, h, wd, c] = xd[..] else {
            return Err(shape_err!("depthwise_conv2d expects [N, H, W, C], got {xd:?}"));
        };
        if self.dims(w) != [geom.kh * geom.kw, c] {
            return Err(shape_err!(
                "depthwise_conv2d weight {:?} does not match {}x{} over {c} channels",
                self.dims(w),
                geom.kh,
                geom.kw
            ));
        }
        let (ho, wo) = geom.out_hw(h, wd);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * ho * wo * c];
        for_each_tap(n, h, wd, c, geom, |o_off, i_off, tap| {
            for j in 0..c {
                out[o_off + j] += xv[i_off + j] * wv[tap * c + j];
            }
        });
        let tt = Tensor::new([n, ho, wo, c], out)?;
        Ok(self.push(tt, Op::DepthwiseConv2d { x, w, geom }, &[x, w]))
    }

    /// Global average over the spatial axes of `[N, H, W, C]`, giving `[N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let [n, h, w, c] = xd[..] else {
            return Err(shape_err!("spatial_mean expects [N, H, W, C], got {xd:?}"));
        };
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            let o = &mut out[s * c..(s + 1) * c];
            for p in 0..hw {
                let off = (s * hw + p) * c;
                for j in 0..c {
                    o[j] += xv[off + j];
                }
            }
            o.iter_mut().for_each(|v| *v /= hw as f64);
        }
        let t = Tensor::new([n, c], out)?;
        Ok(self.push(t, Op::SpatialMean(x), &[x]))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.dims(*a));
                let n = self.dims(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| gemm(m, n, k, g, false, bv, true, ga, 1.0));
                self.acc(grads, *b, |gb| gemm(k, m, n, av, true, g, false, gb, 1.0));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims2(self.dims(*a));
                let n = self.dims(*b)[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| gemm(m, n, k, g, false, bv, false, ga, 1.0));
                self.acc(grads, *b, |gb| gemm(n, m, k, g, true, av, false, gb, 1.0));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddRow(x, b) => {
                let d = self.value(*b).len();
                self.acc(grads, *x, |gx| axpy(gx, g, 1.0));
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(d) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |ga| axpy(ga, g, *s)),
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * val[j] * (1.0 - val[j]);
                }
            }),
            Op::Swish(a) => {
                let xv = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        let s = sigmoid(xv[j]);
                        ga[j] += g[j] * (s + xv[j] * s * (1.0 - s));
                    }
                })
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                })
            }
            Op::Glu(a) => {
                let xv = self.value(*a).data();
                let d2 = self.value(*a).last_dim();
                let d = d2 / 2;
                self.acc(grads, *a, |ga| {
                    for (r, (grow, xrow)) in g.chunks(d).zip(xv.chunks(d2)).enumerate() {
                        let gar = &mut ga[r * d2..(r + 1) * d2];
                        for j in 0..d {
                            let s = sigmoid(xrow[d + j]);
                            gar[j] += grow[j] * s;
                            gar[d + j] += grow[j] * xrow[j] * s * (1.0 - s);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                let d = gm.len();
                self.acc(grads, *gamma, |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for grow in g.chunks(d) {
                        axpy(gb, grow, 1.0);
                    }
                });
                self.acc(grads, *x, |gx| {
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gm[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxr[j] += inv / d as f64 * (d as f64 * dh[j] - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                let c = gm.len();
                self.acc(grads, *gamma, |gg| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for grow in g.chunks(c) {
                        axpy(gb, grow, 1.0);
                    }
                });
                let n = self.dims(*x)[0];
                let per_sample = g.len() / n;
                let spatial = per_sample / c;
                let cg = c / groups;
                let count = (spatial * cg) as f64;
                self.acc(grads, *x, |gx| {
                    for s in 0..n {
                        let base = s * per_sample;
                        for gi in 0..*groups {
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for p in 0..spatial {
                                let off = base + p * c + gi * cg;
                                for j in 0..cg {
                                    let dh = g[off + j] * gm[gi * cg + j];
                                    s1 += dh;
                                    s2 += dh * xhat[off + j];
                                }
                            }
                            let inv = inv_std[s * groups + gi];
                            for p in 0..spatial {
                                let off = base + p * c + gi * cg;
                                for j in 0..cg {
                                    let dh = g[off + j] * gm[gi * cg + j];
                                    gx[off + j] +=
                                        inv / count * (count * dh - s1 - xhat[off + j] * s2);
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let d = node.value.last_dim();
                self.acc(grads, *a, |ga| {
                    for (r, (grow, yrow)) in g.chunks(d).zip(val.chunks(d)).enumerate() {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for j in 0..d {
                            ga[r * d + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmaxRows(a) => {
                let d = node.value.last_dim();
                self.acc(grads, *a, |ga| {
                    for (r, (grow, yrow)) in g.chunks(d).zip(val.chunks(d)).enumerate() {
                        let s: f64 = grow.iter().sum();
                        for j in 0..d {
                            ga[r * d + j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                })
            }
            Op::MaskedCrossEntropy {
                logits,
                labels,
                rows,
                probs,
            } => {
                if rows.is_empty() {
                    return;
                }
                let k = self.value(*logits).last_dim();
                let scale = g[0] / rows.len() as f64;
                self.acc(grads, *logits, |gl| {
                    for (n, (&r, &y)) in rows.iter().zip(labels).enumerate() {
                        let p = &probs[n * k..(n + 1) * k];
                        let gr = &mut gl[r * k..(r + 1) * k];
                        for j in 0..k {
                            gr[j] += scale * p[j];
                        }
                        gr[y] -= scale;
                    }
                })
            }
            Op::SliceCols(a, start) => {
                let c = self.dims(*a)[1];
                let len = node.value.last_dim();
                self.acc(grads, *a, |ga| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        axpy(&mut ga[r * c + start..r * c + start + len], grow, 1.0);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p)[1];
                    self.acc(grads, p, |gp| {
                        for (r, grow) in g.chunks(total).enumerate() {
                            axpy(&mut gp[r * w..(r + 1) * w], &grow[off..off + w], 1.0);
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape(a) => self.acc(grads, *a, |ga| axpy(ga, g, 1.0)),
            Op::Transpose(a) => {
                let (m, n) = dims2(self.dims(*a));
                self.acc(grads, *a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                })
            }
            Op::RelShift(a) => {
                let t = node.value.last_dim();
                let w = 2 * t - 1;
                self.acc(grads, *a, |ga| {
                    for i in 0..t {
                        for j in 0..t {
                            ga[i * w + (t - 1 + j - i)] += g[i * t + j];
                        }
                    }
                })
            }
            Op::MaskRows { x, replacement, mask } => {
                let d = node.value.last_dim();
                self.acc(grads, *x, |gx| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            axpy(&mut gx[r * d..(r + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                        }
                    }
                });
                self.acc(grads, *replacement, |gr| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            axpy(gr, &g[r * d..(r + 1) * d], 1.0);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = node.value.last_dim();
                self.acc(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                })
            }
            Op::SumAll(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::DepthwiseConv1d(x, kernel) => {
                let (t, d) = dims2(self.dims(*x));
                let k = self.dims(*kernel)[0];
                let pad = k / 2;
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                self.acc(grads, *x, |gx| {
                    for ti in 0..t {
                        for kk in 0..k {
                            let src = ti + kk;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let s = src - pad;
                            for j in 0..d {
                                gx[s * d + j] += g[ti * d + j] * kv[kk * d + j];
                            }
                        }
                    }
                });
                self.acc(grads, *kernel, |gk| {
                    for ti in 0..t {
                        for kk in 0..k {
                            let src = ti + kk;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let s = src - pad;
                            for j in 0..d {
                                gk[kk * d + j] += g[ti * d + j] * xv[s * d + j];
                            }
                        }
                    }
                });
            }
            Op::Conv3d { x, w, geom } => {
                let xd = self.dims(*x);
                let shape = [xd[0], xd[1], xd[2], xd[3]];
                let (patch, cout) = dims2(self.dims(*w));
                let rows = g.len() / cout;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.nodes[w.0].needs_grad {
                    let cols = im2col(xv, shape, *geom);
                    self.acc(grads, *w, |gw| {
                        gemm(patch, rows, cout, &cols, true, g, false, gw, 1.0)
                    });
                }
                self.acc(grads, *x, |gx| {
                    let mut dcols = vec![0.0; rows * patch];
                    gemm(rows, cout, patch, g, false, wv, true, &mut dcols, 0.0);
                    col2im(&dcols, shape, *geom, gx);
                });
            }
            Op::DepthwiseConv2d { x, w, geom } => {
                let xd = self.dims(*x);
                let (n, h, wd, c) = (xd[0], xd[1], xd[2], xd[3]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.acc(grads, *x, |gx| {
                    for_each_tap(n, h, wd, c, *geom, |o_off, i_off, tap| {
                        for j in 0..c {
                            gx[i_off + j] += g[o_off + j] * wv[tap * c + j];
                        }
                    })
                });
                self.acc(grads, *w, |gw| {
                    for_each_tap(n, h, wd, c, *geom, |o_off, i_off, tap| {
                        for j in 0..c {
                            gw[tap * c + j] += g[o_off + j] * xv[i_off + j];
                        }
                    })
                });
            }
            Op::SpatialMean(x) => {
                let xd = self.dims(*x);
                let (n, hw, c) = (xd[0], xd[1] * xd[2], xd[3]);
                self.acc(grads, *x, |gx| {
                    for s in 0..n {
                        for p in 0..hw {
                            let off = (s * hw + p) * c;
                            for j in 0..c {
                                gx[off + j] += g[s * c + j] / hw as f64;
                            }
                        }
                    }
                })
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }
}

fn dims2(d: &[usize]) -> (usize, usize) {
    (d[0], d[1])
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

/// Calls `f(out_offset, in_offset, tap)` for every in-bounds tap of a 2-D
/// per-frame window with zero "same" padding.
fn for_each_tap(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    geom: ConvGeom,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (ho, wo) = geom.out_hw(h, w);
    let (ph, pw) = (geom.kh / 2, geom.kw / 2);
    for s in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let o_off = ((s * ho + oy) * wo + ox) * c;
                for ky in 0..geom.kh {
                    let iy = oy * geom.stride + ky;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    for kx in 0..geom.kw {
                        let ix = ox * geom.stride + kx;
                        if ix < pw || ix - pw >= w {
                            continue;
                        }
                        let i_off = ((s * h + iy - ph) * w + ix - pw) * c;
                        f(o_off, i_off, ky * geom.kw + kx);
                    }
                }
            }
        }
    }
}

/// Patch matrix `[T·Ho·Wo, kt·kh·kw·C]` for [`Graph::conv3d`].
fn im2col(x: &[f64], [t, h, w, c]: [usize; 4], geom: ConvGeom) -> Vec<f64> {
    let (ho, wo) = geom.out_hw(h, w);
    let patch = geom.kt * geom.kh * geom.kw * c;
    let mut cols = vec![0.0; t * ho * wo * patch];
    visit_patches(t, h, w, c, geom, |row_off, col_off, in_off| {
        cols[row_off + col_off..row_off + col_off + c].copy_from_slice(&x[in_off..in_off + c]);
    });
    cols
}

fn col2im(dcols: &[f64], [t, h, w, c]: [usize; 4], geom: ConvGeom, gx: &mut [f64]) {
    visit_patches(t, h, w, c, geom, |row_off, col_off, in_off| {
        axpy(
            &mut gx[in_off..in_off + c],
            &dcols[row_off + col_off..row_off + col_off + c],
            1.0,
        );
    });
}

fn visit_patches(
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    geom: ConvGeom,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (ho, wo) = geom.out_hw(h, w);
    let patch = geom.kt * geom.kh * geom.kw * c;
    let (pt, ph, pw) = (geom.kt / 2, geom.kh / 2, geom.kw / 2);
    for ot in 0..t {
        for oy in 0..ho {
            for ox in 0..wo {
                let row_off = ((ot * ho + oy) * wo + ox) * patch;
                for dt in 0..geom.kt {
                    let it = ot + dt;
                    if it < pt || it - pt >= t {
                        continue;
                    }
                    for ky in 0..geom.kh {
                        let iy = oy * geom.stride + ky;
                        if iy < ph || iy - ph >= h {
                            continue;
                        }
                        for kx in 0..geom.kw {
                            let ix = ox * geom.stride + kx;
                            if ix < pw || ix - pw >= w {
                                continue;
                            }
                            let col_off = ((dt * geom.kh + ky) * geom.kw + kx) * c;
                            let in_off = (((it - pt) * h + iy - ph) * w + ix - pw) * c;
                            f(row_off, col_off, in_off);
                        }
                    }
                }
            }
        }
    }
}
