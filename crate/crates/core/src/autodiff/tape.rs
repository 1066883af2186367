//! The recording tape: forward ops save what their backward pass needs,
//! `backward` walks the nodes once in reverse creation order.

use super::NnError;
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::collections::BTreeMap;

pub type NodeId = usize;

/// Gradients keyed by parameter name after a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_name: BTreeMap<String, ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.by_name.get(name)
    }
}

#[derive(Debug, Clone)]
struct MhaSaved {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax attention weights per (batch, head), each t x t.
    attn: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    concat: Array2<f64>,
    x2: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerNormSaved {
    /// Normalized rows (pre gamma/beta), flattened to rows x d.
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Silu(NodeId),
    MatMul(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        /// im2col buffer, kept only when the weights need gradients.
        cols: Option<Array2<f64>>,
    },
    UpsampleNearest2(NodeId),
    Mha {
        x: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        bq: NodeId,
        bk: NodeId,
        bv: NodeId,
        bo: NodeId,
        heads: usize,
        saved: Box<MhaSaved>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: Box<LayerNormSaved>,
    },
    Reshape(NodeId),
    SliceChannels {
        x: NodeId,
        lo: usize,
    },
    SliceFrames {
        x: NodeId,
        lo: usize,
    },
    TokenReadout {
        x: NodeId,
        index: usize,
    },
    AssembleTokens {
        wrist: NodeId,
        points: NodeId,
        types: NodeId,
    },
    MeanAll(NodeId),
    Mse(NodeId, NodeId),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Ordered record of operations with saved inputs for the backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    /// First non-finite value seen (debug builds scan every op output).
    poison: Option<String>,
}

fn shape_err(op: &'static str, details: String) -> NnError {
    NnError::ShapeMismatch { op, details }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// x: B x C x T -> (C*K) x (B*T_out), batch-major columns.
fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize, t_out: usize) -> Array2<f64> {
    let (b, c, t) = x.dim();
    let mut cols = Array2::zeros((c * k, b * t_out));
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                let row = ci * k + ki;
                for to in 0..t_out {
                    let ti = (to * stride + ki) as isize - pad as isize;
                    if ti >= 0 && (ti as usize) < t {
                        cols[(row, bi * t_out + to)] = x[(bi, ci, ti as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add transpose of [`im2col`].
fn col2im(
    cols: &Array2<f64>,
    b: usize,
    c: usize,
    t: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) -> Array3<f64> {
    let mut x = Array3::zeros((b, c, t));
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                let row = ci * k + ki;
                for to in 0..t_out {
                    let ti = (to * stride + ki) as isize - pad as isize;
                    if ti >= 0 && (ti as usize) < t {
                        x[(bi, ci, ti as usize)] += cols[(row, bi * t_out + to)];
                    }
                }
            }
        }
    }
    x
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
            poison: None,
        }
    }

    /// Set when any op produced a non-finite value (debug builds only scan
    /// eagerly; callers check this or the loss before trusting a step).
    pub fn poisoned(&self) -> Option<&str> {
        self.poison.as_deref()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        if cfg!(debug_assertions) && self.poison.is_none() && !value.iter().all(|v| v.is_finite())
        {
            self.poison = Some(format!(
                "non-finite value at node {} ({:?})",
                self.nodes.len(),
                std::mem::discriminant(&op)
            ));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        self.nodes.len() - 1
    }

    /// Named differentiable leaf.
    pub fn param(&mut self, name: &str, value: ArrayD<f64>) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id].param = Some(name.to_string());
        id
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        *self.nodes[id]
            .value
            .iter()
            .next()
            .expect("scalar node has one element")
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<(), NnError> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(shape_err(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape(a, b, "add")?;
        let v = &self.nodes[a].value + &self.nodes[b].value;
        Ok(self.push(v, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape(a, b, "sub")?;
        let v = &self.nodes[a].value - &self.nodes[b].value;
        Ok(self.push(v, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape(a, b, "mul")?;
        let v = &self.nodes[a].value * &self.nodes[b].value;
        Ok(self.push(v, Op::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| -x);
        let needs = self.nodes[a].needs_grad;
        self.push(v, Op::Neg(a), needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| c * x);
        let needs = self.nodes[a].needs_grad;
        self.push(v, Op::Scale(a, c), needs)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        let needs = self.nodes[a].needs_grad;
        self.push(v, Op::Tanh(a), needs)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * sigmoid(x));
        let needs = self.nodes[a].needs_grad;
        self.push(v, Op::Silu(a), needs)
    }

    /// 2-D matrix product, row-major convention.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let av = as_2d(&self.nodes[a].value, "matmul lhs")?;
        let bv = as_2d(&self.nodes[b].value, "matmul rhs")?;
        if av.ncols() != bv.nrows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.dim(), bv.dim()),
            ));
        }
        let v = av.dot(&bv).into_dyn();
        Ok(self.push(v, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    /// rows x d plus a d-vector added to every row.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let xv = as_2d(&self.nodes[x].value, "add_row_broadcast")?;
        let bv = as_1d(&self.nodes[bias].value, "add_row_broadcast bias")?;
        if xv.ncols() != bv.len() {
            return Err(shape_err(
                "add_row_broadcast",
                format!("{:?} + [{}]", xv.dim(), bv.len()),
            ));
        }
        let v = (&xv + &bv).into_dyn();
        Ok(self.push(v, Op::AddRowBroadcast(x, bias), self.needs(&[x, bias])))
    }

    /// Cross-correlation (no kernel flip) 1-D convolution.
    /// x: B x C_in x T, w: C_out x C_in x K, b: C_out.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, NnError> {
        let xv = as_3d(&self.nodes[x].value, "conv1d input")?;
        let wv = as_3d(&self.nodes[w].value, "conv1d weight")?;
        let bv = as_1d(&self.nodes[b].value, "conv1d bias")?;
        let (batch, c_in, t) = xv.dim();
        let (c_out, wc_in, k) = wv.dim();
        if wc_in != c_in || bv.len() != c_out {
            return Err(shape_err(
                "conv1d",
                format!("input {:?} weight {:?} bias [{}]", xv.dim(), wv.dim(), bv.len()),
            ));
        }
        if stride == 0 || t + 2 * pad < k {
            return Err(shape_err(
                "conv1d",
                format!("T={t} pad={pad} K={k} stride={stride}"),
            ));
        }
        let t_out = (t + 2 * pad - k) / stride + 1;
        let cols = im2col(&xv.to_owned(), k, stride, pad, t_out);
        let w2 = wv
            .to_owned()
            .into_shape_with_order((c_out, c_in * k))
            .expect("contiguous weight");
        let mut y2 = w2.dot(&cols);
        for (mut row, bias) in y2.rows_mut().into_iter().zip(bv.iter()) {
            row += *bias;
        }
        let mut y = Array3::zeros((batch, c_out, t_out));
        for bi in 0..batch {
            for co in 0..c_out {
                for to in 0..t_out {
                    y[(bi, co, to)] = y2[(co, bi * t_out + to)];
                }
            }
        }
        let save_cols = self.nodes[w].needs_grad;
        Ok(self.push(
            y.into_dyn(),
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols: save_cols.then_some(cols),
            },
            self.needs(&[x, w, b]),
        ))
    }

    /// Nearest-neighbor temporal upsampling by 2: B x C x T -> B x C x 2T.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xv = as_3d(&self.nodes[x].value, "upsample_nearest2")?;
        let (b, c, t) = xv.dim();
        let mut y = Array3::zeros((b, c, 2 * t));
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    y[(bi, ci, 2 * ti)] = xv[(bi, ci, ti)];
                    y[(bi, ci, 2 * ti + 1)] = xv[(bi, ci, ti)];
                }
            }
        }
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(y.into_dyn(), Op::UpsampleNearest2(x), needs))
    }

    /// Standard scaled dot-product multi-head self-attention with output
    /// projection. x: B x T x D; weights D x D; biases D.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &mut self,
        x: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        bq: NodeId,
        bk: NodeId,
        bv: NodeId,
        bo: NodeId,
        heads: usize,
    ) -> Result<NodeId, NnError> {
        let xv = as_3d(&self.nodes[x].value, "mha input")?;
        let (batch, t, d) = xv.dim();
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Config(format!(
                "embedding dim {d} not divisible by {heads} heads"
            )));
        }
        for (node, name) in [(wq, "wq"), (wk, "wk"), (wv, "wv"), (wo, "wo")] {
            let w = as_2d(&self.nodes[node].value, "mha weight")?;
            if w.dim() != (d, d) {
                return Err(shape_err("mha", format!("{name} is {:?}, want ({d},{d})", w.dim())));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x2 = xv
            .to_owned()
            .into_shape_with_order((batch * t, d))
            .expect("contiguous");
        let project = |tape: &Tape, w: NodeId, b: NodeId| -> Array2<f64> {
            let w2 = tape.nodes[w]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .expect("checked 2d");
            let b1 = tape.nodes[b]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("bias 1d");
            let mut y = x2.dot(&w2);
            y += &b1;
            y
        };
        let q = project(self, wq, bq);
        let k = project(self, wk, bk);
        let v = project(self, wv, bv);

        let mut attn = Vec::with_capacity(batch * heads);
        let mut concat = Array2::zeros((batch * t, d));
        for bi in 0..batch {
            let rows = bi * t..(bi + 1) * t;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(ndarray::s![rows.clone(), cols.clone()]);
                let kh = k.slice(ndarray::s![rows.clone(), cols.clone()]);
                let vh = v.slice(ndarray::s![rows.clone(), cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * scale);
                softmax_rows_inplace(&mut scores);
                let out = scores.dot(&vh);
                concat
                    .slice_mut(ndarray::s![rows.clone(), cols.clone()])
                    .assign(&out);
                attn.push(scores);
            }
        }
        let wo2 = self.nodes[wo]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("checked 2d");
        let bo1 = self.nodes[bo]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias 1d");
        let mut y2 = concat.dot(&wo2);
        y2 += &bo1;
        let y = y2
            .into_shape_with_order((batch, t, d))
            .expect("contiguous")
            .into_dyn();
        let needs = self.needs(&[x, wq, wk, wv, wo, bq, bk, bv, bo]);
        Ok(self.push(
            y,
            Op::Mha {
                x,
                wq,
                wk,
                wv,
                wo,
                bq,
                bk,
                bv,
                bo,
                heads,
                saved: Box::new(MhaSaved {
                    q,
                    k,
                    v,
                    attn,
                    concat,
                    x2,
                }),
            },
            needs,
        ))
    }

    /// Normalizes the last axis; gamma/beta are d-vectors.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, NnError> {
        let shape = self.nodes[x].value.shape().to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        let rows: usize = shape.iter().take(shape.len() - 1).product();
        let gv = as_1d(&self.nodes[gamma].value, "layer_norm gamma")?;
        let bv = as_1d(&self.nodes[beta].value, "layer_norm beta")?;
        if gv.len() != d || bv.len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("d={d} gamma={} beta={}", gv.len(), bv.len()),
            ));
        }
        let flat = self.nodes[x]
            .value
            .to_owned()
            .into_shape_with_order((rows, d))
            .expect("contiguous");
        let mut xhat = Array2::zeros((rows, d));
        let mut rstd = Vec::with_capacity(rows);
        let mut y = Array2::zeros((rows, d));
        for r in 0..rows {
            let row = flat.row(r);
            let mean = row.mean().expect("nonempty row");
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let xn = (flat[(r, c)] - mean) * rs;
                xhat[(r, c)] = xn;
                y[(r, c)] = gv[c] * xn + bv[c];
            }
        }
        let y = y
            .into_shape_with_order(IxDyn(&shape))
            .expect("same element count");
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved: Box::new(LayerNormSaved { xhat, rstd }),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        let v = self.nodes[x]
            .value
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|_| {
                shape_err(
                    "reshape",
                    format!("{:?} -> {:?}", self.nodes[x].value.shape(), shape),
                )
            })?;
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(v, Op::Reshape(x), needs))
    }

    /// B x C x T -> B x (hi-lo) x T.
    pub fn slice_channels(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId, NnError> {
        let xv = as_3d(&self.nodes[x].value, "slice_channels")?;
        let (_, c, _) = xv.dim();
        if lo >= hi || hi > c {
            return Err(shape_err("slice_channels", format!("{lo}..{hi} of {c}")));
        }
        let v = xv.slice(ndarray::s![.., lo..hi, ..]).to_owned().into_dyn();
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(v, Op::SliceChannels { x, lo }, needs))
    }

    /// B x C x T -> B x C x (hi-lo).
    pub fn slice_frames(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId, NnError> {
        let xv = as_3d(&self.nodes[x].value, "slice_frames")?;
        let (_, _, t) = xv.dim();
        if lo >= hi || hi > t {
            return Err(shape_err("slice_frames", format!("{lo}..{hi} of {t}")));
        }
        let v = xv.slice(ndarray::s![.., .., lo..hi]).to_owned().into_dyn();
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(v, Op::SliceFrames { x, lo }, needs))
    }

    /// Extracts one token: B x T x D -> B x D.
    pub fn token_readout(&mut self, x: NodeId, index: usize) -> Result<NodeId, NnError> {
        let xv = as_3d(&self.nodes[x].value, "token_readout")?;
        let (_, t, _) = xv.dim();
        if index >= t {
            return Err(shape_err("token_readout", format!("token {index} of {t}")));
        }
        let v = xv.slice(ndarray::s![.., index, ..]).to_owned().into_dyn();
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(v, Op::TokenReadout { x, index }, needs))
    }

    /// Builds per-frame token matrices for the hand regressor.
    /// wrist: B x D, points: (B*P) x D, types: (P+2) x D.
    /// Output token b,i: wrist+types[0] (i=0), points[b*P+i-1]+types[i]
    /// (i=1..=P), types[P+1] alone as the readout slot (i=P+1).
    pub fn assemble_tokens(
        &mut self,
        wrist: NodeId,
        points: NodeId,
        types: NodeId,
    ) -> Result<NodeId, NnError> {
        let wv = as_2d(&self.nodes[wrist].value, "assemble_tokens wrist")?;
        let pv = as_2d(&self.nodes[points].value, "assemble_tokens points")?;
        let tv = as_2d(&self.nodes[types].value, "assemble_tokens types")?;
        let (b, d) = wv.dim();
        let t_tok = tv.nrows();
        if t_tok < 3 || tv.ncols() != d || pv.ncols() != d {
            return Err(shape_err(
                "assemble_tokens",
                format!("wrist {:?} points {:?} types {:?}", wv.dim(), pv.dim(), tv.dim()),
            ));
        }
        let p = t_tok - 2;
        if pv.nrows() != b * p {
            return Err(shape_err(
                "assemble_tokens",
                format!("points rows {} != batch {b} * {p}", pv.nrows()),
            ));
        }
        let mut y = Array3::zeros((b, t_tok, d));
        for bi in 0..b {
            for c in 0..d {
                y[(bi, 0, c)] = wv[(bi, c)] + tv[(0, c)];
                for i in 0..p {
                    y[(bi, 1 + i, c)] = pv[(bi * p + i, c)] + tv[(1 + i, c)];
                }
                y[(bi, t_tok - 1, c)] = tv[(t_tok - 1, c)];
            }
        }
        let needs = self.needs(&[wrist, points, types]);
        Ok(self.push(y.into_dyn(), Op::AssembleTokens { wrist, points, types }, needs))
    }

    /// Mean over all elements, scalar output.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len() as f64;
        let v = ndarray::arr0(self.nodes[x].value.sum() / n).into_dyn();
        let needs = self.nodes[x].needs_grad;
        self.push(v, Op::MeanAll(x), needs)
    }

    /// Mean squared error over all elements, scalar output.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape(a, b, "mse")?;
        let diff = &self.nodes[a].value - &self.nodes[b].value;
        let n = diff.len() as f64;
        let v = ndarray::arr0(diff.iter().map(|d| d * d).sum::<f64>() / n).into_dyn();
        Ok(self.push(v, Op::Mse(a, b), self.needs(&[a, b])))
    }

    /// Populates gradients for every named parameter reachable from `loss`.
    /// d(loss)/d(loss) = 1; fails if called twice or on a non-scalar.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, NnError> {
        if self.backward_done {
            return Err(NnError::State("backward already ran on this tape"));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss has shape {:?}", self.nodes[loss].value.shape()),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(ArrayD::ones(self.nodes[loss].value.raw_dim()));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.accumulate_inputs(id, &gy, &mut grads)?;
            grads[id] = Some(gy);
        }

        let mut out = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                if let Some(g) = grads[id].take() {
                    out.by_name.insert(name.clone(), g);
                } else {
                    out.by_name
                        .insert(name.clone(), ArrayD::zeros(node.value.raw_dim()));
                }
            }
        }
        Ok(out)
    }

    fn add_grad(
        grads: &mut [Option<ArrayD<f64>>],
        id: NodeId,
        delta: ArrayD<f64>,
        nodes: &[Node],
    ) {
        if !nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_inputs(
        &self,
        id: NodeId,
        gy: &ArrayD<f64>,
        grads: &mut Vec<Option<ArrayD<f64>>>,
    ) -> Result<(), NnError> {
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::add_grad(grads, *a, gy.clone(), nodes);
                Self::add_grad(grads, *b, gy.clone(), nodes);
            }
            Op::Sub(a, b) => {
                Self::add_grad(grads, *a, gy.clone(), nodes);
                Self::add_grad(grads, *b, gy.mapv(|v| -v), nodes);
            }
            Op::Mul(a, b) => {
                Self::add_grad(grads, *a, gy * &nodes[*b].value, nodes);
                Self::add_grad(grads, *b, gy * &nodes[*a].value, nodes);
            }
            Op::Neg(a) => Self::add_grad(grads, *a, gy.mapv(|v| -v), nodes),
            Op::Scale(a, c) => Self::add_grad(grads, *a, gy.mapv(|v| c * v), nodes),
            Op::Tanh(a) => {
                let y = &nodes[id].value;
                Self::add_grad(grads, *a, gy * &y.mapv(|t| 1.0 - t * t), nodes);
            }
            Op::Silu(a) => {
                let x = &nodes[*a].value;
                let dx = x.mapv(|v| {
                    let s = sigmoid(v);
                    s + v * s * (1.0 - s)
                });
                Self::add_grad(grads, *a, gy * &dx, nodes);
            }
            Op::MatMul(a, b) => {
                let gy2 = gy.view().into_dimensionality::<Ix2>().expect("matmul grad 2d");
                let av = nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                if nodes[*a].needs_grad {
                    Self::add_grad(grads, *a, gy2.dot(&bv.t()).into_dyn(), nodes);
                }
                if nodes[*b].needs_grad {
                    Self::add_grad(grads, *b, av.t().dot(&gy2).into_dyn(), nodes);
                }
            }
            Op::AddRowBroadcast(x, bias) => {
                let gy2 = gy.view().into_dimensionality::<Ix2>().expect("2d grad");
                Self::add_grad(grads, *x, gy.clone(), nodes);
                Self::add_grad(grads, *bias, gy2.sum_axis(Axis(0)).into_dyn(), nodes);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let gy3 = gy.view().into_dimensionality::<Ix3>().expect("conv grad 3d");
                let (batch, c_out, t_out) = gy3.dim();
                let wv = nodes[*w].value.view().into_dimensionality::<Ix3>().unwrap();
                let (_, c_in, k) = wv.dim();
                let xv = nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let t = xv.dim().2;
                // gy as C_out x (B*T_out), batch-major columns.
                let mut gy2 = Array2::zeros((c_out, batch * t_out));
                for bi in 0..batch {
                    for co in 0..c_out {
                        for to in 0..t_out {
                            gy2[(co, bi * t_out + to)] = gy3[(bi, co, to)];
                        }
                    }
                }
                if nodes[*b].needs_grad {
                    Self::add_grad(grads, *b, gy2.sum_axis(Axis(1)).into_dyn(), nodes);
                }
                if nodes[*w].needs_grad {
                    let cols = cols.as_ref().expect("cols saved when weight needs grad");
                    let gw2 = gy2.dot(&cols.t());
                    let gw = gw2
                        .into_shape_with_order((c_out, c_in, k))
                        .expect("contiguous")
                        .into_dyn();
                    Self::add_grad(grads, *w, gw, nodes);
                }
                if nodes[*x].needs_grad {
                    let w2 = wv
                        .to_owned()
                        .into_shape_with_order((c_out, c_in * k))
                        .expect("contiguous");
                    let gcols = w2.t().dot(&gy2);
                    let gx = col2im(&gcols, batch, c_in, t, k, *stride, *pad, t_out);
                    Self::add_grad(grads, *x, gx.into_dyn(), nodes);
                }
            }
            Op::UpsampleNearest2(x) => {
                let gy3 = gy.view().into_dimensionality::<Ix3>().expect("3d grad");
                let (b, c, t2) = gy3.dim();
                let t = t2 / 2;
                let mut gx = Array3::zeros((b, c, t));
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in 0..t {
                            gx[(bi, ci, ti)] = gy3[(bi, ci, 2 * ti)] + gy3[(bi, ci, 2 * ti + 1)];
                        }
                    }
                }
                Self::add_grad(grads, *x, gx.into_dyn(), nodes);
            }
            Op::Mha {
                x,
                wq,
                wk,
                wv: wv_id,
                wo,
                bq,
                bk,
                bv: bv_id,
                bo,
                heads,
                saved,
            } => {
                let gy3 = gy.view().into_dimensionality::<Ix3>().expect("3d grad");
                let (batch, t, d) = gy3.dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let gy2 = gy3
                    .to_owned()
                    .into_shape_with_order((batch * t, d))
                    .expect("contiguous");
                let wo2 = nodes[*wo].value.view().into_dimensionality::<Ix2>().unwrap();

                if nodes[*wo].needs_grad {
                    Self::add_grad(grads, *wo, saved.concat.t().dot(&gy2).into_dyn(), nodes);
                }
                if nodes[*bo].needs_grad {
                    Self::add_grad(grads, *bo, gy2.sum_axis(Axis(0)).into_dyn(), nodes);
                }
                let gconcat = gy2.dot(&wo2.t());

                let mut gq = Array2::zeros((batch * t, d));
                let mut gk = Array2::zeros((batch * t, d));
                let mut gv = Array2::zeros((batch * t, d));
                for bi in 0..batch {
                    let rows = bi * t..(bi + 1) * t;
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let a = &saved.attn[bi * heads + h];
                        let qh = saved.q.slice(ndarray::s![rows.clone(), cols.clone()]);
                        let kh = saved.k.slice(ndarray::s![rows.clone(), cols.clone()]);
                        let vh = saved.v.slice(ndarray::s![rows.clone(), cols.clone()]);
                        let gout = gconcat.slice(ndarray::s![rows.clone(), cols.clone()]);
                        // Through the value mix.
                        let ga = gout.dot(&vh.t());
                        gv.slice_mut(ndarray::s![rows.clone(), cols.clone()])
                            .scaled_add(1.0, &a.t().dot(&gout));
                        // Softmax backward per row.
                        let mut gs = Array2::zeros(a.raw_dim());
                        for r in 0..t {
                            let dot: f64 =
                                (0..t).map(|c| ga[(r, c)] * a[(r, c)]).sum();
                            for c in 0..t {
                                gs[(r, c)] = a[(r, c)] * (ga[(r, c)] - dot);
                            }
                        }
                        gs.mapv_inplace(|v| v * scale);
                        gq.slice_mut(ndarray::s![rows.clone(), cols.clone()])
                            .scaled_add(1.0, &gs.dot(&kh));
                        gk.slice_mut(ndarray::s![rows.clone(), cols.clone()])
                            .scaled_add(1.0, &gs.t().dot(&qh));
                    }
                }

                let mut gx2: Option<Array2<f64>> = if nodes[*x].needs_grad {
                    Some(Array2::zeros((batch * t, d)))
                } else {
                    None
                };
                for (g_proj, w_id, b_id) in
                    [(&gq, *wq, *bq), (&gk, *wk, *bk), (&gv, *wv_id, *bv_id)]
                {
                    let w2 = nodes[w_id].value.view().into_dimensionality::<Ix2>().unwrap();
                    if nodes[w_id].needs_grad {
                        Self::add_grad(grads, w_id, saved.x2.t().dot(g_proj).into_dyn(), nodes);
                    }
                    if nodes[b_id].needs_grad {
                        Self::add_grad(grads, b_id, g_proj.sum_axis(Axis(0)).into_dyn(), nodes);
                    }
                    if let Some(gx) = gx2.as_mut() {
                        gx.scaled_add(1.0, &g_proj.dot(&w2.t()));
                    }
                }
                if let Some(gx) = gx2 {
                    let gx3 = gx
                        .into_shape_with_order((batch, t, d))
                        .expect("contiguous")
                        .into_dyn();
                    Self::add_grad(grads, *x, gx3, nodes);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let shape = nodes[*x].value.shape().to_vec();
                let d = *shape.last().unwrap();
                let rows: usize = shape.iter().take(shape.len() - 1).product();
                let gy2 = gy
                    .to_owned()
                    .into_shape_with_order((rows, d))
                    .expect("contiguous");
                let gv = nodes[*gamma].value.view().into_dimensionality::<Ix1>().unwrap();
                if nodes[*gamma].needs_grad {
                    let mut gg = Array1::zeros(d);
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += gy2[(r, c)] * saved.xhat[(r, c)];
                        }
                    }
                    Self::add_grad(grads, *gamma, gg.into_dyn(), nodes);
                }
                if nodes[*beta].needs_grad {
                    Self::add_grad(grads, *beta, gy2.sum_axis(Axis(0)).into_dyn(), nodes);
                }
                if nodes[*x].needs_grad {
                    let mut gx = Array2::zeros((rows, d));
                    for r in 0..rows {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..d {
                            let dxhat = gy2[(r, c)] * gv[c];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * saved.xhat[(r, c)];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for c in 0..d {
                            let dxhat = gy2[(r, c)] * gv[c];
                            gx[(r, c)] = saved.rstd[r]
                                * (dxhat - mean_dxhat - saved.xhat[(r, c)] * mean_dxhat_xhat);
                        }
                    }
                    let gx = gx
                        .into_shape_with_order(IxDyn(&shape))
                        .expect("same element count");
                    Self::add_grad(grads, *x, gx, nodes);
                }
            }
            Op::Reshape(x) => {
                let gx = gy
                    .to_owned()
                    .into_shape_with_order(nodes[*x].value.raw_dim())
                    .expect("same element count");
                Self::add_grad(grads, *x, gx, nodes);
            }
            Op::SliceChannels { x, lo } => {
                let gy3 = gy.view().into_dimensionality::<Ix3>().expect("3d grad");
                let mut gx = Array3::zeros(
                    nodes[*x]
                        .value
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .dim(),
                );
                gx.slice_mut(ndarray::s![.., *lo..*lo + gy3.dim().1, ..])
                    .assign(&gy3);
                Self::add_grad(grads, *x, gx.into_dyn(), nodes);
            }
            Op::SliceFrames { x, lo } => {
                let gy3 = gy.view().into_dimensionality::<Ix3>().expect("3d grad");
                let mut gx = Array3::zeros(
                    nodes[*x]
                        .value
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .dim(),
                );
                gx.slice_mut(ndarray::s![.., .., *lo..*lo + gy3.dim().2])
                    .assign(&gy3);
                Self::add_grad(grads, *x, gx.into_dyn(), nodes);
            }
            Op::TokenReadout { x, index } => {
                let gy2 = gy.view().into_dimensionality::<Ix2>().expect("2d grad");
                let mut gx = Array3::zeros(
                    nodes[*x]
                        .value
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .dim(),
                );
                gx.slice_mut(ndarray::s![.., *index, ..]).assign(&gy2);
                Self::add_grad(grads, *x, gx.into_dyn(), nodes);
            }
            Op::AssembleTokens { wrist, points, types } => {
                let gy3 = gy.view().into_dimensionality::<Ix3>().expect("3d grad");
                let (b, t_tok, d) = gy3.dim();
                let p = t_tok - 2;
                if nodes[*wrist].needs_grad {
                    let gw = gy3.slice(ndarray::s![.., 0, ..]).to_owned();
                    Self::add_grad(grads, *wrist, gw.into_dyn(), nodes);
                }
                if nodes[*points].needs_grad {
                    let mut gp = Array2::zeros((b * p, d));
                    for bi in 0..b {
                        for i in 0..p {
                            for c in 0..d {
                                gp[(bi * p + i, c)] = gy3[(bi, 1 + i, c)];
                            }
                        }
                    }
                    Self::add_grad(grads, *points, gp.into_dyn(), nodes);
                }
                if nodes[*types].needs_grad {
                    let mut gt = Array2::zeros((t_tok, d));
                    for bi in 0..b {
                        for i in 0..t_tok {
                            for c in 0..d {
                                gt[(i, c)] += gy3[(bi, i, c)];
                            }
                        }
                    }
                    Self::add_grad(grads, *types, gt.into_dyn(), nodes);
                }
            }
            Op::MeanAll(x) => {
                let g = gy.iter().next().expect("scalar");
                let n = nodes[*x].value.len() as f64;
                let gx = ArrayD::from_elem(nodes[*x].value.raw_dim(), g / n);
                Self::add_grad(grads, *x, gx, nodes);
            }
            Op::Mse(a, b) => {
                let g = *gy.iter().next().expect("scalar");
                let n = nodes[*a].value.len() as f64;
                let diff = &nodes[*a].value - &nodes[*b].value;
                if nodes[*a].needs_grad {
                    Self::add_grad(grads, *a, diff.mapv(|d| g * 2.0 * d / n), nodes);
                }
                if nodes[*b].needs_grad {
                    Self::add_grad(grads, *b, diff.mapv(|d| -g * 2.0 * d / n), nodes);
                }
            }
        }
        Ok(())
    }
}

fn as_1d<'a>(v: &'a ArrayD<f64>, what: &'static str) -> Result<ndarray::ArrayView1<'a, f64>, NnError> {
    v.view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| shape_err("rank", format!("{what}: expected 1-d, got {:?}", v.shape())))
}

fn as_2d<'a>(v: &'a ArrayD<f64>, what: &'static str) -> Result<ndarray::ArrayView2<'a, f64>, NnError> {
    v.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| shape_err("rank", format!("{what}: expected 2-d, got {:?}", v.shape())))
}

fn as_3d<'a>(v: &'a ArrayD<f64>, what: &'static str) -> Result<ndarray::ArrayView3<'a, f64>, NnError> {
    v.view()
        .into_dimensionality::<Ix3>()
        .map_err(|_| shape_err("rank", format!("{what}: expected 3-d, got {:?}", v.shape())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array3};

    #[test]
    fn square_gradient_is_two_x() {
        // f(x) = x^2 at x = 3 via mul.
        let mut tape = Tape::new();
        let x = tape.param("x", ndarray::arr0(3.0).into_dyn());
        let y = tape.mul(x, x).unwrap();
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_abs_diff_eq!(grads.get("x").unwrap()[[]], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_twice_is_a_state_error() {
        let mut tape = Tape::new();
        let x = tape.param("x", ndarray::arr0(1.0).into_dyn());
        let loss = tape.mean_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(NnError::State(_))));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param("x", arr1(&[1.0, 2.0]).into_dyn());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn conv1d_hand_example() {
        // input [1,2,3,4], kernel [1,1,1], stride 1, pad 1 -> [3,6,9,7].
        let mut tape = Tape::new();
        let x = tape.constant(
            Array3::from_shape_vec((1, 1, 4), vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .into_dyn(),
        );
        let w = tape.constant(Array3::from_elem((1, 1, 3), 1.0).into_dyn());
        let b = tape.constant(arr1(&[0.0]).into_dyn());
        let y = tape.conv1d(x, w, b, 1, 1).unwrap();
        let v = tape.value(y);
        let expect = [3.0, 6.0, 9.0, 7.0];
        for (i, e) in expect.iter().enumerate() {
            assert_abs_diff_eq!(v[[0, 0, i]], *e, epsilon = 1e-12);
        }
    }

    #[test]
    fn conv1d_zero_kernel_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Array3::from_shape_vec((1, 1, 4), vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .into_dyn(),
        );
        let w = tape.constant(Array3::zeros((2, 1, 3)).into_dyn());
        let b = tape.constant(arr1(&[0.5, -1.0]).into_dyn());
        let y = tape.conv1d(x, w, b, 1, 1).unwrap();
        for c in 0..2 {
            for t in 0..4 {
                assert_abs_diff_eq!(
                    tape.value(y)[[0, c, t]],
                    if c == 0 { 0.5 } else { -1.0 },
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn conv1d_output_length_formula() {
        // stride 2, T=32, K=7, pad 3 -> T'=16.
        let mut tape = Tape::new();
        let x = tape.constant(Array3::zeros((1, 4, 32)).into_dyn());
        let w = tape.constant(Array3::zeros((8, 4, 7)).into_dyn());
        let b = tape.constant(Array1::zeros(8).into_dyn());
        let y = tape.conv1d(x, w, b, 2, 3).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8, 16]);
    }

    #[test]
    fn conv1d_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Array3::zeros((1, 3, 8)).into_dyn());
        let w = tape.constant(Array3::zeros((4, 2, 3)).into_dyn());
        let b = tape.constant(Array1::zeros(4).into_dyn());
        assert!(tape.conv1d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn mha_single_token_is_value_projection() {
        // With one token the softmax weight is 1, so the output is just the
        // value projection pushed through the output projection.
        let mut tape = Tape::new();
        let d = 4;
        let x = tape.constant(
            Array3::from_shape_vec((1, 1, d), vec![0.3, -0.1, 0.7, 0.2])
                .unwrap()
                .into_dyn(),
        );
        let eye = ndarray::Array2::eye(d).into_dyn();
        let zero_b = Array1::zeros(d).into_dyn();
        let wq = tape.constant(eye.clone());
        let wk = tape.constant(eye.clone());
        let wv = tape.constant(eye.clone());
        let wo = tape.constant(eye);
        let bq = tape.constant(zero_b.clone());
        let bk = tape.constant(zero_b.clone());
        let bv = tape.constant(zero_b.clone());
        let bo = tape.constant(zero_b);
        let y = tape
            .multi_head_attention(x, wq, wk, wv, wo, bq, bk, bv, bo, 2)
            .unwrap();
        for (a, b) in tape.value(y).iter().zip([0.3, -0.1, 0.7, 0.2]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn mha_identical_tokens_give_identical_outputs() {
        let mut tape = Tape::new();
        let d = 8;
        let token: Vec<f64> = (0..d).map(|i| 0.1 * i as f64 - 0.3).collect();
        let mut x = Array3::zeros((1, 2, d));
        for t in 0..2 {
            for c in 0..d {
                x[(0, t, c)] = token[c];
            }
        }
        let x = tape.constant(x.into_dyn());
        let mut rng_state = 12345u64;
        let mut next = || {
            // Tiny xorshift; weights just need to be non-trivial.
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state % 1000) as f64 / 1000.0 - 0.5
        };
        let mut w = ndarray::Array2::zeros((d, d));
        w.mapv_inplace(|_| next());
        let wq = tape.constant(w.clone().into_dyn());
        let wk = tape.constant(w.clone().into_dyn());
        let wv = tape.constant(w.clone().into_dyn());
        let wo = tape.constant(w.into_dyn());
        let b = tape.constant(Array1::zeros(d).into_dyn());
        let y = tape
            .multi_head_attention(x, wq, wk, wv, wo, b, b, b, b, 4)
            .unwrap();
        for c in 0..d {
            assert_abs_diff_eq!(
                tape.value(y)[[0, 0, c]],
                tape.value(y)[[0, 1, c]],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn mha_rejects_bad_head_count() {
        let mut tape = Tape::new();
        let x = tape.constant(Array3::zeros((1, 2, 6)).into_dyn());
        let w = tape.constant(ndarray::Array2::eye(6).into_dyn());
        let b = tape.constant(Array1::zeros(6).into_dyn());
        assert!(matches!(
            tape.multi_head_attention(x, w, w, w, w, b, b, b, b, 4),
            Err(NnError::Config(_))
        ));
    }

    #[test]
    fn mha_matches_scalar_reference() {
        // 2 tokens, d=2, 1 head: spelled-out scalar computation.
        let x_raw = arr2(&[[1.0, 2.0], [0.5, -1.0]]);
        let wq_raw = arr2(&[[0.2, -0.1], [0.4, 0.3]]);
        let wk_raw = arr2(&[[-0.3, 0.5], [0.1, 0.2]]);
        let wv_raw = arr2(&[[0.7, 0.0], [-0.2, 0.6]]);
        let wo_raw = arr2(&[[1.0, 0.1], [0.0, -1.0]]);

        let q = x_raw.dot(&wq_raw);
        let k = x_raw.dot(&wk_raw);
        let v = x_raw.dot(&wv_raw);
        let scale = 1.0 / (2.0f64).sqrt();
        let mut expected = Array2::zeros((2, 2));
        for i in 0..2 {
            let mut scores = [0.0, 0.0];
            for j in 0..2 {
                scores[j] = (q[(i, 0)] * k[(j, 0)] + q[(i, 1)] * k[(j, 1)]) * scale;
            }
            let m = scores[0].max(scores[1]);
            let e = [(scores[0] - m).exp(), (scores[1] - m).exp()];
            let sum = e[0] + e[1];
            let a = [e[0] / sum, e[1] / sum];
            let out = [
                a[0] * v[(0, 0)] + a[1] * v[(1, 0)],
                a[0] * v[(0, 1)] + a[1] * v[(1, 1)],
            ];
            expected[(i, 0)] = out[0] * wo_raw[(0, 0)] + out[1] * wo_raw[(1, 0)];
            expected[(i, 1)] = out[0] * wo_raw[(0, 1)] + out[1] * wo_raw[(1, 1)];
        }

        let mut tape = Tape::new();
        let x = tape.constant(
            x_raw
                .clone()
                .into_shape_with_order((1, 2, 2))
                .unwrap()
                .into_dyn(),
        );
        let wq = tape.constant(wq_raw.into_dyn());
        let wk = tape.constant(wk_raw.into_dyn());
        let wv = tape.constant(wv_raw.into_dyn());
        let wo = tape.constant(wo_raw.into_dyn());
        let b = tape.constant(Array1::zeros(2).into_dyn());
        let y = tape
            .multi_head_attention(x, wq, wk, wv, wo, b, b, b, b, 1)
            .unwrap();
        for i in 0..2 {
            for c in 0..2 {
                assert_abs_diff_eq!(
                    tape.value(y)[[0, i, c]],
                    expected[(i, c)],
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut a = arr2(&[[1.0, 2.0, 3.0], [-0.5, 0.0, 0.5]]);
        let mut b = a.mapv(|v| v + 100.0);
        softmax_rows_inplace(&mut a);
        softmax_rows_inplace(&mut b);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn slices_tile_the_input() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Array3::from_shape_fn((2, 5, 3), |(b, c, t)| (b * 100 + c * 10 + t) as f64)
                .into_dyn(),
        );
        let lo = tape.slice_channels(x, 0, 2).unwrap();
        let hi = tape.slice_channels(x, 2, 5).unwrap();
        assert_eq!(tape.value(lo).shape(), &[2, 2, 3]);
        assert_eq!(tape.value(hi).shape(), &[2, 3, 3]);
        assert!(tape.slice_channels(x, 3, 3).is_err());
        assert!(tape.slice_channels(x, 0, 6).is_err());
    }
}
