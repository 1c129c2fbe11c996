//! Reverse-mode differentiation over matrix-valued operations.
//!
//! A [`GradTape`] records each primitive as it executes, keeping every
//! intermediate value in an arena. [`GradTape::backward`] replays the
//! records once in reverse, accumulating vector-Jacobian products into
//! per-slot gradient buffers. Loop order is fixed everywhere, so two
//! recordings of the same computation produce bit-identical gradients.
//!
//! A tape is confined to one thread; values read out of it are plain
//! [`Matrix`] copies and may be shared freely.

use super::matrix::{matmul_accum, softmax_rows, Matrix};
use super::NumError;

/// Handle to a value slot on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// C = A · B
    Matmul { a: ValueId, b: ValueId },
    /// Per block of `block` rows: C_i = A_i · B_i^T
    BlockMatmulNT { a: ValueId, b: ValueId, block: usize },
    /// Per block of `block` rows: C_i = A_i · B_i
    BlockMatmulNN { a: ValueId, b: ValueId, block: usize },
    Transpose { a: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    /// Elementwise product.
    Mul { a: ValueId, b: ValueId },
    Scale { a: ValueId, k: f64 },
    /// k − A, elementwise.
    ConstSub { a: ValueId, k: f64 },
    /// A + bias broadcast over rows (bias is 1×cols).
    AddRowBroadcast { a: ValueId, bias: ValueId },
    Relu { a: ValueId },
    Sigmoid { a: ValueId },
    Ln { a: ValueId },
    Clamp { a: ValueId, lo: f64, hi: f64 },
    SoftmaxRows { a: ValueId },
    /// Row-wise layer norm; gain and bias are 1×cols.
    LayerNormRows { x: ValueId, gain: ValueId, bias: ValueId, eps: f64 },
    /// out[i·T + f] = inputs[f].row(i); T = inputs.len().
    RowInterleave { inputs: Vec<ValueId> },
    ConcatCols { inputs: Vec<ValueId> },
    Reshape { a: ValueId },
    /// 1×1 sum of all entries.
    SumAll { a: ValueId },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded computation: an arena of values plus the ordered operations
/// that produced them.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input value (parameter or constant). Leaves receive
    /// gradients but contribute no backward work of their own.
    pub fn leaf(&mut self, value: Matrix) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Convenience for 1×1 results.
    pub fn scalar(&self, id: ValueId) -> f64 {
        let m = self.value(id);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn shape(&self, id: ValueId) -> (usize, usize) {
        self.value(id).shape()
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    /// Blockwise `A_i · B_i^T` where both operands are stacks of
    /// `block`-row blocks with equal widths. Result blocks are block×block.
    pub fn block_matmul_nt(
        &mut self,
        a: ValueId,
        b: ValueId,
        block: usize,
    ) -> Result<ValueId, NumError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br || ac != bc || block == 0 || ar % block != 0 {
            return Err(NumError::DimMismatch {
                op: "block_matmul_nt",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let nblocks = ar / block;
        let mut out = Matrix::zeros(ar, block);
        for i in 0..nblocks {
            for r in 0..block {
                let arow = self.value(a).row(i * block + r);
                for c in 0..block {
                    let brow = self.value(b).row(i * block + c);
                    let mut acc = 0.0;
                    for t in 0..ac {
                        acc += arow[t] * brow[t];
                    }
                    out.set(i * block + r, c, acc);
                }
            }
        }
        Ok(self.push(out, Op::BlockMatmulNT { a, b, block }))
    }

    /// Blockwise `A_i · B_i` where A blocks are block×block and B blocks
    /// are block×cols(B).
    pub fn block_matmul_nn(
        &mut self,
        a: ValueId,
        b: ValueId,
        block: usize,
    ) -> Result<ValueId, NumError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != block || ar != br || block == 0 || ar % block != 0 {
            return Err(NumError::DimMismatch {
                op: "block_matmul_nn",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let nblocks = ar / block;
        let mut out = Matrix::zeros(ar, bc);
        for i in 0..nblocks {
            for r in 0..block {
                let arow = self.value(a).row(i * block + r);
                for (t, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = self.value(b).row(i * block + t);
                    let orow = out.row_mut(i * block + r);
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        Ok(self.push(out, Op::BlockMatmulNN { a, b, block }))
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose { a })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumError> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumError> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumError> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: ValueId, k: f64) -> ValueId {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale { a, k })
    }

    pub fn const_sub(&mut self, k: f64, a: ValueId) -> ValueId {
        let value = self.value(a).map(|v| k - v);
        self.push(value, Op::ConstSub { a, k })
    }

    pub fn add_row_broadcast(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId, NumError> {
        let (_, ac) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != ac {
            return Err(NumError::DimMismatch {
                op: "add_row_broadcast",
                lhs: self.shape(a),
                rhs: (br, bc),
            });
        }
        let mut value = self.value(a).clone();
        let bias_row = self.value(bias).row(0).to_vec();
        for r in 0..value.rows() {
            for (v, &b) in value.row_mut(r).iter_mut().zip(&bias_row) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRowBroadcast { a, bias }))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).map(stable_sigmoid);
        self.push(value, Op::Sigmoid { a })
    }

    pub fn ln(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln { a })
    }

    pub fn clamp(&mut self, a: ValueId, lo: f64, hi: f64) -> ValueId {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { a, lo, hi })
    }

    pub fn softmax_rows(&mut self, a: ValueId) -> ValueId {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows { a })
    }

    /// Normalizes each row of `x` over its columns, then applies the
    /// broadcast affine `gain ⊙ x̂ + bias` (gain, bias are 1×cols).
    pub fn layer_norm_rows(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    ) -> Result<ValueId, NumError> {
        let (_, xc) = self.shape(x);
        for &v in &[gain, bias] {
            let s = self.shape(v);
            if s != (1, xc) {
                return Err(NumError::DimMismatch {
                    op: "layer_norm_rows",
                    lhs: self.shape(x),
                    rhs: s,
                });
            }
        }
        let xm = self.value(x);
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut out = Matrix::zeros(xm.rows(), xm.cols());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let normed = super::matrix::layer_norm(row, &g, &b, eps);
            out.row_mut(r).copy_from_slice(&normed);
        }
        Ok(self.push(out, Op::LayerNormRows { x, gain, bias, eps }))
    }

    /// Interleaves T equally shaped n×d inputs into an (n·T)×d matrix
    /// whose row i·T+f is row i of input f. Used to lay out per-feature
    /// token embeddings instance-major.
    pub fn row_interleave(&mut self, inputs: &[ValueId]) -> Result<ValueId, NumError> {
        let t = inputs.len();
        if t == 0 {
            return Err(NumError::EmptyInput { op: "row_interleave" });
        }
        let (n, d) = self.shape(inputs[0]);
        for &id in inputs {
            if self.shape(id) != (n, d) {
                return Err(NumError::DimMismatch {
                    op: "row_interleave",
                    lhs: (n, d),
                    rhs: self.shape(id),
                });
            }
        }
        let mut out = Matrix::zeros(n * t, d);
        for (f, &id) in inputs.iter().enumerate() {
            let src = self.value(id);
            for i in 0..n {
                out.row_mut(i * t + f).copy_from_slice(src.row(i));
            }
        }
        Ok(self.push(out, Op::RowInterleave { inputs: inputs.to_vec() }))
    }

    pub fn concat_cols(&mut self, inputs: &[ValueId]) -> Result<ValueId, NumError> {
        if inputs.is_empty() {
            return Err(NumError::EmptyInput { op: "concat_cols" });
        }
        let n = self.shape(inputs[0]).0;
        let mut total = 0;
        for &id in inputs {
            let (r, c) = self.shape(id);
            if r != n {
                return Err(NumError::DimMismatch {
                    op: "concat_cols",
                    lhs: self.shape(inputs[0]),
                    rhs: (r, c),
                });
            }
            total += c;
        }
        let mut out = Matrix::zeros(n, total);
        let mut offset = 0;
        for &id in inputs {
            let src = self.value(id);
            let c = src.cols();
            for i in 0..n {
                out.row_mut(i)[offset..offset + c].copy_from_slice(src.row(i));
            }
            offset += c;
        }
        Ok(self.push(out, Op::ConcatCols { inputs: inputs.to_vec() }))
    }

    pub fn reshape(&mut self, a: ValueId, rows: usize, cols: usize) -> Result<ValueId, NumError> {
        let value = self.value(a).reshaped(rows, cols)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Backpropagates from a 1×1 `root`, returning one gradient per slot.
    /// Slots the root does not depend on keep exactly-zero gradients.
    pub fn backward(&self, root: ValueId) -> Result<Gradients, NumError> {
        if self.shape(root) != (1, 1) {
            return Err(NumError::NonScalarRoot {
                shape: self.shape(root),
            });
        }
        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[root.0].set(0, 0, 1.0);

        for i in (0..self.nodes.len()).rev() {
            // Operands always precede their result, so splitting at i gives
            // mutable access to operand gradients alongside the output's.
            let (lower, upper) = grads.split_at_mut(i);
            let gout = &upper[0];
            if gout.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    // dA += G·B^T ; dB += A^T·G
                    let bt = self.value(*b).transpose();
                    matmul_accum(gout, &bt, &mut lower[a.0]);
                    let at = self.value(*a).transpose();
                    matmul_accum(&at, gout, &mut lower[b.0]);
                }
                Op::BlockMatmulNT { a, b, block } => {
                    self.backward_block_nt(*a, *b, *block, gout, lower);
                }
                Op::BlockMatmulNN { a, b, block } => {
                    self.backward_block_nn(*a, *b, *block, gout, lower);
                }
                Op::Transpose { a } => {
                    accumulate(&mut lower[a.0], &gout.transpose());
                }
                Op::Add { a, b } => {
                    accumulate(&mut lower[a.0], gout);
                    accumulate(&mut lower[b.0], gout);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut lower[a.0], gout);
                    accumulate_scaled(&mut lower[b.0], gout, -1.0);
                }
                Op::Mul { a, b } => {
                    accumulate_product(&mut lower[a.0], gout, self.value(*b));
                    accumulate_product(&mut lower[b.0], gout, self.value(*a));
                }
                Op::Scale { a, k } => {
                    accumulate_scaled(&mut lower[a.0], gout, *k);
                }
                Op::ConstSub { a, .. } => {
                    accumulate_scaled(&mut lower[a.0], gout, -1.0);
                }
                Op::AddRowBroadcast { a, bias } => {
                    accumulate(&mut lower[a.0], gout);
                    let gb = lower[bias.0].row_mut(0);
                    for r in 0..gout.rows() {
                        for (g, &v) in gb.iter_mut().zip(gout.row(r)) {
                            *g += v;
                        }
                    }
                }
                Op::Relu { a } => {
                    let x = self.value(*a);
                    let ga = &mut lower[a.0];
                    for (idx, g) in ga.data_mut().iter_mut().enumerate() {
                        if x.data()[idx] > 0.0 {
                            *g += gout.data()[idx];
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    let y = &self.nodes[i].value;
                    let ga = &mut lower[a.0];
                    for (idx, g) in ga.data_mut().iter_mut().enumerate() {
                        let yv = y.data()[idx];
                        *g += gout.data()[idx] * yv * (1.0 - yv);
                    }
                }
                Op::Ln { a } => {
                    let x = self.value(*a);
                    let ga = &mut lower[a.0];
                    for (idx, g) in ga.data_mut().iter_mut().enumerate() {
                        *g += gout.data()[idx] / x.data()[idx];
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    let x = self.value(*a);
                    let ga = &mut lower[a.0];
                    for (idx, g) in ga.data_mut().iter_mut().enumerate() {
                        let xv = x.data()[idx];
                        if xv >= *lo && xv <= *hi {
                            *g += gout.data()[idx];
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    let y = &self.nodes[i].value;
                    let ga = &mut lower[a.0];
                    for r in 0..y.rows() {
                        let yrow = y.row(r);
                        let grow = gout.row(r);
                        let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        let garow = ga.row_mut(r);
                        for (c, g) in garow.iter_mut().enumerate() {
                            *g += yrow[c] * (grow[c] - dot);
                        }
                    }
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    self.backward_layer_norm(*x, *gain, *bias, *eps, gout, lower);
                }
                Op::RowInterleave { inputs } => {
                    let t = inputs.len();
                    for (f, id) in inputs.iter().enumerate() {
                        let g = &mut lower[id.0];
                        for r in 0..g.rows() {
                            let src = gout.row(r * t + f);
                            for (gv, &v) in g.row_mut(r).iter_mut().zip(src) {
                                *gv += v;
                            }
                        }
                    }
                }
                Op::ConcatCols { inputs } => {
                    let mut offset = 0;
                    for id in inputs {
                        let g = &mut lower[id.0];
                        let c = g.cols();
                        for r in 0..g.rows() {
                            let src = &gout.row(r)[offset..offset + c];
                            for (gv, &v) in g.row_mut(r).iter_mut().zip(src) {
                                *gv += v;
                            }
                        }
                        offset += c;
                    }
                }
                Op::Reshape { a } => {
                    let ga = &mut lower[a.0];
                    for (g, &v) in ga.data_mut().iter_mut().zip(gout.data()) {
                        *g += v;
                    }
                }
                Op::SumAll { a } => {
                    let g = gout.get(0, 0);
                    for v in lower[a.0].data_mut() {
                        *v += g;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_block_nt(
        &self,
        a: ValueId,
        b: ValueId,
        block: usize,
        gout: &Matrix,
        lower: &mut [Matrix],
    ) {
        // C_i = A_i B_i^T  =>  dA_i += G_i B_i ; dB_i += G_i^T A_i
        let av = self.value(a);
        let bv = self.value(b);
        let width = av.cols();
        let nblocks = av.rows() / block;
        for i in 0..nblocks {
            for r in 0..block {
                let grow = gout.row(i * block + r);
                for (c, &gv) in grow.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let brow = bv.row(i * block + c);
                    let arow = av.row(i * block + r);
                    {
                        let ga = &mut lower[a.0];
                        let garow = ga.row_mut(i * block + r);
                        for t in 0..width {
                            garow[t] += gv * brow[t];
                        }
                    }
                    {
                        let gb = &mut lower[b.0];
                        let gbrow = gb.row_mut(i * block + c);
                        for t in 0..width {
                            gbrow[t] += gv * arow[t];
                        }
                    }
                }
            }
        }
    }

    fn backward_block_nn(
        &self,
        a: ValueId,
        b: ValueId,
        block: usize,
        gout: &Matrix,
        lower: &mut [Matrix],
    ) {
        // C_i = A_i B_i  =>  dA_i += G_i B_i^T ; dB_i += A_i^T G_i
        let av = self.value(a);
        let bv = self.value(b);
        let width = bv.cols();
        let nblocks = av.rows() / block;
        for i in 0..nblocks {
            for r in 0..block {
                let grow = gout.row(i * block + r);
                let arow = av.row(i * block + r);
                {
                    let ga = &mut lower[a.0];
                    let garow = ga.row_mut(i * block + r);
                    for (t, g) in garow.iter_mut().enumerate() {
                        let brow = bv.row(i * block + t);
                        let mut acc = 0.0;
                        for c in 0..width {
                            acc += grow[c] * brow[c];
                        }
                        *g += acc;
                    }
                }
                {
                    let gb = &mut lower[b.0];
                    for (t, &avv) in arow.iter().enumerate() {
                        if avv == 0.0 {
                            continue;
                        }
                        let gbrow = gb.row_mut(i * block + t);
                        for (g, &gv) in gbrow.iter_mut().zip(grow) {
                            *g += avv * gv;
                        }
                    }
                }
            }
        }
    }

    fn backward_layer_norm(
        &self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
        gout: &Matrix,
        lower: &mut [Matrix],
    ) {
        let xv = self.value(x);
        let g = self.value(gain).row(0).to_vec();
        let d = xv.cols() as f64;
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
            let grow = gout.row(r);

            // dy w.r.t. the normalized vector
            let dxhat: Vec<f64> = grow.iter().zip(&g).map(|(&gv, &gn)| gv * gn).collect();
            let mean_dxhat = dxhat.iter().sum::<f64>() / d;
            let mean_dxhat_xhat =
                dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d;

            {
                let gx = &mut lower[x.0];
                let gxrow = gx.row_mut(r);
                for c in 0..xhat.len() {
                    gxrow[c] += inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                }
            }
            {
                let gg = &mut lower[gain.0];
                let ggrow = gg.row_mut(0);
                for (c, gv) in ggrow.iter_mut().enumerate() {
                    *gv += grow[c] * xhat[c];
                }
            }
            {
                let gb = &mut lower[bias.0];
                let gbrow = gb.row_mut(0);
                for (c, gv) in gbrow.iter_mut().enumerate() {
                    *gv += grow[c];
                }
            }
        }
    }
}

/// Per-slot gradients produced by [`GradTape::backward`].
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn wrt(&self, id: ValueId) -> &Matrix {
        &self.grads[id.0]
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(dst: &mut Matrix, src: &Matrix) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn accumulate_scaled(dst: &mut Matrix, src: &Matrix, k: f64) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += k * s;
    }
}

fn accumulate_product(dst: &mut Matrix, a: &Matrix, b: &Matrix) {
    for ((d, &av), &bv) in dst.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *d += av * bv;
    }
}
