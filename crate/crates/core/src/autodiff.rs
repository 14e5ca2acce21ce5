//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every executed operation into a Wengert list;
//! [`Tape::backward`] replays it in exact reverse order, accumulating
//! gradients additively at fan-out. The operator set is exactly what the
//! segmentation network needs: per-point linears, 3x3 same-padding 2D
//! convolution, a depthwise per-channel affine, batch normalization,
//! elementwise activations, neighborhood max-pooling, the scatter-mean /
//! gather pair used by the plane projections, and a handful of structural
//! ops (concat, slice, add, mul, scale, mean).
//!
//! All accumulation loops run in a fixed order, so forward and backward
//! are bitwise reproducible.

use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::projection::CellAssignment;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Whether batch statistics are computed (training) or running
/// statistics are used (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Non-learnable batch-normalization buffers.
#[derive(Debug, Clone)]
pub struct BatchNormState<R> {
    pub running_mean: Vec<R>,
    pub running_var: Vec<R>,
    pub momentum: R,
    pub eps: R,
}

impl<R: Real> BatchNormState<R> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNormState {
            running_mean: vec![R::zero(); channels],
            running_var: vec![R::one(); channels],
            momentum: R::from_f64_c(momentum),
            eps: R::from_f64_c(eps),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op<R: Real> {
    Leaf,
    LinearPointwise {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2dSame {
        x: Var,
        k: Var,
        b: Var,
    },
    DepthwisePointwise {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input saved for the backward pass.
        xhat: Tensor<R>,
        inv_std: Vec<R>,
        /// True when batch statistics were used (training mode).
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    MaxOverNeighbors {
        x: Var,
        groups: usize,
        argmax: Vec<u32>,
    },
    NeighborDiffs {
        x: Var,
        indices: Rc<Vec<u32>>,
        k: usize,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    ConcatRows {
        xs: Vec<Var>,
    },
    TakeRows {
        x: Var,
        start: usize,
    },
    ScatterMean {
        x: Var,
        assignment: Rc<CellAssignment>,
    },
    GatherCells {
        grid: Var,
        cells: Rc<Vec<u32>>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: R,
    },
    MeanAll {
        x: Var,
    },
    /// A scalar whose value and input gradient were computed outside the
    /// tape (loss kernels).
    PrecomputedScalar {
        x: Var,
        grad: Tensor<R>,
    },
}

struct Node<R: Real> {
    value: Tensor<R>,
    needs_grad: bool,
    op: Op<R>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Recorded computation over [`Tensor`] values.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    params: Vec<(String, Var)>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Named trainable leaves inserted via [`Tape::param`].
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Input that does not require a gradient.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Input that requires a gradient.
    pub fn leaf_grad(&mut self, value: Tensor<R>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Trainable leaf registered under `name` for optimizer lookup.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<R>) -> Var {
        let var = self.leaf_grad(value);
        self.params.push((name.into(), var));
        var
    }

    fn push(&mut self, value: Tensor<R>, needs_grad: bool, op: Op<R>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn record(&mut self, value: Tensor<R>, inputs: &[Var], op: Op<R>) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.push(value, needs_grad, op)
    }

    /// `out[i] = w . x[i] + b` independently per row.
    pub fn linear_pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, c_in) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.shape()[1] != c_in {
            return Err(Error::shape(format!(
                "linear weight {:?} does not accept {c_in} input channels",
                wv.shape()
            )));
        }
        let c_out = wv.shape()[0];
        if bv.len() != c_out {
            return Err(Error::shape("linear bias length differs from output channels"));
        }
        let mut data = Vec::with_capacity(n * c_out);
        for i in 0..n {
            let row = xv.row(i);
            for o in 0..c_out {
                let wrow = wv.row(o);
                let mut acc = bv.data()[o];
                for c in 0..c_in {
                    acc += wrow[c] * row[c];
                }
                data.push(acc);
            }
        }
        Ok(self.record(
            Tensor::new(&[n, c_out], data),
            &[x, w, b],
            Op::LinearPointwise { x, w, b },
        ))
    }

    /// 3x3 cross-correlation with zero padding 1 (same spatial size).
    /// `x` is `[h, w, c_in]`, `k` is `[c_out, 3, 3, c_in]`.
    pub fn conv2d_same(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        if xv.shape().len() != 3 {
            return Err(Error::shape("conv input must be [h, w, c_in]"));
        }
        let (h, w, c_in) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if kv.shape().len() != 4 || kv.shape()[1] != 3 || kv.shape()[2] != 3 || kv.shape()[3] != c_in
        {
            return Err(Error::shape(format!(
                "conv kernels {:?} incompatible with {c_in} input channels",
                kv.shape()
            )));
        }
        let c_out = kv.shape()[0];
        if bv.len() != c_out {
            return Err(Error::shape("conv bias length differs from output channels"));
        }
        let out = conv2d_forward(xv, kv, bv, h, w, c_in, c_out);
        Ok(self.record(out, &[x, k, b], Op::Conv2dSame { x, k, b }))
    }

    /// `out[i, c] = w[c] * x[i, c] + b[c]`: a depthwise kernel of size 1.
    pub fn depthwise_pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, c) = (xv.rows(), xv.cols());
        if wv.len() != c || bv.len() != c {
            return Err(Error::shape(format!(
                "depthwise weights of {} channels applied to {c}-channel input",
                wv.len()
            )));
        }
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            let row = xv.row(i);
            for ch in 0..c {
                data.push(wv.data()[ch] * row[ch] + bv.data()[ch]);
            }
        }
        Ok(self.record(
            Tensor::new(&[n, c], data),
            &[x, w, b],
            Op::DepthwisePointwise { x, w, b },
        ))
    }

    /// Batch normalization over the row axis of an `[n, c]` input.
    ///
    /// Training mode normalizes by biased batch statistics and updates the
    /// running buffers in `state`; evaluation mode normalizes by the
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<R>,
        mode: Mode,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if state.channels() != c || self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch-norm parameter channels differ from input"));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::arg(format!(
                "batch norm in training mode requires at least 2 rows (got {n})"
            )));
        }
        let (mean, var): (Vec<R>, Vec<R>) = match mode {
            Mode::Train => {
                // Statistics accumulate in f64 so they are insensitive to
                // row order even in f32 mode.
                let inv_n = 1.0 / n as f64;
                let mut mean = vec![0.0f64; c];
                for i in 0..n {
                    for (m, &v) in mean.iter_mut().zip(xv.row(i)) {
                        *m += v.to_f64_c();
                    }
                }
                for m in &mut mean {
                    *m *= inv_n;
                }
                let mut var = vec![0.0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let d = xv.row(i)[ch].to_f64_c() - mean[ch];
                        var[ch] += d * d;
                    }
                }
                for v in &mut var {
                    *v *= inv_n;
                }
                (
                    mean.into_iter().map(R::from_f64_c).collect(),
                    var.into_iter().map(R::from_f64_c).collect(),
                )
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<R> = var
            .iter()
            .map(|&v| R::one() / (v + state.eps).sqrt())
            .collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = Tensor::zeros(&[n, c]);
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            for ch in 0..c {
                let h = (self.value(x).row(i)[ch] - mean[ch]) * inv_std[ch];
                xhat.row_mut(i)[ch] = h;
                out.row_mut(i)[ch] = gv[ch] * h + bv[ch];
            }
        }
        if mode == Mode::Train {
            // Running variance uses the unbiased estimator, the usual
            // convention for inference-time statistics.
            let unbias = R::from_f64_c(n as f64 / (n as f64 - 1.0));
            let m = state.momentum;
            for ch in 0..c {
                state.running_mean[ch] = (R::one() - m) * state.running_mean[ch] + m * mean[ch];
                state.running_var[ch] =
                    (R::one() - m) * state.running_var[ch] + m * var[ch] * unbias;
            }
        }
        Ok(self.record(
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(R::zero()));
        self.record(out, &[x], Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| R::one() / (R::one() + (-v).exp()));
        self.record(out, &[x], Op::Sigmoid { x })
    }

    /// Row-stochastic softmax with max-subtraction stabilization.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let row = xv.row(i);
            let max = row.iter().cloned().fold(R::neg_infinity(), R::max);
            let mut sum = R::zero();
            for ch in 0..c {
                let e = (row[ch] - max).exp();
                out.row_mut(i)[ch] = e;
                sum += e;
            }
            let inv = R::one() / sum;
            for v in out.row_mut(i) {
                *v *= inv;
            }
        }
        self.record(out, &[x], Op::SoftmaxRows { x })
    }

    /// Columnwise max over the leading neighbor axis of a `[k * n, c]`
    /// tensor laid out neighbor-major (row `j * n + i` holds neighbor `j`
    /// of point `i`). Gradient flows to the first argmax on ties.
    pub fn max_over_neighbors(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if groups == 0 || rows % groups != 0 {
            return Err(Error::shape(format!(
                "{rows} rows do not split into {groups} neighbor groups"
            )));
        }
        let n = rows / groups;
        let mut out = Tensor::full(&[n, c], R::neg_infinity());
        let mut argmax = vec![0u32; n * c];
        for j in 0..groups {
            for i in 0..n {
                let row = xv.row(j * n + i);
                for ch in 0..c {
                    let slot = i * c + ch;
                    if row[ch] > out.data()[slot] {
                        out.data_mut()[slot] = row[ch];
                        argmax[slot] = j as u32;
                    }
                }
            }
        }
        Ok(self.record(out, &[x], Op::MaxOverNeighbors { x, groups, argmax }))
    }

    /// Stacked neighbor differences: output row `j * n + i` is
    /// `x[indices[i * k + j]] - x[i]`.
    pub fn neighbor_diffs(&mut self, x: Var, indices: Rc<Vec<u32>>, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if indices.len() != n * k {
            return Err(Error::shape(format!(
                "neighbor table of {} entries does not cover {n} points with k {k}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&j| j as usize >= n) {
            return Err(Error::shape(format!("neighbor index {bad} out of range")));
        }
        let mut data = vec![R::zero(); k * n * c];
        for i in 0..n {
            let base = xv.row(i);
            for j in 0..k {
                let nb = xv.row(indices[i * k + j] as usize);
                let dst = ((j * n) + i) * c;
                for ch in 0..c {
                    data[dst + ch] = nb[ch] - base[ch];
                }
            }
        }
        Ok(self.record(
            Tensor::new(&[k * n, c], data),
            &[x],
            Op::NeighborDiffs { x, indices, k },
        ))
    }

    /// Concatenate along the channel axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        Ok(self.record(
            Tensor::new(&[n, ca + cb], data),
            &[a, b],
            Op::ConcatCols { a, b },
        ))
    }

    /// Stack row blocks vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::empty("concat_rows of zero tensors"));
        }
        let c = self.value(xs[0]).cols();
        let mut rows = 0;
        for &x in xs {
            if self.value(x).cols() != c {
                return Err(Error::shape("concat_rows column mismatch"));
            }
            rows += self.value(x).rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        Ok(self.record(
            Tensor::new(&[rows, c], data),
            xs,
            Op::ConcatRows { xs: xs.to_vec() },
        ))
    }

    /// Slice `len` rows starting at `start`.
    pub fn take_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if start + len > n {
            return Err(Error::shape(format!(
                "take_rows {start}..{} out of {n} rows",
                start + len
            )));
        }
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        Ok(self.record(Tensor::new(&[len, c], data), &[x], Op::TakeRows { x, start }))
    }

    /// Scatter rows into grid cells by arithmetic mean (ascending point
    /// order); unoccupied cells are zero.
    pub fn scatter_mean(&mut self, x: Var, assignment: Rc<CellAssignment>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != assignment.cells.len() {
            return Err(Error::shape(format!(
                "scatter of {} rows with {} cell assignments",
                xv.rows(),
                assignment.cells.len()
            )));
        }
        let out = crate::projection::scatter_mean(xv, &assignment);
        Ok(self.record(out, &[x], Op::ScatterMean { x, assignment }))
    }

    /// Gather each point's cell features from a `[h, w, c]` grid.
    pub fn gather_cells(&mut self, grid: Var, cells: Rc<Vec<u32>>) -> Result<Var> {
        let gv = self.value(grid);
        if gv.shape().len() != 3 {
            return Err(Error::shape("gather_cells expects a [h, w, c] grid"));
        }
        let c = gv.shape()[2];
        let num_cells = gv.shape()[0] * gv.shape()[1];
        let mut data = Vec::with_capacity(cells.len() * c);
        for &cell in cells.iter() {
            let cell = cell as usize;
            if cell >= num_cells {
                return Err(Error::shape(format!("cell index {cell} outside grid")));
            }
            data.extend_from_slice(&gv.data()[cell * c..(cell + 1) * c]);
        }
        Ok(self.record(
            Tensor::new(&[cells.len(), c], data),
            &[grid],
            Op::GatherCells { grid, cells },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let shape = av.shape().to_vec();
        Ok(self.record(Tensor::new(&shape, data), &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "mul of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let shape = av.shape().to_vec();
        Ok(self.record(Tensor::new(&shape, data), &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: R) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.record(out, &[x], Op::Scale { x, factor })
    }

    /// Mean over every element, producing a scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let inv = R::one() / R::from_f64_c(xv.len() as f64);
        let sum: R = xv.data().iter().cloned().sum();
        self.record(Tensor::scalar(sum * inv), &[x], Op::MeanAll { x })
    }

    /// Scalar node whose value and gradient w.r.t. `x` were computed by an
    /// external kernel (used by the loss functions).
    pub fn precomputed_scalar(&mut self, x: Var, value: R, grad: Tensor<R>) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::shape("precomputed gradient shape differs from input"));
        }
        Ok(self.record(
            Tensor::scalar(value),
            &[x],
            Op::PrecomputedScalar { x, grad },
        ))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward requires a scalar loss node"));
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(R::one()));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<R>>], v: Var, delta: Tensor<R>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::LinearPointwise { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c_in) = (xv.rows(), xv.cols());
                let c_out = wv.shape()[0];
                let mut gx = Tensor::zeros(&[n, c_in]);
                let mut gw = Tensor::zeros(&[c_out, c_in]);
                let mut gb = Tensor::zeros(&[c_out]);
                for i in 0..n {
                    let grow = g.row(i);
                    let xrow = xv.row(i);
                    for o in 0..c_out {
                        let go = grow[o];
                        gb.data_mut()[o] += go;
                        let wrow = wv.row(o);
                        let gxrow = gx.row_mut(i);
                        for c in 0..c_in {
                            gxrow[c] += go * wrow[c];
                        }
                        let gwrow = gw.row_mut(o);
                        for c in 0..c_in {
                            gwrow[c] += go * xrow[c];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gb);
            }
            Op::Conv2dSame { x, k, b } => {
                let xv = self.value(*x);
                let kv = self.value(*k);
                let (h, w, c_in) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let c_out = kv.shape()[0];
                let (gx, gk, gb) = conv2d_backward(xv, kv, g, h, w, c_in, c_out);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *b, gb);
            }
            Op::DepthwisePointwise { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[n, c]);
                let mut gw = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                for i in 0..n {
                    for ch in 0..c {
                        let go = g.row(i)[ch];
                        gx.row_mut(i)[ch] = go * wv.data()[ch];
                        gw.data_mut()[ch] += go * xv.row(i)[ch];
                        gb.data_mut()[ch] += go;
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c) = (xhat.rows(), xhat.cols());
                let gv = self.value(*gamma);
                let mut ggamma = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                for i in 0..n {
                    for ch in 0..c {
                        ggamma.data_mut()[ch] += g.row(i)[ch] * xhat.row(i)[ch];
                        gbeta.data_mut()[ch] += g.row(i)[ch];
                    }
                }
                let mut gx = Tensor::zeros(&[n, c]);
                if *batch_stats {
                    // dL/dx = inv_std / n * (n*dxh - sum(dxh) - xhat * sum(dxh*xhat))
                    // with dxh = g * gamma, per channel.
                    let mut sum_dxh = vec![R::zero(); c];
                    let mut sum_dxh_xhat = vec![R::zero(); c];
                    for i in 0..n {
                        for ch in 0..c {
                            let dxh = g.row(i)[ch] * gv.data()[ch];
                            sum_dxh[ch] += dxh;
                            sum_dxh_xhat[ch] += dxh * xhat.row(i)[ch];
                        }
                    }
                    let n_r = R::from_f64_c(n as f64);
                    for i in 0..n {
                        for ch in 0..c {
                            let dxh = g.row(i)[ch] * gv.data()[ch];
                            gx.row_mut(i)[ch] = inv_std[ch] / n_r
                                * (n_r * dxh - sum_dxh[ch] - xhat.row(i)[ch] * sum_dxh_xhat[ch]);
                        }
                    }
                } else {
                    for i in 0..n {
                        for ch in 0..c {
                            gx.row_mut(i)[ch] = g.row(i)[ch] * gv.data()[ch] * inv_std[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, ggamma);
                self.accumulate(grads, *beta, gbeta);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &go)| if v > R::zero() { go } else { R::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data));
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[i].value;
                let data = yv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &go)| go * y * (R::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(yv.shape(), data));
            }
            Op::SoftmaxRows { x } => {
                let yv = &self.nodes[i].value;
                let (n, c) = (yv.rows(), yv.cols());
                let mut gx = Tensor::zeros(&[n, c]);
                for r in 0..n {
                    let yrow = yv.row(r);
                    let grow = g.row(r);
                    let mut dot = R::zero();
                    for ch in 0..c {
                        dot += yrow[ch] * grow[ch];
                    }
                    for ch in 0..c {
                        gx.row_mut(r)[ch] = yrow[ch] * (grow[ch] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MaxOverNeighbors { x, groups, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let n = xv.rows() / groups;
                let mut gx = Tensor::zeros(&[xv.rows(), c]);
                for i in 0..n {
                    for ch in 0..c {
                        let j = argmax[i * c + ch] as usize;
                        gx.row_mut(j * n + i)[ch] = g.row(i)[ch];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::NeighborDiffs { x, indices, k } => {
                let xv = self.value(*x);
                let (n, c) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    for j in 0..*k {
                        let nb = indices[i * k + j] as usize;
                        let grow = g.row(j * n + i);
                        for ch in 0..c {
                            gx.row_mut(nb)[ch] += grow[ch];
                        }
                        for ch in 0..c {
                            gx.row_mut(i)[ch] -= grow[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols { a, b } => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let n = self.value(*a).rows();
                let mut ga = Tensor::zeros(&[n, ca]);
                let mut gb = Tensor::zeros(&[n, cb]);
                for i in 0..n {
                    let grow = g.row(i);
                    ga.row_mut(i).copy_from_slice(&grow[..ca]);
                    gb.row_mut(i).copy_from_slice(&grow[ca..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::ConcatRows { xs } => {
                let mut start = 0;
                for &x in xs {
                    let rows = self.value(x).rows();
                    let c = self.value(x).cols();
                    let data = g.data()[start * c..(start + rows) * c].to_vec();
                    self.accumulate(grads, x, Tensor::new(&[rows, c], data));
                    start += rows;
                }
            }
            Op::TakeRows { x, start } => {
                let xv = self.value(*x);
                let (n, c) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[n, c]);
                let len = g.rows();
                gx.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterMean { x, assignment } => {
                let xv = self.value(*x);
                let (n, c) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    let cell = assignment.cells[i] as usize;
                    let inv = R::one() / R::from_f64_c(assignment.counts[cell] as f64);
                    let gcell = &g.data()[cell * c..(cell + 1) * c];
                    for (dst, &src) in gx.row_mut(i).iter_mut().zip(gcell) {
                        *dst = src * inv;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherCells { grid, cells } => {
                let gv = self.value(*grid);
                let mut ggrid = Tensor::zeros(gv.shape());
                let c = gv.shape()[2];
                for (i, &cell) in cells.iter().enumerate() {
                    let base = cell as usize * c;
                    let grow = g.row(i);
                    for ch in 0..c {
                        ggrid.data_mut()[base + ch] += grow[ch];
                    }
                }
                self.accumulate(grads, *grid, ggrid);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(
                    av.shape(),
                    g.data().iter().zip(bv.data()).map(|(&go, &y)| go * y).collect(),
                );
                let gb = Tensor::new(
                    bv.shape(),
                    g.data().iter().zip(av.data()).map(|(&go, &x)| go * x).collect(),
                );
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale { x, factor } => {
                let gx = g.map(|v| v * *factor);
                self.accumulate(grads, *x, gx);
            }
            Op::MeanAll { x } => {
                let xv = self.value(*x);
                let go = g.item() / R::from_f64_c(xv.len() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), go));
            }
            Op::PrecomputedScalar { x, grad } => {
                let go = g.item();
                self.accumulate(grads, *x, grad.map(|v| v * go));
            }
        }
    }
}

fn conv2d_forward<R: Real>(
    xv: &Tensor<R>,
    kv: &Tensor<R>,
    bv: &Tensor<R>,
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
) -> Tensor<R> {
    let x = xv.data();
    let k = kv.data();
    let b = bv.data();
    let mut out = vec![R::zero(); h * w * c_out];
    out.par_chunks_mut(w * c_out).enumerate().for_each(|(y, row)| {
        for xi in 0..w {
            let dst = &mut row[xi * c_out..(xi + 1) * c_out];
            dst.copy_from_slice(b);
            for dy in 0..3usize {
                let iy = y + dy;
                if iy < 1 || iy > h {
                    continue;
                }
                let iy = iy - 1;
                for dx in 0..3usize {
                    let ix = xi + dx;
                    if ix < 1 || ix > w {
                        continue;
                    }
                    let ix = ix - 1;
                    let src = &x[(iy * w + ix) * c_in..(iy * w + ix + 1) * c_in];
                    for (co, acc) in dst.iter_mut().enumerate() {
                        let kbase = ((co * 3 + dy) * 3 + dx) * c_in;
                        let krow = &k[kbase..kbase + c_in];
                        let mut s = R::zero();
                        for c in 0..c_in {
                            s += krow[c] * src[c];
                        }
                        *acc += s;
                    }
                }
            }
        }
    });
    Tensor::new(&[h, w, c_out], out)
}

fn conv2d_backward<R: Real>(
    xv: &Tensor<R>,
    kv: &Tensor<R>,
    g: &Tensor<R>,
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
) -> (Tensor<R>, Tensor<R>, Tensor<R>) {
    let x = xv.data();
    let k = kv.data();
    let gd = g.data();
    // d input: correlation of the output gradient with the flipped kernel.
    let mut gx = vec![R::zero(); h * w * c_in];
    gx.par_chunks_mut(w * c_in).enumerate().for_each(|(iy, row)| {
        for ix in 0..w {
            let dst = &mut row[ix * c_in..(ix + 1) * c_in];
            for dy in 0..3usize {
                // iy = y + dy - 1  =>  y = iy + 1 - dy
                let y = iy + 1;
                if y < dy || y - dy >= h {
                    continue;
                }
                let y = y - dy;
                for dx in 0..3usize {
                    let xo = ix + 1;
                    if xo < dx || xo - dx >= w {
                        continue;
                    }
                    let xo = xo - dx;
                    let grow = &gd[(y * w + xo) * c_out..(y * w + xo + 1) * c_out];
                    for (co, &go) in grow.iter().enumerate() {
                        let kbase = ((co * 3 + dy) * 3 + dx) * c_in;
                        for c in 0..c_in {
                            dst[c] += go * k[kbase + c];
                        }
                    }
                }
            }
        }
    });
    let mut gk = vec![R::zero(); c_out * 9 * c_in];
    let mut gb = vec![R::zero(); c_out];
    for y in 0..h {
        for xi in 0..w {
            let grow = &gd[(y * w + xi) * c_out..(y * w + xi + 1) * c_out];
            for (co, &go) in grow.iter().enumerate() {
                gb[co] += go;
            }
            for dy in 0..3usize {
                let iy = y + dy;
                if iy < 1 || iy > h {
                    continue;
                }
                let iy = iy - 1;
                for dx in 0..3usize {
                    let ix = xi + dx;
                    if ix < 1 || ix > w {
                        continue;
                    }
                    let ix = ix - 1;
                    let src = &x[(iy * w + ix) * c_in..(iy * w + ix + 1) * c_in];
                    for (co, &go) in grow.iter().enumerate() {
                        let kbase = ((co * 3 + dy) * 3 + dx) * c_in;
                        for c in 0..c_in {
                            gk[kbase + c] += go * src[c];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(&[h, w, c_in], gx),
        Tensor::new(&[c_out, 3, 3, c_in], gk),
        Tensor::new(&[c_out], gb),
    )
}

/// Exhaustive central-difference gradient check.
///
/// `f` must build a scalar objective from leaves matching `inputs`.
/// Every coordinate of every input is perturbed by `+-step`; the return
/// value is the maximum relative disagreement between the analytic and
/// finite-difference derivative.
pub fn grad_check_full<F>(f: &F, inputs: &[Tensor<f64>], step: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_grad(t.clone())).collect();
    let y = f(&mut tape, &vars);
    let grads = tape.backward(y).expect("scalar objective");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut max_rel: f64 = 0.0;
    for (vi, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let eval = |delta: f64| -> f64 {
                let mut shifted: Vec<Tensor<f64>> = inputs.to_vec();
                shifted[vi].data_mut()[j] += delta;
                let mut tape = Tape::new();
                let vars: Vec<Var> = shifted.into_iter().map(|t| tape.leaf(t)).collect();
                let y = f(&mut tape, &vars);
                tape.value(y).item()
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            let a = analytic[vi].data()[j];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((a - fd).abs() / denom);
        }
    }
    max_rel
}

/// Directional central-difference gradient check along `directions`
/// (one tensor per input, same shapes). Returns the relative
/// disagreement between the analytic directional derivative and the
/// finite-difference quotient.
pub fn grad_check_directional<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    directions: &[Tensor<f64>],
    step: f64,
) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    assert_eq!(inputs.len(), directions.len());
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_grad(t.clone())).collect();
    let y = f(&mut tape, &vars);
    let grads = tape.backward(y).expect("scalar objective");
    let mut analytic = 0.0;
    for (&v, dir) in vars.iter().zip(directions) {
        if let Some(g) = grads.get(v) {
            analytic += g.data().iter().zip(dir.data()).map(|(a, d)| a * d).sum::<f64>();
        }
    }
    let eval = |sign: f64| -> f64 {
        let shifted: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(directions)
            .map(|(t, d)| {
                let mut s = t.clone();
                for (v, dv) in s.data_mut().iter_mut().zip(d.data()) {
                    *v += sign * step * dv;
                }
                s
            })
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = shifted.into_iter().map(|t| tape.leaf(t)).collect();
        let y = f(&mut tape, &vars);
        tape.value(y).item()
    };
    let fd = (eval(1.0) - eval(-1.0)) / (2.0 * step);
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_STEP: f64 = 1e-5;
    const FD_TOL: f64 = 1e-4;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::new(
            shape,
            (0..shape.iter().product())
                .map(|_| rng.gen_range(-1.5..1.5))
                .collect(),
        )
    }

    #[test]
    fn linear_identity_and_hand_dot() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0]]));
        let ident = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let zero_b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.linear_pointwise(x, ident, zero_b).unwrap();
        assert_eq!(tape.value(y).row(0), &[3.0, 4.0]);

        let w = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.linear_pointwise(x, w, b).unwrap();
        assert_eq!(tape.value(y).item(), 11.0);

        // Zero input passes the bias through.
        let x0 = tape.leaf(Tensor::zeros(&[3, 2]));
        let b7 = tape.leaf(Tensor::new(&[1], vec![7.0]));
        let y = tape.linear_pointwise(x0, w, b7).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn linear_rejects_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let w = tape.leaf(Tensor::zeros(&[4, 2]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        assert!(tape.linear_pointwise(x, w, b).is_err());
    }

    #[test]
    fn conv_center_delta_is_identity() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[4, 5, 2]);
        // kernel[co][1][1][ci] = delta(co, ci)
        let mut k = Tensor::zeros(&[2, 3, 3, 2]);
        for co in 0..2 {
            k.data_mut()[((co * 3 + 1) * 3 + 1) * 2 + co] = 1.0;
        }
        let xv = tape.leaf(x.clone());
        let kv = tape.leaf(k);
        let bv = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.conv2d_same(xv, kv, bv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv_ones_kernel_on_single_pixel() {
        // Only the center tap overlaps a 1x1 image under zero padding.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 1], vec![5.0]));
        let k = tape.leaf(Tensor::full(&[1, 3, 3, 1], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d_same(x, k, b).unwrap();
        assert_eq!(tape.value(y).item(), 5.0);
    }

    #[test]
    fn conv_zero_kernel_passes_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3, 3, 2]));
        let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 2]));
        let b = tape.leaf(Tensor::new(&[1], vec![-2.5]));
        let y = tape.conv2d_same(x, k, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == -2.5));
    }

    #[test]
    fn depthwise_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 1.0]]));
        let w = tape.leaf(Tensor::new(&[2], vec![2.0, 3.0]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.depthwise_pointwise(x, w, b).unwrap();
        assert_eq!(tape.value(y).row(0), &[2.0, 3.0]);

        let ones = tape.leaf(Tensor::full(&[2], 1.0));
        let y = tape.depthwise_pointwise(x, ones, b).unwrap();
        assert_eq!(tape.value(y).row(0), &[1.0, 1.0]);

        let wz = tape.leaf(Tensor::zeros(&[2]));
        let bb = tape.leaf(Tensor::new(&[2], vec![4.0, -1.0]));
        let y = tape.depthwise_pointwise(x, wz, bb).unwrap();
        assert_eq!(tape.value(y).row(0), &[4.0, -1.0]);
    }

    #[test]
    fn batch_norm_hand_case_and_constant_guard() {
        // Column {1, 3}: mean 2, biased variance 1.
        let mut state = BatchNormState::new(1, 0.1, 1e-12);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![3.0]]));
        let gamma = tape.leaf(Tensor::full(&[1], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        let y = tape
            .batch_norm(x, gamma, beta, &mut state, Mode::Train)
            .unwrap();
        assert!((tape.value(y).at2(0, 0) - -1.0).abs() < 1e-9);
        assert!((tape.value(y).at2(1, 0) - 1.0).abs() < 1e-9);

        // Constant input: output collapses onto beta.
        let mut state = BatchNormState::new(1, 0.1, 1e-5);
        let x = tape.leaf(Tensor::full(&[4, 1], 9.0));
        let beta2 = tape.leaf(Tensor::full(&[1], 0.25));
        let y = tape
            .batch_norm(x, gamma, beta2, &mut state, Mode::Train)
            .unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_eval_identity_with_unit_stats() {
        let mut state = BatchNormState::new(2, 0.1, 0.0);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.5, -2.0]]));
        let gamma = tape.leaf(Tensor::full(&[2], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[2]));
        let y = tape
            .batch_norm(x, gamma, beta, &mut state, Mode::Eval)
            .unwrap();
        assert_eq!(tape.value(y).row(0), &[0.5, -2.0]);
    }

    #[test]
    fn batch_norm_train_requires_two_rows() {
        let mut state = BatchNormState::new(1, 0.1, 1e-5);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1]));
        let gamma = tape.leaf(Tensor::full(&[1], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        assert!(tape
            .batch_norm(x, gamma, beta, &mut state, Mode::Train)
            .is_err());
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Scale 10 keeps eps negligible relative to the variance.
        let x = Tensor::new(&[32, 3], (0..96).map(|_| rng.gen_range(-10.0..10.0)).collect());
        let mut state = BatchNormState::new(3, 0.1, 1e-5);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x);
        let gamma = tape.leaf(Tensor::full(&[3], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[3]));
        let y = tape
            .batch_norm(xv, gamma, beta, &mut state, Mode::Train)
            .unwrap();
        let yv = tape.value(y);
        for ch in 0..3 {
            let mean: f64 = (0..32).map(|i| yv.at2(i, ch)).sum::<f64>() / 32.0;
            let var: f64 = (0..32).map(|i| (yv.at2(i, ch) - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-9, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {ch} var {var}");
        }
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![0.0, -2.0, 3.0]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);

        let c = tape.leaf(Tensor::full(&[1, 4], 2.5));
        let sm = tape.softmax_rows(c);
        for &v in tape.value(sm).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, &[6, 5]);
        let shifted = Tensor::new(x.shape(), x.data().iter().map(|v| v + 3.7).collect::<Vec<_>>());
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(x);
        let b = tape.leaf(shifted);
        let ya = tape.softmax_rows(a);
        let yb = tape.softmax_rows(b);
        for i in 0..6 {
            let sum: f64 = tape.value(ya).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for ch in 0..5 {
                assert!((tape.value(ya).at2(i, ch) - tape.value(yb).at2(i, ch)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn max_over_neighbors_examples() {
        let mut tape = Tape::<f64>::new();
        // K = 2, N = 1, C = 2: rows (1, 5) and (3, 2) -> (3, 5).
        let x = tape.leaf_grad(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        let y = tape.max_over_neighbors(x, 2).unwrap();
        assert_eq!(tape.value(y).row(0), &[3.0, 5.0]);

        // K = 1 is the identity.
        let x1 = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.0]]));
        let y1 = tape.max_over_neighbors(x1, 1).unwrap();
        assert_eq!(tape.value(y1).data(), tape.value(x1).data());
    }

    #[test]
    fn max_over_neighbors_tie_routes_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_grad(Tensor::from_rows(&[vec![2.0], vec![2.0], vec![2.0]]));
        let y = tape.max_over_neighbors(x, 3).unwrap();
        let m = tape.mean_all(y);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn fanout_gradients_sum() {
        // y = mean(x * x + x): both consumers of x contribute.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_grad(Tensor::new(&[2], vec![3.0, -1.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let y = tape.mean_all(s);
        let grads = tape.backward(y).unwrap();
        // d/dx mean(x^2 + x) = (2x + 1) / 2
        assert_eq!(grads.get(x).unwrap().data(), &[3.5, -0.5]);
    }

    #[test]
    fn grad_check_simple_square() {
        // f(x) = mean(x * x); at x = 3 the derivative is 6.
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.mul(vars[0], vars[0]).unwrap();
            tape.mean_all(y)
        };
        let inputs = [Tensor::scalar(3.0)];
        let rel = grad_check_full(&f, &inputs, FD_STEP);
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn grad_check_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [
            random_tensor(&mut rng, &[5, 3]),
            random_tensor(&mut rng, &[4, 3]),
            random_tensor(&mut rng, &[4]),
        ];
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.linear_pointwise(vars[0], vars[1], vars[2]).unwrap();
            tape.mean_all(y)
        };
        assert!(grad_check_full(&f, &inputs, FD_STEP) < FD_TOL);
    }

    #[test]
    fn grad_check_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [
            random_tensor(&mut rng, &[4, 4, 2]),
            random_tensor(&mut rng, &[3, 3, 3, 2]),
            random_tensor(&mut rng, &[3]),
        ];
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.conv2d_same(vars[0], vars[1], vars[2]).unwrap();
            let s = tape.sigmoid(y);
            tape.mean_all(s)
        };
        assert!(grad_check_full(&f, &inputs, FD_STEP) < FD_TOL);
    }

    #[test]
    fn grad_check_depthwise_and_mul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [
            random_tensor(&mut rng, &[6, 3]),
            random_tensor(&mut rng, &[3]),
            random_tensor(&mut rng, &[3]),
        ];
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.depthwise_pointwise(vars[0], vars[1], vars[2]).unwrap();
            let z = tape.mul(y, vars[0]).unwrap();
            tape.mean_all(z)
        };
        assert!(grad_check_full(&f, &inputs, FD_STEP) < FD_TOL);
    }

    #[test]
    fn grad_check_batch_norm_train_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = [
            random_tensor(&mut rng, &[7, 3]),
            random_tensor(&mut rng, &[3]),
            random_tensor(&mut rng, &[3]),
        ];
        for mode in [Mode::Train, Mode::Eval] {
            let f = move |tape: &mut Tape<f64>, vars: &[Var]| {
                let mut state = BatchNormState::new(3, 0.1, 1e-5);
                state.running_mean = vec![0.2, -0.4, 1.0];
                state.running_var = vec![1.5, 0.7, 2.0];
                let y = tape
                    .batch_norm(vars[0], vars[1], vars[2], &mut state, mode)
                    .unwrap();
                let s = tape.sigmoid(y);
                tape.mean_all(s)
            };
            let rel = grad_check_full(&f, &inputs, FD_STEP);
            assert!(rel < FD_TOL, "{mode:?} rel {rel}");
        }
    }

    #[test]
    fn grad_check_composed_sigmoid_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = [
            random_tensor(&mut rng, &[5, 4]),
            random_tensor(&mut rng, &[3, 4]),
            random_tensor(&mut rng, &[3]),
        ];
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.linear_pointwise(vars[0], vars[1], vars[2]).unwrap();
            let s = tape.sigmoid(y);
            tape.mean_all(s)
        };
        assert!(grad_check_full(&f, &inputs, FD_STEP) < FD_TOL);
    }

    #[test]
    fn grad_check_softmax_relu_maxpool() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = [random_tensor(&mut rng, &[6, 4])];
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let r = tape.relu(vars[0]);
            let sm = tape.softmax_rows(r);
            let m = tape.max_over_neighbors(sm, 3).unwrap();
            tape.mean_all(m)
        };
        assert!(grad_check_full(&f, &inputs, FD_STEP) < FD_TOL);
    }

    #[test]
    fn grad_check_scatter_gather_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let assignment = Rc::new(CellAssignment {
            cells: vec![0, 2, 2, 5, 1, 2],
            counts: vec![1, 1, 3, 0, 0, 1],
            height: 2,
            width: 3,
        });
        let inputs = [random_tensor(&mut rng, &[6, 3])];
        let f = move |tape: &mut Tape<f64>, vars: &[Var]| {
            let grid = tape.scatter_mean(vars[0], assignment.clone()).unwrap();
            let back = tape
                .gather_cells(grid, Rc::new(assignment.cells.clone()))
                .unwrap();
            let s = tape.sigmoid(back);
            tape.mean_all(s)
        };
        assert!(grad_check_full(&f, &inputs, FD_STEP) < FD_TOL);
    }

    #[test]
    fn grad_check_neighbor_diffs_concat_take() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let indices = Rc::new(vec![1u32, 2, 0, 2, 0, 1]);
        let inputs = [random_tensor(&mut rng, &[3, 2])];
        let f = move |tape: &mut Tape<f64>, vars: &[Var]| {
            let d = tape.neighbor_diffs(vars[0], indices.clone(), 2).unwrap();
            let m = tape.max_over_neighbors(d, 2).unwrap();
            let cat = tape.concat_cols(m, vars[0]).unwrap();
            let top = tape.take_rows(cat, 1, 2).unwrap();
            let s = tape.sigmoid(top);
            tape.mean_all(s)
        };
        assert!(grad_check_full(&f, &inputs, FD_STEP) < FD_TOL);
    }

    #[test]
    fn grad_check_concat_rows_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = [random_tensor(&mut rng, &[2, 3]), random_tensor(&mut rng, &[4, 3])];
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let cat = tape.concat_rows(&[vars[0], vars[1]]).unwrap();
            let s = tape.scale(cat, 0.75);
            let sg = tape.sigmoid(s);
            tape.mean_all(sg)
        };
        assert!(grad_check_full(&f, &inputs, FD_STEP) < FD_TOL);
    }

    #[test]
    fn directional_check_agrees_with_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inputs = [
            random_tensor(&mut rng, &[5, 4]),
            random_tensor(&mut rng, &[2, 4]),
            random_tensor(&mut rng, &[2]),
        ];
        let directions = [
            random_tensor(&mut rng, &[5, 4]),
            random_tensor(&mut rng, &[2, 4]),
            random_tensor(&mut rng, &[2]),
        ];
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.linear_pointwise(vars[0], vars[1], vars[2]).unwrap();
            let s = tape.sigmoid(y);
            tape.mean_all(s)
        };
        let rel = grad_check_directional(&f, &inputs, &directions, FD_STEP);
        assert!(rel < FD_TOL, "rel {rel}");
    }
}
