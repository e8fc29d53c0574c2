//! Reverse-mode gradient tape over batched matrix ops.
//!
//! Node values are matrices of shape (features x batch). Trainable
//! parameters live in one flat vector; nodes reference them by offset, so a
//! single tape serves the MLP, the GRU cell, and the orthogonal rotation
//! parametrization without per-model derivative code.

use crate::numerics::matrix::{sigmoid, softmax, Matrix};

pub type NodeId = usize;

enum Op {
    Constant,
    /// W (rows x cols) and optional bias from the parameter vector; value = W x + b.
    Affine { w_off: usize, rows: usize, cols: usize, b_off: Option<usize>, x: NodeId },
    /// Fixed weight and optional fixed bias; gradients flow only to x.
    LinConst { w: Matrix, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    ConcatRows(Vec<NodeId>),
    /// Mean softmax cross-entropy over the batch; x is (classes x batch).
    SoftmaxCrossEntropy { x: NodeId, classes: Vec<usize> },
    /// Mean elementwise binary cross-entropy with logits.
    BceWithLogits { x: NodeId, targets: Matrix },
    /// R = R0 * (I - A)^{-1} (I + A), A skew-symmetric from d(d-1)/2 params.
    CayleySkew { offset: usize, d: usize, init: Option<Matrix> },
    /// Rotate base/source by R^T, swap the first k coordinates, rotate back.
    DasPatch { r: NodeId, base: Matrix, source: Matrix, k: usize },
}

struct Node {
    op: Op,
    value: Matrix,
    /// Cached intermediates needed by backward (Cayley: M^{-1} and C).
    aux: Option<(Matrix, Matrix)>,
}

pub struct Tape {
    params: Vec<f64>,
    nodes: Vec<Node>,
}

/// Number of parameters behind a d x d skew-symmetric matrix.
pub fn skew_param_count(d: usize) -> usize {
    d * (d - 1) / 2
}

fn skew_from_params(p: &[f64], d: usize) -> Matrix {
    let mut a = Matrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i + 1..d {
            a.set(i, j, p[k]);
            a.set(j, i, -p[k]);
            k += 1;
        }
    }
    a
}

impl Tape {
    pub fn new(params: &[f64]) -> Self {
        Tape { params: params.to_vec(), nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.data.len(), 1);
        self.nodes[id].value.data[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value, aux: None });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn constant_vec(&mut self, v: &[f64]) -> NodeId {
        self.constant(Matrix::column(v))
    }

    pub fn affine(&mut self, w_off: usize, rows: usize, cols: usize, b_off: Option<usize>, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.rows, cols, "affine input dimension");
        let batch = xv.cols;
        let mut out = Matrix::zeros(rows, batch);
        for i in 0..rows {
            let w_row = &self.params[w_off + i * cols..w_off + (i + 1) * cols];
            let bias = b_off.map(|b| self.params[b + i]).unwrap_or(0.0);
            for bcol in 0..batch {
                let mut s = bias;
                for k in 0..cols {
                    s += w_row[k] * xv.get(k, bcol);
                }
                out.set(i, bcol, s);
            }
        }
        self.push(Op::Affine { w_off, rows, cols, b_off, x }, out)
    }

    pub fn lin_const(&mut self, w: Matrix, b: Option<Vec<f64>>, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.rows, w.cols, "lin_const input dimension");
        let mut out = w.matmul(xv).expect("lin_const shapes");
        if let Some(bias) = &b {
            for i in 0..out.rows {
                for j in 0..out.cols {
                    let v = out.get(i, j) + bias[i];
                    out.set(i, j, v);
                }
            }
        }
        self.push(Op::LinConst { w, x }, out)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "elementwise shape");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(av.rows, av.cols, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64) -> Matrix {
        let xv = &self.nodes[x].value;
        Matrix::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&v| f(v)).collect())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.unary(x, |v| v.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn sigmoid_node(&mut self, x: NodeId) -> NodeId {
        let v = self.unary(x, sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn tanh_node(&mut self, x: NodeId) -> NodeId {
        let v = self.unary(x, f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let cols = self.nodes[parts[0]].value.cols;
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.rows).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut r0 = 0;
        for &p in &parts {
            let pv = &self.nodes[p].value;
            assert_eq!(pv.cols, cols, "concat_rows batch");
            for i in 0..pv.rows {
                for j in 0..cols {
                    out.set(r0 + i, j, pv.get(i, j));
                }
            }
            r0 += pv.rows;
        }
        self.push(Op::ConcatRows(parts), out)
    }

    pub fn softmax_cross_entropy(&mut self, x: NodeId, classes: Vec<usize>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.cols, classes.len(), "one class per batch column");
        let mut loss = 0.0;
        for (b, &cls) in classes.iter().enumerate() {
            let logits = xv.col_vec(b);
            let p = softmax(&logits);
            loss -= p[cls].max(1e-300).ln();
        }
        loss /= classes.len() as f64;
        self.push(Op::SoftmaxCrossEntropy { x, classes }, Matrix::from_vec(1, 1, vec![loss]))
    }

    pub fn bce_with_logits(&mut self, x: NodeId, targets: Matrix) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!((xv.rows, xv.cols), (targets.rows, targets.cols), "bce shape");
        let mut loss = 0.0;
        for (&z, &t) in xv.data.iter().zip(&targets.data) {
            // log(1 + e^{-|z|}) form keeps this finite for large |z|.
            loss += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
        }
        loss /= xv.data.len() as f64;
        self.push(Op::BceWithLogits { x, targets }, Matrix::from_vec(1, 1, vec![loss]))
    }

    /// Orthogonal matrix from skew-symmetric parameters via the Cayley map,
    /// optionally left-multiplied by a fixed orthogonal initialization.
    pub fn cayley(&mut self, offset: usize, d: usize, init: Option<Matrix>) -> NodeId {
        let a = skew_from_params(&self.params[offset..offset + skew_param_count(d)], d);
        let mut m = Matrix::identity(d);
        let mut n = Matrix::identity(d);
        for i in 0..d {
            for j in 0..d {
                let v = a.get(i, j);
                m.set(i, j, m.get(i, j) - v);
                n.set(i, j, n.get(i, j) + v);
            }
        }
        let m_inv = m.inverse().expect("I - A is always invertible for skew A");
        let c = m_inv.matmul(&n).expect("cayley");
        let r = match &init {
            Some(r0) => r0.matmul(&c).expect("cayley init"),
            None => c.clone(),
        };
        let id = self.push(Op::CayleySkew { offset, d, init }, r);
        self.nodes[id].aux = Some((m_inv, c));
        id
    }

    /// DAS interchange: in R's coordinates, take the first k coordinates
    /// from source and the rest from base, column by column.
    pub fn das_patch(&mut self, r: NodeId, base: Matrix, source: Matrix, k: usize) -> NodeId {
        let rv = &self.nodes[r].value;
        let d = rv.rows;
        assert_eq!(base.rows, d);
        assert_eq!(source.rows, d);
        assert_eq!(base.cols, source.cols);
        assert!(k <= d, "subspace size exceeds dimension");
        let batch = base.cols;
        let mut out = Matrix::zeros(d, batch);
        for bcol in 0..batch {
            let ab = base.col_vec(bcol);
            let asrc = source.col_vec(bcol);
            let zb = rv.matvec_t(&ab).unwrap();
            let zs = rv.matvec_t(&asrc).unwrap();
            let z: Vec<f64> = (0..d).map(|i| if i < k { zs[i] } else { zb[i] }).collect();
            let y = rv.matvec(&z).unwrap();
            for i in 0..d {
                out.set(i, bcol, y[i]);
            }
        }
        self.push(Op::DasPatch { r, base, source, k }, out)
    }

    /// Backward pass from a scalar output node. Returns parameter gradients.
    pub fn backward(&self, output: NodeId) -> Vec<f64> {
        assert_eq!(self.nodes[output].value.data.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = self.nodes.iter().map(|_| None).collect();
        let mut pgrads = vec![0.0; self.params.len()];
        grads[output] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for id in (0..=output).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Affine { w_off, rows, cols, b_off, x } => {
                    let xv = &self.nodes[*x].value;
                    let gx = grads[*x].get_or_insert_with(|| Matrix::zeros(xv.rows, xv.cols));
                    for i in 0..*rows {
                        let w_row = &self.params[w_off + i * cols..w_off + (i + 1) * cols];
                        for bcol in 0..xv.cols {
                            let gi = g.get(i, bcol);
                            if gi == 0.0 {
                                continue;
                            }
                            for k in 0..*cols {
                                pgrads[w_off + i * cols + k] += gi * xv.get(k, bcol);
                                let cur = gx.get(k, bcol);
                                gx.set(k, bcol, cur + gi * w_row[k]);
                            }
                            if let Some(b) = b_off {
                                pgrads[b + i] += gi;
                            }
                        }
                    }
                }
                Op::LinConst { w, x } => {
                    let back = w.transpose().matmul(&g).unwrap();
                    accumulate(&mut grads[*x], back);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    let neg = Matrix::from_vec(g.rows, g.cols, g.data.iter().map(|v| -v).collect());
                    accumulate(&mut grads[*b], neg);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let ga = Matrix::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&bv.data).map(|(&gv, &b)| gv * b).collect(),
                    );
                    let gb = Matrix::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&av.data).map(|(&gv, &a)| gv * a).collect(),
                    );
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Relu(x) => {
                    let y = &node.value;
                    let gx = Matrix::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&y.data).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 }).collect(),
                    );
                    accumulate(&mut grads[*x], gx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let gx = Matrix::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&y.data).map(|(&gv, &v)| gv * v * (1.0 - v)).collect(),
                    );
                    accumulate(&mut grads[*x], gx);
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let gx = Matrix::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&y.data).map(|(&gv, &v)| gv * (1.0 - v * v)).collect(),
                    );
                    accumulate(&mut grads[*x], gx);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let pv_rows = self.nodes[p].value.rows;
                        let mut gp = Matrix::zeros(pv_rows, g.cols);
                        for i in 0..pv_rows {
                            for j in 0..g.cols {
                                gp.set(i, j, g.get(r0 + i, j));
                            }
                        }
                        accumulate(&mut grads[p], gp);
                        r0 += pv_rows;
                    }
                }
                Op::SoftmaxCrossEntropy { x, classes } => {
                    let xv = &self.nodes[*x].value;
                    let scale = g.data[0] / classes.len() as f64;
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for (b, &cls) in classes.iter().enumerate() {
                        let p = softmax(&xv.col_vec(b));
                        for i in 0..xv.rows {
                            let t = if i == cls { 1.0 } else { 0.0 };
                            gx.set(i, b, scale * (p[i] - t));
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::BceWithLogits { x, targets } => {
                    let xv = &self.nodes[*x].value;
                    let scale = g.data[0] / xv.data.len() as f64;
                    let gx = Matrix::from_vec(
                        xv.rows,
                        xv.cols,
                        xv.data
                            .iter()
                            .zip(&targets.data)
                            .map(|(&z, &t)| scale * (sigmoid(z) - t))
                            .collect(),
                    );
                    accumulate(&mut grads[*x], gx);
                }
                Op::CayleySkew { offset, d, init } => {
                    let (m_inv, c) = node.aux.as_ref().expect("cayley aux");
                    // R = R0 M^{-1} (I + A); dL/dA = M^{-T} R0^T G (C + I)^T.
                    let g_eff = match init {
                        Some(r0) => r0.transpose().matmul(&g).unwrap(),
                        None => g.clone(),
                    };
                    let mut c_plus_i = c.clone();
                    for i in 0..*d {
                        let v = c_plus_i.get(i, i) + 1.0;
                        c_plus_i.set(i, i, v);
                    }
                    let grad_a = m_inv
                        .transpose()
                        .matmul(&g_eff)
                        .unwrap()
                        .matmul(&c_plus_i.transpose())
                        .unwrap();
                    let mut k = 0;
                    for i in 0..*d {
                        for j in i + 1..*d {
                            pgrads[offset + k] += grad_a.get(i, j) - grad_a.get(j, i);
                            k += 1;
                        }
                    }
                }
                Op::DasPatch { r, base, source, k } => {
                    let rv = &self.nodes[*r].value;
                    let d = rv.rows;
                    let mut gr = Matrix::zeros(d, d);
                    for bcol in 0..base.cols {
                        let ab = base.col_vec(bcol);
                        let asrc = source.col_vec(bcol);
                        let zb = rv.matvec_t(&ab).unwrap();
                        let zs = rv.matvec_t(&asrc).unwrap();
                        let z: Vec<f64> = (0..d).map(|i| if i < *k { zs[i] } else { zb[i] }).collect();
                        let gout = g.col_vec(bcol);
                        // out = R z: dR += gout z^T, dz = R^T gout.
                        let dz = rv.matvec_t(&gout).unwrap();
                        for i in 0..d {
                            for j in 0..d {
                                let mut v = gr.get(i, j) + gout[i] * z[j];
                                // zb = R^T ab contributes on kept coords, zs on swapped.
                                let dzj = if j < *k { 0.0 } else { dz[j] };
                                let dsj = if j < *k { dz[j] } else { 0.0 };
                                v += ab[i] * dzj + asrc[i] * dsj;
                                gr.set(i, j, v);
                            }
                        }
                    }
                    accumulate(&mut grads[*r], gr);
                }
            }
        }
        pgrads
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Max relative error between analytic gradients and central finite
/// differences (h = 1e-4) of `f` at `params`. `f` returns the scalar value
/// and its analytic gradient.
pub fn grad_check<F>(f: F, params: &[f64]) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let h = 1e-4;
    let (_, analytic) = f(params);
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let (fp, _) = f(&p);
        p[i] = orig - h;
        let (fm, _) = f(&p);
        p[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeedStream;
    use rand::Rng;

    #[test]
    fn grad_check_quadratic_form() {
        // f(p) = sum_i i * p_i^2
        let f = |p: &[f64]| {
            let val = p.iter().enumerate().map(|(i, &x)| i as f64 * x * x).sum::<f64>();
            let grad = p.iter().enumerate().map(|(i, &x)| 2.0 * i as f64 * x).collect();
            (val, grad)
        };
        let err = grad_check(f, &[0.3, -1.1, 0.7, 2.0]);
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_two_layer_relu_mlp() {
        // 3 -> 4 -> 2 with softmax CE, weights and biases on both layers.
        let n_params = 4 * 3 + 4 + 2 * 4 + 2;
        let mut rng = SeedStream::new(11).rng("tape-mlp");
        let params: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let x = Matrix::from_vec(3, 2, vec![0.5, -0.2, 0.1, 0.9, -0.4, 0.3]);
        let f = move |p: &[f64]| {
            let mut t = Tape::new(p);
            let xin = t.constant(x.clone());
            let h = t.affine(0, 4, 3, Some(12), xin);
            let h = t.relu(h);
            let logits = t.affine(16, 2, 4, Some(24), h);
            let loss = t.softmax_cross_entropy(logits, vec![0, 1]);
            let grads = t.backward(loss);
            (t.scalar(loss), grads)
        };
        let err = grad_check(f, &params);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn grad_check_mul_tanh_sigmoid_chain() {
        let mut rng = SeedStream::new(13).rng("tape-chain");
        let params: Vec<f64> = (0..10).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let f = |p: &[f64]| {
            let mut t = Tape::new(p);
            let x = t.constant_vec(&[0.4, -0.7]);
            let a = t.affine(0, 2, 2, Some(4), x);
            let a = t.tanh_node(a);
            let b = t.affine(6, 2, 2, None, x);
            let b = t.sigmoid_node(b);
            let m = t.mul(a, b);
            let loss = t.bce_with_logits(m, Matrix::from_vec(2, 1, vec![1.0, 0.0]));
            let grads = t.backward(loss);
            (t.scalar(loss), grads)
        };
        let err = grad_check(f, &params);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn cayley_is_orthogonal() {
        let mut rng = SeedStream::new(17).rng("tape-cayley");
        let d = 5;
        let params: Vec<f64> = (0..skew_param_count(d)).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut t = Tape::new(&params);
        let r = t.cayley(0, d, None);
        assert!(t.value(r).orthonormality_defect() < 1e-10);
    }

    #[test]
    fn grad_check_cayley_das_patch() {
        let mut rng = SeedStream::new(19).rng("tape-das");
        let d = 4;
        let params: Vec<f64> = (0..skew_param_count(d)).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let base = Matrix::from_vec(d, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let source = Matrix::from_vec(d, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = Matrix::from_vec(2, d, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let f = move |p: &[f64]| {
            let mut t = Tape::new(p);
            let r = t.cayley(0, d, None);
            let patched = t.das_patch(r, base.clone(), source.clone(), 2);
            let logits = t.lin_const(w.clone(), None, patched);
            let loss = t.softmax_cross_entropy(logits, vec![1, 0]);
            let grads = t.backward(loss);
            (t.scalar(loss), grads)
        };
        let err = grad_check(f, &params);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn das_patch_full_rank_returns_source() {
        let mut rng = SeedStream::new(23).rng("tape-das-full");
        let d = 4;
        let params: Vec<f64> = (0..skew_param_count(d)).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let base = Matrix::from_vec(d, 1, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let source = Matrix::from_vec(d, 1, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut t = Tape::new(&params);
        let r = t.cayley(0, d, None);
        let patched = t.das_patch(r, base, source.clone(), d);
        for i in 0..d {
            assert!((t.value(patched).get(i, 0) - source.get(i, 0)).abs() < 1e-10);
        }
    }
}
