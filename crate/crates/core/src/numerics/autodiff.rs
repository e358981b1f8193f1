//! Reverse-mode differentiation over a closed primitive vocabulary.
//!
//! A [`Graph`] records a forward pass built from dense layers, SiLU/ReLU,
//! elementwise add/scale, column concatenation and a mean-squared-error head.
//! Parameters enter the graph by segment name; [`grad`] runs the closure,
//! back-propagates from its scalar output and returns a gradient with the
//! same segment layout as the parameters. All intermediate arithmetic is f64.

use crate::error::{Error, Result};

use super::{ParamVector, Tensor};

/// Dense row-major f64 matrix used for graph values.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self {
            rows,
            cols,
            data: data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("matrix extents are consistent")
    }

    pub fn scalar(&self) -> f64 {
        self.data[0]
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param { offset: usize },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Act { x: NodeId, kind: Activation },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    Concat { a: NodeId, b: NodeId },
    Mse { pred: NodeId, target: NodeId },
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamVector,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Gradients {
    params: Vec<f64>,
    nodes: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn param_values(&self) -> &[f64] {
        &self.params
    }

    /// Gradient with respect to a node created by [`Graph::variable`].
    pub fn wrt(&self, id: NodeId) -> Option<&Mat> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamVector) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Input whose gradient is retained by the backward pass.
    pub fn variable(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Variable)
    }

    /// Parameter segment as a matrix: rank-2 `[in, out]` segments keep their
    /// shape, rank-1 segments become a single row.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let seg = self
            .params
            .layout()
            .find(name)
            .ok_or_else(|| Error::Layout(format!("no parameter segment `{name}`")))?
            .clone();
        let (rows, cols) = match seg.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Shape(format!(
                    "segment `{name}` has unsupported rank {}",
                    other.len()
                )))
            }
        };
        let value = Mat::from_f32(rows, cols, self.params.segment_values(&seg));
        Ok(self.push(value, Op::Param { offset: seg.offset }))
    }

    /// `x · w + b` with `x: [n, in]`, `w: [in, out]`, `b: [1, out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols != wv.rows || bv.rows != 1 || bv.cols != wv.cols {
            return Err(Error::Shape(format!(
                "dense: x [{}, {}], w [{}, {}], b [{}, {}]",
                xv.rows, xv.cols, wv.rows, wv.cols, bv.rows, bv.cols
            )));
        }
        let (n, k_dim, m) = (xv.rows, xv.cols, wv.cols);
        let mut out = Mat::zeros(n, m);
        for i in 0..n {
            let orow = &mut out.data[i * m..(i + 1) * m];
            orow.copy_from_slice(&bv.data);
            let xrow = &xv.data[i * k_dim..(i + 1) * k_dim];
            for (k, &xik) in xrow.iter().enumerate() {
                let wrow = &wv.data[k * m..(k + 1) * m];
                for (o, &wkj) in orow.iter_mut().zip(wrow) {
                    *o += xik * wkj;
                }
            }
        }
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let mut v = self.value(x).clone();
        match kind {
            Activation::Silu => v.data.iter_mut().for_each(|z| *z *= sigmoid(*z)),
            Activation::Relu => v.data.iter_mut().for_each(|z| *z = z.max(0.0)),
        }
        self.push(v, Op::Act { x, kind })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if (av.rows, av.cols) != (bv.rows, bv.cols) {
            return Err(Error::Shape("add: operand shapes differ".into()));
        }
        let mut v = av.clone();
        v.add_assign(bv);
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|z| *z *= factor);
        self.push(v, Op::Scale { x, factor })
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows != bv.rows {
            return Err(Error::Shape("concat: row counts differ".into()));
        }
        let cols = av.cols + bv.cols;
        let mut v = Mat::zeros(av.rows, cols);
        for i in 0..av.rows {
            v.data[i * cols..i * cols + av.cols]
                .copy_from_slice(&av.data[i * av.cols..(i + 1) * av.cols]);
            v.data[i * cols + av.cols..(i + 1) * cols]
                .copy_from_slice(&bv.data[i * bv.cols..(i + 1) * bv.cols]);
        }
        Ok(self.push(v, Op::Concat { a, b }))
    }

    /// Mean over rows of the squared row-wise L2 residual; a `[1, 1]` node.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if (pv.rows, pv.cols) != (tv.rows, tv.cols) {
            return Err(Error::Shape("mse: prediction and target shapes differ".into()));
        }
        if pv.rows == 0 {
            return Err(Error::Config("mse over an empty batch".into()));
        }
        let sum: f64 = pv
            .data
            .iter()
            .zip(&tv.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let v = Mat {
            rows: 1,
            cols: 1,
            data: vec![sum / pv.rows as f64],
        };
        Ok(self.push(v, Op::Mse { pred, target }))
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let rv = self.value(root);
        let seed = Mat {
            rows: rv.rows,
            cols: rv.cols,
            data: vec![1.0; rv.data.len()],
        };
        self.backward_seeded(root, seed)
    }

    /// Vector-Jacobian product: back-propagates `seed` from node `root`.
    pub fn backward_seeded(&self, root: NodeId, seed: Mat) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = vec![0.0; self.params.len()];
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Constant => {}
                Op::Variable => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Param { offset } => {
                    for (p, v) in params[offset..offset + g.data.len()].iter_mut().zip(&g.data) {
                        *p += v;
                    }
                }
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    let (n, k_dim, m) = (xv.rows, xv.cols, wv.cols);
                    let mut gb = Mat::zeros(1, m);
                    let mut gw = Mat::zeros(k_dim, m);
                    let mut gx = Mat::zeros(n, k_dim);
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for (acc, v) in gb.data.iter_mut().zip(grow) {
                            *acc += v;
                        }
                        let xrow = &xv.data[i * k_dim..(i + 1) * k_dim];
                        let gxrow = &mut gx.data[i * k_dim..(i + 1) * k_dim];
                        for k in 0..k_dim {
                            let wrow = &wv.data[k * m..(k + 1) * m];
                            gxrow[k] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            let xik = xrow[k];
                            let gwrow = &mut gw.data[k * m..(k + 1) * m];
                            for (acc, v) in gwrow.iter_mut().zip(grow) {
                                *acc += xik * v;
                            }
                        }
                    }
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, w, gw);
                    accumulate(&mut grads, b, gb);
                }
                Op::Act { x, kind } => {
                    let xv = self.value(x);
                    let mut gx = g;
                    match kind {
                        Activation::Silu => {
                            for (gv, &z) in gx.data.iter_mut().zip(&xv.data) {
                                let s = sigmoid(z);
                                *gv *= s * (1.0 + z * (1.0 - s));
                            }
                        }
                        Activation::Relu => {
                            for (gv, &z) in gx.data.iter_mut().zip(&xv.data) {
                                if z <= 0.0 {
                                    *gv = 0.0;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Scale { x, factor } => {
                    let mut gx = g;
                    gx.data.iter_mut().for_each(|v| *v *= factor);
                    accumulate(&mut grads, x, gx);
                }
                Op::Concat { a, b } => {
                    let (ac, bc) = (self.value(a).cols, self.value(b).cols);
                    let cols = ac + bc;
                    let rows = g.rows;
                    let mut ga = Mat::zeros(rows, ac);
                    let mut gbm = Mat::zeros(rows, bc);
                    for i in 0..rows {
                        ga.data[i * ac..(i + 1) * ac]
                            .copy_from_slice(&g.data[i * cols..i * cols + ac]);
                        gbm.data[i * bc..(i + 1) * bc]
                            .copy_from_slice(&g.data[i * cols + ac..(i + 1) * cols]);
                    }
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gbm);
                }
                Op::Mse { pred, target } => {
                    let (pv, tv) = (self.value(pred), self.value(target));
                    let c = 2.0 * g.scalar() / pv.rows as f64;
                    let mut gp = Mat::zeros(pv.rows, pv.cols);
                    for ((o, p), t) in gp.data.iter_mut().zip(&pv.data).zip(&tv.data) {
                        *o = c * (p - t);
                    }
                    let mut gt = gp.clone();
                    gt.data.iter_mut().for_each(|v| *v = -*v);
                    accumulate(&mut grads, pred, gp);
                    accumulate(&mut grads, target, gt);
                }
            }
        }
        Gradients {
            params,
            nodes: grads,
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss and gradient of the scalar graph built by `f` at `params`.
pub fn grad<F>(params: &ParamVector, f: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Graph) -> Result<NodeId>,
{
    let mut graph = Graph::new(params);
    let root = f(&mut graph)?;
    let loss = graph.value(root).scalar();
    let grads = graph.backward(root);
    let gradient = ParamVector::new(
        params.layout().clone(),
        grads.params.iter().map(|&v| v as f32).collect(),
    )?;
    if !loss.is_finite() || !gradient.is_finite() {
        let segment = params
            .first_non_finite_segment()
            .or_else(|| gradient.first_non_finite_segment())
            .unwrap_or("<loss>")
            .to_string();
        return Err(Error::numeric("loss evaluation", segment));
    }
    Ok((loss, gradient))
}

/// Forward-only evaluation of the scalar graph built by `f`.
pub fn eval_loss<F>(params: &ParamVector, f: F) -> Result<f64>
where
    F: FnOnce(&mut Graph) -> Result<NodeId>,
{
    let mut graph = Graph::new(params);
    let root = f(&mut graph)?;
    Ok(graph.value(root).scalar())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_of_scalar() {
        let w = ParamVector::from_slice("w", &[3.0]);
        let (loss, g) = grad(&w, |gr| {
            let p = gr.param("w")?;
            let zero = gr.constant(Mat::zeros(1, 1));
            gr.mse(p, zero)
        })
        .unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(g.values(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let w = ParamVector::from_slice("w", &[1.5, -2.0]);
        let (loss, g) = grad(&w, |gr| {
            let a = gr.constant(Mat::from_f32(1, 2, &[1.0, 2.0]));
            let b = gr.constant(Mat::zeros(1, 2));
            gr.mse(a, b)
        })
        .unwrap();
        assert_eq!(loss, 5.0);
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_names_segment() {
        let layout = std::sync::Arc::new(crate::numerics::Layout::new([
            ("ok", vec![1]),
            ("bad", vec![1]),
        ]));
        let w = ParamVector::new(layout, vec![1.0, f32::INFINITY]).unwrap();
        let err = grad(&w, |gr| {
            let p = gr.param("bad")?;
            let zero = gr.constant(Mat::zeros(1, 1));
            gr.mse(p, zero)
        })
        .unwrap_err();
        match err {
            Error::Numeric { segment, .. } => assert_eq!(segment, "bad"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn variable_gradient_flows_through_both_paths() {
        // L(z) = (2z - z)^2 = z^2 → dL/dz = 2z
        let w = ParamVector::from_slice("unused", &[0.0]);
        let mut g = Graph::new(&w);
        let z = g.variable(Mat::from_f32(1, 1, &[1.5]));
        let two_z = g.scale(z, 2.0);
        let loss = g.mse(two_z, z).unwrap();
        let grads = g.backward(loss);
        assert!((grads.wrt(z).unwrap().scalar() - 3.0).abs() < 1e-12);
    }
}
