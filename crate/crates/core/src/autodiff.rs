//! A small reverse-mode autodiff tape over row-major 2-D arrays.
//!
//! Only the operations the models need are provided. Losses with known
//! closed-form gradients (softmax cross-entropy, the IRM dummy-scale
//! penalty) are fused into single nodes.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Gather(Var, Rc<[usize]>),
    Concat(Vec<Var>),
    Propagate {
        h: Var,
        weight: Option<Var>,
        edges: Rc<Messages>,
    },
    SegmentMean {
        a: Var,
        segment: Rc<[usize]>,
        inv_counts: Vec<f64>,
    },
    RowScale(Var, Vec<f64>),
    SumAll(Var),
    Square(Var),
    StraightThrough(Var),
    CrossEntropy {
        logits: Var,
        targets: Array2<f64>,
        probs: Array2<f64>,
    },
    IrmPenalty {
        logits: Var,
        targets: Array2<f64>,
        probs: Array2<f64>,
        slope: f64,
    },
}

/// Directed message list: message `k` flows `src[k] -> dst[k]` scaled by
/// row `weight_row[k]` of the edge-weight column.
#[derive(Debug, Clone, Default)]
pub struct Messages {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub weight_row: Vec<usize>,
}

impl Messages {
    /// Both directions of every undirected edge; edge `e` uses weight row `e`.
    pub fn undirected(edges: &[(usize, usize)]) -> Messages {
        let mut m = Messages {
            src: Vec::with_capacity(2 * edges.len()),
            dst: Vec::with_capacity(2 * edges.len()),
            weight_row: Vec::with_capacity(2 * edges.len()),
        };
        for (e, &(u, v)) in edges.iter().enumerate() {
            m.src.extend([u, v]);
            m.dst.extend([v, u]);
            m.weight_row.extend([e, e]);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    softmax_rows(logits)
}

pub const LOG_EPS: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a + bias` with a `1 x c` bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddBias(a, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(value, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Ln(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather(&mut self, a: Var, rows: Rc<[usize]>) -> Var {
        let value = self.value(a).select(Axis(0), &rows);
        let rg = self.rg(a);
        self.push(value, Op::Gather(a, rows), rg)
    }

    /// Stacks values with equal column counts vertically.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    /// Weighted neighbor sum: `out[dst] += w[row] * h[src]` for every message.
    /// Without a weight every message has weight 1.
    pub fn propagate(&mut self, h: Var, weight: Option<Var>, edges: Rc<Messages>) -> Var {
        let hv = self.value(h);
        let (n, c) = hv.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        {
            let hs = hv.as_slice().expect("standard layout");
            let os = out.as_slice_mut().expect("standard layout");
            let w = weight.map(|w| self.value(w).as_slice().expect("standard layout"));
            for k in 0..edges.len() {
                let (s, d) = (edges.src[k], edges.dst[k]);
                let wk = w.map_or(1.0, |w| w[edges.weight_row[k]]);
                let src = &hs[s * c..(s + 1) * c];
                let dst = &mut os[d * c..(d + 1) * c];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += wk * x;
                }
            }
        }
        let rg = self.rg(h) || weight.is_some_and(|w| self.rg(w));
        self.push(out, Op::Propagate { h, weight, edges }, rg)
    }

    /// Mean of rows grouped by `segment[row]` into `num_segments` rows.
    /// Empty segments produce zero rows.
    pub fn segment_mean(&mut self, a: Var, segment: Rc<[usize]>, num_segments: usize) -> Var {
        let av = self.value(a);
        let c = av.ncols();
        let mut counts = vec![0usize; num_segments];
        for &s in segment.iter() {
            counts[s] += 1;
        }
        let inv_counts: Vec<f64> = counts
            .iter()
            .map(|&k| if k == 0 { 0.0 } else { 1.0 / k as f64 })
            .collect();
        let mut out = Array2::<f64>::zeros((num_segments, c));
        for (row, &s) in av.rows().into_iter().zip(segment.iter()) {
            let mut o = out.row_mut(s);
            o.scaled_add(inv_counts[s], &row);
        }
        let rg = self.rg(a);
        self.push(
            out,
            Op::SegmentMean {
                a,
                segment,
                inv_counts,
            },
            rg,
        )
    }

    /// Multiplies row `i` by the constant `scales[i]`.
    pub fn row_scale(&mut self, a: Var, scales: Vec<f64>) -> Var {
        let mut value = self.value(a).clone();
        for (mut row, &s) in value.rows_mut().into_iter().zip(&scales) {
            row *= s;
        }
        let rg = self.rg(a);
        self.push(value, Op::RowScale(a, scales), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Sum of scalars.
    pub fn sum(&mut self, items: &[Var]) -> Var {
        match items {
            [] => self.scalar(0.0),
            [first, rest @ ..] => rest.iter().fold(*first, |acc, &x| self.add(acc, x)),
        }
    }

    /// Forward value `hard`, gradient passed unchanged to `relaxed`.
    pub fn straight_through(&mut self, relaxed: Var, hard: Array2<f64>) -> Var {
        assert_eq!(hard.dim(), self.value(relaxed).dim());
        let rg = self.rg(relaxed);
        self.push(hard, Op::StraightThrough(relaxed), rg)
    }

    /// Mean over rows of `-sum_c t_c ln(softmax(z)_c + eps)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let probs = softmax_rows(self.value(logits));
        assert_eq!(probs.dim(), targets.dim(), "cross_entropy: target shape");
        let n = probs.nrows().max(1) as f64;
        let loss = Zip::from(&probs)
            .and(&targets)
            .fold(0.0, |acc, &p, &t| acc - t * (p + LOG_EPS).ln())
            / n;
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    /// Squared derivative of the mean cross-entropy of `w * logits` with
    /// respect to the scalar `w`, at `w = 1`. Target rows must sum to 1.
    pub fn irm_penalty(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let z = self.value(logits);
        let probs = softmax_rows(z);
        assert_eq!(probs.dim(), targets.dim(), "irm_penalty: target shape");
        let n = probs.nrows().max(1) as f64;
        // d/dw CE(w z) at w = 1 is mean_i (p_i - t_i) . z_i
        let slope = Zip::from(&probs)
            .and(&targets)
            .and(z)
            .fold(0.0, |acc, &p, &t, &zz| acc + (p - t) * zz)
            / n;
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), slope * slope),
            Op::IrmPenalty {
                logits,
                targets,
                probs,
                slope,
            },
            rg,
        )
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::AddBias(a, bias) => {
                acc(*a, g.clone());
                if self.rg(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.rg(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Affine(a, s) => acc(*a, g * *s),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Ln(a) => acc(*a, g / self.value(*a)),
            Op::Square(a) => acc(*a, g * &self.value(*a).mapv(|x| 2.0 * x)),
            Op::Gather(a, rows) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (gr, &r) in g.rows().into_iter().zip(rows.iter()) {
                    let mut dr = d.row_mut(r);
                    dr += &gr;
                }
                acc(*a, d);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.rg(p) {
                        acc(p, g.slice(ndarray::s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::Propagate { h, weight, edges } => {
                let c = g.ncols();
                let gs = g.as_slice().expect("standard layout");
                let w = weight.map(|w| self.value(w).as_slice().expect("standard layout"));
                if self.rg(*h) {
                    let mut dh = Array2::<f64>::zeros(self.value(*h).dim());
                    let ds = dh.as_slice_mut().expect("standard layout");
                    for k in 0..edges.len() {
                        let (s, d) = (edges.src[k], edges.dst[k]);
                        let wk = w.map_or(1.0, |w| w[edges.weight_row[k]]);
                        let gd = &gs[d * c..(d + 1) * c];
                        for (o, &x) in ds[s * c..(s + 1) * c].iter_mut().zip(gd) {
                            *o += wk * x;
                        }
                    }
                    acc(*h, dh);
                }
                if let Some(wv) = weight.filter(|w| self.rg(*w)) {
                    let hs = self.value(*h).as_slice().expect("standard layout");
                    let mut dw = Array2::<f64>::zeros(self.value(wv).dim());
                    let dws = dw.as_slice_mut().expect("standard layout");
                    for k in 0..edges.len() {
                        let (s, d) = (edges.src[k], edges.dst[k]);
                        let dot: f64 = gs[d * c..(d + 1) * c]
                            .iter()
                            .zip(&hs[s * c..(s + 1) * c])
                            .map(|(a, b)| a * b)
                            .sum();
                        dws[edges.weight_row[k]] += dot;
                    }
                    acc(wv, dw);
                }
            }
            Op::SegmentMean {
                a,
                segment,
                inv_counts,
            } => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (mut dr, &s) in d.rows_mut().into_iter().zip(segment.iter()) {
                    dr.scaled_add(inv_counts[s], &g.row(s));
                }
                acc(*a, d);
            }
            Op::RowScale(a, scales) => {
                let mut d = g.clone();
                for (mut row, &s) in d.rows_mut().into_iter().zip(scales) {
                    row *= s;
                }
                acc(*a, d);
            }
            Op::SumAll(a) => acc(*a, Array2::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::StraightThrough(a) => acc(*a, g.clone()),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = probs.nrows().max(1) as f64;
                let scale = g[[0, 0]] / n;
                let mut d = Array2::zeros(probs.dim());
                for ((mut dr, p), t) in d.rows_mut().into_iter().zip(probs.rows()).zip(targets.rows()) {
                    // a_c = t_c p_c / (p_c + eps); dL/dz_k = -a_k + p_k sum(a)
                    let a: Vec<f64> = p.iter().zip(t).map(|(&p, &t)| t * p / (p + LOG_EPS)).collect();
                    let sa: f64 = a.iter().sum();
                    for ((d, &ak), &pk) in dr.iter_mut().zip(&a).zip(p) {
                        *d = scale * (pk * sa - ak);
                    }
                }
                acc(*logits, d);
            }
            Op::IrmPenalty {
                logits,
                targets,
                probs,
                slope,
            } => {
                let n = probs.nrows().max(1) as f64;
                let scale = g[[0, 0]] * 2.0 * slope / n;
                let z = self.value(*logits);
                let mut d = Array2::zeros(probs.dim());
                for (((mut dr, p), t), zr) in d
                    .rows_mut()
                    .into_iter()
                    .zip(probs.rows())
                    .zip(targets.rows())
                    .zip(z.rows())
                {
                    // d/dz_k [(p - t) . z] = (p_k - t_k) + p_k z_k - p_k (p . z)
                    let pz: f64 = p.iter().zip(zr).map(|(a, b)| a * b).sum();
                    for k in 0..dr.len() {
                        dr[k] = scale * ((p[k] - t[k]) + p[k] * zr[k] - p[k] * pz);
                    }
                }
                acc(*logits, d);
            }
        }
    }
}
