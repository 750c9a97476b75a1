//! Append-only Wengert list with reverse-mode accumulation.
//!
//! Every node stores its value and the local partial derivative with respect to
//! each of its inputs. Inputs are always older nodes, so a single reverse sweep
//! over the node list visits everything in a valid topological order.

use std::collections::HashMap;

use crate::stable;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Operation tag recorded for each node; surfaced in diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Param,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    Offset,
    Square,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    LogSigmoid,
    LogSumExp,
    Sum,
    Dot,
    MatVec,
    Clamp,
}

/// Raised when a value or partial on the tape stops being finite.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite {what} at tape node {node} ({op:?})")]
pub struct NonFinite {
    pub op: Op,
    pub node: usize,
    pub what: &'static str,
}

#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<f64>,
    edge_start: Vec<u32>,
    edges: Vec<(u32, f64)>,
    params: HashMap<usize, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    pub fn values(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.value(v)).collect()
    }

    pub fn op(&self, v: Var) -> Op {
        self.ops[v.index()]
    }

    fn push(&mut self, op: Op, value: f64, edges: impl IntoIterator<Item = (Var, f64)>) -> Var {
        let id = self.values.len();
        self.ops.push(op);
        self.values.push(value);
        self.edge_start.push(self.edges.len() as u32);
        self.edges
            .extend(edges.into_iter().map(|(v, p)| (v.0, p)));
        Var(id as u32)
    }

    /// Leaf for trainable parameter `index`. Repeated calls with the same index
    /// return the same node, so gradients accumulate in one place.
    pub fn param(&mut self, index: usize, value: f64) -> Var {
        if let Some(&v) = self.params.get(&index) {
            return v;
        }
        let v = self.push(Op::Param, value, []);
        self.params.insert(index, v);
        v
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Op::Const, value, [])
    }

    pub fn constants(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&x| self.constant(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add, v, [(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub, v, [(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(Op::Mul, x * y, [(a, y), (b, x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(Op::Div, x / y, [(a, 1.0 / y), (b, -x / (y * y))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(Op::Neg, v, [(a, -1.0)])
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = c * self.value(a);
        self.push(Op::Scale, v, [(a, c)])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::Offset, v, [(a, 1.0)])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(Op::Square, x * x, [(a, 2.0 * x)])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.push(Op::Exp, e, [(a, e)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(Op::Log, x.ln(), [(a, 1.0 / x)])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.push(Op::Tanh, t, [(a, 1.0 - t * t)])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = stable::sigmoid(self.value(a));
        self.push(Op::Sigmoid, s, [(a, s * (1.0 - s))])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(Op::Softplus, stable::softplus(x), [(a, stable::sigmoid(x))])
    }

    /// `log σ(a)`; derivative `σ(-a)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(Op::LogSigmoid, stable::log_sigmoid(x), [(a, stable::sigmoid(-x))])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|&x| self.value(x)).sum();
        self.push(Op::Sum, v, xs.iter().map(|&x| (x, 1.0)).collect::<Vec<_>>())
    }

    /// Max-shifted log-sum-exp; partials are the softmax weights.
    pub fn log_sum_exp(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "log_sum_exp of an empty set");
        let vals = self.values(xs);
        let lse = stable::log_sum_exp(&vals);
        let edges: Vec<_> = xs
            .iter()
            .zip(&vals)
            .map(|(&x, &v)| (x, (v - lse).exp()))
            .collect();
        self.push(Op::LogSumExp, lse, edges)
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot length mismatch");
        let mut v = 0.0;
        let mut edges = Vec::with_capacity(2 * a.len());
        for (&x, &y) in a.iter().zip(b) {
            let (xv, yv) = (self.value(x), self.value(y));
            v += xv * yv;
            edges.push((x, yv));
            edges.push((y, xv));
        }
        self.push(Op::Dot, v, edges)
    }

    /// `M x` with `M` given row-major as `rows * x.len()` nodes.
    pub fn matvec(&mut self, m: &[Var], x: &[Var]) -> Vec<Var> {
        let cols = x.len();
        assert!(cols > 0 && m.len().is_multiple_of(cols), "matvec shape mismatch");
        let xv = self.values(x);
        m.chunks(cols)
            .map(|row| {
                let mut v = 0.0;
                let mut edges = Vec::with_capacity(2 * cols);
                for ((&w, &xi), &xval) in row.iter().zip(x).zip(&xv) {
                    let wv = self.value(w);
                    v += wv * xval;
                    edges.push((w, xval));
                    edges.push((xi, wv));
                }
                self.push(Op::MatVec, v, edges)
            })
            .collect()
    }

    /// Clamp to `[lo, hi]`; the partial is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a);
        let (v, d) = if x < lo {
            (lo, 0.0)
        } else if x > hi {
            (hi, 0.0)
        } else {
            (x, 1.0)
        };
        self.push(Op::Clamp, v, [(a, d)])
    }

    /// First node whose value is NaN or infinite, if any.
    pub fn check_values(&self) -> Result<(), NonFinite> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(node) => Err(NonFinite { op: self.ops[node], node, what: "value" }),
            None => Ok(()),
        }
    }

    /// Reverse sweep from `root`. Fails on the first non-finite partial that
    /// carries a nonzero adjoint.
    pub fn backward(&self, root: Var) -> Result<Gradients, NonFinite> {
        let n = root.index() + 1;
        let mut adj = vec![0.0f64; n];
        adj[root.index()] = 1.0;
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            if !a.is_finite() {
                return Err(NonFinite { op: self.ops[i], node: i, what: "adjoint" });
            }
            let start = self.edge_start[i] as usize;
            let end = self
                .edge_start
                .get(i + 1)
                .map_or(self.edges.len(), |&e| e as usize);
            for &(j, p) in &self.edges[start..end] {
                if !p.is_finite() {
                    return Err(NonFinite { op: self.ops[i], node: i, what: "partial" });
                }
                adj[j as usize] += a * p;
            }
        }
        let mut params: Vec<(usize, f64)> = self
            .params
            .iter()
            .filter(|(_, v)| v.index() < n)
            .map(|(&idx, v)| (idx, adj[v.index()]))
            .collect();
        params.sort_unstable_by_key(|&(idx, _)| idx);
        Ok(Gradients { adjoints: adj, params })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
    params: Vec<(usize, f64)>,
}

impl Gradients {
    /// d root / d v. Nodes created after the root have zero gradient.
    pub fn wrt(&self, v: Var) -> f64 {
        self.adjoints.get(v.index()).copied().unwrap_or(0.0)
    }

    /// Sparse gradient over parameter leaves, sorted by parameter index.
    pub fn params(&self) -> &[(usize, f64)] {
        &self.params
    }

    /// Scatter the sparse parameter gradient into a dense vector of length `len`.
    pub fn dense(&self, len: usize) -> Vec<f64> {
        let mut g = vec![0.0; len];
        self.add_into(&mut g, 1.0);
        g
    }

    pub fn add_into(&self, dst: &mut [f64], weight: f64) {
        for &(i, g) in &self.params {
            dst[i] += weight * g;
        }
    }
}
