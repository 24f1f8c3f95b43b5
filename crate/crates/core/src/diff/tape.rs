//! Scalar reverse-mode tape.
//!
//! Every node stores its value and the local partial derivative with respect
//! to each parent; `backward` sweeps the nodes once in reverse.

use crate::diff::{GradStore, Objective, ParamStore};
use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
struct Node<T> {
    value: T,
    parents: Vec<(usize, T)>,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    first_bad: Option<&'static str>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            first_bad: None,
        }
    }

    fn push(&mut self, op: &'static str, value: T, parents: Vec<(usize, T)>) -> Var {
        if self.first_bad.is_none()
            && (!value.is_finite() || parents.iter().any(|(_, d)| !d.is_finite()))
        {
            self.first_bad = Some(op);
        }
        self.nodes.push(Node { value, parents });
        Var(self.nodes.len() - 1)
    }

    pub fn var(&mut self, value: T) -> Var {
        self.push("input", value, Vec::new())
    }

    pub fn constant(&mut self, value: T) -> Var {
        self.var(value)
    }

    pub fn value(&self, v: Var) -> T {
        self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The first operation that produced a non-finite value or partial.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_bad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push("add", v, vec![(a.0, T::one()), (b.0, T::one())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push("sub", v, vec![(a.0, T::one()), (b.0, -T::one())])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push("mul", x * y, vec![(a.0, y), (b.0, x)])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a) * c;
        self.push("scale", v, vec![(a.0, c)])
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a) + c;
        self.push("add_const", v, vec![(a.0, T::one())])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.push("exp", e, vec![(a.0, e)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push("ln", x.ln(), vec![(a.0, x.recip())])
    }

    /// Subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (v, d) = if x > T::zero() {
            (x, T::one())
        } else {
            (T::zero(), T::zero())
        };
        self.push("relu", v, vec![(a.0, d)])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = sigmoid(self.value(a));
        self.push("sigmoid", s, vec![(a.0, s * (T::one() - s))])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push("sin", x.sin(), vec![(a.0, x.cos())])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push("cos", x.cos(), vec![(a.0, -x.sin())])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|x| self.value(*x)).sum();
        self.push("sum", v, xs.iter().map(|x| (x.0, T::one())).collect())
    }

    /// Average pooling of a slice to one value.
    pub fn mean(&mut self, xs: &[Var]) -> Var {
        let n = T::from_f64(xs.len() as f64);
        let v = xs.iter().map(|x| self.value(*x)).sum::<T>() / n;
        self.push("mean", v, xs.iter().map(|x| (x.0, n.recip())).collect())
    }

    /// `w . x + b`
    pub fn affine(&mut self, w: &[Var], x: &[Var], b: Var) -> Var {
        assert_eq!(w.len(), x.len(), "affine operand lengths differ");
        let mut v = self.value(b);
        let mut parents = Vec::with_capacity(2 * w.len() + 1);
        for (wi, xi) in w.iter().zip(x) {
            let (a, c) = (self.value(*wi), self.value(*xi));
            v = v + a * c;
            parents.push((wi.0, c));
            parents.push((xi.0, a));
        }
        parents.push((b.0, T::one()));
        self.push("affine", v, parents)
    }

    /// Single-channel 2D convolution over a row-major `h x w` plane with a
    /// square odd kernel and replicate padding.
    pub fn conv2d(
        &mut self,
        plane: &[Var],
        h: usize,
        w: usize,
        kernel: &[Var],
        bias: Var,
    ) -> Vec<Var> {
        let k = (kernel.len() as f64).sqrt() as usize;
        assert_eq!(k * k, kernel.len(), "kernel must be square");
        assert_eq!(plane.len(), h * w, "plane size mismatch");
        let r = (k / 2) as isize;
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut taps = Vec::with_capacity(k * k);
                for ky in 0..k as isize {
                    for kx in 0..k as isize {
                        let sy = (y + ky - r).clamp(0, h as isize - 1) as usize;
                        let sx = (x + kx - r).clamp(0, w as isize - 1) as usize;
                        taps.push(plane[sy * w + sx]);
                    }
                }
                out.push(self.affine(kernel, &taps, bias));
            }
        }
        out
    }

    /// Gradient of `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Vec<T> {
        let mut adj = vec![T::zero(); self.nodes.len()];
        adj[output.0] = T::one();
        for i in (0..=output.0).rev() {
            let a = adj[i];
            if a == T::zero() {
                continue;
            }
            for &(p, d) in &self.nodes[i].parents {
                adj[p] = adj[p] + a * d;
            }
        }
        adj
    }
}

/// Adapts a closure that records a scalar loss on a [`Tape`] into an
/// [`Objective`]. The closure receives one `Vec<Var>` per parameter array, in
/// store order.
pub struct TapeObjective<F> {
    build: F,
}

impl<F> TapeObjective<F> {
    pub fn new(build: F) -> Self {
        Self { build }
    }
}

impl<F> TapeObjective<F> {
    fn record<T>(&self, params: &ParamStore<T>) -> Result<(Tape<T>, Vec<Vec<Var>>, Var)>
    where
        T: Real,
        F: Fn(&mut Tape<T>, &[Vec<Var>]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Vec<Var>> = params
            .iter()
            .map(|(_, vals)| vals.iter().map(|&v| tape.var(v)).collect())
            .collect();
        let out = (self.build)(&mut tape, &vars);
        if let Some(op) = tape.first_non_finite() {
            return Err(Error::non_finite(op));
        }
        Ok((tape, vars, out))
    }
}

impl<T, F> Objective<T> for TapeObjective<F>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Vec<Var>]) -> Var,
{
    fn loss(&self, params: &ParamStore<T>) -> Result<T> {
        let (tape, _, out) = self.record(params)?;
        Ok(tape.value(out))
    }

    fn loss_and_grads(&self, params: &ParamStore<T>) -> Result<(T, GradStore<T>)> {
        let (tape, vars, out) = self.record(params)?;
        let adj = tape.backward(out);
        let mut grads = params.zeros_like();
        for ((_, g), vs) in grads.iter_mut().zip(&vars) {
            for (gi, v) in g.iter_mut().zip(vs) {
                *gi = adj[v.0];
            }
        }
        Ok((tape.value(out), grads))
    }
}
