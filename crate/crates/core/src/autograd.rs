//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node holding the forward value and
//! a backward closure. [`Tape::backward`] sweeps the tape in reverse insertion
//! order (which is a valid reverse topological order, since operands always
//! precede results) and accumulates gradients for every node.
//!
//! Backward closures capture cheap `Rc` clones of the tensors they need, so
//! the sweep never re-borrows the tape.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{dot as slice_dot, norm as slice_norm, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<F> = Box<dyn Fn(&Tensor<F>, &mut dyn FnMut(usize, Tensor<F>))>;

struct Node<F: Real> {
    value: Rc<Tensor<F>>,
    back: Option<BackFn<F>>,
}

/// Records operations for one forward pass.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the root with respect to `v`, if `v` influenced the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<F>, back: Option<BackFn<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), back });
        Var(nodes.len() - 1)
    }

    /// Tensor the gradient sweep should reach (parameters).
    pub fn leaf(&self, value: Tensor<F>) -> Var {
        self.push(value, None)
    }

    /// Tensor treated as fixed data; gradients stop here.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes.borrow()[v.0].value.item()
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape().to_vec(), F::one()));
        for i in (0..=root.0).rev() {
            let Some(back) = nodes[i].back.as_ref() else { continue };
            let Some(g) = grads[i].clone() else { continue };
            let mut sink = |parent: usize, contribution: Tensor<F>| match &mut grads[parent] {
                Some(acc) => acc.add_assign(&contribution),
                slot => *slot = Some(contribution),
            };
            back(&g, &mut sink);
        }
        Gradients { grads }
    }

    // ----- arithmetic -----

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = av.dims2();
        let (k2, n) = bv.dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av.data()[i * k + p];
                if x == F::zero() {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += x * bv.data()[p * n + j];
                }
            }
        }
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.push(
            Tensor::matrix(m, n, out),
            Some(Box::new(move |g, sink| {
                let mut da = vec![F::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc += g.data()[i * n + j] * bc.data()[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                let mut db = vec![F::zero(); k * n];
                for p in 0..k {
                    for i in 0..m {
                        let x = ac.data()[i * k + p];
                        if x == F::zero() {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += x * g.data()[i * n + j];
                        }
                    }
                }
                sink(a.0, Tensor::matrix(m, k, da));
                sink(b.0, Tensor::matrix(k, n, db));
            })),
        )
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        self.push(
            Tensor::new(av.shape().to_vec(), data),
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })),
        )
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        let (m, n) = av.dims2();
        assert_eq!(rv.shape(), [n], "add_row length mismatch");
        let mut data = av.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rv.data()[j];
            }
        }
        self.push(
            Tensor::matrix(m, n, data),
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                let mut dr = vec![F::zero(); n];
                for i in 0..m {
                    for (j, d) in dr.iter_mut().enumerate() {
                        *d += g.data()[i * n + j];
                    }
                }
                sink(row.0, Tensor::vector(dr));
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        self.push(
            Tensor::new(av.shape().to_vec(), data),
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.map(|x| -x));
            })),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.push(
            Tensor::new(av.shape().to_vec(), data),
            Some(Box::new(move |g, sink| {
                let da = g.data().iter().zip(bc.data()).map(|(&gi, &y)| gi * y).collect();
                let db = g.data().iter().zip(ac.data()).map(|(&gi, &x)| gi * x).collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), da));
                sink(b.0, Tensor::new(g.shape().to_vec(), db));
            })),
        )
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let av = self.value(a);
        self.push(
            av.map(|x| x * c),
            Some(Box::new(move |g, sink| sink(a.0, g.map(|x| x * c)))),
        )
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        let av = self.value(a);
        self.push(av.map(|x| x + c), Some(Box::new(move |g, sink| sink(a.0, g.clone()))))
    }

    /// Multiplies a tensor by a scalar variable (broadcast).
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        let av = self.value(a);
        let sv = self.value(s);
        let c = sv.item();
        let ac = Rc::clone(&av);
        let s_shape = sv.shape().to_vec();
        self.push(
            av.map(|x| x * c),
            Some(Box::new(move |g, sink| {
                sink(a.0, g.map(|x| x * c));
                let ds = slice_dot(g.data(), ac.data());
                sink(s.0, Tensor::new(s_shape.clone(), vec![ds]));
            })),
        )
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&self, a: Var) -> Var {
        self.add_scalar(self.scale(a, -F::one()), F::one())
    }

    // ----- activations -----

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let oc = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = g
                    .data()
                    .iter()
                    .zip(oc.data())
                    .map(|(&gi, &t)| gi * (F::one() - t * t))
                    .collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), d));
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| F::one() / (F::one() + (-x).exp()));
        let oc = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = g
                    .data()
                    .iter()
                    .zip(oc.data())
                    .map(|(&gi, &s)| gi * s * (F::one() - s))
                    .collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), d));
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|x| x.max_val(F::zero()));
        let ac = Rc::clone(&av);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = g
                    .data()
                    .iter()
                    .zip(ac.data())
                    .map(|(&gi, &x)| if x > F::zero() { gi } else { F::zero() })
                    .collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), d));
            })),
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: F) -> Var {
        let av = self.value(a);
        let out = av.map(|x| if x > F::zero() { x } else { x * slope });
        let ac = Rc::clone(&av);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = g
                    .data()
                    .iter()
                    .zip(ac.data())
                    .map(|(&gi, &x)| if x > F::zero() { gi } else { gi * slope })
                    .collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), d));
            })),
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let av = self.value(a);
        let half = F::from_f64(0.5);
        let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
        let k = F::from_f64(0.044715);
        let out = av.map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (F::one() + u.tanh())
        });
        let ac = Rc::clone(&av);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let three = F::from_f64(3.0);
                let d = g
                    .data()
                    .iter()
                    .zip(ac.data())
                    .map(|(&gi, &x)| {
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh();
                        let du = c * (F::one() + three * k * x * x);
                        gi * (half * (F::one() + t) + half * x * (F::one() - t * t) * du)
                    })
                    .collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), d));
            })),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let oc = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = g.data().iter().zip(oc.data()).map(|(&gi, &e)| gi * e).collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), d));
            })),
        )
    }

    pub fn ln(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|x| x.ln());
        let ac = Rc::clone(&av);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = g.data().iter().zip(ac.data()).map(|(&gi, &x)| gi / x).collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), d));
            })),
        )
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        let av = self.value(a);
        let out = av.map(|x| x.max_val(lo).min_val(hi));
        let ac = Rc::clone(&av);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = g
                    .data()
                    .iter()
                    .zip(ac.data())
                    .map(|(&gi, &x)| if x > lo && x < hi { gi } else { F::zero() })
                    .collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), d));
            })),
        )
    }

    // ----- reductions and row ops -----

    /// Row-wise softmax of an `[m,n]` matrix, computed with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &x in row {
                mx = mx.max_val(x);
            }
            let mut denom = F::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                data[i * n + j] = data[i * n + j] / denom;
            }
        }
        let out = Tensor::matrix(m, n, data);
        let oc = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    let s = &oc.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let gs = slice_dot(gr, s);
                    for j in 0..n {
                        d[i * n + j] = s[j] * (gr[j] - gs);
                    }
                }
                sink(a.0, Tensor::matrix(m, n, d));
            })),
        )
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, a: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let av = self.value(a);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (m, n) = av.dims2();
        assert_eq!(gv.shape(), [n]);
        assert_eq!(bv.shape(), [n]);
        let nf = F::from_f64(n as f64);
        let mut xhat = vec![F::zero(); m * n];
        let mut inv_std = vec![F::zero(); m];
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            let mut mean = F::zero();
            for &x in row {
                mean += x;
            }
            mean = mean / nf;
            let mut var = F::zero();
            for &x in row {
                var += (x - mean) * (x - mean);
            }
            var = var / nf;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * istd;
            }
        }
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = gv.data()[j] * xhat[i * n + j] + bv.data()[j];
            }
        }
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let gc = Rc::clone(&gv);
        self.push(
            Tensor::matrix(m, n, out),
            Some(Box::new(move |g, sink| {
                let mut da = vec![F::zero(); m * n];
                let mut dgamma = vec![F::zero(); n];
                let mut dbeta = vec![F::zero(); n];
                for i in 0..m {
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let xh = &xhat[i * n..(i + 1) * n];
                    let istd = inv_std[i];
                    let mut sum_gx = F::zero();
                    let mut sum_gxx = F::zero();
                    for j in 0..n {
                        let gx = gr[j] * gc.data()[j];
                        sum_gx += gx;
                        sum_gxx += gx * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    for j in 0..n {
                        let gx = gr[j] * gc.data()[j];
                        da[i * n + j] = istd * (gx - sum_gx / nf - xh[j] * sum_gxx / nf);
                    }
                }
                sink(a.0, Tensor::matrix(m, n, da));
                sink(gamma.0, Tensor::vector(dgamma));
                sink(beta.0, Tensor::vector(dbeta));
            })),
        )
    }

    /// Gathers rows of `a` at `indices` (repeats allowed).
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        let (rows, n) = av.dims2();
        let idx: Vec<usize> = indices.to_vec();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            assert!(i < rows, "gather_rows index {i} out of {rows}");
            data.extend_from_slice(&av.data()[i * n..(i + 1) * n]);
        }
        let k = idx.len();
        self.push(
            Tensor::matrix(k, n, data),
            Some(Box::new(move |g, sink| {
                let mut da = vec![F::zero(); rows * n];
                for (pos, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += g.data()[pos * n + j];
                    }
                }
                sink(a.0, Tensor::matrix(rows, n, da));
            })),
        )
    }

    /// Extracts row `i` of an `[m,n]` matrix as a length-`n` vector.
    pub fn row(&self, a: Var, i: usize) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        assert!(i < m);
        let data = av.data()[i * n..(i + 1) * n].to_vec();
        self.push(
            Tensor::vector(data),
            Some(Box::new(move |g, sink| {
                let mut da = vec![F::zero(); m * n];
                da[i * n..(i + 1) * n].copy_from_slice(g.data());
                sink(a.0, Tensor::matrix(m, n, da));
            })),
        )
    }

    /// Columns `[start, end)` of an `[m,n]` matrix.
    pub fn col_slice(&self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        assert!(start < end && end <= n);
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&av.data()[i * n + start..i * n + end]);
        }
        self.push(
            Tensor::matrix(m, w, data),
            Some(Box::new(move |g, sink| {
                let mut da = vec![F::zero(); m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                sink(a.0, Tensor::matrix(m, n, da));
            })),
        )
    }

    /// Concatenation along the last axis; accepts 1-D or 2-D operands.
    pub fn concat(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        if av.ndim() == 1 {
            assert_eq!(bv.ndim(), 1, "concat rank mismatch");
            let (na, nb) = (av.len(), bv.len());
            let mut data = av.data().to_vec();
            data.extend_from_slice(bv.data());
            self.push(
                Tensor::vector(data),
                Some(Box::new(move |g, sink| {
                    sink(a.0, Tensor::vector(g.data()[..na].to_vec()));
                    sink(b.0, Tensor::vector(g.data()[na..na + nb].to_vec()));
                })),
            )
        } else {
            let (m, na) = av.dims2();
            let (mb, nb) = bv.dims2();
            assert_eq!(m, mb, "concat row count mismatch");
            let n = na + nb;
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                data.extend_from_slice(&av.data()[i * na..(i + 1) * na]);
                data.extend_from_slice(&bv.data()[i * nb..(i + 1) * nb]);
            }
            self.push(
                Tensor::matrix(m, n, data),
                Some(Box::new(move |g, sink| {
                    let mut da = Vec::with_capacity(m * na);
                    let mut db = Vec::with_capacity(m * nb);
                    for i in 0..m {
                        da.extend_from_slice(&g.data()[i * n..i * n + na]);
                        db.extend_from_slice(&g.data()[i * n + na..(i + 1) * n]);
                    }
                    sink(a.0, Tensor::matrix(m, na, da));
                    sink(b.0, Tensor::matrix(m, nb, db));
                })),
            )
        }
    }

    pub fn transpose(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av.data()[i * n + j];
            }
        }
        self.push(
            Tensor::matrix(n, m, data),
            Some(Box::new(move |g, sink| {
                let mut da = vec![F::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g.data()[i * m + j];
                    }
                }
                sink(a.0, Tensor::matrix(m, n, da));
            })),
        )
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(shape.iter().product::<usize>(), av.len());
        let old = av.shape().to_vec();
        self.push(
            Tensor::new(shape, av.data().to_vec()),
            Some(Box::new(move |g, sink| {
                sink(a.0, Tensor::new(old.clone(), g.data().to_vec()));
            })),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let mut acc = F::zero();
        for &x in av.data() {
            acc += x;
        }
        let shape = av.shape().to_vec();
        self.push(
            Tensor::scalar(acc),
            Some(Box::new(move |g, sink| {
                sink(a.0, Tensor::full(shape.clone(), g.item()));
            })),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len();
        self.scale(self.sum(a), F::one() / F::from_f64(n as f64))
    }

    /// Elementwise sum of same-shape vars.
    pub fn add_n(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of empty list");
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Mean of a list of scalar vars.
    pub fn mean_of(&self, vars: &[Var]) -> Var {
        let total = self.add_n(vars);
        self.scale(total, F::one() / F::from_f64(vars.len() as f64))
    }

    pub fn dot(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "dot shape mismatch");
        let val = slice_dot(av.data(), bv.data());
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.push(
            Tensor::scalar(val),
            Some(Box::new(move |g, sink| {
                let gi = g.item();
                sink(a.0, bc.map(|y| gi * y));
                sink(b.0, ac.map(|x| gi * x));
            })),
        )
    }

    /// Cosine similarity of two vectors. If either norm is below `1e-12` the
    /// value is 0 and no gradient flows.
    pub fn cosine(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "cosine shape mismatch");
        let na = slice_norm(av.data());
        let nb = slice_norm(bv.data());
        let tiny = F::from_f64(1e-12);
        if na < tiny || nb < tiny {
            return self.push(Tensor::scalar(F::zero()), Some(Box::new(|_, _| {})));
        }
        let c = slice_dot(av.data(), bv.data()) / (na * nb);
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.push(
            Tensor::scalar(c),
            Some(Box::new(move |g, sink| {
                let gi = g.item();
                let da: Vec<F> = ac
                    .data()
                    .iter()
                    .zip(bc.data())
                    .map(|(&x, &y)| gi * (y / (na * nb) - c * x / (na * na)))
                    .collect();
                let db: Vec<F> = ac
                    .data()
                    .iter()
                    .zip(bc.data())
                    .map(|(&x, &y)| gi * (x / (na * nb) - c * y / (nb * nb)))
                    .collect();
                sink(a.0, Tensor::vector(da));
                sink(b.0, Tensor::vector(db));
            })),
        )
    }

    /// Mean cross-entropy of `[m,n]` logits against integer targets, computed
    /// through a stable log-sum-exp.
    pub fn cross_entropy_logits(&self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (m, n) = lv.dims2();
        assert_eq!(targets.len(), m, "one target per logit row");
        let tg: Vec<usize> = targets.to_vec();
        let mut probs = vec![F::zero(); m * n];
        let mut total = F::zero();
        for i in 0..m {
            let row = &lv.data()[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &x in row {
                mx = mx.max_val(x);
            }
            let mut denom = F::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                probs[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                probs[i * n + j] = probs[i * n + j] / denom;
            }
            assert!(tg[i] < n, "target {} out of {} classes", tg[i], n);
            total += denom.ln() + mx - row[tg[i]];
        }
        let mf = F::from_f64(m as f64);
        let probs = Rc::new(probs);
        self.push(
            Tensor::scalar(total / mf),
            Some(Box::new(move |g, sink| {
                let gi = g.item() / mf;
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        let p = probs[i * n + j];
                        let y = if j == tg[i] { F::one() } else { F::zero() };
                        d[i * n + j] = gi * (p - y);
                    }
                }
                sink(logits.0, Tensor::matrix(m, n, d));
            })),
        )
    }

    // ----- spatial ops -----

    /// 2-D convolution of a `[c_in,h,w]` input with `[c_out,c_in,kh,kw]`
    /// kernels, zero padding, and a per-channel bias.
    pub fn conv2d(&self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let iv = self.value(input);
        let kv = self.value(kernel);
        let bv = self.value(bias);
        let ishape = iv.shape().to_vec();
        let kshape = kv.shape().to_vec();
        assert_eq!(ishape.len(), 3, "conv2d input must be [c,h,w]");
        assert_eq!(kshape.len(), 4, "conv2d kernel must be [o,c,kh,kw]");
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        assert_eq!(c_in, kc, "conv2d channel mismatch");
        assert_eq!(bv.shape(), [c_out]);
        assert!(stride > 0);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![F::zero(); c_out * oh * ow];
        for o in 0..c_out {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bv.data()[o];
                    for c in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                    continue;
                                }
                                acc += iv.data()[(c * h + iy as usize) * w + ix as usize]
                                    * kv.data()[((o * c_in + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        let (ic, kcl) = (Rc::clone(&iv), Rc::clone(&kv));
        self.push(
            Tensor::new(vec![c_out, oh, ow], out),
            Some(Box::new(move |g, sink| {
                let mut din = vec![F::zero(); c_in * h * w];
                let mut dk = vec![F::zero(); c_out * c_in * kh * kw];
                let mut db = vec![F::zero(); c_out];
                // Index loops mirror the offset arithmetic of the forward pass.
                #[allow(clippy::needless_range_loop)]
                for o in 0..c_out {
                    for y in 0..oh {
                        for x in 0..ow {
                            let go = g.data()[(o * oh + y) * ow + x];
                            if go == F::zero() {
                                continue;
                            }
                            db[o] += go;
                            for c in 0..c_in {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (x * stride + kx) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w
                                        {
                                            continue;
                                        }
                                        let ii = (c * h + iy as usize) * w + ix as usize;
                                        let ki = ((o * c_in + c) * kh + ky) * kw + kx;
                                        din[ii] += go * kcl.data()[ki];
                                        dk[ki] += go * ic.data()[ii];
                                    }
                                }
                            }
                        }
                    }
                }
                sink(input.0, Tensor::new(vec![c_in, h, w], din));
                sink(kernel.0, Tensor::new(vec![c_out, c_in, kh, kw], dk));
                sink(bias.0, Tensor::vector(db));
            })),
        )
    }

    /// Nearest-neighbor upsampling of a `[c,h,w]` tensor by an integer factor.
    pub fn upsample_nearest(&self, a: Var, factor: usize) -> Var {
        assert!(factor > 0);
        let av = self.value(a);
        let shape = av.shape().to_vec();
        assert_eq!(shape.len(), 3, "upsample input must be [c,h,w]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if factor == 1 {
            let ac = Rc::clone(&av);
            return self.push(
                (*ac).clone(),
                Some(Box::new(move |g, sink| sink(a.0, g.clone()))),
            );
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![F::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ch * oh + y) * ow + x] = av.data()[(ch * h + y / factor) * w + x / factor];
                }
            }
        }
        self.push(
            Tensor::new(vec![c, oh, ow], out),
            Some(Box::new(move |g, sink| {
                let mut da = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            da[(ch * h + y / factor) * w + x / factor] +=
                                g.data()[(ch * oh + y) * ow + x];
                        }
                    }
                }
                sink(a.0, Tensor::new(vec![c, h, w], da));
            })),
        )
    }
}
