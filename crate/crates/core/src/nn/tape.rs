use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::{dropout_mask, gamma_clip_rows, Activation, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Activation {
        x: NodeId,
        act: Activation,
    },
    Dropout {
        x: NodeId,
        mask: Array2<f64>,
    },
    GammaClip {
        x: NodeId,
        gamma: ParamId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Axpy {
        h: NodeId,
        alpha: f64,
        f: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    ScatterRows {
        base: NodeId,
        src: NodeId,
        rows: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records batched operations for one reverse sweep.
#[derive(Debug)]
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients aligned with the tensors of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            grads: store
                .ids()
                .map(|id| Array2::zeros(store.get(id).raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let mut y = self.value(x).dot(self.store.get(w));
        y += self.store.get(b);
        self.push(y, Op::Linear { x, w, b }, true)
    }

    pub fn activation(&mut self, x: NodeId, act: Activation) -> NodeId {
        let mut y = self.value(x).clone();
        act.apply(&mut y);
        let rg = self.rg(x);
        self.push(y, Op::Activation { x, act }, rg)
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> NodeId {
        let v = self.value(x);
        let mask = dropout_mask(v.nrows(), v.ncols(), rate, rng);
        let y = v * &mask;
        let rg = self.rg(x);
        self.push(y, Op::Dropout { x, mask }, rg)
    }

    /// Row-wise `Γ_γ`.
    pub fn gamma_clip(&mut self, x: NodeId, gamma: ParamId) -> NodeId {
        let mut y = self.value(x).clone();
        gamma_clip_rows(&mut y, self.store.get(gamma)[[0, 0]]);
        self.push(y, Op::GammaClip { x, gamma }, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add { a, b }, rg)
    }

    /// `h + alpha · f`.
    pub fn axpy(&mut self, h: NodeId, alpha: f64, f: NodeId) -> NodeId {
        let mut y = self.value(h).clone();
        y.scaled_add(alpha, self.value(f));
        let rg = self.rg(h) || self.rg(f);
        self.push(y, Op::Axpy { h, alpha, f }, rg)
    }

    /// Column-wise concatenation.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y =
            ndarray::concatenate(Axis(1), &views).expect("concatenated parts share the row count");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let y = self.value(x).select(Axis(0), rows);
        let rg = self.rg(x);
        self.push(
            y,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Copy of `base` with `base[rows[i]] = src[i]`.
    pub fn scatter_rows(&mut self, base: NodeId, src: NodeId, rows: &[usize]) -> NodeId {
        let mut y = self.value(base).clone();
        for (i, &r) in rows.iter().enumerate() {
            y.row_mut(r).assign(&self.value(src).row(i));
        }
        let rg = self.rg(base) || self.rg(src);
        self.push(
            y,
            Op::ScatterRows {
                base,
                src,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let y = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(y, Op::SliceCols { x, start }, rg)
    }

    /// Reverse sweep from cotangents `seeds` (summed when a node is seeded
    /// more than once).
    pub fn backward(&self, seeds: Vec<(NodeId, Array2<f64>)>) -> Result<Gradients> {
        let mut pg = Gradients::zeros(self.store);
        let mut ng: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.dim() != self.value(id).dim() {
                return Err(Error::invalid(format!(
                    "cotangent shape {:?} does not match node shape {:?}",
                    g.dim(),
                    self.value(id).dim()
                )));
            }
            accumulate(&mut ng[id.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = ng[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    pg.grads[w.index()] += &xv.t().dot(&g);
                    pg.grads[b.index()] += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    if self.rg(*x) {
                        accumulate(&mut ng[x.0], g.dot(&self.store.get(*w).t()));
                    }
                }
                Op::Activation { x, act } => {
                    let y = &node.value;
                    let mut gx = g;
                    match act {
                        Activation::Relu => gx.zip_mut_with(y, |gi, &yi| {
                            if yi <= 0.0 {
                                *gi = 0.0
                            }
                        }),
                        Activation::Tanh => gx.zip_mut_with(y, |gi, &yi| *gi *= 1.0 - yi * yi),
                    }
                    accumulate(&mut ng[x.0], gx);
                }
                Op::Dropout { x, mask } => accumulate(&mut ng[x.0], g * mask),
                Op::GammaClip { x, gamma } => {
                    let gam = self.store.get(*gamma)[[0, 0]];
                    let xv = self.value(*x);
                    let mut gx = g;
                    let mut g_gamma = 0.0;
                    for (xr, mut gr) in xv.outer_iter().zip(gx.outer_iter_mut()) {
                        let n2 = xr.dot(&xr);
                        let n = n2.sqrt();
                        if n <= gam {
                            continue;
                        }
                        let xg = xr.dot(&gr);
                        g_gamma += xg / n;
                        let c = gam / n;
                        let d = xg / n2;
                        gr.zip_mut_with(&xr, |gi, &xi| *gi = c * (*gi - xi * d));
                    }
                    pg.grads[gamma.index()][[0, 0]] += g_gamma;
                    if self.rg(*x) {
                        accumulate(&mut ng[x.0], gx);
                    }
                }
                Op::Add { a, b } => {
                    if self.rg(*b) {
                        accumulate(&mut ng[b.0], g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut ng[a.0], g);
                    }
                }
                Op::Axpy { h, alpha, f } => {
                    if self.rg(*f) {
                        accumulate(&mut ng[f.0], &g * *alpha);
                    }
                    if self.rg(*h) {
                        accumulate(&mut ng[h.0], g);
                    }
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.rg(*p) {
                            accumulate(&mut ng[p.0], g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut ng[x.0], gx);
                }
                Op::ScatterRows { base, src, rows } => {
                    if self.rg(*src) {
                        accumulate(&mut ng[src.0], g.select(Axis(0), rows));
                    }
                    if self.rg(*base) {
                        let mut gb = g;
                        for &r in rows {
                            gb.row_mut(r).fill(0.0);
                        }
                        accumulate(&mut ng[base.0], gb);
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut ng[x.0], gx);
                }
            }
        }
        Ok(pg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn affine_quadratic_gradient_is_closed_form() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.5], [-1.0]]);
        let b = store.add("b", array![[0.25]]);
        let mut tape = Tape::new(&store);
        let x = tape.input(array![[2.0, 3.0]]);
        let y = tape.linear(x, w, b);
        // loss = (y - 1)², dL/dy = 2 (y - 1)
        let r = tape.value(y)[[0, 0]] - 1.0;
        let grads = tape.backward(vec![(y, array![[2.0 * r]])]).unwrap();
        assert_eq!(grads.get(w), &array![[2.0 * r * 2.0], [2.0 * r * 3.0]]);
        assert_eq!(grads.get(b), &array![[2.0 * r]]);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0]]);
        let b = store.add("b", array![[0.0]]);
        let unused = store.add("u", array![[3.0, 4.0]]);
        let mut tape = Tape::new(&store);
        let x = tape.input(array![[2.0]]);
        let y = tape.linear(x, w, b);
        let grads = tape.backward(vec![(y, array![[1.0]])]).unwrap();
        assert!(grads.get(unused).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn clip_gradient_in_identity_region_passes_through() {
        let mut store = ParamStore::new();
        let gamma = store.add("gamma", array![[5.0]]);
        let mut tape = Tape::new(&store);
        // |x| = γ exactly: the kink takes the identity branch
        let x = tape.input(array![[3.0, 4.0]]);
        let y = tape.gamma_clip(x, gamma);
        let grads = tape.backward(vec![(y, array![[1.0, 1.0]])]).unwrap();
        assert_eq!(grads.get(gamma)[[0, 0]], 0.0);
    }

    #[test]
    fn seed_shape_is_checked() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(array![[1.0, 2.0]]);
        assert!(tape.backward(vec![(x, array![[1.0]])]).is_err());
    }
}
