//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! Values are computed eagerly as operations are recorded; [`Tape::backward`]
//! then walks the nodes in reverse and accumulates vector-Jacobian products.
//! Scalars are 1×1 matrices. Only first derivatives are taped, which is
//! enough to differentiate an analytic gradient expression written out as
//! taped operations.

use ndarray::{Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Powf(usize, f64),
    Sqrt(usize),
    SoftmaxRows(usize),
    RowSum(usize),
    Sum(usize),
    DiagFromCol(usize),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`; `None` if `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().as_standard_layout().into_owned();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a.0))
    }

    /// `a + 1 rowᵀ`: adds a 1×m row to every row of an n×m matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a.0, row.0))
    }

    /// `diag(col) a`: scales row i of `a` by `col[i]` (col is n×1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a.0, col.0))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push(v, Op::Powf(a.0, p))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = crate::gnn::softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a.0))
    }

    /// n×m → n×1 row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a.0))
    }

    /// Sum of all entries as a 1×1 matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a.0))
    }

    /// n×1 column → n×n diagonal matrix.
    pub fn diag_from_col(&mut self, col: Var) -> Var {
        let c = self.value(col);
        let n = c.nrows();
        let mut v = Array2::zeros((n, n));
        for i in 0..n {
            v[[i, i]] = c[[i, 0]];
        }
        self.push(v, Op::DiagFromCol(col.0))
    }

    /// Reverse sweep from a 1×1 `root`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |i: usize| &self.nodes[i].value;
            match node.op {
                Op::Leaf | Op::Const => unreachable!(),
                Op::MatMul(a, b) => {
                    accumulate(&mut grads[a], g.dot(&val(b).t()));
                    accumulate(&mut grads[b], val(a).t().dot(&g));
                }
                Op::Transpose(a) => accumulate(&mut grads[a], g.t().as_standard_layout().into_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads[b], g.clone());
                    accumulate(&mut grads[a], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b], -&g);
                    accumulate(&mut grads[a], g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads[a], &g * val(b));
                    accumulate(&mut grads[b], &g * val(a));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    accumulate(&mut grads[a], &g / vb);
                    let db = Zip::from(&g)
                        .and(va)
                        .and(vb)
                        .map_collect(|&g, &x, &y| -g * x / (y * y));
                    accumulate(&mut grads[b], db);
                }
                Op::Scale(a, s) => accumulate(&mut grads[a], g * s),
                Op::AddScalar(a) => accumulate(&mut grads[a], g),
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[row], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads[a], g);
                }
                Op::MulCol(a, col) => {
                    let dcol = (&g * val(a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[col], dcol);
                    accumulate(&mut grads[a], &g * val(col));
                }
                Op::Powf(a, p) => {
                    let d = Zip::from(&g)
                        .and(val(a))
                        .map_collect(|&g, &x| g * p * x.powf(p - 1.0));
                    accumulate(&mut grads[a], d);
                }
                Op::Sqrt(a) => {
                    let d = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&g, &s| g / (2.0 * s));
                    accumulate(&mut grads[a], d);
                }
                Op::SoftmaxRows(a) => {
                    let z = &node.value;
                    let inner = (&g * z).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[a], z * &(&g - &inner));
                }
                Op::RowSum(a) => {
                    let cols = val(a).ncols();
                    let d = g
                        .broadcast((g.nrows(), cols))
                        .expect("n×1 broadcasts to n×m")
                        .to_owned();
                    accumulate(&mut grads[a], d);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads[a], Array2::from_elem(val(a).dim(), g[[0, 0]]));
                }
                Op::DiagFromCol(col) => {
                    let n = g.nrows();
                    accumulate(&mut grads[col], Array2::from_shape_fn((n, 1), |(i, _)| g[[i, i]]));
                }
            }
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use rand::Rng;

    fn random(r: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| r.random_range(lo..hi))
    }

    /// Central-difference check of `f` at `x` against the tape gradient.
    fn check(x: Array2<f64>, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let out = f(&mut t, v);
        let g = t.backward(out).take(v).unwrap();
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let eval = |m: Array2<f64>| {
                let mut t = Tape::new();
                let v = t.leaf(m);
                let o = f(&mut t, v);
                t.scalar(o)
            };
            let num = (eval(xp) - eval(xm)) / (2.0 * eps);
            let ana = *g.iter().nth(idx).unwrap();
            assert!(
                (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                "entry {idx}: numeric {num} vs tape {ana}"
            );
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut r = rng::stream(0, "tape", &[]);
        let b = random(&mut r, 3, 4, -1.0, 1.0);
        let row = random(&mut r, 1, 4, -1.0, 1.0);
        let col = random(&mut r, 3, 1, 0.5, 1.5);
        let x = random(&mut r, 3, 3, 0.2, 1.2);

        check(x.clone(), |t, v| {
            let bb = t.constant(b.clone());
            let m = t.matmul(v, bb);
            let tr = t.transpose(m);
            let s = t.mul(tr, tr);
            t.sum(s)
        });
        check(x.clone(), |t, v| {
            let bb = t.constant(b.clone());
            let rr = t.constant(row.clone());
            let m = t.matmul(v, bb);
            let m = t.add_row(m, rr);
            let sm = t.softmax_rows(m);
            let w = t.constant(b.clone());
            let p = t.mul(sm, w);
            t.sum(p)
        });
        check(x.clone(), |t, v| {
            let rs = t.row_sum(v);
            let p = t.powf(rs, -0.5);
            let pt = t.transpose(p);
            let outer = t.matmul(p, pt);
            let sc = t.mul(v, outer);
            let d = t.diag_from_col(rs);
            let diff = t.sub(d, sc);
            let sq = t.mul(diff, diff);
            t.sum(sq)
        });
        check(x.clone(), |t, v| {
            let c = t.constant(col.clone());
            let m = t.mul_col(v, c);
            let s = t.sum(m);
            let ss = t.mul(s, s);
            let root = t.sqrt(ss);
            let sh = t.add_scalar(root, 2.0);
            let total = t.sum(v);
            let q = t.div(total, sh);
            t.scale(q, -3.0)
        });
        check(x, |t, v| {
            let rs = t.row_sum(v);
            let c = t.constant(col.clone());
            let m = t.mul_col(c, rs);
            let both = t.add(m, rs);
            t.sum(both)
        });
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut t = Tape::new();
        let x = t.leaf(array![[3.0]]);
        let y = t.mul(x, x);
        let z = t.add(y, x);
        let g = t.backward(z);
        assert_eq!(g.get(x).unwrap()[[0, 0]], 7.0);
    }

    #[test]
    fn constants_get_no_gradient_path_to_leaves() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let c = t.constant(array![[5.0, 5.0]]);
        let unused = t.leaf(array![[1.0]]);
        let m = t.mul(x, c);
        let s = t.sum(m);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap(), &array![[5.0, 5.0]]);
        assert!(g.get(unused).is_none());
    }
}
