//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D array. Token sequences are stored with
//! one token per row, so a `C x h x w` latent becomes an `(h*w) x C` matrix
//! in row-major spatial order. The toy denoisers, the subject fusion and the
//! losses are all written against this tape, which is what makes the
//! finite-difference gradient checks possible.

use ndarray::{s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Div(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    VCat(Var, Var),
    HCat(Vec<Var>),
    SliceCols(Var, usize),
    Shift {
        src: Var,
        height: usize,
        width: usize,
        dy: isize,
        dx: isize,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records operations so gradients can be propagated back to the leaves.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of the given shape when nothing flowed there.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[[0, 0]]
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) + self.value(row);
        let rg = self.any_grad(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Multiplies `a` by the `1 x 1` variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        debug_assert_eq!(self.shape(s), (1, 1));
        let value = self.value(a) * self.scalar(s);
        let rg = self.any_grad(&[a, s]);
        self.push(value, Op::ScaleBy(a, s), rg)
    }

    /// Divides `a` by the `1 x 1` variable `s`.
    pub fn div(&mut self, a: Var, s: Var) -> Var {
        debug_assert_eq!(self.shape(s), (1, 1));
        let value = self.value(a) / self.scalar(s);
        let rg = self.any_grad(&[a, s]);
        self.push(value, Op::Div(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Stacks `b` below `a`.
    pub fn vcat(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("vcat column mismatch");
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::VCat(a, b), rg)
    }

    /// Concatenates along columns.
    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("hcat row mismatch");
        let rg = self.any_grad(parts);
        self.push(value, Op::HCat(parts.to_vec()), rg)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Spatial shift of a token grid: output token `(y, x)` reads input
    /// token `(y + dy, x + dx)`, or zero outside the grid.
    pub fn shift(&mut self, a: Var, height: usize, width: usize, dy: isize, dx: isize) -> Var {
        let src = self.value(a);
        debug_assert_eq!(src.nrows(), height * width);
        let mut value = Array2::zeros(src.dim());
        for y in 0..height {
            for x in 0..width {
                if let Some(from) = shifted_index(y, x, height, width, dy, dx) {
                    value.row_mut(y * width + x).assign(&src.row(from));
                }
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(
            value,
            Op::Shift {
                src: a,
                height,
                width,
                dy,
                dx,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).mean().unwrap_or(0.0));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones(self.shape(output)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_if(&mut grads, *a, || g.clone());
                    self.acc_if(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc_if(&mut grads, *a, || g.clone());
                    self.acc_if(&mut grads, *b, || -&g);
                }
                Op::Mul(a, b) => {
                    self.acc_if(&mut grads, *a, || &g * self.value(*b));
                    self.acc_if(&mut grads, *b, || &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    self.acc_if(&mut grads, *a, || g.clone());
                    self.acc_if(&mut grads, *row, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Scale(a, f) => {
                    self.acc_if(&mut grads, *a, || &g * *f);
                }
                Op::ScaleBy(a, s) => {
                    let sv = self.scalar(*s);
                    self.acc_if(&mut grads, *a, || &g * sv);
                    self.acc_if(&mut grads, *s, || {
                        Array2::from_elem((1, 1), (&g * self.value(*a)).sum())
                    });
                }
                Op::Div(a, s) => {
                    let sv = self.scalar(*s);
                    self.acc_if(&mut grads, *a, || &g / sv);
                    self.acc_if(&mut grads, *s, || {
                        let num = (&g * self.value(*a)).sum();
                        Array2::from_elem((1, 1), -num / (sv * sv))
                    });
                }
                Op::Silu(a) => {
                    self.acc_if(&mut grads, *a, || {
                        let d = self.value(*a).mapv(|x| {
                            let s = sigmoid(x);
                            s * (1.0 + x * (1.0 - s))
                        });
                        &g * &d
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    self.acc_if(&mut grads, *a, || &g * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    self.acc_if(&mut grads, *a, || {
                        let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                        y * &(&g - &dot)
                    });
                }
                Op::Transpose(a) => {
                    self.acc_if(&mut grads, *a, || g.t().to_owned());
                }
                Op::VCat(a, b) => {
                    let rows = self.shape(*a).0;
                    self.acc_if(&mut grads, *a, || g.slice(s![..rows, ..]).to_owned());
                    self.acc_if(&mut grads, *b, || g.slice(s![rows.., ..]).to_owned());
                }
                Op::HCat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = self.shape(*p).1;
                        let end = start + width;
                        self.acc_if(&mut grads, *p, || g.slice(s![.., start..end]).to_owned());
                        start = end;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let start = *start;
                    let width = g.ncols();
                    self.acc_if(&mut grads, *a, || {
                        let mut full = Array2::zeros((rows, cols));
                        full.slice_mut(s![.., start..start + width]).assign(&g);
                        full
                    });
                }
                Op::Shift {
                    src,
                    height,
                    width,
                    dy,
                    dx,
                } => {
                    self.acc_if(&mut grads, *src, || {
                        let mut back = Array2::zeros(g.dim());
                        for y in 0..*height {
                            for x in 0..*width {
                                if let Some(from) = shifted_index(y, x, *height, *width, *dy, *dx) {
                                    let mut row = back.row_mut(from);
                                    row += &g.row(y * width + x);
                                }
                            }
                        }
                        back
                    });
                }
                Op::Sum(a) => {
                    let gv = g[[0, 0]];
                    self.acc_if(&mut grads, *a, || Array2::from_elem(self.shape(*a), gv));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let gv = g[[0, 0]] / (r * c).max(1) as f64;
                    self.acc_if(&mut grads, *a, || Array2::from_elem((r, c), gv));
                }
            }
        }
        Gradients { grads }
    }

    fn acc_if(
        &self,
        grads: &mut [Option<Array2<f64>>],
        var: Var,
        make: impl FnOnce() -> Array2<f64>,
    ) {
        if self.requires_grad(var) {
            accumulate(grads, var, make());
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], var: Var, g: Array2<f64>) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn shifted_index(
    y: usize,
    x: usize,
    height: usize,
    width: usize,
    dy: isize,
    dx: isize,
) -> Option<usize> {
    let sy = y as isize + dy;
    let sx = x as isize + dx;
    if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
        None
    } else {
        Some(sy as usize * width + sx as usize)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(
        f: &dyn Fn(&Array2<f64>) -> f64,
        x: &Array2<f64>,
    ) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut p = x.clone();
            p[[r, c]] += h;
            let mut m = x.clone();
            m[[r, c]] -= h;
            g[[r, c]] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let x0 = array![[0.3, -0.2, 0.5, 0.1], [0.7, 0.4, -0.6, 0.2], [-0.1, 0.9, 0.3, -0.4], [0.2, 0.2, 0.8, -0.3]];
        let w = array![[0.5, -0.3], [0.2, 0.4], [-0.7, 0.1], [0.3, 0.6]];
        let build = |tape: &mut Tape, x: Var| {
            let wv = tape.constant(w.clone());
            let h = tape.matmul(x, wv);
            let a = tape.silu(h);
            let sh = tape.shift(a, 2, 2, 1, -1);
            let cat = tape.hcat(&[a, sh]);
            let t = tape.transpose(cat);
            let logits = tape.matmul(cat, t);
            let p = tape.softmax_rows(logits);
            let sl = tape.slice_cols(p, 1, 3);
            let v = tape.vcat(sl, sl);
            let s = tape.sum(v);
            let m = tape.mean(p);
            let q = tape.div(m, s);
            let z = tape.scale_by(a, q);
            let sg = tape.sigmoid(z);
            tape.mean(sg)
        };
        let f = |x: &Array2<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = build(&mut tape, xv);
            tape.scalar(out)
        };
        let mut tape = Tape::new();
        let xv = tape.param(x0.clone());
        let out = build(&mut tape, xv);
        let grads = tape.backward(out);
        let analytic = grads.get(xv).unwrap().clone();
        let numeric = numeric_grad(&f, &x0);
        assert_close(&analytic, &numeric, 1e-7);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(array![[1.0, 2.0]]);
        let p = tape.param(array![[3.0, 4.0]]);
        let m = tape.mul(c, p);
        let s = tape.sum(m);
        let grads = tape.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = array![[1000.0, 1001.0, -5.0], [0.0, 0.0, 0.0]];
        let p = softmax_rows(&a);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[1, 0]] - 1.0 / 3.0).abs() < 1e-15);
    }
}
