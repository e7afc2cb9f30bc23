//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D matrix; scalars are `1×1`. Operations
//! append a node holding the forward value and enough bookkeeping to run the
//! backward pass. Parameters are added first as leaves, so a parameter's
//! position in its [`ParamSet`](crate::model::ParamSet) equals its [`Var`]
//! index on a fresh tape.
//!
//! ```
//! use ndarray::array;
//! use pedtext::autograd::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(array![[1.0, 2.0]]);
//! let w = tape.leaf(array![[3.0], [4.0]]);
//! let y = tape.matmul(x, w);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss);
//! assert_eq!(tape.scalar(loss), 11.0);
//! assert_eq!(grads.get(w).unwrap(), &array![[1.0], [2.0]]);
//! ```

use std::ops::Range;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    SliceRows(Var, Range<usize>),
    SliceCols(Var, Range<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SegmentMax { x: Var, argmax: Vec<usize> },
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the
    /// loss.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(like.raw_dim()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn row_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn row_log_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) * self.value(row);
        self.push(v, Op::MulRow(x, row))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).mapv(|e| e + c);
        self.push(v, Op::AddConst(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).mapv(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    /// Multiplies `x` by the `1×1` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let v = self.value(x).mapv(|e| e * c);
        self.push(v, Op::ScaleBy(x, s))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| gelu_parts(e).0);
        self.push(v, Op::Gelu(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = row_softmax(self.value(x));
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Row-wise log-softmax, computed with max subtraction.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = row_log_softmax(self.value(x));
        self.push(v, Op::LogSoftmaxRows(x))
    }

    /// Row-wise standardisation without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNormRows { x, inv_std })
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x, norms })
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Var {
        let v = self.value(x).slice(s![rows.clone(), ..]).to_owned();
        self.push(v, Op::SliceRows(x, rows))
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Var {
        let v = self.value(x).slice(s![.., cols.clone()]).to_owned();
        self.push(v, Op::SliceCols(x, cols))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Row lookup, e.g. an embedding table indexed by token id.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), rows);
        self.push(v, Op::GatherRows(x, rows.to_vec()))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let data: Vec<f64> = self.value(x).iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), data).expect("reshape: size mismatch");
        self.push(v, Op::Reshape(x))
    }

    /// Column-wise max over each row segment; one output row per segment.
    /// Ties resolve to the earliest row.
    pub fn segment_max(&mut self, x: Var, segments: &[Range<usize>]) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols();
        let mut out = Mat::zeros((segments.len(), cols));
        let mut argmax = Vec::with_capacity(segments.len() * cols);
        for (n, seg) in segments.iter().enumerate() {
            assert!(!seg.is_empty(), "segment_max: empty segment");
            for c in 0..cols {
                let mut best = seg.start;
                for r in seg.clone() {
                    if xv[[r, c]] > xv[[best, c]] {
                        best = r;
                    }
                }
                out[[n, c]] = xv[[best, c]];
                argmax.push(best);
            }
        }
        self.push(out, Op::SegmentMax { x, argmax })
    }

    /// Gathers individual entries into a `1×n` row.
    pub fn pick(&mut self, x: Var, coords: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = coords.iter().map(|&(r, c)| xv[[r, c]]).collect();
        let v = Mat::from_shape_vec((1, coords.len()), data).expect("pick");
        self.push(v, Op::Pick(x, coords.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Mat::from_elem((1, 1), xv.sum() / xv.len() as f64);
        self.push(v, Op::Mean(x))
    }

    /// `x · w + b` with `b` a `1×c` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Reverse pass from the `1×1` node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.value(loss).raw_dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, g);
                }
                Op::MulRow(x, row) => {
                    let gx = &g * self.value(*row);
                    let gr = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *row, gr);
                }
                Op::AddConst(x) => acc(&mut grads, *x, g),
                Op::Scale(x, c) => acc(&mut grads, *x, g.mapv(|e| e * c)),
                Op::ScaleBy(x, s) => {
                    let c = self.scalar(*s);
                    let gs = (&g * self.value(*x)).sum();
                    acc(&mut grads, *x, g.mapv(|e| e * c));
                    acc(&mut grads, *s, Mat::from_elem((1, 1), gs));
                }
                Op::Exp(x) => acc(&mut grads, *x, &g * &node.value),
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gv, &xv| {
                            if xv <= 0.0 {
                                *gv = 0.0
                            }
                        });
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gv, &xv| *gv *= gelu_parts(xv).1);
                    acc(&mut grads, *x, gx);
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.t().to_owned()),
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|r, &yv| *r -= yv * dot);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LogSoftmaxRows(x) => {
                    let p = node.value.mapv(f64::exp);
                    let mut gx = g.clone();
                    for ((mut row, grow), prow) in
                        gx.rows_mut().into_iter().zip(g.rows()).zip(p.rows())
                    {
                        let total = grow.sum();
                        Zip::from(&mut row)
                            .and(&prow)
                            .for_each(|r, &pv| *r -= pv * total);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let xhat = &node.value;
                    let cols = xhat.ncols() as f64;
                    let mut gx = g.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let grow = g.row(r);
                        let hrow = xhat.row(r);
                        let mean_g = grow.sum() / cols;
                        let mean_gh = grow.dot(&hrow) / cols;
                        Zip::from(&mut row)
                            .and(&grow)
                            .and(&hrow)
                            .for_each(|o, &gv, &hv| *o = inv_std[r] * (gv - mean_g - hv * mean_gh));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yrow = y.row(r);
                        let dot = g.row(r).dot(&yrow);
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|o, &yv| *o = (*o - yv * dot) / norms[r]);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceRows(x, rows) => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![rows.clone(), ..]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(x, cols) => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., cols.clone()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::GatherRows(x, rows) => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).raw_dim();
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *x, Mat::from_shape_vec(shape, data).expect("reshape"));
                }
                Op::SegmentMax { x, argmax } => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    let cols = g.ncols();
                    for n in 0..g.nrows() {
                        for c in 0..cols {
                            gx[[argmax[n * cols + c], c]] += g[[n, c]];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Pick(x, coords) => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    for (k, &(r, c)) in coords.iter().enumerate() {
                        gx[[r, c]] += g[[0, k]];
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gv = g[[0, 0]];
                    acc(&mut grads, *x, Mat::from_elem(self.value(*x).raw_dim(), gv));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gv = g[[0, 0]] / xv.len() as f64;
                    acc(&mut grads, *x, Mat::from_elem(xv.raw_dim(), gv));
                }
            }
        }
        Grads(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `build` w.r.t. every entry of every input.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let eval = |ins: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.leaf(m.clone())).collect();
            let l = build(&mut t, &vs);
            t.scalar(l)
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], m);
            for idx in 0..m.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "input {k} entry {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn leaf_gradient_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, -2.0], [3.0, 4.0]]);
        let l = t.sum(x);
        let g = t.backward(l);
        assert_eq!(g.get(x).unwrap(), &Mat::ones((2, 2)));
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 5, 4)];
        check(ins, |t, v| {
            let y = t.matmul(v[0], v[1]);
            let z = t.matmul_t(v[2], v[0]);
            let a = t.sum(y);
            let b = t.mean(z);
            let ab = t.add(a, b);
            let y2 = t.mul(y, y);
            let s = t.sum(y2);
            t.sub(ab, s)
        });
    }

    #[test]
    fn elementwise_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![random(&mut rng, 3, 4), random(&mut rng, 1, 4), random(&mut rng, 1, 1)];
        check(ins, |t, v| {
            let a = t.add_row(v[0], v[1]);
            let b = t.mul_row(a, v[1]);
            let c = t.gelu(b);
            let d = t.scale_by(c, v[2]);
            let e = t.exp(d);
            let f = t.add_const(e, 0.3);
            let g = t.scale(f, -1.5);
            let h = t.relu(a);
            let gh = t.add(g, h);
            t.sum(gh)
        });
    }

    #[test]
    fn row_normalisers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![random(&mut rng, 3, 5), random(&mut rng, 3, 5)];
        check(ins, |t, v| {
            let a = t.softmax_rows(v[0]);
            let b = t.log_softmax_rows(v[1]);
            let c = t.layer_norm_rows(v[0], 1e-5);
            let d = t.l2_normalize_rows(v[1]);
            let ab = t.mul(a, b);
            let cd = t.mul(c, d);
            let s = t.add(ab, cd);
            let p = t.pick(s, &[(0, 1), (2, 4), (1, 0)]);
            let q = t.sum(p);
            let tr = t.transpose(s);
            let m = t.mean(tr);
            t.add(q, m)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = vec![random(&mut rng, 6, 4), random(&mut rng, 2, 4)];
        check(ins, |t, v| {
            let top = t.slice_rows(v[0], 0..3);
            let left = t.slice_cols(v[0], 0..2);
            let right = t.slice_cols(v[0], 2..4);
            let lr = t.concat_cols(&[right, left]);
            let stacked = t.concat_rows(&[top, v[1]]);
            let g = t.gather_rows(stacked, &[0, 4, 4, 1]);
            let r = t.reshape(g, 2, 8);
            let m = t.segment_max(lr, &[0..2, 2..6]);
            let sq = t.mul(m, m);
            let a = t.sum(r);
            let b = t.sum(sq);
            let r2 = t.mul(r, r);
            let c = t.mean(r2);
            let ab = t.add(a, b);
            t.add(ab, c)
        });
    }

    #[test]
    fn segment_max_picks_elementwise_max() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, -2.0], [0.0, 3.0]]);
        let m = t.segment_max(x, &[0..2]);
        assert_eq!(t.value(m), &array![[1.0, 3.0]]);
    }

    #[test]
    fn log_softmax_is_stable_for_large_logits() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1000.0, 0.0]]);
        let y = t.log_softmax_rows(x);
        assert!(t.value(y).iter().all(|v| v.is_finite()));
        assert!(t.value(y)[[0, 0]].abs() < 1e-12);
    }
}
