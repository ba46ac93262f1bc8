//! Minimal reverse-mode automatic differentiation on a tape.
//!
//! Each operation appends a node holding its value and a backward closure
//! that maps the output gradient to parent gradients. `backward` walks the
//! tape in reverse construction order (a valid topological order) and
//! accumulates. Generic over f32/f64 so the same model code runs in single
//! precision for training and double precision for gradient checks.

use std::cell::RefCell;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2};

/// Element type for differentiable computation.
pub trait Real:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn cast_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn cast_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn cast_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&ArrayD<T>, &[Node<T>]) -> Vec<ArrayD<T>>>;

struct Node<T> {
    value: ArrayD<T>,
    parents: Vec<usize>,
    backward: Option<BackFn<T>>,
}

/// Gradients of a scalar root with respect to tape nodes.
pub struct Grads<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient for `var`, zero-shaped if the root did not depend on it.
    pub fn get(&self, var: Var, shape: &[usize]) -> ArrayD<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(shape.to_vec()),
        }
    }

    pub fn get_opt(&self, var: Var) -> Option<&ArrayD<T>> {
        self.grads[var.0].as_ref()
    }
}

/// Differentiation tape. Build a fresh one per forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2<T: Real>(a: &ArrayD<T>) -> Array2<T> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D value")
        .to_owned()
}

fn as1<T: Real>(a: &ArrayD<T>) -> Array1<T> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected a 1-D value")
        .to_owned()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: ArrayD<T>, parents: Vec<usize>, backward: Option<BackFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Input node (parameter or constant).
    pub fn leaf(&self, value: ArrayD<T>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn value(&self, var: Var) -> ArrayD<T> {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elementwise addition of same-shaped arrays.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value + &nodes[b.0].value
        };
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value - &nodes[b.0].value
        };
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _| vec![g.clone(), g.mapv(|v| -v)])),
        )
    }

    /// Elementwise product of same-shaped arrays.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value * &nodes[b.0].value
        };
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            vec![ai, bi],
            Some(Box::new(move |g, nodes| {
                vec![g * &nodes[bi].value, g * &nodes[ai].value]
            })),
        )
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v * c);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _| vec![g.mapv(|v| v * c)])),
        )
    }

    /// 2-D matrix product `[n, k] x [k, m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            as2(&nodes[a.0].value).dot(&as2(&nodes[b.0].value))
        };
        let (ai, bi) = (a.0, b.0);
        self.push(
            value.into_dyn(),
            vec![ai, bi],
            Some(Box::new(move |g, nodes| {
                let g2 = as2(g);
                let av = as2(&nodes[ai].value);
                let bv = as2(&nodes[bi].value);
                vec![
                    g2.dot(&bv.t()).into_dyn(),
                    av.t().dot(&g2).into_dyn(),
                ]
            })),
        )
    }

    /// Add a row vector `[m]` to every row of `[n, m]`.
    pub fn add_row(&self, a: Var, bias: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let m = as2(&nodes[a.0].value);
            let b = as1(&nodes[bias.0].value);
            (&m + &b).into_dyn()
        };
        self.push(
            value,
            vec![a.0, bias.0],
            Some(Box::new(|g, _| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// Multiply every row of `[n, m]` elementwise by a row vector `[m]`.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let m = as2(&nodes[a.0].value);
            let r = as1(&nodes[row.0].value);
            (&m * &r).into_dyn()
        };
        let (ai, ri) = (a.0, row.0);
        self.push(
            value,
            vec![ai, ri],
            Some(Box::new(move |g, nodes| {
                let g2 = as2(g);
                let av = as2(&nodes[ai].value);
                let rv = as1(&nodes[ri].value);
                vec![
                    (&g2 * &rv).into_dyn(),
                    (&g2 * &av).sum_axis(Axis(0)).into_dyn(),
                ]
            })),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = as2(&self.nodes.borrow()[a.0].value).t().to_owned();
        self.push(
            value.into_dyn(),
            vec![a.0],
            Some(Box::new(|g, _| vec![as2(g).t().to_owned().into_dyn()])),
        )
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        let old_shape = self.shape(a);
        let value = self.nodes.borrow()[a.0]
            .value
            .clone()
            .into_shape_with_order(shape.clone())
            .expect("reshape size mismatch");
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _| {
                vec![g
                    .clone()
                    .into_shape_with_order(old_shape.clone())
                    .expect("reshape back")]
            })),
        )
    }

    /// Columns `[start, start + len)` of a 2-D value.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = as2(&self.nodes.borrow()[a.0].value)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let full_cols = self.shape(a)[1];
        self.push(
            value.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let mut out = Array2::<T>::zeros((g2.nrows(), full_cols));
                out.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
                vec![out.into_dyn()]
            })),
        )
    }

    /// Horizontal concatenation of 2-D values with equal row counts.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (value, widths) = {
            let nodes = self.nodes.borrow();
            let views: Vec<Array2<T>> = parts.iter().map(|p| as2(&nodes[p.0].value)).collect();
            let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
            let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
            (
                ndarray::concatenate(Axis(1), &view_refs).expect("concat_cols"),
                widths,
            )
        };
        self.push(
            value.into_dyn(),
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(widths.len());
                let mut start = 0;
                for &w in &widths {
                    out.push(g2.slice(ndarray::s![.., start..start + w]).to_owned().into_dyn());
                    start += w;
                }
                out
            })),
        )
    }

    /// Rows `[start, start + len)` of a 2-D value.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = as2(&self.nodes.borrow()[a.0].value)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let full_rows = self.shape(a)[0];
        self.push(
            value.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let mut out = Array2::<T>::zeros((full_rows, g2.ncols()));
                out.slice_mut(ndarray::s![start..start + len, ..]).assign(&g2);
                vec![out.into_dyn()]
            })),
        )
    }

    /// Vertical concatenation of 2-D values with equal column counts.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (value, heights) = {
            let nodes = self.nodes.borrow();
            let views: Vec<Array2<T>> = parts.iter().map(|p| as2(&nodes[p.0].value)).collect();
            let heights: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
            let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
            (
                ndarray::concatenate(Axis(0), &view_refs).expect("concat_rows"),
                heights,
            )
        };
        self.push(
            value.into_dyn(),
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(heights.len());
                let mut start = 0;
                for &h in &heights {
                    out.push(g2.slice(ndarray::s![start..start + h, ..]).to_owned().into_dyn());
                    start += h;
                }
                out
            })),
        )
    }

    /// Row-wise softmax of a 2-D value.
    pub fn softmax(&self, a: Var) -> Var {
        let value = {
            let x = as2(&self.nodes.borrow()[a.0].value);
            let mut out = x;
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            out
        };
        let out_val = value.clone();
        self.push(
            value.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let y = &out_val;
                let dots = (&g2 * y).sum_axis(Axis(1));
                let mut dx = g2;
                for (mut row, (&d, yrow)) in
                    dx.rows_mut().into_iter().zip(dots.iter().zip(y.rows()))
                {
                    row.zip_mut_with(&yrow, |r, &yv| *r = (*r - d) * yv);
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let eps = T::cast_f64(eps);
        let x = as2(&self.nodes.borrow()[a.0].value);
        let n_cols = T::cast_f64(x.ncols() as f64);
        let mut y = x.clone();
        let mut inv_sigma = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let mean = row.sum() / n_cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).fold(T::zero(), |acc, v| acc + v) / n_cols;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_sigma.push(inv);
        }
        let out_val = y.clone();
        self.push(
            y.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let y = &out_val;
                let n = T::cast_f64(y.ncols() as f64);
                let mut dx = Array2::<T>::zeros(g2.raw_dim());
                for (i, ((grow, yrow), mut drow)) in g2
                    .rows()
                    .into_iter()
                    .zip(y.rows())
                    .zip(dx.rows_mut())
                    .enumerate()
                {
                    let mean_g = grow.sum() / n;
                    let mean_gy = grow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(&gv, &yv)| gv * yv)
                        .fold(T::zero(), |acc, v| acc + v)
                        / n;
                    let inv = inv_sigma[i];
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                        *d = (gv - mean_g - yv * mean_gy) * inv;
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// GELU (tanh approximation).
    pub fn gelu(&self, a: Var) -> Var {
        let c = T::cast_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::cast_f64(0.044715);
        let half = T::cast_f64(0.5);
        let one = T::one();
        let three = T::cast_f64(3.0);
        let value = self.nodes.borrow()[a.0]
            .value
            .mapv(|x| half * x * (one + (c * (x + k * x * x * x)).tanh()));
        let (ai,) = (a.0,);
        self.push(
            value,
            vec![ai],
            Some(Box::new(move |g, nodes| {
                let x = &nodes[ai].value;
                let dv = x.mapv(|x| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (one + three * k * x * x);
                    half * (one + t) + half * x * (one - t * t) * du
                });
                vec![g * &dv]
            })),
        )
    }

    /// SiLU: x * sigmoid(x).
    pub fn silu(&self, a: Var) -> Var {
        let one = T::one();
        let value = self.nodes.borrow()[a.0]
            .value
            .mapv(|x| x / (one + (-x).exp()));
        let ai = a.0;
        self.push(
            value,
            vec![ai],
            Some(Box::new(move |g, nodes| {
                let x = &nodes[ai].value;
                let dv = x.mapv(|x| {
                    let s = one / (one + (-x).exp());
                    s * (one + x * (one - s))
                });
                vec![g * &dv]
            })),
        )
    }

    /// Mean over all elements, returning a scalar (shape `[1]`).
    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len();
        let inv = T::cast_f64(1.0 / n as f64);
        let value = {
            let nodes = self.nodes.borrow();
            let sum = nodes[a.0].value.iter().fold(T::zero(), |acc, &v| acc + v);
            ArrayD::from_shape_vec(vec![1], vec![sum * inv]).unwrap()
        };
        let shape = self.shape(a);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _| {
                let gv = g[[0]] * inv;
                vec![ArrayD::from_elem(shape.clone(), gv)]
            })),
        )
    }

    /// Mean squared error between two same-shaped values (scalar output).
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Rotate adjacent column pairs `(2i, 2i+1)` of `[n, d]` by `angles[n, d/2]`.
    /// Norm-preserving; the backward pass rotates by the negated angles.
    pub fn rotate_pairs(&self, a: Var, angles: Array2<f64>) -> Var {
        let value = {
            let x = as2(&self.nodes.borrow()[a.0].value);
            rotate_pairs_fwd(&x, &angles, false)
        };
        self.push(
            value.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g, _| {
                vec![rotate_pairs_fwd(&as2(g), &angles, true).into_dyn()]
            })),
        )
    }

    /// Select rows of a table `[n, d]` by index; duplicates accumulate in the
    /// backward scatter.
    pub fn gather_rows(&self, table: Var, indices: Vec<usize>) -> Var {
        let value = {
            let t = as2(&self.nodes.borrow()[table.0].value);
            let mut out = Array2::<T>::zeros((indices.len(), t.ncols()));
            for (r, &i) in indices.iter().enumerate() {
                out.row_mut(r).assign(&t.row(i));
            }
            out
        };
        let n_rows = self.shape(table)[0];
        self.push(
            value.into_dyn(),
            vec![table.0],
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let mut out = Array2::<T>::zeros((n_rows, g2.ncols()));
                for (r, &i) in indices.iter().enumerate() {
                    let mut row = out.row_mut(i);
                    row += &g2.row(r);
                }
                vec![out.into_dyn()]
            })),
        )
    }

    /// Add `table` `[s, d]` tiled `n_tiles` times down the rows of `[n_tiles*s, d]`.
    pub fn add_tiled_rows(&self, a: Var, table: Var, n_tiles: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = as2(&nodes[a.0].value);
            let t = as2(&nodes[table.0].value);
            let s = t.nrows();
            assert_eq!(x.nrows(), n_tiles * s, "tiled row count mismatch");
            let mut out = x.clone();
            for tile in 0..n_tiles {
                let mut block = out.slice_mut(ndarray::s![tile * s..(tile + 1) * s, ..]);
                block += &t;
            }
            out
        };
        let s_rows = self.shape(table)[0];
        self.push(
            value.into_dyn(),
            vec![a.0, table.0],
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let mut dt = Array2::<T>::zeros((s_rows, g2.ncols()));
                for tile in 0..n_tiles {
                    dt += &g2.slice(ndarray::s![tile * s_rows..(tile + 1) * s_rows, ..]);
                }
                vec![g.clone(), dt.into_dyn()]
            })),
        )
    }

    /// Add a vector `[d]` to rows `[start, start+len)` of `[n, d]`.
    pub fn add_vec_to_rows(&self, a: Var, vec_var: Var, start: usize, len: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = as2(&nodes[a.0].value);
            let v = as1(&nodes[vec_var.0].value);
            let mut out = x.clone();
            let mut block = out.slice_mut(ndarray::s![start..start + len, ..]);
            block += &v;
            out
        };
        self.push(
            value.into_dyn(),
            vec![a.0, vec_var.0],
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let dv = g2
                    .slice(ndarray::s![start..start + len, ..])
                    .sum_axis(Axis(0));
                vec![g.clone(), dv.into_dyn()]
            })),
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(
            nodes[root.0].value.shape().to_vec(),
            T::one(),
        ));
        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if let Some(back) = &nodes[id].backward {
                let parent_grads = back(&grad, &nodes);
                debug_assert_eq!(parent_grads.len(), nodes[id].parents.len());
                for (pid, pg) in nodes[id].parents.iter().zip(parent_grads) {
                    match &mut grads[*pid] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Grads { grads }
    }
}

fn rotate_pairs_fwd<T: Real>(x: &Array2<T>, angles: &Array2<f64>, invert: bool) -> Array2<T> {
    let (n, d) = x.dim();
    assert_eq!(d % 2, 0, "rotate_pairs needs an even column count");
    assert_eq!(angles.dim(), (n, d / 2), "angle shape mismatch");
    let mut out = Array2::<T>::zeros((n, d));
    for r in 0..n {
        for p in 0..d / 2 {
            let theta = if invert { -angles[[r, p]] } else { angles[[r, p]] };
            let (sin, cos) = (T::cast_f64(theta.sin()), T::cast_f64(theta.cos()));
            let a = x[[r, 2 * p]];
            let b = x[[r, 2 * p + 1]];
            out[[r, 2 * p]] = a * cos - b * sin;
            out[[r, 2 * p + 1]] = a * sin + b * cos;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use ndarray::{ArrayD, IxDyn};

    fn randn(stream: &mut SeedStream, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| stream.normal()).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Central finite differences of `f` wrt each input, compared elementwise
    /// against the analytic gradient with relative tolerance.
    fn check_grads<F>(inputs: &[ArrayD<f64>], f: F, tol: f64)
    where
        F: Fn(&Tape<f64>, &[Var]) -> Var,
    {
        let tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = f(&tape, &vars);
        let grads = tape.backward(root);

        let eps = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k], x.shape());
            for idx in 0..x.len() {
                let mut plus = inputs.to_vec();
                plus[k].as_slice_mut().unwrap()[idx] += eps;
                let mut minus = inputs.to_vec();
                minus[k].as_slice_mut().unwrap()[idx] -= eps;
                let eval = |ins: &[ArrayD<f64>]| -> f64 {
                    let t = Tape::<f64>::new();
                    let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
                    let r = f(&t, &vs);
                    t.value(r)[[0]]
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                // Relative tolerance with an absolute floor of 1e-8 on the
                // difference (tiny gradients are dominated by FD roundoff).
                let allowed = (tol * fd.abs().max(a.abs())).max(1e-8);
                assert!(
                    (a - fd).abs() <= allowed,
                    "input {k} component {idx}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_add_row() {
        let mut s = SeedStream::new(1);
        let a = randn(&mut s, &[3, 4]);
        let b = randn(&mut s, &[4, 5]);
        let bias = randn(&mut s, &[5]);
        check_grads(&[a, b, bias], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.add_row(y, v[2]);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_softmax_layernorm() {
        let mut s = SeedStream::new(2);
        let x = randn(&mut s, &[4, 6]);
        check_grads(&[x.clone()], |t, v| {
            let y = t.softmax(v[0]);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }, 1e-5);
        check_grads(&[x], |t, v| {
            let y = t.layer_norm(v[0], 1e-6);
            let c = t.scale(y, 0.7);
            let sq = t.mul(c, c);
            t.mean_all(sq)
        }, 1e-5);
    }

    #[test]
    fn grad_activations() {
        let mut s = SeedStream::new(3);
        let x = randn(&mut s, &[3, 5]);
        check_grads(&[x.clone()], |t, v| {
            let y = t.gelu(v[0]);
            t.mean_all(y)
        }, 1e-6);
        check_grads(&[x], |t, v| {
            let y = t.silu(v[0]);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_slicing_concat() {
        let mut s = SeedStream::new(4);
        let x = randn(&mut s, &[4, 6]);
        let y = randn(&mut s, &[4, 2]);
        check_grads(&[x, y], |t, v| {
            let a = t.slice_cols(v[0], 1, 3);
            let b = t.concat_cols(&[a, v[1]]);
            let c = t.slice_rows(b, 1, 2);
            let d = t.concat_rows(&[c, c]);
            let sq = t.mul(d, d);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_rotate_gather_tiled() {
        let mut s = SeedStream::new(5);
        let x = randn(&mut s, &[4, 6]);
        let table = randn(&mut s, &[3, 6]);
        let flag = randn(&mut s, &[6]);
        let mut angles = Array2::<f64>::zeros((4, 3));
        for r in 0..4 {
            for p in 0..3 {
                angles[[r, p]] = s.normal();
            }
        }
        let angles2 = angles.clone();
        check_grads(&[x, table, flag], move |t, v| {
            let r = t.rotate_pairs(v[0], angles2.clone());
            let gathered = t.gather_rows(v[1], vec![0, 2, 2, 1]);
            let summed = t.add(r, gathered);
            // x has 4 rows = 2 tiles of the 2-row slice of table? use
            // add_vec_to_rows and add_tiled_rows paths:
            let flagged = t.add_vec_to_rows(summed, v[2], 1, 2);
            let sq = t.mul(flagged, flagged);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_add_tiled_rows() {
        let mut s = SeedStream::new(6);
        let x = randn(&mut s, &[6, 4]);
        let table = randn(&mut s, &[3, 4]);
        check_grads(&[x, table], |t, v| {
            let y = t.add_tiled_rows(v[0], v[1], 2);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn rotate_preserves_norm() {
        let mut s = SeedStream::new(7);
        let x = randn(&mut s, &[8, 10]);
        let mut angles = Array2::<f64>::zeros((8, 5));
        for v in angles.iter_mut() {
            *v = s.normal() * 3.0;
        }
        let tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let y = tape.value(tape.rotate_pairs(xv, angles));
        for r in 0..8 {
            let nx: f64 = (0..10).map(|c| x[[r, c]] * x[[r, c]]).sum::<f64>().sqrt();
            let ny: f64 = (0..10).map(|c| y[[r, c]] * y[[r, c]]).sum::<f64>().sqrt();
            assert!((nx - ny).abs() < 1e-12);
        }
    }

    #[test]
    fn reused_node_accumulates() {
        // y = x * x summed: dy/dx = 2x via two-parent accumulation.
        let tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, -1.5]).unwrap());
        let sq = tape.mul(x, x);
        let root = tape.mean_all(sq);
        let grads = tape.backward(root);
        let g = grads.get(x, &[2]);
        assert!((g[[0]] - 3.0).abs() < 1e-12);
        assert!((g[[1]] + 1.5).abs() < 1e-12);
    }
}
