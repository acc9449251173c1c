//! Define-by-run reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Tape`] owns every intermediate value. Operations return [`Var`]
//! handles; [`Tape::backward`] walks the tape in reverse and accumulates
//! gradients for all nodes that depend on a tracked leaf.
//!
//! Besides the generic array operations the tape carries fused kernels for
//! the geometric-algebra layers. Multivector tensors are component-major,
//! `[16, tokens, channels]`, so that every blade is a contiguous slab.
//! They are expressed once here with hand-written adjoints instead of being
//! assembled from dozens of tiny scalar ops.
//!
//! Broadcasting is limited to elementwise ops whose right operand matches the
//! trailing dimensions of the left one.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::ga::{DIM, NON_DEGENERATE, TABLES};

/// Floating-point element type of a tape.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// All pointers must address valid storage for the given shapes and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A matrix view into a flat buffer.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn dense(rows: usize, cols: usize) -> Self {
        View { offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    fn t(self) -> Self {
        View { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c += a · b` (or `c = a · b` when `overwrite`), bounds checked.
fn gemm<T: Real>(a: &[T], av: View, b: &[T], bv: View, c: &mut [T], cv: View, overwrite: bool) {
    assert_eq!(av.cols, bv.rows);
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols));
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        if overwrite {
            for r in 0..cv.rows {
                for col in 0..cv.cols {
                    c[cv.offset + r * cv.rs + col * cv.cs] = T::zero();
                }
            }
        }
        return;
    }
    assert!(av.last_index() < a.len() && bv.last_index() < b.len() && cv.last_index() < c.len());
    let beta = if overwrite { T::zero() } else { T::one() };
    // SAFETY: views were bounds checked above; `c` does not alias `a` or `b`.
    unsafe {
        T::gemm(
            av.rows,
            av.cols,
            bv.cols,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn scalar(x: T) -> Self {
        Self { shape: vec![1], data: vec![x] }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Softmax { src: Var, axis: usize },
    Gather { src: Var, idx: Vec<usize> },
    ScatterAdd { src: Var, idx: Vec<usize> },
    SelectLast { src: Var, idx: Vec<usize> },
    LayerNorm { src: Var, inv_std: Vec<T> },
    EquiLinear { x: Var, w: Var },
    GeometricProduct(Var, Var),
    Join { a: Var, b: Var, r: Var, raw: Vec<T> },
    Attention { q: Var, k: Var, v: Var, segments: Vec<(usize, usize)>, probs: Vec<Vec<T>> },
    MvGate(Var),
    MvNorm { src: Var, inv_norm: Vec<T> },
    Permute { src: Var, perm: [usize; 3] },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Recorded computation. One tape per forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.shapes[v.0]],
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Blade index ranges of each grade; grade `k` uses weight slot `k`.
const GRADE_RANGES: [(usize, usize); 5] = [(0, 1), (1, 5), (5, 11), (11, 15), (15, 16)];
/// `(output start, source start, length, weight slot)` of the `e0 ⟨x⟩_k`
/// terms: the blades `e0 e_J` are laid out in the same order as their `e_J`.
const E0_GROUPS: [(usize, usize, usize, usize); 4] = [(1, 0, 1, 5), (5, 2, 3, 6), (11, 8, 3, 7), (15, 14, 1, 8)];

/// Number of free coefficients of an equivariant linear map per channel pair.
pub const EQUI_COEFFS: usize = 9;

const LN_EPS: f64 = 1e-5;
/// Stabilizer of the multivector norm layer.
pub const MV_NORM_EPS: f64 = 1e-6;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    fn broadcast_ok(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sb.len() <= sa.len() && sa.ends_with(sb)) {
            Ok(())
        } else {
            Err(Error::Argument(format!("incompatible shapes {sa:?} and {sb:?}")))
        }
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.broadcast_ok(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(va.len());
        if !vb.data.is_empty() {
            for chunk in va.data.chunks_exact(vb.len()) {
                data.extend(chunk.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)));
            }
        }
        let value = Tensor { shape: va.shape.clone(), data };
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    /// Elementwise sum; `b` may match the trailing dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(a);
        let value = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| x * s).collect() };
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Scale(a, s), tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Argument(format!("matmul shapes {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(self.data(a), View::dense(m, k), self.data(b), View::dense(k, n), &mut out, View::dense(m, n), true);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::Matmul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Argument(format!("transpose needs a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Transpose(a), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::Argument(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        let value = Tensor { shape, data: self.data(a).to_vec() };
        let tracked = self.tracked(&[a]);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Argument("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Argument(format!("concat axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &x)| d != axis && x != first[d]) {
                return Err(Error::Argument(format!("concat shapes {first:?} and {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor { shape, data }, Op::Concat { parts: parts.to_vec(), axis }, tracked))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Argument(format!("slice {start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        let src_data = self.data(src);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src_data[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let tracked = self.tracked(&[src]);
        Ok(self.push(Tensor { shape, data }, Op::Slice { src, axis, start }, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len().max(1) as f64);
        let s: T = self.data(a).iter().copied().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s / n), Op::Mean(a), tracked)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a);
        let value = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| f(x)).collect() };
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn softmax(&mut self, src: Var, axis: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if axis >= s.len() {
            return Err(Error::Argument(format!("softmax axis {axis} for shape {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let x = self.data(src);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..n {
                    let e = (x[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let tracked = self.tracked(&[src]);
        Ok(self.push(Tensor { shape: s, data: out }, Op::Softmax { src, axis }, tracked))
    }

    /// Rows of `src` (axis 0) at `idx`.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let rows = *s.first().ok_or_else(|| Error::Argument("gather from a scalar".into()))?;
        let row: usize = s[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Argument(format!("gather index {bad} out of range for {s:?}")));
        }
        let x = self.data(src);
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let tracked = self.tracked(&[src]);
        Ok(self.push(Tensor { shape, data }, Op::Gather { src, idx: idx.to_vec() }, tracked))
    }

    /// Adjoint of [`Tape::gather`]: row `k` of `src` is added into row `idx[k]`
    /// of a zero tensor with `rows` rows.
    pub fn scatter_add(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.first() != Some(&idx.len()) {
            return Err(Error::Argument(format!("scatter of {s:?} with {} indices", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Argument(format!("scatter index {bad} out of range for {rows} rows")));
        }
        let row: usize = s[1..].iter().product();
        let mut data = vec![T::zero(); rows * row];
        let x = self.data(src);
        for (k, &i) in idx.iter().enumerate() {
            for c in 0..row {
                data[i * row + c] += x[k * row + c];
            }
        }
        let mut shape = s;
        shape[0] = rows;
        let tracked = self.tracked(&[src]);
        Ok(self.push(Tensor { shape, data }, Op::ScatterAdd { src, idx: idx.to_vec() }, tracked))
    }

    /// Entries `idx` of the last axis.
    pub fn select_last(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let w = *s.last().ok_or_else(|| Error::Argument("select from a scalar".into()))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= w) {
            return Err(Error::Argument(format!("select index {bad} out of range for {s:?}")));
        }
        let x = self.data(src);
        let rows = x.len() / w.max(1);
        let mut data = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            data.extend(idx.iter().map(|&i| x[r * w + i]));
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = idx.len();
        let tracked = self.tracked(&[src]);
        Ok(self.push(Tensor { shape, data }, Op::SelectLast { src, idx: idx.to_vec() }, tracked))
    }

    /// Standardizes every row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, src: Var) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let w = *s.last().ok_or_else(|| Error::Argument("layer norm of a scalar".into()))?;
        let x = self.data(src);
        let rows = x.len() / w.max(1);
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let wn = T::of(w as f64);
        for r in 0..rows {
            let row = &x[r * w..(r + 1) * w];
            let mu = row.iter().copied().sum::<T>() / wn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / wn;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            for c in 0..w {
                out[r * w + c] = (row[c] - mu) * is;
            }
            inv_std.push(is);
        }
        let tracked = self.tracked(&[src]);
        Ok(self.push(Tensor { shape: s, data: out }, Op::LayerNorm { src, inv_std }, tracked))
    }

    /// Reorders the axes of a 3-D tensor: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, src: Var, perm: [usize; 3]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let mut seen = [false; 3];
        for &p in &perm {
            if p < 3 {
                seen[p] = true;
            }
        }
        if s.len() != 3 || seen.contains(&false) {
            return Err(Error::Argument(format!("permute {perm:?} of shape {s:?}")));
        }
        let (shape, strides) = permuted(&s, perm);
        let x = self.data(src);
        let mut data = Vec::with_capacity(x.len());
        for i0 in 0..shape[0] {
            for i1 in 0..shape[1] {
                let base = i0 * strides[0] + i1 * strides[1];
                data.extend((0..shape[2]).map(|i2| x[base + i2 * strides[2]]));
            }
        }
        let tracked = self.tracked(&[src]);
        Ok(self.push(Tensor { shape: shape.to_vec(), data }, Op::Permute { src, perm }, tracked))
    }

    fn mv_shape(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 3 || s[0] != DIM {
            return Err(Error::Argument(format!("{what} expects [16, tokens, channels], got {s:?}")));
        }
        Ok((s[1], s[2]))
    }

    /// `y_c = Σ_c' Σ_k w[c,c',k] ⟨x_c'⟩_k + Σ_k w[c,c',5+k] e0 ⟨x_c'⟩_k`.
    ///
    /// `x: [16, N, Ci]`, `w: [Co, Ci, 9]` → `[16, N, Co]`.
    pub fn equi_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, ci) = self.mv_shape(x, "equi_linear")?;
        let sw = self.shape(w).to_vec();
        if sw.len() != 3 || sw[1] != ci || sw[2] != EQUI_COEFFS {
            return Err(Error::Argument(format!("equi_linear weights {sw:?} for {ci} input channels")));
        }
        let co = sw[0];
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![T::zero(); DIM * n * co];
        let wt = |slot: usize| equi_weight_view(slot, co, ci).t();
        for (slot, &(a, b)) in GRADE_RANGES.iter().enumerate() {
            gemm(xd, component_rows(a, b - a, n, ci), wd, wt(slot), &mut out, component_rows(a, b - a, n, co), true);
        }
        for &(o, src, len, slot) in &E0_GROUPS {
            gemm(xd, component_rows(src, len, n, ci), wd, wt(slot), &mut out, component_rows(o, len, n, co), false);
        }
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(Tensor { shape: vec![DIM, n, co], data: out }, Op::EquiLinear { x, w }, tracked))
    }

    fn same_mv(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let sa = self.mv_shape(a, what)?;
        let sb = self.mv_shape(b, what)?;
        if sa != sb {
            return Err(Error::Argument(format!("{what} operands {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(sa)
    }

    /// Channel-wise geometric product of two `[16, N, C]` tensors.
    pub fn geometric_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = self.same_mv(a, b, "geometric_product")?;
        let mut out = vec![T::zero(); DIM * n * c];
        bilinear_forward(&TABLES.geometric, self.data(a), self.data(b), &mut out, n * c);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor { shape: vec![DIM, n, c], data: out }, Op::GeometricProduct(a, b), tracked))
    }

    /// Channel-wise join of two `[16, N, C]` tensors, scaled per token by
    /// `r` (the reference's homogeneous coordinate), which holds either one
    /// value or one value per token.
    pub fn join(&mut self, a: Var, b: Var, r: Var) -> Result<Var> {
        let (n, c) = self.same_mv(a, b, "join")?;
        let nr = self.value(r).len();
        if nr != 1 && nr != n {
            return Err(Error::Argument(format!("join reference of shape {:?} for {n} tokens", self.shape(r))));
        }
        let m = n * c;
        let mut raw = vec![T::zero(); DIM * m];
        bilinear_forward(&TABLES.join, self.data(a), self.data(b), &mut raw, m);
        let rexp = expand_reference(self.data(r), n, c);
        let mut out = raw.clone();
        for comp in out.chunks_exact_mut(m) {
            comp.iter_mut().zip(&rexp).for_each(|(x, &s)| *x *= s);
        }
        let tracked = self.tracked(&[a, b, r]);
        Ok(self.push(Tensor { shape: vec![DIM, n, c], data: out }, Op::Join { a, b, r, raw }, tracked))
    }

    /// Multi-query scaled dot-product attention within token segments.
    ///
    /// `q: [N, H, D]`, `k: [N, D]`, `v: [N, E]` → `[N, H, E]`. Token `i` of a
    /// segment attends to every token of the same segment with logits
    /// `q_ih · k_j / √D`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 2 || sv.len() != 2 || sk[0] != sq[0] || sv[0] != sq[0] || sk[1] != sq[2] {
            return Err(Error::Argument(format!("attention shapes {sq:?}, {sk:?}, {sv:?}")));
        }
        let (n, h, d, e) = (sq[0], sq[1], sq[2], sv[1]);
        let mut covered = 0;
        for &(start, len) in segments {
            if start != covered || len == 0 {
                return Err(Error::Argument("attention segments must tile the tokens in order".into()));
            }
            covered += len;
        }
        if covered != n {
            return Err(Error::Argument(format!("attention segments cover {covered} of {n} tokens")));
        }
        let scale = T::of(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); n * h * e];
        let mut probs = Vec::new();
        for &(start, len) in segments {
            let rows = len * h;
            let mut p = vec![T::zero(); rows * len];
            let qv = View { offset: start * h * d, rows, cols: d, rs: d, cs: 1 };
            let kt = View { offset: start * d, rows: len, cols: d, rs: d, cs: 1 }.t();
            gemm(qd, qv, kd, kt, &mut p, View::dense(rows, len), true);
            for r in 0..rows {
                let row = &mut p[r * len..(r + 1) * len];
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
                let mut z = T::zero();
                for x in row.iter_mut() {
                    *x = (*x * scale - m).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x = *x / z;
                }
            }
            let vv = View { offset: start * e, rows: len, cols: e, rs: e, cs: 1 };
            let ov = View { offset: start * h * e, rows, cols: e, rs: e, cs: 1 };
            gemm(&p, View::dense(rows, len), vd, vv, &mut out, ov, true);
            probs.push(p);
        }
        let tracked = self.tracked(&[q, k, v]);
        let op = Op::Attention { q, k, v, segments: segments.to_vec(), probs };
        Ok(self.push(Tensor { shape: vec![n, h, e], data: out }, op, tracked))
    }

    /// `y_c = gelu(⟨x_c⟩₀) x_c`.
    pub fn mv_gate(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.mv_shape(x, "mv_gate")?;
        let m = n * c;
        let xd = self.data(x);
        let gate: Vec<T> = xd[..m].iter().map(|&v| gelu(v)).collect();
        let mut out = Vec::with_capacity(xd.len());
        for comp in xd.chunks_exact(m) {
            out.extend(comp.iter().zip(&gate).map(|(&v, &g)| v * g));
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor { shape: vec![DIM, n, c], data: out }, Op::MvGate(x), tracked))
    }

    /// Per token, divides every channel by `sqrt(mean_c ⟨x_c, x_c⟩ + ε)`.
    pub fn mv_norm(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.mv_shape(x, "mv_norm")?;
        let m = n * c;
        let xd = self.data(x);
        let mut ss = vec![T::zero(); n];
        for &i in &NON_DEGENERATE {
            for (t, tok) in xd[i * m..(i + 1) * m].chunks_exact(c.max(1)).enumerate() {
                ss[t] += tok.iter().map(|&v| v * v).sum::<T>();
            }
        }
        let cn = T::of(c.max(1) as f64);
        let inv_norm: Vec<T> = ss.iter().map(|&v| T::one() / (v / cn + T::of(MV_NORM_EPS)).sqrt()).collect();
        let mut out = Vec::with_capacity(xd.len());
        for comp in xd.chunks_exact(m.max(1)) {
            for (tok, &s) in comp.chunks_exact(c.max(1)).zip(&inv_norm) {
                out.extend(tok.iter().map(|&v| v * s));
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor { shape: vec![DIM, n, c], data: out }, Op::MvNorm { src: x, inv_norm }, tracked))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.len()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[idx].op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let nb = gb.len();
                    for chunk in g.chunks_exact(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                let nb = vb.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (gac, gc) in ga.chunks_exact_mut(nb).zip(g.chunks_exact(nb)) {
                        for ((x, &y), &w) in gac.iter_mut().zip(gc).zip(vb) {
                            *x += y * w;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (ac, gc) in va.chunks_exact(nb).zip(g.chunks_exact(nb)) {
                        for ((x, &y), &w) in gb.iter_mut().zip(gc).zip(ac) {
                            *x += y * w;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(g, View::dense(m, n), self.data(*b), View::dense(k, n).t(), ga, View::dense(m, k), false);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(self.data(*a), View::dense(m, k).t(), g, View::dense(m, n), gb, View::dense(k, n), false);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let (n, m) = (out.shape[0], out.shape[1]);
                    for j in 0..n {
                        for i in 0..m {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&out.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    let total = out.shape[*axis] * inner;
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            for c in 0..len {
                                gp[o * len + c] += g[o * total + offset + c];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let s = self.shape(*src).to_vec();
                let (outer, n, inner) = split_axis(&s, *axis);
                let len = out.shape[*axis];
                if let Some(gs) = self.acc(grads, *src) {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        for c in 0..len * inner {
                            gs[base + c] += g[o * len * inner + c];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let n = T::of(ga.len().max(1) as f64);
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Sqrt(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * T::of(0.5) / out.data[i];
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * out.data[i];
                    }
                }
            }
            Op::Log(a) => {
                let va = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] / va[i];
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * gelu_grad(va[i]);
                    }
                }
            }
            Op::Softmax { src, axis } => {
                let (outer, n, inner) = split_axis(&out.shape, *axis);
                if let Some(gs) = self.acc(grads, *src) {
                    let y = &out.data;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: T = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                gs[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Gather { src, idx } => {
                let row = out.len() / idx.len().max(1);
                if let Some(gs) = self.acc(grads, *src) {
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..row {
                            gs[i * row + c] += g[k * row + c];
                        }
                    }
                }
            }
            Op::ScatterAdd { src, idx } => {
                let row: usize = out.shape[1..].iter().product();
                if let Some(gs) = self.acc(grads, *src) {
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..row {
                            gs[k * row + c] += g[i * row + c];
                        }
                    }
                }
            }
            Op::SelectLast { src, idx } => {
                let w = *self.shape(*src).last().unwrap();
                let m = idx.len();
                if let Some(gs) = self.acc(grads, *src) {
                    let rows = gs.len() / w.max(1);
                    for r in 0..rows {
                        for (k, &i) in idx.iter().enumerate() {
                            gs[r * w + i] += g[r * m + k];
                        }
                    }
                }
            }
            Op::LayerNorm { src, inv_std } => {
                let w = *out.shape.last().unwrap();
                let wn = T::of(w as f64);
                if let Some(gs) = self.acc(grads, *src) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let y = &out.data[r * w..(r + 1) * w];
                        let dy = &g[r * w..(r + 1) * w];
                        let mean_dy = dy.iter().copied().sum::<T>() / wn;
                        let mean_dyy = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / wn;
                        for c in 0..w {
                            gs[r * w + c] += is * (dy[c] - mean_dy - y[c] * mean_dyy);
                        }
                    }
                }
            }
            Op::Permute { src, perm } => {
                let (shape, strides) = permuted(self.shape(*src), *perm);
                if let Some(gs) = self.acc(grads, *src) {
                    let mut k = 0;
                    for i0 in 0..shape[0] {
                        for i1 in 0..shape[1] {
                            let base = i0 * strides[0] + i1 * strides[1];
                            for i2 in 0..shape[2] {
                                gs[base + i2 * strides[2]] += g[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
            Op::EquiLinear { x, w } => {
                let (n, ci) = (self.shape(*x)[1], self.shape(*x)[2]);
                let co = self.shape(*w)[0];
                let (xd, wd) = (self.data(*x), self.data(*w));
                let xr = |a: usize, len: usize| component_rows(a, len, n, ci);
                let gr = |a: usize, len: usize| component_rows(a, len, n, co);
                if let Some(gx) = self.acc(grads, *x) {
                    for (slot, &(a, b)) in GRADE_RANGES.iter().enumerate() {
                        gemm(g, gr(a, b - a), wd, equi_weight_view(slot, co, ci), gx, xr(a, b - a), false);
                    }
                    for &(o, src, len, slot) in &E0_GROUPS {
                        gemm(g, gr(o, len), wd, equi_weight_view(slot, co, ci), gx, xr(src, len), false);
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for (slot, &(a, b)) in GRADE_RANGES.iter().enumerate() {
                        gemm(g, gr(a, b - a).t(), xd, xr(a, b - a), gw, equi_weight_view(slot, co, ci), false);
                    }
                    for &(o, src, len, slot) in &E0_GROUPS {
                        gemm(g, gr(o, len).t(), xd, xr(src, len), gw, equi_weight_view(slot, co, ci), false);
                    }
                }
            }
            Op::GeometricProduct(a, b) => {
                let m = out.shape[1] * out.shape[2];
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    bilinear_grad_left(&TABLES.geometric, vb, g, ga, m);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    bilinear_grad_right(&TABLES.geometric, va, g, gb, m);
                }
            }
            Op::Join { a, b, r, raw } => {
                let (n, c) = (out.shape[1], out.shape[2]);
                let m = n * c;
                let (va, vb) = (self.data(*a), self.data(*b));
                let rexp = expand_reference(self.data(*r), n, c);
                let mut scaled = g.to_vec();
                for comp in scaled.chunks_exact_mut(m) {
                    comp.iter_mut().zip(&rexp).for_each(|(x, &s)| *x *= s);
                }
                if let Some(ga) = self.acc(grads, *a) {
                    bilinear_grad_left(&TABLES.join, vb, &scaled, ga, m);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    bilinear_grad_right(&TABLES.join, va, &scaled, gb, m);
                }
                if let Some(grr) = self.acc(grads, *r) {
                    let per_token = grr.len() != 1;
                    for (rc, gc) in raw.chunks_exact(m).zip(g.chunks_exact(m)) {
                        for (t, (rt, gt)) in rc.chunks_exact(c).zip(gc.chunks_exact(c)).enumerate() {
                            let d: T = rt.iter().zip(gt).map(|(&x, &y)| x * y).sum();
                            grr[if per_token { t } else { 0 }] += d;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, segments, probs } => {
                let (h, d) = (self.shape(*q)[1], self.shape(*q)[2]);
                let e = self.shape(*v)[1];
                let scale = T::of(1.0 / (d as f64).sqrt());
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut gq = self.nodes[q.0].tracked.then(|| vec![T::zero(); qd.len()]);
                let mut gk = self.nodes[k.0].tracked.then(|| vec![T::zero(); kd.len()]);
                let mut gv = self.nodes[v.0].tracked.then(|| vec![T::zero(); vd.len()]);
                for (&(start, len), p) in segments.iter().zip(probs) {
                    let rows = len * h;
                    let pv = View::dense(rows, len);
                    let gov = View { offset: start * h * e, rows, cols: e, rs: e, cs: 1 };
                    let vv = View { offset: start * e, rows: len, cols: e, rs: e, cs: 1 };
                    if let Some(gv) = gv.as_mut() {
                        gemm(p, pv.t(), g, gov, gv, vv, false);
                    }
                    if gq.is_none() && gk.is_none() {
                        continue;
                    }
                    let mut dl = vec![T::zero(); rows * len];
                    gemm(g, gov, vd, vv.t(), &mut dl, pv, true);
                    for r in 0..rows {
                        let pr = &p[r * len..(r + 1) * len];
                        let dr = &mut dl[r * len..(r + 1) * len];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for (x, &pp) in dr.iter_mut().zip(pr) {
                            *x = pp * (*x - dot) * scale;
                        }
                    }
                    let qv = View { offset: start * h * d, rows, cols: d, rs: d, cs: 1 };
                    let kv = View { offset: start * d, rows: len, cols: d, rs: d, cs: 1 };
                    if let Some(gq) = gq.as_mut() {
                        gemm(&dl, pv, kd, kv, gq, qv, false);
                    }
                    if let Some(gk) = gk.as_mut() {
                        gemm(&dl, pv.t(), qd, qv, gk, kv, false);
                    }
                }
                for (var, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let (Some(local), Some(acc)) = (local, self.acc(grads, var)) {
                        acc.iter_mut().zip(local).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::MvGate(x) => {
                let m = out.shape[1] * out.shape[2];
                let xd = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    let gate: Vec<T> = xd[..m].iter().map(|&v| gelu(v)).collect();
                    let mut dot = vec![T::zero(); m];
                    for ((gc, xc), gxc) in g.chunks_exact(m).zip(xd.chunks_exact(m)).zip(gx.chunks_exact_mut(m)) {
                        for k in 0..m {
                            gxc[k] += gate[k] * gc[k];
                            dot[k] += xc[k] * gc[k];
                        }
                    }
                    for k in 0..m {
                        gx[k] += gelu_grad(xd[k]) * dot[k];
                    }
                }
            }
            Op::MvNorm { src, inv_norm } => {
                let (n, c) = (out.shape[1], out.shape[2]);
                let m = n * c;
                let xd = self.data(*src);
                let cn = T::of(c.max(1) as f64);
                if let Some(gx) = self.acc(grads, *src) {
                    let mut dot = vec![T::zero(); n];
                    for (gc, xc) in g.chunks_exact(m).zip(xd.chunks_exact(m)) {
                        for (t, (gt, xt)) in gc.chunks_exact(c).zip(xc.chunks_exact(c)).enumerate() {
                            dot[t] += gt.iter().zip(xt).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                    let coef: Vec<T> = inv_norm.iter().zip(&dot).map(|(&s, &d)| -s * s * s * d / cn).collect();
                    for (i, ((gc, xc), gxc)) in g.chunks_exact(m).zip(xd.chunks_exact(m)).zip(gx.chunks_exact_mut(m)).enumerate() {
                        let nd = NON_DEGENERATE.contains(&i);
                        for (t, ((gt, xt), gxt)) in gc.chunks_exact(c).zip(xc.chunks_exact(c)).zip(gxc.chunks_exact_mut(c)).enumerate() {
                            let (s, k) = (inv_norm[t], if nd { coef[t] } else { T::zero() });
                            for ((o, &gv), &xv) in gxt.iter_mut().zip(gt).zip(xt) {
                                *o += s * gv + k * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output shape and input strides of a 3-D permutation.
fn permuted(s: &[usize], perm: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let in_strides = [s[1] * s[2], s[2], 1];
    (perm.map(|p| s[p]), perm.map(|p| in_strides[p]))
}

/// Rows `[start, start + len)` of the component axis of a `[16, N, C]`
/// buffer, as a `(len·N) × C` matrix.
fn component_rows(start: usize, len: usize, n: usize, c: usize) -> View {
    View { offset: start * n * c, rows: len * n, cols: c, rs: c, cs: 1 }
}

/// Weight slot `slot` of `[Co, Ci, 9]` equivariant weights as a `Co × Ci` matrix.
fn equi_weight_view(slot: usize, co: usize, ci: usize) -> View {
    View { offset: slot, rows: co, cols: ci, rs: ci * EQUI_COEFFS, cs: EQUI_COEFFS }
}

/// Per-token reference values repeated over `c` channels.
fn expand_reference<T: Real>(r: &[T], n: usize, c: usize) -> Vec<T> {
    (0..n * c).map(|k| r[if r.len() == 1 { 0 } else { k / c }]).collect()
}

/// Elements processed per pass over the bilinear tables; keeps the touched
/// slices of all 48 components in cache.
const BILINEAR_BLOCK: usize = 256;

/// `out_r += s · a_i ⊙ b_j` for every table entry, over component-major
/// buffers with `m` elements per component.
fn bilinear_forward<T: Real>(table: &[(usize, usize, usize, f64)], a: &[T], b: &[T], out: &mut [T], m: usize) {
    bilinear_blocks(table, a, b, out, m, |(i, j, r)| (i, j, r));
}

fn bilinear_grad_left<T: Real>(table: &[(usize, usize, usize, f64)], b: &[T], g: &[T], ga: &mut [T], m: usize) {
    bilinear_blocks(table, b, g, ga, m, |(i, j, r)| (j, r, i));
}

fn bilinear_grad_right<T: Real>(table: &[(usize, usize, usize, f64)], a: &[T], g: &[T], gb: &mut [T], m: usize) {
    bilinear_blocks(table, a, g, gb, m, |(i, j, r)| (i, r, j));
}

/// For every table entry `(i, j, r, s)`, with `(p, q, o) = route(i, j, r)`,
/// accumulates `out_o += s · x_p ⊙ y_q`.
fn bilinear_blocks<T: Real>(
    table: &[(usize, usize, usize, f64)],
    x: &[T],
    y: &[T],
    out: &mut [T],
    m: usize,
    route: impl Fn((usize, usize, usize)) -> (usize, usize, usize),
) {
    let table: Vec<(usize, usize, usize, T)> = table
        .iter()
        .map(|&(i, j, r, s)| {
            let (p, q, o) = route((i, j, r));
            (p, q, o, T::of(s))
        })
        .collect();
    let mut lo = 0;
    while lo < m {
        let len = BILINEAR_BLOCK.min(m - lo);
        for &(p, q, o, s) in &table {
            let xs = &x[p * m + lo..p * m + lo + len];
            let ys = &y[q * m + lo..q * m + lo + len];
            let os = &mut out[o * m + lo..o * m + lo + len];
            for ((o, &a), &b) in os.iter_mut().zip(xs).zip(ys) {
                *o += s * a * b;
            }
        }
        lo += len;
    }
}

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
    /// where `floor` is `1e-3` times the largest numeric gradient magnitude.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Checks the gradient of the scalar function `f` with respect to every
/// element of every input, using central differences with `step`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Argument("gradcheck needs a scalar function".into()));
        }
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, &v) in vars.iter().enumerate() {
        let ga = grads.wrt(v);
        for e in 0..inputs[which].len() {
            let x0 = probe[which].data[e];
            probe[which].data[e] = x0 + step;
            let fp = eval(&probe)?;
            probe[which].data[e] = x0 - step;
            let fm = eval(&probe)?;
            probe[which].data[e] = x0;
            numeric.push((fp - fm) / (2.0 * step));
            analytic.push(ga[e]);
        }
    }
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let d = (a - n).abs();
        max_abs = max_abs.max(d);
        max_rel = max_rel.max(d / a.abs().max(n.abs()).max(floor));
    }
    Ok(GradcheckReport { max_rel_error: max_rel, max_abs_error: max_abs, checked: analytic.len(), passed: max_rel < tolerance })
}
