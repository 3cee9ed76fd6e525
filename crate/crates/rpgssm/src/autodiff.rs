//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! Every value on the [`Tape`] is a dense f64 matrix: column vectors are
//! (n, 1), scalars are (1, 1). The tape is an append-only record of primitive
//! operations, so node ids are topologically ordered by construction and the
//! backward pass is a single reverse sweep that visits each node once.
//!
//! The primitive set is the closure of what the training objective needs:
//! linear algebra (matmul, transpose, solves), elementwise maps (tanh,
//! softplus), reductions (trace, sum, log-sum-exp), and three fused SPD
//! primitives — Cholesky log-determinant, SPD solve, and the columnwise
//! Gaussian log-normalizer Φ — that factorize once per call instead of once
//! per scalar. SPD inputs are symmetrized internally, so the reported
//! gradients match central finite differences entry by entry even for
//! asymmetric perturbations.
//!
//! No higher-order derivatives, broadcasting beyond column-vector helpers, or
//! dynamic shape polymorphism: first-order gradients of a scalar objective
//! are all the trainer needs.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::LN_2PI;

/// Process-global counter handing every tape a distinct identity, so
/// variables can be checked against the tape they were recorded on.
static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value on a [`Tape`]: node id plus immutable shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Trainable input.
    Leaf,
    /// Non-differentiable input; adjoints are never propagated into it.
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    /// Elementwise (Hadamard) product.
    Mul(usize, usize),
    /// Elementwise quotient.
    Div(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Softplus(usize),
    Trace(usize),
    SumAll(usize),
    /// a + v·1ᵀ — add a column vector to every column.
    AddColVec(usize, usize),
    /// a ∘ (v·1ᵀ) — scale row i of a by v[i].
    ScaleRows(usize, usize),
    /// v·1ᵀ — tile a column vector into k columns.
    RepeatCol(usize),
    DiagFromVec(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    /// log det of the symmetrized input, via Cholesky.
    CholLogDet(usize),
    /// (L, B) ↦ L⁻¹B reading only the lower triangle of L.
    TriSolveLower(usize, usize),
    /// (x, A) ↦ xᵀAx.
    QuadForm(usize, usize),
    /// (S, B) ↦ sym(S)⁻¹B via Cholesky.
    SpdSolve(usize, usize),
    /// (H, J) ↦ column k gets Φ(H₍ₖ₎, sym(J)); one factorization for all k.
    PhiMulti(usize, usize),
    /// (H, P) ↦ column k gets Φ(H₍ₖ₎, diag(P₍ₖ₎)) for positive P.
    PhiDiag(usize, usize),
    /// Log-sum-exp over all entries of a vector.
    LogSumExp(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DMatrix<f64>,
    /// Auxiliary forward results kept for the backward pass (e.g. Cholesky
    /// inverses), so SPD factorizations are not repeated.
    saved: Vec<DMatrix<f64>>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: RefCell::new(Vec::new()) }
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus_scalar`] for y > 0: the x with softplus(x) = y.
pub(crate) fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y − 1) = y + ln(1 − e^{−y}), stable for large y.
    y + (-(-y).exp()).ln_1p()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, value: DMatrix<f64>, saved: Vec<DMatrix<f64>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let (rows, cols) = value.shape();
        nodes.push(Node { op, value, saved, requires_grad });
        Var { tape: self.id, id, rows, cols }
    }

    fn rg(&self, v: Var) -> bool {
        assert!(v.tape == self.id, "variable belongs to a different tape");
        self.nodes.borrow()[v.id].requires_grad
    }

    /// Trainable leaf.
    pub fn var(&self, value: DMatrix<f64>) -> Var {
        self.push(Op::Leaf, value, vec![], true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: DMatrix<f64>) -> Var {
        self.push(Op::Constant, value, vec![], false)
    }

    pub fn constant_vec(&self, value: DVector<f64>) -> Var {
        let (n, _) = value.shape();
        self.constant(DMatrix::from_column_slice(n, 1, value.as_slice()))
    }

    pub fn constant_scalar(&self, value: f64) -> Var {
        self.constant(DMatrix::from_element(1, 1, value))
    }

    /// Forward value of a variable (cloned).
    pub fn value(&self, v: Var) -> DMatrix<f64> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert!(v.is_scalar(), "scalar() on a {}×{} variable", v.rows, v.cols);
        self.nodes.borrow()[v.id].value[(0, 0)]
    }

    fn binary_elementwise(&self, a: Var, b: Var, what: &str) {
        assert!(
            a.rows == b.rows && a.cols == b.cols,
            "{what}: shape mismatch {}×{} vs {}×{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        );
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, "add");
        let value = {
            let n = self.nodes.borrow();
            &n[a.id].value + &n[b.id].value
        };
        self.push(Op::Add(a.id, b.id), value, vec![], self.rg(a) || self.rg(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, "sub");
        let value = {
            let n = self.nodes.borrow();
            &n[a.id].value - &n[b.id].value
        };
        self.push(Op::Sub(a.id, b.id), value, vec![], self.rg(a) || self.rg(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, "mul");
        let value = {
            let n = self.nodes.borrow();
            n[a.id].value.component_mul(&n[b.id].value)
        };
        self.push(Op::Mul(a.id, b.id), value, vec![], self.rg(a) || self.rg(b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, "div");
        let value = {
            let n = self.nodes.borrow();
            n[a.id].value.component_div(&n[b.id].value)
        };
        self.push(Op::Div(a.id, b.id), value, vec![], self.rg(a) || self.rg(b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = {
            let n = self.nodes.borrow();
            &n[a.id].value * c
        };
        self.push(Op::Scale(a.id, c), value, vec![], self.rg(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        assert!(
            a.cols == b.rows,
            "matmul: inner dimensions {}×{} vs {}×{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        );
        let value = {
            let n = self.nodes.borrow();
            &n[a.id].value * &n[b.id].value
        };
        self.push(Op::MatMul(a.id, b.id), value, vec![], self.rg(a) || self.rg(b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id].value.transpose();
        self.push(Op::Transpose(a.id), value, vec![], self.rg(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id].value.map(f64::tanh);
        self.push(Op::Tanh(a.id), value, vec![], self.rg(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id].value.map(softplus_scalar);
        self.push(Op::Softplus(a.id), value, vec![], self.rg(a))
    }

    pub fn trace(&self, a: Var) -> Var {
        assert!(a.rows == a.cols, "trace: non-square {}×{}", a.rows, a.cols);
        let value = DMatrix::from_element(1, 1, self.nodes.borrow()[a.id].value.trace());
        self.push(Op::Trace(a.id), value, vec![], self.rg(a))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = DMatrix::from_element(1, 1, self.nodes.borrow()[a.id].value.sum());
        self.push(Op::SumAll(a.id), value, vec![], self.rg(a))
    }

    /// a + v·1ᵀ: adds column vector v to every column of a.
    pub fn add_colvec(&self, a: Var, v: Var) -> Var {
        assert!(
            v.cols == 1 && v.rows == a.rows,
            "add_colvec: {}×{} plus column {}×{}",
            a.rows,
            a.cols,
            v.rows,
            v.cols
        );
        let value = {
            let n = self.nodes.borrow();
            let mut m = n[a.id].value.clone();
            for c in 0..m.ncols() {
                for r in 0..m.nrows() {
                    m[(r, c)] += n[v.id].value[(r, 0)];
                }
            }
            m
        };
        self.push(Op::AddColVec(a.id, v.id), value, vec![], self.rg(a) || self.rg(v))
    }

    /// a ∘ (v·1ᵀ): scales row i of a by v[i].
    pub fn scale_rows(&self, a: Var, v: Var) -> Var {
        assert!(
            v.cols == 1 && v.rows == a.rows,
            "scale_rows: {}×{} by column {}×{}",
            a.rows,
            a.cols,
            v.rows,
            v.cols
        );
        let value = {
            let n = self.nodes.borrow();
            let mut m = n[a.id].value.clone();
            for c in 0..m.ncols() {
                for r in 0..m.nrows() {
                    m[(r, c)] *= n[v.id].value[(r, 0)];
                }
            }
            m
        };
        self.push(Op::ScaleRows(a.id, v.id), value, vec![], self.rg(a) || self.rg(v))
    }

    /// v·1ᵀ: tiles a column vector into `k` columns.
    pub fn repeat_col(&self, v: Var, k: usize) -> Var {
        assert!(v.cols == 1, "repeat_col: input must be a column vector");
        let value = {
            let n = self.nodes.borrow();
            DMatrix::from_fn(v.rows, k, |r, _| n[v.id].value[(r, 0)])
        };
        self.push(Op::RepeatCol(v.id), value, vec![], self.rg(v))
    }

    /// Diagonal matrix from a column vector.
    pub fn diag_from_vec(&self, v: Var) -> Var {
        assert!(v.cols == 1, "diag_from_vec: input must be a column vector");
        let value = {
            let n = self.nodes.borrow();
            DMatrix::from_fn(v.rows, v.rows, |r, c| if r == c { n[v.id].value[(r, 0)] } else { 0.0 })
        };
        self.push(Op::DiagFromVec(v.id), value, vec![], self.rg(v))
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "concat_cols: row counts differ");
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let value = {
            let n = self.nodes.borrow();
            let mut m = DMatrix::zeros(rows, cols);
            let mut at = 0;
            for p in parts {
                m.view_mut((0, at), (rows, p.cols)).copy_from(&n[p.id].value);
                at += p.cols;
            }
            m
        };
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), value, vec![], rg)
    }

    /// Contiguous column slice [start, start+len).
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= a.cols, "slice_cols: range out of bounds");
        let value = self.nodes.borrow()[a.id].value.columns(start, len).into_owned();
        self.push(Op::SliceCols(a.id, start), value, vec![], self.rg(a))
    }

    /// log det of the symmetrized input via Cholesky; the gradient is the
    /// inverse of the symmetrized matrix.
    pub fn chol_logdet(&self, a: Var) -> Result<Var> {
        assert!(a.rows == a.cols, "chol_logdet: non-square {}×{}", a.rows, a.cols);
        let (value, inv) = {
            let n = self.nodes.borrow();
            let s = sym(&n[a.id].value);
            let chol = crate::gaussian::cholesky(&s, "chol_logdet input")?;
            let ld = crate::gaussian::ln_det(&chol);
            (DMatrix::from_element(1, 1, ld), sym(&chol.inverse()))
        };
        Ok(self.push(Op::CholLogDet(a.id), value, vec![inv], self.rg(a)))
    }

    /// L⁻¹B where only the lower triangle of L (including the diagonal) is
    /// read; gradients to the strict upper triangle are zero.
    pub fn tri_solve_lower(&self, l: Var, b: Var) -> Result<Var> {
        assert!(l.rows == l.cols && l.rows == b.rows, "tri_solve_lower: shape mismatch");
        let value = {
            let n = self.nodes.borrow();
            let lower = n[l.id].value.lower_triangle();
            if lower.diagonal().iter().any(|d| *d == 0.0) {
                return Err(Error::NotPositiveDefinite(
                    "triangular solve with zero diagonal".into(),
                ));
            }
            let mut rhs = n[b.id].value.clone();
            if !lower.solve_lower_triangular_mut(&mut rhs) {
                return Err(Error::NotPositiveDefinite("triangular solve failed".into()));
            }
            rhs
        };
        Ok(self.push(Op::TriSolveLower(l.id, b.id), value, vec![], self.rg(l) || self.rg(b)))
    }

    /// xᵀAx for a column vector x.
    pub fn quad_form(&self, x: Var, a: Var) -> Var {
        assert!(
            x.cols == 1 && a.rows == a.cols && a.rows == x.rows,
            "quad_form: x {}×{}, A {}×{}",
            x.rows,
            x.cols,
            a.rows,
            a.cols
        );
        let value = {
            let n = self.nodes.borrow();
            let ax = &n[a.id].value * &n[x.id].value;
            DMatrix::from_element(1, 1, n[x.id].value.dot(&ax))
        };
        self.push(Op::QuadForm(x.id, a.id), value, vec![], self.rg(x) || self.rg(a))
    }

    /// sym(S)⁻¹B via Cholesky.
    pub fn spd_solve(&self, s: Var, b: Var) -> Result<Var> {
        assert!(s.rows == s.cols && s.rows == b.rows, "spd_solve: shape mismatch");
        let (value, inv) = {
            let n = self.nodes.borrow();
            let sm = sym(&n[s.id].value);
            let chol = crate::gaussian::cholesky(&sm, "spd_solve input")?;
            (chol.solve(&n[b.id].value), sym(&chol.inverse()))
        };
        Ok(self.push(Op::SpdSolve(s.id, b.id), value, vec![inv], self.rg(s) || self.rg(b)))
    }

    /// Columnwise Gaussian log-normalizer: output k is
    /// Φ(H₍ₖ₎, sym(J)) = ½ H₍ₖ₎ᵀ sym(J)⁻¹ H₍ₖ₎ − ½ log det sym(J) + (D/2) log 2π,
    /// with a single factorization of J shared by all K columns.
    pub fn phi_multi(&self, h: Var, j: Var) -> Result<Var> {
        assert!(j.rows == j.cols && j.rows == h.rows, "phi_multi: H {}×{}, J {}×{}", h.rows, h.cols, j.rows, j.cols);
        let (value, y, inv) = {
            let n = self.nodes.borrow();
            let s = sym(&n[j.id].value);
            let chol = crate::gaussian::cholesky(&s, "phi_multi precision")?;
            let ld = crate::gaussian::ln_det(&chol);
            let y = chol.solve(&n[h.id].value);
            let base = 0.5 * h.rows as f64 * LN_2PI - 0.5 * ld;
            let value = DMatrix::from_fn(h.cols, 1, |k, _| {
                0.5 * n[h.id].value.column(k).dot(&y.column(k)) + base
            });
            (value, y, sym(&chol.inverse()))
        };
        Ok(self.push(Op::PhiMulti(h.id, j.id), value, vec![y, inv], self.rg(h) || self.rg(j)))
    }

    /// Columnwise Gaussian log-normalizer with per-column diagonal precision:
    /// output k is ½ Σᵢ H²ᵢₖ/Pᵢₖ − ½ Σᵢ log Pᵢₖ + (D/2) log 2π.
    pub fn phi_diag(&self, h: Var, p: Var) -> Result<Var> {
        self.binary_elementwise(h, p, "phi_diag");
        let value = {
            let n = self.nodes.borrow();
            if n[p.id].value.iter().any(|v| *v <= 0.0) {
                return Err(Error::NotPositiveDefinite("phi_diag precision entries must be positive".into()));
            }
            DMatrix::from_fn(h.cols, 1, |k, _| {
                let mut acc = 0.5 * h.rows as f64 * LN_2PI;
                for i in 0..h.rows {
                    let hv = n[h.id].value[(i, k)];
                    let pv = n[p.id].value[(i, k)];
                    acc += 0.5 * hv * hv / pv - 0.5 * pv.ln();
                }
                acc
            })
        };
        Ok(self.push(Op::PhiDiag(h.id, p.id), value, vec![], self.rg(h) || self.rg(p)))
    }

    /// Log-sum-exp over all entries of a vector-shaped variable.
    pub fn logsumexp(&self, a: Var) -> Var {
        assert!(a.rows == 1 || a.cols == 1, "logsumexp: input must be a vector");
        let value = {
            let n = self.nodes.borrow();
            let m = n[a.id].value.max();
            let s: f64 = n[a.id].value.iter().map(|x| (x - m).exp()).sum();
            DMatrix::from_element(1, 1, m + s.ln())
        };
        self.push(Op::LogSumExp(a.id), value, vec![], self.rg(a))
    }

    /// Reverse sweep: ∂output/∂input for each requested input, in order.
    /// Inputs that do not influence the output get zero arrays.
    pub fn gradient(&self, output: Var, inputs: &[Var]) -> Result<Vec<DMatrix<f64>>> {
        let nodes = self.nodes.borrow();
        let foreign = |v: &Var| v.tape != self.id || v.id >= nodes.len();
        if foreign(&output) || inputs.iter().any(foreign) {
            return Err(Error::InvalidArgument("variable is not on this tape".into()));
        }
        if !output.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "gradient target must be scalar-shaped, got {}×{}",
                output.rows, output.cols
            )));
        }

        let mut adj: Vec<Option<DMatrix<f64>>> = (0..=output.id).map(|_| None).collect();
        adj[output.id] = Some(DMatrix::from_element(1, 1, 1.0));

        fn acc(adj: &mut [Option<DMatrix<f64>>], nodes: &[Node], id: usize, delta: DMatrix<f64>) {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut adj[id] {
                Some(m) => *m += delta,
                slot @ None => *slot = Some(delta),
            }
        }

        for id in (0..=output.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = adj[id].clone() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    acc(&mut adj, &nodes, *a, g.clone());
                    acc(&mut adj, &nodes, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, &nodes, *a, g.clone());
                    acc(&mut adj, &nodes, *b, -g);
                }
                Op::Mul(a, b) => {
                    acc(&mut adj, &nodes, *a, g.component_mul(&nodes[*b].value));
                    acc(&mut adj, &nodes, *b, g.component_mul(&nodes[*a].value));
                }
                Op::Div(a, b) => {
                    let gb = g.component_div(&nodes[*b].value);
                    acc(&mut adj, &nodes, *a, gb.clone());
                    acc(
                        &mut adj,
                        &nodes,
                        *b,
                        -gb.component_mul(&node.value),
                    );
                }
                Op::Scale(a, c) => acc(&mut adj, &nodes, *a, g * *c),
                Op::MatMul(a, b) => {
                    acc(&mut adj, &nodes, *a, &g * nodes[*b].value.transpose());
                    acc(&mut adj, &nodes, *b, nodes[*a].value.transpose() * &g);
                }
                Op::Transpose(a) => acc(&mut adj, &nodes, *a, g.transpose()),
                Op::Tanh(a) => {
                    acc(&mut adj, &nodes, *a, g.component_mul(&node.value.map(|y| 1.0 - y * y)));
                }
                Op::Softplus(a) => {
                    acc(&mut adj, &nodes, *a, g.component_mul(&nodes[*a].value.map(logistic)));
                }
                Op::Trace(a) => {
                    let d = nodes[*a].value.nrows();
                    acc(&mut adj, &nodes, *a, DMatrix::identity(d, d) * g[(0, 0)]);
                }
                Op::SumAll(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(&mut adj, &nodes, *a, DMatrix::from_element(r, c, g[(0, 0)]));
                }
                Op::AddColVec(a, v) => {
                    acc(&mut adj, &nodes, *a, g.clone());
                    acc(&mut adj, &nodes, *v, DMatrix::from_column_slice(g.nrows(), 1, g.column_sum().as_slice()));
                }
                Op::ScaleRows(a, v) => {
                    let vv = &nodes[*v].value;
                    let mut ga = g.clone();
                    for c in 0..ga.ncols() {
                        for r in 0..ga.nrows() {
                            ga[(r, c)] *= vv[(r, 0)];
                        }
                    }
                    acc(&mut adj, &nodes, *a, ga);
                    let gv = g.component_mul(&nodes[*a].value).column_sum();
                    acc(&mut adj, &nodes, *v, DMatrix::from_column_slice(g.nrows(), 1, gv.as_slice()));
                }
                Op::RepeatCol(v) => {
                    let gv = g.column_sum();
                    acc(&mut adj, &nodes, *v, DMatrix::from_column_slice(g.nrows(), 1, gv.as_slice()));
                }
                Op::DiagFromVec(v) => {
                    let d = g.nrows();
                    acc(&mut adj, &nodes, *v, DMatrix::from_fn(d, 1, |r, _| g[(r, r)]));
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for pid in parts {
                        let w = nodes[*pid].value.ncols();
                        acc(&mut adj, &nodes, *pid, g.columns(at, w).into_owned());
                        at += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut ga = DMatrix::zeros(r, c);
                    ga.view_mut((0, *start), (r, g.ncols())).copy_from(&g);
                    acc(&mut adj, &nodes, *a, ga);
                }
                Op::CholLogDet(a) => {
                    acc(&mut adj, &nodes, *a, &node.saved[0] * g[(0, 0)]);
                }
                Op::TriSolveLower(l, b) => {
                    // X = L⁻¹B: B̄ = L⁻ᵀX̄, L̄ = −B̄ Xᵀ restricted to the
                    // lower triangle actually read in the forward pass.
                    let lower = nodes[*l].value.lower_triangle();
                    let mut w = g.clone();
                    let ok = lower.transpose().solve_upper_triangular_mut(&mut w);
                    debug_assert!(ok);
                    let mut gl = -(&w * node.value.transpose());
                    for r in 0..gl.nrows() {
                        for c in (r + 1)..gl.ncols() {
                            gl[(r, c)] = 0.0;
                        }
                    }
                    acc(&mut adj, &nodes, *l, gl);
                    acc(&mut adj, &nodes, *b, w);
                }
                Op::QuadForm(x, a) => {
                    let s = g[(0, 0)];
                    let xa = &nodes[*a].value * &nodes[*x].value;
                    let xat = nodes[*a].value.transpose() * &nodes[*x].value;
                    acc(&mut adj, &nodes, *x, (xa + xat) * s);
                    acc(&mut adj, &nodes, *a, (&nodes[*x].value * nodes[*x].value.transpose()) * s);
                }
                Op::SpdSolve(s, b) => {
                    // X = S⁻¹B with S symmetrized: B̄ = S⁻¹X̄,
                    // S̄ = −(B̄Xᵀ + XB̄ᵀ)/2 (symmetric because forward
                    // symmetrizes its input).
                    let w = &node.saved[0] * &g;
                    let gs = -(&w * node.value.transpose() + &node.value * w.transpose()) * 0.5;
                    acc(&mut adj, &nodes, *s, gs);
                    acc(&mut adj, &nodes, *b, w);
                }
                Op::PhiMulti(h, j) => {
                    // φₖ = ½ hₖᵀyₖ − ½ log det S + const with yₖ = S⁻¹hₖ:
                    // h̄ₖ = ḡₖ yₖ, J̄ = −½ Σₖ ḡₖ yₖyₖᵀ − ½ (Σₖ ḡₖ) S⁻¹.
                    let y = &node.saved[0];
                    let inv = &node.saved[1];
                    let mut gh = y.clone();
                    for k in 0..gh.ncols() {
                        let gk = g[(k, 0)];
                        for r in 0..gh.nrows() {
                            gh[(r, k)] *= gk;
                        }
                    }
                    let gsum: f64 = g.iter().sum();
                    let gj = -(&gh * y.transpose()) * 0.5 - inv * (0.5 * gsum);
                    acc(&mut adj, &nodes, *h, gh);
                    acc(&mut adj, &nodes, *j, gj);
                }
                Op::PhiDiag(h, p) => {
                    let hv = &nodes[*h].value;
                    let pv = &nodes[*p].value;
                    let mut gh = DMatrix::zeros(hv.nrows(), hv.ncols());
                    let mut gp = DMatrix::zeros(hv.nrows(), hv.ncols());
                    for k in 0..hv.ncols() {
                        let gk = g[(k, 0)];
                        for i in 0..hv.nrows() {
                            let (hik, pik) = (hv[(i, k)], pv[(i, k)]);
                            gh[(i, k)] = gk * hik / pik;
                            gp[(i, k)] = gk * (-0.5 * hik * hik / (pik * pik) - 0.5 / pik);
                        }
                    }
                    acc(&mut adj, &nodes, *h, gh);
                    acc(&mut adj, &nodes, *p, gp);
                }
                Op::LogSumExp(a) => {
                    let out = node.value[(0, 0)];
                    let soft = nodes[*a].value.map(|x| (x - out).exp());
                    acc(&mut adj, &nodes, *a, soft * g[(0, 0)]);
                }
            }
        }

        Ok(inputs
            .iter()
            .map(|v| {
                adj.get(v.id)
                    .and_then(|o| o.clone())
                    .unwrap_or_else(|| DMatrix::zeros(v.rows, v.cols))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_mat(r: usize, c: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn random_spd(d: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
        let w = random_mat(d, d, rng);
        &w * w.transpose() + DMatrix::identity(d, d) * (0.5 + d as f64 * 0.25)
    }

    /// Central finite differences of a scalar function of matrix parameters.
    fn fd_grad(
        f: &dyn Fn(&[DMatrix<f64>]) -> f64,
        params: &[DMatrix<f64>],
        step: f64,
    ) -> Vec<DMatrix<f64>> {
        params
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                DMatrix::from_fn(p.nrows(), p.ncols(), |r, c| {
                    let mut plus = params.to_vec();
                    plus[pi][(r, c)] += step;
                    let mut minus = params.to_vec();
                    minus[pi][(r, c)] -= step;
                    (f(&plus) - f(&minus)) / (2.0 * step)
                })
            })
            .collect()
    }

    /// Builds the function on a fresh tape, compares reverse-mode gradients
    /// against central finite differences with relative tolerance 1e-5.
    fn grad_check(params: &[DMatrix<f64>], build: &dyn Fn(&Tape, &[Var]) -> Var) {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
        let out = build(&tape, &vars);
        let analytic = tape.gradient(out, &vars).unwrap();

        let f = |ps: &[DMatrix<f64>]| {
            let t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.var(p.clone())).collect();
            t.scalar(build(&t, &vs))
        };
        let numeric = fd_grad(&f, params, 1e-5);

        for (pi, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let denom = n.norm().max(1.0);
            let err = (a - n).norm() / denom;
            assert!(err <= 1e-5, "param {pi}: relative gradient error {err:.3e}\nanalytic {a}\nnumeric {n}");
        }
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.var(DMatrix::from_element(1, 1, 3.0));
        let y = tape.mul(x, x);
        let g = tape.gradient(y, &[x]).unwrap();
        assert_eq!(g[0][(0, 0)], 6.0);
    }

    #[test]
    fn logdet_gradient_is_inverse() {
        let tape = Tape::new();
        let j = tape.var(DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 4.0])));
        let ld = tape.chol_logdet(j).unwrap();
        let g = tape.gradient(ld, &[j]).unwrap();
        assert!((g[0][(0, 0)] - 0.5).abs() < 1e-12);
        assert!((g[0][(1, 1)] - 0.25).abs() < 1e-12);
        assert!(g[0][(0, 1)].abs() < 1e-12);
        // Cross-checked against finite differences as well.
        grad_check(&[DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 4.0]))], &|t, vs| {
            t.chol_logdet(vs[0]).unwrap()
        });
    }

    #[test]
    fn logsumexp_symmetric_gradient() {
        let tape = Tape::new();
        let x = tape.var(DMatrix::zeros(2, 1));
        let l = tape.logsumexp(x);
        let g = tape.gradient(l, &[x]).unwrap();
        assert!((g[0][(0, 0)] - 0.5).abs() < 1e-15);
        assert!((g[0][(1, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(DMatrix::from_element(2, 2, 1.5));
        let c = tape.constant(DMatrix::from_element(1, 1, 7.0));
        let g = tape.gradient(c, &[x]).unwrap();
        assert_eq!(g[0], DMatrix::zeros(2, 2));
    }

    #[test]
    fn frobenius_half_gradient_is_the_matrix() {
        let mut r = rng(11);
        let w = random_mat(3, 4, &mut r);
        let tape = Tape::new();
        let wv = tape.var(w.clone());
        let wt = tape.transpose(wv);
        let prod = tape.matmul(wt, wv);
        let out = tape.scale(tape.trace(prod), 0.5);
        let g = tape.gradient(out, &[wv]).unwrap();
        assert!((&g[0] - &w).norm() < 1e-12);
    }

    #[test]
    fn chain_rule_through_tanh() {
        let tape = Tape::new();
        let x = tape.var(DMatrix::zeros(1, 1));
        let y = tape.tanh(tape.scale(x, 2.0));
        let g = tape.gradient(y, &[x]).unwrap();
        assert!((g[0][(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_is_deterministic() {
        let mut r = rng(5);
        let a = random_spd(4, &mut r);
        let b = random_mat(4, 3, &mut r);
        let run = || {
            let tape = Tape::new();
            let av = tape.var(a.clone());
            let bv = tape.var(b.clone());
            let x = tape.spd_solve(av, bv).unwrap();
            let out = tape.sum_all(tape.mul(x, x));
            tape.gradient(out, &[av, bv]).unwrap()
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(g1, g2);
    }

    #[test]
    fn rejects_non_scalar_output_and_foreign_vars() {
        let tape = Tape::new();
        let x = tape.var(DMatrix::zeros(2, 2));
        assert!(tape.gradient(x, &[x]).is_err());
        let other = Tape::new();
        let y = other.var(DMatrix::zeros(1, 1));
        assert!(tape.gradient(y, &[y]).is_err());
    }

    #[test]
    fn fd_matches_elementwise_and_linear_ops() {
        let mut r = rng(21);
        let a = random_mat(3, 3, &mut r);
        let b = random_mat(3, 3, &mut r);
        grad_check(&[a.clone(), b.clone()], &|t, vs| {
            let s = t.add(vs[0], vs[1]);
            let d = t.sub(vs[0], vs[1]);
            let m = t.mul(s, d);
            t.sum_all(m)
        });
        let c = random_mat(3, 3, &mut r).map(|x| x + 3.0);
        grad_check(&[a.clone(), c], &|t, vs| {
            let q = t.div(vs[0], vs[1]);
            t.sum_all(t.mul(q, q))
        });
        let x = random_mat(3, 4, &mut r);
        grad_check(&[a, x], &|t, vs| {
            let p = t.matmul(vs[0], vs[1]);
            let p = t.tanh(p);
            t.sum_all(p)
        });
    }

    #[test]
    fn fd_matches_softplus_scale_rows_repeat() {
        let mut r = rng(23);
        let a = random_mat(4, 5, &mut r);
        let v = random_mat(4, 1, &mut r).map(|x| x + 2.0);
        grad_check(&[a.clone(), v.clone()], &|t, vs| {
            let sr = t.scale_rows(vs[0], vs[1]);
            let sp = t.softplus(sr);
            t.sum_all(sp)
        });
        grad_check(&[a.clone(), v.clone()], &|t, vs| {
            let tiled = t.repeat_col(vs[1], 5);
            let s = t.add_colvec(vs[0], vs[1]);
            t.sum_all(t.mul(tiled, s))
        });
        grad_check(&[v], &|t, vs| {
            let d = t.diag_from_vec(vs[0]);
            t.trace(t.matmul(d, d))
        });
    }

    #[test]
    fn fd_matches_concat_and_slice() {
        let mut r = rng(25);
        let a = random_mat(3, 2, &mut r);
        let b = random_mat(3, 4, &mut r);
        grad_check(&[a, b], &|t, vs| {
            let cat = t.concat_cols(&[vs[0], vs[1], vs[0]]);
            let sl = t.slice_cols(cat, 1, 5);
            t.sum_all(t.mul(sl, sl))
        });
    }

    #[test]
    fn fd_matches_spd_primitives() {
        let mut r = rng(27);
        let j = random_spd(4, &mut r);
        let h = random_mat(4, 6, &mut r);
        grad_check(&[j.clone(), h.clone()], &|t, vs| {
            let phi = t.phi_multi(vs[1], vs[0]).unwrap();
            t.sum_all(phi)
        });
        grad_check(&[j.clone(), h.clone()], &|t, vs| {
            let x = t.spd_solve(vs[0], vs[1]).unwrap();
            t.sum_all(t.mul(x, x))
        });
        grad_check(&[j.clone()], &|t, vs| t.chol_logdet(vs[0]).unwrap());
        let x = random_mat(4, 1, &mut r);
        grad_check(&[x, j], &|t, vs| t.quad_form(vs[0], vs[1]));
        let p = random_mat(4, 6, &mut r).map(|v| v.abs() + 0.5);
        grad_check(&[h, p], &|t, vs| {
            let phi = t.phi_diag(vs[0], vs[1]).unwrap();
            t.sum_all(phi)
        });
    }

    #[test]
    fn fd_matches_triangular_solve() {
        let mut r = rng(29);
        let l = {
            let mut m = random_mat(4, 4, &mut r);
            for i in 0..4 {
                m[(i, i)] = 1.5 + m[(i, i)].abs();
            }
            m
        };
        let b = random_mat(4, 3, &mut r);
        grad_check(&[l, b], &|t, vs| {
            let x = t.tri_solve_lower(vs[0], vs[1]).unwrap();
            t.sum_all(t.mul(x, x))
        });
    }

    #[test]
    fn fd_matches_trace_transpose_logsumexp_quadform_mix() {
        let mut r = rng(31);
        let a = random_mat(5, 1, &mut r);
        let m = random_mat(5, 5, &mut r);
        grad_check(&[a, m], &|t, vs| {
            let lse = t.logsumexp(vs[0]);
            let tr = t.trace(t.matmul(vs[1], t.transpose(vs[1])));
            let q = t.quad_form(vs[0], vs[1]);
            t.add(t.add(lse, tr), q)
        });
    }

    #[test]
    fn unused_inputs_get_zeros_and_constants_absorb_nothing() {
        let tape = Tape::new();
        let used = tape.var(DMatrix::from_element(2, 2, 1.0));
        let unused = tape.var(DMatrix::from_element(3, 1, 1.0));
        let k = tape.constant(DMatrix::from_element(2, 2, 5.0));
        let out = tape.sum_all(tape.mul(used, k));
        let g = tape.gradient(out, &[used, unused]).unwrap();
        assert_eq!(g[0], DMatrix::from_element(2, 2, 5.0));
        assert_eq!(g[1], DMatrix::zeros(3, 1));
    }
}
