//! Backend-neutral conic programs over Hermitian PSD blocks and nonnegative
//! scalars, plus a primal-dual interior-point backend.
//!
//! Problems are compiled to the real standard form
//! `min ⟨C, X⟩  s.t.  ⟨A_i, X⟩ = b_i,  X ⪰ 0` over a product of symmetric PSD
//! blocks and one nonnegative orthant. Hermitian blocks of size `n` are lifted
//! to real `2n` blocks; a lifted `Y` maps back to `X = (Y₁₁ + Y₂₂) + i(Y₂₁ − Y₁₂)`,
//! which covers the whole Hermitian PSD cone.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::linalg::{hermitian_part, re_trace_product, CMat, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Hermitian(usize),
    Nonneg(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    /// `Re tr(coeff · X)`; `coeff` is taken by its Hermitian part.
    Matrix { block: BlockId, coeff: CMat },
    Scalar {
        block: BlockId,
        index: usize,
        coeff: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearForm {
    pub terms: Vec<Term>,
    pub constant: f64,
}

impl LinearForm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn matrix(mut self, block: BlockId, coeff: CMat) -> Self {
        self.terms.push(Term::Matrix { block, coeff });
        self
    }

    pub fn scalar(mut self, block: BlockId, index: usize, coeff: f64) -> Self {
        self.terms.push(Term::Scalar {
            block,
            index,
            coeff,
        });
        self
    }

    pub fn add_constant(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn plus(mut self, other: &LinearForm) -> Self {
        self.terms.extend(other.terms.iter().cloned());
        self.constant += other.constant;
        self
    }

    pub fn scaled(&self, s: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| match t {
                Term::Matrix { block, coeff } => Term::Matrix {
                    block: *block,
                    coeff: coeff.scale(s),
                },
                Term::Scalar {
                    block,
                    index,
                    coeff,
                } => Term::Scalar {
                    block: *block,
                    index: *index,
                    coeff: coeff * s,
                },
            })
            .collect();
        Self {
            terms,
            constant: self.constant * s,
        }
    }

    pub fn evaluate(&self, values: &[BlockValue]) -> f64 {
        self.constant
            + self
                .terms
                .iter()
                .map(|t| match t {
                    Term::Matrix { block, coeff } => match &values[block.0] {
                        BlockValue::Hermitian(x) => re_trace_product(&hermitian_part(coeff), x),
                        BlockValue::Nonneg(_) => f64::NAN,
                    },
                    Term::Scalar {
                        block,
                        index,
                        coeff,
                    } => match &values[block.0] {
                        BlockValue::Nonneg(v) => coeff * v[*index],
                        BlockValue::Hermitian(_) => f64::NAN,
                    },
                })
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Eq,
    Le,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub label: String,
    pub form: LinearForm,
    pub sense: Sense,
    pub rhs: f64,
}

/// Real symmetric affine matrix `constant + Σ_{(i,j)} form_ij · (E_ij + E_ji)/[i≠j ? 1 : 2]`
/// required to be PSD. Each listed entry adds its form to position `(i, j)`
/// and its mirror.
#[derive(Debug, Clone, PartialEq)]
pub struct Lmi {
    pub label: String,
    pub constant: DMatrix<f64>,
    pub entries: Vec<(usize, usize, LinearForm)>,
}

impl Lmi {
    pub fn new(label: impl Into<String>, constant: DMatrix<f64>) -> Self {
        Self {
            label: label.into(),
            constant,
            entries: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.constant.nrows()
    }

    pub fn entry(mut self, i: usize, j: usize, form: LinearForm) -> Self {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.entries.push((i, j, form));
        self
    }

    pub fn evaluate(&self, values: &[BlockValue]) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (i, j, f) in &self.entries {
            let v = f.evaluate(values);
            m[(*i, *j)] += v;
            if i != j {
                m[(*j, *i)] += v;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Minimize(LinearForm),
    Maximize(LinearForm),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockValue {
    Hermitian(CMat),
    Nonneg(DVector<f64>),
}

impl BlockValue {
    pub fn hermitian(&self) -> Option<&CMat> {
        match self {
            BlockValue::Hermitian(x) => Some(x),
            BlockValue::Nonneg(_) => None,
        }
    }

    pub fn nonneg(&self) -> Option<&DVector<f64>> {
        match self {
            BlockValue::Nonneg(x) => Some(x),
            BlockValue::Hermitian(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicProblem {
    pub blocks: Vec<BlockKind>,
    pub objective: Objective,
    pub constraints: Vec<LinearConstraint>,
    pub lmis: Vec<Lmi>,
}

impl Default for ConicProblem {
    fn default() -> Self {
        Self::new()
    }
}

/// Constraint violations of a candidate point, each `≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub linear: Vec<f64>,
    pub lmi: Vec<f64>,
    pub cone: Vec<f64>,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.linear
            .iter()
            .chain(&self.lmi)
            .chain(&self.cone)
            .copied()
            .fold(0.0, f64::max)
    }

    /// Label of the worst linear or LMI violation above `tol`.
    pub fn worst<'a>(&self, problem: &'a ConicProblem, tol: f64) -> Option<&'a str> {
        let lin = self
            .linear
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, problem.constraints[i].label.as_str()));
        let lmi = self
            .lmi
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, problem.lmis[i].label.as_str()));
        lin.chain(lmi)
            .filter(|(v, _)| *v > tol)
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, l)| l)
    }
}

impl ConicProblem {
    pub fn new() -> Self {
        Self {
            blocks: Vec::new(),
            objective: Objective::Minimize(LinearForm::new()),
            constraints: Vec::new(),
            lmis: Vec::new(),
        }
    }

    pub fn add_hermitian(&mut self, n: usize) -> BlockId {
        self.blocks.push(BlockKind::Hermitian(n));
        BlockId(self.blocks.len() - 1)
    }

    pub fn add_nonneg(&mut self, n: usize) -> BlockId {
        self.blocks.push(BlockKind::Nonneg(n));
        BlockId(self.blocks.len() - 1)
    }

    pub fn constrain(
        &mut self,
        label: impl Into<String>,
        form: LinearForm,
        sense: Sense,
        rhs: f64,
    ) {
        self.constraints.push(LinearConstraint {
            label: label.into(),
            form,
            sense,
            rhs,
        });
    }

    pub fn add_lmi(&mut self, lmi: Lmi) {
        self.lmis.push(lmi);
    }

    pub fn minimize(&mut self, form: LinearForm) {
        self.objective = Objective::Minimize(form);
    }

    pub fn maximize(&mut self, form: LinearForm) {
        self.objective = Objective::Maximize(form);
    }

    fn check_form(&self, form: &LinearForm, what: &str) -> Result<()> {
        if !form.constant.is_finite() {
            return Err(invalid(format!("{what}: non-finite constant")));
        }
        for t in &form.terms {
            match t {
                Term::Matrix { block, coeff } => match self.blocks.get(block.0) {
                    Some(BlockKind::Hermitian(n)) if coeff.nrows() == *n && coeff.ncols() == *n => {
                        if coeff.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                            return Err(invalid(format!("{what}: non-finite coefficient")));
                        }
                    }
                    _ => {
                        return Err(invalid(format!(
                            "{what}: matrix term does not fit block {}",
                            block.0
                        )))
                    }
                },
                Term::Scalar {
                    block,
                    index,
                    coeff,
                } => match self.blocks.get(block.0) {
                    Some(BlockKind::Nonneg(n)) if index < n => {
                        if !coeff.is_finite() {
                            return Err(invalid(format!("{what}: non-finite coefficient")));
                        }
                    }
                    _ => {
                        return Err(invalid(format!(
                            "{what}: scalar term does not fit block {}",
                            block.0
                        )))
                    }
                },
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let obj = match &self.objective {
            Objective::Minimize(f) | Objective::Maximize(f) => f,
        };
        self.check_form(obj, "objective")?;
        for c in &self.constraints {
            self.check_form(&c.form, &c.label)?;
            if !c.rhs.is_finite() {
                return Err(invalid(format!("{}: non-finite right-hand side", c.label)));
            }
        }
        for l in &self.lmis {
            let k = l.size();
            if l.constant.ncols() != k || k == 0 {
                return Err(invalid(format!(
                    "{}: constant must be square and nonempty",
                    l.label
                )));
            }
            if (&l.constant - l.constant.transpose()).amax() > 1e-12 * l.constant.amax().max(1.0)
                || l.constant.iter().any(|v| !v.is_finite())
            {
                return Err(invalid(format!(
                    "{}: constant must be finite and symmetric",
                    l.label
                )));
            }
            for (i, j, f) in &l.entries {
                if *i >= k || *j >= k {
                    return Err(invalid(format!("{}: entry out of range", l.label)));
                }
                self.check_form(f, &l.label)?;
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, values: &[BlockValue]) -> f64 {
        match &self.objective {
            Objective::Minimize(f) | Objective::Maximize(f) => f.evaluate(values),
        }
    }

    pub fn residuals(&self, values: &[BlockValue]) -> Residuals {
        let linear = self
            .constraints
            .iter()
            .map(|c| {
                let v = c.form.evaluate(values) - c.rhs;
                match c.sense {
                    Sense::Eq => v.abs(),
                    Sense::Le => v.max(0.0),
                    Sense::Ge => (-v).max(0.0),
                }
            })
            .collect();
        let lmi = self
            .lmis
            .iter()
            .map(|l| (-l.evaluate(values).symmetric_eigenvalues().min()).max(0.0))
            .collect();
        let cone = values
            .iter()
            .map(|v| match v {
                BlockValue::Hermitian(x) => (-crate::linalg::min_eigenvalue(x)).max(0.0),
                BlockValue::Nonneg(x) => x.iter().map(|&a| (-a).max(0.0)).fold(0.0, f64::max),
            })
            .collect();
        Residuals { linear, lmi, cone }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Converged to the square root of the tolerance only.
    AlmostOptimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIterations,
    NumericalFailure,
}

impl SolveStatus {
    pub fn is_solved(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::AlmostOptimal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub objective: f64,
    pub values: Vec<BlockValue>,
    /// Multipliers of the linear constraints in the minimization form.
    pub duals: Vec<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
}

pub trait ConicBackend {
    fn name(&self) -> &str;
    fn solve(&mut self, problem: &ConicProblem) -> Result<ConicSolution>;
}

/// Replays canned solutions and records every submitted problem.
#[derive(Debug, Default)]
pub struct MockBackend {
    pub replies: VecDeque<ConicSolution>,
    pub received: Vec<ConicProblem>,
}

impl ConicBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn solve(&mut self, problem: &ConicProblem) -> Result<ConicSolution> {
        self.received.push(problem.clone());
        self.replies
            .pop_front()
            .ok_or_else(|| invalid("mock backend has no reply queued"))
    }
}

/// `[[Re C, −Im C], [Im C, Re C]]` of the Hermitian part of `c`.
pub fn lift_hermitian(c: &CMat) -> DMatrix<f64> {
    let h = hermitian_part(c);
    let n = h.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let z = h[(i, j)];
            out[(i, j)] = z.re;
            out[(n + i, n + j)] = z.re;
            out[(i, n + j)] = -z.im;
            out[(n + i, j)] = z.im;
        }
    }
    out
}

/// Hermitian matrix represented by a lifted real block.
pub fn collapse_lifted(y: &DMatrix<f64>) -> CMat {
    let n = y.nrows() / 2;
    CMat::from_fn(n, n, |i, j| {
        C64::new(y[(i, j)] + y[(n + i, n + j)], y[(n + i, j)] - y[(i, n + j)])
    })
}

/// Real block with `⟨lift(C), embed(X)⟩ = Re tr(C X)` for Hermitian `X`.
pub fn embed_hermitian(x: &CMat) -> DMatrix<f64> {
    lift_hermitian(x) * 0.5
}

// ---------------------------------------------------------------------------
// standard form

#[derive(Debug, Clone)]
struct Row {
    sdp: Vec<Option<DMatrix<f64>>>,
    lp: Vec<(usize, f64)>,
}

impl Row {
    fn empty(blocks: usize) -> Self {
        Self {
            sdp: vec![None; blocks],
            lp: Vec::new(),
        }
    }

    fn add_sdp(&mut self, b: usize, m: &DMatrix<f64>) {
        match &mut self.sdp[b] {
            Some(acc) => *acc += m,
            slot => *slot = Some(m.clone()),
        }
    }

    fn add_lp(&mut self, i: usize, v: f64) {
        if let Some(e) = self.lp.iter_mut().find(|e| e.0 == i) {
            e.1 += v;
        } else {
            self.lp.push((i, v));
        }
    }

    fn norm_sq(&self) -> f64 {
        self.sdp
            .iter()
            .flatten()
            .map(|m| m.norm_squared())
            .sum::<f64>()
            + self.lp.iter().map(|e| e.1 * e.1).sum::<f64>()
    }

    fn scale(&mut self, s: f64) {
        for m in self.sdp.iter_mut().flatten() {
            *m *= s;
        }
        for e in &mut self.lp {
            e.1 *= s;
        }
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Sdp(usize),
    Lp(usize),
}

#[derive(Debug, Clone)]
struct StandardForm {
    dims: Vec<usize>,
    lp_dim: usize,
    rows: Vec<Row>,
    b: DVector<f64>,
    c: Row,
    slots: Vec<Slot>,
    constraint_rows: Vec<usize>,
}

fn compile(problem: &ConicProblem) -> StandardForm {
    let mut dims = Vec::new();
    let mut lp_dim = 0;
    let mut slots = Vec::new();
    for b in &problem.blocks {
        match b {
            BlockKind::Hermitian(n) => {
                slots.push(Slot::Sdp(dims.len()));
                dims.push(2 * n);
            }
            BlockKind::Nonneg(n) => {
                slots.push(Slot::Lp(lp_dim));
                lp_dim += n;
            }
        }
    }
    let mut lmi_blocks = Vec::new();
    for l in &problem.lmis {
        lmi_blocks.push(dims.len());
        dims.push(l.size());
    }
    let slack_count = problem
        .constraints
        .iter()
        .filter(|c| c.sense != Sense::Eq)
        .count();
    let slack_base = lp_dim;
    lp_dim += slack_count;
    let nb = dims.len();

    let add_form = |row: &mut Row, form: &LinearForm, s: f64| {
        for t in &form.terms {
            match (
                t,
                &slots[match t {
                    Term::Matrix { block, .. } | Term::Scalar { block, .. } => block.0,
                }],
            ) {
                (Term::Matrix { coeff, .. }, Slot::Sdp(b)) => {
                    row.add_sdp(*b, &(lift_hermitian(coeff) * s))
                }
                (Term::Scalar { index, coeff, .. }, Slot::Lp(off)) => {
                    row.add_lp(off + index, coeff * s)
                }
                _ => unreachable!("validated"),
            }
        }
    };

    let (obj, flip) = match &problem.objective {
        Objective::Minimize(f) => (f, false),
        Objective::Maximize(f) => (f, true),
    };
    let mut c = Row::empty(nb);
    add_form(&mut c, obj, if flip { -1.0 } else { 1.0 });

    let mut rows = Vec::new();
    let mut b = Vec::new();
    let mut constraint_rows = Vec::new();
    let mut next_slack = slack_base;
    for con in &problem.constraints {
        let mut row = Row::empty(nb);
        add_form(&mut row, &con.form, 1.0);
        match con.sense {
            Sense::Eq => {}
            Sense::Le => {
                row.add_lp(next_slack, 1.0);
                next_slack += 1;
            }
            Sense::Ge => {
                row.add_lp(next_slack, -1.0);
                next_slack += 1;
            }
        }
        constraint_rows.push(rows.len());
        rows.push(row);
        b.push(con.rhs - con.form.constant);
    }
    for (l, &blk) in problem.lmis.iter().zip(&lmi_blocks) {
        let k = l.size();
        for i in 0..k {
            for j in i..k {
                let mut row = Row::empty(nb);
                let mut e = DMatrix::zeros(k, k);
                if i == j {
                    e[(i, i)] = 1.0;
                } else {
                    e[(i, j)] = 0.5;
                    e[(j, i)] = 0.5;
                }
                row.add_sdp(blk, &e);
                let mut rhs = l.constant[(i, j)];
                for (a, bb, f) in &l.entries {
                    if *a == i && *bb == j {
                        add_form(&mut row, f, -1.0);
                        rhs += f.constant;
                    }
                }
                rows.push(row);
                b.push(rhs);
            }
        }
    }
    StandardForm {
        dims,
        lp_dim,
        rows,
        b: DVector::from_vec(b),
        c,
        slots,
        constraint_rows,
    }
}

// ---------------------------------------------------------------------------
// interior point

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteriorPoint {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub step_fraction: f64,
}

impl Default for InteriorPoint {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 150,
            step_fraction: 0.98,
        }
    }
}

#[derive(Debug, Clone)]
struct Point {
    x: Vec<DMatrix<f64>>,
    xl: DVector<f64>,
    z: Vec<DMatrix<f64>>,
    zl: DVector<f64>,
    y: DVector<f64>,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

impl StandardForm {
    fn a_op(&self, x: &[DMatrix<f64>], xl: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| {
                r.sdp
                    .iter()
                    .zip(x)
                    .filter_map(|(a, xb)| a.as_ref().map(|a| inner(a, xb)))
                    .sum::<f64>()
                    + r.lp.iter().map(|&(i, v)| v * xl[i]).sum::<f64>()
            }),
        )
    }

    fn at_op(&self, y: &DVector<f64>) -> (Vec<DMatrix<f64>>, DVector<f64>) {
        let mut s: Vec<DMatrix<f64>> = self.dims.iter().map(|&n| DMatrix::zeros(n, n)).collect();
        let mut sl = DVector::zeros(self.lp_dim);
        for (r, &yi) in self.rows.iter().zip(y.iter()) {
            for (acc, a) in s.iter_mut().zip(&r.sdp) {
                if let Some(a) = a {
                    *acc += a * yi;
                }
            }
            for &(i, v) in &r.lp {
                sl[i] += v * yi;
            }
        }
        (s, sl)
    }

    fn c_blocks(&self) -> (Vec<DMatrix<f64>>, DVector<f64>) {
        let s = self
            .dims
            .iter()
            .zip(&self.c.sdp)
            .map(|(&n, a)| a.clone().unwrap_or_else(|| DMatrix::zeros(n, n)))
            .collect();
        let mut sl = DVector::zeros(self.lp_dim);
        for &(i, v) in &self.c.lp {
            sl[i] += v;
        }
        (s, sl)
    }
}

fn max_step_sdp(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    let Some(ch) = Cholesky::new(sym(x)) else {
        return 0.0;
    };
    let l = ch.l();
    let Some(linv) = l.clone().try_inverse() else {
        return 0.0;
    };
    let w = sym(&(&linv * dx * linv.transpose()));
    let lmin = w.symmetric_eigenvalues().min();
    if lmin < 0.0 {
        -1.0 / lmin
    } else {
        f64::INFINITY
    }
}

fn max_step_lp(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter()
        .zip(dx.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&v, &d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(sym(m)).map(|c| c.inverse())
}

struct Direction {
    dx: Vec<DMatrix<f64>>,
    dxl: DVector<f64>,
    dz: Vec<DMatrix<f64>>,
    dzl: DVector<f64>,
    dy: DVector<f64>,
}

impl InteriorPoint {
    fn run(&self, sf: &StandardForm) -> (SolveStatus, Point, usize, f64, f64, f64) {
        let m = sf.rows.len();
        let (c_sdp, c_lp) = sf.c_blocks();
        let nu: f64 = sf.dims.iter().sum::<usize>() as f64 + sf.lp_dim as f64;
        let b_norm = sf.b.norm();
        let c_norm =
            (c_sdp.iter().map(|m| m.norm_squared()).sum::<f64>() + c_lp.norm_squared()).sqrt();

        let a_max = sf
            .rows
            .iter()
            .map(|r| r.norm_sq().sqrt())
            .fold(0.0, f64::max);
        let mut pt = {
            let start = |n: usize, is_primal: bool| -> f64 {
                let nf = (n.max(1)) as f64;
                if is_primal {
                    let ratio = sf
                        .rows
                        .iter()
                        .zip(sf.b.iter())
                        .map(|(r, bi)| (1.0 + bi.abs()) / (1.0 + r.norm_sq().sqrt()))
                        .fold(0.0, f64::max);
                    10f64.max(nf.sqrt()).max(nf * ratio)
                } else {
                    10f64.max(nf.sqrt()).max(a_max.max(c_norm))
                }
            };
            Point {
                x: sf
                    .dims
                    .iter()
                    .map(|&n| DMatrix::identity(n, n) * start(n, true))
                    .collect(),
                xl: DVector::from_element(sf.lp_dim, start(1, true)),
                z: sf
                    .dims
                    .iter()
                    .map(|&n| DMatrix::identity(n, n) * start(n, false))
                    .collect(),
                zl: DVector::from_element(sf.lp_dim, start(1, false)),
                y: DVector::zeros(m),
            }
        };

        let mut last = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut best: Option<(Point, usize, (f64, f64, f64))> = None;
        let loose = self.tolerance.sqrt();
        // Failures near the optimum fall back to the best iterate seen.
        let settle = |status: SolveStatus,
                      pt: Point,
                      iter: usize,
                      last: (f64, f64, f64),
                      best: Option<(Point, usize, (f64, f64, f64))>| {
            match best {
                Some((bp, bi, (p, d, g))) if p <= loose && d <= loose && g <= loose => {
                    (SolveStatus::AlmostOptimal, bp, bi, p, d, g)
                }
                _ => (status, pt, iter, last.0, last.1, last.2),
            }
        };
        let mut stalls = 0;
        for iter in 0..self.max_iterations {
            let ax = sf.a_op(&pt.x, &pt.xl);
            let rp = &sf.b - &ax;
            let (aty, atyl) = sf.at_op(&pt.y);
            let rd: Vec<DMatrix<f64>> = c_sdp
                .iter()
                .zip(&aty)
                .zip(&pt.z)
                .map(|((c, a), z)| c - a - z)
                .collect();
            let rdl = &c_lp - &atyl - &pt.zl;
            let xz: f64 =
                pt.x.iter()
                    .zip(&pt.z)
                    .map(|(x, z)| inner(x, z))
                    .sum::<f64>()
                    + pt.xl.dot(&pt.zl);
            let mu = xz / nu.max(1.0);
            let pobj: f64 = c_sdp
                .iter()
                .zip(&pt.x)
                .map(|(c, x)| inner(c, x))
                .sum::<f64>()
                + c_lp.dot(&pt.xl);
            let dobj = sf.b.dot(&pt.y);
            let rd_norm =
                (rd.iter().map(|m| m.norm_squared()).sum::<f64>() + rdl.norm_squared()).sqrt();
            let p_res = rp.norm() / (1.0 + b_norm);
            let d_res = rd_norm / (1.0 + c_norm);
            let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
            last = (p_res, d_res, gap);
            let score = p_res.max(d_res).max(gap);
            if best
                .as_ref()
                .is_none_or(|(_, _, (p, d, g))| score < p.max(*d).max(*g))
            {
                best = Some((pt.clone(), iter, last));
            }
            if p_res <= self.tolerance && d_res <= self.tolerance && gap <= self.tolerance {
                return (SolveStatus::Optimal, pt, iter, p_res, d_res, gap);
            }
            // infeasibility certificates
            let cert_d = {
                let (s, sl) = (
                    c_sdp
                        .iter()
                        .zip(&rd)
                        .map(|(c, r)| c - r)
                        .collect::<Vec<_>>(),
                    &c_lp - &rdl,
                );
                (s.iter().map(|m| m.norm_squared()).sum::<f64>() + sl.norm_squared()).sqrt()
            };
            if dobj > 0.0 && cert_d / dobj < 1e-8 && p_res > self.tolerance {
                return (SolveStatus::PrimalInfeasible, pt, iter, p_res, d_res, gap);
            }
            if pobj < 0.0 && ax.norm() / -pobj < 1e-8 && d_res > self.tolerance {
                return (SolveStatus::DualInfeasible, pt, iter, p_res, d_res, gap);
            }

            let zinv: Vec<DMatrix<f64>> =
                match pt.z.iter().map(spd_inverse).collect::<Option<Vec<_>>>() {
                    Some(v) => v,
                    None => return settle(SolveStatus::NumericalFailure, pt, iter, last, best),
                };
            let zinv_l = pt.zl.map(|v| 1.0 / v);
            // Schur complement
            let mut schur = DMatrix::zeros(m, m);
            let mut g: Vec<Vec<Option<DMatrix<f64>>>> = Vec::with_capacity(m);
            for r in &sf.rows {
                g.push(
                    r.sdp
                        .iter()
                        .enumerate()
                        .map(|(bi, a)| a.as_ref().map(|a| &pt.x[bi] * a * &zinv[bi]))
                        .collect(),
                );
            }
            let dl = pt.xl.component_mul(&zinv_l);
            for i in 0..m {
                for j in i..m {
                    let mut v = 0.0;
                    for (ai, gjb) in sf.rows[i].sdp.iter().zip(&g[j]) {
                        if let (Some(a), Some(gj)) = (ai, gjb) {
                            v += a
                                .iter()
                                .zip(gj.transpose().iter())
                                .map(|(p, q)| p * q)
                                .sum::<f64>();
                        }
                    }
                    for &(k, a) in &sf.rows[i].lp {
                        for &(k2, a2) in &sf.rows[j].lp {
                            if k == k2 {
                                v += a * a2 * dl[k];
                            }
                        }
                    }
                    schur[(i, j)] = v;
                    schur[(j, i)] = v;
                }
            }
            let factor = {
                let mut shift = 0.0;
                let diag_max = schur.diagonal().amax().max(1e-300);
                loop {
                    let mut mm = schur.clone();
                    for i in 0..m {
                        mm[(i, i)] += shift;
                    }
                    if let Some(c) = Cholesky::new(mm) {
                        break Some(c);
                    }
                    shift = if shift == 0.0 {
                        1e-14 * diag_max
                    } else {
                        shift * 100.0
                    };
                    if shift > 1e-4 * diag_max {
                        break None;
                    }
                }
            };
            let Some(factor) = factor else {
                return settle(SolveStatus::NumericalFailure, pt, iter, last, best);
            };

            let direction = |sigma_mu: f64, corr: Option<&Direction>| -> Direction {
                // h = b − σμ 𝒜(Z⁻¹) + 𝒜(X R_d Z⁻¹) + 𝒜(ΔXa ΔZa Z⁻¹)
                let mut t: Vec<DMatrix<f64>> = (0..sf.dims.len())
                    .map(|bi| sym(&(&pt.x[bi] * &rd[bi] * &zinv[bi])) - &zinv[bi] * sigma_mu)
                    .collect();
                let mut tl = pt.xl.component_mul(&rdl).component_mul(&zinv_l) - &zinv_l * sigma_mu;
                if let Some(c) = corr {
                    for bi in 0..sf.dims.len() {
                        t[bi] += sym(&(&c.dx[bi] * &c.dz[bi] * &zinv[bi]));
                    }
                    tl += c.dxl.component_mul(&c.dzl).component_mul(&zinv_l);
                }
                let h = &sf.b + sf.a_op(&t, &tl);
                let dy = factor.solve(&h);
                let (atdy, atdyl) = sf.at_op(&dy);
                let dz: Vec<DMatrix<f64>> = rd.iter().zip(&atdy).map(|(r, a)| r - a).collect();
                let dzl = &rdl - &atdyl;
                let mut dx: Vec<DMatrix<f64>> = (0..sf.dims.len())
                    .map(|bi| {
                        &zinv[bi] * sigma_mu - &pt.x[bi] - sym(&(&pt.x[bi] * &dz[bi] * &zinv[bi]))
                    })
                    .collect();
                let mut dxl =
                    &zinv_l * sigma_mu - &pt.xl - pt.xl.component_mul(&dzl).component_mul(&zinv_l);
                if let Some(c) = corr {
                    for bi in 0..sf.dims.len() {
                        dx[bi] -= sym(&(&c.dx[bi] * &c.dz[bi] * &zinv[bi]));
                    }
                    dxl -= c.dxl.component_mul(&c.dzl).component_mul(&zinv_l);
                }
                Direction {
                    dx,
                    dxl,
                    dz,
                    dzl,
                    dy,
                }
            };
            let steps = |d: &Direction| -> (f64, f64) {
                let ap =
                    pt.x.iter()
                        .zip(&d.dx)
                        .map(|(x, dx)| max_step_sdp(x, dx))
                        .fold(max_step_lp(&pt.xl, &d.dxl), f64::min);
                let ad =
                    pt.z.iter()
                        .zip(&d.dz)
                        .map(|(z, dz)| max_step_sdp(z, dz))
                        .fold(max_step_lp(&pt.zl, &d.dzl), f64::min);
                (ap, ad)
            };

            let pred = direction(0.0, None);
            let (ap, ad) = steps(&pred);
            let (ap1, ad1) = (ap.min(1.0), ad.min(1.0));
            let xz_pred: f64 =
                pt.x.iter()
                    .zip(&pred.dx)
                    .zip(pt.z.iter().zip(&pred.dz))
                    .map(|((x, dx), (z, dz))| inner(&(x + dx * ap1), &(z + dz * ad1)))
                    .sum::<f64>()
                    + (&pt.xl + &pred.dxl * ap1).dot(&(&pt.zl + &pred.dzl * ad1));
            let sigma = (xz_pred / xz).max(0.0).powi(3).min(1.0);
            let corr = direction(sigma * mu, Some(&pred));
            let (ap, ad) = steps(&corr);
            let gamma = self.step_fraction;
            let ap = (gamma * ap).min(1.0);
            let ad = (gamma * ad).min(1.0);
            if ap < 1e-12 && ad < 1e-12 {
                stalls += 1;
            } else {
                stalls = 0;
            }
            if stalls > 3 || !ap.is_finite() || !ad.is_finite() {
                break;
            }
            for bi in 0..sf.dims.len() {
                pt.x[bi] = sym(&(&pt.x[bi] + &corr.dx[bi] * ap));
                pt.z[bi] = sym(&(&pt.z[bi] + &corr.dz[bi] * ad));
            }
            pt.xl += &corr.dxl * ap;
            pt.zl += &corr.dzl * ad;
            pt.y += &corr.dy * ad;
        }
        settle(
            SolveStatus::MaxIterations,
            pt,
            self.max_iterations,
            last,
            best,
        )
    }
}

impl ConicBackend for InteriorPoint {
    fn name(&self) -> &str {
        "interior-point"
    }

    fn solve(&mut self, problem: &ConicProblem) -> Result<ConicSolution> {
        problem.validate()?;
        let mut sf = compile(problem);
        // row equilibration and data scaling
        let mut row_scale = vec![1.0; sf.rows.len()];
        for (i, r) in sf.rows.iter_mut().enumerate() {
            let n = r.norm_sq().sqrt();
            if n > 0.0 {
                row_scale[i] = 1.0 / n;
                r.scale(1.0 / n);
                sf.b[i] /= n;
            }
        }
        let b_scale = sf.b.amax().max(1.0);
        sf.b /= b_scale;
        let c_norm = (sf.c.norm_sq()).sqrt();
        let c_scale = c_norm.max(1.0);
        sf.c.scale(1.0 / c_scale);

        let (status, pt, iterations, p_res, d_res, gap) = self.run(&sf);

        let values = problem
            .blocks
            .iter()
            .zip(&sf.slots)
            .map(|(kind, slot)| match (kind, slot) {
                (BlockKind::Hermitian(_), Slot::Sdp(b)) => {
                    BlockValue::Hermitian(collapse_lifted(&(&pt.x[*b] * b_scale)))
                }
                (BlockKind::Nonneg(n), Slot::Lp(off)) => BlockValue::Nonneg(
                    DVector::from_iterator(*n, (0..*n).map(|i| pt.xl[off + i] * b_scale)),
                ),
                _ => unreachable!(),
            })
            .collect::<Vec<_>>();
        let duals = sf
            .constraint_rows
            .iter()
            .map(|&r| pt.y[r] * c_scale * row_scale[r])
            .collect();
        let objective = problem.objective_value(&values);
        Ok(ConicSolution {
            status,
            objective,
            values,
            duals,
            iterations,
            primal_residual: p_res,
            dual_residual: d_res,
            gap,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_psd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn solve(p: &ConicProblem) -> ConicSolution {
        InteriorPoint::default().solve(p).unwrap()
    }

    #[test]
    fn lift_roundtrip_is_exact_on_integers() {
        let c = CMat::from_fn(3, 3, |i, j| C64::new((i + j) as f64, i as f64 - j as f64));
        let x = CMat::from_fn(3, 3, |i, j| {
            C64::new((1 + i * j) as f64, 2.0 * (j as f64 - i as f64))
        });
        let direct = re_trace_product(&c, &x);
        let lifted = lift_hermitian(&c).dot(&embed_hermitian(&x));
        assert_eq!(direct, lifted);
        assert_eq!(collapse_lifted(&embed_hermitian(&x)), x);
    }

    #[test]
    fn minimum_eigenvalue_by_trace_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_psd(&mut rng, 5, 5) - CMat::identity(5, 5).scale(2.0);
        let mut p = ConicProblem::new();
        let x = p.add_hermitian(5);
        p.constrain(
            "unit trace",
            LinearForm::new().matrix(x, CMat::identity(5, 5)),
            Sense::Eq,
            1.0,
        );
        p.minimize(LinearForm::new().matrix(x, c.clone()));
        let s = solve(&p);
        assert_eq!(s.status, SolveStatus::Optimal);
        let lmin = crate::linalg::min_eigenvalue(&c);
        assert!(
            (s.objective - lmin).abs() < 1e-7 * lmin.abs().max(1.0),
            "{} vs {}",
            s.objective,
            lmin
        );
        assert!(p.residuals(&s.values).max() < 1e-7);
    }

    #[test]
    fn lmi_minimum_eigenvalue() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let mut p = ConicProblem::new();
        let t = p.add_nonneg(1);
        let mut lmi = Lmi::new("shifted", a.clone());
        for i in 0..3 {
            lmi = lmi.entry(i, i, LinearForm::new().scalar(t, 0, -1.0));
        }
        p.add_lmi(lmi);
        p.maximize(LinearForm::new().scalar(t, 0, 1.0));
        let s = solve(&p);
        assert_eq!(s.status, SolveStatus::Optimal);
        let lmin = a.symmetric_eigenvalues().min();
        assert!(
            (s.objective - lmin).abs() < 1e-7,
            "{} vs {lmin}",
            s.objective
        );
    }

    #[test]
    fn small_linear_program() {
        // max x + 2y s.t. x + y ≤ 4, x ≤ 3, y ≤ 2.5 → (1.5, 2.5), value 6.5
        let mut p = ConicProblem::new();
        let v = p.add_nonneg(2);
        p.constrain(
            "sum",
            LinearForm::new().scalar(v, 0, 1.0).scalar(v, 1, 1.0),
            Sense::Le,
            4.0,
        );
        p.constrain("x", LinearForm::new().scalar(v, 0, 1.0), Sense::Le, 3.0);
        p.constrain("y", LinearForm::new().scalar(v, 1, 1.0), Sense::Le, 2.5);
        p.maximize(LinearForm::new().scalar(v, 0, 1.0).scalar(v, 1, 2.0));
        let s = solve(&p);
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.objective - 6.5).abs() < 1e-7);
        let x = s.values[0].nonneg().unwrap();
        assert!((x[0] - 1.5).abs() < 1e-6 && (x[1] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut p = ConicProblem::new();
        let x = p.add_hermitian(2);
        p.constrain(
            "negative trace",
            LinearForm::new().matrix(x, CMat::identity(2, 2)),
            Sense::Eq,
            -1.0,
        );
        assert_eq!(solve(&p).status, SolveStatus::PrimalInfeasible);

        let mut q = ConicProblem::new();
        let v = q.add_nonneg(2);
        q.constrain(
            "diff",
            LinearForm::new().scalar(v, 0, 1.0).scalar(v, 1, -1.0),
            Sense::Eq,
            1.0,
        );
        q.maximize(LinearForm::new().scalar(v, 0, 1.0));
        assert_eq!(solve(&q).status, SolveStatus::DualInfeasible);
    }

    #[test]
    fn validation_and_mock() {
        let mut p = ConicProblem::new();
        let x = p.add_hermitian(2);
        p.minimize(LinearForm::new().matrix(x, CMat::identity(3, 3)));
        assert!(InteriorPoint::default().solve(&p).is_err());

        let mut mock = MockBackend::default();
        assert!(mock.solve(&p).is_err());
        let reply = ConicSolution {
            status: SolveStatus::Optimal,
            objective: 1.0,
            values: vec![],
            duals: vec![],
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            gap: 0.0,
        };
        mock.replies.push_back(reply.clone());
        assert_eq!(mock.solve(&p).unwrap(), reply);
        assert_eq!(mock.received.len(), 2);
    }
}
