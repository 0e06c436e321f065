//! Backend-agnostic conic programs and the solver interface.
//!
//! Programs are stated over real variables with affine expressions. Cones:
//! equalities, nonnegativity, rotated second-order blocks and real symmetric
//! PSD blocks (Hermitian blocks enter through their real embedding).

use std::fmt::Write as _;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::time::Instant;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("variable `{0}` appears in no constraint and not in the objective")]
    UnusedVariable(String),
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("solver finished with status {0:?}")]
    NotOptimal(SolveStatus),
    #[error("backend error: {0}")]
    Backend(String),
}

/// Affine expression `sum_i a_i x_i + c`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn zero() -> Self {
        LinExpr::default()
    }

    pub fn var(i: usize) -> Self {
        LinExpr { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn constant(c: f64) -> Self {
        LinExpr { terms: Vec::new(), constant: c }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>() + self.constant
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|&(_, a)| a == 0.0)
    }

    /// Merges repeated variables and drops zero coefficients.
    pub fn compact(mut self) -> Self {
        self.terms.sort_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for (i, a) in self.terms {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += a,
                _ => out.push((i, a)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        LinExpr { terms: out, constant: self.constant }
    }

    pub fn scaled(&self, k: f64) -> Self {
        LinExpr {
            terms: self.terms.iter().map(|&(i, a)| (i, a * k)).collect(),
            constant: self.constant * k,
        }
    }
}

impl AddAssign<&LinExpr> for LinExpr {
    fn add_assign(&mut self, rhs: &LinExpr) {
        self.terms.extend_from_slice(&rhs.terms);
        self.constant += rhs.constant;
    }
}

impl SubAssign<&LinExpr> for LinExpr {
    fn sub_assign(&mut self, rhs: &LinExpr) {
        self.terms.extend(rhs.terms.iter().map(|&(i, a)| (i, -a)));
        self.constant -= rhs.constant;
    }
}

impl Add for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: LinExpr) -> LinExpr {
        self += &rhs;
        self
    }
}

impl Sub for LinExpr {
    type Output = LinExpr;
    fn sub(mut self, rhs: LinExpr) -> LinExpr {
        self -= &rhs;
        self
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        self.scaled(-1.0)
    }
}

impl Mul<f64> for LinExpr {
    type Output = LinExpr;
    fn mul(self, k: f64) -> LinExpr {
        self.scaled(k)
    }
}

/// Complex affine expression with real and imaginary parts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CExpr {
    pub re: LinExpr,
    pub im: LinExpr,
}

impl CExpr {
    pub fn zero() -> Self {
        CExpr::default()
    }

    pub fn constant(c: C64) -> Self {
        CExpr { re: LinExpr::constant(c.re), im: LinExpr::constant(c.im) }
    }

    pub fn real(re: LinExpr) -> Self {
        CExpr { re, im: LinExpr::zero() }
    }

    pub fn conj(&self) -> Self {
        CExpr { re: self.re.clone(), im: -self.im.clone() }
    }

    /// `c * self` for a complex constant `c`.
    pub fn times(&self, c: C64) -> Self {
        if c == C64::new(0.0, 0.0) {
            return CExpr::zero();
        }
        CExpr {
            re: self.re.scaled(c.re) - self.im.scaled(c.im),
            im: self.re.scaled(c.im) + self.im.scaled(c.re),
        }
    }

    pub fn eval(&self, x: &[f64]) -> C64 {
        C64::new(self.re.eval(x), self.im.eval(x))
    }
}

impl AddAssign<&CExpr> for CExpr {
    fn add_assign(&mut self, rhs: &CExpr) {
        self.re += &rhs.re;
        self.im += &rhs.im;
    }
}

impl SubAssign<&CExpr> for CExpr {
    fn sub_assign(&mut self, rhs: &CExpr) {
        self.re -= &rhs.re;
        self.im -= &rhs.im;
    }
}

impl Add for CExpr {
    type Output = CExpr;
    fn add(mut self, rhs: CExpr) -> CExpr {
        self += &rhs;
        self
    }
}

impl Sub for CExpr {
    type Output = CExpr;
    fn sub(mut self, rhs: CExpr) -> CExpr {
        self -= &rhs;
        self
    }
}

/// `2 t s >= |x|^2`, `t, s >= 0`.
#[derive(Clone, Debug)]
pub struct RsocBlock {
    pub t: LinExpr,
    pub s: LinExpr,
    pub x: Vec<LinExpr>,
}

/// Real symmetric matrix constrained PSD; `upper` lists the upper triangle
/// column by column: (0,0), (0,1), (1,1), (0,2), ...
#[derive(Clone, Debug)]
pub struct PsdBlock {
    pub label: String,
    pub dim: usize,
    pub upper: Vec<LinExpr>,
}

impl PsdBlock {
    pub fn entry(&self, r: usize, c: usize) -> &LinExpr {
        let (r, c) = if r <= c { (r, c) } else { (c, r) };
        &self.upper[c * (c + 1) / 2 + r]
    }
}

#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    pub labels: Vec<String>,
    pub objective: LinExpr,
    /// `expr == 0`.
    pub equalities: Vec<LinExpr>,
    /// `expr >= 0`.
    pub nonneg: Vec<LinExpr>,
    pub rsoc: Vec<RsocBlock>,
    pub psd: Vec<PsdBlock>,
}

impl ConicProgram {
    pub fn new() -> Self {
        ConicProgram::default()
    }

    pub fn n_vars(&self) -> usize {
        self.labels.len()
    }

    pub fn var(&mut self, label: impl Into<String>) -> usize {
        self.labels.push(label.into());
        self.labels.len() - 1
    }

    pub fn add_eq(&mut self, e: LinExpr) {
        self.equalities.push(e.compact());
    }

    pub fn add_ceq(&mut self, e: CExpr) {
        self.add_eq(e.re);
        self.add_eq(e.im);
    }

    pub fn add_ge(&mut self, e: LinExpr) {
        self.nonneg.push(e.compact());
    }

    /// `lo <= e <= hi`; equal bounds become an equality.
    pub fn add_range(&mut self, e: LinExpr, lo: f64, hi: f64) {
        if lo == hi {
            self.add_eq(e - LinExpr::constant(lo));
            return;
        }
        self.add_ge(e.clone() - LinExpr::constant(lo));
        self.add_ge(LinExpr::constant(hi) - e);
    }

    pub fn add_rsoc(&mut self, t: LinExpr, s: LinExpr, x: Vec<LinExpr>) {
        self.rsoc.push(RsocBlock {
            t: t.compact(),
            s: s.compact(),
            x: x.into_iter().map(LinExpr::compact).collect(),
        });
    }

    /// Hermitian `n x n` block given by its entries (only `r <= c` is read),
    /// constrained PSD through the real embedding `[[Re, -Im], [Im, Re]]`.
    pub fn add_psd_hermitian(&mut self, label: impl Into<String>, h: &[Vec<CExpr>]) {
        let n = h.len();
        let herm = |r: usize, c: usize| -> CExpr {
            if r <= c {
                h[r][c].clone()
            } else {
                h[c][r].conj()
            }
        };
        let dim = 2 * n;
        let mut upper = Vec::with_capacity(dim * (dim + 1) / 2);
        for c in 0..dim {
            for r in 0..=c {
                let v = herm(r % n, c % n);
                let e = match (r < n, c < n) {
                    (true, true) | (false, false) => v.re,
                    (true, false) => -v.im,
                    (false, true) => v.im,
                };
                upper.push(e.compact());
            }
        }
        self.psd.push(PsdBlock { label: label.into(), dim, upper });
    }

    /// Every variable must appear somewhere.
    pub fn validate(&self) -> Result<(), ConicError> {
        let n = self.n_vars();
        let mut seen = vec![false; n];
        let mut mark = |e: &LinExpr| -> Result<(), ConicError> {
            for &(i, _) in &e.terms {
                if i >= n {
                    return Err(ConicError::Malformed(format!("variable index {i} out of range")));
                }
                seen[i] = true;
            }
            Ok(())
        };
        mark(&self.objective)?;
        for e in self.equalities.iter().chain(self.nonneg.iter()) {
            mark(e)?;
        }
        for b in &self.rsoc {
            mark(&b.t)?;
            mark(&b.s)?;
            for e in &b.x {
                mark(e)?;
            }
        }
        for b in &self.psd {
            if b.upper.len() != b.dim * (b.dim + 1) / 2 {
                return Err(ConicError::Malformed(format!("PSD block `{}` has wrong size", b.label)));
            }
            for e in &b.upper {
                mark(e)?;
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(ConicError::UnusedVariable(self.labels[i].clone())),
            None => Ok(()),
        }
    }

    /// Largest violation of the program's cones at `x` (equalities,
    /// nonnegativity, rotated cones, and negative PSD eigenvalues).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for e in &self.equalities {
            worst = worst.max(e.eval(x).abs());
        }
        for e in &self.nonneg {
            worst = worst.max(-e.eval(x));
        }
        for b in &self.rsoc {
            let (t, s) = (b.t.eval(x), b.s.eval(x));
            let xx: f64 = b.x.iter().map(|e| e.eval(x).powi(2)).sum();
            worst = worst.max(-t).max(-s).max(xx - 2.0 * t * s);
        }
        for b in &self.psd {
            let m = nalgebra::DMatrix::from_fn(b.dim, b.dim, |r, c| b.entry(r, c).eval(x));
            let min = m.symmetric_eigen().eigenvalues.min();
            worst = worst.max(-min);
        }
        worst
    }

    /// Writes the program in the Conic Benchmark Format (version 3).
    pub fn to_cbf(&self) -> String {
        let mut out = String::new();
        let n = self.n_vars();
        let _ = writeln!(out, "VER\n3\n\nOBJSENSE\nMIN\n\nVAR\n{n} 1\nF {n}\n");
        if !self.psd.is_empty() {
            let _ = writeln!(out, "PSDCON\n{}", self.psd.len());
            for b in &self.psd {
                let _ = writeln!(out, "{}", b.dim);
            }
            out.push('\n');
        }
        // Scalar rows: equalities, nonnegatives, then one QR block per rotated cone.
        let mut rows: Vec<&LinExpr> = Vec::new();
        let mut cones: Vec<(String, usize)> = Vec::new();
        if !self.equalities.is_empty() {
            cones.push(("L=".into(), self.equalities.len()));
            rows.extend(self.equalities.iter());
        }
        if !self.nonneg.is_empty() {
            cones.push(("L+".into(), self.nonneg.len()));
            rows.extend(self.nonneg.iter());
        }
        for b in &self.rsoc {
            cones.push(("QR".into(), 2 + b.x.len()));
            rows.push(&b.t);
            rows.push(&b.s);
            rows.extend(b.x.iter());
        }
        if !rows.is_empty() {
            let _ = writeln!(out, "CON\n{} {}", rows.len(), cones.len());
            for (k, len) in &cones {
                let _ = writeln!(out, "{k} {len}");
            }
            out.push('\n');
        }
        let obj: Vec<_> = self.objective.terms.iter().filter(|t| t.1 != 0.0).collect();
        if !obj.is_empty() {
            let _ = writeln!(out, "OBJACOORD\n{}", obj.len());
            for (j, a) in obj {
                let _ = writeln!(out, "{j} {a:e}");
            }
            out.push('\n');
        }
        if self.objective.constant != 0.0 {
            let _ = writeln!(out, "OBJBCOORD\n{:e}\n", self.objective.constant);
        }
        let acoord: Vec<(usize, usize, f64)> = rows
            .iter()
            .enumerate()
            .flat_map(|(r, e)| e.terms.iter().map(move |&(j, a)| (r, j, a)))
            .collect();
        if !acoord.is_empty() {
            let _ = writeln!(out, "ACOORD\n{}", acoord.len());
            for (r, j, a) in acoord {
                let _ = writeln!(out, "{r} {j} {a:e}");
            }
            out.push('\n');
        }
        let bcoord: Vec<(usize, f64)> =
            rows.iter().enumerate().filter(|(_, e)| e.constant != 0.0).map(|(r, e)| (r, e.constant)).collect();
        if !bcoord.is_empty() {
            let _ = writeln!(out, "BCOORD\n{}", bcoord.len());
            for (r, b) in bcoord {
                let _ = writeln!(out, "{r} {b:e}");
            }
            out.push('\n');
        }
        let mut hcoord = Vec::new();
        let mut dcoord = Vec::new();
        for (p, b) in self.psd.iter().enumerate() {
            for c in 0..b.dim {
                for r in 0..=c {
                    let e = b.entry(r, c);
                    for &(j, a) in &e.terms {
                        hcoord.push(format!("{p} {j} {c} {r} {a:e}"));
                    }
                    if e.constant != 0.0 {
                        dcoord.push(format!("{p} {c} {r} {:e}", e.constant));
                    }
                }
            }
        }
        if !hcoord.is_empty() {
            let _ = writeln!(out, "HCOORD\n{}\n{}\n", hcoord.len(), hcoord.join("\n"));
        }
        if !dcoord.is_empty() {
            let _ = writeln!(out, "DCOORD\n{}\n{}\n", dcoord.len(), dcoord.join("\n"));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    AlmostOptimal,
    PrimalInfeasible,
    DualInfeasible,
    IterationLimit,
    TimeLimit,
    NumericalError,
    InsufficientProgress,
}

impl SolveStatus {
    pub fn is_optimal(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::AlmostOptimal)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Relative gap and feasibility tolerance.
    pub tol: f64,
    pub max_iter: u32,
    pub time_limit: Option<f64>,
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-9, max_iter: 300, time_limit: None, verbose: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub backend: String,
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: u32,
    pub solve_seconds: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl SolveReport {
    pub fn require_optimal(self) -> Result<SolveReport, ConicError> {
        if self.status.is_optimal() {
            Ok(self)
        } else {
            Err(ConicError::NotOptimal(self.status))
        }
    }
}

/// A conic solver that accepts [`ConicProgram`]s.
pub trait ConicBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, prog: &ConicProgram, opts: &SolveOptions) -> Result<SolveReport, ConicError>;
}

/// KKT regularization proportional to the largest diagonal entry. The
/// library default (about 5e-32) lets the factorization drift on these
/// programs and the solver stops at reduced accuracy; 1e-16 reaches full
/// accuracy on every bundled feeder.
const STATIC_REG_PROPORTIONAL: f64 = 1e-16;

/// Interior-point backend built on Clarabel.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClarabelBackend;

/// Triplet accumulator for the constraint matrix.
struct Rows {
    col: Vec<usize>,
    row: Vec<usize>,
    val: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    /// Appends a row with `s = b - A x = scale * e`.
    fn push_cone(&mut self, e: &LinExpr, scale: f64) {
        let r = self.b.len();
        for &(j, a) in &e.terms {
            self.row.push(r);
            self.col.push(j);
            self.val.push(-a * scale);
        }
        self.b.push(e.constant * scale);
    }

    /// Appends the equality row `e == 0`.
    fn push_eq(&mut self, e: &LinExpr) {
        let r = self.b.len();
        for &(j, a) in &e.terms {
            self.row.push(r);
            self.col.push(j);
            self.val.push(a);
        }
        self.b.push(-e.constant);
    }

    fn csc(&self, n: usize) -> clarabel::algebra::CscMatrix<f64> {
        let m = self.b.len();
        let mut idx: Vec<usize> = (0..self.val.len()).collect();
        idx.sort_by_key(|&k| (self.col[k], self.row[k]));
        let mut colptr = vec![0usize; n + 1];
        let mut rowval = Vec::with_capacity(idx.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(idx.len());
        let mut last: Option<(usize, usize)> = None;
        for k in idx {
            let key = (self.col[k], self.row[k]);
            if last == Some(key) {
                *nzval.last_mut().expect("duplicate follows an entry") += self.val[k];
                continue;
            }
            last = Some(key);
            rowval.push(key.1);
            nzval.push(self.val[k]);
            colptr[key.0 + 1] += 1;
        }
        for j in 0..n {
            colptr[j + 1] += colptr[j];
        }
        clarabel::algebra::CscMatrix::new(m, n, colptr, rowval, nzval)
    }
}

impl ConicBackend for ClarabelBackend {
    fn name(&self) -> &'static str {
        "clarabel"
    }

    fn solve(&self, prog: &ConicProgram, opts: &SolveOptions) -> Result<SolveReport, ConicError> {
        use clarabel::solver::{
            DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, PSDTriangleConeT,
            SecondOrderConeT, SolverStatus, SupportedConeT, ZeroConeT,
        };
        prog.validate()?;
        let n = prog.n_vars();
        let mut rows = Rows { col: Vec::new(), row: Vec::new(), val: Vec::new(), b: Vec::new() };
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        if !prog.equalities.is_empty() {
            for e in &prog.equalities {
                rows.push_eq(e);
            }
            cones.push(ZeroConeT(prog.equalities.len()));
        }
        if !prog.nonneg.is_empty() {
            for e in &prog.nonneg {
                rows.push_cone(e, 1.0);
            }
            cones.push(NonnegativeConeT(prog.nonneg.len()));
        }
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for b in &prog.rsoc {
            rows.push_cone(&(b.t.clone() + b.s.clone()), h);
            rows.push_cone(&(b.t.clone() - b.s.clone()), h);
            for e in &b.x {
                rows.push_cone(e, 1.0);
            }
            cones.push(SecondOrderConeT(2 + b.x.len()));
        }
        let s2 = std::f64::consts::SQRT_2;
        for b in &prog.psd {
            for c in 0..b.dim {
                for r in 0..=c {
                    rows.push_cone(b.entry(r, c), if r == c { 1.0 } else { s2 });
                }
            }
            cones.push(PSDTriangleConeT(b.dim));
        }
        let a = rows.csc(n);
        let p = clarabel::algebra::CscMatrix::<f64>::zeros((n, n));
        let mut q = vec![0.0; n];
        for &(j, c) in &prog.objective.clone().compact().terms {
            q[j] += c;
        }
        let mut builder = DefaultSettingsBuilder::default();
        builder
            .verbose(opts.verbose)
            .max_iter(opts.max_iter)
            .tol_gap_abs(opts.tol)
            .tol_gap_rel(opts.tol)
            .tol_feas(opts.tol)
            .chordal_decomposition_enable(false)
            .static_regularization_proportional(STATIC_REG_PROPORTIONAL);
        if let Some(t) = opts.time_limit {
            builder.time_limit(t);
        }
        let settings = builder.build().map_err(|e| ConicError::Backend(e.to_string()))?;
        let start = Instant::now();
        let mut solver = DefaultSolver::new(&p, &q, &a, &rows.b, &cones, settings)
            .map_err(|e| ConicError::Backend(format!("{e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => SolveStatus::AlmostOptimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::PrimalInfeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::DualInfeasible,
            SolverStatus::MaxIterations => SolveStatus::IterationLimit,
            SolverStatus::MaxTime => SolveStatus::TimeLimit,
            SolverStatus::InsufficientProgress => SolveStatus::InsufficientProgress,
            _ => SolveStatus::NumericalError,
        };
        Ok(SolveReport {
            backend: self.name().to_string(),
            status,
            x: sol.x.clone(),
            primal_objective: sol.obj_val + prog.objective.constant,
            dual_objective: sol.obj_val_dual + prog.objective.constant,
            iterations: sol.iterations,
            solve_seconds: start.elapsed().as_secs_f64(),
            primal_residual: sol.r_prim,
            dual_residual: sol.r_dual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn psd_min_trace() {
        // min tr(M) s.t. M11 = 1, M12 = 1, M PSD  ->  M = [[1,1],[1,1]].
        let mut p = ConicProgram::new();
        let v: Vec<usize> = (0..3).map(|i| p.var(format!("m{i}"))).collect();
        p.objective = LinExpr::var(v[0]) + LinExpr::var(v[2]);
        p.add_eq(LinExpr::var(v[0]) - LinExpr::constant(1.0));
        p.add_eq(LinExpr::var(v[1]) - LinExpr::constant(1.0));
        p.psd.push(PsdBlock {
            label: "m".into(),
            dim: 2,
            upper: vec![LinExpr::var(v[0]), LinExpr::var(v[1]), LinExpr::var(v[2])],
        });
        let r = ClarabelBackend.solve(&p, &SolveOptions::default()).unwrap().require_optimal().unwrap();
        assert!((r.primal_objective - 2.0).abs() < 1e-7);
        assert!(p.max_violation(&r.x) < 1e-7);
    }

    #[test]
    fn hermitian_block_through_embedding() {
        // max Re(h12) s.t. h11 = 1, h22 = 4, H PSD -> |h12| <= 2 so optimum 2.
        let mut p = ConicProgram::new();
        let re = p.var("re");
        let im = p.var("im");
        p.objective = LinExpr::var(re) * -1.0;
        let h = vec![
            vec![CExpr::constant(c(1.0, 0.0)), CExpr { re: LinExpr::var(re), im: LinExpr::var(im) }],
            vec![CExpr::zero(), CExpr::constant(c(4.0, 0.0))],
        ];
        p.add_psd_hermitian("h", &h);
        let r = ClarabelBackend.solve(&p, &SolveOptions::default()).unwrap();
        assert!(r.status.is_optimal());
        assert!((r.x[re] - 2.0).abs() < 1e-6 && r.x[im].abs() < 1e-6);
    }

    #[test]
    fn rsoc_epigraph() {
        // min t s.t. t >= (x - 3)^2, x <= 1  ->  t = 4.
        let mut p = ConicProgram::new();
        let t = p.var("t");
        let x = p.var("x");
        p.objective = LinExpr::var(t);
        p.add_rsoc(LinExpr::var(t), LinExpr::constant(0.5), vec![LinExpr::var(x) - LinExpr::constant(3.0)]);
        p.add_ge(LinExpr::constant(1.0) - LinExpr::var(x));
        let r = ClarabelBackend.solve(&p, &SolveOptions::default()).unwrap();
        assert!((r.primal_objective - 4.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_reported() {
        let mut p = ConicProgram::new();
        let x = p.var("x");
        p.objective = LinExpr::var(x);
        p.add_ge(LinExpr::var(x) - LinExpr::constant(2.0));
        p.add_ge(LinExpr::constant(1.0) - LinExpr::var(x));
        let r = ClarabelBackend.solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::PrimalInfeasible);
        assert!(r.require_optimal().is_err());
    }

    #[test]
    fn unused_variable_rejected() {
        let mut p = ConicProgram::new();
        p.var("lonely");
        assert!(matches!(p.validate(), Err(ConicError::UnusedVariable(_))));
    }

    #[test]
    fn cbf_has_sections() {
        let mut p = ConicProgram::new();
        let x = p.var("x");
        p.objective = LinExpr::var(x);
        p.add_eq(LinExpr::var(x) - LinExpr::constant(1.0));
        p.psd.push(PsdBlock { label: "b".into(), dim: 1, upper: vec![LinExpr::var(x)] });
        let text = p.to_cbf();
        for key in ["VER", "VAR", "PSDCON", "CON", "OBJACOORD", "ACOORD", "BCOORD", "HCOORD"] {
            assert!(text.contains(key), "missing {key}");
        }
    }
}
