//! Complex matrix variables laid out over masked 3x3 blocks.

use crate::conic::{CExpr, ConicProgram, LinExpr};
use crate::feeder::{Feeder, Mask, Mat3, Vec3, C64};

/// Hermitian block: a real variable per wired diagonal entry and a complex
/// pair per wired upper entry, or a fixed constant.
#[derive(Clone, Debug)]
pub struct HermVar {
    pub mask: Mask,
    re: [[Option<usize>; 3]; 3],
    im: [[Option<usize>; 3]; 3],
    fixed: Option<Mat3>,
}

impl HermVar {
    pub fn new(prog: &mut ConicProgram, label: &str, mask: Mask) -> Self {
        let mut re = [[None; 3]; 3];
        let mut im = [[None; 3]; 3];
        let slots = mask.slots();
        for (a, &r) in slots.iter().enumerate() {
            for &c in &slots[a..] {
                re[r][c] = Some(prog.var(format!("{label}[{r}{c}].re")));
                if r != c {
                    im[r][c] = Some(prog.var(format!("{label}[{r}{c}].im")));
                }
            }
        }
        HermVar { mask, re, im, fixed: None }
    }

    pub fn fixed(m: Mat3, mask: Mask) -> Self {
        HermVar { mask, re: [[None; 3]; 3], im: [[None; 3]; 3], fixed: Some(m) }
    }

    pub fn entry(&self, r: usize, c: usize) -> CExpr {
        if let Some(m) = &self.fixed {
            return CExpr::constant(m[(r, c)]);
        }
        let (a, b, flip) = if r <= c { (r, c, false) } else { (c, r, true) };
        let re = self.re[a][b].map(LinExpr::var).unwrap_or_default();
        let im = self.im[a][b].map(LinExpr::var).unwrap_or_default();
        let e = CExpr { re, im };
        if flip {
            e.conj()
        } else {
            e
        }
    }

    pub fn value(&self, x: &[f64]) -> Mat3 {
        Mat3::from_fn(|r, c| self.entry(r, c).eval(x))
    }
}

/// General complex block with independent entries on `rows x cols`.
#[derive(Clone, Debug)]
pub struct CMatVar {
    pub rows: Mask,
    pub cols: Mask,
    vars: [[Option<(usize, usize)>; 3]; 3],
}

impl CMatVar {
    pub fn new(prog: &mut ConicProgram, label: &str, rows: Mask, cols: Mask) -> Self {
        Self::new_where(prog, label, rows, cols, |_, _| true)
    }

    /// Only entries with `keep(r, c)` become variables; the rest read as zero.
    pub fn new_where(
        prog: &mut ConicProgram,
        label: &str,
        rows: Mask,
        cols: Mask,
        keep: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let mut vars = [[None; 3]; 3];
        for r in rows.slots() {
            for c in cols.slots().into_iter().filter(|&c| keep(r, c)) {
                let re = prog.var(format!("{label}[{r}{c}].re"));
                let im = prog.var(format!("{label}[{r}{c}].im"));
                vars[r][c] = Some((re, im));
            }
        }
        CMatVar { rows, cols, vars }
    }

    pub fn entry(&self, r: usize, c: usize) -> CExpr {
        match self.vars[r][c] {
            Some((re, im)) => CExpr { re: LinExpr::var(re), im: LinExpr::var(im) },
            None => CExpr::zero(),
        }
    }

    pub fn value(&self, x: &[f64]) -> Mat3 {
        Mat3::from_fn(|r, c| self.entry(r, c).eval(x))
    }
}

/// Complex vector on a mask.
#[derive(Clone, Debug)]
pub struct CVecVar {
    pub mask: Mask,
    vars: [Option<(usize, usize)>; 3],
}

impl CVecVar {
    pub fn new(prog: &mut ConicProgram, label: &str, mask: Mask) -> Self {
        let mut vars = [None; 3];
        for i in mask.slots() {
            vars[i] = Some((prog.var(format!("{label}[{i}].re")), prog.var(format!("{label}[{i}].im"))));
        }
        CVecVar { mask, vars }
    }

    pub fn entry(&self, i: usize) -> CExpr {
        match self.vars[i] {
            Some((re, im)) => CExpr { re: LinExpr::var(re), im: LinExpr::var(im) },
            None => CExpr::zero(),
        }
    }

    pub fn value(&self, x: &[f64]) -> Vec3 {
        Vec3::from_fn(|i, _| self.entry(i).eval(x))
    }
}

/// A block whose entries are `u[r] * conj(y[c])` with `u` constant and `y`
/// variable; the slack-adjacent edge blocks take this form.
#[derive(Clone, Debug)]
pub struct OuterVar {
    pub u: Vec3,
    pub y: CVecVar,
}

impl OuterVar {
    pub fn entry(&self, r: usize, c: usize) -> CExpr {
        self.y.entry(c).conj().times(self.u[r])
    }

    pub fn value(&self, x: &[f64]) -> Mat3 {
        let y = self.y.value(x);
        Mat3::from_fn(|r, c| self.u[r] * y[c].conj())
    }
}

/// Off-diagonal block variable: free entries, or `u y^H` next to the slack.
#[derive(Clone, Debug)]
pub enum EdgeVar {
    Free(CMatVar),
    Outer(OuterVar),
}

impl EdgeVar {
    pub fn entry(&self, r: usize, c: usize) -> CExpr {
        match self {
            EdgeVar::Free(m) => m.entry(r, c),
            EdgeVar::Outer(o) => o.entry(r, c),
        }
    }

    pub fn value(&self, x: &[f64]) -> Mat3 {
        match self {
            EdgeVar::Free(m) => m.value(x),
            EdgeVar::Outer(o) => o.value(x),
        }
    }
}

/// Wye and delta injection expressions for every bus; fixed box sides
/// become constants rather than variables.
#[derive(Clone, Debug)]
pub struct Injections {
    pub wye: Vec<[Option<CExpr>; 3]>,
    pub delta: Vec<[Option<CExpr>; 3]>,
}

impl Injections {
    pub fn build(prog: &mut ConicProgram, feeder: &Feeder) -> Self {
        let n = feeder.n_buses();
        let mut build = |regions: &[Option<crate::feeder::InjectionRegion>], tag: &str| {
            (0..n)
                .map(|j| {
                    let mut row: [Option<CExpr>; 3] = [None, None, None];
                    if let Some(r) = &regions[j] {
                        for i in r.mask.slots() {
                            let bus = &feeder.buses[j].id;
                            let part = |prog: &mut ConicProgram, lo: f64, hi: f64, name: &str| {
                                if lo == hi {
                                    LinExpr::constant(lo)
                                } else {
                                    let v = prog.var(format!("{tag}{name}_{bus}[{i}]"));
                                    prog.add_range(LinExpr::var(v), lo, hi);
                                    LinExpr::var(v)
                                }
                            };
                            let re = part(prog, r.p_min[i], r.p_max[i], "p");
                            let im = part(prog, r.q_min[i], r.q_max[i], "q");
                            row[i] = Some(CExpr { re, im });
                        }
                    }
                    row
                })
                .collect::<Vec<_>>()
        };
        let wye = build(&feeder.wye, "s");
        let delta = build(&feeder.delta, "sd");
        Injections { wye, delta }
    }

    pub fn wye_expr(&self, j: usize, i: usize) -> CExpr {
        self.wye[j][i].clone().unwrap_or_default()
    }

    pub fn delta_expr(&self, j: usize, i: usize) -> CExpr {
        self.delta[j][i].clone().unwrap_or_default()
    }

    pub fn values(&self, x: &[f64]) -> (Vec<Vec3>, Vec<Vec3>) {
        let eval = |rows: &[[Option<CExpr>; 3]]| {
            rows.iter()
                .map(|row| Vec3::from_fn(|i, _| row[i].as_ref().map(|e| e.eval(x)).unwrap_or(C64::new(0.0, 0.0))))
                .collect::<Vec<_>>()
        };
        (eval(&self.wye), eval(&self.delta))
    }

    pub fn cost_view(&self) -> crate::cost::InjectionExprs {
        crate::cost::InjectionExprs { wye: self.wye.clone(), delta: self.delta.clone() }
    }
}

/// `sum_psi A[phi, psi] * conj(B[phi, psi])`, the diagonal entry of `A B^H`.
pub fn diag_mul_adj(a: impl Fn(usize, usize) -> CExpr, b: &Mat3, phi: usize) -> CExpr {
    let mut acc = CExpr::zero();
    for psi in 0..3 {
        let coeff = b[(phi, psi)].conj();
        if coeff != C64::new(0.0, 0.0) {
            acc += &a(phi, psi).times(coeff);
        }
    }
    acc
}

/// Hermitian block over selected (row source, slot) pairs for the PSD cone.
pub fn hermitian_grid(n: usize, entry: impl Fn(usize, usize) -> CExpr) -> Vec<Vec<CExpr>> {
    (0..n)
        .map(|r| (0..n).map(|c| if r <= c { entry(r, c) } else { CExpr::zero() }).collect())
        .collect()
}
