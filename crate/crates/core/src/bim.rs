//! Bus-injection-model relaxation over the voltage outer product `W`.
//!
//! `W >= 0` is imposed either per line on the bus-pair cliques (exact on a
//! tree) or as one dense block. Blocks touching the substation are written
//! as `v_ref y^H`, which with the pinned `W_00` is equivalent to the PSD
//! constraint and keeps the program strictly feasible.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{diag_mul_adj, hermitian_grid, CMatVar, CVecVar, EdgeVar, HermVar, Injections, OuterVar};
use crate::conic::{CExpr, ConicProgram, LinExpr};
use crate::cost::{CostError, CostWeights};
use crate::feeder::{gamma, Feeder, Mask, Mat3, Vec3, C64};
use crate::hermlin::{eig_ratio, HermError};
use crate::relax::{block_ratio, coupling_ratios, max_abs, set_objective, two_by_two, DeltaVars, RelaxOptions};

#[derive(Debug, Error)]
pub enum RelaxError {
    #[error("penalty weight must be a nonnegative finite number, got {0}")]
    Lambda(f64),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Linalg(#[from] HermError),
    #[error("{0}")]
    Completion(String),
}

/// How `W >= 0` enters the program.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum WForm {
    /// One PSD block per line on the two incident buses.
    #[default]
    Cliques,
    /// One block over every non-substation phase.
    Dense,
}

#[derive(Clone, Debug)]
struct DenseHerm {
    /// Global position of (bus, phase), substation excluded.
    index: Vec<[Option<usize>; 3]>,
    herm: Vec<Vec<Option<(usize, Option<usize>)>>>,
    y: Vec<(usize, usize)>,
}

impl DenseHerm {
    fn entry(&self, p: usize, q: usize) -> CExpr {
        let (a, b, flip) = if p <= q { (p, q, false) } else { (q, p, true) };
        let (re, im) = self.herm[a][b].expect("dense block is fully populated");
        let e = CExpr { re: LinExpr::var(re), im: im.map(LinExpr::var).unwrap_or_default() };
        if flip {
            e.conj()
        } else {
            e
        }
    }

    fn y(&self, p: usize) -> CExpr {
        let (re, im) = self.y[p];
        CExpr { re: LinExpr::var(re), im: LinExpr::var(im) }
    }
}

#[derive(Clone, Debug)]
enum WLayout {
    Cliques { diag: Vec<HermVar>, edge: Vec<EdgeVar> },
    Dense { v_ref: Vec3, w00: HermVar, d: DenseHerm },
}

impl WLayout {
    /// Entry `W_jk[r, c]`; `k` must be `j` or a neighbour under cliques.
    fn entry(&self, feeder: &Feeder, j: usize, r: usize, k: usize, c: usize) -> CExpr {
        match self {
            WLayout::Cliques { diag, edge } => {
                if j == k {
                    diag[j].entry(r, c)
                } else if feeder.parent(k) == Some(j) {
                    edge[k - 1].entry(r, c)
                } else if feeder.parent(j) == Some(k) {
                    edge[j - 1].entry(c, r).conj()
                } else {
                    panic!("W_{j}{k} is not an edge block")
                }
            }
            WLayout::Dense { v_ref, w00, d } => match (j, k) {
                (0, 0) => w00.entry(r, c),
                (0, _) => d.y(d.index[k][c].expect("phase on bus")).conj().times(v_ref[r]),
                (_, 0) => d.y(d.index[j][r].expect("phase on bus")).times(v_ref[c].conj()),
                _ => d.entry(d.index[j][r].expect("phase on bus"), d.index[k][c].expect("phase on bus")),
            },
        }
    }
}

/// A built relaxation and the map from solver vectors back to [`BimSolution`].
#[derive(Clone, Debug)]
pub struct BimProgram {
    pub prog: ConicProgram,
    pub form: WForm,
    pub lambda: f64,
    inj: Injections,
    w: WLayout,
    delta: DeltaVars,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BimSolution {
    pub s: Vec<Vec3>,
    pub s_delta: Vec<Vec3>,
    /// `W_jj` per bus.
    pub w_diag: Vec<Mat3>,
    /// `W_jk` per line, from the upstream bus to the downstream one.
    pub w_edge: Vec<Mat3>,
    /// The full matrix when the dense form was solved.
    pub w_full: Option<DMatrix<C64>>,
    pub x: Vec<Mat3>,
    /// Zero where the coupling blocks were left out.
    pub rho: Vec<Mat3>,
    /// Whether `[[W_jj, X_j], [X_j^H, rho_j]] >= 0` was part of the program.
    pub coupled: bool,
}

pub fn build_bim_relaxation(feeder: &Feeder, weights: &CostWeights, lambda: f64) -> Result<BimProgram, RelaxError> {
    build_bim_relaxation_with(feeder, weights, lambda, RelaxOptions::default())
}

pub fn build_bim_relaxation_with(
    feeder: &Feeder,
    weights: &CostWeights,
    lambda: f64,
    opts: RelaxOptions,
) -> Result<BimProgram, RelaxError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(RelaxError::Lambda(lambda));
    }
    let n = feeder.n_buses();
    let mut prog = ConicProgram::new();
    let inj = Injections::build(&mut prog, feeder);
    let w00 = Mat3::from_fn(|r, c| feeder.v_ref[r] * feeder.v_ref[c].conj());
    let form = opts.w_form;
    let w = match form {
        WForm::Cliques => build_cliques(&mut prog, feeder, w00),
        WForm::Dense => build_dense(&mut prog, feeder, w00),
    };
    let delta = DeltaVars::build(&mut prog, feeder, &inj, opts.coupled(lambda));

    for j in 0..n {
        let ph = feeder.phases(j);
        if j > 0 {
            for phi in ph.slots() {
                let d = w.entry(feeder, j, phi, j, phi).re;
                prog.add_range(d, feeder.v_min[j][phi].powi(2), feeder.v_max[j][phi].powi(2));
            }
        }
        for phi in ph.slots() {
            let mut e = inj.wye_expr(j, phi);
            e -= &delta.diag_x_gamma(j, phi);
            e -= &diag_mul_adj(|a, b| w.entry(feeder, j, a, j, b), &feeder.shunt[j], phi);
            for (k, l) in feeder.neighbours(j) {
                let y = &feeder.lines[l].y;
                e -= &diag_mul_adj(|a, b| w.entry(feeder, j, a, j, b) - w.entry(feeder, j, a, k, b), y, phi);
            }
            prog.add_ceq(e);
        }
        delta.add_coupling(&mut prog, feeder, j, |r, c| w.entry(feeder, j, r, j, c));
    }
    set_objective(&mut prog, feeder, weights, &inj, &delta, lambda)?;
    Ok(BimProgram { prog, form, lambda, inj, w, delta })
}

fn build_cliques(prog: &mut ConicProgram, feeder: &Feeder, w00: Mat3) -> WLayout {
    let n = feeder.n_buses();
    let mut diag = vec![HermVar::fixed(w00, feeder.phases(0))];
    for j in 1..n {
        diag.push(HermVar::new(prog, &format!("W_{}", feeder.buses[j].id), feeder.phases(j)));
    }
    let mut edge = Vec::with_capacity(n.saturating_sub(1));
    for (l, line) in feeder.lines.iter().enumerate() {
        let (j, k) = (line.from, line.to);
        let (pj, pk) = (feeder.phases(j), feeder.phases(k));
        let label = format!("W_{}_{}", feeder.buses[j].id, feeder.buses[k].id);
        let kk = pk.slots();
        if j == 0 {
            let y = CVecVar::new(prog, &label, pk);
            let grid = hermitian_grid(1 + kk.len(), |r, c| match (r, c) {
                (0, 0) => CExpr::constant(C64::new(1.0, 0.0)),
                (0, c) => y.entry(kk[c - 1]).conj(),
                (r, c) => diag[k].entry(kk[r - 1], kk[c - 1]),
            });
            prog.add_psd_hermitian(format!("clique_{l}"), &grid);
            edge.push(EdgeVar::Outer(OuterVar { u: feeder.v_ref, y }));
        } else {
            let m = CMatVar::new(prog, &label, pj, pk);
            let jj = pj.slots();
            let nj = jj.len();
            let grid = hermitian_grid(nj + kk.len(), |r, c| match (r < nj, c < nj) {
                (true, true) => diag[j].entry(jj[r], jj[c]),
                (true, false) => m.entry(jj[r], kk[c - nj]),
                _ => diag[k].entry(kk[r - nj], kk[c - nj]),
            });
            prog.add_psd_hermitian(format!("clique_{l}"), &grid);
            edge.push(EdgeVar::Free(m));
        }
    }
    WLayout::Cliques { diag, edge }
}

fn build_dense(prog: &mut ConicProgram, feeder: &Feeder, w00: Mat3) -> WLayout {
    let n = feeder.n_buses();
    let mut index = vec![[None; 3]; n];
    let mut names = Vec::new();
    for (j, row) in index.iter_mut().enumerate().skip(1) {
        for phi in feeder.phases(j).slots() {
            row[phi] = Some(names.len());
            names.push(format!("{}.{}", feeder.buses[j].id, phi));
        }
    }
    let m = names.len();
    let mut herm = vec![vec![None; m]; m];
    for q in 0..m {
        for p in 0..=q {
            let re = prog.var(format!("W[{},{}].re", names[p], names[q]));
            let im = (p != q).then(|| prog.var(format!("W[{},{}].im", names[p], names[q])));
            herm[p][q] = Some((re, im));
        }
    }
    let y = (0..m)
        .map(|p| (prog.var(format!("y[{}].re", names[p])), prog.var(format!("y[{}].im", names[p]))))
        .collect();
    let d = DenseHerm { index, herm, y };
    if m > 0 {
        let grid = hermitian_grid(1 + m, |r, c| match (r, c) {
            (0, 0) => CExpr::constant(C64::new(1.0, 0.0)),
            (0, c) => d.y(c - 1).conj(),
            (r, c) => d.entry(r - 1, c - 1),
        });
        prog.add_psd_hermitian("W", &grid);
    }
    WLayout::Dense { v_ref: feeder.v_ref, w00: HermVar::fixed(w00, feeder.phases(0)), d }
}

impl BimProgram {
    pub fn extract(&self, feeder: &Feeder, x: &[f64]) -> BimSolution {
        let (s, s_delta) = self.inj.values(x);
        let (xs, rho) = self.delta.values(x);
        let n = feeder.n_buses();
        let block = |j: usize, k: usize| {
            let (pj, pk) = (feeder.phases(j), feeder.phases(k));
            Mat3::from_fn(|r, c| {
                if pj.contains(r) && pk.contains(c) {
                    self.w.entry(feeder, j, r, k, c).eval(x)
                } else {
                    C64::new(0.0, 0.0)
                }
            })
        };
        let w_diag = (0..n).map(|j| block(j, j)).collect();
        let w_edge = feeder.lines.iter().map(|l| block(l.from, l.to)).collect();
        let w_full = (self.form == WForm::Dense).then(|| {
            let mut full = DMatrix::zeros(3 * n, 3 * n);
            for j in 0..n {
                for k in 0..n {
                    let b = block(j, k);
                    for r in 0..3 {
                        for c in 0..3 {
                            full[(3 * j + r, 3 * k + c)] = b[(r, c)];
                        }
                    }
                }
            }
            full
        });
        BimSolution { s, s_delta, w_diag, w_edge, w_full, x: xs, rho, coupled: self.delta.coupled }
    }
}

/// Per-phase residuals of the power balance and delta definition, in kVA
/// (real part kW, imaginary part kvar).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BimResiduals {
    pub balance: Vec<[C64; 3]>,
    pub delta: Vec<[C64; 3]>,
    pub max_kw: f64,
}

pub fn bim_residuals(sol: &BimSolution, feeder: &Feeder) -> BimResiduals {
    let n = feeder.n_buses();
    let g = gamma();
    let mut balance = vec![[C64::new(0.0, 0.0); 3]; n];
    let mut delta = vec![[C64::new(0.0, 0.0); 3]; n];
    for j in 0..n {
        let wjj = &sol.w_diag[j];
        let mut rhs = Mat3::zeros();
        for (k, l) in feeder.neighbours(j) {
            let wjk = if feeder.parent(k) == Some(j) { sol.w_edge[l] } else { sol.w_edge[l].adjoint() };
            rhs += (wjj - wjk) * feeder.lines[l].y.adjoint();
        }
        let xg = sol.x[j] * g;
        let sh = wjj * feeder.shunt[j].adjoint();
        for phi in feeder.phases(j).slots() {
            let r = sol.s[j][phi] - xg[(phi, phi)] - sh[(phi, phi)] - rhs[(phi, phi)];
            balance[j][phi] = r * feeder.power_base_kva;
        }
        let gx = g * sol.x[j];
        for k in feeder.delta_pairs(j).slots() {
            delta[j][k] = (sol.s_delta[j][k] - gx[(k, k)]) * feeder.power_base_kva;
        }
    }
    let max_kw = max_abs(&balance).max(max_abs(&delta));
    BimResiduals { balance, delta, max_kw }
}

/// Rank diagnostics of a BIM point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BimRatios {
    /// Largest `W_jj` eigenvalue ratio.
    pub w_ratio: f64,
    /// Largest ratio over the bus-pair cliques.
    pub clique_ratio: f64,
    /// `[[W_jj, X_j], [X_j^H, rho_j]]` ratio per bus; `None` when the blocks
    /// were not part of the program.
    pub m_ratios: Option<Vec<f64>>,
}

impl BimRatios {
    pub fn m_ratio(&self) -> Option<f64> {
        self.m_ratios.as_ref().map(|m| m.iter().copied().fold(0.0, f64::max))
    }
}

impl BimSolution {
    /// Rank-1 point built from bus voltages and delta currents.
    pub fn from_voltages(feeder: &Feeder, v: &[Vec3], i_delta: &[Vec3], s: &[Vec3], s_delta: &[Vec3]) -> Self {
        let outer = |a: &Vec3, b: &Vec3| a * b.adjoint();
        BimSolution {
            s: s.to_vec(),
            s_delta: s_delta.to_vec(),
            w_diag: v.iter().map(|vj| outer(vj, vj)).collect(),
            w_edge: feeder.lines.iter().map(|l| outer(&v[l.from], &v[l.to])).collect(),
            w_full: None,
            x: v.iter().zip(i_delta).map(|(vj, ij)| outer(vj, ij)).collect(),
            rho: i_delta.iter().map(|ij| outer(ij, ij)).collect(),
            coupled: true,
        }
    }

    pub fn ratios(&self, feeder: &Feeder) -> Result<BimRatios, HermError> {
        let mut w_ratio: f64 = 0.0;
        for j in 0..feeder.n_buses() {
            w_ratio = w_ratio.max(block_ratio(&self.w_diag[j], feeder.phases(j))?);
        }
        let mut clique_ratio: f64 = 0.0;
        for (l, line) in feeder.lines.iter().enumerate() {
            let (pj, pk) = (feeder.phases(line.from), feeder.phases(line.to));
            let m = two_by_two(&self.w_diag[line.from], pj, &self.w_edge[l], &self.w_diag[line.to], pk);
            clique_ratio = clique_ratio.max(eig_ratio(&m)?);
        }
        let m_ratios = if self.coupled { Some(coupling_ratios(feeder, &self.w_diag, &self.x, &self.rho)?) } else { None };
        Ok(BimRatios { w_ratio, clique_ratio, m_ratios })
    }

    /// The full `W`: the solved dense block, or the tree completion of the
    /// diagonal and edge blocks.
    pub fn full_w(&self, feeder: &Feeder) -> Result<DMatrix<C64>, RelaxError> {
        if let Some(w) = &self.w_full {
            return Ok(w.clone());
        }
        let rows: Vec<Mask> = feeder.lines.iter().map(|l| feeder.phases(l.from)).collect();
        crate::equivalence::complete_tree(feeder, &self.w_diag, &self.w_edge, &rows)
    }

    pub fn trace_rho(&self) -> f64 {
        self.rho.iter().map(|r| r.trace().re).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{ClarabelBackend, ConicBackend, SolveOptions};
    use crate::feeder::bundled;

    fn solve(feeder: &Feeder, lambda: f64, w_form: WForm) -> (BimSolution, f64) {
        let w = CostWeights::for_feeder(feeder);
        let opts = RelaxOptions { w_form, ..Default::default() };
        let p = build_bim_relaxation_with(feeder, &w, lambda, opts).unwrap();
        let rep = ClarabelBackend.solve(&p.prog, &SolveOptions::default()).unwrap().require_optimal().unwrap();
        (p.extract(feeder, &rep.x), rep.primal_objective)
    }

    #[test]
    fn single_bus_pins_substation_block() {
        let f = bundled("single_bus").unwrap();
        let (sol, _) = solve(&f, 0.0, WForm::Cliques);
        let w00 = f.v_ref * f.v_ref.adjoint();
        assert!((sol.w_diag[0] - w00).norm() < 1e-12);
        assert!(bim_residuals(&sol, &f).max_kw < 1e-6);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let f = bundled("two_bus_delta").unwrap();
        let w = CostWeights::for_feeder(&f);
        assert!(matches!(build_bim_relaxation(&f, &w, -1.0), Err(RelaxError::Lambda(_))));
        assert!(matches!(build_bim_relaxation(&f, &w, f64::NAN), Err(RelaxError::Lambda(_))));
    }

    #[test]
    fn solver_point_is_feasible_and_exact_on_small_feeders() {
        for name in ["two_bus_delta", "three_bus_delta", "no_delta"] {
            let f = bundled(name).unwrap();
            let (sol, _) = solve(&f, 0.0, WForm::Cliques);
            let res = bim_residuals(&sol, &f);
            assert!(res.max_kw < 1e-4, "{name}: {}", res.max_kw);
            let r = sol.ratios(&f).unwrap();
            assert!(r.w_ratio < 1e-6, "{name}: {}", r.w_ratio);
            let w00 = f.v_ref * f.v_ref.adjoint();
            assert!((sol.w_diag[0] - w00).norm() < 1e-9);
        }
    }

    #[test]
    fn clique_and_dense_forms_agree() {
        for name in ["two_bus_delta", "three_bus_delta", "no_delta"] {
            let f = bundled(name).unwrap();
            let (_, a) = solve(&f, 0.0, WForm::Cliques);
            let (_, b) = solve(&f, 0.0, WForm::Dense);
            assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{name}: {a} vs {b}");
            let (_, a) = solve(&f, 10.0, WForm::Cliques);
            let (_, b) = solve(&f, 10.0, WForm::Dense);
            assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{name}: {a} vs {b}");
        }
    }

    #[test]
    fn dense_solution_contains_edge_blocks() {
        let f = bundled("three_bus_delta").unwrap();
        let (sol, _) = solve(&f, 1.0, WForm::Dense);
        let full = sol.w_full.as_ref().unwrap();
        for (l, line) in f.lines.iter().enumerate() {
            for r in 0..3 {
                for c in 0..3 {
                    let d = full[(3 * line.from + r, 3 * line.to + c)] - sol.w_edge[l][(r, c)];
                    assert!(d.norm() < 1e-12);
                }
            }
        }
        assert!(bim_residuals(&sol, &f).max_kw < 1e-4);
    }
}
