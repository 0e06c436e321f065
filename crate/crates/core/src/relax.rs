//! Pieces shared by the bus-injection and branch-flow relaxations: delta
//! device variables `X_j`, `rho_j`, their PSD coupling with the bus voltage
//! block, the penalty term and the cost.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bim::WForm;
use crate::blocks::{hermitian_grid, CMatVar, HermVar, Injections};
use crate::conic::{CExpr, ConicProgram, LinExpr};
use crate::cost::{epigraph_constraints, CostError, CostWeights};
use crate::feeder::{gamma, Feeder, Mask, Mat3, C64};
use crate::hermlin::{eig_ratio, HermError};

/// How the blocks `[[W_jj, X_j], [X_j^H, rho_j]] >= 0` enter a relaxation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coupling {
    /// Drop the blocks (and `rho`) when `lambda == 0`.
    ///
    /// Without the penalty `rho` appears nowhere else, so once `W_jj` is
    /// positive definite every `X_j` is admissible with
    /// `rho_j = X_j^H W_jj^-1 X_j`. The optimal value is then that of the
    /// program without the blocks, but it is approached only as `rho` grows
    /// without bound and interior-point iterations stall on the way.
    #[default]
    Closure,
    /// Keep the blocks for every `lambda`.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelaxOptions {
    pub w_form: WForm,
    pub coupling: Coupling,
}

impl RelaxOptions {
    pub fn coupled(&self, lambda: f64) -> bool {
        self.coupling == Coupling::Literal || lambda > 0.0
    }
}

/// `X_j` (phases x pairs) and `rho_j` (pairs x pairs) at buses with delta devices.
#[derive(Clone, Debug)]
pub struct DeltaVars {
    pub x: Vec<Option<CMatVar>>,
    pub rho: Vec<Option<HermVar>>,
    pub coupled: bool,
}

impl DeltaVars {
    /// Declares the variables and the delta definition `s_delta = diag(Gamma X)`.
    /// Without coupling, `rho` is absent and `X` keeps only the entries that
    /// `Gamma` reaches.
    pub fn build(prog: &mut ConicProgram, feeder: &Feeder, inj: &Injections, coupled: bool) -> Self {
        let g = gamma();
        let n = feeder.n_buses();
        let mut x = Vec::with_capacity(n);
        let mut rho = Vec::with_capacity(n);
        for j in 0..n {
            let pairs = feeder.delta_pairs(j);
            if pairs.is_empty() {
                x.push(None);
                rho.push(None);
                continue;
            }
            let id = &feeder.buses[j].id;
            let label = format!("X_{id}");
            let xv = if coupled {
                CMatVar::new(prog, &label, feeder.phases(j), pairs)
            } else {
                CMatVar::new_where(prog, &label, feeder.phases(j), pairs, |phi, k| g[(k, phi)] != C64::new(0.0, 0.0))
            };
            for k in pairs.slots() {
                let mut e = inj.delta_expr(j, k);
                for phi in feeder.phases(j).slots() {
                    e -= &xv.entry(phi, k).times(g[(k, phi)]);
                }
                prog.add_ceq(e);
            }
            x.push(Some(xv));
            rho.push(coupled.then(|| HermVar::new(prog, &format!("rho_{id}"), pairs)));
        }
        DeltaVars { x, rho, coupled }
    }

    /// `diag(X_j Gamma)` at phase `phi`.
    pub fn diag_x_gamma(&self, j: usize, phi: usize) -> CExpr {
        let g = gamma();
        let mut acc = CExpr::zero();
        if let Some(xv) = &self.x[j] {
            for k in xv.cols.slots() {
                acc += &xv.entry(phi, k).times(g[(k, phi)]);
            }
        }
        acc
    }

    /// `[[top, X_j], [X_j^H, rho_j]] >= 0` with `top` on the bus phases.
    pub fn add_coupling(&self, prog: &mut ConicProgram, feeder: &Feeder, j: usize, top: impl Fn(usize, usize) -> CExpr) {
        let (Some(xv), Some(rv)) = (&self.x[j], &self.rho[j]) else { return };
        let rows = xv.rows.slots();
        let cols = xv.cols.slots();
        let nr = rows.len();
        let grid = hermitian_grid(nr + cols.len(), |r, c| match (r < nr, c < nr) {
            (true, true) => top(rows[r], rows[c]),
            (true, false) => xv.entry(rows[r], cols[c - nr]),
            _ => rv.entry(cols[r - nr], cols[c - nr]),
        });
        prog.add_psd_hermitian(format!("M_{}", feeder.buses[j].id), &grid);
    }

    /// `sum_j tr(rho_j)`.
    pub fn trace_rho(&self) -> LinExpr {
        let mut acc = LinExpr::zero();
        for rv in self.rho.iter().flatten() {
            for k in rv.mask.slots() {
                acc += &rv.entry(k, k).re;
            }
        }
        acc
    }

    pub fn values(&self, x: &[f64]) -> (Vec<Mat3>, Vec<Mat3>) {
        let xs = self.x.iter().map(|v| v.as_ref().map(|v| v.value(x)).unwrap_or_else(Mat3::zeros)).collect();
        let rs = self.rho.iter().map(|v| v.as_ref().map(|v| v.value(x)).unwrap_or_else(Mat3::zeros)).collect();
        (xs, rs)
    }
}

/// Objective `f(s, s_delta) + lambda * sum tr(rho)` with `f` in kW and
/// `rho` in per unit, written in per unit as `f + lambda / base * sum tr(rho)`.
pub fn set_objective(
    prog: &mut ConicProgram,
    feeder: &Feeder,
    weights: &CostWeights,
    inj: &Injections,
    delta: &DeltaVars,
    lambda: f64,
) -> Result<(), CostError> {
    let f = epigraph_constraints(prog, feeder, weights, &inj.cost_view())?;
    prog.objective = f + delta.trace_rho().scaled(lambda / feeder.power_base_kva);
    Ok(())
}

/// Submatrix of a 3x3 block on the given row and column slots.
pub fn sub_block(m: &Mat3, rows: Mask, cols: Mask) -> DMatrix<C64> {
    let r = rows.slots();
    let c = cols.slots();
    DMatrix::from_fn(r.len(), c.len(), |a, b| m[(r[a], c[b])])
}

/// `[[a, b], [b^H, c]]` from 3x3 blocks restricted to masks.
pub fn two_by_two(a: &Mat3, am: Mask, b: &Mat3, c: &Mat3, cm: Mask) -> DMatrix<C64> {
    let (na, nc) = (am.len(), cm.len());
    let mut m = DMatrix::zeros(na + nc, na + nc);
    m.view_mut((0, 0), (na, na)).copy_from(&sub_block(a, am, am));
    let bb = sub_block(b, am, cm);
    m.view_mut((0, na), (na, nc)).copy_from(&bb);
    m.view_mut((na, 0), (nc, na)).copy_from(&bb.adjoint());
    m.view_mut((na, na), (nc, nc)).copy_from(&sub_block(c, cm, cm));
    m
}

/// Eigenvalue ratio of a masked 3x3 block; 0 for empty masks.
pub fn block_ratio(m: &Mat3, mask: Mask) -> Result<f64, HermError> {
    if mask.is_empty() {
        return Ok(0.0);
    }
    eig_ratio(&sub_block(m, mask, mask))
}

/// Per-bus ratio of `[[top_j, X_j], [X_j^H, rho_j]]`; 0 where no delta device sits.
pub fn coupling_ratios(feeder: &Feeder, top: &[Mat3], x: &[Mat3], rho: &[Mat3]) -> Result<Vec<f64>, HermError> {
    (0..feeder.n_buses())
        .map(|j| {
            let pairs = feeder.delta_pairs(j);
            if pairs.is_empty() {
                return Ok(0.0);
            }
            let ph = feeder.phases(j);
            let (p, d) = (ph.slots(), pairs.slots());
            let mut m = DMatrix::zeros(p.len() + d.len(), p.len() + d.len());
            for (a, &r) in p.iter().enumerate() {
                for (b, &c) in p.iter().enumerate() {
                    m[(a, b)] = top[j][(r, c)];
                }
                for (b, &c) in d.iter().enumerate() {
                    m[(a, p.len() + b)] = x[j][(r, c)];
                    m[(p.len() + b, a)] = x[j][(r, c)].conj();
                }
            }
            for (a, &r) in d.iter().enumerate() {
                for (b, &c) in d.iter().enumerate() {
                    m[(p.len() + a, p.len() + b)] = rho[j][(r, c)];
                }
            }
            eig_ratio(&m)
        })
        .collect()
}

/// Largest entry modulus of a list of per-phase residuals.
pub fn max_abs(rows: &[[C64; 3]]) -> f64 {
    rows.iter().flat_map(|r| r.iter()).map(|c| c.norm()).fold(0.0, f64::max)
}
