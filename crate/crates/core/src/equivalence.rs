//! Maps between bus-injection and branch-flow points, PSD completion of `W`
//! on a tree, and the cross-model equivalence check.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bfm::{bfm_residuals, build_bfm_relaxation, BfmSolution};
use crate::bim::{bim_residuals, build_bim_relaxation, BimSolution, RelaxError};
use crate::conic::{ConicBackend, ConicError, SolveOptions};
use crate::cost::{evaluate_cost, CostWeights};
use crate::feeder::{Feeder, Mask, Mat3, C64};
use crate::hermlin::{eig_ratio, hermitian_eig, pinv_hermitian};

/// Eigenvalues below this fraction of a separator block's largest one are
/// dropped from its pseudo-inverse.
pub const COMPLETION_RTOL: f64 = 1e-8;

fn mask_block(m: &Mat3, rows: Mask, cols: Mask) -> Mat3 {
    Mat3::from_fn(|r, c| if rows.contains(r) && cols.contains(c) { m[(r, c)] } else { C64::new(0.0, 0.0) })
}

/// Completes `W` (3N x 3N, slot `3 j + phase`) from its diagonal blocks and,
/// per line, the rows `rows[l]` of the upstream-downstream block.
///
/// Buses are visited in breadth-first order; every entry between the new bus
/// `k` and earlier buses is filled through the separator `rows[l]` at the
/// parent `j`: `W_uk = W_{u,R} W_{R,R}^+ W_{R,k}`. On rank-1 data this
/// reproduces `V V^H`.
pub fn complete_tree(feeder: &Feeder, diag: &[Mat3], edge: &[Mat3], rows: &[Mask]) -> Result<DMatrix<C64>, RelaxError> {
    let n = feeder.n_buses();
    let mut w = DMatrix::zeros(3 * n, 3 * n);
    let mut placed: Vec<usize> = Vec::new();
    let put = |w: &mut DMatrix<C64>, p: usize, q: usize, v: C64| {
        w[(p, q)] = v;
        w[(q, p)] = v.conj();
    };
    for j in 0..n {
        for r in feeder.phases(j).slots() {
            for c in feeder.phases(j).slots() {
                w[(3 * j + r, 3 * j + c)] = diag[j][(r, c)];
            }
        }
    }
    placed.extend(feeder.phases(0).slots());
    for k in 1..n {
        let l = k - 1;
        let j = feeder.lines[l].from;
        let sep = rows[l];
        if !sep.is_subset(feeder.phases(j)) {
            return Err(RelaxError::Completion(format!("separator of line {l} leaves the upstream bus")));
        }
        let pk = feeder.phases(k).slots();
        for r in sep.slots() {
            for &c in &pk {
                put(&mut w, 3 * j + r, 3 * k + c, edge[l][(r, c)]);
            }
        }
        let s = sep.slots();
        let wss = DMatrix::from_fn(s.len(), s.len(), |a, b| diag[j][(s[a], s[b])]);
        let pinv = pinv_hermitian(&wss, COMPLETION_RTOL)?;
        let wsk = DMatrix::from_fn(s.len(), pk.len(), |a, b| edge[l][(s[a], pk[b])]);
        let right = &pinv * &wsk;
        for &p in &placed {
            if p / 3 == j && sep.contains(p % 3) {
                continue;
            }
            let wps = DMatrix::from_fn(1, s.len(), |_, b| w[(p, 3 * j + s[b])]);
            let row = &wps * &right;
            for (b, &c) in pk.iter().enumerate() {
                put(&mut w, p, 3 * k + c, row[(0, b)]);
            }
        }
        placed.extend(pk.iter().map(|&c| 3 * k + c));
    }
    Ok(w)
}

/// BIM to BFM: `v_j = W_jj`, `S_jk = (W_jj - W_jk) y_jk^H` and
/// `l_jk = y_jk (W_jj + W_kk - W_jk - W_kj) y_jk^H` on the line phases.
pub fn g1_bim_to_bfm(u: &BimSolution, feeder: &Feeder) -> BfmSolution {
    let mut flow = Vec::with_capacity(feeder.lines.len());
    let mut l = Vec::with_capacity(feeder.lines.len());
    for (idx, line) in feeder.lines.iter().enumerate() {
        let (wjj, wkk, wjk) = (&u.w_diag[line.from], &u.w_diag[line.to], &u.w_edge[idx]);
        let y = &line.y;
        flow.push(mask_block(&((wjj - wjk) * y.adjoint()), line.phases, line.phases));
        let mid = wjj + wkk - wjk - wjk.adjoint();
        l.push(mask_block(&(y * mid * y.adjoint()), line.phases, line.phases));
    }
    BfmSolution {
        s: u.s.clone(),
        s_delta: u.s_delta.clone(),
        v: u.w_diag.clone(),
        flow,
        l,
        x: u.x.clone(),
        rho: u.rho.clone(),
        coupled: u.coupled,
    }
}

/// BFM to BIM: `W_jj = v_j`, `W_jk = v_j - S_jk z_jk^H` on the line phases,
/// and every other entry from [`complete_tree`].
pub fn g2_bfm_to_bim(u: &BfmSolution, feeder: &Feeder) -> Result<BimSolution, RelaxError> {
    let known: Vec<Mat3> = feeder
        .lines
        .iter()
        .enumerate()
        .map(|(idx, line)| mask_block(&(u.v[line.from] - u.flow[idx] * line.z.adjoint()), line.phases, line.phases))
        .collect();
    let rows: Vec<Mask> = feeder.lines.iter().map(|l| l.phases).collect();
    let full = complete_tree(feeder, &u.v, &known, &rows)?;
    let w_edge = feeder
        .lines
        .iter()
        .map(|line| Mat3::from_fn(|r, c| full[(3 * line.from + r, 3 * line.to + c)]))
        .collect();
    Ok(BimSolution {
        s: u.s.clone(),
        s_delta: u.s_delta.clone(),
        w_diag: u.v.clone(),
        w_edge,
        w_full: Some(full),
        x: u.x.clone(),
        rho: u.rho.clone(),
        coupled: u.coupled,
    })
}

/// Smallest eigenvalue relative to the largest magnitude.
fn rel_min_eig(m: &DMatrix<C64>) -> Result<f64, RelaxError> {
    let (vals, _) = hermitian_eig(m)?;
    let top = vals.first().copied().unwrap_or(0.0).abs().max(f64::MIN_POSITIVE);
    Ok(vals.last().copied().unwrap_or(0.0) / top)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub feeder: String,
    pub lambda: f64,
    pub bim_objective: f64,
    pub bfm_objective: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
    /// `|f(u) - f(g1(u))|` in per unit.
    pub cost_change_g1: f64,
    pub cost_change_g2: f64,
    pub bim_residual_kw: f64,
    pub g1_residual_kw: f64,
    pub g1_drop_pu2: f64,
    pub bfm_residual_kw: f64,
    pub bfm_drop_pu2: f64,
    pub g2_residual_kw: f64,
    /// Smallest eigenvalue of the completed `W` over its largest.
    pub g2_min_eig_rel: f64,
    pub bim_w_ratio: f64,
    pub g1_line_ratio: f64,
    pub bfm_line_ratio: f64,
    pub g2_w_ratio: f64,
}

impl EquivalenceReport {
    /// Largest residual of the BIM point and of its image, in per unit.
    pub fn g1_residuals_pu(&self, base_kva: f64) -> (f64, f64) {
        (self.bim_residual_kw / base_kva, (self.g1_residual_kw / base_kva).max(self.g1_drop_pu2))
    }

    /// Largest residual of the BFM point and of its image, in per unit.
    pub fn g2_residuals_pu(&self, base_kva: f64) -> (f64, f64) {
        ((self.bfm_residual_kw / base_kva).max(self.bfm_drop_pu2), self.g2_residual_kw / base_kva)
    }

    /// Relative gap within `gap_tol`, costs preserved, and each mapped point
    /// within ten times its source residual (plus `floor_pu` for rounding).
    pub fn holds(&self, base_kva: f64, gap_tol: f64, floor_pu: f64) -> bool {
        let (a, b) = self.g1_residuals_pu(base_kva);
        let (c, d) = self.g2_residuals_pu(base_kva);
        self.rel_gap <= gap_tol
            && self.cost_change_g1 == 0.0
            && self.cost_change_g2 == 0.0
            && b <= 10.0 * a + floor_pu
            && d <= 10.0 * c + floor_pu
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EquivalenceError {
    #[error(transparent)]
    Relax(#[from] RelaxError),
    #[error(transparent)]
    Solver(#[from] ConicError),
    #[error(transparent)]
    Cost(#[from] crate::cost::CostError),
    #[error(transparent)]
    Linalg(#[from] crate::hermlin::HermError),
}

/// Solves both relaxations with the same `lambda` and compares them through
/// the mappings.
pub fn check_equivalence(
    feeder: &Feeder,
    weights: &CostWeights,
    lambda: f64,
    backend: &dyn ConicBackend,
    opts: &SolveOptions,
) -> Result<EquivalenceReport, EquivalenceError> {
    let bp = build_bim_relaxation(feeder, weights, lambda)?;
    let br = backend.solve(&bp.prog, opts)?.require_optimal()?;
    let bim = bp.extract(feeder, &br.x);
    let fp = build_bfm_relaxation(feeder, weights, lambda)?;
    let fr = backend.solve(&fp.prog, opts)?.require_optimal()?;
    let bfm = fp.extract(feeder, &fr.x);

    let cost = |s: &[crate::feeder::Vec3], d: &[crate::feeder::Vec3]| evaluate_cost(feeder, s, d, weights).map(|c| c.total);
    let mapped1 = g1_bim_to_bfm(&bim, feeder);
    let mapped2 = g2_bfm_to_bim(&bfm, feeder)?;
    let c_bim = cost(&bim.s, &bim.s_delta)?;
    let c_bfm = cost(&bfm.s, &bfm.s_delta)?;
    let cost_change_g1 = (c_bim - cost(&mapped1.s, &mapped1.s_delta)?).abs();
    let cost_change_g2 = (c_bfm - cost(&mapped2.s, &mapped2.s_delta)?).abs();

    let r_bim = bim_residuals(&bim, feeder);
    let r_g1 = bfm_residuals(&mapped1, feeder);
    let r_bfm = bfm_residuals(&bfm, feeder);
    let r_g2 = bim_residuals(&mapped2, feeder);
    let full = mapped2.w_full.as_ref().expect("g2 output carries the completed matrix");
    let abs_gap = (br.primal_objective - fr.primal_objective).abs();
    let scale = br.primal_objective.abs().max(fr.primal_objective.abs()).max(f64::MIN_POSITIVE);
    Ok(EquivalenceReport {
        feeder: feeder.name.clone(),
        lambda,
        bim_objective: br.primal_objective,
        bfm_objective: fr.primal_objective,
        abs_gap,
        rel_gap: abs_gap / scale,
        cost_change_g1,
        cost_change_g2,
        bim_residual_kw: r_bim.max_kw,
        g1_residual_kw: r_g1.max_kw,
        g1_drop_pu2: r_g1.max_drop_pu2,
        bfm_residual_kw: r_bfm.max_kw,
        bfm_drop_pu2: r_bfm.max_drop_pu2,
        g2_residual_kw: r_g2.max_kw,
        g2_min_eig_rel: rel_min_eig(full)?,
        bim_w_ratio: bim.ratios(feeder)?.w_ratio,
        g1_line_ratio: mapped1.ratios(feeder)?.line_ratio(),
        bfm_line_ratio: bfm.ratios(feeder)?.line_ratio(),
        g2_w_ratio: eig_ratio(full)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::ClarabelBackend;
    use crate::feeder::{bundled, Vec3};
    use crate::oracle::newton_pf;

    /// Power flow at nominal injections: voltages, delta currents, wye and
    /// delta powers.
    fn flow(f: &Feeder) -> (Vec<Vec3>, Vec<Vec3>, Vec<Vec3>, Vec<Vec3>) {
        let pick = |regions: &[Option<crate::feeder::InjectionRegion>]| {
            regions.iter().map(|r| r.as_ref().map(|r| r.nominal()).unwrap_or_else(Vec3::zeros)).collect::<Vec<_>>()
        };
        let mut s = pick(&f.wye);
        s[0] = Vec3::zeros();
        let d = pick(&f.delta);
        let pf = newton_pf(f, &s, &d).unwrap();
        (pf.v, pf.i_delta, pf.s, d)
    }

    #[test]
    fn completion_of_a_rank_one_point_is_the_outer_product() {
        for name in ["three_bus_delta", "ieee13"] {
            let f = bundled(name).unwrap();
            let (v, i, s, d) = flow(&f);
            let bim = BimSolution::from_voltages(&f, &v, &i, &s, &d);
            let rows: Vec<Mask> = f.lines.iter().map(|l| l.phases).collect();
            let full = complete_tree(&f, &bim.w_diag, &bim.w_edge, &rows).unwrap();
            let n = f.n_buses();
            let flat = DMatrix::from_fn(3 * n, 1, |p, _| if f.phases(p / 3).contains(p % 3) { v[p / 3][p % 3] } else { C64::new(0.0, 0.0) });
            let err = (&full - &flat * flat.adjoint()).norm();
            assert!(err < 1e-12, "{name}: {err}");
        }
    }

    #[test]
    fn mappings_carry_a_power_flow_point_across() {
        for name in ["two_bus_delta", "three_bus_delta", "no_delta"] {
            let f = bundled(name).unwrap();
            let (v, i, s, d) = flow(&f);
            let bim = BimSolution::from_voltages(&f, &v, &i, &s, &d);
            let there = g1_bim_to_bfm(&bim, &f);
            let r = bfm_residuals(&there, &f);
            assert!(r.max_kw < 1e-8 && r.max_drop_pu2 < 1e-12, "{name}");
            let back = g2_bfm_to_bim(&there, &f).unwrap();
            assert!(bim_residuals(&back, &f).max_kw < 1e-8, "{name}");
            for (a, b) in back.w_edge.iter().zip(&bim.w_edge) {
                assert!((a - b).norm() < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn small_feeders_have_matching_optima() {
        for name in ["two_bus_delta", "three_bus_delta"] {
            let f = bundled(name).unwrap();
            let w = CostWeights::for_feeder(&f);
            for lambda in [0.0, 10.0] {
                let r = check_equivalence(&f, &w, lambda, &ClarabelBackend, &SolveOptions::default()).unwrap();
                assert!(r.rel_gap < 1e-6, "{name} {lambda}: {}", r.rel_gap);
                assert_eq!(r.cost_change_g1, 0.0);
                assert_eq!(r.cost_change_g2, 0.0);
                assert!(r.g2_min_eig_rel > -1e-8, "{name}: {}", r.g2_min_eig_rel);
            }
        }
    }
}
