//! Branch-flow-model relaxation over squared voltages `v_j`, sending-end
//! flows `S_jk` and squared currents `l_jk`.
//!
//! Lines are oriented away from the substation. Flow blocks live on the line
//! phases; on lines leaving the substation `S = v_ref i^H` as in the BIM.

use serde::{Deserialize, Serialize};

use crate::bim::RelaxError;
use crate::blocks::{diag_mul_adj, hermitian_grid, CMatVar, CVecVar, EdgeVar, HermVar, Injections, OuterVar};
use crate::conic::{CExpr, ConicProgram};
use crate::cost::CostWeights;
use crate::feeder::{gamma, Feeder, Mat3, Vec3, C64};
use crate::hermlin::HermError;
use crate::relax::{block_ratio, coupling_ratios, max_abs, set_objective, two_by_two, DeltaVars, RelaxOptions};

#[derive(Clone, Debug)]
pub struct BfmProgram {
    pub prog: ConicProgram,
    pub lambda: f64,
    inj: Injections,
    v: Vec<HermVar>,
    flow: Vec<EdgeVar>,
    l: Vec<HermVar>,
    delta: DeltaVars,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BfmSolution {
    pub s: Vec<Vec3>,
    pub s_delta: Vec<Vec3>,
    /// `v_j` per bus.
    pub v: Vec<Mat3>,
    /// `S_jk` per line.
    pub flow: Vec<Mat3>,
    /// `l_jk` per line.
    pub l: Vec<Mat3>,
    pub x: Vec<Mat3>,
    /// Zero where the coupling blocks were left out.
    pub rho: Vec<Mat3>,
    /// Whether `[[v_j, X_j], [X_j^H, rho_j]] >= 0` was part of the program.
    pub coupled: bool,
}

/// `(S z^H + z S^H)[r, c]` and `(z l z^H)[r, c]` for symbolic `S`, `l`.
fn drop_terms(s: &EdgeVar, l: &HermVar, z: &Mat3, r: usize, c: usize) -> CExpr {
    let mut acc = CExpr::zero();
    for p in 0..3 {
        acc += &s.entry(r, p).times(z[(c, p)].conj());
        acc += &s.entry(c, p).conj().times(z[(r, p)]);
        for q in 0..3 {
            let k = z[(r, p)] * z[(c, q)].conj();
            if k != C64::new(0.0, 0.0) {
                acc -= &l.entry(p, q).times(k);
            }
        }
    }
    acc
}

pub fn build_bfm_relaxation(feeder: &Feeder, weights: &CostWeights, lambda: f64) -> Result<BfmProgram, RelaxError> {
    build_bfm_relaxation_with(feeder, weights, lambda, RelaxOptions::default())
}

/// The `w_form` field of `opts` does not apply here.
pub fn build_bfm_relaxation_with(
    feeder: &Feeder,
    weights: &CostWeights,
    lambda: f64,
    opts: RelaxOptions,
) -> Result<BfmProgram, RelaxError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(RelaxError::Lambda(lambda));
    }
    let n = feeder.n_buses();
    let mut prog = ConicProgram::new();
    let inj = Injections::build(&mut prog, feeder);
    let v00 = Mat3::from_fn(|r, c| feeder.v_ref[r] * feeder.v_ref[c].conj());
    let mut v = vec![HermVar::fixed(v00, feeder.phases(0))];
    for j in 1..n {
        v.push(HermVar::new(&mut prog, &format!("v_{}", feeder.buses[j].id), feeder.phases(j)));
    }
    let mut flow = Vec::with_capacity(feeder.lines.len());
    let mut l = Vec::with_capacity(feeder.lines.len());
    for (idx, line) in feeder.lines.iter().enumerate() {
        let (j, k) = (line.from, line.to);
        let ph = line.phases;
        let p = ph.slots();
        let tag = format!("{}_{}", feeder.buses[j].id, feeder.buses[k].id);
        let lv = HermVar::new(&mut prog, &format!("l_{tag}"), ph);
        let sv = if j == 0 {
            let i = CVecVar::new(&mut prog, &format!("i_{tag}"), ph);
            let grid = hermitian_grid(1 + p.len(), |r, c| match (r, c) {
                (0, 0) => CExpr::constant(C64::new(1.0, 0.0)),
                (0, c) => i.entry(p[c - 1]).conj(),
                (r, c) => lv.entry(p[r - 1], p[c - 1]),
            });
            prog.add_psd_hermitian(format!("vSl_{idx}"), &grid);
            let u = Vec3::from_fn(|r, _| if ph.contains(r) { feeder.v_ref[r] } else { C64::new(0.0, 0.0) });
            EdgeVar::Outer(OuterVar { u, y: i })
        } else {
            let m = CMatVar::new(&mut prog, &format!("S_{tag}"), ph, ph);
            let np = p.len();
            let grid = hermitian_grid(2 * np, |r, c| match (r < np, c < np) {
                (true, true) => v[j].entry(p[r], p[c]),
                (true, false) => m.entry(p[r], p[c - np]),
                _ => lv.entry(p[r - np], p[c - np]),
            });
            prog.add_psd_hermitian(format!("vSl_{idx}"), &grid);
            EdgeVar::Free(m)
        };
        for (a, &r) in p.iter().enumerate() {
            for &c in &p[a..] {
                let e = v[k].entry(r, c) - v[j].entry(r, c) + drop_terms(&sv, &lv, &line.z, r, c);
                if r == c {
                    prog.add_eq(e.re);
                } else {
                    prog.add_ceq(e);
                }
            }
        }
        flow.push(sv);
        l.push(lv);
    }
    let delta = DeltaVars::build(&mut prog, feeder, &inj, opts.coupled(lambda));

    for j in 0..n {
        let ph = feeder.phases(j);
        if j > 0 {
            for phi in ph.slots() {
                let d = v[j].entry(phi, phi).re;
                prog.add_range(d, feeder.v_min[j][phi].powi(2), feeder.v_max[j][phi].powi(2));
            }
        }
        for phi in ph.slots() {
            let mut e = CExpr::zero();
            for &c in &feeder.children[j] {
                e += &flow[c].entry(phi, phi);
            }
            if j > 0 {
                let pl = j - 1;
                e -= &flow[pl].entry(phi, phi);
                let z = &feeder.lines[pl].z;
                for psi in 0..3 {
                    if z[(phi, psi)] != C64::new(0.0, 0.0) {
                        e += &l[pl].entry(psi, phi).times(z[(phi, psi)]);
                    }
                }
            }
            e += &diag_mul_adj(|a, b| v[j].entry(a, b), &feeder.shunt[j], phi);
            e += &delta.diag_x_gamma(j, phi);
            e -= &inj.wye_expr(j, phi);
            prog.add_ceq(e);
        }
        delta.add_coupling(&mut prog, feeder, j, |r, c| v[j].entry(r, c));
    }
    set_objective(&mut prog, feeder, weights, &inj, &delta, lambda)?;
    Ok(BfmProgram { prog, lambda, inj, v, flow, l, delta })
}

impl BfmProgram {
    pub fn extract(&self, feeder: &Feeder, x: &[f64]) -> BfmSolution {
        let (s, s_delta) = self.inj.values(x);
        let (xs, rho) = self.delta.values(x);
        let masked = |m: Mat3, ph: crate::feeder::Mask| {
            Mat3::from_fn(|r, c| if ph.contains(r) && ph.contains(c) { m[(r, c)] } else { C64::new(0.0, 0.0) })
        };
        BfmSolution {
            s,
            s_delta,
            v: self.v.iter().enumerate().map(|(j, h)| masked(h.value(x), feeder.phases(j))).collect(),
            flow: self.flow.iter().zip(&feeder.lines).map(|(f, ln)| masked(f.value(x), ln.phases)).collect(),
            l: self.l.iter().map(|h| h.value(x)).collect(),
            x: xs,
            rho,
            coupled: self.delta.coupled,
        }
    }
}

/// Residuals of the voltage drop (pu squared), flow balance and delta
/// definition (kVA, real part kW).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BfmResiduals {
    pub drop: Vec<f64>,
    pub balance: Vec<[C64; 3]>,
    pub delta: Vec<[C64; 3]>,
    pub max_drop_pu2: f64,
    pub max_kw: f64,
}

pub fn bfm_residuals(sol: &BfmSolution, feeder: &Feeder) -> BfmResiduals {
    let n = feeder.n_buses();
    let g = gamma();
    let base = feeder.power_base_kva;
    let mut drop = Vec::with_capacity(feeder.lines.len());
    for (idx, line) in feeder.lines.iter().enumerate() {
        let (s, l, z) = (&sol.flow[idx], &sol.l[idx], &line.z);
        let rhs = sol.v[line.from] - (s * z.adjoint() + z * s.adjoint()) + z * l * z.adjoint();
        let mut worst: f64 = 0.0;
        for r in line.phases.slots() {
            for c in line.phases.slots() {
                worst = worst.max((sol.v[line.to][(r, c)] - rhs[(r, c)]).norm());
            }
        }
        drop.push(worst);
    }
    let mut balance = vec![[C64::new(0.0, 0.0); 3]; n];
    let mut delta = vec![[C64::new(0.0, 0.0); 3]; n];
    for j in 0..n {
        let mut lhs = Mat3::zeros();
        for &c in &feeder.children[j] {
            lhs += sol.flow[c];
        }
        if j > 0 {
            lhs -= sol.flow[j - 1] - feeder.lines[j - 1].z * sol.l[j - 1];
        }
        let rhs = -(sol.v[j] * feeder.shunt[j].adjoint() + sol.x[j] * g);
        for phi in feeder.phases(j).slots() {
            balance[j][phi] = (lhs[(phi, phi)] - rhs[(phi, phi)] - sol.s[j][phi]) * base;
        }
        let gx = g * sol.x[j];
        for k in feeder.delta_pairs(j).slots() {
            delta[j][k] = (sol.s_delta[j][k] - gx[(k, k)]) * base;
        }
    }
    let max_drop_pu2 = drop.iter().copied().fold(0.0, f64::max);
    let max_kw = max_abs(&balance).max(max_abs(&delta));
    BfmResiduals { drop, balance, delta, max_drop_pu2, max_kw }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BfmRatios {
    /// Largest `v_j` eigenvalue ratio.
    pub v_ratio: f64,
    /// `[[v_j, S_jk], [S_jk^H, l_jk]]` ratio per line.
    pub line_ratios: Vec<f64>,
    /// `[[v_j, X_j], [X_j^H, rho_j]]` ratio per bus; `None` when the blocks
    /// were not part of the program.
    pub m_ratios: Option<Vec<f64>>,
}

impl BfmRatios {
    pub fn line_ratio(&self) -> f64 {
        self.line_ratios.iter().copied().fold(0.0, f64::max)
    }

    pub fn m_ratio(&self) -> Option<f64> {
        self.m_ratios.as_ref().map(|m| m.iter().copied().fold(0.0, f64::max))
    }
}

impl BfmSolution {
    /// Rank-1 point from bus voltages and delta currents; line currents are
    /// `y_jk (V_j - V_k)`.
    pub fn from_voltages(feeder: &Feeder, v: &[Vec3], i_delta: &[Vec3], s: &[Vec3], s_delta: &[Vec3]) -> Self {
        let outer = |a: &Vec3, b: &Vec3| a * b.adjoint();
        let mut flow = Vec::with_capacity(feeder.lines.len());
        let mut l = Vec::with_capacity(feeder.lines.len());
        for line in &feeder.lines {
            let i = line.y * (v[line.from] - v[line.to]);
            let vj = Vec3::from_fn(|r, _| if line.phases.contains(r) { v[line.from][r] } else { C64::new(0.0, 0.0) });
            flow.push(outer(&vj, &i));
            l.push(outer(&i, &i));
        }
        BfmSolution {
            s: s.to_vec(),
            s_delta: s_delta.to_vec(),
            v: v.iter().map(|vj| outer(vj, vj)).collect(),
            flow,
            l,
            x: v.iter().zip(i_delta).map(|(vj, ij)| outer(vj, ij)).collect(),
            rho: i_delta.iter().map(|ij| outer(ij, ij)).collect(),
            coupled: true,
        }
    }

    pub fn ratios(&self, feeder: &Feeder) -> Result<BfmRatios, HermError> {
        let mut v_ratio: f64 = 0.0;
        for j in 0..feeder.n_buses() {
            v_ratio = v_ratio.max(block_ratio(&self.v[j], feeder.phases(j))?);
        }
        let line_ratios = feeder
            .lines
            .iter()
            .enumerate()
            .map(|(idx, line)| {
                let m = two_by_two(&self.v[line.from], line.phases, &self.flow[idx], &self.l[idx], line.phases);
                crate::hermlin::eig_ratio(&m)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let m_ratios = if self.coupled { Some(coupling_ratios(feeder, &self.v, &self.x, &self.rho)?) } else { None };
        Ok(BfmRatios { v_ratio, line_ratios, m_ratios })
    }

    pub fn trace_rho(&self) -> f64 {
        self.rho.iter().map(|r| r.trace().re).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bim::build_bim_relaxation;
    use crate::conic::{ClarabelBackend, ConicBackend, SolveOptions};
    use crate::feeder::bundled;

    fn solve(f: &Feeder, lambda: f64) -> (BfmSolution, f64) {
        let w = CostWeights::for_feeder(f);
        let p = build_bfm_relaxation(f, &w, lambda).unwrap();
        let rep = ClarabelBackend.solve(&p.prog, &SolveOptions::default()).unwrap().require_optimal().unwrap();
        (p.extract(f, &rep.x), rep.primal_objective)
    }

    #[test]
    fn single_bus_has_no_lines() {
        let f = bundled("single_bus").unwrap();
        let (sol, _) = solve(&f, 0.0);
        assert!(sol.flow.is_empty() && sol.l.is_empty());
        assert!((sol.v[0] - f.v_ref * f.v_ref.adjoint()).norm() < 1e-12);
    }

    #[test]
    fn solver_point_is_feasible() {
        for name in ["two_bus_delta", "three_bus_delta", "no_delta"] {
            let f = bundled(name).unwrap();
            let (sol, _) = solve(&f, 0.0);
            let res = bfm_residuals(&sol, &f);
            assert!(res.max_kw < 1e-4, "{name}: {}", res.max_kw);
            assert!(res.max_drop_pu2 < 1e-7, "{name}: {}", res.max_drop_pu2);
            assert!(sol.ratios(&f).unwrap().line_ratio() < 1e-5);
        }
    }

    #[test]
    fn matches_bim_optimum_on_small_feeders() {
        for name in ["two_bus_delta", "three_bus_delta", "no_delta"] {
            let f = bundled(name).unwrap();
            for lambda in [0.0, 10.0] {
                let (_, b) = solve(&f, lambda);
                let w = CostWeights::for_feeder(&f);
                let p = build_bim_relaxation(&f, &w, lambda).unwrap();
                let a = ClarabelBackend.solve(&p.prog, &SolveOptions::default()).unwrap().primal_objective;
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3), "{name} {lambda}: {a} vs {b}");
            }
        }
    }
}
