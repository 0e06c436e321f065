//! Turning relaxation optima into bus voltages and delta currents: the
//! post-processing and penalized algorithms, rank verification and reports.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bfm::{bfm_residuals, build_bfm_relaxation_with, BfmSolution};
use crate::bim::{bim_residuals, build_bim_relaxation_with, BimSolution, RelaxError};
use crate::conic::{ConicBackend, ConicError, SolveOptions, SolveReport, SolveStatus};
use crate::cost::{evaluate_cost, CostError, CostWeights};
use crate::feeder::{gamma, Feeder, Mask, Mat3, Vec3, C64};
use crate::hermlin::{eig_ratio, lemma1_extract, pinv_hermitian, rank1_factor, HermError};
use crate::relax::{block_ratio, coupling_ratios, sub_block, RelaxOptions};

pub const DEFAULT_RANK_TOL: f64 = 1e-5;
/// `|Gamma V|` and `|s_delta|` components below this count as zero.
pub const DEGENERATE_TOL: f64 = 1e-9;
/// Largest entry of `V_k V_k^H - v_k` tolerated while walking the tree, pu^2.
pub const TRAVERSAL_TOL: f64 = 1e-4;
/// Largest bus-0 mismatch against `v_ref` that phase fixing accepts, pu.
pub const PHASE_FIX_TOL: f64 = 1e-4;
/// Relative eigenvalue cutoff when completing `rho` for reporting.
const PINV_RTOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Relax(#[from] RelaxError),
    #[error(transparent)]
    Solver(#[from] ConicError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Linalg(#[from] HermError),
    #[error("delta pair {pair} at bus `{bus}` carries power but its line-to-line voltage vanishes")]
    DeltaPhaseDegenerate { bus: String, pair: usize },
    #[error("tree walk disagrees with the relaxation at line {from}->{to} (mismatch {mismatch:.3e} pu^2)")]
    InconsistentTraversal { from: String, to: String, mismatch: f64 },
    #[error("bus-0 voltage differs from the reference by {0:.3e} pu after phase fixing")]
    PhaseMismatch(f64),
    #[error("{0}")]
    Lambda(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PostProcessed,
    Penalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Exact,
    Failed,
}

/// Bus voltages, delta currents and the injections they serve, with the
/// rank-1 device blocks rebuilt from them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveredSolution {
    pub v: Vec<Vec3>,
    pub i_delta: Vec<Vec3>,
    pub s: Vec<Vec3>,
    pub s_delta: Vec<Vec3>,
    /// `V_j I_delta_j^H`.
    pub x: Vec<Mat3>,
    /// `I_delta_j I_delta_j^H`.
    pub rho: Vec<Mat3>,
    pub provenance: Provenance,
}

impl RecoveredSolution {
    fn new(v: Vec<Vec3>, i_delta: Vec<Vec3>, s: Vec<Vec3>, s_delta: Vec<Vec3>, provenance: Provenance) -> Self {
        let x = v.iter().zip(&i_delta).map(|(a, b)| a * b.adjoint()).collect();
        let rho = i_delta.iter().map(|b| b * b.adjoint()).collect();
        RecoveredSolution { v, i_delta, s, s_delta, x, rho, provenance }
    }

    /// Eigenvalue ratios of `[[V V^H, X], [X^H, rho]]` rebuilt per bus.
    pub fn rebuilt_m_ratios(&self, feeder: &Feeder) -> Result<Vec<f64>, HermError> {
        let w: Vec<Mat3> = self.v.iter().map(|v| v * v.adjoint()).collect();
        coupling_ratios(feeder, &w, &self.x, &self.rho)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub feeder: String,
    pub model: String,
    pub algorithm: Provenance,
    pub lambda: f64,
    pub rank_tol: f64,
    /// BIM: eigenvalue ratio of the full `W`. BFM: largest ratio over the
    /// line blocks `[[v_j, S_jk], [S_jk^H, l_jk]]` and the bus blocks `v_j`.
    pub w_ratio: f64,
    /// Ratio of each bus block `W_jj` (or `v_j`).
    pub bus_ratios: Vec<f64>,
    /// Largest ratio of the delta coupling blocks. For uncoupled solves
    /// `rho` is taken as its minimum-trace completion.
    pub m_ratio: f64,
    pub infeasibility_kw: f64,
    pub cost_kw: f64,
    /// `cost_kw` plus the penalty, as solved.
    pub objective_kw: f64,
    pub trace_rho: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub solver_status: SolveStatus,
    pub solve_seconds: f64,
    pub status: Status,
}

impl RecoveryReport {
    pub fn is_exact(&self) -> bool {
        self.status == Status::Exact
    }

    pub fn row(&self) -> TableRow {
        TableRow {
            feeder: self.feeder.clone(),
            model: self.model.clone(),
            algorithm: self.algorithm,
            lambda: self.lambda,
            w_ratio: self.w_ratio,
            m_ratio: self.m_ratio,
            infeasibility_kw: self.infeasibility_kw,
            cost: self.cost_kw,
            status: self.status,
            seconds: self.solve_seconds,
        }
    }
}

/// Flat report row with the table column names; the field order is the CSV
/// column order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableRow {
    pub feeder: String,
    pub model: String,
    pub algorithm: Provenance,
    pub lambda: f64,
    #[serde(rename = "W-ratio")]
    pub w_ratio: f64,
    #[serde(rename = "M-ratios")]
    pub m_ratio: f64,
    #[serde(rename = "Infeas. (kW)")]
    pub infeasibility_kw: f64,
    #[serde(rename = "Cost")]
    pub cost: f64,
    pub status: Status,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Recovery {
    /// On a failed rank check this is the nearest rank-1 reading of the
    /// relaxation, kept for diagnostics.
    pub solution: RecoveredSolution,
    pub report: RecoveryReport,
}

#[derive(Clone, Debug)]
pub struct RecoveryConfig {
    pub rank_tol: f64,
    pub solve: SolveOptions,
    pub relax: RelaxOptions,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig { rank_tol: DEFAULT_RANK_TOL, solve: SolveOptions::default(), relax: RelaxOptions::default() }
    }
}

/// Solver point of either relaxation.
#[derive(Clone, Debug)]
pub enum Relaxed {
    Bim(BimSolution),
    Bfm(BfmSolution),
}

impl Relaxed {
    fn s(&self) -> (&[Vec3], &[Vec3]) {
        match self {
            Relaxed::Bim(u) => (&u.s, &u.s_delta),
            Relaxed::Bfm(u) => (&u.s, &u.s_delta),
        }
    }

    fn bus_blocks(&self) -> &[Mat3] {
        match self {
            Relaxed::Bim(u) => &u.w_diag,
            Relaxed::Bfm(u) => &u.v,
        }
    }

    fn x(&self) -> &[Mat3] {
        match self {
            Relaxed::Bim(u) => &u.x,
            Relaxed::Bfm(u) => &u.x,
        }
    }

    fn coupled(&self) -> bool {
        match self {
            Relaxed::Bim(u) => u.coupled,
            Relaxed::Bfm(u) => u.coupled,
        }
    }

    pub fn trace_rho(&self) -> f64 {
        match self {
            Relaxed::Bim(u) => u.trace_rho(),
            Relaxed::Bfm(u) => u.trace_rho(),
        }
    }

    fn bus_ratios(&self, feeder: &Feeder) -> Result<Vec<f64>, HermError> {
        let blocks = self.bus_blocks();
        (0..feeder.n_buses()).map(|j| block_ratio(&blocks[j], feeder.phases(j))).collect()
    }

    /// The rank figure the algorithms check, see [`RecoveryReport::w_ratio`].
    fn w_ratio(&self, feeder: &Feeder) -> Result<f64, RecoveryError> {
        match self {
            Relaxed::Bim(u) => Ok(eig_ratio(&u.full_w(feeder)?)?),
            Relaxed::Bfm(u) => {
                let r = u.ratios(feeder)?;
                Ok(r.line_ratio().max(r.v_ratio))
            }
        }
    }

    /// Coupling-block ratio. Uncoupled points get `rho = X^H W_jj^+ X`, the
    /// smallest `rho` that makes the block PSD.
    fn m_ratio(&self, feeder: &Feeder) -> Result<f64, RecoveryError> {
        let top = self.bus_blocks();
        let rho: Vec<Mat3> = if self.coupled() {
            match self {
                Relaxed::Bim(u) => u.rho.clone(),
                Relaxed::Bfm(u) => u.rho.clone(),
            }
        } else {
            (0..feeder.n_buses()).map(|j| min_trace_rho(feeder, j, &top[j], &self.x()[j])).collect::<Result<_, _>>()?
        };
        Ok(coupling_ratios(feeder, top, self.x(), &rho)?.into_iter().fold(0.0, f64::max))
    }

    /// Rank-1 reading of the bus voltages, phase-fixed to `v_ref`. With
    /// `strict`, the BFM tree walk rejects lines that disagree with `v_k`.
    fn voltages(&self, feeder: &Feeder, strict: bool) -> Result<Vec<Vec3>, RecoveryError> {
        let raw = match self {
            Relaxed::Bim(u) => {
                let w = u.full_w(feeder)?;
                let x = rank1_factor(&w, f64::INFINITY)?;
                (0..feeder.n_buses()).map(|j| Vec3::from_fn(|r, _| x[3 * j + r])).collect()
            }
            Relaxed::Bfm(u) => walk_tree(u, feeder, strict)?,
        };
        fix_phase(&raw, feeder.phases(0), &feeder.v_ref)
    }

    fn infeasibility_kw(&self, feeder: &Feeder, sol: &RecoveredSolution) -> f64 {
        match self {
            Relaxed::Bim(_) => bim_residuals(&BimSolution::from_voltages(feeder, &sol.v, &sol.i_delta, &sol.s, &sol.s_delta), feeder).max_kw,
            Relaxed::Bfm(_) => bfm_residuals(&BfmSolution::from_voltages(feeder, &sol.v, &sol.i_delta, &sol.s, &sol.s_delta), feeder).max_kw,
        }
    }
}

fn min_trace_rho(feeder: &Feeder, j: usize, top: &Mat3, x: &Mat3) -> Result<Mat3, HermError> {
    let (ph, pairs) = (feeder.phases(j), feeder.delta_pairs(j));
    if pairs.is_empty() {
        return Ok(Mat3::zeros());
    }
    let winv = pinv_hermitian(&sub_block(top, ph, ph), PINV_RTOL)?;
    let xs = sub_block(x, ph, pairs);
    let r = xs.adjoint() * winv * &xs;
    let d = pairs.slots();
    let mut out = Mat3::zeros();
    for (a, &p) in d.iter().enumerate() {
        for (b, &q) in d.iter().enumerate() {
            out[(p, q)] = r[(a, b)];
        }
    }
    Ok(out)
}

/// Walks the tree from bus 0: factor `v_0`, then per line read the current
/// `I_jk = S_jk^H V_j / |V_j|^2` off the line block and set
/// `V_k = V_j - z_jk I_jk`. With `strict`, the worst line where `V_k V_k^H`
/// misses `v_k` by more than [`TRAVERSAL_TOL`] is reported.
fn walk_tree(u: &BfmSolution, feeder: &Feeder, strict: bool) -> Result<Vec<Vec3>, RecoveryError> {
    let n = feeder.n_buses();
    let ph0 = feeder.phases(0).slots();
    let v0 = rank1_factor(&sub_block(&u.v[0], feeder.phases(0), feeder.phases(0)), f64::INFINITY)?;
    let mut v = vec![Vec3::zeros(); n];
    for (a, &r) in ph0.iter().enumerate() {
        v[0][r] = v0[a];
    }
    let mut worst: Option<(usize, f64)> = None;
    for (idx, line) in feeder.lines.iter().enumerate() {
        let lp = line.phases.slots();
        let vj = DVector::from_fn(lp.len(), |a, _| v[line.from][lp[a]]);
        let s = sub_block(&u.flow[idx], line.phases, line.phases);
        let i = lemma1_extract(&vj, &s)?;
        let zi = sub_block(&line.z, line.phases, line.phases) * &i;
        for (a, &r) in lp.iter().enumerate() {
            v[line.to][r] = v[line.from][r] - zi[a];
        }
        let k = line.to;
        let vk = &v[k];
        let mismatch = feeder
            .phases(k)
            .slots()
            .iter()
            .flat_map(|&r| feeder.phases(k).slots().into_iter().map(move |c| (r, c)))
            .map(|(r, c)| (vk[r] * vk[c].conj() - u.v[k][(r, c)]).norm())
            .fold(0.0, f64::max);
        if mismatch > TRAVERSAL_TOL && worst.is_none_or(|(_, m)| mismatch > m) {
            worst = Some((idx, mismatch));
        }
    }
    if let (true, Some((idx, mismatch))) = (strict, worst) {
        let line = &feeder.lines[idx];
        return Err(RecoveryError::InconsistentTraversal {
            from: feeder.buses[line.from].id.clone(),
            to: feeder.buses[line.to].id.clone(),
            mismatch,
        });
    }
    Ok(v)
}

/// Removes the global phase of a rank-1 factor: rotates so the first
/// substation phase equals `v_ref` exactly, checks the other substation
/// phases and then pins bus 0 to `v_ref`.
pub fn fix_phase(v: &[Vec3], phases0: Mask, v_ref: &Vec3) -> Result<Vec<Vec3>, RecoveryError> {
    let slots = phases0.slots();
    let Some(&a) = slots.first() else { return Ok(v.to_vec()) };
    if v[0][a].norm() == 0.0 {
        return Err(RecoveryError::PhaseMismatch(v_ref[a].norm()));
    }
    let rot = v_ref[a] / v[0][a];
    let turn = rot / rot.norm();
    let mut out: Vec<Vec3> = v.iter().map(|x| x * turn).collect();
    let mismatch = slots.iter().map(|&r| (out[0][r] - v_ref[r]).norm()).fold(0.0, f64::max);
    if mismatch > PHASE_FIX_TOL {
        return Err(RecoveryError::PhaseMismatch(mismatch));
    }
    for &r in &slots {
        out[0][r] = v_ref[r];
    }
    Ok(out)
}

/// `I_delta = conj(s_delta / (Gamma V))` per pair; pairs without power get 0.
pub fn currents_from_power(feeder: &Feeder, v: &[Vec3], s_delta: &[Vec3]) -> Result<Vec<Vec3>, RecoveryError> {
    let g = gamma();
    (0..feeder.n_buses())
        .map(|j| {
            let gv = g * v[j];
            let mut i = Vec3::zeros();
            for k in 0..3 {
                if s_delta[j][k].norm() < DEGENERATE_TOL {
                    continue;
                }
                if gv[k].norm() < DEGENERATE_TOL {
                    return Err(RecoveryError::DeltaPhaseDegenerate { bus: feeder.buses[j].id.clone(), pair: k });
                }
                i[k] = (s_delta[j][k] / gv[k]).conj();
            }
            Ok(i)
        })
        .collect()
}

/// `I_delta_j = X_j^H V_j / |V_j|^2` on the delta pairs.
fn currents_from_x(feeder: &Feeder, v: &[Vec3], x: &[Mat3]) -> Result<Vec<Vec3>, RecoveryError> {
    (0..feeder.n_buses())
        .map(|j| {
            let pairs = feeder.delta_pairs(j);
            let mut i = Vec3::zeros();
            if pairs.is_empty() {
                return Ok(i);
            }
            let ph = feeder.phases(j);
            let vj = DVector::from_fn(ph.len(), |a, _| v[j][ph.slots()[a]]);
            let y = lemma1_extract(&vj, &sub_block(&x[j], ph, pairs))?;
            for (b, &k) in pairs.slots().iter().enumerate() {
                i[k] = y[b];
            }
            Ok(i)
        })
        .collect()
}

/// Solves one relaxation.
pub trait RelaxationModel: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(
        &self,
        feeder: &Feeder,
        weights: &CostWeights,
        lambda: f64,
        backend: &dyn ConicBackend,
        config: &RecoveryConfig,
    ) -> Result<(Relaxed, SolveReport), RecoveryError>;
}

pub struct BimModel;
pub struct BfmModel;

impl RelaxationModel for BimModel {
    fn name(&self) -> &'static str {
        "bim"
    }

    fn solve(
        &self,
        feeder: &Feeder,
        weights: &CostWeights,
        lambda: f64,
        backend: &dyn ConicBackend,
        config: &RecoveryConfig,
    ) -> Result<(Relaxed, SolveReport), RecoveryError> {
        let p = build_bim_relaxation_with(feeder, weights, lambda, config.relax)?;
        let rep = backend.solve(&p.prog, &config.solve)?.require_optimal()?;
        Ok((Relaxed::Bim(p.extract(feeder, &rep.x)), rep))
    }
}

impl RelaxationModel for BfmModel {
    fn name(&self) -> &'static str {
        "bfm"
    }

    fn solve(
        &self,
        feeder: &Feeder,
        weights: &CostWeights,
        lambda: f64,
        backend: &dyn ConicBackend,
        config: &RecoveryConfig,
    ) -> Result<(Relaxed, SolveReport), RecoveryError> {
        let p = build_bfm_relaxation_with(feeder, weights, lambda, config.relax)?;
        let rep = backend.solve(&p.prog, &config.solve)?.require_optimal()?;
        Ok((Relaxed::Bfm(p.extract(feeder, &rep.x)), rep))
    }
}

/// Turns a relaxation into a recovered operating point.
pub trait RecoveryAlgorithm: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(
        &self,
        feeder: &Feeder,
        weights: &CostWeights,
        lambda: f64,
        model: &dyn RelaxationModel,
        backend: &dyn ConicBackend,
        config: &RecoveryConfig,
    ) -> Result<Recovery, RecoveryError>;
}

/// Solve without penalty, check the rank of `W` (or the line blocks), factor
/// the voltages and recompute the delta currents from `s_delta`.
pub struct PostProcess;

/// Solve with the penalty, check every rank figure, and read the voltages
/// and delta currents off the solver point.
pub struct Penalty;

fn report(
    feeder: &Feeder,
    weights: &CostWeights,
    lambda: f64,
    model: &dyn RelaxationModel,
    relaxed: &Relaxed,
    solve: &SolveReport,
    sol: &RecoveredSolution,
    config: &RecoveryConfig,
    checked: &[f64],
) -> Result<RecoveryReport, RecoveryError> {
    let (s, s_delta) = relaxed.s();
    let cost = evaluate_cost(feeder, s, s_delta, weights)?;
    let w_ratio = relaxed.w_ratio(feeder)?;
    let m_ratio = relaxed.m_ratio(feeder)?;
    let failed = checked.iter().any(|r| !(*r <= config.rank_tol));
    let band = |b: &[[f64; 3]], pick: fn(f64, f64) -> f64, init: f64| {
        (1..feeder.n_buses()).flat_map(|j| feeder.phases(j).slots().into_iter().map(move |r| (j, r))).map(|(j, r)| b[j][r]).fold(init, pick)
    };
    Ok(RecoveryReport {
        feeder: feeder.name.clone(),
        model: model.name().to_string(),
        algorithm: sol.provenance,
        lambda,
        rank_tol: config.rank_tol,
        w_ratio,
        bus_ratios: relaxed.bus_ratios(feeder)?,
        m_ratio,
        infeasibility_kw: relaxed.infeasibility_kw(feeder, sol),
        cost_kw: feeder.to_kw(cost.total),
        objective_kw: feeder.to_kw(solve.primal_objective),
        trace_rho: relaxed.trace_rho(),
        v_min: band(&feeder.v_min, f64::min, f64::INFINITY),
        v_max: band(&feeder.v_max, f64::max, f64::NEG_INFINITY),
        solver_status: solve.status,
        solve_seconds: solve.solve_seconds,
        status: if failed { Status::Failed } else { Status::Exact },
    })
}

impl RecoveryAlgorithm for PostProcess {
    fn name(&self) -> &'static str {
        "post"
    }

    fn run(
        &self,
        feeder: &Feeder,
        weights: &CostWeights,
        lambda: f64,
        model: &dyn RelaxationModel,
        backend: &dyn ConicBackend,
        config: &RecoveryConfig,
    ) -> Result<Recovery, RecoveryError> {
        if lambda != 0.0 {
            return Err(RecoveryError::Lambda(format!("post-processing solves without penalty, got lambda = {lambda}")));
        }
        let (relaxed, solve) = model.solve(feeder, weights, 0.0, backend, config)?;
        let w_ratio = relaxed.w_ratio(feeder)?;
        let exact = w_ratio <= config.rank_tol;
        let v = relaxed.voltages(feeder, exact)?;
        let (s, s_delta) = relaxed.s();
        let i_delta = if exact {
            currents_from_power(feeder, &v, s_delta)?
        } else {
            currents_from_power(feeder, &v, s_delta).or_else(|_| currents_from_x(feeder, &v, relaxed.x()))?
        };
        let sol = RecoveredSolution::new(v, i_delta, s.to_vec(), s_delta.to_vec(), Provenance::PostProcessed);
        let report = report(feeder, weights, 0.0, model, &relaxed, &solve, &sol, config, &[w_ratio])?;
        Ok(Recovery { solution: sol, report })
    }
}

impl RecoveryAlgorithm for Penalty {
    fn name(&self) -> &'static str {
        "penalty"
    }

    fn run(
        &self,
        feeder: &Feeder,
        weights: &CostWeights,
        lambda: f64,
        model: &dyn RelaxationModel,
        backend: &dyn ConicBackend,
        config: &RecoveryConfig,
    ) -> Result<Recovery, RecoveryError> {
        let (relaxed, solve) = model.solve(feeder, weights, lambda, backend, config)?;
        let w_ratio = relaxed.w_ratio(feeder)?;
        let m_ratio = relaxed.m_ratio(feeder)?;
        let exact = w_ratio.max(m_ratio) <= config.rank_tol;
        let v = relaxed.voltages(feeder, exact)?;
        let i_delta = currents_from_x(feeder, &v, relaxed.x())?;
        let (s, s_delta) = relaxed.s();
        let sol = RecoveredSolution::new(v, i_delta, s.to_vec(), s_delta.to_vec(), Provenance::Penalized);
        let report = report(feeder, weights, lambda, model, &relaxed, &solve, &sol, config, &[w_ratio, m_ratio])?;
        Ok(Recovery { solution: sol, report })
    }
}

/// Post-processing on the bus-injection relaxation.
pub fn algorithm1_bim(feeder: &Feeder, weights: &CostWeights, backend: &dyn ConicBackend, config: &RecoveryConfig) -> Result<Recovery, RecoveryError> {
    PostProcess.run(feeder, weights, 0.0, &BimModel, backend, config)
}

/// Post-processing on the branch-flow relaxation.
pub fn algorithm1_bfm(feeder: &Feeder, weights: &CostWeights, backend: &dyn ConicBackend, config: &RecoveryConfig) -> Result<Recovery, RecoveryError> {
    PostProcess.run(feeder, weights, 0.0, &BfmModel, backend, config)
}

/// Penalized relaxation. `lambda == 0` is accepted so that sweeps can start
/// from the unpenalized point; its report then usually fails the coupling check.
pub fn algorithm2(
    feeder: &Feeder,
    weights: &CostWeights,
    lambda: f64,
    model: &dyn RelaxationModel,
    backend: &dyn ConicBackend,
    config: &RecoveryConfig,
) -> Result<Recovery, RecoveryError> {
    Penalty.run(feeder, weights, lambda, model, backend, config)
}

/// Monotonicity of a penalty sweep, in the order the points were given.
/// Steps smaller than `tol_kw` count as ties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepTrend {
    pub cost_nondecreasing: bool,
    pub infeasibility_nonincreasing: bool,
}

impl SweepTrend {
    pub fn of(reports: &[RecoveryReport], tol_kw: f64) -> Self {
        let pairs = || reports.windows(2).map(|w| (&w[0], &w[1]));
        SweepTrend {
            cost_nondecreasing: pairs().all(|(a, b)| b.cost_kw >= a.cost_kw - tol_kw),
            infeasibility_nonincreasing: pairs().all(|(a, b)| b.infeasibility_kw <= a.infeasibility_kw + tol_kw),
        }
    }
}

/// The penalized algorithm at each `lambda`, solved in parallel; reports come
/// back in input order.
pub fn sweep(
    feeder: &Feeder,
    weights: &CostWeights,
    lambdas: &[f64],
    model: &dyn RelaxationModel,
    backend: &dyn ConicBackend,
    config: &RecoveryConfig,
) -> Result<Vec<RecoveryReport>, RecoveryError> {
    use rayon::prelude::*;
    lambdas.par_iter().map(|&l| Penalty.run(feeder, weights, l, model, backend, config).map(|r| r.report)).collect()
}

/// Full `W` from a recovered point, for comparisons against `V V^H`.
pub fn outer_w(v: &[Vec3]) -> DMatrix<C64> {
    let x = DVector::from_fn(3 * v.len(), |p, _| v[p / 3][p % 3]);
    &x * x.adjoint()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::ClarabelBackend;
    use crate::feeder::bundled;
    use std::f64::consts::PI;

    fn cfg() -> RecoveryConfig {
        RecoveryConfig::default()
    }

    #[test]
    fn fix_phase_removes_a_global_rotation() {
        let f = bundled("three_bus_delta").unwrap();
        let v: Vec<Vec3> = (0..3).map(|j| f.v_ref * C64::new(1.0 - 0.01 * j as f64, 0.0)).collect();
        let turned: Vec<Vec3> = v.iter().map(|x| x * C64::from_polar(1.0, PI / 7.0)).collect();
        let back = fix_phase(&turned, f.phases(0), &f.v_ref).unwrap();
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_eq!(back[0], f.v_ref);
    }

    #[test]
    fn fix_phase_rejects_a_wrong_magnitude() {
        let f = bundled("two_bus_delta").unwrap();
        let v = vec![f.v_ref * C64::new(1.01, 0.0), f.v_ref];
        assert!(matches!(fix_phase(&v, f.phases(0), &f.v_ref), Err(RecoveryError::PhaseMismatch(_))));
    }

    #[test]
    fn currents_reproduce_delta_power() {
        let f = bundled("two_bus_delta").unwrap();
        let v = vec![f.v_ref, f.v_ref * C64::new(0.98, -0.01)];
        let sd = vec![Vec3::zeros(), Vec3::new(C64::new(0.3, 0.15), C64::new(0.2, 0.1), C64::new(0.25, 0.1))];
        let i = currents_from_power(&f, &v, &sd).unwrap();
        let g = gamma();
        let back = g * v[1];
        for k in 0..3 {
            assert!((back[k] * i[1][k].conj() - sd[1][k]).norm() < 1e-12);
        }
    }

    #[test]
    fn degenerate_pair_with_power_is_an_error_and_without_is_zero() {
        let f = bundled("two_bus_delta").unwrap();
        let flat = Vec3::from_element(C64::new(1.0, 0.0));
        let v = vec![f.v_ref, flat];
        let sd = vec![Vec3::zeros(), Vec3::new(C64::new(0.1, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0))];
        assert!(matches!(currents_from_power(&f, &v, &sd), Err(RecoveryError::DeltaPhaseDegenerate { pair: 0, .. })));
        let i = currents_from_power(&f, &v, &vec![Vec3::zeros(); 2]).unwrap();
        assert_eq!(i[1], Vec3::zeros());
    }

    #[test]
    fn post_processing_is_exact_on_small_feeders() {
        for name in ["two_bus_delta", "three_bus_delta", "no_delta"] {
            let f = bundled(name).unwrap();
            let w = CostWeights::for_feeder(&f);
            for r in [algorithm1_bim(&f, &w, &ClarabelBackend, &cfg()).unwrap(), algorithm1_bfm(&f, &w, &ClarabelBackend, &cfg()).unwrap()] {
                assert!(r.report.is_exact(), "{name} {}: {}", r.report.model, r.report.w_ratio);
                if name == "no_delta" {
                    assert!(r.report.infeasibility_kw < 1e-2, "{}: {}", r.report.model, r.report.infeasibility_kw);
                }
                let g = gamma();
                for (x, sd) in r.solution.x.iter().zip(&r.solution.s_delta) {
                    assert!(((g * x).diagonal() - sd).norm() < 1e-9);
                }
                assert_eq!(r.solution.v[0], f.v_ref);
                for m in r.solution.rebuilt_m_ratios(&f).unwrap() {
                    assert!(m < 1e-14);
                }
            }
        }
    }

    #[test]
    fn both_models_recover_the_same_voltages() {
        let f = bundled("three_bus_delta").unwrap();
        let w = CostWeights::for_feeder(&f);
        let a = algorithm1_bim(&f, &w, &ClarabelBackend, &cfg()).unwrap();
        let b = algorithm1_bfm(&f, &w, &ClarabelBackend, &cfg()).unwrap();
        for (x, y) in a.solution.v.iter().zip(&b.solution.v) {
            assert!((x - y).norm() < 1e-4);
        }
    }

    #[test]
    fn post_processing_refuses_a_penalty() {
        let f = bundled("two_bus_delta").unwrap();
        let w = CostWeights::for_feeder(&f);
        let r = PostProcess.run(&f, &w, 1.0, &BimModel, &ClarabelBackend, &cfg());
        assert!(matches!(r, Err(RecoveryError::Lambda(_))));
    }

    #[test]
    fn penalty_without_delta_devices_changes_nothing() {
        let f = bundled("no_delta").unwrap();
        let w = CostWeights::for_feeder(&f);
        let a = algorithm2(&f, &w, 0.0, &BimModel, &ClarabelBackend, &cfg()).unwrap();
        let b = algorithm2(&f, &w, 10.0, &BimModel, &ClarabelBackend, &cfg()).unwrap();
        assert!((a.report.objective_kw - b.report.objective_kw).abs() < 1e-6);
        assert_eq!(b.report.trace_rho, 0.0);
    }

    #[test]
    fn penalty_is_exact_and_bounded_by_post_processing() {
        for name in ["two_bus_delta", "three_bus_delta"] {
            let f = bundled(name).unwrap();
            let w = CostWeights::for_feeder(&f);
            for model in [&BimModel as &dyn RelaxationModel, &BfmModel] {
                let lower = PostProcess.run(&f, &w, 0.0, model, &ClarabelBackend, &cfg()).unwrap();
                let pen = Penalty.run(&f, &w, 10.0, model, &ClarabelBackend, &cfg()).unwrap();
                assert!(pen.report.is_exact(), "{name} {}: {} {}", model.name(), pen.report.w_ratio, pen.report.m_ratio);
                assert!(lower.report.cost_kw <= pen.report.cost_kw + 1e-6);
                assert!(pen.report.infeasibility_kw < 1e-3, "{name}: {}", pen.report.infeasibility_kw);
            }
        }
    }

    #[test]
    fn uncoupled_point_reports_the_completed_block() {
        let f = bundled("two_bus_delta").unwrap();
        let w = CostWeights::for_feeder(&f);
        let r = Penalty.run(&f, &w, 0.0, &BimModel, &ClarabelBackend, &cfg()).unwrap();
        assert!(r.report.m_ratio.is_finite());
        assert_eq!(r.report.trace_rho, 0.0);
    }

    #[test]
    fn sweep_keeps_input_order_and_raises_cost() {
        let f = bundled("two_bus_delta").unwrap();
        let w = CostWeights::for_feeder(&f);
        let lambdas = [10.0, 0.0, 1.0];
        let reps = sweep(&f, &w, &lambdas, &BimModel, &ClarabelBackend, &cfg()).unwrap();
        assert_eq!(reps.iter().map(|r| r.lambda).collect::<Vec<_>>(), lambdas);
        let mut sorted = reps.clone();
        sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        let trend = SweepTrend::of(&sorted, 1e-5);
        assert!(trend.cost_nondecreasing && trend.infeasibility_nonincreasing, "{sorted:#?}");
        assert!(!SweepTrend::of(&[sorted[2].clone(), sorted[0].clone()], 0.0).cost_nondecreasing);
    }
}
