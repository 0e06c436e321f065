//! Radial three-phase feeder model and the JSON fixture loader.
//!
//! All quantities inside a [`Feeder`] are per unit on a per-phase power base.
//! Every bus carries full 3x3 blocks; phases that are not wired are masked out
//! and hard-zeroed by the relaxations. Delta slots are ordered `ab, bc, ca`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;
pub type Mat3 = Matrix3<C64>;
pub type Vec3 = Vector3<C64>;

pub const PHASE_NAMES: [&str; 3] = ["a", "b", "c"];
pub const PAIR_NAMES: [&str; 3] = ["ab", "bc", "ca"];

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("cannot read feeder file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed feeder JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown bus `{0}`")]
    UnknownBus(String),
    #[error("feeder is not radial: edge {from}-{to} closes a cycle")]
    Cycle { from: String, to: String },
    #[error("bus `{0}` is not connected to the substation")]
    Disconnected(String),
    #[error("delta device at bus `{bus}` uses pair {pair} but the bus lacks one of its phases")]
    DanglingDelta { bus: String, pair: &'static str },
    #[error("device at bus `{bus}` uses phase {phase} which the bus does not have")]
    MissingPhase { bus: String, phase: &'static str },
    #[error("line {from}-{to} carries phases the upstream bus does not have")]
    PhaseMismatch { from: String, to: String },
    #[error("line {from}-{to} has a singular impedance matrix")]
    SingularImpedance { from: String, to: String },
    #[error("line {from}-{to} needs exactly one of `z_ohm` and `z_pu`")]
    ImpedanceSpec { from: String, to: String },
    #[error("loads and capacitors at the substation bus are not supported")]
    DeviceAtSubstation,
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// Three-slot membership set, used for wired phases and for delta pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask(u8);

impl Mask {
    pub const EMPTY: Mask = Mask(0);
    pub const ALL: Mask = Mask(0b111);

    pub fn from_slots(slots: &[usize]) -> Mask {
        Mask(slots.iter().fold(0, |m, &i| m | (1 << i)))
    }

    /// Parses a phase string such as `"abc"` or `"ca"`.
    pub fn parse_phases(s: &str) -> Option<Mask> {
        let mut m = Mask::EMPTY;
        for ch in s.chars() {
            let i = "abc".find(ch.to_ascii_lowercase())?;
            m.insert(i);
        }
        (!m.is_empty()).then_some(m)
    }

    pub fn contains(self, slot: usize) -> bool {
        slot < 3 && self.0 & (1 << slot) != 0
    }

    pub fn insert(&mut self, slot: usize) {
        self.0 |= 1 << slot;
    }

    pub fn union(self, other: Mask) -> Mask {
        Mask(self.0 | other.0)
    }

    pub fn is_subset(self, other: Mask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn slots(self) -> Vec<usize> {
        (0..3).filter(|&i| self.contains(i)).collect()
    }

    pub fn label(self) -> String {
        self.slots().iter().map(|&i| PHASE_NAMES[i]).collect()
    }
}

/// The two phases joined by delta pair `k` (ab, bc, ca).
pub fn pair_phases(k: usize) -> (usize, usize) {
    (k, (k + 1) % 3)
}

/// Phase-to-pair incidence: row `k` is `e_k - e_{k+1}`.
pub fn gamma() -> Mat3 {
    let one = C64::new(1.0, 0.0);
    let mut g = Mat3::zeros();
    for k in 0..3 {
        let (i, j) = pair_phases(k);
        g[(k, i)] = one;
        g[(k, j)] = -one;
    }
    g
}

/// Phases a delta device touches given its active pairs.
pub fn delta_phase_cover(pairs: Mask) -> Mask {
    let mut m = Mask::EMPTY;
    for k in pairs.slots() {
        let (i, j) = pair_phases(k);
        m.insert(i);
        m.insert(j);
    }
    m
}

/// Balanced positive-sequence phasor of magnitude `mag`.
pub fn balanced(mag: f64) -> Vec3 {
    let a = 2.0 * std::f64::consts::PI / 3.0;
    Vec3::new(
        C64::new(mag, 0.0),
        C64::from_polar(mag, -a),
        C64::from_polar(mag, a),
    )
}

/// Box-shaped injection set of one wye or delta device group at a bus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionRegion {
    pub mask: Mask,
    pub p_min: [f64; 3],
    pub p_max: [f64; 3],
    pub q_min: [f64; 3],
    pub q_max: [f64; 3],
    /// Nominal profile; `None` keeps that component out of the deviation cost.
    pub p_nom: [Option<f64>; 3],
    pub q_nom: [Option<f64>; 3],
}

impl InjectionRegion {
    pub fn empty() -> Self {
        InjectionRegion {
            mask: Mask::EMPTY,
            p_min: [0.0; 3],
            p_max: [0.0; 3],
            q_min: [0.0; 3],
            q_max: [0.0; 3],
            p_nom: [None; 3],
            q_nom: [None; 3],
        }
    }

    /// A fixed injection with its nominal equal to the set point.
    pub fn fixed(s: [C64; 3]) -> Self {
        let mut r = InjectionRegion::empty();
        for i in 0..3 {
            if s[i] != C64::new(0.0, 0.0) {
                r.mask.insert(i);
                r.p_min[i] = s[i].re;
                r.p_max[i] = s[i].re;
                r.q_min[i] = s[i].im;
                r.q_max[i] = s[i].im;
                r.p_nom[i] = (s[i].re != 0.0).then_some(s[i].re);
                r.q_nom[i] = (s[i].im != 0.0).then_some(s[i].im);
            }
        }
        r
    }

    pub fn contains(&self, s: &Vec3, tol: f64) -> bool {
        (0..3).all(|i| {
            if !self.mask.contains(i) {
                return s[i].norm() <= tol;
            }
            s[i].re >= self.p_min[i] - tol
                && s[i].re <= self.p_max[i] + tol
                && s[i].im >= self.q_min[i] - tol
                && s[i].im <= self.q_max[i] + tol
        })
    }

    /// Number of real degrees of freedom (non-degenerate box sides).
    pub fn free_dims(&self) -> usize {
        self.mask
            .slots()
            .iter()
            .map(|&i| (self.p_max[i] > self.p_min[i]) as usize + (self.q_max[i] > self.q_min[i]) as usize)
            .sum()
    }

    pub fn nominal(&self) -> Vec3 {
        Vec3::from_fn(|i, _| C64::new(self.p_nom[i].unwrap_or(0.0), self.q_nom[i].unwrap_or(0.0)))
    }

    fn add_range(&mut self, slot: usize, p: (f64, f64), q: (f64, f64)) {
        self.mask.insert(slot);
        self.p_min[slot] += p.0;
        self.p_max[slot] += p.1;
        self.q_min[slot] += q.0;
        self.q_max[slot] += q.1;
    }

    fn add_nominal(&mut self, slot: usize, p: f64, q: f64) {
        if p != 0.0 {
            self.p_nom[slot] = Some(self.p_nom[slot].unwrap_or(0.0) + p);
        }
        if q != 0.0 {
            self.q_nom[slot] = Some(self.q_nom[slot].unwrap_or(0.0) + q);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    pub phases: Mask,
    /// Line-to-neutral voltage base in kV.
    pub base_kv: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub phases: Mask,
    /// Series impedance, zero outside `phases`.
    pub z: Mat3,
    /// Series admittance: the inverse of `z` on `phases`, zero elsewhere.
    pub y: Mat3,
}

/// A radial feeder in per unit.
///
/// Buses are in breadth-first order from the substation (bus 0), so every
/// bus `k > 0` is fed by `lines[k - 1]` and its parent has a smaller index.
#[derive(Clone, Debug)]
pub struct Feeder {
    pub name: String,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub children: Vec<Vec<usize>>,
    pub shunt: Vec<Mat3>,
    pub wye: Vec<Option<InjectionRegion>>,
    pub delta: Vec<Option<InjectionRegion>>,
    pub v_ref: Vec3,
    pub v_min: Vec<[f64; 3]>,
    pub v_max: Vec<[f64; 3]>,
    /// Per-phase power base in kVA.
    pub power_base_kva: f64,
    /// Substation references (total over phases) in per unit.
    pub p0_ref: f64,
    pub q0_ref: f64,
}

impl Feeder {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        (k > 0).then(|| self.lines[k - 1].from)
    }

    pub fn phases(&self, j: usize) -> Mask {
        self.buses[j].phases
    }

    pub fn delta_pairs(&self, j: usize) -> Mask {
        self.delta[j].as_ref().map(|r| r.mask).unwrap_or(Mask::EMPTY)
    }

    pub fn wye_mask(&self, j: usize) -> Mask {
        self.wye[j].as_ref().map(|r| r.mask).unwrap_or(Mask::EMPTY)
    }

    pub fn has_delta(&self) -> bool {
        self.delta.iter().any(|d| d.as_ref().is_some_and(|r| !r.mask.is_empty()))
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Neighbours of `j` as `(bus, line)` pairs, parent first.
    pub fn neighbours(&self, j: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if j > 0 {
            out.push((self.lines[j - 1].from, j - 1));
        }
        for &l in &self.children[j] {
            out.push((self.lines[l].to, l));
        }
        out
    }

    pub fn to_kw(&self, pu: f64) -> f64 {
        pu * self.power_base_kva
    }

    pub fn from_kw(&self, kw: f64) -> f64 {
        kw / self.power_base_kva
    }

    /// Voltage limits `1 -+ pct/100` on every wired phase and a balanced
    /// reference at the upper limit.
    pub fn with_voltage_band(mut self, pct: f64) -> Result<Feeder, FeederError> {
        if !(pct > 0.0 && pct < 100.0) {
            return Err(FeederError::Invalid(format!("voltage band {pct}% out of range")));
        }
        let (lo, hi) = (1.0 - pct / 100.0, 1.0 + pct / 100.0);
        for (j, bus) in self.buses.iter().enumerate() {
            for i in 0..3 {
                let on = bus.phases.contains(i);
                self.v_min[j][i] = if on { lo } else { 0.0 };
                self.v_max[j][i] = if on { hi } else { 0.0 };
            }
        }
        self.v_ref = balanced(hi);
        Ok(self)
    }

    /// Total nominal consumption: delta draw minus wye injection.
    pub fn nominal_load(&self) -> C64 {
        let wye: C64 = self.wye.iter().flatten().map(|r| r.nominal().sum()).sum();
        let delta: C64 = self.delta.iter().flatten().map(|r| r.nominal().sum()).sum();
        delta - wye
    }

    pub fn from_json_str(text: &str) -> Result<Feeder, FeederError> {
        let file: FeederFile = serde_json::from_str(text)?;
        file.resolve()
    }
}

/// Reads and resolves a feeder fixture.
pub fn load_feeder(path: impl AsRef<Path>) -> Result<Feeder, FeederError> {
    let text = std::fs::read_to_string(path)?;
    Feeder::from_json_str(&text)
}

/// Fixtures shipped with the crate, by name.
pub fn bundled(name: &str) -> Option<Feeder> {
    let text = match name {
        "ieee13" => include_str!("../fixtures/ieee13.json"),
        "ieee37" => include_str!("../fixtures/ieee37.json"),
        "ieee123" => include_str!("../fixtures/ieee123.json"),
        "two_bus_delta" => include_str!("../fixtures/two_bus_delta.json"),
        "three_bus_delta" => include_str!("../fixtures/three_bus_delta.json"),
        "single_bus" => include_str!("../fixtures/single_bus.json"),
        "no_delta" => include_str!("../fixtures/no_delta.json"),
        _ => return None,
    };
    Some(Feeder::from_json_str(text).expect("bundled fixture is valid"))
}

pub const BUNDLED: [&str; 7] = [
    "ieee13",
    "ieee37",
    "ieee123",
    "two_bus_delta",
    "three_bus_delta",
    "single_bus",
    "no_delta",
];

// ---------------------------------------------------------------------------
// JSON schema

type JsonMat = [[[f64; 2]; 3]; 3];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederFile {
    name: String,
    #[serde(default)]
    #[allow(dead_code)]
    source: String,
    power_base_kva: f64,
    voltage_base_kv: f64,
    substation: String,
    voltage_band_pct: f64,
    #[serde(default)]
    substation_reference: Option<KwKvar>,
    #[serde(default)]
    load_flex: Flex,
    #[serde(default)]
    buses: Vec<BusSpec>,
    lines: Vec<LineSpec>,
    #[serde(default)]
    transformers: Vec<TransformerSpec>,
    #[serde(default)]
    switches: Vec<SwitchSpec>,
    #[serde(default)]
    loads: Vec<LoadSpec>,
    #[serde(default)]
    capacitors: Vec<CapacitorSpec>,
    #[serde(default)]
    shunts: Vec<ShuntSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KwKvar {
    kw: f64,
    kvar: f64,
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Flex {
    p: f64,
    q: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusSpec {
    id: String,
    voltage_base_kv: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineSpec {
    from: String,
    to: String,
    phases: String,
    #[serde(default)]
    z_ohm: Option<JsonMat>,
    #[serde(default)]
    z_pu: Option<JsonMat>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformerSpec {
    from: String,
    to: String,
    phases: String,
    kva: f64,
    r_pct: f64,
    x_pct: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SwitchSpec {
    from: String,
    to: String,
    closed: bool,
}

#[derive(Debug, Deserialize, PartialEq, Eq, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum ConnSpec {
    Wye,
    Delta,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadSpec {
    bus: String,
    connection: ConnSpec,
    kw: [f64; 3],
    kvar: [f64; 3],
    #[serde(default)]
    flex: Option<Flex>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CapacitorSpec {
    bus: String,
    kvar: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShuntSpec {
    bus: String,
    y_pu: JsonMat,
}

fn mat_from_json(m: &JsonMat) -> Mat3 {
    Mat3::from_fn(|i, j| C64::new(m[i][j][0], m[i][j][1]))
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Merges `b` into `a`; the substation (index 0) always stays a root.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if rb == 0 {
            self.parent[ra] = rb;
        } else {
            self.parent[rb] = ra;
        }
    }
}

struct RawEdge {
    a: usize,
    b: usize,
    phases: Mask,
    /// Impedance in per unit on the upstream voltage base, or ohms.
    z: Mat3,
    in_ohm: bool,
}

/// Inverse of `z` restricted to `phases`, zero-filled.
pub fn restricted_inverse(z: &Mat3, phases: Mask) -> Option<Mat3> {
    let idx = phases.slots();
    let n = idx.len();
    let sub = DMatrix::from_fn(n, n, |a, b| z[(idx[a], idx[b])]);
    let inv = sub.try_inverse()?;
    let mut y = Mat3::zeros();
    for a in 0..n {
        for b in 0..n {
            y[(idx[a], idx[b])] = inv[(a, b)];
        }
    }
    y.iter().all(|v| v.re.is_finite() && v.im.is_finite()).then_some(y)
}

impl FeederFile {
    fn resolve(self) -> Result<Feeder, FeederError> {
        if !(self.power_base_kva > 0.0 && self.voltage_base_kv > 0.0) {
            return Err(FeederError::Invalid("bases must be positive".into()));
        }
        // Name table with the substation first.
        let mut names: Vec<String> = vec![self.substation.clone()];
        let mut index: HashMap<String, usize> = HashMap::from([(self.substation.clone(), 0)]);
        let mut intern = |s: &str, names: &mut Vec<String>| -> usize {
            *index.entry(s.to_string()).or_insert_with(|| {
                names.push(s.to_string());
                names.len() - 1
            })
        };
        let mut raw = Vec::new();
        for l in &self.lines {
            let phases = Mask::parse_phases(&l.phases)
                .ok_or_else(|| FeederError::Invalid(format!("phases `{}`", l.phases)))?;
            let (z, in_ohm) = match (&l.z_ohm, &l.z_pu) {
                (Some(z), None) => (mat_from_json(z), true),
                (None, Some(z)) => (mat_from_json(z), false),
                _ => {
                    return Err(FeederError::ImpedanceSpec { from: l.from.clone(), to: l.to.clone() })
                }
            };
            let a = intern(&l.from, &mut names);
            let b = intern(&l.to, &mut names);
            raw.push(RawEdge { a, b, phases, z, in_ohm });
        }
        for t in &self.transformers {
            let phases = Mask::parse_phases(&t.phases)
                .ok_or_else(|| FeederError::Invalid(format!("phases `{}`", t.phases)))?;
            if t.kva <= 0.0 {
                return Err(FeederError::Invalid(format!("transformer {}-{} kva", t.from, t.to)));
            }
            // Percent impedance on the transformer's own three-phase rating.
            let zpu = C64::new(t.r_pct, t.x_pct) / 100.0 * (self.power_base_kva / (t.kva / 3.0));
            let mut z = Mat3::zeros();
            for i in phases.slots() {
                z[(i, i)] = zpu;
            }
            let a = intern(&t.from, &mut names);
            let b = intern(&t.to, &mut names);
            raw.push(RawEdge { a, b, phases, z, in_ohm: false });
        }
        let mut closed = Vec::new();
        for s in self.switches.iter().filter(|s| s.closed) {
            closed.push((intern(&s.from, &mut names), intern(&s.to, &mut names)));
        }

        let mut uf = UnionFind { parent: (0..names.len()).collect() };
        for &(a, b) in &closed {
            uf.union(a, b);
        }
        let rep: Vec<usize> = (0..names.len()).map(|i| uf.find(i)).collect();
        let resolve_bus = |id: &str| -> Result<usize, FeederError> {
            names
                .iter()
                .position(|n| n == id)
                .map(|i| rep[i])
                .ok_or_else(|| FeederError::UnknownBus(id.to_string()))
        };

        // Breadth-first orientation from the substation.
        let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (e, r) in raw.iter().enumerate() {
            let (a, b) = (rep[r.a], rep[r.b]);
            if a == b {
                return Err(FeederError::Cycle { from: names[r.a].clone(), to: names[r.b].clone() });
            }
            adj.entry(a).or_default().push(e);
            adj.entry(b).or_default().push(e);
        }
        let mut order: Vec<usize> = vec![0];
        let mut new_index: HashMap<usize, usize> = HashMap::from([(0, 0)]);
        let mut via: Vec<Option<(usize, usize)>> = vec![None]; // (raw edge, parent rep)
        let mut used = vec![false; raw.len()];
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for &e in adj.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
                if used[e] {
                    continue;
                }
                used[e] = true;
                let (a, b) = (rep[raw[e].a], rep[raw[e].b]);
                let v = if a == u { b } else { a };
                if new_index.contains_key(&v) {
                    return Err(FeederError::Cycle {
                        from: names[raw[e].a].clone(),
                        to: names[raw[e].b].clone(),
                    });
                }
                new_index.insert(v, order.len());
                order.push(v);
                via.push(Some((e, u)));
                queue.push_back(v);
            }
        }
        for (i, n) in names.iter().enumerate() {
            if rep[i] == i && !new_index.contains_key(&i) {
                return Err(FeederError::Disconnected(n.clone()));
            }
        }

        let n = order.len();
        let mut base_kv = vec![self.voltage_base_kv; n];
        for b in &self.buses {
            let j = new_index[&resolve_bus(&b.id)?];
            base_kv[j] = b.voltage_base_kv;
        }
        let mut buses: Vec<Bus> = order
            .iter()
            .enumerate()
            .map(|(j, &r)| Bus { id: names[r].clone(), phases: Mask::EMPTY, base_kv: base_kv[j] })
            .collect();
        buses[0].phases = Mask::ALL;
        let mut lines = Vec::with_capacity(n.saturating_sub(1));
        let mut children = vec![Vec::new(); n];
        for k in 1..n {
            let (e, parent_rep) = via[k].expect("non-root bus has a feeding edge");
            let r = &raw[e];
            let from = new_index[&parent_rep];
            let (from_name, to_name) = (buses[from].id.clone(), buses[k].id.clone());
            if !r.phases.is_subset(buses[from].phases) {
                return Err(FeederError::PhaseMismatch { from: from_name, to: to_name });
            }
            buses[k].phases = r.phases;
            let mut z = Mat3::zeros();
            let scale = if r.in_ohm {
                let zb = buses[from].base_kv.powi(2) * 1000.0 / self.power_base_kva;
                1.0 / zb
            } else {
                1.0
            };
            for i in r.phases.slots() {
                for j in r.phases.slots() {
                    z[(i, j)] = r.z[(i, j)] * scale;
                }
            }
            let y = restricted_inverse(&z, r.phases)
                .ok_or(FeederError::SingularImpedance { from: from_name, to: to_name })?;
            children[from].push(lines.len());
            lines.push(Line { from, to: k, phases: r.phases, z, y });
        }

        // Devices.
        let base = self.power_base_kva;
        let mut wye: Vec<Option<InjectionRegion>> = vec![None; n];
        let mut delta: Vec<Option<InjectionRegion>> = vec![None; n];
        let (mut p_total, mut q_total) = (0.0, 0.0);
        for ld in &self.loads {
            let j = new_index[&resolve_bus(&ld.bus)?];
            if j == 0 {
                return Err(FeederError::DeviceAtSubstation);
            }
            let flex = ld.flex.unwrap_or(self.load_flex);
            if flex.p < 0.0 || flex.q < 0.0 || flex.p >= 1.0 || flex.q >= 1.0 {
                return Err(FeederError::Invalid(format!("load flexibility at `{}`", ld.bus)));
            }
            let slot = match ld.connection {
                ConnSpec::Wye => &mut wye[j],
                ConnSpec::Delta => &mut delta[j],
            };
            let region = slot.get_or_insert_with(InjectionRegion::empty);
            for i in 0..3 {
                if ld.kw[i] == 0.0 && ld.kvar[i] == 0.0 {
                    continue;
                }
                match ld.connection {
                    ConnSpec::Wye if !buses[j].phases.contains(i) => {
                        return Err(FeederError::MissingPhase { bus: ld.bus.clone(), phase: PHASE_NAMES[i] })
                    }
                    ConnSpec::Delta => {
                        let (a, b) = pair_phases(i);
                        if !(buses[j].phases.contains(a) && buses[j].phases.contains(b)) {
                            return Err(FeederError::DanglingDelta { bus: ld.bus.clone(), pair: PAIR_NAMES[i] });
                        }
                    }
                    _ => {}
                }
                // Wye regions hold injections (a load of P kW injects -P);
                // delta regions hold the power drawn across the pair.
                let sign = match ld.connection {
                    ConnSpec::Wye => -1.0,
                    ConnSpec::Delta => 1.0,
                };
                let p = sign * ld.kw[i] / base;
                let q = sign * ld.kvar[i] / base;
                let span = |v: f64, f: f64| {
                    let (a, b) = (v * (1.0 + f), v * (1.0 - f));
                    (a.min(b), a.max(b))
                };
                region.add_range(i, span(p, flex.p), span(q, flex.q));
                region.add_nominal(i, p, q);
                p_total += ld.kw[i] / base;
                q_total += ld.kvar[i] / base;
            }
        }
        for cap in &self.capacitors {
            let j = new_index[&resolve_bus(&cap.bus)?];
            if j == 0 {
                return Err(FeederError::DeviceAtSubstation);
            }
            let region = wye[j].get_or_insert_with(InjectionRegion::empty);
            for i in 0..3 {
                if cap.kvar[i] == 0.0 {
                    continue;
                }
                if !buses[j].phases.contains(i) {
                    return Err(FeederError::MissingPhase { bus: cap.bus.clone(), phase: PHASE_NAMES[i] });
                }
                if cap.kvar[i] < 0.0 {
                    return Err(FeederError::Invalid(format!("capacitor rating at `{}`", cap.bus)));
                }
                region.add_range(i, (0.0, 0.0), (0.0, cap.kvar[i] / base));
            }
        }
        for slot in wye.iter_mut().chain(delta.iter_mut()) {
            if slot.as_ref().is_some_and(|r| r.mask.is_empty()) {
                *slot = None;
            }
        }
        // Substation injection: a wide box, tracked through its own cost term.
        let wide = 10.0 * (1.0 + p_total.abs() + q_total.abs());
        let mut sub = InjectionRegion::empty();
        for i in 0..3 {
            sub.add_range(i, (-wide, wide), (-wide, wide));
        }
        wye[0] = Some(sub);

        let mut shunt = vec![Mat3::zeros(); n];
        for s in &self.shunts {
            let j = new_index[&resolve_bus(&s.bus)?];
            let y = mat_from_json(&s.y_pu);
            for i in 0..3 {
                for k in 0..3 {
                    if (!buses[j].phases.contains(i) || !buses[j].phases.contains(k)) && y[(i, k)].norm() > 0.0 {
                        return Err(FeederError::MissingPhase { bus: s.bus.clone(), phase: PHASE_NAMES[i] });
                    }
                }
            }
            shunt[j] += y;
        }

        let (p0_ref, q0_ref) = match &self.substation_reference {
            Some(r) => (r.kw / base, r.kvar / base),
            None => (p_total, q_total),
        };
        let feeder = Feeder {
            name: self.name,
            buses,
            lines,
            children,
            shunt,
            wye,
            delta,
            v_ref: Vec3::zeros(),
            v_min: vec![[0.0; 3]; n],
            v_max: vec![[0.0; 3]; n],
            power_base_kva: base,
            p0_ref,
            q0_ref,
        };
        feeder.with_voltage_band(self.voltage_band_pct)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(extra: &str) -> String {
        format!(
            r#"{{
            "name": "t", "power_base_kva": 1000, "voltage_base_kv": 2.4,
            "substation": "s", "voltage_band_pct": 5,
            "lines": [
              {{"from": "s", "to": "a", "phases": "abc",
                "z_pu": [[[0.01,0.02],[0,0],[0,0]],[[0,0],[0.01,0.02],[0,0]],[[0,0],[0,0],[0.01,0.02]]]}},
              {{"from": "a", "to": "b", "phases": "bc",
                "z_pu": [[[0,0],[0,0],[0,0]],[[0,0],[0.01,0.02],[0,0]],[[0,0],[0,0],[0.01,0.02]]]}}
            ]{extra}
          }}"#
        )
    }

    #[test]
    fn gamma_rows_sum_to_zero() {
        let g = gamma();
        for k in 0..3 {
            let s: C64 = g.row(k).iter().sum();
            assert_eq!(s, C64::new(0.0, 0.0));
        }
        assert_eq!(g[(2, 2)], C64::new(1.0, 0.0));
        assert_eq!(g[(2, 0)], C64::new(-1.0, 0.0));
    }

    #[test]
    fn resolves_phases_and_order() {
        let f = Feeder::from_json_str(&tiny("")).unwrap();
        assert_eq!(f.n_buses(), 3);
        assert_eq!(f.buses[2].phases.label(), "bc");
        assert_eq!(f.lines[1].from, 1);
        assert_eq!(f.lines[1].y[(0, 0)], C64::new(0.0, 0.0));
        let prod = f.lines[1].z * f.lines[1].y;
        assert!((prod[(1, 1)] - C64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn dangling_delta_rejected() {
        let extra = r#", "loads": [{"bus": "b", "connection": "delta", "kw": [10, 0, 0], "kvar": [0, 0, 0]}]"#;
        match Feeder::from_json_str(&tiny(extra)) {
            Err(FeederError::DanglingDelta { pair, .. }) => assert_eq!(pair, "ab"),
            other => panic!("expected dangling delta, got {other:?}"),
        }
    }

    #[test]
    fn cycle_rejected() {
        let extra = r#", "switches": [{"from": "s", "to": "b", "closed": true}]"#;
        assert!(matches!(Feeder::from_json_str(&tiny(extra)), Err(FeederError::Cycle { .. })));
    }

    #[test]
    fn open_switch_is_dropped() {
        let extra = r#", "switches": [{"from": "s", "to": "b", "closed": false}]"#;
        assert_eq!(Feeder::from_json_str(&tiny(extra)).unwrap().n_buses(), 3);
    }

    #[test]
    fn ohm_conversion_uses_upstream_base() {
        let text = tiny("").replace("\"z_pu\"", "\"z_ohm\"");
        let f = Feeder::from_json_str(&text).unwrap();
        let zb = 2.4f64.powi(2) * 1000.0 / 1000.0;
        assert!((f.lines[0].z[(0, 0)].re - 0.01 / zb).abs() < 1e-15);
    }

    #[test]
    fn load_regions_aggregate() {
        let extra = r#", "load_flex": {"p": 0.1, "q": 0.0},
            "loads": [{"bus": "a", "connection": "wye", "kw": [100, 0, 0], "kvar": [50, 0, 0]}],
            "capacitors": [{"bus": "a", "kvar": [30, 0, 0]}]"#;
        let f = Feeder::from_json_str(&tiny(extra)).unwrap();
        let r = f.wye[1].as_ref().unwrap();
        assert!((r.p_min[0] + 0.11).abs() < 1e-12 && (r.p_max[0] + 0.09).abs() < 1e-12);
        assert!((r.q_min[0] + 0.05).abs() < 1e-12 && (r.q_max[0] + 0.02).abs() < 1e-12);
        assert_eq!(r.p_nom[0], Some(-0.1));
        assert_eq!(r.free_dims(), 2);
        assert!((f.p0_ref - 0.1).abs() < 1e-12);
    }

    #[test]
    fn unit_round_trip() {
        let f = Feeder::from_json_str(&tiny("")).unwrap();
        assert!((f.to_kw(f.from_kw(123.456)) - 123.456).abs() < 1e-12);
    }

    #[test]
    fn bundled_fixtures_load() {
        for name in BUNDLED {
            let f = bundled(name).unwrap();
            for (k, l) in f.lines.iter().enumerate() {
                assert_eq!(l.to, k + 1);
                assert!(l.from < l.to);
            }
        }
        assert_eq!(bundled("ieee13").unwrap().n_buses(), 13);
        assert_eq!(bundled("ieee37").unwrap().n_buses(), 37);
    }
}
