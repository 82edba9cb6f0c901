//! Cycle and memory model of the FPGA inference schedules.
//!
//! The MPS runs two chains of matrix-vector contractions toward the label
//! tensor in parallel after all sites have absorbed their inputs; the TTN
//! contracts one layer per stage from the leaves to the root.

use serde::{Deserialize, Serialize};

use crate::contractor::Contractor;
use crate::error::{Error, Result};
use crate::mps::{bond_dims, MpsModel};
use crate::network::TensorNetwork;
use crate::quant::FxpFormat;
use crate::tensor::{contract, contraction_cost, ContractionSpec, Tensor};
use crate::ttn::{layer_shape, TtnModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mps,
    Ttn,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Mps => "mps",
            Arch::Ttn => "ttn",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mps" => Ok(Arch::Mps),
            "ttn" => Ok(Arch::Ttn),
            _ => Err(Error::InvalidConfig(format!("unknown architecture {s:?}"))),
        }
    }
}

/// Shape information sufficient to lay out the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    Mps {
        n: usize,
        d: usize,
        bond_cap: usize,
        n_classes: usize,
        label_site: usize,
    },
    Ttn {
        n: usize,
        d: usize,
        chi: usize,
        n_classes: usize,
    },
}

impl Topology {
    pub fn arch(&self) -> Arch {
        match self {
            Topology::Mps { .. } => Arch::Mps,
            Topology::Ttn { .. } => Arch::Ttn,
        }
    }

    pub fn n_sites(&self) -> usize {
        match *self {
            Topology::Mps { n, .. } | Topology::Ttn { n, .. } => n,
        }
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(match *self {
            Topology::Mps { n: 0, .. } | Topology::Ttn { n: 0, .. } => 0,
            Topology::Mps {
                n,
                d,
                bond_cap,
                n_classes,
                label_site,
            } => MpsModel::shapes(n, d, bond_cap, n_classes, label_site)
                .iter()
                .map(|s| s.iter().product::<usize>())
                .sum(),
            Topology::Ttn { n, d, chi, n_classes } => TtnModel::shapes(n, d, chi, n_classes)?
                .iter()
                .map(|s| s.iter().product::<usize>())
                .sum(),
        })
    }
}

impl From<&MpsModel> for Topology {
    fn from(m: &MpsModel) -> Self {
        Topology::Mps {
            n: m.n_sites(),
            d: m.phys_dim(),
            bond_cap: m.bond_cap(),
            n_classes: m.n_classes(),
            label_site: m.label_site(),
        }
    }
}

impl From<&TtnModel> for Topology {
    fn from(m: &TtnModel) -> Self {
        Topology::Ttn {
            n: m.n_sites(),
            d: m.phys_dim(),
            chi: m.chi(),
            n_classes: m.n_classes(),
        }
    }
}

/// One pairwise contraction executed by a node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub a_shape: Vec<usize>,
    pub b_shape: Vec<usize>,
    pub left_axes: Vec<usize>,
    pub right_axes: Vec<usize>,
    /// Product of contracted sizes.
    pub k: u64,
    pub mults: u64,
    pub adds: u64,
}

impl Step {
    fn new(a: &[usize], b: &[usize], spec: ContractionSpec) -> Self {
        let (mults, adds) = contraction_cost(a, b, &spec);
        let k = spec.left_axes.iter().map(|&i| a[i] as u64).product();
        Self {
            a_shape: a.to_vec(),
            b_shape: b.to_vec(),
            left_axes: spec.left_axes,
            right_axes: spec.right_axes,
            k,
            mults,
            adds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagNode {
    pub id: usize,
    pub name: String,
    pub stage: usize,
    /// Sequential contractions performed inside the node.
    pub steps: Vec<Step>,
    pub preds: Vec<usize>,
}

impl DagNode {
    pub fn mults(&self) -> u64 {
        self.steps.iter().map(|s| s.mults).sum()
    }

    pub fn adds(&self) -> u64 {
        self.steps.iter().map(|s| s.adds).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractionDag {
    pub arch: Arch,
    pub nodes: Vec<DagNode>,
}

impl ContractionDag {
    pub fn n_stages(&self) -> usize {
        self.nodes.iter().map(|n| n.stage + 1).max().unwrap_or(0)
    }

    pub fn stage(&self, s: usize) -> impl Iterator<Item = &DagNode> {
        self.nodes.iter().filter(move |n| n.stage == s)
    }

    pub fn total_mults(&self) -> u64 {
        self.nodes.iter().map(DagNode::mults).sum()
    }

    pub fn total_adds(&self) -> u64 {
        self.nodes.iter().map(DagNode::adds).sum()
    }

    /// Predecessors precede their successors in id order and sit in
    /// strictly earlier stages.
    pub fn is_well_formed(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| {
            n.id == i
                && n.preds
                    .iter()
                    .all(|&p| p < i && self.nodes[p].stage < n.stage)
        })
    }
}

struct Builder {
    nodes: Vec<DagNode>,
}

impl Builder {
    fn push(&mut self, name: String, stage: usize, steps: Vec<Step>, preds: Vec<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(DagNode {
            id,
            name,
            stage,
            steps,
            preds,
        });
        id
    }
}

pub fn build_dag(topo: &Topology) -> Result<ContractionDag> {
    let mut b = Builder { nodes: Vec::new() };
    match *topo {
        Topology::Mps { n: 0, .. } | Topology::Ttn { n: 0, .. } => {}
        Topology::Mps {
            n,
            d,
            bond_cap,
            n_classes,
            label_site: l,
        } => {
            if l >= n {
                return Err(Error::InvalidConfig(format!("label site {l} outside chain of {n}")));
            }
            let bonds = bond_dims(n, d, bond_cap);
            let shapes = MpsModel::shapes(n, d, bond_cap, n_classes, l);
            let embed_step = |k: usize| Step::new(&shapes[k], &[d], ContractionSpec::pair(1, 0));
            let merge_steps = || {
                vec![
                    Step::new(&[bonds[l]], &[bonds[l], bonds[l + 1], n_classes], ContractionSpec::pair(0, 0)),
                    Step::new(&[bonds[l + 1], n_classes], &[bonds[l + 1]], ContractionSpec::pair(0, 0)),
                ]
            };
            if n == 1 {
                let mut steps = vec![embed_step(0)];
                steps.extend(merge_steps());
                b.push("site0+merge".into(), 0, steps, vec![]);
            } else {
                let embeds: Vec<usize> = (0..n)
                    .map(|k| b.push(format!("embed{k}"), 0, vec![embed_step(k)], vec![]))
                    .collect();
                let n_left = l;
                let n_right = n - 1 - l;
                let mut last_left = None;
                let mut last_right = None;
                for s in 1..=n_left.max(n_right) {
                    if s <= n_left {
                        let k = s - 1;
                        let step = Step::new(&[bonds[k]], &[bonds[k], bonds[k + 1]], ContractionSpec::pair(0, 0));
                        let preds = last_left.into_iter().chain([embeds[k]]).collect();
                        last_left = Some(b.push(format!("left{k}"), s, vec![step], preds));
                    }
                    if s <= n_right {
                        let k = n - s;
                        let step = Step::new(&[bonds[k], bonds[k + 1]], &[bonds[k + 1]], ContractionSpec::pair(1, 0));
                        let preds = last_right.into_iter().chain([embeds[k]]).collect();
                        last_right = Some(b.push(format!("right{k}"), s, vec![step], preds));
                    }
                }
                let mut preds: Vec<usize> = last_left.into_iter().chain([embeds[l]]).chain(last_right).collect();
                preds.sort_unstable();
                b.push("merge".into(), n_left.max(n_right) + 1, merge_steps(), preds);
            }
        }
        Topology::Ttn { n, d, chi, n_classes } => {
            TtnModel::shapes(n, d, chi, n_classes)?;
            let layers = n.trailing_zeros() as usize;
            let mut below: Vec<usize> = Vec::new();
            for (stage, l) in (0..layers).rev().enumerate() {
                let [c, _, p] = layer_shape(layers, l, d, chi, n_classes);
                let mut current = Vec::with_capacity(1 << l);
                for j in 0..(1usize << l) {
                    let steps = vec![
                        Step::new(&[c, c, p], &[c], ContractionSpec::pair(0, 0)),
                        Step::new(&[c, p], &[c], ContractionSpec::pair(0, 0)),
                    ];
                    let preds = if below.is_empty() {
                        vec![]
                    } else {
                        vec![below[2 * j], below[2 * j + 1]]
                    };
                    current.push(b.push(format!("node[{l},{j}]"), stage, steps, preds));
                }
                below = current;
            }
        }
    }
    Ok(ContractionDag {
        arch: topo.arch(),
        nodes: b.nodes,
    })
}

/// Cycles charged to the additions of one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdderModel {
    /// Balanced adder tree over the contracted index: `ceil(log2 K)`.
    Tree,
    /// Fixed registered accumulation per step.
    Fixed(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub clock_mhz: f64,
    /// Cycles per multiplication.
    pub n_reg: u32,
    pub adder: AdderModel,
    /// Cycles added once per stage (register hand-off between stages).
    pub stage_overhead: u32,
    /// Whole-pipeline correction, may be negative.
    pub offset: i64,
}

impl CostModel {
    /// Fits 23/31/39 cycles for `N = 8/16/32` at `d = 7, χ = 10`.
    pub fn ttn_default() -> Self {
        Self {
            clock_mhz: 250.0,
            n_reg: 1,
            adder: AdderModel::Fixed(1),
            stage_overhead: 4,
            offset: -1,
        }
    }

    /// Approximate; lands within a few percent of 59/108/177 cycles for
    /// `N = 8/16/32` at `d = 7, D = 10`.
    pub fn mps_default() -> Self {
        Self {
            clock_mhz: 250.0,
            n_reg: 3,
            adder: AdderModel::Tree,
            stage_overhead: 3,
            offset: 0,
        }
    }

    pub fn for_arch(arch: Arch) -> Self {
        match arch {
            Arch::Mps => Self::mps_default(),
            Arch::Ttn => Self::ttn_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clock_mhz > 0.0 && self.clock_mhz.is_finite()) || self.n_reg == 0 {
            return Err(Error::InvalidConfig(format!(
                "clock and n_reg must be positive (clock {} MHz, n_reg {})",
                self.clock_mhz, self.n_reg
            )));
        }
        Ok(())
    }

    fn adder_cycles(&self, k: u64) -> u64 {
        match self.adder {
            AdderModel::Tree => {
                if k <= 1 {
                    0
                } else {
                    64 - (k - 1).leading_zeros() as u64
                }
            }
            AdderModel::Fixed(c) => c as u64,
        }
    }

    fn node_cycles(&self, node: &DagNode) -> u64 {
        node.steps
            .iter()
            .map(|s| self.n_reg as u64 + self.adder_cycles(s.k))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    /// Cycles of each stage, slowest node plus overhead.
    pub stage_cycles: Vec<u64>,
    /// `n_reg` times the multiply depth summed over stages.
    pub mult_cycles: u64,
    pub cycles: u64,
    pub latency_ns: f64,
}

pub fn latency_breakdown(dag: &ContractionDag, cost: &CostModel) -> LatencyBreakdown {
    let mut stage_cycles = Vec::with_capacity(dag.n_stages());
    let mut mult_cycles = 0;
    for s in 0..dag.n_stages() {
        let slowest = dag
            .stage(s)
            .max_by_key(|n| cost.node_cycles(n))
            .expect("stages are contiguous");
        mult_cycles += cost.n_reg as u64 * slowest.steps.len() as u64;
        stage_cycles.push(cost.node_cycles(slowest) + cost.stage_overhead as u64);
    }
    let raw: i64 = stage_cycles.iter().sum::<u64>() as i64;
    let cycles = if stage_cycles.is_empty() { 0 } else { (raw + cost.offset).max(0) as u64 };
    LatencyBreakdown {
        stage_cycles,
        mult_cycles,
        cycles,
        latency_ns: cycles as f64 * 1000.0 / cost.clock_mhz,
    }
}

pub fn estimate_latency(dag: &ContractionDag, cost: &CostModel) -> f64 {
    latency_breakdown(dag, cost).latency_ns
}

/// Weight storage in kilobits (1000 bits) at `2 + FB` bits per parameter.
pub fn estimate_memory(param_count: usize, format: FxpFormat) -> f64 {
    (param_count as u64 * format.word_bits() as u64) as f64 / 1000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareReport {
    pub arch: Arch,
    pub n_sites: usize,
    pub param_count: usize,
    pub frac_bits: u32,
    pub word_bits: u32,
    pub memory_kbits: f64,
    /// Truncated to whole kilobits, as tabulated.
    pub memory_kbits_floor: u64,
    pub total_mults: u64,
    pub total_adds: u64,
    pub n_nodes: usize,
    pub n_stages: usize,
    pub stage_cycles: Vec<u64>,
    pub critical_path_cycles: u64,
    pub latency_ns: f64,
    pub n_reg: u32,
    pub clock_mhz: f64,
}

impl HardwareReport {
    pub fn csv_header() -> &'static str {
        "arch,N,params,FB,memory_kbits,mults,adds,stages,cycles,latency_ns,n_reg"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{},{},{},{},{:.1},{}",
            self.arch,
            self.n_sites,
            self.param_count,
            self.frac_bits,
            self.memory_kbits,
            self.total_mults,
            self.total_adds,
            self.n_stages,
            self.critical_path_cycles,
            self.latency_ns,
            self.n_reg
        )
    }
}

pub fn report(topo: &Topology, format: FxpFormat, cost: &CostModel) -> Result<HardwareReport> {
    cost.validate()?;
    let dag = build_dag(topo)?;
    let params = topo.param_count()?;
    let lat = latency_breakdown(&dag, cost);
    let memory = estimate_memory(params, format);
    Ok(HardwareReport {
        arch: topo.arch(),
        n_sites: topo.n_sites(),
        param_count: params,
        frac_bits: format.frac_bits(),
        word_bits: format.word_bits(),
        memory_kbits: memory,
        memory_kbits_floor: (params as u64 * format.word_bits() as u64) / 1000,
        total_mults: dag.total_mults(),
        total_adds: dag.total_adds(),
        n_nodes: dag.nodes.len(),
        n_stages: dag.n_stages(),
        stage_cycles: lat.stage_cycles,
        critical_path_cycles: lat.cycles,
        latency_ns: lat.latency_ns,
        n_reg: cost.n_reg,
        clock_mhz: cost.clock_mhz,
    })
}

/// Exact contractor that counts scalar operations with explicit loops.
#[derive(Clone, Debug, Default)]
pub struct CountingContractor {
    pub mults: u64,
    pub adds: u64,
    pub contractions: usize,
}

impl Contractor for CountingContractor {
    fn contract(&mut self, a: &Tensor, b: &Tensor, spec: &ContractionSpec) -> Result<Tensor> {
        let out = contract(a, b, spec)?;
        let k: usize = spec.left_axes.iter().map(|&i| a.shape()[i]).product();
        for _ in 0..out.len() {
            for p in 0..k {
                self.mults += 1;
                if p > 0 {
                    self.adds += 1;
                }
            }
        }
        self.contractions += 1;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddedJet, Layout};

    fn mps_topo(n: usize) -> Topology {
        Topology::Mps {
            n,
            d: 7,
            bond_cap: 10,
            n_classes: 5,
            label_site: n / 2,
        }
    }

    fn ttn_topo(n: usize) -> Topology {
        Topology::Ttn {
            n,
            d: 7,
            chi: 10,
            n_classes: 5,
        }
    }

    #[test]
    fn ttn_dag_structure() {
        let dag = build_dag(&ttn_topo(8)).unwrap();
        assert_eq!(dag.nodes.len(), 7);
        assert_eq!(dag.n_stages(), 3);
        assert_eq!(dag.stage(0).count(), 4);
        assert_eq!(dag.stage(1).count(), 2);
        assert_eq!(dag.stage(2).count(), 1);
        assert!(dag.is_well_formed());
        for n in [2, 4, 16, 32, 64] {
            let dag = build_dag(&ttn_topo(n)).unwrap();
            assert_eq!(dag.n_stages(), n.trailing_zeros() as usize);
            assert_eq!(dag.nodes.len(), n - 1);
        }
    }

    #[test]
    fn mps_dag_structure_n4() {
        let dag = build_dag(&mps_topo(4)).unwrap();
        assert!(dag.is_well_formed());
        let names = |s: usize| dag.stage(s).map(|n| n.name.clone()).collect::<Vec<_>>();
        assert_eq!(names(0), ["embed0", "embed1", "embed2", "embed3"]);
        assert_eq!(names(1), ["left0", "right3"]);
        assert_eq!(names(2), ["left1"]);
        assert_eq!(names(3), ["merge"]);
        assert_eq!(dag.nodes.last().unwrap().steps.len(), 2);
    }

    #[test]
    fn single_tensor_models() {
        for topo in [mps_topo(1), ttn_topo(2)] {
            let dag = build_dag(&topo).unwrap();
            assert_eq!(dag.nodes.len(), 1);
            assert_eq!(dag.n_stages(), 1);
        }
    }

    #[test]
    fn ttn_latency_calibration() {
        let cost = CostModel::ttn_default();
        for (n, cycles, ns) in [(8, 23, 92.0), (16, 31, 124.0), (32, 39, 156.0)] {
            let lat = latency_breakdown(&build_dag(&ttn_topo(n)).unwrap(), &cost);
            assert_eq!(lat.cycles, cycles);
            assert_eq!(lat.latency_ns, ns);
        }
    }

    #[test]
    fn mps_latency_within_band() {
        let cost = CostModel::mps_default();
        for (n, ns) in [(8, 236.0), (16, 432.0), (32, 708.0)] {
            let got = estimate_latency(&build_dag(&mps_topo(n)).unwrap(), &cost);
            assert!((got - ns).abs() / ns <= 0.25, "N={n}: {got} vs {ns}");
        }
    }

    #[test]
    fn latency_monotone_in_n() {
        for arch in [Arch::Mps, Arch::Ttn] {
            let cost = CostModel::for_arch(arch);
            let mut prev = 0.0;
            for n in [2, 4, 8, 16, 32, 64] {
                let topo = if arch == Arch::Mps { mps_topo(n) } else { ttn_topo(n) };
                let ns = estimate_latency(&build_dag(&topo).unwrap(), &cost);
                assert!(ns > prev);
                prev = ns;
            }
        }
    }

    #[test]
    fn doubling_nreg_doubles_mult_cycles() {
        let dag = build_dag(&ttn_topo(16)).unwrap();
        let base = CostModel::ttn_default();
        let twice = CostModel { n_reg: 2, ..base };
        let (a, b) = (latency_breakdown(&dag, &base), latency_breakdown(&dag, &twice));
        assert!(b.mult_cycles >= 2 * a.mult_cycles);
        assert!(b.cycles - a.cycles >= a.mult_cycles);
    }

    #[test]
    fn memory_table() {
        let fb = |b| FxpFormat::new(b).unwrap();
        for (n, hi, lo) in [(8, 71, 35), (16, 166, 83), (32, 357, 178)] {
            let r14 = report(&ttn_topo(n), fb(14), &CostModel::ttn_default()).unwrap();
            let r6 = report(&ttn_topo(n), fb(6), &CostModel::ttn_default()).unwrap();
            assert_eq!(r14.memory_kbits_floor, hi);
            assert_eq!(r6.memory_kbits_floor, lo);
        }
        assert!((estimate_memory(4460, fb(14)) - 71.36).abs() < 1e-12);
        assert!((estimate_memory(6678, fb(14)) - 106.848).abs() < 1e-12);
        // linear in FB with slope params / 1000
        let slope = estimate_memory(10420, fb(9)) - estimate_memory(10420, fb(8));
        assert!((slope - 10.42).abs() < 1e-12);
    }

    #[test]
    fn report_n16() {
        let r = report(&ttn_topo(16), FxpFormat::new(14).unwrap(), &CostModel::ttn_default()).unwrap();
        assert_eq!(r.latency_ns, 124.0);
        assert_eq!(r.memory_kbits_floor, 166);
        assert_eq!(r.param_count, 10420);
        let json = serde_json::to_string(&r).unwrap();
        let back: HardwareReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn zero_parameter_model() {
        let r = report(&mps_topo(0), FxpFormat::new(8).unwrap(), &CostModel::mps_default()).unwrap();
        assert_eq!(r.memory_kbits, 0.0);
        assert_eq!(r.total_mults, 0);
        assert_eq!(r.n_stages, 0);
        assert_eq!(r.latency_ns, 0.0);
    }

    fn jet(n: usize, d: usize) -> EmbeddedJet {
        EmbeddedJet {
            sites: (0..n).map(|k| (0..d).map(|s| ((k + s) as f64).cos()).collect()).collect(),
            layout: Layout::PerParticle,
        }
    }

    #[test]
    fn dag_counts_match_instrumented_forward() {
        for n in [1, 2, 3, 4, 5, 8, 16] {
            for label in [0, n / 2, n - 1] {
                let m = MpsModel::new(n, 3, 4, 5, label, 0).unwrap();
                let mut c = CountingContractor::default();
                m.forward_with(&jet(n, 3), &mut c).unwrap();
                let dag = build_dag(&Topology::from(&m)).unwrap();
                assert_eq!((dag.total_mults(), dag.total_adds()), (c.mults, c.adds), "mps n={n} l={label}");
                let steps: usize = dag.nodes.iter().map(|n| n.steps.len()).sum();
                assert_eq!(steps, c.contractions);
            }
        }
        for n in [2, 4, 8, 16] {
            let m = TtnModel::new(n, 3, 5, 5, 0).unwrap();
            let mut c = CountingContractor::default();
            m.forward_with(&jet(n, 3), &mut c).unwrap();
            let dag = build_dag(&Topology::from(&m)).unwrap();
            assert_eq!((dag.total_mults(), dag.total_adds()), (c.mults, c.adds), "ttn n={n}");
        }
    }

    #[test]
    fn step_costs_follow_free_times_contracted() {
        let dag = build_dag(&mps_topo(8)).unwrap();
        for node in &dag.nodes {
            for s in &node.steps {
                let total: u64 = s.a_shape.iter().chain(&s.b_shape).map(|&x| x as u64).product();
                let free = total / (s.k * s.k);
                assert_eq!(s.mults, free * s.k);
                assert_eq!(s.adds, free * (s.k - 1));
            }
        }
    }
}
