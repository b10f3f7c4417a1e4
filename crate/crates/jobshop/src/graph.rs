//! The static heterogeneous disjunctive graph and its dynamic node features.
//!
//! One `op` node per operation, no dummy source/sink nodes. Two typed arc
//! sets over the same nodes:
//! - `precedes`: directed arcs `(i, j) -> (i, j+1)` within each job;
//! - `competes`: for each machine a full clique over the ops assigned to it,
//!   stored as two opposite directed arcs per unordered pair so a single
//!   incoming-arc gather serves both relations.
//!
//! Topology never changes during an episode; only the three feature columns
//! do: normalized processing time, completion ratio against the global time,
//! and a scheduled flag.

use crate::env::ScheduleState;
use crate::instance::JsspInstance;

pub const FEATURE_DIM: usize = 3;

/// Static topology plus the current `[node_count x 3]` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    pub node_count: usize,
    pub n_jobs: usize,
    pub n_machines: usize,
    /// Directed `(src, dst)` arcs enforcing within-job order.
    pub precedes: Vec<(usize, usize)>,
    /// Machine-sharing arcs; symmetric (both directions present), no self-arcs.
    pub competes: Vec<(usize, usize)>,
    /// Row-major `[node_count x FEATURE_DIM]`.
    pub features: Vec<f64>,
}

impl HeteroGraph {
    /// Feature row of `node`.
    pub fn feature_row(&self, node: usize) -> &[f64] {
        &self.features[node * FEATURE_DIM..(node + 1) * FEATURE_DIM]
    }

    /// Number of unordered machine-sharing pairs (half the arc count).
    pub fn competes_pairs(&self) -> usize {
        self.competes.len() / 2
    }

    /// Arc lists as CSV: `relation,src,dst`.
    pub fn arcs_csv(&self) -> String {
        let mut out = String::from("relation,src,dst\n");
        for &(u, v) in &self.precedes {
            out.push_str(&format!("precedes,{u},{v}\n"));
        }
        for &(u, v) in &self.competes {
            out.push_str(&format!("competes,{u},{v}\n"));
        }
        out
    }

    /// Feature matrix as CSV, one row per node:
    /// `id,job,pos,machine,f0,f1,f2`.
    pub fn features_csv(&self, inst: &JsspInstance) -> String {
        let mut out = String::from("id,job,pos,machine,f0,f1,f2\n");
        for node in 0..self.node_count {
            let (job, pos) = inst.op_of(node);
            let row = self.feature_row(node);
            out.push_str(&format!(
                "{node},{job},{pos},{},{},{},{}\n",
                inst.machine(job, pos),
                row[0],
                row[1],
                row[2]
            ));
        }
        out
    }
}

/// Builds the graph for `inst`, with features initialized from a reset state.
pub fn build_graph(inst: &JsspInstance) -> HeteroGraph {
    let node_count = inst.n_ops();

    let mut precedes = Vec::with_capacity(inst.n_jobs * inst.n_machines.saturating_sub(1));
    for job in 0..inst.n_jobs {
        for pos in 0..inst.n_machines.saturating_sub(1) {
            precedes.push((inst.op_id(job, pos), inst.op_id(job, pos + 1)));
        }
    }

    let mut per_machine: Vec<Vec<usize>> = vec![Vec::new(); inst.n_machines];
    for job in 0..inst.n_jobs {
        for pos in 0..inst.n_machines {
            per_machine[inst.machine(job, pos)].push(inst.op_id(job, pos));
        }
    }
    let mut competes = Vec::new();
    for ops in &per_machine {
        for (a, &u) in ops.iter().enumerate() {
            for &v in &ops[a + 1..] {
                competes.push((u, v));
                competes.push((v, u));
            }
        }
    }

    let mut graph = HeteroGraph {
        node_count,
        n_jobs: inst.n_jobs,
        n_machines: inst.n_machines,
        precedes,
        competes,
        features: vec![0.0; node_count * FEATURE_DIM],
    };
    update_features(&mut graph, &ScheduleState::reset(inst), inst);
    graph
}

/// Recomputes all three feature columns from `state`:
/// - f0: processing time / max processing time of the instance;
/// - f1: 0 if unscheduled, else completion time / global time, where the
///   global time is the maximum completion among scheduled ops;
/// - f2: scheduled flag.
pub fn update_features(graph: &mut HeteroGraph, state: &ScheduleState, inst: &JsspInstance) {
    let p_max = inst.max_processing_time() as f64;
    let global_time = (0..graph.node_count)
        .filter(|&id| state.op_scheduled[id])
        .map(|id| state.op_completion[id])
        .max()
        .unwrap_or(0) as f64;

    for node in 0..graph.node_count {
        let (job, pos) = inst.op_of(node);
        let row = &mut graph.features[node * FEATURE_DIM..(node + 1) * FEATURE_DIM];
        row[0] = inst.proc(job, pos) as f64 / p_max;
        if state.op_scheduled[node] {
            row[1] = state.op_completion[node] as f64 / global_time;
            row[2] = 1.0;
        } else {
            row[1] = 0.0;
            row[2] = 0.0;
        }
    }
}
