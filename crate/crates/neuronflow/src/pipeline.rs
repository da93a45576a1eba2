//! Discrete-event scheduler for 5-stage neuron-cluster tasks.
//!
//! Each cluster runs Pred → GIO → GC → UDIO → UDC, where the two I/O
//! stages are skipped when the cluster's weights are resident. Compute
//! stages are list-scheduled over heterogeneous cores (fastest first,
//! lowest task id breaking ties); I/O stages queue FIFO on the single
//! I/O channel that mobile UFS storage provides. Two pipelining
//! policies are supported: matrix-level, which barriers each matrix
//! behind the previous one, and cluster-level, which only keeps the
//! per-cluster data dependency between consecutive matrices so I/O can
//! cross the matrix boundary. All times are integer nanoseconds, so a
//! given input always produces a byte-identical event log.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

/// Pipelining policy across consecutive matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// No task of matrix B starts until every stage of matrix A is done.
    MatrixLevel,
    /// Matrix B's cluster j waits only for matrix A's cluster j.
    ClusterLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Stage {
    Pred,
    GateIo,
    GateCompute,
    UpDownIo,
    UpDownCompute,
}

pub const STAGES: [Stage; 5] =
    [Stage::Pred, Stage::GateIo, Stage::GateCompute, Stage::UpDownIo, Stage::UpDownCompute];

impl Stage {
    pub fn is_io(self) -> bool {
        matches!(self, Stage::GateIo | Stage::UpDownIo)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Pred => "pred",
            Stage::GateIo => "gio",
            Stage::GateCompute => "gc",
            Stage::UpDownIo => "udio",
            Stage::UpDownCompute => "udc",
        };
        f.write_str(s)
    }
}

/// Work amounts for one cluster, in nanoseconds on a unit-speed core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageDurations {
    pub pred: u64,
    pub gate_io: u64,
    pub gate_compute: u64,
    pub updown_io: u64,
    pub updown_compute: u64,
}

impl StageDurations {
    pub fn uniform(compute: u64, io: u64) -> Self {
        StageDurations {
            pred: compute,
            gate_io: io,
            gate_compute: compute,
            updown_io: io,
            updown_compute: compute,
        }
    }
}

/// One cluster of one matrix, ready for scheduling. `stages[i]` is the
/// work for `STAGES[i]`, `None` when the stage is skipped (resident
/// weights need no I/O).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterTask {
    pub task_id: u32,
    pub matrix_id: u32,
    pub cluster_id: u32,
    pub npu: bool,
    pub stages: [Option<u64>; 5],
}

/// Input description of one cluster for [`build_tasks`].
#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub cluster_id: u32,
    pub resident: bool,
    pub npu: bool,
    pub durations: StageDurations,
}

/// Input description of one matrix (an ordered set of clusters).
#[derive(Debug, Clone)]
pub struct MatrixSpec {
    pub matrix_id: u32,
    pub clusters: Vec<ClusterSpec>,
}

#[derive(Debug, Clone)]
pub struct ComputeCore {
    pub name: String,
    /// Relative speed; a stage of work `w` takes `ceil(w / speed)` ns.
    pub speed: u64,
    pub npu: bool,
}

#[derive(Debug, Clone)]
pub struct Resources {
    pub compute_cores: Vec<ComputeCore>,
    /// Name of the single I/O channel in the event log.
    pub io_channel: String,
}

impl Resources {
    pub fn symmetric_cpu(n: usize) -> Self {
        Resources {
            compute_cores: (0..n)
                .map(|i| ComputeCore { name: format!("cpu{i}"), speed: 1, npu: false })
                .collect(),
            io_channel: "io".to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.compute_cores.is_empty() {
            return Err(Error::constraint("at least one compute core required".to_string()));
        }
        if self.compute_cores.iter().any(|c| c.speed == 0) {
            return Err(Error::constraint("core speed must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EventKind {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub time: u64,
    pub resource: String,
    pub task_id: u32,
    pub matrix_id: u32,
    pub cluster_id: u32,
    pub stage: Stage,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventLog {
    pub events: Vec<Event>,
    pub makespan: u64,
}

impl EventLog {
    /// Serializes the log with a stable column order for fixture diffs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,resource,task,matrix,cluster,stage,kind\n");
        for e in &self.events {
            let kind = match e.kind {
                EventKind::Start => "start",
                EventKind::End => "end",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.time, e.resource, e.task_id, e.matrix_id, e.cluster_id, e.stage, kind
            ));
        }
        out
    }
}

/// Expands matrix descriptions into scheduler tasks. Matrix ids must be
/// strictly increasing (a later matrix depending on an earlier one
/// would make the dependency graph cyclic) and work amounts positive.
pub fn build_tasks(matrices: &[MatrixSpec]) -> Result<Vec<ClusterTask>> {
    let mut tasks = Vec::new();
    let mut prev_matrix: Option<u32> = None;
    for m in matrices {
        if let Some(p) = prev_matrix {
            if m.matrix_id <= p {
                return Err(Error::constraint(format!(
                    "matrix ids must be strictly increasing ({} after {p} creates a cycle)",
                    m.matrix_id
                )));
            }
        }
        prev_matrix = Some(m.matrix_id);
        for c in &m.clusters {
            let d = c.durations;
            if d.pred == 0 || d.gate_compute == 0 || d.updown_compute == 0 {
                return Err(Error::constraint("compute durations must be positive".to_string()));
            }
            if !c.resident && (d.gate_io == 0 || d.updown_io == 0) {
                return Err(Error::constraint("I/O durations must be positive".to_string()));
            }
            let io = |w: u64| if c.resident { None } else { Some(w) };
            tasks.push(ClusterTask {
                task_id: tasks.len() as u32,
                matrix_id: m.matrix_id,
                cluster_id: c.cluster_id,
                npu: c.npu,
                stages: [
                    Some(d.pred),
                    io(d.gate_io),
                    Some(d.gate_compute),
                    io(d.updown_io),
                    Some(d.updown_compute),
                ],
            });
        }
    }
    Ok(tasks)
}

/// Node index into the flattened (task, stage) graph.
type Node = usize;

struct Graph {
    /// (task index, stage index) per node, present stages only.
    nodes: Vec<(usize, usize)>,
    succs: Vec<Vec<Node>>,
    indegree: Vec<u32>,
}

fn build_graph(tasks: &[ClusterTask], policy: Policy) -> Graph {
    let mut nodes = Vec::new();
    let mut entry = vec![0; tasks.len()];
    let mut exit = vec![0; tasks.len()];
    let mut node_of = vec![[None; 5]; tasks.len()];
    for (ti, t) in tasks.iter().enumerate() {
        let mut first = None;
        for si in 0..5 {
            if t.stages[si].is_some() {
                let id = nodes.len();
                nodes.push((ti, si));
                node_of[ti][si] = Some(id);
                if first.is_none() {
                    first = Some(id);
                }
                exit[ti] = id;
            }
        }
        entry[ti] = first.expect("task with no stages");
    }
    let mut succs = vec![Vec::new(); nodes.len()];
    let mut indegree = vec![0u32; nodes.len()];
    let add_edge = |succs: &mut Vec<Vec<Node>>, indegree: &mut Vec<u32>, a: Node, b: Node| {
        succs[a].push(b);
        indegree[b] += 1;
    };
    // Serial chain within each cluster.
    for (ti, t) in tasks.iter().enumerate() {
        let mut prev: Option<Node> = None;
        for si in 0..5 {
            if t.stages[si].is_none() {
                continue;
            }
            let n = node_of[ti][si].unwrap();
            if let Some(p) = prev {
                add_edge(&mut succs, &mut indegree, p, n);
            }
            prev = Some(n);
        }
    }
    // Cross-matrix dependencies. Tasks are grouped by matrix id; within
    // a group they keep build order, which pairs cluster positions of
    // consecutive matrices.
    let mut groups: Vec<(u32, Vec<usize>)> = Vec::new();
    for (ti, t) in tasks.iter().enumerate() {
        match groups.last_mut() {
            Some((id, v)) if *id == t.matrix_id => v.push(ti),
            _ => groups.push((t.matrix_id, vec![ti])),
        }
    }
    for w in groups.windows(2) {
        let (_, ref a) = w[0];
        let (_, ref b) = w[1];
        match policy {
            Policy::MatrixLevel => {
                // Barrier: every stage of A precedes B's first compute
                // stage (the rest of B follows via its serial chain).
                for &ta in a {
                    for si in 0..5 {
                        if let Some(n) = node_of[ta][si] {
                            for &tb in b {
                                add_edge(&mut succs, &mut indegree, n, entry[tb]);
                            }
                        }
                    }
                }
            }
            Policy::ClusterLevel => {
                // Data flow only: B's cluster j consumes A's cluster j.
                for (j, &tb) in b.iter().enumerate() {
                    let ta = a[j % a.len()];
                    add_edge(&mut succs, &mut indegree, exit[ta], entry[tb]);
                }
            }
        }
    }
    Graph { nodes, succs, indegree }
}

/// Runs list scheduling over the task graph and returns the event log.
pub fn simulate(tasks: &[ClusterTask], resources: &Resources, policy: Policy) -> Result<EventLog> {
    resources.validate()?;
    if tasks.iter().any(|t| t.npu) && !resources.compute_cores.iter().any(|c| c.npu) {
        return Err(Error::constraint("NPU tasks require an NPU core".to_string()));
    }
    let graph = build_graph(tasks, policy);
    let n = graph.nodes.len();

    // Cores in assignment preference order: fastest first, then input
    // order. `core_order[k]` is an index into resources.compute_cores.
    let mut core_order: Vec<usize> = (0..resources.compute_cores.len()).collect();
    core_order.sort_by_key(|&i| (std::cmp::Reverse(resources.compute_cores[i].speed), i));

    let mut indegree = graph.indegree.clone();
    // Ready compute stages ordered by (task id, stage); ready I/O
    // stages ordered FIFO by the time they became ready.
    let mut ready_compute: BTreeSet<(u32, usize, Node)> = BTreeSet::new();
    let mut ready_io: BTreeSet<(u64, u32, usize, Node)> = BTreeSet::new();
    let push_ready =
        |node: Node, at: u64, rc: &mut BTreeSet<(u32, usize, Node)>, ri: &mut BTreeSet<(u64, u32, usize, Node)>, tasks: &[ClusterTask], graph: &Graph| {
            let (ti, si) = graph.nodes[node];
            if STAGES[si].is_io() {
                ri.insert((at, tasks[ti].task_id, si, node));
            } else {
                rc.insert((tasks[ti].task_id, si, node));
            }
        };
    for node in 0..n {
        if indegree[node] == 0 {
            push_ready(node, 0, &mut ready_compute, &mut ready_io, tasks, &graph);
        }
    }

    // running[k] = Some((end time, node)) for core k; io_running likewise.
    let mut running: Vec<Option<(u64, Node)>> = vec![None; resources.compute_cores.len()];
    let mut io_running: Option<(u64, Node)> = None;
    let mut events: Vec<Event> = Vec::new();
    let mut finished = 0usize;
    let mut now = 0u64;

    let emit = |events: &mut Vec<Event>, time: u64, resource: &str, node: Node, kind: EventKind, tasks: &[ClusterTask], graph: &Graph| {
        let (ti, si) = graph.nodes[node];
        let t = &tasks[ti];
        events.push(Event {
            time,
            resource: resource.to_string(),
            task_id: t.task_id,
            matrix_id: t.matrix_id,
            cluster_id: t.cluster_id,
            stage: STAGES[si],
            kind,
        });
    };

    while finished < n {
        // Assign ready I/O to the single channel, FIFO.
        if io_running.is_none() {
            if let Some(&key @ (ready_at, _, _, node)) = ready_io.iter().next() {
                if ready_at <= now {
                    ready_io.remove(&key);
                    let (ti, si) = graph.nodes[node];
                    let dur = tasks[ti].stages[si].unwrap();
                    io_running = Some((now + dur, node));
                    emit(&mut events, now, &resources.io_channel, node, EventKind::Start, tasks, &graph);
                }
            }
        }
        // Assign ready compute stages to idle eligible cores,
        // fastest-core-first, lowest-task-id first.
        loop {
            let Some(&key @ (_, _, node)) = ready_compute.iter().next() else { break };
            let (ti, _) = graph.nodes[node];
            let want_npu = tasks[ti].npu;
            let core = core_order
                .iter()
                .copied()
                .find(|&k| running[k].is_none() && resources.compute_cores[k].npu == want_npu);
            let Some(core) = core else { break };
            ready_compute.remove(&key);
            let (ti, si) = graph.nodes[node];
            let work = tasks[ti].stages[si].unwrap();
            let dur = work.div_ceil(resources.compute_cores[core].speed);
            running[core] = Some((now + dur, node));
            emit(&mut events, now, &resources.compute_cores[core].name, node, EventKind::Start, tasks, &graph);
        }
        // Work conservation: no idle core of a kind with ready work.
        debug_assert!(ready_compute.iter().all(|&(_, _, node)| {
            let want_npu = tasks[graph.nodes[node].0].npu;
            !core_order
                .iter()
                .any(|&k| running[k].is_none() && resources.compute_cores[k].npu == want_npu)
        }));

        // Advance to the earliest completion (or I/O arrival).
        let mut next = u64::MAX;
        for r in running.iter().flatten() {
            next = next.min(r.0);
        }
        if let Some((end, _)) = io_running {
            next = next.min(end);
        } else if let Some(&(ready_at, _, _, _)) = ready_io.iter().next() {
            if ready_at > now {
                next = next.min(ready_at);
            }
        }
        if next == u64::MAX {
            return Err(Error::internal(
                "scheduler stalled: cyclic or unsatisfiable dependencies".to_string(),
            ));
        }
        now = next;

        // Retire completions at `now` and release their successors.
        let mut done: Vec<(Node, String)> = Vec::new();
        for (k, slot) in running.iter_mut().enumerate() {
            if let Some((end, node)) = *slot {
                if end == now {
                    done.push((node, resources.compute_cores[k].name.clone()));
                    *slot = None;
                }
            }
        }
        if let Some((end, node)) = io_running {
            if end == now {
                done.push((node, resources.io_channel.clone()));
                io_running = None;
            }
        }
        done.sort_by_key(|&(node, _)| {
            let (ti, si) = graph.nodes[node];
            (tasks[ti].task_id, si)
        });
        for (node, resource) in done {
            emit(&mut events, now, &resource, node, EventKind::End, tasks, &graph);
            finished += 1;
            for &s in &graph.succs[node] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    push_ready(s, now, &mut ready_compute, &mut ready_io, tasks, &graph);
                }
            }
        }
    }

    events.sort_by(|a, b| {
        let rank = |k: EventKind| if k == EventKind::End { 0 } else { 1 };
        (a.time, rank(a.kind), a.resource.as_str(), a.task_id, a.stage)
            .cmp(&(b.time, rank(b.kind), b.resource.as_str(), b.task_id, b.stage))
    });
    let makespan = events.iter().map(|e| e.time).max().unwrap_or(0);
    Ok(EventLog { events, makespan })
}

/// Busy fractions and overlap structure extracted from an event log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Utilization {
    pub makespan: u64,
    /// (resource name, busy fraction of makespan), sorted by name.
    pub busy: Vec<(String, f64)>,
    /// Fraction of the makespan where compute and I/O are both busy.
    pub overlap_fraction: f64,
    /// Time with I/O busy but no compute core busy.
    pub io_only_ns: u64,
    /// Time with at least one compute core busy.
    pub compute_ns: u64,
    /// Time with no resource busy at all (idle bubbles).
    pub idle_ns: u64,
}

fn union_measure(mut intervals: Vec<(u64, u64)>) -> Vec<(u64, u64)> {
    intervals.sort();
    let mut merged: Vec<(u64, u64)> = Vec::new();
    for (s, e) in intervals {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
}

fn intersect_measure(a: &[(u64, u64)], b: &[(u64, u64)]) -> u64 {
    let (mut i, mut j, mut total) = (0, 0, 0u64);
    while i < a.len() && j < b.len() {
        let s = a[i].0.max(b[j].0);
        let e = a[i].1.min(b[j].1);
        if s < e {
            total += e - s;
        }
        if a[i].1 <= b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Computes exact interval arithmetic over a log produced by
/// [`simulate`]. Also verifies the per-resource non-overlap invariant.
pub fn utilization(log: &EventLog) -> Result<Utilization> {
    if log.events.is_empty() {
        return Err(Error::constraint("empty event log".to_string()));
    }
    use std::collections::BTreeMap;
    let mut open: BTreeMap<(String, u32, Stage), u64> = BTreeMap::new();
    let mut per_resource: BTreeMap<String, Vec<(u64, u64)>> = BTreeMap::new();
    let mut compute_iv: Vec<(u64, u64)> = Vec::new();
    let mut io_iv: Vec<(u64, u64)> = Vec::new();
    for e in &log.events {
        let key = (e.resource.clone(), e.task_id, e.stage);
        match e.kind {
            EventKind::Start => {
                open.insert(key, e.time);
            }
            EventKind::End => {
                let start = open
                    .remove(&key)
                    .ok_or_else(|| Error::constraint("end event without start".to_string()))?;
                per_resource.entry(e.resource.clone()).or_default().push((start, e.time));
                if e.stage.is_io() {
                    io_iv.push((start, e.time));
                } else {
                    compute_iv.push((start, e.time));
                }
            }
        }
    }
    if !open.is_empty() {
        return Err(Error::constraint("start event without end".to_string()));
    }
    let mut busy = Vec::new();
    for (name, ivs) in &per_resource {
        let merged = union_measure(ivs.clone());
        let raw: u64 = ivs.iter().map(|(s, e)| e - s).sum();
        let merged_total: u64 = merged.iter().map(|(s, e)| e - s).sum();
        if raw != merged_total {
            return Err(Error::constraint(format!("overlapping intervals on resource {name}")));
        }
        busy.push((name.clone(), merged_total as f64 / log.makespan as f64));
    }
    let compute_u = union_measure(compute_iv);
    let io_u = union_measure(io_iv);
    let compute_ns: u64 = compute_u.iter().map(|(s, e)| e - s).sum();
    let io_ns: u64 = io_u.iter().map(|(s, e)| e - s).sum();
    let both = intersect_measure(&compute_u, &io_u);
    let covered = compute_ns + io_ns - both;
    Ok(Utilization {
        makespan: log.makespan,
        busy,
        overlap_fraction: both as f64 / log.makespan as f64,
        io_only_ns: io_ns - both,
        compute_ns,
        idle_ns: log.makespan - covered,
    })
}

/// Builds the canonical two-matrix instance used throughout the tests:
/// 2 matrices × 8 clusters, the first `resident_per_matrix` clusters of
/// each matrix resident, the rest loaded from flash.
pub fn two_matrix_instance(
    resident_per_matrix: usize,
    compute: u64,
    io: u64,
) -> Vec<MatrixSpec> {
    (0..2u32)
        .map(|m| MatrixSpec {
            matrix_id: m,
            clusters: (0..8u32)
                .map(|c| ClusterSpec {
                    cluster_id: c,
                    resident: (c as usize) < resident_per_matrix,
                    npu: false,
                    durations: StageDurations::uniform(compute, io),
                })
                .collect(),
        })
        .collect()
}
