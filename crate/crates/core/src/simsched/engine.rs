//! List scheduler over a task DAG with one server per resource.
//!
//! A task becomes ready once all its dependencies are placed. Each resource
//! runs at most one task at a time and never idles while it has a ready task;
//! among tasks ready by the time the resource frees up, the one created first
//! wins. Tasks are placed globally in order of start time, so the result is a
//! deterministic function of the graph.

use std::collections::BTreeSet;

use super::{Label, Resource};

#[derive(Clone, Debug)]
pub(crate) struct Task {
    pub resource: Resource,
    pub label: Label,
    pub bucket: Option<u32>,
    pub iteration: u32,
    pub duration: f64,
    pub deps: Vec<usize>,
    /// Placed like any other task but left out of the trace.
    pub hidden: bool,
}

#[derive(Default)]
pub(crate) struct Graph {
    pub tasks: Vec<Task>,
}

impl Graph {
    pub fn add(
        &mut self,
        resource: Resource,
        label: Label,
        bucket: Option<usize>,
        iteration: u32,
        duration: f64,
        deps: Vec<usize>,
    ) -> usize {
        debug_assert!(
            duration >= 0.0 && duration.is_finite(),
            "{label:?} duration {duration}"
        );
        debug_assert!(deps.iter().all(|&d| d < self.tasks.len()));
        self.tasks.push(Task {
            resource,
            label,
            bucket: bucket.map(|b| b as u32),
            iteration,
            duration,
            deps,
            hidden: false,
        });
        self.tasks.len() - 1
    }

    pub fn hide(&mut self, task: usize) {
        self.tasks[task].hidden = true;
    }
}

/// Nonnegative finite f64 keyed by its bit pattern, which orders the same way.
fn key(t: f64) -> u64 {
    debug_assert!(t >= 0.0);
    t.to_bits()
}

/// Returns `(start, end)` per task, indexed like `graph.tasks`.
pub(crate) fn run(graph: &Graph) -> Vec<(f64, f64)> {
    let n = graph.tasks.len();
    let mut dependents = vec![Vec::new(); n];
    let mut waiting = vec![0usize; n];
    for (i, t) in graph.tasks.iter().enumerate() {
        waiting[i] = t.deps.len();
        for &d in &t.deps {
            dependents[d].push(i);
        }
    }
    let resources = Resource::ALL.len();
    let mut pending: Vec<BTreeSet<(u64, usize)>> = vec![BTreeSet::new(); resources];
    let mut released: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); resources];
    let mut free = vec![0.0f64; resources];
    let mut earliest = vec![0.0f64; n];
    let mut times = vec![(f64::NAN, f64::NAN); n];

    for (i, t) in graph.tasks.iter().enumerate() {
        if waiting[i] == 0 {
            pending[t.resource.index()].insert((key(0.0), i));
        }
    }

    for _ in 0..n {
        let mut choice: Option<(f64, usize, usize)> = None;
        for r in 0..resources {
            while let Some(&(k, i)) = pending[r].first() {
                if f64::from_bits(k) <= free[r] {
                    pending[r].pop_first();
                    released[r].insert(i);
                } else {
                    break;
                }
            }
            let candidate = if let Some(&i) = released[r].first() {
                Some((free[r], i))
            } else {
                pending[r].first().map(|&(k, i)| (f64::from_bits(k), i))
            };
            if let Some((start, i)) = candidate {
                if choice.map_or(true, |(s, _, _)| start < s) {
                    choice = Some((start, r, i));
                }
            }
        }
        let (start, r, i) = choice.expect("task graph has a cycle");
        if !released[r].remove(&i) {
            pending[r].remove(&(key(earliest[i]), i));
        }
        let end = start + graph.tasks[i].duration;
        times[i] = (start, end);
        free[r] = end;
        for &j in &dependents[i] {
            earliest[j] = earliest[j].max(end);
            waiting[j] -= 1;
            if waiting[j] == 0 {
                pending[graph.tasks[j].resource.index()].insert((key(earliest[j]), j));
            }
        }
    }
    times
}
