//! Discrete architectures and their derivation from architecture weights.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::arch::{cell_edges, ArchParams, Relaxation};
use super::ops::OpKind;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const DEFAULT_THRESHOLD: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeriveMode {
    /// Best non-zero op per edge, then the two strongest edges per node.
    ArgmaxTop2,
    /// Every non-zero (edge, op) whose relaxed weight exceeds the threshold.
    SigmoidThreshold,
}

/// Retained `(source node, target node, op)` triples per cell type, sorted
/// by target, then source, then op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub relaxation: Relaxation,
    pub threshold: Option<f64>,
    pub normal: Vec<(usize, usize, OpKind)>,
    pub reduce: Vec<(usize, usize, OpKind)>,
}

impl Genotype {
    pub fn cell(&self, reduction: bool) -> &[(usize, usize, OpKind)] {
        if reduction {
            &self.reduce
        } else {
            &self.normal
        }
    }

    /// Checks the structural invariants for a cell with `nodes` intermediate
    /// nodes drawing from `ops`.
    pub fn validate(&self, nodes: usize, ops: &[OpKind]) -> Result<()> {
        for (label, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            let mut seen = std::collections::BTreeSet::new();
            for &(src, dst, op) in cell.iter() {
                let bad = |why: &str| Err(Error::Structural(format!("{label} edge {src}->{dst} ({op}): {why}")));
                if op == OpKind::Zero {
                    return bad("zero op retained");
                }
                if !ops.contains(&op) {
                    return bad("op not in the search space");
                }
                if src >= dst || dst < 2 || dst >= 2 + nodes {
                    return bad("edge outside the cell");
                }
                if !seen.insert((src, dst, op)) {
                    return bad("duplicate entry");
                }
            }
            for dst in 2..2 + nodes {
                if !cell.iter().any(|e| e.1 == dst) {
                    return Err(Error::Structural(format!("{label} node {dst} has no incoming edge")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// One scored candidate during derivation.
#[derive(Clone, Copy)]
struct Entry {
    src: usize,
    dst: usize,
    op: usize,
    weight: f64,
}

/// Larger weight first; ties to the lower op index, then the lower source.
fn rank(a: &Entry, b: &Entry) -> Ordering {
    b.weight
        .partial_cmp(&a.weight)
        .unwrap_or(Ordering::Equal)
        .then(a.op.cmp(&b.op))
        .then(a.src.cmp(&b.src))
}

fn derive_cell<T: Real>(arch: &ArchParams<T>, reduction: bool, mode: DeriveMode, threshold: f64) -> Vec<(usize, usize, OpKind)> {
    let weights = arch.relaxed(reduction);
    let n_ops = arch.ops.len();
    let edges = cell_edges(arch.nodes);
    let entries = |row: usize| -> Vec<Entry> {
        let (src, dst) = edges[row];
        (0..n_ops)
            .filter(|&o| arch.ops[o] != OpKind::Zero)
            .map(|o| Entry {
                src,
                dst,
                op: o,
                weight: weights.data()[row * n_ops + o],
            })
            .collect()
    };
    let mut kept: Vec<Entry> = Vec::new();
    for dst in 2..2 + arch.nodes {
        let rows: Vec<usize> = (0..edges.len()).filter(|&r| edges[r].1 == dst).collect();
        let all: Vec<Entry> = rows.iter().flat_map(|&r| entries(r)).collect();
        let mut chosen: Vec<Entry> = match mode {
            DeriveMode::ArgmaxTop2 => {
                let mut winners: Vec<Entry> = rows
                    .iter()
                    .filter_map(|&r| {
                        let mut e = entries(r);
                        e.sort_by(rank);
                        e.first().copied()
                    })
                    .collect();
                // Edge order: strongest winner first, ties to the lower source.
                winners.sort_by(|a, b| {
                    b.weight
                        .partial_cmp(&a.weight)
                        .unwrap_or(Ordering::Equal)
                        .then(a.src.cmp(&b.src))
                });
                winners.truncate(2);
                winners
            }
            DeriveMode::SigmoidThreshold => all.iter().filter(|e| e.weight > threshold).copied().collect(),
        };
        if chosen.is_empty() {
            let mut sorted = all.clone();
            sorted.sort_by(rank);
            chosen.extend(sorted.first().copied());
        }
        kept.extend(chosen);
    }
    let mut out: Vec<(usize, usize, OpKind)> = kept.iter().map(|e| (e.src, e.dst, arch.ops[e.op])).collect();
    out.sort_by_key(|&(s, d, op)| (d, s, op));
    out
}

/// Extract the discrete architecture. `threshold` must lie in (0, 1); it is
/// recorded in the genotype only for the threshold mode.
pub fn derive_genotype<T: Real>(arch: &ArchParams<T>, mode: DeriveMode, threshold: f64) -> Result<Genotype> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!("threshold {threshold} outside (0, 1)")));
    }
    arch.validate()?;
    if arch.ops.iter().all(|&k| k == OpKind::Zero) {
        return Err(Error::Parameter("search space has no non-zero operation".into()));
    }
    Ok(Genotype {
        relaxation: arch.relaxation,
        threshold: (mode == DeriveMode::SigmoidThreshold).then_some(threshold),
        normal: derive_cell(arch, false, mode, threshold),
        reduce: derive_cell(arch, true, mode, threshold),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn equal_weights_resolve_to_lowest_indices() {
        let arch = ArchParams::<f64>::zeros(4, &OpKind::ALL, Relaxation::Sigmoid);
        let g = derive_genotype(&arch, DeriveMode::ArgmaxTop2, 0.75).unwrap();
        // First non-zero op, two lowest sources per node.
        let expect: Vec<_> = (2..6)
            .flat_map(|d| [(0, d, OpKind::SkipConnect), (1, d, OpKind::SkipConnect)])
            .collect();
        assert_eq!(g.normal, expect);
        assert_eq!(g.threshold, None);
        let again = derive_genotype(&arch, DeriveMode::ArgmaxTop2, 0.75).unwrap();
        assert_eq!(g.to_json().unwrap(), again.to_json().unwrap());

        let t = derive_genotype(&arch, DeriveMode::SigmoidThreshold, 0.75).unwrap();
        // No entry passes; each node falls back to (src 0, first non-zero op).
        let expect: Vec<_> = (2..6).map(|d| (0, d, OpKind::SkipConnect)).collect();
        assert_eq!(t.normal, expect);
        assert_eq!(t.threshold, Some(0.75));
    }

    #[test]
    fn threshold_keeps_exactly_the_confident_ops() {
        let mut arch = ArchParams::<f64>::zeros(3, &OpKind::ALL, Relaxation::Sigmoid);
        let edges = arch.edges();
        let mut expect = Vec::new();
        for table in [&mut arch.normal, &mut arch.reduce] {
            for (row, &(s, d)) in edges.iter().enumerate() {
                let pick = 1 + (row * 3) % 7;
                for o in 0..8 {
                    table.data_mut()[row * 8 + o] = logit(if o == pick { 0.9 } else { 0.1 });
                }
                if expect.len() < edges.len() {
                    expect.push((s, d, OpKind::ALL[pick]));
                }
            }
        }
        expect.sort_by_key(|&(s, d, op)| (d, s, op));
        let g = derive_genotype(&arch, DeriveMode::SigmoidThreshold, 0.75).unwrap();
        assert_eq!(g.normal, expect);
        assert_eq!(g.reduce, expect);
        g.validate(3, &OpKind::ALL).unwrap();
    }

    #[test]
    fn starved_node_falls_back_to_its_best_entry() {
        let mut arch = ArchParams::<f64>::zeros(2, &OpKind::ALL, Relaxation::Sigmoid);
        arch.normal = arch.normal.map(|_| logit(0.1));
        // Node 2 (rows 0, 1) is all 0.1 except one slightly stronger entry.
        arch.normal.data_mut()[8 + 5] = logit(0.12);
        // Node 3 keeps two confident entries.
        arch.normal.data_mut()[2 * 8 + 4] = logit(0.9);
        arch.normal.data_mut()[4 * 8 + 6] = logit(0.8);
        let g = derive_genotype(&arch, DeriveMode::SigmoidThreshold, 0.75).unwrap();
        assert_eq!(
            g.normal,
            vec![
                (1, 2, OpKind::SepConv5x5),
                (0, 3, OpKind::SepConv3x3),
                (2, 3, OpKind::DilConv3x3)
            ]
        );
    }

    #[test]
    fn zero_op_is_never_retained() {
        let mut arch = ArchParams::<f64>::zeros(2, &OpKind::ALL, Relaxation::Softmax);
        for row in arch.normal.data_mut().chunks_mut(8) {
            row[0] = 10.0;
        }
        for mode in [DeriveMode::ArgmaxTop2, DeriveMode::SigmoidThreshold] {
            let g = derive_genotype(&arch, mode, 0.5).unwrap();
            assert!(g.normal.iter().all(|e| e.2 != OpKind::Zero));
            g.validate(2, &OpKind::ALL).unwrap();
        }
    }

    #[test]
    fn threshold_must_be_open_unit_interval() {
        let arch = ArchParams::<f64>::zeros(2, &OpKind::ALL, Relaxation::Sigmoid);
        for t in [0.0, 1.0, -0.5, 2.0, f64::NAN] {
            assert!(matches!(
                derive_genotype(&arch, DeriveMode::SigmoidThreshold, t),
                Err(Error::Parameter(_))
            ));
        }
    }

    #[test]
    fn json_uses_op_names_and_fixed_keys() {
        let g = Genotype {
            relaxation: Relaxation::Sigmoid,
            threshold: Some(0.75),
            normal: vec![(0, 2, OpKind::SepConv3x3)],
            reduce: vec![(1, 2, OpKind::MaxPool3x3)],
        };
        let v: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        assert_eq!(v["relaxation"], "sigmoid");
        assert_eq!(v["threshold"], 0.75);
        assert_eq!(v["normal"], serde_json::json!([[0, 2, "sep_conv_3x3"]]));
        assert_eq!(v["reduce"], serde_json::json!([[1, 2, "max_pool_3x3"]]));
        assert_eq!(Genotype::from_json(&g.to_json().unwrap()).unwrap(), g);
    }

    proptest! {
        #[test]
        fn argmax_choice_is_shift_covariant(
            vals in proptest::collection::vec(-3.0f64..3.0, 5 * 8),
            shifts in proptest::collection::vec(-5.0f64..5.0, 5),
        ) {
            let mut arch = ArchParams::<f64>::zeros(2, &OpKind::ALL, Relaxation::Softmax);
            arch.normal.data_mut().copy_from_slice(&vals);
            let g = derive_genotype(&arch, DeriveMode::ArgmaxTop2, 0.5).unwrap();
            let mut shifted = arch.clone();
            for (row, s) in shifted.normal.data_mut().chunks_mut(8).zip(&shifts) {
                for v in row {
                    *v += s;
                }
            }
            let h = derive_genotype(&shifted, DeriveMode::ArgmaxTop2, 0.5).unwrap();
            // Per-edge op choice is unchanged for every edge both retain.
            for &(s, d, op) in &h.normal {
                let row = arch.edges().iter().position(|&e| e == (s, d)).unwrap();
                let best = (1..8)
                    .max_by(|&a, &b| vals[row * 8 + a].partial_cmp(&vals[row * 8 + b]).unwrap().then(b.cmp(&a)))
                    .unwrap();
                prop_assert_eq!(op, OpKind::ALL[best]);
            }
            prop_assert_eq!(g.normal.len(), h.normal.len());
        }
    }
}
