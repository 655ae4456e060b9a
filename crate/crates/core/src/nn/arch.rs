//! Architecture weights: one real per (cell type, edge, operation).

use serde::{Deserialize, Serialize};

use super::ops::OpKind;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    Softmax,
    Sigmoid,
}

/// Enumerates edges `(src, dst)` of a cell with `nodes` intermediate nodes.
/// Nodes 0 and 1 are the cell inputs; intermediate node `j` has id `j + 2`
/// and receives an edge from every lower id. The position in the returned
/// list is the edge's row in [`ArchParams`].
pub fn cell_edges(nodes: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for dst in 2..2 + nodes {
        for src in 0..dst {
            edges.push((src, dst));
        }
    }
    edges
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams<T: Real> {
    pub relaxation: Relaxation,
    pub nodes: usize,
    pub ops: Vec<OpKind>,
    /// `[edges, ops]` for normal cells.
    pub normal: Tensor<T>,
    /// `[edges, ops]` for reduction cells.
    pub reduce: Tensor<T>,
}

impl<T: Real> ArchParams<T> {
    /// All weights zero: every operation starts with the same mixing weight.
    pub fn zeros(nodes: usize, ops: &[OpKind], relaxation: Relaxation) -> Self {
        let shape = [cell_edges(nodes).len(), ops.len()];
        ArchParams {
            relaxation,
            nodes,
            ops: ops.to_vec(),
            normal: Tensor::zeros(&shape),
            reduce: Tensor::zeros(&shape),
        }
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        cell_edges(self.nodes)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = [cell_edges(self.nodes).len(), self.ops.len()];
        for t in [&self.normal, &self.reduce] {
            if t.shape() != shape {
                return Err(Error::Structural(format!(
                    "architecture weights have shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Numeric("architecture weight is not finite".into()));
            }
        }
        Ok(())
    }

    pub fn table(&self, reduction: bool) -> &Tensor<T> {
        if reduction {
            &self.reduce
        } else {
            &self.normal
        }
    }

    /// Mixing weights for one table: σ(α) elementwise, or a softmax per edge.
    pub fn relaxed(&self, reduction: bool) -> Tensor<f64> {
        let a = self.table(reduction).cast::<f64>();
        match self.relaxation {
            Relaxation::Sigmoid => a.map(crate::autodiff::sigmoid),
            Relaxation::Softmax => {
                let mut out = a;
                let o = self.ops.len();
                for row in out.data_mut().chunks_mut(o) {
                    crate::autodiff::softmax_in_place(row);
                }
                out
            }
        }
    }

    /// Flat list of every α, normal table first.
    pub fn flat(&self) -> Vec<T> {
        self.normal.data().iter().chain(self.reduce.data()).copied().collect()
    }

    pub fn cast<U: Real>(&self) -> ArchParams<U> {
        ArchParams {
            relaxation: self.relaxation,
            nodes: self.nodes,
            ops: self.ops.clone(),
            normal: self.normal.cast(),
            reduce: self.reduce.cast(),
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::seed::Fnv1a::new();
        h.write_u64(self.normal.checksum());
        h.write_u64(self.reduce.checksum());
        h.finish()
    }
}

/// Mixing weights recorded on a tape, one `[edges, ops]` table per cell
/// type. A weight of exactly zero still evaluates its operation.
#[derive(Clone, Copy, Debug)]
pub struct MixWeights<'t, T: Real> {
    pub normal: Var<'t, T>,
    pub reduce: Var<'t, T>,
}

impl<'t, T: Real> MixWeights<'t, T> {
    /// Relax architecture variables already on the tape.
    pub fn relax(normal: Var<'t, T>, reduce: Var<'t, T>, relaxation: Relaxation) -> Self {
        let f = |v: Var<'t, T>| match relaxation {
            Relaxation::Sigmoid => v.sigmoid(),
            Relaxation::Softmax => v.softmax_last(),
        };
        MixWeights {
            normal: f(normal),
            reduce: f(reduce),
        }
    }

    /// Constant weights, e.g. 0/1 masks pinning a selection.
    pub fn fixed(tape: &'t Tape<T>, normal: Tensor<T>, reduce: Tensor<T>) -> Self {
        MixWeights {
            normal: tape.constant(normal),
            reduce: tape.constant(reduce),
        }
    }

    pub fn table(&self, reduction: bool) -> Var<'t, T> {
        if reduction {
            self.reduce
        } else {
            self.normal
        }
    }
}

/// Architecture variables bound to a tape together with their relaxation.
pub struct BoundArch<'t, T: Real> {
    pub normal: Var<'t, T>,
    pub reduce: Var<'t, T>,
    pub mix: MixWeights<'t, T>,
}

impl<T: Real> ArchParams<T> {
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> BoundArch<'t, T> {
        let normal = tape.leaf(self.normal.clone(), requires_grad);
        let reduce = tape.leaf(self.reduce.clone(), requires_grad);
        BoundArch {
            normal,
            reduce,
            mix: MixWeights::relax(normal, reduce, self.relaxation),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_node_cell_has_fourteen_edges() {
        let e = cell_edges(4);
        assert_eq!(e.len(), 14);
        assert_eq!(e[0], (0, 2));
        assert_eq!(e[2], (0, 3));
        assert_eq!(*e.last().unwrap(), (4, 5));
        assert!(e.iter().all(|&(s, d)| s < d));
    }

    #[test]
    fn relaxations_satisfy_their_ranges() {
        let mut a = ArchParams::<f64>::zeros(2, &OpKind::ALL, Relaxation::Softmax);
        for (i, v) in a.normal.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin() * 3.0;
        }
        for row in a.relaxed(false).data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        a.relaxation = Relaxation::Sigmoid;
        assert!(a.relaxed(false).data().iter().all(|&w| w > 0.0 && w < 1.0));
        assert!(a.relaxed(true).data().iter().all(|&w| w == 0.5));
    }
}
