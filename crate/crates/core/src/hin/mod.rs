//! Heterogeneous information network: schema, loading, adjacency,
//! normalization, interaction splits and a planted-structure generator.

mod graph;
mod schema;
mod split;
mod synth;

pub use graph::{apply_feature_file, load_hin, random_features, Edge, Hin, LoadReport};
pub use schema::{EdgeType, NodeType, Schema};
pub use split::{split_interactions, Interaction, InteractionSplit, SplitPolicy};
pub use synth::{synth_generate, synth_graph, SynthConfig, EDGE_FILE, SCHEMA_FILE};

use crate::error::{Error, Result};
use crate::tensor::SparseMatrix;

/// Divides each nonzero row by its row sum; zero rows stay zero.
pub fn degree_normalize(a: &SparseMatrix) -> Result<SparseMatrix> {
    if let Some((r, c, v)) = a.triplets().find(|t| t.2 < 0.0) {
        return Err(Error::Domain(format!("negative entry {v} at ({r}, {c})")));
    }
    let inv: Vec<f64> = a
        .row_sums()
        .into_iter()
        .map(|s| if s > 0.0 { 1.0 / s } else { 1.0 })
        .collect();
    a.scale_rows(&inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_ones_become_halves() {
        let a = SparseMatrix::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 1.0)]).unwrap();
        let n = degree_normalize(&a).unwrap();
        assert_eq!(n.get(0, 0), 0.5);
        assert_eq!(n.get(0, 2), 0.5);
        assert_eq!(n.row_sums()[1], 0.0);
    }

    #[test]
    fn negative_rejected() {
        let a = SparseMatrix::from_triplets(1, 2, vec![(0, 0, -1.0)]).unwrap();
        assert!(matches!(degree_normalize(&a), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn rows_sum_to_zero_or_one(
            entries in proptest::collection::vec((0usize..8, 0usize..8, 0.0f64..5.0), 0..40)
        ) {
            let a = SparseMatrix::from_triplets(8, 8, entries).unwrap();
            for s in degree_normalize(&a).unwrap().row_sums() {
                prop_assert!(s == 0.0 || (s - 1.0).abs() <= 1e-12);
            }
        }
    }
}
