//! Cluster templates: the member closest to all others.

use crate::error::{Error, Result};
use crate::pipeline::kmeans::squared_distance;

/// Index (into `members`) of the medoid under Euclidean distance; ties go to the
/// member with the smaller vector in lexicographic order, so the result does not
/// depend on member order.
pub fn medoid(members: &[usize], vectors: &[Vec<f64>]) -> Result<usize> {
    if members.is_empty() {
        return Err(Error::Empty("cluster"));
    }
    let cost = |i: usize| -> f64 {
        members
            .iter()
            .map(|&j| squared_distance(&vectors[i], &vectors[j]).sqrt())
            .sum()
    };
    let mut best = members[0];
    let mut best_cost = cost(best);
    for &m in &members[1..] {
        let c = cost(m);
        let lexically_smaller = || vectors[m].partial_cmp(&vectors[best]) == Some(std::cmp::Ordering::Less);
        if c < best_cost || (c == best_cost && lexically_smaller()) {
            best = m;
            best_cost = c;
        }
    }
    Ok(best)
}
