//! Distance-based outlier removal within clusters.

use crate::pipeline::kmeans::squared_distance;

#[derive(Clone, Debug, PartialEq)]
pub struct OutlierReport {
    /// Surviving cluster per sample; `None` when dropped.
    pub kept: Vec<Option<usize>>,
    pub dropped_outliers: usize,
    pub dropped_clusters: Vec<usize>,
}

/// Drop samples farther from their centroid than `mean + z·std` of their
/// cluster's distances, then drop clusters left with fewer than `min_cluster_size` members.
pub fn remove_outliers(
    assignments: &[usize],
    vectors: &[Vec<f64>],
    centroids: &[Vec<f64>],
    z_threshold: f64,
    min_cluster_size: usize,
) -> OutlierReport {
    let dist: Vec<f64> = assignments
        .iter()
        .zip(vectors)
        .map(|(&a, v)| squared_distance(v, &centroids[a]).sqrt())
        .collect();
    let mut kept: Vec<Option<usize>> = assignments.iter().map(|&a| Some(a)).collect();
    let mut dropped_outliers = 0;
    for c in 0..centroids.len() {
        let members: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mean = members.iter().map(|&i| dist[i]).sum::<f64>() / n;
        let var = members.iter().map(|&i| (dist[i] - mean).powi(2)).sum::<f64>() / n;
        let limit = mean + z_threshold * var.sqrt();
        for &i in &members {
            if dist[i] > limit && (dist[i] - mean).abs() > 1e-12 * mean.abs().max(1.0) {
                kept[i] = None;
                dropped_outliers += 1;
            }
        }
    }
    let mut dropped_clusters = Vec::new();
    for c in 0..centroids.len() {
        let size = kept.iter().filter(|k| **k == Some(c)).count();
        let had = assignments.contains(&c);
        if had && size < min_cluster_size {
            if size == 0 {
                log::warn!("cluster {c} emptied by outlier removal");
            }
            for k in kept.iter_mut().filter(|k| **k == Some(c)) {
                *k = None;
            }
            dropped_clusters.push(c);
        }
    }
    OutlierReport { kept, dropped_outliers, dropped_clusters }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equidistant_points_survive() {
        let v: Vec<Vec<f64>> = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]].iter().map(|p| p.to_vec()).collect();
        for z in [0.01, 1.0, 3.0] {
            let r = remove_outliers(&[0; 4], &v, &[vec![0.0, 0.0]], z, 1);
            assert!(r.kept.iter().all(Option::is_some));
        }
    }

    #[test]
    fn single_far_point_dropped() {
        let mut v: Vec<Vec<f64>> = (0..10).map(|i| vec![(i % 2) as f64 * 0.1, 0.0]).collect();
        v.push(vec![5.0, 0.0]);
        let r = remove_outliers(&[0; 11], &v, &[vec![0.05, 0.0]], 2.0, 1);
        assert_eq!(r.dropped_outliers, 1);
        assert_eq!(r.kept[10], None);
        assert!(r.kept[..10].iter().all(Option::is_some));
    }

    #[test]
    fn small_cluster_removed() {
        let v = vec![vec![0.0], vec![0.0], vec![9.0], vec![9.0], vec![9.0]];
        let r = remove_outliers(&[0, 0, 1, 1, 1], &v, &[vec![0.0], vec![9.0]], 2.0, 3);
        assert_eq!(r.dropped_clusters, vec![0]);
        assert_eq!(r.kept, vec![None, None, Some(1), Some(1), Some(1)]);
    }
}
