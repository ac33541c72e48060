//! Training-set resampling: farthest point sampling picks block centers and
//! each center gathers its nearest neighbors into one block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_ply, PcioError, PlyFormat, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResampleConfig {
    /// Points per block; also the divisor in `K = ceil(N / cluster_point_count)`.
    pub cluster_point_count: usize,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            cluster_point_count: 100_000,
        }
    }
}

impl ResampleConfig {
    pub fn center_count(&self, n: usize) -> usize {
        n.div_ceil(self.cluster_point_count)
    }
}

#[inline]
fn dist2(a: [i32; 3], b: [i32; 3]) -> i64 {
    (0..3)
        .map(|k| {
            let d = (a[k] - b[k]) as i64;
            d * d
        })
        .sum()
}

/// Greedy max-min farthest point sampling starting from row 0.
///
/// Ties go to the lowest row index.
pub fn farthest_point_sample(pc: &PointCloud, k: usize) -> Result<Vec<usize>, PcioError> {
    let n = pc.len();
    if k > n || k == 0 {
        return Err(PcioError::TooMany {
            requested: k,
            available: n,
        });
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![i64::MAX; n];
    let mut next = 0usize;
    for _ in 0..k {
        chosen.push(next);
        let c = pc.coords[next];
        let mut best = (i64::MIN, 0usize);
        for (i, (d, &p)) in min_d.iter_mut().zip(&pc.coords).enumerate() {
            let nd = dist2(c, p);
            if nd < *d {
                *d = nd;
            }
            if *d > best.0 {
                best = (*d, i);
            }
        }
        next = best.1;
    }
    Ok(chosen)
}

/// For each center, the `m` nearest rows ordered by (distance, row index).
pub fn knn_indices(
    pc: &PointCloud,
    centers: &[usize],
    m: usize,
) -> Result<Vec<Vec<usize>>, PcioError> {
    let n = pc.len();
    if m > n || m == 0 {
        return Err(PcioError::TooMany {
            requested: m,
            available: n,
        });
    }
    let mut keyed: Vec<(i64, usize)> = Vec::with_capacity(n);
    Ok(centers
        .iter()
        .map(|&c| {
            let cc = pc.coords[c];
            keyed.clear();
            keyed.extend(pc.coords.iter().enumerate().map(|(i, &p)| (dist2(cc, p), i)));
            if m < n {
                keyed.select_nth_unstable(m - 1);
            }
            let mut top: Vec<(i64, usize)> = keyed[..m].to_vec();
            top.sort_unstable();
            top.into_iter().map(|(_, i)| i).collect()
        })
        .collect())
}

/// One block per center; block rows follow the source cloud's order so a
/// block of a lexicographically sorted cloud stays sorted. Blocks may overlap.
pub fn knn_cluster(
    pc: &PointCloud,
    centers: &[usize],
    m: usize,
) -> Result<Vec<PointCloud>, PcioError> {
    Ok(knn_indices(pc, centers, m)?
        .into_iter()
        .map(|mut rows| {
            rows.sort_unstable();
            pc.subset(&rows)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Block {
    pub center_index: usize,
    pub cloud: PointCloud,
}

/// `K = ceil(N / cluster_point_count)` FPS centers, each gathering
/// `min(cluster_point_count, N)` nearest points.
pub fn resample(pc: &PointCloud, config: &ResampleConfig) -> Result<Vec<Block>, PcioError> {
    if pc.is_empty() {
        return Err(PcioError::EmptyCloud);
    }
    if config.cluster_point_count == 0 {
        return Err(PcioError::InvalidValue("cluster_point_count must be positive".into()));
    }
    let k = config.center_count(pc.len());
    let centers = farthest_point_sample(pc, k)?;
    let m = config.cluster_point_count.min(pc.len());
    let blocks = knn_cluster(pc, &centers, m)?;
    Ok(centers
        .into_iter()
        .zip(blocks)
        .map(|(center_index, cloud)| Block {
            center_index,
            cloud,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockIndexEntry {
    pub file: String,
    pub source: String,
    pub frame: usize,
    pub center_index: usize,
    pub point_count: usize,
}

/// Write `block_NNNNN.ply` files into `dir`, numbered from `first_number`.
pub fn write_blocks(
    dir: &Path,
    source: &str,
    frame: usize,
    blocks: &[Block],
    first_number: usize,
) -> Result<Vec<BlockIndexEntry>, PcioError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(blocks.len());
    for (i, b) in blocks.iter().enumerate() {
        let file = format!("block_{:05}.ply", first_number + i);
        std::fs::write(
            dir.join(&file),
            write_ply(&b.cloud.to_raw(), PlyFormat::BinaryLittleEndian),
        )?;
        entries.push(BlockIndexEntry {
            file,
            source: source.to_string(),
            frame,
            center_index: b.center_index,
            point_count: b.cloud.len(),
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(coords: Vec<[i32; 3]>) -> PointCloud {
        let n = coords.len();
        PointCloud {
            coords,
            attrs: vec![[0.5; 3]; n],
            bit_depth: 10,
        }
    }

    #[test]
    fn cube_corners_diameter_pair() {
        let mut corners = Vec::new();
        for x in [0, 1] {
            for y in [0, 1] {
                for z in [0, 1] {
                    corners.push([x, y, z]);
                }
            }
        }
        let pc = cloud(corners);
        let sel = farthest_point_sample(&pc, 2).unwrap();
        assert_eq!(pc.coords[sel[1]], [1, 1, 1]);
        let all = farthest_point_sample(&pc, 8).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn knn_edge_cases() {
        let pc = cloud((0..10).map(|i| [i, 0, 0]).collect());
        let whole = knn_cluster(&pc, &[3], 10).unwrap();
        assert_eq!(whole[0], pc);
        let singles = knn_cluster(&pc, &[2, 7], 1).unwrap();
        assert_eq!(singles[0].coords, vec![[2, 0, 0]]);
        assert_eq!(singles[1].coords, vec![[7, 0, 0]]);
        assert!(knn_cluster(&pc, &[0], 11).is_err());
        assert!(farthest_point_sample(&pc, 11).is_err());
    }

    #[test]
    fn knn_ties_prefer_lower_rows() {
        let pc = cloud(vec![[0, 0, 0], [-1, 0, 0], [1, 0, 0], [0, 2, 0]]);
        let idx = knn_indices(&pc, &[0], 2).unwrap();
        assert_eq!(idx[0], vec![0, 1]);
    }

    #[test]
    fn center_count_rule() {
        let cfg = ResampleConfig::default();
        assert_eq!(cfg.center_count(250_000), 3);
        assert_eq!(cfg.center_count(100_000), 1);
        assert_eq!(cfg.center_count(100_001), 2);
    }
}
