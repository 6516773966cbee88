use std::collections::HashMap;

use super::{Aabb, GeometryError, ScenePointCloud, Vec3};

type CellKey = (i64, i64, i64);

/// Uniform hash grid over a fixed point set for exact nearest-neighbor queries.
///
/// Queries scan Chebyshev shells of cells around the query cell and stop once
/// the best distance found is no larger than the distance to the next shell.
#[derive(Debug, Clone)]
pub struct SpatialHash {
    points: Vec<Vec3>,
    cell: f64,
    cells: HashMap<CellKey, Vec<u32>>,
    lo: CellKey,
    hi: CellKey,
}

impl SpatialHash {
    /// Cell size chosen so an average cell holds about four points.
    pub fn build(points: &[Vec3]) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        let bb = Aabb::from_points(points);
        let ext = bb.max - bb.min;
        let volume = ext.iter().map(|e| e.max(1e-9)).product::<f64>();
        let mut cell = (4.0 * volume / points.len() as f64).cbrt();
        // Flat clouds make the volume estimate meaningless.
        let area_cell = (4.0 * ext.x.max(1e-9) * ext.y.max(1e-9) / points.len() as f64).sqrt();
        cell = cell.max(area_cell.min(ext.max().max(1e-9)));
        Self::with_cell_size(points, cell.max(1e-9))
    }

    pub fn with_cell_size(points: &[Vec3], cell: f64) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = key(p, cell);
            lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
            hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
            cells.entry(k).or_default().push(i as u32);
        }
        Ok(Self {
            points: points.to_vec(),
            cell,
            cells,
            lo,
            hi,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and Euclidean distance of the closest point; ties go to the smaller index.
    pub fn nearest(&self, query: &Vec3) -> (usize, f64) {
        let q = key(query, self.cell);
        // Shells beyond this radius cannot contain anything.
        let max_ring = [
            (q.0 - self.lo.0).abs(),
            (q.0 - self.hi.0).abs(),
            (q.1 - self.lo.1).abs(),
            (q.1 - self.hi.1).abs(),
            (q.2 - self.lo.2).abs(),
            (q.2 - self.hi.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);

        let mut best = (usize::MAX, f64::INFINITY);
        let consider = |idx: &[u32], best: &mut (usize, f64)| {
            for &i in idx {
                let d2 = (self.points[i as usize] - query).norm_squared();
                let i = i as usize;
                if d2 < best.1 || (d2 == best.1 && i < best.0) {
                    *best = (i, d2);
                }
            }
        };

        for ring in 0..=max_ring {
            // A shell with more cells than the whole map is cheaper as a scan.
            let shell = (2 * ring + 1).pow(2) as usize * 6;
            if ring > 1 && shell > self.cells.len() {
                for idx in self.cells.values() {
                    consider(idx, &mut best);
                }
                break;
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    let edge = dx.abs() == ring || dy.abs() == ring;
                    if edge {
                        for dz in -ring..=ring {
                            if let Some(idx) = self.cells.get(&(q.0 + dx, q.1 + dy, q.2 + dz)) {
                                consider(idx, &mut best);
                            }
                        }
                    } else {
                        for dz in [-ring, ring] {
                            if let Some(idx) = self.cells.get(&(q.0 + dx, q.1 + dy, q.2 + dz)) {
                                consider(idx, &mut best);
                            }
                            if ring == 0 {
                                break;
                            }
                        }
                    }
                }
            }
            // Everything outside the scanned block is at least `ring·cell` away.
            let reach = ring as f64 * self.cell;
            if best.0 != usize::MAX && best.1 < reach * reach {
                break;
            }
        }
        (best.0, best.1.sqrt())
    }
}

#[inline]
fn key(p: &Vec3, cell: f64) -> CellKey {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// One-shot nearest-neighbor query against a cloud's positions.
///
/// Builds a [`SpatialHash`]; reuse one directly for repeated queries.
pub fn nearest_neighbor(query: &Vec3, cloud: &ScenePointCloud) -> Result<(usize, f64), GeometryError> {
    Ok(SpatialHash::build(cloud.positions())?.nearest(query))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rng_from_seed;
    use rand::Rng;

    fn brute_force(points: &[Vec3], q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    #[test]
    fn exact_hit_returns_zero_distance() {
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.5 * i as f64, 0.0)).collect();
        let h = SpatialHash::build(&pts).unwrap();
        assert_eq!(h.nearest(&pts[3]), (3, 0.0));
    }

    #[test]
    fn two_point_hand_case() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)];
        let (i, d) = SpatialHash::build(&pts).unwrap().nearest(&Vec3::new(0.4, 0.0, 0.0));
        assert_eq!(i, 0);
        assert!((d - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_smaller_index() {
        let pts = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)];
        let (i, _) = SpatialHash::build(&pts).unwrap().nearest(&Vec3::zeros());
        assert_eq!(i, 0);
        let pts = vec![Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)];
        let (i, _) = SpatialHash::build(&pts).unwrap().nearest(&Vec3::new(-0.5, 0.0, 0.0));
        assert_eq!(i, 0);
    }

    #[test]
    fn matches_linear_scan_on_random_clouds() {
        let mut rng = rng_from_seed(42);
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..0.1)))
            .collect();
        let h = SpatialHash::build(&pts).unwrap();
        for _ in 0..1000 {
            let q = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            let (i, d) = h.nearest(&q);
            let (bi, bd) = brute_force(&pts, &q);
            assert_eq!(i, bi);
            assert_eq!(d, bd);
        }
    }

    #[test]
    fn small_cells_still_find_distant_points() {
        let pts = vec![Vec3::zeros(), Vec3::new(10.0, 10.0, 10.0)];
        let h = SpatialHash::with_cell_size(&pts, 0.01).unwrap();
        assert_eq!(h.nearest(&Vec3::new(6.0, 6.0, 6.0)).0, 1);
        assert_eq!(h.nearest(&Vec3::new(-50.0, 0.0, 0.0)).0, 0);
    }

    #[test]
    fn empty_cloud_is_an_error() {
        assert!(SpatialHash::build(&[]).is_err());
    }
}
