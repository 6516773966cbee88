use std::collections::HashMap;

use super::mc_tables::{EDGE_TABLE, TRI_TABLE};
use super::{GeometryError, TriangleMesh, Vec3};

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn cube(center: Vec3, half_width: f64) -> Self {
        let h = Vec3::repeat(half_width);
        Self::new(center - h, center + h)
    }

    pub fn from_points(points: &[Vec3]) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Self { min, max }
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }
}

// Bourke corner numbering.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Extracts the zero level set of `field` sampled on a regular grid.
///
/// `resolution` counts grid samples per axis, so the cell width along an axis
/// is `extent / (resolution − 1)`. A field with no sign change yields an empty
/// mesh.
pub fn marching_cubes<F>(field: F, domain: &Aabb, resolution: [usize; 3]) -> Result<TriangleMesh, GeometryError>
where
    F: Fn(&Vec3) -> f64,
{
    marching_cubes_batched(
        |pts: &[Vec3]| pts.iter().map(&field).collect(),
        domain,
        resolution,
    )
}

/// Same as [`marching_cubes`] for fields that are cheaper to evaluate in batches.
///
/// Vertex normals are the normalized central-difference gradient of the field,
/// with step a quarter of the smallest cell width.
pub fn marching_cubes_batched<F>(
    mut field: F,
    domain: &Aabb,
    resolution: [usize; 3],
) -> Result<TriangleMesh, GeometryError>
where
    F: FnMut(&[Vec3]) -> Vec<f64>,
{
    let [nx, ny, nz] = resolution;
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(GeometryError::Resolution(resolution));
    }
    let ext = domain.max - domain.min;
    let step = Vec3::new(
        ext.x / (nx - 1) as f64,
        ext.y / (ny - 1) as f64,
        ext.z / (nz - 1) as f64,
    );
    let grid_point = |i: usize, j: usize, k: usize| {
        domain.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z)
    };
    let flat = |i: usize, j: usize, k: usize| (k * ny + j) * nx + i;

    let mut samples = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                samples.push(grid_point(i, j, k));
            }
        }
    }
    let values = field(&samples);
    assert_eq!(values.len(), samples.len(), "field returned wrong number of values");
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        let i = bad % nx;
        let j = (bad / nx) % ny;
        let k = bad / (nx * ny);
        return Err(GeometryError::NonFiniteField([i, j, k]));
    }

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corner_idx: [usize; 8] =
                    CORNERS.map(|c| flat(i + c[0], j + c[1], k + c[2]));
                let mut case = 0usize;
                for (bit, &ci) in corner_idx.iter().enumerate() {
                    if values[ci] < 0.0 {
                        case |= 1 << bit;
                    }
                }
                let edges = EDGE_TABLE[case];
                if edges == 0 {
                    continue;
                }
                let mut cube_verts = [u32::MAX; 12];
                for (e, [a, b]) in EDGES.iter().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    // Interpolate from the lower global corner so the result does
                    // not depend on which cell visits the edge, or on the sign of f.
                    let (ga, gb) = {
                        let (ga, gb) = (corner_idx[*a], corner_idx[*b]);
                        if ga < gb { (ga, gb) } else { (gb, ga) }
                    };
                    let id = *edge_vertex.entry((ga, gb)).or_insert_with(|| {
                        let (va, vb) = (values[ga], values[gb]);
                        let t = va / (va - vb);
                        let pa = samples[ga];
                        let pb = samples[gb];
                        vertices.push(pa + t * (pb - pa));
                        (vertices.len() - 1) as u32
                    });
                    cube_verts[e] = id;
                }
                for tri in TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [
                        cube_verts[tri[0] as usize],
                        cube_verts[tri[1] as usize],
                        cube_verts[tri[2] as usize],
                    ];
                    if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                        triangles.push(t);
                    }
                }
            }
        }
    }

    if vertices.is_empty() {
        return Ok(TriangleMesh::default());
    }

    let h = 0.25 * step.min();
    let mut probes = Vec::with_capacity(vertices.len() * 6);
    for v in &vertices {
        for axis in 0..3 {
            let mut d = Vec3::zeros();
            d[axis] = h;
            probes.push(v + d);
            probes.push(v - d);
        }
    }
    let probe_vals = field(&probes);
    let vertex_normals: Vec<Vec3> = probe_vals
        .chunks(6)
        .map(|c| {
            let g = Vec3::new(c[0] - c[1], c[2] - c[3], c[4] - c[5]);
            let n = g.norm();
            if n > 0.0 && n.is_finite() {
                g / n
            } else {
                Vec3::z()
            }
        })
        .collect();

    // Orient each face along the field gradient (outward for an SDF).
    for t in triangles.iter_mut() {
        let [a, b, c] = t.map(|i| vertices[i as usize]);
        let face = (b - a).cross(&(c - a));
        let avg = vertex_normals[t[0] as usize] + vertex_normals[t[1] as usize] + vertex_normals[t[2] as usize];
        if face.dot(&avg) < 0.0 {
            t.swap(1, 2);
        }
    }

    Ok(TriangleMesh {
        vertices,
        vertex_normals,
        triangles,
    })
}
