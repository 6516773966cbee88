//! Wavefront OBJ output for extracted meshes (`v`, `vn`, `f v//vn`).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use super::TriangleMesh;

pub fn write_obj<W: Write>(mesh: &TriangleMesh, out: W) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for n in &mesh.vertex_normals {
        writeln!(out, "vn {} {} {}", n.x, n.y, n.z)?;
    }
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| i + 1);
        writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}")?;
    }
    out.flush()
}

pub fn write_obj_file(mesh: &TriangleMesh, path: &Path) -> io::Result<()> {
    write_obj(mesh, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    #[test]
    fn writes_one_based_faces() {
        let mesh = TriangleMesh {
            vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::y()],
            vertex_normals: vec![Vec3::z(); 3],
            triangles: vec![[0, 1, 2]],
        };
        let mut buf = Vec::new();
        write_obj(&mesh, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("vn ")).count(), 3);
        assert!(text.contains("f 1//1 2//2 3//3"));
    }
}
