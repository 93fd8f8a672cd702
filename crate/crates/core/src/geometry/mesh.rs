use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use nalgebra::Matrix3;

use crate::{Error, Result, Vec3};

/// Default vertex color when an OBJ line carries no color triple.
pub const DEFAULT_GRAY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    vertex_colors: Vec<Vec3>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, vertex_colors: Vec<Vec3>) -> Result<Self> {
        if vertex_colors.len() != vertices.len() {
            return Err(Error::InvalidMesh(format!(
                "{} colors for {} vertices",
                vertex_colors.len(),
                vertices.len()
            )));
        }
        for (f, face) in faces.iter().enumerate() {
            for &index in face {
                if index >= vertices.len() {
                    return Err(Error::FaceIndex {
                        face: f,
                        index,
                        count: vertices.len(),
                    });
                }
            }
        }
        Ok(Self {
            vertices,
            faces,
            vertex_colors,
        })
    }

    pub fn uniform_color(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, color: Vec3) -> Result<Self> {
        let colors = alloc::vec![color; vertices.len()];
        Self::new(vertices, faces, colors)
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            faces: Vec::new(),
            vertex_colors: Vec::new(),
        }
    }

    /// Axis-aligned box with outward-facing triangles.
    pub fn cuboid(min: Vec3, max: Vec3, color: Vec3) -> Self {
        let v = |x: bool, y: bool, z: bool| {
            Vec3::new(
                if x { max.x } else { min.x },
                if y { max.y } else { min.y },
                if z { max.z } else { min.z },
            )
        };
        let vertices = alloc::vec![
            v(false, false, false),
            v(true, false, false),
            v(true, true, false),
            v(false, true, false),
            v(false, false, true),
            v(true, false, true),
            v(true, true, true),
            v(false, true, true),
        ];
        let faces = alloc::vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [1, 2, 6],
            [1, 6, 5],
            [2, 3, 7],
            [2, 7, 6],
            [3, 0, 4],
            [3, 4, 7],
        ];
        Self::uniform_color(vertices, faces, color).expect("cuboid topology is valid")
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_colors(&self) -> &[Vec3] {
        &self.vertex_colors
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Same topology and colors, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::shape(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
            vertex_colors: self.vertex_colors.clone(),
        })
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    /// `p' = rotation * (scale * p) + translation`
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: Vec3, scale: f64) -> Self {
        let vertices = self
            .vertices
            .iter()
            .map(|v| rotation * (v * scale) + translation)
            .collect();
        Self {
            vertices,
            faces: self.faces.clone(),
            vertex_colors: self.vertex_colors.clone(),
        }
    }

    /// Concatenates two meshes into one (no welding).
    pub fn merged(&self, other: &TriangleMesh) -> Self {
        let offset = self.vertices.len();
        let mut out = self.clone();
        out.vertices.extend_from_slice(&other.vertices);
        out.vertex_colors.extend_from_slice(&other.vertex_colors);
        out.faces
            .extend(other.faces.iter().map(|f| [f[0] + offset, f[1] + offset, f[2] + offset]));
        out
    }

    /// Largest distance of any vertex from the origin.
    pub fn max_radius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Parses the supported OBJ subset: `v x y z [r g b]`, `f i j k` with
/// 1-based indices, `#` comments and blank lines.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();
    let mut face_lines = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        match tokens.next() {
            Some("v") => {
                let values = tokens
                    .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number `{t}`"))))
                    .collect::<Result<Vec<_>>>()?;
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(err("non-finite vertex value".into()));
                }
                match values.len() {
                    3 => colors.push(Vec3::repeat(DEFAULT_GRAY)),
                    6 => colors.push(Vec3::new(values[3], values[4], values[5])),
                    n => return Err(err(format!("vertex needs 3 or 6 numbers, got {n}"))),
                }
                vertices.push(Vec3::new(values[0], values[1], values[2]));
            }
            Some("f") => {
                let idx = tokens
                    .map(|t| {
                        let k: usize = t
                            .parse()
                            .map_err(|_| err(format!("bad face index `{t}` (plain 1-based indices only)")))?;
                        if k == 0 {
                            return Err(err("face index 0 (OBJ indices are 1-based)".into()));
                        }
                        Ok(k - 1)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() != 3 {
                    return Err(err(format!("only triangles are supported, got {} indices", idx.len())));
                }
                faces.push([idx[0], idx[1], idx[2]]);
                face_lines.push(line_no);
            }
            Some(other) => return Err(err(format!("unsupported statement `{other}`"))),
            None => unreachable!("blank lines are skipped"),
        }
    }

    for (face, line) in faces.iter().zip(&face_lines) {
        if let Some(&bad) = face.iter().find(|&&k| k >= vertices.len()) {
            return Err(Error::Parse {
                line: *line,
                message: format!("face index {} out of range ({} vertices)", bad + 1, vertices.len()),
            });
        }
    }
    TriangleMesh::new(vertices, faces, colors)
}

/// Writes the mesh in the same OBJ subset, always with color triples.
pub fn write_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for (v, c) in mesh.vertices.iter().zip(&mesh.vertex_colors) {
        let _ = writeln!(out, "v {} {} {} {} {} {}", v.x, v.y, v.z, c.x, c.y, c.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}
