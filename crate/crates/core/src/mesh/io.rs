use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::TriMesh;
use crate::error::{Error, Result};

/// Loads a Wavefront OBJ or ASCII PLY triangle mesh. The format is chosen
/// by extension, falling back to sniffing the `ply` magic line.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("ply") => load_ply_str(&text),
        Some("obj") => load_obj_str(&text),
        _ if text.trim_start().starts_with("ply") => load_ply_str(&text),
        _ => load_obj_str(&text),
    }
}

pub fn load_obj_str(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tok = content.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut xyz = [0.0; 3];
                for c in &mut xyz {
                    *c = parse_f64(tok.next(), line)?;
                }
                vertices.push(Vector3::from(xyz));
            }
            Some("f") => {
                let refs: Vec<&str> = tok.collect();
                let face = faces.len();
                if refs.len() != 3 {
                    return Err(Error::NonTriangleFace {
                        face,
                        arity: refs.len(),
                    });
                }
                let mut idx = [0usize; 3];
                for (slot, r) in idx.iter_mut().zip(&refs) {
                    let head = r.split('/').next().unwrap_or("");
                    let i: i64 = head.parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("bad face index `{r}`"),
                    })?;
                    // 1-based, negative values count back from the last vertex.
                    let resolved = if i > 0 {
                        i - 1
                    } else if i < 0 {
                        vertices.len() as i64 + i
                    } else {
                        -1
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(Error::IndexOutOfRange {
                            face,
                            index: i,
                            n_vertices: vertices.len(),
                        });
                    }
                    *slot = resolved as usize;
                }
                faces.push(idx);
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces)
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
}

pub fn load_ply_str(text: &str) -> Result<TriMesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing `ply` magic".into(),
            })
        }
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let (line, l) = lines.next().ok_or(Error::Parse {
            line: 0,
            msg: "unterminated header".into(),
        })?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.first().copied() {
            Some("format") => {
                if tok.get(1) != Some(&"ascii") {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unsupported PLY format `{}`", tok[1..].join(" ")),
                    });
                }
            }
            Some("element") => {
                let count = tok
                    .get(2)
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Parse {
                        line,
                        msg: "bad element count".into(),
                    })?;
                elements.push(PlyElement {
                    name: tok.get(1).unwrap_or(&"").to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or(Error::Parse {
                    line,
                    msg: "property before element".into(),
                })?;
                el.props.push(tok.last().unwrap_or(&"").to_string());
            }
            Some("end_header") => break,
            _ => {}
        }
    }

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let (line, l) = lines.next().ok_or(Error::Parse {
                line: 0,
                msg: format!("truncated `{}` element", el.name),
            })?;
            let tok: Vec<&str> = l.split_whitespace().collect();
            match el.name.as_str() {
                "vertex" => {
                    let mut xyz = [0.0; 3];
                    for (k, axis) in ["x", "y", "z"].iter().enumerate() {
                        let pos = el.props.iter().position(|p| p == axis).ok_or(
                            Error::Parse {
                                line,
                                msg: format!("vertex element has no `{axis}` property"),
                            },
                        )?;
                        xyz[k] = parse_f64(tok.get(pos).copied(), line)?;
                    }
                    vertices.push(Vector3::from(xyz));
                }
                "face" => {
                    let face = faces.len();
                    let n: usize = tok.first().and_then(|t| t.parse().ok()).ok_or(
                        Error::Parse {
                            line,
                            msg: "bad face list length".into(),
                        },
                    )?;
                    if n != 3 {
                        return Err(Error::NonTriangleFace { face, arity: n });
                    }
                    let mut idx = [0usize; 3];
                    for (k, slot) in idx.iter_mut().enumerate() {
                        let i: i64 = tok.get(1 + k).and_then(|t| t.parse().ok()).ok_or(
                            Error::Parse {
                                line,
                                msg: "bad face index".into(),
                            },
                        )?;
                        if i < 0 {
                            return Err(Error::IndexOutOfRange {
                                face,
                                index: i,
                                n_vertices: 0,
                            });
                        }
                        *slot = i as usize;
                    }
                    faces.push(idx);
                }
                _ => {}
            }
        }
    }
    TriMesh::new(vertices, faces)
}

fn parse_f64(tok: Option<&str>, line: usize) -> Result<f64> {
    let t = tok.ok_or(Error::Parse {
        line,
        msg: "missing coordinate".into(),
    })?;
    t.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad number `{t}`"),
    })
}

/// Writes the mesh as ASCII PLY with quantised colours when `colors` is
/// given, otherwise as OBJ (or colourless PLY if the path ends in `.ply`).
pub fn export_mesh(
    mesh: &TriMesh,
    colors: Option<&[[f64; 3]]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let is_ply = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if let Some(c) = colors {
        if c.len() != mesh.n_vertices() {
            return Err(Error::Shape(format!(
                "{} colour rows for {} vertices",
                c.len(),
                mesh.n_vertices()
            )));
        }
    }
    let text = if colors.is_some() || is_ply {
        ply_string(mesh, colors)
    } else {
        obj_string(mesh)
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ply_string(mesh: &TriMesh, colors: Option<&[[f64; 3]]>) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", mesh.n_vertices());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    let _ = writeln!(s, "element face {}", mesh.n_faces());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (k, v) in mesh.vertices().iter().enumerate() {
        let _ = write!(s, "{} {} {}", v.x, v.y, v.z);
        if let Some(c) = colors {
            let [r, g, b] = c[k];
            let _ = write!(s, " {} {} {}", quantize(r), quantize(g), quantize(b));
        }
        s.push('\n');
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

fn obj_string(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}
