//! OBJ/MTL and PLY readers, PLY point-cloud writer, PNG texture loading.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ply_rs::parser::Parser;
use ply_rs::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType, ScalarType,
};
use ply_rs::writer::Writer;

use super::{Material, Mesh, SurfaceSample, Texture};
use crate::error::{Error, Result};

/// Loads a mesh from `.obj` (with optional `.mtl`, vertex colors as `v x y z r g b`) or `.ply`.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "obj" => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_obj(&text, path.parent())
        }
        "ply" => load_ply_mesh(path),
        other => Err(Error::UnsupportedFormat(format!("mesh extension '{other}'"))),
    }
}

/// Loads an 8-bit PNG texture as linear values in `[0,1]`.
pub fn load_texture(path: impl AsRef<Path>) -> Result<Texture> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let texels = img.pixels().map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
    Texture::new(w, h, texels)
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn parse_f64(tok: Option<&str>, line: usize) -> Result<f64> {
    tok.ok_or_else(|| Error::Parse(format!("line {line}: missing number")))?
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad number")))
}

/// Resolves a 1-based (or negative, relative) OBJ index.
fn obj_index(tok: &str, count: usize, line: usize) -> Result<i64> {
    let i: i64 = tok.parse().map_err(|_| Error::Parse(format!("line {line}: bad index '{tok}'")))?;
    match i {
        0 => Err(Error::Parse(format!("line {line}: index 0 is invalid"))),
        i if i < 0 => Ok(count as i64 + i),
        i => Ok(i - 1),
    }
}

/// Parses OBJ text; `base` resolves `mtllib` and texture paths.
pub(crate) fn parse_obj(text: &str, base: Option<&Path>) -> Result<Mesh> {
    let mut positions = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut any_color = false;
    let mut uvs: Vec<[f64; 2]> = Vec::new();
    let mut faces = Vec::new();
    let mut face_uv_idx: Vec<Option<[i64; 3]>> = Vec::new();
    let mut face_material = Vec::new();
    let mut library: HashMap<String, Material> = HashMap::new();
    let mut materials = vec![Material::default()];
    let mut material_ids: HashMap<String, u32> = HashMap::new();
    let mut current = 0u32;

    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let p = [parse_f64(toks.next(), ln)?, parse_f64(toks.next(), ln)?, parse_f64(toks.next(), ln)?];
                let rest: Vec<&str> = toks.collect();
                if rest.len() >= 3 {
                    any_color = true;
                    colors.push([0, 1, 2].map(|i| rest[i].parse::<f64>().unwrap_or(1.0).clamp(0.0, 1.0)));
                } else {
                    colors.push([1.0; 3]);
                }
                positions.push(p);
            }
            Some("vt") => uvs.push([parse_f64(toks.next(), ln)?, parse_f64(toks.next(), ln)?]),
            Some("f") => {
                let corners: Vec<&str> = toks.collect();
                if corners.len() < 3 {
                    return Err(Error::Parse(format!("line {ln}: face needs 3+ vertices")));
                }
                let mut vi = Vec::with_capacity(corners.len());
                let mut ti = Vec::with_capacity(corners.len());
                for c in &corners {
                    let mut parts = c.split('/');
                    vi.push(obj_index(parts.next().unwrap_or(""), positions.len(), ln)?);
                    ti.push(match parts.next() {
                        Some(t) if !t.is_empty() => Some(obj_index(t, uvs.len(), ln)?),
                        _ => None,
                    });
                }
                for k in 1..corners.len() - 1 {
                    let tri = [vi[0], vi[k], vi[k + 1]];
                    let face = faces.len();
                    for &i in &tri {
                        if i < 0 || i as usize >= positions.len() {
                            return Err(Error::FaceIndex { face, index: i.max(0) as usize, count: positions.len() });
                        }
                    }
                    faces.push(tri.map(|i| i as u32));
                    face_uv_idx.push(match (ti[0], ti[k], ti[k + 1]) {
                        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
                        _ => None,
                    });
                    face_material.push(current);
                }
            }
            Some("mtllib") => {
                let name = line["mtllib".len()..].trim();
                let path = base.map(|b| b.join(name)).unwrap_or_else(|| PathBuf::from(name));
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                library.extend(parse_mtl(&text, path.parent())?);
            }
            Some("usemtl") => {
                let name = line["usemtl".len()..].trim().to_string();
                current = match material_ids.get(&name) {
                    Some(&id) => id,
                    None => {
                        let m = library
                            .get(&name)
                            .cloned()
                            .unwrap_or_else(|| Material { name: name.clone(), ..Material::default() });
                        materials.push(m);
                        let id = (materials.len() - 1) as u32;
                        material_ids.insert(name, id);
                        id
                    }
                };
            }
            _ => {}
        }
    }

    let face_uvs = if face_uv_idx.iter().any(|f| f.is_some()) {
        let mut out = Vec::with_capacity(faces.len());
        for (f, idx) in face_uv_idx.iter().enumerate() {
            out.push(match idx {
                Some(t) => {
                    let mut c = [[0.0; 2]; 3];
                    for k in 0..3 {
                        if t[k] < 0 || t[k] as usize >= uvs.len() {
                            return Err(Error::Parse(format!("face {f}: texture index out of range")));
                        }
                        c[k] = uvs[t[k] as usize];
                    }
                    c
                }
                None => [[0.0; 2]; 3],
            });
        }
        Some(out)
    } else {
        None
    };
    if any_color {
        for m in &mut materials {
            m.vertex_colors = true;
        }
    }
    let mesh = Mesh {
        positions,
        faces,
        face_material,
        materials,
        vertex_colors: any_color.then_some(colors),
        face_uvs,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Parses MTL statements `newmtl`, `Kd`, `Ke`, `map_Kd`, plus two extensions:
/// `emission_strength <s>` and `outline <0|1>`.
pub(crate) fn parse_mtl(text: &str, base: Option<&Path>) -> Result<HashMap<String, Material>> {
    let mut out = HashMap::new();
    let mut cur: Option<Material> = None;
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        let Some(key) = toks.next() else { continue };
        if key == "newmtl" {
            if let Some(m) = cur.take() {
                out.insert(m.name.clone(), m);
            }
            cur = Some(Material { name: line[6..].trim().to_string(), ..Material::default() });
            continue;
        }
        let Some(m) = cur.as_mut() else { continue };
        let rgb = |toks: &mut std::str::SplitWhitespace| -> Result<[f64; 3]> {
            Ok([parse_f64(toks.next(), ln)?, parse_f64(toks.next(), ln)?, parse_f64(toks.next(), ln)?])
        };
        match key {
            "Kd" => m.base_color = rgb(&mut toks)?.map(|c| c.clamp(0.0, 1.0)),
            "Ke" => m.emission = rgb(&mut toks)?,
            "emission_strength" => m.emission_strength = parse_f64(toks.next(), ln)?,
            "outline" => m.outline = parse_f64(toks.next(), ln)? != 0.0,
            "map_Kd" => {
                let name = toks.last().ok_or_else(|| Error::Parse(format!("line {ln}: map_Kd needs a path")))?;
                let path = base.map(|b| b.join(name)).unwrap_or_else(|| PathBuf::from(name));
                m.texture = Some(Arc::new(load_texture(&path)?));
            }
            _ => {}
        }
    }
    if let Some(m) = cur {
        out.insert(m.name.clone(), m);
    }
    Ok(out)
}

fn read_ply(path: &Path) -> Result<Ply<DefaultElement>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Parser::<DefaultElement>::new()
        .read_ply(&mut BufReader::new(file))
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn scalar(p: Option<&Property>) -> Option<f64> {
    Some(match p? {
        Property::Char(v) => *v as f64,
        Property::UChar(v) => *v as f64,
        Property::Short(v) => *v as f64,
        Property::UShort(v) => *v as f64,
        Property::Int(v) => *v as f64,
        Property::UInt(v) => *v as f64,
        Property::Float(v) => *v as f64,
        Property::Double(v) => *v,
        _ => return None,
    })
}

fn color_channel(p: Option<&Property>) -> Option<f64> {
    match p? {
        Property::Float(v) => Some(*v as f64),
        Property::Double(v) => Some(*v),
        other => scalar(Some(other)).map(|v| v / 255.0),
    }
}

fn index_list(p: Option<&Property>) -> Option<Vec<i64>> {
    Some(match p? {
        Property::ListChar(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUChar(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListShort(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUShort(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListInt(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUInt(v) => v.iter().map(|&x| x as i64).collect(),
        _ => return None,
    })
}

fn vertex_xyz(e: &DefaultElement, prefix: &str) -> Option<[f64; 3]> {
    Some([
        scalar(e.get(&format!("{prefix}x")))?,
        scalar(e.get(&format!("{prefix}y")))?,
        scalar(e.get(&format!("{prefix}z")))?,
    ])
}

fn vertex_rgb(e: &DefaultElement) -> Option<[f64; 3]> {
    Some([color_channel(e.get("red"))?, color_channel(e.get("green"))?, color_channel(e.get("blue"))?])
}

fn load_ply_mesh(path: &Path) -> Result<Mesh> {
    let ply = read_ply(path)?;
    let verts = ply.payload.get("vertex").ok_or_else(|| Error::Parse("PLY has no vertex element".into()))?;
    let positions = verts
        .iter()
        .map(|e| vertex_xyz(e, "").ok_or_else(|| Error::Parse("PLY vertex lacks x/y/z".into())))
        .collect::<Result<Vec<_>>>()?;
    let colors: Option<Vec<[f64; 3]>> = verts.iter().map(vertex_rgb).collect();
    let mut faces = Vec::new();
    for e in ply.payload.get("face").map(|v| v.as_slice()).unwrap_or(&[]) {
        let idx = index_list(e.get("vertex_indices").or_else(|| e.get("vertex_index")))
            .ok_or_else(|| Error::Parse("PLY face lacks vertex_indices".into()))?;
        if idx.len() < 3 {
            return Err(Error::Parse("PLY face needs 3+ vertices".into()));
        }
        for k in 1..idx.len() - 1 {
            let tri = [idx[0], idx[k], idx[k + 1]];
            for &i in &tri {
                if i < 0 || i as usize >= positions.len() {
                    return Err(Error::FaceIndex { face: faces.len(), index: i.max(0) as usize, count: positions.len() });
                }
            }
            faces.push(tri.map(|i| i as u32));
        }
    }
    let mut material = Material::default();
    material.vertex_colors = colors.is_some();
    let mut mesh = Mesh::new(positions, faces, material)?;
    mesh.vertex_colors = colors.map(|c| c.into_iter().map(|v| v.map(|x| x.clamp(0.0, 1.0))).collect());
    Ok(mesh)
}

/// Reads a point cloud with positions, normals (optional, default +z) and colors (optional, default white).
pub fn read_ply_points(path: impl AsRef<Path>) -> Result<Vec<SurfaceSample>> {
    let path = path.as_ref();
    let ply = read_ply(path)?;
    let verts = ply.payload.get("vertex").ok_or_else(|| Error::Parse("PLY has no vertex element".into()))?;
    verts
        .iter()
        .map(|e| {
            let position = vertex_xyz(e, "").ok_or_else(|| Error::Parse("PLY vertex lacks x/y/z".into()))?;
            let normal = vertex_xyz(e, "n").and_then(super::normalize).unwrap_or([0.0, 0.0, 1.0]);
            let color = vertex_rgb(e).unwrap_or([1.0; 3]).map(|c| c.clamp(0.0, 1.0));
            Ok(SurfaceSample { position, normal, color })
        })
        .collect()
}

/// Alias of [`read_ply_points`] dispatching on extension.
pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<Vec<SurfaceSample>> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "ply" => read_ply_points(path),
        other => Err(Error::UnsupportedFormat(format!("point cloud extension '{other}'"))),
    }
}

/// Writes binary little-endian PLY: double `x y z nx ny nz`, uchar `red green blue`.
pub fn write_ply_points(path: impl AsRef<Path>, samples: &[SurfaceSample]) -> Result<()> {
    let path = path.as_ref();
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    let mut vertex = ElementDef::new("vertex".into());
    for name in ["x", "y", "z", "nx", "ny", "nz"] {
        vertex.properties.add(PropertyDef::new(name.into(), PropertyType::Scalar(ScalarType::Double)));
    }
    for name in ["red", "green", "blue"] {
        vertex.properties.add(PropertyDef::new(name.into(), PropertyType::Scalar(ScalarType::UChar)));
    }
    ply.header.elements.add(vertex);
    let rows = samples
        .iter()
        .map(|s| {
            let mut e = DefaultElement::new();
            for (n, v) in ["x", "y", "z"].iter().zip(s.position) {
                e.insert(n.to_string(), Property::Double(v));
            }
            for (n, v) in ["nx", "ny", "nz"].iter().zip(s.normal) {
                e.insert(n.to_string(), Property::Double(v));
            }
            for (n, v) in ["red", "green", "blue"].iter().zip(s.color) {
                e.insert(n.to_string(), Property::UChar((v.clamp(0.0, 1.0) * 255.0).round() as u8));
            }
            e
        })
        .collect();
    ply.payload.insert("vertex".into(), rows);
    let mut buf = Vec::new();
    Writer::new()
        .write_ply(&mut buf, &mut ply)
        .map_err(|e| Error::Parse(format!("PLY write: {e}")))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Writes geometry, per-vertex colors and per-corner UVs as Wavefront OBJ (materials are not written).
pub fn write_obj(path: impl AsRef<Path>, mesh: &Mesh) -> Result<()> {
    use std::fmt::Write as _;
    let path = path.as_ref();
    let mut out = String::new();
    for (i, p) in mesh.positions.iter().enumerate() {
        match &mesh.vertex_colors {
            Some(c) => {
                let c = c[i];
                writeln!(out, "v {} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])
            }
            None => writeln!(out, "v {} {} {}", p[0], p[1], p[2]),
        }
        .expect("write to string");
    }
    if let Some(uvs) = &mesh.face_uvs {
        for tri in uvs {
            for uv in tri {
                writeln!(out, "vt {} {}", uv[0], uv[1]).expect("write to string");
            }
        }
    }
    for (f, face) in mesh.faces.iter().enumerate() {
        let [a, b, c] = face.map(|i| i + 1);
        if mesh.face_uvs.is_some() {
            let t = 3 * f + 1;
            writeln!(out, "f {a}/{t} {b}/{} {c}/{}", t + 1, t + 2)
        } else {
            writeln!(out, "f {a} {b} {c}")
        }
        .expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
