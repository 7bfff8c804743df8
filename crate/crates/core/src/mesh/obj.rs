//! Minimal Wavefront OBJ reader/writer: `v` and `f` records only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Mesh, MeshSequence, Vec3};
use crate::error::{Error, Result};

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

/// Parses OBJ text. Polygons are fan-triangulated around their first corner.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        let parse_err = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("bad coordinate `{t}`: {e}"))))
                    .collect::<Result<_>>()?;
                if coords.len() != 3 {
                    return Err(parse_err("vertex needs three coordinates".into()));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut corners = Vec::with_capacity(4);
                for t in tokens {
                    let idx = t.split('/').next().unwrap_or("");
                    let k: i64 = idx
                        .parse()
                        .map_err(|e| parse_err(format!("bad face index `{t}`: {e}")))?;
                    let resolved = match k {
                        0 => return Err(parse_err("face index 0 is invalid".into())),
                        k if k > 0 => k - 1,
                        k => vertices.len() as i64 + k,
                    };
                    if resolved < 0 {
                        return Err(Error::Structure(format!(
                            "line {}: face index {k} is out of range",
                            lineno + 1
                        )));
                    }
                    corners.push(resolved as usize);
                }
                if corners.len() < 3 {
                    return Err(parse_err("face needs at least three corners".into()));
                }
                for k in 1..corners.len() - 1 {
                    faces.push([corners[0], corners[k], corners[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, faces)
}

/// Formats `x` with 9 significant digits, `%g` style.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{m}e{exp}")
    }
}

pub fn write_obj(positions: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut out = String::with_capacity(positions.len() * 40 + faces.len() * 20);
    for p in positions {
        let _ = writeln!(
            out,
            "v {} {} {}",
            format_sig9(p.x),
            format_sig9(p.y),
            format_sig9(p.z)
        );
    }
    for f in faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn save_obj(path: impl AsRef<Path>, positions: &[Vec3], faces: &[[usize; 3]]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_obj(positions, faces)).map_err(|e| Error::io(path, e))
}

/// Reads `frame_00000.obj`, `frame_00001.obj`, ... from `dir` until the
/// first missing index. Every frame must share the faces of `reference`;
/// without one, frame 0 (with cotangent weights) is the reference.
pub fn load_sequence(dir: impl AsRef<Path>, reference: Option<Mesh>) -> Result<MeshSequence> {
    let dir = dir.as_ref();
    let mut frames: Vec<Mesh> = Vec::new();
    loop {
        let path = dir.join(format!("frame_{:05}.obj", frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(load_obj(&path)?);
    }
    let reference = match reference {
        Some(r) => r,
        None => {
            let first = frames
                .first()
                .ok_or_else(|| Error::Format(format!("no frame_00000.obj in {}", dir.display())))?;
            Mesh::with_weights(first.vertices().to_vec(), first.faces().to_vec())?
        }
    };
    if let Some(t) = frames.iter().position(|m| m.faces() != reference.faces()) {
        return Err(Error::Shape(format!("frame {t} in {} has a different topology", dir.display())));
    }
    let positions = frames.into_iter().map(|m| m.vertices().to_vec()).collect();
    MeshSequence::new(reference, positions)
}
