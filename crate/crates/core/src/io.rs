//! File formats: ASCII PLY scenes, 16-bit PGM label maps, FMAP feature
//! maps and 8-bit PGM previews.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{FeatureMap, GaussianPoint, GroundTruth, LabelMap, Scene};

const GEOMETRY_PROPS: [&str; 8] = ["x", "y", "z", "scale", "opacity", "red", "green", "blue"];
const INT_PROPS: [&str; 6] = ["gt_whole", "gt_part", "gt_subpart", "cluster_l1", "cluster_l2", "kept"];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Column {
    Geometry(usize),
    Feature(usize),
    Int(usize),
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_scene(&text, path)
}

/// Parses ASCII PLY text; `origin` is only used in diagnostics.
pub fn parse_scene(text: &str, origin: &Path) -> Result<Scene> {
    let err = |line: usize, msg: String| Error::parse(origin, line, msg);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "missing `ply` magic".into())),
    }
    let mut vertex_count: Option<usize> = None;
    let mut columns: Vec<Column> = Vec::new();
    let mut in_vertex = false;
    let mut header_done = false;
    let mut last_line = 1;

    for (no, line) in lines.by_ref() {
        last_line = no;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", "1.0"] => {}
            ["format", other, ..] => return Err(err(no, format!("unsupported format `{other}`"))),
            ["element", "vertex", n] => {
                let n = n.parse().map_err(|_| err(no, format!("bad vertex count `{n}`")))?;
                vertex_count = Some(n);
                in_vertex = true;
            }
            ["element", name, ..] => return Err(err(no, format!("unexpected element `{name}`"))),
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(err(no, "property before `element vertex`".into()));
                }
                let float = matches!(*ty, "float" | "double" | "float32" | "float64");
                let int = matches!(*ty, "int" | "int32" | "uint" | "short" | "uchar" | "char");
                let col = if let Some(i) = GEOMETRY_PROPS.iter().position(|p| p == name) {
                    Column::Geometry(i)
                } else if let Some(i) = INT_PROPS.iter().position(|p| p == name) {
                    Column::Int(i)
                } else if let Some(k) = name.strip_prefix('f').and_then(|k| k.parse::<usize>().ok()) {
                    Column::Feature(k)
                } else {
                    return Err(err(no, format!("unknown property `{name}`")));
                };
                match col {
                    Column::Int(_) if !int => return Err(err(no, format!("`{name}` must be an integer property"))),
                    Column::Geometry(_) | Column::Feature(_) if !float => {
                        return Err(err(no, format!("`{name}` must be a float property")))
                    }
                    _ => {}
                }
                if columns.contains(&col) {
                    return Err(err(no, format!("duplicate property `{name}`")));
                }
                columns.push(col);
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(err(no, format!("malformed header line `{line}`"))),
        }
    }
    if !header_done {
        return Err(err(last_line, "missing end_header".into()));
    }
    let vertex_count = vertex_count.ok_or_else(|| err(last_line, "missing `element vertex`".into()))?;
    for (i, name) in GEOMETRY_PROPS.iter().enumerate() {
        if !columns.contains(&Column::Geometry(i)) {
            return Err(err(last_line, format!("missing property `{name}`")));
        }
    }
    let dim = columns.iter().filter(|c| matches!(c, Column::Feature(_))).count();
    for k in 0..dim {
        if !columns.contains(&Column::Feature(k)) {
            return Err(err(
                last_line,
                format!("feature properties must be f0..f{}; f{k} missing", dim - 1),
            ));
        }
    }
    if dim == 0 {
        return Err(err(last_line, "scene has no feature properties".into()));
    }
    let has_int = |i: usize| columns.contains(&Column::Int(i));
    let gt_cols = (0..3).filter(|&i| has_int(i)).count();
    if gt_cols != 0 && gt_cols != 3 {
        return Err(err(
            last_line,
            "ground truth needs gt_whole, gt_part and gt_subpart".into(),
        ));
    }

    let mut scene = Scene::new(dim);
    let mut ints: [Vec<i64>; 6] = Default::default();
    let mut seen = 0;
    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        if seen == vertex_count {
            return Err(err(no, "trailing data after last vertex".into()));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != columns.len() {
            return Err(err(
                no,
                format!("expected {} values, found {}", columns.len(), tokens.len()),
            ));
        }
        let mut geo = [0.0f64; 8];
        let mut feature = vec![0.0; dim];
        for (tok, col) in tokens.iter().zip(&columns) {
            match *col {
                Column::Int(i) => {
                    let v: i64 = tok.parse().map_err(|_| err(no, format!("bad integer `{tok}`")))?;
                    ints[i].push(v);
                }
                Column::Geometry(_) | Column::Feature(_) => {
                    let v: f64 = tok.parse().map_err(|_| err(no, format!("bad number `{tok}`")))?;
                    if !v.is_finite() {
                        return Err(err(no, format!("non-finite value `{tok}`")));
                    }
                    match *col {
                        Column::Geometry(i) => geo[i] = v,
                        Column::Feature(k) => feature[k] = v,
                        Column::Int(_) => unreachable!(),
                    }
                }
            }
        }
        let point = GaussianPoint {
            position: Vector3::new(geo[0], geo[1], geo[2]),
            scale: geo[3],
            opacity: geo[4],
            color: [geo[5], geo[6], geo[7]],
            feature,
        };
        let index = scene.points.len();
        if let Err(Error::InvalidPoint { msg, .. }) = scene_point_check(&point, index, dim) {
            return Err(err(no, format!("vertex {index}: {msg}")));
        }
        scene.points.push(point);
        seen += 1;
    }
    if seen != vertex_count {
        return Err(err(
            last_line,
            format!("expected {vertex_count} vertices, found {seen}"),
        ));
    }

    if gt_cols == 3 {
        scene.ground_truth = Some(
            (0..seen)
                .map(|i| GroundTruth {
                    whole: ints[0][i],
                    part: ints[1][i],
                    subpart: ints[2][i],
                })
                .collect(),
        );
    }
    let take = |v: &mut Vec<i64>, present: bool| present.then(|| std::mem::take(v));
    scene.tags.cluster_l1 = take(&mut ints[3], has_int(3));
    scene.tags.cluster_l2 = take(&mut ints[4], has_int(4));
    scene.tags.kept = take(&mut ints[5], has_int(5));
    scene.validate()?;
    Ok(scene)
}

fn scene_point_check(p: &GaussianPoint, index: usize, dim: usize) -> Result<()> {
    let mut s = Scene::new(dim);
    s.points.push(p.clone());
    s.validate().map_err(|e| match e {
        Error::InvalidPoint { msg, .. } => Error::InvalidPoint { index, msg },
        e => e,
    })
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_scene(scene, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_scene(scene: &Scene, out: &mut impl Write) -> Result<()> {
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", scene.len())?;
    for name in GEOMETRY_PROPS {
        writeln!(out, "property float {name}")?;
    }
    for k in 0..scene.feature_dim {
        writeln!(out, "property float f{k}")?;
    }
    let mut int_cols: Vec<&[i64]> = Vec::new();
    let gt_cols: Option<[Vec<i64>; 3]> = scene.ground_truth.as_ref().map(|gt| {
        [
            gt.iter().map(|g| g.whole).collect(),
            gt.iter().map(|g| g.part).collect(),
            gt.iter().map(|g| g.subpart).collect(),
        ]
    });
    if let Some(cols) = &gt_cols {
        for (name, col) in INT_PROPS[..3].iter().zip(cols) {
            writeln!(out, "property int {name}")?;
            int_cols.push(col);
        }
    }
    for (name, tag) in INT_PROPS[3..]
        .iter()
        .zip([&scene.tags.cluster_l1, &scene.tags.cluster_l2, &scene.tags.kept])
    {
        if let Some(t) = tag {
            writeln!(out, "property int {name}")?;
            int_cols.push(t);
        }
    }
    writeln!(out, "end_header")?;
    let mut line = String::new();
    for (i, p) in scene.points.iter().enumerate() {
        use std::fmt::Write as _;
        line.clear();
        let geo = [
            p.position.x,
            p.position.y,
            p.position.z,
            p.scale,
            p.opacity,
            p.color[0],
            p.color[1],
            p.color[2],
        ];
        for v in geo.iter().chain(&p.feature) {
            let _ = write!(line, "{v} ");
        }
        for col in &int_cols {
            let _ = write!(line, "{} ", col[i]);
        }
        writeln!(out, "{}", line.trim_end())?;
    }
    Ok(())
}

pub fn load_labelmap(path: impl AsRef<Path>, level: usize) -> Result<LabelMap> {
    decode_labelmap(&fs::read(path)?, level)
}

/// Decodes a binary P5 PGM with maxval 65535 (big-endian samples).
pub fn decode_labelmap(bytes: &[u8], level: usize) -> Result<LabelMap> {
    let bad = |m: &str| Error::LabelMap(m.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments between header fields
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad(&format!("wrong magic `{}`, expected P5", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header number `{s}`")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 65535 {
        return Err(bad(&format!("maxval must be 65535, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let need = width * height * 2;
    if bytes.len() < pos + need {
        return Err(bad(&format!(
            "truncated payload: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let labels = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .collect();
    Ok(LabelMap {
        height,
        width,
        level,
        labels,
    })
}

pub fn encode_labelmap(map: &LabelMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    out.reserve(map.labels.len() * 2);
    for &l in &map.labels {
        let v = u16::try_from(l).map_err(|_| Error::LabelMap(format!("label {l} exceeds 65535")))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn save_labelmap(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_labelmap(map)?)?;
    Ok(())
}

pub fn encode_feature_map(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + map.values.len() * 4);
    out.extend_from_slice(b"FMAP");
    for n in [map.height, map.width, map.dim] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &v in &map.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let bad = |m: String| Error::Shape(format!("FMAP: {m}"));
    if bytes.len() < 16 || &bytes[..4] != b"FMAP" {
        return Err(bad("missing magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (height, width, dim) = (word(0), word(1), word(2));
    let count = height * width * dim;
    if bytes.len() != 16 + count * 4 {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            count * 4,
            bytes.len() - 16
        )));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(FeatureMap {
        height,
        width,
        dim,
        values,
    })
}

pub fn save_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_feature_map(map))?;
    Ok(())
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_feature_map(&fs::read(path)?)
}

/// One 8-bit P5 image of a single channel after min-max normalization.
pub fn channel_preview(map: &FeatureMap, channel: usize) -> Vec<u8> {
    let vals: Vec<f64> = (0..map.pixel_count()).map(|i| map.pixel(i)[channel]).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(
        vals.iter()
            .map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}
