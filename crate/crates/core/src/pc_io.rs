//! Point cloud and dataset manifest ingestion.
//!
//! PLY support covers `ascii 1.0` and `binary_little_endian 1.0` with a
//! `vertex` element carrying `x`/`y`/`z` and 8-bit `red`/`green`/`blue`.
//! Other vertex properties are skipped. Elements declared after `vertex`
//! are ignored; elements declared before it must have fixed-size rows.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlyError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("missing required vertex property `{0}`")]
    MissingProperty(&'static str),
    #[error("property `{name}` must be {expected}, found {found}")]
    PropertyType {
        name: &'static str,
        expected: &'static str,
        found: String,
    },
    #[error("declared count mismatch: header declares {declared} vertices, found {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("invalid value in vertex {vertex}: {detail}")]
    InvalidValue { vertex: usize, detail: String },
    #[error("non-finite coordinate in vertex {0}")]
    NonFinite(usize),
    #[error("point cloud has no vertices")]
    Empty,
    #[error("failed to read {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifestError {
    #[error("manifest header must be `path,mos,reference_id[,fold]`, found `{0}`")]
    Header(String),
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },
    #[error("line {line}: duplicate path `{path}`")]
    DuplicatePath { line: usize, path: String },
    #[error("line {line}: unparsable mos `{value}`")]
    Mos { line: usize, value: String },
    #[error("line {line}: fold `{value}` is not an integer")]
    Fold { line: usize, value: String },
    #[error("fold ids must form a contiguous range starting at 0, found {0:?}")]
    FoldRange(Vec<usize>),
}

/// A coloured point set. Colours are stored in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    name: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("positions ({0}) and colors ({1}) differ in length")]
    Length(usize, usize),
    #[error("point cloud has no points")]
    Empty,
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("point {0} has a colour channel outside [0, 1]")]
    Color(usize),
}

impl PointCloud {
    pub fn new(
        name: impl Into<String>,
        positions: Vec<[f64; 3]>,
        colors: Vec<[f64; 3]>,
    ) -> Result<Self, CloudError> {
        if positions.len() != colors.len() {
            return Err(CloudError::Length(positions.len(), colors.len()));
        }
        if positions.is_empty() {
            return Err(CloudError::Empty);
        }
        if let Some(i) = positions
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(CloudError::NonFinite(i));
        }
        if let Some(i) = colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(CloudError::Color(i));
        }
        Ok(Self {
            positions,
            colors,
            name: name.into(),
        })
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Reorders points so that new point `i` is old point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.len());
        Self {
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            colors: order.iter().map(|&i| self.colors[i]).collect(),
            name: self.name.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, Scalar)>,
    has_list: bool,
}

impl Element {
    fn row_size(&self) -> usize {
        self.properties.iter().map(|(_, s)| s.size()).sum()
    }
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    let malformed = |m: &str| PlyError::MalformedHeader(m.to_string());
    let mut offset = 0;
    let mut next_line = || -> Result<String, PlyError> {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed("missing end_header"))?;
        offset += end + 1;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| malformed("header is not valid text"))?;
        Ok(line.trim_end_matches('\r').trim().to_string())
    };

    if next_line()? != "ply" {
        return Err(malformed("missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = next_line()?;
        let mut words = line.split_whitespace();
        match words.next() {
            None => continue,
            Some("comment") | Some("obj_info") => continue,
            Some("end_header") => break,
            Some("format") => {
                let tag = words.next().ok_or_else(|| malformed("empty format line"))?;
                format = Some(match tag {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLittleEndian,
                    other => return Err(PlyError::UnsupportedFormat(other.to_string())),
                });
                if words.next() != Some("1.0") {
                    return Err(malformed("format version must be 1.0"));
                }
            }
            Some("element") => {
                let name = words.next().ok_or_else(|| malformed("element without name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| malformed("element count is not an integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before any element"))?;
                let ty = words.next().ok_or_else(|| malformed("property without type"))?;
                if ty == "list" {
                    el.has_list = true;
                    continue;
                }
                let scalar = Scalar::parse(ty)
                    .ok_or_else(|| PlyError::MalformedHeader(format!("unknown type `{ty}`")))?;
                let name = words.next().ok_or_else(|| malformed("property without name"))?;
                el.properties.push((name.to_string(), scalar));
            }
            Some(other) => {
                return Err(PlyError::MalformedHeader(format!(
                    "unexpected keyword `{other}`"
                )))
            }
        }
    }
    let format = format.ok_or_else(|| malformed("missing format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: offset,
    })
}

struct VertexLayout {
    xyz: [usize; 3],
    rgb: [usize; 3],
}

fn vertex_layout(el: &Element) -> Result<VertexLayout, PlyError> {
    if el.has_list {
        return Err(PlyError::UnsupportedFormat(
            "list properties on vertex element".into(),
        ));
    }
    let find = |name: &'static str| {
        el.properties
            .iter()
            .position(|(n, _)| n == name)
            .ok_or(PlyError::MissingProperty(name))
    };
    let xyz = [find("x")?, find("y")?, find("z")?];
    let rgb = [find("red")?, find("green")?, find("blue")?];
    for (&i, name) in xyz.iter().zip(["x", "y", "z"]) {
        if !el.properties[i].1.is_float() {
            return Err(PlyError::PropertyType {
                name,
                expected: "float or double",
                found: format!("{:?}", el.properties[i].1),
            });
        }
    }
    for (&i, name) in rgb.iter().zip(["red", "green", "blue"]) {
        if el.properties[i].1 != Scalar::U8 {
            return Err(PlyError::PropertyType {
                name,
                expected: "uchar",
                found: format!("{:?}", el.properties[i].1),
            });
        }
    }
    Ok(VertexLayout { xyz, rgb })
}

/// Parses an ASCII or binary little-endian PLY file.
///
/// Colours are divided by 255. The returned cloud has an empty name; see
/// [`load_ply`] for the path-based variant.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud, PlyError> {
    let header = parse_header(bytes)?;
    let vidx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| PlyError::MalformedHeader("no vertex element".into()))?;
    let vertex = &header.elements[vidx];
    let layout = vertex_layout(vertex)?;
    let preceding = &header.elements[..vidx];
    if preceding.iter().any(|e| e.has_list) {
        return Err(PlyError::UnsupportedFormat(
            "list-valued element before vertex".into(),
        ));
    }
    let trailing_elements = header.elements[vidx + 1..].iter().any(|e| e.count > 0);
    let body = &bytes[header.body_offset..];

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(vertex.count);
    match header.format {
        Format::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| PlyError::InvalidValue {
                vertex: 0,
                detail: "body is not valid text".into(),
            })?;
            let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
            let skip: usize = preceding.iter().map(|e| e.count).sum();
            for _ in 0..skip {
                lines.next();
            }
            for (i, line) in lines.by_ref().take(vertex.count).enumerate() {
                let values: Vec<f64> = line
                    .split_whitespace()
                    .map(|w| w.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| PlyError::InvalidValue {
                        vertex: i,
                        detail: e.to_string(),
                    })?;
                if values.len() != vertex.properties.len() {
                    return Err(PlyError::InvalidValue {
                        vertex: i,
                        detail: format!(
                            "expected {} values, found {}",
                            vertex.properties.len(),
                            values.len()
                        ),
                    });
                }
                rows.push(values);
            }
            if rows.len() < vertex.count {
                return Err(PlyError::CountMismatch {
                    declared: vertex.count,
                    found: rows.len(),
                });
            }
            if !trailing_elements {
                let extra = lines.count();
                if extra > 0 {
                    return Err(PlyError::CountMismatch {
                        declared: vertex.count,
                        found: vertex.count + extra,
                    });
                }
            }
        }
        Format::BinaryLittleEndian => {
            let skip: usize = preceding.iter().map(|e| e.count * e.row_size()).sum();
            let row_size = vertex.row_size();
            let data = body.get(skip..).unwrap_or(&[]);
            let available = data.len() / row_size.max(1);
            if available < vertex.count
                || (!trailing_elements && data.len() != vertex.count * row_size)
            {
                return Err(PlyError::CountMismatch {
                    declared: vertex.count,
                    found: available,
                });
            }
            for chunk in data.chunks_exact(row_size).take(vertex.count) {
                let mut values = Vec::with_capacity(vertex.properties.len());
                let mut at = 0;
                for (_, s) in &vertex.properties {
                    values.push(s.read_le(&chunk[at..at + s.size()]));
                    at += s.size();
                }
                rows.push(values);
            }
        }
    }

    if rows.is_empty() {
        return Err(PlyError::Empty);
    }
    let mut positions = Vec::with_capacity(rows.len());
    let mut colors = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let p = layout.xyz.map(|k| row[k]);
        if p.iter().any(|c| !c.is_finite()) {
            return Err(PlyError::NonFinite(i));
        }
        let mut c = [0.0; 3];
        for (slot, &k) in c.iter_mut().zip(&layout.rgb) {
            let v = row[k];
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(PlyError::InvalidValue {
                    vertex: i,
                    detail: format!("colour value {v} is not an 8-bit integer"),
                });
            }
            *slot = v / 255.0;
        }
        positions.push(p);
        colors.push(c);
    }
    PointCloud::new("", positions, colors).map_err(|e| PlyError::InvalidValue {
        vertex: 0,
        detail: e.to_string(),
    })
}

/// Reads and parses a PLY file, naming the cloud after the file stem.
pub fn load_ply(path: &Path) -> Result<PointCloud, PlyError> {
    let bytes = std::fs::read(path).map_err(|e| PlyError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut pc = parse_ply(&bytes)?;
    pc.name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(pc)
}

/// Serializes a cloud as `binary_little_endian` PLY with `float` coordinates
/// and `uchar` colours.
pub fn write_ply_binary(pc: &PointCloud) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        pc.len()
    )
    .into_bytes();
    for (p, c) in pc.positions.iter().zip(&pc.colors) {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in c {
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub mos: f64,
    pub reference_id: String,
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_folds(&self) -> bool {
        self.entries.first().is_some_and(|e| e.fold.is_some())
    }

    /// Distinct reference ids in order of first appearance.
    pub fn reference_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.reference_id.as_str()))
            .map(|e| e.reference_id.as_str())
            .collect()
    }

    /// Renders the manifest back to CSV.
    pub fn to_csv(&self) -> String {
        let folds = self.has_folds();
        let mut s = String::from(if folds {
            "path,mos,reference_id,fold\n"
        } else {
            "path,mos,reference_id\n"
        });
        for e in &self.entries {
            s.push_str(&format!("{},{},{}", e.path, e.mos, e.reference_id));
            if let (true, Some(f)) = (folds, e.fold) {
                s.push_str(&format!(",{f}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Parses a `path,mos,reference_id[,fold]` CSV manifest.
pub fn load_manifest(text: &str) -> Result<DatasetManifest, ManifestError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| ManifestError::Header(e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let with_fold = match names.as_slice() {
        ["path", "mos", "reference_id"] => false,
        ["path", "mos", "reference_id", "fold"] => true,
        _ => return Err(ManifestError::Header(names.join(","))),
    };

    let mut entries = Vec::new();
    let mut paths = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| ManifestError::Row {
            line,
            message: e.to_string(),
        })?;
        let path = record[0].to_string();
        if !paths.insert(path.clone()) {
            return Err(ManifestError::DuplicatePath { line, path });
        }
        let mos = record[1]
            .parse::<f64>()
            .ok()
            .filter(|m| m.is_finite())
            .ok_or_else(|| ManifestError::Mos {
                line,
                value: record[1].to_string(),
            })?;
        let fold = if with_fold {
            Some(record[3].parse::<usize>().map_err(|_| ManifestError::Fold {
                line,
                value: record[3].to_string(),
            })?)
        } else {
            None
        };
        entries.push(ManifestEntry {
            path,
            mos,
            reference_id: record[2].to_string(),
            fold,
        });
    }

    if with_fold {
        let mut ids: Vec<usize> = entries.iter().filter_map(|e| e.fold).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.iter().enumerate().any(|(i, &f)| i != f) {
            return Err(ManifestError::FoldRange(ids));
        }
    }
    Ok(DatasetManifest { entries })
}
