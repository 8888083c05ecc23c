//! PLY ingestion, voxelization, PPM images and the bitstream container.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::render::Image;
use crate::sparse::Coord;

/// Points as read from a PLY file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl RawCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Unique integer coordinates with colors in `[0, 1]`, sorted lexicographically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VoxelCloud {
    pub coords: Vec<Coord>,
    pub colors: Vec<[f32; 3]>,
}

impl VoxelCloud {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Sorts rows and averages the colors of repeated coordinates.
    pub fn from_points(coords: Vec<Coord>, colors: Vec<[f32; 3]>) -> Result<Self> {
        if coords.len() != colors.len() {
            return Err(Error::Shape(format!(
                "{} coordinates but {} colors",
                coords.len(),
                colors.len()
            )));
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| (coords[i], i));
        let mut out = VoxelCloud::default();
        let mut acc = [0.0f64; 3];
        let mut count = 0usize;
        for (k, &i) in order.iter().enumerate() {
            for c in 0..3 {
                acc[c] += colors[i][c] as f64;
            }
            count += 1;
            let last = k + 1 == order.len() || coords[order[k + 1]] != coords[i];
            if last {
                out.coords.push(coords[i]);
                out.colors.push(acc.map(|v| (v / count as f64) as f32));
                acc = [0.0; 3];
                count = 0;
            }
        }
        Ok(out)
    }

    /// Interprets integer PLY positions as voxel coordinates.
    pub fn from_raw_integer(raw: &RawCloud) -> Result<Self> {
        let mut coords = Vec::with_capacity(raw.len());
        for p in &raw.positions {
            if p.iter()
                .any(|v| v.fract() != 0.0 || v.abs() > i32::MAX as f64)
            {
                return Err(Error::Geometry(format!(
                    "position {p:?} is not an integer voxel coordinate"
                )));
            }
            coords.push(p.map(|v| v as i32));
        }
        Self::from_points(
            coords,
            raw.colors.iter().map(|c| color_to_unit(*c)).collect(),
        )
    }

    pub fn to_raw(&self) -> RawCloud {
        RawCloud {
            positions: self.coords.iter().map(|c| c.map(|v| v as f64)).collect(),
            colors: self.colors.iter().map(|c| c.map(unit_to_byte)).collect(),
        }
    }
}

pub fn color_to_unit(c: [u8; 3]) -> [f32; 3] {
    c.map(|v| v as f32 / 255.0)
}

/// Clamps to `[0, 1]` and rounds half up to 8 bits.
pub fn unit_to_byte(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v as f64 * 255.0 + 0.5).floor() as u8
}

/// True when every position is an integer in `[0, res)`.
pub fn is_voxelized(raw: &RawCloud, res: u32) -> bool {
    raw.positions.iter().all(|p| {
        p.iter()
            .all(|&v| v.fract() == 0.0 && v >= 0.0 && v < res as f64)
    })
}

/// Scales the bounding box, anchored at its minimum corner, into
/// `[0, res − 1]` and averages colors that land in the same voxel.
pub fn voxelize(raw: &RawCloud, res: u32) -> Result<VoxelCloud> {
    if raw.is_empty() {
        return Err(Error::Geometry("cannot voxelize an empty cloud".into()));
    }
    if res < 2 {
        return Err(Error::Invalid(format!("resolution {res} is too small")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &raw.positions {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Geometry(format!("non-finite position {p:?}")));
        }
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if extent <= 0.0 {
        return Err(Error::Geometry("cloud has zero extent".into()));
    }
    let scale = (res - 1) as f64 / extent;
    let top = (res - 1) as i32;
    let coords = raw
        .positions
        .iter()
        .map(|p| std::array::from_fn(|a| (((p[a] - lo[a]) * scale + 0.5).floor() as i32).min(top)))
        .collect();
    VoxelCloud::from_points(
        coords,
        raw.colors.iter().map(|&c| color_to_unit(c)).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
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
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
    line: usize,
}

#[derive(Debug)]
struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
}

fn header_err(line: usize, msg: impl Into<String>) -> Error {
    Error::PlyHeader {
        line,
        msg: msg.into(),
    }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut line_no = 0;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = r.read_until(b'\n', &mut buf)?;
        line_no += 1;
        if n == 0 {
            return Err(header_err(line_no, "unexpected end of file in header"));
        }
        let text = std::str::from_utf8(&buf)
            .map_err(|_| header_err(line_no, "header is not valid text"))?
            .trim_end_matches(['\n', '\r']);
        let words: Vec<&str> = text.split_whitespace().collect();
        if line_no == 1 {
            if text.trim() != "ply" {
                return Err(header_err(1, "missing 'ply' magic"));
            }
            continue;
        }
        match words.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                format = Some(match words.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => {
                        return Err(header_err(line_no, format!("unsupported format '{other}'")))
                    }
                    None => return Err(header_err(line_no, "format line has no format")),
                });
            }
            Some("element") => {
                let (Some(name), Some(count)) = (words.get(1), words.get(2)) else {
                    return Err(header_err(line_no, "element needs a name and a count"));
                };
                let count = count
                    .parse()
                    .map_err(|_| header_err(line_no, format!("bad element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                    line: line_no,
                });
            }
            Some("property") => {
                let Some(el) = elements.last_mut() else {
                    return Err(header_err(line_no, "property before any element"));
                };
                if words.get(1) == Some(&"list") {
                    return Err(header_err(
                        line_no,
                        format!("list properties are not supported (element '{}')", el.name),
                    ));
                }
                let (Some(ty), Some(name)) = (words.get(1), words.get(2)) else {
                    return Err(header_err(line_no, "property needs a type and a name"));
                };
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| header_err(line_no, format!("unknown property type '{ty}'")))?;
                el.props.push((name.to_string(), ty));
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(header_err(line_no, format!("unexpected keyword '{other}'")));
            }
        }
    }
    let format = format.ok_or_else(|| header_err(line_no, "header has no format line"))?;
    Ok(Header { format, elements })
}

/// Column indices of `x, y, z, red, green, blue` within the vertex element.
fn vertex_columns(el: &Element) -> Result<[usize; 6]> {
    let mut cols = [usize::MAX; 6];
    for (k, want) in ["x", "y", "z", "red", "green", "blue"].iter().enumerate() {
        let pos = el
            .props
            .iter()
            .position(|(n, _)| n == want)
            .ok_or_else(|| {
                let what = if k < 3 { "coordinate" } else { "color" };
                header_err(
                    el.line,
                    format!("vertex element lacks {what} property '{want}'"),
                )
            })?;
        if k >= 3 && el.props[pos].1.is_float() {
            return Err(header_err(
                el.line,
                format!("color property '{want}' must be an integer type"),
            ));
        }
        cols[k] = pos;
    }
    Ok(cols)
}

fn color_byte(v: f64) -> u8 {
    v.clamp(0.0, 255.0) as u8
}

pub fn read_ply_from<R: BufRead>(mut r: R) -> Result<RawCloud> {
    let header = read_header(&mut r)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| header_err(1, "no vertex element"))?;
    let cols = vertex_columns(&header.elements[vi])?;
    let mut cloud = RawCloud::default();
    let mut row = Vec::new();
    match header.format {
        PlyFormat::Ascii => {
            let mut lines = r.lines();
            let mut line_no = 0usize;
            for (e, el) in header.elements.iter().enumerate().take(vi + 1) {
                for k in 0..el.count {
                    let line = lines.next().ok_or_else(|| {
                        Error::Ply(format!(
                            "file ends after {k} of {} '{}' rows",
                            el.count, el.name
                        ))
                    })??;
                    line_no += 1;
                    if e < vi {
                        continue;
                    }
                    row.clear();
                    for w in line.split_whitespace() {
                        row.push(w.parse::<f64>().map_err(|_| {
                            Error::Ply(format!("data line {line_no}: bad number '{w}'"))
                        })?);
                    }
                    if row.len() < el.props.len() {
                        return Err(Error::Ply(format!(
                            "data line {line_no}: {} values, expected {}",
                            row.len(),
                            el.props.len()
                        )));
                    }
                    push_row(&mut cloud, &row, &cols);
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for (e, el) in header.elements.iter().enumerate().take(vi + 1) {
                let width: usize = el.props.iter().map(|p| p.1.size()).sum();
                let mut bytes = vec![0u8; width];
                for k in 0..el.count {
                    r.read_exact(&mut bytes).map_err(|err| {
                        if err.kind() == std::io::ErrorKind::UnexpectedEof {
                            Error::Ply(format!(
                                "file ends after {k} of {} '{}' rows",
                                el.count, el.name
                            ))
                        } else {
                            Error::Io(err)
                        }
                    })?;
                    if e < vi {
                        continue;
                    }
                    row.clear();
                    let mut off = 0;
                    for &(_, ty) in &el.props {
                        row.push(ty.read_le(&bytes[off..]));
                        off += ty.size();
                    }
                    push_row(&mut cloud, &row, &cols);
                }
            }
        }
    }
    Ok(cloud)
}

fn push_row(cloud: &mut RawCloud, row: &[f64], cols: &[usize; 6]) {
    cloud
        .positions
        .push([row[cols[0]], row[cols[1]], row[cols[2]]]);
    cloud.colors.push([
        color_byte(row[cols[3]]),
        color_byte(row[cols[4]]),
        color_byte(row[cols[5]]),
    ]);
}

pub fn read_ply(path: &Path) -> Result<RawCloud> {
    let f = std::fs::File::open(path)?;
    read_ply_from(std::io::BufReader::new(f))
}

/// Writes integer positions as `int` and anything else as `double`, so that
/// reading the file back is lossless.
pub fn write_ply_to<W: Write>(mut w: W, cloud: &RawCloud, format: PlyFormat) -> Result<()> {
    if cloud.positions.len() != cloud.colors.len() {
        return Err(Error::Shape("positions and colors differ in length".into()));
    }
    let integer = cloud.positions.iter().all(|p| {
        p.iter()
            .all(|&v| v.fract() == 0.0 && v.abs() <= i32::MAX as f64)
    });
    let ty = if integer { "int" } else { "double" };
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        w,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty {ty} x\nproperty {ty} y\nproperty {ty} z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )?;
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        match format {
            PlyFormat::Ascii => {
                if integer {
                    writeln!(
                        w,
                        "{} {} {} {} {} {}",
                        p[0] as i32, p[1] as i32, p[2] as i32, c[0], c[1], c[2]
                    )?;
                } else {
                    writeln!(
                        w,
                        "{:?} {:?} {:?} {} {} {}",
                        p[0], p[1], p[2], c[0], c[1], c[2]
                    )?;
                }
            }
            PlyFormat::BinaryLittleEndian => {
                for &v in p {
                    if integer {
                        w.write_all(&(v as i32).to_le_bytes())?;
                    } else {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                w.write_all(c)?;
            }
        }
    }
    Ok(())
}

pub fn write_ply(path: &Path, cloud: &RawCloud, format: PlyFormat) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_ply_to(&mut w, cloud, format)?;
    w.flush()?;
    Ok(())
}

/// Binary PPM (`P6`, maxval 255).
pub fn write_ppm_to<W: Write>(mut w: W, img: &Image) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| unit_to_byte(v)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_ppm_to(&mut w, img)?;
    w.flush()?;
    Ok(())
}

pub fn read_ppm_from<R: Read>(mut r: R) -> Result<Image> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Image("not a binary PPM (P6)".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse()
            .map_err(|_| Error::Image(format!("bad PPM {what} '{t}'")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(Error::Image(format!("unsupported maxval {max}")));
    }
    let body = &data[pos + 1..];
    if body.len() < w * h * 3 {
        return Err(Error::Image("truncated PPM pixel data".into()));
    }
    Ok(Image {
        width: w,
        height: h,
        data: body[..w * h * 3]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect(),
    })
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    read_ppm_from(std::fs::File::open(path)?)
}

/// 64-bit FNV-1a over the sorted coordinates, each axis as little-endian `i32`.
pub fn geometry_hash(coords: &[Coord]) -> u64 {
    let mut sorted = coords.to_vec();
    sorted.sort_unstable();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for c in &sorted {
        for v in c {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

pub const BITSTREAM_MAGIC: &[u8; 4] = b"ROPC";
pub const BITSTREAM_VERSION: u8 = 1;

/// λ values with a one-byte id in the container; other values use id 255.
pub const LAMBDAS: [f64; 5] = [25000.0, 4000.0, 800.0, 250.0, 85.0];

pub fn lambda_id(lambda: f64) -> u8 {
    LAMBDAS
        .iter()
        .position(|&l| l == lambda)
        .map_or(255, |i| i as u8)
}

/// Range-coded latents plus the header needed to check the geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub lambda_id: u8,
    pub geometry_hash: u64,
    pub points: u32,
    pub z: Vec<u8>,
    pub y: Vec<u8>,
}

impl Bitstream {
    pub const HEADER_LEN: usize = 4 + 1 + 1 + 8 + 4;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::HEADER_LEN + 8 + self.z.len() + self.y.len());
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.push(BITSTREAM_VERSION);
        out.push(self.lambda_id);
        out.extend_from_slice(&self.geometry_hash.to_le_bytes());
        out.extend_from_slice(&self.points.to_le_bytes());
        for s in [&self.z, &self.y] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let need = |n: usize, what: &str| -> Result<()> {
            if b.len() < n {
                Err(Error::Bitstream(format!("truncated before {what}")))
            } else {
                Ok(())
            }
        };
        need(Self::HEADER_LEN, "end of header")?;
        if &b[..4] != BITSTREAM_MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        if b[4] != BITSTREAM_VERSION {
            return Err(Error::Bitstream(format!("unsupported version {}", b[4])));
        }
        let lambda_id = b[5];
        let geometry_hash = u64::from_le_bytes(b[6..14].try_into().unwrap());
        let points = u32::from_le_bytes(b[14..18].try_into().unwrap());
        let mut pos = Self::HEADER_LEN;
        let mut streams = Vec::with_capacity(2);
        for what in ["z stream", "y stream"] {
            need(pos + 4, what)?;
            let len = u32::from_le_bytes(b[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            need(pos + len, what)?;
            streams.push(b[pos..pos + len].to_vec());
            pos += len;
        }
        if pos != b.len() {
            return Err(Error::Bitstream(format!(
                "{} trailing bytes after the y stream",
                b.len() - pos
            )));
        }
        let y = streams.pop().unwrap();
        let z = streams.pop().unwrap();
        Ok(Bitstream {
            lambda_id,
            geometry_hash,
            points,
            z,
            y,
        })
    }

    pub fn len(&self) -> usize {
        Self::HEADER_LEN + 8 + self.z.len() + self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Voxelized sphere shell of the given radius with a smooth color pattern,
/// for tests and toy runs.
pub fn synthetic_cloud(radius: f64, seed: u64) -> VoxelCloud {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let r = radius.ceil() as i32 + 1;
    let center = r;
    let mut coords = Vec::new();
    let mut colors = Vec::new();
    for x in -r..=r {
        for y in -r..=r {
            for z in -r..=r {
                let d = ((x * x + y * y + z * z) as f64).sqrt();
                if (d - radius).abs() >= 0.5 {
                    continue;
                }
                let (u, v, w) = (x as f64 / radius, y as f64 / radius, z as f64 / radius);
                let stripes = (6.0 * v.asin() + phase[0]).sin();
                let checker = (5.0 * w.atan2(u) + phase[1]).sin() * (4.0 * v + phase[2]).cos();
                let t = 0.5 + 0.5 * stripes;
                colors.push([
                    (0.15 + 0.7 * t) as f32,
                    (0.5 + 0.35 * checker) as f32,
                    (0.85 - 0.6 * t * (0.5 + 0.5 * checker)) as f32,
                ]);
                coords.push([x + center, y + center, z + center]);
            }
        }
    }
    VoxelCloud::from_points(coords, colors).expect("matching lengths")
}
