//! VOL1 volume files and CSV tables.
//!
//! VOL1 is a short text header, one `key values` pair per line, ended by a
//! blank line and followed by the raw little-endian payload:
//!
//! ```text
//! magic VOL1
//! dims 96 96 96
//! spacing 1 1 1
//! dtype f32
//! order x-fastest
//! channels 3
//!
//! <payload>
//! ```
//!
//! `channels` is only written for multi-component data (displacement fields,
//! interleaved per voxel). Every write goes to a temporary file in the target
//! directory and is renamed into place.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::deform::Ddf;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{Dims, LabelMap, Spacing, Volume};

const MAGIC: &str = "VOL1";
const MAX_HEADER: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub dims: Dims,
    pub spacing: Spacing,
    pub dtype: Dtype,
    pub channels: usize,
}

impl Header {
    fn payload_len(&self) -> usize {
        self.dims.len() * self.channels * self.dtype.size()
    }

    fn render(&self) -> String {
        let Dims { nx, ny, nz } = self.dims;
        let [sx, sy, sz] = self.spacing;
        let mut s = format!("magic {MAGIC}\ndims {nx} {ny} {nz}\nspacing {sx} {sy} {sz}\ndtype {}\norder x-fastest\n", self.dtype);
        if self.channels != 1 {
            s += &format!("channels {}\n", self.channels);
        }
        s.push('\n');
        s
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let (mut magic, mut dims, mut spacing, mut dtype, mut order) = (false, None, None, None, false);
        let mut channels = 1;
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else { continue };
            let vals: Vec<&str> = parts.collect();
            match (key, vals.as_slice()) {
                ("magic", [MAGIC]) => magic = true,
                ("dims", [x, y, z]) => {
                    let p = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad dims `{line}`")));
                    dims = Some(Dims::new(p(x)?, p(y)?, p(z)?));
                }
                ("spacing", [x, y, z]) => {
                    let p = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad spacing `{line}`")));
                    spacing = Some([p(x)?, p(y)?, p(z)?]);
                }
                ("dtype", ["f32"]) => dtype = Some(Dtype::F32),
                ("dtype", ["u8"]) => dtype = Some(Dtype::U8),
                ("order", ["x-fastest"]) => order = true,
                ("channels", [c]) => channels = c.parse().map_err(|_| bad(format!("bad channels `{line}`")))?,
                _ => return Err(bad(format!("unexpected header line `{line}`"))),
            }
        }
        if !magic {
            return Err(bad("missing `magic VOL1`".into()));
        }
        if !order {
            return Err(bad("missing `order x-fastest`".into()));
        }
        let dims = dims.ok_or_else(|| bad("missing dims".into()))?;
        if dims.is_empty() || channels == 0 {
            return Err(bad(format!("empty volume {dims} x {channels}")));
        }
        Ok(Header {
            dims,
            spacing: spacing.ok_or_else(|| bad("missing spacing".into()))?,
            dtype: dtype.ok_or_else(|| bad("missing dtype".into()))?,
            channels,
        })
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn encode(header: &Header, payload: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let text = header.render();
    let mut out = Vec::with_capacity(text.len() + header.payload_len());
    out.extend_from_slice(text.as_bytes());
    payload(&mut out);
    debug_assert_eq!(out.len(), text.len() + header.payload_len());
    out
}

fn push_f32<T: Real>(out: &mut Vec<u8>, values: impl Iterator<Item = T>) {
    for v in values {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Parses a whole VOL1 file into its header and payload bytes.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<(Header, Vec<u8>)> {
    let end = bytes
        .windows(2)
        .take(MAX_HEADER)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::format(path, "no blank line ending the header"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let header = Header::parse(path, text)?;
    let payload = &bytes[end + 2..];
    if payload.len() != header.payload_len() {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header implies {}", payload.len(), header.payload_len()),
        ));
    }
    Ok((header, payload.to_vec()))
}

fn read_file(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

fn expect(path: &Path, h: &Header, dtype: Dtype, channels: usize) -> Result<()> {
    if h.dtype != dtype || h.channels != channels {
        return Err(Error::format(
            path,
            format!("expected dtype {dtype} with {channels} channel(s), found {} with {}", h.dtype, h.channels),
        ));
    }
    Ok(())
}

fn f32s(payload: &[u8]) -> impl Iterator<Item = f32> + '_ {
    payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

pub fn encode_volume<T: Real>(v: &Volume<T>) -> Vec<u8> {
    let h = Header { dims: v.dims(), spacing: v.spacing(), dtype: Dtype::F32, channels: 1 };
    encode(&h, |out| push_f32(out, v.data().iter().copied()))
}

pub fn write_volume<T: Real>(path: &Path, v: &Volume<T>) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

pub fn read_volume<T: Real>(path: &Path) -> Result<Volume<T>> {
    let (h, payload) = read_file(path)?;
    expect(path, &h, Dtype::F32, 1)?;
    let data: Vec<T> = f32s(&payload).map(|x| T::lit(x as f64)).collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::format(path, "non-finite voxel values"));
    }
    Volume::new(h.dims, h.spacing, data)
}

pub fn encode_labels(l: &LabelMap) -> Vec<u8> {
    let h = Header { dims: l.dims(), spacing: [1.0; 3], dtype: Dtype::U8, channels: 1 };
    encode(&h, |out| out.extend_from_slice(l.data()))
}

pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    write_atomic(path, &encode_labels(l))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let (h, payload) = read_file(path)?;
    expect(path, &h, Dtype::U8, 1)?;
    LabelMap::new(h.dims, payload)
}

pub fn encode_ddf<T: Real>(d: &Ddf<T>) -> Vec<u8> {
    let h = Header { dims: d.dims(), spacing: [1.0; 3], dtype: Dtype::F32, channels: 3 };
    encode(&h, |out| push_f32(out, d.to_interleaved().into_iter()))
}

pub fn write_ddf<T: Real>(path: &Path, d: &Ddf<T>) -> Result<()> {
    write_atomic(path, &encode_ddf(d))
}

pub fn read_ddf<T: Real>(path: &Path) -> Result<Ddf<T>> {
    let (h, payload) = read_file(path)?;
    expect(path, &h, Dtype::F32, 3)?;
    let data: Vec<T> = f32s(&payload).map(|x| T::lit(x as f64)).collect();
    let d = Ddf::from_interleaved(h.dims, &data)?;
    if !d.is_finite() {
        return Err(Error::format(path, "non-finite displacements"));
    }
    Ok(d)
}

/// A CSV table with a fixed header row, held as strings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        let header = r.headers()?.iter().map(str::to_owned).collect::<Vec<_>>();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(str::to_owned).collect());
        }
        Ok(Table { header, rows })
    }

    /// Index of column `name`.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_roundtrip_and_header_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol");
        let v = Volume::<f32>::from_fn(Dims::new(3, 2, 2), |x, y, z| (x + 10 * y + 100 * z) as f32 * 0.5).with_spacing([1.0, 1.5, 2.0]);
        write_volume(&p, &v).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"magic VOL1\ndims 3 2 2\nspacing 1 1.5 2\ndtype f32\norder x-fastest\n\n"));
        assert_eq!(read_volume::<f32>(&p).unwrap(), v);
    }

    #[test]
    fn labels_and_ddf_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(4, 3, 2);
        let l = LabelMap::new(dims, (0..24).map(|i| (i % 3) as u8).collect()).unwrap();
        write_labels(&dir.path().join("l.vol"), &l).unwrap();
        assert_eq!(read_labels(&dir.path().join("l.vol")).unwrap(), l);
        let d = Ddf::<f64>::from_fn(dims, |x, y, z| [x as f64 * 0.25, -(y as f64), z as f64 + 0.5]);
        write_ddf(&dir.path().join("d.vol"), &d).unwrap();
        let text = std::fs::read(dir.path().join("d.vol")).unwrap();
        assert!(String::from_utf8_lossy(&text[..80]).contains("channels 3"));
        assert_eq!(read_ddf::<f64>(&dir.path().join("d.vol")).unwrap(), d);
        // a DDF is not a volume
        assert!(read_volume::<f32>(&dir.path().join("d.vol")).is_err());
    }

    #[test]
    fn rejects_truncated_and_garbled() {
        let p = Path::new("x.vol");
        let v = encode_volume(&Volume::<f32>::zeros(Dims::cube(2)));
        assert!(decode(p, &v[..v.len() - 1]).is_err());
        let mut bad = v.clone();
        bad[6] = b'2';
        assert!(decode(p, &bad).is_err());
        assert!(decode(p, b"magic VOL1\n").is_err());
        assert!(matches!(read_volume::<f32>(Path::new("/nonexistent/v.vol")), Err(Error::Io { .. })));
    }

    #[test]
    fn csv_quotes_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(["name", "value"]);
        t.push(vec!["a,b".into(), "1.5".into()]);
        t.push(vec!["say \"hi\"".into(), "2".into()]);
        let p = dir.path().join("t.csv");
        t.write(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "name,value\n\"a,b\",1.5\n\"say \"\"hi\"\"\",2\n");
        assert_eq!(Table::read(&p).unwrap(), t);
        assert_eq!(t.column("value"), Some(1));
    }
}
