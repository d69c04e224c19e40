//! The CEFI binary container.
//!
//! Feature file, all little-endian:
//!
//! ```text
//! "CEFI" | u16 version=1 | u8 dtype=0 (f32) | u8 flags (bit0: labels)
//! u64 rows | u64 cols | rows*cols f32 | rows u32 ids | [rows u32 labels]
//! ```
//!
//! Flag bit1 marks the sectioned variant used for checkpoints and pipeline
//! artifacts. After the first eight bytes it carries `u64 config_hash`,
//! `u32 section_count`, then per section `u16 name_len | name (UTF-8) |
//! u8 dtype (0 f32, 1 u32) | u64 rows | u64 cols | data`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::Matrix;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CEFI";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U32: u8 = 1;
pub const FLAG_LABELS: u8 = 0b01;
pub const FLAG_SECTIONED: u8 = 0b10;
pub const FEATURE_HEADER_BYTES: u64 = 24;

const CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub features: Matrix,
    pub ids: Vec<u32>,
    pub labels: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    F32(Matrix),
    U32 { rows: usize, cols: usize, values: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub data: SectionData,
}

/// Named blobs bound to the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub config_hash: u64,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(config_hash: u64) -> Self {
        Self { config_hash, sections: Vec::new() }
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: Matrix) {
        self.sections.push(Section { name: name.into(), data: SectionData::F32(m) });
    }

    pub fn push_u32(&mut self, name: impl Into<String>, values: Vec<u32>) {
        let rows = values.len();
        self.sections.push(Section { name: name.into(), data: SectionData::U32 { rows, cols: 1, values } });
    }

    fn find(&self, name: &str) -> Result<&SectionData> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.data)
            .ok_or_else(|| Error::invalid(format!("container has no section '{name}'")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn matrix(&self, name: &str) -> Result<&Matrix> {
        match self.find(name)? {
            SectionData::F32(m) => Ok(m),
            SectionData::U32 { .. } => Err(Error::invalid(format!("section '{name}' holds u32 data"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match self.find(name)? {
            SectionData::U32 { values, .. } => Ok(values),
            SectionData::F32(_) => Err(Error::invalid(format!("section '{name}' holds f32 data"))),
        }
    }
}

// ---------------------------------------------------------------- writing

fn write_f32s(w: &mut impl Write, values: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(CHUNK * 4);
    for chunk in values.chunks(CHUNK) {
        buf.clear();
        chunk.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        w.write_all(&buf)?;
    }
    Ok(())
}

fn write_u32s(w: &mut impl Write, values: &[u32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(CHUNK * 4);
    for chunk in values.chunks(CHUNK) {
        buf.clear();
        chunk.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        w.write_all(&buf)?;
    }
    Ok(())
}

fn preamble(flags: u8) -> [u8; 8] {
    let mut head = [0u8; 8];
    head[..4].copy_from_slice(&MAGIC);
    head[4..6].copy_from_slice(&VERSION.to_le_bytes());
    head[6] = DTYPE_F32;
    head[7] = flags;
    head
}

pub fn encode_features(w: &mut impl Write, file: &FeatureFile) -> Result<()> {
    let rows = file.features.rows();
    if file.ids.len() != rows || file.labels.as_ref().is_some_and(|l| l.len() != rows) {
        return Err(Error::shape("ids and labels must have one entry per feature row"));
    }
    let flags = if file.labels.is_some() { FLAG_LABELS } else { 0 };
    let io = |e| Error::io("<stream>", e);
    w.write_all(&preamble(flags)).map_err(io)?;
    w.write_all(&(rows as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(file.features.cols() as u64).to_le_bytes()).map_err(io)?;
    write_f32s(w, file.features.data()).map_err(io)?;
    write_u32s(w, &file.ids).map_err(io)?;
    if let Some(labels) = &file.labels {
        write_u32s(w, labels).map_err(io)?;
    }
    Ok(())
}

pub fn encode_container(w: &mut impl Write, c: &Container) -> Result<()> {
    let io = |e| Error::io("<stream>", e);
    w.write_all(&preamble(FLAG_SECTIONED)).map_err(io)?;
    w.write_all(&c.config_hash.to_le_bytes()).map_err(io)?;
    w.write_all(&(c.sections.len() as u32).to_le_bytes()).map_err(io)?;
    for s in &c.sections {
        let name = s.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid("section name too long"))?;
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        let (dtype, rows, cols) = match &s.data {
            SectionData::F32(m) => (DTYPE_F32, m.rows(), m.cols()),
            SectionData::U32 { rows, cols, values } => {
                if rows * cols != values.len() {
                    return Err(Error::shape(format!("section '{}' length mismatch", s.name)));
                }
                (DTYPE_U32, *rows, *cols)
            }
        };
        w.write_all(&[dtype]).map_err(io)?;
        w.write_all(&(rows as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(cols as u64).to_le_bytes()).map_err(io)?;
        match &s.data {
            SectionData::F32(m) => write_f32s(w, m.data()).map_err(io)?,
            SectionData::U32 { values, .. } => write_u32s(w, values).map_err(io)?,
        }
    }
    Ok(())
}

fn write_atomically(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(|e| relabel(e, path))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

pub fn write_features(path: impl AsRef<Path>, file: &FeatureFile) -> Result<()> {
    write_atomically(path.as_ref(), |w| encode_features(w, file))
}

pub fn write_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    write_atomically(path.as_ref(), |w| encode_container(w, c))
}

// ---------------------------------------------------------------- reading

/// Reader that tracks its byte offset so every error can name one.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fail<T>(&self, offset: u64, message: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset, message: message.into() })
    }

    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return self.fail(self.offset + filled as u64, format!("truncated while reading {what}"))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return self.fail(self.offset + filled as u64, format!("read failed: {e}")),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn words<T>(&mut self, n: usize, what: &str, conv: fn([u8; 4]) -> T) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(n.min(1 << 28));
        let mut buf = vec![0u8; CHUNK * 4];
        let mut left = n;
        while left > 0 {
            let take = left.min(CHUNK);
            self.exact(&mut buf[..take * 4], what)?;
            out.extend(buf[..take * 4].chunks_exact(4).map(|c| conv([c[0], c[1], c[2], c[3]])));
            left -= take;
        }
        Ok(out)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.offset;
        let values = self.words(n, what, f32::from_le_bytes)?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return self.fail(start + 4 * i as u64, format!("non-finite value in {what}"));
        }
        Ok(values)
    }

    fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        self.words(n, what, u32::from_le_bytes)
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => self.fail(self.offset, "trailing bytes after payload"),
            Err(e) => self.fail(self.offset, format!("read failed: {e}")),
        }
    }

    /// `rows * cols` with an overflow check against the element count limit.
    fn count(&self, rows: u64, cols: u64, at: u64) -> Result<usize> {
        rows.checked_mul(cols)
            .filter(|&n| n <= (usize::MAX / 4) as u64)
            .map(|n| n as usize)
            .ok_or(Error::Format { offset: at, message: format!("{rows}x{cols} is too large") })
    }
}

/// Validates the fixed preamble; returns the flags byte.
fn read_preamble<R: Read>(c: &mut Cursor<R>) -> Result<u8> {
    let mut magic = [0u8; 4];
    c.exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return c.fail(0, format!("bad magic {magic:?}"));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return c.fail(4, format!("unsupported version {version}"));
    }
    let dtype = c.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return c.fail(6, format!("unsupported dtype {dtype}"));
    }
    let flags = c.u8("flags")?;
    if flags & !(FLAG_LABELS | FLAG_SECTIONED) != 0 {
        return c.fail(7, format!("unknown flag bits {flags:#04x}"));
    }
    Ok(flags)
}

pub fn decode_features(r: impl Read) -> Result<FeatureFile> {
    let mut c = Cursor { inner: r, offset: 0 };
    let flags = read_preamble(&mut c)?;
    if flags & FLAG_SECTIONED != 0 {
        return c.fail(7, "sectioned container where a feature file was expected");
    }
    let rows = c.u64("rows")?;
    let cols = c.u64("cols")?;
    let n = c.count(rows, cols, 8)?;
    let rows = rows as usize;
    let data = c.f32s(n, "features")?;
    let ids = c.u32s(rows, "ids")?;
    let labels = if flags & FLAG_LABELS != 0 { Some(c.u32s(rows, "labels")?) } else { None };
    c.expect_end()?;
    Ok(FeatureFile { features: Matrix::from_vec(rows, cols as usize, data)?, ids, labels })
}

pub fn decode_container(r: impl Read) -> Result<Container> {
    let mut c = Cursor { inner: r, offset: 0 };
    let flags = read_preamble(&mut c)?;
    if flags != FLAG_SECTIONED {
        return c.fail(7, "plain feature file where a sectioned container was expected");
    }
    let config_hash = c.u64("config hash")?;
    let count = c.u32("section count")?;
    let mut sections = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let at = c.offset;
        let len = c.u16("section name length")? as usize;
        let mut name = vec![0u8; len];
        c.exact(&mut name, "section name")?;
        let name = String::from_utf8(name).or_else(|_| c.fail(at + 2, "section name is not UTF-8"))?;
        let dtype_at = c.offset;
        let dtype = c.u8("section dtype")?;
        let rows = c.u64("section rows")?;
        let cols = c.u64("section cols")?;
        let n = c.count(rows, cols, dtype_at + 1)?;
        let (rows, cols) = (rows as usize, cols as usize);
        let data = match dtype {
            DTYPE_F32 => SectionData::F32(Matrix::from_vec(rows, cols, c.f32s(n, &name)?)?),
            DTYPE_U32 => SectionData::U32 { rows, cols, values: c.u32s(n, &name)? },
            other => return c.fail(dtype_at, format!("unknown section dtype {other}")),
        };
        sections.push(Section { name, data });
    }
    c.expect_end()?;
    Ok(Container { config_hash, sections })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::with_capacity(1 << 20, File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    decode_features(open(path.as_ref())?)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    decode_container(open(path.as_ref())?)
}

/// Reads a container and rejects it unless it was produced under `expected`.
pub fn read_container_checked(path: impl AsRef<Path>, expected: u64) -> Result<Container> {
    let path = path.as_ref();
    let c = read_container(path)?;
    if c.config_hash != expected {
        return Err(Error::ConfigMismatch { path: path.to_path_buf(), expected, found: c.config_hash });
    }
    Ok(c)
}
