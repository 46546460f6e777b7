//! CBTK token stores.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! header (24 bytes)
//!   magic        [u8; 4]  "CBTK"
//!   version      u32      1
//!   flags        u16      bit0 has_attention, bit1 has_cls
//!   dim          u32
//!   dtype        u16      0 = f32
//!   image_count  u64
//! record (repeated image_count times)
//!   id_len       u16
//!   id           [u8; id_len]  UTF-8
//!   n_tokens     u16
//!   cls          [f32; dim]          if has_cls
//!   tokens       [f32; n_tokens*dim] row-major
//!   attention    [f32; n_tokens]     if has_attention
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;

pub const MAGIC: [u8; 4] = *b"CBTK";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u16 = 0;
pub const HEADER_LEN: usize = 24;
pub const FLAG_ATTENTION: u16 = 1;
pub const FLAG_CLS: u16 = 1 << 1;
pub const MAX_TOKENS: usize = u16::MAX as usize;

/// Rows whose norm is within this of 1 are kept verbatim.
pub const UNIT_NORM_TOL: f32 = 1e-4;
/// Attention vectors whose sum is within this of 1 are kept verbatim.
pub const ATTENTION_SUM_TOL: f32 = 1e-5;

/// Patch tokens of one image.
///
/// Token rows are unit-norm; `raw_norms` keeps each row's norm before
/// normalization (1 for rows that were already unit). Attention, when present,
/// is non-negative and sums to one over the patches.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub image_id: String,
    dim: usize,
    tokens: Vec<f32>,
    raw_norms: Vec<f32>,
    attention: Option<Vec<f32>>,
    cls: Option<Vec<f32>>,
}

impl TokenSet {
    /// Build from row-major `tokens` (`n * dim` values). Rows that are not
    /// already unit-norm are normalized and their norm recorded.
    pub fn new(image_id: impl Into<String>, dim: usize, tokens: Vec<f32>) -> Result<Self> {
        let image_id = image_id.into();
        if dim == 0 {
            return Err(Error::invalid("token dimension must be positive"));
        }
        if tokens.len() % dim != 0 {
            return Err(Error::Format(format!(
                "{image_id}: {} values is not a multiple of dim {dim}",
                tokens.len()
            )));
        }
        let n = tokens.len() / dim;
        if n == 0 {
            return Err(Error::invalid(format!("{image_id}: token set is empty")));
        }
        if n > MAX_TOKENS {
            return Err(Error::Capacity(format!(
                "{image_id}: {n} tokens exceeds the limit of {MAX_TOKENS}"
            )));
        }
        let mut tokens = tokens;
        let mut raw_norms = Vec::with_capacity(n);
        for (i, row) in tokens.chunks_exact_mut(dim).enumerate() {
            raw_norms.push(unit_row(row).map_err(|e| {
                Error::Degenerate(format!("{image_id}: token {i}: {e}"))
            })?);
        }
        Ok(Self {
            image_id,
            dim,
            tokens,
            raw_norms,
            attention: None,
            cls: None,
        })
    }

    /// Attach CLS→patch attention. Values must be finite and non-negative; they
    /// are renormalized to sum to one when they do not already.
    pub fn with_attention(mut self, attention: Vec<f32>) -> Result<Self> {
        if attention.len() != self.n_tokens() {
            return Err(Error::Format(format!(
                "{}: attention has {} entries for {} tokens",
                self.image_id,
                attention.len(),
                self.n_tokens()
            )));
        }
        self.attention = Some(normalize_attention(attention).map_err(|e| {
            Error::InvalidInput(format!("{}: attention {e}", self.image_id))
        })?);
        Ok(self)
    }

    pub fn with_cls(mut self, mut cls: Vec<f32>) -> Result<Self> {
        if cls.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: cls.len(),
            });
        }
        unit_row(&mut cls)
            .map_err(|e| Error::Degenerate(format!("{}: cls {e}", self.image_id)))?;
        self.cls = Some(cls);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_tokens(&self) -> usize {
        self.raw_norms.len()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major token matrix.
    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.tokens.chunks_exact(self.dim)
    }

    pub fn raw_norms(&self) -> &[f32] {
        &self.raw_norms
    }

    pub fn attention(&self) -> Option<&[f32]> {
        self.attention.as_deref()
    }

    pub fn cls(&self) -> Option<&[f32]> {
        self.cls.as_deref()
    }

    fn flags(&self) -> u16 {
        let mut f: u16 = 0;
        if self.attention.is_some() {
            f |= FLAG_ATTENTION;
        }
        if self.cls.is_some() {
            f |= FLAG_CLS;
        }
        f
    }

    fn encoded_len(&self) -> usize {
        let mut len = 2 + self.image_id.len() + 2 + self.tokens.len() * 4;
        if let Some(c) = &self.cls {
            len += c.len() * 4;
        }
        if let Some(a) = &self.attention {
            len += a.len() * 4;
        }
        len
    }
}

fn unit_row(row: &mut [f32]) -> std::result::Result<f32, &'static str> {
    if row.iter().any(|x| !x.is_finite()) {
        return Err("non-finite value");
    }
    let n = linalg::norm(row);
    if n == 0.0 || !n.is_finite() {
        return Err("zero norm");
    }
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        linalg::normalize(row);
    }
    Ok(n)
}

fn normalize_attention(mut a: Vec<f32>) -> std::result::Result<Vec<f32>, &'static str> {
    if a.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err("must be finite and non-negative");
    }
    let sum: f64 = a.iter().map(|&x| x as f64).sum();
    if sum <= 0.0 {
        return Err("sums to zero");
    }
    if (sum - 1.0).abs() > ATTENTION_SUM_TOL as f64 {
        let inv = 1.0 / sum;
        a.iter_mut().for_each(|x| *x = (*x as f64 * inv) as f32);
    }
    Ok(a)
}

/// Decoded CBTK header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub flags: u16,
    pub dim: u32,
    pub image_count: u64,
}

impl StoreHeader {
    pub fn has_attention(&self) -> bool {
        self.flags & FLAG_ATTENTION != 0
    }

    pub fn has_cls(&self) -> bool {
        self.flags & FLAG_CLS != 0
    }

    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..10].copy_from_slice(&self.flags.to_le_bytes());
        b[10..14].copy_from_slice(&self.dim.to_le_bytes());
        b[14..16].copy_from_slice(&DTYPE_F32.to_le_bytes());
        b[16..24].copy_from_slice(&self.image_count.to_le_bytes());
        b
    }

    fn parse(b: &[u8; HEADER_LEN]) -> Result<Self> {
        if b[0..4] != MAGIC {
            return Err(Error::UnsupportedFormat(format!(
                "bad magic {:?}, expected \"CBTK\"",
                String::from_utf8_lossy(&b[0..4])
            )));
        }
        let version = u32::from_le_bytes(b[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("version {version}")));
        }
        let flags = u16::from_le_bytes(b[8..10].try_into().unwrap());
        if flags & !(FLAG_ATTENTION | FLAG_CLS) != 0 {
            return Err(Error::UnsupportedFormat(format!("unknown flags {flags:#x}")));
        }
        let dim = u32::from_le_bytes(b[10..14].try_into().unwrap());
        let dtype = u16::from_le_bytes(b[14..16].try_into().unwrap());
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedFormat(format!("dtype code {dtype}")));
        }
        let image_count = u64::from_le_bytes(b[16..24].try_into().unwrap());
        if image_count > 0 && dim == 0 {
            return Err(Error::Corruption("dim 0 with records present".into()));
        }
        Ok(Self {
            flags,
            dim,
            image_count,
        })
    }
}

/// Record-at-a-time CBTK writer. The header carries the record count, so it
/// is fixed up front and [`StoreWriter::finish`] checks that it was met.
pub struct StoreWriter<W: Write> {
    inner: W,
    header: StoreHeader,
    written: u64,
    records: u64,
    buf: Vec<u8>,
}

impl<W: Write> StoreWriter<W> {
    pub fn new(mut inner: W, dim: usize, attention: bool, cls: bool, image_count: u64) -> Result<Self> {
        let dim = u32::try_from(dim).map_err(|_| Error::Capacity(format!("dim {dim}")))?;
        let mut flags = 0;
        if attention {
            flags |= FLAG_ATTENTION;
        }
        if cls {
            flags |= FLAG_CLS;
        }
        let header = StoreHeader {
            flags,
            dim,
            image_count,
        };
        inner.write_all(&header.to_bytes())?;
        Ok(Self {
            inner,
            header,
            written: HEADER_LEN as u64,
            records: 0,
            buf: Vec::new(),
        })
    }

    pub fn push(&mut self, r: &TokenSet) -> Result<()> {
        if r.dim != self.header.dim as usize {
            return Err(Error::Format(format!(
                "{}: dim {} differs from store dim {}",
                r.image_id, r.dim, self.header.dim
            )));
        }
        if r.flags() != self.header.flags {
            return Err(Error::Format(format!(
                "{}: optional channels differ from the store header",
                r.image_id
            )));
        }
        if r.image_id.len() > u16::MAX as usize {
            return Err(Error::Capacity(format!(
                "image_id of {} bytes exceeds 65535",
                r.image_id.len()
            )));
        }
        if r.n_tokens() > MAX_TOKENS {
            return Err(Error::Capacity(format!(
                "{}: {} tokens exceeds 65535",
                r.image_id,
                r.n_tokens()
            )));
        }
        if self.records == self.header.image_count {
            return Err(Error::Capacity(format!(
                "store header declares {} records",
                self.header.image_count
            )));
        }
        let buf = &mut self.buf;
        buf.clear();
        buf.reserve(r.encoded_len());
        buf.extend_from_slice(&(r.image_id.len() as u16).to_le_bytes());
        buf.extend_from_slice(r.image_id.as_bytes());
        buf.extend_from_slice(&(r.n_tokens() as u16).to_le_bytes());
        if let Some(c) = &r.cls {
            extend_f32(buf, c);
        }
        extend_f32(buf, &r.tokens);
        if let Some(a) = &r.attention {
            extend_f32(buf, a);
        }
        self.inner.write_all(buf)?;
        self.written += buf.len() as u64;
        self.records += 1;
        Ok(())
    }

    /// Flush and return the number of bytes written.
    pub fn finish(mut self) -> Result<u64> {
        if self.records != self.header.image_count {
            return Err(Error::Format(format!(
                "wrote {} records but the header declares {}",
                self.records, self.header.image_count
            )));
        }
        self.inner.flush()?;
        Ok(self.written)
    }
}

/// Serialize `records` to `w`. Returns the number of bytes written.
pub fn write_store_to<W: Write>(records: &[TokenSet], w: W) -> Result<u64> {
    let (dim, attention, cls) = match records.first() {
        Some(r) => (r.dim, r.attention.is_some(), r.cls.is_some()),
        None => (0, false, false),
    };
    // Validate everything before the header goes out.
    for r in records {
        if r.dim != dim {
            return Err(Error::Format(format!(
                "{}: dim {} differs from store dim {dim}",
                r.image_id, r.dim
            )));
        }
        if (r.attention.is_some(), r.cls.is_some()) != (attention, cls) {
            return Err(Error::Format(format!(
                "{}: optional channels differ from the first record",
                r.image_id
            )));
        }
    }
    let mut sw = StoreWriter::new(w, dim, attention, cls, records.len() as u64)?;
    for r in records {
        sw.push(r)?;
    }
    sw.finish()
}

pub fn write_store(records: &[TokenSet], path: impl AsRef<Path>) -> Result<u64> {
    let file = File::create(path.as_ref())?;
    write_store_to(records, BufWriter::new(file))
}

fn extend_f32(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Streaming CBTK reader. Yields records in file order and validates each one.
pub struct StoreReader<R> {
    inner: R,
    header: StoreHeader,
    next: u64,
    done: bool,
}

impl<R: Read> StoreReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut hb = [0u8; HEADER_LEN];
        inner.read_exact(&mut hb).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => {
                Error::UnsupportedFormat("file shorter than the 24-byte header".into())
            }
            _ => Error::Io(e),
        })?;
        let header = StoreHeader::parse(&hb)?;
        Ok(Self {
            inner,
            header,
            next: 0,
            done: false,
        })
    }

    pub fn header(&self) -> StoreHeader {
        self.header
    }

    fn read_record(&mut self) -> Result<TokenSet> {
        let index = self.next;
        let corrupt = |reason: String| Error::CorruptRecord { index, reason };
        let dim = self.header.dim as usize;

        let id_len = self.read_u16().map_err(|e| corrupt(format!("id length: {e}")))? as usize;
        let mut id = vec![0u8; id_len];
        self.fill(&mut id).map_err(|e| corrupt(format!("id: {e}")))?;
        let image_id = String::from_utf8(id).map_err(|_| corrupt("id is not UTF-8".into()))?;
        let n = self.read_u16().map_err(|e| corrupt(format!("token count: {e}")))? as usize;
        if n == 0 {
            return Err(corrupt(format!("{image_id}: zero tokens")));
        }
        let cls = if self.header.has_cls() {
            Some(self.read_f32s(dim).map_err(|e| corrupt(format!("cls: {e}")))?)
        } else {
            None
        };
        let tokens = self
            .read_f32s(n * dim)
            .map_err(|e| corrupt(format!("tokens: {e}")))?;
        let attention = if self.header.has_attention() {
            Some(self.read_f32s(n).map_err(|e| corrupt(format!("attention: {e}")))?)
        } else {
            None
        };

        let invalid = |e: Error| corrupt(format!("{image_id}: {e}"));
        let mut ts = TokenSet::new(image_id.clone(), dim, tokens).map_err(invalid)?;
        if let Some(a) = attention {
            ts = ts.with_attention(a).map_err(invalid)?;
        }
        if let Some(c) = cls {
            ts = ts.with_cls(c).map_err(invalid)?;
        }
        Ok(ts)
    }

    fn fill(&mut self, buf: &mut [u8]) -> io::Result<()> {
        self.inner.read_exact(buf)
    }

    fn read_u16(&mut self) -> io::Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_f32s(&mut self, n: usize) -> io::Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        self.fill(&mut raw)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl<R: Read> Iterator for StoreReader<R> {
    type Item = Result<TokenSet>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.next == self.header.image_count {
            self.done = true;
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(Error::Corruption(format!(
                    "trailing bytes after {} declared records",
                    self.header.image_count
                )))),
                Err(e) => Some(Err(Error::Io(e))),
            };
        }
        let r = self.read_record();
        if r.is_err() {
            self.done = true;
        }
        self.next += 1;
        Some(r)
    }
}

/// Open a store for streaming reads.
pub fn open_store(path: impl AsRef<Path>) -> Result<StoreReader<BufReader<File>>> {
    StoreReader::new(BufReader::new(File::open(path.as_ref())?))
}

/// Read every record through a buffered stream.
pub fn read_store(path: impl AsRef<Path>) -> Result<Vec<TokenSet>> {
    open_store(path)?.collect()
}

/// Read every record from a memory map of the file.
pub fn read_store_mmap(path: impl AsRef<Path>) -> Result<Vec<TokenSet>> {
    let file = File::open(path.as_ref())?;
    // SAFETY: the map is read-only and dropped before returning; stores are not
    // modified while being read (single writer, immutable after close).
    let map = unsafe { memmap2::Mmap::map(&file)? };
    StoreReader::new(&map[..])?.collect()
}

/// Parse a store already held in memory.
pub fn read_store_bytes(bytes: &[u8]) -> Result<Vec<TokenSet>> {
    StoreReader::new(bytes)?.collect()
}
