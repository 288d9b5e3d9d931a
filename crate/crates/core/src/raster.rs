//! Raster data model and on-disk formats.
//!
//! Conventions: rasters are row-major with a top-left origin, and pixel
//! `(i, j)` is `(row, column)`. On-disk reals are always 32-bit little-endian
//! IEEE-754, whatever the in-memory precision.
//!
//! Three file formats are supported:
//!
//! * binary PGM (`P5`, maxval 255) for label masks, byte 255 being void;
//! * `SDTF`, an N-dimensional real array container;
//! * `SDTW`, a list of named `SDTF` records used for network weights.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::real::Real;
use crate::tensor::Tensor;

/// Byte reserved for void pixels in PGM masks.
pub const VOID_BYTE: u8 = 255;

const SDTF_MAGIC: &[u8; 4] = b"SDTF";
const SDTW_MAGIC: &[u8; 4] = b"SDTW";
const FORMAT_VERSION: u32 = 1;
/// Upper bound on the element count of a single record (4 GiB of payload).
const MAX_ELEMENTS: u64 = 1 << 30;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u32),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("dimension overflow")]
    DimensionOverflow,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("payload length mismatch: {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("pixel value {value} is not a class index below {classes}")]
    ClassOutOfRange { value: u8, classes: usize },
    #[error("empty field stack")]
    EmptyStack,
    #[error("invalid raster: {0}")]
    Invalid(String),
}

/// Per-pixel class indices with an optional void sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<u8>,
    void_index: Option<u8>,
}

impl LabelMask {
    pub fn new(
        width: usize,
        height: usize,
        classes: usize,
        data: Vec<u8>,
        void_index: Option<u8>,
    ) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Invalid("mask must have at least one pixel".into()));
        }
        if data.len() != width * height {
            return Err(RasterError::Invalid(format!(
                "{}x{} mask needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if !(2..=255).contains(&classes) {
            return Err(RasterError::Invalid(format!("class count {classes} outside 2..=255")));
        }
        if let Some(v) = void_index {
            if (v as usize) < classes {
                return Err(RasterError::Invalid(format!("void index {v} collides with a class")));
            }
        }
        if let Some(&value) = data.iter().find(|&&v| (v as usize) >= classes && Some(v) != void_index) {
            return Err(RasterError::ClassOutOfRange { value, classes });
        }
        Ok(Self { width, height, classes, data, void_index })
    }

    /// Mask with every pixel set to `class`.
    pub fn filled(width: usize, height: usize, classes: usize, class: u8) -> Result<Self, RasterError> {
        Self::new(width, height, classes, vec![class; width * height], Some(VOID_BYTE))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn void_index(&self) -> Option<u8> {
        self.void_index
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    pub fn is_void(&self, idx: usize) -> bool {
        Some(self.data[idx]) == self.void_index
    }

    /// Class of pixel `idx`, or `None` for void.
    pub fn class_at(&self, idx: usize) -> Option<usize> {
        if self.is_void(idx) {
            None
        } else {
            Some(self.data[idx] as usize)
        }
    }

    /// Membership grid of class `k`; void pixels belong to no class.
    pub fn class_mask(&self, k: usize) -> BinaryMask {
        let data = self.data.iter().map(|&v| v as usize == k && Some(v) != self.void_index).collect();
        BinaryMask { width: self.width, height: self.height, data }
    }

    /// Same pixels, different declared class count.
    pub fn with_classes(self, classes: usize) -> Result<Self, RasterError> {
        Self::new(self.width, self.height, classes, self.data, self.void_index)
    }

    /// Builds a mask from a generator, used by crops and flips.
    pub(crate) fn from_fn(
        width: usize,
        height: usize,
        classes: usize,
        void_index: Option<u8>,
        f: impl Fn(usize, usize) -> u8,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self { width, height, classes, data, void_index }
    }
}

/// Boolean grid, the site set of a distance transform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(RasterError::Invalid(format!(
                "{}x{} binary mask with {} values",
                width,
                height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height).flat_map(|i| (0..width).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn complement(&self) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|b| !b).collect() }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Real-valued raster with finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> ScalarField<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::Invalid(format!(
                "{}x{} field needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(RasterError::Invalid("field values must be finite".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.width + j]
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

/// `C` fields of identical size, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStack<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> FieldStack<T> {
    /// Stack of `channels` fields; `data` is channel-major, row-major.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self, RasterError> {
        if data.len() != channels * height * width {
            return Err(RasterError::Invalid(format!(
                "{channels}x{height}x{width} stack needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(RasterError::Invalid("field values must be finite".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_fields(fields: Vec<ScalarField<T>>) -> Result<Self, RasterError> {
        let first = fields.first().ok_or(RasterError::EmptyStack)?;
        let (width, height) = (first.width, first.height);
        if fields.iter().any(|f| f.width != width || f.height != height) {
            return Err(RasterError::Invalid("fields differ in size".into()));
        }
        let channels = fields.len();
        let data = fields.into_iter().flat_map(|f| f.data).collect();
        Ok(Self { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn field(&self, c: usize) -> ScalarField<T> {
        ScalarField { width: self.width, height: self.height, data: self.channel(c).to_vec() }
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.height + i) * self.width + j]
    }

    /// View as a `C x H x W` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("stack length matches its shape")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self, RasterError> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(RasterError::Invalid(format!("expected CxHxW tensor, got {:?}", t.shape()))),
        }
    }
}

// ---------------------------------------------------------------------------
// PGM masks

/// Parses a binary PGM mask. `classes` overrides the class count, which
/// otherwise is one more than the largest non-void value (at least 2).
pub fn decode_mask(bytes: &[u8], classes: Option<usize>) -> Result<LabelMask, RasterError> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(RasterError::MalformedHeader(format!(
            "expected P5, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = parse_header_uint(bytes, &mut pos, "width")?;
    let height = parse_header_uint(bytes, &mut pos, "height")?;
    let maxval = parse_header_uint(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(RasterError::UnsupportedMaxval(maxval as u32));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(RasterError::MalformedHeader("missing separator after maxval".into())),
    }
    if width == 0 || height == 0 {
        return Err(RasterError::MalformedHeader("zero dimension".into()));
    }
    let n = width.checked_mul(height).ok_or(RasterError::DimensionOverflow)?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(RasterError::TruncatedPayload { expected: n, found: payload.len() });
    }
    let data = payload[..n].to_vec();
    let classes = match classes {
        Some(c) => c,
        None => {
            let max = data.iter().copied().filter(|&v| v != VOID_BYTE).max().unwrap_or(0) as usize;
            (max + 1).max(2)
        }
    };
    LabelMask::new(width, height, classes, data, Some(VOID_BYTE))
}

/// Serializes a mask as `P5\n<w> <h>\n255\n` followed by one byte per pixel.
pub fn encode_mask(mask: &LabelMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&v| if Some(v) == mask.void_index { VOID_BYTE } else { v }));
    out
}

pub fn read_mask(path: impl AsRef<Path>, classes: Option<usize>) -> Result<LabelMask, RasterError> {
    decode_mask(&fs::read(path)?, classes)
}

pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<(), RasterError> {
    fs::write(path, encode_mask(mask))?;
    Ok(())
}

fn skip_whitespace_and_comments(bytes: &[u8], pos: &mut usize) {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            return;
        }
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], RasterError> {
    skip_whitespace_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(RasterError::MalformedHeader("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_uint(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, RasterError> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| RasterError::MalformedHeader(format!("invalid {what} {:?}", String::from_utf8_lossy(tok))))
}

// ---------------------------------------------------------------------------
// SDTF / SDTW containers

/// Appends one SDTF record (magic, version, dims, f32 payload).
pub fn encode_sdtf_record<T: Real>(out: &mut Vec<u8>, dims: &[usize], data: &[T]) -> Result<(), RasterError> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(RasterError::Invalid(format!("dims {dims:?} do not match {} values", data.len())));
    }
    out.extend_from_slice(SDTF_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(dims.len()).map_err(|_| RasterError::DimensionOverflow)?.to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&u32::try_from(d).map_err(|_| RasterError::DimensionOverflow)?.to_le_bytes());
    }
    out.reserve(4 * n);
    for v in data {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(())
}

/// Reads one SDTF record starting at `*pos` and advances past it.
pub fn decode_sdtf_record<T: Real>(bytes: &[u8], pos: &mut usize) -> Result<(Vec<usize>, Vec<T>), RasterError> {
    let mut cur = Cursor { bytes, pos: *pos };
    if cur.take(4).map_err(|_| RasterError::BadMagic)? != SDTF_MAGIC {
        return Err(RasterError::BadMagic);
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(RasterError::UnsupportedVersion(version));
    }
    let ndim = cur.u32()? as usize;
    if ndim > 8 {
        return Err(RasterError::DimensionOverflow);
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for _ in 0..ndim {
        let d = cur.u32()?;
        count = count.checked_mul(d as u64).ok_or(RasterError::DimensionOverflow)?;
        if count > MAX_ELEMENTS {
            return Err(RasterError::DimensionOverflow);
        }
        dims.push(d as usize);
    }
    let n = count as usize;
    let remaining = bytes.len() - cur.pos;
    if remaining < 4 * n {
        return Err(RasterError::TruncatedPayload { expected: 4 * n, found: remaining });
    }
    let payload = cur.take(4 * n)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    *pos = cur.pos;
    Ok((dims, data))
}

pub fn encode_field_stack<T: Real>(stack: &FieldStack<T>) -> Result<Vec<u8>, RasterError> {
    if stack.channels == 0 {
        return Err(RasterError::EmptyStack);
    }
    let mut out = Vec::with_capacity(24 + 4 * stack.data.len());
    encode_sdtf_record(&mut out, &[stack.channels, stack.height, stack.width], &stack.data)?;
    Ok(out)
}

pub fn decode_field_stack<T: Real>(bytes: &[u8]) -> Result<FieldStack<T>, RasterError> {
    let mut pos = 0;
    let (dims, data) = decode_sdtf_record(bytes, &mut pos)?;
    if pos != bytes.len() {
        return Err(RasterError::TrailingBytes(bytes.len() - pos));
    }
    match dims[..] {
        [c, h, w] if c > 0 => FieldStack::new(c, h, w, data),
        [0, _, _] => Err(RasterError::EmptyStack),
        _ => Err(RasterError::Invalid(format!("field stack must have 3 dims, found {}", dims.len()))),
    }
}

pub fn write_field_stack<T: Real>(stack: &FieldStack<T>, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let bytes = encode_field_stack(stack)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_field_stack<T: Real>(path: impl AsRef<Path>) -> Result<FieldStack<T>, RasterError> {
    decode_field_stack(&fs::read(path)?)
}

/// Serializes named tensors into an SDTW container.
pub fn encode_weights<T: Real>(tensors: &[(String, Tensor<T>)]) -> Result<Vec<u8>, RasterError> {
    let mut out = Vec::new();
    out.extend_from_slice(SDTW_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| RasterError::DimensionOverflow)?.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&u32::try_from(name.len()).map_err(|_| RasterError::DimensionOverflow)?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_sdtf_record(&mut out, t.shape(), t.data())?;
    }
    Ok(out)
}

pub fn decode_weights<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>, RasterError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).map_err(|_| RasterError::BadMagic)? != SDTW_MAGIC {
        return Err(RasterError::BadMagic);
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(RasterError::UnsupportedVersion(version));
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| RasterError::MalformedHeader("tensor name is not UTF-8".into()))?
            .to_owned();
        let mut pos = cur.pos;
        let (dims, data) = decode_sdtf_record(bytes, &mut pos)?;
        cur.pos = pos;
        let t = Tensor::from_vec(dims, data).map_err(|e| RasterError::Invalid(e.to_string()))?;
        tensors.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(RasterError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(tensors)
}

pub fn write_weights<T: Real>(tensors: &[(String, Tensor<T>)], path: impl AsRef<Path>) -> Result<(), RasterError> {
    let bytes = encode_weights(tensors)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_weights<T: Real>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>, RasterError> {
    decode_weights(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RasterError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(RasterError::TruncatedPayload { expected: n, found: remaining });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RasterError> {
        let b = self.take(4).map_err(|_| RasterError::MalformedHeader("header ends early".into()))?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
