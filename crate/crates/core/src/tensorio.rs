//! Tensor containers and their on-disk formats.
//!
//! Two native little-endian containers are supported:
//!
//! ```text
//! DACQT  magic "DACQT" | version u8 | dtype u8 | ndim u8 | dims u64 x ndim | payload
//! DACQQ  magic "DACQQ" | version u8 | rows u64 | cols u64 | group_size u64 | bits u8
//!        | n_groups u64 | group table (22 bytes each) | channel scales f32 x cols
//!        | packed_len u64 | packed payload
//! ```
//!
//! A group table record is `mu f32 | sigma f32 | w_min f32 | w_max f32 | gamma f32 |
//! kind u8 | flags u8`. Indices are packed two per byte, low nibble first, for
//! bit widths up to 4, and one per byte for 8-bit artifacts. The tensor name is
//! not stored; it is taken from the file stem.
//!
//! Safetensors files are accepted on input only (F32, F64, F16 and BF16 matrices).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 5] = b"DACQT";
pub const QUANT_MAGIC: &[u8; 5] = b"DACQQ";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

const GROUP_RECORD_BYTES: usize = 22;
const FLAG_DEGENERATE: u8 = 0b01;
const FLAG_MSE_FALLBACK: u8 = 0b10;

/// A named row-major `rows x cols` matrix of finite `f32` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        check_matrix(rows, cols, &data)?;
        Ok(Self { name: name.into(), rows, cols, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Cached input activations for one layer, `tokens x cols`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub layer_name: String,
    pub tokens: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl CalibrationSet {
    pub fn new(layer_name: impl Into<String>, tokens: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        check_matrix(tokens, cols, &data)?;
        Ok(Self { layer_name: layer_name.into(), tokens, cols, data })
    }

    pub fn token(&self, t: usize) -> &[f32] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }

    /// Errors unless the activation width matches the weight's input features.
    pub fn check_matches(&self, t: &WeightTensor) -> Result<()> {
        if self.cols != t.cols {
            return Err(Error::ShapeMismatch(format!(
                "calibration '{}' has {} columns but tensor '{}' has {}",
                self.layer_name, self.cols, t.name, t.cols
            )));
        }
        Ok(())
    }

    pub fn into_tensor(self) -> WeightTensor {
        WeightTensor { name: self.layer_name, rows: self.tokens, cols: self.cols, data: self.data }
    }

    pub fn from_tensor(t: WeightTensor) -> Self {
        Self { layer_name: t.name, tokens: t.rows, cols: t.cols, data: t.data }
    }
}

fn check_matrix(rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    let expected = rows.checked_mul(cols).ok_or_else(|| Error::ShapeMismatch(format!("{rows} x {cols} overflows")))?;
    if data.len() != expected {
        return Err(Error::ShapeMismatch(format!("{rows} x {cols} needs {expected} values, got {}", data.len())));
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

/// Which level family a group was quantized with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Uniform,
    Logistic,
    Hybrid,
}

impl GridKind {
    pub fn code(self) -> u8 {
        match self {
            GridKind::Uniform => 0,
            GridKind::Logistic => 1,
            GridKind::Hybrid => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(GridKind::Uniform),
            1 => Some(GridKind::Logistic),
            2 => Some(GridKind::Hybrid),
            _ => None,
        }
    }
}

/// Everything needed to regenerate one group's grid at dequantization time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub mu: f32,
    pub sigma: f32,
    pub w_min: f32,
    pub w_max: f32,
    pub gamma: f32,
    pub kind: GridKind,
    /// Constant group, stored as a single repeated level.
    pub degenerate: bool,
    /// The mixing coefficient was chosen on weight-space error (no activations).
    pub mse_fallback: bool,
}

impl GroupParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.mu, self.sigma, self.w_min, self.w_max, self.gamma];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("group parameter is not finite".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::Invariant(format!("sigma {} < 0", self.sigma)));
        }
        if self.w_min > self.w_max {
            return Err(Error::Invariant(format!("w_min {} > w_max {}", self.w_min, self.w_max)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Invariant(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }

    fn flags(&self) -> u8 {
        let mut f = 0;
        if self.degenerate {
            f |= FLAG_DEGENERATE;
        }
        if self.mse_fallback {
            f |= FLAG_MSE_FALLBACK;
        }
        f
    }
}

/// Packed group-wise quantized weights.
///
/// Groups tile each row along the input dimension; group `k` of row `r` is
/// `group_params[r * groups_per_row + k]`. The stored grid lives in the scaled
/// domain, so dequantization divides each column by `channel_scales[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub bits: u8,
    pub packed: Vec<u8>,
    pub group_params: Vec<GroupParams>,
    pub channel_scales: Vec<f32>,
}

impl QuantizedTensor {
    pub fn groups_per_row(&self) -> usize {
        groups_per_row(self.cols, self.group_size)
    }

    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    pub fn indices(&self) -> Result<Vec<u8>> {
        unpack_indices(&self.packed, self.rows * self.cols, self.bits)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.group_size == 0 {
            return Err(Error::Invariant("group_size must be >= 1".into()));
        }
        let n = self.rows.checked_mul(self.cols).ok_or_else(|| Error::Invariant("rows x cols overflows".into()))?;
        let expected_groups = self.rows * self.groups_per_row();
        if self.group_params.len() != expected_groups {
            return Err(Error::Invariant(format!(
                "{} group records, expected {expected_groups}",
                self.group_params.len()
            )));
        }
        for gp in &self.group_params {
            gp.validate()?;
        }
        if self.channel_scales.len() != self.cols {
            return Err(Error::Invariant(format!(
                "{} channel scales for {} columns",
                self.channel_scales.len(),
                self.cols
            )));
        }
        if let Some(s) = self.channel_scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Invariant(format!("channel scale {s} is not a positive finite value")));
        }
        if self.packed.len() != packed_len(n, self.bits) {
            return Err(Error::Invariant(format!(
                "packed buffer has {} bytes, expected {}",
                self.packed.len(),
                packed_len(n, self.bits)
            )));
        }
        unpack_indices(&self.packed, n, self.bits).map(|_| ())
    }
}

pub fn groups_per_row(cols: usize, group_size: usize) -> usize {
    cols.div_ceil(group_size)
}

fn check_bits(bits: u8) -> Result<()> {
    match bits {
        2 | 3 | 4 | 8 => Ok(()),
        _ => Err(Error::Invariant(format!("unsupported bit width {bits}"))),
    }
}

// ---------------------------------------------------------------------------
// Index packing
// ---------------------------------------------------------------------------

/// Bytes needed to hold `n` indices at the given bit width.
pub fn packed_len(n: usize, bits: u8) -> usize {
    if bits <= 4 {
        n.div_ceil(2)
    } else {
        n
    }
}

/// Packs 4-bit indices two per byte, low nibble first.
pub fn pack_nibbles(indices: &[u8]) -> Result<Vec<u8>> {
    pack_indices(indices, 4)
}

pub fn unpack_nibbles(packed: &[u8], len: usize) -> Result<Vec<u8>> {
    unpack_indices(packed, len, 4)
}

pub fn pack_indices(indices: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let limit = 1u16 << bits;
    if let Some((position, &value)) = indices.iter().enumerate().find(|(_, v)| u16::from(**v) >= limit) {
        return Err(Error::IndexOutOfRange { position, value, bits });
    }
    if bits > 4 {
        return Ok(indices.to_vec());
    }
    Ok(indices.chunks(2).map(|pair| pair[0] | pair.get(1).map_or(0, |hi| hi << 4)).collect())
}

pub fn unpack_indices(packed: &[u8], len: usize, bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    if packed.len() != packed_len(len, bits) {
        return Err(Error::ShapeMismatch(format!("{} packed bytes cannot hold exactly {len} indices", packed.len())));
    }
    let limit = 1u16 << bits;
    let out: Vec<u8> = if bits > 4 {
        packed.to_vec()
    } else {
        if len % 2 == 1 && packed[packed.len() - 1] >> 4 != 0 {
            return Err(Error::Invariant("padding nibble of the last byte is not zero".into()));
        }
        packed.iter().flat_map(|b| [b & 0x0f, b >> 4]).take(len).collect()
    };
    if let Some((position, &value)) = out.iter().enumerate().find(|(_, v)| u16::from(**v) >= limit) {
        return Err(Error::IndexOutOfRange { position, value, bits });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Byte cursor
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedHeader(format!("truncated while reading {what}")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::MalformedHeader(format!("{what} too large")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn expect_magic(cur: &mut Cursor<'_>, magic: &[u8; 5]) -> Result<()> {
    let got = cur.take(5, "magic")?;
    if got != magic {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Float tensors
// ---------------------------------------------------------------------------

pub fn encode_tensor(t: &WeightTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 16 + t.data.len() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&[FORMAT_VERSION, DTYPE_F32, 2]);
    out.extend_from_slice(&(t.rows as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols as u64).to_le_bytes());
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], name: &str) -> Result<WeightTensor> {
    let mut cur = Cursor::new(bytes);
    expect_magic(&mut cur, TENSOR_MAGIC)?;
    let dtype = cur.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::MalformedHeader(format!("unsupported dtype code {dtype}")));
    }
    let ndim = cur.u8("ndim")?;
    if ndim != 2 {
        return Err(Error::MalformedHeader(format!("expected a 2-D tensor, header says {ndim}-D")));
    }
    let rows = cur.usize("rows")?;
    let cols = cur.usize("cols")?;
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| Error::ShapeMismatch(format!("{rows} x {cols} overflows")))?;
    if cur.remaining() != n * 4 {
        return Err(Error::ShapeMismatch(format!(
            "header declares {rows} x {cols} ({} bytes) but payload has {} bytes",
            n * 4,
            cur.remaining()
        )));
    }
    let data = cur.take(n * 4, "payload")?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    WeightTensor::new(name, rows, cols, data)
}

pub fn write_tensor<W: Write>(mut w: W, t: &WeightTensor) -> Result<()> {
    w.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R, name: &str) -> Result<WeightTensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_tensor(&buf, name)
}

pub fn save_tensor(t: &WeightTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

/// Loads a native `DACQT` file; the tensor is named after the file stem.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<WeightTensor> {
    let path = path.as_ref();
    decode_tensor(&fs::read(path)?, &file_stem(path))
}

pub fn save_calibration(cal: &CalibrationSet, path: impl AsRef<Path>) -> Result<()> {
    save_tensor(&cal.clone().into_tensor(), path)
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    load_tensor(path).map(CalibrationSet::from_tensor)
}

/// Loads every 2-D float tensor in a safetensors file, converted to `f32`.
/// Other tensors (vectors, integer buffers) are skipped. Output is sorted by name.
pub fn load_safetensors(path: impl AsRef<Path>) -> Result<Vec<WeightTensor>> {
    use safetensors::{Dtype, SafeTensors};

    let bytes = fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Safetensors(e.to_string()))?;
    let mut out = Vec::new();
    let mut names: Vec<String> = st.names().into_iter().cloned().collect();
    names.sort();
    for name in names {
        let view = st.tensor(&name).map_err(|e| Error::Safetensors(e.to_string()))?;
        let shape = view.shape();
        if shape.len() != 2 {
            continue;
        }
        let raw = view.data();
        let data: Vec<f32> = match view.dtype() {
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32).collect(),
            Dtype::F16 => raw.chunks_exact(2).map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
            Dtype::BF16 => raw.chunks_exact(2).map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
            _ => continue,
        };
        out.push(WeightTensor::new(name, shape[0], shape[1], data)?);
    }
    Ok(out)
}

/// Loads a native tensor or every matrix of a safetensors file, chosen by extension.
pub fn load_any(path: impl AsRef<Path>) -> Result<Vec<WeightTensor>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "safetensors") {
        load_safetensors(path)
    } else {
        load_tensor(path).map(|t| vec![t])
    }
}

pub(crate) fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Quantized artifacts
// ---------------------------------------------------------------------------

pub fn encode_quantized(qt: &QuantizedTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        64 + qt.group_params.len() * GROUP_RECORD_BYTES + qt.channel_scales.len() * 4 + qt.packed.len(),
    );
    out.extend_from_slice(QUANT_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(qt.rows as u64).to_le_bytes());
    out.extend_from_slice(&(qt.cols as u64).to_le_bytes());
    out.extend_from_slice(&(qt.group_size as u64).to_le_bytes());
    out.push(qt.bits);
    out.extend_from_slice(&(qt.group_params.len() as u64).to_le_bytes());
    for gp in &qt.group_params {
        for v in [gp.mu, gp.sigma, gp.w_min, gp.w_max, gp.gamma] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(gp.kind.code());
        out.push(gp.flags());
    }
    for s in &qt.channel_scales {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(qt.packed.len() as u64).to_le_bytes());
    out.extend_from_slice(&qt.packed);
    out
}

pub fn decode_quantized(bytes: &[u8], name: &str) -> Result<QuantizedTensor> {
    let mut cur = Cursor::new(bytes);
    expect_magic(&mut cur, QUANT_MAGIC)?;
    let rows = cur.usize("rows")?;
    let cols = cur.usize("cols")?;
    let group_size = cur.usize("group_size")?;
    let bits = cur.u8("bits")?;
    let n_groups = cur.usize("group count")?;
    // Bound allocation by what the buffer can actually hold.
    if n_groups.saturating_mul(GROUP_RECORD_BYTES) > cur.remaining() {
        return Err(Error::MalformedHeader(format!("group count {n_groups} exceeds file size")));
    }
    let mut group_params = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let mu = cur.f32("mu")?;
        let sigma = cur.f32("sigma")?;
        let w_min = cur.f32("w_min")?;
        let w_max = cur.f32("w_max")?;
        let gamma = cur.f32("gamma")?;
        let kind_code = cur.u8("grid kind")?;
        let kind =
            GridKind::from_code(kind_code).ok_or_else(|| Error::Invariant(format!("unknown grid kind {kind_code}")))?;
        let flags = cur.u8("flags")?;
        if flags & !(FLAG_DEGENERATE | FLAG_MSE_FALLBACK) != 0 {
            return Err(Error::Invariant(format!("unknown group flags {flags:#04x}")));
        }
        group_params.push(GroupParams {
            mu,
            sigma,
            w_min,
            w_max,
            gamma,
            kind,
            degenerate: flags & FLAG_DEGENERATE != 0,
            mse_fallback: flags & FLAG_MSE_FALLBACK != 0,
        });
    }
    if cols.saturating_mul(4) > cur.remaining() {
        return Err(Error::MalformedHeader(format!("{cols} channel scales exceed file size")));
    }
    let channel_scales = (0..cols).map(|_| cur.f32("channel scale")).collect::<Result<Vec<_>>>()?;
    let packed_bytes = cur.usize("packed length")?;
    let packed = cur.take(packed_bytes, "packed payload")?.to_vec();
    if cur.remaining() != 0 {
        return Err(Error::MalformedHeader(format!("{} trailing bytes", cur.remaining())));
    }
    let qt =
        QuantizedTensor { name: name.to_string(), rows, cols, group_size, bits, packed, group_params, channel_scales };
    qt.validate()?;
    Ok(qt)
}

pub fn save_quantized(qt: &QuantizedTensor, path: impl AsRef<Path>) -> Result<()> {
    qt.validate()?;
    fs::write(path, encode_quantized(qt))?;
    Ok(())
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedTensor> {
    let path = path.as_ref();
    decode_quantized(&fs::read(path)?, &file_stem(path))
}
