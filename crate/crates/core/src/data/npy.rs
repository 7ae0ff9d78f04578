//! NPY v1.0 arrays: `uint8`, `int64`, `float32`, `float64`, C order.

use crate::error::FormatError;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    U8(Vec<u8>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NpyData {
    pub fn len(&self) -> usize {
        match self {
            NpyData::U8(v) => v.len(),
            NpyData::I64(v) => v.len(),
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn descr(&self) -> &'static str {
        match self {
            NpyData::U8(_) => "|u1",
            NpyData::I64(_) => "<i8",
            NpyData::F32(_) => "<f4",
            NpyData::F64(_) => "<f8",
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            NpyData::U8(_) => "uint8",
            NpyData::I64(_) => "int64",
            NpyData::F32(_) => "float32",
            NpyData::F64(_) => "float64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: NpyData) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NpyArray { shape, data }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 10 {
            return Err(FormatError::Truncated("npy preamble".into()));
        }
        if &bytes[..6] != MAGIC {
            return Err(FormatError::BadNpyMagic);
        }
        let (major, minor) = (bytes[6], bytes[7]);
        if (major, minor) != (1, 0) {
            return Err(FormatError::UnsupportedNpyVersion(major, minor));
        }
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let header = bytes
            .get(10..10 + hlen)
            .ok_or_else(|| FormatError::Truncated("npy header".into()))?;
        let header = std::str::from_utf8(header)
            .map_err(|_| FormatError::NpyHeader("header is not ASCII".into()))?;
        let descr = dict_value(header, "descr")?;
        let descr = descr
            .trim()
            .trim_matches(|c| c == '\'' || c == '"')
            .to_string();
        let fortran = dict_value(header, "fortran_order")?;
        match fortran.trim() {
            "False" => {}
            "True" => return Err(FormatError::NpyHeader("fortran order is not supported".into())),
            other => return Err(FormatError::NpyHeader(format!("bad fortran_order `{other}`"))),
        }
        let shape = parse_shape(&dict_value(header, "shape")?)?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::NpyHeader("shape overflows".into()))?;
        let body = &bytes[10 + hlen..];
        let item = match descr.as_str() {
            "|u1" | "<u1" | "u1" => 1,
            "<i8" => 8,
            "<f4" => 4,
            "<f8" => 8,
            other => return Err(FormatError::UnsupportedDtype(other.to_string())),
        };
        let need = n
            .checked_mul(item)
            .ok_or_else(|| FormatError::NpyHeader("shape overflows".into()))?;
        if body.len() < need {
            return Err(FormatError::Truncated(format!(
                "npy body: need {need} bytes, have {}",
                body.len()
            )));
        }
        let body = &body[..need];
        let data = match item {
            1 => NpyData::U8(body.to_vec()),
            4 => NpyData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ if descr == "<i8" => NpyData::I64(
                body.chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => NpyData::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(NpyArray { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = match self.shape.len() {
            1 => format!("({},)", self.shape[0]),
            _ => format!(
                "({})",
                self.shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        };
        let mut header = format!(
            "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
            self.data.descr(),
            shape
        );
        // pad with spaces so the data starts on a 64-byte boundary
        let unpadded = 10 + header.len() + 1;
        header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
        header.push('\n');
        let mut out = Vec::with_capacity(10 + header.len() + self.data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        match &self.data {
            NpyData::U8(v) => out.extend_from_slice(v),
            NpyData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NpyData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }
}

/// Raw text of `key`'s value in a Python dict literal (values here never
/// contain nested dicts; tuples are returned with their parentheses).
fn dict_value(header: &str, key: &str) -> Result<String, FormatError> {
    let pat_a = format!("'{key}'");
    let pat_b = format!("\"{key}\"");
    let pos = header
        .find(&pat_a)
        .or_else(|| header.find(&pat_b))
        .ok_or_else(|| FormatError::NpyHeader(format!("missing key `{key}`")))?;
    let rest = &header[pos + pat_a.len()..];
    let rest = rest
        .trim_start()
        .strip_prefix(':')
        .ok_or_else(|| FormatError::NpyHeader(format!("no value for `{key}`")))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')
            .map(|i| i + 1)
            .ok_or_else(|| FormatError::NpyHeader("unterminated tuple".into()))?
    } else if rest.starts_with('\'') || rest.starts_with('"') {
        let q = rest.as_bytes()[0] as char;
        rest[1..]
            .find(q)
            .map(|i| i + 2)
            .ok_or_else(|| FormatError::NpyHeader("unterminated string".into()))?
    } else {
        rest.find([',', '}']).unwrap_or(rest.len())
    };
    Ok(rest[..end].to_string())
}

fn parse_shape(s: &str) -> Result<Vec<usize>, FormatError> {
    let inner = s
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| FormatError::NpyHeader(format!("bad shape `{s}`")))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| FormatError::NpyHeader(format!("bad shape entry `{p}`")))
        })
        .collect()
}
