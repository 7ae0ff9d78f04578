//! Raw DEFLATE decoder (stored, fixed-Huffman and dynamic-Huffman blocks).
//!
//! Decoding is canonical-code walking in the style of zlib's `puff`: slow
//! but small, and every malformed input ends in an [`FormatError::Inflate`].

use crate::error::FormatError;

const MAX_BITS: usize = 15;

const LEN_BASE: [u16; 29] = [
    3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 15, 17, 19, 23, 27, 31, 35, 43, 51, 59, 67, 83, 99, 115,
    131, 163, 195, 227, 258,
];
const LEN_EXTRA: [u8; 29] = [
    0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0,
];
const DIST_BASE: [u16; 30] = [
    1, 2, 3, 4, 5, 7, 9, 13, 17, 25, 33, 49, 65, 97, 129, 193, 257, 385, 513, 769, 1025, 1537,
    2049, 3073, 4097, 6145, 8193, 12289, 16385, 24577,
];
const DIST_EXTRA: [u8; 30] = [
    0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13,
    13,
];
/// Permuted order of code-length code lengths in a dynamic block header.
const CL_ORDER: [usize; 19] = [16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15];

fn err(msg: impl Into<String>) -> FormatError {
    FormatError::Inflate(msg.into())
}

struct Bits<'a> {
    data: &'a [u8],
    pos: usize,
    buf: u32,
    cnt: u32,
}

impl<'a> Bits<'a> {
    fn new(data: &'a [u8]) -> Self {
        Bits {
            data,
            pos: 0,
            buf: 0,
            cnt: 0,
        }
    }

    fn need(&mut self, n: u32) -> Result<u32, FormatError> {
        let mut val = self.buf;
        while self.cnt < n {
            let byte = *self
                .data
                .get(self.pos)
                .ok_or_else(|| err("unexpected end of stream"))?;
            self.pos += 1;
            val |= (byte as u32) << self.cnt;
            self.cnt += 8;
        }
        self.buf = if n == 32 { 0 } else { val >> n };
        self.cnt -= n;
        Ok(if n == 32 { val } else { val & ((1u32 << n) - 1) })
    }

    fn align(&mut self) {
        self.buf = 0;
        self.cnt = 0;
    }
}

struct Huffman {
    count: [u16; MAX_BITS + 1],
    symbol: Vec<u16>,
}

impl Huffman {
    /// Builds the canonical decoder for `lengths`. Returns the code and
    /// how many codes are left unassigned (0 = complete).
    fn new(lengths: &[u8]) -> Result<(Self, i32), FormatError> {
        let mut count = [0u16; MAX_BITS + 1];
        for &l in lengths {
            count[l as usize] += 1;
        }
        let mut left: i32 = 1;
        if count[0] as usize != lengths.len() {
            for len in 1..=MAX_BITS {
                left <<= 1;
                left -= count[len] as i32;
                if left < 0 {
                    return Err(err("over-subscribed huffman code"));
                }
            }
        } else {
            left = 0;
        }
        let mut offs = [0u16; MAX_BITS + 2];
        for len in 1..=MAX_BITS {
            offs[len + 1] = offs[len] + count[len];
        }
        let mut symbol = vec![0u16; lengths.len()];
        for (sym, &l) in lengths.iter().enumerate() {
            if l != 0 {
                symbol[offs[l as usize] as usize] = sym as u16;
                offs[l as usize] += 1;
            }
        }
        Ok((Huffman { count, symbol }, left))
    }

    fn decode(&self, bits: &mut Bits) -> Result<u16, FormatError> {
        let mut code: i32 = 0;
        let mut first: i32 = 0;
        let mut index: i32 = 0;
        for len in 1..=MAX_BITS {
            code |= bits.need(1)? as i32;
            let count = self.count[len] as i32;
            if code - count < first {
                return Ok(self.symbol[(index + (code - first)) as usize]);
            }
            index += count;
            first += count;
            first <<= 1;
            code <<= 1;
        }
        Err(err("invalid huffman code"))
    }
}

fn fixed_tables() -> (Huffman, Huffman) {
    let mut lengths = [0u8; 288];
    lengths[..144].fill(8);
    lengths[144..256].fill(9);
    lengths[256..280].fill(7);
    lengths[280..].fill(8);
    let (lit, _) = Huffman::new(&lengths).expect("fixed literal code");
    let (dist, _) = Huffman::new(&[5u8; 30]).expect("fixed distance code");
    (lit, dist)
}

fn dynamic_tables(bits: &mut Bits) -> Result<(Huffman, Huffman), FormatError> {
    let nlen = bits.need(5)? as usize + 257;
    let ndist = bits.need(5)? as usize + 1;
    let ncode = bits.need(4)? as usize + 4;
    if nlen > 286 || ndist > 30 {
        return Err(err("bad code counts in dynamic block"));
    }
    let mut cl = [0u8; 19];
    for &idx in CL_ORDER.iter().take(ncode) {
        cl[idx] = bits.need(3)? as u8;
    }
    let (clcode, left) = Huffman::new(&cl)?;
    if left != 0 {
        return Err(err("incomplete code-length code"));
    }
    let mut lengths = vec![0u8; nlen + ndist];
    let mut i = 0;
    while i < nlen + ndist {
        let sym = clcode.decode(bits)?;
        if sym < 16 {
            lengths[i] = sym as u8;
            i += 1;
            continue;
        }
        let (value, repeat) = match sym {
            16 => {
                if i == 0 {
                    return Err(err("repeat with no previous length"));
                }
                (lengths[i - 1], 3 + bits.need(2)? as usize)
            }
            17 => (0, 3 + bits.need(3)? as usize),
            _ => (0, 11 + bits.need(7)? as usize),
        };
        if i + repeat > nlen + ndist {
            return Err(err("code lengths overflow"));
        }
        lengths[i..i + repeat].fill(value);
        i += repeat;
    }
    if lengths[256] == 0 {
        return Err(err("no end-of-block code"));
    }
    let (lit, left) = Huffman::new(&lengths[..nlen])?;
    if left > 0 && nlen - lit.count[0] as usize != 1 {
        return Err(err("incomplete literal/length code"));
    }
    let (dist, left) = Huffman::new(&lengths[nlen..])?;
    if left > 0 && ndist - dist.count[0] as usize != 1 {
        return Err(err("incomplete distance code"));
    }
    Ok((lit, dist))
}

fn codes(
    bits: &mut Bits,
    out: &mut Vec<u8>,
    lit: &Huffman,
    dist: &Huffman,
    limit: usize,
) -> Result<(), FormatError> {
    loop {
        let sym = lit.decode(bits)? as usize;
        if sym < 256 {
            if out.len() >= limit {
                return Err(err("output exceeds expected size"));
            }
            out.push(sym as u8);
        } else if sym == 256 {
            return Ok(());
        } else {
            let s = sym - 257;
            if s >= 29 {
                return Err(err("invalid length symbol"));
            }
            let len = LEN_BASE[s] as usize + bits.need(LEN_EXTRA[s] as u32)? as usize;
            let ds = dist.decode(bits)? as usize;
            if ds >= 30 {
                return Err(err("invalid distance symbol"));
            }
            let d = DIST_BASE[ds] as usize + bits.need(DIST_EXTRA[ds] as u32)? as usize;
            if d > out.len() {
                return Err(err("distance too far back"));
            }
            if out.len() + len > limit {
                return Err(err("output exceeds expected size"));
            }
            let start = out.len() - d;
            for k in 0..len {
                let b = out[start + k];
                out.push(b);
            }
        }
    }
}

/// Inflates a raw DEFLATE stream, refusing to produce more than `limit` bytes.
pub fn inflate(data: &[u8], limit: usize) -> Result<Vec<u8>, FormatError> {
    let mut bits = Bits::new(data);
    let mut out = Vec::new();
    loop {
        let last = bits.need(1)? == 1;
        match bits.need(2)? {
            0 => {
                bits.align();
                let hdr = data
                    .get(bits.pos..bits.pos + 4)
                    .ok_or_else(|| err("truncated stored block header"))?;
                let len = u16::from_le_bytes([hdr[0], hdr[1]]);
                let nlen = u16::from_le_bytes([hdr[2], hdr[3]]);
                if len != !nlen {
                    return Err(err("stored block length check failed"));
                }
                bits.pos += 4;
                let len = len as usize;
                let body = data
                    .get(bits.pos..bits.pos + len)
                    .ok_or_else(|| err("truncated stored block"))?;
                if out.len() + len > limit {
                    return Err(err("output exceeds expected size"));
                }
                out.extend_from_slice(body);
                bits.pos += len;
            }
            1 => {
                let (lit, dist) = fixed_tables();
                codes(&mut bits, &mut out, &lit, &dist, limit)?;
            }
            2 => {
                let (lit, dist) = dynamic_tables(&mut bits)?;
                codes(&mut bits, &mut out, &lit, &dist, limit)?;
            }
            _ => return Err(err("reserved block type 3")),
        }
        if last {
            return Ok(out);
        }
    }
}
