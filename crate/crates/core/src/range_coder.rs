//! Carry-less range coder over static 16-bit frequency tables.
//!
//! The coder keeps a 64-bit `low` and `range` and renormalizes a byte at a
//! time (Subbotin's scheme, widened). The stream carries no header; the
//! encoder flushes eight bytes of state.

use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
/// Largest alphabet a table may hold.
pub const MAX_ALPHABET: usize = 1 << 15;

/// Latent offsets `−RADIUS..=RADIUS` get their own symbol; the rest escape.
pub const RADIUS: i32 = 127;
/// Escape symbol index in offset tables: the symbol after the last offset.
pub const ESCAPE: usize = (2 * RADIUS + 1) as usize;

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 48;

/// Cumulative counts summing to [`TOTAL`]; every symbol has count ≥ 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cum: Vec<u32>,
    escape: Option<usize>,
}

impl CdfTable {
    /// Allocates `TOTAL` counts proportionally to `masses`: one count per
    /// symbol up front, the rest by floor plus largest remainder (ties to the
    /// lower index).
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        let n = masses.len();
        if n == 0 {
            return Err(Error::Coder("empty alphabet".into()));
        }
        if n > MAX_ALPHABET {
            return Err(Error::Coder(format!(
                "alphabet of {n} symbols exceeds {MAX_ALPHABET}"
            )));
        }
        if let Some(m) = masses.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(Error::Coder(format!("mass {m} is not positive and finite")));
        }
        let sum: f64 = masses.iter().sum();
        let spare = (TOTAL as usize - n) as f64;
        let mut counts = Vec::with_capacity(n);
        let mut rem = Vec::with_capacity(n);
        let mut used = 0u32;
        for (i, &m) in masses.iter().enumerate() {
            let ideal = m / sum * spare;
            let f = ideal.floor();
            counts.push(1 + f as u32);
            used += 1 + f as u32;
            rem.push((ideal - f, i));
        }
        let left = (TOTAL - used) as usize;
        if left > 0 {
            rem.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, i) in &rem[..left] {
                counts[i] += 1;
            }
        }
        Ok(Self::from_counts_unchecked(&counts))
    }

    fn from_counts_unchecked(counts: &[u32]) -> Self {
        let mut cum = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for &c in counts {
            acc += c;
            cum.push(acc);
        }
        debug_assert_eq!(acc, TOTAL);
        CdfTable { cum, escape: None }
    }

    /// Table built from explicit counts, which must be positive and sum to [`TOTAL`].
    pub fn from_counts(counts: &[u32]) -> Result<Self> {
        if counts.is_empty() || counts.len() > MAX_ALPHABET {
            return Err(Error::Coder(format!("bad alphabet size {}", counts.len())));
        }
        if counts.contains(&0) || counts.iter().map(|&c| c as u64).sum::<u64>() != TOTAL as u64 {
            return Err(Error::Coder(
                "counts must be positive and sum to 2^16".into(),
            ));
        }
        Ok(Self::from_counts_unchecked(counts))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_masses(&vec![1.0; n])
    }

    /// Marks `symbol` as the escape code.
    pub fn with_escape(mut self, symbol: usize) -> Self {
        assert!(symbol < self.len());
        self.escape = Some(symbol);
        self
    }

    pub fn escape(&self) -> Option<usize> {
        self.escape
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    pub fn counts(&self) -> Vec<u32> {
        (0..self.len()).map(|s| self.count(s)).collect()
    }

    pub fn cum(&self, s: usize) -> u32 {
        self.cum[s]
    }

    /// Ideal code length of `s` in bits.
    pub fn cost(&self, s: usize) -> f64 {
        PRECISION as f64 - (self.count(s) as f64).log2()
    }

    /// Symbol whose interval contains `target < TOTAL`.
    fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Quantizes `masses` into a [`CdfTable`].
pub fn quantize_cdf(masses: &[f64]) -> Result<CdfTable> {
    CdfTable::from_masses(masses)
}

#[derive(Debug)]
pub struct Encoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Encoder {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
        }
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    fn put(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PRECISION;
        self.low = self.low.wrapping_add(cum as u64 * r);
        self.range = freq as u64 * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn encode(&mut self, table: &CdfTable, symbol: usize) -> Result<()> {
        if symbol >= table.len() {
            return Err(Error::Coder(format!(
                "symbol {symbol} outside alphabet of {}",
                table.len()
            )));
        }
        self.put(table.cum(symbol), table.count(symbol));
        Ok(())
    }

    /// A 16-bit value at uniform probability.
    pub fn encode_raw16(&mut self, v: u16) {
        self.put(v as u32, 1);
    }

    pub fn encode_raw32(&mut self, v: u32) {
        self.encode_raw16((v >> 16) as u16);
        self.encode_raw16(v as u16);
    }

    /// Codes a signed offset with an offset table: in-range values map to
    /// `offset + RADIUS`, anything else to [`ESCAPE`] plus the raw 32 bits.
    pub fn encode_offset(&mut self, table: &CdfTable, offset: i32) -> Result<()> {
        if (-RADIUS..=RADIUS).contains(&offset) {
            self.encode(table, (offset + RADIUS) as usize)
        } else {
            let esc = table
                .escape()
                .ok_or_else(|| Error::Coder(format!("offset {offset} needs an escape symbol")))?;
            self.encode(table, esc)?;
            self.encode_raw32(offset as u32);
            Ok(())
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..8 {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Decoder {
            low: 0,
            range: u64::MAX,
            code: 0,
            data,
            pos: 0,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next()? as u64;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or(Error::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn target(&self) -> (u64, u32) {
        let r = self.range >> PRECISION;
        let v = self.code.wrapping_sub(self.low) / r;
        (r, v.min(TOTAL as u64 - 1) as u32)
    }

    fn take(&mut self, r: u64, cum: u32, freq: u32) -> Result<()> {
        self.low = self.low.wrapping_add(cum as u64 * r);
        self.range = freq as u64 * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next()? as u64;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<usize> {
        let (r, t) = self.target();
        let s = table.lookup(t);
        self.take(r, table.cum(s), table.count(s))?;
        Ok(s)
    }

    pub fn decode_raw16(&mut self) -> Result<u16> {
        let (r, t) = self.target();
        self.take(r, t, 1)?;
        Ok(t as u16)
    }

    pub fn decode_raw32(&mut self) -> Result<u32> {
        let hi = self.decode_raw16()? as u32;
        let lo = self.decode_raw16()? as u32;
        Ok(hi << 16 | lo)
    }

    pub fn decode_offset(&mut self, table: &CdfTable) -> Result<i32> {
        let s = self.decode(table)?;
        if Some(s) == table.escape() {
            Ok(self.decode_raw32()? as i32)
        } else {
            Ok(s as i32 - RADIUS)
        }
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Codes `symbols[i]` with `tables[i]`.
pub fn encode(symbols: &[usize], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Coder(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = Encoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(t, s)?;
    }
    Ok(enc.finish())
}

/// Decodes `n` symbols, one per table.
pub fn decode(bytes: &[u8], tables: &[&CdfTable], n: usize) -> Result<Vec<usize>> {
    if tables.len() != n {
        return Err(Error::Coder(format!(
            "{n} symbols requested but {} tables",
            tables.len()
        )));
    }
    let mut dec = Decoder::new(bytes)?;
    tables.iter().map(|t| dec.decode(t)).collect()
}
