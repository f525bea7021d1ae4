//! Bit-exact integer range coder over fixed frequency tables.
//!
//! 64-bit low / 32-bit active range with byte-wise renormalization and
//! Schindler-style carry handling. This module performs no floating-point
//! arithmetic at all (a test audits the source), so output bytes are
//! identical on every platform.
//!
//! Termination: `finalize` flushes five bytes; an empty stream therefore
//! codes to exactly five bytes (the first output byte is always zero and
//! is skipped by the decoder).

use crate::entropy::FrequencyTable;
use crate::error::{GvcError, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    finalized: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
            finalized: false,
        }
    }

    pub fn encode_symbol(&mut self, symbol: usize, table: &FrequencyTable) -> Result<()> {
        if self.finalized {
            return Err(GvcError::State("encode after finalize".into()));
        }
        if symbol >= table.alphabet_size() {
            return Err(GvcError::State(format!(
                "symbol {} outside alphabet of {}",
                symbol,
                table.alphabet_size()
            )));
        }
        let start = table.cum(symbol);
        let freq = table.count(symbol);
        let r = self.range / table.total();
        self.low += u64::from(r) * u64::from(start);
        self.range = r * freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            self.out.push(self.cache.wrapping_add(carry));
            for _ in 1..self.cache_size {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.cache = (self.low >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Flush carries and termination bytes. Any decoder consuming exactly
    /// the returned bytes terminates correctly.
    pub fn finalize(&mut self) -> Result<Vec<u8>> {
        if self.finalized {
            return Err(GvcError::State("finalize called twice".into()));
        }
        self.finalized = true;
        for _ in 0..5 {
            self.shift_low();
        }
        Ok(std::mem::take(&mut self.out))
    }
}

pub struct RangeDecoder<'a> {
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut dec = RangeDecoder {
            range: u32::MAX,
            code: 0,
            input,
            pos: 0,
        };
        // first byte is the encoder's initial zero cache
        dec.next_byte()?;
        for _ in 0..4 {
            let b = dec.next_byte()?;
            dec.code = (dec.code << 8) | u32::from(b);
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if self.pos >= self.input.len() {
            return Err(GvcError::Corrupt(format!(
                "range decoder byte underrun at offset {}",
                self.pos
            )));
        }
        let b = self.input[self.pos];
        self.pos += 1;
        Ok(b)
    }

    pub fn decode_symbol(&mut self, table: &FrequencyTable) -> Result<usize> {
        let r = self.range / table.total();
        let mut val = self.code / r;
        if val >= table.total() {
            val = table.total() - 1;
        }
        let symbol = table.find(val);
        self.code -= r * table.cum(symbol);
        self.range = r * table.count(symbol);
        while self.range < TOP {
            let b = self.next_byte()?;
            self.code = (self.code << 8) | u32::from(b);
            self.range <<= 8;
        }
        Ok(symbol)
    }

    pub fn bytes_consumed(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{FrequencyTable, FREQ_TOTAL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_table(n: usize) -> FrequencyTable {
        let base = FREQ_TOTAL / n as u32;
        let mut counts = vec![base; n];
        counts[0] += FREQ_TOTAL - base * n as u32;
        FrequencyTable::new(counts).unwrap()
    }

    fn round_trip(symbols: &[usize], tables: &[FrequencyTable]) -> Vec<u8> {
        let mut enc = RangeEncoder::new();
        for (i, &s) in symbols.iter().enumerate() {
            enc.encode_symbol(s, &tables[i]).unwrap();
        }
        let bytes = enc.finalize().unwrap();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for (i, &s) in symbols.iter().enumerate() {
            assert_eq!(dec.decode_symbol(&tables[i]).unwrap(), s, "symbol {i}");
        }
        bytes
    }

    #[test]
    fn uniform_binary_is_one_bit_per_symbol() {
        let t = uniform_table(2);
        let symbols = [0usize, 1, 1, 0, 1, 0, 0, 1];
        let tables: Vec<_> = (0..8).map(|_| t.clone()).collect();
        let bytes = round_trip(&symbols, &tables);
        // 8 bits of payload + 5 termination bytes
        assert!(bytes.len() <= 1 + 5, "got {} bytes", bytes.len());
    }

    #[test]
    fn near_deterministic_symbol_is_nearly_free() {
        let mut counts = vec![1u32; 2];
        counts[0] = FREQ_TOTAL - 1;
        let t = FrequencyTable::new(counts).unwrap();
        let symbols = vec![0usize; 1000];
        let tables: Vec<_> = (0..1000).map(|_| t.clone()).collect();
        let bytes = round_trip(&symbols, &tables);
        assert!(bytes.len() <= 8, "got {} bytes", bytes.len());
    }

    #[test]
    fn empty_stream_terminates_in_five_bytes() {
        let mut enc = RangeEncoder::new();
        let bytes = enc.finalize().unwrap();
        assert_eq!(bytes, vec![0u8; 5]);
    }

    #[test]
    fn double_finalize_is_a_state_error() {
        let mut enc = RangeEncoder::new();
        enc.finalize().unwrap();
        assert!(enc.finalize().is_err());
    }

    #[test]
    fn encode_after_finalize_is_a_state_error() {
        let mut enc = RangeEncoder::new();
        enc.finalize().unwrap();
        assert!(enc.encode_symbol(0, &uniform_table(2)).is_err());
    }

    #[test]
    fn symbol_out_of_alphabet() {
        let mut enc = RangeEncoder::new();
        assert!(enc.encode_symbol(2, &uniform_table(2)).is_err());
    }

    #[test]
    fn fuzz_round_trips_with_bit_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..500 {
            let n = rng.gen_range(2..32usize);
            let len = rng.gen_range(0..200usize);
            let mut tables = Vec::with_capacity(len);
            let mut symbols = Vec::with_capacity(len);
            let mut info_bits = 0.0f64;
            for _ in 0..len {
                let mut counts: Vec<u32> = (0..n).map(|_| rng.gen_range(1..2000)).collect();
                let sum: u32 = counts.iter().sum();
                // rescale to 2^16 with a floor of 1
                let mut scaled: Vec<u32> = counts
                    .iter()
                    .map(|&c| ((u64::from(c) * u64::from(FREQ_TOTAL)) / u64::from(sum)).max(1) as u32)
                    .collect();
                let s: u32 = scaled.iter().sum();
                if s > FREQ_TOTAL {
                    let mut excess = s - FREQ_TOTAL;
                    for v in scaled.iter_mut() {
                        let take = excess.min(v.saturating_sub(1));
                        *v -= take;
                        excess -= take;
                        if excess == 0 {
                            break;
                        }
                    }
                } else {
                    scaled[0] += FREQ_TOTAL - s;
                }
                counts = scaled;
                let table = FrequencyTable::new(counts.clone()).unwrap();
                let sym = rng.gen_range(0..n);
                info_bits += -(f64::from(counts[sym]) / f64::from(FREQ_TOTAL)).log2();
                tables.push(table);
                symbols.push(sym);
            }
            let bytes = round_trip(&symbols, &tables);
            let bound = info_bits * 1.01 + 64.0;
            assert!(
                (bytes.len() as f64) * 8.0 <= bound,
                "trial {trial}: {} bytes vs bound {bound:.1}",
                bytes.len()
            );
        }
    }

    #[test]
    fn mismatched_table_decodes_differently() {
        let t = uniform_table(4);
        let symbols = [1usize, 3, 2, 0, 1, 1, 3];
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            enc.encode_symbol(s, &t).unwrap();
        }
        let bytes = enc.finalize().unwrap();
        // off-by-one counts on the decode side
        let mut counts = t.counts().to_vec();
        counts[0] -= 1;
        counts[1] += 1;
        let bad = FrequencyTable::new(counts).unwrap();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        let mut decoded = Vec::new();
        for _ in 0..symbols.len() {
            match dec.decode_symbol(&bad) {
                Ok(s) => decoded.push(s),
                Err(_) => break,
            }
        }
        assert_ne!(decoded, symbols.to_vec());
    }

    #[test]
    fn truncated_input_errors() {
        assert!(RangeDecoder::new(&[0, 1, 2]).is_err());
        let t = uniform_table(2);
        let mut enc = RangeEncoder::new();
        for _ in 0..100 {
            enc.encode_symbol(1, &t).unwrap();
        }
        let bytes = enc.finalize().unwrap();
        let mut dec = RangeDecoder::new(&bytes[..bytes.len() - 3]).unwrap();
        let mut failed = false;
        for _ in 0..100 {
            if dec.decode_symbol(&t).is_err() {
                failed = true;
                break;
            }
        }
        assert!(failed);
    }

    #[test]
    fn module_source_is_float_free() {
        let src = include_str!("rangecoder.rs");
        let body = src.split("#[cfg(test)]").next().unwrap();
        assert!(!body.contains("f32"), "f32 found in range coder");
        assert!(!body.contains("f64"), "f64 found in range coder");
        assert!(!body.contains("as f"), "float cast found in range coder");
    }
}
