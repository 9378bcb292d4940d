//! Integer range coder driven by per-symbol quantized CDFs.
//!
//! Payload format: a carry-propagating coder with a 33-bit `low`, 32-bit
//! `range`, and 16-bit probability precision. Each symbol narrows the range
//! to `(range >> 16) * mass` at `low + (range >> 16) * cum`. While the range
//! is below 2^24 the top byte of `low` is shifted out (byte-wise
//! renormalization, carries resolved through a one-byte cache plus a run of
//! pending 0xFF bytes). The stream always starts with the cache byte 0x00 and
//! ends with a five-byte flush of `low`. The decoder primes its code register
//! from the first five bytes and reads one byte per renormalization, so a
//! valid payload is consumed exactly.

use std::collections::BinaryHeap;
use std::cmp::Reverse;

use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
const TOP: u32 = 1 << 24;

/// Integer CDF with total mass `2^16` and every symbol mass at least one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantizedCdf {
    cum: Vec<u32>,
}

impl QuantizedCdf {
    pub fn from_cumulative(cum: Vec<u32>) -> Result<Self> {
        if cum.len() < 3 || cum[0] != 0 || *cum.last().unwrap() != TOTAL {
            return Err(Error::Config("CDF must run from 0 to 2^16 over at least two symbols".into()));
        }
        if cum.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("CDF must be strictly increasing".into()));
        }
        Ok(QuantizedCdf { cum })
    }

    /// Equal masses (up to the remainder, spread by [`quantize_pmf`]).
    pub fn uniform(k: usize) -> Self {
        quantize_pmf(&vec![1.0; k]).expect("uniform pmf is valid")
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    pub fn num_symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn mass(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// Code length of `s` in bits under this CDF.
    pub fn bits(&self, s: usize) -> f64 {
        PRECISION_BITS as f64 - (self.mass(s) as f64).log2()
    }

    /// Symbol whose interval contains `target`.
    fn find(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Converts probabilities to an integer CDF deterministically.
///
/// Masses are `floor(p·2^16)` of the normalized PMF; the deficit goes one
/// unit at a time to the largest fractional remainders (ties to the smaller
/// index), then every zero mass is raised to one unit taken from the
/// currently largest mass (ties to the smaller index).
pub fn quantize_pmf(probs: &[f64]) -> Result<QuantizedCdf> {
    let k = probs.len();
    if k < 2 || k > TOTAL as usize {
        return Err(Error::Config(format!("alphabet size {k} outside [2, 2^16]")));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Config("probabilities must be finite and non-negative".into()));
    }
    let sum: f64 = probs.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Config("probabilities are all zero".into()));
    }
    let scale = TOTAL as f64;
    let mut mass = Vec::with_capacity(k);
    let mut rem = Vec::with_capacity(k);
    let mut assigned: u64 = 0;
    for &p in probs {
        let v = p / sum * scale;
        let f = v.floor().min(scale);
        mass.push(f as u32);
        rem.push(v - f);
        assigned += f as u64;
    }
    if assigned > TOTAL as u64 {
        // Only reachable through rounding of a near-one-hot PMF; trim the largest.
        let mut excess = assigned - TOTAL as u64;
        while excess > 0 {
            let i = argmax_u32(&mass);
            mass[i] -= 1;
            excess -= 1;
        }
    } else {
        let deficit = (TOTAL as u64 - assigned) as usize;
        if deficit > 0 {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
            for &i in order.iter().cycle().take(deficit) {
                mass[i] += 1;
            }
        }
    }
    let zeros: Vec<usize> = (0..k).filter(|&i| mass[i] == 0).collect();
    if !zeros.is_empty() {
        let mut heap: BinaryHeap<(u32, Reverse<usize>)> =
            (0..k).filter(|&i| mass[i] > 1).map(|i| (mass[i], Reverse(i))).collect();
        for z in zeros {
            let (m, Reverse(i)) = heap.pop().expect("total mass covers every symbol");
            mass[i] = m - 1;
            mass[z] = 1;
            if mass[i] > 1 {
                heap.push((mass[i], Reverse(i)));
            }
        }
    }
    let mut cum = Vec::with_capacity(k + 1);
    cum.push(0u32);
    let mut acc = 0u32;
    for m in mass {
        acc += m;
        cum.push(acc);
    }
    Ok(QuantizedCdf { cum })
}

fn argmax_u32(v: &[u32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug)]
pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, symbol: usize, cdf: &QuantizedCdf) -> Result<()> {
        if symbol >= cdf.num_symbols() {
            return Err(Error::Range(format!(
                "symbol {symbol} outside alphabet of {}",
                cdf.num_symbols()
            )));
        }
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * cdf.cum[symbol] as u64;
        self.range = r * cdf.mass(symbol);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 5 {
            return Err(Error::Decode(format!("payload of {} bytes is too short", data.len())));
        }
        if data[0] != 0 {
            return Err(Error::Decode("payload does not start with a zero byte".into()));
        }
        let code = u32::from_be_bytes([data[1], data[2], data[3], data[4]]);
        Ok(Decoder {
            data,
            pos: 5,
            range: u32::MAX,
            code,
        })
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<usize> {
        let r = self.range >> PRECISION_BITS;
        let target = self.code / r;
        if target >= TOTAL {
            return Err(Error::Decode(format!(
                "code register out of range near byte {}",
                self.pos
            )));
        }
        let s = cdf.find(target);
        self.code -= r * cdf.cum[s];
        self.range = r * cdf.mass(s);
        while self.range < TOP {
            let byte = *self.data.get(self.pos).ok_or_else(|| {
                Error::Decode(format!("payload truncated at byte {}", self.pos))
            })?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u32;
            self.range <<= 8;
        }
        if self.code >= self.range {
            return Err(Error::Decode(format!(
                "inconsistent renormalization at byte {}",
                self.pos
            )));
        }
        Ok(s)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Fails unless every payload byte has been consumed and the tail
    /// matches the encoder's flush, which leaves the code register at zero.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Decode(format!(
                "{} unread payload bytes",
                self.data.len() - self.pos
            )));
        }
        if self.code != 0 {
            return Err(Error::Decode("payload tail does not match the coded interval".into()));
        }
        Ok(())
    }
}

/// Encodes a whole sequence in one call.
pub fn encode_all(symbols: &[usize], cdfs: &[QuantizedCdf]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(Error::Shape(format!("{} symbols, {} CDFs", symbols.len(), cdfs.len())));
    }
    let mut enc = Encoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        enc.encode(s, cdf)?;
    }
    Ok(enc.finish())
}

/// Decodes `count` symbols, asking `cdf_for(i, decoded_so_far)` for each CDF.
pub fn decode_all(
    data: &[u8],
    count: usize,
    mut cdf_for: impl FnMut(usize, &[usize]) -> Result<QuantizedCdf>,
) -> Result<Vec<usize>> {
    let mut dec = Decoder::new(data)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let cdf = cdf_for(i, &out)?;
        out.push(dec.decode(&cdf)?);
    }
    dec.finish()?;
    Ok(out)
}

/// Ideal code length of a sequence under its CDFs, in bits.
pub fn ideal_bits(symbols: &[usize], cdfs: &[QuantizedCdf]) -> f64 {
    symbols.iter().zip(cdfs).map(|(&s, c)| c.bits(s)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pmf(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        (0..k)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>().powi(4) })
            .collect()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_pmf(&[0.5, 0.5]).unwrap().cumulative(), &[0, 32768, 65536]);
        assert_eq!(quantize_pmf(&[1.0, 0.0]).unwrap().cumulative(), &[0, 65535, 65536]);
        assert_eq!(quantize_pmf(&[0.0, 1.0]).unwrap().cumulative(), &[0, 1, 65536]);
        // 65536/3 = 21845.33: one deficit unit goes to index 0 on the tie.
        assert_eq!(
            quantize_pmf(&[1.0, 1.0, 1.0]).unwrap().cumulative(),
            &[0, 21846, 43691, 65536]
        );
        assert!(matches!(quantize_pmf(&[0.0, 0.0]), Err(Error::Config(_))));
        assert!(matches!(quantize_pmf(&[1.0]), Err(Error::Config(_))));
        assert!(quantize_pmf(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn zero_masses_take_from_largest() {
        let cdf = quantize_pmf(&[0.0, 0.75, 0.0, 0.25]).unwrap();
        assert_eq!(
            (0..4).map(|s| cdf.mass(s)).collect::<Vec<_>>(),
            vec![1, 49150, 1, 16384]
        );
    }

    #[test]
    fn random_256_way_masses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let cdf = quantize_pmf(&random_pmf(&mut rng, 256)).unwrap();
            assert_eq!(*cdf.cumulative().last().unwrap(), TOTAL);
            assert!((0..256).all(|s| cdf.mass(s) >= 1));
        }
    }

    #[test]
    fn half_probability_payload_size() {
        let cdf = QuantizedCdf::uniform(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let symbols: Vec<usize> = (0..1024).map(|_| rng.gen_range(0..2)).collect();
        let bytes = encode_all(&symbols, &vec![cdf.clone(); 1024]).unwrap();
        assert!((128..=144).contains(&bytes.len()), "{}", bytes.len());
        let back = decode_all(&bytes, 1024, |_, _| Ok(cdf.clone())).unwrap();
        assert_eq!(back, symbols);
    }

    #[test]
    fn empty_sequence() {
        let bytes = encode_all(&[], &[]).unwrap();
        assert!(bytes.len() <= 16);
        assert!(decode_all(&bytes, 0, |_, _| unreachable!()).unwrap().is_empty());
    }

    #[test]
    fn carry_propagation_with_extreme_masses() {
        // Long runs of the top symbol of a skewed CDF push `low` across byte
        // boundaries repeatedly.
        let cdf = quantize_pmf(&[1.0, 0.0, 0.0]).unwrap();
        let low = QuantizedCdf::from_cumulative(vec![0, 1, 65536]).unwrap();
        let mut symbols = Vec::new();
        let mut cdfs = Vec::new();
        for i in 0..5000 {
            if i % 97 == 0 {
                symbols.push(1);
                cdfs.push(low.clone());
            } else {
                symbols.push(2);
                cdfs.push(cdf.clone());
            }
        }
        let bytes = encode_all(&symbols, &cdfs).unwrap();
        let back = decode_all(&bytes, symbols.len(), |i, _| Ok(cdfs[i].clone())).unwrap();
        assert_eq!(back, symbols);
    }

    #[test]
    fn corrupt_payloads_are_detected() {
        let cdf = QuantizedCdf::uniform(4);
        let symbols = vec![3usize; 64];
        let bytes = encode_all(&symbols, &vec![cdf.clone(); 64]).unwrap();
        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(decode_all(&truncated, 64, |_, _| Ok(cdf.clone())).is_err());
        let mut longer = bytes.clone();
        longer.push(7);
        assert!(decode_all(&longer, 64, |_, _| Ok(cdf.clone())).is_err());
        let mut bad = bytes;
        bad[0] = 1;
        assert!(decode_all(&bad, 64, |_, _| Ok(cdf.clone())).is_err());
    }

    #[test]
    fn encoder_rejects_symbol_outside_alphabet() {
        let mut enc = Encoder::new();
        assert!(enc.encode(2, &QuantizedCdf::uniform(2)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_pmf() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0, 1e-9f64..1e-4], 2..300)
                .prop_filter("non-zero", |p| p.iter().sum::<f64>() > 0.0)
        }

        proptest! {
            #[test]
            fn quantize_is_valid_and_scale_invariant(p in arb_pmf(), c in 0.01f64..100.0) {
                let a = quantize_pmf(&p).unwrap();
                prop_assert_eq!(*a.cumulative().last().unwrap(), TOTAL);
                prop_assert!((0..p.len()).all(|s| a.mass(s) >= 1));
                let scaled: Vec<f64> = p.iter().map(|v| v * c).collect();
                prop_assert_eq!(quantize_pmf(&scaled).unwrap(), a);
            }

            #[test]
            fn round_trip_within_length_bound(
                seq in prop::collection::vec((arb_pmf(), any::<prop::sample::Index>()), 0..120)
            ) {
                let cdfs: Vec<QuantizedCdf> = seq.iter().map(|(p, _)| quantize_pmf(p).unwrap()).collect();
                let symbols: Vec<usize> = seq.iter().map(|(p, i)| i.index(p.len())).collect();
                let bytes = encode_all(&symbols, &cdfs).unwrap();
                let back = decode_all(&bytes, symbols.len(), |i, _| Ok(cdfs[i].clone())).unwrap();
                prop_assert_eq!(back, symbols.clone());
                prop_assert!(bytes.len() as f64 * 8.0 <= ideal_bits(&symbols, &cdfs) + 128.0);
            }
        }
    }
}
