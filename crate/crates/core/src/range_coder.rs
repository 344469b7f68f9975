//! Range coding of integer symbols against quantized Gaussian tables.
//!
//! The coder keeps a 56-bit window in 64-bit registers (carry at bit 56) and
//! renormalizes a byte at a time. Tables have 16-bit precision; symbols
//! outside `round(μ) ± radius` are sent as an escape followed by the raw
//! 32-bit value in two uniform 16-bit halves.

use crate::entropy::GaussianField;
use crate::error::{Error, Result};
use crate::math;

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
pub const DEFAULT_RADIUS: i32 = 64;

const WINDOW_BITS: u32 = 56;
const TOP: u64 = 1 << 48;
const LOW_MASK: u64 = (1 << WINDOW_BITS) - 1;
/// Bytes the decoder primes its code register with.
const PRIME_BYTES: usize = (WINDOW_BITS / 8) as usize;

/// Cumulative frequency table over `[s_min, s_max]` plus an escape slot.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QuantizedCdf {
    s_min: i32,
    /// `cum[k]` is the start of slot `k`; the last slot is the escape.
    cum: Vec<u32>,
}

impl QuantizedCdf {
    pub fn new(mu: f64, sigma: f64, radius: i32) -> Self {
        let mut c = Self::default();
        c.rebuild(mu, sigma, radius);
        c
    }

    /// Refills the table in place, reusing its allocation.
    pub fn rebuild(&mut self, mu: f64, sigma: f64, radius: i32) {
        let center = mu.round().clamp(i32::MIN as f64 / 2.0, i32::MAX as f64 / 2.0) as i32;
        self.s_min = center - radius;
        let bins = (2 * radius + 1) as usize;

        // Bin masses from boundary CDF values, each taken on its lower tail
        // so both tails keep full relative precision.
        let tail = |b: f64| math::normal_cdf(-b.abs());
        let mut freqs = Vec::with_capacity(bins + 1);
        let mut prev = (self.s_min as f64 - 0.5 - mu) / sigma;
        let mut prev_tail = tail(prev);
        let mut mass = 0.0;
        for k in 0..bins {
            let next = (self.s_min as f64 + k as f64 + 0.5 - mu) / sigma;
            let next_tail = tail(next);
            let p = if next <= 0.0 {
                next_tail - prev_tail
            } else if prev >= 0.0 {
                prev_tail - next_tail
            } else {
                1.0 - prev_tail - next_tail
            }
            .max(0.0);
            mass += p;
            freqs.push(p);
            prev = next;
            prev_tail = next_tail;
        }
        freqs.push((1.0 - mass).max(0.0));

        let mut f: Vec<u32> = freqs
            .iter()
            .map(|&p| ((p * TOTAL as f64 + 0.5).floor() as u32).max(1))
            .collect();
        let sum: i64 = f.iter().map(|&v| v as i64).sum();
        let largest = f
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > f[best] { i } else { best });
        f[largest] = (f[largest] as i64 + TOTAL as i64 - sum) as u32;

        self.cum.clear();
        self.cum.push(0);
        let mut acc = 0;
        for v in f {
            acc += v;
            self.cum.push(acc);
        }
        debug_assert_eq!(acc, TOTAL);
    }

    pub fn s_min(&self) -> i32 {
        self.s_min
    }

    pub fn s_max(&self) -> i32 {
        self.s_min + self.bins() as i32 - 1
    }

    fn bins(&self) -> usize {
        self.cum.len() - 2
    }

    pub fn escape_slot(&self) -> usize {
        self.bins()
    }

    /// Frequency of symbol `s`, `None` when it needs the escape.
    pub fn freq(&self, s: i32) -> Option<u32> {
        self.slot(s).map(|k| self.cum[k + 1] - self.cum[k])
    }

    pub fn escape_freq(&self) -> u32 {
        let k = self.escape_slot();
        self.cum[k + 1] - self.cum[k]
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    fn slot(&self, s: i32) -> Option<usize> {
        let k = s as i64 - self.s_min as i64;
        (k >= 0 && (k as usize) < self.bins()).then_some(k as usize)
    }

    /// Slot whose interval contains `v`.
    fn find(&self, v: u32) -> usize {
        self.cum.partition_point(|&c| c <= v) - 1
    }
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
    started: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: LOW_MASK,
            cache: 0,
            pending: 1,
            out: Vec::new(),
            started: false,
        }
    }

    /// Codes the interval `[cum_lo, cum_lo + freq)` out of [`TOTAL`].
    pub fn encode(&mut self, cum_lo: u32, freq: u32) {
        debug_assert!(freq > 0 && cum_lo + freq <= TOTAL);
        let r = self.range >> PRECISION_BITS;
        self.low += r * cum_lo as u64;
        self.range = if cum_lo + freq == TOTAL {
            self.range - r * cum_lo as u64
        } else {
            r * freq as u64
        };
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low & LOW_MASK) < (0xFF << 48) || self.low >> WINDOW_BITS != 0 {
            let carry = (self.low >> WINDOW_BITS) as u8;
            let mut byte = self.cache;
            while self.pending > 0 {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = ((self.low >> 48) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & (TOP - 1)) << 8;
    }

    fn emit(&mut self, b: u8) {
        // The first byte out is the initial zero cache; it carries nothing.
        if self.started {
            self.out.push(b);
        } else {
            self.started = true;
        }
    }

    pub fn encode_symbol(&mut self, cdf: &QuantizedCdf, s: i32) {
        match cdf.slot(s) {
            Some(k) => self.encode(cdf.cum[k], cdf.cum[k + 1] - cdf.cum[k]),
            None => {
                let k = cdf.escape_slot();
                self.encode(cdf.cum[k], cdf.cum[k + 1] - cdf.cum[k]);
                let raw = s as u32;
                self.encode(raw >> 16, 1);
                self.encode(raw & 0xFFFF, 1);
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..=PRIME_BYTES {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        if input.len() < PRIME_BYTES {
            return Err(Error::Coding(format!("stream of {} bytes is truncated", input.len())));
        }
        let code = input[..PRIME_BYTES].iter().fold(0u64, |a, &b| (a << 8) | b as u64);
        Ok(Self {
            code,
            range: LOW_MASK,
            input,
            pos: PRIME_BYTES,
        })
    }

    /// Value in `[0, TOTAL)` locating the next interval.
    pub fn peek(&self) -> Result<u32> {
        if self.code >= self.range {
            return Err(Error::Coding("corrupt stream: code outside range".into()));
        }
        let r = self.range >> PRECISION_BITS;
        Ok((self.code / r).min(TOTAL as u64 - 1) as u32)
    }

    pub fn consume(&mut self, cum_lo: u32, freq: u32) -> Result<()> {
        let r = self.range >> PRECISION_BITS;
        self.code -= r * cum_lo as u64;
        self.range = if cum_lo + freq == TOTAL {
            self.range - r * cum_lo as u64
        } else {
            r * freq as u64
        };
        while self.range < TOP {
            let b = *self
                .input
                .get(self.pos)
                .ok_or_else(|| Error::Coding("stream truncated".into()))?;
            self.pos += 1;
            self.code = (self.code << 8) | b as u64;
            self.range <<= 8;
        }
        Ok(())
    }

    fn uniform16(&mut self) -> Result<u32> {
        let v = self.peek()?;
        self.consume(v, 1)?;
        Ok(v)
    }

    pub fn decode_symbol(&mut self, cdf: &QuantizedCdf) -> Result<i32> {
        let v = self.peek()?;
        let k = cdf.find(v);
        self.consume(cdf.cum[k], cdf.cum[k + 1] - cdf.cum[k])?;
        if k == cdf.escape_slot() {
            let hi = self.uniform16()?;
            let lo = self.uniform16()?;
            Ok(((hi << 16) | lo) as i32)
        } else {
            Ok(cdf.s_min + k as i32)
        }
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Converts integer-valued floats to coder symbols.
pub fn to_symbols(values: &[f64]) -> Result<Vec<i32>> {
    values
        .iter()
        .map(|&v| {
            let r = v.round();
            if r.is_finite() && r >= i32::MIN as f64 && r <= i32::MAX as f64 {
                Ok(r as i32)
            } else {
                Err(Error::Coding(format!("symbol {v} outside the 32-bit range")))
            }
        })
        .collect()
}

/// Codes `symbols` against per-element `(mu, sigma)`.
pub fn encode_symbols(symbols: &[i32], mu: &[f64], sigma: &[f64], radius: i32) -> Result<Vec<u8>> {
    if symbols.len() != mu.len() || mu.len() != sigma.len() {
        return Err(Error::shape(
            "encode_symbols",
            format!("{} symbols, {} means, {} scales", symbols.len(), mu.len(), sigma.len()),
        ));
    }
    let mut enc = RangeEncoder::new();
    let mut cdf = QuantizedCdf::default();
    for ((&s, &m), &sg) in symbols.iter().zip(mu).zip(sigma) {
        cdf.rebuild(m, sg, radius);
        enc.encode_symbol(&cdf, s);
    }
    Ok(enc.finish())
}

pub fn encode_field(symbols: &[i32], field: &GaussianField, radius: i32) -> Result<Vec<u8>> {
    encode_symbols(symbols, field.mu().data(), field.sigma().data(), radius)
}

/// Decodes `n` symbols; `params(i)` must reproduce the encoder's `(mu, sigma)`
/// for element `i`.
pub fn decode_symbols<F>(bytes: &[u8], n: usize, radius: i32, mut params: F) -> Result<Vec<i32>>
where
    F: FnMut(usize) -> (f64, f64),
{
    let mut dec = RangeDecoder::new(bytes)?;
    let mut cdf = QuantizedCdf::default();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (m, sg) = params(i);
        cdf.rebuild(m, sg, radius);
        out.push(dec.decode_symbol(&cdf)?);
    }
    Ok(out)
}

pub fn decode_field(bytes: &[u8], field: &GaussianField, radius: i32) -> Result<Vec<i32>> {
    let (mu, sigma) = (field.mu().data(), field.sigma().data());
    decode_symbols(bytes, field.len(), radius, |i| (mu[i], sigma[i]))
}

pub mod fuzz {
    //! Randomized round-trip and efficiency harness.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::entropy::discrete_bits;

    #[derive(Clone, Debug)]
    pub struct FuzzCase {
        pub symbols: Vec<i32>,
        pub mu: Vec<f64>,
        pub sigma: Vec<f64>,
    }

    /// `μ ∈ [−10, 10]`, `σ ∈ [0.01, 8]`, symbols drawn from `N(μ, σ²)` and
    /// rounded, with a sprinkling of far outliers that force the escape path.
    pub fn make_case(n: usize, seed: u64) -> FuzzCase {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut case = FuzzCase {
            symbols: Vec::with_capacity(n),
            mu: Vec::with_capacity(n),
            sigma: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let mu: f64 = rng.random_range(-10.0..=10.0);
            let sigma: f64 = rng.random_range(0.01..=8.0);
            let s = if rng.random_bool(1e-4) {
                rng.random_range(-100_000..=100_000)
            } else {
                Normal::new(mu, sigma).unwrap().sample(&mut rng).round() as i32
            };
            case.symbols.push(s);
            case.mu.push(mu);
            case.sigma.push(sigma);
        }
        case
    }

    #[derive(Clone, Copy, Debug)]
    pub struct FuzzReport {
        pub symbols: usize,
        pub bytes: usize,
        pub shannon_bits: f64,
        pub round_trip: bool,
    }

    impl FuzzReport {
        pub fn coded_bits(&self) -> f64 {
            self.bytes as f64 * 8.0
        }

        /// Coded size within `1.01 × Shannon + slack` bits.
        pub fn efficient(&self, slack_bits: f64) -> bool {
            self.coded_bits() <= 1.01 * self.shannon_bits + slack_bits
        }
    }

    pub fn run_case(case: &FuzzCase) -> Result<FuzzReport> {
        let bytes = encode_symbols(&case.symbols, &case.mu, &case.sigma, DEFAULT_RADIUS)?;
        let decoded = decode_symbols(&bytes, case.symbols.len(), DEFAULT_RADIUS, |i| (case.mu[i], case.sigma[i]))?;
        let syms: Vec<f64> = case.symbols.iter().map(|&s| s as f64).collect();
        Ok(FuzzReport {
            symbols: case.symbols.len(),
            bytes: bytes.len(),
            shannon_bits: discrete_bits(&syms, &case.mu, &case.sigma).bits,
            round_trip: decoded == case.symbols,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::fuzz::*;
    use super::*;

    #[test]
    fn tables_sum_to_total_and_are_strict() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut cdf = QuantizedCdf::default();
        for _ in 0..10_000 {
            let mu = rng.random_range(-50.0..50.0);
            let sigma = rng.random_range(0.01..40.0);
            cdf.rebuild(mu, sigma, DEFAULT_RADIUS);
            let c = cdf.cumulative();
            assert_eq!(*c.last().unwrap(), TOTAL);
            assert!(c.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn concentrated_mass_fills_center_bin() {
        let cdf = QuantizedCdf::new(0.0, 0.01, DEFAULT_RADIUS);
        let r = DEFAULT_RADIUS as u32;
        assert!(cdf.freq(0).unwrap() >= TOTAL - (2 * r + 1));
        assert_eq!(cdf.escape_freq(), 1);
    }

    #[test]
    fn zero_mean_tables_are_symmetric() {
        for sigma in [0.05, 0.3, 1.0, 2.7, 9.0, 31.0] {
            let cdf = QuantizedCdf::new(0.0, sigma, DEFAULT_RADIUS);
            for s in 1..=DEFAULT_RADIUS {
                assert_eq!(cdf.freq(s), cdf.freq(-s), "sigma {sigma} s {s}");
            }
        }
    }

    #[test]
    fn identical_parameters_give_identical_tables() {
        assert_eq!(QuantizedCdf::new(1.37, 0.9, 8), QuantizedCdf::new(1.37, 0.9, 8));
    }

    #[test]
    fn empty_sequence() {
        let bytes = encode_symbols(&[], &[], &[], DEFAULT_RADIUS).unwrap();
        assert!(bytes.len() <= 8);
        assert!(decode_symbols(&bytes, 0, DEFAULT_RADIUS, |_| (0.0, 1.0)).unwrap().is_empty());
    }

    #[test]
    fn escape_values_round_trip() {
        let symbols = [0, 65, -65, i32::MAX, i32::MIN, 1_000_000, -7];
        let mu = [0.0; 7];
        let sigma = [1.0; 7];
        let bytes = encode_symbols(&symbols, &mu, &sigma, DEFAULT_RADIUS).unwrap();
        let back = decode_symbols(&bytes, 7, DEFAULT_RADIUS, |_| (0.0, 1.0)).unwrap();
        assert_eq!(back, symbols);
    }

    #[test]
    fn carry_propagation_round_trips() {
        // Long runs of near-certain symbols push the low register into
        // 0xFF byte runs that later carries must ripple through.
        let n = 200_000;
        let symbols: Vec<i32> = (0..n).map(|i| if i % 997 == 0 { 1 } else { 0 }).collect();
        let mu = vec![0.0; n];
        let sigma = vec![0.01; n];
        let bytes = encode_symbols(&symbols, &mu, &sigma, 4).unwrap();
        assert_eq!(decode_symbols(&bytes, n, 4, |_| (0.0, 0.01)).unwrap(), symbols);
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let case = make_case(2000, 3);
        let bytes = encode_symbols(&case.symbols, &case.mu, &case.sigma, DEFAULT_RADIUS).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(decode_symbols(cut, 2000, DEFAULT_RADIUS, |i| (case.mu[i], case.sigma[i])).is_err());
        assert!(RangeDecoder::new(&bytes[..3]).is_err());
    }

    #[test]
    fn fuzz_batches_round_trip_efficiently() {
        for seed in 0..4 {
            let report = run_case(&make_case(20_000, seed)).unwrap();
            assert!(report.round_trip);
            assert!(report.efficient(256.0), "{report:?}");
        }
    }

    #[test]
    fn deterministic_bytes() {
        let case = make_case(5000, 9);
        let a = encode_symbols(&case.symbols, &case.mu, &case.sigma, DEFAULT_RADIUS).unwrap();
        let b = encode_symbols(&case.symbols, &case.mu, &case.sigma, DEFAULT_RADIUS).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn arbitrary_symbols_round_trip(
            items in proptest::collection::vec((-300i32..300, -10.0f64..10.0, 0.01f64..8.0), 0..400),
        ) {
            let symbols: Vec<i32> = items.iter().map(|v| v.0).collect();
            let mu: Vec<f64> = items.iter().map(|v| v.1).collect();
            let sigma: Vec<f64> = items.iter().map(|v| v.2).collect();
            let bytes = encode_symbols(&symbols, &mu, &sigma, DEFAULT_RADIUS).unwrap();
            let back = decode_symbols(&bytes, symbols.len(), DEFAULT_RADIUS, |i| (mu[i], sigma[i])).unwrap();
            prop_assert_eq!(back, symbols);
        }

        #[test]
        fn corrupt_streams_never_panic(seed in 0u64..1000, flips in proptest::collection::vec((0usize..4096, 1u8..=255), 1..8)) {
            let case = make_case(500, seed);
            let mut bytes = encode_symbols(&case.symbols, &case.mu, &case.sigma, DEFAULT_RADIUS).unwrap();
            for (pos, x) in flips {
                let n = bytes.len();
                bytes[pos % n] ^= x;
            }
            let _ = decode_symbols(&bytes, 500, DEFAULT_RADIUS, |i| (case.mu[i], case.sigma[i]));
        }
    }
}
