use crate::error::{Error, Result};
use crate::model::{Distribution255, CLASSES};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

/// Integer frequencies for the 255 occupancy codes; index `j` is code `j + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    freq: Vec<u32>,
    cum: Vec<u32>,
}

impl FreqTable {
    /// Every frequency must be at least 1 and the total at most `FREQ_TOTAL`.
    pub fn from_freqs(freq: Vec<u32>) -> Result<Self> {
        if freq.len() != CLASSES {
            return Err(Error::invalid(format!(
                "expected {CLASSES} frequencies, got {}",
                freq.len()
            )));
        }
        if freq.contains(&0) {
            return Err(Error::invalid("zero frequency"));
        }
        let mut cum = Vec::with_capacity(CLASSES + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in &freq {
            acc += f as u64;
            if acc > FREQ_TOTAL as u64 {
                return Err(Error::invalid(format!(
                    "frequency total exceeds {FREQ_TOTAL}"
                )));
            }
            cum.push(acc as u32);
        }
        Ok(FreqTable { freq, cum })
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freq
    }

    pub fn cum(&self) -> &[u32] {
        &self.cum
    }

    pub fn total(&self) -> u32 {
        self.cum[CLASSES]
    }

    /// Frequency of occupancy code `code`.
    pub fn freq(&self, code: u8) -> u32 {
        self.freq[code as usize - 1]
    }

    pub fn bits(&self, code: u8) -> f64 {
        -(self.freq(code) as f64 / self.total() as f64).log2()
    }

    /// Code whose interval contains `v`, for `v < total`.
    pub(crate) fn lookup(&self, v: u32) -> u8 {
        (self.cum.partition_point(|&c| c <= v) - 1) as u8 + 1
    }
}

/// Maps a distribution to frequencies summing to exactly `FREQ_TOTAL`.
///
/// Each code gets `max(1, floor(q_j * FREQ_TOTAL))`. A shortfall goes one unit
/// at a time to the largest fractional parts (ties to the lower code); an
/// excess from the raised entries comes off the largest frequency. Pure
/// function of the input bits.
pub fn quantize_dist(q: &Distribution255) -> FreqTable {
    let clean: Vec<f64> =
        q.0.iter()
            .map(|&p| if p.is_finite() && p > 0.0 { p } else { 0.0 })
            .collect();
    let sum: f64 = clean.iter().sum();
    let total = FREQ_TOTAL as f64;
    let scaled: Vec<f64> = if sum > 0.0 {
        clean.iter().map(|p| p / sum * total).collect()
    } else {
        vec![total / CLASSES as f64; CLASSES]
    };
    let mut freq: Vec<u32> = scaled.iter().map(|s| (s.floor() as u32).max(1)).collect();
    let assigned: u32 = freq.iter().sum();
    if assigned < FREQ_TOTAL {
        let mut order: Vec<usize> = (0..CLASSES).collect();
        let rem = |j: usize| scaled[j] - freq[j] as f64;
        order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
        for &j in order.iter().cycle().take((FREQ_TOTAL - assigned) as usize) {
            freq[j] += 1;
        }
    } else if assigned > FREQ_TOTAL {
        let j = (0..CLASSES)
            .max_by_key(|&j| (freq[j], std::cmp::Reverse(j)))
            .unwrap();
        // the largest entry holds at least FREQ_TOTAL / 255 > 255 units
        freq[j] -= assigned - FREQ_TOTAL;
    }
    FreqTable::from_freqs(freq).expect("quantized table is valid")
}
