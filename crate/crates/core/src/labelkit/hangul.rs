use crate::{Error, Result};

use super::{CODA_BASE, NUCLEUS_BASE, ONSET_BASE};

pub const N_ONSETS: u32 = 19;
pub const N_NUCLEI: u32 = 21;
/// Non-empty codas; coda index 0 means "no coda".
pub const N_CODAS: u32 = 27;

const SYLLABLE_BASE: u32 = 0xAC00;
const SYLLABLE_LAST: u32 = 0xD7A3;
const NUCLEUS_X_CODA: u32 = (N_NUCLEI) * (N_CODAS + 1); // 588
const CODA_SLOTS: u32 = N_CODAS + 1; // 28

/// Jamo indices of a precomposed Hangul syllable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhonemeTriple {
    /// 0..19
    pub onset: u32,
    /// 0..21
    pub nucleus: u32,
    /// 1..=27 when present
    pub coda: Option<u32>,
}

impl PhonemeTriple {
    pub fn onset_id(&self) -> u32 {
        ONSET_BASE + self.onset
    }

    pub fn nucleus_id(&self) -> u32 {
        NUCLEUS_BASE + self.nucleus
    }

    pub fn coda_id(&self) -> Option<u32> {
        self.coda.map(|c| CODA_BASE + c - 1)
    }

    /// Inverse of [`decompose_hangul`].
    pub fn compose(&self) -> char {
        let cp = SYLLABLE_BASE
            + NUCLEUS_X_CODA * self.onset
            + CODA_SLOTS * self.nucleus
            + self.coda.unwrap_or(0);
        char::from_u32(cp).expect("jamo indices within inventory")
    }
}

pub fn decompose_hangul(syllable: char) -> Result<PhonemeTriple> {
    let cp = syllable as u32;
    if !(SYLLABLE_BASE..=SYLLABLE_LAST).contains(&cp) {
        return Err(Error::Domain(format!(
            "U+{cp:04X} is not a precomposed Hangul syllable"
        )));
    }
    let index = cp - SYLLABLE_BASE;
    let coda = index % CODA_SLOTS;
    Ok(PhonemeTriple {
        onset: index / NUCLEUS_X_CODA,
        nucleus: (index % NUCLEUS_X_CODA) / CODA_SLOTS,
        coda: (coda != 0).then_some(coda),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use unicode_normalization::UnicodeNormalization;

    #[test]
    fn ga_is_zero_index() {
        let t = decompose_hangul('가').unwrap();
        assert_eq!(t, PhonemeTriple { onset: 0, nucleus: 0, coda: None });
    }

    #[test]
    fn gan_matches_nfd() {
        let t = decompose_hangul('간').unwrap();
        assert_eq!(t.coda, Some(4));
        let nfd: Vec<u32> = "간".nfd().map(|c| c as u32).collect();
        assert_eq!(nfd, vec![0x1100 + t.onset, 0x1161 + t.nucleus, 0x11A7 + 4]);
    }

    #[test]
    fn latin_is_rejected() {
        assert!(matches!(decompose_hangul('A'), Err(Error::Domain(_))));
        assert!(decompose_hangul('\u{D7A4}').is_err());
        assert!(decompose_hangul('\u{ABFF}').is_err());
    }

    #[test]
    fn whole_block_agrees_with_nfd() {
        for cp in SYLLABLE_BASE..=SYLLABLE_LAST {
            let ch = char::from_u32(cp).unwrap();
            let t = decompose_hangul(ch).unwrap();
            let nfd: Vec<u32> = ch.to_string().nfd().map(|c| c as u32).collect();
            let mut expected = vec![0x1100 + t.onset, 0x1161 + t.nucleus];
            if let Some(c) = t.coda {
                expected.push(0x11A7 + c);
            }
            assert_eq!(nfd, expected, "U+{cp:04X}");
        }
    }
}
