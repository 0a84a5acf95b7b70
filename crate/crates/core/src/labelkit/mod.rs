//! Score labels: parsing, Hangul decomposition, frame alignment and
//! condition masking.

mod align;
mod hangul;
mod schema;

pub use align::{allocate_frames, expand_labels, mask_conditions, note_to_frames, FrameAllocation};
pub use hangul::{decompose_hangul, PhonemeTriple, N_CODAS, N_NUCLEI, N_ONSETS};
pub use schema::{parse_label_file, write_label_file};

use serde::{Deserialize, Serialize};

/// Phoneme ID layout: onsets, then nuclei, then codas (coda index 1..=27),
/// then the two reserved symbols.
pub const ONSET_BASE: u32 = 0;
pub const NUCLEUS_BASE: u32 = ONSET_BASE + N_ONSETS;
pub const CODA_BASE: u32 = NUCLEUS_BASE + N_NUCLEI;
pub const PHONEME_SILENCE: u32 = CODA_BASE + N_CODAS;
pub const PHONEME_UNKNOWN: u32 = PHONEME_SILENCE + 1;
pub const PHONEME_VOCAB: usize = PHONEME_UNKNOWN as usize + 1;

pub const PITCH_REST: u32 = 128;
pub const PITCH_UNKNOWN: u32 = 129;
pub const PITCH_VOCAB: usize = PITCH_UNKNOWN as usize + 1;

/// A note's pitch: a MIDI number or the `<unknown>` token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pitch {
    Midi(u8),
    Unknown,
}

impl Pitch {
    pub fn id(self) -> u32 {
        match self {
            Pitch::Midi(m) => m as u32,
            Pitch::Unknown => PITCH_UNKNOWN,
        }
    }

    pub fn is_unknown(self) -> bool {
        matches!(self, Pitch::Unknown)
    }
}

/// A note's lyric: a precomposed Hangul syllable or the `<unknown>` token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Syllable {
    Hangul(char),
    Unknown,
}

impl Syllable {
    pub fn is_unknown(self) -> bool {
        matches!(self, Syllable::Unknown)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub start_sec: f64,
    pub end_sec: f64,
    pub pitch: Pitch,
    pub syllable: Syllable,
}

/// Which label streams an utterance carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    Full,
    PitchOnly,
    TextOnly,
    None,
}

impl Labeling {
    pub fn as_str(self) -> &'static str {
        match self {
            Labeling::Full => "full",
            Labeling::PitchOnly => "pitch_only",
            Labeling::TextOnly => "text_only",
            Labeling::None => "none",
        }
    }

    pub fn has_pitch(self) -> bool {
        matches!(self, Labeling::Full | Labeling::PitchOnly)
    }

    pub fn has_text(self) -> bool {
        matches!(self, Labeling::Full | Labeling::TextOnly)
    }

    fn from_streams(has_pitch: bool, has_text: bool) -> Self {
        match (has_pitch, has_text) {
            (true, true) => Labeling::Full,
            (true, false) => Labeling::PitchOnly,
            (false, true) => Labeling::TextOnly,
            (false, false) => Labeling::None,
        }
    }
}

impl std::str::FromStr for Labeling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Labeling::Full),
            "pitch_only" => Ok(Labeling::PitchOnly),
            "text_only" => Ok(Labeling::TextOnly),
            "none" => Ok(Labeling::None),
            other => Err(format!("unknown labeling '{other}'")),
        }
    }
}

impl std::fmt::Display for Labeling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLabel {
    pub notes: Vec<Note>,
    pub speaker_id: u32,
    pub labeling: Labeling,
}

impl ScoreLabel {
    /// Hides the label streams absent from `labeling`, keeping note timing.
    pub fn with_labeling(&self, labeling: Labeling) -> ScoreLabel {
        let notes = self
            .notes
            .iter()
            .map(|n| Note {
                pitch: if labeling.has_pitch() { n.pitch } else { Pitch::Unknown },
                syllable: if labeling.has_text() { n.syllable } else { Syllable::Unknown },
                ..n.clone()
            })
            .collect();
        ScoreLabel {
            notes,
            speaker_id: self.speaker_id,
            labeling,
        }
    }
}

/// Frame-level condition streams for one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameConditions {
    pub phoneme_ids: Vec<u32>,
    pub pitch_ids: Vec<u32>,
    pub speaker_id: u32,
}

impl FrameConditions {
    /// All-silence conditions of length `n_frames`.
    pub fn silent(n_frames: usize, speaker_id: u32) -> Self {
        FrameConditions {
            phoneme_ids: vec![PHONEME_SILENCE; n_frames],
            pitch_ids: vec![PITCH_REST; n_frames],
            speaker_id,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.phoneme_ids.len()
    }

    /// Copy of frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> FrameConditions {
        FrameConditions {
            phoneme_ids: self.phoneme_ids[start..start + len].to_vec(),
            pitch_ids: self.pitch_ids[start..start + len].to_vec(),
            speaker_id: self.speaker_id,
        }
    }

    /// Extends to `n_frames` with silence/rest frames.
    pub fn padded(&self, n_frames: usize) -> FrameConditions {
        let mut out = self.clone();
        out.phoneme_ids.resize(n_frames.max(self.n_frames()), PHONEME_SILENCE);
        out.pitch_ids.resize(n_frames.max(self.n_frames()), PITCH_REST);
        out
    }
}

/// Mask target for [`mask_conditions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    /// Keep pitch, hide text: the `(m, ∅_c)` state.
    PitchOnly,
    /// Keep text, hide pitch: the `(∅_m, c)` state.
    TextOnly,
    /// Hide both: the `(∅_m, ∅_c)` state.
    None,
}
