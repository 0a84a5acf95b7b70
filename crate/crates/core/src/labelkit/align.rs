use super::{
    decompose_hangul, FrameConditions, MaskTarget, Pitch, ScoreLabel, Syllable,
    PHONEME_UNKNOWN, PITCH_UNKNOWN,
};
use crate::{Error, Result};

/// Frame span `[start, end)` of a note.
pub fn note_to_frames(start_sec: f64, end_sec: f64, sample_rate: u32, hop: u32) -> Result<(usize, usize)> {
    if !(end_sec > start_sec) || start_sec < 0.0 {
        return Err(Error::Domain(format!(
            "invalid note interval [{start_sec}, {end_sec})"
        )));
    }
    if sample_rate == 0 || hop == 0 {
        return Err(Error::Domain("sample_rate and hop must be positive".into()));
    }
    let frames_per_sec = sample_rate as f64 / hop as f64;
    let fs = (start_sec * frames_per_sec).floor() as usize;
    let fe = (end_sec * frames_per_sec).floor() as usize;
    Ok((fs, fe))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameAllocation {
    pub onset: usize,
    pub nucleus: usize,
    pub coda: usize,
}

impl FrameAllocation {
    pub fn total(&self) -> usize {
        self.onset + self.nucleus + self.coda
    }
}

/// Splits a syllable's frames between onset, nucleus and coda.
///
/// Three frames go to the onset and to the coda, the rest to the nucleus.
/// Notes too short for that get `max(1, n/4)` frames per consonant while
/// the nucleus keeps at least one frame.
pub fn allocate_frames(n_frames: usize, has_coda: bool) -> Result<FrameAllocation> {
    let n = n_frames;
    if n == 0 {
        return Err(Error::Domain("cannot allocate zero frames".into()));
    }
    let alloc = |onset, coda| FrameAllocation {
        onset,
        nucleus: n - onset - coda,
        coda,
    };
    Ok(match (has_coda, n) {
        (true, 7..) => alloc(3, 3),
        (true, 3..) => {
            let k = (n / 4).max(1);
            alloc(k, k)
        }
        // Too short for both consonants: the coda is dropped.
        (true, _) => alloc(n - 1, 0),
        (false, 5..) => alloc(3, 0),
        (false, 2..) => alloc((n / 4).max(1), 0),
        (false, _) => alloc(0, 0),
    })
}

/// Expands a note-level label to `total_frames` frame conditions.
pub fn expand_labels(
    label: &ScoreLabel,
    total_frames: usize,
    sample_rate: u32,
    hop: u32,
) -> Result<FrameConditions> {
    let mut fc = FrameConditions::silent(total_frames, label.speaker_id);
    for (index, note) in label.notes.iter().enumerate() {
        let (fs, fe) = note_to_frames(note.start_sec, note.end_sec, sample_rate, hop)?;
        if fe > total_frames {
            return Err(Error::Alignment(format!(
                "note {index} ends at frame {fe}, beyond {total_frames} frames"
            )));
        }
        if fe == fs {
            log::warn!("note {index} spans zero frames and is dropped");
            continue;
        }
        let pitch_id = match note.pitch {
            Pitch::Midi(m) => m as u32,
            Pitch::Unknown => PITCH_UNKNOWN,
        };
        fc.pitch_ids[fs..fe].fill(pitch_id);

        let span = &mut fc.phoneme_ids[fs..fe];
        match note.syllable {
            Syllable::Unknown => span.fill(PHONEME_UNKNOWN),
            Syllable::Hangul(ch) => {
                let triple = decompose_hangul(ch).map_err(|e| Error::parse_at(index, e.to_string()))?;
                let a = allocate_frames(fe - fs, triple.coda.is_some())?;
                let (onset, rest) = span.split_at_mut(a.onset);
                let (nucleus, coda) = rest.split_at_mut(a.nucleus);
                onset.fill(triple.onset_id());
                nucleus.fill(triple.nucleus_id());
                if let Some(id) = triple.coda_id() {
                    coda.fill(id);
                }
            }
        }
    }
    Ok(fc)
}

/// Replaces the hidden label streams with `<unknown>` IDs on every frame,
/// rests included: an unlabeled recording carries no note boundaries.
pub fn mask_conditions(fc: &FrameConditions, target: MaskTarget) -> FrameConditions {
    let mut out = fc.clone();
    if matches!(target, MaskTarget::PitchOnly | MaskTarget::None) {
        out.phoneme_ids.fill(PHONEME_UNKNOWN);
    }
    if matches!(target, MaskTarget::TextOnly | MaskTarget::None) {
        out.pitch_ids.fill(PITCH_UNKNOWN);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelkit::{
        decompose_hangul, parse_label_file, Labeling, Note, CODA_BASE, NUCLEUS_BASE, PHONEME_SILENCE, PITCH_REST,
    };
    use proptest::prelude::*;

    const SR: u32 = 22050;
    const HOP: u32 = 256;

    #[test]
    fn frames_of_examples() {
        assert_eq!(note_to_frames(0.0, 1.0, SR, HOP).unwrap(), (0, 86));
        assert_eq!(note_to_frames(0.0, 0.0116, SR, HOP).unwrap(), (0, 0));
        // 2.0 * 22050 / 256 = 172.27, 3.5 * 22050 / 256 = 301.46
        assert_eq!(note_to_frames(2.0, 3.5, SR, HOP).unwrap(), (172, 301));
        assert!(note_to_frames(1.0, 1.0, SR, HOP).is_err());
        assert!(note_to_frames(0.0, 1.0, SR, 0).is_err());
    }

    #[test]
    fn allocation_examples() {
        let a = |o, n, c| FrameAllocation { onset: o, nucleus: n, coda: c };
        assert_eq!(allocate_frames(20, true).unwrap(), a(3, 14, 3));
        assert_eq!(allocate_frames(10, false).unwrap(), a(3, 7, 0));
        assert_eq!(allocate_frames(4, true).unwrap(), a(1, 2, 1));
        assert_eq!(allocate_frames(7, true).unwrap(), a(3, 1, 3));
        assert_eq!(allocate_frames(5, false).unwrap(), a(3, 2, 0));
        assert_eq!(allocate_frames(1, true).unwrap(), a(0, 1, 0));
        assert_eq!(allocate_frames(1, false).unwrap(), a(0, 1, 0));
        assert!(allocate_frames(0, false).is_err());
    }

    #[test]
    fn allocation_conserves_frames() {
        for n in 1..=200 {
            for coda in [false, true] {
                let a = allocate_frames(n, coda).unwrap();
                assert_eq!(a.total(), n);
                assert!(a.nucleus >= 1, "n={n} coda={coda}");
                if !coda {
                    assert_eq!(a.coda, 0);
                }
            }
        }
    }

    fn one_note(pitch: Pitch, syllable: Syllable, end: f64, labeling: Labeling) -> ScoreLabel {
        ScoreLabel {
            notes: vec![Note { start_sec: 0.0, end_sec: end, pitch, syllable }],
            speaker_id: 1,
            labeling,
        }
    }

    #[test]
    fn expands_single_note() {
        // 20 frames: floor(0.2322 * 22050 / 256) = 20
        let end = 20.5 * 256.0 / 22050.0;
        let label = one_note(Pitch::Midi(69), Syllable::Hangul('가'), end, Labeling::Full);
        let fc = expand_labels(&label, 25, SR, HOP).unwrap();

        let t = decompose_hangul('가').unwrap();
        let mut phon = vec![t.onset_id(); 3];
        phon.extend(vec![t.nucleus_id(); 17]);
        phon.extend(vec![PHONEME_SILENCE; 5]);
        let mut pitch = vec![69; 20];
        pitch.extend(vec![PITCH_REST; 5]);
        assert_eq!(fc.phoneme_ids, phon);
        assert_eq!(fc.pitch_ids, pitch);
        assert_eq!(fc.speaker_id, 1);
        assert_eq!(t.nucleus_id(), NUCLEUS_BASE);
    }

    #[test]
    fn coda_frames_use_coda_ids() {
        let end = 10.5 * 256.0 / 22050.0;
        let label = one_note(Pitch::Midi(60), Syllable::Hangul('간'), end, Labeling::Full);
        let fc = expand_labels(&label, 10, SR, HOP).unwrap();
        assert_eq!(&fc.phoneme_ids[7..], &[CODA_BASE + 3; 3]);
    }

    #[test]
    fn unknown_labels_expand_to_unknown() {
        let label = one_note(Pitch::Unknown, Syllable::Unknown, 0.1, Labeling::None);
        let fc = expand_labels(&label, 10, SR, HOP).unwrap();
        let (fs, fe) = note_to_frames(0.0, 0.1, SR, HOP).unwrap();
        assert!(fc.phoneme_ids[fs..fe].iter().all(|&p| p == PHONEME_UNKNOWN));
        assert!(fc.pitch_ids[fs..fe].iter().all(|&p| p == PITCH_UNKNOWN));
        assert!(fc.pitch_ids[fe..].iter().all(|&p| p == PITCH_REST));
    }

    #[test]
    fn empty_label_is_silent() {
        let label = ScoreLabel { notes: vec![], speaker_id: 0, labeling: Labeling::None };
        assert_eq!(expand_labels(&label, 10, SR, HOP).unwrap(), FrameConditions::silent(10, 0));
    }

    #[test]
    fn overlong_note_is_alignment_error() {
        let label = one_note(Pitch::Midi(60), Syllable::Hangul('가'), 1.0, Labeling::Full);
        assert!(matches!(expand_labels(&label, 50, SR, HOP), Err(Error::Alignment(_))));
    }

    #[test]
    fn zero_length_note_is_dropped() {
        let label = parse_label_file(
            "version=1\nspeaker=0\n0 0.0116 60 가\n0.05 0.2 62 나\n".as_bytes(),
        )
        .unwrap();
        let fc = expand_labels(&label, 20, SR, HOP).unwrap();
        assert_eq!(fc.phoneme_ids[0], PHONEME_SILENCE);
        assert_eq!(fc.pitch_ids[4], 62);
    }

    #[test]
    fn masking() {
        let end = 20.5 * 256.0 / 22050.0;
        let label = one_note(Pitch::Midi(69), Syllable::Hangul('가'), end, Labeling::Full);
        let fc = expand_labels(&label, 25, SR, HOP).unwrap();

        let p = mask_conditions(&fc, MaskTarget::PitchOnly);
        assert!(p.phoneme_ids.iter().all(|&x| x == PHONEME_UNKNOWN));
        assert_eq!(p.pitch_ids, fc.pitch_ids);

        let t = mask_conditions(&fc, MaskTarget::TextOnly);
        assert!(t.pitch_ids.iter().all(|&x| x == PITCH_UNKNOWN));
        assert_eq!(t.phoneme_ids, fc.phoneme_ids);

        let n = mask_conditions(&fc, MaskTarget::None);
        assert!(n.phoneme_ids.iter().all(|&x| x == PHONEME_UNKNOWN));
        assert!(n.pitch_ids.iter().all(|&x| x == PITCH_UNKNOWN));

        for target in [MaskTarget::PitchOnly, MaskTarget::TextOnly, MaskTarget::None] {
            let once = mask_conditions(&fc, target);
            assert_eq!(mask_conditions(&once, target), once);
        }
    }

    fn arb_label() -> impl Strategy<Value = ScoreLabel> {
        let syllables = prop::sample::select(vec!['가', '간', '나', '랑', '손', '미', '힣']);
        prop::collection::vec((0usize..3, 1usize..40, 0u8..128, syllables), 0..8).prop_map(|specs| {
            let mut frame = 0usize;
            let mut notes = Vec::new();
            for (gap, len, pitch, syl) in specs {
                let start = frame + gap;
                let end = start + len;
                frame = end;
                let sec = |f: usize| (f as f64 + 0.5) * 256.0 / 22050.0;
                notes.push(Note {
                    start_sec: sec(start),
                    end_sec: sec(end),
                    pitch: Pitch::Midi(pitch),
                    syllable: Syllable::Hangul(syl),
                });
            }
            ScoreLabel { notes, speaker_id: 0, labeling: Labeling::Full }
        })
    }

    proptest! {
        #[test]
        fn note_spans_are_preserved(label in arb_label()) {
            let total = 400;
            let fc = expand_labels(&label, total, SR, HOP).unwrap();
            let silent = fc.phoneme_ids.iter().filter(|&&p| p == PHONEME_SILENCE).count();
            let mut covered = 0;
            for n in &label.notes {
                let (fs, fe) = note_to_frames(n.start_sec, n.end_sec, SR, HOP).unwrap();
                covered += fe - fs;
                let Pitch::Midi(m) = n.pitch else { unreachable!() };
                prop_assert!(fc.pitch_ids[fs..fe].iter().all(|&p| p == m as u32));
                prop_assert!(fc.phoneme_ids[fs..fe].iter().all(|&p| p != PHONEME_SILENCE));
            }
            prop_assert_eq!(covered + silent, total);
        }

        #[test]
        fn masking_commutes_with_expansion(label in arb_label()) {
            let fc = expand_labels(&label, 400, SR, HOP).unwrap();
            let unlabeled = expand_labels(&label.with_labeling(Labeling::None), 400, SR, HOP).unwrap();
            let masked = mask_conditions(&fc, MaskTarget::None);
            // Note frames agree; rest frames keep SILENCE/REST only in the expanded form.
            for i in 0..400 {
                if fc.phoneme_ids[i] != PHONEME_SILENCE {
                    prop_assert_eq!(masked.phoneme_ids[i], unlabeled.phoneme_ids[i]);
                    prop_assert_eq!(masked.pitch_ids[i], unlabeled.pitch_ids[i]);
                }
            }
            let pitch_only = expand_labels(&label.with_labeling(Labeling::PitchOnly), 400, SR, HOP).unwrap();
            let masked = mask_conditions(&fc, MaskTarget::PitchOnly);
            for i in 0..400 {
                if fc.phoneme_ids[i] != PHONEME_SILENCE {
                    prop_assert_eq!(masked.phoneme_ids[i], pitch_only.phoneme_ids[i]);
                }
            }
        }
    }
}
