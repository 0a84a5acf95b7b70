//! Line-oriented label schema.
//!
//! ```text
//! # comments and blank lines are ignored
//! version=1
//! speaker=3
//! labeling=full            # optional; inferred from the records when absent
//! 0.000 0.500 69 가        # start_sec end_sec pitch syllable
//! 0.500 1.000 . 나         # `.` marks an absent field
//! ```
//!
//! Header lines must precede the first note record.

use std::fmt::Write as _;

use super::{Labeling, Note, Pitch, ScoreLabel, Syllable};
use crate::{Error, Result};

fn header_error(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse {
        index: None,
        msg: format!("line {line}: {msg}"),
    }
}

pub fn parse_label_file(bytes: &[u8]) -> Result<ScoreLabel> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        index: None,
        msg: format!("label file is not UTF-8: {e}"),
    })?;

    let mut version = None;
    let mut speaker = None;
    let mut labeling: Option<Labeling> = None;
    let mut raw: Vec<(f64, f64, Option<u8>, Option<char>)> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            if !raw.is_empty() {
                return Err(header_error(lineno, "header field after note records"));
            }
            let value = value.trim();
            match key.trim() {
                "version" => {
                    if value != "1" {
                        return Err(header_error(lineno, format!("unsupported version '{value}'")));
                    }
                    version = Some(1);
                }
                "speaker" => {
                    let id = value
                        .parse::<u32>()
                        .map_err(|_| header_error(lineno, format!("bad speaker '{value}'")))?;
                    speaker = Some(id);
                }
                "labeling" => {
                    labeling = Some(value.parse().map_err(|e| header_error(lineno, e))?);
                }
                other => return Err(header_error(lineno, format!("unknown header field '{other}'"))),
            }
            continue;
        }

        let index = raw.len();
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse_at(
                index,
                format!("note {index}: expected 4 fields, found {}", fields.len()),
            ));
        }
        let time = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse_at(index, format!("note {index}: bad time '{s}'")))
        };
        let start = time(fields[0])?;
        let end = time(fields[1])?;
        let pitch = match fields[2] {
            "." => None,
            s => {
                let v = s
                    .parse::<i64>()
                    .map_err(|_| Error::parse_at(index, format!("note {index}: bad pitch '{s}'")))?;
                if !(0..=127).contains(&v) {
                    return Err(Error::parse_at(
                        index,
                        format!("note {index}: pitch {v} outside 0-127"),
                    ));
                }
                Some(v as u8)
            }
        };
        let syllable = match fields[3] {
            "." => None,
            s => {
                let mut chars = s.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => {
                        super::decompose_hangul(c).map_err(|_| {
                            Error::parse_at(index, format!("note {index}: '{s}' is not a Hangul syllable"))
                        })?;
                        Some(c)
                    }
                    _ => {
                        return Err(Error::parse_at(
                            index,
                            format!("note {index}: syllable must be one character, got '{s}'"),
                        ))
                    }
                }
            }
        };
        raw.push((start, end, pitch, syllable));
    }

    if version.is_none() {
        return Err(header_error(0, "missing version=1 header"));
    }
    let speaker_id = speaker.ok_or_else(|| header_error(0, "missing speaker header"))?;

    let labeling = match labeling {
        Some(l) => l,
        None => infer_labeling(&raw)?,
    };

    let mut notes = Vec::with_capacity(raw.len());
    for (index, (start, end, pitch, syllable)) in raw.into_iter().enumerate() {
        if start < 0.0 {
            return Err(Error::parse_at(index, format!("note {index}: negative start time")));
        }
        if end <= start {
            return Err(Error::parse_at(index, format!("note {index}: end_sec <= start_sec")));
        }
        if let Some(prev) = notes.last() {
            let prev: &Note = prev;
            if start < prev.start_sec {
                return Err(Error::parse_at(index, format!("notes out of order at note {index}")));
            }
            if start < prev.end_sec {
                return Err(Error::parse_at(index, format!("overlap at note {index}")));
            }
        }
        let pitch = match (labeling.has_pitch(), pitch) {
            (true, Some(p)) => Pitch::Midi(p),
            (true, None) => {
                return Err(Error::parse_at(
                    index,
                    format!("note {index}: pitch required by labeling={labeling}"),
                ))
            }
            (false, _) => Pitch::Unknown,
        };
        let syllable = match (labeling.has_text(), syllable) {
            (true, Some(c)) => Syllable::Hangul(c),
            (true, None) => {
                return Err(Error::parse_at(
                    index,
                    format!("note {index}: syllable required by labeling={labeling}"),
                ))
            }
            (false, _) => Syllable::Unknown,
        };
        notes.push(Note {
            start_sec: start,
            end_sec: end,
            pitch,
            syllable,
        });
    }

    Ok(ScoreLabel {
        notes,
        speaker_id,
        labeling,
    })
}

type RawNote = (f64, f64, Option<u8>, Option<char>);

fn infer_labeling(raw: &[RawNote]) -> Result<Labeling> {
    let stream = |present: usize, name: &str| -> Result<bool> {
        if present == 0 {
            Ok(false)
        } else if present == raw.len() {
            Ok(true)
        } else {
            Err(Error::Parse {
                index: None,
                msg: format!("{name} given for some notes only; add a labeling header"),
            })
        }
    };
    let pitches = raw.iter().filter(|r| r.2.is_some()).count();
    let syllables = raw.iter().filter(|r| r.3.is_some()).count();
    if raw.is_empty() {
        return Ok(Labeling::None);
    }
    Ok(Labeling::from_streams(
        stream(pitches, "pitch")?,
        stream(syllables, "syllable")?,
    ))
}

/// Serializes a label in the schema accepted by [`parse_label_file`].
pub fn write_label_file(label: &ScoreLabel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "version=1");
    let _ = writeln!(out, "speaker={}", label.speaker_id);
    let _ = writeln!(out, "labeling={}", label.labeling);
    for n in &label.notes {
        let pitch = match n.pitch {
            Pitch::Midi(m) => m.to_string(),
            Pitch::Unknown => ".".into(),
        };
        let syllable = match n.syllable {
            Syllable::Hangul(c) => c.to_string(),
            Syllable::Unknown => ".".into(),
        };
        let _ = writeln!(out, "{} {} {} {}", n.start_sec, n.end_sec, pitch, syllable);
    }
    out
}
