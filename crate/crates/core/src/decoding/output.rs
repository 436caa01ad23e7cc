//! Decode output file: a header line, then one tab-separated record per
//! utterance. Floats use the shortest round-trip decimal form.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DECODE_HEADER: &str = "utterance_id\tspeaker_id\ttokens\tscore\tconfidence\tfinished";

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub tokens: Vec<usize>,
    pub score: f64,
    pub confidence: f64,
    pub finished: bool,
}

pub(crate) fn join_tokens(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_tokens(s: &str, line: usize) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::MalformedLine { line, detail: format!("bad token {t:?}") }))
        .collect()
}

pub(crate) fn parse_f64(s: &str, line: usize, what: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::MalformedLine { line, detail: format!("bad {what} {s:?}") })
}

pub fn write_decodes(mut w: impl Write, records: &[DecodeRecord]) -> Result<()> {
    writeln!(w, "{DECODE_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.utterance_id,
            r.speaker_id,
            join_tokens(&r.tokens),
            r.score,
            r.confidence,
            u8::from(r.finished)
        )?;
    }
    Ok(())
}

pub fn read_decodes(r: impl BufRead) -> Result<Vec<DecodeRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if line != DECODE_HEADER {
                return Err(Error::MalformedLine { line: lineno, detail: "missing decode header".into() });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::MalformedLine { line: lineno, detail: format!("expected 6 fields, found {}", f.len()) });
        }
        out.push(DecodeRecord {
            utterance_id: f[0].to_string(),
            speaker_id: f[1].to_string(),
            tokens: parse_tokens(f[2], lineno)?,
            score: parse_f64(f[3], lineno, "score")?,
            confidence: parse_f64(f[4], lineno, "confidence")?,
            finished: match f[5] {
                "1" => true,
                "0" => false,
                other => return Err(Error::MalformedLine { line: lineno, detail: format!("bad finished flag {other:?}") }),
            },
        });
    }
    Ok(out)
}

pub fn save_decodes(path: &Path, records: &[DecodeRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_decodes(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_decodes(path: &Path) -> Result<Vec<DecodeRecord>> {
    read_decodes(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let recs = vec![
            DecodeRecord { utterance_id: "u1".into(), speaker_id: "s0".into(), tokens: vec![1, 2, 3], score: -1.234_567_890_123_456_7, confidence: 0.1 + 0.2, finished: true },
            DecodeRecord { utterance_id: "u2".into(), speaker_id: "s0".into(), tokens: vec![], score: -1e-300, confidence: 0.0, finished: false },
        ];
        let mut buf = Vec::new();
        write_decodes(&mut buf, &recs).unwrap();
        assert_eq!(read_decodes(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn bad_line_reports_number() {
        let text = format!("{DECODE_HEADER}\nu1\ts\t1 2\t-1\t0.5\t1\nu2\ts\t1\n");
        assert!(matches!(read_decodes(text.as_bytes()), Err(Error::MalformedLine { line: 3, .. })));
    }
}
