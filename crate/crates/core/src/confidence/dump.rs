//! Confidence dump: a header naming the block widths, then one record per
//! line. Columns: utterance_id, token_index, token_id, raw_prob, smoothed,
//! label, then the hidden state, top-k probabilities and top-k logits.
//! A missing smoothed score or label is written as `-`.

use std::io::{BufRead, Write};
use std::path::Path;

use super::ConfidenceRecord;
use crate::decoding::parse_f64;
use crate::error::{Error, Result};

const FIXED: &str = "utterance_id\ttoken_index\ttoken_id\traw_prob\tsmoothed\tlabel";

fn header(hidden: usize, top_k: usize) -> String {
    format!("{FIXED}\thidden:{hidden}\ttop_probs:{top_k}\ttop_logits:{top_k}")
}

pub fn write_dump(mut w: impl Write, records: &[ConfidenceRecord]) -> Result<()> {
    let (h, k) = records.first().map_or((0, 0), |r| (r.hidden.len(), r.top_probs.len()));
    writeln!(w, "{}", header(h, k))?;
    for r in records {
        if r.hidden.len() != h || r.top_probs.len() != k || r.top_logits.len() != k {
            return Err(Error::DimMismatch { expected: h + 2 * k, got: r.hidden.len() + r.top_probs.len() + r.top_logits.len() });
        }
        let smoothed = r.smoothed.map_or("-".to_string(), |s| s.to_string());
        let label = r.label.map_or("-", |l| if l { "1" } else { "0" });
        write!(w, "{}\t{}\t{}\t{}\t{}\t{}", r.utterance_id, r.token_index, r.token_id, r.raw_prob, smoothed, label)?;
        for v in r.hidden.iter().chain(&r.top_probs).chain(&r.top_logits) {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn parse_block(field: &str, name: &str) -> Option<usize> {
    field.strip_prefix(name)?.strip_prefix(':')?.parse().ok()
}

pub fn read_dump(r: impl BufRead) -> Result<Vec<ConfidenceRecord>> {
    let mut lines = r.lines();
    let head = lines.next().transpose()?.unwrap_or_default();
    let bad_header = || Error::MalformedLine { line: 1, detail: "missing confidence dump header".into() };
    let rest = head.strip_prefix(FIXED).and_then(|s| s.strip_prefix('\t')).ok_or_else(bad_header)?;
    let blocks: Vec<&str> = rest.split('\t').collect();
    if blocks.len() != 3 {
        return Err(bad_header());
    }
    let h = parse_block(blocks[0], "hidden").ok_or_else(bad_header)?;
    let k = parse_block(blocks[1], "top_probs").ok_or_else(bad_header)?;
    if parse_block(blocks[2], "top_logits") != Some(k) {
        return Err(bad_header());
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 + h + 2 * k {
            return Err(Error::MalformedLine { line: lineno, detail: format!("expected {} fields, found {}", 6 + h + 2 * k, f.len()) });
        }
        let int = |s: &str, what: &str| s.parse::<usize>().map_err(|_| Error::MalformedLine { line: lineno, detail: format!("bad {what} {s:?}") });
        let floats = |s: &[&str]| s.iter().map(|v| parse_f64(v, lineno, "feature")).collect::<Result<Vec<f64>>>();
        out.push(ConfidenceRecord {
            utterance_id: f[0].to_string(),
            token_index: int(f[1], "token_index")?,
            token_id: int(f[2], "token_id")?,
            raw_prob: parse_f64(f[3], lineno, "raw_prob")?,
            smoothed: if f[4] == "-" { None } else { Some(parse_f64(f[4], lineno, "smoothed")?) },
            label: match f[5] {
                "-" => None,
                "1" => Some(true),
                "0" => Some(false),
                other => return Err(Error::MalformedLine { line: lineno, detail: format!("bad label {other:?}") }),
            },
            hidden: floats(&f[6..6 + h])?,
            top_probs: floats(&f[6 + h..6 + h + k])?,
            top_logits: floats(&f[6 + h + k..])?,
        });
    }
    Ok(out)
}

pub fn save_dump(path: &Path, records: &[ConfidenceRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dump(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_dump(path: &Path) -> Result<Vec<ConfidenceRecord>> {
    read_dump(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_record() -> impl Strategy<Value = ConfidenceRecord> {
        (
            "[a-z0-9-]{1,8}",
            0usize..50,
            0usize..20,
            prop::num::f64::NORMAL,
            prop::option::of(0.0f64..1.0),
            prop::option::of(any::<bool>()),
            prop::collection::vec(prop::num::f64::ANY.prop_filter("finite", |v| v.is_finite()), 3),
            prop::collection::vec(0.0f64..1.0, 2),
            prop::collection::vec(-1e6f64..1e6, 2),
        )
            .prop_map(|(u, ti, tok, raw, smoothed, label, hidden, top_probs, top_logits)| ConfidenceRecord {
                utterance_id: u,
                token_index: ti,
                token_id: tok,
                raw_prob: raw,
                hidden,
                top_probs,
                top_logits,
                smoothed,
                label,
            })
    }

    proptest! {
        #[test]
        fn dump_round_trips(records in prop::collection::vec(arb_record(), 0..6)) {
            let mut buf = Vec::new();
            write_dump(&mut buf, &records).unwrap();
            let back = read_dump(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                prop_assert_eq!(a.raw_prob.to_bits(), b.raw_prob.to_bits());
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn wrong_width_line() {
        let text = format!("{}\nu\t0\t1\t0.5\t-\t1\t0.1\n", header(2, 0));
        assert!(matches!(read_dump(text.as_bytes()), Err(Error::MalformedLine { line: 2, .. })));
    }
}
