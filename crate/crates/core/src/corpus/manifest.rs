//! Manifest: a header line, then one tab-separated line per utterance with
//! utterance id, speaker id, split, feature path (relative to the manifest's
//! directory) and space-separated reference token ids.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use super::features::{load_features, save_features};
use super::synth::{Corpus, Split, Utterance};
use crate::decoding::{join_tokens, parse_tokens};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "utterance_id\tspeaker_id\tsplit\tfeature_path\treference";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub split: Split,
    pub feature_path: PathBuf,
    pub reference: Vec<usize>,
}

pub fn write_manifest(mut w: impl Write, entries: &[ManifestEntry]) -> Result<()> {
    writeln!(w, "{MANIFEST_HEADER}")?;
    for e in entries {
        let path = e.feature_path.to_str().ok_or_else(|| Error::Format("feature path is not UTF-8".into()))?;
        if [&e.utterance_id, &e.speaker_id, path].iter().any(|s| s.contains(['\t', '\n'])) {
            return Err(Error::Format("manifest fields may not contain tabs or newlines".into()));
        }
        writeln!(w, "{}\t{}\t{}\t{}\t{}", e.utterance_id, e.speaker_id, e.split.as_str(), path, join_tokens(&e.reference))?;
    }
    Ok(())
}

pub fn read_manifest(r: impl BufRead) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if line != MANIFEST_HEADER {
                return Err(Error::MalformedLine { line: lineno, detail: "missing manifest header".into() });
            }
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::MalformedLine { line: lineno, detail: format!("expected 5 fields, found {}", f.len()) });
        }
        let split = Split::parse(f[2]).ok_or_else(|| Error::MalformedLine { line: lineno, detail: format!("unknown split {:?}", f[2]) })?;
        if f[0].is_empty() || f[1].is_empty() || f[3].is_empty() {
            return Err(Error::MalformedLine { line: lineno, detail: "empty field".into() });
        }
        out.push(ManifestEntry {
            utterance_id: f[0].to_string(),
            speaker_id: f[1].to_string(),
            split,
            feature_path: PathBuf::from(f[3]),
            reference: parse_tokens(f[4], lineno)?,
        });
    }
    Ok(out)
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_manifest(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

/// Reads a manifest and checks every feature file exists.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let entries = read_manifest(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &entries {
        let p = base.join(&e.feature_path);
        if !p.is_file() {
            return Err(Error::MissingFeatureFile(p));
        }
    }
    Ok(entries)
}

/// Writes `features/<utterance_id>.feat` plus `manifest.tsv` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir)?;
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let rel = PathBuf::from("features").join(format!("{}.feat", u.utterance_id));
        save_features(&dir.join(&rel), &u.features)?;
        entries.push(ManifestEntry {
            utterance_id: u.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            split: u.split,
            feature_path: rel,
            reference: u.reference.clone(),
        });
    }
    let manifest = dir.join("manifest.tsv");
    save_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Loads every utterance listed in a manifest.
pub fn read_utterances(manifest: &Path) -> Result<Vec<Utterance>> {
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    load_manifest(manifest)?
        .into_iter()
        .map(|e| {
            Ok(Utterance {
                features: load_features(&base.join(&e.feature_path))?,
                utterance_id: e.utterance_id,
                speaker_id: e.speaker_id,
                split: e.split,
                reference: e.reference,
            })
        })
        .collect()
}
