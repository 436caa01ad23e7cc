//! Experiment steps shared by the command-line tool and the acceptance
//! suite: training, confidence dumps, two-pass adaptation runs, the
//! selection-percentile sweep and WER reports recomputed from decode files.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    first_pass, group_by_speaker, sat_train, second_pass, train_si, RankingMode, SpeakerResult, TestUtterance, TrainConfig, TrainUtterance,
    TwoPassConfig,
};
use crate::confidence::{hypothesis_records, utterance_confidence, CemConfig, CemModel, ConfidenceRecord};
use crate::corpus::{CorpusSpec, Split, Utterance};
use crate::decoding::{decode_utterance, edit_counts, DecodeConfig, DecodeRecord, EditCounts, Hypothesis};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, SpeakerState};
use crate::model::{ConformerModel, ModelConfig};

pub const DEFAULT_PERCENTILES: [f64; 6] = [50.0, 60.0, 70.0, 80.0, 90.0, 100.0];

/// Every tunable of a full experiment. Unknown keys are rejected when read
/// from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cem: CemConfig,
    pub two_pass: TwoPassConfig,
    pub percentiles: Vec<f64>,
    pub modes: Vec<RankingMode>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let model = ModelConfig { feat_dim: corpus.feat_dim, vocab_size: corpus.vocab_size, ..ModelConfig::default() };
        Self {
            corpus,
            model,
            train: TrainConfig::default(),
            cem: CemConfig::default(),
            two_pass: TwoPassConfig::default(),
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            modes: RankingMode::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    /// Points every component at one seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.train.seed = seed;
        self.cem.seed = seed;
        self.two_pass.adapt.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.two_pass.validate()?;
        if self.model.feat_dim != self.corpus.feat_dim || self.model.vocab_size != self.corpus.vocab_size {
            return Err(Error::Config("model feat_dim and vocab_size must match the corpus".into()));
        }
        if self.percentiles.iter().any(|&p| !(p > 0.0 && p <= 100.0)) {
            return Err(Error::Config("percentiles must lie in (0, 100]".into()));
        }
        Ok(())
    }
}

pub fn train_inputs(utts: &[Utterance], split: Split) -> Vec<TrainUtterance<'_, f64>> {
    utts.iter()
        .filter(|u| u.split == split)
        .map(|u| TrainUtterance { speaker_id: &u.speaker_id, features: &u.features, target: &u.reference })
        .collect()
}

/// Utterances of `split` as decoding inputs, references attached.
pub fn eval_inputs(utts: &[Utterance], split: Split) -> Vec<TestUtterance<f64>> {
    utts.iter()
        .filter(|u| u.split == split)
        .map(|u| TestUtterance {
            utterance_id: u.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            features: u.features.clone(),
            reference: Some(u.reference.clone()),
        })
        .collect()
}

/// Trains on the train split from a model initialized with the training
/// seed. SAT speaker vectors are stored in the checkpoint.
pub fn train_system(utts: &[Utterance], model: &ModelConfig, train: &TrainConfig, sat: bool) -> Result<(Checkpoint<f64>, Vec<f64>)> {
    let init = ConformerModel::new(model.clone(), train.seed)?;
    let data = train_inputs(utts, Split::Train);
    let out = if sat { sat_train(init, &data, train)? } else { train_si(init, &data, train)? };
    let mut ckpt = Checkpoint::new(out.model);
    ckpt.speakers = out.speakers.into_iter().map(|(id, p)| (id, SpeakerState::Deterministic(p))).collect();
    Ok((ckpt, out.epoch_losses))
}

/// Decodes `utts` with the identity transform and returns labelled token
/// records in utterance order.
pub fn confidence_dump(model: &ConformerModel<f64>, utts: &[TestUtterance<f64>], decode: &DecodeConfig) -> Result<Vec<ConfidenceRecord>> {
    decode.validate()?;
    let per_utt: Vec<Vec<ConfidenceRecord>> = utts
        .par_iter()
        .map(|u| {
            let h = decode_utterance(model, &u.features, None, decode)?;
            Ok(hypothesis_records(&u.utterance_id, &h, u.reference.as_deref()))
        })
        .collect::<Result<_>>()?;
    Ok(per_utt.into_iter().flatten().collect())
}

/// Trains the confidence model on a dump of the dev split. Dev holds out
/// utterances of training speakers and whole speakers unseen in training,
/// and never touches test data.
pub fn train_cem(model: &ConformerModel<f64>, utts: &[Utterance], cfg: &CemConfig, decode: &DecodeConfig) -> Result<(CemModel, Vec<ConfidenceRecord>)> {
    let dump = confidence_dump(model, &eval_inputs(utts, Split::Dev), decode)?;
    let cem = CemModel::train(&dump, cfg)?;
    Ok((cem, dump))
}

/// Corpus WER with a standard error taken across speakers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WerSummary {
    /// Total errors over total reference tokens.
    pub wer: f64,
    /// Standard error of the mean per-speaker WER.
    pub std_err: f64,
    pub errors: usize,
    pub ref_len: usize,
    pub speakers: usize,
}

/// Summarizes per-speaker `(errors, reference tokens)` pairs.
pub fn summarize(per_speaker: &[(usize, usize)]) -> Result<WerSummary> {
    let errors: usize = per_speaker.iter().map(|p| p.0).sum();
    let ref_len: usize = per_speaker.iter().map(|p| p.1).sum();
    if ref_len == 0 {
        return Err(Error::EmptyReferenceSet);
    }
    let rates: Vec<f64> = per_speaker.iter().filter(|p| p.1 > 0).map(|&(e, n)| e as f64 / n as f64).collect();
    let k = rates.len() as f64;
    let std_err = if rates.len() > 1 {
        let m = rates.iter().sum::<f64>() / k;
        (rates.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        0.0
    };
    Ok(WerSummary { wer: errors as f64 / ref_len as f64, std_err, errors, ref_len, speakers: per_speaker.len() })
}

/// Two-pass results with pass-1 and pass-2 WER.
#[derive(Debug, Clone)]
pub struct AdaptRun {
    pub results: Vec<SpeakerResult<f64>>,
    pub pass1: WerSummary,
    pub pass2: WerSummary,
}

impl AdaptRun {
    /// Pass-1 minus pass-2 WER; positive when adaptation helped.
    pub fn gain(&self) -> f64 {
        self.pass1.wer - self.pass2.wer
    }
}

fn references(su: &[TestUtterance<f64>]) -> Result<Vec<Vec<usize>>> {
    su.iter().map(|u| u.reference.clone().ok_or_else(|| Error::Config(format!("utterance {} has no reference", u.utterance_id)))).collect()
}

fn summarize_results(results: Vec<SpeakerResult<f64>>, groups: &[(String, Vec<TestUtterance<f64>>)]) -> Result<AdaptRun> {
    let mut p1 = Vec::with_capacity(results.len());
    let mut p2 = Vec::with_capacity(results.len());
    for (r, (_, su)) in results.iter().zip(groups) {
        let (a, b) = r.error_counts(&references(su)?);
        p1.push(a);
        p2.push(b);
    }
    Ok(AdaptRun { pass1: summarize(&p1)?, pass2: summarize(&p2)?, results })
}

fn speaker_groups(utts: &[TestUtterance<f64>]) -> Vec<(String, Vec<TestUtterance<f64>>)> {
    group_by_speaker(utts).into_iter().collect()
}

/// Two-pass adaptation of every speaker, scored against the references.
pub fn run_two_pass(model: &ConformerModel<f64>, utts: &[TestUtterance<f64>], cfg: &TwoPassConfig, cem: Option<&CemModel>) -> Result<AdaptRun> {
    cfg.validate()?;
    let groups = speaker_groups(utts);
    let results = groups
        .par_iter()
        .map(|(_, su)| {
            let pass1 = first_pass(model, su, &cfg.decode)?;
            second_pass(model, su, &pass1, cfg, cem)
        })
        .collect::<Result<Vec<_>>>()?;
    summarize_results(results, &groups)
}

/// Runs several two-pass configurations that share one decode setting,
/// decoding the first pass only once per speaker.
pub fn run_two_pass_many(
    model: &ConformerModel<f64>,
    utts: &[TestUtterance<f64>],
    cfgs: &[TwoPassConfig],
    cem: Option<&CemModel>,
) -> Result<Vec<AdaptRun>> {
    let Some(first) = cfgs.first() else { return Ok(Vec::new()) };
    for c in cfgs {
        c.validate()?;
        if c.decode != first.decode {
            return Err(Error::Config("batched two-pass runs must share the decode configuration".into()));
        }
    }
    let groups = speaker_groups(utts);
    // [speaker][config]
    let per_speaker: Vec<Vec<SpeakerResult<f64>>> = groups
        .par_iter()
        .map(|(_, su)| {
            let pass1 = first_pass(model, su, &first.decode)?;
            cfgs.iter().map(|c| second_pass(model, su, &pass1, c, cem)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut by_cfg: Vec<Vec<SpeakerResult<f64>>> = (0..cfgs.len()).map(|_| Vec::with_capacity(groups.len())).collect();
    for row in per_speaker {
        for (slot, r) in by_cfg.iter_mut().zip(row) {
            slot.push(r);
        }
    }
    by_cfg.into_iter().map(|results| summarize_results(results, &groups)).collect()
}

/// One point of the selection-percentile curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: RankingMode,
    pub percentile: f64,
    pub wer: f64,
    pub std_err: f64,
    pub pass1_wer: f64,
}

pub const SWEEP_HEADER: &str = "mode,percentile,wer,std_err,pass1_wer";

/// For each ranking mode and percentile, the pass-2 WER after adapting on
/// the selected first-pass hypotheses. Rows come mode-major in the given
/// order.
pub fn sweep_percentile(
    model: &ConformerModel<f64>,
    utts: &[TestUtterance<f64>],
    base: &TwoPassConfig,
    modes: &[RankingMode],
    percentiles: &[f64],
    cem: Option<&CemModel>,
) -> Result<Vec<SweepRow>> {
    let mut cfgs = Vec::with_capacity(modes.len() * percentiles.len());
    for &mode in modes {
        for &p in percentiles {
            let mut c = base.clone();
            c.ranking = mode;
            c.adapt.selection_percentile = Some(p);
            cfgs.push(c);
        }
    }
    let runs = run_two_pass_many(model, utts, &cfgs, cem)?;
    Ok(cfgs
        .iter()
        .zip(runs)
        .map(|(c, r)| SweepRow {
            mode: c.ranking,
            percentile: c.adapt.selection_percentile.expect("set above"),
            wer: r.pass2.wer,
            std_err: r.pass2.std_err,
            pass1_wer: r.pass1.wer,
        })
        .collect())
}

pub fn write_sweep_csv(mut w: impl Write, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.mode.as_str(), r.percentile, r.wer, r.std_err, r.pass1_wer)?;
    }
    Ok(())
}

/// Decode-file records for one pass of a two-pass run, in speaker then
/// utterance order. The confidence column is the mean token probability.
pub fn pass_records(results: &[SpeakerResult<f64>], second: bool) -> Vec<DecodeRecord> {
    results
        .iter()
        .flat_map(|r| {
            let hyps = if second { &r.pass2 } else { &r.pass1 };
            r.utterance_ids.iter().zip(hyps).map(move |(id, h)| decode_record(id, &r.speaker_id, h))
        })
        .collect()
}

pub fn decode_record(utterance_id: &str, speaker_id: &str, h: &Hypothesis<f64>) -> DecodeRecord {
    DecodeRecord {
        utterance_id: utterance_id.to_string(),
        speaker_id: speaker_id.to_string(),
        tokens: h.tokens.clone(),
        score: h.score,
        confidence: h.mean_token_prob(),
        finished: h.finished,
    }
}

/// Replaces each record's confidence by its mean CEM token score; empty
/// hypotheses get 0.
pub fn cem_confidences(cem: &CemModel, records: &mut [DecodeRecord], hyps: &[Hypothesis<f64>]) -> Result<()> {
    for (rec, h) in records.iter_mut().zip(hyps) {
        let scores: Vec<f64> = hypothesis_records(&rec.utterance_id, h, None).iter().map(|r| cem.score(r)).collect::<Result<_>>()?;
        rec.confidence = if scores.is_empty() { 0.0 } else { utterance_confidence(&scores)? };
    }
    Ok(())
}

/// WER of one speaker, or of everything when `speaker_id` is `"all"`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub speaker_id: String,
    pub utterances: usize,
    pub ref_len: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub wer: f64,
}

pub const REPORT_HEADER: &str = "speaker_id,utterances,ref_len,substitutions,deletions,insertions,wer";

/// Scores decode records against references, per speaker then overall.
pub fn report(records: &[DecodeRecord], refs: &BTreeMap<String, Vec<usize>>) -> Result<Vec<ReportRow>> {
    let mut per: BTreeMap<&str, (usize, usize, EditCounts)> = BTreeMap::new();
    for rec in records {
        let r = refs.get(&rec.utterance_id).ok_or_else(|| Error::Format(format!("no reference for utterance {}", rec.utterance_id)))?;
        let e = per.entry(rec.speaker_id.as_str()).or_default();
        e.0 += 1;
        e.1 += r.len();
        e.2.add(&edit_counts(&rec.tokens, r));
    }
    let row = |id: &str, n: usize, len: usize, c: &EditCounts| ReportRow {
        speaker_id: id.to_string(),
        utterances: n,
        ref_len: len,
        substitutions: c.substitutions,
        deletions: c.deletions,
        insertions: c.insertions,
        wer: if len == 0 { 0.0 } else { c.errors() as f64 / len as f64 },
    };
    let mut rows: Vec<ReportRow> = per.iter().map(|(id, (n, len, c))| row(id, *n, *len, c)).collect();
    let mut total = EditCounts::default();
    let (mut n, mut len) = (0, 0);
    for (un, ul, c) in per.values() {
        n += un;
        len += ul;
        total.add(c);
    }
    if len == 0 {
        return Err(Error::EmptyReferenceSet);
    }
    rows.push(row("all", n, len, &total));
    Ok(rows)
}

pub fn write_report_csv(mut w: impl Write, rows: &[ReportRow]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{},{}", r.speaker_id, r.utterances, r.ref_len, r.substitutions, r.deletions, r.insertions, r.wer)?;
    }
    Ok(())
}
