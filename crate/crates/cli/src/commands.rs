use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use lhuc_core::adaptation::{AdaptLog, TestUtterance};
use lhuc_core::confidence::{save_dump, CemModel};
use lhuc_core::corpus::{generate_corpus, read_utterances, write_corpus, Split, Utterance};
use lhuc_core::decoding::{calibration_metrics, decode_utterance, greedy_decode, load_decodes, max_tokens, save_decodes, DecodeRecord};
use lhuc_core::model::checkpoint::Checkpoint;
use lhuc_core::pipeline::{self, ExperimentConfig};

use crate::config::{self, ConfigError};

/// Marker written when a command fails; outputs next to it are partial.
pub const FAILED_MARKER: &str = "FAILED";

pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("LHUC_ADAPT_THREADS") else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| ConfigError(format!("LHUC_ADAPT_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow!(e))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<lhuc_core::Error>() {
            return core.exit_code() as u8;
        }
    }
    3
}

/// Reports `e` on stderr as one JSON line, marks the output directory and
/// returns the matching exit code.
pub fn fail(out: &Path, e: &anyhow::Error) -> ExitCode {
    let code = exit_code(e);
    let kind = match code {
        2 => "config",
        4 => "divergence",
        _ => "data",
    };
    let msg = serde_json::json!({ "error": kind, "exit_code": code, "message": format!("{e:#}") });
    eprintln!("{msg}");
    if out.is_dir() {
        let _ = std::fs::write(out.join(FAILED_MARKER), format!("{msg}\n"));
    }
    ExitCode::from(code)
}

/// Creates the output directory, clears a stale failure marker and writes
/// the resolved configuration.
fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker)?;
    }
    std::fs::write(out.join("config.toml"), config::to_toml(cfg)?)?;
    Ok(())
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_data(cfg: &ExperimentConfig, manifest: &Path) -> Result<Vec<Utterance>> {
    let utts = read_utterances(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    if let Some(u) = utts.iter().find(|u| u.features.shape()[1] != cfg.model.feat_dim) {
        bail!(ConfigError(format!("utterance {} has {} feature channels but model.feat_dim is {}", u.utterance_id, u.features.shape()[1], cfg.model.feat_dim)));
    }
    Ok(utts)
}

fn load_model(path: &Path) -> Result<Checkpoint<f64>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| ConfigError(format!("unknown split {s:?}")).into())
}

pub fn gen_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let manifest = write_corpus(out, &corpus)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, out: &Path, data: &Path, sat: bool) -> Result<()> {
    prepare_out(cfg, out)?;
    let utts = load_data(cfg, data)?;
    let (ckpt, losses) = pipeline::train_system(&utts, &cfg.model, &cfg.train, sat)?;
    ckpt.save(&out.join("model.ckpt"))?;
    let mut w = create(out.join("losses.csv"))?;
    writeln!(w, "epoch,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1)?;
    }
    w.flush()?;
    let dev = pipeline::eval_inputs(&utts, Split::Dev);
    if !dev.is_empty() {
        let records = decode_all(&ckpt, &dev, cfg, false)?;
        let rows = pipeline::report(&records, &references(&utts))?;
        println!("dev WER {}", rows.last().expect("overall row").wer);
    }
    Ok(())
}

pub fn train_cem(cfg: &ExperimentConfig, out: &Path, data: &Path, model: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let utts = load_data(cfg, data)?;
    let ckpt = load_model(model)?;
    let (cem, dump) = pipeline::train_cem(&ckpt.model, &utts, &cfg.cem, &cfg.two_pass.decode)?;
    cem.save(&out.join("cem.bin"))?;
    save_dump(&out.join("dev_dump.tsv"), &dump)?;
    // Calibration of raw and smoothed scores on the held-out test split.
    let test = pipeline::eval_inputs(&utts, Split::Test);
    let mut w = create(out.join("cem_eval.csv"))?;
    writeln!(w, "scorer,tokens,auc,ece")?;
    if !test.is_empty() {
        let mut held = pipeline::confidence_dump(&ckpt.model, &test, &cfg.two_pass.decode)?;
        cem.score_all(&mut held)?;
        let labels: Vec<bool> = held.iter().map(|r| r.label == Some(true)).collect();
        let raw: Vec<f64> = held.iter().map(|r| r.raw_prob).collect();
        let smooth: Vec<f64> = held.iter().map(|r| r.smoothed.expect("scored above")).collect();
        for (name, scores) in [("raw", raw), ("cem", smooth)] {
            let m = calibration_metrics(&scores, &labels);
            let auc = m.auc.map_or_else(|| "nan".to_string(), |a| a.to_string());
            writeln!(w, "{name},{},{auc},{}", scores.len(), m.ece)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn references(utts: &[Utterance]) -> BTreeMap<String, Vec<usize>> {
    utts.iter().map(|u| (u.utterance_id.clone(), u.reference.clone())).collect()
}

fn decode_all(ckpt: &Checkpoint<f64>, utts: &[TestUtterance<f64>], cfg: &ExperimentConfig, greedy: bool) -> Result<Vec<DecodeRecord>> {
    use rayon::prelude::*;
    let dc = &cfg.two_pass.decode;
    dc.validate()?;
    utts.par_iter()
        .map(|u| {
            let speaker = ckpt.speaker_params(&u.speaker_id);
            if greedy {
                let enc = ckpt.model.encode(&u.features, speaker.as_ref())?;
                let tokens = greedy_decode(&ckpt.model, &enc, max_tokens(&ckpt.model, enc.frames, dc))?;
                // Greedy search keeps no scores.
                Ok(DecodeRecord { utterance_id: u.utterance_id.clone(), speaker_id: u.speaker_id.clone(), tokens, score: 0.0, confidence: 0.0, finished: true })
            } else {
                let h = decode_utterance(&ckpt.model, &u.features, speaker.as_ref(), dc)?;
                Ok(pipeline::decode_record(&u.utterance_id, &u.speaker_id, &h))
            }
        })
        .collect()
}

pub fn decode(cfg: &ExperimentConfig, out: &Path, data: &Path, model: &Path, split: &str, greedy: bool) -> Result<()> {
    prepare_out(cfg, out)?;
    let split = parse_split(split)?;
    let utts = load_data(cfg, data)?;
    let ckpt = load_model(model)?;
    let inputs = pipeline::eval_inputs(&utts, split);
    let records = decode_all(&ckpt, &inputs, cfg, greedy)?;
    save_decodes(&out.join("decode.tsv"), &records)?;
    Ok(())
}

fn load_cem(path: Option<&Path>) -> Result<Option<CemModel>> {
    path.map(|p| CemModel::load(p).with_context(|| format!("loading CEM {}", p.display()))).transpose()
}

pub fn adapt(cfg: &ExperimentConfig, out: &Path, data: &Path, model: &Path, cem: Option<&Path>) -> Result<()> {
    prepare_out(cfg, out)?;
    let utts = load_data(cfg, data)?;
    let ckpt = load_model(model)?;
    let cem = load_cem(cem)?;
    let test = pipeline::eval_inputs(&utts, Split::Test);
    let run = pipeline::run_two_pass(&ckpt.model, &test, &cfg.two_pass, cem.as_ref())?;
    save_decodes(&out.join("pass1.tsv"), &pipeline::pass_records(&run.results, false))?;
    save_decodes(&out.join("pass2.tsv"), &pipeline::pass_records(&run.results, true))?;
    let logs: Vec<AdaptLog> = run.results.iter().map(|r| r.log.clone()).collect();
    AdaptLog::save_all(&out.join("adapt_log.csv"), &logs)?;
    let mut adapted = Checkpoint::new(ckpt.model.clone());
    adapted.speakers = run.results.iter().filter_map(|r| r.state.clone().map(|s| (r.speaker_id.clone(), s))).collect();
    adapted.save(&out.join("adapted.ckpt"))?;
    let mut w = create(out.join("summary.csv"))?;
    writeln!(w, "pass,wer,std_err,errors,ref_len,speakers")?;
    for (name, s) in [("pass1", run.pass1), ("pass2", run.pass2)] {
        writeln!(w, "{name},{},{},{},{},{}", s.wer, s.std_err, s.errors, s.ref_len, s.speakers)?;
    }
    w.flush()?;
    println!("pass1 WER {} pass2 WER {}", run.pass1.wer, run.pass2.wer);
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig, out: &Path, data: &Path, model: &Path, cem: Option<&Path>) -> Result<()> {
    prepare_out(cfg, out)?;
    let utts = load_data(cfg, data)?;
    let ckpt = load_model(model)?;
    let cem = load_cem(cem)?;
    let test = pipeline::eval_inputs(&utts, Split::Test);
    let rows = pipeline::sweep_percentile(&ckpt.model, &test, &cfg.two_pass, &cfg.modes, &cfg.percentiles, cem.as_ref())?;
    let mut w = create(out.join("sweep.csv"))?;
    pipeline::write_sweep_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

pub fn report(cfg: &ExperimentConfig, out: &Path, data: &Path, decodes: &[PathBuf]) -> Result<()> {
    prepare_out(cfg, out)?;
    let refs = references(&read_utterances(data).with_context(|| format!("reading {}", data.display()))?);
    let mut w = create(out.join("report.csv"))?;
    writeln!(w, "file,{}", pipeline::REPORT_HEADER)?;
    for path in decodes {
        let records = load_decodes(path).with_context(|| format!("reading {}", path.display()))?;
        let rows = pipeline::report(&records, &refs)?;
        let mut buf = Vec::new();
        pipeline::write_report_csv(&mut buf, &rows)?;
        let name = path.display().to_string();
        for line in String::from_utf8(buf).expect("ASCII CSV").lines().skip(1) {
            writeln!(w, "{name},{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}
