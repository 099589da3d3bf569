//! Recognition quality metrics and batch evaluation against a checkpoint.

use std::io::Write;
use std::path::Path;

use crate::ctc::{Alphabet, CtcError, Decoder, LabelSequence};
use crate::data::Sample;
use crate::model::{self, ModelError};
use crate::train::checkpoint::Checkpoint;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no references to score")]
    EmptyReferences,
    #[error("reference labels are all empty, character accuracy is undefined")]
    NoReferenceCharacters,
    #[error("got {refs} references but {preds} predictions")]
    LengthMismatch { refs: usize, preds: usize },
    #[error(
        "sample alphabet does not match the checkpoint alphabet \
         (differing characters: {differing})"
    )]
    AlphabetMismatch { differing: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

/// Levenshtein distance between two label sequences (unit insert, delete,
/// substitute costs).
pub fn edit_distance(a: &LabelSequence, b: &LabelSequence) -> usize {
    let (a, b) = (a.indices(), b.indices());
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn check_pairing(refs: &[LabelSequence], preds: &[LabelSequence]) -> Result<(), EvalError> {
    if refs.len() != preds.len() {
        return Err(EvalError::LengthMismatch {
            refs: refs.len(),
            preds: preds.len(),
        });
    }
    if refs.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    Ok(())
}

/// 1 − (total edit distance / total reference length), clamped to [0, 1].
pub fn char_accuracy(refs: &[LabelSequence], preds: &[LabelSequence]) -> Result<f64, EvalError> {
    check_pairing(refs, preds)?;
    let total_len: usize = refs.iter().map(|r| r.len()).sum();
    if total_len == 0 {
        return Err(EvalError::NoReferenceCharacters);
    }
    let total_ed: usize = refs
        .iter()
        .zip(preds)
        .map(|(r, p)| edit_distance(r, p))
        .sum();
    Ok((1.0 - total_ed as f64 / total_len as f64).clamp(0.0, 1.0))
}

/// Fraction of predictions that match their reference exactly.
pub fn word_accuracy(refs: &[LabelSequence], preds: &[LabelSequence]) -> Result<f64, EvalError> {
    check_pairing(refs, preds)?;
    let hits = refs.iter().zip(preds).filter(|(r, p)| r == p).count();
    Ok(hits as f64 / refs.len() as f64)
}

/// One evaluated sample, with text rendered through the alphabet.
#[derive(Debug, Clone, Serialize)]
pub struct SampleEval {
    pub source_id: String,
    pub reference: String,
    pub prediction: String,
    pub edit_distance: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub decoder: String,
    pub n_samples: usize,
    pub char_accuracy: f64,
    pub word_accuracy: f64,
    pub mean_edit_distance: f64,
    pub details: Vec<SampleEval>,
}

fn decoder_name(decoder: Decoder) -> String {
    match decoder {
        Decoder::Greedy => "greedy".to_string(),
        Decoder::Beam { width } => format!("beam:{width}"),
    }
}

/// Decode every sample with the checkpoint's model and score the results.
/// The samples must have been encoded with the same alphabet the checkpoint
/// was trained on.
pub fn evaluate(
    checkpoint: &Checkpoint,
    samples: &[Sample],
    sample_alphabet: &Alphabet,
    decoder: Decoder,
) -> Result<EvalReport, EvalError> {
    if sample_alphabet != &checkpoint.alphabet {
        let ours: Vec<char> = sample_alphabet.chars().to_vec();
        let theirs: Vec<char> = checkpoint.alphabet.chars().to_vec();
        let mut differing: Vec<char> = ours
            .iter()
            .filter(|c| !theirs.contains(c))
            .chain(theirs.iter().filter(|c| !ours.contains(c)))
            .copied()
            .collect();
        differing.sort();
        differing.dedup();
        return Err(EvalError::AlphabetMismatch {
            differing: differing.iter().collect(),
        });
    }
    if samples.is_empty() {
        return Err(EvalError::EmptyReferences);
    }

    let alphabet = &checkpoint.alphabet;
    let blank = alphabet.blank_index();
    let mut refs = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    let mut details = Vec::with_capacity(samples.len());
    for sample in samples {
        let lp = model::log_probs(&checkpoint.params, &sample.image)?;
        let pred = decoder.decode(&lp, blank)?;
        details.push(SampleEval {
            source_id: sample.source_id.clone(),
            reference: alphabet.decode(&sample.label)?,
            prediction: alphabet.decode(&pred)?,
            edit_distance: edit_distance(&sample.label, &pred),
        });
        refs.push(sample.label.clone());
        preds.push(pred);
    }

    let total_ed: usize = details.iter().map(|d| d.edit_distance).sum();
    Ok(EvalReport {
        decoder: decoder_name(decoder),
        n_samples: samples.len(),
        char_accuracy: char_accuracy(&refs, &preds)?,
        word_accuracy: word_accuracy(&refs, &preds)?,
        mean_edit_distance: total_ed as f64 / samples.len() as f64,
        details,
    })
}

/// Summary (without per-sample details) as pretty-printed JSON.
pub fn write_eval_json(path: &Path, report: &EvalReport) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Summary<'a> {
        decoder: &'a str,
        n_samples: usize,
        char_accuracy: f64,
        word_accuracy: f64,
        mean_edit_distance: f64,
    }
    let summary = Summary {
        decoder: &report.decoder,
        n_samples: report.n_samples,
        char_accuracy: report.char_accuracy,
        word_accuracy: report.word_accuracy,
        mean_edit_distance: report.mean_edit_distance,
    };
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, &summary)?;
    writeln!(file)
}

/// Per-sample rows as tab-separated values with a header line.
pub fn write_eval_details_tsv(path: &Path, report: &EvalReport) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "source_id\treference\tprediction\tedit_distance")?;
    for d in &report.details {
        writeln!(
            file,
            "{}\t{}\t{}\t{}",
            d.source_id, d.reference, d.prediction, d.edit_distance
        )?;
    }
    Ok(())
}
