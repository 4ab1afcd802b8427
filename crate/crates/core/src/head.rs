//! Pointwise scoring head, training loss and ranking metrics.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init};

pub fn init_params<R: Rng>(init: &mut Init<'_, R>, prefix: &str, d: usize) {
    init.linear(prefix, d, 1);
}

/// `sigmoid(h·w + b)` per node, squeezed to a length-`n` vector.
pub fn score_candidates(tape: &mut Tape, p: &Bound, prefix: &str, nodes: Var) -> Result<Var> {
    let shape = tape.shape(nodes).to_vec();
    let want = p.shape(tape, &format!("{prefix}.weight"))?[0];
    if shape.len() != 2 || shape[1] != want {
        return Err(Error::dim(
            "score_candidates",
            format!("node features {shape:?}, head expects width {want}"),
        ));
    }
    let logits = nn::linear(tape, p, prefix, nodes)?;
    let probs = tape.sigmoid(logits)?;
    tape.reshape(probs, vec![shape[0]])
}

/// Mean binary cross-entropy with target 1 at `gold` and 0 elsewhere.
pub fn bce_loss(tape: &mut Tape, probs: Var, gold: usize, pos_weight: f64) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 1 {
        return Err(Error::dim("bce_loss", format!("probabilities {shape:?}")));
    }
    if gold >= shape[0] {
        return Err(Error::Input(format!(
            "gold index {gold} out of range for {} candidates",
            shape[0]
        )));
    }
    let mut targets = vec![0.0; shape[0]];
    targets[gold] = 1.0;
    tape.bce(probs, targets, pos_weight)
}

/// 1-based rank of `gold`: one plus the candidates scored strictly higher,
/// plus equally scored candidates at a lower index.
pub fn rank_of(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > g || (s == g && i < gold))
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankMetrics {
    pub accuracy: f64,
    pub mrr: f64,
    pub ranks: Vec<usize>,
}

pub fn rank_and_metrics(score_lists: &[Vec<f64>], golds: &[usize]) -> Result<RankMetrics> {
    if score_lists.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    if score_lists.len() != golds.len() {
        return Err(Error::Input(format!(
            "{} score lists but {} gold indices",
            score_lists.len(),
            golds.len()
        )));
    }
    let mut ranks = Vec::with_capacity(golds.len());
    for (i, (scores, &gold)) in score_lists.iter().zip(golds).enumerate() {
        if gold >= scores.len() {
            return Err(Error::Input(format!(
                "sample {i}: gold index {gold} out of range for {} candidates",
                scores.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::NonFinite(format!("sample {i}: NaN score")));
        }
        ranks.push(rank_of(scores, gold));
    }
    let n = ranks.len() as f64;
    let accuracy = ranks.iter().filter(|&&r| r == 1).count() as f64 / n;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    Ok(RankMetrics {
        accuracy,
        mrr,
        ranks,
    })
}

/// One evaluation result as written to `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub split: String,
    pub accuracy: f64,
    pub mrr: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    /// Writes a header line followed by one row per report.
    pub fn write_csv<W: Write>(reports: &[MetricsReport], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in reports {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()
            .map_err(|e| Error::Input(format!("writing metrics: {e}")))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsReport>> {
        csv::Reader::from_reader(input)
            .deserialize()
            .map(|r| r.map_err(csv_error))
            .collect()
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Input(format!("metrics csv: {e}"))
}
