//! Word-level scoring: precision/recall/F over character-offset spans,
//! OOV recall, and switch-usage aggregation.
//!
//! Counts are summed over the whole corpus before any ratio is taken
//! (micro-averaging), matching segmentation-bakeoff scoring conventions.

use std::collections::HashSet;
use std::io::Write;

use crate::corpus::SegmentedSentence;
use crate::numerics::Tensor1;
use crate::switch_lstm::SwitchTrace;
use crate::{Error, Result};

/// Corpus-level evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Recall restricted to gold words outside the training dictionary;
    /// `None` when no OOV set was supplied or it was empty.
    pub oov_recall: Option<f64>,
    pub gold_words: usize,
    pub pred_words: usize,
    pub correct_words: usize,
}

fn spans(sentence: &SegmentedSentence) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::with_capacity(sentence.words().len());
    let mut offset = 0usize;
    for w in sentence.words() {
        let len = w.chars().count();
        out.push((offset, offset + len, w.as_str()));
        offset += len;
    }
    out
}

/// Micro-averaged precision/recall/F over span-identical word matches,
/// optionally with OOV recall against a set of out-of-dictionary word types.
pub fn prf_with_oov(
    gold: &[SegmentedSentence],
    pred: &[SegmentedSentence],
    oov: Option<&HashSet<String>>,
) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(format!(
            "gold has {} sentences, prediction has {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut gold_words = 0usize;
    let mut pred_words = 0usize;
    let mut correct = 0usize;
    let mut oov_gold = 0usize;
    let mut oov_correct = 0usize;

    for (idx, (g, p)) in gold.iter().zip(pred.iter()).enumerate() {
        if g.char_len() != p.char_len() {
            return Err(Error::invalid(format!(
                "sentence {idx}: character count mismatch ({} gold vs {} predicted)",
                g.char_len(),
                p.char_len()
            )));
        }
        let gs = spans(g);
        let ps = spans(p);
        gold_words += gs.len();
        pred_words += ps.len();
        let pred_set: HashSet<(usize, usize)> = ps.iter().map(|&(s, e, _)| (s, e)).collect();
        for &(s, e, w) in &gs {
            let hit = pred_set.contains(&(s, e));
            if hit {
                correct += 1;
            }
            if let Some(oov_set) = oov {
                if oov_set.contains(w) {
                    oov_gold += 1;
                    if hit {
                        oov_correct += 1;
                    }
                }
            }
        }
    }

    let precision = if pred_words > 0 { correct as f64 / pred_words as f64 } else { 0.0 };
    let recall = if gold_words > 0 { correct as f64 / gold_words as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let oov_recall = match oov {
        Some(_) if oov_gold > 0 => Some(oov_correct as f64 / oov_gold as f64),
        _ => None,
    };
    Ok(EvalReport { precision, recall, f1, oov_recall, gold_words, pred_words, correct_words: correct })
}

pub fn prf(gold: &[SegmentedSentence], pred: &[SegmentedSentence]) -> Result<EvalReport> {
    prf_with_oov(gold, pred, None)
}

/// Recall restricted to OOV gold spans. `None` when the OOV set is empty
/// (not applicable rather than zero).
pub fn oov_recall(
    gold: &[SegmentedSentence],
    pred: &[SegmentedSentence],
    oov: &HashSet<String>,
) -> Result<Option<f64>> {
    if oov.is_empty() {
        return Ok(None);
    }
    Ok(prf_with_oov(gold, pred, Some(oov))?.oov_recall)
}

/// Mean switch distribution over all positions and sentences of one task,
/// per direction, renormalized to sum exactly 1.
pub fn switch_distribution(traces: &[SwitchTrace]) -> Result<(Tensor1, Tensor1)> {
    if traces.is_empty() {
        return Err(Error::invalid("switch_distribution needs at least one trace"));
    }
    let k = traces[0]
        .forward
        .first()
        .or_else(|| traces[0].backward.first())
        .map(|a| a.len())
        .ok_or_else(|| Error::invalid("empty switch trace"))?;
    let mut fwd = Tensor1::zeros(k);
    let mut bwd = Tensor1::zeros(k);
    let mut n_fwd = 0usize;
    let mut n_bwd = 0usize;
    for trace in traces {
        for a in &trace.forward {
            fwd += a;
            n_fwd += 1;
        }
        for a in &trace.backward {
            bwd += a;
            n_bwd += 1;
        }
    }
    if n_fwd > 0 {
        fwd /= fwd.sum();
    }
    if n_bwd > 0 {
        bwd /= bwd.sum();
    }
    Ok((fwd, bwd))
}

pub const EVAL_TSV_HEADER: &str = "task\tprecision\trecall\tf1\toov_recall\tgold_words\tpred_words\tcorrect_words";

pub fn eval_tsv_row(task: &str, r: &EvalReport) -> String {
    let oov = match r.oov_recall {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    };
    format!(
        "{task}\t{:.4}\t{:.4}\t{:.4}\t{oov}\t{}\t{}\t{}",
        r.precision, r.recall, r.f1, r.gold_words, r.pred_words, r.correct_words
    )
}

/// A Table-style text block: one metric per line for one task.
pub fn write_report_block(mut w: impl Write, task: &str, r: &EvalReport) -> Result<()> {
    writeln!(w, "[{task}]")?;
    writeln!(w, "P    {:.2}", 100.0 * r.precision)?;
    writeln!(w, "R    {:.2}", 100.0 * r.recall)?;
    writeln!(w, "F    {:.2}", 100.0 * r.f1)?;
    match r.oov_recall {
        Some(v) => writeln!(w, "OOV  {:.2}", 100.0 * v)?,
        None => writeln!(w, "OOV  -")?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(words: &[&str]) -> SegmentedSentence {
        SegmentedSentence::new(words.iter().map(|w| w.to_string()).collect()).unwrap()
    }

    #[test]
    fn identical_prediction_is_perfect() {
        let gold = vec![sent(&["ab", "c"]), sent(&["d"])];
        let r = prf(&gold, &gold).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn partial_overlap_counts_spans() {
        let gold = vec![sent(&["ab", "c"])];
        let pred = vec![sent(&["a", "b", "c"])];
        let r = prf(&gold, &pred).unwrap();
        assert!((r.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 0.5).abs() < 1e-12);
        assert!((r.f1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn one_giant_predicted_word_scores_zero() {
        let gold = vec![sent(&["ab", "cd"])];
        let pred = vec![sent(&["abcd"])];
        let r = prf(&gold, &pred).unwrap();
        assert_eq!(r.f1, 0.0);
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.recall, 0.0);
    }

    #[test]
    fn char_count_mismatch_names_sentence() {
        let gold = vec![sent(&["ab"]), sent(&["cd"])];
        let pred = vec![sent(&["ab"]), sent(&["cde"])];
        let err = prf(&gold, &pred).unwrap_err();
        assert!(err.to_string().contains("sentence 1"));
    }

    #[test]
    fn swapping_gold_and_pred_swaps_p_and_r() {
        let a = vec![sent(&["ab", "c", "de"])];
        let b = vec![sent(&["a", "bc", "de"])];
        let r1 = prf(&a, &b).unwrap();
        let r2 = prf(&b, &a).unwrap();
        assert_eq!(r1.precision, r2.recall);
        assert_eq!(r1.recall, r2.precision);
        assert_eq!(r1.f1, r2.f1);
    }

    #[test]
    fn micro_average_uses_summed_counts() {
        // Sentence 1 perfect, sentence 2 fully wrong: micro F differs from
        // the mean of per-sentence Fs.
        let gold = vec![sent(&["ab"]), sent(&["cd", "ef"])];
        let pred = vec![sent(&["ab"]), sent(&["c", "de", "f"])];
        let r = prf(&gold, &pred).unwrap();
        let p = 1.0 / 4.0;
        let rec = 1.0 / 3.0;
        assert!((r.precision - p).abs() < 1e-12);
        assert!((r.recall - rec).abs() < 1e-12);
        let f = 2.0 * p * rec / (p + rec);
        assert!((r.f1 - f).abs() < 1e-12);
        let mean_of_f = (1.0 + 0.0) / 2.0;
        assert!((r.f1 - mean_of_f).abs() > 0.05);
    }

    #[test]
    fn oov_recall_cases() {
        let gold = vec![sent(&["ab", "d"])];
        let pred_good = vec![sent(&["ab", "d"])];
        let pred_bad = vec![sent(&["a", "bd"])];
        let oov: HashSet<String> = ["d".to_string()].into_iter().collect();
        assert_eq!(oov_recall(&gold, &pred_good, &oov).unwrap(), Some(1.0));
        assert_eq!(oov_recall(&gold, &pred_bad, &oov).unwrap(), Some(0.0));
        let empty = HashSet::new();
        assert_eq!(oov_recall(&gold, &pred_good, &empty).unwrap(), None);
    }

    #[test]
    fn switch_distribution_aggregates_and_normalizes() {
        let one = SwitchTrace {
            forward: vec![Tensor1::from_vec(vec![1.0])],
            backward: vec![Tensor1::from_vec(vec![1.0])],
        };
        let (f, b) = switch_distribution(&[one]).unwrap();
        assert_eq!(f.to_vec(), vec![1.0]);
        assert_eq!(b.to_vec(), vec![1.0]);

        let uniform = SwitchTrace {
            forward: vec![Tensor1::from_vec(vec![0.5, 0.5]); 3],
            backward: vec![Tensor1::from_vec(vec![0.5, 0.5]); 3],
        };
        let (f, b) = switch_distribution(&[uniform.clone(), uniform]).unwrap();
        for v in f.iter().chain(b.iter()) {
            assert!((v - 0.5).abs() < 1e-12);
        }

        let skew = SwitchTrace {
            forward: vec![
                Tensor1::from_vec(vec![0.9, 0.1]),
                Tensor1::from_vec(vec![0.7, 0.3]),
            ],
            backward: vec![Tensor1::from_vec(vec![0.2, 0.8])],
        };
        let (f, b) = switch_distribution(&[skew]).unwrap();
        assert!((f.sum() - 1.0).abs() < 1e-9);
        assert!((b.sum() - 1.0).abs() < 1e-9);
        assert!((f[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn one_hot_traces_stay_one_hot() {
        let t = SwitchTrace {
            forward: vec![Tensor1::from_vec(vec![0.0, 1.0, 0.0]); 4],
            backward: vec![Tensor1::from_vec(vec![0.0, 1.0, 0.0]); 4],
        };
        let (f, _) = switch_distribution(&[t]).unwrap();
        assert_eq!(f.to_vec(), vec![0.0, 1.0, 0.0]);
    }
}
