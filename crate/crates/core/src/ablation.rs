//! Similarity-head and batch-size sweeps over one pre-training corpus.

use std::fmt::Write as _;

use crate::audio::AudioClip;
use crate::config::{RunConfig, SimilarityKind};
use crate::error::Result;
use crate::trainer::{pretrain, train_probe};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub similarity: SimilarityKind,
    pub batch_size: usize,
    /// Mean loss of the last pre-training epoch (NaN if no epochs ran).
    pub final_loss: f64,
    pub probe_accuracy: f64,
}

/// Pre-trains one model per `(similarity, batch size)` pair of `cfg` and
/// scores each with a frozen linear probe on `test`.
pub fn run_ablation(
    cfg: &RunConfig,
    unlabeled: &[AudioClip],
    train: &[(AudioClip, usize)],
    test: &[(AudioClip, usize)],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &similarity in &cfg.ablation_similarities {
        for &batch_size in &cfg.ablation_batch_sizes {
            let mut pre = cfg.clone();
            pre.similarity = similarity;
            pre.batch_size = batch_size;
            let out = pretrain(&pre, unlabeled, None, |_| {})?;

            let mut probe = cfg.clone();
            probe.epochs = cfg.probe_epochs;
            probe.batch_size = cfg.probe_batch_size;
            probe.learning_rate = cfg.probe_learning_rate;
            let probed = train_probe(out.params, train, Some(test), &probe, |_| {})?;
            let row = AblationRow {
                similarity,
                batch_size,
                final_loss: out.log.last_loss().unwrap_or(f64::NAN),
                probe_accuracy: probed
                    .log
                    .records
                    .last()
                    .and_then(|r| r.eval_accuracy)
                    .unwrap_or(f64::NAN),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("similarity  batch_size  final_loss  probe_accuracy\n");
    for r in rows {
        let name = match r.similarity {
            SimilarityKind::Bilinear => "bilinear",
            SimilarityKind::Cosine => "cosine",
        };
        let _ = writeln!(
            out,
            "{name:<10}  {:>10}  {:>10.4}  {:>14.2}",
            r.batch_size,
            r.final_loss,
            100.0 * r.probe_accuracy
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_one_line_per_row() {
        let rows = vec![
            AblationRow {
                similarity: SimilarityKind::Bilinear,
                batch_size: 16,
                final_loss: 1.5,
                probe_accuracy: 0.75,
            },
            AblationRow {
                similarity: SimilarityKind::Cosine,
                batch_size: 64,
                final_loss: 2.0,
                probe_accuracy: 0.5,
            },
        ];
        let t = format_table(&rows);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(1).unwrap().starts_with("bilinear"));
        assert!(t.contains("75.00"));
    }
}
