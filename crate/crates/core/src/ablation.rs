//! Trains every table configuration over several seeds and summarises.

use std::fmt::Write as _;

use crate::data::RgbdSample;
use crate::model::{ModelConfig, TableRow};
use crate::train::{self, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRecord {
    pub row: TableRow,
    pub seed: u64,
    pub status: RunStatus,
    /// Mean training loss over the last logging window.
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub miou: Option<f64>,
    pub iou: Vec<Option<f64>>,
}

/// One training run of `row` applied to `base`.
pub fn run_one(
    base: &ModelConfig,
    row: TableRow,
    config: &TrainConfig,
    seed: u64,
    train_set: &[RgbdSample],
    val_set: &[RgbdSample],
) -> AblationRecord {
    let model = row.apply(base);
    let cfg = TrainConfig {
        seed,
        ..config.clone()
    };
    let k = base.num_classes;
    match train::train(&model, &cfg, train_set, val_set) {
        Ok(out) => {
            let train_loss = out
                .log
                .iter()
                .rev()
                .find(|r| r.split == train::LogSplit::Train)
                .map(|r| r.loss);
            let (val_loss, miou, iou) = match &out.final_val {
                Some(r) => (Some(r.loss), r.miou(), r.confusion.per_class_iou()),
                None => (None, None, vec![None; k]),
            };
            AblationRecord {
                row,
                seed,
                status: RunStatus::Completed,
                train_loss,
                val_loss,
                miou,
                iou,
            }
        }
        Err(e) => AblationRecord {
            row,
            seed,
            status: RunStatus::Failed(e.to_string()),
            train_loss: None,
            val_loss: None,
            miou: None,
            iou: vec![None; k],
        },
    }
}

/// Runs `rows × seeds`, in table order then seed order, calling `progress`
/// after each run. A failed run is recorded and the rest continue.
pub fn run_ablation(
    base: &ModelConfig,
    config: &TrainConfig,
    rows: &[TableRow],
    seeds: &[u64],
    train_set: &[RgbdSample],
    val_set: &[RgbdSample],
    mut progress: impl FnMut(&AblationRecord),
) -> Vec<AblationRecord> {
    let mut out = Vec::with_capacity(rows.len() * seeds.len());
    for &row in rows {
        for &seed in seeds {
            let rec = run_one(base, row, config, seed, train_set, val_set);
            progress(&rec);
            out.push(rec);
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_csv(num_classes: usize, records: &[AblationRecord]) -> String {
    let mut s = String::from("row,config,seed,status,train_loss,val_loss,miou");
    for k in 0..num_classes {
        let _ = write!(s, ",iou_class{k}");
    }
    s.push('\n');
    for r in records {
        let status = match &r.status {
            RunStatus::Completed => "ok".to_string(),
            RunStatus::Failed(m) => format!("failed: {}", m.replace([',', '\n'], ";")),
        };
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.row.label(),
            r.row.key(),
            r.seed,
            status,
            opt(r.train_loss),
            opt(r.val_loss),
            opt(r.miou)
        );
        for v in &r.iou {
            let _ = write!(s, ",{}", opt(*v));
        }
        s.push('\n');
    }
    s
}

/// Mean of the defined values, if any.
pub fn mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean val mIoU of one row over its completed seeds.
pub fn row_mean_miou(records: &[AblationRecord], row: TableRow) -> Option<f64> {
    mean(records.iter().filter(|r| r.row == row).map(|r| r.miou))
}

/// Text table in table order: per-class IoU and mIoU (percent), seed means.
pub fn render_table(num_classes: usize, records: &[AblationRecord]) -> String {
    let mut rows: Vec<TableRow> = Vec::new();
    for r in records {
        if !rows.contains(&r.row) {
            rows.push(r.row);
        }
    }
    rows.sort_by_key(|r| TableRow::ALL.iter().position(|x| x == r));
    let mut s = String::new();
    s.push_str("Toy-scale ablation on synthetic RGB-D scenes. Values are val IoU (%) averaged\n");
    s.push_str("over seeds; they are NOT comparable to full-scale benchmark numbers.\n\n");
    let _ = write!(s, "{:<16}", "Method");
    for k in 0..num_classes {
        let _ = write!(s, "{:>9}", format!("class{k}"));
    }
    let _ = writeln!(s, "{:>9}{:>8}", "mIoU", "runs");
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
    for row in rows {
        let recs: Vec<&AblationRecord> = records.iter().filter(|r| r.row == row).collect();
        let ok = recs.iter().filter(|r| r.status == RunStatus::Completed).count();
        let _ = write!(s, "{:<16}", row.label());
        for k in 0..num_classes {
            let _ = write!(s, "{:>9}", pct(mean(recs.iter().map(|r| r.iou.get(k).copied().flatten()))));
        }
        let _ = writeln!(s, "{:>9}{:>8}", pct(mean(recs.iter().map(|r| r.miou))), format!("{ok}/{}", recs.len()));
    }
    s
}

pub fn all_completed(records: &[AblationRecord]) -> bool {
    records.iter().all(|r| r.status == RunStatus::Completed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(row: TableRow, seed: u64, miou: Option<f64>) -> AblationRecord {
        AblationRecord {
            row,
            seed,
            status: if miou.is_some() {
                RunStatus::Completed
            } else {
                RunStatus::Failed("diverged, step 3".into())
            },
            train_loss: miou,
            val_loss: miou,
            miou,
            iou: vec![miou, None],
        }
    }

    #[test]
    fn csv_and_table() {
        let recs = vec![
            rec(TableRow::Total, 0, Some(0.5)),
            rec(TableRow::RgbBaseline, 0, Some(0.25)),
            rec(TableRow::RgbBaseline, 1, None),
        ];
        let csv = render_csv(2, &recs);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("failed: diverged; step 3"));
        let table = render_table(2, &recs);
        let rgb = table.find("RGB Baseline").unwrap();
        assert!(rgb < table.find("Total").unwrap());
        assert!(table.contains("1/2"));
        assert_eq!(row_mean_miou(&recs, TableRow::RgbBaseline), Some(0.25));
    }
}
