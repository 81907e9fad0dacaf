//! Confusion matrix, mIoU, pixel accuracy and their text outputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::IGNORE_LABEL;
use crate::error::{Error, Result};

/// `K x K` pixel counts, rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose ground truth is not ignored.
    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let k = self.classes;
        let bad = |v: u8| v as usize >= k;
        if let Some((&p, &g)) = pred.iter().zip(gt).find(|(&p, &g)| g != IGNORE_LABEL && (bad(g) || bad(p))) {
            return Err(Error::Data(format!("label pair (gt {g}, pred {p}) outside [0, {k})")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != IGNORE_LABEL {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Dimension(format!("cannot merge {} and {} class matrices", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Per-class IoU, `None` for classes absent from both prediction and
    /// ground truth.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a nonzero union.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Numeric("mIoU undefined: no class has a nonzero union".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Numeric("pixel accuracy undefined on an empty matrix".into()));
        }
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / total as f64)
    }

    /// Header row of class indices, then one row per ground-truth class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("gt\\pred");
        for c in 0..self.classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for g in 0..self.classes {
            let _ = write!(s, "{g}");
            for p in 0..self.classes {
                let _ = write!(s, ",{}", self.get(g, p));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One line of space-separated `key=value` pairs.
pub fn format_record(fields: &[(&str, String)]) -> String {
    fields.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

/// Parses a `key=value` line back into pairs.
pub fn parse_record(line: &str) -> Result<Vec<(String, String)>> {
    line.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Data(format!("record field `{tok}` lacks `=`")))
        })
        .collect()
}

/// Standard evaluation record for a matrix.
pub fn eval_record(cm: &ConfusionMatrix) -> Result<String> {
    let mut fields = vec![
        ("miou", format!("{:.6}", cm.miou()?)),
        ("pixel_acc", format!("{:.6}", cm.pixel_accuracy()?)),
        ("pixels", cm.total().to_string()),
    ];
    let ious = cm.class_iou();
    let names: Vec<String> = (0..ious.len()).map(|c| format!("iou{c}")).collect();
    for (name, iou) in names.iter().zip(&ious) {
        fields.push((name.as_str(), iou.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))));
    }
    Ok(format_record(&fields))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        let labels = [0u8, 1, 2, 2, 1];
        cm.update(&labels, &labels).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
        assert_eq!(cm.get(2, 2), 2);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 1, 1], &[255, 255, 255]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.miou().is_err());
    }

    #[test]
    fn half_and_half_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert!((cm.miou().unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_is_data_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(cm.update(&[2], &[0]), Err(Error::Data(_))));
        assert!(matches!(cm.update(&[0], &[7]), Err(Error::Data(_))));
    }

    #[test]
    fn csv_and_records() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 1, 1], &[0, 1, 0]).unwrap();
        assert_eq!(cm.to_csv(), "gt\\pred,0,1\n0,1,1\n1,0,1\n");
        let rec = eval_record(&cm).unwrap();
        let parsed = parse_record(&rec).unwrap();
        assert_eq!(parsed[0].0, "miou");
        assert!(parse_record("a=1 b").is_err());
    }
}
