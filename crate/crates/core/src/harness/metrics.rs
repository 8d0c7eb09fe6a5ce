use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Top-1 accuracy, per-class accuracy and confusion matrix of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(
        labels: &[usize],
        predictions: &[usize],
        classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("cannot score an empty split".into()));
        }
        let mut confusion = vec![vec![0; classes]; classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= classes || p >= classes {
                return Err(Error::Data(format!(
                    "label {y} or prediction {p} outside {classes} classes"
                )));
            }
            confusion[y][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect();
        Ok(Metrics {
            accuracy: correct as f64 / labels.len() as f64,
            per_class_accuracy,
            confusion,
        })
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut out = String::from("true\\pred");
        for c in 0..k {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            out.push_str(&c.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.confusion_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_per_class_accuracy: Vec<f64>,
}

/// Two polylines (loss and accuracy) over epochs as a small standalone SVG.
pub fn curves_svg(history: &[EpochMetrics]) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let n = history.len().max(2) as f64 - 1.0;
    let max_loss = history.iter().map(|m| m.train_loss).fold(1e-12, f64::max);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v;
    let line = |vals: Vec<f64>, colour: &str| {
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v)))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        )
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - pad,
        r = w - pad
    );
    svg += &line(
        history.iter().map(|m| m.train_loss / max_loss).collect(),
        "#c0392b",
    );
    svg += &line(
        history.iter().map(|m| m.train_accuracy).collect(),
        "#2980b9",
    );
    svg += &line(history.iter().map(|m| m.test_accuracy).collect(), "#27ae60");
    svg += &format!(
        "<text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"12\">\
         train loss (red, max {max_loss:.3}), train acc (blue), test acc (green); {} epochs</text>\n</svg>\n",
        history.len()
    );
    svg
}
