//! Pair accuracy, micro/macro F1 with NA excluded from credit, per-domain
//! reports and prediction dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::config::PassMode;
use crate::corpus::{enumerate_pairs, AnnotatedParagraph, LabelSet, PairMode};
use crate::error::{Error, Result};
use crate::head::RelationPrediction;
use crate::model::Model;
use crate::variants::predict_in_mode;

/// Precision, recall and F1 from raw counts. With nothing to find and
/// nothing predicted all three are 1.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    if tp + fp + fn_ == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Unweighted mean over domain scores.
pub fn domain_average(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub pairs: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Scores {
    /// Scores from gold/predicted label ids; `na` earns no credit.
    pub fn from_labels(gold: &[usize], pred: &[usize], labels: usize, na: usize) -> Result<Scores> {
        if gold.len() != pred.len() {
            return Err(Error::Length {
                op: "score",
                expected: gold.len(),
                got: pred.len(),
            });
        }
        let mut confusion = vec![vec![0; labels]; labels];
        for (&g, &p) in gold.iter().zip(pred) {
            if g >= labels || p >= labels {
                return Err(Error::invalid(format!("label id out of range: gold {g}, predicted {p}")));
            }
            confusion[g][p] += 1;
        }
        Ok(Self::from_confusion(confusion, na))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>, na: usize) -> Scores {
        let l = confusion.len();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        let mut pairs = 0;
        let mut correct = 0;
        for g in 0..l {
            for p in 0..l {
                let c = confusion[g][p];
                pairs += c;
                if g == p {
                    correct += c;
                    if g != na {
                        tp += c;
                    }
                } else {
                    if p != na {
                        fp += c;
                    }
                    if g != na {
                        fn_ += c;
                    }
                }
            }
        }
        let (precision, recall, micro_f1) = prf(tp, fp, fn_);
        let per_label: Vec<f64> = (0..l)
            .filter(|&x| x != na)
            .filter_map(|x| {
                let tp = confusion[x][x];
                let fp: usize = (0..l).filter(|&g| g != x).map(|g| confusion[g][x]).sum();
                let fn_: usize = (0..l).filter(|&p| p != x).map(|p| confusion[x][p]).sum();
                (tp + fp + fn_ > 0).then(|| prf(tp, fp, fn_).2)
            })
            .collect();
        let macro_f1 = if per_label.is_empty() {
            1.0
        } else {
            per_label.iter().sum::<f64>() / per_label.len() as f64
        };
        Scores {
            pairs,
            correct,
            accuracy: if pairs == 0 { 0.0 } else { correct as f64 / pairs as f64 },
            precision,
            recall,
            micro_f1,
            macro_f1,
            confusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: PassMode,
    pub labels: Vec<String>,
    pub overall: Scores,
    /// Only domains with at least one evaluated pair appear.
    pub domains: BTreeMap<String, Scores>,
    pub relations_per_second: f64,
}

impl EvalReport {
    /// Unweighted mean of per-domain micro-F1.
    pub fn average_micro_f1(&self) -> f64 {
        let v: Vec<f64> = self.domains.values().map(|s| s.micro_f1).collect();
        domain_average(&v)
    }

    /// `metric,domain,value` lines. Timing is left out so that the text is
    /// reproducible; see [`EvalReport::render`].
    pub fn render_metrics(&self) -> String {
        let mut out = String::from("metric,domain,value\n");
        let mut emit = |name: &str, s: &Scores| {
            for (metric, v) in [
                ("pairs", s.pairs as f64),
                ("accuracy", s.accuracy),
                ("precision", s.precision),
                ("recall", s.recall),
                ("micro_f1", s.micro_f1),
                ("macro_f1", s.macro_f1),
            ] {
                writeln!(out, "{metric},{name},{v}").unwrap();
            }
        };
        emit("all", &self.overall);
        for (d, s) in &self.domains {
            emit(d, s);
        }
        writeln!(out, "micro_f1,avg,{}", self.average_micro_f1()).unwrap();
        for (g, row) in self.overall.confusion.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                if *c > 0 {
                    writeln!(out, "confusion,{}>{},{c}", self.labels[g], self.labels[p]).unwrap();
                }
            }
        }
        out
    }

    /// Metrics plus the measured throughput.
    pub fn render(&self) -> String {
        format!(
            "{}relations_per_second,all,{}\n",
            self.render_metrics(),
            self.relations_per_second
        )
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<8} {:>7} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "domain", "pairs", "accuracy", "precision", "recall", "micro-F1", "macro-F1"
        )
        .unwrap();
        let mut row = |name: &str, s: &Scores| {
            writeln!(
                out,
                "{:<8} {:>7} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                name, s.pairs, s.accuracy, s.precision, s.recall, s.micro_f1, s.macro_f1
            )
            .unwrap();
        };
        for (d, s) in &self.domains {
            row(d, s);
        }
        row("all", &self.overall);
        writeln!(out, "{:<8} {:>57.4}", "avg", self.average_micro_f1()).unwrap();
        writeln!(out, "mode {} at {:.1} relations/s", self.mode, self.relations_per_second).unwrap();
        out
    }
}

/// One evaluated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub paragraph: usize,
    pub gold: usize,
    pub prediction: RelationPrediction,
}

/// Tab-separated dump: paragraph, i, j, gold, predicted, then the full
/// distribution at 9 significant digits.
pub fn render_predictions(records: &[PairRecord], labels: &LabelSet) -> String {
    let mut out = String::new();
    for r in records {
        let (i, j) = r.prediction.pair;
        write!(
            out,
            "{}\t{i}\t{j}\t{}\t{}",
            r.paragraph,
            labels.name(r.gold),
            labels.name(r.prediction.label)
        )
        .unwrap();
        for v in &r.prediction.distribution {
            write!(out, "\t{v:.8e}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Scores `model` on the gold pairs of `corpus` in `mode`.
pub fn evaluate(model: &Model, corpus: &[AnnotatedParagraph], mode: PassMode) -> Result<(EvalReport, Vec<PairRecord>)> {
    let l = model.labels.len();
    let na = model.labels.na_id();
    let mut records = Vec::new();
    let mut elapsed = 0.0;
    for (idx, p) in corpus.iter().enumerate() {
        let pairs = enumerate_pairs(p, PairMode::GoldOnly);
        let gold = model.gold_ids(p, &pairs)?;
        let start = Instant::now();
        let preds = predict_in_mode(model, p, &pairs, mode)?;
        elapsed += start.elapsed().as_secs_f64();
        for (prediction, g) in preds.into_iter().zip(gold) {
            records.push(PairRecord {
                paragraph: idx,
                gold: g,
                prediction,
            });
        }
    }
    let mut per_domain: BTreeMap<String, Vec<Vec<usize>>> = BTreeMap::new();
    let mut overall = vec![vec![0; l]; l];
    for r in &records {
        let c = per_domain
            .entry(corpus[r.paragraph].domain.clone())
            .or_insert_with(|| vec![vec![0; l]; l]);
        c[r.gold][r.prediction.label] += 1;
        overall[r.gold][r.prediction.label] += 1;
    }
    let report = EvalReport {
        mode,
        labels: model.labels.names(),
        overall: Scores::from_confusion(overall, na),
        domains: per_domain
            .into_iter()
            .map(|(d, c)| (d, Scores::from_confusion(c, na)))
            .collect(),
        relations_per_second: if elapsed > 0.0 { records.len() as f64 / elapsed } else { 0.0 },
    };
    Ok((report, records))
}
