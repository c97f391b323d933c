//! Threshold-free OOD metrics and closed-set accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored test sample. `predicted` is always a training class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredEntry {
    pub score: f64,
    pub is_ood: bool,
    /// Class index for ID samples; ignored for OOD.
    pub true_label: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredTestSet {
    pub entries: Vec<ScoredEntry>,
}

impl ScoredTestSet {
    pub fn new(entries: Vec<ScoredEntry>) -> Self {
        ScoredTestSet { entries }
    }

    /// Convenience constructor from raw ID and OOD scores (labels all zero).
    pub fn from_scores(id: &[f64], ood: &[f64]) -> Self {
        let entry = |score, is_ood| ScoredEntry {
            score,
            is_ood,
            true_label: 0,
            predicted: 0,
        };
        ScoredTestSet {
            entries: id
                .iter()
                .map(|&s| entry(s, false))
                .chain(ood.iter().map(|&s| entry(s, true)))
                .collect(),
        }
    }

    pub fn n_id(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_ood).count()
    }

    pub fn n_ood(&self) -> usize {
        self.entries.iter().filter(|e| e.is_ood).count()
    }

    fn check_both(&self) -> Result<(usize, usize)> {
        let (n_id, n_ood) = (self.n_id(), self.n_ood());
        if n_id == 0 || n_ood == 0 {
            return Err(Error::UndefinedMetric(format!(
                "need ID and OOD entries, got {n_id} ID and {n_ood} OOD"
            )));
        }
        if let Some(e) = self.entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::Numeric(format!("non-finite OOD score {}", e.score)));
        }
        Ok((n_id, n_ood))
    }

    /// Entries sorted by descending score.
    fn descending(&self) -> Vec<ScoredEntry> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        v
    }
}

/// `P(s_ood > s_id) + ½·P(s_ood = s_id)`, computed with midranks.
pub fn auroc(set: &ScoredTestSet) -> Result<f64> {
    let (n_id, n_ood) = set.check_both()?;
    let mut sorted = set.entries.clone();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        // ranks i+1..=j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum += midrank * sorted[i..j].iter().filter(|e| e.is_ood).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_ood * (n_ood + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// Average precision with OOD as the positive class; tied scores form one threshold.
pub fn aupr(set: &ScoredTestSet) -> Result<f64> {
    let (_, n_ood) = set.check_both()?;
    let sorted = set.descending();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut new_tp = 0;
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            if sorted[j].is_ood {
                new_tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += new_tp;
        if new_tp > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += new_tp as f64 / n_ood as f64 * precision;
        }
        i = j;
    }
    Ok(ap)
}

/// Fraction of ID entries classified correctly; OOD entries are ignored.
pub fn id_accuracy(set: &ScoredTestSet) -> Result<f64> {
    let id: Vec<&ScoredEntry> = set.entries.iter().filter(|e| !e.is_ood).collect();
    if id.is_empty() {
        return Err(Error::UndefinedMetric("no ID entries for accuracy".into()));
    }
    Ok(id.iter().filter(|e| e.predicted == e.true_label).count() as f64 / id.len() as f64)
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    /// OOD digits joined by `-`, e.g. `7-8-9`.
    pub ood_classes: String,
    pub detector: String,
    pub auroc: f64,
    pub aupr: f64,
    pub id_accuracy: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

pub const METRICS_HEADER: &str =
    "run_id,seed,ood_classes,detector,auroc,aupr,id_accuracy,n_id,n_ood";

impl MetricsRow {
    pub fn compute(
        run_id: &str,
        seed: u64,
        ood_classes: &[u8],
        detector: &str,
        set: &ScoredTestSet,
    ) -> Result<Self> {
        Ok(MetricsRow {
            run_id: run_id.to_string(),
            seed,
            ood_classes: ood_classes_label(ood_classes),
            detector: detector.to_string(),
            auroc: auroc(set)?,
            aupr: aupr(set)?,
            id_accuracy: id_accuracy(set)?,
            n_id: set.n_id(),
            n_ood: set.n_ood(),
        })
    }
}

pub fn ood_classes_label(classes: &[u8]) -> String {
    classes
        .iter()
        .map(u8::to_string)
        .collect::<Vec<_>>()
        .join("-")
}

pub fn write_metrics_csv<W: std::io::Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(METRICS_HEADER.split(','))?;
    for row in rows {
        out.serialize(row)?;
    }
    out.flush().map_err(|e| Error::io("writing metrics csv", e))
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::Format(format!(
            "unexpected metrics header '{}'",
            header.join(",")
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len();
        if n == 0 {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std, n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auroc: MeanStd,
    pub aupr: MeanStd,
    pub id_accuracy: MeanStd,
}

pub fn aggregate(rows: &[MetricsRow]) -> Result<Aggregate> {
    if rows.is_empty() {
        return Err(Error::Contract("cannot aggregate zero rows".into()));
    }
    let col = |f: fn(&MetricsRow) -> f64| MeanStd::of(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(Aggregate {
        auroc: col(|r| r.auroc),
        aupr: col(|r| r.aupr),
        id_accuracy: col(|r| r.id_accuracy),
    })
}
