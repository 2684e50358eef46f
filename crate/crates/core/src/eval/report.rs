//! Aggregated evaluation results and their text rendering.

use serde::{Deserialize, Serialize};

use super::kmeans::ClusterRun;
use super::probe::{ProbeKind, ProbeRun};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub train_frac: f64,
    pub stratified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub probe: ProbeKind,
    pub split: SplitDescriptor,
    pub runs: Vec<ProbeRun>,
    pub mean_macro_f1: f64,
    pub mean_micro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub k: usize,
    pub runs: Vec<ClusterRun>,
    pub mean_nmi: f64,
    pub mean_ari: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub num_samples: usize,
    pub repeats: usize,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub classification: Option<ClassificationSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clustering: Option<ClusteringSummary>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn classification(method: &str, num_samples: usize, probe: ProbeKind, train_frac: f64, runs: Vec<ProbeRun>) -> Self {
        let seeds = runs.iter().map(|r| r.seed).collect();
        Self {
            method: method.to_string(),
            num_samples,
            repeats: runs.len(),
            seeds,
            classification: Some(ClassificationSummary {
                probe,
                split: SplitDescriptor {
                    train_frac,
                    stratified: true,
                },
                mean_macro_f1: mean(runs.iter().map(|r| r.macro_f1)),
                mean_micro_f1: mean(runs.iter().map(|r| r.micro_f1)),
                runs,
            }),
            clustering: None,
        }
    }

    pub fn clustering(method: &str, num_samples: usize, k: usize, runs: Vec<ClusterRun>) -> Self {
        let seeds = runs.iter().map(|r| r.seed).collect();
        Self {
            method: method.to_string(),
            num_samples,
            repeats: runs.len(),
            seeds,
            classification: None,
            clustering: Some(ClusteringSummary {
                k,
                mean_nmi: mean(runs.iter().map(|r| r.nmi)),
                mean_ari: mean(runs.iter().map(|r| r.ari)),
                runs,
            }),
        }
    }

    /// `method & Macro-F1 & Micro-F1` or `method & NMI & ARI`, in percent.
    pub fn table_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        if let Some(c) = &self.classification {
            rows.push(format!(
                "{} & {:.2} & {:.2}",
                self.method,
                100.0 * c.mean_macro_f1,
                100.0 * c.mean_micro_f1
            ));
        }
        if let Some(c) = &self.clustering {
            rows.push(format!("{} & {:.2} & {:.2}", self.method, 100.0 * c.mean_nmi, 100.0 * c.mean_ari));
        }
        rows
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        if self.classification.is_some() {
            out.push_str("method & Macro-F1 & Micro-F1\n");
            out.push_str(&self.table_rows()[0]);
            out.push('\n');
        }
        if self.clustering.is_some() {
            out.push_str("method & NMI & ARI\n");
            out.push_str(self.table_rows().last().unwrap());
            out.push('\n');
        }
        out
    }
}
