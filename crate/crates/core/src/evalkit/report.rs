use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{id_metrics, video_map, GtTrack, IdCounts, PredictedTrack};
use crate::error::Result;

/// One evaluated sequence.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub scenario: String,
    pub predictions: Vec<PredictedTrack>,
    pub ground_truth: Vec<GtTrack>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    /// Averaged over thresholds; null without ground truth of this class.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub sequences: usize,
    pub map: f64,
    pub association_accuracy: f64,
    pub id_switches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub thresholds: Vec<f64>,
    pub map_per_threshold: Vec<f64>,
    pub map: f64,
    pub association_accuracy: f64,
    pub id_switches: usize,
    pub per_class: Vec<ClassAp>,
    pub scenarios: Vec<ScenarioReport>,
    /// Configuration and seed of the producing run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

fn summarize(items: &[&EvalItem], num_classes: usize, thresholds: &[f64]) -> (super::MapResult, IdCounts) {
    let pairs: Vec<(&[PredictedTrack], &[GtTrack])> =
        items.iter().map(|i| (i.predictions.as_slice(), i.ground_truth.as_slice())).collect();
    let map = video_map(&pairs, num_classes, thresholds);
    let per_seq: Vec<IdCounts> = items.par_iter().map(|i| id_metrics(&i.predictions, &i.ground_truth)).collect();
    let mut ids = IdCounts::default();
    for c in per_seq {
        ids.add(c);
    }
    (map, ids)
}

/// Metrics over all items plus a breakdown by scenario name (sorted).
pub fn evaluate(items: &[EvalItem], num_classes: usize, thresholds: &[f64]) -> EvalReport {
    let all: Vec<&EvalItem> = items.iter().collect();
    let (map, ids) = summarize(&all, num_classes, thresholds);
    let mut groups: BTreeMap<&str, Vec<&EvalItem>> = BTreeMap::new();
    for item in items {
        groups.entry(item.scenario.as_str()).or_default().push(item);
    }
    let scenarios = groups
        .into_iter()
        .map(|(name, group)| {
            let (m, i) = summarize(&group, num_classes, thresholds);
            ScenarioReport {
                scenario: name.to_string(),
                sequences: group.len(),
                map: m.mean,
                association_accuracy: i.association_accuracy(),
                id_switches: i.id_switches,
            }
        })
        .collect();
    EvalReport {
        sequences: items.len(),
        thresholds: map.thresholds,
        map_per_threshold: map.per_threshold,
        map: map.mean,
        association_accuracy: ids.association_accuracy(),
        id_switches: ids.id_switches,
        per_class: map
            .per_class
            .iter()
            .enumerate()
            .map(|(class, &ap)| ClassAp { class, ap })
            .collect(),
        scenarios,
        meta: None,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("sequences".into(), self.sequences.to_string()),
            ("mAP".into(), format!("{:.4}", self.map)),
        ];
        for (t, m) in self.thresholds.iter().zip(&self.map_per_threshold) {
            rows.push((format!("mAP@{t:.2}"), format!("{m:.4}")));
        }
        rows.push(("association accuracy".into(), format!("{:.4}", self.association_accuracy)));
        rows.push(("id switches".into(), self.id_switches.to_string()));
        for c in &self.per_class {
            let v = c.ap.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            rows.push((format!("AP class {}", c.class), v));
        }
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in &rows {
            let _ = writeln!(out, "{k:<w$}  {v:>8}");
        }
        if !self.scenarios.is_empty() {
            let sw = self.scenarios.iter().map(|s| s.scenario.len()).max().unwrap_or(0).max(8);
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<sw$}  {:>9}  {:>8}  {:>8}  {:>8}", "scenario", "sequences", "mAP", "assoc", "switches");
            for s in &self.scenarios {
                let _ = writeln!(
                    out,
                    "{:<sw$}  {:>9}  {:>8.4}  {:>8.4}  {:>8}",
                    s.scenario, s.sequences, s.map, s.association_accuracy, s.id_switches
                );
            }
        }
        out
    }
}
