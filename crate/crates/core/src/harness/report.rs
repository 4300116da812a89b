use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::falsify::{ClusterEntry, ClusterStatus, FalsifyConfig};
use super::io::write_file;
use crate::error::{Error, Result};
use crate::perturb::PerturbationKind;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const USAGE_CSV: &str = "usage.csv";

/// Position (1-based) of each perturbation in each cluster's best chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageMatrix {
    pub cluster_ids: Vec<usize>,
    pub rows: IndexMap<PerturbationKind, Vec<Option<usize>>>,
}

impl UsageMatrix {
    pub fn from_entries(entries: &[ClusterEntry]) -> Self {
        let rows = PerturbationKind::ALL
            .into_iter()
            .map(|kind| {
                let cells = entries
                    .iter()
                    .map(|e| {
                        e.best_chain
                            .as_ref()
                            .and_then(|c| c.position_of(kind))
                            .map(|p| p + 1)
                    })
                    .collect();
                (kind, cells)
            })
            .collect();
        Self {
            cluster_ids: entries.iter().map(|e| e.cluster_id).collect(),
            rows,
        }
    }

    pub fn get(&self, kind: PerturbationKind, cluster_id: usize) -> Option<usize> {
        let col = self.cluster_ids.iter().position(|&c| c == cluster_id)?;
        self.rows.get(&kind)?[col]
    }

    /// `perturbation,cluster_<id>,...`; absent cells are empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["perturbation".to_owned()];
        header.extend(self.cluster_ids.iter().map(|c| format!("cluster_{c}")));
        w.write_record(&header)?;
        for (kind, cells) in &self.rows {
            let mut rec = vec![kind.to_string()];
            rec.extend(
                cells
                    .iter()
                    .map(|c| c.map_or(String::new(), |p| p.to_string())),
            );
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalsifyReport {
    pub config: FalsifyConfig,
    /// `perturbation@clusters` rules in effect.
    pub disable: Vec<String>,
    pub clusters: Vec<ClusterEntry>,
    pub usage: UsageMatrix,
}

impl FalsifyReport {
    pub fn new(config: FalsifyConfig, disable: Vec<String>, clusters: Vec<ClusterEntry>) -> Self {
        let usage = UsageMatrix::from_entries(&clusters);
        Self {
            config,
            disable,
            clusters,
            usage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.clusters {
            for v in [e.mean_baseline_iou, e.best_deterioration]
                .into_iter()
                .flatten()
            {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!(
                        "cluster {}: value {v} outside [-1, 1]",
                        e.cluster_id
                    )));
                }
            }
        }
        if self.usage.rows.len() != PerturbationKind::ALL.len() {
            return Err(Error::invalid("usage matrix must list every perturbation"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(REPORT_JSON);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    /// Writes report.json, report.md and usage.csv into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        write_file(&dir.join(REPORT_JSON), self.to_json()?)?;
        write_file(&dir.join(REPORT_MD), self.to_markdown())?;
        write_file(&dir.join(USAGE_CSV), self.usage.to_csv()?)
    }

    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.4}"));
        let mut s = String::from("# Falsification report\n\n");
        let _ = writeln!(
            s,
            "optimizer `{}`, budget {}, chain length {}, seed {}{}\n",
            self.config.optimizer,
            self.config.de.budget,
            self.config.k_chain,
            self.config.seed,
            self.config
                .subsample
                .map_or(String::new(), |n| format!(", subsample {n}")),
        );
        if !self.disable.is_empty() {
            let _ = writeln!(s, "disabled: {}\n", self.disable.join(", "));
        }
        s.push_str("## Deterioration per cluster\n\n");
        s.push_str("| cluster | images | evaluated | baseline IoU | best deterioration | best chain | status |\n");
        s.push_str("|---:|---:|---:|---:|---:|---|---|\n");
        for e in &self.clusters {
            let chain = e
                .best_chain
                .as_ref()
                .map_or("-".to_owned(), |c| c.names().join(" → "));
            let status = match &e.status {
                ClusterStatus::Ok => "ok".to_owned(),
                ClusterStatus::Failed { error } => {
                    format!("failed: {}", error.replace('|', "\\|").replace('\n', " "))
                }
            };
            let starred = if e.disabled.is_empty() { "" } else { "*" };
            let _ = writeln!(
                s,
                "| {}{starred} | {} | {} | {} | {} | {chain} | {status} |",
                e.cluster_id,
                e.size,
                e.evaluated_images,
                fmt(e.mean_baseline_iou),
                fmt(e.best_deterioration),
            );
        }
        if self.clusters.iter().any(|e| !e.disabled.is_empty()) {
            s.push_str("\n\\* some perturbations disabled for this cluster\n");
        }
        s.push_str("\n## Perturbation usage (position in chain)\n\n| perturbation |");
        for c in &self.usage.cluster_ids {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(self.usage.cluster_ids.len()));
        s.push('\n');
        for (kind, cells) in &self.usage.rows {
            let _ = write!(s, "| {kind} |");
            for c in cells {
                let _ = write!(s, " {} |", c.map_or(".".to_owned(), |p| p.to_string()));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{Chain, ChainLink};

    fn entry(id: usize, chain: &[PerturbationKind], status: ClusterStatus) -> ClusterEntry {
        ClusterEntry {
            cluster_id: id,
            size: 4,
            evaluated_images: 4,
            disabled: vec![],
            mean_baseline_iou: Some(0.8),
            best_deterioration: Some(0.3),
            best_chain: Some(Chain(
                chain
                    .iter()
                    .map(|&name| ChainLink {
                        name,
                        params: vec![0.0],
                    })
                    .collect(),
            )),
            evaluations: 10,
            trace: format!("traces/cluster_{id}.csv"),
            status,
        }
    }

    #[test]
    fn usage_positions_are_one_based_and_cover_all_perturbations() {
        use PerturbationKind::*;
        let r = FalsifyReport::new(
            FalsifyConfig::default(),
            vec![],
            vec![
                entry(2, &[GaussianBlur, Fog], ClusterStatus::Ok),
                entry(
                    5,
                    &[Snow, GaussianBlur],
                    ClusterStatus::Failed {
                        error: "boom".into(),
                    },
                ),
            ],
        );
        r.validate().unwrap();
        assert_eq!(r.usage.rows.len(), 12);
        assert_eq!(r.usage.get(GaussianBlur, 2), Some(1));
        assert_eq!(r.usage.get(GaussianBlur, 5), Some(2));
        assert_eq!(r.usage.get(Fog, 5), None);
        let csv = r.usage.to_csv().unwrap();
        assert!(
            csv.starts_with("perturbation,cluster_2,cluster_5\ngaussian_blur,1,2\n"),
            "{csv}"
        );
        assert!(csv.contains("\nfog,2,\n"));
        let md = r.to_markdown();
        assert!(md.contains("gaussian_blur → fog"));
        assert!(md.contains("failed: boom"));
        assert_eq!(FalsifyReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let mut e = entry(0, &[], ClusterStatus::Ok);
        e.best_deterioration = Some(1.5);
        let r = FalsifyReport::new(FalsifyConfig::default(), vec![], vec![e]);
        assert!(r.validate().is_err());
        assert!(FalsifyReport::from_json(&r.to_json().unwrap()).is_err());
    }
}
