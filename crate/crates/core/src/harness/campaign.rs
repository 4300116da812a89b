//! One falsification run per cluster, with per-cluster disabled
//! perturbations, collected into a [`FalsifyReport`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Sample};
use super::falsify::{falsify_cluster, FalsifyConfig};
use super::io::write_file;
use super::model::SegmentationModel;
use super::report::FalsifyReport;
use crate::error::{Error, Result};
use crate::genome::mix64;
use crate::optimize::OptResult;
use crate::perturb::{ParamBounds, PerturbationKind, Registry};

/// `name` disables a perturbation everywhere, `name@3,7` only in clusters 3
/// and 7.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DisableRule {
    pub perturbation: PerturbationKind,
    pub clusters: Option<Vec<usize>>,
}

impl DisableRule {
    pub fn applies_to(&self, cluster_id: usize) -> bool {
        self.clusters
            .as_ref()
            .is_none_or(|c| c.contains(&cluster_id))
    }
}

impl FromStr for DisableRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, clusters) = match s.split_once('@') {
            None => (s, None),
            Some((name, ids)) => {
                let ids = ids
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::invalid(format!("bad cluster id `{t}` in `{s}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (name, Some(ids))
            }
        };
        Ok(Self {
            perturbation: name.trim().parse()?,
            clusters,
        })
    }
}

impl fmt::Display for DisableRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.perturbation)?;
        if let Some(ids) = &self.clusters {
            let ids: Vec<String> = ids.iter().map(ToString::to_string).collect();
            write!(f, "@{}", ids.join(","))?;
        }
        Ok(())
    }
}

impl TryFrom<String> for DisableRule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DisableRule> for String {
    fn from(r: DisableRule) -> String {
        r.to_string()
    }
}

/// Groups dataset samples by cluster id, in ascending id order, keeping
/// dataset order within a cluster. Every image needs exactly one
/// assignment and every assignment must name a dataset image.
pub fn group_by_cluster<'a>(
    dataset: &'a Dataset,
    assignments: &[(String, usize)],
) -> Result<BTreeMap<usize, Vec<&'a Sample>>> {
    let mut by_id = HashMap::with_capacity(assignments.len());
    for (id, c) in assignments {
        if dataset.get(id).is_none() {
            return Err(Error::invalid(format!(
                "assignment for unknown image `{id}`"
            )));
        }
        if by_id.insert(id.as_str(), *c).is_some() {
            return Err(Error::invalid(format!("image `{id}` assigned twice")));
        }
    }
    let mut groups: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in &dataset.samples {
        let c = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::invalid(format!("image `{}` has no cluster assignment", s.id)))?;
        groups.entry(*c).or_default().push(s);
    }
    Ok(groups)
}

/// Optimizer seed for one cluster, so clusters do not share a search.
pub fn cluster_seed(run_seed: u64, cluster_id: usize) -> u64 {
    mix64(run_seed ^ mix64(cluster_id as u64))
}

pub struct Campaign {
    pub report: FalsifyReport,
    /// Optimizer result per report row; `None` when the cluster failed
    /// before any evaluation.
    pub results: Vec<Option<OptResult>>,
}

impl Campaign {
    /// Writes the report files and one trace CSV per cluster.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        self.report.write_dir(dir)?;
        let traces = dir.join("traces");
        std::fs::create_dir_all(&traces)
            .map_err(|e| Error::io(format!("creating {}", traces.display()), e))?;
        for (entry, result) in self.report.clusters.iter().zip(&self.results) {
            if let Some(r) = result {
                let mut buf = Vec::new();
                r.write_trace_csv(&mut buf)?;
                write_file(&dir.join(&entry.trace), buf)?;
            }
        }
        Ok(())
    }
}

pub fn run_campaign(
    dataset: &Dataset,
    model: &dyn SegmentationModel,
    registry: &Registry,
    bounds: &ParamBounds,
    assignments: &[(String, usize)],
    cfg: &FalsifyConfig,
    disable: &[DisableRule],
) -> Result<Campaign> {
    bounds.validate(registry)?;
    let groups = group_by_cluster(dataset, assignments)?;
    let mut entries = Vec::with_capacity(groups.len());
    let mut results = Vec::with_capacity(groups.len());
    for (cluster_id, samples) in groups {
        let reg = registry.with_disabled(
            disable
                .iter()
                .filter(|r| r.applies_to(cluster_id))
                .map(|r| r.perturbation),
        );
        let mut ccfg = cfg.clone();
        ccfg.de.rng_seed = cluster_seed(cfg.de.rng_seed, cluster_id);
        log::info!("cluster {cluster_id}: {} images", samples.len());
        let out = falsify_cluster(cluster_id, samples, model, &reg, bounds, &ccfg);
        match (&out.entry.status, out.entry.best_deterioration) {
            (super::ClusterStatus::Failed { error }, _) => {
                log::warn!("cluster {cluster_id} failed: {error}")
            }
            (_, Some(d)) => log::info!("cluster {cluster_id}: best deterioration {d:.4}"),
            _ => {}
        }
        entries.push(out.entry);
        results.push(out.result);
    }
    let report = FalsifyReport::new(
        cfg.clone(),
        disable.iter().map(ToString::to_string).collect(),
        entries,
    );
    Ok(Campaign { report, results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::model::{FnModel, ReferenceModel};
    use crate::harness::synthetic::{generate, SyntheticConfig};
    use crate::harness::ClusterStatus;
    use crate::imgcore::{Image, ProbMap};
    use crate::optimize::DEConfig;

    #[test]
    fn disable_rules_parse_and_print() {
        let r: DisableRule = "brightness@10,12".parse().unwrap();
        assert_eq!(r.perturbation, PerturbationKind::Brightness);
        assert_eq!(r.clusters, Some(vec![10, 12]));
        assert!(r.applies_to(12) && !r.applies_to(11));
        assert_eq!(r.to_string(), "brightness@10,12");
        let all: DisableRule = "fog".parse().unwrap();
        assert!(all.applies_to(99));
        assert!("fog@x".parse::<DisableRule>().is_err());
        assert!("smoke".parse::<DisableRule>().is_err());
        let json = serde_json::to_string(&vec![r.clone(), all]).unwrap();
        assert_eq!(json, r#"["brightness@10,12","fog"]"#);
    }

    fn cfg(budget: usize) -> FalsifyConfig {
        FalsifyConfig {
            de: DEConfig {
                population_size: 6,
                budget,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn assignments_must_match_the_dataset() {
        let ds = generate(&SyntheticConfig::default(), 3, 1).unwrap();
        let mut a: Vec<_> = ds.ids().map(|id| (id.to_owned(), 0)).collect();
        assert_eq!(group_by_cluster(&ds, &a).unwrap().len(), 1);
        a.pop();
        assert!(group_by_cluster(&ds, &a).is_err());
        a.push(("nope".into(), 1));
        assert!(group_by_cluster(&ds, &a).is_err());
    }

    #[test]
    fn per_cluster_disabling_and_failure_isolation() {
        let ds = generate(&SyntheticConfig::default(), 6, 4).unwrap();
        let reg = Registry::builtin();
        let bounds = ParamBounds::hard(&reg);
        let a: Vec<_> = ds
            .ids()
            .enumerate()
            .map(|(i, id)| (id.to_owned(), [4, 9, 12][i % 3]))
            .collect();
        let rules = vec!["brightness@9".parse().unwrap(), "fog".parse().unwrap()];
        // cluster 12 images are made unreadable to the model
        let bad: Vec<Image> = ds
            .samples
            .iter()
            .skip(2)
            .step_by(3)
            .map(|s| s.image.clone())
            .collect();
        let model = FnModel(|img: &Image| {
            if bad.iter().any(|b| b == img) {
                return Err(Error::Model {
                    message: "cannot read".into(),
                    diagnostics: String::new(),
                });
            }
            ReferenceModel::default().predict(img)
        });
        let c = run_campaign(&ds, &model, &reg, &bounds, &a, &cfg(12), &rules).unwrap();
        let r = &c.report;
        assert_eq!(
            r.clusters.iter().map(|e| e.cluster_id).collect::<Vec<_>>(),
            vec![4, 9, 12]
        );
        assert_eq!(
            r.clusters[1].disabled,
            vec![PerturbationKind::Brightness, PerturbationKind::Fog]
        );
        assert_eq!(r.clusters[0].disabled, vec![PerturbationKind::Fog]);
        for e in &r.clusters[..2] {
            assert_eq!(e.status, ClusterStatus::Ok);
            let chain = e.best_chain.as_ref().unwrap();
            for k in &e.disabled {
                assert!(chain.position_of(*k).is_none());
                assert_eq!(r.usage.get(*k, e.cluster_id), None);
            }
        }
        assert!(
            matches!(r.clusters[2].status, ClusterStatus::Failed { ref error } if error.contains("cannot read"))
        );
        assert!(c.results[2].is_none());

        let dir = tempfile::tempdir().unwrap();
        c.write_dir(dir.path()).unwrap();
        for f in [
            "report.json",
            "report.md",
            "usage.csv",
            "traces/cluster_4.csv",
            "traces/cluster_9.csv",
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        assert_eq!(FalsifyReport::read_dir(dir.path()).unwrap(), c.report);
    }

    #[test]
    fn single_cluster_gives_one_row_and_is_reproducible() {
        let ds = generate(&SyntheticConfig::default(), 4, 5).unwrap();
        let reg = Registry::builtin();
        let bounds = ParamBounds::hard(&reg);
        let a: Vec<_> = ds.ids().map(|id| (id.to_owned(), 0)).collect();
        let model = FnModel(|img: &Image| Ok(ProbMap::filled(img.width(), img.height(), 0.7)));
        let run = || run_campaign(&ds, &model, &reg, &bounds, &a, &cfg(12), &[]).unwrap();
        let (x, y) = (run(), run());
        assert_eq!(x.report.clusters.len(), 1);
        assert_eq!(x.report.to_json().unwrap(), y.report.to_json().unwrap());
    }
}
