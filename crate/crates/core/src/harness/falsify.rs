//! The per-cluster falsification loop: an optimizer proposes genomes, each
//! genome decodes to a perturbation chain, and the chain's mean IoU
//! deterioration over the cluster is fed back as the objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::model::SegmentationModel;
use super::scorer::Scorer;
use crate::error::{Error, Result};
use crate::genome::{apply_chain, decode, Chain, Genome, GenomeLayout, DEFAULT_CHAIN_LEN};
use crate::imgcore::ThresholdSet;
use crate::optimize::{optimize, random_search, DEConfig, OptResult};
use crate::perturb::{ParamBounds, PerturbationKind, Registry};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    DifferentialEvolution,
    RandomSearch,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::DifferentialEvolution => "differential_evolution",
            OptimizerKind::RandomSearch => "random_search",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalsifyConfig {
    /// Optimizer settings; `de.rng_seed` drives the search.
    pub de: DEConfig,
    pub k_chain: usize,
    /// Seed for the stochastic perturbations.
    pub seed: u64,
    /// Evaluate the objective on a fixed random subset of this many images.
    pub subsample: Option<usize>,
    pub optimizer: OptimizerKind,
    pub taus: ThresholdSet,
}

impl Default for FalsifyConfig {
    fn default() -> Self {
        Self {
            de: DEConfig::default(),
            k_chain: DEFAULT_CHAIN_LEN,
            seed: 0,
            subsample: None,
            optimizer: OptimizerKind::default(),
            taus: ThresholdSet::default(),
        }
    }
}

/// Picks `n` of `samples` with a seeded draw, keeping their original order.
pub fn subsample(samples: Vec<&Sample>, n: Option<usize>, seed: u64) -> Vec<&Sample> {
    match n {
        Some(n) if n < samples.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, samples.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| samples[i]).collect()
        }
        _ => samples,
    }
}

/// Genome → deterioration over one cluster.
pub struct ClusterObjective<'a> {
    scorer: Scorer<'a>,
    registry: &'a Registry,
    bounds: &'a ParamBounds,
    layout: GenomeLayout,
    k: usize,
    seed: u64,
}

impl<'a> ClusterObjective<'a> {
    pub fn new(
        samples: Vec<&'a Sample>,
        model: &'a dyn SegmentationModel,
        registry: &'a Registry,
        bounds: &'a ParamBounds,
        cfg: &FalsifyConfig,
    ) -> Result<Self> {
        bounds.validate(registry)?;
        if cfg.k_chain == 0 || cfg.k_chain > registry.enabled_count() {
            return Err(Error::invalid(format!(
                "chain length {} not in 1..={} enabled perturbations",
                cfg.k_chain,
                registry.enabled_count()
            )));
        }
        let samples = subsample(samples, cfg.subsample, cfg.seed);
        Ok(Self {
            scorer: Scorer::new(samples, model, cfg.taus.clone(), cfg.seed)?,
            registry,
            bounds,
            layout: GenomeLayout::new(registry),
            k: cfg.k_chain,
            seed: cfg.seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn scorer(&self) -> &Scorer<'a> {
        &self.scorer
    }

    pub fn chain(&self, v: &[f64]) -> Result<Chain> {
        let g = Genome::from_vector(&self.layout, v, self.seed)?;
        decode(&g, self.registry, self.bounds, self.k)
    }

    pub fn evaluate(&self, v: &[f64]) -> Result<f64> {
        self.evaluate_chain(&self.chain(v)?)
    }

    pub fn evaluate_chain(&self, chain: &Chain) -> Result<f64> {
        self.scorer
            .deterioration(|s, seed| apply_chain(chain, self.registry, &s.image, &s.mask, seed))
    }

    /// Recomputes the baseline IoUs instead of using the cached ones.
    pub fn evaluate_uncached(&self, v: &[f64]) -> Result<f64> {
        let chain = self.chain(v)?;
        self.scorer.deterioration_uncached(|s, seed| {
            apply_chain(&chain, self.registry, &s.image, &s.mask, seed)
        })
    }

    pub fn run(&self, cfg: &FalsifyConfig) -> Result<OptResult> {
        let f = |v: &[f64]| self.evaluate(v);
        match cfg.optimizer {
            OptimizerKind::DifferentialEvolution => optimize(f, self.dim(), &cfg.de),
            OptimizerKind::RandomSearch => {
                random_search(f, self.dim(), cfg.de.budget, cfg.de.rng_seed)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ClusterStatus {
    Ok,
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub cluster_id: usize,
    pub size: usize,
    /// Images the objective was evaluated on (smaller than `size` when
    /// subsampling).
    pub evaluated_images: usize,
    pub disabled: Vec<PerturbationKind>,
    pub mean_baseline_iou: Option<f64>,
    pub best_deterioration: Option<f64>,
    pub best_chain: Option<Chain>,
    pub evaluations: usize,
    pub trace: String,
    #[serde(flatten)]
    pub status: ClusterStatus,
}

/// A cluster's report entry plus the optimizer result, which is partial
/// when the run aborted.
pub struct ClusterOutcome {
    pub entry: ClusterEntry,
    pub result: Option<OptResult>,
}

pub fn trace_path(cluster_id: usize) -> String {
    format!("traces/cluster_{cluster_id}.csv")
}

/// Runs the optimizer on one cluster. Errors do not propagate: they are
/// recorded in the entry's status, with whatever trace exists so far.
pub fn falsify_cluster(
    cluster_id: usize,
    samples: Vec<&Sample>,
    model: &dyn SegmentationModel,
    registry: &Registry,
    bounds: &ParamBounds,
    cfg: &FalsifyConfig,
) -> ClusterOutcome {
    let mut entry = ClusterEntry {
        cluster_id,
        size: samples.len(),
        evaluated_images: 0,
        disabled: registry.disabled().collect(),
        mean_baseline_iou: None,
        best_deterioration: None,
        best_chain: None,
        evaluations: 0,
        trace: trace_path(cluster_id),
        status: ClusterStatus::Ok,
    };
    let objective = match ClusterObjective::new(samples, model, registry, bounds, cfg) {
        Ok(o) => o,
        Err(e) => {
            entry.status = ClusterStatus::Failed {
                error: e.to_string(),
            };
            return ClusterOutcome {
                entry,
                result: None,
            };
        }
    };
    entry.evaluated_images = objective.scorer().samples().len();
    entry.mean_baseline_iou = Some(objective.scorer().mean_baseline());

    let result = match objective.run(cfg) {
        Ok(r) => r,
        Err(Error::Aborted {
            source, partial, ..
        }) => {
            entry.status = ClusterStatus::Failed {
                error: source.to_string(),
            };
            *partial
        }
        Err(e) => {
            entry.status = ClusterStatus::Failed {
                error: e.to_string(),
            };
            return ClusterOutcome {
                entry,
                result: None,
            };
        }
    };
    entry.evaluations = result.evaluation_count;
    if result.evaluation_count > 0 {
        entry.best_deterioration = Some(result.best_value);
        match objective.chain(&result.best_genome) {
            Ok(chain) => entry.best_chain = Some(chain),
            Err(e) => {
                entry.status = ClusterStatus::Failed {
                    error: e.to_string(),
                }
            }
        }
    }
    ClusterOutcome {
        entry,
        result: Some(result),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::model::{FnModel, ReferenceModel};
    use crate::harness::synthetic::{generate, SyntheticConfig};
    use crate::imgcore::ProbMap;
    use crate::perturb::ParamBound;

    fn small_cfg(budget: usize) -> FalsifyConfig {
        FalsifyConfig {
            de: DEConfig {
                population_size: 8,
                budget,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn neutral_bounds(reg: &Registry) -> ParamBounds {
        let mut b = ParamBounds::default();
        for spec in reg.specs() {
            for p in spec.params() {
                let n = p.neutral;
                b.insert(
                    spec.name(),
                    &p.name,
                    ParamBound {
                        neutral: n,
                        calibrated_min: n,
                        calibrated_max: n,
                    },
                );
            }
        }
        b
    }

    #[test]
    fn identity_only_bounds_give_zero() {
        let ds = generate(&SyntheticConfig::default(), 4, 1).unwrap();
        let reg = Registry::builtin();
        let bounds = neutral_bounds(&reg);
        let out = falsify_cluster(
            0,
            ds.samples.iter().collect(),
            &ReferenceModel::default(),
            &reg,
            &bounds,
            &small_cfg(24),
        );
        assert_eq!(out.entry.status, ClusterStatus::Ok);
        assert_eq!(out.entry.best_deterioration, Some(0.0));
        assert_eq!(out.entry.evaluations, 24);
        assert_eq!(out.entry.best_chain.unwrap().len(), 6);
    }

    #[test]
    fn cache_reevaluation_and_disabled_set_agree() {
        let ds = generate(&SyntheticConfig::default(), 5, 2).unwrap();
        let reg = Registry::builtin()
            .with_disabled([PerturbationKind::Brightness, PerturbationKind::Fog]);
        let bounds = ParamBounds::hard(&reg);
        let model = ReferenceModel::default();
        let cfg = small_cfg(40);
        let out = falsify_cluster(3, ds.samples.iter().collect(), &model, &reg, &bounds, &cfg);
        let chain = out.entry.best_chain.clone().unwrap();
        assert!(chain.position_of(PerturbationKind::Brightness).is_none());
        assert!(chain.position_of(PerturbationKind::Fog).is_none());

        let obj = ClusterObjective::new(ds.samples.iter().collect(), &model, &reg, &bounds, &cfg)
            .unwrap();
        let best = out.result.unwrap().best_genome;
        let cached = obj.evaluate(&best).unwrap();
        assert_eq!(
            cached.to_bits(),
            obj.evaluate_uncached(&best).unwrap().to_bits()
        );
        assert_eq!(Some(cached), out.entry.best_deterioration);
        assert_eq!(
            obj.evaluate_chain(&chain).unwrap().to_bits(),
            cached.to_bits()
        );
    }

    #[test]
    fn model_failure_keeps_partial_trace() {
        let ds = generate(&SyntheticConfig::default(), 3, 2).unwrap();
        let reg = Registry::builtin();
        let bounds = ParamBounds::hard(&reg);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let flaky = FnModel(|img: &crate::imgcore::Image| {
            // baselines plus the first generation succeed
            if calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) >= 3 + 8 * 3 {
                return Err(Error::Model {
                    message: "gone".into(),
                    diagnostics: String::new(),
                });
            }
            Ok(ProbMap::filled(img.width(), img.height(), 0.5))
        });
        let cfg = FalsifyConfig {
            de: DEConfig {
                population_size: 8,
                budget: 40,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = falsify_cluster(0, ds.samples.iter().collect(), &flaky, &reg, &bounds, &cfg);
        assert!(
            matches!(out.entry.status, ClusterStatus::Failed { ref error } if error.contains("gone"))
        );
        let partial = out.result.unwrap();
        assert_eq!(partial.evaluation_count, 8);
        assert_eq!(out.entry.evaluations, 8);
    }

    #[test]
    fn subsample_is_fixed_and_ordered() {
        let ds = generate(&SyntheticConfig::default(), 10, 2).unwrap();
        let all: Vec<_> = ds.samples.iter().collect();
        let a = subsample(all.clone(), Some(4), 7);
        assert_eq!(a.len(), 4);
        assert_eq!(a, subsample(all.clone(), Some(4), 7));
        let pos: Vec<_> = a
            .iter()
            .map(|s| all.iter().position(|t| t.id == s.id).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample(all.clone(), Some(40), 7).len(), 10);
    }

    #[test]
    fn too_long_chain_is_a_recorded_failure() {
        let ds = generate(&SyntheticConfig::default(), 2, 2).unwrap();
        let reg = Registry::builtin();
        let cfg = FalsifyConfig {
            k_chain: 13,
            ..small_cfg(16)
        };
        let out = falsify_cluster(
            0,
            ds.samples.iter().collect(),
            &ReferenceModel::default(),
            &reg,
            &ParamBounds::hard(&reg),
            &cfg,
        );
        assert!(matches!(out.entry.status, ClusterStatus::Failed { .. }));
        assert!(out.result.is_none());
    }
}
