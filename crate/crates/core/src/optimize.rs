//! Gradient-free maximisation over the unit box.
//!
//! [`optimize`] is differential evolution with `rand/1` mutation and
//! two-point crossover; [`random_search`] is the uniform-sampling baseline
//! it is compared against. Both count every objective call against the
//! budget and keep a per-evaluation trace.
//!
//! A generation's children are built from the population as it stood at the
//! start of the generation, evaluated (possibly in parallel), and then
//! selected in target order, so a run is a pure function of the config.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DEConfig {
    pub population_size: usize,
    /// Differential weight `F`.
    pub differential_weight: f64,
    /// Maximum number of objective evaluations.
    pub budget: usize,
    pub rng_seed: u64,
}

impl Default for DEConfig {
    fn default() -> Self {
        Self {
            population_size: 30,
            differential_weight: 0.5,
            budget: 5000,
            rng_seed: 0,
        }
    }
}

impl DEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 4 {
            return Err(Error::invalid("population_size must be at least 4"));
        }
        if !(self.differential_weight > 0.0 && self.differential_weight <= 2.0) {
            return Err(Error::invalid("differential weight must be in (0, 2]"));
        }
        if self.budget < self.population_size {
            return Err(Error::invalid(format!(
                "budget {} is smaller than the population {}",
                self.budget, self.population_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub evaluation: usize,
    pub value: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub best_genome: Vec<f64>,
    pub best_value: f64,
    pub evaluation_count: usize,
    pub history: Vec<TracePoint>,
}

impl OptResult {
    fn empty() -> Self {
        Self {
            best_genome: Vec::new(),
            best_value: f64::NEG_INFINITY,
            evaluation_count: 0,
            history: Vec::new(),
        }
    }

    fn record(&mut self, x: &[f64], value: f64) {
        if value > self.best_value {
            self.best_value = value;
            self.best_genome = x.to_vec();
        }
        self.history.push(TracePoint {
            evaluation: self.evaluation_count,
            value,
            best_so_far: self.best_value,
        });
        self.evaluation_count += 1;
    }

    /// Writes the trace as CSV: `evaluation,value,best_so_far`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["evaluation", "value", "best_so_far"])?;
        for p in &self.history {
            w.serialize((p.evaluation, p.value, p.best_so_far))?;
        }
        w.flush().map_err(|e| Error::io("writing trace", e))?;
        Ok(())
    }
}

/// Evaluates `batch` (in parallel) and records the values in order. On the
/// first failure the evaluations before it are kept and the run aborts.
fn evaluate_batch<F>(objective: &F, batch: &[Vec<f64>], acc: &mut OptResult) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let values: Vec<Result<f64>> = batch.par_iter().map(|x| objective(x)).collect();
    let mut out = Vec::with_capacity(batch.len());
    for (x, v) in batch.iter().zip(values) {
        let failure = match v {
            Ok(v) if v.is_finite() => {
                acc.record(x, v);
                out.push(v);
                continue;
            }
            Ok(v) => Error::NonFinite {
                value: v,
                genome: x.clone(),
            },
            Err(e) => e,
        };
        return Err(Error::Aborted {
            evaluations: acc.evaluation_count,
            source: Box::new(failure),
            partial: Box::new(std::mem::replace(acc, OptResult::empty())),
        });
    }
    Ok(out)
}

fn uniform_point(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random::<f64>()).collect()
}

/// Maximises `objective` over `[0, 1]^dim` with differential evolution.
pub fn optimize<F>(objective: F, dim: usize, cfg: &DEConfig) -> Result<OptResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if dim == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    cfg.validate()?;
    let np = cfg.population_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut acc = OptResult::empty();

    let mut population: Vec<Vec<f64>> = (0..np).map(|_| uniform_point(&mut rng, dim)).collect();
    let mut fitness = evaluate_batch(&objective, &population, &mut acc)?;

    while acc.evaluation_count < cfg.budget {
        let remaining = cfg.budget - acc.evaluation_count;
        let targets = np.min(remaining);
        let children: Vec<Vec<f64>> = (0..targets)
            .map(|i| {
                let [a, b, c] = pick_three(&mut rng, np, i);
                let donor: Vec<f64> = (0..dim)
                    .map(|d| {
                        let v = population[a][d]
                            + cfg.differential_weight * (population[b][d] - population[c][d]);
                        v.clamp(0.0, 1.0)
                    })
                    .collect();
                two_point_crossover(&mut rng, &population[i], &donor)
            })
            .collect();
        let values = evaluate_batch(&objective, &children, &mut acc)?;
        for (i, (child, v)) in children.into_iter().zip(values).enumerate() {
            if v >= fitness[i] {
                population[i] = child;
                fitness[i] = v;
            }
        }
    }
    Ok(acc)
}

/// Three distinct indices in `0..n`, all different from `exclude`.
fn pick_three(rng: &mut impl Rng, n: usize, exclude: usize) -> [usize; 3] {
    let mut picked = [usize::MAX; 3];
    for slot in 0..3 {
        loop {
            let r = rng.random_range(0..n);
            if r != exclude && !picked[..slot].contains(&r) {
                picked[slot] = r;
                break;
            }
        }
    }
    picked
}

/// The child copies the donor on `[lo, hi)` and the target elsewhere. Cut
/// points are drawn from `0..=dim`; if they coincide, coordinate `lo mod dim`
/// alone is taken from the donor.
fn two_point_crossover(rng: &mut impl Rng, target: &[f64], donor: &[f64]) -> Vec<f64> {
    let dim = target.len();
    let (p, q) = (rng.random_range(0..=dim), rng.random_range(0..=dim));
    let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
    let mut child = target.to_vec();
    if lo == hi {
        let j = lo % dim;
        child[j] = donor[j];
    } else {
        child[lo..hi].copy_from_slice(&donor[lo..hi]);
    }
    child
}

/// Uniform random sampling of the box with the same accounting as
/// [`optimize`].
pub fn random_search<F>(objective: F, dim: usize, budget: usize, rng_seed: u64) -> Result<OptResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if dim == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if budget == 0 {
        return Err(Error::invalid("budget must be at least 1"));
    }
    const BATCH: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut acc = OptResult::empty();
    while acc.evaluation_count < budget {
        let n = BATCH.min(budget - acc.evaluation_count);
        let batch: Vec<Vec<f64>> = (0..n).map(|_| uniform_point(&mut rng, dim)).collect();
        evaluate_batch(&objective, &batch, &mut acc)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn sphere(center: f64) -> impl Fn(&[f64]) -> Result<f64> + Sync {
        move |x| Ok(-x.iter().map(|v| (v - center).powi(2)).sum::<f64>())
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn sphere_converges() {
        let runs: Vec<f64> = (0..5)
            .map(|s| {
                let cfg = DEConfig {
                    budget: 2000,
                    rng_seed: s,
                    ..DEConfig::default()
                };
                optimize(sphere(0.3), 8, &cfg).unwrap().best_value
            })
            .collect();
        assert!(median(runs.clone()) >= -1e-3, "{runs:?}");
    }

    #[test]
    fn constant_objective_uses_whole_budget() {
        let cfg = DEConfig {
            budget: 457,
            ..DEConfig::default()
        };
        let calls = AtomicUsize::new(0);
        let r = optimize(
            |_| {
                calls.fetch_add(1, Ordering::Relaxed);
                Ok(2.5)
            },
            5,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.best_value, 2.5);
        assert_eq!(r.evaluation_count, 457);
        assert_eq!(calls.load(Ordering::Relaxed), 457);
    }

    #[test]
    fn budget_equal_to_population_is_initial_sample() {
        let cfg = DEConfig {
            population_size: 10,
            budget: 10,
            rng_seed: 3,
            ..DEConfig::default()
        };
        let seen = Mutex::new(Vec::new());
        let r = optimize(
            |x| {
                let v = x[0] - x[1];
                seen.lock().unwrap().push(v);
                Ok(v)
            },
            2,
            &cfg,
        )
        .unwrap();
        let max = seen
            .into_inner()
            .unwrap()
            .into_iter()
            .fold(f64::MIN, f64::max);
        assert_eq!(r.best_value, max);
        assert_eq!(r.evaluation_count, 10);
    }

    #[test]
    fn non_finite_value_aborts_with_genome_and_partial_trace() {
        let cfg = DEConfig {
            budget: 100,
            ..DEConfig::default()
        };
        let calls = AtomicUsize::new(0);
        let err = optimize(
            |x| {
                let n = calls.fetch_add(1, Ordering::SeqCst);
                Ok(if n == 40 { f64::NAN } else { x[0] })
            },
            3,
            &cfg,
        )
        .unwrap_err();
        match err {
            Error::Aborted {
                source, partial, ..
            } => {
                assert!(
                    matches!(*source, Error::NonFinite { ref genome, .. } if genome.len() == 3)
                );
                assert!(partial.evaluation_count < 100);
                assert_eq!(partial.history.len(), partial.evaluation_count);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let ok = DEConfig::default();
        ok.validate().unwrap();
        for bad in [
            DEConfig {
                population_size: 3,
                ..ok.clone()
            },
            DEConfig {
                differential_weight: 0.0,
                ..ok.clone()
            },
            DEConfig {
                differential_weight: 2.5,
                ..ok.clone()
            },
            DEConfig {
                budget: 10,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(optimize(sphere(0.5), 0, &ok).is_err());
    }

    #[test]
    fn random_search_examples() {
        let r = random_search(|_| Ok(-1.25), 4, 300, 1).unwrap();
        assert_eq!(r.best_value, -1.25);
        assert_eq!(r.evaluation_count, 300);

        let single = random_search(sphere(0.5), 3, 1, 9).unwrap();
        assert_eq!(single.evaluation_count, 1);
        assert_eq!(single.best_value, single.history[0].value);
    }

    #[test]
    fn de_beats_random_on_sphere() {
        let (mut de, mut rs) = (Vec::new(), Vec::new());
        for s in 0..5 {
            let cfg = DEConfig {
                budget: 2000,
                rng_seed: s,
                ..DEConfig::default()
            };
            de.push(optimize(sphere(0.7), 8, &cfg).unwrap().best_value);
            rs.push(random_search(sphere(0.7), 8, 2000, s).unwrap().best_value);
        }
        assert!(median(de) > median(rs));
    }

    #[test]
    fn trace_csv_has_one_row_per_evaluation() {
        let r = random_search(sphere(0.1), 2, 5, 0).unwrap();
        let mut buf = Vec::new();
        r.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("evaluation,value,best_so_far\n"));
    }

    #[test]
    fn crossover_copies_one_contiguous_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let target = vec![0.0; 9];
        let donor = vec![1.0; 9];
        for _ in 0..500 {
            let child = two_point_crossover(&mut rng, &target, &donor);
            let from_donor: Vec<usize> = (0..9).filter(|&i| child[i] == 1.0).collect();
            assert!(!from_donor.is_empty());
            assert!(from_donor.windows(2).all(|w| w[1] == w[0] + 1));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn trace_monotone_in_box_and_reproducible(
            seed in any::<u64>(),
            budget in 30usize..400,
            dim in 1usize..7,
        ) {
            let cfg = DEConfig { budget, rng_seed: seed, ..DEConfig::default() };
            let inside = std::sync::atomic::AtomicBool::new(true);
            let f = |x: &[f64]| {
                if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    inside.store(false, Ordering::Relaxed);
                }
                Ok((x[0] * 9.0).sin() + x.iter().sum::<f64>())
            };
            let a = optimize(f, dim, &cfg).unwrap();
            let b = optimize(f, dim, &cfg).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(inside.load(Ordering::Relaxed));
            prop_assert_eq!(a.evaluation_count, budget);
            prop_assert!(a.history.windows(2).all(|w| w[1].best_so_far >= w[0].best_so_far));
            let max = a.history.iter().map(|p| p.value).fold(f64::MIN, f64::max);
            prop_assert_eq!(a.best_value, max);
        }
    }
}
