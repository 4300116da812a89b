use rayon::prelude::*;

use super::dataset::Sample;
use super::model::SegmentationModel;
use crate::error::{Error, Result};
use crate::imgcore::{deterioration, iou, Image, Mask, ThresholdSet};

/// Mean IoU deterioration of a model over a fixed set of samples, with the
/// unperturbed IoUs computed once up front.
pub struct Scorer<'a> {
    samples: Vec<&'a Sample>,
    model: &'a dyn SegmentationModel,
    taus: ThresholdSet,
    seed: u64,
    baselines: Vec<f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(
        samples: Vec<&'a Sample>,
        model: &'a dyn SegmentationModel,
        taus: ThresholdSet,
        seed: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no samples to score"));
        }
        let baselines = baseline_ious(&samples, model, &taus)?;
        Ok(Self {
            samples,
            model,
            taus,
            seed,
            baselines,
        })
    }

    pub fn samples(&self) -> &[&'a Sample] {
        &self.samples
    }

    pub fn baselines(&self) -> &[f64] {
        &self.baselines
    }

    pub fn mean_baseline(&self) -> f64 {
        self.baselines.iter().sum::<f64>() / self.baselines.len() as f64
    }

    /// Perturbed IoUs, in sample order. `perturb` receives each sample and
    /// its perturbation seed and returns the perturbed image and label.
    pub fn perturbed_ious<F>(&self, perturb: F) -> Result<Vec<f64>>
    where
        F: Fn(&Sample, u64) -> Result<(Image, Mask)> + Sync,
    {
        self.samples
            .par_iter()
            .map(|s| {
                let (img, mask) = perturb(s, s.perturbation_seed(self.seed))?;
                let pred = self.model.predict(&img)?;
                iou(&pred, &mask, &self.taus)
            })
            .collect()
    }

    pub fn deterioration<F>(&self, perturb: F) -> Result<f64>
    where
        F: Fn(&Sample, u64) -> Result<(Image, Mask)> + Sync,
    {
        let perturbed = self.perturbed_ious(perturb)?;
        deterioration(&self.baselines, &perturbed)
    }

    /// Same as [`Scorer::deterioration`] but recomputes the baselines.
    pub fn deterioration_uncached<F>(&self, perturb: F) -> Result<f64>
    where
        F: Fn(&Sample, u64) -> Result<(Image, Mask)> + Sync,
    {
        let baselines = baseline_ious(&self.samples, self.model, &self.taus)?;
        let perturbed = self.perturbed_ious(perturb)?;
        deterioration(&baselines, &perturbed)
    }
}

fn baseline_ious(
    samples: &[&Sample],
    model: &dyn SegmentationModel,
    taus: &ThresholdSet,
) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| iou(&model.predict(&s.image)?, &s.mask, taus))
        .collect()
}
