use std::collections::BTreeMap;

use super::dataset::SyntheticDataset;
use crate::error::{Error, Result};
use crate::metrics::kinetic_features;
use crate::motion::{MotionSeq, Skeleton};

/// Joint text/motion embedding space for R-precision and MM-Dist.
pub trait RetrievalEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_motion(&self, motion: &MotionSeq) -> Result<Vec<f64>>;
}

/// Motions embed as their kinetic features; a text embeds as the mean
/// kinetic features of the ground-truth clips carrying it.
#[derive(Clone, Debug, PartialEq)]
pub struct KineticPrototypeEmbedder {
    pub prototypes: BTreeMap<String, Vec<f64>>,
    pub skeleton: Skeleton,
}

impl KineticPrototypeEmbedder {
    pub fn fit(ds: &SyntheticDataset, skeleton: &Skeleton) -> Result<Self> {
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for it in &ds.items {
            let f = kinetic_features(&it.motion, skeleton)?;
            let e = sums.entry(it.text.clone()).or_insert_with(|| (vec![0.0; f.len()], 0));
            e.0.iter_mut().zip(&f).for_each(|(s, x)| *s += x);
            e.1 += 1;
        }
        let prototypes = sums
            .into_iter()
            .map(|(k, (s, n))| (k, s.into_iter().map(|x| x / n as f64).collect()))
            .collect();
        Ok(KineticPrototypeEmbedder {
            prototypes,
            skeleton: skeleton.clone(),
        })
    }
}

impl RetrievalEmbedder for KineticPrototypeEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.prototypes
            .get(text)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no prototype for text {text:?}")))
    }

    fn embed_motion(&self, motion: &MotionSeq) -> Result<Vec<f64>> {
        kinetic_features(motion, &self.skeleton)
    }
}
