use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::history::Episode;

/// First-in first-out store of complete episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), episodes: VecDeque::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn push(&mut self, ep: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
    }

    pub fn extend(&mut self, eps: impl IntoIterator<Item = Episode>) {
        for e in eps {
            self.push(e);
        }
    }

    pub fn get(&self, i: usize) -> &Episode {
        &self.episodes[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Up to `n` distinct episodes chosen uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Episode> {
        let k = n.min(self.len());
        sample(rng, self.len(), k).into_iter().map(|i| &self.episodes[i]).collect()
    }
}

/// Gaussian design perturbation with a geometrically decaying scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exploration {
    /// Initial standard deviation per design dimension.
    pub scale: Vec<f64>,
    pub decay: f64,
}

impl Exploration {
    pub fn scale_at(&self, iteration: usize) -> Vec<f64> {
        let f = self.decay.powi(iteration as i32);
        self.scale.iter().map(|s| s * f).collect()
    }

    /// Add noise and clip back into the box componentwise.
    pub fn perturb<R: Rng + ?Sized>(&self, d: &mut [f64], iteration: usize, lower: &[f64], upper: &[f64], rng: &mut R) {
        let f = self.decay.powi(iteration as i32);
        for j in 0..d.len() {
            let e: f64 = rng.sample(StandardNormal);
            d[j] = (d[j] + self.scale[j] * f * e).clamp(lower[j], upper[j]);
        }
    }
}
