//! Information sequences and their network encodings.

use serde::{Deserialize, Serialize};

use crate::envs::GroundTruth;
use crate::error::{dim_err, Result};

/// Designs and observations gathered so far, stored flat in stage order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    n_d: usize,
    n_y: usize,
    designs: Vec<f64>,
    observations: Vec<f64>,
}

impl History {
    pub fn new(n_d: usize, n_y: usize) -> Self {
        Self { n_d, n_y, designs: Vec::new(), observations: Vec::new() }
    }

    pub fn push(&mut self, d: &[f64], y: &[f64]) -> Result<()> {
        if d.len() != self.n_d || y.len() != self.n_y {
            return Err(dim_err(format!(
                "stage expects {} design and {} observation entries, got {} and {}",
                self.n_d,
                self.n_y,
                d.len(),
                y.len()
            )));
        }
        self.designs.extend_from_slice(d);
        self.observations.extend_from_slice(y);
        Ok(())
    }

    pub fn len(&self) -> usize {
        if self.n_d > 0 {
            self.designs.len() / self.n_d
        } else {
            self.observations.len() / self.n_y.max(1)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_d(&self) -> usize {
        self.n_d
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn design(&self, k: usize) -> &[f64] {
        &self.designs[k * self.n_d..(k + 1) * self.n_d]
    }

    pub fn observation(&self, k: usize) -> &[f64] {
        &self.observations[k * self.n_y..(k + 1) * self.n_y]
    }

    /// The first `k` stages.
    pub fn prefix(&self, k: usize) -> History {
        History {
            n_d: self.n_d,
            n_y: self.n_y,
            designs: self.designs[..k * self.n_d].to_vec(),
            observations: self.observations[..k * self.n_y].to_vec(),
        }
    }
}

/// Elementwise transform applied to raw observations before scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsTransform {
    Identity,
    Ln,
    Ln1p,
}

/// Maps raw designs and observations to the values networks see.
///
/// Designs become `(d - center) / half_width`; observations become
/// `(T(y) - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub design_center: Vec<f64>,
    pub design_half_width: Vec<f64>,
    pub obs_transform: ObsTransform,
    pub obs_shift: Vec<f64>,
    pub obs_scale: Vec<f64>,
}

impl FeatureMap {
    /// Raw values, no transformation.
    pub fn identity(n_d: usize, n_y: usize) -> Self {
        Self {
            design_center: vec![0.0; n_d],
            design_half_width: vec![1.0; n_d],
            obs_transform: ObsTransform::Identity,
            obs_shift: vec![0.0; n_y],
            obs_scale: vec![1.0; n_y],
        }
    }

    /// Designs scaled from a box to `[-1, 1]`.
    pub fn for_box(lower: &[f64], upper: &[f64], obs: ObsTransform, shift: Vec<f64>, scale: Vec<f64>) -> Self {
        Self {
            design_center: lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect(),
            design_half_width: lower.iter().zip(upper).map(|(l, u)| 0.5 * (u - l)).collect(),
            obs_transform: obs,
            obs_shift: shift,
            obs_scale: scale,
        }
    }

    pub fn design(&self, d: &[f64], out: &mut [f64]) {
        for i in 0..d.len() {
            out[i] = (d[i] - self.design_center[i]) / self.design_half_width[i];
        }
    }

    pub fn observation(&self, y: &[f64], out: &mut [f64]) {
        for i in 0..y.len() {
            let t = match self.obs_transform {
                ObsTransform::Identity => y[i],
                ObsTransform::Ln => y[i].ln(),
                ObsTransform::Ln1p => y[i].ln_1p(),
            };
            out[i] = (t - self.obs_shift[i]) / self.obs_scale[i];
        }
    }
}

/// Interleaved encoding `d_0, y_0, ..., d_{k-1}, y_{k-1}` of the first `k` stages.
pub fn encode_history(history: &History, k: usize, fm: &FeatureMap) -> Result<Vec<f64>> {
    let mut out = vec![0.0; k * (history.n_d + history.n_y)];
    write_encoding(history, k, fm, &mut out)?;
    Ok(out)
}

pub fn write_encoding(history: &History, k: usize, fm: &FeatureMap, out: &mut [f64]) -> Result<()> {
    let step = history.n_d + history.n_y;
    if k > history.len() {
        return Err(dim_err(format!("history has {} stages, {k} requested", history.len())));
    }
    if out.len() != k * step {
        return Err(dim_err(format!("encoding buffer of {} for {} entries", out.len(), k * step)));
    }
    for s in 0..k {
        let chunk = &mut out[s * step..(s + 1) * step];
        let (dpart, ypart) = chunk.split_at_mut(history.n_d);
        fm.design(history.design(s), dpart);
        fm.observation(history.observation(s), ypart);
    }
    Ok(())
}

/// Inverse of [`encode_history`] under the identity feature map.
pub fn decode_history(enc: &[f64], n_d: usize, n_y: usize) -> Result<History> {
    let step = n_d + n_y;
    if step == 0 || enc.len() % step != 0 {
        return Err(dim_err(format!("encoding length {} is not a multiple of {step}", enc.len())));
    }
    let mut h = History::new(n_d, n_y);
    for chunk in enc.chunks(step) {
        h.push(&chunk[..n_d], &chunk[n_d..])?;
    }
    Ok(h)
}

/// Width of the actor input for horizon `n`.
pub fn actor_input_dim(n: usize, n_d: usize, n_y: usize) -> usize {
    n + n.saturating_sub(1) * (n_d + n_y)
}

/// Actor input: stage one-hot, then all padded designs, then all padded observations.
pub fn write_actor_input(history: &History, k: usize, horizon: usize, fm: &FeatureMap, out: &mut [f64]) -> Result<()> {
    let (n_d, n_y) = (history.n_d, history.n_y);
    if out.len() != actor_input_dim(horizon, n_d, n_y) {
        return Err(dim_err(format!("actor input buffer of {}", out.len())));
    }
    if k >= horizon || k > history.len() {
        return Err(dim_err(format!("stage {k} outside horizon {horizon}")));
    }
    out.fill(0.0);
    out[k] = 1.0;
    let pad = horizon - 1;
    let d_off = horizon;
    let y_off = horizon + pad * n_d;
    for s in 0..k {
        fm.design(history.design(s), &mut out[d_off + s * n_d..d_off + (s + 1) * n_d]);
        fm.observation(history.observation(s), &mut out[y_off + s * n_y..y_off + (s + 1) * n_y]);
    }
    Ok(())
}

pub fn actor_input(history: &History, k: usize, horizon: usize, fm: &FeatureMap) -> Result<Vec<f64>> {
    let mut out = vec![0.0; actor_input_dim(horizon, history.n_d, history.n_y)];
    write_actor_input(history, k, horizon, fm, &mut out)?;
    Ok(out)
}

/// One rollout: the generating truth, the full history and any non-IG rewards per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub truth: GroundTruth,
    pub history: History,
    pub non_ig: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_history() -> History {
        let mut h = History::new(2, 1);
        h.push(&[1.0, 2.0], &[10.0]).unwrap();
        h.push(&[3.0, 4.0], &[20.0]).unwrap();
        h
    }

    #[test]
    fn encoding_lengths() {
        let h = sample_history();
        let fm = FeatureMap::identity(2, 1);
        assert!(encode_history(&h, 0, &fm).unwrap().is_empty());
        assert_eq!(encode_history(&h, 2, &fm).unwrap(), vec![1.0, 2.0, 10.0, 3.0, 4.0, 20.0]);
        assert!(encode_history(&h, 3, &fm).is_err());
        assert!(h.clone().push(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn actor_layout_is_designs_then_observations() {
        let h = sample_history();
        let fm = FeatureMap::identity(2, 1);
        let x = actor_input(&h, 2, 4, &fm).unwrap();
        assert_eq!(x.len(), 4 + 3 * 3);
        assert_eq!(
            x,
            vec![0.0, 0.0, 1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 10.0, 20.0, 0.0]
        );
        let x0 = actor_input(&h, 0, 4, &fm).unwrap();
        assert_eq!(x0.iter().sum::<f64>(), 1.0);
        assert!(actor_input(&h, 4, 4, &fm).is_err());
    }

    #[test]
    fn feature_map_scales_box_to_unit() {
        let fm = FeatureMap::for_box(&[-4.0], &[4.0], ObsTransform::Ln, vec![0.0], vec![2.0]);
        let mut out = [0.0];
        fm.design(&[4.0], &mut out);
        assert_eq!(out[0], 1.0);
        fm.observation(&[std::f64::consts::E], &mut out);
        assert!((out[0] - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn encoding_round_trips(vals in prop::collection::vec(-10.0f64..10.0, 0..8), n_d in 1usize..3, n_y in 1usize..3) {
            let step = n_d + n_y;
            let k = vals.len() / step;
            let enc = &vals[..k * step];
            let h = decode_history(enc, n_d, n_y).unwrap();
            prop_assert_eq!(h.len(), k);
            let again = encode_history(&h, k, &FeatureMap::identity(n_d, n_y)).unwrap();
            prop_assert_eq!(again.as_slice(), enc);
        }

        #[test]
        fn actor_input_has_single_hot_and_padding(n in 1usize..6, k_frac in 0.0f64..1.0) {
            let k = ((n as f64) * k_frac) as usize % n;
            let mut h = History::new(1, 1);
            for s in 0..k {
                h.push(&[s as f64 + 1.0], &[-(s as f64) - 1.0]).unwrap();
            }
            let x = actor_input(&h, k, n, &FeatureMap::identity(1, 1)).unwrap();
            prop_assert_eq!(x.len(), actor_input_dim(n, 1, 1));
            prop_assert_eq!(x[..n].iter().filter(|v| **v == 1.0).count(), 1);
            prop_assert_eq!(x[k], 1.0);
            for s in k..n.saturating_sub(1) {
                prop_assert_eq!(x[n + s], 0.0);
                prop_assert_eq!(x[n + (n - 1) + s], 0.0);
            }
        }
    }
}
