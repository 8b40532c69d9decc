//! Sequence masking: anchor slices pull in their preceding neighbours and
//! every slice in a chain is patch-masked at a randomly chosen patch size.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub phi1: f64,
    pub phi2: f64,
    pub sequence_length: usize,
    pub patch_sizes: Vec<usize>,
}

impl MaskConfig {
    /// Pre-training constants at full scale.
    pub fn full_scale() -> Self {
        MaskConfig {
            phi1: 0.1,
            phi2: 0.7,
            sequence_length: 5,
            patch_sizes: vec![1, 2, 4, 8, 16, 32, 96],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("phi1", self.phi1), ("phi2", self.phi2)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::arg(format!("{name} = {p} is not a probability")));
            }
        }
        if self.sequence_length == 0 {
            return Err(Error::arg("sequence length M must be at least 1"));
        }
        if self.patch_sizes.is_empty() {
            return Err(Error::arg("patch size set is empty"));
        }
        if self.patch_sizes.contains(&0) {
            return Err(Error::arg("patch size 0"));
        }
        Ok(())
    }
}

/// One masking pass over one slice. A slice reached by several chains owns
/// several of these; the masked region is their union.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceMask {
    pub slice: usize,
    pub patch: usize,
    /// Row-major over the `ceil(H/P) × ceil(W/P)` patch grid.
    pub bitmap: Vec<bool>,
}

impl SliceMask {
    pub fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.patch), w.div_ceil(self.patch))
    }

    pub fn popcount(&self) -> usize {
        self.bitmap.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// `(S, H, W)`
    pub shape: [usize; 3],
    pub sequence_length: usize,
    pub anchors: Vec<usize>,
    pub masks: Vec<SliceMask>,
}

impl MaskPlan {
    pub fn empty(shape: [usize; 3], sequence_length: usize) -> Self {
        MaskPlan {
            shape,
            sequence_length,
            anchors: Vec::new(),
            masks: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Distinct slices covered by some chain, ascending.
    pub fn masked_slices(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.masks.iter().map(|m| m.slice).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Union of every pass over slice `z`, row-major `H × W`.
    pub fn voxel_mask(&self, z: usize) -> Vec<bool> {
        let [_, h, w] = self.shape;
        let mut out = vec![false; h * w];
        for m in self.masks.iter().filter(|m| m.slice == z) {
            let (_, gw) = m.grid(h, w);
            for y in 0..h {
                for x in 0..w {
                    if m.bitmap[(y / m.patch) * gw + x / m.patch] {
                        out[y * w + x] = true;
                    }
                }
            }
        }
        out
    }
}

pub fn build_mask_plan(shape: [usize; 3], cfg: &MaskConfig, rng: &mut Rng) -> Result<MaskPlan> {
    cfg.validate()?;
    let [s, h, w] = shape;
    let mut plan = MaskPlan::empty(shape, cfg.sequence_length);
    for z in 0..s {
        if rng.random_bool(cfg.phi1) {
            plan.anchors.push(z);
        }
    }
    for &a in &plan.anchors {
        let first = (a + 1).saturating_sub(cfg.sequence_length);
        for z in (first..=a).rev() {
            let patch = cfg.patch_sizes[rng.random_range(0..cfg.patch_sizes.len())];
            let n = h.div_ceil(patch) * w.div_ceil(patch);
            let bitmap = (0..n).map(|_| rng.random_bool(cfg.phi2)).collect();
            plan.masks.push(SliceMask { slice: z, patch, bitmap });
        }
    }
    Ok(plan)
}

/// Zero the masked voxels of every batch item and channel.
pub fn apply_mask<T: Real>(volume: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
    let [b, c, s, h, w] = volume.shape();
    if [s, h, w] != plan.shape {
        return Err(Error::shape(format!(
            "mask plan for {:?} applied to volume {:?}",
            plan.shape,
            volume.shape()
        )));
    }
    let mut out = volume.clone();
    let plane = h * w;
    for z in plan.masked_slices() {
        let m = plan.voxel_mask(z);
        for bc in 0..b * c {
            let base = (bc * s + z) * plane;
            let d = &mut out.data_mut()[base..base + plane];
            for (v, &masked) in d.iter_mut().zip(&m) {
                if masked {
                    *v = T::zero();
                }
            }
        }
    }
    Ok(out)
}
