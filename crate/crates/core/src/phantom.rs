//! Synthetic labelled volumes: ellipsoids, elongated tubes and blobs with
//! protruding corners over a noisy background, in Hounsfield-like units.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::scale_intensity;
use crate::rng::Rng;
use crate::tensor::{LabelVolume, Tensor};

pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape3 {
    Ellipsoid { radii: [f64; 3] },
    /// Capsule around the segment `center ± half_axis`.
    Tube { half_axis: [f64; 3], radius: f64 },
    /// Sphere with cube corners poking out of it.
    Blob { radius: f64, corner: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomObject {
    pub shape: Shape3,
    /// Voxel coordinates `(z, y, x)`.
    pub center: [f64; 3],
    pub class_id: u32,
    pub intensity: f64,
}

impl PhantomObject {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match &self.shape {
            Shape3::Ellipsoid { radii } => (0..3).map(|i| (d[i] / radii[i]).powi(2)).sum::<f64>() <= 1.0,
            Shape3::Tube { half_axis, radius } => {
                let aa: f64 = half_axis.iter().map(|a| a * a).sum();
                let t = if aa > 0.0 {
                    ((0..3).map(|i| d[i] * half_axis[i]).sum::<f64>() / aa).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
                (0..3).map(|i| (d[i] - t * half_axis[i]).powi(2)).sum::<f64>() <= radius * radius
            }
            Shape3::Blob { radius, corner } => {
                d.iter().map(|v| v * v).sum::<f64>() <= radius * radius || d.iter().all(|v| v.abs() <= *corner)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(S, H, W)`
    pub extent: [usize; 3],
    pub background: f64,
    pub noise_sigma: f64,
    pub objects: Vec<PhantomObject>,
    pub num_classes: usize,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for o in &self.objects {
            if o.class_id == 0 || o.class_id as usize >= self.num_classes {
                return Err(Error::arg(format!("class id {} outside [1, {})", o.class_id, self.num_classes)));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::arg("negative noise level"));
        }
        Ok(())
    }

    /// Raw HU volume and labels; later objects paint over earlier ones.
    pub fn render(&self, rng: &mut Rng) -> Result<(Tensor<f32>, LabelVolume)> {
        self.validate()?;
        let [s, h, w] = self.extent;
        let noise = Normal::new(0.0, self.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
        let mut img = Vec::with_capacity(s * h * w);
        let mut lab = Vec::with_capacity(s * h * w);
        for z in 0..s {
            for y in 0..h {
                for x in 0..w {
                    let p = [z as f64, y as f64, x as f64];
                    let (mut v, mut c) = (self.background, 0);
                    for o in &self.objects {
                        if o.contains(p) {
                            v = o.intensity;
                            c = o.class_id;
                        }
                    }
                    let n = if self.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                    img.push((v + n) as f32);
                    lab.push(c);
                }
            }
        }
        Ok((Tensor::from_vec([1, 1, s, h, w], img)?, LabelVolume::new([1, s, h, w], lab)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub extent: [usize; 3],
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub background: f64,
    /// HU window mapped onto `[0, 1]`.
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            extent: [32, 32, 32],
            num_classes: 3,
            noise_sigma: 20.0,
            background: -200.0,
            a_min: HU_MIN,
            a_max: HU_MAX,
        }
    }
}

/// Base intensity per shape family; classes cycle through the families.
const FAMILY_HU: [f64; 3] = [250.0, 550.0, 400.0];

/// One object per foreground class at a random pose.
pub fn random_spec(cfg: &PhantomConfig, rng: &mut Rng) -> PhantomSpec {
    let ext = cfg.extent.map(|e| e as f64);
    let m = ext.iter().copied().fold(f64::INFINITY, f64::min);
    let mut objects = Vec::new();
    for class_id in 1..cfg.num_classes as u32 {
        let fam = (class_id as usize - 1) % 3;
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let center = [u(0.3, 0.7) * ext[0], u(0.3, 0.7) * ext[1], u(0.3, 0.7) * ext[2]];
        let shape = match fam {
            0 => Shape3::Ellipsoid {
                radii: [u(0.12, 0.25) * m, u(0.12, 0.25) * m, u(0.12, 0.25) * m],
            },
            1 => {
                let dir = [u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0)];
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
                let len = u(0.2, 0.35) * m;
                Shape3::Tube {
                    half_axis: dir.map(|v| v / norm * len),
                    radius: u(0.06, 0.1) * m,
                }
            }
            _ => {
                let radius = u(0.1, 0.18) * m;
                Shape3::Blob {
                    radius,
                    corner: radius * u(0.75, 0.9),
                }
            }
        };
        let intensity = FAMILY_HU[fam] + u(-40.0, 40.0);
        objects.push(PhantomObject {
            shape,
            center,
            class_id,
            intensity,
        });
    }
    PhantomSpec {
        extent: cfg.extent,
        background: cfg.background,
        noise_sigma: cfg.noise_sigma,
        objects,
        num_classes: cfg.num_classes,
    }
}

/// A rendered phantom scaled to `[0, 1]`, redrawn until every object keeps at
/// least one voxel of its class.
pub fn generate(cfg: &PhantomConfig, rng: &mut Rng) -> Result<(Tensor<f32>, LabelVolume, PhantomSpec)> {
    for _ in 0..64 {
        let spec = random_spec(cfg, rng);
        let (img, lab) = spec.render(rng)?;
        let visible = spec.objects.iter().all(|o| lab.data.contains(&o.class_id));
        if visible {
            return Ok((scale_intensity(&img, cfg.a_min, cfg.a_max), lab, spec));
        }
    }
    Err(Error::arg(format!("cannot place {} classes in extent {:?}", cfg.num_classes - 1, cfg.extent)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn every_object_is_visible_and_intensities_scaled() {
        let cfg = PhantomConfig::default();
        let (img, lab, spec) = generate(&cfg, &mut rng::seeded(4)).unwrap();
        for o in &spec.objects {
            assert!(lab.data.contains(&o.class_id));
        }
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn tube_contains_its_axis() {
        let o = PhantomObject {
            shape: Shape3::Tube {
                half_axis: [0.0, 0.0, 5.0],
                radius: 1.0,
            },
            center: [5.0, 5.0, 5.0],
            class_id: 1,
            intensity: 0.0,
        };
        assert!(o.contains([5.0, 5.0, 0.5]) && o.contains([5.0, 5.0, 9.5]));
        assert!(!o.contains([5.0, 7.0, 5.0]));
    }

    #[test]
    fn out_of_range_class_rejected() {
        let mut spec = random_spec(&PhantomConfig::default(), &mut rng::seeded(0));
        spec.objects[0].class_id = 3;
        assert!(spec.render(&mut rng::seeded(0)).is_err());
    }
}
