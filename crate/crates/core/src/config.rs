//! Run configuration (TOML). Defaults are the full-scale pre-training and
//! fine-tuning settings where those exist and desk-scale choices elsewhere.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logonet::LoGoNetConfig;
use crate::losses::DiceCeConfig;
use crate::optim::AdamWConfig;
use crate::phantom::PhantomConfig;
use crate::ssl::{KMeansConfig, MaskConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Tiny,
    Normal,
    Large,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Variant::Tiny),
            "normal" => Ok(Variant::Normal),
            "large" => Ok(Variant::Large),
            _ => Err(Error::config("variant", format!("unknown variant `{s}` (tiny, normal, large)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Tiny => "tiny",
            Variant::Normal => "normal",
            Variant::Large => "large",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub num_classes: usize,
    pub partitions_n: usize,
    pub share_local: bool,
    pub dual_path: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Variant::Tiny,
            num_classes: 3,
            partitions_n: 8,
            share_local: true,
            dual_path: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    /// Cube edge of generated phantoms.
    pub extent: usize,
    /// Trailing volumes held out for evaluation.
    pub holdout: usize,
    pub noise_sigma: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            count: 8,
            extent: 32,
            holdout: 0,
            noise_sigma: 20.0,
            a_min: -1000.0,
            a_max: 1000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub phi1: f64,
    pub phi2: f64,
    pub sequence_length: usize,
    pub patch_sizes: Vec<usize>,
    pub tau: f64,
    pub clusterers_n: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub kmeans_iterations: usize,
    pub subset_fraction: f64,
    pub refine_epochs: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let m = MaskConfig::full_scale();
        PretrainSection {
            phi1: m.phi1,
            phi2: m.phi2,
            sequence_length: m.sequence_length,
            patch_sizes: m.patch_sizes,
            tau: 0.1,
            clusterers_n: 4,
            k_min: 8,
            k_max: 32,
            kmeans_iterations: 350,
            subset_fraction: 0.1,
            refine_epochs: 1,
            steps: 200,
            batch_size: 1,
            lr: 1e-4,
            // 10 warmup epochs of 100
            warmup_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub crop: usize,
    pub w_dice: f64,
    pub w_ce: f64,
    pub dice_eps: f64,
    pub exclude_background: bool,
    pub eval_every: usize,
    /// Stop once the evaluation Dice reaches this value.
    pub target_dice: Option<f64>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            steps: 500,
            batch_size: 2,
            lr: 1e-4,
            // 100 warmup epochs of 5000
            warmup_fraction: 0.02,
            crop: 96,
            w_dice: 1.0,
            w_ce: 1.0,
            dice_eps: 1e-5,
            exclude_background: false,
            eval_every: 25,
            target_dice: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub optim: AdamWConfig,
}

fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, msg))
    }
}

impl RunConfig {
    pub fn with_variant(variant: Variant) -> Self {
        let mut c = RunConfig::default();
        c.model.variant = variant;
        if variant != Variant::Tiny {
            c.data.extent = 96;
        }
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "toml".to_string());
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn logonet(&self) -> LoGoNetConfig {
        let m = &self.model;
        let mut c = match m.variant {
            Variant::Tiny => LoGoNetConfig::tiny(m.num_classes),
            Variant::Normal => LoGoNetConfig::normal(m.num_classes),
            Variant::Large => LoGoNetConfig::large(m.num_classes),
        };
        c.partitions_n = m.partitions_n;
        c.share_local = m.share_local;
        c.use_local = m.dual_path;
        c
    }

    pub fn mask(&self) -> MaskConfig {
        let p = &self.pretrain;
        MaskConfig {
            phi1: p.phi1,
            phi2: p.phi2,
            sequence_length: p.sequence_length,
            patch_sizes: p.patch_sizes.clone(),
        }
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            iterations: self.pretrain.kmeans_iterations,
            subset_fraction: self.pretrain.subset_fraction,
            refine_epochs: self.pretrain.refine_epochs,
        }
    }

    pub fn loss(&self) -> DiceCeConfig {
        let f = &self.finetune;
        DiceCeConfig {
            w_dice: f.w_dice,
            w_ce: f.w_ce,
            eps: f.dice_eps,
            num_classes: self.model.num_classes,
            exclude_background: f.exclude_background,
        }
    }

    pub fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            extent: [self.data.extent; 3],
            num_classes: self.model.num_classes,
            noise_sigma: self.data.noise_sigma,
            a_min: self.data.a_min,
            a_max: self.data.a_max,
            ..PhantomConfig::default()
        }
    }

    /// Fine-tuning crop edge: the configured size when the volume allows it,
    /// otherwise the whole volume.
    pub fn crop_for(&self, extent: usize) -> usize {
        self.finetune.crop.min(extent)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pretrain;
        let f = &self.finetune;
        let o = &self.optim;
        self.logonet().validate()?;
        check((0.0..=1.0).contains(&p.phi1), "pretrain.phi1", "must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&p.phi2), "pretrain.phi2", "must lie in [0, 1]")?;
        check(p.sequence_length >= 1, "pretrain.sequence_length", "must be at least 1")?;
        check(!p.patch_sizes.is_empty(), "pretrain.patch_sizes", "must not be empty")?;
        check(!p.patch_sizes.contains(&0), "pretrain.patch_sizes", "sizes must be positive")?;
        check(p.tau > 0.0, "pretrain.tau", "must be positive")?;
        check(p.clusterers_n >= 1, "pretrain.clusterers_n", "need at least one clusterer")?;
        check(p.k_min >= 1 && p.k_min <= p.k_max, "pretrain.k_min", "need 1 ≤ k_min ≤ k_max")?;
        check(
            p.subset_fraction > 0.0 && p.subset_fraction <= 1.0,
            "pretrain.subset_fraction",
            "must lie in (0, 1]",
        )?;
        check(p.batch_size >= 1, "pretrain.batch_size", "must be at least 1")?;
        check(p.lr > 0.0, "pretrain.lr", "must be positive")?;
        check((0.0..=1.0).contains(&p.warmup_fraction), "pretrain.warmup_fraction", "must lie in [0, 1]")?;
        check(f.batch_size >= 1, "finetune.batch_size", "must be at least 1")?;
        check(f.lr > 0.0, "finetune.lr", "must be positive")?;
        check((0.0..=1.0).contains(&f.warmup_fraction), "finetune.warmup_fraction", "must lie in [0, 1]")?;
        check(f.w_dice >= 0.0 && f.w_ce >= 0.0 && f.w_dice + f.w_ce > 0.0, "finetune.w_dice", "weights must be non-negative with a positive sum")?;
        check(f.dice_eps > 0.0, "finetune.dice_eps", "must be positive")?;
        check(f.eval_every >= 1, "finetune.eval_every", "must be at least 1")?;
        check((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2), "optim.beta1", "betas must lie in [0, 1)")?;
        check(o.eps > 0.0 && o.weight_decay >= 0.0, "optim.eps", "eps must be positive, weight decay non-negative")?;
        check(self.data.a_max > self.data.a_min, "data.a_max", "must exceed a_min")?;
        check(self.data.noise_sigma >= 0.0, "data.noise_sigma", "must be non-negative")?;
        check(self.data.holdout <= self.data.count, "data.holdout", "cannot exceed count")?;
        let m = self.logonet().required_multiple()?;
        if !self.data.extent.is_multiple_of(m) || self.data.extent == 0 {
            return Err(Error::config("data.extent", format!("must be a positive multiple of {m}")));
        }
        if !self.crop_for(self.data.extent).is_multiple_of(m) {
            return Err(Error::config("finetune.crop", format!("must be a multiple of {m}")));
        }
        Ok(())
    }

    /// Dotted keys whose values differ between two configs.
    pub fn diff_keys(&self, other: &RunConfig) -> Vec<String> {
        let (a, b) = (flatten(self), flatten(other));
        let mut keys: Vec<String> = a.keys().chain(b.keys()).cloned().collect();
        keys.sort();
        keys.dedup();
        keys.into_iter().filter(|k| a.get(k) != b.get(k)).collect()
    }
}

fn flatten(cfg: &RunConfig) -> BTreeMap<String, String> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let value = toml::Value::try_from(cfg).expect("config serializes");
    let mut out = BTreeMap::new();
    walk("", &value, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_full_scale_settings() {
        let c = RunConfig::default();
        assert_eq!((c.pretrain.phi1, c.pretrain.phi2, c.pretrain.sequence_length), (0.1, 0.7, 5));
        assert_eq!(c.pretrain.patch_sizes, vec![1, 2, 4, 8, 16, 32, 96]);
        assert_eq!(c.pretrain.tau, 0.1);
        assert_eq!((c.optim.beta1, c.optim.beta2, c.optim.weight_decay), (0.9, 0.999, 1e-5));
        assert_eq!((c.finetune.lr, c.finetune.crop), (1e-4, 96));
        assert_eq!((c.finetune.w_dice, c.finetune.w_ce), (1.0, 1.0));
    }

    #[test]
    fn absent_tau_defaults_and_echo_roundtrips() {
        let c = RunConfig::from_toml("seed = 3\n[pretrain]\nsteps = 7\n").unwrap();
        assert_eq!(c.pretrain.tau, 0.1);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_field_is_named() {
        match RunConfig::from_toml("[pretrain]\ntau = -1.0\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "pretrain.tau"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml("[pretrain]\nbogus = 1\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "bogus"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diff_counts_single_key() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.pretrain.phi2 = 0.0;
        assert_eq!(a.diff_keys(&b), vec!["pretrain.phi2".to_string()]);
    }
}
