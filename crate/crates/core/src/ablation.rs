//! Ablation harness on phantom data. Arms of one study differ from the first
//! arm in exactly one config key and share data, splits and init seeds.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::autograd::ParamStore;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::phantom::generate;
use crate::pipeline::build_model;
use crate::rng::substream;
use crate::ssl::PretrainModel;
use crate::training::{build_pseudo_labels, finetune_loop, pretrain_loop, FinetuneLog, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    MaskOnOff,
    ClustererSweep,
    LossWeights,
    LogoVsUlka,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask_onoff" => Ok(Ablation::MaskOnOff),
            "clusterer_sweep" => Ok(Ablation::ClustererSweep),
            "loss_weights" => Ok(Ablation::LossWeights),
            "logo_vs_ulka" => Ok(Ablation::LogoVsUlka),
            _ => Err(Error::arg(format!(
                "unknown ablation `{s}` (mask_onoff, clusterer_sweep, loss_weights, logo_vs_ulka)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Arm {
    pub name: String,
    pub config: RunConfig,
    /// Run masked pre-training before fine-tuning.
    pub pretrain: bool,
}

pub fn arms(ablation: Ablation, base: &RunConfig) -> Vec<Arm> {
    let arm = |name: String, pretrain: bool, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Arm { name, config, pretrain }
    };
    match ablation {
        Ablation::MaskOnOff => vec![
            arm("masking (phi2=0.7)".into(), true, &|c| c.pretrain.phi2 = 0.7),
            arm("no masking (phi2=0.0)".into(), true, &|c| c.pretrain.phi2 = 0.0),
        ],
        Ablation::ClustererSweep => [1, 4, 8]
            .into_iter()
            .map(|n| arm(format!("clusterers={n}"), true, &move |c| c.pretrain.clusterers_n = n))
            .collect(),
        Ablation::LossWeights => [(1.0, 1.0), (0.0, 1.0), (1.0, 0.0)]
            .into_iter()
            .map(|(d, ce)| {
                arm(format!("w_dice={d} w_ce={ce}"), false, &move |c| {
                    c.finetune.w_dice = d;
                    c.finetune.w_ce = ce;
                })
            })
            .collect(),
        Ablation::LogoVsUlka => vec![
            arm("LoGoNet (dual path)".into(), false, &|c| c.model.dual_path = true),
            arm("ULKANet (global only)".into(), false, &|c| c.model.dual_path = false),
        ],
    }
}

/// Every arm differs from the first in exactly one key.
pub fn check_single_factor(arms: &[Arm]) -> Result<()> {
    let Some(first) = arms.first() else {
        return Ok(());
    };
    for a in &arms[1..] {
        let diff = first.config.diff_keys(&a.config);
        if diff.len() != 1 {
            return Err(Error::arg(format!("arm `{}` differs from `{}` in {diff:?}", a.name, first.name)));
        }
    }
    Ok(())
}

/// Phantoms for one seed, split into training and held-out parts.
pub fn phantom_split(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let pc = cfg.phantom();
    let mut all = (0..cfg.data.count)
        .map(|i| {
            let (image, label, _) = generate(&pc, &mut substream(cfg.seed, "phantom", i as u64))?;
            Ok(Sample { image, label })
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = all.split_off(cfg.data.count - cfg.data.holdout);
    Ok((all, eval))
}

/// Optional pre-training on the training images, then fine-tuning evaluated
/// on `eval`.
pub fn run_arm(cfg: &RunConfig, pretrain: bool, train: &[Sample], eval: &[Sample]) -> Result<FinetuneLog> {
    cfg.validate()?;
    let (mut store, model) = build_model(cfg)?;
    if pretrain {
        let images: Vec<_> = train.iter().map(|s| s.image.clone()).collect();
        let (_, labels) = build_pseudo_labels(&images, cfg)?;
        let mut pstore = ParamStore::<f32>::new();
        let pmodel = PretrainModel::new(
            &mut pstore,
            &cfg.logonet(),
            images[0].spatial(),
            &labels.ks,
            cfg.pretrain.tau,
            &mut substream(cfg.seed, "init", 0),
        )?;
        let mut popt = AdamW::new(&pstore, cfg.optim);
        pretrain_loop(&mut pstore, &pmodel, &mut popt, &images, &labels, cfg, 0, cfg.pretrain.steps)?;
        let missing = store.load_from(&pstore);
        if let Some(m) = missing.iter().find(|n| !n.starts_with("head.")) {
            return Err(Error::MissingParameters { missing: vec![m.clone()] });
        }
    }
    let mut opt = AdamW::new(&store, cfg.optim);
    finetune_loop(&mut store, &model, &mut opt, train, eval, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub arm: String,
    pub seeds: Vec<u64>,
    pub dice: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

impl AblationResult {
    pub fn new(arm: String, seeds: Vec<u64>, dice: Vec<f64>) -> Self {
        let n = dice.len() as f64;
        let mean = dice.iter().sum::<f64>() / n;
        let std = if dice.len() > 1 {
            (dice.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        AblationResult { arm, seeds, dice, mean, std }
    }
}

/// Final held-out Dice per arm and seed. Each seed regenerates the data and
/// re-seeds every arm identically.
pub fn run_ablation(ablation: Ablation, base: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationResult>> {
    if seeds.len() < 2 {
        return Err(Error::arg("an ablation needs at least two seeds"));
    }
    if base.data.holdout == 0 || base.data.holdout >= base.data.count {
        return Err(Error::config("data.holdout", "ablations need a non-empty held-out split"));
    }
    let arms = arms(ablation, base);
    check_single_factor(&arms)?;
    let mut dice = vec![Vec::new(); arms.len()];
    for &seed in seeds {
        let mut data_cfg = base.clone();
        data_cfg.seed = seed;
        let (train, eval) = phantom_split(&data_cfg)?;
        for (a, out) in arms.iter().zip(&mut dice) {
            let mut cfg = a.config.clone();
            cfg.seed = seed;
            let log = run_arm(&cfg, a.pretrain, &train, &eval)?;
            out.push(log.evals.last().map(|e| e.1).unwrap_or(0.0));
        }
    }
    Ok(arms
        .into_iter()
        .zip(dice)
        .map(|(a, d)| AblationResult::new(a.name, seeds.to_vec(), d))
        .collect())
}

pub fn results_csv(results: &[AblationResult]) -> String {
    let mut s = String::from("arm,seed,dice\n");
    for r in results {
        for (seed, d) in r.seeds.iter().zip(&r.dice) {
            let _ = writeln!(s, "{},{seed},{d:.6}", r.arm);
        }
    }
    s
}

pub fn results_table(results: &[AblationResult]) -> String {
    let width = results.iter().map(|r| r.arm.len()).max().unwrap_or(3).max(3);
    let mut s = format!("{:<width$}  {:>16}  per-seed\n", "arm", "Dice mean ± std");
    for r in results {
        let per: Vec<String> = r.dice.iter().map(|d| format!("{d:.4}")).collect();
        let _ = writeln!(s, "{:<width$}  {:>7.4} ± {:<6.4}  {}", r.arm, r.mean, r.std, per.join(" "));
    }
    s
}

/// Steps to the Dice threshold with and without pre-training, one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedRun {
    pub seed: u64,
    pub scratch_steps: Option<usize>,
    pub pretrained_steps: Option<usize>,
    pub scratch_dice: f64,
    pub pretrained_dice: f64,
}

impl PairedRun {
    /// Pre-trained reached the threshold in no more steps than from scratch.
    pub fn pretrain_no_slower(&self) -> bool {
        match (self.pretrained_steps, self.scratch_steps) {
            (Some(p), Some(s)) => p <= s,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

/// Paired from-scratch and pre-trained fine-tuning runs stopping at
/// `finetune.target_dice` on the held-out split.
pub fn pretrain_effect(base: &RunConfig, seeds: &[u64]) -> Result<Vec<PairedRun>> {
    if base.finetune.target_dice.is_none() {
        return Err(Error::config("finetune.target_dice", "needed to count steps to threshold"));
    }
    seeds
        .iter()
        .map(|&seed| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let (train, eval) = phantom_split(&cfg)?;
            let scratch = run_arm(&cfg, false, &train, &eval)?;
            let pre = run_arm(&cfg, true, &train, &eval)?;
            let last = |l: &FinetuneLog| l.evals.last().map(|e| e.1).unwrap_or(0.0);
            Ok(PairedRun {
                seed,
                scratch_steps: scratch.steps_to_target,
                pretrained_steps: pre.steps_to_target,
                scratch_dice: last(&scratch),
                pretrained_dice: last(&pre),
            })
        })
        .collect()
}

pub fn paired_table(rows: &[PairedRun], target: f64) -> String {
    let show = |s: Option<usize>| s.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
    let mut s = format!(
        "{:>6}  {:>14}  {:>14}  {:>12}  {:>12}  pretrained no slower (Dice {target})\n",
        "seed", "scratch steps", "pretr. steps", "scratch Dice", "pretr. Dice"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6}  {:>14}  {:>14}  {:>12.4}  {:>12.4}  {}",
            r.seed,
            show(r.scratch_steps),
            show(r.pretrained_steps),
            r.scratch_dice,
            r.pretrained_dice,
            if r.pretrain_no_slower() { "yes" } else { "no" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_is_an_argument_error() {
        assert!(matches!("dropout".parse::<Ablation>(), Err(Error::Argument(_))));
    }

    #[test]
    fn every_study_varies_one_key() {
        let base = RunConfig::default();
        for a in [Ablation::MaskOnOff, Ablation::ClustererSweep, Ablation::LossWeights, Ablation::LogoVsUlka] {
            check_single_factor(&arms(a, &base)).unwrap();
        }
        let sweep: Vec<usize> = arms(Ablation::ClustererSweep, &base)
            .iter()
            .map(|a| a.config.pretrain.clusterers_n)
            .collect();
        assert_eq!(sweep, vec![1, 4, 8]);
    }

    #[test]
    fn mean_and_std_recompute() {
        let r = AblationResult::new("a".into(), vec![1, 2, 3], vec![0.5, 0.7, 0.9]);
        assert!((r.mean - 0.7).abs() < 1e-15);
        assert!((r.std - 0.2).abs() < 1e-15);
    }
}
