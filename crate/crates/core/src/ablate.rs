//! Ablation runner: sweep one axis (group size, sampling scheme, loss terms,
//! or reward terms) across shared seeds and tabulate test metrics per
//! setting.

use crate::config::RunConfig;
use crate::data::manifest::Split;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::MetricsReport;
use crate::sampler::SchemeKind;
use crate::train::{evaluate, train};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    GroupSize,
    Scheme,
    LossTerms,
    RewardTerms,
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "group-size" => Ok(AblationAxis::GroupSize),
            "scheme" => Ok(AblationAxis::Scheme),
            "loss-terms" => Ok(AblationAxis::LossTerms),
            "reward-terms" => Ok(AblationAxis::RewardTerms),
            other => Err(Error::UnknownAxis(other.to_string())),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationAxis::GroupSize => "group-size",
            AblationAxis::Scheme => "scheme",
            AblationAxis::LossTerms => "loss-terms",
            AblationAxis::RewardTerms => "reward-terms",
        })
    }
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub group_sizes: Vec<usize>,
    pub schemes: Vec<SchemeKind>,
    pub seeds: Vec<u64>,
}

impl AblationOptions {
    pub fn defaults(base_seed: u64) -> Self {
        AblationOptions {
            group_sizes: vec![128, 512, 2048],
            schemes: vec![
                SchemeKind::Gmss,
                SchemeKind::Ghss,
                SchemeKind::Liis,
                SchemeKind::RandomGroup,
            ],
            seeds: vec![base_seed, base_seed + 1, base_seed + 2],
        }
    }
}

/// One swept setting: a label plus the config transformation it applies.
struct Setting {
    label: String,
    apply: Box<dyn Fn(&mut RunConfig) + Sync + Send>,
}

fn settings_for(axis: AblationAxis, options: &AblationOptions) -> Vec<Setting> {
    match axis {
        AblationAxis::GroupSize => options
            .group_sizes
            .iter()
            .map(|&m| Setting {
                label: m.to_string(),
                apply: Box::new(move |cfg| cfg.model.group_size = m),
            })
            .collect(),
        AblationAxis::Scheme => options
            .schemes
            .iter()
            .map(|&scheme| Setting {
                label: scheme.name().to_string(),
                apply: Box::new(move |cfg| cfg.sampler.scheme = scheme),
            })
            .collect(),
        AblationAxis::LossTerms => {
            let zero_stl = |cfg: &mut RunConfig| {
                cfg.schedule.lambda_stl_start = 0.0;
                cfg.schedule.lambda_stl_end = 0.0;
            };
            let zero_sia = |cfg: &mut RunConfig| {
                cfg.schedule.lambda_sia_start = 0.0;
                cfg.schedule.lambda_sia_end = 0.0;
            };
            vec![
                Setting {
                    label: "wsl".into(),
                    apply: Box::new(move |cfg| {
                        zero_stl(cfg);
                        zero_sia(cfg);
                    }),
                },
                Setting { label: "wsl+sia".into(), apply: Box::new(zero_stl) },
                Setting { label: "wsl+stl".into(), apply: Box::new(zero_sia) },
                Setting { label: "wsl+stl+sia".into(), apply: Box::new(|_| {}) },
            ]
        }
        AblationAxis::RewardTerms => vec![
            Setting {
                label: "none".into(),
                apply: Box::new(|cfg| {
                    cfg.reward.use_reward = false;
                    cfg.reward.use_penalty = false;
                }),
            },
            Setting {
                label: "reward-only".into(),
                apply: Box::new(|cfg| cfg.reward.use_penalty = false),
            },
            Setting {
                label: "penalty-only".into(),
                apply: Box::new(|cfg| cfg.reward.use_reward = false),
            },
            Setting { label: "both".into(), apply: Box::new(|_| {}) },
        ],
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub setting: String,
    pub seeds: Vec<u64>,
    pub mean: MetricsReport,
    pub per_seed: Vec<MetricsReport>,
}

pub struct AblationOutputs {
    pub rows: Vec<AblationRow>,
    pub csv_path: PathBuf,
}

fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricsReport {
        accuracy: avg(|r| r.accuracy),
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        f1: avg(|r| r.f1),
        auc: avg(|r| r.auc),
        threshold: reports[0].threshold,
        num_bags: reports[0].num_bags,
        num_positive: reports[0].num_positive,
    }
}

/// Train and evaluate one concrete run of the sweep; returns test metrics of
/// the best-validation checkpoint.
pub fn run_single(config: &RunConfig, out_dir: &Path) -> Result<MetricsReport> {
    let outputs = train(config, out_dir, None)?;
    evaluate(&outputs.checkpoint_path, &config.data.manifest, Split::Test, out_dir)
}

/// Sweep the requested axis over the shared seeds; one CSV row per setting
/// with seed-averaged test metrics.
pub fn ablate(
    config: &RunConfig,
    axis: AblationAxis,
    options: &AblationOptions,
    out_dir: &Path,
) -> Result<AblationOutputs> {
    if options.seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let settings = settings_for(axis, options);
    let jobs: Vec<(usize, u64)> = settings
        .iter()
        .enumerate()
        .flat_map(|(i, _)| options.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<((usize, u64), MetricsReport)> = jobs
        .par_iter()
        .map(|&(setting_idx, seed)| {
            let setting = &settings[setting_idx];
            let mut cfg = config.clone();
            (setting.apply)(&mut cfg);
            cfg.train.seed = seed;
            cfg.validate()?;
            let run_dir = out_dir.join(format!("{axis}-{}-seed{}", setting.label, seed));
            let report = run_single(&cfg, &run_dir)?;
            Ok(((setting_idx, seed), report))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, setting) in settings.iter().enumerate() {
        let per_seed: Vec<MetricsReport> = options
            .seeds
            .iter()
            .map(|&s| {
                results
                    .iter()
                    .find(|((idx, seed), _)| *idx == i && *seed == s)
                    .map(|(_, r)| r.clone())
                    .expect("every job ran")
            })
            .collect();
        rows.push(AblationRow {
            setting: setting.label.clone(),
            seeds: options.seeds.clone(),
            mean: mean_report(&per_seed),
            per_seed,
        });
    }

    let mut csv = String::from("axis,setting,seeds,accuracy,precision,recall,f1,auc\n");
    for row in &rows {
        let seeds =
            row.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
        csv.push_str(&format!(
            "{axis},{},{seeds},{},{},{},{},{}\n",
            row.setting, row.mean.accuracy, row.mean.precision, row.mean.recall, row.mean.f1,
            row.mean.auc
        ));
    }
    let csv_path = out_dir.join(format!("ablation_{axis}.csv"));
    fsutil::atomic_write_str(&csv_path, &csv)?;
    Ok(AblationOutputs { rows, csv_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        assert_eq!("group_size".parse::<AblationAxis>().unwrap(), AblationAxis::GroupSize);
        assert_eq!("scheme".parse::<AblationAxis>().unwrap(), AblationAxis::Scheme);
        assert_eq!("loss-terms".parse::<AblationAxis>().unwrap(), AblationAxis::LossTerms);
        assert_eq!("reward-terms".parse::<AblationAxis>().unwrap(), AblationAxis::RewardTerms);
        assert!(matches!("speed".parse::<AblationAxis>(), Err(Error::UnknownAxis(_))));
    }

    #[test]
    fn reward_axis_settings_toggle_flags() {
        let options = AblationOptions::defaults(1);
        let settings = settings_for(AblationAxis::RewardTerms, &options);
        assert_eq!(settings.len(), 4);
        let mut cfg = RunConfig::default();
        (settings[0].apply)(&mut cfg);
        assert!(!cfg.reward.use_reward && !cfg.reward.use_penalty);
        let mut cfg = RunConfig::default();
        (settings[1].apply)(&mut cfg);
        assert!(cfg.reward.use_reward && !cfg.reward.use_penalty);
    }

    #[test]
    fn loss_axis_zeroes_schedules() {
        let options = AblationOptions::defaults(1);
        let settings = settings_for(AblationAxis::LossTerms, &options);
        let mut cfg = RunConfig::default();
        (settings[0].apply)(&mut cfg);
        assert_eq!(cfg.schedule.lambda_stl_start, 0.0);
        assert_eq!(cfg.schedule.lambda_sia_end, 0.0);
    }
}
