//! The `train`, `attack` and `suite` commands.

use std::path::{Path, PathBuf};

use transfer_lab::data::{load_cifar10_with, load_mnist, Dataset};
use transfer_lab::eval::{
    run_ensemble_transfer, run_rank_sweep, run_single_transfer, run_stepsize_sweep, run_transfer, run_trend_analysis,
    spread_csv, step_spread, Holdout, ModelEntry, TargetRule,
};
use transfer_lab::models::{load_weights, save_weights, train, Arch, Model};
use transfer_lab::uap::run_uap_suite;
use transfer_lab::Error;

use crate::artifacts::{samples_csv, save_tensor, trajectory_csv, write_bytes};
use crate::config::{Command, DatasetKind, RunConfig, Suite, RESOLVED_NAME};
use crate::error::Result;

pub const METRICS_HEADER: &str = "arch,seed,epochs,test_acc";

/// Run whatever `cfg.command` selects; returns the files written.
pub fn execute(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    match cfg.command {
        Command::Train => cmd_train(cfg),
        Command::Attack => cmd_attack(cfg),
        Command::Suite => cmd_suite(cfg),
    }
}

/// Train and test splits with the configured size caps applied.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Cifar10 => load_cifar10_with(&cfg.data, None)?,
        DatasetKind::Mnist => load_mnist(&cfg.data)?,
    };
    let cap = |ds: Dataset, n: usize| if n == 0 { ds } else { ds.take(n) };
    Ok((cap(train, cfg.train_limit), cap(test, cfg.test_limit)))
}

/// File stem of the weights trained for `arch` with `seed`.
pub fn model_stem(arch: Arch, seed: u64) -> String {
    format!("{arch}_s{seed}")
}

pub fn model_path(dir: &Path, arch: Arch, seed: u64) -> PathBuf {
    dir.join(format!("{}.mzw", model_stem(arch, seed)))
}

/// Train `cfg.arch` with `cfg.seed`; writes `<arch>_s<seed>.mzw`, its metrics
/// line and its resolved config into `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (train_set, test_set) = load_data(cfg)?;
    let [c, _, _] = train_set.image_shape();
    let model = Model::new(cfg.arch, c, train_set.num_classes(), cfg.seed)?;
    let tc = cfg.train_config();
    log::info!(
        "training {} (seed {}) on {} images for {} epochs",
        cfg.arch,
        cfg.seed,
        train_set.len(),
        tc.epochs
    );
    let (model, metrics) = train(model, &train_set, &test_set, &tc)?;
    let stem = model_stem(cfg.arch, cfg.seed);
    let weights = model_path(&cfg.out, cfg.arch, cfg.seed);
    save_weights(&model, &weights)?;
    let line = format!("{},{},{},{:.4}", cfg.arch, cfg.seed, tc.epochs, metrics.test_accuracy);
    println!("{line}");
    let metrics_path = cfg.out.join(format!("{stem}.metrics.csv"));
    write_bytes(&metrics_path, format!("{METRICS_HEADER}\n{line}\n").as_bytes())?;
    let config_path = cfg.out.join(format!("{stem}.{RESOLVED_NAME}"));
    cfg.write_resolved(&config_path)?;
    Ok(vec![weights, metrics_path, config_path])
}

/// Resolve a model name: `<arch>` loads seed `model_seed`, `<arch>_s<n>`
/// loads seed `n`.
fn parse_model_ref(name: &str, default_seed: u64) -> Result<(Arch, u64)> {
    if let Ok(arch) = name.parse::<Arch>() {
        return Ok((arch, default_seed));
    }
    if let Some((arch, seed)) = name.rsplit_once("_s") {
        if let (Ok(arch), Ok(seed)) = (arch.parse::<Arch>(), seed.parse::<u64>()) {
            return Ok((arch, seed));
        }
    }
    Err(Error::Usage(format!(
        "unknown model '{name}'; use an architecture ({}) optionally suffixed with _s<seed>",
        Arch::ALL.map(|a| a.as_str()).join(", ")
    ))
    .into())
}

/// Load named models, refusing with the list of missing weight files.
fn load_models(cfg: &RunConfig, names: &[String]) -> Result<Vec<ModelEntry>> {
    let mut entries = Vec::new();
    let mut missing = Vec::new();
    for name in names {
        let (arch, seed) = parse_model_ref(name, cfg.model_seed)?;
        let path = model_path(&cfg.models, arch, seed);
        if !path.exists() {
            missing.push((arch, seed, path));
            continue;
        }
        let model = load_weights(&path)?;
        if model.arch() != arch {
            return Err(Error::Usage(format!(
                "{} holds a {} model, expected {arch}",
                path.display(),
                model.arch()
            ))
            .into());
        }
        entries.push(ModelEntry::new(name.clone(), model));
    }
    if !missing.is_empty() {
        let todo: Vec<String> = missing
            .iter()
            .map(|(arch, seed, path)| {
                format!(
                    "{} (train --arch {arch} --seed {seed} --out {})",
                    path.display(),
                    cfg.models.display()
                )
            })
            .collect();
        return Err(Error::Refused(format!("missing trained models: {}", todo.join("; "))).into());
    }
    Ok(entries)
}

fn primary_names() -> Vec<String> {
    Arch::ALL.iter().map(|a| a.as_str().to_string()).collect()
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let path = cfg.out.join(RESOLVED_NAME);
    cfg.write_resolved(&path)?;
    Ok(path)
}

/// Attack the evaluation sample on `cfg.source` (fused when several) and
/// score on `cfg.targets`. Writes `report.csv`, `trajectory.csv`,
/// `samples.csv` and one `adv_<loss>_it<checkpoint>.tns` per snapshot.
pub fn cmd_attack(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if cfg.source.is_empty() || cfg.targets.is_empty() {
        return Err(Error::Usage("attack needs at least one source and one target".into()).into());
    }
    let sources = load_models(cfg, &cfg.source)?;
    let targets = load_models(cfg, &cfg.targets)?;
    let (_, test) = load_data(cfg)?;
    let mut written = vec![prepare_out(cfg)?];
    let eval = cfg.eval_config(&[cfg.loss], cfg.n_images);
    let src: Vec<&ModelEntry> = sources.iter().collect();
    let tgt: Vec<&ModelEntry> = targets.iter().collect();
    let (report, runs) = run_transfer(&src, &tgt, &test, &eval, TargetRule::Random)?;

    let report_path = cfg.out.join("report.csv");
    report.write_csv(&report_path)?;
    written.push(report_path);

    let traj: Vec<_> = runs
        .iter()
        .map(|r| (r.loss.kind, r.samples.as_slice(), r.results.as_slice()))
        .collect();
    let traj_path = cfg.out.join("trajectory.csv");
    write_bytes(&traj_path, trajectory_csv(&traj).as_bytes())?;
    written.push(traj_path);

    if let Some(run) = runs.first() {
        let samples_path = cfg.out.join("samples.csv");
        write_bytes(&samples_path, samples_csv(&run.samples).as_bytes())?;
        written.push(samples_path);
    }
    for run in &runs {
        for c in eval.report_checkpoints() {
            let images: Vec<_> = run
                .results
                .iter()
                .map(|r| r.checkpoint(c).unwrap_or(&r.final_image).clone())
                .collect();
            let stacked = transfer_lab::Tensor::stack(&images)?;
            let path = cfg.out.join(format!("adv_{}_it{c}.tns", run.loss.kind));
            save_tensor(&stacked, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Run `cfg.suite`; writes `<suite>.csv` (plus `stepsweep_spread.csv` for the
/// step-size sweep) and the resolved config into `cfg.out`.
pub fn cmd_suite(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let models = match cfg.suite {
        Suite::Single | Suite::EnsembleHard | Suite::EnsembleEasy | Suite::Uap => {
            let mut names = primary_names();
            if cfg.suite == Suite::EnsembleEasy {
                names.extend(Arch::ALL.iter().map(|&a| model_stem(a, cfg.sibling_seed)));
            }
            load_models(cfg, &names)?
        }
        Suite::RankSweep | Suite::StepSweep => {
            let pair = [cfg.source.first(), cfg.targets.first()];
            let [Some(s), Some(t)] = pair else {
                return Err(Error::Usage("this suite needs a source and a target model".into()).into());
            };
            load_models(cfg, &[s.clone(), t.clone()])?
        }
        Suite::Trends => {
            let Some(s) = cfg.source.first() else {
                return Err(Error::Usage("the trend suite needs a source model".into()).into());
            };
            load_models(cfg, std::slice::from_ref(s))?
        }
    };
    if cfg.suite == Suite::EnsembleEasy && cfg.sibling_seed == cfg.model_seed {
        return Err(Error::Usage("sibling_seed must differ from model_seed".into()).into());
    }
    let (_, test) = load_data(cfg)?;
    let mut written = vec![prepare_out(cfg)?];
    let refs: Vec<&ModelEntry> = models.iter().collect();
    let csv_path = cfg.out.join(format!("{}.csv", cfg.suite.as_str().replace('-', "_")));
    let eval = cfg.eval_config(&cfg.losses, cfg.n_images);
    log::info!("suite {} on {} test images", cfg.suite.as_str(), test.len());
    match cfg.suite {
        Suite::Single => run_single_transfer(&refs, &test, &eval)?.write_csv(&csv_path)?,
        Suite::EnsembleHard => run_ensemble_transfer(&refs, &[], Holdout::Hard, &test, &eval)?.write_csv(&csv_path)?,
        Suite::EnsembleEasy => {
            let (primaries, siblings) = refs.split_at(Arch::ALL.len());
            run_ensemble_transfer(primaries, siblings, Holdout::Easy, &test, &eval)?.write_csv(&csv_path)?
        }
        Suite::RankSweep => run_rank_sweep(refs[0], refs[1], &cfg.ranks, &test, &eval)?.write_csv(&csv_path)?,
        Suite::StepSweep => {
            let alphas: Vec<f32> = cfg.alphas.iter().map(|a| a / 255.0).collect();
            let report = run_stepsize_sweep(refs[0], refs[1], &alphas, &test, &eval)?;
            report.write_csv(&csv_path)?;
            let spread_path = cfg.out.join("stepsweep_spread.csv");
            write_bytes(&spread_path, spread_csv(&step_spread(&report)).as_bytes())?;
            written.push(spread_path);
        }
        Suite::Trends => {
            let eval = cfg.eval_config(&cfg.trend_losses, cfg.trend_images);
            run_trend_analysis(refs[0], &test, &eval)?.write_csv(&csv_path)?
        }
        Suite::Uap => {
            let n = if cfg.uap_images == 0 {
                test.len()
            } else {
                cfg.uap_images
            };
            let eval = cfg.eval_config(&cfg.losses, n);
            run_uap_suite(&refs, &test, &eval)?.write_csv(&csv_path)?
        }
    }
    written.push(csv_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_refs() {
        assert_eq!(parse_model_ref("mini_res", 3).unwrap(), (Arch::MiniRes, 3));
        assert_eq!(parse_model_ref("mini_res_s7", 3).unwrap(), (Arch::MiniRes, 7));
        let e = parse_model_ref("resnet", 0).unwrap_err().to_string();
        assert!(e.contains("mini_vgg") && e.contains("mini_incep"), "{e}");
    }
}
