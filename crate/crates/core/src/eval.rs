//! Experiment protocols and their CSV reports.
//!
//! Every protocol attacks a fixed, deterministic sample of test images and
//! scores the adversarial images on one or more target models. Per-image work
//! may fan out over a thread pool; results are always gathered and reduced in
//! image order, so reports are byte-identical for any job count.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attack::{attack, ensemble_logits, target_rank, AttackConfig, AttackResult};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::models::{accuracy, Model};
use crate::tensor::{argmax, softmax, Tensor};

pub const REPORT_HEADER: &str =
    "source,target,loss,methods,checkpoint,epsilon,alpha,seed,n_images,targeted_sr,nontargeted_sr,mean_target_conf,mean_target_rank";
pub const TREND_HEADER: &str = "loss,iteration,norm_loss,norm_grad_l1,target_logit";
pub const SPREAD_HEADER: &str = "loss,min_sr,max_sr,spread";

/// A model with its identifier and (if known) clean test accuracy.
#[derive(Debug, Clone)]
pub struct ModelEntry {
    pub id: String,
    pub model: Model,
    pub accuracy: Option<f64>,
}

impl ModelEntry {
    pub fn new(id: impl Into<String>, model: Model) -> Self {
        Self {
            id: id.into(),
            model,
            accuracy: None,
        }
    }

    pub fn with_accuracy(mut self, accuracy: f64) -> Self {
        self.accuracy = Some(accuracy);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Attack settings; the loss field is replaced by each entry of `losses`.
    pub attack: AttackConfig,
    pub losses: Vec<LossSpec>,
    pub n_images: usize,
    /// Seeds target assignment and per-image attack randomness.
    pub seed: u64,
    pub jobs: usize,
    /// Models below this clean accuracy are refused as untrained.
    pub min_accuracy: f64,
    /// Also report source == target cells in single-model transfer.
    pub white_box: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            losses: vec![LossSpec::new(LossKind::Ce), LossSpec::new(LossKind::Logit)],
            n_images: 200,
            seed: 0,
            jobs: 1,
            min_accuracy: 0.60,
            white_box: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        if self.losses.is_empty() {
            return Err(Error::usage("no losses selected"));
        }
        for l in &self.losses {
            l.validate()?;
        }
        if self.n_images == 0 {
            return Err(Error::usage("n_images must be >= 1"));
        }
        if self.jobs == 0 {
            return Err(Error::usage("jobs must be >= 1"));
        }
        Ok(())
    }

    fn attack_for(&self, loss: &LossSpec) -> AttackConfig {
        AttackConfig {
            loss: *loss,
            ..self.attack.clone()
        }
    }

    /// Snapshot iterations reported per cell: the configured checkpoints, or
    /// just the final iteration.
    pub fn report_checkpoints(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.attack.checkpoints.clone();
        if c.is_empty() {
            c.push(self.attack.iterations);
        }
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// One image selected for attack.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index in the test set.
    pub index: usize,
    pub image: Tensor,
    pub original: usize,
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRule {
    /// Pseudorandom class != original, fixed per (seed, image index).
    Random,
    /// The class at this position of the sources' descending-logit order.
    Rank(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub source: String,
    pub target: String,
    pub loss: LossKind,
    pub methods: String,
    pub checkpoint: usize,
    pub epsilon: f32,
    pub alpha: f32,
    pub seed: u64,
    pub n_images: usize,
    pub targeted_sr: f64,
    pub nontargeted_sr: f64,
    pub mean_target_conf: f64,
    pub mean_target_rank: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferReport {
    pub rows: Vec<ReportRow>,
}

impl TransferReport {
    /// CSV with `epsilon` and `alpha` in /255 units.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{:.3},{:.3},{},{},{:.6},{:.6},{:.6},{:.4}",
                r.source,
                r.target,
                r.loss,
                r.methods,
                r.checkpoint,
                r.epsilon * 255.0,
                r.alpha * 255.0,
                r.seed,
                r.n_images,
                r.targeted_sr,
                r.nontargeted_sr,
                r.mean_target_conf,
                r.mean_target_rank
            )
            .expect("writing to a string");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_csv())
    }

    pub fn extend(&mut self, other: TransferReport) {
        self.rows.extend(other.rows);
    }

    /// Rows matching a predicate.
    pub fn filter(&self, pred: impl Fn(&ReportRow) -> bool) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| pred(r)).collect()
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Fraction of `images` the model assigns to their target class.
pub fn success_rate(model: &Model, images: &[Tensor], targets: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::usage("success rate of an empty set"));
    }
    if images.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} images but {} targets",
            images.len(),
            targets.len()
        )));
    }
    let mut hits = 0;
    for (img, &t) in images.iter().zip(targets) {
        if model.predict(img)? == t {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

/// Softmax confidence and 1-based rank of `target` on one image.
pub fn target_stats(model: &Model, image: &Tensor, target: usize) -> Result<(f64, usize)> {
    let logits = model.logits(image)?;
    if target >= logits.len() {
        return Err(Error::usage(format!("target {target} out of range")));
    }
    Ok((softmax(&logits)[target] as f64, target_rank(&logits, target)))
}

/// Class at 1-based position `rank` of the descending logit order, ties to
/// the lower class index.
pub fn rank_order_class(logits: &[f32], rank: usize) -> Result<usize> {
    if rank == 0 || rank > logits.len() {
        return Err(Error::usage(format!("rank {rank} outside [1, {}]", logits.len())));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    Ok(order[rank - 1])
}

pub fn select_target_by_rank(model: &Model, image: &Tensor, rank: usize) -> Result<usize> {
    rank_order_class(&model.logits(image)?, rank)
}

/// Elementwise `series[i] / series[0]`.
pub fn normalize_trend(series: &[f64]) -> Result<Vec<f64>> {
    let first = *series.first().ok_or_else(|| Error::usage("empty series"))?;
    if first == 0.0 {
        return Err(Error::Numerical("cannot normalise a series starting at zero".into()));
    }
    Ok(series.iter().map(|v| v / first).collect())
}

/// Refuse models whose clean accuracy is below the configured gate.
pub fn check_trained(models: &[&ModelEntry], test: &Dataset, min_accuracy: f64) -> Result<()> {
    let mut weak = Vec::new();
    for m in models {
        let acc = match m.accuracy {
            Some(a) => a,
            None => accuracy(&m.model, test, 250)?,
        };
        if acc < min_accuracy {
            weak.push(format!("{} ({:.1}%)", m.id, acc * 100.0));
        }
    }
    if weak.is_empty() {
        Ok(())
    } else {
        Err(Error::Refused(format!(
            "models below the {:.0}% accuracy gate look untrained: {}; train them first",
            min_accuracy * 100.0,
            weak.join(", ")
        )))
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::usage(format!("cannot start {jobs} workers: {e}")))
}

/// Apply `f` to every item, in parallel when `jobs > 1`, keeping input order.
pub(crate) fn map_ordered<T: Sync, U: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    if jobs <= 1 {
        items.iter().map(f).collect()
    } else {
        pool(jobs)?.install(|| items.par_iter().map(f).collect())
    }
}

fn image_stream(seed: u64, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index as u64);
    rng
}

/// Random target class != `original`, fixed by `(seed, index)`.
pub fn random_target(seed: u64, index: usize, original: usize, num_classes: usize) -> usize {
    let mut rng = image_stream(seed, index, 1);
    let t = rng.random_range(0..num_classes - 1);
    if t >= original {
        t + 1
    } else {
        t
    }
}

/// Per-image attack seed.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    image_stream(seed, index, 2).random()
}

/// First `n` test images every source classifies correctly, each with a
/// target assigned by `rule` (rank targets come from the sources' fused
/// logits).
pub fn select_samples(
    test: &Dataset,
    sources: &[&Model],
    n: usize,
    seed: u64,
    rule: TargetRule,
) -> Result<Vec<Sample>> {
    let k = sources
        .first()
        .ok_or_else(|| Error::usage("no source models"))?
        .num_classes();
    if let TargetRule::Rank(r) = rule {
        if r < 2 || r > k {
            return Err(Error::usage(format!(
                "target rank {r} outside [2, {k}]; rank 1 is the clean prediction"
            )));
        }
    }
    let mut out = Vec::with_capacity(n);
    const CHUNK: usize = 100;
    let mut start = 0;
    while out.len() < n && start < test.len() {
        let idx: Vec<usize> = (start..(start + CHUNK).min(test.len())).collect();
        start += idx.len();
        let (batch, labels) = test.gather(&idx);
        let mut fused: Vec<f32> = vec![0.0; idx.len() * k];
        let mut correct = vec![true; idx.len()];
        for m in sources {
            let logits = m.predict_logits(&batch)?;
            for (i, row) in logits.data().chunks(k).enumerate() {
                correct[i] &= argmax(row) == labels[i];
                fused[i * k..(i + 1) * k].iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        for (i, &index) in idx.iter().enumerate() {
            if !correct[i] || out.len() >= n {
                continue;
            }
            let original = labels[i];
            let target = match rule {
                TargetRule::Random => random_target(seed, index, original, k),
                TargetRule::Rank(r) => rank_order_class(&fused[i * k..(i + 1) * k], r)?,
            };
            out.push(Sample {
                index,
                image: batch.index_axis0(i),
                original,
                target,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::usage(
            "no test image is classified correctly by every source model",
        ));
    }
    if out.len() < n {
        log::warn!("only {} of {n} requested evaluation images available", out.len());
    }
    Ok(out)
}

/// Attack every sample on the fused sources.
pub fn attack_samples(
    sources: &[&Model],
    samples: &[Sample],
    cfg: &AttackConfig,
    base_seed: u64,
    jobs: usize,
) -> Result<Vec<AttackResult>> {
    map_ordered(samples, jobs, |s| {
        let cfg = AttackConfig {
            seed: image_seed(base_seed, s.index),
            ..cfg.clone()
        };
        attack(sources, &s.image, s.target, s.original, &cfg)
    })
}

/// Aggregate scores of one target model on a set of images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub targeted: f64,
    pub nontargeted: f64,
    pub confidence: f64,
    pub rank: f64,
}

pub fn score(model: &Model, images: &[&Tensor], targets: &[usize], originals: &[usize]) -> Result<Score> {
    if images.is_empty() {
        return Err(Error::usage("cannot score an empty set"));
    }
    let (mut hit, mut miss, mut conf, mut rank) = (0usize, 0usize, 0.0f64, 0.0f64);
    for chunk in (0..images.len()).collect::<Vec<_>>().chunks(100) {
        let batch = Tensor::stack(&chunk.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
        let logits = model.predict_logits(&batch)?;
        for (row, &i) in logits.data().chunks(model.num_classes()).zip(chunk) {
            let pred = argmax(row);
            hit += (pred == targets[i]) as usize;
            miss += (pred != originals[i]) as usize;
            conf += softmax(row)[targets[i]] as f64;
            rank += target_rank(row, targets[i]) as f64;
        }
    }
    let n = images.len() as f64;
    Ok(Score {
        targeted: hit as f64 / n,
        nontargeted: miss as f64 / n,
        confidence: conf / n,
        rank: rank / n,
    })
}

/// Score every checkpoint of `results` on each target model.
#[allow(clippy::too_many_arguments)]
fn transfer_rows(
    source_id: &str,
    targets: &[&ModelEntry],
    samples: &[Sample],
    results: &[AttackResult],
    cfg: &EvalConfig,
    loss: &LossSpec,
    methods: &str,
    checkpoints: &[usize],
) -> Result<Vec<ReportRow>> {
    let target_classes: Vec<usize> = samples.iter().map(|s| s.target).collect();
    let originals: Vec<usize> = samples.iter().map(|s| s.original).collect();
    let mut rows = Vec::new();
    for t in targets {
        for &c in checkpoints {
            let images: Vec<&Tensor> = results
                .iter()
                .map(|r| {
                    r.checkpoint(c)
                        .or((c == cfg.attack.iterations).then_some(&r.final_image))
                        .ok_or_else(|| Error::usage(format!("no snapshot at iteration {c}")))
                })
                .collect::<Result<_>>()?;
            let s = score(&t.model, &images, &target_classes, &originals)?;
            rows.push(ReportRow {
                source: source_id.to_string(),
                target: t.id.clone(),
                loss: loss.kind,
                methods: methods.to_string(),
                checkpoint: c,
                epsilon: cfg.attack.epsilon,
                alpha: cfg.attack.alpha,
                seed: cfg.seed,
                n_images: samples.len(),
                targeted_sr: s.targeted,
                nontargeted_sr: s.nontargeted,
                mean_target_conf: s.confidence,
                mean_target_rank: s.rank,
            });
        }
    }
    Ok(rows)
}

/// Results of one attack run kept alongside its report, for callers that
/// also dump adversarial images or trajectories.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub loss: LossSpec,
    pub samples: Vec<Sample>,
    pub results: Vec<AttackResult>,
}

/// Attack on the fused `sources` and score on `targets` for every loss.
pub fn run_transfer(
    sources: &[&ModelEntry],
    targets: &[&ModelEntry],
    test: &Dataset,
    cfg: &EvalConfig,
    rule: TargetRule,
) -> Result<(TransferReport, Vec<AttackRun>)> {
    cfg.validate()?;
    let source_models: Vec<&Model> = sources.iter().map(|m| &m.model).collect();
    let source_id = sources.iter().map(|m| m.id.as_str()).collect::<Vec<_>>().join("+");
    let samples = select_samples(test, &source_models, cfg.n_images, cfg.seed, rule)?;
    let checkpoints = cfg.report_checkpoints();
    let mut methods = cfg.attack.methods();
    if let TargetRule::Rank(r) = rule {
        methods = format!("{methods}|rank={r}");
    }
    let mut report = TransferReport::default();
    let mut runs = Vec::new();
    for loss in &cfg.losses {
        let attack_cfg = cfg.attack_for(loss);
        log::info!("{source_id}: {} attack on {} images", loss.kind, samples.len());
        let results = attack_samples(&source_models, &samples, &attack_cfg, cfg.seed, cfg.jobs)?;
        report.rows.extend(transfer_rows(
            &source_id,
            targets,
            &samples,
            &results,
            cfg,
            loss,
            &methods,
            &checkpoints,
        )?);
        runs.push(AttackRun {
            loss: *loss,
            samples: samples.clone(),
            results,
        });
    }
    Ok((report, runs))
}

/// Every ordered (source, target) pair of distinct models.
pub fn run_single_transfer(models: &[&ModelEntry], test: &Dataset, cfg: &EvalConfig) -> Result<TransferReport> {
    if models.len() < 2 {
        return Err(Error::usage("single-model transfer needs at least two models"));
    }
    check_trained(models, test, cfg.min_accuracy)?;
    let mut report = TransferReport::default();
    for (i, src) in models.iter().enumerate() {
        let targets: Vec<&ModelEntry> = models
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i || cfg.white_box)
            .map(|(_, m)| *m)
            .collect();
        report.extend(run_transfer(&[src], &targets, test, cfg, TargetRule::Random)?.0);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Holdout {
    /// The ensemble contains a sibling of the hold-out's architecture.
    Easy,
    /// No ensemble member shares the hold-out's architecture.
    Hard,
}

/// Hold out each primary model in turn and attack the ensemble of the rest.
/// `siblings` are extra-seed models used only as easy-rule ensemble members.
pub fn run_ensemble_transfer(
    primaries: &[&ModelEntry],
    siblings: &[&ModelEntry],
    rule: Holdout,
    test: &Dataset,
    cfg: &EvalConfig,
) -> Result<TransferReport> {
    if primaries.len() < 3 {
        return Err(Error::usage("ensemble transfer needs at least three models"));
    }
    let mut all: Vec<&ModelEntry> = primaries.to_vec();
    if rule == Holdout::Easy {
        let missing: Vec<String> = primaries
            .iter()
            .filter(|p| !siblings.iter().any(|s| s.model.arch() == p.model.arch()))
            .map(|p| format!("{}_s<seed>", p.model.arch()))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Refused(format!(
                "the easy hold-out rule needs a second-seed sibling per architecture; train: {}",
                missing.join(", ")
            )));
        }
        all.extend_from_slice(siblings);
    }
    check_trained(&all, test, cfg.min_accuracy)?;
    let mut report = TransferReport::default();
    for held in primaries {
        let arch = held.model.arch();
        let mut sources: Vec<&ModelEntry> = primaries.iter().filter(|m| m.model.arch() != arch).copied().collect();
        if rule == Holdout::Easy {
            sources.extend(siblings.iter().filter(|s| s.model.arch() == arch).take(1));
        }
        debug_assert!(sources.iter().all(|s| s.id != held.id));
        report.extend(run_transfer(&sources, &[held], test, cfg, TargetRule::Random)?.0);
    }
    Ok(report)
}

/// Targets picked at each requested rank of the source's clean prediction
/// order; one row per (rank, loss) at the final iteration.
pub fn run_rank_sweep(
    source: &ModelEntry,
    target: &ModelEntry,
    ranks: &[usize],
    test: &Dataset,
    cfg: &EvalConfig,
) -> Result<TransferReport> {
    let k = source.model.num_classes();
    if let Some(&bad) = ranks.iter().find(|&&r| r < 2 || r > k) {
        return Err(Error::usage(format!(
            "rank {bad} outside [2, {k}]; rank 1 is the clean prediction"
        )));
    }
    check_trained(&[source, target], test, cfg.min_accuracy)?;
    let final_only = EvalConfig {
        attack: AttackConfig {
            checkpoints: vec![],
            ..cfg.attack.clone()
        },
        ..cfg.clone()
    };
    let mut report = TransferReport::default();
    for &r in ranks {
        report.extend(run_transfer(&[source], &[target], test, &final_only, TargetRule::Rank(r))?.0);
    }
    Ok(report)
}

/// Per-iteration means across images of the normalised loss, normalised
/// gradient L1 norm and raw target logit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendRow {
    pub loss: LossKind,
    pub iteration: usize,
    pub norm_loss: f64,
    pub norm_grad_l1: f64,
    pub target_logit: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrendReport {
    pub rows: Vec<TrendRow>,
}

impl TrendReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TREND_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6}",
                r.loss, r.iteration, r.norm_loss, r.norm_grad_l1, r.target_logit
            )
            .expect("writing to a string");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_csv())
    }

    pub fn series(&self, loss: LossKind) -> Vec<&TrendRow> {
        self.rows.iter().filter(|r| r.loss == loss).collect()
    }
}

/// White-box trajectories on `source`, averaged over `cfg.n_images` images.
pub fn run_trend_analysis(source: &ModelEntry, test: &Dataset, cfg: &EvalConfig) -> Result<TrendReport> {
    cfg.validate()?;
    check_trained(&[source], test, cfg.min_accuracy)?;
    let samples = select_samples(test, &[&source.model], cfg.n_images, cfg.seed, TargetRule::Random)?;
    let n = cfg.attack.iterations;
    let mut report = TrendReport::default();
    for loss in &cfg.losses {
        let attack_cfg = cfg.attack_for(loss);
        let results = attack_samples(&[&source.model], &samples, &attack_cfg, cfg.seed, cfg.jobs)?;
        let mut sums = vec![[0.0f64; 3]; n];
        for r in &results {
            let losses: Vec<f64> = r.trajectory.iter().map(|t| t.loss).collect();
            let grads: Vec<f64> = r.trajectory.iter().map(|t| t.grad_l1).collect();
            let nl = normalize_trend(&losses)?;
            let ng = normalize_trend(&grads)?;
            for i in 0..n {
                sums[i][0] += nl[i];
                sums[i][1] += ng[i];
                sums[i][2] += r.trajectory[i].target_logit as f64;
            }
        }
        let count = results.len() as f64;
        for (i, s) in sums.into_iter().enumerate() {
            report.rows.push(TrendRow {
                loss: loss.kind,
                iteration: i + 1,
                // the first entry is an exact 1 by construction; dividing a
                // sum of ones keeps it exact
                norm_loss: s[0] / count,
                norm_grad_l1: s[1] / count,
                target_logit: s[2] / count,
            });
        }
    }
    Ok(report)
}

/// Sweep the step size; one final-iteration row per (alpha, loss).
pub fn run_stepsize_sweep(
    source: &ModelEntry,
    target: &ModelEntry,
    alphas: &[f32],
    test: &Dataset,
    cfg: &EvalConfig,
) -> Result<TransferReport> {
    if alphas.is_empty() || alphas.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::usage("step sizes must be positive"));
    }
    let mut seen = BTreeSet::new();
    let mut unique = Vec::new();
    for &a in alphas {
        if seen.insert(a.to_bits()) {
            unique.push(a);
        } else {
            log::warn!("duplicate step size {} ignored", a * 255.0);
        }
    }
    check_trained(&[source, target], test, cfg.min_accuracy)?;
    let mut report = TransferReport::default();
    for a in unique {
        let c = EvalConfig {
            attack: AttackConfig {
                alpha: a,
                checkpoints: vec![],
                ..cfg.attack.clone()
            },
            ..cfg.clone()
        };
        report.extend(run_transfer(&[source], &[target], test, &c, TargetRule::Random)?.0);
    }
    Ok(report)
}

/// Per-loss `(loss, min, max, max - min)` of targeted success across rows.
pub fn step_spread(report: &TransferReport) -> Vec<(LossKind, f64, f64, f64)> {
    let mut out = Vec::new();
    for kind in LossKind::ALL {
        let rates: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.loss == kind)
            .map(|r| r.targeted_sr)
            .collect();
        if rates.is_empty() {
            continue;
        }
        let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
        let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.push((kind, min, max, max - min));
    }
    out
}

pub fn spread_csv(spread: &[(LossKind, f64, f64, f64)]) -> String {
    let mut s = String::from(SPREAD_HEADER);
    s.push('\n');
    for (k, lo, hi, d) in spread {
        writeln!(s, "{k},{lo:.6},{hi:.6},{d:.6}").expect("writing to a string");
    }
    s
}

/// Mean of `targeted_sr` over the rows matching `pred`.
pub fn mean_targeted(report: &TransferReport, pred: impl Fn(&ReportRow) -> bool) -> Option<f64> {
    let rows = report.filter(pred);
    if rows.is_empty() {
        None
    } else {
        Some(rows.iter().map(|r| r.targeted_sr).sum::<f64>() / rows.len() as f64)
    }
}

/// Argmax of the fused logits on one image.
pub fn fused_prediction(models: &[&Model], image: &Tensor) -> Result<usize> {
    Ok(argmax(&ensemble_logits(models, image)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_order_class(&[0.1, 3.0, -1.0], 2).unwrap(), 0);
        assert_eq!(rank_order_class(&[0.1, 3.0, -1.0], 1).unwrap(), 1);
        assert_eq!(rank_order_class(&[0.1, 3.0, -1.0], 3).unwrap(), 2);
        assert_eq!(rank_order_class(&[1.0, 1.0, 0.0], 1).unwrap(), 0);
        assert!(rank_order_class(&[1.0, 2.0], 3).is_err());
        assert!(rank_order_class(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_trend(&[4.0, 2.0, 1.0]).unwrap(), vec![1.0, 0.5, 0.25]);
        assert_eq!(normalize_trend(&[3.0, 3.0]).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(normalize_trend(&[0.0, 1.0]), Err(Error::Numerical(_))));
        assert!(normalize_trend(&[]).is_err());
    }

    #[test]
    fn random_targets_avoid_original() {
        for index in 0..500 {
            let original = index % 10;
            let t = random_target(9, index, original, 10);
            assert!(t < 10 && t != original);
            assert_eq!(t, random_target(9, index, original, 10));
        }
        let spread: BTreeSet<usize> = (0..200).map(|i| random_target(1, i, 0, 10)).collect();
        assert_eq!(spread.len(), 9);
    }

    #[test]
    fn csv_header_and_format() {
        let report = TransferReport {
            rows: vec![ReportRow {
                source: "mini_res".into(),
                target: "mini_vgg".into(),
                loss: LossKind::Logit,
                methods: "MI+TI+DI".into(),
                checkpoint: 300,
                epsilon: 16.0 / 255.0,
                alpha: 2.0 / 255.0,
                seed: 7,
                n_images: 200,
                targeted_sr: 0.5,
                nontargeted_sr: 0.75,
                mean_target_conf: 0.25,
                mean_target_rank: 2.5,
            }],
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), REPORT_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "mini_res,mini_vgg,logit,MI+TI+DI,300,16.000,2.000,7,200,0.500000,0.750000,0.250000,2.5000"
        );
    }

    #[test]
    fn spread_per_loss() {
        let row = |loss, sr| ReportRow {
            source: "a".into(),
            target: "b".into(),
            loss,
            methods: "none".into(),
            checkpoint: 1,
            epsilon: 0.1,
            alpha: 0.1,
            seed: 0,
            n_images: 1,
            targeted_sr: sr,
            nontargeted_sr: sr,
            mean_target_conf: 0.0,
            mean_target_rank: 1.0,
        };
        let r = TransferReport {
            rows: vec![
                row(LossKind::Ce, 0.2),
                row(LossKind::Ce, 0.5),
                row(LossKind::Logit, 0.4),
            ],
        };
        let s = step_spread(&r);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].0, LossKind::Ce);
        assert!((s[0].3 - 0.3).abs() < 1e-12);
        assert_eq!(s[1].3, 0.0);
    }
}
