//! Data-free targeted universal perturbations.
//!
//! The attack runs on a constant mid-grey image; the resulting offset is the
//! perturbation, later added to arbitrary images and clipped to `[0, 1]`.
//!
//! File layout (`u32`/`f32` little-endian):
//!
//! ```text
//! "UAP1"
//! rank, dims[rank]
//! epsilon (f32), target class (u32)
//! source id (u32 len + utf-8 bytes)
//! f32 data
//! ```

use std::fs;
use std::path::Path;

use crate::attack::{attack, ensemble_logits, initial_image, AttackConfig, Norm};
use crate::codec::Reader;
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::eval::{image_seed, map_ordered, score, EvalConfig, ModelEntry, ReportRow, Score, TransferReport};
use crate::models::Model;
use crate::tensor::{argmax, Tensor};

pub const UAP_MAGIC: &[u8; 4] = b"UAP1";

const MAX_ID: usize = 1024;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct UapArtifact {
    /// `[C, H, W]` offset with every entry in `[-epsilon, epsilon]`.
    pub perturbation: Tensor,
    pub target: usize,
    pub epsilon: f32,
    /// Source model id(s), `+`-joined for ensembles.
    pub source: String,
}

/// Attack the constant 0.5 image towards `target` and keep the offset.
/// Never reads a dataset.
pub fn generate_uap(
    models: &[&Model],
    source: &str,
    image_shape: [usize; 3],
    target: usize,
    cfg: &AttackConfig,
) -> Result<UapArtifact> {
    if cfg.unbounded || cfg.norm != Norm::Linf || !(cfg.epsilon > 0.0) {
        return Err(Error::usage(
            "universal perturbations need a bounded L-inf attack with epsilon > 0",
        ));
    }
    let base = Tensor::full(&image_shape, 0.5);
    let adv = if cfg.iterations == 0 {
        initial_image(&base, cfg)?
    } else {
        let original = argmax(&ensemble_logits(models, &base)?);
        attack(models, &base, target, original, cfg)?.final_image
    };
    let eps = cfg.epsilon;
    let delta = adv.data().iter().map(|&v| (v - 0.5).clamp(-eps, eps)).collect();
    Ok(UapArtifact {
        perturbation: Tensor::new(&image_shape, delta)?,
        target,
        epsilon: eps,
        source: source.to_string(),
    })
}

/// `clip(x + delta)` for a `[B, C, H, W]` batch.
pub fn apply_uap(batch: &Tensor, uap: &UapArtifact) -> Result<Tensor> {
    let per = uap.perturbation.len();
    if batch.rank() != 4 || batch.shape()[1..] != *uap.perturbation.shape() {
        return Err(Error::shape(format!(
            "perturbation {:?} does not match images {:?}",
            uap.perturbation.shape(),
            batch.shape()
        )));
    }
    let delta = uap.perturbation.data();
    let data = batch
        .data()
        .chunks(per)
        .flat_map(|img| img.iter().zip(delta).map(|(x, d)| (x + d).clamp(0.0, 1.0)))
        .collect();
    Tensor::new(batch.shape(), data)
}

/// Scores of `model` on every perturbed image of `ds` (targeted rate towards
/// the perturbation's target, non-targeted against the true labels).
pub fn score_uap(uap: &UapArtifact, model: &Model, ds: &Dataset) -> Result<Score> {
    if ds.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty dataset"));
    }
    let mut images = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for (batch, l) in batch_iter(ds, 100, 0, false)? {
        let adv = apply_uap(&batch, uap)?;
        for i in 0..l.len() {
            images.push(adv.index_axis0(i));
        }
        labels.extend(l);
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    score(model, &refs, &vec![uap.target; refs.len()], &labels)
}

/// Fraction of perturbed images classified as the target.
pub fn evaluate_uap(uap: &UapArtifact, model: &Model, ds: &Dataset) -> Result<f64> {
    Ok(score_uap(uap, model, ds)?.targeted)
}

/// White-box UAP success per model and loss, averaged over every target
/// class. Perturbations are evaluated on the first `cfg.n_images` test
/// images.
pub fn run_uap_suite(models: &[&ModelEntry], test: &Dataset, cfg: &EvalConfig) -> Result<TransferReport> {
    cfg.validate()?;
    crate::eval::check_trained(models, test, cfg.min_accuracy)?;
    let eval_set = test.take(cfg.n_images);
    let shape = test.image_shape();
    let mut report = TransferReport::default();
    for m in models {
        let k = m.model.num_classes();
        for loss in &cfg.losses {
            let targets: Vec<usize> = (0..k).collect();
            let scores = map_ordered(&targets, cfg.jobs, |&t| {
                let attack_cfg = AttackConfig {
                    loss: *loss,
                    checkpoints: vec![],
                    seed: image_seed(cfg.seed, t),
                    ..cfg.attack.clone()
                };
                let uap = generate_uap(&[&m.model], &m.id, shape, t, &attack_cfg)?;
                score_uap(&uap, &m.model, &eval_set)
            })?;
            let n = scores.len() as f64;
            let mean = |f: fn(&Score) -> f64| scores.iter().map(f).sum::<f64>() / n;
            report.rows.push(ReportRow {
                source: m.id.clone(),
                target: m.id.clone(),
                loss: loss.kind,
                methods: cfg.attack.methods(),
                checkpoint: cfg.attack.iterations,
                epsilon: cfg.attack.epsilon,
                alpha: cfg.attack.alpha,
                seed: cfg.seed,
                n_images: eval_set.len(),
                targeted_sr: mean(|s| s.targeted),
                nontargeted_sr: mean(|s| s.nontargeted),
                mean_target_conf: mean(|s| s.confidence),
                mean_target_rank: mean(|s| s.rank),
            });
        }
    }
    Ok(report)
}

pub fn encode_uap(uap: &UapArtifact) -> Vec<u8> {
    let mut out = Vec::with_capacity(uap.perturbation.len() * 4 + 64);
    out.extend_from_slice(UAP_MAGIC);
    let shape = uap.perturbation.shape();
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&uap.epsilon.to_le_bytes());
    out.extend_from_slice(&(uap.target as u32).to_le_bytes());
    out.extend_from_slice(&(uap.source.len() as u32).to_le_bytes());
    out.extend_from_slice(uap.source.as_bytes());
    for v in uap.perturbation.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_uap(bytes: &[u8]) -> Result<UapArtifact> {
    let mut r = Reader::new(bytes, "uap");
    if r.take(4)? != UAP_MAGIC {
        return Err(Error::format("uap", "bad magic, not a perturbation file"));
    }
    let rank = r.u32()?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format("uap", format!("invalid rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()?);
    }
    let epsilon = r.f32()?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::format("uap", "epsilon must be finite and >= 0"));
    }
    let target = r.u32()?;
    let source = r.string(MAX_ID)?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n.checked_mul(4) == Some(r.remaining()))
        .ok_or_else(|| Error::format("uap", format!("{} data bytes for shape {shape:?}", r.remaining())))?;
    let data = r.f32s(n)?;
    if data.iter().any(|v| !(v.abs() <= epsilon)) {
        return Err(Error::format("uap", "perturbation exceeds its epsilon bound"));
    }
    Ok(UapArtifact {
        perturbation: Tensor::new(&shape, data)?,
        target,
        epsilon,
        source,
    })
}

pub fn save_uap(uap: &UapArtifact, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_uap(uap)).map_err(|e| Error::io(path, e))
}

pub fn load_uap(path: impl AsRef<Path>) -> Result<UapArtifact> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_uap(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Init;
    use crate::data::Split;
    use crate::losses::{LossKind, LossSpec};
    use crate::models::{build_model, Arch};

    fn cfg(iterations: usize) -> AttackConfig {
        AttackConfig {
            iterations,
            checkpoints: vec![],
            di: Some(crate::attack::DiConfig {
                prob: 0.7,
                low: 13,
                high: 16,
            }),
            seed: 4,
            ..AttackConfig::new(LossSpec::new(LossKind::Logit))
        }
    }

    #[test]
    fn perturbation_is_bounded_and_deterministic() {
        let m = build_model(Arch::MiniVgg, 10, 0).unwrap();
        let a = generate_uap(&[&m], "mini_vgg", [3, 16, 16], 3, &cfg(4)).unwrap();
        let b = generate_uap(&[&m], "mini_vgg", [3, 16, 16], 3, &cfg(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.perturbation.linf_norm() <= 16.0 / 255.0);
        assert!(a.perturbation.linf_norm() > 0.0);
    }

    #[test]
    fn zero_iterations_give_the_initial_offset() {
        let m = build_model(Arch::MiniVgg, 10, 0).unwrap();
        let z = generate_uap(&[&m], "m", [3, 8, 8], 1, &cfg(0)).unwrap();
        assert!(z.perturbation.data().iter().all(|&v| v == 0.0));
        let g = AttackConfig {
            init: Init::Gaussian { sigma: 0.1 },
            ..cfg(0)
        };
        let z = generate_uap(&[&m], "m", [3, 8, 8], 1, &g).unwrap();
        assert!(z.perturbation.linf_norm() <= g.epsilon);
        assert!(z.perturbation.linf_norm() > 0.0);
    }

    #[test]
    fn file_roundtrip_and_rejections() {
        let m = build_model(Arch::MiniVgg, 10, 0).unwrap();
        let u = generate_uap(&[&m], "mini_vgg", [3, 16, 16], 7, &cfg(2)).unwrap();
        let bytes = encode_uap(&u);
        assert_eq!(decode_uap(&bytes).unwrap(), u);
        assert!(decode_uap(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'V';
        assert!(decode_uap(&bad).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.uap");
        save_uap(&u, &p).unwrap();
        assert_eq!(load_uap(&p).unwrap(), u);
    }

    #[test]
    fn zero_perturbation_scores_the_prior() {
        let m = build_model(Arch::MiniVgg, 10, 0).unwrap();
        let pixels: Vec<u8> = (0..20 * 3 * 8 * 8).map(|i| (i * 7 % 256) as u8).collect();
        let labels: Vec<u8> = (0..20).map(|i| i % 10).collect();
        let ds = Dataset::from_bytes(pixels, labels, [3, 8, 8], 10, Split::Test).unwrap();
        let u = UapArtifact {
            perturbation: Tensor::zeros(&[3, 8, 8]),
            target: 2,
            epsilon: 0.1,
            source: "m".into(),
        };
        let (batch, _) = ds.gather(&(0..20).collect::<Vec<_>>());
        let preds = m.predict_logits(&batch).unwrap();
        let expect = preds.data().chunks(10).filter(|r| argmax(r) == 2).count() as f64 / 20.0;
        assert_eq!(evaluate_uap(&u, &m, &ds).unwrap(), expect);
        let wrong = UapArtifact {
            perturbation: Tensor::zeros(&[3, 4, 4]),
            ..u
        };
        assert!(matches!(evaluate_uap(&wrong, &m, &ds), Err(Error::Shape(_))));
    }

    #[test]
    fn perturbed_pixels_stay_in_range() {
        let u = UapArtifact {
            perturbation: Tensor::full(&[1, 2, 2], 0.3),
            target: 0,
            epsilon: 0.3,
            source: "m".into(),
        };
        let batch = Tensor::new(&[1, 1, 2, 2], vec![0.0, 0.5, 0.9, 1.0]).unwrap();
        let out = apply_uap(&batch, &u).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.data()[3], 1.0);
    }
}
