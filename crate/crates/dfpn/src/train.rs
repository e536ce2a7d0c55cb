//! Deterministic per-image SGD: seeded shuffling and flip augmentation,
//! a CSV loss log, and one checkpoint per epoch.
//!
//! Every random decision for epoch `e` comes from a ChaCha8 stream keyed
//! by `(seed, e)`, so resuming from the epoch-`k` checkpoint replays
//! epochs `k+1..` bit-for-bit identically to a run that never stopped.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::assign_targets;
use crate::data::{flip_horizontal, Sample};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::loss::{detection_loss, FocalParams};
use crate::model::DetectorModel;
use crate::tensor::{save_checkpoint, sgd_step, SgdConfig, Tensor};

pub const LOG_FILE: &str = "loss_log.csv";
pub const LOG_HEADER: &str = "iteration,class_loss,reg_loss,total,positive_anchor_count";

/// Training hyperparameters. A zero learning rate is allowed (the loop
/// degenerates to evaluation), which makes "no step means no change"
/// testable.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub focal: FocalParams,
    pub reg_weight: f64,
    pub flip_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.01,
            seed: 0,
            focal: FocalParams::default(),
            reg_weight: 1.0,
            flip_probability: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::Config(format!(
                "reg_weight must be finite and non-negative, got {}",
                self.reg_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip_probability must be in [0, 1], got {}",
                self.flip_probability
            )));
        }
        self.focal.validate()
    }
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Bookkeeping stored inside a checkpoint under `__meta.*` names, which
/// the weight loader skips. u64 values are split into two exact 32-bit
/// halves per f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub manifest_hash: Option<u64>,
    pub epoch: Option<usize>,
    pub seed: Option<u64>,
}

fn split_u64(v: u64) -> Tensor {
    Tensor::from_vec(&[2], vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64])
}

fn join_u64(t: &Tensor) -> Option<u64> {
    let v = t.to_vec();
    if v.len() != 2 {
        return None;
    }
    Some(((v[0] as u64) << 32) | (v[1] as u64))
}

fn meta_entries(manifest_hash: u64, epoch: usize, seed: u64) -> Vec<(String, Tensor)> {
    vec![
        ("__meta.manifest_hash".to_string(), split_u64(manifest_hash)),
        ("__meta.epoch".to_string(), Tensor::scalar(epoch as f64)),
        ("__meta.seed".to_string(), split_u64(seed)),
    ]
}

/// Pull the `__meta.*` entries back out of a loaded checkpoint.
pub fn read_checkpoint_meta(entries: &[(String, Tensor)]) -> CheckpointMeta {
    let mut meta = CheckpointMeta::default();
    for (name, tensor) in entries {
        match name.as_str() {
            "__meta.manifest_hash" => meta.manifest_hash = join_u64(tensor),
            "__meta.epoch" => meta.epoch = Some(tensor.to_vec()[0] as usize),
            "__meta.seed" => meta.seed = join_u64(tensor),
            _ => {}
        }
    }
    meta
}

/// Write the model plus run metadata as an epoch checkpoint.
pub fn save_training_checkpoint(
    path: &Path,
    model: &DetectorModel,
    epoch: usize,
    seed: u64,
) -> Result<()> {
    let mut entries = meta_entries(model.config.manifest_hash(), epoch, seed);
    entries.extend(model.named_parameters());
    save_checkpoint(path, &entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Total completed epochs, counting any the run resumed past.
    pub epochs_run: usize,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub last_total_loss: f64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Run epochs `start_epoch + 1 ..= cfg.epochs` over `samples`. Pass
/// `start_epoch = 0` for a fresh run, or the epoch of a just-loaded
/// checkpoint to resume; when resuming, new loss rows are appended to the
/// existing log. Any error (a non-finite loss included) aborts the run
/// and leaves the last completed epoch's checkpoint in place.
pub fn train(
    model: &DetectorModel,
    samples: &[Sample],
    cfg: &TrainConfig,
    out_dir: &Path,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if start_epoch >= cfg.epochs {
        return Err(Error::Config(format!(
            "start epoch {start_epoch} leaves nothing to do with {} total epochs",
            cfg.epochs
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = if start_epoch > 0 && log_path.is_file() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(Error::io(&log_path))?
    } else {
        let mut f = std::fs::File::create(&log_path).map_err(Error::io(&log_path))?;
        writeln!(f, "{LOG_HEADER}").map_err(Error::io(&log_path))?;
        f
    };

    let params = model.parameters();
    let a = model.config.anchors.anchors_per_location();
    let k = model.config.num_classes;
    let mut last_total = f64::NAN;
    let mut final_checkpoint = checkpoint_path(out_dir, start_epoch);

    for epoch in start_epoch + 1..=cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (pos, &si) in order.iter().enumerate() {
            let flipped;
            let sample = if rng.gen_bool(cfg.flip_probability) {
                flipped = flip_horizontal(&samples[si]);
                &flipped
            } else {
                &samples[si]
            };
            let output = model.forward(&sample.image)?;
            let anchors: Vec<BBox> = model.anchors_for(&output).into_iter().flatten().collect();
            let assignment = assign_targets(&anchors, &sample.training_boxes(), k)?;
            let breakdown = detection_loss(&output, &assignment, a, k, &cfg.focal, cfg.reg_weight)?;
            let (class_v, reg_v, total_v) =
                (breakdown.class_loss.item(), breakdown.reg_loss.item(), breakdown.total.item());
            breakdown.total.backward();
            if cfg.learning_rate > 0.0 {
                sgd_step(&params, &SgdConfig { learning_rate: cfg.learning_rate, seed: cfg.seed });
            } else {
                for p in &params {
                    p.zero_grad();
                }
            }

            let iteration = (epoch - 1) * samples.len() + pos + 1;
            writeln!(
                log,
                "{iteration},{class_v},{reg_v},{total_v},{}",
                breakdown.positive_count
            )
            .map_err(Error::io(&log_path))?;
            epoch_total += total_v;
            last_total = total_v;
        }
        log.flush().map_err(Error::io(&log_path))?;
        final_checkpoint = checkpoint_path(out_dir, epoch);
        save_training_checkpoint(&final_checkpoint, model, epoch, cfg.seed)?;
        log::info!(
            "epoch {epoch}/{}: mean total loss {:.6}",
            cfg.epochs,
            epoch_total / samples.len() as f64
        );
    }

    Ok(TrainOutcome {
        epochs_run: cfg.epochs,
        final_checkpoint,
        log_path,
        last_total_loss: last_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::model::{BackboneConfig, BackboneKind, ModelConfig};
    use crate::tensor::load_checkpoint;

    fn tiny_model_config() -> ModelConfig {
        let mut config = ModelConfig::tiny(BackboneKind::TinyPlain, 2);
        config.backbone = BackboneConfig {
            kind: BackboneKind::TinyPlain,
            stage_channels: vec![4, 8, 8],
            stage_strides: vec![2, 2, 2],
        };
        config.c_pyr = 8;
        config.head_depth = 1;
        config
    }

    fn tiny_samples(count: usize) -> Vec<Sample> {
        let cfg = SyntheticConfig {
            image_size: 32,
            min_object_size: 16,
            max_object_size: 24,
            max_objects: 1,
            seed: 400,
            ..Default::default()
        };
        generate_synthetic(&cfg, count).unwrap()
    }

    fn quick_train_config(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, learning_rate: 0.001, seed: 5, ..Default::default() }
    }

    #[test]
    fn one_epoch_writes_checkpoint_and_log_rows() {
        let model = DetectorModel::new(tiny_model_config(), 1).unwrap();
        let samples = tiny_samples(8);
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(&model, &samples, &quick_train_config(1), dir.path(), 0).unwrap();
        assert!(outcome.final_checkpoint.is_file());
        assert_eq!(outcome.final_checkpoint, checkpoint_path(dir.path(), 1));
        let log = std::fs::read_to_string(&outcome.log_path).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 9); // header + 8 rows
        assert_eq!(lines[0], LOG_HEADER);
        for (i, row) in lines[1..].iter().enumerate() {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields.len(), 5);
            assert_eq!(fields[0], (i + 1).to_string());
            assert!(fields[3].parse::<f64>().unwrap().is_finite());
        }
    }

    #[test]
    fn checkpoint_meta_round_trips() {
        let model = DetectorModel::new(tiny_model_config(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = checkpoint_path(dir.path(), 3);
        save_training_checkpoint(&path, &model, 3, 0xdead_beef_cafe_f00d).unwrap();
        let entries = load_checkpoint(&path).unwrap();
        let meta = read_checkpoint_meta(&entries);
        assert_eq!(meta.manifest_hash, Some(model.config.manifest_hash()));
        assert_eq!(meta.epoch, Some(3));
        assert_eq!(meta.seed, Some(0xdead_beef_cafe_f00d));
        // and the weights load back despite the extra meta entries
        let other = DetectorModel::new(tiny_model_config(), 99).unwrap();
        other.load_state(&entries).unwrap();
        assert_eq!(other.parameters()[0].to_vec(), model.parameters()[0].to_vec());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let model = DetectorModel::new(tiny_model_config(), 2).unwrap();
        let before: Vec<Vec<f64>> = model.parameters().iter().map(Tensor::to_vec).collect();
        let samples = tiny_samples(3);
        let cfg = TrainConfig { learning_rate: 0.0, ..quick_train_config(1) };
        let dir = tempfile::tempdir().unwrap();
        train(&model, &samples, &cfg, dir.path(), 0).unwrap();
        let after: Vec<Vec<f64>> = model.parameters().iter().map(Tensor::to_vec).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let samples = tiny_samples(4);
        let cfg = quick_train_config(2);
        let run = |dir: &Path| {
            let model = DetectorModel::new(tiny_model_config(), 7).unwrap();
            train(&model, &samples, &cfg, dir, 0).unwrap()
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (o1, o2) = (run(d1.path()), run(d2.path()));
        assert_eq!(
            std::fs::read(&o1.log_path).unwrap(),
            std::fs::read(&o2.log_path).unwrap()
        );
        assert_eq!(
            std::fs::read(&o1.final_checkpoint).unwrap(),
            std::fs::read(&o2.final_checkpoint).unwrap()
        );
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let samples = tiny_samples(4);
        let cfg = quick_train_config(3);

        let full_dir = tempfile::tempdir().unwrap();
        let full_model = DetectorModel::new(tiny_model_config(), 7).unwrap();
        let full = train(&full_model, &samples, &cfg, full_dir.path(), 0).unwrap();

        // stop after epoch 1, reload, continue
        let resumed_dir = tempfile::tempdir().unwrap();
        let first = DetectorModel::new(tiny_model_config(), 7).unwrap();
        train(&first, &samples, &TrainConfig { epochs: 1, ..cfg.clone() }, resumed_dir.path(), 0)
            .unwrap();
        let reloaded = DetectorModel::new(tiny_model_config(), 1234).unwrap();
        let entries = load_checkpoint(&checkpoint_path(resumed_dir.path(), 1)).unwrap();
        reloaded.load_state(&entries).unwrap();
        let meta = read_checkpoint_meta(&entries);
        let resumed =
            train(&reloaded, &samples, &cfg, resumed_dir.path(), meta.epoch.unwrap()).unwrap();

        assert_eq!(
            std::fs::read(&full.final_checkpoint).unwrap(),
            std::fs::read(&resumed.final_checkpoint).unwrap()
        );
        assert_eq!(
            std::fs::read(&full.log_path).unwrap(),
            std::fs::read(&resumed.log_path).unwrap()
        );
    }

    #[test]
    fn mid_run_error_keeps_last_good_checkpoint() {
        let model = DetectorModel::new(tiny_model_config(), 3).unwrap();
        let mut samples = tiny_samples(3);
        // class id beyond num_classes blows up epoch 1, image order aside
        for s in &mut samples {
            for a in &mut s.annotations {
                a.class_id = 9;
            }
        }
        let good = tiny_samples(3);
        let dir = tempfile::tempdir().unwrap();
        train(&model, &good, &TrainConfig { epochs: 1, ..quick_train_config(1) }, dir.path(), 0)
            .unwrap();
        let ckpt = checkpoint_path(dir.path(), 1);
        let bytes_before = std::fs::read(&ckpt).unwrap();
        let err = train(&model, &samples, &quick_train_config(2), dir.path(), 1);
        assert!(err.is_err());
        assert_eq!(std::fs::read(&ckpt).unwrap(), bytes_before);
        assert!(!checkpoint_path(dir.path(), 2).exists());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { flip_probability: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { reg_weight: f64::NAN, ..Default::default() }.validate().is_err());
        let model = DetectorModel::new(tiny_model_config(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(train(&model, &[], &quick_train_config(1), dir.path(), 0).is_err());
        assert!(train(&model, &tiny_samples(1), &quick_train_config(1), dir.path(), 1).is_err());
    }
}
