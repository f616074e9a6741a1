//! The full training pipeline behind `train`: synthetic data, identity
//! split, backbone, hypernetwork, artifacts on disk.

use crate::backbone::train_reference_backbone;
use crate::config::{RunConfig, System};
use crate::data::{split_identities, synth_identity_dataset};
use crate::error::{Error, Result};
use crate::modelio;
use crate::train::{train, StepMetrics};
use std::path::Path;

/// What a finished training run produced.
pub struct TrainOutcome {
    pub system: System,
    pub history: Vec<StepMetrics>,
    pub backbone_accuracy: f64,
}

/// Run the whole pipeline and write `backbone.hnfv`, `hypernet.hnfv`,
/// `train_log.jsonl`, and the echoed `config.json` into `out`.
pub fn run_training(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let dataset = synth_identity_dataset(&cfg.synth_config())?;
    let (train_ds, _val, _test) = split_identities(
        &dataset,
        (cfg.train_frac, cfg.val_frac, cfg.test_frac),
        cfg.split_seed,
    )?;
    let (backbone, backbone_accuracy) =
        train_reference_backbone(&train_ds, &cfg.backbone_config())?;
    let arch = cfg.arch()?;
    let log_path = out.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    let (hypernet, history) = train(
        &train_ds,
        &backbone,
        arch.clone(),
        &cfg.hypernet_config(),
        &cfg.train_config(),
        Some(&mut log),
    )?;
    modelio::save_backbone(&backbone, out.join("backbone.hnfv"))?;
    modelio::save_hypernet(&hypernet, &arch.id, arch.input_size, out.join("hypernet.hnfv"))?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?)
        .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;
    Ok(TrainOutcome {
        system: System { backbone, hypernet, arch },
        history,
        backbone_accuracy,
    })
}

/// Load a system (backbone + hypernet) from a training output directory.
pub fn load_system(dir: &Path) -> Result<System> {
    let backbone = modelio::load_backbone(dir.join("backbone.hnfv"))?;
    let (hypernet, arch) = modelio::load_hypernet(dir.join("hypernet.hnfv"))?;
    Ok(System { backbone, hypernet, arch })
}
