use iada_core::checkpoint::{self, Checkpoint};
use iada_core::trainer::{self, TrainConfig};
use iada_core::{PerturbTargets, StopReason};

use crate::args::TrainArgs;
use crate::cmd::{apply_schedule, create_dir, read_checkpoint, read_corpus};
use crate::error::CliError;
use crate::manifest::{file_sha256, sha256_hex, RunManifest};

/// Resolves the config file and flags into one training config.
pub fn resolve(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        cfg = cfg.apply_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    apply_schedule(&a.schedule, &mut cfg.augment);
    if a.no_original_loss {
        cfg.terms.original = false;
    }
    if a.no_perturb_loss {
        cfg.terms.perturbed = false;
    }
    if a.no_agreement_loss {
        cfg.terms.agreement = false;
    }
    if let Some(t) = a.perturb_targets {
        cfg.terms.perturb_targets = t.into();
        if a.no_perturb_loss && cfg.terms.perturb_targets == PerturbTargets::Perturbed {
            return Err(CliError::Usage("--perturb-targets perturbed conflicts with --no-perturb-loss".into()));
        }
    }
    if let Some(r) = a.loss_reduction {
        cfg.terms.reduction = r.into();
    }
    if let Some(r) = a.score_refresh {
        cfg.score_refresh = r.into();
    }
    if let Some(n) = a.max_steps {
        cfg.max_steps = Some(n);
    }
    if let Some(n) = a.max_epochs {
        cfg.max_epochs = n;
    }
    if !cfg.terms.needs_perturbed_view() && (a.schedule.measure.is_some() || a.schedule.no_normalize) {
        return Err(CliError::Usage(
            "perturbation flags given but both the perturb and agreement losses are disabled".into(),
        ));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(a: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve(&a)?;
    let corpus = read_corpus(&a.corpus)?;
    let valid = a.valid.as_deref().map(read_corpus).transpose()?;
    let resume = a.resume.as_deref().map(read_checkpoint).transpose()?;
    create_dir(&a.out)?;

    let config_text = cfg.to_text();
    let mut manifest = RunManifest::new("train", cfg.seed);
    manifest.config_path = a.config.clone();
    manifest.config_sha256 = Some(sha256_hex(config_text.as_bytes()));
    manifest.corpus_checksum = Some(file_sha256(&a.corpus)?);

    let outcome = trainer::train(&cfg, &corpus, valid.as_ref(), resume)?;

    let config_path = a.out.join("config.txt");
    std::fs::write(&config_path, &config_text).map_err(|e| CliError::io(&config_path, e))?;
    let log_path = a.out.join("train.log");
    let mut log = String::from("step\tnll_orig\tnll_pert\tagree\ttotal\n");
    for line in &outcome.log {
        log.push_str(line);
        log.push('\n');
    }
    for e in &outcome.events {
        log.push_str("# ");
        log.push_str(e);
        log.push('\n');
    }
    std::fs::write(&log_path, log).map_err(|e| CliError::io(&log_path, e))?;
    let model_path = a.out.join("model.ckpt");
    checkpoint::save(&Checkpoint::from_model(&outcome.model), &model_path)?;
    let last_path = a.out.join("last.ckpt");
    checkpoint::save(&outcome.resume, &last_path)?;
    for p in [&config_path, &log_path, &model_path, &last_path] {
        manifest.record_output(p)?;
    }
    manifest.checkpoint_path = Some(model_path.clone());
    manifest.emit(Some(&a.out.join("manifest.json")))?;

    let steps = outcome.resume.state.as_ref().map_or(0, |s| s.step);
    println!("steps\t{steps}");
    println!("stop\t{:?}", outcome.stop);
    if let Some(last) = outcome.breakdowns.last() {
        println!("final\t{}", last.log_line(steps));
    }
    if let Some(v) = outcome.valid_losses.iter().cloned().reduce(f64::min) {
        println!("best_valid\t{v}");
    }
    if let StopReason::Diverged { step, value } = outcome.stop {
        return Err(CliError::Numeric(format!(
            "loss diverged at step {step} (value {value}); last good state saved to {}",
            last_path.display()
        )));
    }
    Ok(())
}
