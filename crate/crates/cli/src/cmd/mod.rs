pub mod augment;
pub mod evaluate;
pub mod gen_corpus;
pub mod gradcheck;
pub mod train;

use std::path::Path;

use iada_core::{checkpoint, corpus, AugmentConfig, Checkpoint, Corpus};

use crate::args::ScheduleArgs;
use crate::error::CliError;

pub fn read_corpus(path: &Path) -> Result<Corpus, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("corpus not found: {}", path.display())));
    }
    corpus::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint not found: {}", path.display())));
    }
    checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Overlays command-line schedule flags onto `cfg`.
pub fn apply_schedule(args: &ScheduleArgs, cfg: &mut AugmentConfig) {
    let s = &mut cfg.schedule;
    if let Some(m) = args.measure {
        s.measure = m.into();
    }
    if let Some(d) = args.direction {
        s.direction = d.into();
    }
    if let Some(p) = args.p {
        s.p_ctx = p;
        s.p_cur = p;
    }
    if let Some(p) = args.p_ctx {
        s.p_ctx = p;
    }
    if let Some(p) = args.p_cur {
        s.p_cur = p;
    }
    if let Some(a) = args.alpha {
        s.alpha = a;
    }
    if args.no_normalize {
        s.normalize = false;
    }
    if let Some(st) = args.strategy {
        cfg.strategy = st.into();
    }
}
