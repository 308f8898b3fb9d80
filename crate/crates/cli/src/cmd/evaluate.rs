use iada_core::EvalReport;

use crate::args::EvaluateArgs;
use crate::cmd::{read_checkpoint, read_corpus};
use crate::error::CliError;
use crate::manifest::{file_sha256, RunManifest};

pub fn run(a: EvaluateArgs) -> Result<(), CliError> {
    let model = read_checkpoint(&a.checkpoint)?.into_model()?;
    let corpus = read_corpus(&a.corpus)?;
    if corpus.is_empty() {
        return Err(CliError::Data(format!("{}: corpus has no records", a.corpus.display())));
    }
    let noisy_seed = a.noisy_context.then_some(a.seed);
    let report = EvalReport::run(&model, &corpus, a.mask_current, noisy_seed)?;

    let mut text = report.lines().join("\n") + "\n";
    if a.json {
        text.push_str(&serde_json::to_string(&report).expect("report serializes"));
        text.push('\n');
    }
    let mut manifest = RunManifest::new("evaluate", a.seed);
    manifest.corpus_checksum = Some(file_sha256(&a.corpus)?);
    manifest.checkpoint_path = Some(a.checkpoint.clone());
    match &a.out {
        Some(p) => {
            std::fs::write(p, &text).map_err(|e| CliError::io(p, e))?;
            manifest.record_output(p)?;
        }
        None => print!("{text}"),
    }
    manifest.emit(a.manifest.as_deref())
}
