use iada_core::augment::{self, stream_seed};
use iada_core::{corpus, AugmentConfig, Corpus, CorpusRecord, Measure, Model, ModelConfig};

use crate::args::AugmentArgs;
use crate::cmd::{apply_schedule, read_checkpoint, read_corpus};
use crate::error::CliError;
use crate::manifest::{file_sha256, sha256_hex, RunManifest};

pub fn run(a: AugmentArgs) -> Result<(), CliError> {
    let mut cfg = AugmentConfig::default();
    apply_schedule(&a.schedule, &mut cfg);
    cfg.schedule.validate()?;
    let input = read_corpus(&a.corpus)?;

    let model = match &a.checkpoint {
        Some(p) => read_checkpoint(p)?.into_model()?,
        None if matches!(cfg.schedule.measure, Measure::TNorm | Measure::GNorm) => {
            return Err(CliError::Usage(format!(
                "--checkpoint is required for --measure {}",
                cfg.schedule.measure.as_str()
            )));
        }
        // Model-free measures only need a vocabulary that covers the corpus.
        None => {
            let max_id = input
                .pairs()
                .flat_map(|p| p.src_tokens.iter().chain(&p.tgt_tokens))
                .copied()
                .max()
                .unwrap_or(0) as usize;
            let longest = input.pairs().map(|p| p.src_tokens.len().max(p.tgt_tokens.len())).max().unwrap_or(0);
            let base = ModelConfig::default();
            Model::new(ModelConfig {
                vocab_size: (max_id + 1).max(7),
                max_len: base.max_len.max(longest),
                ..base
            })?
        }
    };

    let mut records = Vec::with_capacity(input.len());
    let mut dump = String::from("doc\tside\tpos\ttok\tphi\tpsi\tp\n");
    let mut masked = 0usize;
    let mut total = 0usize;
    for rec in &input.records {
        let pair = &rec.pair;
        let seed = stream_seed(&[a.seed, pair.doc_id as u64, pair.sent_id as u64]);
        let (view, traces) = augment::perturb_document(&model, pair, &cfg, seed)?;
        masked += view.masked_count();
        total += pair.src_tokens.len() + pair.tgt_tokens.len();
        if a.dump.is_some() {
            for line in traces
                .src
                .dump_lines(pair.doc_id, &pair.src_tokens)
                .into_iter()
                .chain(traces.tgt.dump_lines(pair.doc_id, &pair.tgt_tokens))
            {
                dump.push_str(&line);
                dump.push('\n');
            }
        }
        records.push(CorpusRecord {
            pair: view.pair,
            corr_positions: rec.corr_positions.clone(),
        });
    }

    let mut manifest = RunManifest::new("augment", a.seed);
    manifest.config_sha256 = Some(sha256_hex(format!("{cfg:?}").as_bytes()));
    manifest.corpus_checksum = Some(file_sha256(&a.corpus)?);
    manifest.checkpoint_path = a.checkpoint.clone();
    corpus::write(&Corpus { records }, &a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    manifest.record_output(&a.out)?;
    if let Some(p) = &a.dump {
        std::fs::write(p, &dump).map_err(|e| CliError::io(p, e))?;
        manifest.record_output(p)?;
    }
    println!("records\t{}", input.len());
    println!("masked\t{masked}");
    println!("rate\t{:.6}", masked as f64 / total.max(1) as f64);
    manifest.emit(a.manifest.as_deref())
}
