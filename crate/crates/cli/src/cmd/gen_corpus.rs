use iada_core::{corpus, GeneratorConfig};

use crate::args::GenCorpusArgs;
use crate::cmd::create_dir;
use crate::error::CliError;
use crate::manifest::RunManifest;

pub fn run(a: GenCorpusArgs) -> Result<(), CliError> {
    let cfg = GeneratorConfig {
        vocab_content: a.vocab_content,
        n_docs: a.n_docs,
        n_valid_docs: a.n_valid_docs,
        n_test_docs: a.n_test_docs,
        sents_per_doc: a.sents_per_doc,
        cur_len: a.cur_len,
        ctx_sent_len: a.ctx_sent_len,
        ctx_window: a.ctx_window,
        corr_len: a.corr_len,
        seed: a.seed,
        corr_rule: a.corr_rule.into(),
    };
    let splits = corpus::generate(&cfg)?;
    create_dir(&a.out_dir)?;
    let mut manifest = RunManifest::new("gen-corpus", a.seed);
    manifest.config_sha256 = Some(crate::manifest::sha256_hex(format!("{cfg:?}").as_bytes()));
    for (name, c) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let path = a.out_dir.join(format!("{name}.txt"));
        corpus::write(c, &path)?;
        manifest.record_output(&path)?;
        if name == "train" {
            manifest.corpus_checksum = Some(crate::manifest::file_sha256(&path)?);
        }
    }
    println!(
        "wrote {} train, {} valid, {} test records to {} (model vocab_size {})",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        a.out_dir.display(),
        cfg.vocab_size()
    );
    manifest.emit(Some(&a.out_dir.join("manifest.json")))
}
