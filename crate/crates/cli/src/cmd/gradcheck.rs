use iada_core::gradcheck::{self, GradcheckConfig};

use crate::args::GradcheckArgs;
use crate::error::CliError;
use crate::manifest::{sha256_hex, RunManifest};

pub fn run(a: GradcheckArgs) -> Result<(), CliError> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        probes: a.probes,
        step: a.step,
        tolerance: a.tolerance,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    let worst = report
        .probes
        .iter()
        .max_by(|x, y| x.rel_error.total_cmp(&y.rel_error));
    println!("probes\t{}", report.probes.len());
    println!("max_rel_error\t{:e}", report.max_rel_error);
    println!("tolerance\t{:e}", report.tolerance);
    if let Some(w) = worst {
        println!("worst\t{:?}\tanalytic {:e}\tnumeric {:e}", w.target, w.analytic, w.numeric);
    }
    let mut manifest = RunManifest::new("gradcheck", a.seed);
    manifest.config_sha256 = Some(sha256_hex(format!("{cfg:?}").as_bytes()));
    manifest.emit(a.manifest.as_deref())?;
    if report.passed() {
        println!("gradcheck\tpass");
        Ok(())
    } else {
        println!("gradcheck\tfail");
        Err(CliError::Numeric(format!(
            "max relative error {:e} exceeds tolerance {:e}",
            report.max_rel_error, report.tolerance
        )))
    }
}
