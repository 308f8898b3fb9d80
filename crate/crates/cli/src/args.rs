use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iada_core::{CorrRule, Direction, Measure, PerturbTargets, Reduction, ScoreRefresh, Strategy};

#[derive(Debug, Parser)]
#[command(name = "iada", version, about = "Importance-aware data augmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/valid/test corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Evaluate(EvaluateArgs),
    /// Write a perturbed corpus and optionally the per-token importance dump.
    Augment(AugmentArgs),
    /// Compare autodiff gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Directory receiving train.txt, valid.txt, test.txt and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub vocab_content: usize,
    #[arg(long, default_value_t = 50)]
    pub n_docs: usize,
    #[arg(long, default_value_t = 5)]
    pub n_valid_docs: usize,
    #[arg(long, default_value_t = 5)]
    pub n_test_docs: usize,
    #[arg(long, default_value_t = 5)]
    pub sents_per_doc: usize,
    #[arg(long, default_value_t = 8)]
    pub cur_len: usize,
    #[arg(long, default_value_t = 8)]
    pub ctx_sent_len: usize,
    #[arg(long, default_value_t = 3)]
    pub ctx_window: usize,
    #[arg(long, default_value_t = 4)]
    pub corr_len: usize,
    #[arg(long, value_enum, default_value_t = RuleArg::Copy)]
    pub corr_rule: RuleArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RuleArg {
    Copy,
    Affine,
}

impl From<RuleArg> for CorrRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Copy => CorrRule::Copy,
            RuleArg::Affine => CorrRule::AffineMap,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MeasureArg {
    Tnorm,
    Gnorm,
    Random,
    Uniform,
}

impl From<MeasureArg> for Measure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::Tnorm => Measure::TNorm,
            MeasureArg::Gnorm => Measure::GNorm,
            MeasureArg::Random => Measure::Random,
            MeasureArg::Uniform => Measure::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Drop,
    Replace,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Drop => Strategy::Drop,
            StrategyArg::Replace => Strategy::Replace,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DirectionArg {
    CtxDownCurUp,
    CtxUpCurDown,
    BothDown,
    BothUp,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::CtxDownCurUp => Direction::CtxDownCurUp,
            DirectionArg::CtxUpCurDown => Direction::CtxUpCurDown,
            DirectionArg::BothDown => Direction::BothDown,
            DirectionArg::BothUp => Direction::BothUp,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetsArg {
    Original,
    Perturbed,
}

impl From<TargetsArg> for PerturbTargets {
    fn from(t: TargetsArg) -> Self {
        match t {
            TargetsArg::Original => PerturbTargets::Original,
            TargetsArg::Perturbed => PerturbTargets::Perturbed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReductionArg {
    Mean,
    Sum,
}

impl From<ReductionArg> for Reduction {
    fn from(r: ReductionArg) -> Self {
        match r {
            ReductionArg::Mean => Reduction::Mean,
            ReductionArg::Sum => Reduction::Sum,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RefreshArg {
    Step,
    Epoch,
}

impl From<RefreshArg> for ScoreRefresh {
    fn from(r: RefreshArg) -> Self {
        match r {
            RefreshArg::Step => ScoreRefresh::Step,
            RefreshArg::Epoch => ScoreRefresh::Epoch,
        }
    }
}

/// Perturbation settings shared by `train` and `augment`; unset flags keep
/// the config-file (or default) value.
#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, value_enum)]
    pub measure: Option<MeasureArg>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    /// Base probability for both segments.
    #[arg(long, conflicts_with_all = ["p_ctx", "p_cur"])]
    pub p: Option<f64>,
    #[arg(long)]
    pub p_ctx: Option<f64>,
    #[arg(long)]
    pub p_cur: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Feed raw scores into the logit schedule.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Validation corpus; enables early stopping.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Output directory for checkpoints, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long)]
    pub no_perturb_loss: bool,
    #[arg(long)]
    pub no_agreement_loss: bool,
    #[arg(long)]
    pub no_original_loss: bool,
    #[arg(long, value_enum)]
    pub perturb_targets: Option<TargetsArg>,
    #[arg(long, value_enum)]
    pub loss_reduction: Option<ReductionArg>,
    #[arg(long, value_enum)]
    pub score_refresh: Option<RefreshArg>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Also run the two-of-three noisy-context protocol.
    #[arg(long)]
    pub noisy_context: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mask this many leading current-source tokens for an extra pass.
    #[arg(long)]
    pub mask_current: Option<usize>,
    /// Append a single-line JSON record to the report.
    #[arg(long)]
    pub json: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Model used for scoring; required for tnorm and gnorm.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Perturbed corpus output.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-token importance dump output.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}
