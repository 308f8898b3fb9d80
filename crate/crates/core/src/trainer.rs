//! Training loop: token-budget batches, per-pair IADA objective, Adam with
//! inverse-square-root warmup, early stopping and resumable checkpoints.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, stream_seed, AugmentConfig};
use crate::checkpoint::{AdamState, Checkpoint, LoopState};
use crate::corpus::Corpus;
use crate::error::TrainError;
use crate::importance::{self, Measure, Side};
use crate::model::{Model, ModelConfig, ParamStore, Tape};
use crate::objective::{self, LossBreakdown, LossTerms, PerturbTargets, Reduction};
use crate::pair::DocumentPair;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub peak_lr: f64,
    pub warmup: u64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            peak_lr: 3e-3,
            warmup: 200,
            eps: 1e-9,
        }
    }
}

/// Learning rate at 1-based step `t`: linear warmup to the peak, then
/// decay proportional to `t^-1/2`.
pub fn lr_at(t: u64, opt: &OptimizerConfig) -> f64 {
    let t = t.max(1) as f64;
    let w = opt.warmup as f64;
    opt.peak_lr * (t / w).min((w / t).sqrt())
}

/// One bias-corrected Adam update. Returns `false` (and leaves everything
/// untouched) if any gradient entry is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    opt: &OptimizerConfig,
) -> Result<bool, TrainError> {
    if grads.len() != params.len() {
        return Err(TrainError::Config(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!(
                "gradient for {name} has shape {:?}, expected {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if !grads.iter().all(Tensor::is_finite) {
        return Ok(false);
    }
    state.t += 1;
    let bc1 = 1.0 - opt.beta1.powi(state.t as i32);
    let bc2 = 1.0 - opt.beta2.powi(state.t as i32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = opt.beta1 * *mj + (1.0 - opt.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = opt.beta2 * *vj + (1.0 - opt.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            *pj -= lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(true)
}

/// When importance scores are recomputed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreRefresh {
    Step,
    Epoch,
}

impl std::str::FromStr for ScoreRefresh {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "step" => Ok(ScoreRefresh::Step),
            "epoch" => Ok(ScoreRefresh::Epoch),
            _ => Err(format!("unknown score refresh `{s}` (step|epoch)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_tokens: usize,
    pub max_epochs: u64,
    pub max_steps: Option<u64>,
    pub patience: u64,
    pub augment: AugmentConfig,
    pub terms: LossTerms,
    pub score_refresh: ScoreRefresh,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_tokens: 2048,
            max_epochs: 200,
            max_steps: None,
            patience: 5,
            augment: AugmentConfig::default(),
            terms: LossTerms::default(),
            score_refresh: ScoreRefresh::Step,
            seed: 0,
        }
    }
}

fn onoff(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

impl TrainConfig {
    /// Plain document-level training without augmentation.
    pub fn doc2doc() -> Self {
        Self {
            terms: LossTerms::original_only(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let bad = |m: String| Err(TrainError::Config(m));
        let o = &self.optimizer;
        if !(o.beta1 > 0.0 && o.beta1 < 1.0) || !(o.beta2 > 0.0 && o.beta2 < 1.0) {
            return bad(format!("beta1 {} and beta2 {} must lie in (0, 1)", o.beta1, o.beta2));
        }
        if o.warmup < 1 {
            return bad("warmup must be at least 1".into());
        }
        if !o.peak_lr.is_finite() || o.peak_lr <= 0.0 || !o.eps.is_finite() || o.eps <= 0.0 {
            return bad("lr and adam_eps must be positive".into());
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens must be positive".into());
        }
        let t = &self.terms;
        if !t.original && !t.perturbed && !t.agreement {
            return bad("every loss term is disabled".into());
        }
        if t.needs_perturbed_view() {
            let s = &self.augment.schedule;
            if !s.normalize && matches!(s.measure, Measure::Random | Measure::Uniform) {
                return bad(format!("normalize = false has no meaning for measure {}", s.measure.as_str()));
            }
            s.validate()?;
        }
        Ok(())
    }

    /// `key = value` lines covering every field.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optimizer;
        let s = &self.augment.schedule;
        let t = &self.terms;
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("model_seed = {}", m.seed),
            format!("vocab_size = {}", m.vocab_size),
            format!("d_model = {}", m.d_model),
            format!("n_heads = {}", m.n_heads),
            format!("n_layers = {}", m.n_layers),
            format!("d_ffn = {}", m.d_ffn),
            format!("max_len = {}", m.max_len),
            format!("dropout = {:?}", m.dropout_rate),
            format!("beta1 = {:?}", o.beta1),
            format!("beta2 = {:?}", o.beta2),
            format!("lr = {:?}", o.peak_lr),
            format!("warmup = {}", o.warmup),
            format!("adam_eps = {:?}", o.eps),
            format!("batch_tokens = {}", self.batch_tokens),
            format!("max_epochs = {}", self.max_epochs),
            format!("patience = {}", self.patience),
            format!("measure = {}", s.measure.as_str()),
            format!("strategy = {}", self.augment.strategy.as_str()),
            format!("direction = {}", s.direction.as_str()),
            format!("p_ctx = {:?}", s.p_ctx),
            format!("p_cur = {:?}", s.p_cur),
            format!("alpha = {:?}", s.alpha),
            format!("normalize = {}", onoff(s.normalize)),
            format!("loss_original = {}", onoff(t.original)),
            format!("loss_perturbed = {}", onoff(t.perturbed)),
            format!("loss_agreement = {}", onoff(t.agreement)),
            format!(
                "perturb_targets = {}",
                match t.perturb_targets {
                    PerturbTargets::Original => "original",
                    PerturbTargets::Perturbed => "perturbed",
                }
            ),
            format!(
                "loss_reduction = {}",
                match t.reduction {
                    Reduction::Mean => "mean",
                    Reduction::Sum => "sum",
                }
            ),
            format!(
                "score_refresh = {}",
                match self.score_refresh {
                    ScoreRefresh::Step => "step",
                    ScoreRefresh::Epoch => "epoch",
                }
            ),
        ];
        if let Some(n) = self.max_steps {
            lines.push(format!("max_steps = {n}"));
        }
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; `seed` also seeds the model unless `model_seed`
    /// is given.
    pub fn apply_text(mut self, text: &str) -> Result<Self, TrainError> {
        let mut model_seed = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| TrainError::ConfigParse { line: line_no, reason };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            macro_rules! num {
                () => {
                    value.parse().map_err(|e| err(format!("{key}: `{value}`: {e}")))?
                };
            }
            let flag = || -> Result<bool, TrainError> {
                match value {
                    "true" | "on" | "yes" | "1" => Ok(true),
                    "false" | "off" | "no" | "0" => Ok(false),
                    _ => Err(err(format!("{key}: expected true or false, got `{value}`"))),
                }
            };
            match key {
                "seed" => self.seed = num!(),
                "model_seed" => model_seed = Some(num!()),
                "vocab_size" => self.model.vocab_size = num!(),
                "d_model" => self.model.d_model = num!(),
                "n_heads" => self.model.n_heads = num!(),
                "n_layers" => self.model.n_layers = num!(),
                "d_ffn" => self.model.d_ffn = num!(),
                "max_len" => self.model.max_len = num!(),
                "dropout" => self.model.dropout_rate = num!(),
                "beta1" => self.optimizer.beta1 = num!(),
                "beta2" => self.optimizer.beta2 = num!(),
                "lr" => self.optimizer.peak_lr = num!(),
                "warmup" => self.optimizer.warmup = num!(),
                "adam_eps" => self.optimizer.eps = num!(),
                "batch_tokens" => self.batch_tokens = num!(),
                "max_epochs" => self.max_epochs = num!(),
                "max_steps" => self.max_steps = Some(num!()),
                "patience" => self.patience = num!(),
                "measure" => self.augment.schedule.measure = value.parse().map_err(|e: String| err(e))?,
                "strategy" => self.augment.strategy = value.parse().map_err(|e: String| err(e))?,
                "direction" => self.augment.schedule.direction = value.parse().map_err(|e: String| err(e))?,
                "p" => {
                    let p: f64 = num!();
                    self.augment.schedule.p_ctx = p;
                    self.augment.schedule.p_cur = p;
                }
                "p_ctx" => self.augment.schedule.p_ctx = num!(),
                "p_cur" => self.augment.schedule.p_cur = num!(),
                "alpha" => self.augment.schedule.alpha = num!(),
                "normalize" => self.augment.schedule.normalize = flag()?,
                "loss_original" => self.terms.original = flag()?,
                "loss_perturbed" => self.terms.perturbed = flag()?,
                "loss_agreement" => self.terms.agreement = flag()?,
                "perturb_targets" => {
                    self.terms.perturb_targets = match value {
                        "original" => PerturbTargets::Original,
                        "perturbed" => PerturbTargets::Perturbed,
                        _ => return Err(err(format!("perturb_targets: expected original or perturbed, got `{value}`"))),
                    }
                }
                "loss_reduction" => {
                    self.terms.reduction = match value {
                        "mean" => Reduction::Mean,
                        "sum" => Reduction::Sum,
                        _ => return Err(err(format!("loss_reduction: expected mean or sum, got `{value}`"))),
                    }
                }
                "score_refresh" => self.score_refresh = value.parse().map_err(|e: String| err(e))?,
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
            if key == "seed" && model_seed.is_none() {
                self.model.seed = self.seed;
            }
        }
        if let Some(s) = model_seed {
            self.model.seed = s;
        }
        Ok(self)
    }
}

/// Orders pairs by `(doc_id, sent_id)`, shuffles with the `(seed, epoch)`
/// stream and packs them greedily into batches of at most `batch_tokens`
/// tokens (a single oversized pair forms its own batch).
pub fn batches(pairs: &[&DocumentPair], batch_tokens: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].doc_id, pairs[i].sent_id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[seed, epoch, 0xBA7C])));
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = pairs[i].token_count();
        if !cur.is_empty() && tokens + n > batch_tokens {
            out.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += n;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Sums `src` into `acc`, starting it if empty.
pub fn accumulate(acc: &mut Option<Vec<Tensor>>, src: Vec<Tensor>) {
    match acc {
        None => *acc = Some(src),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(&src) {
                x.add_assign(y);
            }
        }
    }
}

/// Multiplies every gradient entry by `1 / n`.
pub fn average(grads: &mut [Tensor], n: usize) {
    let w = 1.0 / n as f64;
    for g in grads {
        for v in g.data_mut() {
            *v *= w;
        }
    }
}

/// Mean original-view NLL over a corpus, dropout off.
pub fn validation_loss(model: &Model, corpus: &Corpus, reduction: Reduction) -> Result<f64, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut total = 0.0;
    for pair in corpus.pairs() {
        let mut tape = Tape::new(model);
        let (_, loss, _) = objective::original_loss(&mut tape, pair, reduction)?;
        total += tape.graph.value(loss).item();
    }
    Ok(total / corpus.len() as f64)
}

type RawScores = (Vec<f64>, Vec<f64>);

/// Gradients and loss terms of one pair at one step.
pub struct PairStep {
    pub grads: Vec<Tensor>,
    pub breakdown: LossBreakdown,
    pub masked: usize,
}

/// Computes one pair's contribution. With the original term on and a
/// perturbed view needed, the original NLL is differentiated on its own
/// first; that pass also yields the gradient-norm scores, so scoring costs
/// no extra forward pass. The remaining terms follow in a second backward
/// over the same tape.
pub fn pair_step(
    model: &Model,
    pair: &DocumentPair,
    cfg: &TrainConfig,
    step: u64,
    epoch: u64,
    cached: Option<&RawScores>,
) -> Result<PairStep, TrainError> {
    let terms = &cfg.terms;
    let schedule = &cfg.augment.schedule;
    let key = [cfg.seed, step, pair.doc_id as u64, pair.sent_id as u64];
    let dropout = model.config().dropout_rate > 0.0;
    let mut tape = if dropout {
        Tape::with_dropout(model, stream_seed(&[key[0], key[1], key[2], key[3], 3]))
    } else {
        Tape::new(model)
    };
    let (trace, nll_o, count) = objective::original_loss(&mut tape, pair, terms.reduction)?;
    let need_view = terms.needs_perturbed_view();
    let mut grads: Option<Vec<Tensor>> = None;
    let mut shared = None;
    if need_view && terms.original {
        let mut g = tape.graph.backward(nll_o).map_err(crate::error::ModelError::from)?;
        if schedule.measure == Measure::GNorm && !dropout && cached.is_none() {
            shared = Some(importance::gnorm_from_grads(&g, &trace, pair));
        }
        grads = Some(tape.param_grads(&mut g));
    }
    let mut masked = 0;
    let nodes = if need_view {
        let raw = match (cached, shared) {
            (Some(c), _) => c.clone(),
            (None, Some(s)) => s,
            (None, None) if schedule.measure == Measure::TNorm && !dropout => (
                importance::tnorm(&tape.graph, &trace, Side::Source, pair.src_tokens.len()),
                importance::tnorm(&tape.graph, &trace, Side::Target, pair.tgt_tokens.len()),
            ),
            (None, None) => augment::raw_scores(model, pair, schedule.measure, terms.reduction)?,
        };
        // Random scores are held fixed within an epoch.
        let mut score_rng = ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.seed, epoch, key[2], key[3], 1]));
        let traces = augment::traces_from_scores(pair, raw.0, raw.1, schedule, &mut score_rng)?;
        let view = augment::perturb_with_traces(
            pair,
            &traces,
            cfg.augment.strategy,
            model.config().vocab_size,
            stream_seed(&[key[0], key[1], key[2], key[3], 2]),
        )?;
        masked = view.masked_count();
        objective::add_perturbed_terms(&mut tape, pair, &view.pair, trace, nll_o, count, terms)?
    } else {
        objective::add_perturbed_terms(&mut tape, pair, pair, trace, nll_o, count, terms)?
    };
    if let Some(root) = nodes.root(&mut tape.graph, terms, grads.is_some())? {
        let mut g = tape.graph.backward(root).map_err(crate::error::ModelError::from)?;
        accumulate(&mut grads, tape.param_grads(&mut g));
    }
    Ok(PairStep {
        grads: grads.expect("at least one loss term is enabled"),
        breakdown: nodes.breakdown(&tape.graph, terms),
        masked,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    MaxSteps,
    EarlyStopped,
    Diverged { step: u64, value: f64 },
}

pub struct TrainOutcome {
    /// Best-validation model, or the last one if no validation set was given.
    pub model: Model,
    /// Final loop state with optimizer moments, for resuming.
    pub resume: Checkpoint,
    pub log: Vec<String>,
    pub breakdowns: Vec<LossBreakdown>,
    pub events: Vec<String>,
    pub valid_losses: Vec<f64>,
    pub stop: StopReason,
}

impl TrainOutcome {
    /// Mean original NLL over the last `n` logged steps.
    pub fn recent_nll(&self, n: usize) -> f64 {
        let tail = &self.breakdowns[self.breakdowns.len().saturating_sub(n)..];
        tail.iter().map(|b| b.nll_original).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Runs the loop from scratch, or from `resume` if it carries optimizer and
/// loop state.
pub fn train(
    cfg: &TrainConfig,
    corpus: &Corpus,
    valid: Option<&Corpus>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (mut model, mut adam, mut st) = match resume {
        Some(ck) => {
            let adam = ck.optimizer.clone();
            let st = ck.state.clone();
            let model = ck.into_model()?;
            if model.config() != &cfg.model {
                return Err(TrainError::Config("checkpoint model config differs from the training config".into()));
            }
            let adam = adam.unwrap_or_else(|| AdamState::zeros_like(model.params()));
            (model, adam, st.unwrap_or_default())
        }
        None => {
            let model = Model::new(cfg.model.clone())?;
            let adam = AdamState::zeros_like(model.params());
            (model, adam, LoopState::default())
        }
    };
    let pairs: Vec<&DocumentPair> = corpus.pairs().collect();
    for p in &pairs {
        model.check_tokens(&p.src_tokens)?;
        model.check_tokens(&p.tgt_tokens)?;
    }
    let mut out_log = Vec::new();
    let mut breakdowns = Vec::new();
    let mut events = Vec::new();
    let mut valid_losses = Vec::new();
    let mut best: Option<ParamStore> = None;
    let mut stop = StopReason::MaxEpochs;
    let needs_cache =
        cfg.score_refresh == ScoreRefresh::Epoch && cfg.terms.needs_perturbed_view() && matches!(cfg.augment.schedule.measure, Measure::TNorm | Measure::GNorm);

    'epochs: while st.epoch < cfg.max_epochs {
        let plan = batches(&pairs, cfg.batch_tokens, cfg.seed, st.epoch);
        let mut cache: HashMap<(u32, u32), RawScores> = HashMap::new();
        if needs_cache {
            if st.batch_in_epoch > 0 {
                events.push(format!("epoch {}: scores recomputed mid-epoch after resume", st.epoch));
            }
            for p in &pairs {
                let s = augment::raw_scores(&model, p, cfg.augment.schedule.measure, cfg.terms.reduction)?;
                cache.insert((p.doc_id, p.sent_id), s);
            }
        }
        while (st.batch_in_epoch as usize) < plan.len() {
            if cfg.max_steps.is_some_and(|m| st.step >= m) {
                stop = StopReason::MaxSteps;
                break 'epochs;
            }
            let batch = &plan[st.batch_in_epoch as usize];
            let step = st.step + 1;
            let mut grads = None;
            let mut sum = LossBreakdown::default();
            for &i in batch {
                let p = pairs[i];
                let r = pair_step(&model, p, cfg, step, st.epoch, cache.get(&(p.doc_id, p.sent_id)))?;
                accumulate(&mut grads, r.grads);
                sum.nll_original += r.breakdown.nll_original;
                sum.nll_perturbed += r.breakdown.nll_perturbed;
                sum.agreement += r.breakdown.agreement;
                sum.total += r.breakdown.total;
                sum.token_count += r.breakdown.token_count;
            }
            let n = batch.len() as f64;
            let mean = LossBreakdown {
                nll_original: sum.nll_original / n,
                nll_perturbed: sum.nll_perturbed / n,
                agreement: sum.agreement / n,
                total: sum.total / n,
                token_count: sum.token_count,
            };
            if !mean.total.is_finite() {
                events.push(format!("step {step}: loss {} is not finite, aborting", mean.total));
                stop = StopReason::Diverged { step, value: mean.total };
                break 'epochs;
            }
            let mut grads = grads.expect("non-empty batch");
            average(&mut grads, batch.len());
            let lr = lr_at(step, &cfg.optimizer);
            if !adam_step(model.params_mut(), &grads, &mut adam, lr, &cfg.optimizer)? {
                events.push(format!("step {step}: non-finite gradient, update skipped"));
            }
            out_log.push(mean.log_line(step));
            breakdowns.push(mean);
            st.step = step;
            st.batch_in_epoch += 1;
        }
        if let Some(v) = valid {
            let loss = validation_loss(&model, v, cfg.terms.reduction)?;
            valid_losses.push(loss);
            if st.best_valid.is_none_or(|b| loss < b) {
                st.best_valid = Some(loss);
                st.bad_epochs = 0;
                best = Some(model.params().clone());
            } else {
                st.bad_epochs += 1;
            }
        }
        st.epoch += 1;
        st.batch_in_epoch = 0;
        if valid.is_some() && st.bad_epochs >= cfg.patience {
            stop = StopReason::EarlyStopped;
            events.push(format!("early stop after epoch {}", st.epoch));
            break;
        }
    }

    let resume = Checkpoint {
        config: model.config().clone(),
        params: model.params().clone(),
        optimizer: Some(adam),
        state: Some(st),
    };
    if let Some(b) = best {
        model = Model::with_params(cfg.model.clone(), b)?;
    }
    Ok(TrainOutcome {
        model,
        resume,
        log: out_log,
        breakdowns,
        events,
        valid_losses,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::Direction;

    #[test]
    fn schedule_peaks_at_warmup() {
        let o = OptimizerConfig::default();
        assert!((lr_at(200, &o) - o.peak_lr).abs() < 1e-18);
        assert!(lr_at(100, &o) < lr_at(199, &o));
        assert!(lr_at(800, &o) < lr_at(201, &o));
        assert!((lr_at(800, &o) - o.peak_lr * 0.5).abs() < 1e-15);
        assert!((lr_at(1, &o) - o.peak_lr / 200.0).abs() < 1e-18);
    }

    fn scalar_params(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.push("w", Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_params(1.5);
        let mut st = AdamState::zeros_like(&p);
        let o = OptimizerConfig::default();
        for _ in 0..5 {
            assert!(adam_step(&mut p, &[Tensor::vector(vec![0.0])], &mut st, 0.1, &o).unwrap());
        }
        assert_eq!(p.tensors()[0].data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_params(1.0);
        let mut st = AdamState::zeros_like(&p);
        let o = OptimizerConfig::default();
        adam_step(&mut p, &[Tensor::vector(vec![1.0])], &mut st, 0.01, &o).unwrap();
        // mhat = 1, vhat = 1 → step = lr / (1 + eps)
        let expect = 1.0 - 0.01 / (1.0 + 1e-9);
        assert!((p.tensors()[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = scalar_params(1.0);
        let mut st = AdamState::zeros_like(&p);
        let o = OptimizerConfig::default();
        assert!(!adam_step(&mut p, &[Tensor::vector(vec![f64::NAN])], &mut st, 0.01, &o).unwrap());
        assert_eq!(st.t, 0);
        assert_eq!(p.tensors()[0].data(), &[1.0]);
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.seed = 9;
        cfg.model.seed = 4;
        cfg.max_steps = Some(12);
        cfg.augment.schedule.measure = Measure::TNorm;
        cfg.augment.schedule.direction = Direction::BothUp;
        cfg.terms.agreement = false;
        cfg.terms.perturb_targets = PerturbTargets::Perturbed;
        cfg.score_refresh = ScoreRefresh::Epoch;
        let back = TrainConfig::default().apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors_name_the_line() {
        let e = TrainConfig::default().apply_text("seed = 1\n\nwarmup = soon\n").unwrap_err();
        assert!(matches!(e, TrainError::ConfigParse { line: 3, .. }), "{e}");
        let e = TrainConfig::default().apply_text("colour = blue").unwrap_err();
        assert!(e.to_string().contains("colour"));
    }

    #[test]
    fn conflicting_switches_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.augment.schedule.measure = Measure::Random;
        cfg.augment.schedule.normalize = false;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.terms = LossTerms {
            original: false,
            perturbed: false,
            agreement: false,
            ..LossTerms::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn batches_cover_every_pair_once() {
        let pairs: Vec<DocumentPair> = (0..30)
            .map(|i| DocumentPair::from_segments(i / 5, i % 5, &[vec![7; 3]], &[8; 4], &[vec![9; 3]], &[10; 4]))
            .collect();
        let refs: Vec<&DocumentPair> = pairs.iter().collect();
        let plan = batches(&refs, 50, 1, 0);
        let mut seen: Vec<usize> = plan.concat();
        seen.sort();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
        assert!(plan.iter().all(|b| b.iter().map(|&i| refs[i].token_count()).sum::<usize>() <= 50));
        assert_eq!(plan, batches(&refs, 50, 1, 0));
        assert_ne!(plan, batches(&refs, 50, 1, 1));
    }
}
