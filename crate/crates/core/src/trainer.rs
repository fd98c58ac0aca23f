//! Joint stochastic-approximation training.
//!
//! Every iteration draws a data minibatch, advances persistent TransMS chains
//! to collect model samples, then updates θ (Adam on the difference of the
//! empirical and importance-weighted sampled gradients), ζ (length
//! occupancy correction) and the proposal μ (gradient ascent on the sampled
//! log-likelihood).

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{length_histogram, sample_minibatch, CorpusStore, LengthDist, Vocab};
use crate::error::{Result, TrfError};
use crate::model::{ModelFile, TrfModel, Zeta, LENGTH_FLOOR};
use crate::nn::{Adam, AdamConfig};
use crate::par;
use crate::potential::{PotentialConfig, PotentialParams, INIT_SCALE};
use crate::proposal::{ProposalConfig, ProposalParams};
use crate::sampler::{stream_rng, ChainDiagnostics, ChainSet, JumpConfig};

/// `ζ_l = (l-1) log|V|`, the exact ratios at θ = 0.
pub fn init_zeta(vocab_size: usize, m: usize) -> Result<Zeta> {
    Zeta::init(vocab_size, m)
}

/// Learning-rate schedule as a function of the 1-based iteration `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Constant { value: f64 },
    /// `scale / (t + offset)`
    Inverse { scale: f64, offset: f64 },
    /// `scale · t^(-exponent)`
    Power { scale: f64, exponent: f64 },
}

impl Schedule {
    pub fn at(&self, t: u64) -> f64 {
        let t = t.max(1) as f64;
        match *self {
            Schedule::Constant { value } => value,
            Schedule::Inverse { scale, offset } => scale / (t + offset),
            Schedule::Power { scale, exponent } => scale * t.powf(-exponent),
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            Schedule::Constant { value } => value > 0.0 && value.is_finite(),
            Schedule::Inverse { scale, offset } => scale > 0.0 && scale.is_finite() && offset > -1.0 && offset.is_finite(),
            Schedule::Power { scale, exponent } => scale > 0.0 && scale.is_finite() && exponent.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(TrfError::Config(format!("schedule {name} must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// K_D: data sentences per iteration.
    pub batch_data: usize,
    /// K_B: sampled sentences per iteration, split across chains.
    pub batch_samples: usize,
    pub chains: usize,
    /// TransMS steps per chain before the first iteration.
    pub burn_in: usize,
    /// t_max.
    pub max_iters: u64,
    pub gamma_theta: Schedule,
    pub gamma_zeta: Schedule,
    pub gamma_mu: Schedule,
    /// Global-norm clip on the proposal gradient; `None` disables it.
    pub mu_clip: Option<f64>,
    pub adam: AdamConfig,
    /// Checkpoint every this many epochs.
    pub checkpoint_every: u64,
    /// Rolling checkpoint cache depth.
    pub cache_depth: usize,
    /// Dev evaluation cadence in iterations.
    pub eval_every: u64,
    /// Moving-average window for the dev log-likelihood, in iterations.
    pub smooth_window: u64,
    pub early_stop: bool,
    /// Stop when the smoothed dev log-likelihood gains less than
    /// `plateau_tol` over `patience` windows.
    pub patience: usize,
    pub plateau_tol: f64,
    /// Consecutive non-finite iterations tolerated before aborting.
    pub nan_limit: usize,
    /// Floor (relative to the mode) for the training length prior.
    pub length_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_data: 1000,
            batch_samples: 100,
            chains: 10,
            burn_in: 10,
            max_iters: 1000,
            gamma_theta: Schedule::Inverse { scale: 1.0, offset: 1e4 },
            gamma_zeta: Schedule::Power { scale: 1.0, exponent: 0.2 },
            gamma_mu: Schedule::Constant { value: 1.0 },
            mu_clip: Some(5.0),
            adam: AdamConfig::default(),
            checkpoint_every: 1,
            cache_depth: 10,
            eval_every: 1,
            smooth_window: 1000,
            early_stop: true,
            patience: 5,
            plateau_tol: 1e-3,
            nan_limit: 10,
            length_floor: LENGTH_FLOOR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_data", self.batch_data as u64),
            ("batch_samples", self.batch_samples as u64),
            ("chains", self.chains as u64),
            ("checkpoint_every", self.checkpoint_every),
            ("cache_depth", self.cache_depth as u64),
            ("eval_every", self.eval_every),
            ("smooth_window", self.smooth_window),
            ("nan_limit", self.nan_limit as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrfError::Config(format!("{name} must be >= 1")));
            }
        }
        self.gamma_theta.validate("gamma_theta")?;
        self.gamma_zeta.validate("gamma_zeta")?;
        self.gamma_mu.validate("gamma_mu")?;
        if let Some(c) = self.mu_clip {
            if !(c > 0.0) {
                return Err(TrfError::Config("mu_clip must be positive".into()));
            }
        }
        if !(self.length_floor > 0.0 && self.length_floor <= 1.0) {
            return Err(TrfError::Config("length_floor must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Gradient estimate of the θ update: the data mean of `∂φ` minus the
/// sampled mean of `(π̃_l / π⁰_l) ∂φ`.
pub fn theta_gradient<S: AsRef<[u32]> + Sync>(
    model: &TrfModel,
    data: &[S],
    samples: &[S],
) -> Result<crate::nn::Grads> {
    if data.is_empty() || samples.is_empty() {
        return Err(TrfError::Domain("theta step needs nonempty data and sample batches".into()));
    }
    let mut items: Vec<(&[u32], f64)> = Vec::with_capacity(data.len() + samples.len());
    let wd = 1.0 / data.len() as f64;
    items.extend(data.iter().map(|x| (x.as_ref(), wd)));
    let kb = samples.len() as f64;
    for x in samples {
        let l = x.as_ref().len();
        let ratio = model.pi_infer.prob(l) / model.pi_train.prob(l);
        if !ratio.is_finite() {
            return Err(TrfError::NonFinite(format!("importance factor at length {l}")));
        }
        items.push((x.as_ref(), -ratio / kb));
    }
    model.potential.weighted_grad(&items)
}

/// One Adam ascent step on θ. A non-finite gradient leaves θ unchanged and
/// returns an error.
pub fn theta_step<S: AsRef<[u32]> + Sync>(
    model: &mut TrfModel,
    adam: &mut Adam,
    data: &[S],
    samples: &[S],
    lr: f64,
) -> Result<f64> {
    let g = theta_gradient(model, data, samples)?;
    if !g.is_finite() {
        return Err(TrfError::NonFinite("theta gradient".into()));
    }
    let norm = g.norm();
    let tensors = model.potential.tensors_mut();
    g.store_into(tensors);
    adam.step(tensors, lr)?;
    Ok(norm)
}

/// `ζ_l += lr · δ_l / π⁰_l` with δ_l the share of length l in the batch,
/// then `ζ -= ζ_1`.
pub fn zeta_step(zeta: &mut Zeta, lengths: &[usize], pi0: &LengthDist, lr: f64) -> Result<()> {
    if lengths.is_empty() {
        return Err(TrfError::Domain("zeta step needs a nonempty sample batch".into()));
    }
    let m = zeta.max_len();
    let mut counts = vec![0usize; m];
    for &l in lengths {
        if l == 0 || l > m {
            return Err(TrfError::Length { len: l, max: m });
        }
        counts[l - 1] += 1;
    }
    let n = lengths.len() as f64;
    for (l, (z, c)) in zeta.values_mut().iter_mut().zip(&counts).enumerate() {
        let pi = pi0.prob(l + 1);
        if pi > 0.0 {
            *z += lr * (*c as f64 / n) / pi;
        }
    }
    zeta.renormalize();
    Ok(())
}

/// `(1/K_B) Σ [log p̂(l, x) - log q(x)]` over a sampled batch. Uses the
/// current ζ, so it is an estimate of KL(p‖q).
pub fn kl_estimate<S: AsRef<[u32]> + Sync>(model: &TrfModel, q: &ProposalParams, samples: &[S]) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrfError::Domain("KL estimate of an empty batch".into()));
    }
    let terms: Vec<Result<f64>> =
        par::map(samples, |x| Ok(model.log_joint_train(x.as_ref())? - q.q_logprob(x.as_ref())?));
    let mut s = 0.0;
    for t in terms {
        s += t?;
    }
    Ok(s / samples.len() as f64)
}

/// Mean dev log-likelihood under the training length prior and current ζ.
/// Requires an up-to-date `log Z_1`.
pub fn dev_log_likelihood(model: &TrfModel, dev: &CorpusStore) -> Result<f64> {
    if dev.is_empty() {
        return Err(TrfError::Domain("empty dev corpus".into()));
    }
    let xs: Vec<&[u32]> = dev.sentences().iter().map(|s| s.ids()).collect();
    let scores: Vec<Result<f64>> = par::map(&xs, |x| model.log_joint_train(x));
    let mut s = 0.0;
    for v in scores {
        s += v?;
    }
    Ok(s / xs.len() as f64)
}

/// A fresh model: θ and μ uniform in `[-INIT_SCALE, INIT_SCALE]`, ζ at its
/// θ = 0 value, π̃ the training length histogram and π⁰ its floored copy.
pub fn init_model(
    potential: PotentialConfig,
    proposal: ProposalConfig,
    vocab: Vocab,
    train: &CorpusStore,
    length_floor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(TrfModel, ProposalParams)> {
    let v = vocab.size();
    let m = train.max_len();
    let theta = PotentialParams::random(potential, v, INIT_SCALE, rng)?;
    let mu = ProposalParams::random(proposal, v, INIT_SCALE, rng)?;
    let pi_infer = length_histogram(train)?;
    let pi_train = pi_infer.flattened(length_floor)?;
    let model = TrfModel::new(theta, init_zeta(v, m)?, pi_infer, pi_train, vocab)?;
    Ok((model, mu))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: u64,
    pub epoch: u64,
    pub theta_lr: f64,
    pub zeta_lr: f64,
    pub mu_lr: f64,
    pub theta_grad_norm: f64,
    pub mu_grad_norm: f64,
    pub diagnostics: ChainDiagnostics,
    pub kl_estimate: Option<f64>,
    pub dev_ll: Option<f64>,
    pub dev_ll_smoothed: Option<f64>,
    /// True when some update was skipped because of a non-finite value.
    pub non_finite: bool,
    pub zeta: Vec<f64>,
}

pub const LOG_SCHEMA: &str = "# ntrf-train-log 1";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}

impl IterationStats {
    pub fn csv_header(m: usize) -> String {
        let mut h = String::from(
            "iteration,epoch,dev_ll,dev_ll_smoothed,kl_estimate,jump_accept_rate,move_accept_rate,theta_lr,zeta_lr,theta_grad_norm,mu_grad_norm",
        );
        for l in 1..=m {
            h.push_str(&format!(",zeta_{l}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.epoch,
            opt(self.dev_ll),
            opt(self.dev_ll_smoothed),
            opt(self.kl_estimate),
            self.diagnostics.jump_rate(),
            self.diagnostics.move_rate(),
            self.theta_lr,
            self.zeta_lr,
            self.theta_grad_norm,
            self.mu_grad_norm,
        );
        for z in &self.zeta {
            r.push_str(&format!(",{z}"));
        }
        r
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iteration: u64,
    pub epoch: u64,
    pub file: ModelFile,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub iterations: u64,
    pub stopped_early: bool,
    /// Oldest first.
    pub checkpoints: Vec<Checkpoint>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    jump: JumpConfig,
    pub model: TrfModel,
    pub proposal: ProposalParams,
    adam: Adam,
    chains: ChainSet,
    train: &'a CorpusStore,
    dev: Option<&'a CorpusStore>,
    data_rng: ChaCha8Rng,
    t: u64,
    nan_streak: usize,
    dev_history: VecDeque<(u64, f64)>,
    window_marks: Vec<f64>,
    cache: VecDeque<Checkpoint>,
    checkpoint_dir: Option<PathBuf>,
    log: Option<Box<dyn Write + 'a>>,
}

/// Chain streams start here; stream 0 drives data minibatches.
const CHAIN_STREAM_BASE: u64 = 1;

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        jump: JumpConfig,
        model: TrfModel,
        proposal: ProposalParams,
        train: &'a CorpusStore,
        dev: Option<&'a CorpusStore>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        jump.validate()?;
        if train.is_empty() {
            return Err(TrfError::Training("empty training corpus".into()));
        }
        if proposal.vocab_size() != model.vocab_size() {
            return Err(TrfError::Shape("proposal and model vocabularies differ".into()));
        }
        let mut chains = ChainSet::init(&model, &proposal, cfg.chains, seed, CHAIN_STREAM_BASE)?;
        chains.burn_in(&model, &proposal, &jump, cfg.burn_in)?;
        chains.reset_diagnostics();
        let adam = Adam::new(model.potential.tensors(), cfg.adam);
        log::info!(
            "training: K_D={} K_B={} chains={} t_max={} |V|={} m={} params={}+{}",
            cfg.batch_data,
            cfg.batch_samples,
            cfg.chains,
            cfg.max_iters,
            model.vocab_size(),
            model.max_len(),
            model.potential.num_params(),
            proposal.num_params()
        );
        Ok(Self {
            cfg,
            jump,
            model,
            proposal,
            adam,
            chains,
            train,
            dev,
            data_rng: stream_rng(seed, 0),
            t: 0,
            nan_streak: 0,
            dev_history: VecDeque::new(),
            window_marks: Vec::new(),
            cache: VecDeque::new(),
            checkpoint_dir: None,
            log: None,
        })
    }

    /// Write rolling checkpoints into `dir` as well as keeping them in memory.
    pub fn with_checkpoint_dir(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        self.checkpoint_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Stream the CSV training log to `w`.
    pub fn with_log(mut self, mut w: Box<dyn Write + 'a>) -> Result<Self> {
        writeln!(w, "{LOG_SCHEMA}")?;
        writeln!(w, "{}", IterationStats::csv_header(self.model.max_len()))?;
        self.log = Some(w);
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn epoch_len(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.batch_data) as u64
    }

    pub fn checkpoints(&self) -> impl Iterator<Item = &Checkpoint> {
        self.cache.iter()
    }

    /// One full iteration.
    pub fn step(&mut self) -> Result<IterationStats> {
        self.t += 1;
        let t = self.t;
        let cfg = self.cfg.clone();
        let theta_lr = cfg.gamma_theta.at(t);
        let zeta_lr = cfg.gamma_zeta.at(t);
        let mu_lr = cfg.gamma_mu.at(t);
        let mut non_finite = false;

        let data: Vec<&[u32]> = sample_minibatch(self.train, cfg.batch_data, &mut self.data_rng)?
            .into_iter()
            .map(|s| s.ids())
            .collect();
        self.chains.reset_diagnostics();
        let samples: Vec<Vec<u32>> = match self.chains.collect(&self.model, &self.proposal, &self.jump, cfg.batch_samples) {
            Ok(recs) => recs.into_iter().map(|r| r.tokens).collect(),
            Err(TrfError::NonFinite(what)) => {
                log::warn!("iteration {t}: non-finite {what} while sampling; iteration skipped");
                return self.non_finite_iteration(theta_lr, zeta_lr, mu_lr);
            }
            Err(e) => return Err(e),
        };
        let diagnostics = self.chains.diagnostics();
        let sample_refs: Vec<&[u32]> = samples.iter().map(|s| s.as_slice()).collect();

        let theta_grad_norm = match theta_step(&mut self.model, &mut self.adam, &data, &sample_refs, theta_lr) {
            Ok(n) => n,
            Err(TrfError::NonFinite(what)) => {
                log::warn!("iteration {t}: non-finite {what}; theta update skipped");
                non_finite = true;
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        let lengths: Vec<usize> = samples.iter().map(|s| s.len()).collect();
        zeta_step(&mut self.model.zeta, &lengths, &self.model.pi_train, zeta_lr)?;
        debug_assert_eq!(self.model.zeta.get(1), 0.0);
        let mu_grad_norm = match self.proposal.mu_step(&sample_refs, mu_lr, cfg.mu_clip) {
            Ok(n) => n,
            Err(TrfError::NonFinite(what)) => {
                log::warn!("iteration {t}: non-finite {what}; proposal update skipped");
                non_finite = true;
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        self.track_nan(non_finite)?;

        let mut stats = IterationStats {
            iteration: t,
            epoch: self.epoch(),
            theta_lr,
            zeta_lr,
            mu_lr,
            theta_grad_norm,
            mu_grad_norm,
            diagnostics,
            kl_estimate: None,
            dev_ll: None,
            dev_ll_smoothed: None,
            non_finite,
            zeta: self.model.zeta.values().to_vec(),
        };
        if t % cfg.eval_every == 0 {
            self.model.refresh_normalizer();
            stats.kl_estimate = kl_estimate(&self.model, &self.proposal, &sample_refs).ok();
            if let Some(dev) = self.dev {
                let ll = dev_log_likelihood(&self.model, dev)?;
                stats.dev_ll = Some(ll);
                stats.dev_ll_smoothed = Some(self.push_dev(t, ll));
            }
            if let Some(w) = self.log.as_mut() {
                writeln!(w, "{}", stats.csv_row())?;
            }
        }
        if t % (self.epoch_len() * cfg.checkpoint_every) == 0 {
            self.checkpoint()?;
        }
        Ok(stats)
    }

    fn epoch(&self) -> u64 {
        self.t.div_ceil(self.epoch_len())
    }

    fn non_finite_iteration(&mut self, theta_lr: f64, zeta_lr: f64, mu_lr: f64) -> Result<IterationStats> {
        self.track_nan(true)?;
        Ok(IterationStats {
            iteration: self.t,
            epoch: self.epoch(),
            theta_lr,
            zeta_lr,
            mu_lr,
            theta_grad_norm: f64::NAN,
            mu_grad_norm: f64::NAN,
            diagnostics: self.chains.diagnostics(),
            kl_estimate: None,
            dev_ll: None,
            dev_ll_smoothed: None,
            non_finite: true,
            zeta: self.model.zeta.values().to_vec(),
        })
    }

    fn track_nan(&mut self, bad: bool) -> Result<()> {
        if !bad {
            self.nan_streak = 0;
            return Ok(());
        }
        self.nan_streak += 1;
        if self.nan_streak >= self.cfg.nan_limit {
            let dump = match &self.checkpoint_dir {
                Some(dir) => {
                    let p = dir.join("nan-dump.ntrf");
                    ModelFile { model: self.model.clone(), proposal: Some(self.proposal.clone()) }.save(&p)?;
                    format!("; state dumped to {}", p.display())
                }
                None => String::new(),
            };
            return Err(TrfError::Training(format!(
                "{} consecutive non-finite iterations ending at iteration {}; zeta = {:?}{dump}",
                self.nan_streak,
                self.t,
                self.model.zeta.values()
            )));
        }
        Ok(())
    }

    fn push_dev(&mut self, t: u64, ll: f64) -> f64 {
        let w = self.cfg.smooth_window;
        self.dev_history.push_back((t, ll));
        while let Some(&(s, _)) = self.dev_history.front() {
            if s + w <= t {
                self.dev_history.pop_front();
            } else {
                break;
            }
        }
        let smoothed = self.dev_history.iter().map(|(_, v)| v).sum::<f64>() / self.dev_history.len() as f64;
        if t % w == 0 {
            self.window_marks.push(smoothed);
        }
        smoothed
    }

    /// Smoothed dev log-likelihood at each completed window.
    pub fn window_marks(&self) -> &[f64] {
        &self.window_marks
    }

    fn plateaued(&self) -> bool {
        let p = self.cfg.patience;
        let n = self.window_marks.len();
        n > p && self.window_marks[n - 1] - self.window_marks[n - 1 - p] < self.cfg.plateau_tol
    }

    fn checkpoint(&mut self) -> Result<()> {
        self.model.refresh_normalizer();
        let file = ModelFile { model: self.model.clone(), proposal: Some(self.proposal.clone()) };
        let epoch = self.epoch();
        let path = match &self.checkpoint_dir {
            Some(dir) => {
                let p = dir.join(format!("ckpt-{:06}-{:08}.ntrf", epoch, self.t));
                let digest = file.save(&p)?;
                log::info!("checkpoint {} ({digest})", p.display());
                Some(p)
            }
            None => None,
        };
        self.cache.push_back(Checkpoint { iteration: self.t, epoch, file, path });
        while self.cache.len() > self.cfg.cache_depth {
            if let Some(old) = self.cache.pop_front() {
                if let Some(p) = old.path {
                    std::fs::remove_file(&p)?;
                }
            }
        }
        Ok(())
    }

    /// Runs to `max_iters` or an early stop. The last iterate is always
    /// among the returned checkpoints.
    pub fn train(mut self) -> Result<(TrainOutcome, TrfModel, ProposalParams)> {
        let mut stopped_early = false;
        while self.t < self.cfg.max_iters {
            self.step()?;
            if self.cfg.early_stop && self.dev.is_some() && self.plateaued() {
                log::info!("smoothed dev log-likelihood plateaued at iteration {}", self.t);
                stopped_early = true;
                break;
            }
        }
        if self.cache.back().is_none_or(|c| c.iteration != self.t) {
            self.checkpoint()?;
        }
        if let Some(w) = self.log.as_mut() {
            w.flush()?;
        }
        self.model.refresh_normalizer();
        let outcome = TrainOutcome {
            iterations: self.t,
            stopped_early,
            checkpoints: self.cache.into_iter().collect(),
        };
        Ok((outcome, self.model, self.proposal))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSeq;
    use crate::model::exact_zeta;

    fn tiny_potential() -> PotentialConfig {
        PotentialConfig {
            d_e: 3,
            d_p: 3,
            max_width: 2,
            filters: 2,
            stack_depth: 1,
            d_s: 2,
            stack_width: 2,
            bank_pool: true,
        }
    }

    fn corpus(lines: &[&[u32]], m: usize) -> CorpusStore {
        CorpusStore::new(lines.iter().map(|l| TokenSeq::new(l.to_vec())).collect(), m).unwrap()
    }

    #[test]
    fn schedules() {
        assert_eq!(Schedule::Constant { value: 1.0 }.at(7), 1.0);
        assert!((Schedule::Inverse { scale: 1.0, offset: 1e4 }.at(1) - 1.0 / 10001.0).abs() < 1e-18);
        assert!((Schedule::Power { scale: 1.0, exponent: 0.2 }.at(32) - 0.5).abs() < 1e-12);
        assert!(Schedule::Constant { value: 0.0 }.validate("x").is_err());
        let s: Schedule = toml::from_str("kind = \"inverse\"\nscale = 1.0\noffset = 10000.0").unwrap();
        assert_eq!(s, Schedule::Inverse { scale: 1.0, offset: 1e4 });
    }

    #[test]
    fn init_zeta_values() {
        let z = init_zeta(10, 3).unwrap();
        let want = [0.0, 2.302585, 4.605170];
        for (a, b) in z.values().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(init_zeta(10, 1).unwrap().values(), &[0.0]);
    }

    #[test]
    fn zeta_step_examples() {
        let pi = LengthDist::uniform(3).unwrap();
        let mut z = Zeta::from_values(vec![0.0, 0.0, 0.0]).unwrap();
        zeta_step(&mut z, &[2, 2, 2, 2], &pi, 1.0).unwrap();
        assert_eq!(z.values(), &[0.0, 3.0, 0.0]);

        let pi = LengthDist::new(vec![0.25, 0.25, 0.5]).unwrap();
        let mut z = Zeta::from_values(vec![0.0, 1.0, 2.0]).unwrap();
        zeta_step(&mut z, &[1, 2, 3, 3], &pi, 0.3).unwrap();
        for (a, b) in z.values().iter().zip([0.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(zeta_step(&mut z, &[], &pi, 1.0).is_err());
        assert!(zeta_step(&mut z, &[4], &pi, 1.0).is_err());
    }

    fn fixture_model(v: usize, m: usize, seed: u64) -> (TrfModel, ProposalParams) {
        let mut rng = stream_rng(seed, 9);
        let theta = PotentialParams::random(tiny_potential(), v, 0.5, &mut rng).unwrap();
        let zeta = exact_zeta(&theta, m).unwrap();
        let model = TrfModel::new(
            theta,
            zeta,
            LengthDist::uniform(m).unwrap(),
            LengthDist::uniform(m).unwrap(),
            Vocab::synthetic(v).unwrap(),
        )
        .unwrap();
        let q = ProposalParams::random(ProposalConfig { d_e: 2, hidden: 3 }, v, 0.1, &mut rng).unwrap();
        (model, q)
    }

    #[test]
    fn identical_batches_cancel() {
        let (model, _) = fixture_model(3, 3, 1);
        let batch: Vec<&[u32]> = vec![&[0, 1], &[2], &[1, 1, 2]];
        let g = theta_gradient(&model, &batch, &batch).unwrap();
        assert!(g.norm() < 1e-12, "norm {}", g.norm());
        assert!(theta_gradient::<&[u32]>(&model, &[], &batch).is_err());
    }

    #[test]
    fn scalar_sign_follows_count_difference() {
        // Bias-only potential: φ = c, ∂φ/∂c = 1, so the c-gradient is
        // 1 - mean importance weight; with π̃ = π⁰ it vanishes, and with
        // π̃ > π⁰ at the sampled length it is negative.
        let (mut model, _) = fixture_model(3, 3, 2);
        model.pi_infer = LengthDist::new(vec![0.6, 0.2, 0.2]).unwrap();
        model.pi_train = LengthDist::uniform(3).unwrap();
        let data: Vec<&[u32]> = vec![&[0]];
        let samples: Vec<&[u32]> = vec![&[1]];
        let g = theta_gradient(&model, &data, &samples).unwrap();
        let bias = g.0.last().unwrap()[0];
        assert!((bias - (1.0 - 1.8)).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_return_initial_checkpoint() {
        let train = corpus(&[&[0, 1], &[2]], 3);
        let (model, q) = fixture_model(3, 3, 3);
        let cfg = TrainConfig { max_iters: 0, batch_data: 2, batch_samples: 4, chains: 2, ..TrainConfig::default() };
        let trainer = Trainer::new(cfg, JumpConfig::default(), model.clone(), q, &train, None, 1).unwrap();
        let (out, m, _) = trainer.train().unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.checkpoints.len(), 1);
        assert_eq!(m.potential.flat_values(), model.potential.flat_values());
    }

    fn short_run(seed: u64, threads: usize) -> (Vec<String>, String) {
        let train = corpus(&[&[0, 1], &[2], &[1, 1, 2], &[0, 0], &[2, 1]], 3);
        let dev = corpus(&[&[0, 1, 1], &[2, 2]], 3);
        let (model, q) = fixture_model(3, 3, 4);
        let cfg = TrainConfig {
            max_iters: 12,
            batch_data: 2,
            batch_samples: 6,
            chains: 3,
            gamma_theta: Schedule::Constant { value: 0.01 },
            gamma_zeta: Schedule::Power { scale: 1.0, exponent: 0.6 },
            gamma_mu: Schedule::Constant { value: 0.1 },
            smooth_window: 4,
            cache_depth: 2,
            ..TrainConfig::default()
        };
        par::with_threads(threads, || {
            let mut rows = Vec::new();
            let mut trainer = Trainer::new(cfg, JumpConfig { range: 1, block: 2, trials: 3 }, model, q, &train, Some(&dev), seed).unwrap();
            for _ in 0..12 {
                let s = trainer.step().unwrap();
                assert_eq!(s.zeta[0], 0.0);
                assert!(!s.non_finite);
                rows.push(s.csv_row());
            }
            assert_eq!(trainer.checkpoints().count(), 2);
            let (out, _, _) = trainer.train().unwrap();
            let digest = out.checkpoints.last().unwrap().file.to_container().unwrap().digest();
            (rows, digest)
        })
    }

    #[test]
    fn training_is_replay_deterministic() {
        let a = short_run(5, 1);
        let b = short_run(5, 1);
        assert_eq!(a, b);
        assert_ne!(a.1, short_run(6, 1).1);
        assert_eq!(a, short_run(5, 3));
    }

    #[test]
    fn plateau_detection() {
        let train = corpus(&[&[0, 1], &[2]], 3);
        let (model, q) = fixture_model(3, 3, 3);
        let cfg = TrainConfig { batch_data: 2, batch_samples: 2, chains: 1, patience: 2, ..TrainConfig::default() };
        let mut tr = Trainer::new(cfg, JumpConfig::default(), model, q, &train, None, 1).unwrap();
        tr.window_marks = vec![-3.0, -2.0, -1.9995];
        assert!(!tr.plateaued());
        tr.window_marks.push(-1.9991);
        assert!(tr.plateaued());
    }

    #[test]
    fn log_has_schema_header() {
        let train = corpus(&[&[0, 1], &[2]], 3);
        let (model, q) = fixture_model(3, 3, 3);
        let cfg = TrainConfig { max_iters: 2, batch_data: 2, batch_samples: 2, chains: 1, ..TrainConfig::default() };
        let mut buf = Vec::new();
        {
            let tr = Trainer::new(cfg, JumpConfig::default(), model, q, &train, Some(&train), 1)
                .unwrap()
                .with_log(Box::new(&mut buf))
                .unwrap();
            tr.train().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_SCHEMA);
        assert!(lines[1].starts_with("iteration,epoch,dev_ll"));
        assert!(lines[1].ends_with("zeta_3"));
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2].split(',').count(), 14);
    }
}
