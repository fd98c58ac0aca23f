//! Trans-dimensional mixture sampling (TransMS).
//!
//! Each step is a local jump between lengths followed by a Markov move that
//! resamples the sentence block by block with multiple-trial Metropolis
//! independence sampling. Both kernels draw from the auxiliary proposal
//! `g(· | prefix)` and target `p(l, x; θ, ζ)` with the training length prior.
//! Acceptance arithmetic is done in log space; `log Z_1` cancels from every
//! ratio and is never evaluated here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrfError};
use crate::model::TrfModel;
use crate::nn::log_sum_exp;
use crate::par;
use crate::proposal::{sample_log_categorical, ProposalParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JumpConfig {
    /// Jump range r.
    pub range: usize,
    /// Markov-move block size s.
    pub block: usize,
    /// MTMIS trial count M.
    pub trials: usize,
}

impl Default for JumpConfig {
    fn default() -> Self {
        Self { range: 2, block: 5, trials: 10 }
    }
}

impl JumpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.range == 0 || self.block == 0 || self.trials == 0 {
            return Err(TrfError::Config("jump range, block size and trial count must be >= 1".into()));
        }
        Ok(())
    }
}

/// `Γ(k, j)`: uniform over `max(k-r, 1) ..= min(k+r, m)`.
pub fn jump_prob(k: usize, j: usize, m: usize, r: usize) -> f64 {
    let lo = k.saturating_sub(r).max(1);
    let hi = (k + r).min(m);
    if j < lo || j > hi {
        return 0.0;
    }
    1.0 / (hi - lo + 1) as f64
}

/// The support and probabilities of `Γ(k, ·)`.
pub fn jump_distribution(k: usize, m: usize, r: usize) -> Vec<(usize, f64)> {
    let lo = k.saturating_sub(r).max(1);
    let hi = (k + r).min(m);
    (lo..=hi).map(|j| (j, jump_prob(k, j, m, r))).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub steps: u64,
    pub jump_attempts: u64,
    pub jump_accepts: u64,
    pub move_blocks: u64,
    pub move_accepts: u64,
}

impl ChainDiagnostics {
    pub fn merge(&mut self, o: &ChainDiagnostics) {
        self.steps += o.steps;
        self.jump_attempts += o.jump_attempts;
        self.jump_accepts += o.jump_accepts;
        self.move_blocks += o.move_blocks;
        self.move_accepts += o.move_accepts;
    }

    pub fn jump_rate(&self) -> f64 {
        ratio(self.jump_accepts, self.jump_attempts)
    }

    pub fn move_rate(&self) -> f64 {
        ratio(self.move_accepts, self.move_blocks)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// One chain: current sentence, its own RNG stream and counters.
#[derive(Debug, Clone)]
pub struct ChainState {
    x: Vec<u32>,
    rng: ChaCha8Rng,
    pub diag: ChainDiagnostics,
}

/// What a single TransMS step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub tokens: Vec<u32>,
    pub log_phi: f64,
    pub accepted_jump: bool,
    pub accepted_moves: usize,
}

/// Deterministic RNG for stream `stream` of run seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ChainState {
    pub fn new(x: Vec<u32>, rng: ChaCha8Rng) -> Result<Self> {
        if x.is_empty() {
            return Err(TrfError::Length { len: 0, max: usize::MAX });
        }
        Ok(Self { x, rng, diag: ChainDiagnostics::default() })
    }

    /// Starts from a length drawn from π⁰ and words drawn from the proposal.
    pub fn from_proposal(model: &TrfModel, q: &ProposalParams, mut rng: ChaCha8Rng) -> Result<Self> {
        let l = model.pi_train.sample(&mut rng);
        let (x, _) = q.g_sample(&[], l, model.max_len(), &mut rng)?;
        Self::new(x, rng)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Log acceptance ratio (before `min{1, ·}`) of a local jump from `x` to
/// `y`, where `y` extends or truncates `x`. `log_g` is `log g` of the words
/// added (extension) or removed (truncation), conditioned on the shorter
/// sequence.
fn jump_log_ratio(model: &TrfModel, r: usize, k: usize, j: usize, t_x: f64, t_y: f64, log_g: f64) -> f64 {
    let m = model.max_len();
    let gamma = (jump_prob(j, k, m, r) / jump_prob(k, j, m, r)).ln();
    if j > k {
        gamma + t_y - t_x - log_g
    } else {
        gamma + t_y + log_g - t_x
    }
}

/// Log acceptance ratio of the local jump `x -> y` (public form used by
/// tests and diagnostics).
pub fn local_jump_log_acceptance(model: &TrfModel, q: &ProposalParams, r: usize, x: &[u32], y: &[u32]) -> Result<f64> {
    let (k, j) = (x.len(), y.len());
    let (short, long) = if j > k { (x, y) } else { (y, x) };
    if short.len() == long.len() || long[..short.len()] != *short {
        return Err(TrfError::Domain("a local jump must extend or truncate the sentence".into()));
    }
    let log_g = q.g_logprob(&long[short.len()..], short, model.max_len())?;
    Ok(jump_log_ratio(model, r, k, j, model.log_target(x)?, model.log_target(y)?, log_g))
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> Result<bool> {
    if log_ratio.is_nan() {
        return Err(TrfError::NonFinite("acceptance ratio".into()));
    }
    if log_ratio >= 0.0 {
        return Ok(true);
    }
    let u: f64 = rng.random();
    Ok(u.ln() < log_ratio)
}

/// Current sentence's φ, carried between the two kernels so each step needs
/// one fresh forward pass for the starting state only.
struct Current {
    phi: f64,
}

fn local_jump_inner(
    state: &mut ChainState,
    cur: &mut Current,
    model: &TrfModel,
    q: &ProposalParams,
    r: usize,
) -> Result<bool> {
    let m = model.max_len();
    let k = state.x.len();
    let support = jump_distribution(k, m, r);
    let j = support[state.rng.random_range(0..support.len())].0;
    if j == k {
        return Ok(false);
    }
    state.diag.jump_attempts += 1;
    let t_x = model.log_target_from_phi(k, cur.phi);
    let (y, log_g) = if j > k {
        let st = q.state_after(&state.x)?;
        let (u, lg) = q.g_sample_from(&st, j - k, &mut state.rng);
        let mut y = state.x.clone();
        y.extend_from_slice(&u);
        (y, lg)
    } else {
        let y = state.x[..j].to_vec();
        let lg = q.g_logprob_from(&q.state_after(&y)?, &state.x[j..])?;
        (y, lg)
    };
    let phi_y = model.potential.phi(&y)?;
    let t_y = model.log_target_from_phi(j, phi_y);
    let ratio = jump_log_ratio(model, r, k, j, t_x, t_y, log_g);
    if accept(ratio, &mut state.rng)? {
        state.x = y;
        cur.phi = phi_y;
        state.diag.jump_accepts += 1;
        Ok(true)
    } else {
        Ok(false)
    }
}

fn markov_move_inner(
    state: &mut ChainState,
    cur: &mut Current,
    model: &TrfModel,
    q: &ProposalParams,
    cfg: &JumpConfig,
) -> Result<usize> {
    let l = state.x.len();
    let mut accepted = 0;
    let mut i = 0;
    while i < l {
        let bl = cfg.block.min(l - i);
        let st = q.state_after(&state.x[..i])?;
        let mut candidates = Vec::with_capacity(cfg.trials);
        let mut log_w = Vec::with_capacity(cfg.trials);
        for _ in 0..cfg.trials {
            let (u, lg) = q.g_sample_from(&st, bl, &mut state.rng);
            let mut y = state.x.clone();
            y[i..i + bl].copy_from_slice(&u);
            let phi = model.potential.phi(&y)?;
            log_w.push(model.log_target_from_phi(l, phi) - lg);
            candidates.push((y, phi));
        }
        let cur_lg = q.g_logprob_from(&st, &state.x[i..i + bl])?;
        let cur_w = model.log_target_from_phi(l, cur.phi) - cur_lg;

        let log_total = log_sum_exp(&log_w);
        let probs: Vec<f64> = log_w.iter().map(|w| w - log_total).collect();
        let pick = sample_log_categorical(&probs, &mut state.rng);
        let mut rest: Vec<f64> = log_w
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != pick)
            .map(|(_, w)| *w)
            .collect();
        rest.push(cur_w);
        let ratio = log_total - log_sum_exp(&rest);
        state.diag.move_blocks += 1;
        if accept(ratio, &mut state.rng)? {
            let (y, phi) = candidates.swap_remove(pick);
            state.x = y;
            cur.phi = phi;
            state.diag.move_accepts += 1;
            accepted += 1;
        }
        i += bl;
    }
    Ok(accepted)
}

/// Step I alone. Returns whether a length change was accepted.
pub fn local_jump(state: &mut ChainState, model: &TrfModel, q: &ProposalParams, cfg: &JumpConfig) -> Result<bool> {
    let mut cur = Current { phi: model.potential.phi(&state.x)? };
    local_jump_inner(state, &mut cur, model, q, cfg.range)
}

/// Step II alone. Returns the number of accepted blocks.
pub fn markov_move(state: &mut ChainState, model: &TrfModel, q: &ProposalParams, cfg: &JumpConfig) -> Result<usize> {
    let mut cur = Current { phi: model.potential.phi(&state.x)? };
    markov_move_inner(state, &mut cur, model, q, cfg)
}

/// Local jump followed by a Markov move.
pub fn transms_step(state: &mut ChainState, model: &TrfModel, q: &ProposalParams, cfg: &JumpConfig) -> Result<StepRecord> {
    if state.x.is_empty() || state.x.len() > model.max_len() {
        return Err(TrfError::Length { len: state.x.len(), max: model.max_len() });
    }
    let mut cur = Current { phi: model.potential.phi(&state.x)? };
    let accepted_jump = local_jump_inner(state, &mut cur, model, q, cfg.range)?;
    let accepted_moves = markov_move_inner(state, &mut cur, model, q, cfg)?;
    state.diag.steps += 1;
    debug_assert!(!state.x.is_empty() && state.x.len() <= model.max_len());
    Ok(StepRecord {
        tokens: state.x.clone(),
        log_phi: cur.phi,
        accepted_jump,
        accepted_moves,
    })
}

/// Independent chains advanced in parallel.
#[derive(Debug, Clone)]
pub struct ChainSet {
    chains: Vec<ChainState>,
}

impl ChainSet {
    /// `n` chains, chain `c` using RNG stream `first_stream + c`.
    pub fn init(model: &TrfModel, q: &ProposalParams, n: usize, seed: u64, first_stream: u64) -> Result<Self> {
        if n == 0 {
            return Err(TrfError::Config("need at least one chain".into()));
        }
        let chains = (0..n as u64)
            .map(|c| ChainState::from_proposal(model, q, stream_rng(seed, first_stream + c)))
            .collect::<Result<_>>()?;
        Ok(Self { chains })
    }

    pub fn chains(&self) -> &[ChainState] {
        &self.chains
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    /// Runs `burn_in` unrecorded steps per chain.
    pub fn burn_in(&mut self, model: &TrfModel, q: &ProposalParams, cfg: &JumpConfig, steps: usize) -> Result<()> {
        par::map_mut(&mut self.chains, |ch| {
            for _ in 0..steps {
                transms_step(ch, model, q, cfg)?;
            }
            Ok(())
        })
        .into_iter()
        .collect()
    }

    /// Collects `total` samples split as evenly as possible across chains
    /// (one sample per TransMS step). Output is ordered by chain, then step.
    pub fn collect(&mut self, model: &TrfModel, q: &ProposalParams, cfg: &JumpConfig, total: usize) -> Result<Vec<StepRecord>> {
        let n = self.chains.len();
        let mut jobs: Vec<(usize, &mut ChainState)> = self
            .chains
            .iter_mut()
            .enumerate()
            .map(|(c, ch)| (total / n + usize::from(c < total % n), ch))
            .collect();
        let per_chain = par::map_mut(&mut jobs, |(steps, ch)| {
            (0..*steps).map(|_| transms_step(ch, model, q, cfg)).collect::<Result<Vec<_>>>()
        });
        let mut out = Vec::with_capacity(total);
        for recs in per_chain {
            out.extend(recs?);
        }
        Ok(out)
    }

    pub fn diagnostics(&self) -> ChainDiagnostics {
        let mut d = ChainDiagnostics::default();
        for c in &self.chains {
            d.merge(&c.diag);
        }
        d
    }

    pub fn reset_diagnostics(&mut self) {
        for c in &mut self.chains {
            c.diag = ChainDiagnostics::default();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LengthDist, Vocab};
    use crate::model::{exact_zeta, Zeta};
    use crate::potential::{PotentialConfig, PotentialParams};
    use crate::proposal::ProposalConfig;

    fn tiny_cfg() -> PotentialConfig {
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

    fn uniform_model(v: usize, m: usize) -> TrfModel {
        let theta = PotentialParams::zeros(tiny_cfg(), v).unwrap();
        TrfModel::new(
            theta,
            Zeta::init(v, m).unwrap(),
            LengthDist::uniform(m).unwrap(),
            LengthDist::uniform(m).unwrap(),
            Vocab::synthetic(v).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn jump_distribution_examples() {
        assert_eq!(jump_distribution(5, 10, 1), vec![(4, 1.0 / 3.0), (5, 1.0 / 3.0), (6, 1.0 / 3.0)]);
        assert_eq!(jump_distribution(1, 10, 1), vec![(1, 0.5), (2, 0.5)]);
        assert_eq!(jump_distribution(10, 10, 2), vec![(8, 1.0 / 3.0), (9, 1.0 / 3.0), (10, 1.0 / 3.0)]);
        assert_eq!(jump_prob(5, 8, 10, 2), 0.0);
        for k in 1..=7 {
            let s: f64 = jump_distribution(k, 7, 3).iter().map(|(_, p)| p).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_length_space_never_jumps() {
        let model = uniform_model(3, 1);
        let q = ProposalParams::zeros(ProposalConfig { d_e: 2, hidden: 2 }, 3).unwrap();
        let mut st = ChainState::new(vec![2], stream_rng(1, 0)).unwrap();
        for _ in 0..50 {
            assert!(!local_jump(&mut st, &model, &q, &JumpConfig { range: 1, block: 1, trials: 1 }).unwrap());
            assert_eq!(st.tokens(), &[2]);
        }
        assert_eq!(st.diag.jump_attempts, 0);
    }

    #[test]
    fn uniform_case_extension_ratio_is_hand_constant() {
        let (v, m) = (3, 6);
        let theta = PotentialParams::zeros(tiny_cfg(), v).unwrap();
        let pi0 = LengthDist::from_weights(&[1.0, 2.0, 3.0, 1.0, 2.0, 4.0]).unwrap();
        let model = TrfModel::new(
            theta,
            Zeta::init(v, m).unwrap(),
            LengthDist::uniform(m).unwrap(),
            pi0.clone(),
            Vocab::synthetic(v).unwrap(),
        )
        .unwrap();
        let q = ProposalParams::zeros(ProposalConfig { d_e: 2, hidden: 2 }, v).unwrap();
        let r = 2;
        for k in 1..m {
            let x: Vec<u32> = vec![1; k];
            let mut y = x.clone();
            y.push(2);
            let j = k + 1;
            let want = (jump_prob(j, k, m, r) / jump_prob(k, j, m, r)).ln() + (pi0.prob(j) / pi0.prob(k)).ln();
            let got = local_jump_log_acceptance(&model, &q, r, &x, &y).unwrap();
            assert!((got - want).abs() < 1e-12, "k={k}: {got} vs {want}");
            // and the reverse move is its exact reciprocal
            let back = local_jump_log_acceptance(&model, &q, r, &y, &x).unwrap();
            assert!((back + want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_trial_reduces_to_independence_sampler() {
        // With M = 1, the MTMIS ratio W / (W - w(u) + w(x)) is w(u) / w(x);
        // w(u) = 2 w(x) must always accept.
        let w_x = 0.7f64.ln();
        let w_u = (2.0 * 0.7f64).ln();
        let ratio = log_sum_exp(&[w_u]) - log_sum_exp(&[w_x]);
        assert!((ratio - 2f64.ln()).abs() < 1e-15);
        let mut rng = stream_rng(0, 0);
        assert!((0..100).all(|_| accept(ratio, &mut rng).unwrap()));
        assert!(accept(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn lengths_stay_in_range_and_replay_is_deterministic() {
        let mut rng = stream_rng(3, 0);
        let theta = PotentialParams::random(tiny_cfg(), 4, 0.5, &mut rng).unwrap();
        let m = 5;
        let model = TrfModel::new(
            theta.clone(),
            exact_zeta(&theta, m).unwrap(),
            LengthDist::uniform(m).unwrap(),
            LengthDist::uniform(m).unwrap(),
            Vocab::synthetic(4).unwrap(),
        )
        .unwrap();
        let q = ProposalParams::random(ProposalConfig { d_e: 3, hidden: 3 }, 4, 0.3, &mut rng).unwrap();
        let cfg = JumpConfig { range: 3, block: 2, trials: 4 };
        let run = || {
            let mut st = ChainState::from_proposal(&model, &q, stream_rng(11, 4)).unwrap();
            (0..300)
                .map(|_| {
                    let rec = transms_step(&mut st, &model, &q, &cfg).unwrap();
                    assert!((1..=m).contains(&rec.tokens.len()));
                    assert_eq!(rec.log_phi, model.potential.phi(&rec.tokens).unwrap());
                    rec
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn chain_set_splits_samples_across_chains() {
        let model = uniform_model(3, 4);
        let q = ProposalParams::zeros(ProposalConfig { d_e: 2, hidden: 2 }, 3).unwrap();
        let mut set = ChainSet::init(&model, &q, 3, 5, 0).unwrap();
        let recs = set.collect(&model, &q, &JumpConfig::default(), 10).unwrap();
        assert_eq!(recs.len(), 10);
        assert_eq!(set.diagnostics().steps, 10);
        let a = par::with_threads(1, || {
            let mut s = ChainSet::init(&model, &q, 3, 5, 0).unwrap();
            s.collect(&model, &q, &JumpConfig::default(), 10).unwrap()
        });
        assert_eq!(a, recs);
    }

    #[test]
    fn uniform_model_chain_is_uniform_over_states() {
        // 3 words, m = 2: 12 states, each with probability 1/2 * 1/3^l.
        let model = uniform_model(3, 2);
        let q = ProposalParams::zeros(ProposalConfig { d_e: 2, hidden: 2 }, 3).unwrap();
        let cfg = JumpConfig { range: 1, block: 1, trials: 2 };
        let mut st = ChainState::new(vec![0], stream_rng(8, 0)).unwrap();
        let mut counts = std::collections::HashMap::new();
        let n = 30_000;
        for _ in 0..n {
            let rec = transms_step(&mut st, &model, &q, &cfg).unwrap();
            *counts.entry(rec.tokens).or_insert(0usize) += 1;
        }
        let mut tv = 0.0;
        for (x, c) in &counts {
            let p = 0.5 * (1.0 / 3f64).powi(x.len() as i32);
            tv += (*c as f64 / n as f64 - p).abs();
        }
        assert_eq!(counts.len(), 12);
        assert!(tv / 2.0 < 0.03, "tv = {}", tv / 2.0);
    }
}
