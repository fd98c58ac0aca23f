//! Auxiliary autoregressive distribution q(l, x; μ): a one-layer LSTM over
//! the vocabulary plus an end-of-sentence symbol.
//!
//! Input id `|V|` is the begin-of-sentence marker and output id `|V|` is EOS,
//! so `q` is a joint over `(l, x)`. The fixed-length conditional `g(u | x^h)`
//! used by the sampler excludes EOS: both sampling and densities use the
//! softmax renormalised over the `|V|` real words.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrfError};
use crate::nn::checkpoint::Container;
use crate::nn::{sigmoid, vocab_log_normalizer, Grads, ParamTensor};
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub d_e: usize,
    pub hidden: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { d_e: 32, hidden: 64 }
    }
}

const EMBED: usize = 0;
const W_X: usize = 1;
const W_H: usize = 2;
const BIAS: usize = 3;
const W_OUT: usize = 4;
const B_OUT: usize = 5;

/// μ: embedding (with a BOS row), LSTM weights (gate order i, f, o, g) and
/// the output layer over `|V| + 1` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalParams {
    config: ProposalConfig,
    vocab_size: usize,
    tensors: Vec<ParamTensor>,
}

/// LSTM state after consuming some prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    h: Vec<f64>,
    c: Vec<f64>,
}

struct StepCache {
    input: u32,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    tanh_c: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

impl ProposalParams {
    pub fn zeros(config: ProposalConfig, vocab_size: usize) -> Result<Self> {
        if config.d_e == 0 || config.hidden == 0 {
            return Err(TrfError::Config("proposal sizes must be positive".into()));
        }
        if vocab_size < 2 {
            return Err(TrfError::Config("vocabulary size must be at least 2".into()));
        }
        let (v1, d, h) = (vocab_size + 1, config.d_e, config.hidden);
        let tensors = vec![
            ParamTensor::zeros("embed", &[v1, d]),
            ParamTensor::zeros("w_x", &[4 * h, d]),
            ParamTensor::zeros("w_h", &[4 * h, h]),
            ParamTensor::zeros("b", &[4 * h]),
            ParamTensor::zeros("w_out", &[v1, h]),
            ParamTensor::zeros("b_out", &[v1]),
        ];
        Ok(Self { config, vocab_size, tensors })
    }

    pub fn random<R: Rng + ?Sized>(config: ProposalConfig, vocab_size: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config, vocab_size)?;
        for t in &mut p.tensors {
            for v in &mut t.values {
                *v = rng.random_range(-scale..=scale);
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &ProposalConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos(&self) -> u32 {
        self.vocab_size as u32
    }

    fn bos(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.values.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(TrfError::Shape(format!("{} values for {} parameters", values.len(), self.num_params())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.values.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn step(&self, state: &LstmState, input: u32) -> StepCache {
        let (d, h) = (self.config.d_e, self.config.hidden);
        let t = &self.tensors;
        let e = &t[EMBED].values[input as usize * d..(input as usize + 1) * d];
        let mut z = t[BIAS].values.clone();
        for (r, zr) in z.iter_mut().enumerate() {
            let wx = &t[W_X].values[r * d..(r + 1) * d];
            let wh = &t[W_H].values[r * h..(r + 1) * h];
            *zr += wx.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
            *zr += wh.iter().zip(&state.h).map(|(a, b)| a * b).sum::<f64>();
        }
        let i: Vec<f64> = z[..h].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
        let o: Vec<f64> = z[2 * h..3 * h].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = z[3 * h..].iter().map(|&v| v.tanh()).collect();
        let c: Vec<f64> = (0..h).map(|k| f[k] * state.c[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let hn: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
        StepCache {
            input,
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            i,
            f,
            o,
            g,
            tanh_c,
            c,
            h: hn,
        }
    }

    fn advance(&self, state: &LstmState, input: u32) -> LstmState {
        let s = self.step(state, input);
        LstmState { h: s.h, c: s.c }
    }

    /// Output logits over `|V| + 1` symbols (last = EOS).
    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let hd = self.config.hidden;
        let t = &self.tensors;
        (0..=self.vocab_size)
            .map(|r| {
                let w = &t[W_OUT].values[r * hd..(r + 1) * hd];
                t[B_OUT].values[r] + w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Log-probabilities over the `|V|` words with EOS masked out.
    fn masked_log_probs(&self, state: &LstmState) -> Vec<f64> {
        let mut logits = self.logits(&state.h);
        logits.truncate(self.vocab_size);
        let norm = vocab_log_normalizer(&logits);
        logits.iter_mut().for_each(|v| *v -= norm);
        logits
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&v| v as usize >= self.vocab_size) {
            Some(&v) => Err(TrfError::Index { index: v as usize, size: self.vocab_size }),
            None => Ok(()),
        }
    }

    /// State after reading BOS and then `prefix`.
    pub fn state_after(&self, prefix: &[u32]) -> Result<LstmState> {
        self.check_ids(prefix)?;
        let h = self.config.hidden;
        let mut s = self.advance(&LstmState { h: vec![0.0; h], c: vec![0.0; h] }, self.bos());
        for &x in prefix {
            s = self.advance(&s, x);
        }
        Ok(s)
    }

    /// `log q(l, x) = Σ_i log q(x_i | x_<i) + log q(EOS | x)`.
    pub fn q_logprob(&self, x: &[u32]) -> Result<f64> {
        if x.is_empty() {
            return Err(TrfError::Length { len: 0, max: usize::MAX });
        }
        self.check_ids(x)?;
        let h = self.config.hidden;
        let mut s = self.advance(&LstmState { h: vec![0.0; h], c: vec![0.0; h] }, self.bos());
        let mut total = 0.0;
        for (pos, &target) in x.iter().chain(std::iter::once(&self.eos())).enumerate() {
            let logits = self.logits(&s.h);
            total += logits[target as usize] - vocab_log_normalizer(&logits);
            if pos < x.len() {
                s = self.advance(&s, target);
            }
        }
        Ok(total)
    }

    /// `log g(u | state)`: EOS-masked conditionals, no EOS factor.
    pub fn g_logprob_from(&self, state: &LstmState, u: &[u32]) -> Result<f64> {
        self.check_ids(u)?;
        let mut s = state.clone();
        let mut total = 0.0;
        for (k, &tok) in u.iter().enumerate() {
            total += self.masked_log_probs(&s)[tok as usize];
            if k + 1 < u.len() {
                s = self.advance(&s, tok);
            }
        }
        Ok(total)
    }

    /// `log g(u | prefix)`.
    pub fn g_logprob(&self, u: &[u32], prefix: &[u32], max_len: usize) -> Result<f64> {
        if prefix.len() + u.len() > max_len {
            return Err(TrfError::Length { len: prefix.len() + u.len(), max: max_len });
        }
        if u.is_empty() {
            return Ok(0.0);
        }
        self.g_logprob_from(&self.state_after(prefix)?, u)
    }

    /// Ancestral sample of `n` words from `state`; returns the words and
    /// their `log g`, computed with the same arithmetic as
    /// [`Self::g_logprob_from`].
    pub fn g_sample_from<R: Rng + ?Sized>(&self, state: &LstmState, n: usize, rng: &mut R) -> (Vec<u32>, f64) {
        let mut s = state.clone();
        let mut u = Vec::with_capacity(n);
        let mut total = 0.0;
        for k in 0..n {
            let lp = self.masked_log_probs(&s);
            let tok = sample_log_categorical(&lp, rng);
            total += lp[tok];
            u.push(tok as u32);
            if k + 1 < n {
                s = self.advance(&s, tok as u32);
            }
        }
        (u, total)
    }

    pub fn g_sample<R: Rng + ?Sized>(&self, prefix: &[u32], n: usize, max_len: usize, rng: &mut R) -> Result<(Vec<u32>, f64)> {
        if prefix.len() + n > max_len {
            return Err(TrfError::Length { len: prefix.len() + n, max: max_len });
        }
        if n == 0 {
            return Ok((Vec::new(), 0.0));
        }
        Ok(self.g_sample_from(&self.state_after(prefix)?, n, rng))
    }

    /// `log q(l, x)` and its gradient w.r.t. μ (accumulated, scaled by
    /// `scale`, into `grads`).
    pub fn q_logprob_backward(&self, x: &[u32], scale: f64, grads: &mut Grads) -> Result<f64> {
        if x.is_empty() {
            return Err(TrfError::Length { len: 0, max: usize::MAX });
        }
        self.check_ids(x)?;
        let (d, hd, v1) = (self.config.d_e, self.config.hidden, self.vocab_size + 1);
        let t = &self.tensors;

        let mut steps: Vec<StepCache> = Vec::with_capacity(x.len() + 1);
        let mut state = LstmState { h: vec![0.0; hd], c: vec![0.0; hd] };
        let inputs: Vec<u32> = std::iter::once(self.bos()).chain(x.iter().copied()).collect();
        let targets: Vec<u32> = x.iter().copied().chain(std::iter::once(self.eos())).collect();
        let mut total = 0.0;
        let mut dlogits_all = Vec::with_capacity(inputs.len());
        for (&inp, &target) in inputs.iter().zip(&targets) {
            let sc = self.step(&state, inp);
            let logits = self.logits(&sc.h);
            let norm = vocab_log_normalizer(&logits);
            total += logits[target as usize] - norm;
            let mut dl: Vec<f64> = logits.iter().map(|z| -(z - norm).exp() * scale).collect();
            dl[target as usize] += scale;
            dlogits_all.push(dl);
            state = LstmState { h: sc.h.clone(), c: sc.c.clone() };
            steps.push(sc);
        }

        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        for (sc, dl) in steps.iter().zip(&dlogits_all).rev() {
            let mut dh = dh_next.clone();
            for r in 0..v1 {
                let g = dl[r];
                grads.0[B_OUT][r] += g;
                let w = &t[W_OUT].values[r * hd..(r + 1) * hd];
                let gw = &mut grads.0[W_OUT][r * hd..(r + 1) * hd];
                for k in 0..hd {
                    gw[k] += g * sc.h[k];
                    dh[k] += g * w[k];
                }
            }
            let mut dz = vec![0.0; 4 * hd];
            for k in 0..hd {
                let dc = dh[k] * sc.o[k] * (1.0 - sc.tanh_c[k] * sc.tanh_c[k]) + dc_next[k];
                let d_o = dh[k] * sc.tanh_c[k];
                let d_i = dc * sc.g[k];
                let d_g = dc * sc.i[k];
                let d_f = dc * sc.c_prev[k];
                dc_next[k] = dc * sc.f[k];
                dz[k] = d_i * sc.i[k] * (1.0 - sc.i[k]);
                dz[hd + k] = d_f * sc.f[k] * (1.0 - sc.f[k]);
                dz[2 * hd + k] = d_o * sc.o[k] * (1.0 - sc.o[k]);
                dz[3 * hd + k] = d_g * (1.0 - sc.g[k] * sc.g[k]);
            }
            let inp = sc.input as usize;
            let e = &t[EMBED].values[inp * d..(inp + 1) * d];
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            let mut de = vec![0.0; d];
            for (r, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grads.0[BIAS][r] += g;
                let wx = &t[W_X].values[r * d..(r + 1) * d];
                let gwx = &mut grads.0[W_X][r * d..(r + 1) * d];
                for k in 0..d {
                    gwx[k] += g * e[k];
                    de[k] += g * wx[k];
                }
                let wh = &t[W_H].values[r * hd..(r + 1) * hd];
                let gwh = &mut grads.0[W_H][r * hd..(r + 1) * hd];
                for k in 0..hd {
                    gwh[k] += g * sc.h_prev[k];
                    dh_next[k] += g * wh[k];
                }
            }
            let ge = &mut grads.0[EMBED][inp * d..(inp + 1) * d];
            for k in 0..d {
                ge[k] += de[k];
            }
        }
        Ok(total)
    }

    /// `Σ_x ∂ log q(l, x)/∂μ` over a batch.
    pub fn batch_grad<S: AsRef<[u32]> + Sync>(&self, batch: &[S]) -> Result<Grads> {
        par::chunked_reduce(
            batch,
            || Ok(Grads::zeros_like(&self.tensors)),
            |acc: &mut Result<Grads>, x| {
                if let Ok(g) = acc {
                    if let Err(e) = self.q_logprob_backward(x.as_ref(), 1.0, g) {
                        *acc = Err(e);
                    }
                }
            },
            |total, part| match (total.as_mut(), part) {
                (Ok(t), Ok(p)) => t.add_scaled(&p, 1.0),
                (Ok(_), Err(e)) => *total = Err(e),
                _ => {}
            },
        )
    }

    /// `μ += lr · clip(Σ_B ∂ log q/∂μ)`. Plain gradient ascent; returns the
    /// pre-clipping gradient norm. An empty batch is a no-op.
    pub fn mu_step<S: AsRef<[u32]> + Sync>(&mut self, batch: &[S], lr: f64, max_norm: Option<f64>) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut g = self.batch_grad(batch)?;
        if !g.is_finite() {
            return Err(TrfError::NonFinite("proposal gradient".into()));
        }
        let norm = match max_norm {
            Some(n) => g.clip_norm(n),
            None => g.norm(),
        };
        for (t, gt) in self.tensors.iter_mut().zip(&g.0) {
            for (v, d) in t.values.iter_mut().zip(gt) {
                *v += lr * d;
            }
        }
        Ok(norm)
    }

    pub fn write_container(&self, prefix: &str, c: &mut Container) -> Result<()> {
        let cfg = serde_json::to_string(&self.config).map_err(|e| TrfError::Checkpoint(e.to_string()))?;
        c.put_str(format!("{prefix}config"), cfg);
        c.put_str(format!("{prefix}vocab_size"), self.vocab_size.to_string());
        for t in &self.tensors {
            c.put_tensor(format!("{prefix}{}", t.name), &t.shape, &t.values);
        }
        Ok(())
    }

    pub fn read_container(prefix: &str, c: &Container) -> Result<Self> {
        let config: ProposalConfig = serde_json::from_str(c.get_str(&format!("{prefix}config"))?)
            .map_err(|e| TrfError::Checkpoint(e.to_string()))?;
        let vocab_size: usize = c
            .get_str(&format!("{prefix}vocab_size"))?
            .parse()
            .map_err(|e| TrfError::Checkpoint(format!("vocab_size: {e}")))?;
        let mut p = Self::zeros(config, vocab_size)?;
        for t in &mut p.tensors {
            let stored = c.get_tensor(&format!("{prefix}{}", t.name))?;
            if stored.shape != t.shape {
                return Err(TrfError::Checkpoint(format!("tensor {} has the wrong shape", t.name)));
            }
            t.values.copy_from_slice(&stored.data);
        }
        Ok(p)
    }
}

/// Draws an index from normalised log-probabilities.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs
        .iter()
        .rposition(|lp| *lp > f64::NEG_INFINITY)
        .unwrap_or(log_probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::for_each_sequence;
    use crate::nn::gradcheck::{finite_diff_grad, relative_error, GRAD_CHECK_FLOOR};
    use crate::nn::vocab_normalizations;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ProposalConfig {
        ProposalConfig { d_e: 3, hidden: 4 }
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = ProposalParams::zeros(small(), 5).unwrap();
        for l in 1..4 {
            let x = vec![1u32; l];
            let want = -((l + 1) as f64) * 6f64.ln();
            assert!((p.q_logprob(&x).unwrap() - want).abs() < 1e-12);
            let g = p.g_logprob(&x, &[2], 10).unwrap();
            assert!((g + l as f64 * 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn g_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ProposalParams::random(small(), 4, 0.5, &mut rng).unwrap();
        assert_eq!(p.g_logprob(&[], &[1, 2], 5).unwrap(), 0.0);
        assert!(p.g_logprob(&[1, 2], &[1, 2], 3).is_err());
        let (u, lp) = p.g_sample(&[1], 0, 5, &mut rng).unwrap();
        assert!(u.is_empty());
        assert_eq!(lp, 0.0);
        assert!(p.g_sample(&[1, 2], 2, 3, &mut rng).is_err());
    }

    #[test]
    fn sample_reports_its_own_density_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ProposalParams::random(small(), 6, 0.5, &mut rng).unwrap();
        for _ in 0..50 {
            let prefix: Vec<u32> = (0..rng.random_range(0..3)).map(|_| rng.random_range(0..6)).collect();
            let n = rng.random_range(1..4);
            let (u, lp) = p.g_sample(&prefix, n, 8, &mut rng).unwrap();
            assert_eq!(u.len(), n);
            assert_eq!(lp.to_bits(), p.g_logprob(&u, &prefix, 8).unwrap().to_bits());
        }
    }

    #[test]
    fn g_factorises_along_the_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ProposalParams::random(small(), 4, 0.8, &mut rng).unwrap();
        let x = [1u32, 3, 0, 2, 2];
        for split in 0..x.len() {
            let whole = p.g_logprob(&x, &[], 10).unwrap();
            let parts = p.g_logprob(&x[..split], &[], 10).unwrap() + p.g_logprob(&x[split..], &x[..split], 10).unwrap();
            assert!((whole - parts).abs() < 1e-12);
        }
    }

    #[test]
    fn q_chain_rule_identity() {
        // log q(x) - log q(x, a) = log q(EOS | x) - log q(a | x) - log q(EOS | x a)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ProposalParams::random(small(), 3, 0.8, &mut rng).unwrap();
        let x = [2u32, 1];
        let xa = [2u32, 1, 0];
        let s = p.state_after(&x).unwrap();
        let lx = p.logits(&s.h);
        let nx = crate::nn::log_sum_exp(&lx);
        let sa = p.state_after(&xa).unwrap();
        let la = p.logits(&sa.h);
        let na = crate::nn::log_sum_exp(&la);
        let lhs = p.q_logprob(&x).unwrap() - p.q_logprob(&xa).unwrap();
        let rhs = (lx[3] - nx) - (lx[0] - nx) - (la[3] - na);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn q_is_a_distribution_with_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ProposalParams::random(small(), 2, 1.0, &mut rng).unwrap();
        let m = 3;
        let mut mass = 0.0;
        for l in 1..=m {
            for_each_sequence(2, l, |x| mass += p.q_logprob(x).unwrap().exp());
        }
        // probability of reaching length m without emitting EOS
        let mut tail = 0.0;
        for_each_sequence(2, m, |x| {
            let with_eos = p.q_logprob(x).unwrap();
            let s = p.state_after(x).unwrap();
            let logits = p.logits(&s.h);
            let eos = logits[2] - crate::nn::log_sum_exp(&logits);
            tail += (with_eos - eos).exp() * (1.0 - eos.exp());
        });
        // plus the mass of stopping immediately (l = 0), which q cannot emit
        // as a sentence but which the factorisation allocates
        let s0 = p.state_after(&[]).unwrap();
        let l0 = p.logits(&s0.h);
        let eos0 = (l0[2] - crate::nn::log_sum_exp(&l0)).exp();
        assert!((mass + tail + eos0 - 1.0).abs() < 1e-8, "{}", mass + tail + eos0);
    }

    #[test]
    fn masked_sampling_is_uniform_at_zero() {
        let p = ProposalParams::zeros(small(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let state = p.state_after(&[1, 2]).unwrap();
        let mut counts = [0f64; 5];
        let draws = 100_000;
        for _ in 0..draws {
            let (u, _) = p.g_sample_from(&state, 1, &mut rng);
            counts[u[0] as usize] += 1.0;
        }
        let e = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        // chi-square 4 dof at p = 0.01
        assert!(chi2 < 13.277, "chi2 = {chi2}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let mut p = ProposalParams::random(small(), 3, 0.8, &mut rng).unwrap();
            let x: Vec<u32> = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..3)).collect();
            let mut g = Grads::zeros_like(p.tensors());
            p.q_logprob_backward(&x, 1.0, &mut g).unwrap();
            let theta = p.flat_values();
            let numeric = finite_diff_grad(
                |v| {
                    p.set_flat_values(v).unwrap();
                    p.q_logprob(&x).unwrap()
                },
                &theta,
                1e-6,
            )
            .unwrap();
            for (a, n) in g.flat().iter().zip(&numeric) {
                assert!(relative_error(*a, *n, GRAD_CHECK_FLOOR) < 1e-4, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn ascent_increases_likelihood_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = ProposalParams::random(small(), 4, 0.1, &mut rng).unwrap();
        let x = vec![vec![1u32, 3, 2]];
        let mut prev = p.q_logprob(&x[0]).unwrap();
        for _ in 0..50 {
            p.mu_step(&x, 1e-3, None).unwrap();
            let now = p.q_logprob(&x[0]).unwrap();
            assert!(now > prev);
            prev = now;
        }
    }

    #[test]
    fn empty_batch_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ProposalParams::random(small(), 4, 0.1, &mut rng).unwrap();
        let before = p.clone();
        p.mu_step::<Vec<u32>>(&[], 1.0, Some(5.0)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn q_scoring_normalises_over_the_vocabulary() {
        let p = ProposalParams::zeros(small(), 5).unwrap();
        let before = vocab_normalizations();
        p.q_logprob(&[1, 2, 3]).unwrap();
        assert_eq!(vocab_normalizations() - before, 4);
    }
}
