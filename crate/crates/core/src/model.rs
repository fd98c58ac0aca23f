//! The trans-dimensional distribution over `(l, x)`.
//!
//! Training uses `p(l, x; θ, ζ) = π⁰_l exp(φ(x)) / (Z_1 e^{ζ_l})` where ζ_l
//! estimates `log Z_l / Z_1` and `Z_1` is computed exactly. Inference swaps
//! in the empirical length distribution π̃.

use std::path::Path;

use crate::corpus::{CorpusStore, LengthDist, Vocab};
use crate::error::{Result, TrfError};
use crate::nn::checkpoint::Container;
use crate::nn::{log_sum_exp, vocab_log_normalizer};
use crate::par;
use crate::potential::PotentialParams;
use crate::proposal::ProposalParams;

/// Hard cap on the number of sequences [`enumerate_log_z`] will visit.
pub const ENUMERATION_LIMIT: f64 = 1e6;

/// Default flattening floor for the training length prior.
pub const LENGTH_FLOOR: f64 = 0.1;

/// ζ_1..ζ_m with ζ_1 pinned at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Zeta(Vec<f64>);

impl Zeta {
    /// `ζ_l = (l - 1) log|V|`, exact for the zero potential.
    pub fn init(vocab_size: usize, m: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(TrfError::Domain("vocabulary size must be at least 2".into()));
        }
        if m == 0 {
            return Err(TrfError::Domain("max length must be positive".into()));
        }
        let lv = (vocab_size as f64).ln();
        Ok(Self((0..m).map(|i| i as f64 * lv).collect()))
    }

    /// Takes arbitrary values and shifts them so the first is 0.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(TrfError::Domain("zeta must be nonempty and finite".into()));
        }
        let mut z = Self(values);
        z.renormalize();
        Ok(z)
    }

    /// Subtracts ζ_1 from every entry.
    pub fn renormalize(&mut self) {
        let first = self.0[0];
        self.0.iter_mut().for_each(|z| *z -= first);
    }

    /// ζ_l, 1-based.
    pub fn get(&self, l: usize) -> f64 {
        self.0[l - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn max_len(&self) -> usize {
        self.0.len()
    }
}

/// θ, ζ, both length distributions and the vocabulary.
#[derive(Debug, Clone)]
pub struct TrfModel {
    pub potential: PotentialParams,
    pub zeta: Zeta,
    pub pi_infer: LengthDist,
    pub pi_train: LengthDist,
    pub vocab: Vocab,
    log_z1: f64,
}

impl TrfModel {
    pub fn new(
        potential: PotentialParams,
        zeta: Zeta,
        pi_infer: LengthDist,
        pi_train: LengthDist,
        vocab: Vocab,
    ) -> Result<Self> {
        let m = zeta.max_len();
        if pi_infer.max_len() != m || pi_train.max_len() != m {
            return Err(TrfError::Shape(format!(
                "length distributions cover {} and {} lengths, zeta covers {m}",
                pi_infer.max_len(),
                pi_train.max_len()
            )));
        }
        if potential.vocab_size() != vocab.size() {
            return Err(TrfError::Shape(format!(
                "potential embeds {} words, vocabulary has {}",
                potential.vocab_size(),
                vocab.size()
            )));
        }
        let log_z1 = log_z1_exact(&potential);
        Ok(Self { potential, zeta, pi_infer, pi_train, vocab, log_z1 })
    }

    pub fn max_len(&self) -> usize {
        self.zeta.max_len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// Cached `log Z_1(θ)`.
    pub fn log_z1(&self) -> f64 {
        self.log_z1
    }

    /// Recomputes the cached `log Z_1` after θ changed.
    pub fn refresh_normalizer(&mut self) {
        self.log_z1 = log_z1_exact(&self.potential);
    }

    fn check_len(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.max_len() {
            return Err(TrfError::Length { len: l, max: self.max_len() });
        }
        Ok(())
    }

    /// `log π⁰_l + φ(x) - ζ_l`: the training joint up to the constant
    /// `log Z_1`. All sampler acceptance ratios use this form.
    pub fn log_target_from_phi(&self, l: usize, phi: f64) -> f64 {
        self.pi_train.prob(l).ln() + phi - self.zeta.get(l)
    }

    pub fn log_target(&self, x: &[u32]) -> Result<f64> {
        self.check_len(x.len())?;
        Ok(self.log_target_from_phi(x.len(), self.potential.phi(x)?))
    }

    /// `log p(l, x; θ, ζ)` with the training length prior.
    pub fn log_joint_train(&self, x: &[u32]) -> Result<f64> {
        let l = x.len();
        self.check_len(l)?;
        if self.pi_train.prob(l) == 0.0 {
            return Err(TrfError::Domain(format!("training length prior is zero at length {l}")));
        }
        Ok(self.log_target(x)? - self.log_z1)
    }

    /// `log π̃_l + φ(x) - log Z_1 - ζ_l`: one potential forward pass, no
    /// per-position normalisation. Lengths with π̃_l = 0 score -inf.
    pub fn sentence_logprob(&self, x: &[u32]) -> Result<f64> {
        let l = x.len();
        self.check_len(l)?;
        let pi = self.pi_infer.prob(l);
        if pi == 0.0 {
            log::warn!("length {l} has zero empirical probability; scoring as -inf");
            return Ok(f64::NEG_INFINITY);
        }
        Ok(pi.ln() + self.potential.phi(x)? - self.log_z1 - self.zeta.get(l))
    }

    pub fn sentence_logprobs<S: AsRef<[u32]> + Sync>(&self, xs: &[S]) -> Result<Vec<f64>> {
        par::map(xs, |x| self.sentence_logprob(x.as_ref())).into_iter().collect()
    }

    /// Per-word perplexity over the sentences whose length has positive
    /// empirical probability.
    pub fn perplexity(&self, test: &CorpusStore) -> Result<PerplexityReport> {
        let usable: Vec<&[u32]> = test
            .sentences()
            .iter()
            .map(|s| s.ids())
            .filter(|s| s.len() <= self.max_len() && self.pi_infer.prob(s.len()) > 0.0)
            .collect();
        let excluded = test.len() - usable.len();
        if usable.is_empty() {
            return Err(TrfError::Domain("no test sentence has a length with positive probability".into()));
        }
        let scores = self.sentence_logprobs(&usable)?;
        let log_prob: f64 = scores.iter().sum();
        let tokens: usize = usable.iter().map(|s| s.len()).sum();
        Ok(PerplexityReport {
            ppl: (-log_prob / tokens as f64).exp(),
            log_prob,
            tokens,
            sentences: usable.len(),
            excluded,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityReport {
    pub ppl: f64,
    pub log_prob: f64,
    pub tokens: usize,
    pub sentences: usize,
    pub excluded: usize,
}

/// `log Σ_{x ∈ V} exp φ(x)` over every length-1 sentence.
pub fn log_z1_exact(theta: &PotentialParams) -> f64 {
    let ids: Vec<[u32; 1]> = (0..theta.vocab_size() as u32).map(|v| [v]).collect();
    let phis: Vec<f64> = par::map(&ids, |x| theta.phi(x).expect("length-1 ids are in range"));
    vocab_log_normalizer(&phis)
}

/// Calls `f` on every sequence of `V^l` in lexicographic order.
pub fn for_each_sequence<F: FnMut(&[u32])>(vocab_size: usize, l: usize, mut f: F) {
    let mut x = vec![0u32; l];
    loop {
        f(&x);
        let mut i = l;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            x[i] += 1;
            if (x[i] as usize) < vocab_size {
                break;
            }
            x[i] = 0;
        }
    }
}

/// `log Z_l = log Σ_{x ∈ V^l} exp φ(x)` by brute force.
pub fn enumerate_log_z(theta: &PotentialParams, l: usize) -> Result<f64> {
    let states = (theta.vocab_size() as f64).powi(l as i32);
    if states > ENUMERATION_LIMIT {
        return Err(TrfError::EnumerationGuard { states, limit: ENUMERATION_LIMIT });
    }
    if l == 0 {
        return Err(TrfError::Length { len: 0, max: usize::MAX });
    }
    let mut xs = Vec::with_capacity(states as usize);
    for_each_sequence(theta.vocab_size(), l, |x| xs.push(x.to_vec()));
    let phis = theta.phi_batch(&xs)?;
    Ok(log_sum_exp(&phis))
}

/// Exact `log(Z_l / Z_1)` for every length, by enumeration.
pub fn exact_zeta(theta: &PotentialParams, m: usize) -> Result<Zeta> {
    let logz: Vec<f64> = (1..=m).map(|l| enumerate_log_z(theta, l)).collect::<Result<_>>()?;
    Zeta::from_values(logz)
}

pub const MODEL_KIND: &str = "ntrf-model";
pub const MODEL_FORMAT_VERSION: &str = "1";

/// A TRF model plus (optionally) the proposal it was trained with.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub model: TrfModel,
    pub proposal: Option<ProposalParams>,
}

impl ModelFile {
    pub fn to_container(&self) -> Result<Container> {
        let m = &self.model;
        let mut c = Container::new();
        c.put_str("kind", MODEL_KIND);
        c.put_str("format_version", MODEL_FORMAT_VERSION);
        c.put_str("vocab", m.vocab.tokens().join("\n"));
        m.potential.write_container("potential/", &mut c)?;
        c.put_tensor("zeta", &[m.max_len()], m.zeta.values());
        c.put_tensor("pi_infer", &[m.max_len()], m.pi_infer.probs());
        c.put_tensor("pi_train", &[m.max_len()], m.pi_train.probs());
        if let Some(p) = &self.proposal {
            p.write_container("proposal/", &mut c)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.get_str("kind")? != MODEL_KIND {
            return Err(TrfError::Checkpoint("not a model file".into()));
        }
        let version = c.get_str("format_version")?;
        if version != MODEL_FORMAT_VERSION {
            return Err(TrfError::Checkpoint(format!(
                "model format version {version}, this build reads {MODEL_FORMAT_VERSION}"
            )));
        }
        let vocab = Vocab::from_tokens(c.get_str("vocab")?.lines().map(str::to_string).collect())?;
        let potential = PotentialParams::read_container("potential/", c)?;
        let zeta = Zeta::from_values(c.get_tensor("zeta")?.data.clone())?;
        let pi_infer = LengthDist::new(c.get_tensor("pi_infer")?.data.clone())?;
        let pi_train = LengthDist::new(c.get_tensor("pi_train")?.data.clone())?;
        let proposal = if c.strings.iter().any(|(n, _)| n == "proposal/config") {
            Some(ProposalParams::read_container("proposal/", c)?)
        } else {
            None
        };
        let model = TrfModel::new(potential, zeta, pi_infer, pi_train, vocab)?;
        Ok(Self { model, proposal })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let c = self.to_container()?;
        c.save(path)?;
        Ok(c.digest())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
