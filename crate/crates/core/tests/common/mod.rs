//! Enumeration oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use ntrf::corpus::{CorpusStore, LengthDist, TokenSeq, Vocab};
use ntrf::model::{enumerate_log_z, exact_zeta, for_each_sequence, TrfModel};
use ntrf::potential::{PotentialConfig, PotentialParams};
use ntrf::proposal::{sample_log_categorical, ProposalConfig, ProposalParams};
use ntrf::sampler::stream_rng;

pub fn tiny_potential() -> PotentialConfig {
    PotentialConfig {
        d_e: 8,
        d_p: 8,
        max_width: 3,
        filters: 4,
        stack_depth: 1,
        d_s: 8,
        stack_width: 2,
        bank_pool: true,
    }
}

pub fn tiny_proposal() -> ProposalConfig {
    ProposalConfig { d_e: 4, hidden: 8 }
}

/// Every sentence of length 1..=m.
pub fn all_states(v: usize, m: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for l in 1..=m {
        for_each_sequence(v, l, |x| out.push(x.to_vec()));
    }
    out
}

/// Exact `p(l, x) = π_l exp φ(x) / Z_l` over every state, in `all_states`
/// order, using enumerated normalisers (ζ is ignored).
pub fn exact_joint(theta: &PotentialParams, pi: &LengthDist) -> Vec<(Vec<u32>, f64)> {
    let m = pi.max_len();
    let logz: Vec<f64> = (1..=m).map(|l| enumerate_log_z(theta, l).unwrap()).collect();
    all_states(theta.vocab_size(), m)
        .into_iter()
        .map(|x| {
            let l = x.len();
            let p = pi.prob(l) * (theta.phi(&x).unwrap() - logz[l - 1]).exp();
            (x, p)
        })
        .collect()
}

/// Joint implied by the model's own ζ and π⁰ (what the sampler targets).
pub fn sampler_target(model: &TrfModel) -> Vec<(Vec<u32>, f64)> {
    let states = all_states(model.vocab_size(), model.max_len());
    let logs: Vec<f64> = states.iter().map(|x| model.log_target(x).unwrap()).collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
    states.into_iter().zip(logs).map(|(x, l)| (x, (l - mx).exp() / total)).collect()
}

pub fn tv_distance(exact: &[(Vec<u32>, f64)], counts: &HashMap<Vec<u32>, usize>, n: usize) -> f64 {
    let mut tv = 0.0;
    let mut seen = 0usize;
    for (x, p) in exact {
        let c = counts.get(x).copied().unwrap_or(0);
        seen += c;
        tv += (c as f64 / n as f64 - p).abs();
    }
    // Mass on states outside the enumeration counts fully.
    tv += (n - seen) as f64 / n as f64;
    tv / 2.0
}

pub fn tv_between(a: &[(Vec<u32>, f64)], b: &[(Vec<u32>, f64)]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|((xa, pa), (xb, pb))| {
            assert_eq!(xa, xb);
            (pa - pb).abs()
        })
        .sum::<f64>()
        / 2.0
}

/// A model with random θ, exact ζ, and the given length prior used for
/// both π̃ and π⁰.
pub fn generator(v: usize, m: usize, scale: f64, pi: LengthDist, seed: u64) -> TrfModel {
    let mut rng = stream_rng(seed, 77);
    let theta = PotentialParams::random(tiny_potential(), v, scale, &mut rng).unwrap();
    let zeta = exact_zeta(&theta, m).unwrap();
    TrfModel::new(theta, zeta, pi.clone(), pi, Vocab::synthetic(v).unwrap()).unwrap()
}

pub fn random_proposal(v: usize, seed: u64) -> ProposalParams {
    let mut rng = stream_rng(seed, 78);
    ProposalParams::random(tiny_proposal(), v, 0.1, &mut rng).unwrap()
}

/// `n` sentences drawn i.i.d. from the exact joint.
pub fn draw_corpus(joint: &[(Vec<u32>, f64)], n: usize, m: usize, seed: u64) -> CorpusStore {
    let mut rng = stream_rng(seed, 79);
    let logp: Vec<f64> = joint.iter().map(|(_, p)| p.ln()).collect();
    let sentences = (0..n)
        .map(|_| TokenSeq::new(joint[sample_log_categorical(&logp, &mut rng)].0.clone()))
        .collect();
    CorpusStore::new(sentences, m).unwrap()
}

/// Mean exact log-likelihood of `data` under θ with lengths from `pi`.
pub fn exact_data_ll(theta: &PotentialParams, pi: &LengthDist, data: &CorpusStore) -> f64 {
    let joint = exact_joint(theta, pi);
    let table: HashMap<&[u32], f64> = joint.iter().map(|(x, p)| (x.as_slice(), p.ln())).collect();
    data.sentences().iter().map(|s| table[s.ids()]).sum::<f64>() / data.len() as f64
}
