//! The deep CNN potential φ(x; θ).
//!
//! Pipeline per sentence of length `l` (every activation keeps `l` columns):
//!
//! 1. embedding lookup, `d_e x l`
//! 2. projection `max{W_p e_i + b_p, 0}`, `d_p x l`
//! 3. CNN-bank: `w` half-convolution filters for each width `1..=K`, ReLU,
//!    spliced to `wK x l`, then width-2 stride-1 max-pooling (left zero pad)
//! 4. CNN-stack: `n` half-convolution layers with ReLU (layer 1 maps `wK`
//!    channels to `d_s`), combined as `max{0, Σ_j a_j ⊙ Y_s^j}`; with `n = 0`
//!    a single width-1 layer with ReLU is used directly
//! 5. readout `λᵀ Σ_i Y_s[:, i] + c`

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Result, TrfError};
use crate::nn::checkpoint::Container;
use crate::nn::ops::{
    affine_backward, affine_relu_forward, conv_half_backward, conv_half_forward, embed_backward, embed_forward,
    maxpool_backward, maxpool_time, relu_backward_inplace, relu_mat, PoolSource,
};
use crate::nn::{Grads, Mat, ParamTensor};
use crate::par;

/// Initialisation half-width for every parameter.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialConfig {
    /// Embedding size.
    pub d_e: usize,
    /// Projection size.
    pub d_p: usize,
    /// Largest bank filter width; the bank has widths `1..=max_width`.
    pub max_width: usize,
    /// Filters per width.
    pub filters: usize,
    /// Number of stack layers (0 = single width-1 layer, no skip weights).
    pub stack_depth: usize,
    /// Stack channel count.
    pub d_s: usize,
    /// Filter width of the stack layers.
    pub stack_width: usize,
    /// Apply the width-2 max-pool after the bank.
    pub bank_pool: bool,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        Self {
            d_e: 32,
            d_p: 16,
            max_width: 4,
            filters: 16,
            stack_depth: 2,
            d_s: 16,
            stack_width: 3,
            bank_pool: true,
        }
    }
}

impl PotentialConfig {
    /// Full-size architecture: 256/128, widths 1..10 with 128 filters each,
    /// three width-3 stack layers of 128 channels.
    pub fn full_size() -> Self {
        Self {
            d_e: 256,
            d_p: 128,
            max_width: 10,
            filters: 128,
            stack_depth: 3,
            d_s: 128,
            stack_width: 3,
            bank_pool: true,
        }
    }

    pub fn bank_channels(&self) -> usize {
        self.filters * self.max_width
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.d_e, self.d_p, self.max_width, self.filters, self.d_s, self.stack_width];
        if all.contains(&0) {
            return Err(TrfError::Config("potential sizes must all be positive".into()));
        }
        if self.d_s > self.bank_channels() {
            return Err(TrfError::Config(format!(
                "d_s = {} exceeds bank channels filters*max_width = {}",
                self.d_s,
                self.bank_channels()
            )));
        }
        Ok(())
    }

    fn stack_layers(&self) -> usize {
        self.stack_depth.max(1)
    }
}

/// θ: every potential-network parameter, in a fixed tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialParams {
    config: PotentialConfig,
    vocab_size: usize,
    tensors: Vec<ParamTensor>,
    generation: u64,
}

struct Layout {
    bank: usize,
    stack: usize,
    skip: usize,
    readout: usize,
    bias: usize,
}

impl PotentialParams {
    /// All-zero parameters.
    pub fn zeros(config: PotentialConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(TrfError::Config("vocabulary size must be at least 2".into()));
        }
        let c = &config;
        let mut t = vec![
            ParamTensor::zeros("embed", &[vocab_size, c.d_e]),
            ParamTensor::zeros("proj_w", &[c.d_p, c.d_e]),
            ParamTensor::zeros("proj_b", &[c.d_p]),
        ];
        for k in 1..=c.max_width {
            t.push(ParamTensor::zeros(format!("bank_{k}"), &[c.filters, c.d_p, k]));
        }
        if c.stack_depth == 0 {
            t.push(ParamTensor::zeros("stack_1", &[c.d_s, c.bank_channels(), 1]));
        } else {
            for j in 0..c.stack_depth {
                let c_in = if j == 0 { c.bank_channels() } else { c.d_s };
                t.push(ParamTensor::zeros(format!("stack_{}", j + 1), &[c.d_s, c_in, c.stack_width]));
            }
            for j in 0..c.stack_depth {
                t.push(ParamTensor::zeros(format!("skip_{}", j + 1), &[c.d_s]));
            }
        }
        t.push(ParamTensor::zeros("readout", &[c.d_s]));
        t.push(ParamTensor::zeros("bias", &[1]));
        Ok(Self { config, vocab_size, tensors: t, generation: 0 })
    }

    /// Parameters drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(config: PotentialConfig, vocab_size: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config, vocab_size)?;
        for t in &mut p.tensors {
            for v in &mut t.values {
                *v = rng.random_range(-scale..=scale);
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &PotentialConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        self.generation += 1;
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.generation += 1;
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    fn layout(&self) -> Layout {
        let c = &self.config;
        let bank = 3;
        let stack = bank + c.max_width;
        let skip = stack + c.stack_layers();
        let readout = skip + c.stack_depth;
        Layout { bank, stack, skip, readout, bias: readout + 1 }
    }

    /// Concatenated parameter values in tensor order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.values.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(TrfError::Shape(format!("{} values for {} parameters", values.len(), self.num_params())));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.values.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces embedding rows from a text file of `token v_1 .. v_{d_e}`
    /// lines. Returns the number of rows replaced.
    pub fn import_embeddings(&mut self, text: &str, vocab: &Vocab) -> Result<usize> {
        let d_e = self.config.d_e;
        let mut replaced = 0;
        let table = &mut self.tensors_mut()[0];
        for (lineno, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(tok) = fields.next() else { continue };
            let vals: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| TrfError::Ingestion(format!("embedding line {}: {e}", lineno + 1)))?;
            if vals.len() != d_e {
                return Err(TrfError::Shape(format!(
                    "embedding line {} has {} values, expected {d_e}",
                    lineno + 1,
                    vals.len()
                )));
            }
            let id = vocab.id(tok) as usize;
            if id == 0 && tok != crate::corpus::UNK {
                continue;
            }
            table.values[id * d_e..(id + 1) * d_e].copy_from_slice(&vals);
            replaced += 1;
        }
        Ok(replaced)
    }

    /// φ and the activations needed by [`Self::phi_backward`].
    pub fn phi_forward(&self, ids: &[u32]) -> Result<(f64, PotentialCache)> {
        if ids.is_empty() {
            return Err(TrfError::Length { len: 0, max: usize::MAX });
        }
        let c = &self.config;
        let lay = self.layout();
        let t = &self.tensors;
        let x0 = embed_forward(ids, &t[0])?;
        let (proj_pre, proj) = affine_relu_forward(&x0, &t[1], &t[2])?;

        let l = ids.len();
        let mut bank_pre = Vec::with_capacity(c.max_width);
        let mut bank = Mat::zeros(c.bank_channels(), l);
        for k in 1..=c.max_width {
            let pre = conv_half_forward(&proj, &t[lay.bank + k - 1].values, c.filters, k);
            let base = (k - 1) * c.filters;
            for (r, &v) in pre.data.iter().enumerate() {
                bank.data[base * l + r] = if v > 0.0 { v } else { 0.0 };
            }
            bank_pre.push(pre);
        }
        let (pooled, pool_src) = if c.bank_pool {
            let (p, s) = maxpool_time(&bank);
            (p, Some(s))
        } else {
            (bank.clone(), None)
        };

        let mut stack_pre = Vec::with_capacity(c.stack_layers());
        let mut stack = Vec::with_capacity(c.stack_layers());
        for j in 0..c.stack_layers() {
            let input = if j == 0 { &pooled } else { &stack[j - 1] };
            let w = &t[lay.stack + j];
            let pre = conv_half_forward(input, &w.values, c.d_s, w.shape[2]);
            stack.push(relu_mat(&pre));
            stack_pre.push(pre);
        }

        let (skip_pre, top) = if c.stack_depth == 0 {
            (None, stack[0].clone())
        } else {
            let mut sum = Mat::zeros(c.d_s, l);
            for (j, layer) in stack.iter().enumerate() {
                let a = &t[lay.skip + j].values;
                for ch in 0..c.d_s {
                    for (s, &v) in sum.row_mut(ch).iter_mut().zip(layer.row(ch)) {
                        *s += a[ch] * v;
                    }
                }
            }
            let top = relu_mat(&sum);
            (Some(sum), top)
        };

        let lambda = &t[lay.readout].values;
        let mut value = t[lay.bias].values[0];
        for ch in 0..c.d_s {
            value += lambda[ch] * top.row(ch).iter().sum::<f64>();
        }

        let cache = PotentialCache {
            generation: self.generation,
            ids: ids.to_vec(),
            x0,
            proj_pre,
            proj,
            bank_pre,
            pooled,
            pool_src,
            stack_pre,
            stack,
            skip_pre,
            top,
            value,
        };
        Ok((value, cache))
    }

    /// φ only.
    pub fn phi(&self, ids: &[u32]) -> Result<f64> {
        Ok(self.phi_forward(ids)?.0)
    }

    /// Accumulates `upstream * ∂φ/∂θ` into `grads` (aligned with
    /// [`Self::tensors`]).
    pub fn phi_backward(&self, cache: &PotentialCache, upstream: f64, grads: &mut Grads) -> Result<()> {
        if cache.generation != self.generation {
            return Err(TrfError::Domain("stale potential cache: parameters changed since forward".into()));
        }
        if grads.0.len() != self.tensors.len() {
            return Err(TrfError::Shape("gradient buffer does not match potential parameters".into()));
        }
        if upstream == 0.0 {
            return Ok(());
        }
        let c = &self.config;
        let lay = self.layout();
        let t = &self.tensors;
        let l = cache.ids.len();

        // readout
        grads.0[lay.bias][0] += upstream;
        let lambda = &t[lay.readout].values;
        let mut d_top = Mat::zeros(c.d_s, l);
        for ch in 0..c.d_s {
            grads.0[lay.readout][ch] += upstream * cache.top.row(ch).iter().sum::<f64>();
            d_top.row_mut(ch).iter_mut().for_each(|g| *g = upstream * lambda[ch]);
        }

        // skip combination
        let mut d_stack: Vec<Mat> = (0..c.stack_layers()).map(|_| Mat::zeros(c.d_s, l)).collect();
        match &cache.skip_pre {
            None => d_stack[0] = d_top,
            Some(sum) => {
                let mut d_sum = d_top;
                relu_backward_inplace(sum, &mut d_sum);
                for (j, layer) in cache.stack.iter().enumerate() {
                    let a = &t[lay.skip + j].values;
                    for ch in 0..c.d_s {
                        let g = d_sum.row(ch);
                        grads.0[lay.skip + j][ch] += g.iter().zip(layer.row(ch)).map(|(g, v)| g * v).sum::<f64>();
                        for (d, &gv) in d_stack[j].row_mut(ch).iter_mut().zip(g) {
                            *d += a[ch] * gv;
                        }
                    }
                }
            }
        }

        // stack layers, top to bottom
        let mut d_pooled = Mat::zeros(c.bank_channels(), l);
        for j in (0..c.stack_layers()).rev() {
            let mut d_pre = std::mem::replace(&mut d_stack[j], Mat::zeros(0, 0));
            relu_backward_inplace(&cache.stack_pre[j], &mut d_pre);
            let w = &t[lay.stack + j];
            let input = if j == 0 { &cache.pooled } else { &cache.stack[j - 1] };
            let dinput = if j == 0 { &mut d_pooled } else { &mut d_stack[j - 1] };
            conv_half_backward(input, &w.values, c.d_s, w.shape[2], &d_pre, &mut grads.0[lay.stack + j], dinput);
        }

        // pooling and bank
        let d_bank = match &cache.pool_src {
            Some(src) => maxpool_backward(src, &d_pooled),
            None => d_pooled,
        };
        let mut d_proj = Mat::zeros(c.d_p, l);
        for k in 1..=c.max_width {
            let base = (k - 1) * c.filters;
            let mut d_pre = Mat::from_vec(c.filters, l, d_bank.data[base * l..(base + c.filters) * l].to_vec())?;
            relu_backward_inplace(&cache.bank_pre[k - 1], &mut d_pre);
            let idx = lay.bank + k - 1;
            conv_half_backward(&cache.proj, &t[idx].values, c.filters, k, &d_pre, &mut grads.0[idx], &mut d_proj);
        }

        // projection and embedding
        relu_backward_inplace(&cache.proj_pre, &mut d_proj);
        let (g_emb, rest) = grads.0.split_at_mut(1);
        let (g_w, g_b) = rest.split_at_mut(1);
        let d_x0 = affine_backward(&cache.x0, &t[1], &d_proj, &mut g_w[0], &mut g_b[0]);
        embed_backward(&cache.ids, &d_x0, &mut g_emb[0]);
        Ok(())
    }

    /// `∂φ/∂θ` as a fresh buffer.
    pub fn phi_grad(&self, ids: &[u32]) -> Result<(f64, Grads)> {
        let (v, cache) = self.phi_forward(ids)?;
        let mut g = Grads::zeros_like(&self.tensors);
        self.phi_backward(&cache, 1.0, &mut g)?;
        Ok((v, g))
    }

    /// φ for every sentence, order preserved; evaluated in parallel.
    pub fn phi_batch<S: AsRef<[u32]> + Sync>(&self, xs: &[S]) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Err(TrfError::Domain("phi_batch of an empty list".into()));
        }
        par::map(xs, |x| self.phi(x.as_ref())).into_iter().collect()
    }

    /// `Σ_i w_i ∂φ(x_i)/∂θ`, reduced in a thread-count independent order.
    pub fn weighted_grad<S: AsRef<[u32]> + Sync>(&self, items: &[(S, f64)]) -> Result<Grads> {
        let zero = || Ok(Grads::zeros_like(&self.tensors));
        par::chunked_reduce(
            items,
            zero,
            |acc: &mut Result<Grads>, (x, w)| {
                if let Ok(g) = acc {
                    let r = self.phi_forward(x.as_ref()).and_then(|(_, cache)| self.phi_backward(&cache, *w, g));
                    if let Err(e) = r {
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
        let config: PotentialConfig = serde_json::from_str(c.get_str(&format!("{prefix}config"))?)
            .map_err(|e| TrfError::Checkpoint(e.to_string()))?;
        let vocab_size: usize = c
            .get_str(&format!("{prefix}vocab_size"))?
            .parse()
            .map_err(|e| TrfError::Checkpoint(format!("vocab_size: {e}")))?;
        let mut p = Self::zeros(config, vocab_size)?;
        for t in p.tensors_mut() {
            let stored = c.get_tensor(&format!("{prefix}{}", t.name))?;
            if stored.shape != t.shape {
                return Err(TrfError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name, stored.shape, t.shape
                )));
            }
            t.values.copy_from_slice(&stored.data);
        }
        Ok(p)
    }
}

/// Activations from one forward pass.
#[derive(Debug, Clone)]
pub struct PotentialCache {
    generation: u64,
    ids: Vec<u32>,
    x0: Mat,
    proj_pre: Mat,
    proj: Mat,
    bank_pre: Vec<Mat>,
    pooled: Mat,
    pool_src: Option<Vec<PoolSource>>,
    stack_pre: Vec<Mat>,
    stack: Vec<Mat>,
    skip_pre: Option<Mat>,
    top: Mat,
    value: f64,
}

impl PotentialCache {
    pub fn value(&self) -> f64 {
        self.value
    }

    /// Time dimension of every cached activation.
    pub fn time_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.x0.cols, self.proj_pre.cols, self.proj.cols, self.pooled.cols, self.top.cols];
        dims.extend(self.bank_pre.iter().map(|m| m.cols));
        dims.extend(self.stack_pre.iter().map(|m| m.cols));
        dims.extend(self.stack.iter().map(|m| m.cols));
        dims.extend(self.skip_pre.iter().map(|m| m.cols));
        dims
    }

    /// Distance to the nearest non-differentiable point: the smallest
    /// |pre-activation| over all ReLUs and the smallest gap between the two
    /// candidates of any max-pool whose winner is positive.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        let mut scan = |mat: &Mat| {
            for &v in &mat.data {
                m = m.min(v.abs());
            }
        };
        scan(&self.proj_pre);
        self.bank_pre.iter().for_each(&mut scan);
        self.stack_pre.iter().for_each(&mut scan);
        if let Some(s) = &self.skip_pre {
            scan(s);
        }
        if self.pool_src.is_some() {
            let l = self.pooled.cols;
            let bank: Vec<f64> = self
                .bank_pre
                .iter()
                .flat_map(|p| p.data.iter().map(|&v| v.max(0.0)))
                .collect();
            for r in 0..self.pooled.rows {
                for i in 0..l {
                    let cur = bank[r * l + i];
                    let prev = if i == 0 { 0.0 } else { bank[r * l + i - 1] };
                    if cur.max(prev) > 0.0 {
                        m = m.min((cur - prev).abs());
                    }
                }
            }
        }
        m
    }
}
