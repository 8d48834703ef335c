use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    gelu, gelu_grad, softmax, ForwardTrace, ModelConfig, NeuronId, NeuronOverride, OverrideScope,
    OverrideSpec, TokenSequence,
};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

/// Dense affine map `y = W x + b` with `W` stored row-major as `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    fn random(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut l = Linear::zeros(n_in, n_out);
        fill_normal(&mut l.w, rng);
        l
    }

    fn fan_in(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut l = Linear::zeros(n_in, n_out);
        fill_normal_std(&mut l.w, 1.0 / (n_in as f64).sqrt(), rng);
        l
    }

    /// Applies the map to `rows` stacked input vectors.
    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.n_out];
        let k = self.n_in;
        for t in 0..rows {
            let xt = &x[t * k..(t + 1) * k];
            let yt = &mut y[t * self.n_out..(t + 1) * self.n_out];
            let blocked = self.n_out - self.n_out % 4;
            for o in (0..blocked).step_by(4) {
                let d = dot4(&self.w[o * k..(o + 4) * k], k, xt);
                for r in 0..4 {
                    yt[o + r] = self.b[o + r] + d[r];
                }
            }
            for o in blocked..self.n_out {
                yt[o] = self.b[o] + dot(&self.w[o * k..(o + 1) * k], xt);
            }
        }
        y
    }

    fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x, 1)
    }

    /// Accumulates `dx += W^T dy` and, when given, the parameter gradients.
    fn backward(&self, x: &[f64], dy: &[f64], rows: usize, dx: &mut [f64], grad: Option<&mut Linear>) {
        for t in 0..rows {
            let dyt = &dy[t * self.n_out..(t + 1) * self.n_out];
            let dxt = &mut dx[t * self.n_in..(t + 1) * self.n_in];
            for (o, &g) in dyt.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &self.w[o * self.n_in..(o + 1) * self.n_in], dxt);
                }
            }
        }
        if let Some(grad) = grad {
            for t in 0..rows {
                let xt = &x[t * self.n_in..(t + 1) * self.n_in];
                let dyt = &dy[t * self.n_out..(t + 1) * self.n_out];
                for (o, &g) in dyt.iter().enumerate() {
                    if g != 0.0 {
                        grad.b[o] += g;
                        axpy(g, xt, &mut grad.w[o * self.n_in..(o + 1) * self.n_in]);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Norm {
    fn identity(d: usize) -> Self {
        Norm {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    fn zeros(d: usize) -> Self {
        Norm {
            gamma: vec![0.0; d],
            beta: vec![0.0; d],
        }
    }

    fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, NormCache) {
        let d = self.gamma.len();
        let mut y = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for t in 0..rows {
            let xt = &x[t * d..(t + 1) * d];
            let mean = xt.iter().sum::<f64>() / d as f64;
            let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[t] = inv;
            for j in 0..d {
                let h = (xt[j] - mean) * inv;
                xhat[t * d + j] = h;
                y[t * d + j] = self.gamma[j] * h + self.beta[j];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    fn backward(&self, cache: &NormCache, dy: &[f64], rows: usize, grad: Option<&mut Norm>) -> Vec<f64> {
        let d = self.gamma.len();
        let mut dx = vec![0.0; rows * d];
        let mut dxhat = vec![0.0; d];
        for t in 0..rows {
            let xh = &cache.xhat[t * d..(t + 1) * d];
            let dyt = &dy[t * d..(t + 1) * d];
            for j in 0..d {
                dxhat[j] = dyt[j] * self.gamma[j];
            }
            let sum: f64 = dxhat.iter().sum();
            let sum_xh: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
            let inv = cache.inv_std[t];
            for j in 0..d {
                dx[t * d + j] = inv / d as f64 * (d as f64 * dxhat[j] - sum - xh[j] * sum_xh);
            }
        }
        if let Some(g) = grad {
            for t in 0..rows {
                for j in 0..d {
                    g.gamma[j] += dy[t * d + j] * cache.xhat[t * d + j];
                    g.beta[j] += dy[t * d + j];
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// One post-norm encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln_attn: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ln_ffn: Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub ln_emb: Norm,
    pub blocks: Vec<Block>,
    /// Masked-LM output head, `vocab_size x d_model`.
    pub head: Linear,
}

impl Params {
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let mut tok_emb = vec![0.0; config.vocab_size * d];
        fill_normal(&mut tok_emb, &mut rng);
        let mut pos_emb = vec![0.0; config.max_len * d];
        fill_normal(&mut pos_emb, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                query: Linear::random(d, d, &mut rng),
                key: Linear::random(d, d, &mut rng),
                value: Linear::random(d, d, &mut rng),
                attn_out: Linear::random(d, d, &mut rng),
                ln_attn: Norm::identity(d),
                ff_in: Linear::fan_in(d, config.d_ff, &mut rng),
                ff_out: Linear::fan_in(config.d_ff, d, &mut rng),
                ln_ffn: Norm::identity(d),
            })
            .collect();
        Params {
            tok_emb,
            pos_emb,
            ln_emb: Norm::identity(d),
            blocks,
            head: Linear::fan_in(d, config.vocab_size, &mut rng),
        }
    }

    pub fn zeros_like(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Params {
            tok_emb: vec![0.0; config.vocab_size * d],
            pos_emb: vec![0.0; config.max_len * d],
            ln_emb: Norm::zeros(d),
            blocks: (0..config.n_layers)
                .map(|_| Block {
                    query: Linear::zeros(d, d),
                    key: Linear::zeros(d, d),
                    value: Linear::zeros(d, d),
                    attn_out: Linear::zeros(d, d),
                    ln_attn: Norm::zeros(d),
                    ff_in: Linear::zeros(d, config.d_ff),
                    ff_out: Linear::zeros(config.d_ff, d),
                    ln_ffn: Norm::zeros(d),
                })
                .collect(),
            head: Linear::zeros(d, config.vocab_size),
        }
    }

    /// All tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.tok_emb, &self.pos_emb, &self.ln_emb.gamma, &self.ln_emb.beta];
        for b in &self.blocks {
            for l in [&b.query, &b.key, &b.value, &b.attn_out] {
                v.push(&l.w);
                v.push(&l.b);
            }
            v.push(&b.ln_attn.gamma);
            v.push(&b.ln_attn.beta);
            v.push(&b.ff_in.w);
            v.push(&b.ff_in.b);
            v.push(&b.ff_out.w);
            v.push(&b.ff_out.b);
            v.push(&b.ln_ffn.gamma);
            v.push(&b.ln_ffn.beta);
        }
        v.push(&self.head.w);
        v.push(&self.head.b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.ln_emb.gamma,
            &mut self.ln_emb.beta,
        ];
        for b in &mut self.blocks {
            for l in [&mut b.query, &mut b.key, &mut b.value, &mut b.attn_out] {
                v.push(&mut l.w);
                v.push(&mut l.b);
            }
            v.push(&mut b.ln_attn.gamma);
            v.push(&mut b.ln_attn.beta);
            v.push(&mut b.ff_in.w);
            v.push(&mut b.ff_in.b);
            v.push(&mut b.ff_out.w);
            v.push(&mut b.ff_out.b);
            v.push(&mut b.ln_ffn.gamma);
            v.push(&mut b.ln_ffn.beta);
        }
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln_attn: NormCache,
    h: Vec<f64>,
    pre: Vec<f64>,
    eff: Vec<f64>,
    ln_ffn: NormCache,
}

/// Cached forward pass over one sequence.
#[derive(Debug, Clone)]
pub(crate) struct Pass {
    pub(crate) len: usize,
    tokens: Vec<usize>,
    pub(crate) mask_position: Option<usize>,
    ln_emb: NormCache,
    layers: Vec<LayerCache>,
    pub(crate) hidden: Vec<f64>,
    table: Vec<Vec<Option<OverrideSpec>>>,
    scope: OverrideScope,
}

impl Pass {
    fn overridden_at(&self, t: usize) -> bool {
        match self.scope {
            OverrideScope::AllPositions => true,
            OverrideScope::MaskPosition => self.mask_position == Some(t),
        }
    }

    pub(crate) fn hidden_row(&self, t: usize, d: usize) -> &[f64] {
        &self.hidden[t * d..(t + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// One row of `vocab_size` logits per position.
    pub logits: Vec<Vec<f64>>,
    pub trace: ForwardTrace,
}

/// Probability of one answer at the mask position, with optional gradients
/// with respect to every neuron value at that position.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutput {
    pub prob: f64,
    pub trace: ForwardTrace,
    pub grads: Option<Vec<Vec<f64>>>,
}

impl ProbeOutput {
    pub fn grad(&self, n: NeuronId) -> Option<f64> {
        self.grads.as_ref().map(|g| g[n.layer][n.index])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: ModelConfig,
    pub params: Params,
}

impl Encoder {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Encoder {
            config,
            params: Params::init(&config),
        })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::zeros_like(&config);
        let ok = expected.tensors().len() == params.tensors().len()
            && expected
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(Error::InvalidConfig("parameter shapes do not match config".into()));
        }
        Ok(Encoder { config, params })
    }

    fn check(&self, seq: &TokenSequence, overrides: &NeuronOverride) -> Result<()> {
        if seq.tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: seq.tokens.len(),
                max_len: self.config.max_len,
            });
        }
        if seq.tokens.is_empty() {
            return Err(Error::InvalidConfig("empty sequence".into()));
        }
        if let Some(&id) = seq.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        if let Some(p) = seq.mask_position {
            if p >= seq.tokens.len() {
                return Err(Error::InvalidConfig(format!("mask position {p} out of range")));
            }
        }
        overrides.validate(&self.config)
    }

    pub(crate) fn run(&self, seq: &TokenSequence, overrides: &NeuronOverride) -> Result<Pass> {
        self.check(seq, overrides)?;
        let cfg = &self.config;
        let (d, n) = (cfg.d_model, seq.tokens.len());
        let p = &self.params;

        let mut x0 = vec![0.0; n * d];
        for (t, &tok) in seq.tokens.iter().enumerate() {
            for j in 0..d {
                x0[t * d + j] = p.tok_emb[tok * d + j] + p.pos_emb[t * d + j];
            }
        }
        let (mut x, ln_emb) = p.ln_emb.forward(&x0, n);

        let mut pass = Pass {
            len: n,
            tokens: seq.tokens.clone(),
            mask_position: seq.mask_position,
            ln_emb,
            layers: Vec::with_capacity(cfg.n_layers),
            hidden: Vec::new(),
            table: overrides.dense(cfg),
            scope: overrides.scope(),
        };

        for l in 0..cfg.n_layers {
            let (lc, out) = self.block_forward(l, &x, n, &pass.table[l], |t| pass.overridden_at(t));
            x = out;
            pass.layers.push(lc);
        }
        pass.hidden = x;
        Ok(pass)
    }

    /// One encoder block over `n` rows. `table` holds the overrides of this
    /// layer (may be empty) and `over` says which rows they touch.
    fn block_forward(
        &self,
        l: usize,
        x: &[f64],
        n: usize,
        table: &[Option<OverrideSpec>],
        over: impl Fn(usize) -> bool,
    ) -> (LayerCache, Vec<f64>) {
        let cfg = &self.config;
        let (d, dff) = (cfg.d_model, cfg.d_ff);
        let blk = &self.params.blocks[l];
        let n_heads = cfg.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = blk.query.forward(x, n);
        let k = blk.key.forward(x, n);
        let v = blk.value.forward(x, n);
        let mut probs = vec![0.0; n_heads * n * n];
        let mut ctx = vec![0.0; n * d];
        let mut scores = vec![0.0; n];
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                }
                let pr = softmax(&scores);
                let ci = &mut ctx[i * d + off..i * d + off + dh];
                for (j, &pj) in pr.iter().enumerate() {
                    axpy(pj, &v[j * d + off..j * d + off + dh], ci);
                }
                probs[(h * n + i) * n..(h * n + i + 1) * n].copy_from_slice(&pr);
            }
        }
        let a = blk.attn_out.forward(&ctx, n);
        let r1: Vec<f64> = x.iter().zip(&a).map(|(u, w)| u + w).collect();
        let (hid, ln_attn) = blk.ln_attn.forward(&r1, n);

        let pre = blk.ff_in.forward(&hid, n);
        let mut eff: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        if table.iter().any(Option::is_some) {
            for t in (0..n).filter(|&t| over(t)) {
                for (i, spec) in table.iter().enumerate() {
                    if let Some(spec) = spec {
                        eff[t * dff + i] = spec.apply(eff[t * dff + i]);
                    }
                }
            }
        }
        let f = blk.ff_out.forward(&eff, n);
        let r2: Vec<f64> = hid.iter().zip(&f).map(|(u, w)| u + w).collect();
        let (out, ln_ffn) = blk.ln_ffn.forward(&r2, n);
        let lc = LayerCache {
            input: x.to_vec(),
            q,
            k,
            v,
            probs,
            ctx,
            ln_attn,
            h: hid,
            pre,
            eff,
            ln_ffn,
        };
        (lc, out)
    }

    fn trace_of(&self, pass: &Pass) -> ForwardTrace {
        let dff = self.config.d_ff;
        ForwardTrace {
            mask_position: pass.mask_position,
            activations: match pass.mask_position {
                Some(m) => pass
                    .layers
                    .iter()
                    .map(|lc| lc.eff[m * dff..(m + 1) * dff].to_vec())
                    .collect(),
                None => Vec::new(),
            },
        }
    }

    pub(crate) fn logits_at(&self, pass: &Pass, t: usize) -> Vec<f64> {
        self.params.head.forward_row(pass.hidden_row(t, self.config.d_model))
    }

    /// Logits at every position plus the mask-position neuron trace.
    pub fn forward(&self, seq: &TokenSequence, overrides: &NeuronOverride) -> Result<ForwardOutput> {
        let pass = self.run(seq, overrides)?;
        let logits = (0..pass.len).map(|t| self.logits_at(&pass, t)).collect();
        Ok(ForwardOutput {
            logits,
            trace: self.trace_of(&pass),
        })
    }

    /// Softmax probability of `target` at the mask position.
    pub fn mask_token_prob(&self, seq: &TokenSequence, target: usize, overrides: &NeuronOverride) -> Result<f64> {
        Ok(self.probe(seq, target, overrides, false)?.prob)
    }

    /// Reverse-mode gradient of the mask-position probability of `target`
    /// with respect to every neuron value entering the FFN output projection
    /// at the mask position.
    pub fn grad_wrt_neurons(
        &self,
        seq: &TokenSequence,
        target: usize,
        overrides: &NeuronOverride,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .probe(seq, target, overrides, true)?
            .grads
            .expect("gradients requested"))
    }

    pub fn probe(
        &self,
        seq: &TokenSequence,
        target: usize,
        overrides: &NeuronOverride,
        with_grads: bool,
    ) -> Result<ProbeOutput> {
        let mask = seq.mask_position.ok_or(Error::NoMaskPosition)?;
        if target >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: target,
                vocab_size: self.config.vocab_size,
            });
        }
        let pass = self.run(seq, overrides)?;
        let probs = softmax(&self.logits_at(&pass, mask));
        let prob = probs[target];
        let trace = self.trace_of(&pass);
        if !with_grads {
            return Ok(ProbeOutput {
                prob,
                trace,
                grads: None,
            });
        }
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, &pj)| prob * (if j == target { 1.0 } else { 0.0 } - pj))
            .collect();
        let d = self.config.d_model;
        let mut dhidden = vec![0.0; pass.len * d];
        self.params
            .head
            .backward(pass.hidden_row(mask, d), &dlogits, 1, &mut dhidden[mask * d..(mask + 1) * d], None);
        let grads = self.backward(&pass, dhidden, None, true);
        Ok(ProbeOutput {
            prob,
            trace,
            grads,
        })
    }

    /// Mask-position probability of `target` and its derivative with respect
    /// to `neuron`, with that neuron pinned at the mask position to each of
    /// `values` in turn. Same numbers as `probe` with a `SetTo` override, but
    /// only the layers above the neuron are recomputed.
    pub fn neuron_sweep(
        &self,
        seq: &TokenSequence,
        target: usize,
        neuron: NeuronId,
        values: &[f64],
    ) -> Result<Vec<(f64, f64)>> {
        let m = seq.mask_position.ok_or(Error::NoMaskPosition)?;
        if target >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: target,
                vocab_size: self.config.vocab_size,
            });
        }
        let mut pin = NeuronOverride::new(OverrideScope::MaskPosition);
        pin.insert(neuron, OverrideSpec::SetTo(0.0))?;
        self.check(seq, &pin)?;

        let cfg = &self.config;
        let (d, dff, n, n_layers) = (cfg.d_model, cfg.d_ff, seq.tokens.len(), cfg.n_layers);
        let (l, i) = (neuron.layer, neuron.index);
        let base = self.run(seq, &NeuronOverride::default())?;
        let blk = &self.params.blocks[l];
        let lc = &base.layers[l];
        let hid_m = &lc.h[m * d..(m + 1) * d];
        let below = if l + 1 < n_layers {
            &base.layers[l + 1].input
        } else {
            &base.hidden
        };
        let mut eff_m = lc.eff[m * dff..(m + 1) * dff].to_vec();
        let mut out = Vec::with_capacity(values.len());
        for &v in values {
            eff_m[i] = v;
            let f = blk.ff_out.forward_row(&eff_m);
            let r2: Vec<f64> = hid_m.iter().zip(&f).map(|(u, w)| u + w).collect();
            let (row, norm) = blk.ln_ffn.forward(&r2, 1);
            let mut x = below.clone();
            x[m * d..(m + 1) * d].copy_from_slice(&row);
            let mut caches = Vec::with_capacity(n_layers - l - 1);
            for u in l + 1..n_layers {
                let (c, o) = self.block_forward(u, &x, n, &[], |_| false);
                caches.push(c);
                x = o;
            }

            let xm = &x[m * d..(m + 1) * d];
            let probs = softmax(&self.params.head.forward_row(xm));
            let prob = probs[target];
            let dlogits: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(j, &pj)| prob * (if j == target { 1.0 } else { 0.0 } - pj))
                .collect();
            let mut dx = vec![0.0; n * d];
            self.params
                .head
                .backward(xm, &dlogits, 1, &mut dx[m * d..(m + 1) * d], None);
            for (u, c) in (l + 1..n_layers).zip(&caches).rev() {
                dx = self
                    .block_backward(u, c, &dx, n, &[], |_| false, None, None, true)
                    .expect("input gradient requested");
            }
            let dr2 = blk.ln_ffn.backward(&norm, &dx[m * d..(m + 1) * d], 1, None);
            let mut grad = 0.0;
            for (o, &g) in dr2.iter().enumerate() {
                if g != 0.0 {
                    grad += g * blk.ff_out.w[o * dff + i];
                }
            }
            out.push((prob, grad));
        }
        Ok(out)
    }

    /// Backpropagates `dhidden` (gradient w.r.t. the final hidden states)
    /// through the encoder. Parameter gradients are accumulated into `grads`
    /// when given; mask-position neuron gradients are returned when asked.
    pub(crate) fn backward(
        &self,
        pass: &Pass,
        dhidden: Vec<f64>,
        mut grads: Option<&mut Params>,
        neuron_grads: bool,
    ) -> Option<Vec<Vec<f64>>> {
        let cfg = &self.config;
        let (d, n) = (cfg.d_model, pass.len);
        let mut out_grads = if neuron_grads && pass.mask_position.is_some() {
            Some(vec![Vec::new(); cfg.n_layers])
        } else {
            None
        };
        let mut dx = dhidden;

        for l in (0..cfg.n_layers).rev() {
            let g_blk = grads.as_deref_mut().map(|g| &mut g.blocks[l]);
            let og = out_grads.as_mut().map(|og| &mut og[l]);
            let need_input = l > 0 || g_blk.is_some();
            match self.block_backward(l, &pass.layers[l], &dx, n, &pass.table[l], |t| pass.overridden_at(t), g_blk, og.zip(pass.mask_position), need_input) {
                Some(next) => dx = next,
                None => break,
            }
        }

        if let Some(g) = grads {
            let de = self.params.ln_emb.backward(&pass.ln_emb, &dx, n, Some(&mut g.ln_emb));
            for (t, &tok) in pass.tokens.iter().enumerate() {
                for j in 0..d {
                    g.tok_emb[tok * d + j] += de[t * d + j];
                    g.pos_emb[t * d + j] += de[t * d + j];
                }
            }
        }
        out_grads
    }

    /// Backpropagates `dx` (gradient w.r.t. the block output) through block
    /// `l`. With `neuron` set, stores the gradient w.r.t. the neuron values
    /// at that row. Returns the gradient w.r.t. the block input unless
    /// `need_input` is false.
    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        l: usize,
        lc: &LayerCache,
        dx: &[f64],
        n: usize,
        table: &[Option<OverrideSpec>],
        over: impl Fn(usize) -> bool,
        mut g_blk: Option<&mut Block>,
        neuron: Option<(&mut Vec<f64>, usize)>,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let cfg = &self.config;
        let (d, dff) = (cfg.d_model, cfg.d_ff);
        let n_heads = cfg.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let blk = &self.params.blocks[l];

        let dr2 = blk
            .ln_ffn
            .backward(&lc.ln_ffn, dx, n, g_blk.as_deref_mut().map(|g| &mut g.ln_ffn));
        let mut dh1 = dr2.clone();
        let mut deff = vec![0.0; n * dff];
        blk.ff_out
            .backward(&lc.eff, &dr2, n, &mut deff, g_blk.as_deref_mut().map(|g| &mut g.ff_out));
        if let Some((og, m)) = neuron {
            *og = deff[m * dff..(m + 1) * dff].to_vec();
        }
        if !need_input {
            return None;
        }

        let mut dpre = vec![0.0; n * dff];
        for t in 0..n {
            let over = over(t);
            for i in 0..dff {
                let slope = match (over, table.get(i).copied().flatten()) {
                    (true, Some(spec)) => spec.slope(),
                    _ => 1.0,
                };
                if slope != 0.0 {
                    dpre[t * dff + i] = deff[t * dff + i] * slope * gelu_grad(lc.pre[t * dff + i]);
                }
            }
        }
        blk.ff_in
            .backward(&lc.h, &dpre, n, &mut dh1, g_blk.as_deref_mut().map(|g| &mut g.ff_in));

        let dr1 = blk
            .ln_attn
            .backward(&lc.ln_attn, &dh1, n, g_blk.as_deref_mut().map(|g| &mut g.ln_attn));
        let mut dctx = vec![0.0; n * d];
        blk.attn_out
            .backward(&lc.ctx, &dr1, n, &mut dctx, g_blk.as_deref_mut().map(|g| &mut g.attn_out));

        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..n {
                let pr = &lc.probs[(h * n + i) * n..(h * n + i + 1) * n];
                let dci = &dctx[i * d + off..i * d + off + dh];
                for j in 0..n {
                    dp[j] = dot(dci, &lc.v[j * d + off..j * d + off + dh]);
                    axpy(pr[j], dci, &mut dv[j * d + off..j * d + off + dh]);
                }
                let inner: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    let ds = pr[j] * (dp[j] - inner) * scale;
                    if ds != 0.0 {
                        axpy(ds, &lc.k[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                        axpy(ds, &lc.q[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                    }
                }
            }
        }
        let mut dinput = dr1;
        blk.query
            .backward(&lc.input, &dq, n, &mut dinput, g_blk.as_deref_mut().map(|g| &mut g.query));
        blk.key
            .backward(&lc.input, &dk, n, &mut dinput, g_blk.as_deref_mut().map(|g| &mut g.key));
        blk.value
            .backward(&lc.input, &dv, n, &mut dinput, g_blk.map(|g| &mut g.value));
        Some(dinput)
    }

    /// Permanently zeroes the outgoing FFN projection weights of `neurons`.
    pub fn zero_outgoing(&mut self, neurons: &[NeuronId]) -> Result<()> {
        let o = NeuronOverride::uniform(neurons, OverrideSpec::Zero, OverrideScope::AllPositions)?;
        o.validate(&self.config)?;
        let dff = self.config.d_ff;
        for n in neurons {
            let w = &mut self.params.blocks[n.layer].ff_out.w;
            for row in 0..self.config.d_model {
                w[row * dff + n.index] = 0.0;
            }
        }
        Ok(())
    }
}

fn fill_normal(buf: &mut [f64], rng: &mut ChaCha8Rng) {
    fill_normal_std(buf, INIT_STD, rng)
}

fn fill_normal_std(buf: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("valid std");
    for v in buf {
        *v = dist.sample(rng);
    }
}

/// Four interleaved partial sums, so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (ac, at) = a[..n].as_chunks::<4>();
    let (bc, bt) = b[..n].as_chunks::<4>();
    let mut acc = [0.0f64; 4];
    for (x, y) in ac.iter().zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in at.iter().zip(bt) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `dot` of four consecutive rows of `w` (each `k` long) with `x`, summed in
/// exactly the same order as `dot`.
#[inline]
fn dot4(w: &[f64], k: usize, x: &[f64]) -> [f64; 4] {
    let (r0, rest) = w.split_at(k);
    let (r1, rest) = rest.split_at(k);
    let (r2, r3) = rest.split_at(k);
    let xc = x[..k].as_chunks::<4>().0;
    let (c0, c1, c2, c3) = (r0.as_chunks::<4>().0, r1.as_chunks::<4>().0, r2.as_chunks::<4>().0, r3[..k].as_chunks::<4>().0);
    let mut acc = [[0.0f64; 4]; 4];
    for ((((x, a), b), c), d) in xc.iter().zip(c0).zip(c1).zip(c2).zip(c3) {
        for j in 0..4 {
            acc[0][j] += a[j] * x[j];
            acc[1][j] += b[j] * x[j];
            acc[2][j] += c[j] * x[j];
            acc[3][j] += d[j] * x[j];
        }
    }
    let split = k - k % 4;
    let rows = [r0, r1, r2, r3];
    let mut out = [0.0; 4];
    for r in 0..4 {
        let mut tail = 0.0;
        for c in split..k {
            tail += rows[r][c] * x[c];
        }
        out[r] = (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]) + tail;
    }
    out
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
