//! Reverse-mode neuron gradients against central finite differences, plus the
//! residual-only forward oracle.

use bias_tracer::model::vocab::MASK_ID;
use bias_tracer::model::{
    softmax, Encoder, ModelConfig, NeuronId, NeuronOverride, OverrideScope, OverrideSpec, TokenSequence,
};

fn fixture(n_layers: usize, d_ff: usize, seed: u64) -> Encoder {
    let cfg = ModelConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_ff,
        vocab_size: 12,
        max_len: 8,
        seed,
    };
    let mut enc = Encoder::new(cfg).unwrap();
    // Larger weights than the training init so the probability surface is
    // far from flat.
    for t in enc.params.tensors_mut() {
        for v in t.iter_mut() {
            *v *= 40.0;
        }
    }
    for b in &mut enc.params.blocks {
        b.ln_attn.gamma.iter_mut().for_each(|g| *g = 1.0);
        b.ln_ffn.gamma.iter_mut().for_each(|g| *g = 1.0);
        b.ln_attn.beta.iter_mut().for_each(|g| *g = 0.0);
        b.ln_ffn.beta.iter_mut().for_each(|g| *g = 0.0);
    }
    enc
}

fn seq() -> TokenSequence {
    TokenSequence {
        tokens: vec![5, 7, MASK_ID, 3, 9],
        mask_position: Some(2),
    }
}

fn prob_with_neuron(enc: &Encoder, s: &TokenSequence, target: usize, n: NeuronId, v: f64) -> f64 {
    let mut o = NeuronOverride::new(OverrideScope::MaskPosition);
    o.insert(n, OverrideSpec::SetTo(v)).unwrap();
    enc.mask_token_prob(s, target, &o).unwrap()
}

#[test]
fn neuron_gradients_match_central_differences() {
    let start = std::time::Instant::now();
    let enc = fixture(2, 16, 1);
    let s = seq();
    let target = 6;
    let probe = enc.probe(&s, target, &NeuronOverride::default(), true).unwrap();
    let grads = probe.grads.clone().unwrap();
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for layer in 0..2 {
        for index in 0..16 {
            let n = NeuronId::new(layer, index);
            let w = probe.trace.get(n);
            let plus = prob_with_neuron(&enc, &s, target, n, w + eps);
            let minus = prob_with_neuron(&enc, &s, target, n, w - eps);
            let fd = (plus - minus) / (2.0 * eps);
            let g = grads[layer][index];
            let rel = (g - fd).abs() / fd.abs().max(g.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(rel <= 1e-4, "{n}: analytic {g:e} vs fd {fd:e} (rel {rel:e})");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn dead_neuron_has_zero_gradient() {
    let mut enc = fixture(2, 16, 4);
    let n = NeuronId::new(0, 3);
    enc.zero_outgoing(&[n]).unwrap();
    let g = enc.grad_wrt_neurons(&seq(), 4, &NeuronOverride::default()).unwrap();
    assert_eq!(g[0][3], 0.0);
}

/// One layer, d_ff = 2: dP/d(neuron i) = (J_ln^T head^T dP/dlogits) . ff_out[:, i],
/// with the layer-norm Jacobian written out in closed form.
#[test]
fn final_layer_gradient_by_hand() {
    let enc = fixture(1, 2, 9);
    let s = seq();
    let target = 8;
    let m = 2;
    let d = enc.config.d_model;
    let states = oracle::forward(&enc, &s, false);
    let r = &states.ffn_residual[0][m];
    let y = &states.hidden[m];
    let p = softmax(&states.logits[m]);
    let pt = p[target];

    let head = &enc.params.head;
    let mut dy = vec![0.0; d];
    for (o, &po) in p.iter().enumerate() {
        let dz = pt * (if o == target { 1.0 } else { 0.0 } - po);
        for j in 0..d {
            dy[j] += dz * head.w[o * d + j];
        }
    }
    // gamma = 1, beta = 0: J = (I - 11^T/d - y y^T/d) / sigma, symmetric.
    let mean = r.iter().sum::<f64>() / d as f64;
    let sigma = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64 + 1e-12).sqrt();
    let sum_dy: f64 = dy.iter().sum();
    let y_dy: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
    let dr: Vec<f64> = (0..d)
        .map(|j| (dy[j] - sum_dy / d as f64 - y[j] * y_dy / d as f64) / sigma)
        .collect();
    let w2 = &enc.params.blocks[0].ff_out.w;
    let g = enc.grad_wrt_neurons(&s, target, &NeuronOverride::default()).unwrap();
    for i in 0..2 {
        let hand: f64 = (0..d).map(|row| dr[row] * w2[row * 2 + i]).sum();
        assert!(
            (g[0][i] - hand).abs() <= 1e-9 * hand.abs().max(1e-6),
            "neuron {i}: engine {} vs hand {hand}",
            g[0][i]
        );
    }
}

/// Zeroing every neuron at the mask position must equal a forward in which
/// the FFN contributes only its output bias at that position.
#[test]
fn zero_everywhere_matches_residual_only_oracle() {
    let enc = fixture(2, 16, 2);
    let s = seq();
    let zero = NeuronOverride::everywhere(&enc.config, OverrideSpec::Zero, OverrideScope::MaskPosition).unwrap();
    let got = enc.forward(&s, &zero).unwrap();
    let want = oracle::residual_only_logits(&enc, &s);
    for (a, b) in got.logits.iter().zip(&want) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
    for row in &got.logits {
        let p = softmax(row);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

mod oracle {
    //! Plain re-implementation of the encoder forward pass in which the FFN
    //! intermediate values at the mask position are forced to zero.
    use super::*;

    fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let s = (var + 1e-12).sqrt();
        x.iter().enumerate().map(|(j, v)| g[j] * (v - mean) / s + b[j]).collect()
    }

    fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let n_in = x.len();
        b.iter()
            .enumerate()
            .map(|(o, bo)| bo + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + statrs::function::erf::erf(x / 2f64.sqrt()))
    }

    pub struct States {
        /// Per layer, per position: residual entering the FFN layer norm.
        pub ffn_residual: Vec<Vec<Vec<f64>>>,
        pub hidden: Vec<Vec<f64>>,
        pub logits: Vec<Vec<f64>>,
    }

    pub fn residual_only_logits(enc: &Encoder, s: &TokenSequence) -> Vec<Vec<f64>> {
        forward(enc, s, true).logits
    }

    pub fn forward(enc: &Encoder, s: &TokenSequence, zero_mask_ffn: bool) -> States {
        let p = &enc.params;
        let c = &enc.config;
        let d = c.d_model;
        let dh = d / c.n_heads;
        let mut ffn_residual = Vec::new();
        let mut x: Vec<Vec<f64>> = s
            .tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                let e: Vec<f64> = (0..d).map(|j| p.tok_emb[tok * d + j] + p.pos_emb[t * d + j]).collect();
                layer_norm(&e, &p.ln_emb.gamma, &p.ln_emb.beta)
            })
            .collect();
        for blk in &p.blocks {
            let q: Vec<_> = x.iter().map(|r| affine(&blk.query.w, &blk.query.b, r)).collect();
            let k: Vec<_> = x.iter().map(|r| affine(&blk.key.w, &blk.key.b, r)).collect();
            let v: Vec<_> = x.iter().map(|r| affine(&blk.value.w, &blk.value.b, r)).collect();
            let n = x.len();
            let mut next = Vec::with_capacity(n);
            let mut residuals = Vec::with_capacity(n);
            for i in 0..n {
                let mut ctx = vec![0.0; d];
                for h in 0..c.n_heads {
                    let r = h * dh..(h + 1) * dh;
                    let scores: Vec<f64> = (0..n)
                        .map(|j| {
                            q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let a = softmax(&scores);
                    for j in 0..n {
                        for u in r.clone() {
                            ctx[u] += a[j] * v[j][u];
                        }
                    }
                }
                let att = affine(&blk.attn_out.w, &blk.attn_out.b, &ctx);
                let r1: Vec<f64> = x[i].iter().zip(&att).map(|(a, b)| a + b).collect();
                let h = layer_norm(&r1, &blk.ln_attn.gamma, &blk.ln_attn.beta);
                let f = if zero_mask_ffn && s.mask_position == Some(i) {
                    blk.ff_out.b.clone()
                } else {
                    let act: Vec<f64> = affine(&blk.ff_in.w, &blk.ff_in.b, &h).into_iter().map(gelu).collect();
                    affine(&blk.ff_out.w, &blk.ff_out.b, &act)
                };
                let r2: Vec<f64> = h.iter().zip(&f).map(|(a, b)| a + b).collect();
                next.push(layer_norm(&r2, &blk.ln_ffn.gamma, &blk.ln_ffn.beta));
                residuals.push(r2);
            }
            ffn_residual.push(residuals);
            x = next;
        }
        let logits = x.iter().map(|r| affine(&p.head.w, &p.head.b, r)).collect();
        States {
            ffn_residual,
            hidden: x,
            logits,
        }
    }
}
