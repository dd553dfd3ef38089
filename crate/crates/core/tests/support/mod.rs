//! Oracles shared by the integration tests.

#![allow(dead_code)]

use hmer::decoder::DecoderConfig;
use hmer::encoder::EncoderConfig;
use hmer::{Graph, Model, ModelConfig, Tensor, Var, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding compare absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Largest relative error between the analytic gradient of
/// `sum(w ⊙ f(inputs))` and central differences, over every input element.
/// `w` is a fixed random weighting so that every output element matters.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let loss_of = |vals: &[Tensor], track: bool| -> (f64, Option<Vec<Tensor>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| if track { g.leaf(&t.clone().with_grad()) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&mut g, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(g.shape(out), &mut rng));
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        let value = g.data(loss)[0];
        let grads = track.then(|| {
            let gr = g.backward(loss).unwrap();
            vars.iter().map(|&v| gr.get(v)).collect()
        });
        (value, grads)
    };
    let (_, grads) = loss_of(inputs, true);
    let grads = grads.unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[j] += STEP;
            let up = loss_of(&vals, false).0;
            vals[k].data_mut()[j] -= 2.0 * STEP;
            let down = loss_of(&vals, false).0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[k].data()[j], numeric));
        }
    }
    worst
}

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::from_tokens(["<sos>", "<eol>", "a", "b", "+", "1"]).unwrap()
}

/// Vocabulary 6, hidden 8.
pub fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            stem_channels: 4,
            growth_rate: 2,
            layers_per_block: [1, 1, 1],
            reduced_channels: 3,
        },
        decoder: DecoderConfig {
            hidden_dim: 8,
            embed_dim: 4,
            attn_dim: 4,
            coverage_channels: 2,
            coverage_kernel: 3,
            max_decode_len: 8,
            coverage: true,
            share_attention: false,
        },
    };
    Model::new(&cfg, &tiny_vocab(), seed).unwrap()
}

/// 8×8 random ink, zero-padded to the 16×16 minimum the encoder accepts.
pub fn tiny_image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, 1, 16, 16], |i| {
        let (y, x) = (i / 16, i % 16);
        if y < 8 && x < 8 {
            rng.random_range(0.0..1.0)
        } else {
            0.0
        }
    })
}

/// Fully teacher-forced loss of `target` (ending with `<eol>`).
pub fn model_loss(model: &Model, image: &Tensor, target: &[usize], track: bool) -> (f64, Option<Vec<Tensor>>) {
    let mut g = model.graph();
    let p = model.params().bind(&mut g);
    let prep = model.prepare(&mut g, &p, image).unwrap();
    let u = model.unroll(&mut g, &p, &prep, target, |_, truth, _| truth).unwrap();
    let value = g.data(u.loss)[0];
    let grads = track.then(|| {
        let gr = g.backward(u.loss).unwrap();
        model.params().ids().map(|id| gr.get(p[id])).collect()
    });
    (value, grads)
}

/// Worst relative error over every parameter element of the tiny model, and
/// the number of elements checked.
pub fn check_model(seed: u64) -> (f64, usize) {
    let mut model = tiny_model(seed);
    let image = tiny_image(seed);
    let target = [2, 4, 3, 5, 1];
    let grads = model_loss(&model, &image, &target, true).1.unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (id, grad) in ids.into_iter().zip(grads) {
        for j in 0..grad.numel() {
            let orig = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = orig + STEP;
            let up = model_loss(&model, &image, &target, false).0;
            model.params_mut().get_mut(id).data_mut()[j] = orig - STEP;
            let down = model_loss(&model, &image, &target, false).0;
            model.params_mut().get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_err(grad.data()[j], (up - down) / (2.0 * STEP)));
            count += 1;
        }
    }
    (worst, count)
}

/// Every differentiable graph operation on small random operands, by name.
pub fn op_cases() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut r = |shape: &[usize]| random(shape, &mut rng);
    let mut out = Vec::new();
    let x4 = r(&[1, 2, 5, 6]);
    let w = r(&[3, 2, 3, 3]);
    let b = r(&[3]);
    out.push(("conv2d", check_op(&[x4.clone(), w.clone(), b.clone()], 1, |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), (1, 1), (1, 1)).unwrap()
    })));
    out.push(("conv2d stride 2", check_op(&[x4.clone(), w.clone()], 2, |g, v| {
        g.conv2d(v[0], v[1], None, (2, 2), (1, 1)).unwrap()
    })));
    let w1 = r(&[4, 2, 1, 1]);
    out.push(("conv2d 1x1", check_op(&[x4.clone(), w1], 3, |g, v| {
        g.conv2d(v[0], v[1], None, (1, 1), (0, 0)).unwrap()
    })));
    let x44 = r(&[1, 2, 4, 6]);
    out.push(("max_pool2d", check_op(std::slice::from_ref(&x44), 4, |g, v| g.max_pool2d(v[0], (2, 2), (2, 2)).unwrap())));
    out.push(("avg_pool2d", check_op(std::slice::from_ref(&x44), 5, |g, v| g.avg_pool2d(v[0], (2, 2), (2, 2)).unwrap())));
    out.push(("upsample2x", check_op(&[r(&[1, 2, 2, 3])], 6, |g, v| g.upsample2x(v[0]).unwrap())));
    let (a, bm) = (r(&[3, 4]), r(&[4, 5]));
    out.push(("matmul", check_op(&[a.clone(), bm], 7, |g, v| g.matmul(v[0], v[1]).unwrap())));
    out.push(("matmul vector", check_op(&[a.clone(), r(&[4])], 8, |g, v| g.matmul(v[0], v[1]).unwrap())));
    let (p, q) = (r(&[3, 4]), r(&[3, 4]));
    out.push(("add", check_op(&[p.clone(), q.clone()], 9, |g, v| g.add(v[0], v[1]).unwrap())));
    out.push(("sub", check_op(&[p.clone(), q.clone()], 10, |g, v| g.sub(v[0], v[1]).unwrap())));
    out.push(("mul", check_op(&[p.clone(), q.clone()], 11, |g, v| g.mul(v[0], v[1]).unwrap())));
    out.push(("mul self", check_op(std::slice::from_ref(&p), 12, |g, v| g.mul(v[0], v[0]).unwrap())));
    out.push(("scale", check_op(std::slice::from_ref(&p), 13, |g, v| g.scale(v[0], -2.5))));
    out.push(("add_column", check_op(&[p.clone(), r(&[3])], 14, |g, v| g.add_column(v[0], v[1]).unwrap())));
    out.push(("concat axis 0", check_op(&[p.clone(), r(&[2, 4])], 15, |g, v| g.concat(&[v[0], v[1]], 0).unwrap())));
    out.push(("concat axis 1", check_op(&[p.clone(), r(&[3, 2])], 16, |g, v| g.concat(&[v[0], v[1]], 1).unwrap())));
    out.push(("tanh", check_op(std::slice::from_ref(&p), 17, |g, v| g.tanh(v[0]))));
    out.push(("sigmoid", check_op(std::slice::from_ref(&p), 18, |g, v| g.sigmoid(v[0]))));
    out.push(("exp", check_op(std::slice::from_ref(&p), 19, |g, v| g.exp(v[0]))));
    out.push(("softmax axis 0", check_op(std::slice::from_ref(&p), 20, |g, v| g.softmax(v[0], 0).unwrap())));
    out.push(("softmax axis 1", check_op(std::slice::from_ref(&p), 21, |g, v| g.softmax(v[0], 1).unwrap())));
    out.push(("embedding", check_op(&[r(&[5, 3])], 22, |g, v| g.embedding(v[0], 3).unwrap())));
    out.push(("cross_entropy", check_op(&[r(&[6])], 23, |g, v| g.cross_entropy(v[0], 2).unwrap())));
    out.push(("sum", check_op(std::slice::from_ref(&p), 24, |g, v| g.sum(v[0]))));
    out.push(("sum_axis", check_op(&[r(&[2, 3, 4])], 25, |g, v| g.sum_axis(v[0], 1).unwrap())));
    out.push(("reshape", check_op(std::slice::from_ref(&p), 26, |g, v| g.reshape(v[0], &[2, 6]).unwrap())));
    out.push(("conv+tanh+softmax+ce chain", check_op(&[x4, w], 27, |g, v| {
        let c = g.conv2d(v[0], v[1], None, (2, 2), (1, 1)).unwrap();
        let t = g.tanh(c);
        let flat = g.reshape(t, &[g.shape(t).iter().product()]).unwrap();
        let s = g.softmax(flat, 0).unwrap();
        let ce = g.cross_entropy(flat, 1).unwrap();
        let weighted = g.mul(s, flat).unwrap();
        let s0 = g.sum(weighted);
        g.add(ce, s0).unwrap()
    })));
    out
}

/// Straight-line scalar evaluation of one coverage-attention step for a
/// single scale. Returns `(energies, alpha, context)`.
pub struct AttentionInputs<'a> {
    pub w_a: &'a Tensor,
    pub u_a: &'a Tensor,
    pub u_f: &'a Tensor,
    pub v_a: &'a Tensor,
    pub q: &'a Tensor,
    /// `[C×L]`
    pub a: &'a Tensor,
    pub height: usize,
    pub width: usize,
    pub beta: &'a [f64],
    pub h: &'a [f64],
    pub coverage: bool,
}

pub fn attention_oracle(x: &AttentionInputs) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (na, n) = (x.w_a.shape()[0], x.w_a.shape()[1]);
    let c = x.a.shape()[0];
    let l = x.height * x.width;
    let (qc, k) = (x.q.shape()[0], x.q.shape()[2]);
    let at = |m: &Tensor, i: usize, j: usize| m.data()[i * m.shape()[1] + j];
    let mut f = vec![vec![0.0; l]; qc];
    for (ch, row) in f.iter_mut().enumerate() {
        for y in 0..x.height {
            for xx in 0..x.width {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        let sy = y as i64 + dy as i64 - (k / 2) as i64;
                        let sx = xx as i64 + dx as i64 - (k / 2) as i64;
                        if sy < 0 || sx < 0 || sy >= x.height as i64 || sx >= x.width as i64 {
                            continue;
                        }
                        let w = x.q.data()[(ch * k + dy) * k + dx];
                        acc += w * x.beta[sy as usize * x.width + sx as usize];
                    }
                }
                row[y * x.width + xx] = acc;
            }
        }
    }
    let mut e = vec![0.0; l];
    for (i, ei) in e.iter_mut().enumerate() {
        for j in 0..na {
            let mut pre = 0.0;
            for t in 0..n {
                pre += at(x.w_a, j, t) * x.h[t];
            }
            for ch in 0..c {
                pre += at(x.u_a, j, ch) * at(x.a, ch, i);
            }
            if x.coverage {
                for (ch, fr) in f.iter().enumerate() {
                    pre += at(x.u_f, j, ch) * fr[i];
                }
            }
            *ei += x.v_a.data()[j] * pre.tanh();
        }
    }
    let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = e.iter().map(|v| (v - max).exp()).sum();
    let alpha: Vec<f64> = e.iter().map(|v| (v - max).exp() / z).collect();
    let context = (0..c)
        .map(|ch| (0..l).map(|i| alpha[i] * at(x.a, ch, i)).sum())
        .collect();
    (e, alpha, context)
}

/// Runs `attend` against the oracle on a random `height×width` instance and
/// returns the largest absolute difference over energies, α, context and
/// the updated β.
pub fn attention_oracle_gap(seed: u64, height: usize, width: usize, coverage: bool) -> f64 {
    use hmer::decoder::{CoverageState, Decoder, ScaleAnnotations};
    use hmer::params::{Init, ParamStore};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 5;
    let cfg = DecoderConfig {
        hidden_dim: 7,
        embed_dim: 3,
        attn_dim: 6,
        coverage_channels: 4,
        coverage_kernel: 3,
        max_decode_len: 5,
        coverage,
        share_attention: false,
    };
    let mut store = ParamStore::new();
    let dec = Decoder::new(&cfg, 6, channels, &mut store, &mut Init::new(seed)).unwrap();
    let l = height * width;
    let a = random(&[channels, l], &mut rng);
    let h = random(&[cfg.hidden_dim], &mut rng);
    let beta: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..2.0)).collect();
    let s = (seed % 3) as usize;

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let av = g.constant(a.clone());
    let sp = *dec.scale_params(s);
    let ua = g.matmul(p[sp.u_a], av).unwrap();
    let ann = ScaleAnnotations { a: av, ua, height, width };
    let mut cov = CoverageState {
        beta: g.constant(Tensor::new(vec![l], beta.clone()).unwrap()),
        alphas: Vec::new(),
    };
    let hv = g.constant(h.clone());
    let out = dec.attend(&mut g, &p, s, &ann, &mut cov, hv).unwrap();

    let (e, alpha, ctx) = attention_oracle(&AttentionInputs {
        w_a: store.get(sp.w_a),
        u_a: store.get(sp.u_a),
        u_f: store.get(sp.u_f),
        v_a: store.get(sp.v_a),
        q: store.get(sp.q),
        a: &a,
        height,
        width,
        beta: &beta,
        h: h.data(),
        coverage,
    });
    let new_beta: Vec<f64> = beta.iter().zip(&alpha).map(|(b, a)| b + a).collect();
    let gap = |got: &[f64], want: &[f64]| {
        assert_eq!(got.len(), want.len());
        got.iter().zip(want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    gap(g.data(out.energies), &e)
        .max(gap(g.data(out.alpha), &alpha))
        .max(gap(g.data(out.context), &ctx))
        .max(gap(g.data(cov.beta), &new_beta))
}

/// Attention bookkeeping over randomized decoder steps.
#[derive(Debug, Default)]
pub struct InvariantReport {
    pub steps: usize,
    pub maps: usize,
    /// Largest `|Σα − 1|`.
    pub worst_sum: f64,
    pub min_alpha: f64,
    /// Maps whose β differs in any bit from the independently kept running sum.
    pub beta_mismatches: usize,
    /// Context entries outside the per-channel annotation range.
    pub non_convex: usize,
}

/// Decodes random images with random input tokens for `steps` decoder steps
/// in total, checking every attention map as it is produced.
pub fn attention_invariants(steps: usize, seed: u64) -> InvariantReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = InvariantReport {
        min_alpha: f64::INFINITY,
        ..Default::default()
    };
    let mut episode = 0;
    while report.steps < steps {
        let model = tiny_model(seed + episode);
        episode += 1;
        let (h, w) = (16 * rng.random_range(1..=3), 16 * rng.random_range(1..=4));
        let image = Tensor::from_fn(&[1, 1, h, w], |_| rng.random_range(0.0..1.0));
        let mut g = model.graph();
        let p = model.params().bind(&mut g);
        let prep = model.prepare(&mut g, &p, &image).unwrap();
        let mut state = model.decoder().init_state(&mut g, &p, &prep, 0).unwrap();
        let mut running: Vec<Vec<f64>> = prep.scales.iter().map(|s| vec![0.0; s.positions()]).collect();
        let len = rng.random_range(1..=40).min(steps - report.steps);
        for _ in 0..len {
            let token = rng.random_range(0..model.vocab().len());
            let (out, next) = model.decoder().step(&mut g, &p, &prep, &state, token).unwrap();
            for (s, sum_so_far) in running.iter_mut().enumerate() {
                let alpha = g.data(*next.coverage[s].alphas.last().unwrap()).to_vec();
                let sum: f64 = alpha.iter().sum();
                report.worst_sum = report.worst_sum.max((sum - 1.0).abs());
                report.min_alpha = alpha.iter().cloned().fold(report.min_alpha, f64::min);
                for (r, a) in sum_so_far.iter_mut().zip(&alpha) {
                    *r += a;
                }
                if g.data(next.coverage[s].beta) != sum_so_far.as_slice() {
                    report.beta_mismatches += 1;
                }
                let ann = g.data(prep.scales[s].a);
                let l = prep.scales[s].positions();
                for (ch, &cv) in g.data(out.contexts[s]).iter().enumerate() {
                    let row = &ann[ch * l..(ch + 1) * l];
                    let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    if cv < lo - 1e-12 || cv > hi + 1e-12 {
                        report.non_convex += 1;
                    }
                }
                report.maps += 1;
            }
            state = next;
            report.steps += 1;
        }
    }
    report
}
