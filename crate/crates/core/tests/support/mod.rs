//! Oracles shared by the core integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uaf_core::model::{init_model, ActParams, Binder, ModelConfig};
use uaf_core::report::ParetoPoint;
use uaf_core::{Graph, Tensor, Var};

pub const H: f64 = 1e-5;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random tensor whose entries stay at least `gap` away from each of `kinks`.
pub fn random_avoiding(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Builds `loss = sum(f(inputs) ∘ probe)` with a fixed random probe and
/// returns the worst relative error between analytic gradients of every
/// input entry and central differences.
pub fn fd_worst<F>(inputs: Vec<Tensor>, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor], with_grad: bool| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars);
        let shape = g.shape(out).to_vec();
        let mut prng = ChaCha8Rng::seed_from_u64(99);
        let probe = g.constant(random(&mut prng, &shape));
        let prod = if g.shape(out).is_empty() {
            out
        } else {
            g.mul(out, probe).unwrap()
        };
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).item();
        if !with_grad {
            return (value, Vec::new());
        }
        let grads = g.backward(loss).unwrap();
        (value, vars.iter().map(|&v| grads.get(v)).collect())
    };
    let (_, analytic) = eval(&inputs, true);
    let mut worst: f64 = 0.0;
    for (i, inp) in inputs.iter().enumerate() {
        for j in 0..inp.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Worst finite-difference error for every tensor primitive.
pub fn primitive_errors() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = &mut rng;
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));
    push("matmul", fd_worst(vec![random(r, &[3, 4]), random(r, &[4, 2])], |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    }));
    push("bmm", fd_worst(vec![random(r, &[2, 3, 4]), random(r, &[2, 4, 2])], |g, v| {
        g.bmm(v[0], v[1], false).unwrap()
    }));
    push("bmm_t", fd_worst(vec![random(r, &[2, 3, 4]), random(r, &[2, 5, 4])], |g, v| {
        g.bmm(v[0], v[1], true).unwrap()
    }));
    push("add", fd_worst(vec![random(r, &[2, 3]), random(r, &[2, 3])], |g, v| g.add(v[0], v[1]).unwrap()));
    push("add_bias", fd_worst(vec![random(r, &[4, 3]), random(r, &[3])], |g, v| {
        g.add(v[0], v[1]).unwrap()
    }));
    push("sub", fd_worst(vec![random(r, &[2, 3]), random(r, &[3])], |g, v| g.sub(v[0], v[1]).unwrap()));
    push("mul", fd_worst(vec![random(r, &[2, 3]), random(r, &[2, 3])], |g, v| g.mul(v[0], v[1]).unwrap()));
    push("mul_bcast", fd_worst(vec![random(r, &[2, 2, 3]), random(r, &[2, 3])], |g, v| {
        g.mul(v[0], v[1]).unwrap()
    }));
    push("scale", fd_worst(vec![random(r, &[5])], |g, v| g.scale(v[0], -1.7).unwrap()));
    push("relu", fd_worst(vec![random_avoiding(r, &[3, 4], &[0.0], 1e-2)], |g, v| g.relu(v[0]).unwrap()));
    push("exp", fd_worst(vec![random(r, &[6])], |g, v| g.exp(v[0]).unwrap()));
    push("clamp", fd_worst(vec![random_avoiding(r, &[8], &[-0.5, 0.5], 1e-2)], |g, v| {
        g.clamp(v[0], -0.5, 0.5).unwrap()
    }));
    for axis in 0..3 {
        push(&format!("softmax/{axis}"), fd_worst(vec![random(r, &[2, 3, 4])], |g, v| g.softmax(v[0], axis).unwrap()));
        push(&format!("layer_norm/{axis}"), fd_worst(vec![random(r, &[2, 3, 4])], |g, v| {
            g.layer_norm(v[0], axis).unwrap()
        }));
        push(&format!("concat/{axis}"), fd_worst(vec![random(r, &[2, 3, 4]), random(r, &[2, 3, 4])], |g, v| {
            g.concat(&[v[0], v[1]], axis).unwrap()
        }));
        push(&format!("slice/{axis}"), fd_worst(vec![random(r, &[3, 3, 4])], |g, v| g.slice(v[0], axis, 1, 3).unwrap()));
    }
    push("conv2d", fd_worst(vec![random(r, &[2, 2, 6, 5]), random(r, &[3, 2, 3, 3]), random(r, &[3])], |g, v| {
        g.conv2d(v[0], v[1], v[2], 2, 1).unwrap()
    }));
    push("conv2d_nopad", fd_worst(vec![random(r, &[1, 2, 5, 5]), random(r, &[2, 2, 2, 2]), random(r, &[2])], |g, v| {
        g.conv2d(v[0], v[1], v[2], 1, 0).unwrap()
    }));
    push("mean", fd_worst(vec![random(r, &[3, 4])], |g, v| g.mean(v[0]).unwrap()));
    push("sum", fd_worst(vec![random(r, &[3, 4])], |g, v| g.sum(v[0]).unwrap()));
    push("reshape", fd_worst(vec![random(r, &[3, 4])], |g, v| g.reshape(v[0], &[2, 6]).unwrap()));
    push("permute", fd_worst(vec![random(r, &[2, 3, 4])], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap()));
    let pred = random(r, &[3, 4]);
    let mut target = random(r, &[3, 4]);
    for (t, p) in target.data_mut().iter_mut().zip(pred.data()) {
        if (*t - p).abs() < 1e-2 {
            *t += 0.1;
        }
    }
    push("l1_loss", fd_worst(vec![pred, target], |g, v| g.l1_loss(v[0], v[1]).unwrap()));
    push("gaussian_kl", fd_worst(vec![random(r, &[2, 3]), random(r, &[2, 3])], |g, v| {
        g.gaussian_kl(v[0], v[1]).unwrap()
    }));
    out
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        state_dim: 3,
        action_dim: 2,
        chunk_size: 3,
        latent_dim: 2,
        embed_dim: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        ffn_dim: 12,
        image_size: [6, 6],
        cameras: 2,
        cnn_channels: [3, 4],
        style_layers: 1,
        kl_weight: 10.0,
        seed: 11,
    }
}

pub struct Batch {
    pub images: Vec<Tensor>,
    pub state: Tensor,
    pub actions: Tensor,
    pub eps: Tensor,
}

pub fn random_batch(c: &ModelConfig, bsz: usize, rng: &mut ChaCha8Rng) -> Batch {
    let mut t = |shape: &[usize], lo: f64, hi: f64| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    };
    let [h, w] = c.image_size;
    Batch {
        images: (0..c.cameras).map(|_| t(&[bsz, 3, h, w], 0.0, 1.0)).collect(),
        state: t(&[bsz, c.state_dim], -1.0, 1.0),
        actions: t(&[bsz, c.chunk_size, c.action_dim], -1.0, 1.0),
        eps: t(&[bsz, c.latent_dim], -1.0, 1.0),
    }
}

/// Training objective with the reparameterised latent and fixed noise.
pub fn total_loss(p: &ActParams, batch: &Batch, beta: f64, with_grad: bool) -> (f64, Vec<Tensor>) {
    let mut g = if with_grad { Graph::new() } else { Graph::no_grad() };
    let mut b = Binder::new(&p.params);
    let imgs: Vec<_> = batch.images.iter().map(|t| g.constant(t.clone())).collect();
    let state = g.constant(batch.state.clone());
    let actions = g.constant(batch.actions.clone());
    let eps = g.constant(batch.eps.clone());
    let (mu, lv) = p.build_style(&mut g, &mut b, state, actions).unwrap();
    let half = g.scale(lv, 0.5).unwrap();
    let sd = g.exp(half).unwrap();
    let noise = g.mul(sd, eps).unwrap();
    let z = g.add(mu, noise).unwrap();
    let pred = p.build_decoder(&mut g, &mut b, &imgs, state, z).unwrap();
    let (total, _, _) = ActParams::build_loss(&mut g, pred, actions, mu, lv, beta).unwrap();
    let value = g.value(total).item();
    if !with_grad {
        return (value, Vec::new());
    }
    let grads = g.backward(total).unwrap();
    (value, b.gradients(&grads))
}

/// Worst relative error of the end-to-end ACT loss gradient on the micro
/// config, sampling up to six entries of every parameter tensor. Returns
/// `(worst, location, entries checked)`.
pub fn end_to_end_error() -> (f64, String, usize) {
    let c = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = init_model(&c).unwrap();
    // nudge zero-initialised biases and unit gains so every path carries gradient
    for t in p.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let batch = random_batch(&c, 2, &mut rng);
    let (_, analytic) = total_loss(&p, &batch, 0.5, true);
    let names = p.params.names().to_vec();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checked = 0;
    for (i, name) in names.iter().enumerate() {
        let n = p.params.tensors()[i].numel();
        let picks: Vec<usize> = if n <= 6 {
            (0..n).collect()
        } else {
            (0..6).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let orig = p.params.tensors()[i].data()[j];
            p.params.tensors_mut()[i].data_mut()[j] = orig + H;
            let up = total_loss(&p, &batch, 0.5, false).0;
            p.params.tensors_mut()[i].data_mut()[j] = orig - H;
            let down = total_loss(&p, &batch, 0.5, false).0;
            p.params.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{j}]: analytic {a:e} numeric {numeric:e}"));
            }
            checked += 1;
        }
    }
    (worst.0, worst.1, checked)
}

/// O(n²) dominance check: flagged iff no other point is at least as fast
/// and at least as successful with one of the two strictly better.
pub fn brute_force_pareto(points: &[ParetoPoint]) -> Vec<bool> {
    points
        .iter()
        .map(|p| {
            !points.iter().any(|q| {
                q.exec_time_min <= p.exec_time_min
                    && q.success_rate_pct >= p.success_rate_pct
                    && (q.exec_time_min < p.exec_time_min || q.success_rate_pct > p.success_rate_pct)
            })
        })
        .collect()
}

/// Point sets on a coarse grid so ties and duplicates are common.
pub fn random_point_set(rng: &mut ChaCha8Rng) -> Vec<ParetoPoint> {
    let n = rng.random_range(0..40);
    (0..n)
        .map(|i| ParetoPoint {
            label: format!("p{i}"),
            exec_time_min: rng.random_range(0..12) as f64 * 0.25 + if rng.random() { 0.01 } else { 0.0 },
            success_rate_pct: rng.random_range(0..12) as f64 * 100.0 / 11.0,
        })
        .collect()
}
