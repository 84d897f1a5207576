//! Central finite differences against reverse-mode gradients, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparling::engine::{BatchNormStats, Graph, Mode, NodeId, Tensor};
use sparling::Result;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
pub const SHAPES: usize = 50;

type Build = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

fn loss_of(build: &Build, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> f64 {
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let out = build(&mut g, &ids).expect("forward");
    let loss = g.weighted_sum(out, weights).expect("loss");
    g.value(loss).data()[0]
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest relative error, over all inputs, between the analytic gradient
/// of `sum(w * build(inputs))` and its central difference estimate.
pub fn max_relative_error(build: &Build, inputs: &[Tensor<f64>], rng: &mut impl Rng) -> f64 {
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let out = build(&mut g, &ids).expect("forward");
    let shape = g.value(out).shape().to_vec();
    let weights = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let loss = g.weighted_sum(out, &weights).expect("loss");
    g.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, id) in ids.iter().enumerate() {
        let analytic = g.grad_or_zeros(*id).into_data();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + STEP;
            let up = loss_of(build, &probe, &weights);
            probe[i].data_mut()[j] = x - STEP;
            let down = loss_of(build, &probe, &weights);
            probe[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * STEP));
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-6);
        worst = worst.max(norm(&diff) / scale);
    }
    worst
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least `gap` away from zero, so kinks stay out of the stencil.
fn away_from_zero(shape: Vec<usize>, gap: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn image_shape(rng: &mut impl Rng, max_side: usize) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        rng.random_range(1..=max_side),
        rng.random_range(1..=max_side),
        rng.random_range(1..=3),
    ]
}

/// One randomized instance of a primitive.
pub struct Instance {
    pub build: Box<Build>,
    pub inputs: Vec<Tensor<f64>>,
}

pub type Generator = fn(&mut ChaCha8Rng) -> Instance;

fn conv2d(rng: &mut ChaCha8Rng) -> Instance {
    let x = image_shape(rng, 5);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let cout = rng.random_range(1..=3);
    let kernel = vec![k, k, x[3], cout];
    Instance {
        build: Box::new(|g, v| g.conv2d(v[0], v[1], v[2])),
        inputs: vec![
            uniform(x, -1.0, 1.0, rng),
            uniform(kernel, -1.0, 1.0, rng),
            uniform(vec![cout], -1.0, 1.0, rng),
        ],
    }
}

fn batch_norm_train(rng: &mut ChaCha8Rng) -> Instance {
    let mut x = image_shape(rng, 4);
    x[1] = x[1].max(2);
    let c = x[3];
    Instance {
        build: Box::new(move |g, v| {
            let mut stats = BatchNormStats::new(c);
            g.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train)
        }),
        inputs: vec![
            uniform(x, -2.0, 2.0, rng),
            uniform(vec![c], 0.5, 1.5, rng),
            uniform(vec![c], -1.0, 1.0, rng),
        ],
    }
}

fn batch_norm_eval(rng: &mut ChaCha8Rng) -> Instance {
    let x = image_shape(rng, 4);
    let c = x[3];
    let mut stats = BatchNormStats::<f64>::new(c);
    for ch in 0..c {
        stats.mean[ch] = rng.random_range(-1.0..1.0);
        stats.var[ch] = rng.random_range(0.5..2.0);
    }
    Instance {
        build: Box::new(move |g, v| g.batch_norm(v[0], v[1], v[2], &mut stats.clone(), Mode::Eval)),
        inputs: vec![
            uniform(x, -2.0, 2.0, rng),
            uniform(vec![c], 0.5, 1.5, rng),
            uniform(vec![c], -1.0, 1.0, rng),
        ],
    }
}

fn relu(rng: &mut ChaCha8Rng) -> Instance {
    let x = image_shape(rng, 5);
    Instance {
        build: Box::new(|g, v| Ok(g.relu(v[0]))),
        inputs: vec![away_from_zero(x, 0.01, rng)],
    }
}

fn add(rng: &mut ChaCha8Rng) -> Instance {
    let x = image_shape(rng, 5);
    Instance {
        build: Box::new(|g, v| g.add(v[0], v[1])),
        inputs: vec![uniform(x.clone(), -1.0, 1.0, rng), uniform(x, -1.0, 1.0, rng)],
    }
}

fn threshold_relu(rng: &mut ChaCha8Rng) -> Instance {
    let x = image_shape(rng, 5);
    let c = x[3];
    let t: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let gap = away_from_zero(x, 0.01, rng);
    let mut z = gap.clone();
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        *v += t[i % c];
    }
    let thresholds = Tensor::new(vec![c], t).unwrap();
    Instance {
        build: Box::new(move |g, v| {
            let t = g.constant(thresholds.clone());
            g.threshold_relu(v[0], t)
        }),
        inputs: vec![z],
    }
}

fn max_pool(rng: &mut ChaCha8Rng) -> Instance {
    let pool = rng.random_range(1..=3);
    let mut x = image_shape(rng, 2);
    x[1] *= pool;
    x[2] *= pool;
    let n: usize = x.iter().product();
    // Distinct values spaced well beyond the finite difference step.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let data = order.iter().map(|&k| k as f64 * 0.01).collect();
    Instance {
        build: Box::new(move |g, v| g.max_pool2d(v[0], pool)),
        inputs: vec![Tensor::new(x, data).unwrap()],
    }
}

fn append_coords(rng: &mut ChaCha8Rng) -> Instance {
    let x = image_shape(rng, 5);
    Instance {
        build: Box::new(|g, v| g.append_coords(v[0])),
        inputs: vec![uniform(x, -1.0, 1.0, rng)],
    }
}

fn reshape(rng: &mut ChaCha8Rng) -> Instance {
    let x = image_shape(rng, 5);
    let n: usize = x.iter().product();
    Instance {
        build: Box::new(move |g, v| {
            let f = g.flatten(v[0]);
            g.reshape(f, vec![n])
        }),
        inputs: vec![uniform(x, -1.0, 1.0, rng)],
    }
}

fn dense(rng: &mut ChaCha8Rng) -> Instance {
    let (b, i, o) = (
        rng.random_range(1..=4),
        rng.random_range(1..=6),
        rng.random_range(1..=6),
    );
    Instance {
        build: Box::new(|g, v| g.dense(v[0], v[1], v[2])),
        inputs: vec![
            uniform(vec![b, i], -1.0, 1.0, rng),
            uniform(vec![i, o], -1.0, 1.0, rng),
            uniform(vec![o], -1.0, 1.0, rng),
        ],
    }
}

fn softmax_xent(rng: &mut ChaCha8Rng) -> Instance {
    let (rows, k) = (rng.random_range(1..=6), rng.random_range(2..=5));
    let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
    Instance {
        build: Box::new(move |g, v| g.softmax_xent(v[0], &targets)),
        inputs: vec![uniform(vec![rows, k], -3.0, 3.0, rng)],
    }
}

fn sigmoid(rng: &mut ChaCha8Rng) -> Instance {
    let x = image_shape(rng, 5);
    Instance {
        build: Box::new(|g, v| Ok(g.sigmoid(v[0]))),
        inputs: vec![uniform(x, -4.0, 4.0, rng)],
    }
}

fn mean_abs(rng: &mut ChaCha8Rng) -> Instance {
    let x = image_shape(rng, 5);
    Instance {
        build: Box::new(|g, v| Ok(g.mean_abs(v[0]))),
        inputs: vec![away_from_zero(x, 0.01, rng)],
    }
}

fn bernoulli_kl(rng: &mut ChaCha8Rng) -> Instance {
    let x = image_shape(rng, 5);
    let rho = rng.random_range(0.001..0.5);
    Instance {
        build: Box::new(move |g, v| g.bernoulli_kl(v[0], rho)),
        inputs: vec![uniform(x, 0.05, 0.95, rng)],
    }
}

fn sum_and_scale(rng: &mut ChaCha8Rng) -> Instance {
    let x = image_shape(rng, 5);
    let factor = rng.random_range(-3.0..3.0);
    Instance {
        build: Box::new(move |g, v| {
            let s = g.scale(v[0], factor);
            Ok(g.sum(s))
        }),
        inputs: vec![uniform(x, -1.0, 1.0, rng)],
    }
}

/// A miniature encoder/decoder chain; sigmoid keeps it free of kinks.
fn composite(rng: &mut ChaCha8Rng) -> Instance {
    let b = rng.random_range(2..=3);
    let side = 2 * rng.random_range(1..=2);
    let (cin, mid, out) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(2..=4));
    let flat = (side / 2) * (side / 2) * (mid + 2);
    let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..out)).collect();
    Instance {
        build: Box::new(move |g, v| {
            let mut stats = BatchNormStats::new(mid);
            let c = g.conv2d(v[0], v[1], v[2])?;
            let n = g.batch_norm(c, v[3], v[4], &mut stats, Mode::Train)?;
            let s = g.sigmoid(n);
            let coords = g.append_coords(s)?;
            let pooled = g.max_pool2d(coords, 2)?;
            let f = g.flatten(pooled);
            let logits = g.dense(f, v[5], v[6])?;
            g.softmax_xent(logits, &targets)
        }),
        inputs: vec![
            uniform(vec![b, side, side, cin], -1.0, 1.0, rng),
            uniform(vec![3, 3, cin, mid], -1.0, 1.0, rng),
            uniform(vec![mid], -0.5, 0.5, rng),
            uniform(vec![mid], 0.5, 1.5, rng),
            uniform(vec![mid], -0.5, 0.5, rng),
            uniform(vec![flat, out], -1.0, 1.0, rng),
            uniform(vec![out], -0.5, 0.5, rng),
        ],
    }
}

pub const PRIMITIVES: &[(&str, Generator)] = &[
    ("conv2d", conv2d),
    ("batch_norm_train", batch_norm_train),
    ("batch_norm_eval", batch_norm_eval),
    ("relu", relu),
    ("add", add),
    ("threshold_relu", threshold_relu),
    ("max_pool2d", max_pool),
    ("append_coords", append_coords),
    ("reshape", reshape),
    ("dense", dense),
    ("softmax_xent", softmax_xent),
    ("sigmoid", sigmoid),
    ("mean_abs", mean_abs),
    ("bernoulli_kl", bernoulli_kl),
    ("sum_scale", sum_and_scale),
    ("composite", composite),
];

/// Worst relative error of each primitive over `SHAPES` random instances.
pub fn check_all(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PRIMITIVES
        .iter()
        .map(|&(name, make)| {
            let worst = (0..SHAPES)
                .map(|_| {
                    let inst = make(&mut rng);
                    max_relative_error(&*inst.build, &inst.inputs, &mut rng)
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// Gradient that reaches a threshold held as a trainable leaf, over random
/// shapes. Every entry must be exactly zero (or absent).
pub fn threshold_gradient_magnitude(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..SHAPES {
        let x = image_shape(&mut rng, 5);
        let c = x[3];
        let mut g = Graph::<f64>::new();
        let z = g.parameter(uniform(x, -1.0, 1.0, &mut rng));
        let t = g.parameter(uniform(vec![c], -0.5, 0.5, &mut rng));
        let y = g.threshold_relu(z, t).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        if let Some(grad) = g.grad(t) {
            worst = grad.data().iter().fold(worst, |m, v| m.max(v.abs()));
        }
    }
    worst
}
