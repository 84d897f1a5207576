//! Metrics and kernels against brute-force reference implementations.

mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparling::engine::{Graph, Tensor};
use sparling::metrics::{e2ee, entropy_bound, EntropyBoundInput, MotifTally};
use support::metric_oracle::{oracle_e2ee, oracle_rates, random_instance};

#[test]
fn motif_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..200 {
        let inst = random_instance(&mut rng);
        let mut tally = MotifTally::new(inst.preds[0].channels, inst.truths[0].channels);
        for (p, t) in inst.preds.iter().zip(&inst.truths) {
            tally.add(p, t, &inst.table).unwrap();
        }
        let want = oracle_rates(&inst);
        assert_eq!(tally.fpe(), want.fpe, "case {case}");
        assert_eq!(tally.fne(), want.fne, "case {case}");
        assert_eq!(tally.ce().map(|c| c.0), want.ce, "case {case}");
    }
}

#[test]
fn e2ee_matches_dp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..rng.random_range(1..6))
            .map(|_| {
                let s = |rng: &mut ChaCha8Rng| {
                    (0..rng.random_range(0..7)).map(|_| rng.random_range(0..4u8)).collect::<Vec<u8>>()
                };
                (s(&mut rng), s(&mut rng))
            })
            .collect();
        assert_eq!(e2ee(&pairs).unwrap(), oracle_e2ee(&pairs));
    }
}

#[test]
fn entropy_bound_matches_series() {
    for &delta in &[1e-7, 1e-6, 4.5e-5, 1e-4, 1e-3, 0.01, 0.05, 0.1, 0.3, 0.5, 0.7] {
        for &(sites, channels, eta) in &[(1.0, 1.0, 0.0), (64.0, 4.0, 4.0), (1e4, 10.0, 8.0)] {
            let got = entropy_bound(&EntropyBoundInput {
                sites,
                channels,
                delta,
                eta,
            })
            .unwrap();
            let want = support::entropy_bound_series(sites, channels, delta, eta);
            assert!((got - want).abs() <= 1e-12 * want, "delta {delta}: {got} vs {want}");
        }
    }
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let mut out = vec![0.0; n * h * w * cout];
    for bi in 0..n {
        for r in 0..h {
            for c in 0..w {
                for o in 0..cout {
                    let mut acc = b.data()[o];
                    for i in 0..kh {
                        for j in 0..kw {
                            let rr = r as i64 + i as i64 - (kh / 2) as i64;
                            let cc = c as i64 + j as i64 - (kw / 2) as i64;
                            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.data()[((bi * h + rr as usize) * w + cc as usize) * cin + ci];
                                acc += xv * k.data()[((i * kw + j) * cin + ci) * cout + o];
                            }
                        }
                    }
                    out[((bi * h + r) * w + c) * cout + o] = acc;
                }
            }
        }
    }
    out
}

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn conv_and_dense_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let x = random(
            vec![
                rng.random_range(1..3),
                rng.random_range(1..7),
                rng.random_range(1..7),
                rng.random_range(1..4),
            ],
            &mut rng,
        );
        let ks = [1, 3, 5][rng.random_range(0..3)];
        let cout = rng.random_range(1..4);
        let k = random(vec![ks, ks, x.shape()[3], cout], &mut rng);
        let b = random(vec![cout], &mut rng);
        let want = naive_conv(&x, &k, &b);
        let mut g = Graph::<f64>::inference();
        let (xi, ki, bi) = (g.input(x), g.input(k), g.input(b));
        let y = g.conv2d(xi, ki, bi).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }

        let (n, fin, fout) = (rng.random_range(1..5), rng.random_range(1..8), rng.random_range(1..8));
        let (x, w, b) = (
            random(vec![n, fin], &mut rng),
            random(vec![fin, fout], &mut rng),
            random(vec![fout], &mut rng),
        );
        let mut want = Vec::new();
        for r in 0..n {
            for o in 0..fout {
                want.push(b.data()[o] + (0..fin).map(|i| x.data()[r * fin + i] * w.data()[i * fout + o]).sum::<f64>());
            }
        }
        let mut g = Graph::<f64>::inference();
        let (xi, wi, bi) = (g.input(x), g.input(w), g.input(b));
        let y = g.dense(xi, wi, bi).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
