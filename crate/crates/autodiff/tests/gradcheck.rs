//! Analytic gradients of every primitive against central finite differences.

use dsr_autodiff::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Builds `sum(f(inputs) ⊙ weights)` so every output element contributes.
fn check<F>(inputs: Vec<Tensor>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |inputs: &[Tensor], weights: Option<&Tensor>| -> (f64, Option<Tensor>, Vec<Option<Tensor>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let out_shape = g.shape(out).to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::zeros(out_shape.clone()),
        };
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss).unwrap();
        (value, Some(w), vars.iter().map(|&v| grads.wrt(v).cloned()).collect())
    };
    // probe the output shape once to draw the weights
    let mut probe = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.variable(t.clone())).collect();
    let out = f(&mut probe, &vars).unwrap();
    let weights = random(&mut rng, probe.shape(out));

    let (_, _, analytic) = eval(&inputs, Some(&weights));
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let an = analytic[k]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= EPS;
            let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * EPS);
            let a = an.data()[j];
            let err = (a - fd).abs() / (1e-6_f64).max(a.abs().max(fd.abs()));
            worst = worst.max(err);
        }
    }
    worst
}

fn assert_close(name: &str, err: f64) {
    assert!(err <= 1e-5, "{name}: relative error {err:e}");
}

#[test]
fn matmul_and_bias() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 3, 4]);
        let w = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5]);
        let err = check(vec![x, w, b], seed, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.add_bias(y, v[2])
        });
        assert_close("matmul", err);
    }
}

#[test]
fn batched_matmul_both_layouts() {
    for trans in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 2, 4]);
        let b = if trans {
            random(&mut rng, &[3, 5, 4])
        } else {
            random(&mut rng, &[3, 4, 5])
        };
        let err = check(vec![a, b], 11, move |g, v| g.bmm(v[0], v[1], trans));
        assert_close("bmm", err);
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    assert_close("add", check(vec![a.clone(), b.clone()], 1, |g, v| g.add(v[0], v[1])));
    assert_close("sub", check(vec![a.clone(), b.clone()], 2, |g, v| g.sub(v[0], v[1])));
    assert_close("mul", check(vec![a.clone(), b.clone()], 3, |g, v| g.mul(v[0], v[1])));
    assert_close(
        "minimum",
        check(vec![a.clone(), b.clone()], 4, |g, v| g.minimum(v[0], v[1])),
    );
    assert_close("scale", check(vec![a.clone()], 5, |g, v| g.scale(v[0], -2.5)));
    assert_close("exp", check(vec![a.clone()], 6, |g, v| g.exp(v[0])));
    assert_close("gelu", check(vec![a.clone()], 7, |g, v| g.gelu(v[0])));
    // keep inputs away from the kinks
    let away = Tensor::new(
        vec![3, 4],
        a.data()
            .iter()
            .map(|x| if x.abs() < 0.1 { x + 0.3 } else { *x })
            .collect(),
    )
    .unwrap();
    assert_close("relu", check(vec![away.clone()], 8, |g, v| g.relu(v[0])));
    assert_close("clamp", check(vec![away], 9, |g, v| g.clamp(v[0], -0.8, 0.05)));
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[2, 3, 4]);
    let b = random(&mut rng, &[2, 3, 2]);
    assert_close("concat", check(vec![a.clone(), b], 1, |g, v| g.concat(&[v[0], v[1]])));
    assert_close("slice", check(vec![a.clone()], 2, |g, v| g.slice(v[0], 1, 2)));
    assert_close("reshape", check(vec![a.clone()], 3, |g, v| g.reshape(v[0], &[6, 4])));
    assert_close("permute", check(vec![a.clone()], 4, |g, v| g.permute(v[0], &[2, 0, 1])));
    assert_close(
        "select_rows",
        check(vec![a.clone()], 5, |g, v| g.select_rows(v[0], &[5, 0, 5, 2])),
    );
    assert_close(
        "gather",
        check(vec![a.clone()], 6, |g, v| g.gather(v[0], &[0, 3, 1, 1, 2, 0])),
    );
    assert_close("sum_last", check(vec![a.clone()], 7, |g, v| g.sum_last(v[0])));
    assert_close("mean", check(vec![a.clone()], 8, |g, v| g.mean(v[0])));
    let table = random(&mut rng, &[5, 3]);
    assert_close(
        "embedding",
        check(vec![table], 9, |g, v| g.embedding(v[0], &[4, 0, 4, 2])),
    );
}

#[test]
fn normalization_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[4, 6]);
    let gain = random(&mut rng, &[6]);
    let bias = random(&mut rng, &[6]);
    assert_close(
        "layer_norm",
        check(vec![x.clone(), gain, bias], 1, |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
    );
    assert_close("softmax", check(vec![x.clone()], 2, |g, v| g.softmax(v[0])));
    assert_close("log_softmax", check(vec![x.clone()], 3, |g, v| g.log_softmax(v[0])));
    let mask: Vec<bool> = (0..24).map(|i| i % 5 == 0).collect();
    assert_close(
        "masked softmax",
        check(vec![x.clone()], 4, move |g, v| {
            let m = g.masked_fill(v[0], &mask, -1e30)?;
            g.softmax(m)
        }),
    );
    let targets = [1, 0, 5, 2];
    let weights = [1.0, 0.0, 2.0, 1.0];
    assert_close(
        "cross_entropy",
        check(vec![x], 5, move |g, v| g.cross_entropy(v[0], &targets, &weights)),
    );
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let z = Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let v = g.variable(z.clone());
    let loss = g.cross_entropy(v, &[2], &[1.0]).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = grads.wrt(v).unwrap().data().to_vec();

    let lse = |d: &[f64]| d.iter().map(|x| x.exp()).sum::<f64>().ln();
    let ce = |d: &[f64]| lse(d) - d[2];
    let eps = 1e-6;
    for j in 0..4 {
        let mut p = z.data().to_vec();
        p[j] += eps;
        let mut m = z.data().to_vec();
        m[j] -= eps;
        let fd = (ce(&p) - ce(&m)) / (2.0 * eps);
        assert!(
            (analytic[j] - fd).abs() <= 1e-6,
            "component {j}: {} vs {fd}",
            analytic[j]
        );
        let softmax = z.data()[j].exp() / z.data().iter().map(|x| x.exp()).sum::<f64>();
        let onehot = if j == 2 { 1.0 } else { 0.0 };
        assert!((analytic[j] - (softmax - onehot)).abs() < 1e-15);
    }
}

#[test]
fn hand_derivatives() {
    let mut g = Graph::new();
    let w = g.variable(Tensor::new(vec![3], vec![0.5, -1.0, 4.0]).unwrap());
    let s = g.sum(w).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(w).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let w = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn identity_matmul_and_uniform_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 5]);
    let mut eye = Tensor::zeros(vec![3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut g = Graph::new();
    let (i, av) = (g.constant(eye), g.constant(a.clone()));
    let out = g.matmul(i, av).unwrap();
    assert_eq!(g.value(out), &a);

    let z = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let p = g.softmax(z).unwrap();
    assert_eq!(g.value(p).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one_and_masked_entries_vanish() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let x = random(&mut rng, &[6, 7]);
        let mask: Vec<bool> = (0..42).map(|_| rng.gen_bool(0.4)).collect();
        let mut g = Graph::new();
        let v = g.constant(x);
        let m = g.masked_fill(v, &mask, -1e30).unwrap();
        let p = g.softmax(m).unwrap();
        for (r, row) in g.value(p).data().chunks(7).enumerate() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            let row_mask = &mask[r * 7..(r + 1) * 7];
            if row_mask.iter().any(|m| !m) {
                for (pv, &mk) in row.iter().zip(row_mask) {
                    if mk {
                        assert_eq!(*pv, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::new();
    let w = g.variable(Tensor::scalar(2.0));
    let s = g.sum(w).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(dsr_autodiff::Error::Consumed)));
}

#[test]
fn non_scalar_loss_is_an_error() {
    let mut g = Graph::new();
    let w = g.variable(Tensor::zeros(vec![2]));
    assert!(matches!(g.backward(w), Err(dsr_autodiff::Error::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn gradients_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[4, 4]);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.variable(w));
        let h = g.matmul(xv, wv).unwrap();
        let h = g.gelu(h).unwrap();
        let p = g.softmax(h).unwrap();
        let l = g.cross_entropy(p, &[0, 1, 2], &[1.0; 3]).unwrap();
        let grads = g.backward(l).unwrap();
        grads
            .wrt(wv)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
