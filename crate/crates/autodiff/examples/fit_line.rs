//! Fit y = 3x - 1 with a one-unit linear layer: compare the tape gradient with
//! a central difference, then run Adam until the loss is negligible.

use dsr_autodiff::{Adam, AdamConfig, Graph, ParamStore, Result, Tensor, Var};

fn loss(store: &ParamStore, g: &mut Graph, x: &Tensor, y: &Tensor) -> Result<Var> {
    let w = g.param(store, store.find("w").expect("w"));
    let b = g.param(store, store.find("b").expect("b"));
    let x = g.constant(x.clone());
    let y = g.constant(y.clone());
    let pred = g.matmul(x, w)?;
    let pred = g.add_bias(pred, b)?;
    let err = g.sub(pred, y)?;
    let sq = g.mul(err, err)?;
    g.mean(sq)
}

fn value(store: &ParamStore, x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = loss(store, &mut g, x, y)?;
    Ok(g.value(l).data()[0])
}

fn main() -> Result<()> {
    let xs: Vec<f64> = (0..16).map(|i| i as f64 / 8.0 - 1.0).collect();
    let x = Tensor::new(vec![xs.len(), 1], xs.clone())?;
    let y = Tensor::new(vec![xs.len(), 1], xs.iter().map(|v| 3.0 * v - 1.0).collect())?;

    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::full(vec![1, 1], 0.5));
    store.add("b", Tensor::zeros(vec![1]));

    let mut g = Graph::new();
    let l = loss(&store, &mut g, &x, &y)?;
    let grads = g.backward(l)?.for_store(&store);
    let eps = 1e-6;
    let mut plus = store.clone();
    plus.get_mut(w).data_mut()[0] += eps;
    let mut minus = store.clone();
    minus.get_mut(w).data_mut()[0] -= eps;
    let fd = (value(&plus, &x, &y)? - value(&minus, &x, &y)?) / (2.0 * eps);
    println!("dL/dw  tape {:.9}  central difference {:.9}", grads[0].data()[0], fd);

    let mut adam = Adam::new(
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
        &store,
    );
    for step in 0..=600 {
        let mut g = Graph::new();
        let l = loss(&store, &mut g, &x, &y)?;
        if step % 100 == 0 {
            println!("step {step:>3}  loss {:.3e}", g.value(l).data()[0]);
        }
        let grads = g.backward(l)?.for_store(&store);
        adam.update(&mut store, &grads)?;
    }
    let w = store.get(w).data()[0];
    let b = store.get(store.find("b").expect("b")).data()[0];
    println!("fitted w = {w:.6}, b = {b:.6}");
    Ok(())
}
