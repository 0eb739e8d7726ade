//! Reverse-mode autodiff on a tiny conv net, with a finite-difference check
//! of one weight gradient.
use lesionforge::{Graph, Result, Tensor};

fn loss_of(w: &Tensor<f64>, x: &Tensor<f64>) -> Result<(f64, Option<Tensor<f64>>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.parameter(w.clone());
    let y = g.conv2d(xv, wv, None, 1, 1)?;
    let y = g.silu(y)?;
    let y = g.global_avg_pool(y)?;
    let loss = g.sum(y)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), g.grad(wv)))
}

fn main() -> Result<()> {
    let x = Tensor::from_fn([1, 2, 5, 5], |i| ((i * 7) % 11) as f64 / 10.0 - 0.5);
    let w = Tensor::from_fn([3, 2, 3, 3], |i| ((i * 5) % 13) as f64 / 13.0 - 0.5);

    let (loss, grad) = loss_of(&w, &x)?;
    let grad = grad.expect("weights require grad");
    println!("loss = {loss:.6}");

    let h = 1e-6;
    for k in [0, 17, 53] {
        let mut plus = w.clone();
        plus.data_mut()[k] += h;
        let mut minus = w.clone();
        minus.data_mut()[k] -= h;
        let numeric = (loss_of(&plus, &x)?.0 - loss_of(&minus, &x)?.0) / (2.0 * h);
        println!(
            "dL/dw[{k:>2}]  analytic {:+.8}  numeric {numeric:+.8}",
            grad.data()[k]
        );
    }
    Ok(())
}
