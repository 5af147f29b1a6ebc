//! Rough per-example cost of training and scoring the MNIST CNN.

use std::time::Instant;

use gradsift::{Architecture, CnnShape, Model, Tensor};

fn main() -> gradsift::Result<()> {
    let model = Model::new(Architecture::SmallCnn(CnnShape::mnist()), 10, 0)?;
    let batch = 64;
    let x = Tensor::new(
        vec![batch, 28, 28, 1],
        (0..batch * 784).map(|i| ((i * 7919) % 256) as f64 / 255.0).collect(),
    )?;
    let y: Vec<usize> = (0..batch).map(|i| i % 10).collect();

    let reps = 20;
    let t = Instant::now();
    for _ in 0..reps {
        model.loss_and_gradient(&x, &y)?;
    }
    let train = t.elapsed().as_secs_f64() / (reps * batch) as f64;

    let t = Instant::now();
    for _ in 0..reps {
        model.forward(&x)?;
    }
    let fwd = t.elapsed().as_secs_f64() / (reps * batch) as f64;

    let t = Instant::now();
    for _ in 0..reps {
        model.per_example_gradients(&x, &y)?;
    }
    let per = t.elapsed().as_secs_f64() / (reps * batch) as f64;

    println!("train step: {:.1} us/example", train * 1e6);
    println!("forward:    {:.1} us/example", fwd * 1e6);
    println!("per-example gradients: {:.1} us/example", per * 1e6);
    println!("54k-example epoch ≈ {:.1} s", 54_000.0 * train);
    Ok(())
}
