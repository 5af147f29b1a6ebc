use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_cnn() -> Architecture {
    Architecture::SmallCnn(CnnShape {
        height: 12,
        width: 12,
        channels: 1,
        kernel: 3,
        conv1_filters: 2,
        conv2_filters: 3,
        hidden: 8,
    })
}

fn random_batch(len: usize, batch: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..len * batch).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    (Tensor::new(vec![batch, len], data).unwrap(), labels)
}

/// Central differences of the mean loss, recomputed through `forward` only.
fn finite_difference(model: &Model, x: &Tensor, labels: &[usize], step: f64) -> Vec<f64> {
    let base = model.flat_parameters();
    let mut probe = model.clone();
    (0..base.len())
        .map(|j| {
            let mut p = base.clone();
            p[j] = base[j] + step;
            probe.set_flat_parameters(&p).unwrap();
            let up = cross_entropy(&probe.forward(x).unwrap(), labels).unwrap();
            p[j] = base[j] - step;
            probe.set_flat_parameters(&p).unwrap();
            let down = cross_entropy(&probe.forward(x).unwrap(), labels).unwrap();
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn assert_matches_fd(arch: Architecture, classes: usize, seed: u64) {
    let mut model = Model::new(arch.clone(), classes, seed).unwrap();
    // Non-zero biases so every code path is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for seg in &mut model.segments {
        if seg.tag.role == Role::Bias {
            seg.values
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    assert!(model.parameter_count() <= 2000);
    let (x, y) = random_batch(arch.input_len(), 3, classes, seed + 1);
    let analytic = model.batch_gradient(&x, &y).unwrap().flatten();
    let numeric = finite_difference(&model, &x, &y, 1e-5);
    for (j, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
        assert!(err <= 1e-4, "{arch} coordinate {j}: analytic {a}, numeric {n}");
    }
    let single = model.per_example_gradient(x.row(0), y[0]).unwrap().flatten();
    let numeric = finite_difference(&model, &x.select_rows(&[0]).unwrap(), &y[..1], 1e-5);
    for (a, n) in single.iter().zip(&numeric) {
        assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-4) <= 1e-4);
    }
}

#[test]
fn parameter_counts_match_closed_form() {
    for (arch, classes) in [
        (Architecture::Linear { input_dim: 7 }, 3),
        (
            Architecture::Mlp {
                input_dim: 5,
                hidden: vec![4, 6],
            },
            2,
        ),
        (tiny_cnn(), 3),
        (Architecture::SmallCnn(CnnShape::mnist()), 10),
    ] {
        let model = Model::new(arch.clone(), classes, 0).unwrap();
        assert_eq!(model.parameter_count(), arch.parameter_count(classes));
        let mut names: Vec<_> = model.segments().iter().map(|s| &s.name).collect();
        names.dedup();
        assert_eq!(names.len(), model.segments().len());
    }
    // 208 + 3216 + 32896 + 1290
    assert_eq!(Architecture::SmallCnn(CnnShape::mnist()).parameter_count(10), 37_610);
}

#[test]
fn zero_linear_model_gives_zero_logits() {
    let model = Model::zeros(Architecture::Linear { input_dim: 4 }, 3).unwrap();
    let (x, _) = random_batch(4, 5, 3, 1);
    assert!(model.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_linear_model() {
    let mut model = Model::zeros(Architecture::Linear { input_dim: 2 }, 2).unwrap();
    model
        .segment_mut("dense0.weight")
        .unwrap()
        .values
        .data_mut()
        .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    assert_eq!(model.forward(&x).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn zero_cnn_on_zero_image_gives_zero_logits() {
    let mut model = Model::new(Architecture::SmallCnn(CnnShape::mnist()), 10, 3).unwrap();
    assert!(model.segments().iter().filter(|s| s.tag.role == Role::Bias).all(|s| s.values.data().iter().all(|&v| v == 0.0)));
    let x = Tensor::zeros(vec![1, 28, 28, 1]);
    assert!(model.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    model.set_flat_parameters(&vec![0.0; model.parameter_count()]).unwrap();
    assert!(model.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let model = Model::new(Architecture::SmallCnn(CnnShape::mnist()), 10, 0).unwrap();
    assert!(matches!(model.forward(&Tensor::zeros(vec![1, 27, 28, 1])), Err(Error::Dimension(_))));
    assert!(matches!(model.forward(&Tensor::zeros(vec![2, 100])), Err(Error::Dimension(_))));
    assert!(model.forward(&Tensor::zeros(vec![2, 784])).is_ok());
}

#[test]
fn linear_softmax_closed_form_gradient() {
    let model = Model::zeros(Architecture::Linear { input_dim: 3 }, 2).unwrap();
    let x = [0.5, -2.0, 3.0];
    let g = model.per_example_gradient(&x, 0).unwrap();
    // outer(p - onehot(0), x) with p = [0.5, 0.5]
    let expected: Vec<f64> = [-0.5, 0.5].iter().flat_map(|d| x.iter().map(move |xi| d * xi)).collect();
    assert_eq!(g.segment(0), expected.as_slice());
    assert_eq!(g.segment(1), &[-0.5, 0.5]);
}

#[test]
fn saturated_example_has_tiny_gradient() {
    let mut model = Model::zeros(Architecture::Linear { input_dim: 1 }, 2).unwrap();
    model.segment_mut("dense0.bias").unwrap().values.data_mut().copy_from_slice(&[30.0, -30.0]);
    let g = model.per_example_gradient(&[1.0], 0).unwrap();
    let norm = g.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm <= 1e-8, "{norm}");
}

#[test]
fn singleton_and_duplicated_batches() {
    let model = Model::new(
        Architecture::Mlp {
            input_dim: 4,
            hidden: vec![5],
        },
        3,
        9,
    )
    .unwrap();
    let (x, y) = random_batch(4, 1, 3, 2);
    let single = model.per_example_gradient(x.row(0), y[0]).unwrap();
    assert_eq!(model.batch_gradient(&x, &y).unwrap(), single);
    let doubled = x.select_rows(&[0, 0]).unwrap();
    let g2 = model.batch_gradient(&doubled, &[y[0], y[0]]).unwrap();
    for (a, b) in g2.flatten().iter().zip(single.flatten()) {
        assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
    }
}

#[test]
fn empty_batch_is_rejected() {
    let model = Model::new(Architecture::Linear { input_dim: 2 }, 2, 0).unwrap();
    assert!(model.batch_gradient(&Tensor::zeros(vec![1, 2]), &[]).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    assert_matches_fd(Architecture::Linear { input_dim: 6 }, 3, 1);
    assert_matches_fd(
        Architecture::Mlp {
            input_dim: 5,
            hidden: vec![7, 4],
        },
        3,
        2,
    );
    assert_matches_fd(tiny_cnn(), 3, 3);
}

#[test]
fn batch_gradient_is_mean_of_per_example() {
    for (arch, seed) in [
        (
            Architecture::Mlp {
                input_dim: 6,
                hidden: vec![8],
            },
            4,
        ),
        (tiny_cnn(), 5),
    ] {
        let model = Model::new(arch.clone(), 4, seed).unwrap();
        let (x, y) = random_batch(arch.input_len(), 9, 4, seed);
        let batch = model.batch_gradient(&x, &y).unwrap().flatten();
        let mut mean = vec![0.0; batch.len()];
        for (i, &label) in y.iter().enumerate() {
            let g = model.per_example_gradient(x.row(i), label).unwrap().flatten();
            mean.iter_mut().zip(g).for_each(|(m, g)| *m += g / 9.0);
        }
        let batched = model.per_example_gradients(&x, &y).unwrap();
        for (j, (a, b)) in batch.iter().zip(&mean).enumerate() {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-12), "coordinate {j}");
        }
        for (i, g) in batched.iter().enumerate() {
            assert_eq!(g, &model.per_example_gradient(x.row(i), y[i]).unwrap());
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let model = Model::new(tiny_cnn(), 3, 4).unwrap();
    let (x, _) = random_batch(144, 4, 3, 4);
    assert_eq!(model.forward(&x).unwrap(), model.forward(&x).unwrap());
    assert_eq!(Model::new(tiny_cnn(), 3, 4).unwrap(), model);
    assert_ne!(Model::new(tiny_cnn(), 3, 5).unwrap(), model);
}

#[test]
fn save_load_roundtrip_is_exact() {
    let model = Model::new(tiny_cnn(), 3, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    assert_eq!(Model::load(&path).unwrap(), model);
}
