use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn random_vector(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
}

pub fn bank_with_rows(rows: Array2<f64>) -> crate::corpus::ExampleBank {
    let examples = (0..rows.nrows())
        .map(|i| crate::corpus::Example::new(format!("x{i}"), format!("input {i}"), format!("output {i}"), "xx"))
        .collect();
    crate::corpus::ExampleBank::new("xx", examples)
        .unwrap()
        .with_embeddings(rows)
        .unwrap()
}
