use exemplar::corpus::{Example, ExampleBank};
use exemplar::dpp::{self, DppConfig};
use exemplar::retriever::RetrieverParams;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const CLUSTERS: usize = 4;
const PER_CLUSTER: usize = 10;
const DIM: usize = 8;

fn gaussian(rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(DIM, |_| rng.sample(StandardNormal))
}

#[test]
fn trained_map_covers_every_duplicated_cluster() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let centers: Vec<Array1<f64>> = (0..CLUSTERS).map(|_| gaussian(&mut rng)).collect();
    let mut rows = Array2::zeros((CLUSTERS * PER_CLUSTER, DIM));
    for (c, center) in centers.iter().enumerate() {
        for j in 0..PER_CLUSTER {
            let noise = gaussian(&mut rng) * 0.01;
            rows.row_mut(c * PER_CLUSTER + j).assign(&(center + &noise));
        }
    }
    let examples = (0..rows.nrows())
        .map(|i| Example::new(format!("d-{i}"), format!("in {i}"), format!("out {i}"), "xx"))
        .collect();
    let bank = ExampleBank::new("xx", examples).unwrap().with_embeddings(rows).unwrap();
    let cfg = DppConfig {
        k: CLUSTERS,
        pool: bank.len(),
        ..DppConfig::default()
    };
    let trained = dpp::train_dpp(&RetrieverParams::identity(DIM), &bank, &cfg, 5).unwrap();
    assert_eq!(trained.loss_trace.len(), cfg.epochs);

    let queries = 200;
    let mut covered = 0;
    for _ in 0..queries {
        let w: Vec<f64> = (0..CLUSTERS).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut q = gaussian(&mut rng) * 0.1;
        for (c, wc) in centers.iter().zip(&w) {
            q.scaled_add(*wc, c);
        }
        let r = dpp::retrieve(&trained.params, &bank, q.view(), CLUSTERS, &cfg).unwrap();
        let mut seen: Vec<usize> = r.indices.iter().map(|i| i / PER_CLUSTER).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() == CLUSTERS {
            covered += 1;
        }
    }
    assert!(
        covered * 10 >= queries * 9,
        "one item per cluster on {covered}/{queries} queries"
    );
}
