use std::path::PathBuf;

use condense::arch::ModelConfig;
use condense::harness::connectivity::{connectivity, pearson};
use condense::harness::data::{load_dataset, DatasetName};
use condense::harness::train::{TrainConfig, Trainer};

fn mnist_dir() -> PathBuf {
    std::env::var_os("CONDENSE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")))
        .join("mnist")
}

#[test]
fn connectivity_patterns_agree_across_seeds() {
    let (train, test) = load_dataset(DatasetName::Mnist, &mnist_dir(), Some(1000), Some(200))
        .expect("MNIST is required; see README for how to fetch it");
    let mut blocks = Vec::new();
    for seed in [1, 2, 3] {
        let mut m = ModelConfig::cifar_lgc_small();
        m.block_layers = vec![3, 3, 3];
        let mut cfg = TrainConfig::new(m);
        cfg.fit_to(&train);
        cfg.epochs = 6;
        cfg.seed = seed;
        let mut tr = Trainer::<f32>::new(cfg).unwrap();
        tr.run(&train, &test, None, |_, _| Ok(())).unwrap();
        blocks.push(connectivity(&tr.model).unwrap().block_values());
    }
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let r = pearson(&blocks[i], &blocks[j]).unwrap();
        println!("seeds {} and {}: r = {r:.3}", i + 1, j + 1);
        assert!(r > 0.5, "seeds {} and {}: r = {r}", i + 1, j + 1);
    }
}
