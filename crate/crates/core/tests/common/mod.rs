#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use betaprune::data::{self, Dataset};
use betaprune::nn::DatasetKind;

/// `$BETAPRUNE_DATA_DIR`, else `data/` at the workspace root.
pub fn data_dir() -> PathBuf {
    std::env::var_os("BETAPRUNE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn mnist_dir() -> PathBuf {
    data_dir().join(DatasetKind::Mnist.as_str())
}

pub fn cifar_dir() -> PathBuf {
    data_dir().join(DatasetKind::Cifar10.as_str())
}

static MNIST: OnceLock<Result<(Dataset, Dataset), String>> = OnceLock::new();

/// Loaded once per test binary.
pub fn mnist() -> Result<&'static (Dataset, Dataset), String> {
    MNIST
        .get_or_init(|| data::load_mnist(mnist_dir()).map_err(|e| e.to_string()))
        .as_ref()
        .map_err(Clone::clone)
}
