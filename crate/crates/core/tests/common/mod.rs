#![allow(dead_code)]

use std::path::{Path, PathBuf};

use bnn_core::mnist_io::{encode_idx_images, encode_idx_labels, ImageSet, PIXELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Separable fake digits: class `c` lights a 70-pixel band starting at `70 * c`,
/// on top of faint noise.
pub fn toy_set(n: usize, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for &l in &labels {
        let start = l as usize * 70;
        for p in 0..PIXELS {
            let base = if (start..start + 70).contains(&p) {
                0.8
            } else {
                0.0
            };
            let v: f64 = base + rng.random_range(0.0..0.2);
            // quantize like a real IDX file so encode/parse round-trips exactly
            pixels.push((v * 255.0).round() / 255.0);
        }
    }
    ImageSet::new(pixels, labels).unwrap()
}

pub struct IdxFiles {
    pub dir: tempfile::TempDir,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

pub fn write_set(set: &ImageSet, images: &Path, labels: &Path) {
    std::fs::write(images, encode_idx_images(set)).unwrap();
    std::fs::write(labels, encode_idx_labels(set.labels())).unwrap();
}

pub fn toy_idx(n_train: usize, n_test: usize) -> IdxFiles {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let files = IdxFiles {
        train_images: p("train-images-idx3-ubyte"),
        train_labels: p("train-labels-idx1-ubyte"),
        test_images: p("t10k-images-idx3-ubyte"),
        test_labels: p("t10k-labels-idx1-ubyte"),
        dir,
    };
    write_set(
        &toy_set(n_train, 1),
        &files.train_images,
        &files.train_labels,
    );
    write_set(&toy_set(n_test, 2), &files.test_images, &files.test_labels);
    files
}

impl IdxFiles {
    pub fn data_args(&self) -> Vec<String> {
        vec![
            "--train-images".into(),
            self.train_images.display().to_string(),
            "--train-labels".into(),
            self.train_labels.display().to_string(),
            "--test-images".into(),
            self.test_images.display().to_string(),
            "--test-labels".into(),
            self.test_labels.display().to_string(),
        ]
    }
}

/// Official MNIST location: `$MNIST_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("MNIST_DIR") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// Path of an MNIST file, accepting both gzipped and plain names.
pub fn mnist_file(stem: &str) -> PathBuf {
    let dir = mnist_dir();
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(stem)
    }
}
