#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use infusion::data::{write_idx, IdxArray, MNIST_FILES};
use rand::{Rng, SeedableRng};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_infusion"))
}

/// Runs the binary with `args` from `cwd`; panics with stderr on failure.
pub fn run_ok(cwd: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(cwd).env_remove("INFUSION_OUT_ROOT").args(args).output().unwrap();
    assert!(out.status.success(), "{:?} failed: {}", args, String::from_utf8_lossy(&out.stderr));
    out
}

/// Flags for a toy run that trains in well under a second.
pub const TINY: &[&str] = &["--set", "data.toy_n=120", "--hidden", "8,8", "--steps", "3", "--epochs", "2", "--set", "train.visualize=4"];

pub fn tiny_train(cwd: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run_ok(cwd, &args);
    cwd.join(out)
}

/// MNIST-shaped IDX files: 28x28 images holding one random bar each.
pub fn fake_mnist(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for (name, n) in MNIST_FILES.iter().zip([train, test]) {
        let mut data = vec![0u8; n * 784];
        for img in data.chunks_mut(784) {
            let (pos, vertical) = (rng.random_range(4..24), rng.random_bool(0.5));
            for k in 4..24 {
                let (r, c) = if vertical { (k, pos) } else { (pos, k) };
                img[r * 28 + c] = rng.random_range(128..=255);
            }
        }
        write_idx(&dir.join(name), &IdxArray { dims: vec![n, 28, 28], data }).unwrap();
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {}", path.display(), e))
}
