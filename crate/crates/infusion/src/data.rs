//! Datasets: IDX files, the two-Gaussians toy set and seeded splits.

use std::fs;
use std::path::Path;

use infusion_core::rng::{self, standard_normal, tag};
use infusion_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{io_err, CliError, Result};

/// IDX magic for unsigned-byte rank-3 arrays (image stacks).
pub const IDX_IMAGES: u32 = 0x0000_0803;
/// IDX magic for unsigned-byte rank-1 arrays (labels).
pub const IDX_LABELS: u32 = 0x0000_0801;

/// Unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX image stack (rank 3) or label vector (rank 1).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let bad = |m: String| Err(CliError::Format(format!("idx: {}", m)));
    if bytes.len() < 4 {
        return bad(format!("{} bytes is too short for a header", bytes.len()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != IDX_IMAGES && magic != IDX_LABELS {
        return bad(format!("bad magic {:#010x}", magic));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return bad("truncated dimension header".to_string());
    }
    let mut dims = Vec::with_capacity(rank);
    let mut len = 1usize;
    for r in 0..rank {
        let o = 4 + 4 * r;
        let d = u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        len = match len.checked_mul(d) {
            Some(l) => l,
            None => return bad("dimension product overflows".to_string()),
        };
        dims.push(d);
    }
    let payload = &bytes[header..];
    if payload.len() < len {
        return bad(format!("payload has {} bytes, dimensions declare {}", payload.len(), len));
    }
    if payload.len() > len {
        return bad(format!("{} trailing bytes after payload", payload.len() - len));
    }
    Ok(IdxArray { dims, data: payload.to_vec() })
}

pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, arr.dims.len() as u8];
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

pub fn load_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    parse_idx(&bytes).map_err(|e| CliError::Format(format!("{}: {}", path.display(), e)))
}

pub fn write_idx(path: &Path, arr: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(arr)).map_err(|e| io_err(path, e))
}

/// Bytes divided by 255, one row per leading index.
pub fn scale_unit(arr: &IdxArray) -> Result<Tensor> {
    let n = arr.dims.first().copied().unwrap_or(0);
    let d = arr.dims.iter().skip(1).product::<usize>();
    Ok(Tensor::matrix(n, d, arr.data.iter().map(|&b| b as f64 / 255.0).collect())?)
}

/// Box-filter resampling of square images from `side_in` to `side_out`
/// pixels per side; every output pixel averages the input area it covers.
pub fn downsample(images: &Tensor, side_in: usize, side_out: usize) -> Result<Tensor> {
    if images.cols() != side_in * side_in || side_out == 0 || side_out > side_in {
        return Err(CliError::Format(format!("cannot resample {} columns from side {} to {}", images.cols(), side_in, side_out)));
    }
    let scale = side_in as f64 / side_out as f64;
    // Overlap of output cell `o` with input cell `i` along one axis.
    let weights: Vec<Vec<(usize, f64)>> = (0..side_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            (lo.floor() as usize..(hi.ceil() as usize).min(side_in))
                .map(|i| (i, (hi.min((i + 1) as f64) - lo.max(i as f64)) / scale))
                .filter(|&(_, w)| w > 0.0)
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(images.rows() * side_out * side_out);
    for img in images.rows_iter() {
        for wr in &weights {
            for wc in &weights {
                let mut v = 0.0;
                for &(r, a) in wr {
                    for &(c, b) in wc {
                        v += a * b * img[r * side_in + c];
                    }
                }
                out.push(v);
            }
        }
    }
    Ok(Tensor::matrix(images.rows(), side_out * side_out, out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(CliError::Config(format!("unknown split {:?} (train, valid or test)", s))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Equal-weight mixture of two isotropic Gaussians in the plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoGaussians {
    pub centers: [[f64; 2]; 2],
    pub std: f64,
}

impl TwoGaussians {
    /// Log-density of the (untruncated) mixture.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let v = self.std * self.std;
        let comp = |c: &[f64; 2]| {
            let r2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            (0.5f64).ln() - (2.0 * std::f64::consts::PI * v).ln() - r2 / (2.0 * v)
        };
        let (a, b) = (comp(&self.centers[0]), comp(&self.centers[1]));
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// Rows with a split label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rows: Tensor,
    pub splits: Vec<Split>,
    /// Human-readable origin, e.g. `toy2d(n=2000, std=0.05)`.
    pub source: String,
    /// `(height, width)` when rows are images.
    pub image_shape: Option<(usize, usize)>,
    pub density: Option<TwoGaussians>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn subset(&self, split: Split) -> Tensor {
        let idx: Vec<usize> = (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect();
        self.rows.gather_rows(&idx)
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Display shape for grids: the image shape, or one row of `d` pixels.
    pub fn display_shape(&self) -> (usize, usize) {
        self.image_shape.unwrap_or((1, self.dim()))
    }
}

/// `n` rows from the two-Gaussians mixture, each redrawn from its component
/// until it lies in `[0, 1]²`. Every row is labelled train.
pub fn toy_two_gaussians<R: Rng + ?Sized>(rng: &mut R, n: usize, centers: [[f64; 2]; 2], std: f64) -> Result<Dataset> {
    if !(std > 0.0) {
        return Err(CliError::Config("toy std must be positive".to_string()));
    }
    if centers.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(CliError::Config("toy centers must lie in [0, 1]²".to_string()));
    }
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = centers[rng.random_range(0..2)];
        loop {
            let p = [c[0] + std * standard_normal(rng), c[1] + std * standard_normal(rng)];
            if p.iter().all(|v| (0.0..=1.0).contains(v)) {
                data.extend_from_slice(&p);
                break;
            }
        }
    }
    Ok(Dataset {
        rows: Tensor::matrix(n, 2, data)?,
        splits: vec![Split::Train; n],
        source: format!("toy2d(n={}, std={})", n, std),
        image_shape: None,
        density: Some(TwoGaussians { centers, std }),
    })
}

/// Relabels a seeded shuffle of the rows: the first `round(f0 n)` become
/// train, the next `round(f1 n)` valid, the remainder test.
pub fn split(mut ds: Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CliError::Config(format!("split fractions {:?} must be in [0, 1] and sum to 1", fractions)));
    }
    let n = ds.rows.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_valid = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    for (pos, &i) in order.iter().enumerate() {
        ds.splits[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    Ok(ds)
}

pub const MNIST_FILES: [&str; 2] = ["train-images-idx3-ubyte", "t10k-images-idx3-ubyte"];

/// Row limits applied after the MNIST split; `None` keeps everything.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Limits {
    pub train: Option<usize>,
    pub valid: Option<usize>,
    pub test: Option<usize>,
}

/// MNIST from the standard IDX files in `dir`: the 60k training images are
/// shuffled with `seed`, the last 10k become validation, the 10k test images
/// are the test split. Pixels are scaled to `[0, 1]` and optionally
/// downsampled to `side × side`.
pub fn mnist(dir: &Path, side: Option<usize>, limits: Limits, seed: u64) -> Result<Dataset> {
    let load = |name: &str| -> Result<(Tensor, usize)> {
        let arr = load_idx(&dir.join(name))?;
        if arr.dims.len() != 3 || arr.dims[1] != arr.dims[2] {
            return Err(CliError::Format(format!("{}: expected square image stack, got {:?}", name, arr.dims)));
        }
        let s = arr.dims[1];
        let mut t = scale_unit(&arr)?;
        if let Some(out) = side {
            t = downsample(&t, s, out)?;
        }
        Ok((t, side.unwrap_or(s)))
    };
    let (train_all, s) = load(MNIST_FILES[0])?;
    let (test, _) = load(MNIST_FILES[1])?;
    let n = train_all.rows();
    let valid_n = 10_000.min(n / 6);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    let take = |idx: &[usize], lim: Option<usize>| idx[..lim.unwrap_or(idx.len()).min(idx.len())].to_vec();
    let train_idx = take(&order[..n - valid_n], limits.train);
    let valid_idx = take(&order[n - valid_n..], limits.valid);
    let test_idx = take(&(0..test.rows()).collect::<Vec<_>>(), limits.test);
    let mut data = Vec::new();
    let mut splits = Vec::new();
    for (src, idx, label) in [(&train_all, &train_idx, Split::Train), (&train_all, &valid_idx, Split::Valid), (&test, &test_idx, Split::Test)] {
        data.extend_from_slice(src.gather_rows(idx).data());
        splits.extend(std::iter::repeat_n(label, idx.len()));
    }
    Ok(Dataset {
        rows: Tensor::matrix(splits.len(), s * s, data)?,
        splits,
        source: format!("mnist({}, side={})", dir.display(), s),
        image_shape: Some((s, s)),
        density: None,
    })
}
