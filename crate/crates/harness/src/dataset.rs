//! Dataset ingestion: CIFAR-10 binary batches (optionally downloaded) and a
//! synthetic Gaussian-blob generator for smoke tests.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use mutualnet::{kernels, Batch, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::DataConfig;
use crate::error::{HarnessError, Result};

/// Overrides the dataset cache directory.
pub const DATA_DIR_ENV: &str = "MUTUALNET_DATA_DIR";

pub const CIFAR10_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
const CIFAR10_DIR: &str = "cifar-10-batches-bin";
const CIFAR10_TRAIN: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR10_TEST: &str = "test_batch.bin";
const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Default cache directory: `$MUTUALNET_DATA_DIR`, else
/// `$HOME/.cache/mutualnet`, else `./data`.
pub fn data_dir() -> PathBuf {
    if let Some(d) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(d);
    }
    match std::env::var_os("HOME") {
        Some(h) => PathBuf::from(h).join(".cache").join("mutualnet"),
        None => PathBuf::from("data"),
    }
}

/// Images `[N, C, H, W]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    /// `[C, H, W]`
    pub shape: [usize; 3],
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image(&self, i: usize) -> &[f32] {
        let per: usize = self.shape.iter().product();
        &self.images[i * per..(i + 1) * per]
    }

    /// Gathers `indices` into a batch, with pad-4 random crops and
    /// horizontal flips when `augment` carries a generator.
    pub fn batch(&self, indices: &[usize], augment: Option<&mut ChaCha8Rng>) -> Batch {
        let [c, h, w] = self.shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        match augment {
            None => indices.iter().for_each(|&i| data.extend_from_slice(self.image(i))),
            Some(rng) => {
                for &i in indices {
                    let (dy, dx) = (rng.random_range(0..=8) as isize - 4, rng.random_range(0..=8) as isize - 4);
                    let flip = rng.random_bool(0.5);
                    let img = self.image(i);
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let sy = y as isize + dy;
                                let sx0 = if flip { w - 1 - x } else { x } as isize + dx;
                                let v = if sy < 0 || sx0 < 0 || sy >= h as isize || sx0 >= w as isize {
                                    0.0
                                } else {
                                    img[(ch * h + sy as usize) * w + sx0 as usize]
                                };
                                data.push(v);
                            }
                        }
                    }
                }
            }
        }
        let images = Tensor::from_vec(&[indices.len(), c, h, w], data).expect("batch shape");
        Batch::new(images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Consecutive batches in stored order; the last may be smaller.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size).map(|c| self.batch(c, None)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub train: Split,
    pub val: Split,
    pub augment: bool,
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

pub fn load(cfg: &DataConfig) -> Result<Dataset> {
    match cfg {
        DataConfig::Cifar10 {
            path,
            download,
            augment,
            train_limit,
        } => {
            let root = path.clone().unwrap_or_else(data_dir);
            let mut ds = load_cifar10(&root, *download)?;
            ds.augment = *augment;
            if *train_limit > 0 && *train_limit < ds.train.len() {
                let per: usize = ds.train.shape.iter().product();
                ds.train.images.truncate(train_limit * per);
                ds.train.labels.truncate(*train_limit);
            }
            Ok(ds)
        }
        DataConfig::Synthetic {
            classes,
            train,
            val,
            resolution,
            noise,
            seed,
        } => Ok(synthetic(*classes, *train, *val, *resolution, *noise, *seed)),
    }
}

/// Class prototypes are smooth random images (4×4 noise upsampled);
/// samples add i.i.d. Gaussian pixel noise of standard deviation `noise`.
pub fn synthetic(classes: usize, train: usize, val: usize, resolution: usize, noise: f32, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
    let coarse: Vec<f32> = (0..classes * 3 * 16).map(|_| unit.sample(&mut rng)).collect();
    let protos = kernels::resize_bilinear(&coarse, classes * 3, 4, 4, resolution, resolution);
    let per = 3 * resolution * resolution;
    let mut split = |n: usize| {
        let mut images = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % classes;
            labels.push(y);
            images.extend(protos[y * per..(y + 1) * per].iter().map(|&p| p + noise * unit.sample(&mut rng)));
        }
        Split {
            images,
            labels,
            shape: [3, resolution, resolution],
        }
    };
    let train = split(train);
    let val = split(val);
    Dataset {
        name: "synthetic".into(),
        classes,
        train,
        val,
        augment: false,
    }
}

fn cifar_files(root: &Path) -> Vec<PathBuf> {
    let dir = root.join(CIFAR10_DIR);
    CIFAR10_TRAIN
        .iter()
        .chain(std::iter::once(&CIFAR10_TEST))
        .map(|f| dir.join(f))
        .collect()
}

/// Loads CIFAR-10 from `root/cifar-10-batches-bin`, downloading and
/// unpacking the archive first when allowed and needed.
pub fn load_cifar10(root: &Path, download: bool) -> Result<Dataset> {
    let files = cifar_files(root);
    if files.iter().any(|f| !f.exists()) {
        if !download {
            return Err(HarnessError::DatasetMissing {
                path: root.join(CIFAR10_DIR),
                hint: format!(
                    "place the CIFAR-10 binary batches there, set {DATA_DIR_ENV}, or enable download"
                ),
            });
        }
        download_cifar10(root)?;
    }
    let train = read_cifar_split(&files[..5])?;
    let val = read_cifar_split(&files[5..])?;
    Ok(Dataset {
        name: "cifar10".into(),
        classes: 10,
        train,
        val,
        augment: true,
    })
}

fn read_cifar_split(files: &[PathBuf]) -> Result<Split> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let mut bytes = Vec::new();
        File::open(f)
            .and_then(|mut h| h.read_to_end(&mut bytes))
            .map_err(HarnessError::io(f))?;
        if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
            return Err(HarnessError::format(f, format!("{} bytes is not a whole number of records", bytes.len())));
        }
        for rec in bytes.chunks(CIFAR10_RECORD) {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(HarnessError::format(f, format!("label {label} out of range")));
            }
            labels.push(label);
            for (ch, plane) in rec[1..].chunks(1024).enumerate() {
                images.extend(plane.iter().map(|&p| (p as f32 / 255.0 - CIFAR10_MEAN[ch]) / CIFAR10_STD[ch]));
            }
        }
    }
    Ok(Split {
        images,
        labels,
        shape: [3, 32, 32],
    })
}

fn download_cifar10(root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(HarnessError::io(root))?;
    log::info!("downloading {CIFAR10_URL} into {}", root.display());
    let fail = |detail: String| HarnessError::Download {
        url: CIFAR10_URL.into(),
        detail: format!("{detail}; download it manually and unpack into {}", root.display()),
    };
    let resp = ureq::get(CIFAR10_URL).call().map_err(|e| fail(e.to_string()))?;
    let gz = flate2::read::GzDecoder::new(resp.into_reader());
    tar::Archive::new(gz).unpack(root).map_err(|e| fail(e.to_string()))?;
    if let Some(missing) = cifar_files(root).into_iter().find(|f| !f.exists()) {
        return Err(fail(format!("archive did not contain {}", missing.display())));
    }
    Ok(())
}
