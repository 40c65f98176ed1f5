//! Labelled image datasets: a synthetic clustered generator and the CIFAR-10
//! binary format, plus shuffled minibatch index streams.

use std::fs::File;
use std::io::{BufReader, ErrorKind, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::blur_with_sigma;
use crate::error::{DataError, Error, Result};
use crate::image::{Image, ImageBatch};
use crate::rng::SeededRng;

pub const CIFAR_RECORD: usize = 1 + 3 * 1024;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::UnknownSplit(other.to_string())),
        }
    }
}

/// Images with class labels. Labels feed evaluation and analysis only.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageDataset {
    pub images: ImageBatch,
    pub labels: Vec<u32>,
    pub class_count: usize,
}

impl LabeledImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledImageDataset {
        LabeledImageDataset {
            images: self.images.select(indices),
            labels: self.labels_of(indices),
            class_count: self.class_count,
        }
    }

    /// First `k` indices of a seeded permutation, balanced across classes.
    pub fn stratified_subset(&self, k: usize, seed: u64) -> LabeledImageDataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut SeededRng::new(seed).named("subset").rng());
        let per_class = k / self.class_count;
        let mut taken = vec![0usize; self.class_count];
        let mut picked = Vec::with_capacity(k);
        for i in order {
            let c = self.labels[i] as usize;
            if taken[c] < per_class {
                taken[c] += 1;
                picked.push(i);
            }
        }
        picked.sort_unstable();
        self.select(&picked)
    }
}

/// Parameters of the synthetic clustered-image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f32,
    pub seed: u64,
}

/// Class prototypes: blurred white noise, rescaled to span [0.1, 0.9].
fn base_patterns(spec: &SynthSpec) -> Vec<Image> {
    let root = SeededRng::new(spec.seed).named("synth.patterns");
    let sigma = spec.height.min(spec.width) as f32 / 6.0;
    (0..spec.class_count)
        .map(|c| {
            let mut rng = root.substream(c as u64).rng();
            let n = spec.channels * spec.height * spec.width;
            let noise: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let raw = Image::new(spec.channels, spec.height, spec.width, noise).expect("dims");
            let field = blur_unclamped(&raw, sigma);
            let lo = field.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = field.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = (hi - lo).max(1e-6);
            let data = field.iter().map(|v| 0.1 + 0.8 * (v - lo) / span).collect();
            Image::new(spec.channels, spec.height, spec.width, data).expect("dims")
        })
        .collect()
}

/// Gaussian smoothing of a signed field (repeated small-kernel passes).
fn blur_unclamped(img: &Image, sigma: f32) -> Vec<f32> {
    // Shift into [0, 1] around 0.5 so the clamping blur leaves values intact.
    let max = img.data.iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-6);
    let mut shifted = img.clone();
    shifted.data.iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v / max);
    // Variances add across passes: k passes of σ₀ give σ₀·√k.
    let passes = ((sigma / 1.0).powi(2)).ceil().max(1.0) as usize;
    let step = sigma / (passes as f32).sqrt();
    for _ in 0..passes {
        shifted = blur_with_sigma(&shifted, step);
    }
    shifted.data
}

fn generate(spec: &SynthSpec, split: Split) -> Result<LabeledImageDataset> {
    if spec.class_count < 2 {
        return Err(Error::param("class_count", format!("need at least 2 classes, got {}", spec.class_count)));
    }
    if spec.per_class == 0 || spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::param("synth", "per_class and image dims must be positive"));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::param("noise_sigma", "must be non-negative"));
    }
    let bases = base_patterns(spec);
    let stream = SeededRng::new(spec.seed).named(match split {
        Split::Train => "synth.train",
        Split::Test => "synth.test",
    });
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(f32::MIN_POSITIVE)).expect("valid sigma");
    let mut images = ImageBatch::empty(spec.channels, spec.height, spec.width);
    let mut labels = Vec::with_capacity(spec.class_count * spec.per_class);
    for k in 0..spec.class_count * spec.per_class {
        let class = k % spec.class_count;
        let mut img = bases[class].clone();
        if spec.noise_sigma > 0.0 {
            let mut rng = stream.substream(k as u64).rng();
            img.data
                .iter_mut()
                .for_each(|v| *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
        images.push(&img)?;
        labels.push(class as u32);
    }
    Ok(LabeledImageDataset {
        images,
        labels,
        class_count: spec.class_count,
    })
}

/// Training split of the synthetic clustered dataset. Samples cycle through
/// the classes: sample `k` has label `k % class_count`.
pub fn synth_clusters(spec: &SynthSpec) -> Result<LabeledImageDataset> {
    generate(spec, Split::Train)
}

/// Either split; both share the class prototypes and differ in noise draws.
pub fn synth_split(spec: &SynthSpec, split: Split) -> Result<LabeledImageDataset> {
    generate(spec, split)
}

/// Parses CIFAR-10 binary records from any reader.
pub fn parse_cifar_records<R: Read>(reader: R, path: &Path, into: &mut LabeledImageDataset) -> Result<()> {
    let mut reader = BufReader::new(reader);
    let mut record = [0u8; CIFAR_RECORD];
    let mut index = 0usize;
    loop {
        let mut filled = 0;
        while filled < CIFAR_RECORD {
            match reader.read(&mut record[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(Error::io(path, e)),
            }
        }
        if filled == 0 {
            return Ok(());
        }
        if filled < CIFAR_RECORD {
            return Err(DataError::BadRecordLength {
                path: path.to_path_buf(),
                len: (index * CIFAR_RECORD + filled) as u64,
                record: CIFAR_RECORD,
            }
            .into());
        }
        let label = record[0];
        if label > 9 {
            return Err(DataError::BadLabel {
                path: path.to_path_buf(),
                record: index,
                label,
            }
            .into());
        }
        let pixels = record[1..].iter().map(|&b| f32::from(b) / 255.0).collect();
        into.images.push(&Image::new(3, 32, 32, pixels)?)?;
        into.labels.push(u32::from(label));
        index += 1;
    }
}

fn cifar_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => CIFAR_TRAIN_FILES.iter().map(|f| dir.join(f)).collect(),
        Split::Test => vec![dir.join(CIFAR_TEST_FILE)],
    }
}

/// Loads `data_batch_{1..5}.bin` (train) or `test_batch.bin` (test).
pub fn load_cifar10(dir: &Path, split: Split) -> Result<LabeledImageDataset> {
    let mut ds = LabeledImageDataset {
        images: ImageBatch::empty(3, 32, 32),
        labels: Vec::new(),
        class_count: 10,
    };
    for path in cifar_files(dir, split) {
        let file = File::open(&path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => Error::from(DataError::MissingFile(path.clone())),
            _ => Error::io(&path, e),
        })?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        if len % CIFAR_RECORD as u64 != 0 {
            return Err(DataError::BadRecordLength {
                path,
                len,
                record: CIFAR_RECORD,
            }
            .into());
        }
        parse_cifar_records(file, &path, &mut ds)?;
    }
    Ok(ds)
}

/// Index batches for one epoch: a uniform shuffle keyed by `(seed, epoch)`,
/// cut into `⌊M/N⌋` full batches (the remainder is dropped).
pub fn batches(dataset_len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let perm = epoch_permutation(dataset_len, seed, epoch);
    perm.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn epoch_permutation(dataset_len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dataset_len).collect();
    perm.shuffle(&mut SeededRng::new(seed).named("shuffle").substream(epoch).rng());
    perm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f32) -> SynthSpec {
        SynthSpec {
            class_count: 3,
            per_class: 4,
            channels: 3,
            height: 8,
            width: 8,
            noise_sigma: noise,
            seed: 5,
        }
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let ds = synth_clusters(&spec(0.0)).unwrap();
        for k in 3..ds.len() {
            assert_eq!(ds.images.image_data(k), ds.images.image_data(k % 3));
        }
        assert_ne!(ds.images.image_data(0), ds.images.image_data(1));
    }

    #[test]
    fn synthetic_is_seeded_and_in_range() {
        let a = synth_clusters(&spec(0.1)).unwrap();
        assert_eq!(a, synth_clusters(&spec(0.1)).unwrap());
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.labels.iter().all(|&l| l < 3));
        assert!(synth_clusters(&SynthSpec { class_count: 1, ..spec(0.1) }).is_err());
    }

    #[test]
    fn splits_share_prototypes() {
        let train = synth_split(&spec(0.0), Split::Train).unwrap();
        let test = synth_split(&spec(0.0), Split::Test).unwrap();
        assert_eq!(train, test);
        let train = synth_split(&spec(0.1), Split::Train).unwrap();
        let test = synth_split(&spec(0.1), Split::Test).unwrap();
        assert_ne!(train.images, test.images);
    }

    #[test]
    fn batching() {
        let b = batches(10, 3, 1, 0);
        assert_eq!(b.len(), 3);
        let perm = epoch_permutation(10, 1, 0);
        let flat: Vec<usize> = b.concat();
        assert_eq!(flat, perm[..9].to_vec());
        assert!(batches(2, 3, 1, 0).is_empty());
        assert_ne!(epoch_permutation(50, 1, 0), epoch_permutation(50, 1, 1));
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_subset_is_balanced() {
        let ds = synth_clusters(&SynthSpec { per_class: 10, ..spec(0.1) }).unwrap();
        let sub = ds.stratified_subset(9, 3);
        assert_eq!(sub.len(), 9);
        for c in 0..3 {
            assert_eq!(sub.labels.iter().filter(|&&l| l == c).count(), 3);
        }
    }

    #[test]
    fn split_parsing() {
        assert_eq!("train".parse::<Split>().unwrap(), Split::Train);
        assert!("val".parse::<Split>().is_err());
    }
}
