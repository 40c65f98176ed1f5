//! Frozen-feature evaluation: weighted KNN and a linear probe.

use serde::{Deserialize, Serialize};

use crate::data::{epoch_permutation, LabeledImageDataset};
use crate::error::{Error, Result};
use crate::image::ChannelNorm;
use crate::model::Network;
use crate::numcore::{Scalar, Tape, Tensor, Variable};
use crate::trainer::{sgd_step, Schedule};

/// Rows must have unit norm within this tolerance.
const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Voting {
    /// Each neighbor votes `exp(sim / T)`.
    Weighted,
    /// Each neighbor votes 1.
    Majority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    pub vote_temperature: f64,
    pub voting: Voting,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: 200,
            vote_temperature: 0.07,
            voting: Voting::Weighted,
        }
    }
}

impl KnnConfig {
    pub fn with_k(k: usize) -> Self {
        KnnConfig { k, ..Self::default() }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("evaluation.k", "must be at least 1"));
        }
        if !(self.vote_temperature > 0.0) {
            return Err(Error::config("evaluation.vote_temperature", "must be positive"));
        }
        Ok(())
    }
}

/// Linear-probe optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            batch_size: 256,
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl ProbeConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("fine_tuning.batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("fine_tuning.lr", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("fine_tuning.momentum", "must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("fine_tuning.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Unit-norm feature rows with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl FeatureBank {
    /// Takes rows that are already unit-norm.
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::shape("feature bank", &[labels.len(), dim], &[features.len()]));
        }
        for (i, row) in features.chunks(dim).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::param("features", format!("row {i} has norm {norm}")));
            }
        }
        Ok(FeatureBank { dim, features, labels })
    }

    /// Normalizes the rows of `features` (M×D) first.
    pub fn from_raw<T: Scalar>(features: &Tensor<T>, labels: Vec<u32>) -> Result<Self> {
        let (_, d) = features.dims2()?;
        let unit = features.cast::<f64>().l2_normalize_rows(crate::numcore::NORM_EPS)?;
        Self::new(d, unit.into_data(), labels)
    }

    pub fn empty(dim: usize) -> Self {
        FeatureBank {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// M×D matrix view; fails on an empty bank.
    pub fn to_tensor(&self) -> Result<Tensor<f64>> {
        if self.is_empty() {
            return Err(Error::param("bank", "feature bank is empty"));
        }
        Tensor::new(&[self.len(), self.dim], self.features.clone())
    }

    /// Applies the same linear map (D×D) to every row, then re-normalizes.
    pub fn transform(&self, map: &Tensor<f64>) -> Result<Self> {
        Self::from_raw(&self.to_tensor()?.matmul(map)?, self.labels.clone())
    }
}

/// Backbone features (projector discarded) of every image, no augmentation.
pub fn extract_features<T: Scalar>(
    network: &Network<T>,
    dataset: &LabeledImageDataset,
    norm: &ChannelNorm,
) -> Result<FeatureBank> {
    const CHUNK: usize = 256;
    let dim = network.feat_dim();
    if dataset.is_empty() {
        return Ok(FeatureBank::empty(dim));
    }
    let mut rows = Vec::with_capacity(dataset.len() * dim);
    let all: Vec<usize> = (0..dataset.len()).collect();
    for idx in all.chunks(CHUNK) {
        let x = dataset.images.select(idx).to_tensor::<T>(norm)?;
        let f = network.features(&x)?;
        rows.extend(f.cast::<f64>().l2_normalize_rows(crate::numcore::NORM_EPS)?.into_data());
    }
    FeatureBank::new(dim, rows, dataset.labels.clone())
}

/// Indices of the `k` most similar rows, by descending similarity with
/// ascending index breaking ties.
pub fn top_k(sims: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Predicted class of every test row.
pub fn knn_predict(train: &FeatureBank, test: &FeatureBank, cfg: &KnnConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::param("train", "feature bank is empty"));
    }
    if cfg.k > train.len() {
        return Err(Error::param("k", format!("K = {} exceeds train size {}", cfg.k, train.len())));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape("knn", &[train.dim()], &[test.dim()]));
    }
    if test.is_empty() {
        return Ok(Vec::new());
    }
    let classes = *train.labels().iter().max().expect("non-empty") as usize + 1;
    let bank_t = train.to_tensor()?.transpose()?;
    let sims = test.to_tensor()?.matmul(&bank_t)?;
    let mut preds = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let row = sims.row(i);
        let mut score = vec![0f64; classes];
        for j in top_k(row, cfg.k) {
            score[train.labels()[j] as usize] += match cfg.voting {
                Voting::Weighted => (row[j] / cfg.vote_temperature).exp(),
                Voting::Majority => 1.0,
            };
        }
        preds.push(crate::numcore::argmax(&score) as u32);
    }
    Ok(preds)
}

/// Fraction of test rows whose KNN vote matches their label.
pub fn knn_evaluate(train: &FeatureBank, test: &FeatureBank, cfg: &KnnConfig) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::param("test", "feature bank is empty"));
    }
    let preds = knn_predict(train, test, cfg)?;
    Ok(accuracy(&preds, test.labels()))
}

fn accuracy(preds: &[u32], labels: &[u32]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Affine classifier `D → C` trained on frozen features.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub weight: Variable<f64>,
    pub bias: Variable<f64>,
}

impl LinearClassifier {
    pub fn predict(&self, bank: &FeatureBank) -> Result<Vec<u32>> {
        if bank.is_empty() {
            return Ok(Vec::new());
        }
        let logits = bank.to_tensor()?.matmul(&self.weight.value)?;
        let c = self.bias.value.numel();
        Ok((0..bank.len())
            .map(|i| {
                let row: Vec<f64> = logits.row(i).iter().zip(self.bias.value.data()).map(|(a, b)| a + b).collect();
                debug_assert_eq!(row.len(), c);
                crate::numcore::argmax(&row) as u32
            })
            .collect())
    }
}

/// Trains the probe with SGD + momentum under a cosine-decayed rate
/// (including the last partial batch of each epoch).
pub fn fit_linear(train: &FeatureBank, class_count: usize, cfg: &ProbeConfig, seed: u64) -> Result<LinearClassifier> {
    if class_count < 2 {
        return Err(Error::param("class_count", format!("need at least 2 classes, got {class_count}")));
    }
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::param("train", "feature bank is empty"));
    }
    if let Some(&bad) = train.labels().iter().find(|&&l| l as usize >= class_count) {
        return Err(Error::param("labels", format!("label {bad} outside 0..{class_count}")));
    }
    let d = train.dim();
    let mut params = [
        Variable::new(Tensor::<f64>::zeros(&[d, class_count]), true),
        Variable::new(Tensor::<f64>::zeros(&[class_count]), true),
    ];
    let mut velocity = [Tensor::zeros(&[d, class_count]), Tensor::zeros(&[class_count])];
    let per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let schedule = Schedule::new(cfg.lr, 0, cfg.epochs, per_epoch);
    let data = train.to_tensor()?;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for idx in epoch_permutation(train.len(), seed, epoch).chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(idx.len() * d);
            let mut target = vec![0f64; idx.len() * class_count];
            for (r, &i) in idx.iter().enumerate() {
                x.extend_from_slice(data.row(i));
                target[r * class_count + train.labels()[i] as usize] = 1.0;
            }
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(&[idx.len(), d], x)?);
            let w = tape.watch(&params[0]);
            let b = tape.watch(&params[1]);
            let logits = tape.matmul(xv, w)?;
            let logits = tape.add_bias(logits, b)?;
            let loss = tape.soft_cross_entropy(logits, &Tensor::new(&[idx.len(), class_count], target)?, 1.0)?;
            let grads = tape.backward(loss)?;
            for (var, p) in [w, b].into_iter().zip(params.iter_mut()) {
                p.zero_grad();
                grads.accumulate(var, p)?;
            }
            sgd_step(&mut params, &mut velocity, schedule.lr_at(step), cfg.momentum, cfg.weight_decay)?;
            step += 1;
        }
    }
    let [weight, bias] = params;
    Ok(LinearClassifier { weight, bias })
}

/// Test accuracy of a probe trained on `train`.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, class_count: usize, cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(Error::shape("linear_probe", &[train.dim()], &[test.dim()]));
    }
    if test.is_empty() {
        return Err(Error::param("test", "feature bank is empty"));
    }
    let probe = fit_linear(train, class_count, cfg, seed)?;
    Ok(accuracy(&probe.predict(test)?, test.labels()))
}

/// Evaluation report written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub accuracy: f64,
    pub class_count: usize,
    pub train_size: usize,
    pub test_size: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: &[&[f64]], labels: &[u32]) -> FeatureBank {
        let t = Tensor::from_rows(rows).unwrap();
        FeatureBank::from_raw(&t, labels.to_vec()).unwrap()
    }

    #[test]
    fn identical_point_k1() {
        let train = bank(&[&[1., 0.], &[0., 1.], &[-1., 0.]], &[0, 1, 2]);
        let test = bank(&[&[0., 1.]], &[1]);
        assert_eq!(knn_predict(&train, &test, &KnnConfig::with_k(1)).unwrap(), vec![1]);
    }

    #[test]
    fn orthogonal_singletons() {
        let train = bank(&[&[1., 0., 0.], &[0., 1., 0.], &[0., 0., 1.]], &[0, 1, 2]);
        assert_eq!(knn_evaluate(&train, &train, &KnnConfig::with_k(1)).unwrap(), 1.0);
    }

    #[test]
    fn knn_errors() {
        let train = bank(&[&[1., 0.]], &[0]);
        assert!(knn_evaluate(&FeatureBank::empty(2), &train, &KnnConfig::with_k(1)).is_err());
        assert!(knn_evaluate(&train, &train, &KnnConfig::with_k(2)).is_err());
    }

    #[test]
    fn tie_goes_to_smaller_class() {
        let train = bank(&[&[1., 0.], &[1., 0.]], &[3, 1]);
        let test = bank(&[&[1., 0.]], &[1]);
        let cfg = KnnConfig {
            voting: Voting::Majority,
            ..KnnConfig::with_k(2)
        };
        assert_eq!(knn_predict(&train, &test, &cfg).unwrap(), vec![1]);
    }

    #[test]
    fn top_k_order() {
        assert_eq!(top_k(&[0.5, 0.9, 0.5, 0.1], 3), vec![1, 0, 2]);
        assert_eq!(top_k(&[0.5], 3), vec![0]);
        assert!(top_k(&[0.5], 0).is_empty());
    }

    #[test]
    fn probe_separable_two_class() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let a = 0.3 * (i as f64 / 40.0) - 0.15;
                if i % 2 == 0 {
                    vec![a.cos(), a.sin()]
                } else {
                    vec![-a.cos(), a.sin()]
                }
            })
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let labels: Vec<u32> = (0..40).map(|i| i % 2).collect();
        let b = bank(&refs, &labels);
        let cfg = ProbeConfig {
            epochs: 20,
            batch_size: 8,
            ..ProbeConfig::default()
        };
        assert_eq!(linear_probe(&b, &b, 2, &cfg, 0).unwrap(), 1.0);
        assert!(linear_probe(&b, &b, 1, &cfg, 0).is_err());
    }

    #[test]
    fn bank_rejects_non_unit_rows() {
        assert!(FeatureBank::new(2, vec![2.0, 0.0], vec![0]).is_err());
        assert!(FeatureBank::new(2, vec![1.0, 0.0], vec![0, 1]).is_err());
    }
}
