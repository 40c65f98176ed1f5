//! False-negative counting over teacher soft labels, and embedding export.
//!
//! A false negative is a queue entry whose class matches the positive's.
//! For each positive we look at the `k` queue entries its teacher
//! distribution ranks highest and count the label matches.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, AugmentPolicy};
use crate::data::{batches, LabeledImageDataset};
use crate::error::{Error, Result};
use crate::evalkit::{top_k, FeatureBank};
use crate::image::Size;
use crate::memory::{NegativeQueue, UNLABELED};
use crate::numcore::{Scalar, Tensor};
use crate::relation::{relation_distribution, similarity_logits, RelationDistribution, RelationSource};
use crate::rng::SeededRng;
use crate::trainer::TrainState;

/// Teacher distributions for one batch plus the labels needed to score them.
#[derive(Debug, Clone)]
pub struct SoftLabelSnapshot<T> {
    pub p21: RelationDistribution<T>,
    pub p31: RelationDistribution<T>,
    pub p42: RelationDistribution<T>,
    pub queue1_labels: Vec<u32>,
    pub queue2_labels: Vec<u32>,
    pub positive_labels: Vec<u32>,
}

impl<T: Scalar> SoftLabelSnapshot<T> {
    pub fn new(
        p21: RelationDistribution<T>,
        p31: RelationDistribution<T>,
        p42: RelationDistribution<T>,
        queue1_labels: Vec<u32>,
        queue2_labels: Vec<u32>,
        positive_labels: Vec<u32>,
    ) -> Result<Self> {
        for (p, labels) in [(&p21, &queue1_labels), (&p31, &queue1_labels), (&p42, &queue2_labels)] {
            check(p, labels, &positive_labels)?;
            for i in 0..positive_labels.len() {
                let s: f64 = p.probs.row(i).iter().map(|v| v.as_f64()).sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::param("snapshot", format!("row {i} of {:?} sums to {s}", p.source)));
                }
            }
        }
        Ok(SoftLabelSnapshot {
            p21,
            p31,
            p42,
            queue1_labels,
            queue2_labels,
            positive_labels,
        })
    }
}

fn check<T: Scalar>(p: &RelationDistribution<T>, queue_labels: &[u32], positives: &[u32]) -> Result<(usize, usize)> {
    let (n, q) = p.probs.dims2()?;
    if q != queue_labels.len() || n != positives.len() {
        return Err(Error::shape("false negatives", &[n, q], &[positives.len(), queue_labels.len()]));
    }
    Ok((n, q))
}

/// Per row, the top-`k` queue indices whose label matches that row's positive.
pub fn false_negative_sets<T: Scalar>(
    p: &RelationDistribution<T>,
    queue_labels: &[u32],
    positive_labels: &[u32],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let (n, q) = check(p, queue_labels, positive_labels)?;
    if k > q {
        return Err(Error::param("k", format!("k = {k} exceeds queue size {q}")));
    }
    Ok((0..n)
        .map(|i| {
            let row: Vec<f64> = p.probs.row(i).iter().map(|v| v.as_f64()).collect();
            top_k(&row, k)
                .into_iter()
                .filter(|&j| queue_labels[j] == positive_labels[i] && queue_labels[j] != UNLABELED)
                .collect()
        })
        .collect())
}

/// Mean number of false negatives among each row's top-`k` entries.
pub fn false_negatives_topk<T: Scalar>(
    p: &RelationDistribution<T>,
    queue_labels: &[u32],
    positive_labels: &[u32],
    k: usize,
) -> Result<f64> {
    let sets = false_negative_sets(p, queue_labels, positive_labels, k)?;
    Ok(mean_len(sets.iter().map(Vec::len)))
}

fn mean_len(counts: impl ExactSizeIterator<Item = usize>) -> f64 {
    let n = counts.len();
    if n == 0 {
        return 0.0;
    }
    counts.sum::<usize>() as f64 / n as f64
}

/// Mean counts for each soft label and for their union.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FalseNegativeCounts {
    pub p21: f64,
    pub p31: f64,
    pub p42: f64,
    pub all: f64,
}

/// Scores all three soft labels at once. Queue-1 hits from P²¹ and P³¹ are
/// merged by column index; queue-2 hits are always distinct from them.
pub fn count_snapshot<T: Scalar>(s: &SoftLabelSnapshot<T>, k: usize) -> Result<FalseNegativeCounts> {
    let a = false_negative_sets(&s.p21, &s.queue1_labels, &s.positive_labels, k)?;
    let b = false_negative_sets(&s.p31, &s.queue1_labels, &s.positive_labels, k)?;
    let c = false_negative_sets(&s.p42, &s.queue2_labels, &s.positive_labels, k)?;
    let union = a.iter().zip(&b).zip(&c).map(|((a, b), c)| {
        let q1: BTreeSet<usize> = a.iter().chain(b).copied().collect();
        q1.len() + c.len()
    });
    Ok(FalseNegativeCounts {
        p21: mean_len(a.iter().map(Vec::len)),
        p31: mean_len(b.iter().map(Vec::len)),
        p42: mean_len(c.iter().map(Vec::len)),
        all: mean_len(union.collect::<Vec<_>>().into_iter()),
    })
}

/// Mean size of the union of the three false-negative sets.
pub fn false_negatives_union<T: Scalar>(s: &SoftLabelSnapshot<T>, k: usize) -> Result<f64> {
    Ok(count_snapshot(s, k)?.all)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct FalseNegativeReport {
    pub step: u64,
    pub fn_top5_P21: f64,
    pub fn_top5_P31: f64,
    pub fn_top5_P42: f64,
    pub fn_top5_all: f64,
}

/// Refills label-carrying copies of both queues with teacher embeddings of
/// weak views (no parameter updates), then averages the counts over one
/// pass of batches taken once the queues hold only labelled entries.
pub fn replay_false_negatives<T: Scalar>(state: &TrainState<T>, dataset: &LabeledImageDataset, k: usize) -> Result<FalseNegativeReport> {
    let p = &state.config.pretraining;
    let n = p.batch_size;
    let per_epoch = dataset.len() / n;
    if per_epoch == 0 {
        return Err(Error::param("dataset", format!("{} images cannot fill a batch of {n}", dataset.len())));
    }
    let (_, h, w) = state.config.dataset.dims();
    let weak = AugmentPolicy::weak(Size::new(h, w));
    let tau_t = T::of(p.tau_t);
    let relabel = |q: &NegativeQueue<T>| {
        let (slots, head, _) = q.raw_parts();
        NegativeQueue::from_raw_parts(q.capacity(), q.dim(), slots.to_vec(), head, Some(vec![UNLABELED; q.capacity()]))
    };
    let mut q1 = relabel(&state.queue1)?;
    let mut q2 = relabel(&state.queue2)?;
    let warmup = p.queue_size.div_ceil(n);
    let root = SeededRng::new(p.seed).named("analysis");

    let mut totals = [0f64; 4];
    let mut rows = 0usize;
    let mut t = 0usize;
    let mut epoch = 0u64;
    while t < warmup + per_epoch {
        for idx in batches(dataset.len(), n, root.seed ^ 0xA5A5, epoch) {
            if t >= warmup + per_epoch {
                break;
            }
            let batch = dataset.images.select(&idx);
            let labels = dataset.labels_of(&idx);
            let stream = root.substream(t as u64);
            let view = |name: &str| apply_policy(&batch, &weak, &stream.named(name));
            let z2 = state.teacher_embedding(&state.nets.teacher1, &view("x2")?)?;
            let z3 = state.teacher_embedding(&state.nets.teacher1, &view("x3")?)?;
            let z4 = state.teacher_embedding(&state.nets.teacher2, &view("x4")?)?;
            if t >= warmup {
                let m1 = q1.as_matrix();
                let m2 = q2.as_matrix();
                let dist = |z: &Tensor<T>, m: &Tensor<T>, src| relation_distribution(&similarity_logits(z, m)?, tau_t, src);
                let snap = SoftLabelSnapshot::new(
                    dist(&z2, &m1, RelationSource::P21)?,
                    dist(&z3, &m1, RelationSource::P31)?,
                    dist(&z4, &m2, RelationSource::P42)?,
                    q1.labels().expect("labelled"),
                    q2.labels().expect("labelled"),
                    labels.clone(),
                )?;
                let c = count_snapshot(&snap, k)?;
                for (acc, v) in totals.iter_mut().zip([c.p21, c.p31, c.p42, c.all]) {
                    *acc += v * idx.len() as f64;
                }
                rows += idx.len();
            }
            q1.enqueue_dequeue(&z2, Some(&labels))?;
            q2.enqueue_dequeue(&z4, Some(&labels))?;
            t += 1;
        }
        epoch += 1;
    }
    let mean = |v: f64| v / rows as f64;
    Ok(FalseNegativeReport {
        step: state.step,
        fn_top5_P21: mean(totals[0]),
        fn_top5_P31: mean(totals[1]),
        fn_top5_P42: mean(totals[2]),
        fn_top5_all: mean(totals[3]),
    })
}

/// CSV with header `label,f0,...,f{D-1}` and 9 significant digits.
pub fn export_embeddings(bank: &FeatureBank, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..bank.dim()).map(|j| format!("f{j}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for i in 0..bank.len() {
        write!(out, "{}", bank.labels()[i]).map_err(io)?;
        for v in bank.row(i) {
            write!(out, ",{v:.8e}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Parses a file written by [`export_embeddings`] into `(labels, rows)`.
pub fn read_embeddings(path: &Path) -> Result<(Vec<u32>, Vec<Vec<f64>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, what: &str| Error::config(format!("{}:{line}", path.display()), what.to_string());
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 {
            if !line.starts_with("label") {
                return Err(bad(1, "missing header"));
            }
            continue;
        }
        let mut fields = line.split(',');
        let label = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad(n + 1, "bad label"))?;
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad(n + 1, "bad value")))
            .collect::<Result<Vec<_>>>()?;
        labels.push(label);
        rows.push(row);
    }
    Ok((labels, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(rows: &[&[f64]], source: RelationSource) -> RelationDistribution<f64> {
        RelationDistribution {
            probs: Tensor::from_rows(rows).unwrap(),
            source,
        }
    }

    #[test]
    fn no_matching_labels() {
        let p = dist(&[&[0.5, 0.3, 0.2]], RelationSource::P21);
        assert_eq!(false_negatives_topk(&p, &[1, 2, 3], &[0], 2).unwrap(), 0.0);
    }

    #[test]
    fn saturation() {
        let p = dist(&[&[0.5, 0.3, 0.2]], RelationSource::P21);
        assert_eq!(false_negatives_topk(&p, &[4, 4, 4], &[4], 3).unwrap(), 3.0);
        assert!(false_negatives_topk(&p, &[4, 4, 4], &[4], 4).is_err());
        assert_eq!(false_negatives_topk(&p, &[4, 4, 4], &[4], 0).unwrap(), 0.0);
    }

    #[test]
    fn hand_enumerated_instance() {
        // Row 0 ranks 1,3,0 (k=3) -> labels 1,0,0 vs positive 0 -> 2 hits.
        // Row 1 ties at 0.25 between cols 2 and 4; the lower index ranks first.
        // Ranks 5,2,4 -> labels 1,1,1 vs positive 1 -> 3 hits.
        let p = dist(
            &[&[0.2, 0.3, 0.05, 0.25, 0.1, 0.1], &[0.05, 0.05, 0.25, 0.1, 0.25, 0.3]],
            RelationSource::P21,
        );
        let labels = [0, 1, 1, 0, 1, 1];
        let sets = false_negative_sets(&p, &labels, &[0, 1], 3).unwrap();
        assert_eq!(sets, vec![vec![3, 0], vec![5, 2, 4]]);
        assert_eq!(false_negatives_topk(&p, &labels, &[0, 1], 3).unwrap(), 2.5);
    }

    #[test]
    fn union_idempotent_and_disjoint() {
        let p = dist(&[&[0.4, 0.3, 0.2, 0.1]], RelationSource::P21);
        let snap = SoftLabelSnapshot::new(
            p.clone(),
            p.clone(),
            p.clone(),
            vec![0, 0, 1, 0],
            vec![0, 0, 1, 0],
            vec![0],
        )
        .unwrap();
        let c = count_snapshot(&snap, 2).unwrap();
        assert_eq!((c.p21, c.p31), (2.0, 2.0));
        // Queue-2 hits count separately even with identical distributions.
        assert_eq!(c.all, 4.0);

        let p31 = dist(&[&[0.1, 0.2, 0.3, 0.4]], RelationSource::P31);
        let snap = SoftLabelSnapshot::new(p.clone(), p31, p.clone(), vec![0; 4], vec![1; 4], vec![0]).unwrap();
        let c = count_snapshot(&snap, 2).unwrap();
        assert_eq!((c.p21, c.p31, c.p42, c.all), (2.0, 2.0, 0.0, 4.0));
    }

    #[test]
    fn snapshot_validation() {
        let p = dist(&[&[0.5, 0.4]], RelationSource::P21);
        assert!(SoftLabelSnapshot::new(p.clone(), p.clone(), p, vec![0, 0], vec![0, 0], vec![0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let t = Tensor::from_rows(&[[0.123456789123, 0.9], [-0.5, 0.1]]).unwrap();
        let bank = FeatureBank::from_raw(&t, vec![3, 1]).unwrap();
        export_embeddings(&bank, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("label,f0,f1\n"));
        let (labels, rows) = read_embeddings(&path).unwrap();
        assert_eq!(labels, vec![3, 1]);
        for (i, r) in rows.iter().enumerate() {
            for (a, b) in r.iter().zip(bank.row(i)) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        export_embeddings(&FeatureBank::empty(3), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "label,f0,f1,f2\n");
    }
}
