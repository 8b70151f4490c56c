//! Triplet loss, semi-hard negative mining, pair labelling, and the training
//! loops for the contrastive encoder and the supervised classification head.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::signal_tensor;
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Gradients, Network, Optimizer, OptimizerKind, Tensor};

pub const DEFAULT_MARGIN: f64 = 1.0;
pub const DEFAULT_BUCKET_DAYS: u32 = 30;
pub const SECONDS_PER_DAY: u64 = 86_400;

/// Indices into a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Opaque group identifier; only equality is meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairLabel([u64; 2]);

impl PairLabel {
    pub fn category(c: usize) -> Self {
        PairLabel([u64::MAX, c as u64])
    }

    pub fn temporal(wheel_id: u32, visit_index: u32, bucket: u64) -> Self {
        PairLabel([(wheel_id as u64) << 32 | visit_index as u64, bucket])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Members drawn per group when assembling a batch.
    pub samples_per_group: usize,
    /// Defaults to one pass over the dataset's size.
    pub batches_per_epoch: Option<usize>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            epochs: 50,
            batch_size: 48,
            samples_per_group: 4,
            batches_per_epoch: None,
            optimizer: OptimizerKind::Adam { learning_rate: 1e-3 },
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if self.samples_per_group < 2 || self.samples_per_group > self.batch_size {
            return Err(Error::Config(format!(
                "samples per group must lie in [2, batch size], got {}",
                self.samples_per_group
            )));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::Config("batches per epoch must be >= 1".into()));
        }
        Optimizer::<f32>::new(self.optimizer).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of mined triplets with positive loss; 1 for classification losses.
    pub active_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub epochs: Vec<EpochStats>,
}

impl LossHistory {
    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,active_fraction\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{}", e.epoch, e.mean_loss, e.active_fraction).unwrap();
        }
        out
    }
}

/// Euclidean distance accumulated in index order.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

/// `max(0, |a-p| - |a-n| + margin)`; the subgradient is zero on the hinge and
/// for coincident points.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<TripletLoss> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::Dimension(format!(
            "triplet features have dimensions {}, {}, {}",
            anchor.len(),
            positive.len(),
            negative.len()
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::Config(format!("margin must be positive, got {margin}")));
    }
    let d = anchor.len();
    let d_ap = distance(anchor, positive);
    let d_an = distance(anchor, negative);
    let loss = (d_ap - d_an + margin).max(0.0);
    let mut out = TripletLoss {
        loss,
        grad_anchor: vec![0.0; d],
        grad_positive: vec![0.0; d],
        grad_negative: vec![0.0; d],
    };
    if loss > 0.0 {
        for i in 0..d {
            let up = if d_ap > 0.0 { (anchor[i] - positive[i]) / d_ap } else { 0.0 };
            let un = if d_an > 0.0 { (anchor[i] - negative[i]) / d_an } else { 0.0 };
            out.grad_anchor[i] = up - un;
            out.grad_positive[i] = -up;
            out.grad_negative[i] = un;
        }
    }
    Ok(out)
}

/// For every ordered anchor-positive pair, the negative with the smallest
/// distance inside `(d_ap, d_ap + margin)`, or else the closest negative.
/// Ties resolve to the lowest index. Output is ordered by (anchor, positive).
pub fn mine_semi_hard(features: &[Vec<f64>], labels: &[PairLabel], margin: f64) -> Result<Vec<Triplet>> {
    if features.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let n = features.len();
    let dist: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| features.iter().map(|f| distance(&features[i], f)).collect())
        .collect();
    let per_anchor: Vec<Vec<Triplet>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let row = &dist[a];
            let mut found = Vec::new();
            for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
                let d_ap = row[p];
                let mut semi: Option<usize> = None;
                let mut closest: Option<usize> = None;
                for neg in (0..n).filter(|&k| labels[k] != labels[a]) {
                    let d = row[neg];
                    if closest.is_none_or(|c| d < row[c]) {
                        closest = Some(neg);
                    }
                    if d > d_ap && d < d_ap + margin && semi.is_none_or(|s| d < row[s]) {
                        semi = Some(neg);
                    }
                }
                if let Some(negative) = semi.or(closest) {
                    found.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative,
                    });
                }
            }
            found
        })
        .collect();
    Ok(per_anchor.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalLabels {
    pub labels: Vec<PairLabel>,
    /// Measurements recorded before the first visit. They get visit index 0
    /// with days counted from the first measurement.
    pub before_first_visit: usize,
}

/// Groups measurements by `(wheel, visit index, days since visit / bucket)`.
/// `visits` are workshop-visit timestamps in ascending order.
pub fn temporal_pair_labels(wheel_id: u32, timestamps: &[u64], visits: &[u64], bucket_days: u32) -> Result<TemporalLabels> {
    if bucket_days == 0 {
        return Err(Error::Config("bucket length must be >= 1 day".into()));
    }
    if timestamps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Ordering(format!("timeline of wheel {wheel_id} is not time-sorted")));
    }
    if visits.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Ordering(format!("workshop visits of wheel {wheel_id} are not sorted")));
    }
    let mut before = 0;
    let first = timestamps.first().copied().unwrap_or(0);
    let labels = timestamps
        .iter()
        .map(|&t| {
            let idx = visits.partition_point(|&v| v <= t);
            if idx == 0 {
                before += 1;
                return PairLabel::temporal(wheel_id, 0, (t - first) / SECONDS_PER_DAY / bucket_days as u64);
            }
            let days = (t - visits[idx - 1]) / SECONDS_PER_DAY;
            PairLabel::temporal(wheel_id, (idx - 1) as u32, days / bucket_days as u64)
        })
        .collect();
    if before > 0 {
        log::warn!("wheel {wheel_id}: {before} measurements precede the first workshop visit");
    }
    Ok(TemporalLabels {
        labels,
        before_first_visit: before,
    })
}

/// Groups with at least two members, keyed in label order for determinism.
fn eligible_groups(labels: &[PairLabel]) -> (Vec<Vec<usize>>, usize) {
    let mut groups: BTreeMap<PairLabel, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(*l).or_default().push(i);
    }
    let total = groups.len();
    (groups.into_values().filter(|g| g.len() >= 2).collect(), total)
}

/// P groups times K members, drawn without replacement within the batch.
fn sample_batch(groups: &[Vec<usize>], spec: &TrainSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let p = (spec.batch_size / spec.samples_per_group).max(2).min(groups.len());
    let mut batch = Vec::with_capacity(spec.batch_size);
    for g in rand::seq::index::sample(rng, groups.len(), p).into_iter() {
        let members = &groups[g];
        let k = spec.samples_per_group.min(members.len());
        batch.extend(rand::seq::index::sample(rng, members.len(), k).into_iter().map(|i| members[i]));
    }
    batch
}

fn check_signals<S: AsRef<[f32]>>(encoder: &Network, signals: &[S]) -> Result<()> {
    let expected: usize = encoder.input_shape().iter().product();
    if let Some((i, s)) = signals.iter().enumerate().find(|(_, s)| s.as_ref().len() != expected) {
        return Err(Error::Dimension(format!(
            "signal {i} has length {}, encoder expects {expected}",
            s.as_ref().len()
        )));
    }
    Ok(())
}

/// Sums per-sample gradients in batch order.
fn apply_batch_gradients(net: &mut Network, grads: &[Gradients], scale: f32) -> Result<()> {
    net.zero_grad();
    for g in grads {
        net.accumulate(g, scale)?;
    }
    Ok(())
}

/// Trains `encoder` with the semi-hard triplet loss on PK-sampled batches.
pub fn train_contrastive<S: AsRef<[f32]> + Sync>(
    encoder: &mut Network,
    signals: &[S],
    labels: &[PairLabel],
    spec: &TrainSpec,
) -> Result<LossHistory> {
    spec.validate()?;
    if signals.is_empty() {
        return Err(Error::Data("contrastive training on an empty dataset".into()));
    }
    if signals.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} signals but {} labels",
            signals.len(),
            labels.len()
        )));
    }
    check_signals(encoder, signals)?;
    let (groups, total_groups) = eligible_groups(labels);
    if groups.is_empty() || total_groups < 2 {
        return Err(Error::Config(format!(
            "no valid triplet: {total_groups} groups, {} with two or more members",
            groups.len()
        )));
    }
    let mut history = LossHistory::default();
    if spec.epochs == 0 {
        return Ok(history);
    }

    let mut optimizer = Optimizer::new(spec.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let batches = spec
        .batches_per_epoch
        .unwrap_or_else(|| signals.len().div_ceil(spec.batch_size));

    for epoch in 0..spec.epochs {
        let (mut loss_sum, mut used, mut active, mut mined) = (0.0, 0usize, 0usize, 0usize);
        for _ in 0..batches {
            let batch = sample_batch(&groups, spec, &mut rng);
            let batch_labels: Vec<PairLabel> = batch.iter().map(|&i| labels[i]).collect();
            let net = &*encoder;
            let passes = batch
                .par_iter()
                .map(|&i| net.forward_trace(&signal_tensor(net, signals[i].as_ref())?))
                .collect::<Result<Vec<_>>>()?;
            let feats: Vec<Vec<f64>> = passes
                .iter()
                .map(|(y, _)| y.data().iter().map(|&v| v as f64).collect())
                .collect();
            let triplets = mine_semi_hard(&feats, &batch_labels, spec.margin)?;
            if triplets.is_empty() {
                continue;
            }
            let dim = feats[0].len();
            let mut upstream = vec![vec![0.0f64; dim]; batch.len()];
            let mut batch_loss = 0.0;
            for t in &triplets {
                let l = triplet_loss(&feats[t.anchor], &feats[t.positive], &feats[t.negative], spec.margin)?;
                if l.loss > 0.0 {
                    active += 1;
                    batch_loss += l.loss;
                    for d in 0..dim {
                        upstream[t.anchor][d] += l.grad_anchor[d];
                        upstream[t.positive][d] += l.grad_positive[d];
                        upstream[t.negative][d] += l.grad_negative[d];
                    }
                }
            }
            mined += triplets.len();
            loss_sum += batch_loss / triplets.len() as f64;
            used += 1;
            let touched: Vec<usize> = (0..batch.len()).filter(|&i| upstream[i].iter().any(|&g| g != 0.0)).collect();
            if touched.is_empty() {
                continue;
            }
            let grads = touched
                .par_iter()
                .map(|&i| {
                    let up: Vec<f32> = upstream[i].iter().map(|&g| g as f32).collect();
                    net.backward(&passes[i].1, &up)
                })
                .collect::<Result<Vec<_>>>()?;
            apply_batch_gradients(encoder, &grads, 1.0 / triplets.len() as f32)?;
            optimizer.step(encoder)?;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: if used > 0 { loss_sum / used as f64 } else { 0.0 },
            active_fraction: if mined > 0 { active as f64 / mined as f64 } else { 0.0 },
        };
        log::debug!("contrastive epoch {epoch}: loss {:.5} active {:.3}", stats.mean_loss, stats.active_fraction);
        history.epochs.push(stats);
    }
    encoder.zero_grad();
    Ok(history)
}

fn check_categories(labels: &[usize], categories: usize) -> Result<()> {
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= categories) {
        return Err(Error::Data(format!(
            "label {l} of sample {i} is outside the {categories} categories"
        )));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Config("classification needs at least two categories in the dataset".into()));
    }
    Ok(())
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Second phase of the supervised model: cross-entropy on `head` over the
/// features of the frozen `encoder`.
pub fn train_supervised_classifier<S: AsRef<[f32]> + Sync>(
    encoder: &Network,
    head: &mut Network,
    signals: &[S],
    labels: &[usize],
    spec: &TrainSpec,
) -> Result<LossHistory> {
    spec.validate()?;
    if signals.is_empty() || signals.len() != labels.len() {
        return Err(Error::Data(format!(
            "classifier training needs matching non-empty signals and labels ({} vs {})",
            signals.len(),
            labels.len()
        )));
    }
    check_signals(encoder, signals)?;
    check_categories(labels, head.output_len())?;
    let features = signals
        .par_iter()
        .map(|s| encoder.forward(&signal_tensor(encoder, s.as_ref())?))
        .collect::<Result<Vec<Tensor>>>()?;

    let mut optimizer = Optimizer::new(spec.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut history = LossHistory::default();
    for epoch in 0..spec.epochs {
        let mut loss_sum = 0.0;
        let batches = shuffled_batches(signals.len(), spec.batch_size, &mut rng);
        for batch in &batches {
            let net = &*head;
            let results = batch
                .iter()
                .map(|&i| {
                    let (logits, trace) = net.forward_trace(&features[i])?;
                    let (loss, grad) = softmax_cross_entropy(logits.data(), labels[i])?;
                    Ok((loss as f64, net.backward(&trace, &grad)?))
                })
                .collect::<Result<Vec<_>>>()?;
            loss_sum += results.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64;
            let grads: Vec<Gradients> = results.into_iter().map(|r| r.1).collect();
            apply_batch_gradients(head, &grads, 1.0 / batch.len() as f32)?;
            optimizer.step(head)?;
        }
        history.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches.len() as f64,
            active_fraction: 1.0,
        });
    }
    head.zero_grad();
    Ok(history)
}

/// Comparison model: encoder and head trained jointly with cross-entropy.
pub fn train_cross_entropy<S: AsRef<[f32]> + Sync>(
    encoder: &mut Network,
    head: &mut Network,
    signals: &[S],
    labels: &[usize],
    spec: &TrainSpec,
) -> Result<LossHistory> {
    spec.validate()?;
    if signals.is_empty() || signals.len() != labels.len() {
        return Err(Error::Data(format!(
            "classifier training needs matching non-empty signals and labels ({} vs {})",
            signals.len(),
            labels.len()
        )));
    }
    check_signals(encoder, signals)?;
    check_categories(labels, head.output_len())?;
    let mut enc_opt = Optimizer::new(spec.optimizer)?;
    let mut head_opt = Optimizer::new(spec.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut history = LossHistory::default();
    for epoch in 0..spec.epochs {
        let mut loss_sum = 0.0;
        let batches = shuffled_batches(signals.len(), spec.batch_size, &mut rng);
        for batch in &batches {
            let (enc, hd) = (&*encoder, &*head);
            let results = batch
                .par_iter()
                .map(|&i| {
                    let (feature, enc_trace) = enc.forward_trace(&signal_tensor(enc, signals[i].as_ref())?)?;
                    let (logits, head_trace) = hd.forward_trace(&feature)?;
                    let (loss, grad) = softmax_cross_entropy(logits.data(), labels[i])?;
                    let head_grads = hd.backward(&head_trace, &grad)?;
                    let enc_grads = enc.backward(&enc_trace, &head_grads.input)?;
                    Ok((loss as f64, enc_grads, head_grads))
                })
                .collect::<Result<Vec<_>>>()?;
            loss_sum += results.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64;
            let (enc_grads, head_grads): (Vec<Gradients>, Vec<Gradients>) =
                results.into_iter().map(|(_, e, h)| (e, h)).unzip();
            let scale = 1.0 / batch.len() as f32;
            apply_batch_gradients(encoder, &enc_grads, scale)?;
            apply_batch_gradients(head, &head_grads, scale)?;
            enc_opt.step(encoder)?;
            head_opt.step(head)?;
        }
        history.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches.len() as f64,
            active_fraction: 1.0,
        });
    }
    encoder.zero_grad();
    head.zero_grad();
    Ok(history)
}
