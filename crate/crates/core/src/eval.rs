//! Linear evaluation: frozen-encoder features, a softmax probe trained with
//! Adam, accuracy and confusion reporting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{PcrpError, Result};
use crate::numcore::{Graph, Tensor};
use crate::seed::{self, PROBE, SPLIT};
use crate::trainer::{adam_update, encode_dataset, AdamConfig, AdamState, Precision};

/// Row-major `N×dim` feature matrix with one label per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub dim: usize,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            dim: self.dim,
            data: indices.iter().flat_map(|&i| self.row(i).to_vec()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }
}

/// Final-step encodings of every labeled sequence under the checkpoint's
/// encoder. Sequences are length-fixed to the checkpoint's `t_fixed`.
pub fn extract_encodings(ds: &Dataset, ckpt: &Checkpoint) -> Result<Features> {
    let labels = ds.labels()?;
    let cfg = ckpt.config()?;
    let ds = ds.fix_length(cfg.t_fixed)?;
    let data = match cfg.precision {
        Precision::F32 => encode_dataset(&ds, &ckpt.models::<f32>()?.0)?,
        Precision::F64 => encode_dataset(&ds, &ckpt.models::<f64>()?.0)?,
    };
    Ok(Features {
        dim: cfg.hidden_dim,
        data,
        labels,
        ids: ds.sequences.iter().map(|s| s.id.clone()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 50,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on frozen features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub classes: usize,
    pub dim: usize,
    /// `classes×dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeModel {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks(self.dim)
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect()
    }

    /// Argmax class, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        best
    }
}

/// Full-batch Adam on mean cross-entropy. Class count is `max label + 1`.
pub fn probe_train(features: &Features, cfg: &ProbeConfig) -> Result<ProbeModel> {
    let distinct: std::collections::BTreeSet<_> = features.labels.iter().collect();
    if distinct.len() < 2 {
        return Err(PcrpError::Param(format!(
            "linear probe needs at least two classes, found {}",
            distinct.len()
        )));
    }
    let (n, dim) = (features.len(), features.dim);
    let classes = features.labels.iter().max().unwrap() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, PROBE, 0));
    let bound = 1.0 / (dim as f64).sqrt();
    let mut w = Tensor::matrix(dim, classes, (0..dim * classes).map(|_| rng.gen_range(-bound..bound)).collect())?;
    let mut b = Tensor::vector(vec![0.0; classes]);
    let x = Tensor::matrix(n, dim, features.data.clone())?;
    let rows: Vec<Vec<usize>> = features
        .labels
        .iter()
        .map(|&y| std::iter::once(y).chain((0..classes).filter(|&c| c != y)).collect())
        .collect();
    let mut state = AdamState::new(&[&w, &b]);
    let adam = AdamConfig::with_lr(cfg.lr);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param(w.clone());
        let bv = g.param(b.clone());
        let xw = g.matmul(xv, wv)?;
        let logits = g.add(xw, bv)?;
        let nll = g.subset_nll(logits, rows.clone())?;
        let loss = g.mean(nll);
        let grads = g.backward(loss, &[wv, bv])?;
        adam_update(&mut [&mut w, &mut b], &grads, &mut state, &adam)?;
    }
    let weight = (0..classes)
        .flat_map(|c| (0..dim).map(move |d| (c, d)))
        .map(|(c, d)| w.data()[d * classes + c])
        .collect();
    Ok(ProbeModel {
        classes,
        dim,
        weight,
        bias: b.into_data(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    /// Recall per class; 0 for classes absent from the test split.
    pub per_class_accuracy: Vec<f64>,
}

impl EvalReport {
    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(PcrpError::Shape {
                op: "eval",
                left: vec![truth.len()],
                right: vec![predicted.len()],
            });
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(PcrpError::Param(format!("class index out of range 0..{classes}")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[c] as f64 / total as f64
                }
            })
            .collect();
        Ok(Self {
            accuracy: if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 },
            confusion,
            per_class_accuracy,
        })
    }

    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut out = (0..n).map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        out.push('\n');
        for row in &self.confusion {
            out.push_str(&row.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| PcrpError::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PcrpError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_confusion_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.confusion_csv()).map_err(|e| PcrpError::io(path, e))
    }
}

pub fn probe_eval(model: &ProbeModel, features: &Features) -> Result<EvalReport> {
    if features.dim != model.dim {
        return Err(PcrpError::Shape {
            op: "probe_eval",
            left: vec![features.dim],
            right: vec![model.dim],
        });
    }
    let predicted: Vec<usize> = (0..features.len()).map(|i| model.predict(features.row(i))).collect();
    EvalReport::from_predictions(model.classes, &features.labels, &predicted)
}

/// Per-class shuffled split; each class contributes `round(fraction·n_c)`
/// samples to the first set. Both index lists are sorted.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(PcrpError::Param(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, SPLIT, 0));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let cut = (train_fraction * members.len() as f64).round() as usize;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let pairs = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ra: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| pairs(n)).sum();
    let sa: f64 = ra.values().map(|&n| pairs(n)).sum();
    let sb: f64 = rb.values().map(|&n| pairs(n)).sum();
    let total = pairs(a.len());
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::trainer::{TrainConfig, Trainer};
    use proptest::prelude::*;

    fn features(data: Vec<f64>, dim: usize, labels: Vec<usize>) -> Features {
        let ids = (0..labels.len()).map(|i| i.to_string()).collect();
        Features { dim, data, labels, ids }
    }

    fn separable() -> Features {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let t = i as f64 / 20.0;
            data.extend_from_slice(&[1.0 + t, 0.3 - t]);
            labels.push(0);
            data.extend_from_slice(&[-1.0 - t, 0.2 + t]);
            labels.push(1);
        }
        features(data, 2, labels)
    }

    #[test]
    fn separable_set_is_learned_exactly() {
        let f = separable();
        let m = probe_train(&f, &ProbeConfig { epochs: 100, ..ProbeConfig::default() }).unwrap();
        let r = probe_eval(&m, &f).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![20, 0], vec![0, 20]]);
    }

    #[test]
    fn single_class_is_rejected() {
        let f = features(vec![1.0, 2.0], 1, vec![1, 1]);
        assert!(matches!(probe_train(&f, &ProbeConfig::default()), Err(PcrpError::Param(_))));
    }

    #[test]
    fn probe_is_deterministic() {
        let f = separable();
        let cfg = ProbeConfig { epochs: 5, seed: 3, ..ProbeConfig::default() };
        assert_eq!(probe_train(&f, &cfg).unwrap(), probe_train(&f, &cfg).unwrap());
    }

    #[test]
    fn zero_epochs_keeps_zero_bias() {
        let m = probe_train(&separable(), &ProbeConfig { epochs: 0, ..ProbeConfig::default() }).unwrap();
        assert_eq!(m.bias, vec![0.0, 0.0]);
        assert_eq!(m.weight.len(), 4);
    }

    #[test]
    fn ties_pick_lowest_class() {
        let m = ProbeModel {
            classes: 3,
            dim: 1,
            weight: vec![0.0, 1.0, 1.0],
            bias: vec![0.0; 3],
        };
        assert_eq!(m.predict(&[2.0]), 1);
        assert_eq!(m.predict(&[0.0]), 0);
    }

    #[test]
    fn one_class_predictions_on_balanced_data() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let r = EvalReport::from_predictions(3, &truth, &[0; 6]).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class_accuracy, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.confusion_csv(), "0,1,2\n2,0,0\n2,0,0\n2,0,0\n");
    }

    #[test]
    fn report_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalReport::from_predictions(2, &[0, 1, 1], &[0, 1, 0]).unwrap();
        let p = dir.path().join("r.json");
        r.save_json(&p).unwrap();
        assert_eq!(EvalReport::load_json(&p).unwrap(), r);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let (tr, te) = stratified_split(&labels, 0.7, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (21, 9));
        for c in 0..3 {
            assert_eq!(tr.iter().filter(|&&i| labels[i] == c).count(), 7);
        }
        let mut all = [tr.clone(), te].concat();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(stratified_split(&labels, 0.7, 1).unwrap().0, tr);
    }

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        // Two of four pairs agree; value checked against the contingency formula by hand.
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!((v - (-0.5)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn extraction_is_deterministic_and_requires_labels() {
        let ds = synth_generate(&SynthSpec {
            n_per_class: 3,
            classes: 2,
            frames: 6,
            joints: 4,
            noise_sigma: 0.0,
            seed: 1,
        })
        .unwrap();
        let cfg = TrainConfig { t_fixed: 6, hidden_dim: 5, ..TrainConfig::default() };
        let ck = Trainer::<f32>::new(cfg, 12).unwrap().checkpoint().unwrap();
        let a = extract_encodings(&ds, &ck).unwrap();
        assert_eq!((a.len(), a.dim), (6, 5));
        assert_eq!(a, extract_encodings(&ds, &ck).unwrap());
        assert_eq!(a.ids, ds.sequences.iter().map(|s| s.id.clone()).collect::<Vec<_>>());
        let mut unlabeled = ds.clone();
        unlabeled.sequences[2].label = None;
        assert!(matches!(extract_encodings(&unlabeled, &ck), Err(PcrpError::Unlabeled(_))));
    }

    proptest! {
        #[test]
        fn accuracy_is_trace_over_total(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = EvalReport::from_predictions(4, &t, &p).unwrap();
            let trace: usize = (0..4).map(|c| r.confusion[c][c]).sum();
            let total: usize = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total, t.len());
            prop_assert!((r.accuracy - trace as f64 / total as f64).abs() < 1e-15);
            for c in 0..4 {
                prop_assert_eq!(r.confusion[c].iter().sum::<usize>(), t.iter().filter(|&&x| x == c).count());
            }
        }

        #[test]
        fn accuracy_invariant_to_label_permutation(shift in 1usize..3) {
            let f = separable();
            let mut g = f.clone();
            // Relabel {0,1} → {shift, (shift+1)%3} in a 3-class space and back.
            g.labels = f.labels.iter().map(|&y| (y + shift) % 3).collect();
            let cfg = ProbeConfig { epochs: 60, ..ProbeConfig::default() };
            let a = probe_eval(&probe_train(&f, &cfg).unwrap(), &f).unwrap().accuracy;
            let b = probe_eval(&probe_train(&g, &cfg).unwrap(), &g).unwrap().accuracy;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ari_is_one_for_relabelings(labels in prop::collection::vec(0usize..4, 2..40), perm in Just([2usize, 0, 3, 1])) {
            let relabeled: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
            prop_assert!((adjusted_rand_index(&labels, &relabeled) - 1.0).abs() < 1e-12);
        }
    }
}
