//! Logistic-regression probes on frozen sentence vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EmbeddingSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// L2 penalty on the weights (not the biases).
    pub l2: f64,
    /// Seeds the small random initial weights.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.5,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Sorted label values; class `c` of the model is `classes[c]`.
    pub classes: Vec<u32>,
}

fn labels_of(set: &EmbeddingSet, what: &str) -> Result<Vec<u32>> {
    (0..set.len())
        .map(|i| {
            set.label(i)
                .ok_or_else(|| Error::Data(format!("{what} row {i} has no label")))
        })
        .collect()
}

struct Model {
    k: usize,
    /// `[d × k]`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Model {
    fn features(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.b.clone();
        for (i, xi) in x.iter().enumerate() {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += xi * self.w[i * self.k + c];
            }
        }
        z
    }

    fn predict(&self, row: &[f64]) -> usize {
        let z = self.logits(&self.features(row));
        let mut best = 0;
        for c in 1..self.k {
            if z[c] > z[best] {
                best = c;
            }
        }
        best
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Multinomial logistic regression fit by full-batch gradient descent on
/// standardized `train` vectors; reports accuracy on both sets.
pub fn linear_probe(train: &EmbeddingSet, test: &EmbeddingSet, config: &ProbeConfig) -> Result<ProbeResult> {
    if train.dim() != test.dim() {
        return Err(Error::dim("linear_probe", &[train.dim()], &[test.dim()]));
    }
    let train_labels = labels_of(train, "train")?;
    let test_labels = labels_of(test, "test")?;
    let mut classes = train_labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data("probe training data needs at least two classes".into()));
    }
    if let Some(l) = test_labels.iter().find(|l| classes.binary_search(l).is_err()) {
        return Err(Error::Data(format!("test class {l} never occurs in the training data")));
    }
    let class_of = |l: &u32| classes.binary_search(l).expect("known class");
    let (n, d, k) = (train.len(), train.dim(), classes.len());

    let mut mean = vec![0.0; d];
    for row in train.rows() {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f64);
    }
    let mut scale = vec![0.0; d];
    for row in train.rows() {
        scale
            .iter_mut()
            .zip(row.iter().zip(&mean))
            .for_each(|(s, (x, m))| *s += (x - m) * (x - m) / n as f64);
    }
    scale
        .iter_mut()
        .for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model {
        k,
        w: (0..d * k).map(|_| rng.random_range(-0.01..0.01)).collect(),
        b: vec![0.0; k],
        mean,
        scale,
    };
    let xs: Vec<Vec<f64>> = train.rows().map(|r| model.features(r)).collect();
    let ys: Vec<usize> = train_labels.iter().map(class_of).collect();
    for _ in 0..config.epochs {
        let mut gw = vec![0.0; d * k];
        let mut gb = vec![0.0; k];
        for (x, &y) in xs.iter().zip(&ys) {
            let mut p = model.logits(x);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for (i, xi) in x.iter().enumerate() {
                for c in 0..k {
                    gw[i * k + c] += xi * p[c];
                }
            }
            gb.iter_mut().zip(&p).for_each(|(g, pc)| *g += pc);
        }
        for (w, g) in model.w.iter_mut().zip(&gw) {
            *w -= config.lr * (g / n as f64 + config.l2 * *w);
        }
        for (b, g) in model.b.iter_mut().zip(&gb) {
            *b -= config.lr * g / n as f64;
        }
    }

    let accuracy = |set: &EmbeddingSet, labels: &[u32]| {
        let hits = set
            .rows()
            .zip(labels)
            .filter(|(r, l)| model.predict(r) == class_of(l))
            .count();
        hits as f64 / set.len() as f64
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(train, &train_labels),
        test_accuracy: accuracy(test, &test_labels),
        classes,
    })
}
