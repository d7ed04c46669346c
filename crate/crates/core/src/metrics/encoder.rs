use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{dot, sigmoid, AdamW, Feeds, Graph, GraphOptimizer, Tensor};
use crate::error::{Error, Result};
use crate::model::ArrayFile;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Standard deviation of Gaussian noise added to training inputs, so the
    /// encoder tolerates the residual noise of generated samples.
    pub input_noise: f64,
    pub holdout_fraction: f64,
    pub accuracy_floor: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 64,
            feature_dim: 32,
            steps: 1500,
            batch_size: 64,
            lr: 3e-3,
            input_noise: 0.15,
            holdout_fraction: 0.2,
            accuracy_floor: 0.95,
        }
    }
}

/// Small classifier whose penultimate activations serve as the embedding
/// space for every similarity metric. Frozen once trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEncoder {
    /// `[hidden, in]`, `[feature, hidden]`, `[classes, feature]` weights with biases.
    layers: Vec<(Tensor, Tensor)>,
    prototypes: Vec<Vec<f64>>,
    class_names: Vec<String>,
    holdout_accuracy: f64,
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn dense(w: &Tensor, b: &Tensor, x: &[f64], act: bool) -> Vec<f64> {
    (0..w.rows())
        .map(|o| {
            let v = dot(w.row(o), x) + b.data()[o];
            if act {
                silu(v)
            } else {
                v
            }
        })
        .collect()
}

impl FeatureEncoder {
    /// Trains on `(xs, labels)` with a held-out split, then freezes the
    /// network and records one prototype per class: the mean training-split
    /// feature of that class.
    pub fn train(
        xs: &[Vec<f64>],
        labels: &[usize],
        class_names: Vec<String>,
        config: &EncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n_classes = class_names.len();
        if n_classes < 2 {
            return Err(Error::invalid("feature encoder needs at least two classes"));
        }
        if xs.len() != labels.len() || xs.is_empty() {
            return Err(Error::invalid(format!("{} inputs for {} labels", xs.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        let dim = xs[0].len();
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(rng);
        let n_hold = ((xs.len() as f64) * config.holdout_fraction).round() as usize;
        let (hold, train) = order.split_at(n_hold);
        if train.is_empty() {
            return Err(Error::invalid("holdout fraction leaves no training data"));
        }

        let b = config.batch_size;
        let dims = [(dim, config.hidden), (config.hidden, config.feature_dim), (config.feature_dim, n_classes)];
        let mut g = Graph::new();
        g.index_input("labels", b);
        let x = g.input("x", vec![b, dim])?;
        let mut params = Vec::new();
        let mut h = x;
        for (l, &(i, o)) in dims.iter().enumerate() {
            let std = 1.0 / (i as f64).sqrt();
            let w = rng::normal_vec(rng, i * o).into_iter().map(|v| v * std).collect();
            let wn = g.param(&format!("enc.{l}.weight"), Tensor::matrix(o, i, w), true);
            let bn = g.param(&format!("enc.{l}.bias"), Tensor::zeros(vec![o]), true);
            params.push((wn, bn));
            let y = g.matmul_t(h, wn)?;
            let y = g.add_bias(y, bn)?;
            h = if l + 1 < dims.len() { g.silu(y) } else { y };
        }
        let loss = g.cross_entropy(h, "labels")?;
        let mut opt = GraphOptimizer::new(AdamW { weight_decay: 0.0, ..AdamW::with_lr(config.lr) }, &g);
        for step in 1..=config.steps {
            let idx: Vec<usize> = (0..b).map(|_| train[rng.random_range(0..train.len())]).collect();
            let mut data = Vec::with_capacity(b * dim);
            for &i in &idx {
                data.extend(xs[i].iter().map(|v| v + config.input_noise * rng::normal(rng)));
            }
            let feeds = Feeds::new()
                .tensor("x", Tensor::matrix(b, dim, data))
                .indices("labels", idx.iter().map(|&i| labels[i]).collect());
            g.forward(&feeds)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::Diverged { step });
            }
            let grads = g.backward(loss, None)?;
            opt.step(&mut g, &grads)?;
        }

        let layers = params.iter().map(|&(w, b)| (g.param_value(w).clone(), g.param_value(b).clone())).collect();
        let mut enc = FeatureEncoder { layers, prototypes: Vec::new(), class_names, holdout_accuracy: 1.0 };
        let mut sums = vec![vec![0.0; config.feature_dim]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for &i in train {
            let f = enc.encode(&xs[i])?;
            sums[labels[i]].iter_mut().zip(&f).for_each(|(s, v)| *s += v);
            counts[labels[i]] += 1;
        }
        enc.prototypes =
            sums.into_iter().zip(&counts).map(|(s, &c)| s.into_iter().map(|v| v / c.max(1) as f64).collect()).collect();
        if !hold.is_empty() {
            let correct = hold.iter().filter(|&&i| enc.classify(&xs[i]).ok() == Some(labels[i])).count();
            enc.holdout_accuracy = correct as f64 / hold.len() as f64;
        }
        if enc.holdout_accuracy < config.accuracy_floor {
            return Err(Error::EncoderAccuracy { accuracy: enc.holdout_accuracy, floor: config.accuracy_floor });
        }
        Ok(enc)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[1].0.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.layers[2].0.rows()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn holdout_accuracy(&self) -> f64 {
        self.holdout_accuracy
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                node: "feature encoder input".into(),
                detail: format!("length {} vs {}", x.len(), self.input_dim()),
            });
        }
        Ok(())
    }

    /// Penultimate-layer features.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let h = dense(&self.layers[0].0, &self.layers[0].1, x, true);
        Ok(dense(&self.layers[1].0, &self.layers[1].1, &h, true))
    }

    pub fn encode_all(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.encode(x)).collect()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.encode(x)?;
        Ok(dense(&self.layers[2].0, &self.layers[2].1, &f, false))
    }

    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        let l = self.logits(x)?;
        Ok((0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap_or(0))
    }

    /// SHA-256 over weights and prototypes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (w, b) in &self.layers {
            for v in w.data().iter().chain(b.data()) {
                h.update(v.to_le_bytes());
            }
        }
        for v in self.prototypes.iter().flatten() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_array_file(&self) -> ArrayFile {
        let mut f = ArrayFile::new();
        f.set_meta("kind", "encoder");
        f.set_meta("classes", self.class_names.join(","));
        f.set_meta("holdout_accuracy", self.holdout_accuracy);
        for (l, (w, b)) in self.layers.iter().enumerate() {
            f.push(&format!("enc.{l}.weight"), w.clone());
            f.push(&format!("enc.{l}.bias"), b.clone());
        }
        let k = self.feature_dim();
        f.push("prototypes", Tensor::matrix(self.prototypes.len(), k, self.prototypes.concat()));
        f
    }

    pub fn from_array_file(f: &ArrayFile) -> Result<Self> {
        if f.meta("kind")? != "encoder" {
            return Err(Error::Format("not a feature encoder file".into()));
        }
        let class_names: Vec<String> = f.meta("classes")?.split(',').map(str::to_string).collect();
        let mut layers = Vec::new();
        for l in 0..3 {
            layers.push((f.array(&format!("enc.{l}.weight"))?.clone(), f.array(&format!("enc.{l}.bias"))?.clone()));
        }
        let p = f.array("prototypes")?;
        let consistent = layers.windows(2).all(|w| w[0].0.rows() == w[1].0.cols())
            && layers.iter().all(|(w, b)| b.shape() == [w.rows()])
            && p.shape() == [class_names.len(), layers[1].0.rows()]
            && layers[2].0.rows() == class_names.len();
        if !consistent {
            return Err(Error::Format("feature encoder arrays have inconsistent shapes".into()));
        }
        let prototypes = (0..p.rows()).map(|i| p.row(i).to_vec()).collect();
        Ok(FeatureEncoder { layers, prototypes, class_names, holdout_accuracy: f.meta_parse("holdout_accuracy")? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_array_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_array_file(&ArrayFile::load(path)?)
    }
}
