//! The trainable model: a shared backbone (one affine layer plus rectifier)
//! producing embeddings, and a per-client linear identity classifier.
//!
//! Forward, backward, and the SGD update are written out by hand so the
//! gradients can be checked against finite differences exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamVector, Rng};

/// Shared feature extractor. `embed = relu(x * w1 + b1)`.
///
/// Weights are row-major: `w1[f * hidden_dim + h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
}

impl Backbone {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        let scale = (2.0 / input_dim as f64).sqrt();
        let w1 = (0..input_dim * hidden_dim)
            .map(|_| rng.next_gaussian() * scale)
            .collect();
        Self {
            input_dim,
            hidden_dim,
            w1,
            b1: vec![0.0; hidden_dim],
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
        }
    }

    pub fn param_len(&self) -> usize {
        self.input_dim * self.hidden_dim + self.hidden_dim
    }

    /// Post-rectifier hidden activation for one sample.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut z = self.b1.clone();
        for (f, &xf) in x.iter().enumerate() {
            let row = &self.w1[f * self.hidden_dim..(f + 1) * self.hidden_dim];
            for (zh, &w) in z.iter_mut().zip(row) {
                *zh += xf * w;
            }
        }
        for zh in &mut z {
            if *zh < 0.0 {
                *zh = 0.0;
            }
        }
        Ok(z)
    }

    pub fn to_params(&self) -> ParamVector {
        let mut values = self.w1.clone();
        values.extend_from_slice(&self.b1);
        ParamVector::new(values).expect("backbone parameters stay finite")
    }

    pub fn from_params(input_dim: usize, hidden_dim: usize, params: &ParamVector) -> Result<Self> {
        let expected = input_dim * hidden_dim + hidden_dim;
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        let values = params.as_slice();
        Ok(Self {
            input_dim,
            hidden_dim,
            w1: values[..input_dim * hidden_dim].to_vec(),
            b1: values[input_dim * hidden_dim..].to_vec(),
        })
    }

    /// Overwrites parameters in place from a flat vector of matching length.
    pub fn load_params(&mut self, params: &ParamVector) -> Result<()> {
        let loaded = Self::from_params(self.input_dim, self.hidden_dim, params)?;
        *self = loaded;
        Ok(())
    }
}

/// Per-client identity head. `logits = embed * w2 + b2`.
///
/// `num_classes` equals the client's identity count and may differ per client.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub hidden_dim: usize,
    pub num_classes: usize,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Classifier {
    pub fn init(hidden_dim: usize, num_classes: usize, rng: &mut Rng) -> Self {
        let scale = (1.0 / hidden_dim as f64).sqrt();
        let w2 = (0..hidden_dim * num_classes)
            .map(|_| rng.next_gaussian() * scale)
            .collect();
        Self {
            hidden_dim,
            num_classes,
            w2,
            b2: vec![0.0; num_classes],
        }
    }

    pub fn zeros(hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            hidden_dim,
            num_classes,
            w2: vec![0.0; hidden_dim * num_classes],
            b2: vec![0.0; num_classes],
        }
    }

    pub fn param_len(&self) -> usize {
        self.hidden_dim * self.num_classes + self.num_classes
    }

    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        let mut out = self.b2.clone();
        for (h, &e) in embedding.iter().enumerate() {
            let row = &self.w2[h * self.num_classes..(h + 1) * self.num_classes];
            for (oc, &w) in out.iter_mut().zip(row) {
                *oc += e * w;
            }
        }
        out
    }

    pub fn to_params(&self) -> ParamVector {
        let mut values = self.w2.clone();
        values.extend_from_slice(&self.b2);
        ParamVector::new(values).expect("classifier parameters stay finite")
    }

    pub fn from_params(hidden_dim: usize, num_classes: usize, params: &ParamVector) -> Result<Self> {
        let expected = hidden_dim * num_classes + num_classes;
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        let values = params.as_slice();
        Ok(Self {
            hidden_dim,
            num_classes,
            w2: values[..hidden_dim * num_classes].to_vec(),
            b2: values[hidden_dim * num_classes..].to_vec(),
        })
    }
}

/// SGD hyperparameters. Defaults: momentum 0.9, weight decay 5e-4, initial
/// learning rates 0.005 (backbone) / 0.05 (classifier), decayed by 0.1 every
/// 40 cumulative local epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerHyper {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub step_size: u64,
    pub gamma: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_backbone: 0.005,
            lr_classifier: 0.05,
            step_size: 40,
            gamma: 0.1,
        }
    }
}

/// Momentum buffers plus the cumulative-epoch clock driving the lr schedule.
///
/// The clock counts local epochs accumulated across all rounds, so a round
/// with `E` local epochs advances it by `E`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hyper: OptimizerHyper,
    pub cumulative_epochs: u64,
    v_w1: Vec<f64>,
    v_b1: Vec<f64>,
    v_w2: Vec<f64>,
    v_b2: Vec<f64>,
}

impl OptimizerState {
    pub fn new(backbone: &Backbone, classifier: &Classifier, hyper: OptimizerHyper) -> Self {
        Self {
            hyper,
            cumulative_epochs: 0,
            v_w1: vec![0.0; backbone.input_dim * backbone.hidden_dim],
            v_b1: vec![0.0; backbone.hidden_dim],
            v_w2: vec![0.0; classifier.hidden_dim * classifier.num_classes],
            v_b2: vec![0.0; classifier.num_classes],
        }
    }

    fn decay(&self) -> f64 {
        self.hyper
            .gamma
            .powi((self.cumulative_epochs / self.hyper.step_size) as i32)
    }

    pub fn lr_backbone(&self) -> f64 {
        self.hyper.lr_backbone * self.decay()
    }

    pub fn lr_classifier(&self) -> f64 {
        self.hyper.lr_classifier * self.decay()
    }

    pub fn advance_epoch(&mut self) {
        self.cumulative_epochs += 1;
    }
}

/// Forward pass outputs for one batch.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Post-rectifier activations, one row per sample.
    pub embeddings: Vec<Vec<f64>>,
    /// Pre-softmax scores, one row per sample.
    pub logits: Vec<Vec<f64>>,
    /// Mean cross-entropy of softmax(logits) against the labels.
    pub loss: f64,
}

/// Analytic gradients of the mean cross-entropy, one block per parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Embeddings, logits, and mean softmax cross-entropy for a batch.
///
/// Cross-entropy subtracts the row max before exponentiating so seeds
/// reproduce at tight tolerances.
pub fn forward(
    backbone: &Backbone,
    classifier: &Classifier,
    inputs: &[Vec<f64>],
    labels: &[usize],
) -> Result<Forward> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            got: labels.len(),
        });
    }
    let mut embeddings = Vec::with_capacity(inputs.len());
    let mut logits = Vec::with_capacity(inputs.len());
    let mut loss = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        if y >= classifier.num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: classifier.num_classes,
            });
        }
        let emb = backbone.embed(x)?;
        let row = classifier.logits(&emb);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += max + log_z - row[y];
        embeddings.push(emb);
        logits.push(row);
    }
    loss /= inputs.len() as f64;
    Ok(Forward {
        embeddings,
        logits,
        loss,
    })
}

/// Analytic gradients via manual backpropagation.
pub fn gradients(
    backbone: &Backbone,
    classifier: &Classifier,
    inputs: &[Vec<f64>],
    labels: &[usize],
) -> Result<(Forward, Gradients)> {
    let pass = forward(backbone, classifier, inputs, labels)?;
    let n = inputs.len() as f64;
    let (input_dim, hidden_dim) = (backbone.input_dim, backbone.hidden_dim);
    let num_classes = classifier.num_classes;

    let mut g = Gradients {
        w1: vec![0.0; input_dim * hidden_dim],
        b1: vec![0.0; hidden_dim],
        w2: vec![0.0; hidden_dim * num_classes],
        b2: vec![0.0; num_classes],
    };

    for ((x, &y), (emb, row)) in inputs
        .iter()
        .zip(labels)
        .zip(pass.embeddings.iter().zip(&pass.logits))
    {
        // d loss / d logits = (softmax - onehot) / n
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut dlogits: Vec<f64> = exps.iter().map(|e| e / z / n).collect();
        dlogits[y] -= 1.0 / n;

        for c in 0..num_classes {
            g.b2[c] += dlogits[c];
        }
        // d emb accumulates through w2; rectifier gate uses emb > 0.
        let mut demb = vec![0.0; hidden_dim];
        for h in 0..hidden_dim {
            let row2 = &classifier.w2[h * num_classes..(h + 1) * num_classes];
            for c in 0..num_classes {
                g.w2[h * num_classes + c] += emb[h] * dlogits[c];
                demb[h] += dlogits[c] * row2[c];
            }
        }
        for h in 0..hidden_dim {
            if emb[h] <= 0.0 {
                demb[h] = 0.0;
            }
        }
        for h in 0..hidden_dim {
            g.b1[h] += demb[h];
        }
        for (f, &xf) in x.iter().enumerate() {
            for h in 0..hidden_dim {
                g.w1[f * hidden_dim + h] += xf * demb[h];
            }
        }
    }

    for (block, name) in [
        (&g.w1, "w1"),
        (&g.b1, "b1"),
        (&g.w2, "w2"),
        (&g.b2, "b2"),
    ] {
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { block: name });
        }
    }
    Ok((pass, g))
}

/// One SGD step with momentum, weight decay, and the scheduled per-part
/// learning rates. Returns the pre-step batch loss.
pub fn backward_and_step(
    backbone: &mut Backbone,
    classifier: &mut Classifier,
    opt: &mut OptimizerState,
    inputs: &[Vec<f64>],
    labels: &[usize],
) -> Result<f64> {
    let (pass, grads) = gradients(backbone, classifier, inputs, labels)?;
    let (lr_b, lr_c) = (opt.lr_backbone(), opt.lr_classifier());
    let (momentum, wd) = (opt.hyper.momentum, opt.hyper.weight_decay);

    let update = |params: &mut [f64], buf: &mut [f64], grad: &[f64], lr: f64| {
        for ((p, v), &g) in params.iter_mut().zip(buf.iter_mut()).zip(grad) {
            let g = g + wd * *p;
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    };
    update(&mut backbone.w1, &mut opt.v_w1, &grads.w1, lr_b);
    update(&mut backbone.b1, &mut opt.v_b1, &grads.b1, lr_b);
    update(&mut classifier.w2, &mut opt.v_w2, &grads.w2, lr_c);
    update(&mut classifier.b2, &mut opt.v_b2, &grads.b2, lr_c);
    Ok(pass.loss)
}

/// Per-sample backbone embeddings of a fixed-size probe batch, flattened in
/// sample order. Errors unless the batch has exactly `expected` samples.
pub fn extract_features(
    backbone: &Backbone,
    inputs: &[Vec<f64>],
    expected: usize,
) -> Result<Vec<f64>> {
    if inputs.len() != expected {
        return Err(Error::BatchSize {
            expected,
            got: inputs.len(),
        });
    }
    let mut out = Vec::with_capacity(inputs.len() * backbone.hidden_dim);
    for x in inputs {
        out.extend(backbone.embed(x)?);
    }
    Ok(out)
}

/// Pre-softmax logits of a probe batch, flattened in sample order.
pub fn extract_logits(
    backbone: &Backbone,
    classifier: &Classifier,
    inputs: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len() * classifier.num_classes);
    for x in inputs {
        let emb = backbone.embed(x)?;
        out.extend(classifier.logits(&emb));
    }
    Ok(out)
}

/// On-disk model dump: flat parameter values plus the shape header.
///
/// Layout (line-oriented text, stable across versions):
///
/// ```text
/// fedpav-checkpoint v1
/// input_dim <n>
/// hidden_dim <n>
/// num_classes <n>        // 0 = backbone-only dump
/// cumulative_epochs <n>
/// values <len>
/// <one parameter value per line, shortest round-trip decimal>
/// ```
///
/// Values are the backbone parameters (`w1` row-major, then `b1`), followed by
/// the classifier parameters (`w2` row-major, then `b2`) when `num_classes`
/// is nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub cumulative_epochs: u64,
    pub values: ParamVector,
}

impl Checkpoint {
    pub fn of_backbone(backbone: &Backbone, cumulative_epochs: u64) -> Self {
        Self {
            input_dim: backbone.input_dim,
            hidden_dim: backbone.hidden_dim,
            num_classes: 0,
            cumulative_epochs,
            values: backbone.to_params(),
        }
    }

    pub fn of_model(
        backbone: &Backbone,
        classifier: &Classifier,
        cumulative_epochs: u64,
    ) -> Self {
        let mut values = backbone.to_params().into_values();
        values.extend(classifier.to_params().into_values());
        Self {
            input_dim: backbone.input_dim,
            hidden_dim: backbone.hidden_dim,
            num_classes: classifier.num_classes,
            cumulative_epochs,
            values: ParamVector::new(values).expect("model parameters stay finite"),
        }
    }

    pub fn backbone(&self) -> Result<Backbone> {
        let len = self.input_dim * self.hidden_dim + self.hidden_dim;
        let head = ParamVector::new(self.values.as_slice()[..len].to_vec())?;
        Backbone::from_params(self.input_dim, self.hidden_dim, &head)
    }

    pub fn classifier(&self) -> Result<Option<Classifier>> {
        if self.num_classes == 0 {
            return Ok(None);
        }
        let skip = self.input_dim * self.hidden_dim + self.hidden_dim;
        let tail = ParamVector::new(self.values.as_slice()[skip..].to_vec())?;
        Classifier::from_params(self.hidden_dim, self.num_classes, &tail).map(Some)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "fedpav-checkpoint v1").unwrap();
        writeln!(out, "input_dim {}", self.input_dim).unwrap();
        writeln!(out, "hidden_dim {}", self.hidden_dim).unwrap();
        writeln!(out, "num_classes {}", self.num_classes).unwrap();
        writeln!(out, "cumulative_epochs {}", self.cumulative_epochs).unwrap();
        writeln!(out, "values {}", self.values.len()).unwrap();
        for v in self.values.as_slice() {
            writeln!(out, "{v}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "checkpoint",
            detail: detail.to_string(),
        };
        let mut lines = text.lines();
        if lines.next() != Some("fedpav-checkpoint v1") {
            return Err(bad("missing header line"));
        }
        let mut field = |name: &str| -> Result<u64> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let rest = line
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| bad(&format!("expected field {name}")))?;
            rest.parse()
                .map_err(|_| bad(&format!("bad value for {name}")))
        };
        let input_dim = field("input_dim")? as usize;
        let hidden_dim = field("hidden_dim")? as usize;
        let num_classes = field("num_classes")? as usize;
        let cumulative_epochs = field("cumulative_epochs")?;
        let len = field("values")? as usize;
        let mut values = Vec::with_capacity(len);
        for line in lines {
            let v: f64 = line
                .parse()
                .map_err(|_| bad(&format!("bad parameter value `{line}`")))?;
            values.push(v);
        }
        if values.len() != len {
            return Err(bad(&format!(
                "expected {len} values, found {}",
                values.len()
            )));
        }
        let expected = input_dim * hidden_dim
            + hidden_dim
            + if num_classes > 0 {
                hidden_dim * num_classes + num_classes
            } else {
                0
            };
        if len != expected {
            return Err(bad(&format!(
                "value count {len} does not match dims (expected {expected})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            num_classes,
            cumulative_epochs,
            values: ParamVector::new(values)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}
