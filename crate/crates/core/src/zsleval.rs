//! Zero-shot evaluation: synthesize features for unseen classes, train a
//! softmax classifier on them, and score real test features.
//!
//! Accuracies are mean per-class top-1. Classes without test rows are left
//! out of the mean and listed in the report.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::{ClassId, ClassMeans, DatasetBundle};
use crate::error::{Error, Result};
use crate::genmodel::{synthesize, ModelConfig, ModelParams};
use crate::neural::{streams, Adam, Direction, Matrix, Optimizer, OptimizerState, ParamSet, Rng};

/// Source of synthetic features for a class.
pub trait FeatureSynthesizer {
    fn name(&self) -> &'static str;

    fn synthesize(&self, class: &ClassId, attributes: &[f64], n: usize, rng: &mut Rng) -> Result<Matrix>;
}

/// The trained generator, conditioned on class attributes.
pub struct TrainedGenerator<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ModelParams,
}

impl FeatureSynthesizer for TrainedGenerator<'_> {
    fn name(&self) -> &'static str {
        "generator"
    }

    fn synthesize(&self, _: &ClassId, attributes: &[f64], n: usize, rng: &mut Rng) -> Result<Matrix> {
        synthesize(self.cfg, self.params, rng, attributes, n)
    }
}

/// Draws around the true class means; an upper reference on synthetic data.
pub struct OracleGenerator<'a> {
    pub means: &'a ClassMeans,
    pub std: f64,
}

impl FeatureSynthesizer for OracleGenerator<'_> {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn synthesize(&self, class: &ClassId, _: &[f64], n: usize, rng: &mut Rng) -> Result<Matrix> {
        let mean = self.means.mean_of(class).ok_or_else(|| Error::UnknownClass {
            class: class.to_string(),
            context: "oracle class means".into(),
        })?;
        let mut out = Matrix::zeros(n, mean.len());
        for r in 0..n {
            for (v, m) in out.row_mut(r).iter_mut().zip(mean) {
                *v = m + self.std * rng.normal();
            }
        }
        Ok(out)
    }
}

/// Labelled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledSet {
    pub x: Matrix,
    pub labels: Vec<ClassId>,
}

/// `per_class` synthetic rows for each class, in `classes` order.
pub fn synthesize_dataset(
    synth: &dyn FeatureSynthesizer,
    bundle: &DatasetBundle,
    classes: &[ClassId],
    per_class: usize,
    rng: &mut Rng,
) -> Result<LabelledSet> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be >= 1".into()));
    }
    let mut x = Matrix::zeros(0, bundle.feature_dim);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for c in classes {
        let attr = bundle.attribute(c).ok_or_else(|| Error::UnknownClass {
            class: c.to_string(),
            context: "attribute table".into(),
        })?;
        let block = synth.synthesize(c, attr, per_class, rng)?;
        x = x.vcat(&block)?;
        labels.extend(std::iter::repeat_n(c.clone(), per_class));
    }
    Ok(LabelledSet { x, labels })
}

/// Mean softmax cross-entropy of a linear classifier and its gradient.
/// `params` holds the `D x K` weight matrix row-major followed by `K` biases.
pub fn softmax_cross_entropy(params: &ParamSet, x: &Matrix, targets: &[usize], k: usize) -> Result<(f64, ParamSet)> {
    let d = x.cols();
    if params.len() != d * k + k {
        return Err(Error::Shape(format!(
            "classifier params of length {}, expected {}",
            params.len(),
            d * k + k
        )));
    }
    if targets.len() != x.rows() || x.rows() == 0 {
        return Err(Error::Shape(format!("{} targets for {} rows", targets.len(), x.rows())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Shape(format!("target {t} out of range for {k} classes")));
    }
    let (w, b) = params.as_slice().split_at(d * k);
    let w = Matrix::from_vec(d, k, w.to_vec())?;
    let mut logits = x.matmul(&w)?;
    logits.add_row_vector(b)?;
    let n = x.rows() as f64;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss -= (row[t] / sum).ln();
        for v in row.iter_mut() {
            *v /= sum * n;
        }
        row[t] -= 1.0 / n;
    }
    let gw = x.matmul_t(true, &logits, false)?;
    let mut grad = gw.into_vec();
    grad.extend(logits.col_sums());
    Ok((loss / n, ParamSet::new(grad)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 64,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "classifier epochs, batch_size and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear softmax classifier over a fixed list of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    pub classes: Vec<ClassId>,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl SoftmaxClassifier {
    /// Trains from zero weights with Adam on shuffled minibatches.
    pub fn train(data: &LabelledSet, classes: &[ClassId], cfg: &ClassifierConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if classes.len() < 2 {
            return Err(Error::Config("a softmax classifier needs at least two classes".into()));
        }
        let pos: HashMap<&ClassId, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let targets = data
            .labels
            .iter()
            .map(|l| {
                pos.get(l).copied().ok_or_else(|| Error::UnknownClass {
                    class: l.to_string(),
                    context: "classifier class list".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (d, k) = (data.x.cols(), classes.len());
        let mut params = ParamSet::zeros(d * k + k);
        let mut opt = Adam::new(OptimizerState::adam(cfg.learning_rate, 0.9, 0.999, 1e-8, params.len()));
        let mut order: Vec<usize> = (0..data.x.rows()).collect();
        for _ in 0..cfg.epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size) {
                let xb = data.x.select_rows(chunk);
                let tb: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
                let (_, g) = softmax_cross_entropy(&params, &xb, &tb, k)?;
                opt.step(&mut params, &g, Direction::Descend)?;
            }
        }
        if !params.is_finite() {
            return Err(Error::Numeric("classifier weights became non-finite".into()));
        }
        let (w, b) = params.as_slice().split_at(d * k);
        Ok(Self {
            classes: classes.to_vec(),
            weights: Matrix::from_vec(d, k, w.to_vec())?,
            bias: b.to_vec(),
        })
    }

    /// Arg-max class per row; ties go to the earlier class.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<ClassId>> {
        let mut logits = x.matmul(&self.weights)?;
        logits.add_row_vector(&self.bias)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                self.classes[best].clone()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: ClassId,
    pub correct: usize,
    pub total: usize,
}

impl ClassAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub per_class: Vec<ClassAccuracy>,
    /// Classes with no test rows.
    pub excluded: Vec<ClassId>,
    /// Mean per-class accuracy in `[0, 1]`.
    pub mean: f64,
}

/// Mean per-class accuracy of `pred` against `truth` over `classes`.
pub fn per_class_accuracy(truth: &[ClassId], pred: &[ClassId], classes: &[ClassId]) -> Result<AccuracyReport> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    if classes.is_empty() {
        return Err(Error::Config("empty evaluation class list".into()));
    }
    if let Some(t) = truth.iter().find(|t| !classes.contains(t)) {
        return Err(Error::UnknownClass {
            class: t.to_string(),
            context: "evaluation label space".into(),
        });
    }
    let mut tally: HashMap<&ClassId, (usize, usize)> = HashMap::new();
    for (t, p) in truth.iter().zip(pred) {
        let e = tally.entry(t).or_default();
        e.1 += 1;
        if t == p {
            e.0 += 1;
        }
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for c in classes {
        match tally.get(c) {
            Some(&(correct, total)) => per_class.push(ClassAccuracy {
                class: c.clone(),
                correct,
                total,
            }),
            None => excluded.push(c.clone()),
        }
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(ClassAccuracy::accuracy).sum::<f64>() / per_class.len() as f64
    };
    Ok(AccuracyReport {
        per_class,
        excluded,
        mean,
    })
}

/// `2us / (u + s)`, zero when both are zero.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Synthetic features per class.
    pub per_class: usize,
    pub classifier: ClassifierConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            per_class: 300,
            classifier: ClassifierConfig::default(),
        }
    }
}

fn test_set(bundle: &DatasetBundle, rows: &[usize]) -> (Matrix, Vec<ClassId>) {
    (
        bundle.features.select_rows(rows),
        rows.iter().map(|&r| bundle.labels[r].clone()).collect(),
    )
}

/// Conventional zero-shot accuracy: classify unseen test rows among unseen
/// classes only. Synthesis draws from `SYNTH`, classifier shuffling from
/// `CLASSIFIER`, both under `seed`.
pub fn evaluate_zsl(
    bundle: &DatasetBundle,
    synth: &dyn FeatureSynthesizer,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<AccuracyReport> {
    let unseen = &bundle.unseen_classes;
    if unseen.is_empty() {
        return Err(Error::Data("dataset has no unseen classes".into()));
    }
    let (x_test, truth) = test_set(bundle, &bundle.unseen_test_rows);
    if unseen.len() == 1 {
        // A single candidate is always predicted.
        let pred = vec![unseen[0].clone(); truth.len()];
        return per_class_accuracy(&truth, &pred, unseen);
    }
    let train = synthesize_dataset(synth, bundle, unseen, cfg.per_class, &mut Rng::derive(seed, streams::SYNTH))?;
    let clf = SoftmaxClassifier::train(&train, unseen, &cfg.classifier, &mut Rng::derive(seed, streams::CLASSIFIER))?;
    per_class_accuracy(&truth, &clf.predict(&x_test)?, unseen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GzslMetrics {
    pub unseen: AccuracyReport,
    pub seen: AccuracyReport,
    pub harmonic: f64,
}

/// Generalized zero-shot accuracy: one classifier over the joint label
/// space, trained on synthetic rows for seen and unseen classes alike.
pub fn evaluate_gzsl(
    bundle: &DatasetBundle,
    synth: &dyn FeatureSynthesizer,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<GzslMetrics> {
    let unseen = &bundle.unseen_classes;
    if unseen.is_empty() || bundle.seen_classes.is_empty() {
        return Err(Error::Data("GZSL needs both seen and unseen classes".into()));
    }
    let all: Vec<ClassId> = bundle.seen_classes.iter().chain(unseen).cloned().collect();
    let train = synthesize_dataset(synth, bundle, &all, cfg.per_class, &mut Rng::derive(seed, streams::SYNTH))?;
    let clf = SoftmaxClassifier::train(&train, &all, &cfg.classifier, &mut Rng::derive(seed, streams::CLASSIFIER))?;

    let (xu, tu) = test_set(bundle, &bundle.unseen_test_rows);
    let (xs, ts) = test_set(bundle, &bundle.seen_test_rows);
    let unseen_report = per_class_accuracy(&tu, &clf.predict(&xu)?, unseen)?;
    let seen_report = per_class_accuracy(&ts, &clf.predict(&xs)?, &bundle.seen_classes)?;
    let harmonic = harmonic_mean(unseen_report.mean, seen_report.mean);
    Ok(GzslMetrics {
        unseen: unseen_report,
        seen: seen_report,
        harmonic,
    })
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn write_per_class(out: &mut String, title: &str, r: &AccuracyReport) {
    let _ = writeln!(out, "# {title}");
    for c in &r.per_class {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", c.class, c.correct, c.total, pct(c.accuracy()));
    }
    for c in &r.excluded {
        let _ = writeln!(out, "{c}\t0\t0\texcluded");
    }
}

/// Metrics file for a zero-shot run.
pub fn format_zsl_report(r: &AccuracyReport) -> String {
    let mut out = format!("metric\tvalue\nzsl_accuracy\t{}\n", pct(r.mean));
    write_per_class(&mut out, "unseen per-class", r);
    out
}

/// Metrics file for a generalized zero-shot run.
pub fn format_gzsl_report(m: &GzslMetrics) -> String {
    let mut out = format!(
        "metric\tvalue\nU\t{}\nS\t{}\nH\t{}\n",
        pct(m.unseen.mean),
        pct(m.seen.mean),
        pct(m.harmonic)
    );
    write_per_class(&mut out, "unseen per-class", &m.unseen);
    write_per_class(&mut out, "seen per-class", &m.seen);
    out
}
