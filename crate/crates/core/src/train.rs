//! Training loop, evaluation, feature export, and the scenario sweep.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainSettings};
use crate::error::{Error, Result};
use crate::metrics::{acc_at_1, c_metric, existence_accuracy, Metrics};
use crate::model::{LossParts, Network, Scenario, ScenarioConfig, TokenPath};
use crate::optim::Adam;
use crate::param::ParamStore;
use crate::scm::FusionMode;
use crate::sketch::{load_stroke_file, Dataset, LabelSpace, Split};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const METRICS_LOG_FILE: &str = "metrics.jsonl";
pub const NONFINITE_DUMP_FILE: &str = "nonfinite_batch.json";
pub const FEATURES_FILE: &str = "features.tsv";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss parts over the epoch's samples.
    pub loss: LossParts,
    /// Recombined from `loss` with the run's weights.
    pub total: f64,
    pub train: Option<Metrics>,
    pub test: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best epoch.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct SampleDump {
    index: usize,
    category: usize,
    strokes: usize,
    loss: Option<LossParts>,
    total: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct NonFiniteDump {
    epoch: usize,
    batch: usize,
    samples: Vec<SampleDump>,
    nonfinite_parameters: Vec<String>,
}

fn selection_key(m: &Metrics) -> (f64, f64) {
    let secondary = m
        .c_metric
        .or(m.existence_accuracy)
        .or(m.assignment_c_metric)
        .unwrap_or(0.0);
    (m.acc_at_1, secondary)
}

fn dump_batch(
    network: &Network,
    store: &ParamStore,
    data: &Dataset,
    scenario: &ScenarioConfig,
    epoch: usize,
    batch: usize,
    indices: &[usize],
) -> String {
    let samples = indices
        .iter()
        .map(|&i| {
            let sketch = &data.samples[i];
            let tape = Tape::new();
            let result = network
                .forward(&tape, store, sketch, scenario)
                .and_then(|f| {
                    network.losses(&tape, store, &f, sketch, &data.label_space, scenario)
                });
            let (loss, total, error) = match result {
                Ok(l) => (Some(l.parts), Some(l.total.item()), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            SampleDump {
                index: i,
                category: sketch.category,
                strokes: sketch.num_strokes(),
                loss,
                total,
                error,
            }
        })
        .collect();
    let dump = NonFiniteDump {
        epoch,
        batch,
        samples,
        nonfinite_parameters: store
            .iter()
            .filter(|p| !p.value.is_finite())
            .map(|p| p.name.clone())
            .collect(),
    };
    serde_json::to_string_pretty(&dump).unwrap_or_else(|e| format!("unserializable dump: {e}"))
}

/// Trains from scratch. Deterministic for fixed settings and data.
pub fn train_model(
    settings: &TrainSettings,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<TrainOutcome> {
    settings.validate()?;
    let (network, store) = Network::new(settings.model, settings.seed)?;
    train_from(settings, network, store, train, test)
}

/// Trains starting from the given parameters.
pub fn train_from(
    settings: &TrainSettings,
    network: Network,
    mut store: ParamStore,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<TrainOutcome> {
    settings.validate()?;
    if network.config != settings.model {
        return Err(Error::Config(
            "network does not match the model settings".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if let Some(t) = test {
        if t.label_space != train.label_space {
            return Err(Error::Data("train and test label spaces differ".into()));
        }
    }
    let label_space = &train.label_space;
    if settings.model.num_categories != label_space.num_categories()
        || settings.model.num_components != label_space.num_components()
    {
        return Err(Error::Config(
            "model head widths do not match the label space".into(),
        ));
    }
    let scenario = &settings.scenario;
    if scenario.scenario == Scenario::LabelsFull && !train.has_stroke_labels() {
        return Err(Error::Data(
            "labels_full needs per-stroke component labels".into(),
        ));
    }

    let mut adam = Adam::new(settings.adam);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(settings.epochs);
    let mut best: Option<(usize, (f64, f64), ParamStore, Metrics)> = None;

    for epoch in 1..=settings.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut parts = Vec::with_capacity(train.len());
        for (b, batch) in order.chunks(settings.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let sketch = &train.samples[i];
                let tape = Tape::new();
                let fwd = network.forward(&tape, &store, sketch, scenario)?;
                let losses = network.losses(&tape, &store, &fwd, sketch, label_space, scenario)?;
                if !losses.total.item().is_finite() {
                    let dump = dump_batch(&network, &store, train, scenario, epoch, b, batch);
                    return Err(Error::NonFinite(dump));
                }
                tape.backward(losses.total.scale(scale), &mut store)?;
                parts.push(losses.parts);
            }
            adam.step(&mut store);
        }
        let loss = LossParts::mean(&parts);
        let train_metrics = if settings.eval_train {
            Some(evaluate(&network, &store, scenario, train)?)
        } else {
            None
        };
        let test_metrics = test
            .map(|t| evaluate(&network, &store, scenario, t))
            .transpose()?;
        let record = EpochRecord {
            epoch,
            total: loss.total(&scenario.weights),
            loss,
            train: train_metrics,
            test: test_metrics,
        };
        info!(
            "epoch {epoch}: loss {:.5} train acc {:?} test acc {:?}",
            record.total,
            record.train.as_ref().map(|m| m.acc_at_1),
            record.test.as_ref().map(|m| m.acc_at_1)
        );

        if let Some(m) = record.test.as_ref().or(record.train.as_ref()) {
            let key = selection_key(m);
            if best.as_ref().is_none_or(|(_, k, _, _)| key >= *k) {
                best = Some((epoch, key, store.clone(), m.clone()));
            }
        }
        let stop = match &record.train {
            Some(m) => {
                let acc_ok = settings
                    .stop
                    .train_acc_at_1
                    .is_some_and(|t| m.acc_at_1 >= t);
                let c_ok = match settings.stop.train_c_metric {
                    Some(t) => m.c_metric.is_some_and(|c| c >= t),
                    None => true,
                };
                acc_ok && c_ok
            }
            None => false,
        };
        log.push(record);
        if stop {
            info!("stopping after epoch {epoch}: train targets reached");
            break;
        }
    }

    let (best_epoch, store, metrics) = match best {
        Some((e, _, s, m)) => (e, s, Some(m)),
        None => (log.len(), store, None),
    };
    Ok(TrainOutcome {
        best: Checkpoint {
            network,
            store,
            scenario: *scenario,
            label_space: label_space.clone(),
            seed: settings.seed,
            epoch: best_epoch,
            metrics,
        },
        best_epoch,
        log,
    })
}

/// Loads the run's data, trains, and writes the best checkpoint and the
/// metrics log into the output directory.
pub fn train(run: &RunConfig) -> Result<TrainOutcome> {
    let label_space = LabelSpace::load(&run.label_space)?;
    let settings = run.settings(&label_space)?;
    let max_strokes = settings.model.max_strokes;
    let train = load_stroke_file(&run.train_data, &label_space, max_strokes, Split::Train)?;
    let test = run
        .test_data
        .as_ref()
        .map(|p| load_stroke_file(p, &label_space, max_strokes, Split::Test))
        .transpose()?;
    fs::create_dir_all(&run.output_dir)?;
    let outcome = match train_model(&settings, &train, test.as_ref()) {
        Err(Error::NonFinite(dump)) => {
            fs::write(run.output_dir.join(NONFINITE_DUMP_FILE), &dump)?;
            return Err(Error::NonFinite(dump));
        }
        other => other?,
    };
    write_metrics_log(run.output_dir.join(METRICS_LOG_FILE), &outcome.log)?;
    outcome.best.save(run.output_dir.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}

pub fn write_metrics_log(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for record in log {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_log(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Scenario-appropriate metrics of a model on a dataset.
pub fn evaluate(
    network: &Network,
    store: &ParamStore,
    scenario: &ScenarioConfig,
    data: &Dataset,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let labelled = data.has_stroke_labels();
    let mut predicted = Vec::with_capacity(data.len());
    let mut segment_pred = Vec::new();
    let mut assigned = Vec::new();
    let mut stroke_truth = Vec::new();
    let mut existence_pred = Vec::new();
    let mut existence_truth = Vec::new();
    for sketch in &data.samples {
        let p = network.predict(store, sketch, scenario)?;
        predicted.push(p.category());
        if labelled {
            stroke_truth.push(sketch.stroke_components.clone().unwrap_or_default());
            assigned.push(p.assigned_components());
        }
        if let Some(seg) = &p.stroke_components {
            segment_pred.push(seg.iter().map(|&(j, _)| j).collect::<Vec<_>>());
        }
        if let Some(e) = p.existence {
            existence_pred.push(e);
            existence_truth.push(data.label_space.composition_vector(sketch.category)?);
        }
    }
    let labels: Vec<usize> = data.samples.iter().map(|s| s.category).collect();
    let c = if labelled && scenario.scenario == Scenario::LabelsFull {
        Some(c_metric(&segment_pred, &stroke_truth)?)
    } else {
        None
    };
    let per_component = if existence_pred.is_empty() {
        None
    } else {
        Some(existence_accuracy(&existence_pred, &existence_truth)?)
    };
    Ok(Metrics {
        samples: data.len(),
        acc_at_1: acc_at_1(&predicted, &labels)?,
        c_metric: c,
        assignment_c_metric: if labelled {
            Some(c_metric(&assigned, &stroke_truth)?)
        } else {
            None
        },
        existence_accuracy: per_component
            .as_ref()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64),
        existence_per_component: per_component,
    })
}

/// Evaluates a checkpoint; the dataset must use the checkpoint's label space.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, data: &Dataset) -> Result<Metrics> {
    if data.label_space != checkpoint.label_space {
        return Err(Error::Data(
            "dataset label space differs from the checkpoint".into(),
        ));
    }
    evaluate(
        &checkpoint.network,
        &checkpoint.store,
        &checkpoint.scenario,
        data,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Stroke,
    Key,
}

/// One row of a feature dump. Stroke rows carry the sample, stroke index,
/// assignment row and component ids; key rows carry the component and head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub kind: FeatureKind,
    pub sample: Option<usize>,
    /// Stroke index for stroke rows, component id for key rows.
    pub index: usize,
    pub head: Option<usize>,
    pub true_component: Option<usize>,
    pub predicted_component: Option<usize>,
    pub assignment: Vec<f64>,
    pub features: Vec<f64>,
}

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl FeatureRow {
    fn to_line(&self) -> String {
        let kind = match self.kind {
            FeatureKind::Stroke => "stroke",
            FeatureKind::Key => "key",
        };
        [
            kind.to_string(),
            opt(self.sample),
            self.index.to_string(),
            opt(self.head),
            opt(self.true_component),
            opt(self.predicted_component),
            join(&self.assignment),
            join(&self.features),
        ]
        .join("\t")
    }

    fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Data(format!("malformed feature row: {line}"));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 8 {
            return Err(bad());
        }
        let kind = match cols[0] {
            "stroke" => FeatureKind::Stroke,
            "key" => FeatureKind::Key,
            _ => return Err(bad()),
        };
        let opt_usize = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        let floats = |s: &str| -> Result<Vec<f64>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',').map(|v| v.parse().map_err(|_| bad())).collect()
        };
        Ok(Self {
            kind,
            sample: opt_usize(cols[1])?,
            index: cols[2].parse().map_err(|_| bad())?,
            head: opt_usize(cols[3])?,
            true_component: opt_usize(cols[4])?,
            predicted_component: opt_usize(cols[5])?,
            assignment: floats(cols[6])?,
            features: floats(cols[7])?,
        })
    }
}

const FEATURE_HEADER: &str =
    "kind\tsample\tindex\thead\ttrue_component\tpredicted_component\tassignment\tfeatures";

/// Per-stroke features and assignments plus every memory key.
pub fn feature_rows(checkpoint: &Checkpoint, data: &Dataset) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::with_capacity(data.total_strokes());
    for (s, sketch) in data.samples.iter().enumerate() {
        let p = checkpoint
            .network
            .predict(&checkpoint.store, sketch, &checkpoint.scenario)?;
        let assigned = p.assigned_components();
        for i in 0..sketch.num_strokes() {
            rows.push(FeatureRow {
                kind: FeatureKind::Stroke,
                sample: Some(s),
                index: i,
                head: None,
                true_component: sketch.stroke_components.as_ref().map(|c| c[i]),
                predicted_component: Some(match &p.stroke_components {
                    Some(seg) => seg[i].0,
                    None => assigned[i],
                }),
                assignment: p.assignment[i].clone(),
                features: p.stroke_features.row(i).to_vec(),
            });
        }
    }
    let bank = &checkpoint.network.memory;
    let keys = checkpoint.store.value(bank.keys);
    for j in 0..bank.components {
        for h in 0..bank.heads {
            rows.push(FeatureRow {
                kind: FeatureKind::Key,
                sample: None,
                index: j,
                head: Some(h),
                true_component: Some(j),
                predicted_component: None,
                assignment: Vec::new(),
                features: keys.row(bank.row(j, h)).to_vec(),
            });
        }
    }
    Ok(rows)
}

/// Writes the feature dump as tab-separated text into `dir`.
pub fn export_features(
    checkpoint: &Checkpoint,
    data: &Dataset,
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let path = dir.join(FEATURES_FILE);
    let mut out = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(out, "{FEATURE_HEADER}")?;
    for row in feature_rows(checkpoint, data)? {
        writeln!(out, "{}", row.to_line())?;
    }
    out.flush()?;
    Ok(path)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(FEATURE_HEADER) {
        return Err(Error::Data("feature dump header missing".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(FeatureRow::parse)
        .collect()
}

/// The ten supervision/fusion configurations of the ablation table, in order.
pub fn sweep_rows() -> Vec<ScenarioConfig> {
    use FusionMode::*;
    let only = |f| ScenarioConfig::new(Scenario::CategoryOnly, f);
    vec![
        only(Convex),
        only(KeysOnly),
        only(StrokesOnly),
        only(Convex).with_path(TokenPath::Component),
        only(StrokesOnly).with_path(TokenPath::Component),
        ScenarioConfig::new(Scenario::PriorInfo, Convex),
        ScenarioConfig::new(Scenario::PriorInfo, StrokesOnly),
        ScenarioConfig::new(Scenario::LabelsFull, Convex),
        ScenarioConfig::new(Scenario::LabelsFull, KeysOnly),
        ScenarioConfig::new(Scenario::LabelsFull, StrokesOnly),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub configuration: String,
    pub scenario: ScenarioConfig,
    pub best_epoch: usize,
    pub metrics: Metrics,
}

/// Trains every sweep row with otherwise identical settings.
pub fn sweep_datasets(
    base: &TrainSettings,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<Vec<SweepRow>> {
    sweep_rows()
        .into_iter()
        .map(|row| {
            let settings = TrainSettings {
                scenario: ScenarioConfig {
                    weights: base.scenario.weights,
                    ..row
                },
                ..*base
            };
            let outcome = train_model(&settings, train, test)?;
            let metrics = outcome
                .best
                .metrics
                .clone()
                .ok_or_else(|| Error::Invalid("sweep run produced no metrics".into()))?;
            info!("{}: acc {:.4}", row.label(), metrics.acc_at_1);
            Ok(SweepRow {
                configuration: row.label(),
                scenario: settings.scenario,
                best_epoch: outcome.best_epoch,
                metrics,
            })
        })
        .collect()
}

pub const SWEEP_FILE: &str = "sweep.jsonl";

/// File-based sweep; writes one JSON line per configuration.
pub fn sweep(run: &RunConfig) -> Result<Vec<SweepRow>> {
    let label_space = LabelSpace::load(&run.label_space)?;
    let mut base_run = run.clone();
    // Scenario and fusion are replaced row by row; validate with a neutral one.
    base_run.scenario = Scenario::CategoryOnly;
    base_run.fusion = FusionMode::Convex;
    base_run.token_path = None;
    let base = base_run.settings(&label_space)?;
    let max_strokes = base.model.max_strokes;
    let train = load_stroke_file(&run.train_data, &label_space, max_strokes, Split::Train)?;
    let test = run
        .test_data
        .as_ref()
        .map(|p| load_stroke_file(p, &label_space, max_strokes, Split::Test))
        .transpose()?;
    let rows = sweep_datasets(&base, &train, test.as_ref())?;
    fs::create_dir_all(&run.output_dir)?;
    let mut out = std::io::BufWriter::new(fs::File::create(run.output_dir.join(SWEEP_FILE))?);
    for row in &rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_distinct_sweep_rows() {
        let rows = sweep_rows();
        assert_eq!(rows.len(), 10);
        let labels: std::collections::BTreeSet<_> = rows.iter().map(|r| r.label()).collect();
        assert_eq!(labels.len(), 10);
        assert!(rows.iter().all(|r| r.validate().is_ok()));
    }

    #[test]
    fn feature_row_round_trip() {
        let row = FeatureRow {
            kind: FeatureKind::Stroke,
            sample: Some(3),
            index: 1,
            head: None,
            true_component: Some(2),
            predicted_component: Some(0),
            assignment: vec![0.1, 0.2 + 1e-17, 0.7],
            features: vec![-1.0 / 3.0, 1e-300, 5.0],
        };
        assert_eq!(FeatureRow::parse(&row.to_line()).unwrap(), row);
        assert!(FeatureRow::parse("stroke\t1").is_err());
    }
}
