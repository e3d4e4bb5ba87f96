use std::io::Write;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, TaskData};
use super::loss::{kd_loss_on_tape, KdLossConfig};
use crate::autodiff::{forward, init_params, predict, sgd_step, softmax_row, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::graph_ir::{NetworkGraph, Precision};
use crate::transforms::{self, AlterMode, Alteration};

/// Stream offset for parameter initialization of layers created mid-training,
/// kept apart from the shuffling stream.
const INIT_STREAM: u64 = 0x5eed_1417;

/// A graph together with its trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub graph: NetworkGraph,
    pub params: ParamStore,
}

impl Model {
    pub fn new(graph: NetworkGraph, params: ParamStore) -> Self {
        Self { graph, params }
    }

    pub fn init(graph: NetworkGraph, seed: u64) -> Self {
        let params = init_params(&graph, seed);
        Self { graph, params }
    }

    /// Softmax outputs, one row per input row.
    pub fn probabilities(&self, inputs: &Tensor, precision: Option<Precision>) -> Result<Tensor> {
        let logits = predict(&self.graph, &self.params, inputs, precision)?;
        let rows: Vec<Vec<f64>> = (0..logits.rows()).map(|r| softmax_row(logits.row(r))).collect();
        Tensor::from_rows(&rows)
    }

    /// Fraction of rows whose arg-max logit equals the label.
    pub fn accuracy(&self, data: &Dataset, precision: Option<Precision>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let logits = predict(&self.graph, &self.params, &data.inputs, precision)?;
        let correct = (0..logits.rows())
            .filter(|&r| {
                let row = logits.row(r);
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                arg == data.labels[r]
            })
            .count();
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Minibatch SGD settings shared by every trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, batch_size: 32, seed: 0 }
    }
}

impl SgdConfig {
    fn check(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParams(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParams("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Schedule for gradual skip alteration under distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    /// Epochs between consecutive alterations.
    pub alpha: usize,
    pub total_epochs: usize,
    pub mode: AlterMode,
    pub loss: KdLossConfig,
    pub sgd: SgdConfig,
    /// Fake-quantize student weights during training and evaluation.
    pub quantize_student: Option<Precision>,
}

impl TrainPlan {
    pub fn new(alpha: usize, total_epochs: usize, mode: AlterMode) -> Self {
        Self {
            alpha,
            total_epochs,
            mode,
            loss: KdLossConfig::default(),
            sgd: SgdConfig::default(),
            quantize_student: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 {
            return Err(Error::InvalidPlan("alpha must be at least 1".into()));
        }
        KdLossConfig::new(self.loss.beta).map_err(|e| Error::InvalidPlan(e.to_string()))?;
        self.sgd.check().map_err(|e| Error::InvalidPlan(e.to_string()))
    }

    /// Whether epoch `i` begins with an alteration.
    pub fn alters_at(&self, epoch: usize) -> bool {
        epoch != 0 && epoch.is_multiple_of(self.alpha)
    }

    /// Epochs at which an alteration is scheduled, ignoring whether a
    /// candidate skip will still exist.
    pub fn scheduled_epochs(&self) -> Vec<usize> {
        (1..self.total_epochs).filter(|&e| self.alters_at(e)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub skips_remaining: usize,
    pub max_span: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alteration: Option<Alteration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub plan: TrainPlan,
    pub epochs: Vec<EpochRecord>,
    pub alteration_epochs: Vec<usize>,
    pub warnings: Vec<String>,
    pub final_accuracy: f64,
    pub student: Model,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `epoch,skips_remaining,loss,accuracy` per epoch.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_history_csv(&self.epochs, out)
    }
}

pub fn write_history_csv<W: Write>(epochs: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "skips_remaining", "loss", "accuracy"])?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            e.skips_remaining.to_string(),
            e.train_loss.to_string(),
            e.eval_accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One pass over `train` in shuffled minibatches. With `teacher_probs` the
/// objective is the KD loss, otherwise plain cross entropy. Returns the
/// sample-weighted mean loss.
fn run_epoch(
    model: &mut Model,
    train: &Dataset,
    teacher_probs: Option<(&Tensor, &KdLossConfig)>,
    sgd: &SgdConfig,
    precision: Option<Precision>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for batch in order.chunks(sgd.batch_size) {
        let x = train.inputs.slice_rows(batch);
        let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
        let mut pass = forward(&model.graph, &model.params, &x, precision)?;
        let logits = pass.output;
        let loss = match teacher_probs {
            Some((t, cfg)) => kd_loss_on_tape(&mut pass.tape, logits, &t.slice_rows(batch), &labels, cfg),
            None => pass.tape.cross_entropy(logits, &labels),
        };
        let value = pass.tape.value(loss).item();
        let grads = pass.backward(loss);
        sgd_step(&mut model.params, &grads, sgd.learning_rate);
        total += value * batch.len() as f64;
    }
    Ok(total / train.len() as f64)
}

/// Plain cross-entropy training of `model` in place, with no alterations.
pub fn train_supervised(
    model: &mut Model,
    data: &TaskData,
    epochs: usize,
    sgd: &SgdConfig,
    precision: Option<Precision>,
) -> Result<Vec<EpochRecord>> {
    sgd.check()?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sgd.seed);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let train_loss = run_epoch(model, &data.train, None, sgd, precision, &mut rng)?;
        history.push(EpochRecord {
            epoch,
            skips_remaining: model.graph.skips().len(),
            max_span: model.graph.max_span(),
            train_loss,
            eval_accuracy: model.accuracy(&data.eval, precision)?,
            alteration: None,
        });
    }
    Ok(history)
}

/// Trains a teacher from a seeded initialization. Zero epochs return the
/// initialization unchanged.
pub fn pretrain(graph: &NetworkGraph, data: &TaskData, epochs: usize, sgd: &SgdConfig) -> Result<Model> {
    let mut model = Model::init(graph.clone(), sgd.seed);
    train_supervised(&mut model, data, epochs, sgd, None)?;
    Ok(model)
}

/// Gradually alters the student's skips while distilling from a frozen
/// teacher. At every epoch `i > 0` with `i % alpha == 0` the input-most
/// remaining candidate is altered before that epoch's training.
pub fn train_hardware_aware(teacher: &Model, student: Model, plan: &TrainPlan, data: &TaskData) -> Result<TrainReport> {
    plan.validate()?;
    if data.train.is_empty() || data.eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut warnings = Vec::new();
    let candidates = candidate_count(&student.graph, plan.mode);
    if plan.total_epochs <= plan.alpha * candidates {
        let msg = format!(
            "{} epochs with alpha {} leave some of the {candidates} alterable skips untouched",
            plan.total_epochs, plan.alpha
        );
        warn!("{msg}");
        warnings.push(msg);
    }

    let teacher_probs = teacher.probabilities(&data.train.inputs, None)?;
    let mut student = student;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(plan.sgd.seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(plan.sgd.seed ^ INIT_STREAM);
    let mut epochs = Vec::with_capacity(plan.total_epochs);
    let mut alteration_epochs = Vec::new();

    for epoch in 0..plan.total_epochs {
        let mut alteration = None;
        if plan.alters_at(epoch) {
            if let Some((graph, alt)) = transforms::step(&student.graph, plan.mode) {
                info!("epoch {epoch}: altered {} ({} remaining)", alt.altered, graph.skips().len());
                student.graph = graph;
                student.params.sync_with(&student.graph, &mut init_rng);
                alteration_epochs.push(epoch);
                alteration = Some(alt);
            }
        }
        let train_loss = run_epoch(
            &mut student,
            &data.train,
            Some((&teacher_probs, &plan.loss)),
            &plan.sgd,
            plan.quantize_student,
            &mut shuffle_rng,
        )?;
        let eval_accuracy = student.accuracy(&data.eval, plan.quantize_student)?;
        debug!("epoch {epoch}: loss {train_loss:.6} accuracy {eval_accuracy:.4}");
        epochs.push(EpochRecord {
            epoch,
            skips_remaining: student.graph.skips().len(),
            max_span: student.graph.max_span(),
            train_loss,
            eval_accuracy,
            alteration,
        });
    }
    let final_accuracy = match epochs.last() {
        Some(e) => e.eval_accuracy,
        None => student.accuracy(&data.eval, plan.quantize_student)?,
    };
    Ok(TrainReport { plan: *plan, epochs, alteration_epochs, warnings, final_accuracy, student })
}

/// How many steps `mode` can take from `graph` before reaching a fixed point.
pub fn candidate_count(graph: &NetworkGraph, mode: AlterMode) -> usize {
    let mut g = graph.clone();
    let mut n = 0;
    while let Some((next, _)) = transforms::step(&g, mode) {
        g = next;
        n += 1;
    }
    n
}
