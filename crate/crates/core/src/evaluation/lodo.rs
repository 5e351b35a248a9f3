//! Leave-one-dataset-out transfer experiments.
//!
//! The encoders are pretrained once on every dataset but the held-out one.
//! The held-out dataset is then split into contiguous folds and, for each
//! training percentage, fold and seed, every requested variant is fine-tuned
//! on the same label subsample and scored on the same test block.

use crate::downstream::{
    argmax, finetune, nextk_predict, nextk_target, AdlHead, EventMultiset, EventType, Example, FinetuneConfig, Head,
    NextKHead, Target,
};
use crate::embedding::Lexicon;
use crate::error::{config_err, data_err, Result};
use crate::event_encoder::{encode_events, EventCode};
use crate::evaluation::metrics::{multiset_prf, weighted_f1};
use crate::evaluation::report::{MetricReport, MetricRow};
use crate::evaluation::splits::{kfold_splits, subsample_training, Fold};
use crate::ingestion::Dataset;
use crate::model::{Model, ModelConfig};
use crate::pretraining::{pretrain, DatasetWindows, PretrainConfig, PretrainReport};
use crate::segmentation::{segment_events, window_starts, Window};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// Pretrained encoders, fine-tuned.
    Pretrained,
    /// Same architecture from random initialization.
    Control,
    /// Pretrained event encoder with the context encoder switched off.
    NoContext,
    /// Most frequent training class, or mean training counts for next-k.
    Majority,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Pretrained, Variant::Control, Variant::NoContext, Variant::Majority];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Pretrained => "pretrained",
            Variant::Control => "control",
            Variant::NoContext => "no_context",
            Variant::Majority => "majority",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Adl,
    NextK(usize),
}

impl Task {
    pub fn name(self) -> String {
        match self {
            Task::Adl => "adl".into(),
            Task::NextK(k) => format!("next{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub held_out: String,
    pub pcts: Vec<f64>,
    pub folds: usize,
    pub adl: bool,
    pub k_values: Vec<usize>,
    /// Fine-tuning seeds; each also seeds the label subsample and the
    /// control's initialization.
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl EvalProtocol {
    pub fn new(held_out: &str) -> Self {
        Self {
            held_out: held_out.to_string(),
            pcts: vec![5.0, 10.0, 15.0, 30.0],
            folds: 5,
            adl: true,
            k_values: vec![10, 30],
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.pcts.iter().find(|p| !(**p > 0.0 && **p <= 100.0)) {
            return Err(config_err(format!("training percentage {p} outside (0, 100]")));
        }
        if self.folds < 2 {
            return Err(config_err("folds must be at least 2"));
        }
        if self.k_values.contains(&0) {
            return Err(config_err("k must be at least 1"));
        }
        if self.pcts.is_empty() || self.seeds.is_empty() || self.variants.is_empty() {
            return Err(config_err("protocol needs at least one percentage, seed and variant"));
        }
        if !self.adl && self.k_values.is_empty() {
            return Err(config_err("protocol has no task"));
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<Task> {
        let mut t = Vec::new();
        if self.adl {
            t.push(Task::Adl);
        }
        t.extend(self.k_values.iter().map(|&k| Task::NextK(k)));
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LodoConfig {
    pub model: ModelConfig,
    /// Events per window.
    pub window: usize,
    pub overlap: usize,
    pub pretrain: PretrainConfig,
    /// Strategy and optimizer settings; the seed is taken from the protocol.
    pub finetune: FinetuneConfig,
    /// Initialization seed of the pretrained model.
    pub seed: u64,
}

impl Default for LodoConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            window: 30,
            overlap: 29,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            seed: 0,
        }
    }
}

/// One line of the prediction dump.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionRow {
    /// `p{pct}-f{fold}-s{seed}-w{start}`.
    pub window_id: String,
    /// `{task}.{variant}`.
    pub task: String,
    pub prediction: String,
    pub target: String,
}

pub fn predictions_csv(rows: &[PredictionRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["window_id", "task", "prediction", "target"]).map_err(|e| data_err(e.to_string()))?;
    for r in rows {
        w.write_record([&r.window_id, &r.task, &r.prediction, &r.target]).map_err(|e| data_err(e.to_string()))?;
    }
    w.into_inner().map_err(|e| data_err(e.to_string()))
}

/// Codes and windows of one dataset. Interns the dataset's tokens.
pub fn prepare_windows(
    dataset: &Dataset,
    lexicon: &mut Lexicon,
    window: usize,
    overlap: usize,
) -> Result<DatasetWindows> {
    let codes = encode_events(&dataset.stream.events, lexicon, dataset.utc_offset)?;
    let starts = window_starts(codes.len(), window, overlap)?;
    Ok(DatasetWindows { name: dataset.name.clone(), codes, starts, window })
}

/// Pretrains a fresh model on every dataset except `held_out`.
pub fn pretrain_excluding(
    datasets: &[Dataset],
    held_out: &str,
    lexicon: &mut Lexicon,
    config: &LodoConfig,
) -> Result<(Model, PretrainReport)> {
    let corpus = datasets
        .iter()
        .filter(|d| d.name != held_out)
        .map(|d| prepare_windows(d, lexicon, config.window, config.overlap))
        .collect::<Result<Vec<_>>>()?;
    if corpus.is_empty() {
        return Err(data_err("no dataset left for pretraining"));
    }
    let mut model = Model::new(config.model, lexicon.dim(), config.seed)?;
    let report = pretrain(&mut model, lexicon, &corpus, &config.pretrain)?;
    if report.datasets_seen.iter().any(|n| n == held_out) {
        return Err(data_err(format!("held-out dataset {held_out} reached pretraining")));
    }
    Ok((model, report))
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub report: MetricReport,
    pub predictions: Vec<PredictionRow>,
}

#[derive(Clone, Debug)]
pub struct LodoOutcome {
    pub transfer: TransferOutcome,
    pub pretrain: PretrainReport,
}

/// Pretrains without the held-out dataset, then evaluates transfer to it.
pub fn lodo_run(
    datasets: &[Dataset],
    lexicon: &mut Lexicon,
    protocol: &EvalProtocol,
    config: &LodoConfig,
) -> Result<LodoOutcome> {
    protocol.validate()?;
    if datasets.len() < 2 {
        return Err(data_err("leave-one-out needs at least 2 datasets"));
    }
    let held_out = datasets
        .iter()
        .find(|d| d.name == protocol.held_out)
        .ok_or_else(|| data_err(format!("unknown held-out dataset {:?}", protocol.held_out)))?;
    let (model, pretrain) = pretrain_excluding(datasets, &protocol.held_out, lexicon, config)?;
    let transfer = evaluate_transfer(&model, held_out, lexicon, protocol, config)?;
    Ok(LodoOutcome { transfer, pretrain })
}

/// Labeled windows of one task, sorted by start.
struct TaskData {
    windows: Vec<usize>,
    /// Class index of each window (activity task only).
    labels: Vec<usize>,
    /// Printable target of each window.
    shown: Vec<String>,
    horizon: usize,
}

fn task_data(task: Task, dataset: &Dataset, windows: &[Window], classes: &[String]) -> Result<TaskData> {
    let events = &dataset.stream.events;
    let mut out = TaskData { windows: Vec::new(), labels: Vec::new(), shown: Vec::new(), horizon: 0 };
    match task {
        Task::Adl => {
            for (i, w) in windows.iter().enumerate() {
                if let Some(label) = &w.label {
                    let c = classes
                        .binary_search_by(|c| c.as_str().cmp(label))
                        .map_err(|_| data_err(format!("unknown activity label {label:?}")))?;
                    out.windows.push(i);
                    out.labels.push(c);
                    out.shown.push(label.to_string());
                }
            }
        }
        Task::NextK(k) => {
            out.horizon = k;
            for (i, w) in windows.iter().enumerate() {
                if let Some(t) = nextk_target(events, w.end(), k) {
                    out.windows.push(i);
                    out.shown.push(t.to_string());
                }
            }
        }
    }
    Ok(out)
}

fn run_seed(seed: u64, fold: usize, pct: f64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [fold as u64, pct.to_bits()] {
        h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17);
    }
    h
}

/// Held-out dataset in model-ready form.
struct HeldOut<'a> {
    dataset: &'a Dataset,
    codes: Vec<EventCode>,
    windows: Vec<Window>,
    vocab: Vec<EventType>,
}

impl<'a> HeldOut<'a> {
    fn new(
        pretrained: &Model,
        dataset: &'a Dataset,
        lexicon: &mut Lexicon,
        protocol: &EvalProtocol,
        config: &LodoConfig,
    ) -> Result<Self> {
        protocol.validate()?;
        config.finetune.validate()?;
        if pretrained.d_text != lexicon.dim() || pretrained.config.d != config.model.d {
            return Err(config_err("pretrained model does not match the configured dimensions"));
        }
        if protocol.adl && dataset.activity_set.len() < 2 {
            return Err(data_err(format!("{} has fewer than 2 activities", dataset.name)));
        }
        Ok(Self {
            dataset,
            codes: encode_events(&dataset.stream.events, lexicon, dataset.utc_offset)?,
            windows: segment_events(&dataset.stream, 0, config.window, config.overlap)?,
            vocab: NextKHead::vocabulary(dataset.sensors.keys().map(String::as_str)),
        })
    }

    fn task(&self, task: Task, folds: usize) -> Result<(TaskData, Vec<Fold>)> {
        let data = task_data(task, self.dataset, &self.windows, &self.dataset.activity_set)?;
        let spans: Vec<(usize, usize)> =
            data.windows.iter().map(|&i| (self.windows[i].start, self.windows[i].end())).collect();
        let folds = kfold_splits(&spans, folds, data.horizon)?;
        if let Some(f) = folds.iter().position(|f| f.train.is_empty()) {
            return Err(data_err(format!("fold {f} of {} has no training windows", task.name())));
        }
        Ok((data, folds))
    }
}

/// Fine-tunes and scores every variant of the protocol on the held-out
/// dataset, starting from `pretrained` for the pretrained variants.
pub fn evaluate_transfer(
    pretrained: &Model,
    held_out: &Dataset,
    lexicon: &mut Lexicon,
    protocol: &EvalProtocol,
    config: &LodoConfig,
) -> Result<TransferOutcome> {
    let ho = HeldOut::new(pretrained, held_out, lexicon, protocol, config)?;
    let lexicon: &Lexicon = lexicon;
    let mut report = MetricReport::default();
    let mut predictions = Vec::new();
    for task in protocol.tasks() {
        let (data, folds) = ho.task(task, protocol.folds)?;
        let ctx = RunContext { task, data: &data, held_out: &ho, lexicon, config };
        for &pct in &protocol.pcts {
            for (f, fold) in folds.iter().enumerate() {
                for &seed in &protocol.seeds {
                    let train = subsample_training(&fold.train, pct, run_seed(seed, f, pct))?;
                    for &variant in &protocol.variants {
                        let scored = match variant {
                            Variant::Majority => ctx.baseline(&train, &fold.test)?,
                            _ => {
                                let (model, head, _) = ctx.fit(pretrained, variant, &train, seed)?;
                                ctx.score(&model, &head, &fold.test)?
                            }
                        };
                        ctx.record(&mut report, &mut predictions, &scored, variant, pct, f, seed, &fold.test);
                    }
                }
            }
        }
    }
    Ok(TransferOutcome { report, predictions })
}

/// A fine-tuned copy of the pretrained model with its head.
#[derive(Clone, Debug)]
pub struct FinetunedTask {
    pub task: Task,
    pub model: Model,
    pub head: Head,
    /// Mean loss of each epoch.
    pub losses: Vec<f32>,
}

/// Fine-tunes the pretrained model on `pct` percent of the windows before
/// the last time block of the held-out dataset and scores it on that block,
/// once per task of the protocol. Uses the first protocol seed.
pub fn holdout_finetune(
    pretrained: &Model,
    held_out: &Dataset,
    lexicon: &mut Lexicon,
    protocol: &EvalProtocol,
    pct: f64,
    config: &LodoConfig,
) -> Result<(Vec<FinetunedTask>, TransferOutcome)> {
    let single = EvalProtocol { pcts: vec![pct], variants: vec![Variant::Pretrained], ..protocol.clone() };
    let ho = HeldOut::new(pretrained, held_out, lexicon, &single, config)?;
    let lexicon: &Lexicon = lexicon;
    let seed = single.seeds[0];
    let mut tuned = Vec::new();
    let mut report = MetricReport::default();
    let mut predictions = Vec::new();
    for task in single.tasks() {
        let (data, folds) = ho.task(task, single.folds)?;
        let f = folds.len() - 1;
        let fold = &folds[f];
        let ctx = RunContext { task, data: &data, held_out: &ho, lexicon, config };
        let train = subsample_training(&fold.train, pct, run_seed(seed, f, pct))?;
        let (model, head, losses) = ctx.fit(pretrained, Variant::Pretrained, &train, seed)?;
        let scored = ctx.score(&model, &head, &fold.test)?;
        ctx.record(&mut report, &mut predictions, &scored, Variant::Pretrained, pct, f, seed, &fold.test);
        tuned.push(FinetunedTask { task, model, head, losses });
    }
    Ok((tuned, TransferOutcome { report, predictions }))
}

struct Scored {
    metrics: Vec<(&'static str, f64)>,
    predictions: Vec<String>,
}

struct RunContext<'a> {
    task: Task,
    data: &'a TaskData,
    held_out: &'a HeldOut<'a>,
    lexicon: &'a Lexicon,
    config: &'a LodoConfig,
}

impl RunContext<'_> {
    fn window(&self, j: usize) -> &Window {
        &self.held_out.windows[self.data.windows[j]]
    }

    fn nextk_truth(&self, j: usize, k: usize) -> EventMultiset {
        nextk_target(&self.held_out.dataset.stream.events, self.window(j).end(), k).expect("eligible window")
    }

    fn classes(&self) -> &[String] {
        &self.held_out.dataset.activity_set
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        report: &mut MetricReport,
        predictions: &mut Vec<PredictionRow>,
        scored: &Scored,
        variant: Variant,
        pct: f64,
        fold: usize,
        seed: u64,
        test: &[usize],
    ) {
        for &(metric, value) in &scored.metrics {
            report.push(MetricRow {
                dataset: self.held_out.dataset.name.clone(),
                task: self.task.name(),
                pct,
                fold,
                seed,
                metric: format!("{}.{metric}", variant.as_str()),
                value,
            });
        }
        for (shown, &j) in scored.predictions.iter().zip(test) {
            predictions.push(PredictionRow {
                window_id: format!("p{pct}-f{fold}-s{seed}-w{}", self.window(j).start),
                task: format!("{}.{}", self.task.name(), variant.as_str()),
                prediction: shown.clone(),
                target: self.data.shown[j].clone(),
            });
        }
    }

    /// `train` indexes into the task's window list.
    fn fit(&self, pretrained: &Model, variant: Variant, train: &[usize], seed: u64) -> Result<(Model, Head, Vec<f32>)> {
        let mut model = match variant {
            Variant::Control => Model::new(self.config.model, pretrained.d_text, seed)?,
            Variant::Pretrained | Variant::NoContext => pretrained.clone(),
            Variant::Majority => return Err(config_err("the majority baseline has no model")),
        };
        if variant == Variant::NoContext {
            model.config.context_enabled = false;
        }
        let head_seed = seed.wrapping_add(0x5eed);
        let head = match self.task {
            Task::Adl => Head::Adl(AdlHead::attach(&mut model, self.classes().to_vec(), head_seed)?),
            Task::NextK(k) => Head::NextK(NextKHead::attach(&mut model, self.held_out.vocab.clone(), k, head_seed)?),
        };
        let examples = train
            .iter()
            .map(|&j| {
                let target = match &head {
                    Head::Adl(_) => Target::Class(self.data.labels[j]),
                    Head::NextK(h) => Target::Counts(h.count_vector(&self.nextk_truth(j, h.k))?),
                };
                Ok(Example { start: self.window(j).start, target })
            })
            .collect::<Result<Vec<_>>>()?;
        let ft = FinetuneConfig { seed, ..self.config.finetune };
        let losses = finetune(&mut model, &head, self.lexicon, &self.held_out.codes, self.config.window, &examples, &ft)?;
        Ok((model, head, losses))
    }

    fn score(&self, model: &Model, head: &Head, test: &[usize]) -> Result<Scored> {
        let starts: Vec<usize> = test.iter().map(|&j| self.window(j).start).collect();
        let pooled = model.pooled_embeddings(self.lexicon, &self.held_out.codes, self.config.window, &starts)?;
        match head {
            Head::Adl(h) => {
                let pred: Vec<usize> = h.predict(&model.store, &pooled)?.into_iter().map(|(_, c)| c).collect();
                self.score_adl(&pred, test)
            }
            Head::NextK(h) => {
                let pred = h.predict(&model.store, &pooled)?;
                self.score_nextk(&pred, test, h.k)
            }
        }
    }

    fn baseline(&self, train: &[usize], test: &[usize]) -> Result<Scored> {
        match self.task {
            Task::Adl => {
                let mut counts = vec![0.0f32; self.classes().len()];
                for &j in train {
                    counts[self.data.labels[j]] += 1.0;
                }
                self.score_adl(&vec![argmax(&counts); test.len()], test)
            }
            Task::NextK(k) => {
                let vocab = &self.held_out.vocab;
                let mut mean = vec![0.0f32; vocab.len()];
                for &j in train {
                    for (t, &c) in &self.nextk_truth(j, k).counts {
                        let i = vocab.binary_search(t).expect("vocabulary covers the dataset");
                        mean[i] += c as f32 / train.len() as f32;
                    }
                }
                let pred = nextk_predict(&mean, vocab, k as u32);
                self.score_nextk(&vec![pred; test.len()], test, k)
            }
        }
    }

    fn score_adl(&self, pred: &[usize], test: &[usize]) -> Result<Scored> {
        let truth: Vec<usize> = test.iter().map(|&j| self.data.labels[j]).collect();
        let f1 = weighted_f1(pred, &truth)?;
        Ok(Scored {
            metrics: vec![("weighted_f1", f1)],
            predictions: pred.iter().map(|&c| self.classes()[c].clone()).collect(),
        })
    }

    fn score_nextk(&self, pred: &[EventMultiset], test: &[usize], k: usize) -> Result<Scored> {
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for (m, &j) in pred.iter().zip(test) {
            let s = multiset_prf(&self.nextk_truth(j, k), m)?;
            p += s.precision;
            r += s.recall;
            f += s.f1;
        }
        let n = test.len() as f64;
        Ok(Scored {
            metrics: vec![("precision", p / n), ("recall", r / n), ("f1", f / n)],
            predictions: pred.iter().map(EventMultiset::to_string).collect(),
        })
    }
}
