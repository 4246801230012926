//! Joint training: weighted multi-task loss, AdamW with plateau LR decay and
//! early stopping, and a grid search over loss weights.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_feature_vocab, AtomicFeature, Sentence};
use crate::decoders::cwi_class_weights;
use crate::encoder::{ExternalEmbeddings, Provider};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{Example, ForwardOptions, LossParts, LossWeights, Model, ModelConfig};
use crate::numkern::{AdamW, AdamWConfig, Parameterized};
use crate::pipeline::{forms_only, predict, PipelineConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub w_parser: f64,
    pub w_morph: f64,
    pub w_cwi: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_factor: f64,
    /// Smallest dev-loss decrease that counts as an improvement.
    pub min_delta: f64,
    /// LR reductions tolerated without improvement before stopping.
    pub max_reductions: usize,
    pub seed: u64,
    pub word_dropout: f64,
    /// Predict and score the dev set after every epoch.
    pub eval_each_epoch: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            w_parser: 2.0,
            w_morph: 1.5,
            w_cwi: 1.0,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            max_epochs: 25,
            patience: 1,
            lr_factor: 0.5,
            min_delta: 1e-4,
            max_reductions: 2,
            seed: 1,
            word_dropout: 0.05,
            eval_each_epoch: true,
            model: ModelConfig::default(),
        }
    }
}

/// Loss-weight presets per language.
pub const PRESETS: [(&str, LossWeights); 9] = [
    ("czech", LossWeights { parser: 2.0, morph: 1.5, cwi: 1.0 }),
    ("english", LossWeights { parser: 2.0, morph: 1.5, cwi: 1.0 }),
    ("hebrew", LossWeights { parser: 2.0, morph: 1.5, cwi: 1.0 }),
    ("italian", LossWeights { parser: 2.0, morph: 1.5, cwi: 1.0 }),
    ("polish", LossWeights { parser: 2.0, morph: 1.5, cwi: 1.0 }),
    ("portuguese", LossWeights { parser: 2.0, morph: 1.5, cwi: 1.0 }),
    ("serbian", LossWeights { parser: 2.0, morph: 1.5, cwi: 1.0 }),
    ("swedish", LossWeights { parser: 2.0, morph: 1.5, cwi: 1.5 }),
    ("turkish", LossWeights { parser: 2.0, morph: 2.0, cwi: 1.5 }),
];

pub fn preset(name: &str) -> Option<LossWeights> {
    let name = name.to_lowercase();
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, w)| *w)
}

/// The default tuning grid: the distinct preset triples.
pub fn default_grid() -> Vec<LossWeights> {
    let mut grid: Vec<LossWeights> = Vec::new();
    for (_, w) in PRESETS {
        if !grid.contains(&w) {
            grid.push(w);
        }
    }
    grid
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            parser: self.w_parser,
            morph: self.w_morph,
            cwi: self.w_cwi,
        }
    }

    pub fn with_weights(mut self, w: LossWeights) -> Self {
        self.w_parser = w.parser;
        self.w_morph = w.morph;
        self.w_cwi = w.cwi;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.w_parser, self.w_morph, self.w_cwi];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config(format!("loss weights {:?} must be non-negative and not all zero", w)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor {} not in (0, 1)", self.lr_factor)));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return Err(Error::Config(format!("word_dropout {} not in [0, 1)", self.word_dropout)));
        }
        self.model.validate()
    }
}

/// `w_parser·l_parser + w_morph·l_morph + w_cwi·l_cwi`.
pub fn joint_loss(l_parser: f64, l_morph: f64, l_cwi: f64, w: &LossWeights) -> Result<f64> {
    if ![l_parser, l_morph, l_cwi].iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "component losses parser={} morph={} cwi={}",
            l_parser, l_morph, l_cwi
        )));
    }
    Ok(w.parser * l_parser + w.morph * l_morph + w.cwi * l_cwi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub dev: LossParts,
    pub dev_mslas: Option<f64>,
    pub dev_las: Option<f64>,
    pub dev_feats: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub stop_reason: String,
}

/// Training sentences with optional precomputed input vectors.
pub struct Dataset<'a> {
    pub corpus: &'a [Sentence],
    pub inputs: Option<&'a ExternalEmbeddings>,
}

impl<'a> Dataset<'a> {
    pub fn new(corpus: &'a [Sentence]) -> Self {
        Dataset { corpus, inputs: None }
    }
}

fn examples(data: &Dataset, model: &Model, warned: &mut BTreeSet<AtomicFeature>) -> Result<Vec<Example>> {
    if let Some(ext) = data.inputs {
        ext.check_alignment(data.corpus)?;
    }
    let mut out = Vec::with_capacity(data.corpus.len());
    for (i, s) in data.corpus.iter().enumerate() {
        let input = data.inputs.map(|e| e.sentences[i].1.clone());
        let (ex, warnings, missing) = Example::from_sentence(s, &model.vocab, input);
        for w in warnings {
            log::warn!("sentence {}: {}", w.sent_id, w.message);
        }
        for f in missing {
            if warned.insert(f.clone()) {
                log::warn!("feature {} is not in the training vocabulary; it cannot be predicted", f);
            }
        }
        if !ex.forms.is_empty() {
            out.push(ex);
        }
    }
    Ok(out)
}

/// Mean loss parts over examples, dropout off.
pub fn mean_loss(model: &Model, examples: &[Example], weights: LossWeights) -> Result<LossParts> {
    let opts = ForwardOptions {
        weights,
        word_dropout: 0.0,
        training: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sum = LossParts::default();
    for ex in examples {
        let (p, _) = model.forward(ex, &opts, &mut rng, None)?;
        sum.parser += p.parser;
        sum.morph += p.morph;
        sum.cwi += p.cwi;
        sum.total += p.total;
    }
    let n = examples.len().max(1) as f64;
    Ok(LossParts {
        parser: sum.parser / n,
        morph: sum.morph / n,
        cwi: sum.cwi / n,
        total: sum.total / n,
    })
}

/// Build a fresh model whose vocabulary and class weights come from `train`.
pub fn init_model(train: &Dataset, config: &TrainConfig) -> Result<Model> {
    config.validate()?;
    if train.corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let mut model_config = config.model.clone();
    if let Some(ext) = train.inputs {
        model_config.encoder.provider = Provider::ExternalFile;
        model_config.encoder.dim = ext.dim;
    } else if model_config.encoder.provider == Provider::ExternalFile {
        return Err(Error::Config("external provider selected but no embeddings given".into()));
    }
    let mut vocab = build_feature_vocab(train.corpus)?;
    vocab.frozen = true;
    let tokens = train.corpus.iter().flat_map(|s| &s.tokens);
    let content = tokens.clone().filter(|t| t.is_content).count();
    let function = tokens.count() - content;
    Model::new(model_config, vocab, cwi_class_weights(content, function))
}

/// Train with early stopping on dev `L_total`; returns the best-epoch model.
pub fn train(train: &[Sentence], dev: &[Sentence], config: &TrainConfig) -> Result<(Model, TrainLog)> {
    train_datasets(&Dataset::new(train), &Dataset::new(dev), config)
}

pub fn train_datasets(train: &Dataset, dev: &Dataset, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    let mut model = init_model(train, config)?;
    let mut warned = BTreeSet::new();
    let train_ex = examples(train, &model, &mut warned)?;
    let dev_ex = examples(dev, &model, &mut warned)?;
    if dev_ex.is_empty() {
        log::warn!("dev corpus is empty; the schedule follows the training loss");
    }
    let weights = config.weights();
    let opts = ForwardOptions {
        weights,
        word_dropout: config.word_dropout,
        training: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut log = TrainLog::default();
    let mut best_loss = f64::INFINITY;
    let mut best = model.clone();
    let mut bad = 0;
    let mut reductions = 0;
    log.stop_reason = "max_epochs".into();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_sum = LossParts::default();
        for batch in order.chunks(config.batch_size) {
            model.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (p, tape) = model.forward(&train_ex[i], &opts, &mut rng, None)?;
                train_sum.parser += p.parser;
                train_sum.morph += p.morph;
                train_sum.cwi += p.cwi;
                train_sum.total += p.total;
                model.backward(tape, scale)?;
            }
            opt.step(&mut model)?;
        }
        let n = train_ex.len().max(1) as f64;
        let train_mean = LossParts {
            parser: train_sum.parser / n,
            morph: train_sum.morph / n,
            cwi: train_sum.cwi / n,
            total: train_sum.total / n,
        };
        let dev_loss = if dev_ex.is_empty() {
            mean_loss(&model, &train_ex, weights)?
        } else {
            mean_loss(&model, &dev_ex, weights)?
        };
        let mut entry = EpochLog {
            epoch,
            lr: opt.config.lr,
            train: train_mean,
            dev: dev_loss,
            dev_mslas: None,
            dev_las: None,
            dev_feats: None,
        };
        if config.eval_each_epoch && !dev.corpus.is_empty() {
            let input: Vec<Sentence> = dev.corpus.iter().map(forms_only).collect();
            let (sys, _) = predict(&model, &input, dev.inputs, &PipelineConfig::default())?;
            let r = evaluate(dev.corpus, &sys)?;
            entry.dev_mslas = Some(r.mslas.f1);
            entry.dev_las = Some(r.las.f1);
            entry.dev_feats = Some(r.feats.f1);
        }
        log::info!(
            "epoch {} lr {:.2e} train {:.4} dev {:.4} mslas {:?} las {:?} feats {:?}",
            epoch,
            entry.lr,
            entry.train.total,
            entry.dev.total,
            entry.dev_mslas,
            entry.dev_las,
            entry.dev_feats
        );
        log.epochs.push(entry);
        log.stop_epoch = epoch;

        if dev_loss.total < best_loss - config.min_delta {
            best_loss = dev_loss.total;
            best = model.clone();
            log.best_epoch = epoch;
            bad = 0;
            reductions = 0;
        } else {
            bad += 1;
            if bad >= config.patience.max(1) {
                if reductions >= config.max_reductions {
                    log.stop_reason = format!("no improvement after {} LR reductions", reductions);
                    break;
                }
                opt.config.lr *= config.lr_factor;
                reductions += 1;
                bad = 0;
            }
        }
    }
    best.zero_grads();
    Ok((best, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub weights: LossWeights,
    pub dev_mslas: f64,
    pub dev_las: f64,
    pub dev_feats: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: TrainConfig,
    /// One row per grid entry, in grid order.
    pub rows: Vec<GridRow>,
}

/// Train one model per weight triple and keep the best dev MSLAS; ties go to
/// the earliest triple.
pub fn grid_search_weights(
    train_corpus: &[Sentence],
    dev: &[Sentence],
    base: &TrainConfig,
    grid: &[LossWeights],
) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::Config("weight grid is empty".into()));
    }
    let score_on = if dev.is_empty() { train_corpus } else { dev };
    let mut rows = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, w) in grid.iter().enumerate() {
        let config = base.clone().with_weights(*w);
        let (model, _) = train(train_corpus, dev, &config)?;
        let input: Vec<Sentence> = score_on.iter().map(forms_only).collect();
        let (sys, _) = predict(&model, &input, None, &PipelineConfig::default())?;
        let r = evaluate(score_on, &sys)?;
        log::info!("grid {:?}: dev MSLAS {:.1}", w, r.mslas.f1);
        if best.is_none_or(|(_, b)| r.mslas.f1 > b) {
            best = Some((i, r.mslas.f1));
        }
        rows.push(GridRow {
            weights: *w,
            dev_mslas: r.mslas.f1,
            dev_las: r.las.f1,
            dev_feats: r.feats.f1,
        });
    }
    let (bi, _) = best.expect("grid is non-empty");
    Ok(GridResult {
        best: base.clone().with_weights(grid[bi]),
        rows,
    })
}
