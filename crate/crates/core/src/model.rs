//! The joint model: encoder, shared layer and the three heads, with the
//! per-sentence multi-task loss and a plain-text checkpoint format.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSet, FeatureVocabulary, Sentence, Warning, CONTENT, FUNCTION};
use crate::decoders::{
    cwi_loss, cwi_probabilities, decode_relations, feats_loss, gold_multi_hot, predict_feats,
    rel_loss, ArcCache, BiaffineHead, CwiCache, CwiHead, FeatsHead, RelCache,
};
use crate::encoder::{
    contextualize, contextualize_backward, EncoderConfig, HashedEmbedding, Provider, SharedCache,
    SharedLayer,
};
use crate::error::{Error, Result};
use crate::numkern::{word_dropout, DropoutMask, Matrix, Param, Parameterized};
use crate::treecrf::{crf_nll_and_grad, is_projective_tree, viterbi_decode, ArcScores};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub shared_hidden: usize,
    pub shared_dropout: f64,
    pub cwi_hidden: usize,
    pub cwi_window: usize,
    pub cwi_dropout: f64,
    pub arc_hidden: usize,
    pub rel_hidden: usize,
    pub feats_threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            shared_hidden: 512,
            shared_dropout: 0.1,
            cwi_hidden: 256,
            cwi_window: 1,
            cwi_dropout: 0.5,
            arc_hidden: 256,
            rel_hidden: 128,
            feats_threshold: 0.5,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and demos.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                dim: 8,
                hash_buckets: 1 << 12,
                window: 1,
                provider: Provider::HashedFeatures,
            },
            shared_hidden: 12,
            cwi_hidden: 6,
            arc_hidden: 6,
            rel_hidden: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for (name, v) in [
            ("shared_hidden", self.shared_hidden),
            ("cwi_hidden", self.cwi_hidden),
            ("arc_hidden", self.arc_hidden),
            ("rel_hidden", self.rel_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        for (name, r) in [("shared_dropout", self.shared_dropout), ("cwi_dropout", self.cwi_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{} {} not in [0, 1)", name, r)));
            }
        }
        if !(self.feats_threshold > 0.0 && self.feats_threshold < 1.0) {
            return Err(Error::Config("feats_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Weights of the three task losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub parser: f64,
    pub morph: f64,
    pub cwi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            parser: 2.0,
            morph: 1.5,
            cwi: 1.0,
        }
    }
}

/// One sentence prepared for the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sent_id: String,
    pub forms: Vec<String>,
    /// Precomputed input vectors for the external provider.
    pub input: Option<Matrix>,
    pub cwi: Vec<usize>,
    /// Token positions (0-based) of the gold content words.
    pub content: Vec<usize>,
    /// Gold heads in content space (0 = root, k = k-th content word); `None`
    /// when the gold tree cannot be used by the CRF.
    pub heads: Option<Vec<usize>>,
    pub rels: Vec<Option<usize>>,
    /// m×V multi-hot targets.
    pub feats: Matrix,
}

impl Example {
    pub fn from_sentence(
        s: &Sentence,
        vocab: &FeatureVocabulary,
        input: Option<Matrix>,
    ) -> (Example, Vec<Warning>, FeatureSet) {
        let mut warnings = Vec::new();
        let mut missing = FeatureSet::new();
        let warn = |w: &mut Vec<Warning>, m: String| {
            w.push(Warning {
                sent_id: s.sent_id.clone(),
                message: m,
            })
        };
        let content: Vec<usize> = (0..s.tokens.len()).filter(|&i| s.tokens[i].is_content).collect();
        let mut position = vec![None; s.tokens.len() + 1];
        for (k, &i) in content.iter().enumerate() {
            position[s.tokens[i].id] = Some(k + 1);
        }
        let heads: Option<Vec<usize>> = content
            .iter()
            .map(|&i| match s.tokens[i].head {
                Some(0) => Some(0),
                Some(h) => position.get(h).copied().flatten(),
                None => None,
            })
            .collect();
        let heads = match heads {
            Some(h) if !h.is_empty() && !is_projective_tree(&h) => {
                warn(&mut warnings, "gold tree is not projective; parser loss skipped".into());
                None
            }
            None => {
                warn(&mut warnings, "incomplete gold tree; parser loss skipped".into());
                None
            }
            h => h,
        };
        let rels = content
            .iter()
            .map(|&i| s.tokens[i].deprel.as_deref().and_then(|d| vocab.deprel_index(d)))
            .collect();
        let mut feats = Matrix::zeros(content.len(), vocab.num_features());
        for (k, &i) in content.iter().enumerate() {
            let (t, miss) = gold_multi_hot(&s.tokens[i].feats, vocab);
            feats.row_mut(k).copy_from_slice(&t);
            missing.extend(miss);
        }
        let ex = Example {
            sent_id: s.sent_id.clone(),
            forms: s.tokens.iter().map(|t| t.form.clone()).collect(),
            input,
            cwi: s
                .tokens
                .iter()
                .map(|t| if t.is_content { CONTENT } else { FUNCTION })
                .collect(),
            content,
            heads,
            rels,
            feats,
        };
        (ex, warnings, missing)
    }
}

/// Component losses of one sentence, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub parser: f64,
    pub morph: f64,
    pub cwi: f64,
    pub total: f64,
}

/// Instrumentation of a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub shared_passes: usize,
    /// Token positions handed to the parser and feats heads.
    pub content_rows: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub weights: LossWeights,
    pub word_dropout: f64,
    pub training: bool,
}

/// Saved activations of one forward pass, consumed by [`Model::backward`].
pub struct Tape {
    used: Vec<Vec<u32>>,
    word_mask: DropoutMask,
    shared: SharedCache,
    cwi: CwiCache,
    d_cwi: Matrix,
    content: Vec<usize>,
    hc: Matrix,
    d_feats: Option<Matrix>,
    arc: Option<(ArcCache, Matrix, RelCache, Matrix)>,
    weights: LossWeights,
    n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: FeatureVocabulary,
    pub class_weights: [f64; 2],
    pub embedding: HashedEmbedding,
    pub shared: SharedLayer,
    pub cwi: CwiHead,
    pub parser: BiaffineHead,
    pub feats: FeatsHead,
}

impl Parameterized for Model {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (k, p) in self.embedding.rows.iter_mut() {
            f(&format!("embed.{}", k), p);
        }
        self.shared.dense.visit("shared", f);
        self.cwi.visit("cwi", f);
        self.parser.visit("parser", f);
        self.feats.visit("feats", f);
    }
}

impl Model {
    pub fn new(config: ModelConfig, vocab: FeatureVocabulary, class_weights: [f64; 2]) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let e = &config.encoder;
        let embed_seed = rng.gen();
        let shared = SharedLayer::new(e.context_dim(), config.shared_hidden, config.shared_dropout, &mut rng);
        let cwi = CwiHead::new(config.shared_hidden, config.cwi_hidden, config.cwi_window, config.cwi_dropout, &mut rng);
        let parser = BiaffineHead::new(
            config.shared_hidden,
            config.arc_hidden,
            config.rel_hidden,
            vocab.num_deprels(),
            &mut rng,
        );
        let feats = FeatsHead::new(config.shared_hidden, vocab.num_features(), config.feats_threshold, &mut rng);
        Ok(Model {
            embedding: HashedEmbedding::new(e.dim, e.hash_buckets, embed_seed),
            config,
            vocab,
            class_weights,
            shared,
            cwi,
            parser,
            feats,
        })
    }

    fn embed(&self, forms: &[&str], input: Option<&Matrix>) -> Result<(Matrix, Vec<Vec<u32>>)> {
        if forms.is_empty() {
            return Err(Error::Config("cannot encode an empty sentence".into()));
        }
        match (self.config.encoder.provider, input) {
            (Provider::HashedFeatures, _) => self.embedding.encode(forms),
            (Provider::ExternalFile, Some(m)) => {
                if m.shape() != (forms.len(), self.config.encoder.dim) {
                    return Err(Error::Alignment(format!(
                        "external input {:?} for {} tokens of dim {}",
                        m.shape(),
                        forms.len(),
                        self.config.encoder.dim
                    )));
                }
                Ok((m.clone(), Vec::new()))
            }
            (Provider::ExternalFile, None) => {
                Err(Error::Config("external provider needs precomputed vectors".into()))
            }
        }
    }

    /// Shared representation at inference time (no dropout).
    pub fn shared_repr(&self, forms: &[&str], input: Option<&Matrix>) -> Result<Matrix> {
        let (e, _) = self.embed(forms, input)?;
        let x = contextualize(&e, self.config.encoder.window);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.shared.forward(&x, &mut rng, false)?.0)
    }

    pub fn cwi_probs(&self, h: &Matrix) -> Result<Vec<[f64; 2]>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(cwi_probabilities(&self.cwi.forward(h, &mut rng, false)?.0))
    }

    pub fn arc_scores(&self, h: &Matrix, content: &[usize]) -> Result<ArcScores> {
        Ok(self.parser.arc_scores(&h.select_rows(content))?.0)
    }

    /// Heads (content space), relation indices and feature sets of the given rows.
    pub fn parse_content(
        &self,
        h: &Matrix,
        content: &[usize],
    ) -> Result<(Vec<usize>, Vec<usize>, Vec<FeatureSet>)> {
        let hc = h.select_rows(content);
        let (scores, _) = self.parser.arc_scores(&hc)?;
        let heads = viterbi_decode(&scores)?;
        let rels = if self.vocab.num_deprels() == 0 {
            vec![usize::MAX; heads.len()]
        } else {
            let (logits, _) = self.parser.rel_scores(&hc, &heads)?;
            decode_relations(&logits, &heads, &self.vocab)
        };
        let logits = self.feats.forward(&hc)?;
        let feats = (0..logits.rows)
            .map(|i| predict_feats(logits.row(i), &self.vocab, self.feats.threshold))
            .collect();
        Ok((heads, rels, feats))
    }

    /// Joint loss of one sentence, keeping what the backward pass needs.
    pub fn forward<R: Rng>(
        &self,
        ex: &Example,
        opts: &ForwardOptions,
        rng: &mut R,
        trace: Option<&mut Trace>,
    ) -> Result<(LossParts, Tape)> {
        let forms: Vec<&str> = ex.forms.iter().map(String::as_str).collect();
        let (mut e, used) = self.embed(&forms, ex.input.as_ref())?;
        let word_mask = word_dropout(&mut e, opts.word_dropout, rng, opts.training)?;
        let x = contextualize(&e, self.config.encoder.window);
        let (h, shared) = self.shared.forward(&x, rng, opts.training)?;
        if let Some(t) = trace {
            t.shared_passes += 1;
            t.content_rows = ex.content.clone();
        }
        let (cl, cwi) = self.cwi.forward(&h, rng, opts.training)?;
        let (l_cwi, d_cwi) = cwi_loss(&cl, &ex.cwi, &self.class_weights)?;

        let m = ex.content.len();
        let hc = h.select_rows(&ex.content);
        let mut parts = LossParts {
            cwi: l_cwi,
            ..Default::default()
        };
        let mut d_feats = None;
        let mut arc = None;
        if m > 0 {
            let (lf, df) = feats_loss(&self.feats.forward(&hc)?, &ex.feats)?;
            parts.morph = lf;
            d_feats = Some(df);
            if let Some(heads) = &ex.heads {
                let (scores, acache) = self.parser.arc_scores(&hc)?;
                let (nll, mut ds) = crf_nll_and_grad(&scores, heads)?;
                let (rl, rcache) = self.parser.rel_scores(&hc, heads)?;
                let (lr, mut dr) = rel_loss(&rl, &ex.rels)?;
                parts.parser = (nll + lr) / m as f64;
                ds.scale(1.0 / m as f64);
                dr.scale(1.0 / m as f64);
                arc = Some((acache, ds, rcache, dr));
            }
        }
        let w = opts.weights;
        parts.total = w.parser * parts.parser + w.morph * parts.morph + w.cwi * parts.cwi;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "sentence {}: losses {:?}",
                ex.sent_id, parts
            )));
        }
        Ok((
            parts,
            Tape {
                used,
                word_mask,
                shared,
                cwi,
                d_cwi,
                content: ex.content.clone(),
                hc,
                d_feats,
                arc,
                weights: w,
                n: forms.len(),
            },
        ))
    }

    /// Accumulate `scale ·` gradient of the weighted loss into the parameters.
    pub fn backward(&mut self, tape: Tape, scale: f64) -> Result<()> {
        let w = tape.weights;
        let mut d_cwi = tape.d_cwi;
        d_cwi.scale(scale * w.cwi);
        let mut dh = self.cwi.backward(&tape.cwi, &d_cwi)?;
        if !tape.content.is_empty() {
            let mut dhc = Matrix::zeros(tape.hc.rows, tape.hc.cols);
            if let Some(mut df) = tape.d_feats {
                df.scale(scale * w.morph);
                dhc.add_assign(&self.feats.backward(&tape.hc, &df)?);
            }
            if let Some((acache, mut ds, rcache, mut dr)) = tape.arc {
                ds.scale(scale * w.parser);
                dr.scale(scale * w.parser);
                dhc.add_assign(&self.parser.arc_backward(&acache, &ds)?);
                dhc.add_assign(&self.parser.rel_backward(&rcache, &dr)?);
            }
            dh.scatter_add_rows(&tape.content, &dhc);
        }
        let dx = self.shared.backward(&tape.shared, &dh)?;
        let mut de = contextualize_backward(&dx, self.config.encoder.dim, self.config.encoder.window);
        tape.word_mask.backward(&mut de);
        if self.config.encoder.provider == Provider::HashedFeatures {
            debug_assert_eq!(tape.used.len(), tape.n);
            self.embedding.materialize(tape.used.iter().flatten().copied());
            self.embedding.backward(&tape.used, &de);
        }
        Ok(())
    }

    pub fn to_checkpoint(&mut self) -> Result<String> {
        let mut out = String::from("morphosyn-checkpoint 1\n");
        out.push_str(&format!("config {}\n", serde_json::to_string(&self.config)?));
        out.push_str(&format!("vocab {}\n", serde_json::to_string(&self.vocab)?));
        out.push_str(&format!(
            "class_weights {:016x} {:016x}\n",
            self.class_weights[0].to_bits(),
            self.class_weights[1].to_bits()
        ));
        self.visit_params(&mut |name, p| {
            out.push_str(&format!("tensor {} {} {}\n", name, p.value.rows, p.value.cols));
            let hex: Vec<String> = p.value.data.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
            out.push_str(&hex.join(" "));
            out.push('\n');
        });
        Ok(out)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("morphosyn-checkpoint 1") {
            return Err(bad("missing or unsupported checkpoint header"));
        }
        let field = |line: Option<&str>, key: &str| -> Result<String> {
            line.and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| Error::Checkpoint(format!("expected `{}` line", key)))
        };
        let config: ModelConfig = serde_json::from_str(&field(lines.next(), "config")?)?;
        let vocab: FeatureVocabulary = serde_json::from_str(&field(lines.next(), "vocab")?)?;
        let cw: Vec<f64> = field(lines.next(), "class_weights")?
            .split(' ')
            .map(parse_hex)
            .collect::<Result<_>>()?;
        if cw.len() != 2 {
            return Err(bad("class_weights needs two values"));
        }
        let mut tensors = BTreeMap::new();
        while let Some(header) = lines.next() {
            let parts: Vec<&str> = header.split(' ').collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(Error::Checkpoint(format!("bad tensor header {:?}", header)));
            }
            let rows: usize = parts[2].parse().map_err(|_| bad("bad row count"))?;
            let cols: usize = parts[3].parse().map_err(|_| bad("bad column count"))?;
            let body = lines.next().ok_or_else(|| bad("truncated checkpoint"))?;
            let data: Vec<f64> = body.split_whitespace().map(parse_hex).collect::<Result<_>>()?;
            let m = Matrix::from_vec(rows, cols, data)
                .map_err(|_| Error::Checkpoint(format!("tensor {} has the wrong length", parts[1])))?;
            tensors.insert(parts[1].to_string(), m);
        }
        let mut model = Model::new(config, vocab, [cw[0], cw[1]])?;
        let dim = model.config.encoder.dim;
        for (name, m) in tensors.iter() {
            if let Some(k) = name.strip_prefix("embed.") {
                let k: u32 = k.parse().map_err(|_| bad("bad embedding row name"))?;
                if m.shape() != (1, dim) || k >= model.embedding.buckets {
                    return Err(Error::Checkpoint(format!("embedding row {} does not fit the config", k)));
                }
                model.embedding.rows.insert(k, Param::new(m.clone()));
            }
        }
        let mut err = None;
        let mut seen = 0;
        model.visit_params(&mut |name, p| {
            if name.starts_with("embed.") {
                seen += 1;
                return;
            }
            match tensors.get(name) {
                Some(m) if m.shape() == p.value.shape() => {
                    p.value = m.clone();
                    seen += 1;
                }
                Some(m) => {
                    err.get_or_insert(format!(
                        "tensor {} has shape {:?}, model expects {:?}",
                        name,
                        m.shape(),
                        p.value.shape()
                    ));
                }
                None => {
                    err.get_or_insert(format!("tensor {} missing", name));
                }
            }
        });
        if let Some(e) = err {
            return Err(Error::Checkpoint(e));
        }
        if seen != tensors.len() {
            return Err(bad("checkpoint has tensors the model does not know"));
        }
        Ok(model)
    }
}

fn parse_hex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Checkpoint(format!("bad value {:?}", s)))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{build_feature_vocab, parse_conllu, tests::AP_STORY};
    use crate::numkern::grad_check;

    pub(crate) fn ap_story_model(config: ModelConfig) -> (Model, Example) {
        let corpus = parse_conllu(AP_STORY).unwrap();
        let vocab = build_feature_vocab(&corpus).unwrap();
        let (ex, _, _) = Example::from_sentence(&corpus[0], &vocab, None);
        (Model::new(config, vocab, [0.8, 1.2]).unwrap(), ex)
    }

    fn eval_opts() -> ForwardOptions {
        ForwardOptions {
            weights: LossWeights::default(),
            word_dropout: 0.0,
            training: false,
        }
    }

    #[test]
    fn example_from_ap_story() {
        let (_, ex) = ap_story_model(ModelConfig::tiny());
        assert_eq!(ex.content, vec![2, 3, 4, 5]);
        assert_eq!(ex.heads, Some(vec![2, 0, 4, 2]));
        assert_eq!(ex.cwi, vec![1, 1, 0, 0, 0, 0, 1]);
        assert_eq!(ex.feats.rows, 4);
    }

    #[test]
    fn full_model_gradient_check() {
        let (mut model, ex) = ap_story_model(ModelConfig::tiny());
        let mut r = ChaCha8Rng::seed_from_u64(8);
        model.visit_params(&mut |_, p| {
            for v in p.value.data.iter_mut() {
                *v += r.gen_range(-0.3..0.3);
            }
        });
        let forms: Vec<&str> = ex.forms.iter().map(String::as_str).collect();
        let (_, used) = model.embedding.encode(&forms).unwrap();
        model.embedding.materialize(used.into_iter().flatten());
        let opts = eval_opts();
        let res = grad_check(
            &mut model,
            |m| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (parts, tape) = m.forward(&ex, &opts, &mut rng, None)?;
                m.backward(tape, 1.0)?;
                Ok(parts.total)
            },
            1e-5,
        )
        .unwrap();
        assert!(res.max_rel_err <= 1e-4, "{:?}", res);
    }

    #[test]
    fn single_forward_pass_feeds_all_heads() {
        let (model, ex) = ap_story_model(ModelConfig::tiny());
        let mut trace = Trace::default();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        model.forward(&ex, &eval_opts(), &mut r, Some(&mut trace)).unwrap();
        assert_eq!(trace.shared_passes, 1);
        assert_eq!(trace.content_rows, vec![2, 3, 4, 5]);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (mut model, ex) = ap_story_model(ModelConfig::tiny());
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let opts = ForwardOptions {
            training: true,
            word_dropout: 0.05,
            ..eval_opts()
        };
        let (_, tape) = model.forward(&ex, &opts, &mut r, None).unwrap();
        model.backward(tape, 1.0).unwrap();
        model.visit_params(&mut |_, p| {
            let g = p.grad.clone();
            for (v, d) in p.value.data.iter_mut().zip(&g.data) {
                *v -= 0.1 * d;
            }
        });
        let text = model.to_checkpoint().unwrap();
        let mut back = Model::from_checkpoint(&text).unwrap();
        assert_eq!(back.to_checkpoint().unwrap(), text);
        model.zero_grads();
        assert_eq!(back, model);
        assert!(Model::from_checkpoint("nonsense").is_err());
        let truncated: String = text.lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(Model::from_checkpoint(&truncated).is_err());
    }

    #[test]
    fn external_provider_requires_input() {
        let mut config = ModelConfig::tiny();
        config.encoder.provider = Provider::ExternalFile;
        let (model, mut ex) = ap_story_model(config);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(model.forward(&ex, &eval_opts(), &mut r, None).is_err());
        ex.input = Some(Matrix::uniform(7, 8, 1.0, &mut r));
        assert!(model.forward(&ex, &eval_opts(), &mut r, None).is_ok());
        ex.input = Some(Matrix::uniform(5, 8, 1.0, &mut r));
        assert!(matches!(
            model.forward(&ex, &eval_opts(), &mut r, None),
            Err(Error::Alignment(_))
        ));
    }
}
