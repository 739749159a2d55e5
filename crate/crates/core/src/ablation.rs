//! Named train/search configurations evaluated side by side.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{EmotionCategory, Example, Granularity, Vocab};
use crate::decoding::{generate, SearchConfig, SearchMode};
use crate::error::{Error, Result};
use crate::eval::{EmotionTagger, MetricReport};
use crate::model::{CopyMode, Fusion, Model};
use crate::trainer::{train, TrainConfig};

/// Requested emotions for `n` items, cycling through every label.
pub fn round_robin(granularity: Granularity, n: usize) -> Vec<EmotionCategory> {
    let labels: Vec<EmotionCategory> = granularity.all_categories().collect();
    (0..n).map(|i| labels[i % labels.len()]).collect()
}

/// Decodes one comment per (article, emotion) pair.
pub fn generate_comments(
    model: &Model,
    vocab: &Vocab,
    articles: &[&[Vec<usize>]],
    emotions: &[EmotionCategory],
    search: &SearchConfig,
) -> Result<Vec<String>> {
    if articles.len() != emotions.len() {
        return Err(Error::Usage(format!(
            "{} articles but {} requested emotions",
            articles.len(),
            emotions.len()
        )));
    }
    articles
        .iter()
        .zip(emotions)
        .map(|(a, &e)| {
            let (ids, unfinished) = generate(model, a, e, search)?;
            if unfinished {
                log::debug!("comment hit max_len without EOS");
            }
            Ok(vocab.decode_text(&ids))
        })
        .collect()
}

/// Generates for every test article with round-robin emotions and scores
/// the output against the references.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    test: &[Example],
    search: &SearchConfig,
    tagger: Option<&EmotionTagger>,
) -> Result<MetricReport> {
    let granularity = model.config.granularity;
    let requested = round_robin(granularity, test.len());
    let articles: Vec<&[Vec<usize>]> = test.iter().map(|e| e.article.as_slice()).collect();
    let generated = generate_comments(model, vocab, &articles, &requested, search)?;
    let references: Vec<String> = test
        .iter()
        .map(|e| vocab.decode_text(e.comment_body()))
        .collect();
    MetricReport::compute(
        &generated,
        &references,
        tagger.map(|t| (t, requested.as_slice())),
    )
}

/// Changes applied to the base configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigDelta {
    pub fusion: Option<Fusion>,
    pub copy: Option<CopyMode>,
    pub emo_weight: Option<f64>,
    pub mode: Option<SearchMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub delta: ConfigDelta,
}

impl Variant {
    pub fn new(name: &str, delta: ConfigDelta) -> Self {
        Variant {
            name: name.to_string(),
            delta,
        }
    }

    pub fn resolve(
        &self,
        train: &TrainConfig,
        search: &SearchConfig,
    ) -> Result<(TrainConfig, SearchConfig)> {
        let mut t = train.clone();
        let mut s = *search;
        let d = &self.delta;
        if let Some(f) = d.fusion {
            t.fusion = f;
        }
        if let Some(c) = d.copy {
            t.copy = c;
        }
        if let Some(w) = d.emo_weight {
            t.emo_weight = w;
        }
        if let Some(m) = d.mode {
            s.mode = m;
        }
        t.validate()
            .and_then(|_| s.validate())
            .map_err(|e| Error::Config(format!("ablation variant {:?}: {e}", self.name)))?;
        Ok((t, s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub base_train: TrainConfig,
    pub base_search: SearchConfig,
    pub variants: Vec<Variant>,
}

impl AblationSpec {
    /// Full model, simple fusion, no copy, and plain beam search.
    pub fn standard(base_train: TrainConfig, base_search: SearchConfig) -> Self {
        let variants = vec![
            Variant::new("CCS", ConfigDelta::default()),
            Variant::new(
                "CCS-Emo",
                ConfigDelta {
                    fusion: Some(Fusion::Simple),
                    ..ConfigDelta::default()
                },
            ),
            Variant::new(
                "w/o HC",
                ConfigDelta {
                    copy: Some(CopyMode::Off),
                    ..ConfigDelta::default()
                },
            ),
            Variant::new(
                "w/o RBS",
                ConfigDelta {
                    mode: Some(SearchMode::Beam),
                    ..ConfigDelta::default()
                },
            ),
        ];
        AblationSpec {
            base_train,
            base_search,
            variants,
        }
    }

    /// Keeps only the named variants, in the given order.
    pub fn select(mut self, names: &[String]) -> Result<Self> {
        let mut picked = Vec::with_capacity(names.len());
        for n in names {
            let v = self
                .variants
                .iter()
                .find(|v| v.name.eq_ignore_ascii_case(n))
                .ok_or_else(|| {
                    let known: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
                    Error::Config(format!(
                        "unknown ablation variant {n:?}; known: {}",
                        known.join(", ")
                    ))
                })?;
            picked.push(v.clone());
        }
        self.variants = picked;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("ablation has no variants".into()));
        }
        let mut seen = BTreeSet::new();
        for v in &self.variants {
            if !seen.insert(v.name.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate ablation variant {:?}",
                    v.name
                )));
            }
            v.resolve(&self.base_train, &self.base_search)?;
        }
        Ok(())
    }

    /// Trains each distinct configuration once and evaluates every variant.
    /// Variants differing only in search settings share a model. With
    /// `parallel`, the distinct trainings run on separate threads.
    pub fn run(
        &self,
        train_set: &[Example],
        test_set: &[Example],
        vocab: &Vocab,
        tagger: Option<&EmotionTagger>,
        parallel: bool,
    ) -> Result<Vec<(String, MetricReport)>> {
        self.validate()?;
        let mut resolved = Vec::with_capacity(self.variants.len());
        let mut pending: BTreeMap<String, (String, TrainConfig)> = BTreeMap::new();
        for v in &self.variants {
            let (t, s) = v.resolve(&self.base_train, &self.base_search)?;
            let key = serde_json::to_string(&t)?;
            pending
                .entry(key.clone())
                .or_insert_with(|| (v.name.clone(), t));
            resolved.push((v.name.clone(), key, s));
        }
        let fit = |(name, cfg): (String, TrainConfig)| -> Result<Model> {
            log::info!("training variant {name}");
            Ok(train(train_set, vocab.len(), cfg, None)?.0.model)
        };
        let keys: Vec<String> = pending.keys().cloned().collect();
        let trained: Vec<Result<Model>> = if parallel {
            std::thread::scope(|scope| {
                let handles: Vec<_> = pending
                    .into_values()
                    .map(|job| scope.spawn(move || fit(job)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join().unwrap_or_else(|_| {
                            Err(Error::Internal("training thread panicked".into()))
                        })
                    })
                    .collect()
            })
        } else {
            pending.into_values().map(fit).collect()
        };
        let mut models = BTreeMap::new();
        for (k, m) in keys.into_iter().zip(trained) {
            models.insert(k, m?);
        }
        let mut rows = Vec::with_capacity(resolved.len());
        for (name, key, search) in resolved {
            log::info!("evaluating variant {name}");
            let report = evaluate(&models[&key], vocab, test_set, &search, tagger)?;
            rows.push((name, report));
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_cycles() {
        let r = round_robin(Granularity::Coarse, 5);
        let labels: Vec<usize> = r.iter().map(|e| e.label()).collect();
        assert_eq!(labels, vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn standard_variants_resolve() {
        let spec = AblationSpec::standard(TrainConfig::default(), SearchConfig::default());
        spec.validate().unwrap();
        let (t, s) = spec.variants[1]
            .resolve(&spec.base_train, &spec.base_search)
            .unwrap();
        assert_eq!(t.fusion, Fusion::Simple);
        assert_eq!(s.mode, SearchMode::Rbs);
        let (t, s) = spec.variants[3]
            .resolve(&spec.base_train, &spec.base_search)
            .unwrap();
        assert_eq!(t, spec.base_train);
        assert_eq!(s.mode, SearchMode::Beam);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut spec = AblationSpec::standard(TrainConfig::default(), SearchConfig::default());
        spec.variants
            .push(Variant::new("CCS", ConfigDelta::default()));
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_delta_rejected() {
        let mut spec = AblationSpec::standard(TrainConfig::default(), SearchConfig::default());
        spec.variants.push(Variant::new(
            "bad",
            ConfigDelta {
                emo_weight: Some(-1.0),
                ..ConfigDelta::default()
            },
        ));
        assert!(spec.validate().is_err());
    }

    #[test]
    fn select_by_name() {
        let spec = AblationSpec::standard(TrainConfig::default(), SearchConfig::default());
        let s = spec
            .clone()
            .select(&["ccs".into(), "w/o RBS".into()])
            .unwrap();
        assert_eq!(s.variants.len(), 2);
        assert!(spec.select(&["nope".into()]).is_err());
    }

    #[test]
    fn parallel_matches_sequential() {
        use crate::corpus::{build_vocab, synth_corpus};
        use crate::tensor::Rng;
        let records = synth_corpus(&mut Rng::new(2), 24, Granularity::Fine).unwrap();
        let vocab = build_vocab(&records, 5000).unwrap();
        let ex = Example::encode_all(&records, &vocab).unwrap();
        let base = TrainConfig {
            d_emb: 8,
            d_h: 8,
            epochs: 1,
            ..TrainConfig::default()
        };
        let search = SearchConfig {
            max_len: 8,
            ..SearchConfig::default()
        };
        let spec = AblationSpec::standard(base, search)
            .select(&["CCS".into(), "w/o HC".into(), "w/o RBS".into()])
            .unwrap();
        let a = spec.run(&ex[..20], &ex[20..], &vocab, None, false).unwrap();
        let b = spec.run(&ex[..20], &ex[20..], &vocab, None, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|(_, r)| r.rep.contains_key("rep_3")));
    }
}
