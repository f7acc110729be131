use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{RunConfig, SyntheticKind};
use crate::dataio::{
    check_sequence_items, load_embeddings, load_sequences, load_token_map, synth_clusters, synth_sequences,
    synth_successor_sequences, write_embeddings, write_sequences, write_token_map, BehaviorSequence, ItemEmbedding,
};
use crate::error::{Error, Result};
use crate::evaluator::{split, EvalReport};
use crate::generator::{self, GeneratorModel};
use crate::quantizer::utilization;
use crate::tokenizer::{self, assign_tokens, collision_rate, is_unique, prefix_agreement_at_1, write_json, TokenizerModel};

/// Where every stage reads and writes its artifacts.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
    pub embeddings: PathBuf,
    pub sequences: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        let data = cfg.out_dir.join("data");
        Layout {
            out: cfg.out_dir.clone(),
            embeddings: cfg.embeddings.clone().unwrap_or_else(|| data.join("items.cste")),
            sequences: cfg.sequences.clone().unwrap_or_else(|| data.join("sequences.tsv")),
        }
    }

    /// Same inputs, artifacts under `out`.
    pub fn with_out(&self, out: PathBuf) -> Self {
        Layout { out, ..self.clone() }
    }

    pub fn tokenizer_dir(&self) -> PathBuf {
        self.out.join("tokenizer")
    }

    pub fn tokens(&self) -> PathBuf {
        self.out.join("tokens.txt")
    }

    pub fn generator_dir(&self) -> PathBuf {
        self.out.join("generator")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn report_json(&self) -> PathBuf {
        self.eval_dir().join("report.json")
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), hint: hint.to_string() })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_items(layout: &Layout) -> Result<Vec<ItemEmbedding>> {
    require(&layout.embeddings, "run `cost synth` or set `embeddings` in the config")?;
    load_embeddings(&layout.embeddings)
}

fn load_behavior(layout: &Layout) -> Result<Vec<BehaviorSequence>> {
    require(&layout.sequences, "run `cost synth` or set `sequences` in the config")?;
    let load = load_sequences(&layout.sequences)?;
    Ok(load.sequences)
}

fn load_tokenizer(layout: &Layout) -> Result<TokenizerModel> {
    let dir = layout.tokenizer_dir();
    require(&dir.join("config.json"), "run `cost train-tokenizer` first")?;
    TokenizerModel::load(&dir)
}

pub fn synth(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let s = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("`synth` needs a `synthetic` block in the config".into()))?;
    if cfg.embeddings.is_some() {
        return Err(Error::Config("`synth` writes its own data; remove `embeddings`/`sequences` from the config".into()));
    }
    let (items, labels) = synth_clusters(&s.spec)?;
    let sequences = match s.kind {
        SyntheticKind::Clusters => synth_sequences(&s.spec, &labels)?,
        SyntheticKind::Successor => synth_successor_sequences(&s.spec, &labels)?,
    };
    if let Some(dir) = layout.embeddings.parent() {
        create_dir(dir)?;
    }
    write_embeddings(&layout.embeddings, &items)?;
    write_sequences(&layout.sequences, &sequences)?;
    let labels_path = layout.embeddings.with_extension("labels");
    let text: String = items.iter().zip(&labels).map(|(it, l)| format!("{}\t{}\n", it.item_id, l)).collect();
    write_text(&labels_path, &text)?;
    log::info!("synth: {} items, {} sequences", items.len(), sequences.len());
    Ok(())
}

#[derive(Serialize)]
struct TokenizerSummary {
    items: usize,
    epoch_mean_loss: Vec<f64>,
}

pub fn train_tokenizer(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let items = load_items(layout)?;
    let fit = tokenizer::fit(&items, &cfg.tokenizer)?;
    let dir = layout.tokenizer_dir();
    fit.model.save(&dir)?;
    fit.write_trace_csv(&dir.join("trace.csv"))?;
    let means = fit.epoch_means();
    if let (Some(first), Some(last)) = (means.first(), means.last()) {
        log::info!("tokenizer: epoch loss {:.5} -> {:.5}", first, last);
    }
    write_json(&dir.join("summary.json"), &TokenizerSummary { items: items.len(), epoch_mean_loss: means })
}

#[derive(Serialize)]
struct AssignReport {
    items: usize,
    unique: bool,
    collision_rate: f64,
    max_disambiguation: usize,
    prefix_agreement_at_1: f64,
    utilization: Vec<f64>,
}

pub fn assign(_cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let items = load_items(layout)?;
    let model = load_tokenizer(layout)?;
    let tokens = assign_tokens(&model, &items)?;
    if !is_unique(&tokens) {
        return Err(Error::Data("token assignment is not a bijection".into()));
    }
    let codes: Vec<Vec<usize>> = tokens.values().map(|t| t.codes.clone()).collect();
    let util = utilization(&codes, model.books.levels(), model.books.size());
    let report = AssignReport {
        items: tokens.len(),
        unique: true,
        collision_rate: collision_rate(&tokens),
        max_disambiguation: tokens.values().filter_map(|t| t.disambig).max().unwrap_or(0),
        prefix_agreement_at_1: prefix_agreement_at_1(&items, &tokens),
        utilization: util.per_level,
    };
    log::info!(
        "assign: collision rate {:.4}, prefix agreement {:.4}",
        report.collision_rate,
        report.prefix_agreement_at_1
    );
    write_token_map(&layout.tokens(), &tokens)?;
    write_json(&layout.out.join("assign_report.json"), &report)
}

pub fn train_generator(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let tok = load_tokenizer(layout)?;
    require(&layout.tokens(), "run `cost assign` first")?;
    let tokens = load_token_map(&layout.tokens(), tok.books.levels())?;
    let sequences = load_behavior(layout)?;
    check_known_items(&sequences, &tokens)?;
    let split = split(&sequences);
    let fit = generator::train_generator(&split, tokens, tok.books.levels(), tok.books.size(), &cfg.generator)?;
    let dir = layout.generator_dir();
    fit.model.save(&dir)?;
    fit.write_trace_csv(&dir.join("trace.csv"))
}

fn check_known_items<T>(sequences: &[BehaviorSequence], tokens: &BTreeMap<String, T>) -> Result<()> {
    for s in sequences {
        if let Some(item) = s.items.iter().find(|i| !tokens.contains_key(*i)) {
            return Err(Error::Data(format!("user {} references item {} missing from the token map", s.user_id, item)));
        }
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, layout: &Layout) -> Result<EvalReport> {
    let dir = layout.generator_dir();
    require(&dir.join("config.json"), "run `cost train-generator` first")?;
    let model = GeneratorModel::load(&dir)?;
    let sequences = load_behavior(layout)?;
    check_known_items(&sequences, &model.tokens)?;
    let split = split(&sequences);
    let width = model.config.beam_width;
    let (cases, lines) = generator::retrieve_test_cases(&model, &split, cfg.max_k(), width)?;
    let report = EvalReport::from_cases(&cases, &cfg.eval_ks);
    let eval = layout.eval_dir();
    create_dir(&eval)?;
    write_text(&eval.join("retrieval.tsv"), &(lines.join("\n") + "\n"))?;
    report.save(&layout.report_json())?;
    write_text(&eval.join("report.txt"), &report.to_table())?;
    Ok(report)
}

/// Renders the evaluation report and the merged sweep table, if present.
pub fn report(layout: &Layout) -> Result<String> {
    let mut out = String::new();
    let report_path = layout.report_json();
    if report_path.exists() {
        out.push_str(&EvalReport::load(&report_path)?.to_table());
    }
    let merged = layout.out.join("sweep").join("merged.csv");
    if merged.exists() {
        let text = fs::read_to_string(&merged).map_err(|e| Error::io(&merged, e))?;
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&align_csv(&text));
    }
    if out.is_empty() {
        return Err(Error::MissingArtifact {
            path: report_path,
            hint: "run `cost evaluate` or `cost sweep` first".into(),
        });
    }
    write_text(&layout.out.join("report.txt"), &out)?;
    Ok(out)
}

fn align_csv(text: &str) -> String {
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r.iter().enumerate().map(|(c, s)| format!("{:<w$}", s, w = widths[c])).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Confirms every sequence item exists in the catalog.
pub(crate) fn check_catalog(layout: &Layout) -> Result<()> {
    let items = load_items(layout)?;
    let sequences = load_behavior(layout)?;
    check_sequence_items(&sequences, &items)
}
