use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SyntheticSpec;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::seed::derive_seed;
use crate::tokenizer::TokenizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Sticky random walks over clusters.
    #[default]
    Clusters,
    /// Each cluster is a cycle and users follow it deterministically.
    Successor,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    #[serde(flatten)]
    pub spec: SyntheticSpec,
}

/// Value lists whose cartesian product a sweep runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepAxes {
    pub codebook_size: Vec<usize>,
    pub levels: Vec<usize>,
    pub latent_dim: Vec<usize>,
    pub tau: Vec<f64>,
}

/// One cell of a sweep; unset axes keep the base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub codebook_size: usize,
    pub levels: usize,
    pub latent_dim: usize,
    pub tau: f64,
}

impl SweepCell {
    pub fn name(&self, index: usize) -> String {
        format!("cell_{:03}_K{}_M{}_d{}_tau{}", index, self.codebook_size, self.levels, self.latent_dim, self.tau)
    }

    pub fn apply(&self, cfg: &mut TokenizerConfig) {
        cfg.codebook_size = self.codebook_size;
        cfg.levels = self.levels;
        cfg.latent_dim = self.latent_dim;
        cfg.tau = self.tau;
    }
}

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        self.codebook_size.is_empty() && self.levels.is_empty() && self.latent_dim.is_empty() && self.tau.is_empty()
    }

    /// Cartesian product in axis order K, M, d, tau (tau varies fastest).
    pub fn cells(&self, base: &TokenizerConfig) -> Vec<SweepCell> {
        fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for &k in &or(&self.codebook_size, base.codebook_size) {
            for &m in &or(&self.levels, base.levels) {
                for &d in &or(&self.latent_dim, base.latent_dim) {
                    for &tau in &or(&self.tau, base.tau) {
                        out.push(SweepCell { codebook_size: k, levels: m, latent_dim: d, tau });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Embedding matrix; defaults to the synthetic catalog under the output directory.
    pub embeddings: Option<PathBuf>,
    pub sequences: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub tokenizer: TokenizerConfig,
    pub generator: GeneratorConfig,
    pub eval_ks: Vec<usize>,
    pub synthetic: Option<SyntheticConfig>,
    pub sweep: Option<SweepAxes>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embeddings: None,
            sequences: None,
            out_dir: PathBuf::from("cost-out"),
            seed: 0,
            tokenizer: TokenizerConfig::default(),
            generator: GeneratorConfig::default(),
            eval_ks: vec![1, 5, 10, 20],
            synthetic: None,
            sweep: None,
        }
    }
}

impl RunConfig {
    /// Reads a JSON config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.embeddings.as_mut().map(resolve);
        cfg.sequences.as_mut().map(resolve);
        resolve(&mut cfg.out_dir);
        Ok(cfg)
    }

    /// Derives every stage seed from the top-level seed so stages rerun independently.
    pub fn derive_stage_seeds(&mut self) {
        self.tokenizer.seed = derive_seed(self.seed, "tokenizer");
        self.generator.seed = derive_seed(self.seed, "generator");
        if let Some(s) = self.synthetic.as_mut() {
            s.spec.seed = derive_seed(self.seed, "synth");
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.generator.validate()?;
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config("eval_ks must be a non-empty list of positive cut-offs".into()));
        }
        if self.embeddings.is_some() != self.sequences.is_some() {
            return Err(Error::Config("embeddings and sequences must be given together".into()));
        }
        if let Some(p) = self.embeddings.iter().chain(&self.sequences).find(|p| !p.exists()) {
            return Err(Error::MissingArtifact { path: p.clone(), hint: "referenced by the run configuration".into() });
        }
        if let Some(s) = &self.synthetic {
            s.spec.validate()?;
        }
        Ok(())
    }

    pub fn max_k(&self) -> usize {
        self.eval_ks.iter().copied().max().unwrap_or(1)
    }
}
