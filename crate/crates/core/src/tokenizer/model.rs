use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{cl_on_tape, mse_on_tape, rq_on_tape, LossComponents, LossMode};
use crate::dataio::{embedding_matrix, read_matrix, write_matrix, ItemEmbedding};
use crate::error::{Error, Result};
use crate::numerics::{Activation, AdamConfig, AdamState, DenseMatrix, Layer, MlpParams, Tape, Var};
use crate::quantizer::{kmeans_init, quantize_on_tape, quantize_rows, residual_quantize, straight_through, utilization, CodebookSet};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub loss_mode: LossMode,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Encoder hidden widths; the decoder mirrors them.
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub shared_codebook: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            loss_mode: LossMode::Contrastive,
            alpha: 0.1,
            beta: 0.25,
            tau: 0.1,
            encoder_hidden: vec![512, 256, 128],
            latent_dim: 96,
            levels: 3,
            codebook_size: 64,
            shared_codebook: true,
            lr: 1e-4,
            batch_size: 256,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("tokenizer: {}", m)));
        if self.loss_mode.uses_contrastive() && self.alpha <= 0.0 {
            return bad(format!("alpha must be positive when the contrastive term is active, got {}", self.alpha));
        }
        if self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.beta < 0.0 {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.levels == 0 || self.codebook_size == 0 || self.latent_dim == 0 {
            return bad("levels, codebook_size and latent_dim must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.encoder_hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn decoder_hidden(&self) -> Vec<usize> {
        self.encoder_hidden.iter().rev().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub books: CodebookSet,
    pub config: TokenizerConfig,
}

/// Loss nodes of one recorded batch.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    pub loss: Var,
    pub components: LossComponents,
    pub codes: Vec<Vec<usize>>,
    pub latent: Var,
    pub reconstruction: Var,
}

impl TokenizerModel {
    /// Freshly initialized weights and zero codebooks.
    pub fn init(input_dim: usize, config: &TokenizerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "tokenizer/init");
        let mut enc_dims = vec![input_dim];
        enc_dims.extend(&config.encoder_hidden);
        enc_dims.push(config.latent_dim);
        let mut dec_dims = vec![config.latent_dim];
        dec_dims.extend(config.decoder_hidden());
        dec_dims.push(input_dim);
        Ok(TokenizerModel {
            encoder: MlpParams::init(&enc_dims, Activation::Identity, &mut rng)?,
            decoder: MlpParams::init(&dec_dims, Activation::Identity, &mut rng)?,
            books: CodebookSet::zeros(config.levels, config.codebook_size, config.latent_dim, config.shared_codebook),
            config: config.clone(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Encoder weights, decoder weights, then codebook tables.
    pub fn parameters(&self) -> Vec<&DenseMatrix> {
        let mut p = self.encoder.parameters();
        p.extend(self.decoder.parameters());
        p.extend(self.books.tables());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut p = self.encoder.parameters_mut();
        p.extend(self.decoder.parameters_mut());
        p.extend(self.books.tables_mut().iter_mut());
        p
    }

    pub fn encode(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.encoder.forward_batch(x)
    }

    /// Records the objective for the batch `x`. Code selection happens on the
    /// forward values unless `codes` pins it.
    pub fn batch_graph<'a>(&'a self, tape: &mut Tape<'a>, x: &DenseMatrix, codes: Option<&[Vec<usize>]>) -> Result<BatchGraph> {
        if x.cols() != self.input_dim() {
            return Err(Error::Config(format!("embedding dimension {} does not match model input {}", x.cols(), self.input_dim())));
        }
        let params = tape.bind_params(self.parameters());
        let n_enc = self.encoder.num_params();
        let n_dec = self.decoder.num_params();
        let (enc, rest) = params.split_at(n_enc);
        let (dec, tables) = rest.split_at(n_dec);

        let xv = tape.input(x.clone());
        let z = self.encoder.forward_tape(tape, enc, xv)?;
        let codes = match codes {
            Some(c) => c.to_vec(),
            None => quantize_rows(tape.value(z), &self.books)?,
        };
        let q = quantize_on_tape(tape, &self.books, tables, z, &codes);
        let st = straight_through(tape, z, q.z_hat);
        let x_hat = self.decoder.forward_tape(tape, dec, st)?;

        let mode = self.config.loss_mode;
        let rq = rq_on_tape(tape, &q, self.config.beta);
        let mse = mse_on_tape(tape, xv, x_hat);
        let cl = if mode.uses_contrastive() {
            Some(cl_on_tape(tape, xv, x_hat, self.config.tau)?)
        } else {
            cl_on_tape(tape, xv, x_hat, self.config.tau).ok()
        };

        let mut loss = rq;
        if mode.uses_mse() {
            loss = tape.add(loss, mse);
        }
        if mode.uses_contrastive() {
            let weighted = tape.scale(cl.expect("active contrastive term"), self.config.alpha);
            loss = tape.add(loss, weighted);
        }
        let components = LossComponents {
            mse: Some(tape.scalar(mse)),
            rq: tape.scalar(rq),
            cl: cl.map(|v| tape.scalar(v)),
        };
        Ok(BatchGraph { loss, components, codes, latent: z, reconstruction: x_hat })
    }

    /// Codes for every embedding row.
    pub fn codes_for(&self, x: &DenseMatrix) -> Result<Vec<Vec<usize>>> {
        quantize_rows(&self.encode(x)?, &self.books)
    }

    /// Initializes the codebooks by k-means on the latents of `x`.
    /// Shared tables cluster `z`; per-level tables cluster the residuals left
    /// by the already-initialized earlier levels.
    fn init_codebooks(&mut self, x: &DenseMatrix, trace: &mut Vec<TraceEvent>) -> Result<()> {
        let z = self.encode(x)?;
        let k = self.books.size();
        let seed = derive_seed(self.config.seed, "tokenizer/kmeans");
        if self.books.shared() {
            let init = kmeans_init(&z, k, seed)?;
            self.books.set_table(0, init.centroids)?;
            trace.push(TraceEvent::KMeansInit { level: 0, warnings: init.warnings, iterations: init.iterations });
            return Ok(());
        }
        let mut residual = z;
        for level in 0..self.books.levels() {
            let init = kmeans_init(&residual, k, seed.wrapping_add(level as u64))?;
            self.books.set_table(level, init.centroids)?;
            trace.push(TraceEvent::KMeansInit { level, warnings: init.warnings, iterations: init.iterations });
            let table = self.books.table(level).clone();
            for r in 0..residual.rows() {
                let row = residual.row_mut(r);
                let (best, _) = table
                    .iter_rows()
                    .enumerate()
                    .map(|(i, c)| (i, crate::numerics::squared_distance(row, c)))
                    .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
                for (v, c) in row.iter_mut().zip(table.row(best)) {
                    *v -= c;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, mlp) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            save_mlp(dir, name, mlp)?;
        }
        self.books.save(&dir.join("codebooks"))?;
        let snapshot = Checkpoint {
            config: self.config.clone(),
            encoder_dims: self.encoder.dims(),
            decoder_dims: self.decoder.dims(),
        };
        write_json(&dir.join("config.json"), &snapshot)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("config.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let snapshot: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let encoder = load_mlp(dir, "encoder", &snapshot.encoder_dims)?;
        let decoder = load_mlp(dir, "decoder", &snapshot.decoder_dims)?;
        let books = CodebookSet::load(&dir.join("codebooks"))?;
        if encoder.output_dim() != books.dim() || decoder.output_dim() != encoder.input_dim() {
            return Err(Error::Data(format!("{}: inconsistent checkpoint shapes", dir.display())));
        }
        Ok(TokenizerModel { encoder, decoder, books, config: snapshot.config })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    config: TokenizerConfig,
    encoder_dims: Vec<usize>,
    decoder_dims: Vec<usize>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(json.as_bytes()).and_then(|_| f.write_all(b"\n")).map_err(|e| Error::io(path, e))
}

pub(crate) fn save_mlp(dir: &Path, name: &str, mlp: &MlpParams) -> Result<()> {
    for (i, layer) in mlp.layers.iter().enumerate() {
        write_matrix(&dir.join(format!("{}_{}_weight.cste", name, i)), &layer.weight)?;
        write_matrix(&dir.join(format!("{}_{}_bias.cste", name, i)), &layer.bias)?;
    }
    Ok(())
}

/// Hidden layers use the rectifier, the last layer is linear.
pub(crate) fn load_mlp(dir: &Path, name: &str, dims: &[usize]) -> Result<MlpParams> {
    let n = dims.len().saturating_sub(1);
    let layers = (0..n)
        .map(|i| {
            let weight = read_matrix(&dir.join(format!("{}_{}_weight.cste", name, i)))?;
            let bias = read_matrix(&dir.join(format!("{}_{}_bias.cste", name, i)))?;
            if weight.shape() != (dims[i], dims[i + 1]) || bias.shape() != (1, dims[i + 1]) {
                return Err(Error::Data(format!("{} layer {} has unexpected shape", name, i)));
            }
            let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
            Layer::new(weight, bias.into_vec(), act)
        })
        .collect::<Result<Vec<_>>>()?;
    MlpParams::from_layers(layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub components: LossComponents,
    pub batch_size: usize,
    /// Per-level share of codes used within the batch.
    pub utilization: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    KMeansInit { level: usize, warnings: usize, iterations: usize },
    Step(StepRecord),
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: TokenizerModel,
    pub trace: Vec<TraceEvent>,
}

impl FitOutput {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.trace.iter().filter_map(|e| match e {
            TraceEvent::Step(s) => Some(s),
            _ => None,
        })
    }

    /// Batch-size weighted mean of the total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for s in self.steps() {
            if sums.len() <= s.epoch {
                sums.resize(s.epoch + 1, (0.0, 0));
            }
            sums[s.epoch].0 += s.total * s.batch_size as f64;
            sums[s.epoch].1 += s.batch_size;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    /// `epoch,step,loss_total,loss_mse,loss_rq,loss_cl,utilization_l1..lM`
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let levels = self.model.books.levels();
        let mut out = String::from("epoch,step,loss_total,loss_mse,loss_rq,loss_cl");
        for l in 1..=levels {
            out.push_str(&format!(",utilization_l{}", l));
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for s in self.steps() {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                s.epoch,
                s.step,
                s.total,
                opt(s.components.mse),
                s.components.rq,
                opt(s.components.cl)
            ));
            for u in &s.utilization {
                out.push_str(&format!(",{}", u));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Trains encoder, decoder and codebooks on `items`.
///
/// The codebooks are initialized by k-means on the first batch before any
/// gradient step. Each step encodes, quantizes, decodes through the
/// straight-through estimator and applies one Adam update to all parameters.
pub fn fit(items: &[ItemEmbedding], config: &TokenizerConfig) -> Result<FitOutput> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::Data("cannot fit a tokenizer on an empty dataset".into()));
    }
    let x_all = embedding_matrix(items)?;
    let mut model = TokenizerModel::init(x_all.cols(), config)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), model.parameters());
    let mut shuffle_rng = rng_for(config.seed, "tokenizer/shuffle");
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut trace = Vec::new();
    let mut last_finite: Option<f64> = None;
    let mut initialized = false;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = x_all.select_rows(chunk);
            if !initialized {
                model.init_codebooks(&x, &mut trace)?;
                initialized = true;
            }
            let mut tape = Tape::new();
            let graph = model.batch_graph(&mut tape, &x, None)?;
            let total = tape.scalar(graph.loss);
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "tokenizer loss became {} at epoch {} step {}; last finite loss {:?}",
                    total, epoch, step, last_finite
                )));
            }
            last_finite = Some(total);
            let grads = tape.grad(graph.loss)?;
            adam.step(model.parameters_mut(), &grads)?;
            trace.push(TraceEvent::Step(StepRecord {
                epoch,
                step,
                total,
                components: graph.components,
                batch_size: chunk.len(),
                utilization: utilization(&graph.codes, config.levels, config.codebook_size).per_level,
            }));
        }
    }
    if !model.books.tables().iter().all(DenseMatrix::is_finite) {
        return Err(Error::Numeric("codebooks became non-finite during training".into()));
    }
    Ok(FitOutput { model, trace })
}

/// Codes for a single embedding.
pub fn encode_codes(model: &TokenizerModel, x: &[f64]) -> Result<Vec<usize>> {
    let z = model.encode(&DenseMatrix::row_vector(x))?;
    Ok(residual_quantize(z.row(0), &model.books)?.codes)
}
