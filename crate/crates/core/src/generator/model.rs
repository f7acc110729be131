//! Pre-norm encoder-decoder transformer over flattened token ids.
//!
//! Sequences of a batch are packed row-wise; attention keeps them apart
//! through per-sequence blocks.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenItemTable, TokenVocabulary};
use crate::dataio::{load_token_map, read_matrix, write_matrix, write_token_map};
use crate::error::{Error, Result};
use crate::numerics::{AttentionBlock, DenseMatrix, Tape, Var};
use crate::seed::rng_for;
use crate::tokenizer::SemanticTokenTuple;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_input_items: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beam_width: usize,
    /// Restrict each decode step to the ids of its level.
    pub level_masking: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            model_dim: 128,
            heads: 4,
            ff_dim: 512,
            max_input_items: 20,
            lr: 1e-3,
            batch_size: 512,
            epochs: 10,
            beam_width: 20,
            level_masking: true,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {}", m)));
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!("model_dim {} must be divisible by heads {}", self.model_dim, self.heads));
        }
        if self.model_dim == 0 || self.ff_dim == 0 || self.batch_size == 0 || self.max_input_items == 0 {
            return bad("model_dim, ff_dim, batch_size and max_input_items must be positive".into());
        }
        if self.beam_width == 0 {
            return bad("beam_width must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    norm1: NormIdx,
    attn: AttnIdx,
    norm2: NormIdx,
    ff: FfIdx,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    norm1: NormIdx,
    self_attn: AttnIdx,
    norm2: NormIdx,
    cross_attn: AttnIdx,
    norm3: NormIdx,
    ff: FfIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    token_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: NormIdx,
    decoder: Vec<DecoderLayer>,
    dec_norm: NormIdx,
    out_w: usize,
    out_b: usize,
}

/// Parameter shapes in layout order, recorded while building the layout.
struct LayoutBuilder {
    shapes: Vec<(usize, usize, Init)>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Glorot,
    Embedding,
    /// Glorot scaled down so an untrained model predicts near-uniform tokens.
    Output,
}

impl LayoutBuilder {
    fn push(&mut self, rows: usize, cols: usize, init: Init) -> usize {
        self.shapes.push((rows, cols, init));
        self.shapes.len() - 1
    }

    fn norm(&mut self, d: usize) -> NormIdx {
        NormIdx { gain: self.push(1, d, Init::Ones), bias: self.push(1, d, Init::Zeros) }
    }

    fn attn(&mut self, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.push(d, d, Init::Glorot),
            wk: self.push(d, d, Init::Glorot),
            wv: self.push(d, d, Init::Glorot),
            wo: self.push(d, d, Init::Glorot),
        }
    }

    fn ff(&mut self, d: usize, f: usize) -> FfIdx {
        FfIdx {
            w1: self.push(d, f, Init::Glorot),
            b1: self.push(1, f, Init::Zeros),
            w2: self.push(f, d, Init::Glorot),
            b2: self.push(1, d, Init::Zeros),
        }
    }
}

fn build_layout(config: &GeneratorConfig, vocab: &TokenVocabulary) -> (Layout, Vec<(usize, usize, Init)>) {
    let d = config.model_dim;
    let mut b = LayoutBuilder { shapes: Vec::new() };
    let token_emb = b.push(vocab.size(), d, Init::Embedding);
    let enc_pos = b.push(max_input_len(config, vocab), d, Init::Embedding);
    let dec_pos = b.push(vocab.positions() + 1, d, Init::Embedding);
    let encoder = (0..config.encoder_layers)
        .map(|_| EncoderLayer { norm1: b.norm(d), attn: b.attn(d), norm2: b.norm(d), ff: b.ff(d, config.ff_dim) })
        .collect();
    let enc_norm = b.norm(d);
    let decoder = (0..config.decoder_layers)
        .map(|_| DecoderLayer {
            norm1: b.norm(d),
            self_attn: b.attn(d),
            norm2: b.norm(d),
            cross_attn: b.attn(d),
            norm3: b.norm(d),
            ff: b.ff(d, config.ff_dim),
        })
        .collect();
    let dec_norm = b.norm(d);
    let out_w = b.push(d, vocab.size(), Init::Output);
    let out_b = b.push(1, vocab.size(), Init::Zeros);
    let layout = Layout { token_emb, enc_pos, dec_pos, encoder, enc_norm, decoder, dec_norm, out_w, out_b };
    (layout, b.shapes)
}

fn max_input_len(config: &GeneratorConfig, vocab: &TokenVocabulary) -> usize {
    1 + config.max_input_items * vocab.positions()
}

/// Trained generator plus the token layout and token-item table it decodes into.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub vocab: TokenVocabulary,
    pub tokens: BTreeMap<String, SemanticTokenTuple>,
    pub table: TokenItemTable,
    params: Vec<DenseMatrix>,
    layout: Layout,
}

/// A packed batch of encoder inputs and (optionally) decoder inputs.
#[derive(Debug, Clone, Default)]
pub struct PackedInputs {
    pub enc_ids: Vec<usize>,
    pub enc_pos: Vec<usize>,
    pub enc_segments: Vec<Range<usize>>,
    pub dec_ids: Vec<usize>,
    pub dec_pos: Vec<usize>,
    pub dec_segments: Vec<Range<usize>>,
    /// Encoder segment each decoder segment attends to.
    pub dec_memory: Vec<usize>,
}

impl PackedInputs {
    pub fn push_encoder(&mut self, ids: &[usize]) -> usize {
        let start = self.enc_ids.len();
        self.enc_ids.extend_from_slice(ids);
        self.enc_pos.extend(0..ids.len());
        self.enc_segments.push(start..self.enc_ids.len());
        self.enc_segments.len() - 1
    }

    pub fn push_decoder(&mut self, ids: &[usize], memory: usize) {
        let start = self.dec_ids.len();
        self.dec_ids.extend_from_slice(ids);
        self.dec_pos.extend(0..ids.len());
        self.dec_segments.push(start..self.dec_ids.len());
        self.dec_memory.push(memory);
    }
}

impl GeneratorModel {
    pub fn init(config: &GeneratorConfig, tokens: BTreeMap<String, SemanticTokenTuple>, levels: usize, codebook_size: usize) -> Result<Self> {
        config.validate()?;
        let vocab = TokenVocabulary::from_tokens(&tokens, levels, codebook_size)?;
        let table = TokenItemTable::build(&tokens, &vocab)?;
        let (layout, shapes) = build_layout(config, &vocab);
        let mut rng = rng_for(config.seed, "generator/init");
        let params = shapes
            .iter()
            .map(|&(r, c, init)| match init {
                Init::Zeros => DenseMatrix::zeros(r, c),
                Init::Ones => DenseMatrix::from_vec(r, c, vec![1.0; r * c]).expect("shape"),
                Init::Glorot => DenseMatrix::glorot(r, c, &mut rng),
                Init::Embedding => {
                    let data = (0..r * c).map(|_| rng.gen_range(-0.1..0.1)).collect();
                    DenseMatrix::from_vec(r, c, data).expect("shape")
                }
                Init::Output => {
                    let mut m = DenseMatrix::glorot(r, c, &mut rng);
                    m.scale_assign(0.1);
                    m
                }
            })
            .collect();
        Ok(GeneratorModel { config: config.clone(), vocab, tokens, table, params, layout })
    }

    pub fn parameters(&self) -> Vec<&DenseMatrix> {
        self.params.iter().collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.params.iter_mut().collect()
    }

    pub fn max_input_len(&self) -> usize {
        max_input_len(&self.config, &self.vocab)
    }

    fn layer_norm(&self, tape: &mut Tape<'_>, p: &[Var], x: Var, idx: NormIdx) -> Var {
        let n = tape.layer_norm_rows(x);
        let n = tape.mul_row(n, p[idx.gain]);
        tape.add_row(n, p[idx.bias])
    }

    fn attention(&self, tape: &mut Tape<'_>, p: &[Var], x: Var, memory: Var, idx: AttnIdx, blocks: &[AttentionBlock]) -> Var {
        let q = tape.matmul(x, p[idx.wq]);
        let k = tape.matmul(memory, p[idx.wk]);
        let v = tape.matmul(memory, p[idx.wv]);
        let a = tape.attention(q, k, v, self.config.heads, blocks);
        tape.matmul(a, p[idx.wo])
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, p: &[Var], x: Var, idx: FfIdx) -> Var {
        let h = tape.matmul(x, p[idx.w1]);
        let h = tape.add_row(h, p[idx.b1]);
        let h = tape.relu(h);
        let h = tape.matmul(h, p[idx.w2]);
        tape.add_row(h, p[idx.b2])
    }

    fn embed(&self, tape: &mut Tape<'_>, p: &[Var], ids: &[usize], pos: &[usize], pos_table: usize) -> Result<Var> {
        let limit = self.params[pos_table].rows();
        if let Some(&bad) = pos.iter().find(|&&q| q >= limit) {
            return Err(Error::Usage(format!("position {} exceeds the {} learned positions", bad, limit)));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab.size()) {
            return Err(Error::Usage(format!("token id {} outside vocabulary of {}", bad, self.vocab.size())));
        }
        let t = tape.gather_rows(p[self.layout.token_emb], ids);
        let e = tape.gather_rows(p[pos_table], pos);
        Ok(tape.add(t, e))
    }

    /// Encoder memory for every packed encoder row.
    pub fn encode(&self, tape: &mut Tape<'_>, p: &[Var], batch: &PackedInputs) -> Result<Var> {
        let blocks: Vec<AttentionBlock> = batch
            .enc_segments
            .iter()
            .map(|s| AttentionBlock { queries: s.clone(), keys: s.clone(), causal: false })
            .collect();
        let mut h = self.embed(tape, p, &batch.enc_ids, &batch.enc_pos, self.layout.enc_pos)?;
        for layer in &self.layout.encoder {
            let n = self.layer_norm(tape, p, h, layer.norm1);
            let a = self.attention(tape, p, n, n, layer.attn, &blocks);
            h = tape.add(h, a);
            let n = self.layer_norm(tape, p, h, layer.norm2);
            let f = self.feed_forward(tape, p, n, layer.ff);
            h = tape.add(h, f);
        }
        Ok(self.layer_norm(tape, p, h, self.layout.enc_norm))
    }

    /// Next-token logits for every packed decoder row.
    pub fn decode(&self, tape: &mut Tape<'_>, p: &[Var], memory: Var, batch: &PackedInputs) -> Result<Var> {
        let self_blocks: Vec<AttentionBlock> = batch
            .dec_segments
            .iter()
            .map(|s| AttentionBlock { queries: s.clone(), keys: s.clone(), causal: true })
            .collect();
        let cross_blocks: Vec<AttentionBlock> = batch
            .dec_segments
            .iter()
            .zip(&batch.dec_memory)
            .map(|(s, &m)| AttentionBlock { queries: s.clone(), keys: batch.enc_segments[m].clone(), causal: false })
            .collect();
        let mut h = self.embed(tape, p, &batch.dec_ids, &batch.dec_pos, self.layout.dec_pos)?;
        for layer in &self.layout.decoder {
            let n = self.layer_norm(tape, p, h, layer.norm1);
            let a = self.attention(tape, p, n, n, layer.self_attn, &self_blocks);
            h = tape.add(h, a);
            let n = self.layer_norm(tape, p, h, layer.norm2);
            let c = self.attention(tape, p, n, memory, layer.cross_attn, &cross_blocks);
            h = tape.add(h, c);
            let n = self.layer_norm(tape, p, h, layer.norm3);
            let f = self.feed_forward(tape, p, n, layer.ff);
            h = tape.add(h, f);
        }
        let n = self.layer_norm(tape, p, h, self.layout.dec_norm);
        let logits = tape.matmul(n, p[self.layout.out_w]);
        Ok(tape.add_row(logits, p[self.layout.out_b]))
    }

    /// Writes `param_<i>.cste` files, `config.json` and the token map.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, p) in self.params.iter().enumerate() {
            write_matrix(&dir.join(format!("param_{:03}.cste", i)), p)?;
        }
        write_token_map(&dir.join("tokens.txt"), &self.tokens)?;
        let snapshot = Snapshot { config: self.config.clone(), vocab: self.vocab, params: self.params.len() };
        crate::tokenizer::write_json(&dir.join("config.json"), &snapshot)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("config.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let snapshot: Snapshot = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let tokens = load_token_map(&dir.join("tokens.txt"), snapshot.vocab.levels)?;
        let mut model = GeneratorModel::init(&snapshot.config, tokens, snapshot.vocab.levels, snapshot.vocab.codebook_size)?;
        if model.vocab != snapshot.vocab || model.params.len() != snapshot.params {
            return Err(Error::Data(format!("{}: checkpoint does not match its configuration", dir.display())));
        }
        for (i, p) in model.params.iter_mut().enumerate() {
            let m = read_matrix(&dir.join(format!("param_{:03}.cste", i)))?;
            if m.shape() != p.shape() {
                return Err(Error::Data(format!("parameter {} has shape {:?}, expected {:?}", i, m.shape(), p.shape())));
            }
            *p = m;
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    config: GeneratorConfig,
    vocab: TokenVocabulary,
    params: usize,
}
