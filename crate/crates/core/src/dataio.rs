//! Embedding, sequence and token-map files, plus synthetic dataset generators.
//!
//! Embeddings are stored as a little-endian `CSTE` matrix (`magic | version |
//! count | dim | count*dim f32`) with a `.ids` sidecar holding one item id per
//! line. Sequences and token maps are tab-separated text.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};
use crate::numerics::DenseMatrix;
use crate::seed::rng_for;
use crate::tokenizer::SemanticTokenTuple;

pub const CSTE_MAGIC: [u8; 4] = *b"CSTE";
pub const CSTE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

/// Shortest sequence that still leaves a training, validation and test item.
pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbedding {
    pub item_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorSequence {
    pub user_id: String,
    pub items: Vec<String>,
}

/// Sequences accepted by [`load_sequences`] and how many were dropped for being too short.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLoad {
    pub sequences: Vec<BehaviorSequence>,
    pub rejected_short: usize,
}

pub fn ids_sidecar(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

/// Stacks embedding vectors into a matrix, one item per row.
pub fn embedding_matrix(items: &[ItemEmbedding]) -> Result<DenseMatrix> {
    let dim = items.first().map_or(0, |e| e.vector.len());
    let mut data = Vec::with_capacity(items.len() * dim);
    for e in items {
        if e.vector.len() != dim {
            return Err(Error::Data(format!(
                "item {} has dimension {}, expected {}",
                e.item_id,
                e.vector.len(),
                dim
            )));
        }
        data.extend_from_slice(&e.vector);
    }
    DenseMatrix::from_vec(items.len(), dim, data)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes a matrix in the CSTE layout; values are narrowed to `f32`.
pub fn write_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut w = create(path)?;
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + m.len() * 4);
    buf.extend_from_slice(&CSTE_MAGIC);
    buf.extend_from_slice(&CSTE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || bytes[..4] != CSTE_MAGIC {
        let mut found = [0u8; 4];
        for (d, s) in found.iter_mut().zip(&bytes) {
            *d = *s;
        }
        return Err(LoadError::BadMagic { path: path.into(), found }.into());
    }
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(LoadError::Truncated { path: path.into(), expected: HEADER_LEN, found: bytes.len() as u64 }.into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != CSTE_VERSION {
        return Err(LoadError::BadVersion { path: path.into(), version }.into());
    }
    let (count, dim) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + (count as u64) * (dim as u64) * 4;
    if (bytes.len() as u64) < expected {
        return Err(LoadError::Truncated { path: path.into(), expected, found: bytes.len() as u64 }.into());
    }
    let data = bytes[HEADER_LEN as usize..expected as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    DenseMatrix::from_vec(count, dim, data)
}

pub fn write_embeddings(path: &Path, items: &[ItemEmbedding]) -> Result<()> {
    write_matrix(path, &embedding_matrix(items)?)?;
    let sidecar = ids_sidecar(path);
    let mut w = create(&sidecar)?;
    for e in items {
        writeln!(w, "{}", e.item_id).map_err(|err| Error::io(&sidecar, err))?;
    }
    w.flush().map_err(|e| Error::io(&sidecar, e))
}

/// Reads a CSTE embedding file and its `.ids` sidecar, pairing rows with ids
/// positionally.
pub fn load_embeddings(path: &Path) -> Result<Vec<ItemEmbedding>> {
    let matrix = read_matrix(path)?;
    let sidecar = ids_sidecar(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let ids: Vec<&str> = text.lines().collect();
    if ids.len() != matrix.rows() {
        return Err(LoadError::IdCount { path: sidecar, expected: matrix.rows(), found: ids.len() }.into());
    }
    let mut seen = HashSet::with_capacity(ids.len());
    for id in &ids {
        if !seen.insert(*id) {
            return Err(LoadError::DuplicateId { path: sidecar, id: id.to_string() }.into());
        }
    }
    Ok(ids
        .into_iter()
        .zip(matrix.iter_rows())
        .map(|(id, row)| ItemEmbedding { item_id: id.to_string(), vector: row.to_vec() })
        .collect())
}

pub fn write_sequences(path: &Path, sequences: &[BehaviorSequence]) -> Result<()> {
    let mut w = create(path)?;
    for s in sequences {
        writeln!(w, "{}\t{}", s.user_id, s.items.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `user_id<TAB>item item ...` lines. Sequences shorter than
/// [`MIN_SEQUENCE_LEN`] are dropped and counted.
pub fn load_sequences(path: &Path) -> Result<SequenceLoad> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sequences = Vec::new();
    let mut rejected_short = 0;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (user, items) = line.split_once('\t').ok_or_else(|| LoadError::Malformed {
            path: path.into(),
            line: n + 1,
            message: "expected user_id<TAB>items".into(),
        })?;
        let items: Vec<String> = items.split(' ').filter(|s| !s.is_empty()).map(str::to_string).collect();
        if items.len() < MIN_SEQUENCE_LEN {
            rejected_short += 1;
            continue;
        }
        sequences.push(BehaviorSequence { user_id: user.to_string(), items });
    }
    if rejected_short > 0 {
        log::warn!("{}: rejected {} sequences shorter than {}", path.display(), rejected_short, MIN_SEQUENCE_LEN);
    }
    Ok(SequenceLoad { sequences, rejected_short })
}

/// Checks that every item referenced by a sequence has an embedding.
pub fn check_sequence_items(sequences: &[BehaviorSequence], items: &[ItemEmbedding]) -> Result<()> {
    let known: HashSet<&str> = items.iter().map(|e| e.item_id.as_str()).collect();
    for s in sequences {
        if let Some(missing) = s.items.iter().find(|i| !known.contains(i.as_str())) {
            return Err(Error::Data(format!("user {} references unknown item {}", s.user_id, missing)));
        }
    }
    Ok(())
}

pub fn write_token_map(path: &Path, tokens: &BTreeMap<String, SemanticTokenTuple>) -> Result<()> {
    let mut w = create(path)?;
    for (id, t) in tokens {
        let mut line = format!("{}\t", id);
        let parts: Vec<String> = t.codes.iter().map(|c| c.to_string()).chain(t.disambig.map(|d| d.to_string())).collect();
        line.push_str(&parts.join(" "));
        writeln!(w, "{}", line).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a token map. `levels` is the number of codes per item; one extra
/// trailing integer is read as the disambiguation suffix.
pub fn load_token_map(path: &Path, levels: usize) -> Result<BTreeMap<String, SemanticTokenTuple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| LoadError::Malformed { path: path.into(), line: n + 1, message };
        let (id, rest) = line.split_once('\t').ok_or_else(|| malformed("expected item_id<TAB>codes".into()))?;
        let nums = rest
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|e| malformed(format!("bad code {:?}: {}", s, e))))
            .collect::<Result<Vec<_>, _>>()?;
        let tuple = match nums.len() {
            l if l == levels => SemanticTokenTuple { codes: nums, disambig: None },
            l if l == levels + 1 => {
                SemanticTokenTuple { codes: nums[..levels].to_vec(), disambig: Some(nums[levels]) }
            }
            l => return Err(malformed(format!("expected {} or {} integers, found {}", levels, levels + 1, l)).into()),
        };
        if out.insert(id.to_string(), tuple).is_some() {
            return Err(LoadError::DuplicateId { path: path.into(), id: id.to_string() }.into());
        }
    }
    Ok(out)
}

/// Parameters of the synthetic clustered catalog and its behavior sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_clusters: usize,
    pub d_in: usize,
    pub cluster_spread: f64,
    pub n_users: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub walk_stickiness: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_items: 1000,
            n_clusters: 32,
            d_in: 64,
            cluster_spread: 0.05,
            n_users: 1000,
            seq_len_min: 5,
            seq_len_max: 20,
            walk_stickiness: 0.8,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {}", m)));
        if self.n_items == 0 || self.n_clusters == 0 {
            return bad("n_items and n_clusters must be positive");
        }
        if self.n_clusters > self.n_items {
            return bad("n_clusters must not exceed n_items");
        }
        if !(0.0..=1.0).contains(&self.walk_stickiness) {
            return bad("walk_stickiness must lie in [0, 1]");
        }
        if self.cluster_spread < 0.0 || !self.cluster_spread.is_finite() {
            return bad("cluster_spread must be a finite non-negative number");
        }
        if self.d_in == 0 {
            return bad("d_in must be positive");
        }
        if self.seq_len_min > self.seq_len_max {
            return bad("seq_len_min exceeds seq_len_max");
        }
        Ok(())
    }

    fn item_id(&self, i: usize) -> String {
        let width = digits(self.n_items.saturating_sub(1));
        format!("i{:0width$}", i, width = width)
    }

    fn user_id(&self, u: usize) -> String {
        let width = digits(self.n_users.saturating_sub(1));
        format!("u{:0width$}", u, width = width)
    }
}

fn digits(n: usize) -> usize {
    n.to_string().len()
}

const MAX_MEAN_RETRIES: usize = 10_000;

fn unit_vector<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::numerics::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws cluster means on the unit sphere and items around them.
///
/// Item `i` belongs to cluster `i % n_clusters`, so every cluster is populated.
pub fn synth_clusters(spec: &SyntheticSpec) -> Result<(Vec<ItemEmbedding>, Vec<usize>)> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, "synth/clusters");
    let min_dist = 4.0 * spec.cluster_spread;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.n_clusters);
    for c in 0..spec.n_clusters {
        let mut placed = false;
        for _ in 0..MAX_MEAN_RETRIES {
            let cand = unit_vector(spec.d_in, &mut rng);
            if means.iter().all(|m| crate::numerics::squared_distance(m, &cand).sqrt() >= min_dist) {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place cluster {} of {} with separation {:.3} after {} draws; \
                 use fewer clusters or a smaller cluster_spread",
                c, spec.n_clusters, min_dist, MAX_MEAN_RETRIES
            )));
        }
    }

    let labels: Vec<usize> = (0..spec.n_items).map(|i| i % spec.n_clusters).collect();
    let items = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let vector = means[c]
                .iter()
                .map(|m| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m + spec.cluster_spread * noise
                })
                .collect();
            ItemEmbedding { item_id: spec.item_id(i), vector }
        })
        .collect();
    Ok((items, labels))
}

fn cluster_members(spec: &SyntheticSpec, labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); spec.n_clusters];
    for (i, &c) in labels.iter().enumerate() {
        members
            .get_mut(c)
            .ok_or_else(|| Error::Data(format!("label {} out of range for {} clusters", c, spec.n_clusters)))?
            .push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("cluster {} has no items", c)));
    }
    Ok(members)
}

/// Sticky random walk over clusters: stay with probability `walk_stickiness`,
/// otherwise jump to a uniformly chosen other cluster; one uniform item per step.
pub fn synth_sequences(spec: &SyntheticSpec, labels: &[usize]) -> Result<Vec<BehaviorSequence>> {
    spec.validate()?;
    let members = cluster_members(spec, labels)?;
    let mut rng = rng_for(spec.seed, "synth/sequences");
    let k = spec.n_clusters;
    Ok((0..spec.n_users)
        .map(|u| {
            let len = rng.gen_range(spec.seq_len_min..=spec.seq_len_max);
            let mut cluster = rng.gen_range(0..k);
            let mut items = Vec::with_capacity(len);
            for step in 0..len {
                if step > 0 && k > 1 && !rng.gen_bool(spec.walk_stickiness) {
                    let jump = rng.gen_range(0..k - 1);
                    cluster = if jump >= cluster { jump + 1 } else { jump };
                }
                let item = *members[cluster].choose(&mut rng).expect("non-empty cluster");
                items.push(spec.item_id(item));
            }
            BehaviorSequence { user_id: spec.user_id(u), items }
        })
        .collect())
}

/// Successor of every item when each cluster is read as a cycle in item order.
pub fn successor_table(spec: &SyntheticSpec, labels: &[usize]) -> Result<Vec<usize>> {
    let members = cluster_members(spec, labels)?;
    let mut next = vec![0; labels.len()];
    for cycle in &members {
        for (p, &i) in cycle.iter().enumerate() {
            next[i] = cycle[(p + 1) % cycle.len()];
        }
    }
    Ok(next)
}

/// Deterministic-successor sequences: each user starts at a uniform item and
/// follows [`successor_table`].
pub fn synth_successor_sequences(spec: &SyntheticSpec, labels: &[usize]) -> Result<Vec<BehaviorSequence>> {
    spec.validate()?;
    let next = successor_table(spec, labels)?;
    let mut rng: ChaCha8Rng = rng_for(spec.seed, "synth/successor");
    Ok((0..spec.n_users)
        .map(|u| {
            let len = rng.gen_range(spec.seq_len_min..=spec.seq_len_max);
            let mut item = rng.gen_range(0..spec.n_items);
            let mut items = Vec::with_capacity(len);
            for _ in 0..len {
                items.push(spec.item_id(item));
                item = next[item];
            }
            BehaviorSequence { user_id: spec.user_id(u), items }
        })
        .collect())
}

/// Index from item id to position in `items`.
pub fn id_index(items: &[ItemEmbedding]) -> HashMap<&str, usize> {
    items.iter().enumerate().map(|(i, e)| (e.item_id.as_str(), i)).collect()
}
