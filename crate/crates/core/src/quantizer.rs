//! Codebooks, residual quantization, k-means codebook initialization and
//! usage diagnostics.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{read_matrix, write_matrix};
use crate::error::{Error, Result};
use crate::numerics::{squared_distance, DenseMatrix, Tape, Var};
use crate::seed::rng_for;

/// `levels` code tables of `size` vectors of width `dim`. When `shared`,
/// one table serves every level.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    levels: usize,
    size: usize,
    dim: usize,
    shared: bool,
    tables: Vec<DenseMatrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookHeader {
    #[serde(rename = "M")]
    pub levels: usize,
    #[serde(rename = "K")]
    pub size: usize,
    pub d: usize,
    pub shared: bool,
}

impl CodebookSet {
    pub fn new(levels: usize, shared: bool, tables: Vec<DenseMatrix>) -> Result<Self> {
        let expected = if shared { 1 } else { levels };
        if levels == 0 {
            return Err(Error::Config("codebook set needs at least one level".into()));
        }
        if tables.len() != expected {
            return Err(Error::Config(format!("expected {} codebook tables, got {}", expected, tables.len())));
        }
        let (size, dim) = tables[0].shape();
        if size == 0 {
            return Err(Error::Config("empty codebook".into()));
        }
        if let Some(i) = tables.iter().position(|t| t.shape() != (size, dim)) {
            return Err(Error::Config(format!("codebook table {} has shape {:?}, expected {:?}", i, tables[i].shape(), (size, dim))));
        }
        if let Some(i) = tables.iter().position(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("codebook table {} has non-finite entries", i)));
        }
        Ok(CodebookSet { levels, size, dim, shared, tables })
    }

    pub fn zeros(levels: usize, size: usize, dim: usize, shared: bool) -> Self {
        let n = if shared { 1 } else { levels };
        CodebookSet { levels, size, dim, shared, tables: vec![DenseMatrix::zeros(size, dim); n] }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shared(&self) -> bool {
        self.shared
    }

    pub fn header(&self) -> CodebookHeader {
        CodebookHeader { levels: self.levels, size: self.size, d: self.dim, shared: self.shared }
    }

    /// Index into [`CodebookSet::tables`] used by `level` (0-based).
    pub fn table_index(&self, level: usize) -> usize {
        if self.shared {
            0
        } else {
            level
        }
    }

    pub fn table(&self, level: usize) -> &DenseMatrix {
        &self.tables[self.table_index(level)]
    }

    pub fn tables(&self) -> &[DenseMatrix] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.tables
    }

    pub fn set_table(&mut self, index: usize, table: DenseMatrix) -> Result<()> {
        if table.shape() != (self.size, self.dim) {
            return Err(Error::Config(format!(
                "table shape {:?} does not match codebook {:?}",
                table.shape(),
                (self.size, self.dim)
            )));
        }
        self.tables[index] = table;
        Ok(())
    }

    /// Writes `codebooks.json` and one `codebook_<i>.cste` per table into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header_path = dir.join("codebooks.json");
        let json = serde_json::to_string_pretty(&self.header()).map_err(|e| Error::json(&header_path, e))?;
        fs::write(&header_path, json + "\n").map_err(|e| Error::io(&header_path, e))?;
        for (i, t) in self.tables.iter().enumerate() {
            write_matrix(&dir.join(format!("codebook_{}.cste", i)), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header_path = dir.join("codebooks.json");
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: CodebookHeader = serde_json::from_str(&text).map_err(|e| Error::json(&header_path, e))?;
        let n = if header.shared { 1 } else { header.levels };
        let tables = (0..n)
            .map(|i| read_matrix(&dir.join(format!("codebook_{}.cste", i))))
            .collect::<Result<Vec<_>>>()?;
        let books = CodebookSet::new(header.levels, header.shared, tables)?;
        if books.size != header.size || books.dim != header.d {
            return Err(Error::Data(format!("{}: header disagrees with table shapes", header_path.display())));
        }
        Ok(books)
    }
}

/// Index of the code nearest to `r` (squared Euclidean; lowest index on ties)
/// and the code vector itself.
pub fn nearest_code<'a>(r: &[f64], level: usize, books: &'a CodebookSet) -> Result<(usize, &'a [f64])> {
    if level >= books.levels {
        return Err(Error::Usage(format!("level {} out of range for {} levels", level, books.levels)));
    }
    if r.len() != books.dim {
        return Err(Error::Usage(format!("residual has dimension {}, codebook {}", r.len(), books.dim)));
    }
    let table = books.table(level);
    let (idx, _) = nearest_row(r, table).ok_or_else(|| Error::Config("empty codebook".into()))?;
    Ok((idx, table.row(idx)))
}

fn nearest_row(r: &[f64], table: &DenseMatrix) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, code) in table.iter_rows().enumerate() {
        let d = squared_distance(r, code);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best
}

/// Codes and intermediate values of one residual quantization pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub codes: Vec<usize>,
    /// `r_0 = z` through `r_M`.
    pub residuals: Vec<Vec<f64>>,
    pub z_hat: Vec<f64>,
}

pub fn residual_quantize(z: &[f64], books: &CodebookSet) -> Result<QuantizationResult> {
    let mut residuals = Vec::with_capacity(books.levels + 1);
    let mut codes = Vec::with_capacity(books.levels);
    let mut z_hat = vec![0.0; z.len()];
    residuals.push(z.to_vec());
    for level in 0..books.levels {
        let r = residuals.last().expect("r_0 present");
        let (c, e) = nearest_code(r, level, books)?;
        let next: Vec<f64> = r.iter().zip(e).map(|(a, b)| a - b).collect();
        for (s, v) in z_hat.iter_mut().zip(e) {
            *s += v;
        }
        codes.push(c);
        residuals.push(next);
    }
    Ok(QuantizationResult { codes, residuals, z_hat })
}

/// Codes for every row of `latents`.
pub fn quantize_rows(latents: &DenseMatrix, books: &CodebookSet) -> Result<Vec<Vec<usize>>> {
    latents.iter_rows().map(|z| residual_quantize(z, books).map(|q| q.codes)).collect()
}

/// Tape nodes of a batched quantization pass with fixed code selections.
#[derive(Debug, Clone)]
pub struct TapeQuantization {
    /// `r_0 .. r_M`, each `B x d`. `r_i = r_{i-1} - sg(e_i)`.
    pub residuals: Vec<Var>,
    /// Selected code vectors per level, `B x d`, differentiable w.r.t. the tables.
    pub selected: Vec<Var>,
    /// Sum of the selected code vectors.
    pub z_hat: Var,
}

/// Records residual quantization of the batch `z` given per-item `codes`.
/// `tables` are the bound codebook tables in [`CodebookSet::tables`] order.
pub fn quantize_on_tape(tape: &mut Tape, books: &CodebookSet, tables: &[Var], z: Var, codes: &[Vec<usize>]) -> TapeQuantization {
    let mut residuals = vec![z];
    let mut selected = Vec::with_capacity(books.levels);
    for level in 0..books.levels {
        let idx: Vec<usize> = codes.iter().map(|c| c[level]).collect();
        let e = tape.gather_rows(tables[books.table_index(level)], &idx);
        let e_sg = tape.stop_grad(e);
        let r = tape.sub(*residuals.last().expect("r_0"), e_sg);
        residuals.push(r);
        selected.push(e);
    }
    let mut z_hat = selected[0];
    for &e in &selected[1..] {
        z_hat = tape.add(z_hat, e);
    }
    TapeQuantization { residuals, selected, z_hat }
}

/// Forward value `z_hat`, backward identity to `z`: `(z - sg(z)) + sg(z_hat)`.
pub fn straight_through(tape: &mut Tape, z: Var, z_hat: Var) -> Var {
    let z_sg = tape.stop_grad(z);
    let zero = tape.sub(z, z_sg);
    let hat_sg = tape.stop_grad(z_hat);
    tape.add(zero, hat_sg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansInit {
    pub centroids: DenseMatrix,
    /// Codes filled by jittered copies because the input had fewer distinct points than `k`.
    pub warnings: usize,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITERS: usize = 100;
const JITTER: f64 = 1e-6;

/// k-means++ seeding followed by Lloyd iterations (until assignments stop
/// changing or [`KMEANS_MAX_ITERS`]). Empty clusters are moved onto the point
/// farthest from its centroid.
pub fn kmeans_init(points: &DenseMatrix, k: usize, seed: u64) -> Result<KMeansInit> {
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if points.rows() == 0 {
        return Err(Error::Data("k-means on an empty batch".into()));
    }
    let mut rng = rng_for(seed, "kmeans");
    let d = points.cols();

    let mut seen = HashSet::new();
    let distinct: Vec<usize> = (0..points.rows())
        .filter(|&i| seen.insert(points.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect();

    if distinct.len() < k {
        let warnings = k - distinct.len();
        log::warn!("k-means: {} distinct points for {} codes; filling {} with jittered copies", distinct.len(), k, warnings);
        let mut centroids = DenseMatrix::zeros(k, d);
        for c in 0..k {
            let src = points.row(distinct[c % distinct.len()]);
            let row = centroids.row_mut(c);
            row.copy_from_slice(src);
            if c >= distinct.len() {
                for v in row.iter_mut() {
                    *v += rng.gen_range(-JITTER..JITTER);
                }
            }
        }
        return Ok(KMeansInit { centroids, warnings, iterations: 0 });
    }

    // k-means++ seeding over the distinct points
    let mut chosen = vec![distinct[rng.gen_range(0..distinct.len())]];
    let mut d2: Vec<f64> = distinct.iter().map(|&i| squared_distance(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen_range(0.0..total);
            let mut pick = d2.len() - 1;
            for (j, w) in d2.iter().enumerate() {
                if t < *w {
                    pick = j;
                    break;
                }
                t -= w;
            }
            // floating slack can land on an already-chosen point
            if d2[pick] == 0.0 {
                pick = d2.iter().position(|&w| w > 0.0).expect("total > 0");
            }
            pick
        } else {
            d2.iter().position(|&w| w > 0.0).unwrap_or(0)
        };
        let p = distinct[pick];
        chosen.push(p);
        for (j, &i) in distinct.iter().enumerate() {
            d2[j] = d2[j].min(squared_distance(points.row(i), points.row(p)));
        }
    }
    let mut centroids = points.select_rows(&chosen);

    let n = points.rows();
    let mut assign = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, dd) = nearest_row(points.row(i), &centroids).expect("k >= 1");
            dist[i] = dd;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }

        let mut sums = DenseMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums.row_mut(assign[i]).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut taken = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .fold(None, |best: Option<(usize, f64)>, i| match best {
                        Some((_, bd)) if dist[i] <= bd => best,
                        _ => Some((i, dist[i])),
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken.insert(far);
                centroids.row_mut(c).copy_from_slice(points.row(far));
                dist[far] = 0.0;
            }
        }
    }
    Ok(KMeansInit { centroids, warnings: 0, iterations })
}

/// Per-level share of codes selected at least once, with usage histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct Utilization {
    pub per_level: Vec<f64>,
    pub histograms: Vec<Vec<usize>>,
}

pub fn utilization(assignments: &[Vec<usize>], levels: usize, size: usize) -> Utilization {
    let mut histograms = vec![vec![0usize; size]; levels];
    for codes in assignments {
        for (level, &c) in codes.iter().take(levels).enumerate() {
            histograms[level][c] += 1;
        }
    }
    let per_level = histograms
        .iter()
        .map(|h| h.iter().filter(|&&n| n > 0).count() as f64 / size as f64)
        .collect();
    Utilization { per_level, histograms }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn books(rows: &[Vec<f64>], levels: usize) -> CodebookSet {
        CodebookSet::new(levels, true, vec![DenseMatrix::from_rows(rows).unwrap()]).unwrap()
    }

    #[test]
    fn nearest_code_picks_closest() {
        let b = books(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1);
        assert_eq!(nearest_code(&[0.9, 0.2], 0, &b).unwrap().0, 0);
    }

    #[test]
    fn nearest_code_exact_match_and_ties() {
        let b = books(&[vec![5.0, 5.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![2.0, 3.0]], 1);
        let (i, e) = nearest_code(&[2.0, 3.0], 0, &b).unwrap();
        assert_eq!(i, 3);
        assert_eq!(squared_distance(e, &[2.0, 3.0]), 0.0);
        assert_eq!(nearest_code(&[0.0, 0.0], 0, &b).unwrap().0, 1);
    }

    #[test]
    fn nearest_code_rejects_wrong_dimension() {
        let b = books(&[vec![1.0, 0.0]], 1);
        assert!(nearest_code(&[1.0], 0, &b).is_err());
    }

    #[test]
    fn one_level_exact_reconstruction() {
        let rows: Vec<Vec<f64>> = (0..8).map(|k| vec![k as f64, -(k as f64) * 0.5]).collect();
        let b = books(&rows, 1);
        let q = residual_quantize(&rows[5], &b).unwrap();
        assert_eq!(q.codes, vec![5]);
        assert_eq!(q.residuals[1], vec![0.0, 0.0]);
        assert_eq!(q.z_hat, rows[5]);
    }

    #[test]
    fn two_level_shared_codebook() {
        let b = books(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]], 2);
        let q = residual_quantize(&[0.9, 0.2], &b).unwrap();
        assert_eq!(q.codes, vec![0, 2]);
    }

    #[test]
    fn kmeans_two_points_two_codes() {
        let pts = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let out = kmeans_init(&pts, 2, 1).unwrap();
        let mut rows: Vec<Vec<f64>> = out.centroids.iter_rows().map(<[f64]>::to_vec).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(out.warnings, 0);
    }

    #[test]
    fn kmeans_identical_points_jitters_and_warns() {
        let pts = DenseMatrix::from_rows(&vec![vec![0.5, -0.5]; 6]).unwrap();
        let out = kmeans_init(&pts, 2, 9).unwrap();
        assert_eq!(out.warnings, 1);
        assert_eq!(out.centroids.row(0), &[0.5, -0.5]);
        assert_ne!(out.centroids.row(1), out.centroids.row(0));
        assert!(squared_distance(out.centroids.row(1), &[0.5, -0.5]) < 1e-10);
    }

    #[test]
    fn utilization_extremes() {
        let collapsed = vec![vec![0, 0]; 10];
        let u = utilization(&collapsed, 2, 4);
        assert_eq!(u.per_level, vec![0.25, 0.25]);
        assert_eq!(u.histograms[0][0], 10);
        let full: Vec<Vec<usize>> = (0..4).map(|k| vec![k, 3 - k]).collect();
        assert_eq!(utilization(&full, 2, 4).per_level, vec![1.0, 1.0]);
    }

    #[test]
    fn straight_through_forward_and_backward() {
        let mut tape = Tape::new();
        let z_value = DenseMatrix::row_vector(&[0.3, -1.2, 2.0]);
        let z = tape.param(crate::numerics::ParamId(0), &z_value);
        let hat = tape.input(DenseMatrix::row_vector(&[0.1, 0.7, 1.9]));
        let st = straight_through(&mut tape, z, hat);
        assert_eq!(tape.value(st).as_slice(), &[0.1, 0.7, 1.9]);
        let loss = tape.sum(st);
        let g = tape.grad(loss).unwrap();
        assert_eq!(g.get(crate::numerics::ParamId(0)).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = CodebookSet::new(
            2,
            false,
            vec![DenseMatrix::from_rows(&[vec![0.5, 1.0]]).unwrap(), DenseMatrix::from_rows(&[vec![-2.0, 0.25]]).unwrap()],
        )
        .unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(CodebookSet::load(dir.path()).unwrap(), b);
    }
}
