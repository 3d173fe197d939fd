//! Blockwise vector quantization.
//!
//! A weight matrix is cut into `block_rows × block_cols` blocks (row-major
//! block order); each block is flattened row-major and split into
//! sub-vectors of `vector_len`. Blocks are grouped into clusters that share
//! one codebook of `C` INT4 entries plus an `f32` scale. Every sub-vector
//! stores one index into its cluster's codebook.

mod format;
pub mod kmeans;
pub mod refine;

pub use format::{decode_model, encode_model, FORMAT_MAGIC, FORMAT_VERSION};
pub use kmeans::{kmeans, KMeans};
pub use refine::{gumbel_refine, RefineReport, SoftAssignment};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizer::{quantize_value, QuantError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BvqError {
    #[error("{dimension} = {size} is not divisible by block {dimension} {block}")]
    Divisibility {
        dimension: &'static str,
        size: usize,
        block: usize,
    },
    #[error("invalid BVQ config: {0}")]
    Config(String),
    #[error("cluster {cluster} has {vectors} sub-vectors, fewer than {entries} codebook entries")]
    DegenerateCluster {
        cluster: usize,
        vectors: usize,
        entries: usize,
    },
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed BVQ model file: {0}")]
    Format(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// How blocks share codebooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clustering {
    /// One codebook per block.
    PerBlock,
    /// One codebook per row of blocks.
    #[default]
    PerBlockRow,
    /// A single codebook for the whole matrix.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BvqConfig {
    pub block_rows: usize,
    pub block_cols: usize,
    pub vector_len: usize,
    pub codebook_entries: usize,
    pub clustering: Clustering,
    pub kmeans_iters: usize,
    /// Independent k-means++ starts per cluster; the lowest-inertia fit wins.
    pub kmeans_restarts: usize,
    pub tau_initial: f64,
    pub tau_final: f64,
    pub steps: usize,
    /// Step size for codebook latents and scales.
    pub learning_rate: f64,
    /// Step size for assignment logits.
    pub logit_learning_rate: f64,
    pub seed: u64,
}

impl Default for BvqConfig {
    fn default() -> Self {
        Self {
            block_rows: 4,
            block_cols: 8,
            vector_len: 8,
            codebook_entries: 16,
            clustering: Clustering::PerBlockRow,
            kmeans_iters: 50,
            kmeans_restarts: 8,
            tau_initial: 1.0,
            tau_final: 0.05,
            steps: 300,
            learning_rate: 0.05,
            logit_learning_rate: 2.0,
            seed: 0,
        }
    }
}

impl BvqConfig {
    /// Shape-independent checks.
    pub fn validate(&self) -> Result<(), BvqError> {
        let bad = |m: &str| Err(BvqError::Config(m.to_string()));
        if self.block_rows == 0 || self.block_cols == 0 || self.vector_len == 0 {
            return bad("block_rows, block_cols and vector_len must be positive");
        }
        if (self.block_rows * self.block_cols) % self.vector_len != 0 {
            return bad("vector_len must divide block_rows * block_cols");
        }
        if !self.codebook_entries.is_power_of_two() || self.codebook_entries > 1 << 16 {
            return bad("codebook_entries must be a power of two no larger than 65536");
        }
        if !(self.tau_initial > 0.0 && self.tau_final > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.logit_learning_rate >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        Ok(())
    }

    /// INT4 codebook rows of a block must fit one ReRAM bank row.
    pub fn check_bank_width(&self, bank_width_bits: u64) -> Result<(), BvqError> {
        let bits = self.block_cols as u64 * 4;
        if bits > bank_width_bits {
            return Err(BvqError::Config(format!(
                "block_cols {} needs {bits} bits per row, exceeding bank width {bank_width_bits}",
                self.block_cols
            )));
        }
        Ok(())
    }

    pub fn layout_for(&self, rows: usize, cols: usize) -> Result<BvqLayout, BvqError> {
        self.validate()?;
        let layout = BvqLayout {
            rows,
            cols,
            block_rows: self.block_rows,
            block_cols: self.block_cols,
            vector_len: self.vector_len,
            codebook_entries: self.codebook_entries,
        };
        layout.validate()?;
        Ok(layout)
    }
}

/// Shape information stored with a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BvqLayout {
    pub rows: usize,
    pub cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    pub vector_len: usize,
    pub codebook_entries: usize,
}

impl BvqLayout {
    pub fn validate(&self) -> Result<(), BvqError> {
        if self.block_rows == 0 || self.block_cols == 0 || self.vector_len == 0 {
            return Err(BvqError::Config("block and vector sizes must be positive".into()));
        }
        if self.rows == 0 || self.rows % self.block_rows != 0 {
            return Err(BvqError::Divisibility {
                dimension: "rows",
                size: self.rows,
                block: self.block_rows,
            });
        }
        if self.cols == 0 || self.cols % self.block_cols != 0 {
            return Err(BvqError::Divisibility {
                dimension: "cols",
                size: self.cols,
                block: self.block_cols,
            });
        }
        if (self.block_rows * self.block_cols) % self.vector_len != 0 {
            return Err(BvqError::Config("vector_len must divide the block size".into()));
        }
        if !self.codebook_entries.is_power_of_two() {
            return Err(BvqError::Config("codebook_entries must be a power of two".into()));
        }
        Ok(())
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / self.block_cols
    }

    pub fn block_count(&self) -> usize {
        (self.rows / self.block_rows) * self.blocks_per_row()
    }

    pub fn subvectors_per_block(&self) -> usize {
        self.block_rows * self.block_cols / self.vector_len
    }

    pub fn subvector_count(&self) -> usize {
        self.block_count() * self.subvectors_per_block()
    }

    pub fn index_bits(&self) -> u32 {
        self.codebook_entries.trailing_zeros()
    }

    /// Matrix coordinates of element `e` of sub-vector `v`.
    pub fn element_position(&self, v: usize, e: usize) -> (usize, usize) {
        let spb = self.subvectors_per_block();
        let block = v / spb;
        let within = (v % spb) * self.vector_len + e;
        let (br, bc) = (block / self.blocks_per_row(), block % self.blocks_per_row());
        (
            br * self.block_rows + within / self.block_cols,
            bc * self.block_cols + within % self.block_cols,
        )
    }

    pub fn cluster_map(&self, clustering: Clustering) -> Vec<u32> {
        let bpr = self.blocks_per_row();
        (0..self.block_count())
            .map(|b| match clustering {
                Clustering::PerBlock => b as u32,
                Clustering::PerBlockRow => (b / bpr) as u32,
                Clustering::Global => 0,
            })
            .collect()
    }
}

/// Sub-vectors of a matrix in partition order, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub layout: BvqLayout,
    data: Vec<f64>,
}

impl Partition {
    pub fn block_count(&self) -> usize {
        self.layout.block_count()
    }

    pub fn subvector_count(&self) -> usize {
        self.layout.subvector_count()
    }

    pub fn subvector(&self, v: usize) -> &[f64] {
        let l = self.layout.vector_len;
        &self.data[v * l..(v + 1) * l]
    }

    /// Flattened (row-major) contents of block `b`.
    pub fn block(&self, b: usize) -> &[f64] {
        let n = self.layout.block_rows * self.layout.block_cols;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Inverse of [`partition_blocks`].
    pub fn assemble(&self) -> Array2<f64> {
        assemble(&self.layout, &self.data)
    }
}

/// Lays flat sub-vector data back into matrix shape.
pub fn assemble(layout: &BvqLayout, flat: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros((layout.rows, layout.cols));
    let l = layout.vector_len;
    for v in 0..layout.subvector_count() {
        for e in 0..l {
            out[layout.element_position(v, e)] = flat[v * l + e];
        }
    }
    out
}

pub fn partition_blocks(w: &Array2<f64>, config: &BvqConfig) -> Result<Partition, BvqError> {
    let layout = config.layout_for(w.nrows(), w.ncols())?;
    let l = layout.vector_len;
    let mut data = vec![0.0; layout.rows * layout.cols];
    for v in 0..layout.subvector_count() {
        for e in 0..l {
            data[v * l + e] = w[layout.element_position(v, e)];
        }
    }
    Ok(Partition { layout, data })
}

fn weighted_error(values: &[f64], weights: &[f64], vector_len: usize, s: f64) -> f64 {
    values
        .chunks_exact(vector_len)
        .zip(weights)
        .map(|(entry, w)| {
            w * entry
                .iter()
                .map(|&v| {
                    let r = v - quantize_value(v, s, 4) as f64 * s;
                    r * r
                })
                .sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `C × vector_len` INT4 codes, entry-major.
    pub entries: Vec<i8>,
    pub scale: f32,
}

impl Codebook {
    pub fn entry(&self, c: usize, vector_len: usize) -> &[i8] {
        &self.entries[c * vector_len..(c + 1) * vector_len]
    }

    /// Quantizes real-valued entries with the max-abs/7 scale.
    pub fn from_values(values: &[f64]) -> Self {
        let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak == 0.0 { 1.0f32 } else { (peak / 7.0) as f32 };
        Self::with_scale(values, scale)
    }

    /// Picks the scale on a grid of `max-abs/7 · f`, `f ∈ [0.50, 1.50]` in
    /// steps of 0.01, minimizing the weighted squared rounding error of the
    /// entries. `weights[c]` multiplies the error of entry `c`; with member
    /// counts as weights this is the reconstruction error added on top of
    /// the centroid residual.
    pub fn fit_weighted(values: &[f64], weights: &[f64], vector_len: usize) -> Self {
        let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            return Self::with_scale(values, 1.0);
        }
        let mut best: Option<(f64, f32)> = None;
        for step in (50..=150).rev() {
            let scale = (peak / 7.0 * step as f64 / 100.0) as f32;
            let err = weighted_error(values, weights, vector_len, scale as f64);
            if best.is_none_or(|(e, _)| err < e) {
                best = Some((err, scale));
            }
        }
        let (mut err, mut scale) = best.expect("non-empty grid");
        // Alternate a least-squares scale fit for the current codes with
        // re-rounding; each half-step can only lower the error.
        for _ in 0..32 {
            let cb = Self::with_scale(values, scale);
            let (mut num, mut den) = (0.0, 0.0);
            for ((entry, codes), w) in values.chunks_exact(vector_len).zip(cb.entries.chunks_exact(vector_len)).zip(weights) {
                for (&v, &q) in entry.iter().zip(codes) {
                    num += w * v * q as f64;
                    den += w * (q as f64) * (q as f64);
                }
            }
            if den == 0.0 {
                break;
            }
            let next = (num / den) as f32;
            let next_err = weighted_error(values, weights, vector_len, next as f64);
            if !(next > 0.0 && next_err < err) {
                break;
            }
            (err, scale) = (next_err, next);
        }
        Self::with_scale(values, scale)
    }

    pub fn with_scale(values: &[f64], scale: f32) -> Self {
        let s = scale as f64;
        Self {
            entries: values.iter().map(|&v| quantize_value(v, s, 4)).collect(),
            scale,
        }
    }

    pub fn dequantized(&self) -> Vec<f64> {
        let s = self.scale as f64;
        self.entries.iter().map(|&q| q as f64 * s).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BvqModel {
    pub layout: BvqLayout,
    /// Codebook id for each block.
    pub cluster_map: Vec<u32>,
    pub codebooks: Vec<Codebook>,
    /// One codebook index per sub-vector, partition order.
    pub indices: Vec<u16>,
}

impl BvqModel {
    /// Checks index bounds, the INT4 range, and internal shape agreement.
    pub fn validate(&self) -> Result<(), BvqError> {
        self.layout.validate()?;
        let l = &self.layout;
        let bad = |m: String| Err(BvqError::Format(m));
        if self.cluster_map.len() != l.block_count() {
            return bad(format!("cluster map has {} entries for {} blocks", self.cluster_map.len(), l.block_count()));
        }
        if self.indices.len() != l.subvector_count() {
            return bad(format!("{} indices for {} sub-vectors", self.indices.len(), l.subvector_count()));
        }
        if let Some(&c) = self.cluster_map.iter().find(|&&c| c as usize >= self.codebooks.len()) {
            return bad(format!("cluster id {c} out of range"));
        }
        for cb in &self.codebooks {
            if cb.entries.len() != l.codebook_entries * l.vector_len {
                return bad("codebook size mismatch".into());
            }
            if cb.entries.iter().any(|&q| !(-8..=7).contains(&q)) {
                return bad("codebook entry outside INT4 range".into());
            }
            if !(cb.scale.is_finite() && cb.scale > 0.0) {
                return bad("codebook scale must be positive".into());
            }
        }
        if self.indices.iter().any(|&i| i as usize >= l.codebook_entries) {
            return bad("index out of range".into());
        }
        Ok(())
    }

    pub fn codebook_of_subvector(&self, v: usize) -> usize {
        self.cluster_map[v / self.layout.subvectors_per_block()] as usize
    }

    /// Sub-vectors in partition order, each `scale · codebook[cluster][index]`.
    pub fn reconstruct_flat(&self) -> Vec<f64> {
        let l = self.layout.vector_len;
        let deq: Vec<Vec<f64>> = self.codebooks.iter().map(Codebook::dequantized).collect();
        let mut out = Vec::with_capacity(self.layout.subvector_count() * l);
        for (v, &idx) in self.indices.iter().enumerate() {
            let cb = &deq[self.codebook_of_subvector(v)];
            out.extend_from_slice(&cb[idx as usize * l..(idx as usize + 1) * l]);
        }
        out
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        assemble(&self.layout, &self.reconstruct_flat())
    }

    pub fn mse(&self, w: &Array2<f64>) -> f64 {
        mse(w, &self.reconstruct())
    }
}

pub fn reconstruct(model: &BvqModel) -> Array2<f64> {
    model.reconstruct()
}

pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Index of the nearest entry (squared distance, ties to the lowest index).
pub(crate) fn nearest(vector: &[f64], table: &[f64], vector_len: usize) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for (c, entry) in table.chunks_exact(vector_len).enumerate() {
        let d: f64 = entry.iter().zip(vector).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Runs seeded k-means per cluster, quantizes the centroids to INT4, and
/// assigns every sub-vector to its nearest quantized entry.
pub fn kmeans_init(partition: &Partition, config: &BvqConfig) -> Result<BvqModel, BvqError> {
    config.validate()?;
    let layout = partition.layout;
    let l = layout.vector_len;
    let c = layout.codebook_entries;
    let cluster_map = layout.cluster_map(config.clustering);
    let clusters = cluster_map.iter().max().map_or(0, |&m| m as usize + 1);
    let spb = layout.subvectors_per_block();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clusters];
    for v in 0..layout.subvector_count() {
        members[cluster_map[v / spb] as usize].push(v);
    }

    let mut codebooks = Vec::with_capacity(clusters);
    let mut indices = vec![0u16; layout.subvector_count()];
    for (cluster, vs) in members.iter().enumerate() {
        if vs.len() < c {
            return Err(BvqError::DegenerateCluster {
                cluster,
                vectors: vs.len(),
                entries: c,
            });
        }
        let points: Vec<f64> = vs.iter().flat_map(|&v| partition.subvector(v).iter().copied()).collect();
        let mut rng = crate::rng::substream(config.seed, cluster as u64);
        let mut fit = kmeans(&points, l, c, config.kmeans_iters, &mut rng);
        let mut best = fit.inertia(&points, l);
        for _ in 1..config.kmeans_restarts.max(1) {
            let next = kmeans(&points, l, c, config.kmeans_iters, &mut rng);
            let inertia = next.inertia(&points, l);
            if inertia < best {
                best = inertia;
                fit = next;
            }
        }
        let mut counts = vec![0.0; c];
        for &label in &fit.labels {
            counts[label] += 1.0;
        }
        let cb = Codebook::fit_weighted(&fit.centroids, &counts, l);
        let table = cb.dequantized();
        for &v in vs {
            indices[v] = nearest(partition.subvector(v), &table, l) as u16;
        }
        codebooks.push(cb);
    }
    Ok(BvqModel {
        layout,
        cluster_map,
        codebooks,
        indices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub elements: u64,
    pub original_bits_per_weight: u32,
    pub original_bits: u64,
    pub codebook_bits: u64,
    pub index_bits: u64,
    pub scale_bits: u64,
    pub compressed_bits: u64,
    pub original_bytes: u64,
    pub compressed_bytes: u64,
    pub ratio: f64,
    pub bits_per_weight: f64,
}

/// `ratio = elements·original_bits / (codebook + index + scale bits)`.
pub fn compression_report(model: &BvqModel, original_bits_per_weight: u32) -> CompressionReport {
    let l = &model.layout;
    let elements = (l.rows * l.cols) as u64;
    let codebook_bits = (model.codebooks.len() * l.codebook_entries * l.vector_len) as u64 * 4;
    let index_bits = l.subvector_count() as u64 * l.index_bits() as u64;
    let scale_bits = model.codebooks.len() as u64 * 32;
    let compressed_bits = codebook_bits + index_bits + scale_bits;
    let original_bits = elements * original_bits_per_weight as u64;
    CompressionReport {
        elements,
        original_bits_per_weight,
        original_bits,
        codebook_bits,
        index_bits,
        scale_bits,
        compressed_bits,
        original_bytes: original_bits.div_ceil(8),
        compressed_bytes: compressed_bits.div_ceil(8),
        ratio: original_bits as f64 / compressed_bits as f64,
        bits_per_weight: compressed_bits as f64 / elements as f64,
    }
}

/// Synthetic weights whose sub-vectors are drawn from `prototypes` planted
/// vectors plus Gaussian noise.
pub fn planted_weights(
    rows: usize,
    cols: usize,
    vector_len: usize,
    prototypes: usize,
    noise: f64,
    seed: u64,
) -> Array2<f64> {
    use rand::Rng;
    let mut rng = crate::rng::seeded(seed);
    let protos: Vec<f64> = (0..prototypes * vector_len)
        .map(|_| crate::rng::standard_normal(&mut rng))
        .collect();
    let mut w = Array2::zeros((rows, cols));
    for r in 0..rows {
        for start in (0..cols).step_by(vector_len) {
            let p = rng.random_range(0..prototypes);
            for e in 0..vector_len.min(cols - start) {
                w[[r, start + e]] = protos[p * vector_len + e] + noise * crate::rng::standard_normal(&mut rng);
            }
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(br: usize, bc: usize, l: usize, c: usize) -> BvqConfig {
        BvqConfig {
            block_rows: br,
            block_cols: bc,
            vector_len: l,
            codebook_entries: c,
            ..BvqConfig::default()
        }
    }

    #[test]
    fn partition_counts_and_divisibility() {
        let w = Array2::zeros((64, 64));
        assert_eq!(partition_blocks(&w, &cfg(4, 8, 8, 16)).unwrap().block_count(), 128);
        let w = Array2::zeros((8, 8));
        assert_eq!(partition_blocks(&w, &cfg(8, 8, 8, 16)).unwrap().block_count(), 1);
        let w = Array2::zeros((10, 8));
        assert_eq!(
            partition_blocks(&w, &cfg(4, 8, 8, 16)).unwrap_err(),
            BvqError::Divisibility {
                dimension: "rows",
                size: 10,
                block: 4
            }
        );
    }

    #[test]
    fn partition_layout_is_row_major_within_blocks() {
        let w = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        let p = partition_blocks(&w, &cfg(2, 2, 2, 1)).unwrap();
        // Block 0 = rows 0..2, cols 0..2; block 1 = rows 0..2, cols 2..4.
        assert_eq!(p.block(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.block(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.subvector(1), &[4.0, 5.0]);
        assert_eq!(p.assemble(), w);
    }

    #[test]
    fn identity_codebook_reconstructs_layout_exactly() {
        // Values on the INT4 grid with scale 1: each sub-vector gets its own
        // codebook entry, so reconstruction must reproduce the layout.
        let w = Array2::from_shape_fn((4, 8), |(r, c)| ((r * 8 + c) % 15) as f64 - 7.0);
        let config = BvqConfig {
            clustering: Clustering::Global,
            ..cfg(2, 4, 4, 8)
        };
        let p = partition_blocks(&w, &config).unwrap();
        let layout = p.layout;
        let mut entries = Vec::new();
        for v in 0..layout.subvector_count() {
            entries.extend(p.subvector(v).iter().map(|&x| x as i8));
        }
        let model = BvqModel {
            layout,
            cluster_map: vec![0; layout.block_count()],
            codebooks: vec![Codebook { entries, scale: 1.0 }],
            indices: (0..layout.subvector_count() as u16).collect(),
        };
        model.validate().unwrap();
        assert_eq!(model.reconstruct(), w);
    }

    #[test]
    fn kmeans_init_identical_vectors() {
        let w = Array2::from_shape_fn((4, 8), |(_, c)| [0.5, -1.0, 2.0, 0.25][c % 4]);
        let config = BvqConfig {
            clustering: Clustering::Global,
            ..cfg(4, 8, 4, 1)
        };
        let p = partition_blocks(&w, &config).unwrap();
        let model = kmeans_init(&p, &config).unwrap();
        model.validate().unwrap();
        let r = model.reconstruct();
        assert_eq!(r.dim(), w.dim());
        let scale = model.codebooks[0].scale as f64;
        for (a, b) in r.iter().zip(w.iter()) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-12);
        }
    }

    #[test]
    fn kmeans_init_rejects_small_clusters() {
        let w = Array2::zeros((4, 8));
        let config = cfg(4, 8, 8, 16);
        let p = partition_blocks(&w, &config).unwrap();
        assert!(matches!(
            kmeans_init(&p, &config),
            Err(BvqError::DegenerateCluster { vectors: 4, entries: 16, .. })
        ));
    }

    #[test]
    fn compression_report_formula() {
        let w = Array2::zeros((64, 64));
        let config = BvqConfig {
            clustering: Clustering::Global,
            ..cfg(8, 8, 8, 16)
        };
        let p = partition_blocks(&w, &config).unwrap();
        let model = kmeans_init(&p, &config).unwrap();
        let r = compression_report(&model, 16);
        assert_eq!(r.codebook_bits, 16 * 8 * 4);
        assert_eq!(r.index_bits, 512 * 4);
        assert_eq!(r.scale_bits, 32);
        assert_eq!(r.ratio, 65536.0 / 2592.0);

        let config = BvqConfig {
            clustering: Clustering::Global,
            ..cfg(8, 8, 8, 1)
        };
        let model = kmeans_init(&partition_blocks(&w, &config).unwrap(), &config).unwrap();
        assert_eq!(compression_report(&model, 16).index_bits, 0);

        // 1×1 blocks, scalar codebook: one 4-bit index per weight, plus the
        // per-block-row codebooks and scales.
        let w = Array2::zeros((16, 16));
        let config = cfg(1, 1, 1, 16);
        let model = kmeans_init(&partition_blocks(&w, &config).unwrap(), &config).unwrap();
        let r = compression_report(&model, 16);
        assert_eq!(r.compressed_bits, 256 * 4 + 16 * (16 * 4 + 32));
    }

    #[test]
    fn bank_width_constraint() {
        let c = cfg(4, 128, 8, 16);
        assert!(c.check_bank_width(512).is_ok());
        assert!(cfg(4, 256, 8, 16).check_bank_width(512).is_err());
    }
}
