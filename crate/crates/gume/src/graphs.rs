//! Frozen similarity graphs: per-modality item kNN graphs, semantic
//! neighbors shared across modalities, and the enhanced user-item adjacency.
//!
//! All graphs here are built once from raw features and train interactions
//! and never depend on trainable parameters.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;

use crate::dataio::{InteractionDataset, ModalityFeatureSet};
use crate::error::{GumeError, Result};

/// Weighted sparse adjacency in CSR form. Entries are unique per (row, col)
/// and kept sorted by (row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseGraph {
    pub fn from_entries(
        n_rows: usize,
        n_cols: usize,
        mut entries: Vec<(u32, u32, f64)>,
    ) -> Result<SparseGraph> {
        entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut prev: Option<(u32, u32)> = None;
        for (r, c, w) in entries {
            if r as usize >= n_rows || c as usize >= n_cols {
                return Err(GumeError::Internal(format!(
                    "graph entry ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
            if !w.is_finite() {
                return Err(GumeError::Validation(format!(
                    "non-finite weight at ({r}, {c})"
                )));
            }
            if prev == Some((r, c)) {
                return Err(GumeError::Validation(format!(
                    "duplicate graph entry ({r}, {c})"
                )));
            }
            prev = Some((r, c));
            row_ptr[r as usize + 1] += 1;
            col_idx.push(c);
            values.push(w);
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseGraph {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// (col, weight) pairs of one row, sorted by column.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| self.row(r).map(move |(c, w)| (r as u32, c, w)))
    }

    /// Dense product `self . x`.
    pub fn matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.n_cols, x.nrows(), "spmm shape mismatch");
        let d = x.ncols();
        let mut out = Array2::<f64>::zeros((self.n_rows, d));
        let x_slice = x.as_slice().expect("contiguous rhs");
        out.as_slice_mut()
            .expect("contiguous output")
            .par_chunks_mut(d.max(1))
            .enumerate()
            .for_each(|(r, out_row)| {
                for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                    let c = self.col_idx[idx] as usize;
                    let w = self.values[idx];
                    let src = &x_slice[c * d..(c + 1) * d];
                    for j in 0..d {
                        out_row[j] += w * src[j];
                    }
                }
            });
        out
    }

    /// Dense product `self^T . x` (used by reverse-mode propagation).
    pub fn matmul_transpose(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.n_rows, x.nrows(), "spmm_t shape mismatch");
        let d = x.ncols();
        let mut out = Array2::<f64>::zeros((self.n_cols, d));
        for r in 0..self.n_rows {
            let xr = x.row(r);
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[idx] as usize;
                let w = self.values[idx];
                for j in 0..d {
                    out[[c, j]] += w * xr[j];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.n_rows, self.n_cols));
        for (r, c, w) in self.entries() {
            dense[[r as usize, c as usize]] = w;
        }
        dense
    }

    /// Binary format: three little-endian u64 (n_rows, n_cols, nnz), then
    /// parallel arrays of u32 row indices, u32 col indices, f32 weights.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w =
            BufWriter::new(fs::File::create(path).map_err(|e| GumeError::io(path, e))?);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| GumeError::io(path, e));
        write(&(self.n_rows as u64).to_le_bytes())?;
        write(&(self.n_cols as u64).to_le_bytes())?;
        write(&(self.nnz() as u64).to_le_bytes())?;
        for r in 0..self.n_rows {
            for _ in self.row_ptr[r]..self.row_ptr[r + 1] {
                write(&(r as u32).to_le_bytes())?;
            }
        }
        for c in &self.col_idx {
            write(&c.to_le_bytes())?;
        }
        for v in &self.values {
            write(&(*v as f32).to_le_bytes())?;
        }
        w.flush().map_err(|e| GumeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SparseGraph> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| GumeError::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| GumeError::io(path, e))?;
        let fail = |msg: &str| GumeError::Parse {
            path: path.into(),
            line: 0,
            message: msg.into(),
        };
        if bytes.len() < 24 {
            return Err(fail("truncated header"));
        }
        let read_u64 = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let (n_rows, n_cols, nnz) = (
            read_u64(0) as usize,
            read_u64(8) as usize,
            read_u64(16) as usize,
        );
        let expected = 24 + nnz * (4 + 4 + 4);
        if bytes.len() != expected {
            return Err(fail(&format!(
                "expected {expected} bytes for nnz={nnz}, got {}",
                bytes.len()
            )));
        }
        let mut entries = Vec::with_capacity(nnz);
        for e in 0..nnz {
            let r = u32::from_le_bytes(bytes[24 + e * 4..28 + e * 4].try_into().unwrap());
            let c_off = 24 + nnz * 4 + e * 4;
            let c = u32::from_le_bytes(bytes[c_off..c_off + 4].try_into().unwrap());
            let v_off = 24 + nnz * 8 + e * 4;
            let v = f32::from_le_bytes(bytes[v_off..v_off + 4].try_into().unwrap());
            entries.push((r, c, v as f64));
        }
        SparseGraph::from_entries(n_rows, n_cols, entries)
    }
}

/// Per-item semantic neighbor lists (intersection of every modality's top-k
/// neighbor set) and the induced symmetric edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticNeighborSet {
    neighbors: Vec<Vec<u32>>,
    edges: Vec<(u32, u32)>,
}

impl SemanticNeighborSet {
    pub fn empty(n_items: usize) -> SemanticNeighborSet {
        SemanticNeighborSet {
            neighbors: vec![Vec::new(); n_items],
            edges: Vec::new(),
        }
    }

    pub fn n_items(&self) -> usize {
        self.neighbors.len()
    }

    /// N_i before symmetrization, sorted ascending.
    pub fn neighbors_of(&self, item: usize) -> &[u32] {
        &self.neighbors[item]
    }

    /// Symmetrized directed edge set C, sorted and deduplicated.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    /// Number of semantic edges incident to `item` in C.
    pub fn degree_gain(&self, item: usize) -> usize {
        let item = item as u32;
        self.edges.partition_point(|&(i, _)| i <= item)
            - self.edges.partition_point(|&(i, _)| i < item)
    }
}

/// Cosine top-k neighbor graph of the item feature matrix. The diagonal is
/// excluded, ties break toward the lower item index, and zero-norm rows get
/// empty neighbor lists (their similarity to anything is taken as 0).
pub fn cosine_topk(features: &ModalityFeatureSet, k: usize) -> Result<SparseGraph> {
    if k == 0 {
        return Err(GumeError::Config("top-k requires k >= 1".into()));
    }
    let m = &features.matrix;
    let n = m.nrows();
    let d = m.ncols();
    let data = m.as_slice().expect("contiguous features");

    let mut normalized = vec![0.0f64; n * d];
    let mut nonzero = vec![false; n];
    for i in 0..n {
        let row = &data[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            nonzero[i] = true;
            for j in 0..d {
                normalized[i * d + j] = row[j] / norm;
            }
        }
    }

    let rows: Vec<Vec<(u32, u32, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !nonzero[i] {
                return Vec::new();
            }
            let ri = &normalized[i * d..(i + 1) * d];
            // (similarity desc, index asc) top-k over j != i.
            let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let rj = &normalized[j * d..(j + 1) * d];
                let sim: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                let cand = (sim, j as u32);
                let pos = best.partition_point(|&(s, idx)| {
                    s > cand.0 || (s == cand.0 && idx < cand.1)
                });
                if pos < k {
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            best.iter()
                .map(|&(sim, j)| (i as u32, j, sim))
                .collect()
        })
        .collect();

    SparseGraph::from_entries(n, n, rows.into_iter().flatten().collect())
}

/// Symmetric degree normalization: entry (i, j) becomes
/// `w_ij / sqrt(deg_i * deg_j)` with degrees taken as row sums of absolute
/// weights. Zero-degree rows or columns map to 0.
pub fn normalize_sym(graph: &SparseGraph) -> Result<SparseGraph> {
    if graph.n_rows != graph.n_cols {
        return Err(GumeError::Shape(format!(
            "normalize_sym requires a square graph, got {}x{}",
            graph.n_rows, graph.n_cols
        )));
    }
    let mut degree = vec![0.0f64; graph.n_rows];
    for (r, _, w) in graph.entries() {
        degree[r as usize] += w.abs();
    }
    let entries = graph
        .entries()
        .map(|(r, c, w)| {
            let (dr, dc) = (degree[r as usize], degree[c as usize]);
            let v = if dr > 0.0 && dc > 0.0 {
                w / (dr * dc).sqrt()
            } else {
                0.0
            };
            (r, c, v)
        })
        .collect();
    SparseGraph::from_entries(graph.n_rows, graph.n_cols, entries)
}

/// Intersect the top-k neighbor sets across modalities and symmetrize the
/// resulting edge set.
pub fn semantic_neighbors(topk_graphs: &[SparseGraph]) -> Result<SemanticNeighborSet> {
    let Some(first) = topk_graphs.first() else {
        return Err(GumeError::Config("no modality graphs given".into()));
    };
    let n = first.n_rows();
    for g in topk_graphs {
        if g.n_rows() != n || g.n_cols() != n {
            return Err(GumeError::Shape(
                "modality graphs must share the item count".into(),
            ));
        }
    }
    let mut neighbors: Vec<Vec<u32>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut common: Vec<u32> = first.row(i).map(|(c, _)| c).collect();
        for g in &topk_graphs[1..] {
            let set: Vec<u32> = g.row(i).map(|(c, _)| c).collect();
            common.retain(|c| set.binary_search(c).is_ok());
        }
        common.retain(|&c| c != i as u32);
        neighbors.push(common);
    }
    let mut edges: Vec<(u32, u32)> = Vec::new();
    for (i, list) in neighbors.iter().enumerate() {
        for &j in list {
            edges.push((i as u32, j));
            edges.push((j, i as u32));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(SemanticNeighborSet { neighbors, edges })
}

/// Assemble the (n_users + n_items) block adjacency from train interactions
/// and semantic-neighbor edges, then normalize it symmetrically. The
/// user-user block is zero, user-item blocks carry the binary train matrix,
/// and the item-item block is the binary symmetric C.
pub fn build_enhanced_adjacency(
    dataset: &InteractionDataset,
    neighbors: &SemanticNeighborSet,
) -> Result<SparseGraph> {
    if neighbors.n_items() != dataset.n_items() {
        return Err(GumeError::Shape(format!(
            "neighbor set covers {} items, dataset has {}",
            neighbors.n_items(),
            dataset.n_items()
        )));
    }
    let n_users = dataset.n_users();
    let n = n_users + dataset.n_items();
    let mut entries = Vec::new();
    for (u, i) in dataset.train_pairs() {
        let (u, i) = (u as usize, n_users + i as usize);
        if u >= n_users || i < n_users {
            return Err(GumeError::Internal(format!(
                "user/item index collision: ({u}, {i}) with {n_users} users"
            )));
        }
        entries.push((u as u32, i as u32, 1.0));
        entries.push((i as u32, u as u32, 1.0));
    }
    for &(i, j) in neighbors.edges() {
        entries.push(((n_users + i as usize) as u32, (n_users + j as usize) as u32, 1.0));
    }
    let raw = SparseGraph::from_entries(n, n, entries)?;
    normalize_sym(&raw)
}

/// Per-item (train degree, train degree + semantic-neighbor count).
pub fn tail_degree_report(
    dataset: &InteractionDataset,
    neighbors: &SemanticNeighborSet,
) -> Vec<(u32, u32)> {
    (0..dataset.n_items())
        .map(|i| {
            let before = dataset.item_train_degree()[i];
            (before, before + neighbors.degree_gain(i) as u32)
        })
        .collect()
}

/// Binary user-item train matrix R (n_users x n_items), optionally
/// row-normalized for mean aggregation.
pub fn train_interaction_matrix(dataset: &InteractionDataset, mean: bool) -> SparseGraph {
    let entries = dataset
        .train_pairs()
        .map(|(u, i)| {
            let w = if mean {
                1.0 / dataset.user_items(u as usize, crate::dataio::Split::Train).len() as f64
            } else {
                1.0
            };
            (u, i, w)
        })
        .collect();
    SparseGraph::from_entries(dataset.n_users(), dataset.n_items(), entries)
        .expect("train pairs are deduplicated and in range")
}

/// Everything the forward pass needs that is frozen before training.
#[derive(Debug, Clone)]
pub struct PreparedGraphs {
    /// Normalized per-modality item graphs, in feature-set order.
    pub item_graphs: Vec<Arc<SparseGraph>>,
    /// Unnormalized top-k graphs (kept for reporting and neighbor audits).
    pub topk_graphs: Vec<Arc<SparseGraph>>,
    pub neighbors: SemanticNeighborSet,
    /// Normalized enhanced adjacency over users + items.
    pub adjacency: Arc<SparseGraph>,
    /// Binary train matrix and its row-normalized variant.
    pub r_sum: Arc<SparseGraph>,
    pub r_mean: Arc<SparseGraph>,
}

/// Build all frozen graphs. `graph_enhancement = false` drops the semantic
/// edge set, leaving the plain normalized bipartite graph.
pub fn prepare_graphs(
    dataset: &InteractionDataset,
    features: &[ModalityFeatureSet],
    k: usize,
    graph_enhancement: bool,
) -> Result<PreparedGraphs> {
    let mut topk = Vec::new();
    let mut item_graphs = Vec::new();
    for set in features {
        let bar = cosine_topk(set, k)?;
        item_graphs.push(Arc::new(normalize_sym(&bar)?));
        topk.push(bar);
    }
    let neighbors = if graph_enhancement {
        semantic_neighbors(&topk)?
    } else {
        SemanticNeighborSet::empty(dataset.n_items())
    };
    let adjacency = Arc::new(build_enhanced_adjacency(dataset, &neighbors)?);
    Ok(PreparedGraphs {
        item_graphs,
        topk_graphs: topk.into_iter().map(Arc::new).collect(),
        neighbors,
        adjacency,
        r_sum: Arc::new(train_interaction_matrix(dataset, false)),
        r_mean: Arc::new(train_interaction_matrix(dataset, true)),
    })
}
