//! Interaction datasets and modality feature matrices: loading, validation,
//! splitting, synthesis, and dataset statistics.
//!
//! File formats:
//! - interactions: UTF-8 TSV with header `user_id<TAB>item_id[<TAB>split]`,
//!   split codes 0/1/2 = train/valid/test. Token-to-index maps are persisted
//!   as `<stem>.users.tsv` / `<stem>.items.tsv` sidecars next to the file.
//! - features: JSON manifest naming per-modality raw matrices stored as
//!   row-major little-endian float32.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GumeError, Result};

/// Item content modality. The pipeline is written for the visual/textual pair
/// but single-modality configurations are accepted everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Split assignment for one interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn code(&self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Split> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Valid),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// One deduplicated user-item interaction with its split assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub split: Split,
}

/// How to assign interactions to train/valid/test.
#[derive(Debug, Clone)]
pub enum SplitPolicy {
    /// Use the third TSV column.
    Column,
    /// Per-user random split; reproducible for a fixed seed.
    Random { seed: u64, ratios: (f64, f64, f64) },
}

/// A deduplicated interaction set with dense indices and a per-interaction
/// split assignment. Read-only after construction.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    n_users: usize,
    n_items: usize,
    user_tokens: Vec<String>,
    item_tokens: Vec<String>,
    interactions: Vec<Interaction>,
    item_train_degree: Vec<u32>,
    user_train_items: Vec<Vec<u32>>,
    user_valid_items: Vec<Vec<u32>>,
    user_test_items: Vec<Vec<u32>>,
}

/// Dataset-level statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_behaviors: usize,
    /// Default definition: fraction of items outside the head set.
    pub unpopularity: f64,
}

/// Candidate definitions for the "unpopularity" statistic. Published corpus
/// tables give values without a formula, so both is kept available and the
/// item-fraction form is the reporting default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnpopularityDef {
    /// Fraction of items that are not head items.
    ItemFraction,
    /// Fraction of interactions that touch non-head items.
    InteractionShare,
}

impl InteractionDataset {
    /// Build a dataset from explicit (user, item) pairs against declared
    /// index ranges. Pairs are deduplicated keeping first occurrence.
    pub fn from_pairs(
        n_users: usize,
        n_items: usize,
        pairs: &[(u32, u32)],
        policy: &SplitPolicy,
    ) -> Result<InteractionDataset> {
        let user_tokens = (0..n_users).map(|u| format!("u{u}")).collect();
        let item_tokens = (0..n_items).map(|i| format!("i{i}")).collect();
        Self::from_parts(n_users, n_items, user_tokens, item_tokens, pairs, None, policy)
    }

    /// Build a dataset from pairs with explicit split assignments.
    pub fn from_assignments(
        n_users: usize,
        n_items: usize,
        rows: &[(u32, u32, Split)],
    ) -> Result<InteractionDataset> {
        let user_tokens = (0..n_users).map(|u| format!("u{u}")).collect();
        let item_tokens = (0..n_items).map(|i| format!("i{i}")).collect();
        let pairs: Vec<(u32, u32)> = rows.iter().map(|&(u, i, _)| (u, i)).collect();
        let splits: Vec<Split> = rows.iter().map(|&(_, _, s)| s).collect();
        Self::from_parts(
            n_users,
            n_items,
            user_tokens,
            item_tokens,
            &pairs,
            Some(&splits),
            &SplitPolicy::Column,
        )
    }

    fn from_parts(
        n_users: usize,
        n_items: usize,
        user_tokens: Vec<String>,
        item_tokens: Vec<String>,
        pairs: &[(u32, u32)],
        splits: Option<&[Split]>,
        policy: &SplitPolicy,
    ) -> Result<InteractionDataset> {
        if n_users == 0 || n_items == 0 {
            return Err(GumeError::Validation(
                "dataset must have at least one user and one item".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(pairs.len());
        let mut dedup: Vec<(u32, u32, Option<Split>)> = Vec::with_capacity(pairs.len());
        for (row, &(u, i)) in pairs.iter().enumerate() {
            if u as usize >= n_users {
                return Err(GumeError::Validation(format!(
                    "user index {u} out of declared range 0..{n_users}"
                )));
            }
            if i as usize >= n_items {
                return Err(GumeError::Validation(format!(
                    "item index {i} out of declared range 0..{n_items}"
                )));
            }
            if seen.insert((u, i)) {
                dedup.push((u, i, splits.map(|s| s[row])));
            }
        }

        let mut interactions: Vec<Interaction> = match policy {
            SplitPolicy::Column => dedup
                .iter()
                .map(|&(user, item, split)| {
                    split
                        .map(|split| Interaction { user, item, split })
                        .ok_or_else(|| {
                            GumeError::Validation(
                                "split_policy=column requires a split column".into(),
                            )
                        })
                })
                .collect::<Result<_>>()?,
            SplitPolicy::Random { seed, ratios } => {
                let pairs_only: Vec<(u32, u32)> = dedup.iter().map(|&(u, i, _)| (u, i)).collect();
                assign_random_split(n_users, &pairs_only, *seed, *ratios)?
            }
        };

        // Every user keeps at least one training interaction; users whose
        // assignment leaves train empty get their first interaction moved.
        let mut has_train = vec![false; n_users];
        for it in &interactions {
            if it.split == Split::Train {
                has_train[it.user as usize] = true;
            }
        }
        for it in interactions.iter_mut() {
            let u = it.user as usize;
            if !has_train[u] {
                it.split = Split::Train;
                has_train[u] = true;
            }
        }

        let mut item_train_degree = vec![0u32; n_items];
        let mut user_train_items = vec![Vec::new(); n_users];
        let mut user_valid_items = vec![Vec::new(); n_users];
        let mut user_test_items = vec![Vec::new(); n_users];
        for it in &interactions {
            match it.split {
                Split::Train => {
                    item_train_degree[it.item as usize] += 1;
                    user_train_items[it.user as usize].push(it.item);
                }
                Split::Valid => user_valid_items[it.user as usize].push(it.item),
                Split::Test => user_test_items[it.user as usize].push(it.item),
            }
        }
        for list in user_train_items
            .iter_mut()
            .chain(user_valid_items.iter_mut())
            .chain(user_test_items.iter_mut())
        {
            list.sort_unstable();
        }

        Ok(InteractionDataset {
            n_users,
            n_items,
            user_tokens,
            item_tokens,
            interactions,
            item_train_degree,
            user_train_items,
            user_valid_items,
            user_test_items,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_behaviors(&self) -> usize {
        self.interactions.len()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn user_tokens(&self) -> &[String] {
        &self.user_tokens
    }

    pub fn item_tokens(&self) -> &[String] {
        &self.item_tokens
    }

    /// Per-item count of train interactions.
    pub fn item_train_degree(&self) -> &[u32] {
        &self.item_train_degree
    }

    pub fn user_items(&self, user: usize, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.user_train_items[user],
            Split::Valid => &self.user_valid_items[user],
            Split::Test => &self.user_test_items[user],
        }
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for it in &self.interactions {
            match it.split {
                Split::Train => counts.0 += 1,
                Split::Valid => counts.1 += 1,
                Split::Test => counts.2 += 1,
            }
        }
        counts
    }

    pub fn train_pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.interactions
            .iter()
            .filter(|it| it.split == Split::Train)
            .map(|it| (it.user, it.item))
    }

    /// Persist the dataset as `interactions.tsv` (with split column) plus the
    /// token-to-index sidecars, under `dir`. Loading the file back with
    /// `split_policy=column` reproduces identical splits and degrees.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| GumeError::io(dir, e))?;
        let path = dir.join("interactions.tsv");
        let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| GumeError::io(&path, e))?);
        writeln!(w, "user_id\titem_id\tsplit").map_err(|e| GumeError::io(&path, e))?;
        for it in &self.interactions {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.user_tokens[it.user as usize],
                self.item_tokens[it.item as usize],
                it.split.code()
            )
            .map_err(|e| GumeError::io(&path, e))?;
        }
        w.flush().map_err(|e| GumeError::io(&path, e))?;
        write_token_sidecars(&path, &self.user_tokens, &self.item_tokens)?;
        Ok(path)
    }
}

fn assign_random_split(
    n_users: usize,
    pairs: &[(u32, u32)],
    seed: u64,
    ratios: (f64, f64, f64),
) -> Result<Vec<Interaction>> {
    let (r_train, r_valid, r_test) = ratios;
    if r_train < 0.0 || r_valid < 0.0 || r_test < 0.0 || (r_train + r_valid + r_test - 1.0).abs() > 1e-9
    {
        return Err(GumeError::Config(format!(
            "split ratios must be nonnegative and sum to 1, got ({r_train}, {r_valid}, {r_test})"
        )));
    }
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); n_users];
    for (row, &(u, _)) in pairs.iter().enumerate() {
        per_user[u as usize].push(row);
    }
    let mut splits = vec![Split::Train; pairs.len()];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for rows in per_user.iter_mut() {
        let n = rows.len();
        // 8:1:1 is undefined per user below 3 interactions: keep all in train.
        if n < 3 {
            continue;
        }
        let mut n_valid = (n as f64 * r_valid).round() as usize;
        let mut n_test = (n as f64 * r_test).round() as usize;
        while n_valid + n_test >= n {
            if n_test >= n_valid && n_test > 0 {
                n_test -= 1;
            } else if n_valid > 0 {
                n_valid -= 1;
            } else {
                break;
            }
        }
        rows.shuffle(&mut rng);
        for (pos, &row) in rows.iter().enumerate() {
            splits[row] = if pos < n - n_valid - n_test {
                Split::Train
            } else if pos < n - n_test {
                Split::Valid
            } else {
                Split::Test
            };
        }
    }
    Ok(pairs
        .iter()
        .zip(splits)
        .map(|(&(user, item), split)| Interaction { user, item, split })
        .collect())
}

fn write_token_sidecars(path: &Path, users: &[String], items: &[String]) -> Result<()> {
    for (suffix, tokens) in [("users", users), ("items", items)] {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("interactions");
        let side = path.with_file_name(format!("{stem}.{suffix}.tsv"));
        let mut w =
            BufWriter::new(fs::File::create(&side).map_err(|e| GumeError::io(&side, e))?);
        writeln!(w, "token\tindex").map_err(|e| GumeError::io(&side, e))?;
        for (idx, tok) in tokens.iter().enumerate() {
            writeln!(w, "{tok}\t{idx}").map_err(|e| GumeError::io(&side, e))?;
        }
        w.flush().map_err(|e| GumeError::io(&side, e))?;
    }
    Ok(())
}

/// Load an interaction TSV, assign dense indices by first appearance, and
/// persist the token maps as sidecar files next to the input.
pub fn load_interactions(path: &Path, policy: &SplitPolicy) -> Result<InteractionDataset> {
    let file = fs::File::open(path).map_err(|e| GumeError::io(path, e))?;
    let reader = BufReader::new(file);

    let mut user_index: HashMap<String, u32> = HashMap::new();
    let mut item_index: HashMap<String, u32> = HashMap::new();
    let mut user_tokens: Vec<String> = Vec::new();
    let mut item_tokens: Vec<String> = Vec::new();
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    let mut splits: Vec<Split> = Vec::new();
    let mut saw_split_column = false;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GumeError::io(path, e))?;
        if lineno == 0 {
            let mut cols = line.split('\t');
            let (a, b) = (cols.next().unwrap_or(""), cols.next().unwrap_or(""));
            if a != "user_id" || b != "item_id" {
                return Err(GumeError::Parse {
                    path: path.into(),
                    line: 1,
                    message: format!("expected header `user_id\\titem_id[\\tsplit]`, got `{line}`"),
                });
            }
            saw_split_column = cols.next() == Some("split");
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| GumeError::Parse {
            path: path.into(),
            line: lineno + 1,
            message,
        };
        if fields.len() < 2 || fields.len() > 3 {
            return Err(parse_err(format!("expected 2 or 3 fields, got {}", fields.len())));
        }
        let u = *user_index.entry(fields[0].to_string()).or_insert_with(|| {
            user_tokens.push(fields[0].to_string());
            (user_tokens.len() - 1) as u32
        });
        let i = *item_index.entry(fields[1].to_string()).or_insert_with(|| {
            item_tokens.push(fields[1].to_string());
            (item_tokens.len() - 1) as u32
        });
        pairs.push((u, i));
        if matches!(policy, SplitPolicy::Column) {
            if fields.len() < 3 {
                return Err(parse_err("split_policy=column requires a split column".into()));
            }
            let code: u8 = fields[2]
                .parse()
                .map_err(|_| parse_err(format!("invalid split code `{}`", fields[2])))?;
            let split = Split::from_code(code)
                .ok_or_else(|| parse_err(format!("split code {code} not in {{0,1,2}}")))?;
            splits.push(split);
        } else if fields.len() == 3 && !saw_split_column {
            return Err(parse_err("3 fields present but header does not declare `split`".into()));
        }
    }

    if pairs.is_empty() {
        return Err(GumeError::Validation(format!(
            "no interactions in {}",
            path.display()
        )));
    }

    let n_users = user_tokens.len();
    let n_items = item_tokens.len();
    let split_ref = if matches!(policy, SplitPolicy::Column) {
        Some(splits.as_slice())
    } else {
        None
    };
    let dataset = InteractionDataset::from_parts(
        n_users,
        n_items,
        user_tokens,
        item_tokens,
        &pairs,
        split_ref,
        policy,
    )?;
    write_token_sidecars(path, &dataset.user_tokens, &dataset.item_tokens)?;
    Ok(dataset)
}

/// One modality's raw item feature matrix, |I| x d_m.
#[derive(Debug, Clone)]
pub struct ModalityFeatureSet {
    pub modality: Modality,
    pub matrix: Array2<f64>,
}

impl ModalityFeatureSet {
    pub fn new(modality: Modality, matrix: Array2<f64>) -> Result<ModalityFeatureSet> {
        if matrix.ncols() == 0 {
            return Err(GumeError::Shape(format!("{modality} features have zero columns")));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GumeError::Validation(format!(
                "{modality} features contain NaN or Inf"
            )));
        }
        Ok(ModalityFeatureSet { modality, matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFileSpec {
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
}

/// JSON manifest declaring per-modality raw feature matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub visual: Option<FeatureFileSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub textual: Option<FeatureFileSpec>,
}

/// Load every modality declared in the manifest, validating shapes against
/// the dataset.
pub fn load_features(
    manifest_path: &Path,
    dataset: &InteractionDataset,
) -> Result<Vec<ModalityFeatureSet>> {
    let raw = fs::read_to_string(manifest_path).map_err(|e| GumeError::io(manifest_path, e))?;
    let manifest: FeatureManifest = serde_json::from_str(&raw)
        .map_err(|e| GumeError::Config(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut out = Vec::new();
    for (modality, spec) in [
        (Modality::Visual, &manifest.visual),
        (Modality::Textual, &manifest.textual),
    ] {
        let Some(spec) = spec else { continue };
        if spec.dtype != "float32-le" {
            return Err(GumeError::Config(format!(
                "{modality}: unsupported dtype `{}` (only float32-le)",
                spec.dtype
            )));
        }
        if spec.rows != dataset.n_items() {
            return Err(GumeError::Shape(format!(
                "{modality}: manifest declares {} rows but dataset has {} items",
                spec.rows,
                dataset.n_items()
            )));
        }
        let path = base.join(&spec.path);
        let matrix = read_f32_matrix(&path, spec.rows, spec.cols)?;
        out.push(ModalityFeatureSet::new(modality, matrix)?);
    }
    if out.is_empty() {
        return Err(GumeError::Config(format!(
            "{}: manifest declares no modalities",
            manifest_path.display()
        )));
    }
    Ok(out)
}

/// Write feature sets as raw float32-le matrices plus `manifest.json`.
pub fn save_features(dir: &Path, sets: &[ModalityFeatureSet]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| GumeError::io(dir, e))?;
    let mut manifest = FeatureManifest {
        visual: None,
        textual: None,
    };
    for set in sets {
        let name = format!("{}.bin", set.modality);
        write_f32_matrix(&dir.join(&name), &set.matrix)?;
        let spec = FeatureFileSpec {
            path: name,
            rows: set.matrix.nrows(),
            cols: set.matrix.ncols(),
            dtype: "float32-le".into(),
        };
        match set.modality {
            Modality::Visual => manifest.visual = Some(spec),
            Modality::Textual => manifest.textual = Some(spec),
        }
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| GumeError::Internal(e.to_string()))?;
    fs::write(&path, json).map_err(|e| GumeError::io(&path, e))?;
    Ok(path)
}

pub(crate) fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut file = fs::File::open(path).map_err(|e| GumeError::io(path, e))?;
    let expected = rows * cols * 4;
    let mut bytes = Vec::with_capacity(expected);
    file.read_to_end(&mut bytes).map_err(|e| GumeError::io(path, e))?;
    if bytes.len() != expected {
        return Err(GumeError::Shape(format!(
            "{}: expected {rows}x{cols} float32 ({expected} bytes), file has {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| GumeError::Shape(e.to_string()))
}

pub(crate) fn write_f32_matrix(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| GumeError::io(path, e))?);
    for &v in matrix.iter() {
        w.write_all(&(v as f32).to_le_bytes())
            .map_err(|e| GumeError::io(path, e))?;
    }
    w.flush().map_err(|e| GumeError::io(path, e))
}

/// Configuration for the synthetic long-tail generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_factors: usize,
    pub d_visual: usize,
    pub d_textual: usize,
    pub popularity_exponent: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_items: 100,
            n_factors: 8,
            d_visual: 32,
            d_textual: 16,
            popularity_exponent: 1.2,
            noise_scale: 0.1,
            seed: 1,
        }
    }
}

/// Synthesizer output. `item_factor_norms` exposes the latent magnitudes so
/// tests can check that popularity tracks the latent factors.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: InteractionDataset,
    pub features: Vec<ModalityFeatureSet>,
    pub item_factor_norms: Vec<f64>,
}

/// Generate a long-tail interaction dataset together with visual/textual
/// feature matrices that are noisy linear images of the shared item factors.
///
/// The population mixes two behavior modes found in review corpora: a large
/// casual segment (a handful of interactions each, drawn towards the popular
/// head, and too few interactions to reach the holdout splits) and a smaller
/// engaged segment whose picks follow their latent factor direction into the
/// tail. The head therefore concentrates the interaction mass while the
/// evaluated users' preferences stay taste-driven.
pub fn synthesize(config: &SynthConfig) -> Result<SynthOutput> {
    if config.n_users < 2
        || config.n_items < 2
        || config.n_factors < 2
        || config.d_visual < 2
        || config.d_textual < 2
    {
        return Err(GumeError::Config(
            "synthesize requires all counts >= 2".into(),
        ));
    }
    if config.popularity_exponent <= 0.0 {
        return Err(GumeError::Config("popularity_exponent must be > 0".into()));
    }

    let n_items = config.n_items;
    let n_users = config.n_users;
    let k = config.n_factors;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    // Power-law base popularity; item 0 is the most popular.
    let weights: Vec<f64> = (0..n_items)
        .map(|i| ((i + 1) as f64).powf(-config.popularity_exponent))
        .collect();
    let log_weights: Vec<f64> = weights.iter().map(|w| w.ln()).collect();

    // Item factors: random direction, magnitude increasing with popularity.
    let mut factors = Array2::<f64>::zeros((n_items, k));
    let mut item_factor_norms = vec![0.0; n_items];
    for i in 0..n_items {
        let mut row: Vec<f64> = (0..k).map(|_| standard_normal(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let scale = 0.5 + 1.5 * (weights[i] / weights[0]).powf(0.25);
        for v in row.iter_mut() {
            *v *= scale / norm;
        }
        item_factor_norms[i] = scale;
        for (j, v) in row.iter().enumerate() {
            factors[[i, j]] = *v;
        }
    }

    let user_factors: Vec<Vec<f64>> = (0..n_users)
        .map(|_| {
            let mut row: Vec<f64> = (0..k).map(|_| standard_normal(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            row
        })
        .collect();

    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for u in 0..n_users {
        // Every fifth user is engaged; the rest are casual. Engaged activity
        // cycles over a small range so holdout sizes vary.
        let engaged = u % 5 == 0;
        let (n_u, pop_strength, affinity_strength) = if engaged {
            let n_u = [7, 9, 11, 13][(u / 5) % 4].min(n_items.saturating_sub(1).max(2));
            (n_u, -0.25 * config.popularity_exponent, 7.5)
        } else {
            // The sharpening factor keeps the realized head concentration in
            // line with the configured exponent after Gumbel smoothing and
            // without-replacement flattening.
            (4.min(n_items), 1.9 * config.popularity_exponent, 1.2)
        };
        // Gumbel top-n sampling without replacement from the softmax of the
        // per-item logits.
        let mut keyed: Vec<(f64, u32)> = (0..n_items)
            .map(|i| {
                let affinity: f64 = (0..k).map(|j| user_factors[u][j] * factors[[i, j]]).sum();
                let logit = pop_strength * log_weights[i] + affinity_strength * affinity;
                let gumbel = -(-(rng.gen::<f64>().max(1e-300)).ln()).ln();
                (logit + gumbel, i as u32)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, item) in keyed.iter().take(n_u) {
            pairs.push((u as u32, item));
        }
    }

    // Feature matrices: shared latent factors through independent random
    // projections, plus Gaussian noise.
    let mut features = Vec::new();
    for (modality, d_m) in [
        (Modality::Visual, config.d_visual),
        (Modality::Textual, config.d_textual),
    ] {
        let proj: Array2<f64> = {
            let mut p = Array2::zeros((k, d_m));
            let scale = 1.0 / (k as f64).sqrt();
            for v in p.iter_mut() {
                *v = standard_normal(&mut rng) * scale;
            }
            p
        };
        let mut matrix = factors.dot(&proj);
        if config.noise_scale > 0.0 {
            for v in matrix.iter_mut() {
                *v += config.noise_scale * standard_normal(&mut rng);
            }
        }
        features.push(ModalityFeatureSet::new(modality, matrix)?);
    }

    let dataset = InteractionDataset::from_pairs(
        n_users,
        n_items,
        &pairs,
        &SplitPolicy::Random {
            seed: config.seed,
            ratios: (0.8, 0.1, 0.1),
        },
    )?;

    Ok(SynthOutput {
        dataset,
        features,
        item_factor_norms,
    })
}

fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and portable.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Dataset statistics under the default (item fraction) unpopularity
/// definition.
pub fn compute_stats(dataset: &InteractionDataset, head_fraction: f64) -> DatasetStats {
    DatasetStats {
        n_users: dataset.n_users(),
        n_items: dataset.n_items(),
        n_behaviors: dataset.n_behaviors(),
        unpopularity: unpopularity(dataset, head_fraction, UnpopularityDef::ItemFraction),
    }
}

/// Unpopularity under either candidate definition. Head items are the top
/// `head_fraction` of items by total interaction count (at least one item).
pub fn unpopularity(
    dataset: &InteractionDataset,
    head_fraction: f64,
    def: UnpopularityDef,
) -> f64 {
    let n_items = dataset.n_items();
    let head_count = (((n_items as f64) * head_fraction).floor() as usize).clamp(1, n_items);
    let mut degree = vec![0usize; n_items];
    for it in dataset.interactions() {
        degree[it.item as usize] += 1;
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.sort_by(|&a, &b| degree[b].cmp(&degree[a]).then(a.cmp(&b)));
    match def {
        UnpopularityDef::ItemFraction => 1.0 - head_count as f64 / n_items as f64,
        UnpopularityDef::InteractionShare => {
            let head_mass: usize = order[..head_count].iter().map(|&i| degree[i]).sum();
            if dataset.n_behaviors() == 0 {
                0.0
            } else {
                1.0 - head_mass as f64 / dataset.n_behaviors() as f64
            }
        }
    }
}
