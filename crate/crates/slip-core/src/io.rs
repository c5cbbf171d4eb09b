//! File formats: purchase logs, edge lists, feature tables, labels, binary
//! tensors, model checkpoints, whole-dataset directories, and the stats
//! table.
//!
//! All text formats are UTF-8 and tab-separated, with `#` comment lines and
//! blank lines ignored on read. Parse errors carry the path and the 1-based
//! line number. Every file this module writes, it reads back identically.

use crate::encoders::{FeatureStore, Modality};
use crate::error::{Result, SlipError};
use crate::eval::HopSimilarityTable;
use crate::graph::{graph_stats, BipartiteLog, GraphStats, InstanceGraph, PairScorer};
use crate::model::{ModelConfig, ModelParams};
use crate::synth::{LabeledDataset, SplitSpec};
use crate::tensor::Tensor;
use crate::trainer::{CheckpointMeta, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Standard file names inside a dataset directory.
pub const DATASET_EDGES: &str = "edges.tsv";
pub const DATASET_IMAGE_FEATURES: &str = "features_image.tsv";
pub const DATASET_TEXT_FEATURES: &str = "features_text.tsv";
pub const DATASET_LABELS: &str = "labels.tsv";

/// Magic bytes opening every binary tensor file.
pub const TENSOR_MAGIC: &[u8; 6] = b"SLIPT1";

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Read a whole text file as lines.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| SlipError::io(path_str(path), e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line.map_err(|e| SlipError::io(path_str(path), e))?);
    }
    Ok(lines)
}

/// Write lines with a trailing newline.
pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let file = File::create(path).map_err(|e| SlipError::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{}", line.as_ref()).map_err(|e| SlipError::io(path_str(path), e))?;
    }
    w.flush().map_err(|e| SlipError::io(path_str(path), e))
}

/// Lines that carry data: skips blanks and `#` comments, keeps 1-based
/// numbering of the original file.
fn data_lines(lines: &[String]) -> impl Iterator<Item = (usize, &str)> {
    lines.iter().enumerate().filter_map(|(i, l)| {
        let t = l.trim();
        if t.is_empty() || t.starts_with('#') {
            None
        } else {
            Some((i + 1, t))
        }
    })
}

fn check_id(path: &Path, line: usize, id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(SlipError::parse(path_str(path), line, "empty identifier"));
    }
    Ok(())
}

/// Identifiers are written into tab-separated text, so they must not contain
/// the separators themselves.
fn check_writable_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains('\t') || id.contains('\n') || id.contains('\r') {
        return Err(SlipError::InvalidInput(format!(
            "identifier {:?} cannot be written to a tab-separated file",
            id
        )));
    }
    Ok(())
}

/// Read a purchase log: `user_id<TAB>item_id[<TAB>timestamp]` per line.
pub fn read_purchase_log(path: &Path) -> Result<BipartiteLog> {
    let lines = read_lines(path)?;
    let mut log = BipartiteLog::new();
    for (no, line) in data_lines(&lines) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(SlipError::parse(
                path_str(path),
                no,
                format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        check_id(path, no, fields[0])?;
        check_id(path, no, fields[1])?;
        let timestamp = match fields.get(2) {
            Some(t) => Some(t.parse::<u64>().map_err(|_| {
                SlipError::parse(path_str(path), no, format!("bad timestamp '{}'", t))
            })?),
            None => None,
        };
        log.push(fields[0], fields[1], timestamp)
            .map_err(|e| SlipError::parse(path_str(path), no, e.to_string()))?;
    }
    Ok(log)
}

/// One undirected weighted edge per line: `item_i<TAB>item_j<TAB>weight`.
fn read_edge_records(path: &Path) -> Result<Vec<(String, String, u32)>> {
    let lines = read_lines(path)?;
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut records = Vec::new();
    for (no, line) in data_lines(&lines) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(SlipError::parse(
                path_str(path),
                no,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        check_id(path, no, fields[0])?;
        check_id(path, no, fields[1])?;
        if fields[0] == fields[1] {
            return Err(SlipError::parse(
                path_str(path),
                no,
                format!("self-loop on '{}'", fields[0]),
            ));
        }
        let weight: u32 = fields[2].parse().map_err(|_| {
            SlipError::parse(path_str(path), no, format!("bad weight '{}'", fields[2]))
        })?;
        if weight == 0 {
            return Err(SlipError::parse(path_str(path), no, "zero edge weight"));
        }
        let key = if fields[0] < fields[1] {
            (fields[0].to_string(), fields[1].to_string())
        } else {
            (fields[1].to_string(), fields[0].to_string())
        };
        if !seen.insert(key) {
            return Err(SlipError::parse(
                path_str(path),
                no,
                format!("duplicate edge between '{}' and '{}'", fields[0], fields[1]),
            ));
        }
        records.push((fields[0].to_string(), fields[1].to_string(), weight));
    }
    Ok(records)
}

/// Read an edge list into a graph whose nodes are the sorted distinct
/// endpoint ids.
pub fn read_edge_list(path: &Path) -> Result<InstanceGraph> {
    let records = read_edge_records(path)?;
    let ids: BTreeSet<&str> = records
        .iter()
        .flat_map(|(a, b, _)| [a.as_str(), b.as_str()])
        .collect();
    let node_ids: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
    let index: BTreeMap<&str, u32> = node_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32))
        .collect();
    let edges: Vec<(u32, u32, u32)> = records
        .iter()
        .map(|(a, b, w)| (index[a.as_str()], index[b.as_str()], *w))
        .collect();
    InstanceGraph::from_edges(node_ids, &edges)
}

/// Write each edge once as `item_i<TAB>item_j<TAB>weight`.
pub fn write_edge_list(path: &Path, g: &InstanceGraph) -> Result<()> {
    for id in g.node_ids() {
        check_writable_id(id)?;
    }
    let lines: Vec<String> = g
        .edges()
        .into_iter()
        .map(|(i, j, w)| format!("{}\t{}\t{}", g.node_id(i as usize), g.node_id(j as usize), w))
        .collect();
    write_lines(path, &lines)
}

/// Raw rows of a feature file, keyed by item id, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub modality: Modality,
    pub dim: usize,
    pub rows: Vec<(String, Vec<f64>)>,
}

/// Read a feature table: header `dim=<d> modality=<image|text>`, then
/// `item_id<TAB>f1,f2,...,fd` per line.
pub fn read_features(path: &Path) -> Result<FeatureFile> {
    let lines = read_lines(path)?;
    let mut iter = data_lines(&lines);
    let (header_no, header) = iter
        .next()
        .ok_or_else(|| SlipError::parse(path_str(path), 0, "missing header line"))?;
    let mut dim: Option<usize> = None;
    let mut modality: Option<Modality> = None;
    for token in header.split_whitespace() {
        match token.split_once('=') {
            Some(("dim", v)) => {
                dim = Some(v.parse().map_err(|_| {
                    SlipError::parse(path_str(path), header_no, format!("bad dim '{}'", v))
                })?)
            }
            Some(("modality", v)) => {
                modality = Some(v.parse().map_err(|_| {
                    SlipError::parse(path_str(path), header_no, format!("bad modality '{}'", v))
                })?)
            }
            _ => {
                return Err(SlipError::parse(
                    path_str(path),
                    header_no,
                    format!("unexpected header token '{}'", token),
                ))
            }
        }
    }
    let dim = dim
        .ok_or_else(|| SlipError::parse(path_str(path), header_no, "header is missing dim="))?;
    let modality = modality.ok_or_else(|| {
        SlipError::parse(path_str(path), header_no, "header is missing modality=")
    })?;
    if dim == 0 {
        return Err(SlipError::parse(path_str(path), header_no, "dim must be positive"));
    }

    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut rows = Vec::new();
    for (no, line) in iter {
        let (id, values) = line.split_once('\t').ok_or_else(|| {
            SlipError::parse(path_str(path), no, "expected 'item_id<TAB>f1,f2,...'")
        })?;
        check_id(path, no, id)?;
        if !seen.insert(id.to_string()) {
            return Err(SlipError::parse(
                path_str(path),
                no,
                format!("duplicate item '{}'", id),
            ));
        }
        let mut feats = Vec::with_capacity(dim);
        for v in values.split(',') {
            let x: f64 = v.trim().parse().map_err(|_| {
                SlipError::parse(path_str(path), no, format!("bad number '{}'", v))
            })?;
            if !x.is_finite() {
                return Err(SlipError::parse(
                    path_str(path),
                    no,
                    format!("non-finite feature value '{}'", v),
                ));
            }
            feats.push(x);
        }
        if feats.len() != dim {
            return Err(SlipError::parse(
                path_str(path),
                no,
                format!("expected {} values, got {}", dim, feats.len()),
            ));
        }
        rows.push((id.to_string(), feats));
    }
    Ok(FeatureFile { modality, dim, rows })
}

/// Write a feature store with its node ids. Nodes without a stored vector
/// are skipped.
pub fn write_features(path: &Path, store: &FeatureStore, ids: &[String]) -> Result<()> {
    let mut lines = vec![format!("dim={} modality={}", store.dim(), store.modality())];
    for (node, id) in ids.iter().enumerate() {
        if let Some(v) = store.get(node) {
            check_writable_id(id)?;
            let values: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            lines.push(format!("{}\t{}", id, values.join(",")));
        }
    }
    write_lines(path, &lines)
}

/// Read labels: `item_id<TAB>class_index` per line.
pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let lines = read_lines(path)?;
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::new();
    for (no, line) in data_lines(&lines) {
        let (id, label) = line.split_once('\t').ok_or_else(|| {
            SlipError::parse(path_str(path), no, "expected 'item_id<TAB>class_index'")
        })?;
        check_id(path, no, id)?;
        if !seen.insert(id.to_string()) {
            return Err(SlipError::parse(
                path_str(path),
                no,
                format!("duplicate item '{}'", id),
            ));
        }
        let y: usize = label.trim().parse().map_err(|_| {
            SlipError::parse(path_str(path), no, format!("bad class index '{}'", label))
        })?;
        out.push((id.to_string(), y));
    }
    Ok(out)
}

/// Write labels aligned with `ids`.
pub fn write_labels(path: &Path, ids: &[String], labels: &[usize]) -> Result<()> {
    if ids.len() != labels.len() {
        return Err(SlipError::InvalidInput(format!(
            "{} ids but {} labels",
            ids.len(),
            labels.len()
        )));
    }
    let mut lines = Vec::with_capacity(ids.len());
    for (id, y) in ids.iter().zip(labels.iter()) {
        check_writable_id(id)?;
        lines.push(format!("{}\t{}", id, y));
    }
    write_lines(path, &lines)
}

/// Write a tensor: `SLIPT1`, u64 little-endian row and column counts, then
/// row-major f64 little-endian values.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| SlipError::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| SlipError::io(path_str(path), e);
    w.write_all(TENSOR_MAGIC).map_err(io)?;
    w.write_all(&(t.rows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(t.cols() as u64).to_le_bytes()).map_err(io)?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a tensor written by [`write_tensor`]. The file must contain exactly
/// one tensor with no trailing bytes.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| SlipError::io(path_str(path), e))?;
    let fail = |msg: &str| SlipError::parse(path_str(path), 0, msg);
    if bytes.len() < TENSOR_MAGIC.len() + 16 {
        return Err(fail("file too short for a tensor header"));
    }
    if &bytes[..TENSOR_MAGIC.len()] != TENSOR_MAGIC {
        return Err(fail("bad magic bytes"));
    }
    let mut at = TENSOR_MAGIC.len();
    let mut read_u64 = || {
        let v = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("length checked"));
        at += 8;
        v
    };
    let rows = read_u64() as usize;
    let cols = read_u64() as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(at))
        .ok_or_else(|| fail("tensor dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "expected {} bytes for a {}x{} tensor, found {}",
            expected,
            rows,
            cols,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[at..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().expect("chunk is 8 bytes")));
    }
    Tensor::new(rows, cols, data)
}

const CHECKPOINT_CONFIG: &str = "config.txt";
const CHECKPOINT_MANIFEST: &str = "manifest.tsv";
const CHECKPOINT_META: &str = "meta.txt";

/// Save parameters plus metadata into a directory: `config.txt` with the
/// model shape, `manifest.tsv` naming every tensor and its shape,
/// `meta.txt` with the snapshot's position, and one `.bin` tensor file per
/// parameter.
pub fn save_checkpoint(dir: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SlipError::io(path_str(dir), e))?;
    write_lines(&dir.join(CHECKPOINT_CONFIG), &params.config.to_lines())?;
    write_lines(
        &dir.join(CHECKPOINT_META),
        &[
            format!("epoch = {}", meta.epoch),
            format!("step = {}", meta.step),
            format!("val_metric = {}", meta.val_metric),
        ],
    )?;
    let mut manifest = Vec::new();
    let mut result = Ok(());
    params.visit(|name, _, t| {
        if result.is_err() {
            return;
        }
        manifest.push(format!("{}\t{}\t{}", name, t.rows(), t.cols()));
        result = write_tensor(&dir.join(format!("{}.bin", name)), t);
    });
    result?;
    write_lines(&dir.join(CHECKPOINT_MANIFEST), &manifest)
}

/// Load a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let config_lines = read_lines(&dir.join(CHECKPOINT_CONFIG))?;
    let config = ModelConfig::from_lines(&config_lines)?;
    // Build a skeleton with the right shapes, then overwrite every tensor.
    let mut params = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;

    let manifest_path = dir.join(CHECKPOINT_MANIFEST);
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (no, line) in data_lines(&read_lines(&manifest_path)?) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(SlipError::parse(
                path_str(&manifest_path),
                no,
                "expected 'name<TAB>rows<TAB>cols'",
            ));
        }
        let rows: usize = fields[1].parse().map_err(|_| {
            SlipError::parse(path_str(&manifest_path), no, format!("bad rows '{}'", fields[1]))
        })?;
        let cols: usize = fields[2].parse().map_err(|_| {
            SlipError::parse(path_str(&manifest_path), no, format!("bad cols '{}'", fields[2]))
        })?;
        let t = read_tensor(&dir.join(format!("{}.bin", fields[0])))?;
        if t.shape() != (rows, cols) {
            return Err(SlipError::Shape(format!(
                "tensor '{}' is {}x{} but the manifest says {}x{}",
                fields[0],
                t.rows(),
                t.cols(),
                rows,
                cols
            )));
        }
        if tensors.insert(fields[0].to_string(), t).is_some() {
            return Err(SlipError::parse(
                path_str(&manifest_path),
                no,
                format!("duplicate tensor '{}'", fields[0]),
            ));
        }
    }

    let mut missing = Vec::new();
    let mut shape_err = None;
    params.visit_mut(|name, _, t| {
        match tensors.remove(name) {
            Some(loaded) => {
                if loaded.shape() != t.shape() && shape_err.is_none() {
                    shape_err = Some(SlipError::Shape(format!(
                        "tensor '{}' is {}x{} but the model expects {}x{}",
                        name,
                        loaded.rows(),
                        loaded.cols(),
                        t.rows(),
                        t.cols()
                    )));
                    return;
                }
                *t = loaded;
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(e) = shape_err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(SlipError::InvalidInput(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.into_keys().collect();
        return Err(SlipError::InvalidInput(format!(
            "checkpoint has unknown tensors: {}",
            extra.join(", ")
        )));
    }

    let meta_path = dir.join(CHECKPOINT_META);
    let mut meta = CheckpointMeta {
        step: 0,
        epoch: 0,
        val_metric: f64::NAN,
    };
    let mut seen_keys = BTreeSet::new();
    for (no, line) in data_lines(&read_lines(&meta_path)?) {
        let (key, value) = line.split_once('=').ok_or_else(|| {
            SlipError::parse(path_str(&meta_path), no, "expected 'key = value'")
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !seen_keys.insert(key.to_string()) {
            return Err(SlipError::parse(
                path_str(&meta_path),
                no,
                format!("duplicate key '{}'", key),
            ));
        }
        match key {
            "step" => {
                meta.step = value.parse().map_err(|_| {
                    SlipError::parse(path_str(&meta_path), no, format!("bad step '{}'", value))
                })?
            }
            "epoch" => {
                meta.epoch = value.parse().map_err(|_| {
                    SlipError::parse(path_str(&meta_path), no, format!("bad epoch '{}'", value))
                })?
            }
            "val_metric" => {
                meta.val_metric = value.parse().map_err(|_| {
                    SlipError::parse(
                        path_str(&meta_path),
                        no,
                        format!("bad val_metric '{}'", value),
                    )
                })?
            }
            other => {
                return Err(SlipError::parse(
                    path_str(&meta_path),
                    no,
                    format!("unknown key '{}'", other),
                ))
            }
        }
    }
    Ok((params, meta))
}

/// Read a training config file of flat `key = value` lines.
pub fn read_train_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_lines(&read_lines(path)?)
}

/// Write a training config as sorted `key = value` lines.
pub fn write_train_config(path: &Path, config: &TrainConfig) -> Result<()> {
    write_lines(path, &config.to_lines())
}

/// What `load_dataset` kept and dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub nodes_kept: usize,
    /// Ids present in only one modality (or, when labels are required,
    /// lacking a label).
    pub nodes_dropped: usize,
    pub edges_kept: usize,
    /// Edges with at least one endpoint outside the kept node set.
    pub edges_dropped: usize,
}

/// Assemble a dataset from an edge list, two feature files, and optional
/// labels. The node universe is the sorted set of ids carrying features in
/// both modalities (and a label, when labels are supplied); edges with
/// missing endpoints are dropped and counted.
pub fn load_dataset(
    edges_path: &Path,
    image_path: &Path,
    text_path: &Path,
    labels_path: Option<&Path>,
    split: &SplitSpec,
) -> Result<(LabeledDataset, LoadReport)> {
    let image_file = read_features(image_path)?;
    if image_file.modality != Modality::Image {
        return Err(SlipError::parse(
            path_str(image_path),
            1,
            format!("expected modality=image, found modality={}", image_file.modality),
        ));
    }
    let text_file = read_features(text_path)?;
    if text_file.modality != Modality::Text {
        return Err(SlipError::parse(
            path_str(text_path),
            1,
            format!("expected modality=text, found modality={}", text_file.modality),
        ));
    }
    let image_map: BTreeMap<&str, &Vec<f64>> = image_file
        .rows
        .iter()
        .map(|(id, v)| (id.as_str(), v))
        .collect();
    let text_map: BTreeMap<&str, &Vec<f64>> = text_file
        .rows
        .iter()
        .map(|(id, v)| (id.as_str(), v))
        .collect();
    let label_rows: Option<Vec<(String, usize)>> = match labels_path {
        Some(p) => Some(read_labels(p)?),
        None => None,
    };
    let label_map: Option<BTreeMap<&str, usize>> = label_rows
        .as_ref()
        .map(|rows| rows.iter().map(|(id, y)| (id.as_str(), *y)).collect());

    let mut universe: Vec<&str> = Vec::new();
    let mut nodes_dropped = 0usize;
    let mut all_ids: BTreeSet<&str> = BTreeSet::new();
    all_ids.extend(image_map.keys());
    all_ids.extend(text_map.keys());
    if let Some(lm) = &label_map {
        all_ids.extend(lm.keys());
    }
    for id in all_ids {
        let complete = image_map.contains_key(id)
            && text_map.contains_key(id)
            && label_map.as_ref().map_or(true, |lm| lm.contains_key(id));
        if complete {
            universe.push(id);
        } else {
            nodes_dropped += 1;
        }
    }

    let index: BTreeMap<&str, u32> = universe
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, i as u32))
        .collect();
    let records = read_edge_records(edges_path)?;
    let mut edges = Vec::new();
    let mut edges_dropped = 0usize;
    for (a, b, w) in &records {
        match (index.get(a.as_str()), index.get(b.as_str())) {
            (Some(&i), Some(&j)) => edges.push((i, j, *w)),
            _ => edges_dropped += 1,
        }
    }

    let n = universe.len();
    let node_ids: Vec<String> = universe.iter().map(|s| s.to_string()).collect();
    let graph = InstanceGraph::from_edges(node_ids, &edges)?;

    let mut image_features = FeatureStore::new(Modality::Image, image_file.dim, n)?;
    let mut text_features = FeatureStore::new(Modality::Text, text_file.dim, n)?;
    for (node, id) in universe.iter().enumerate() {
        image_features.insert(node, image_map[id].clone())?;
        text_features.insert(node, text_map[id].clone())?;
    }
    let labels: Vec<usize> = match &label_map {
        Some(lm) => universe.iter().map(|id| lm[id]).collect(),
        None => Vec::new(),
    };

    let dataset = LabeledDataset {
        graph,
        image_features,
        text_features,
        labels,
        split: split.split(n)?,
    };
    let report = LoadReport {
        nodes_kept: n,
        nodes_dropped,
        edges_kept: dataset.graph.edge_count(),
        edges_dropped,
    };
    Ok((dataset, report))
}

/// Write a dataset's edge list, feature tables, and labels (when present)
/// under `dir` with the standard file names.
pub fn write_dataset(dir: &Path, data: &LabeledDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SlipError::io(path_str(dir), e))?;
    let ids = data.graph.node_ids().to_vec();
    write_edge_list(&dir.join(DATASET_EDGES), &data.graph)?;
    write_features(&dir.join(DATASET_IMAGE_FEATURES), &data.image_features, &ids)?;
    write_features(&dir.join(DATASET_TEXT_FEATURES), &data.text_features, &ids)?;
    if !data.labels.is_empty() {
        write_labels(&dir.join(DATASET_LABELS), &ids, &data.labels)?;
    }
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`]. Labels are used
/// when the labels file exists.
pub fn load_dataset_dir(dir: &Path, split: &SplitSpec) -> Result<(LabeledDataset, LoadReport)> {
    let labels = dir.join(DATASET_LABELS);
    load_dataset(
        &dir.join(DATASET_EDGES),
        &dir.join(DATASET_IMAGE_FEATURES),
        &dir.join(DATASET_TEXT_FEATURES),
        labels.exists().then_some(labels.as_path()),
        split,
    )
}

/// Write a hop-similarity table under `dir`: one `hop<k>.tsv` per group with
/// one raw similarity per line, plus `summary.tsv` with per-hop counts and
/// moments. Returns the file names written, summary last.
pub fn write_hop_analysis(dir: &Path, table: &HopSimilarityTable) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| SlipError::io(path_str(dir), e))?;
    let mut written = Vec::new();
    let mut summary = vec!["hop\tpairs\tmean\tstd".to_string()];
    for group in &table.groups {
        let name = format!("hop{}.tsv", group.hop);
        let lines: Vec<String> = group.samples.iter().map(|s| s.to_string()).collect();
        write_lines(&dir.join(&name), &lines)?;
        written.push(name);
        summary.push(format!(
            "{}\t{}\t{:.6}\t{:.6}",
            group.hop, group.pairs, group.mean, group.std
        ));
    }
    write_lines(&dir.join("summary.tsv"), &summary)?;
    written.push("summary.tsv".to_string());
    Ok(written)
}

/// Scores a node by the cosine similarity of its image and text feature
/// vectors; the stand-in alignment measure for the stats table. Nodes with
/// missing features, mismatched dimensions, or a zero vector score `None`.
pub struct FeatureCosineScorer<'a> {
    pub image: &'a FeatureStore,
    pub text: &'a FeatureStore,
}

impl PairScorer for FeatureCosineScorer<'_> {
    fn score(&self, node: usize) -> Option<f64> {
        let a = self.image.get(node)?;
        let b = self.text.get(node)?;
        if a.len() != b.len() {
            return None;
        }
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return None;
        }
        Some(dot / (na * nb))
    }
}

/// Stats row for one dataset, with the feature-cosine stand-in scorer.
pub fn dataset_stats(data: &LabeledDataset) -> GraphStats {
    let scorer = FeatureCosineScorer {
        image: &data.image_features,
        text: &data.text_features,
    };
    graph_stats(&data.graph, Some(&scorer))
}

/// Format stats rows as a tab-separated table with the standard header.
/// Score columns print `na` when no score was available.
pub fn emit_stats_table(rows: &[GraphStats]) -> Vec<String> {
    let mut lines = vec!["nodes\tedges\tscore_mean\tscore_std".to_string()];
    for row in rows {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{:.6}", x),
            None => "na".to_string(),
        };
        lines.push(format!(
            "{}\t{}\t{}\t{}",
            row.nodes,
            row.edges,
            fmt(row.score_mean),
            fmt(row.score_std)
        ));
    }
    lines
}
