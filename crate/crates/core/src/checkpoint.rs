//! Single-file checkpoint container:
//! `[u64 LE header length][JSON manifest][f32 LE payload]`.
//!
//! Tensors are written in name order and the manifest is compact JSON with
//! a fixed key order, so identical models serialize to identical bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocation::LayerDims;
use crate::calibration::LowRankAdapter;
use crate::config::{Propagation, VoMode};
use crate::error::{CheckpointError, OlicaError, Result};
use crate::ffn::FfnWeights;
use crate::model::{AttentionHead, Block, Model, ModelConfig, Projection};
use crate::tensor::Matrix;

pub const FORMAT: &str = "olica";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offsets: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    #[serde(flatten)]
    pub dims: LayerDims,
    pub adapter_rank: Option<usize>,
    pub adapter_lambda: Option<f64>,
    pub adapter_mc2: Option<f64>,
}

/// How a checkpoint was pruned; readable without touching the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningMeta {
    pub sparsity: f64,
    pub mode: VoMode,
    pub propagate: Propagation,
    pub lambda0: f64,
    pub rank_ratio: f64,
    pub seed: u64,
    pub layers: Vec<LayerMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub pruning: Option<PruningMeta>,
}

fn block_prefix(l: usize) -> String {
    format!("blocks.{l}")
}

/// Stacks per-head matrices side by side (d × h·k).
fn hcat_heads(heads: &[AttentionHead], f: impl Fn(&AttentionHead) -> Matrix) -> Matrix {
    Matrix::hcat(&heads.iter().map(f).collect::<Vec<_>>())
}

/// Factored projections are stored as `name.w1` (d × h·k, per-head left
/// factors side by side) and `name.w2` (h·k × d_h, right factors stacked).
/// Blocks whose heads do not all share one rank are stored densely.
fn projection_tensors(name: &str, heads: &[AttentionHead], get: impl Fn(&AttentionHead) -> &Projection, out: &mut BTreeMap<String, Matrix>) {
    let rank = get(&heads[0]).rank();
    if rank.is_some() && heads.iter().all(|h| get(h).rank() == rank) {
        let mut lefts = Vec::new();
        let mut rights = Vec::new();
        for h in heads {
            if let Projection::LowRank { left, right } = get(h) {
                lefts.push(left.clone());
                rights.push(right.clone());
            }
        }
        out.insert(format!("{name}.w1"), Matrix::hcat(&lefts));
        out.insert(format!("{name}.w2"), Matrix::vcat(&rights));
    } else {
        out.insert(name.to_string(), hcat_heads(heads, |h| get(h).to_dense()));
    }
}

/// Every tensor of the model by checkpoint name.
pub fn named_tensors(model: &Model) -> BTreeMap<String, Matrix> {
    let mut out = BTreeMap::new();
    out.insert("embed.tok".into(), model.embed.clone());
    out.insert("final.norm".into(), Matrix::from_rows(&[&model.final_norm]));
    out.insert("final.proj".into(), model.proj.clone());
    for (l, b) in model.blocks.iter().enumerate() {
        let p = block_prefix(l);
        out.insert(format!("{p}.attn.norm"), Matrix::from_rows(&[&b.attn_norm]));
        out.insert(format!("{p}.ffn.norm"), Matrix::from_rows(&[&b.ffn_norm]));
        projection_tensors(&format!("{p}.attn.wq"), &b.heads, |h| &h.q, &mut out);
        projection_tensors(&format!("{p}.attn.wk"), &b.heads, |h| &h.k, &mut out);
        out.insert(format!("{p}.attn.wv"), hcat_heads(&b.heads, |h| h.wv.clone()));
        out.insert(format!("{p}.attn.wo"), hcat_heads(&b.heads, |h| h.wo.clone()));
        out.insert(format!("{p}.ffn.wu"), b.ffn.wu.clone());
        out.insert(format!("{p}.ffn.wd"), b.ffn.wd.clone());
        if let Some(g) = &b.ffn.wg {
            out.insert(format!("{p}.ffn.wg"), g.clone());
        }
        if let Some(a) = &b.adapter {
            out.insert(format!("{p}.ffn.adapter.w1"), a.w1.clone());
            out.insert(format!("{p}.ffn.adapter.w2"), a.w2.clone());
        }
    }
    out
}

fn is_vector(name: &str) -> bool {
    name.ends_with(".norm")
}

/// Serializes the model into checkpoint bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let tensors = named_tensors(model);
    let mut entries = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, m) in &tensors {
        let start = payload.len();
        for &v in m.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let shape = if is_vector(name) { vec![m.cols()] } else { vec![m.rows(), m.cols()] };
        entries.insert(
            name.clone(),
            TensorEntry {
                dtype: "F32".into(),
                shape,
                offsets: [start, payload.len()],
            },
        );
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        tensors: entries,
        pruning: model.pruning.clone(),
    };
    let header = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let mut f = std::fs::File::create(path).map_err(|e| OlicaError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| OlicaError::io(path, e))?;
    Ok(())
}

fn split_header(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Header("file shorter than the length prefix".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(8))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Header(format!("header length {len} exceeds file size")))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[8..end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let format = value.get("format").and_then(|f| f.as_str()).unwrap_or("");
    if format != FORMAT {
        return Err(CheckpointError::BadFormat { found: format.into() });
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((manifest, &bytes[end..]))
}

/// Parses and checks only the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| OlicaError::io(path, e))?;
    Ok(split_header(&bytes)?.0)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| OlicaError::io(path, e))?;
    from_bytes(&bytes)
}

struct Tensors<'a> {
    manifest: &'a Manifest,
    payload: &'a [u8],
    used: Vec<&'a str>,
}

impl<'a> Tensors<'a> {
    fn has(&self, name: &str) -> bool {
        self.manifest.tensors.contains_key(name)
    }

    fn get(&mut self, name: &str, rows: Option<usize>, cols: Option<usize>) -> Result<Matrix, CheckpointError> {
        let (key, entry) = self
            .manifest
            .tensors
            .get_key_value(name)
            .ok_or_else(|| CheckpointError::Missing(name.into()))?;
        self.used.push(key);
        if entry.dtype != "F32" {
            return Err(CheckpointError::Header(format!("tensor `{name}` has dtype {}", entry.dtype)));
        }
        let expected = match (rows, cols) {
            (Some(r), Some(c)) => format!("[{r}, {c}]"),
            (None, Some(c)) if is_vector(name) => format!("[{c}]"),
            (None, Some(c)) => format!("[_, {c}]"),
            (Some(r), None) => format!("[{r}, _]"),
            (None, None) => "[_, _]".into(),
        };
        let shape_err = || CheckpointError::Shape {
            tensor: name.into(),
            found: entry.shape.clone(),
            expected: expected.clone(),
        };
        let (r, c) = match entry.shape.as_slice() {
            [c] if is_vector(name) => (1, *c),
            [r, c] if !is_vector(name) => (*r, *c),
            _ => return Err(shape_err()),
        };
        if rows.is_some_and(|x| x != r) || cols.is_some_and(|x| x != c) {
            return Err(shape_err());
        }
        let [start, end] = entry.offsets;
        if end > self.payload.len() || start > end {
            return Err(CheckpointError::Truncated { tensor: name.into() });
        }
        if end - start != 4 * r * c {
            return Err(shape_err());
        }
        let data: Vec<f64> = self.payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite { tensor: name.into() });
        }
        Ok(Matrix::new(r, c, data).expect("length checked"))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f64>, CheckpointError> {
        Ok(self.get(name, None, Some(len))?.into_data())
    }

    /// Per-head query/key projections, dense or factored.
    fn projection(&mut self, name: &str, cfg: &ModelConfig) -> Result<Vec<Projection>, CheckpointError> {
        let (d, h, dh) = (cfg.d, cfg.h, cfg.d_h());
        if self.has(name) {
            let w = self.get(name, Some(d), Some(h * dh))?;
            return Ok((0..h).map(|i| Projection::Dense(w.column_block(i * dh, (i + 1) * dh))).collect());
        }
        let w1_name = format!("{name}.w1");
        if !self.has(&w1_name) {
            return Err(CheckpointError::Missing(name.into()));
        }
        let w1 = self.get(&w1_name, Some(d), None)?;
        if w1.cols() == 0 || w1.cols() % h != 0 || w1.cols() / h > dh {
            return Err(CheckpointError::Shape {
                tensor: w1_name,
                found: vec![w1.rows(), w1.cols()],
                expected: format!("[{d}, {h}·k] with 1 ≤ k ≤ {dh}"),
            });
        }
        let k = w1.cols() / h;
        let w2 = self.get(&format!("{name}.w2"), Some(h * k), Some(dh))?;
        Ok((0..h)
            .map(|i| Projection::LowRank {
                left: w1.column_block(i * k, (i + 1) * k),
                right: w2.row_block(i * k, (i + 1) * k),
            })
            .collect())
    }
}

fn head_width(m: &Matrix, name: &str, cfg: &ModelConfig) -> Result<usize, CheckpointError> {
    let (h, dh) = (cfg.h, cfg.d_h());
    if m.cols() == 0 || !m.cols().is_multiple_of(h) || m.cols() / h > dh {
        return Err(CheckpointError::Shape {
            tensor: name.into(),
            found: vec![m.rows(), m.cols()],
            expected: format!("[{}, {h}·k] with 1 ≤ k ≤ {dh}", cfg.d),
        });
    }
    Ok(m.cols() / h)
}

fn build_model(manifest: &Manifest, payload: &[u8]) -> Result<Model, CheckpointError> {
    let cfg = &manifest.config;
    cfg.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;
    let (d, v) = (cfg.d, cfg.vocab_size);
    let mut t = Tensors {
        manifest,
        payload,
        used: Vec::new(),
    };
    let embed = t.get("embed.tok", Some(v), Some(d))?;
    let final_norm = t.vector("final.norm", d)?;
    let proj = t.get("final.proj", Some(d), Some(v))?;

    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for l in 0..cfg.n_blocks {
        let p = block_prefix(l);
        let attn_norm = t.vector(&format!("{p}.attn.norm"), d)?;
        let ffn_norm = t.vector(&format!("{p}.ffn.norm"), d)?;
        let qs = t.projection(&format!("{p}.attn.wq"), cfg)?;
        let ks = t.projection(&format!("{p}.attn.wk"), cfg)?;
        let wv_name = format!("{p}.attn.wv");
        let wv = t.get(&wv_name, Some(d), None)?;
        let k_vo = head_width(&wv, &wv_name, cfg)?;
        let wo = t.get(&format!("{p}.attn.wo"), Some(d), Some(wv.cols()))?;
        let heads = qs
            .into_iter()
            .zip(ks)
            .enumerate()
            .map(|(i, (q, k))| AttentionHead {
                q,
                k,
                wv: wv.column_block(i * k_vo, (i + 1) * k_vo),
                wo: wo.column_block(i * k_vo, (i + 1) * k_vo),
            })
            .collect();

        let wu = t.get(&format!("{p}.ffn.wu"), Some(d), None)?;
        let width = wu.cols();
        if width == 0 {
            return Err(CheckpointError::Shape {
                tensor: format!("{p}.ffn.wu"),
                found: vec![d, 0],
                expected: format!("[{d}, m] with m ≥ 1"),
            });
        }
        let wd = t.get(&format!("{p}.ffn.wd"), Some(d), Some(width))?;
        let wg = if cfg.gated {
            Some(t.get(&format!("{p}.ffn.wg"), Some(d), Some(width))?)
        } else {
            None
        };
        let ffn = FfnWeights::new(wu, wd, wg).expect("shapes checked");

        let a1 = format!("{p}.ffn.adapter.w1");
        let adapter = if t.has(&a1) {
            let w1 = t.get(&a1, Some(d), None)?;
            let w2 = t.get(&format!("{p}.ffn.adapter.w2"), Some(d), Some(w1.cols()))?;
            let meta = manifest.pruning.as_ref().and_then(|m| m.layers.get(l));
            Some(LowRankAdapter {
                w1,
                w2,
                layer_index: l,
                lambda_used: meta.and_then(|m| m.adapter_lambda).unwrap_or(0.0),
                mc2: meta.and_then(|m| m.adapter_mc2).unwrap_or(0.0),
            })
        } else {
            None
        };
        blocks.push(Block {
            attn_norm,
            heads,
            ffn_norm,
            ffn,
            adapter,
        });
    }
    if let Some(extra) = manifest.tensors.keys().find(|k| !t.used.contains(&k.as_str())) {
        return Err(CheckpointError::Header(format!("unexpected tensor `{extra}`")));
    }
    Ok(Model {
        config: cfg.clone(),
        embed,
        blocks,
        final_norm,
        proj,
        pruning: manifest.pruning.clone(),
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (manifest, payload) = split_header(bytes)?;
    Ok(build_model(&manifest, payload)?)
}

/// Parameter count from the manifest shapes alone.
pub fn manifest_param_count(manifest: &Manifest) -> usize {
    manifest.tensors.values().map(|e| e.shape.iter().product::<usize>()).sum()
}
