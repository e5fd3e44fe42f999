//! Low-rank adapters over attention projections, the style/content block
//! partition, masked parameter updates, and checkpoint I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{BlockSpec, BlockedDenoiser};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, hash_f64s};

/// One low-rank delta: `delta = scale * B . A` with `A: (rank, d_in)` and
/// `B: (d_out, rank)`. With `B = 0` the delta is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraEntry {
    pub fn delta(&self, scale: f64) -> Array2<f64> {
        self.b.dot(&self.a).mapv(|v| v * scale)
    }
}

/// Adapter entries keyed by attention-layer identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    entries: BTreeMap<String, LoraEntry>,
    rank: usize,
    alpha: f64,
}

impl LoraAdapter {
    /// Fresh adapter for every attention layer of `model`: `A` seeded
    /// Gaussian, `B` zero, so the merged model equals the base model.
    pub fn init(model: &dyn BlockedDenoiser, rank: usize, seed: u64) -> Result<Self> {
        Self::init_with_alpha(model, rank, rank as f64, seed)
    }

    pub fn init_with_alpha(
        model: &dyn BlockedDenoiser,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("lora rank must be >= 1".into()));
        }
        let mut entries = BTreeMap::new();
        for (layer, (d_out, d_in)) in model.layer_dims() {
            if rank > d_out.min(d_in) {
                return Err(Error::InvalidArgument(format!(
                    "rank {rank} exceeds dimensions ({d_out}, {d_in}) of layer {layer}"
                )));
            }
            let mut rng =
                ChaCha12Rng::seed_from_u64(derive_seed(seed, &format!("lora:{layer}")));
            let sigma = 1.0 / (d_in as f64).sqrt();
            let a = Array2::from_shape_fn((rank, d_in), |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * sigma
            });
            let b = Array2::zeros((d_out, rank));
            entries.insert(layer, LoraEntry { a, b });
        }
        Ok(LoraAdapter {
            entries,
            rank,
            alpha,
        })
    }

    pub fn from_entries(entries: BTreeMap<String, LoraEntry>, rank: usize, alpha: f64) -> Self {
        LoraAdapter {
            entries,
            rank,
            alpha,
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, LoraEntry> {
        &self.entries
    }

    /// Mutable entry access for optimizers and tests. Shape invariants are
    /// the caller's responsibility; [`masked_update`] is the checked path.
    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut LoraEntry)> {
        self.entries.iter_mut()
    }

    pub fn get(&self, layer: &str) -> Option<&LoraEntry> {
        self.entries.get(layer)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Effective delta multiplier `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Checks that every entry targets an existing layer with consistent
    /// shapes; lists all offending keys at once.
    pub fn validate_against(&self, model: &dyn BlockedDenoiser) -> Result<()> {
        let dims = model.layer_dims();
        let mut offending = Vec::new();
        for (key, entry) in &self.entries {
            match dims.get(key) {
                None => offending.push(key.clone()),
                Some(&(d_out, d_in)) => {
                    if entry.a.dim() != (self.rank, d_in) || entry.b.dim() != (d_out, self.rank) {
                        offending.push(key.clone());
                    }
                }
            }
        }
        if offending.is_empty() {
            Ok(())
        } else {
            Err(Error::UnknownLayers { keys: offending })
        }
    }

    /// Keeps only entries owned by the given blocks; used to build the
    /// style-only inference view.
    pub fn restricted_to_blocks(&self, blocks: &[String]) -> LoraAdapter {
        let entries = self
            .entries
            .iter()
            .filter(|(key, _)| {
                blocks.iter().any(|b| {
                    key.strip_prefix(b.as_str())
                        .is_some_and(|rest| rest.starts_with('.'))
                })
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        LoraAdapter {
            entries,
            rank: self.rank,
            alpha: self.alpha,
        }
    }

    /// Content hash over keys, shapes, rank, alpha and raw values.
    pub fn content_hash(&self) -> String {
        let mut parts: Vec<Vec<f64>> = vec![vec![self.rank as f64, self.alpha]];
        for (key, entry) in &self.entries {
            parts.push(key.bytes().map(|b| b as f64).collect());
            parts.push(entry.a.iter().cloned().collect());
            parts.push(entry.b.iter().cloned().collect());
        }
        hash_f64s(parts.iter().map(|p| p.as_slice()))
    }

    /// Keys whose matrices differ bit-wise from `other`.
    pub fn diff_keys(&self, other: &LoraAdapter) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(key, entry)| other.entries.get(*key) != Some(entry))
            .map(|(key, _)| key.clone())
            .collect()
    }
}

/// Style/content split over block names. `style_blocks` is always a subset
/// of `all_blocks`, both kept in canonical block order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    pub style_blocks: Vec<String>,
    pub all_blocks: Vec<String>,
}

impl BlockPartition {
    pub fn new(style_blocks: Vec<String>, all_blocks: Vec<String>) -> Result<Self> {
        let all: BTreeSet<&String> = all_blocks.iter().collect();
        let mut seen = BTreeSet::new();
        for s in &style_blocks {
            if !all.contains(s) {
                return Err(Error::InvalidArgument(format!(
                    "style block {s:?} not in block list"
                )));
            }
            if !seen.insert(s.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate style block {s:?}"
                )));
            }
        }
        Ok(BlockPartition {
            style_blocks,
            all_blocks,
        })
    }

    /// Builds a partition from block specs, keeping canonical order.
    pub fn from_layout(style: &[String], layout: &[BlockSpec]) -> Result<Self> {
        let all: Vec<String> = layout.iter().map(|b| b.name.clone()).collect();
        let style_set: BTreeSet<&String> = style.iter().collect();
        for s in style {
            if !all.contains(s) {
                return Err(Error::InvalidArgument(format!(
                    "style block {s:?} not in model layout"
                )));
            }
        }
        let ordered: Vec<String> = all
            .iter()
            .filter(|name| style_set.contains(name))
            .cloned()
            .collect();
        BlockPartition::new(ordered, all)
    }

    pub fn is_style_block(&self, name: &str) -> bool {
        self.style_blocks.iter().any(|b| b == name)
    }

    /// True when the attention-layer id belongs to a style block
    /// (layer ids are `<block>.<path>`).
    pub fn owns_style_layer(&self, layer: &str) -> bool {
        self.style_blocks.iter().any(|b| {
            layer
                .strip_prefix(b.as_str())
                .is_some_and(|rest| rest.starts_with('.'))
        })
    }
}

/// Which adapter entries a gradient step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateSubset {
    All,
    StyleOnly,
}

/// Gradient (or velocity) per adapter entry, keyed identically.
pub type GradientMap = BTreeMap<String, (Array2<f64>, Array2<f64>)>;

/// Plain SGD step with subset masking: entries outside the subset are left
/// bit-identical.
pub fn masked_update(
    adapter: &mut LoraAdapter,
    gradient: &GradientMap,
    partition: &BlockPartition,
    subset: UpdateSubset,
    lr: f64,
) -> Result<()> {
    let adapter_keys: Vec<&String> = adapter.entries.keys().collect();
    let grad_keys: Vec<&String> = gradient.keys().collect();
    if adapter_keys != grad_keys {
        let missing: Vec<String> = adapter
            .entries
            .keys()
            .filter(|k| !gradient.contains_key(*k))
            .cloned()
            .collect();
        let extra: Vec<String> = gradient
            .keys()
            .filter(|k| !adapter.entries.contains_key(*k))
            .cloned()
            .collect();
        return Err(Error::InvalidArgument(format!(
            "gradient keys do not match adapter entries (missing: [{}], extra: [{}])",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    for (key, entry) in adapter.entries.iter_mut() {
        if subset == UpdateSubset::StyleOnly && !partition.owns_style_layer(key) {
            continue;
        }
        let (ga, gb) = &gradient[key];
        if ga.dim() != entry.a.dim() || gb.dim() != entry.b.dim() {
            return Err(Error::shape(
                format!("gradient for {key}"),
                format!("{:?}/{:?}", entry.a.dim(), entry.b.dim()),
                format!("{:?}/{:?}", ga.dim(), gb.dim()),
            ));
        }
        entry.a.zip_mut_with(ga, |p, g| *p -= lr * g);
        entry.b.zip_mut_with(gb, |p, g| *p -= lr * g);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
//
// Archive: flat binary, `LORA1` magic, entry count, then per entry
// key / A shape+data / B shape+data, f64 little-endian. Sidecar manifest
// (`<path>.manifest`): plain key = value lines with rank, alpha, backbone,
// partition and the full layer list. Entry order on disk is irrelevant;
// loading normalizes into sorted keys.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 5] = b"LORA1";

/// A loaded checkpoint: the adapter plus the metadata needed to re-attach it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub adapter: LoraAdapter,
    pub partition: BlockPartition,
    pub backbone: String,
}

pub fn manifest_path(archive: &Path) -> PathBuf {
    let mut os = archive.as_os_str().to_owned();
    os.push(".manifest");
    PathBuf::from(os)
}

pub fn save_checkpoint(
    adapter: &LoraAdapter,
    partition: &BlockPartition,
    backbone: &str,
    path: &Path,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(adapter.entries.len() as u32).to_le_bytes());
    for (key, entry) in &adapter.entries {
        buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
        buf.extend_from_slice(key.as_bytes());
        for m in [&entry.a, &entry.b] {
            buf.extend_from_slice(&(m.dim().0 as u32).to_le_bytes());
            buf.extend_from_slice(&(m.dim().1 as u32).to_le_bytes());
            for v in m.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;

    let manifest = format!(
        "format = lora-checkpoint-v1\nbackbone = {}\nrank = {}\nalpha = {}\nstyle_blocks = {}\nall_blocks = {}\nlayers = {}\n",
        backbone,
        adapter.rank,
        adapter.alpha,
        partition.style_blocks.join(","),
        partition.all_blocks.join(","),
        adapter.entries.keys().cloned().collect::<Vec<_>>().join(","),
    );
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(())
}

struct ArchiveReader<'a> {
    data: &'a [u8],
    pos: usize,
    current_entry: Option<String>,
}

impl<'a> ArchiveReader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            entry: self.current_entry.clone(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.err(format!(
                "truncated archive: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn matrix(&mut self) -> Result<Array2<f64>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > 16_000_000 {
            return Err(self.err(format!("implausible matrix shape {rows}x{cols}")));
        }
        let bytes = self.take(rows * cols * 8)?;
        let mut values = Vec::with_capacity(rows * cols);
        for chunk in bytes.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Array2::from_shape_vec((rows, cols), values).map_err(|e| self.err(e.to_string()))
    }
}

/// Loads a checkpoint, validating archive/manifest consistency. The first
/// malformed entry is named in the error; nothing partial is returned.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mpath = manifest_path(path);
    let mut manifest_text = String::new();
    fs::File::open(&mpath)
        .and_then(|mut f| f.read_to_string(&mut manifest_text))
        .map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest = parse_manifest(&manifest_text)?;

    let mut r = ArchiveReader {
        data: &data,
        pos: 0,
        current_entry: None,
    };
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(r.err("bad magic; not a lora checkpoint archive"));
    }
    let count = r.u32()? as usize;
    let mut entries: BTreeMap<String, LoraEntry> = BTreeMap::new();
    for i in 0..count {
        r.current_entry = Some(format!("entry #{i}"));
        let key_len = r.u32()? as usize;
        if key_len == 0 || key_len > 4096 {
            return Err(r.err(format!("implausible key length {key_len}")));
        }
        let key = String::from_utf8(r.take(key_len)?.to_vec())
            .map_err(|e| r.err(format!("non-utf8 key: {e}")))?;
        r.current_entry = Some(key.clone());
        let a = r.matrix()?;
        let b = r.matrix()?;
        if a.dim().0 != manifest.rank || b.dim().1 != manifest.rank {
            return Err(r.err(format!(
                "rank mismatch: manifest says {}, entry has A {:?} B {:?}",
                manifest.rank,
                a.dim(),
                b.dim()
            )));
        }
        if entries.insert(key.clone(), LoraEntry { a, b }).is_some() {
            return Err(r.err("duplicate key in archive"));
        }
    }
    if r.pos != r.data.len() {
        r.current_entry = None;
        return Err(r.err("trailing bytes after last entry"));
    }

    // cross-check with the manifest layer list
    let archive_keys: BTreeSet<&String> = entries.keys().collect();
    for layer in &manifest.layers {
        if !archive_keys.contains(layer) {
            return Err(Error::Checkpoint {
                entry: Some(layer.clone()),
                message: "listed in manifest but missing from archive".into(),
            });
        }
    }
    for key in &archive_keys {
        if !manifest.layers.contains(*key) {
            return Err(Error::Checkpoint {
                entry: Some((*key).clone()),
                message: "present in archive but not listed in manifest".into(),
            });
        }
    }

    let partition = BlockPartition::new(manifest.style_blocks, manifest.all_blocks)?;
    Ok(Checkpoint {
        adapter: LoraAdapter {
            entries,
            rank: manifest.rank,
            alpha: manifest.alpha,
        },
        partition,
        backbone: manifest.backbone,
    })
}

/// Loads and validates the adapter against a concrete model; a naming-scheme
/// mismatch fails here with the offending keys and nothing is returned.
pub fn load_checkpoint_for(path: &Path, model: &dyn BlockedDenoiser) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.adapter.validate_against(model)?;
    let model_layers: BTreeSet<String> = model.layer_dims().into_keys().collect();
    let missing: Vec<String> = model_layers
        .iter()
        .filter(|l| ckpt.adapter.get(l).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnknownLayers { keys: missing });
    }
    Ok(ckpt)
}

struct ManifestFields {
    backbone: String,
    rank: usize,
    alpha: f64,
    style_blocks: Vec<String>,
    all_blocks: Vec<String>,
    layers: BTreeSet<String>,
}

fn parse_manifest(text: &str) -> Result<ManifestFields> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint {
            entry: None,
            message: format!("manifest line without '=': {line:?}"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Result<String> {
        map.get(key).cloned().ok_or_else(|| Error::Checkpoint {
            entry: None,
            message: format!("manifest missing key {key:?}"),
        })
    };
    if get("format")? != "lora-checkpoint-v1" {
        return Err(Error::Checkpoint {
            entry: None,
            message: "unsupported manifest format".into(),
        });
    }
    let list = |s: String| -> Vec<String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::to_string)
            .collect()
    };
    Ok(ManifestFields {
        backbone: get("backbone")?,
        rank: get("rank")?.parse().map_err(|e| Error::Checkpoint {
            entry: None,
            message: format!("bad rank: {e}"),
        })?,
        alpha: get("alpha")?.parse().map_err(|e| Error::Checkpoint {
            entry: None,
            message: format!("bad alpha: {e}"),
        })?,
        style_blocks: list(get("style_blocks")?),
        all_blocks: list(get("all_blocks")?),
        layers: list(get("layers")?).into_iter().collect(),
    })
}
