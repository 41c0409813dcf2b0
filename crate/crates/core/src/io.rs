//! File formats, image ingestion, synthetic inputs, overlays, and trace
//! serialization.
//!
//! Three on-disk formats live here:
//! - the `TNSR` tensor container (bitwise-lossless doubles),
//! - binary P6 PPM images (the only image codec this crate speaks),
//! - line-delimited JSON selection traces.
//!
//! Run configuration is a plain `key=value` text file; unknown keys are
//! rejected so typos fail loudly.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::backbone::{ForwardTrace, ModelConfig, SelectionConfig};
use crate::error::KernelError;
use crate::select::{GuidanceMode, GuidanceSource};
use crate::tensor::{SeededRng, Tensor};

/// Errors from file handling and config parsing.
#[derive(Debug)]
pub enum FileError {
    Io(std::io::Error),
    /// Malformed file contents.
    Format {
        reason: String,
    },
    /// Bad run configuration (unknown key, unparsable value, or a violated
    /// model invariant).
    Config {
        reason: String,
    },
}

impl fmt::Display for FileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "i/o: {e}"),
            Self::Format { reason } => write!(f, "format: {reason}"),
            Self::Config { reason } => write!(f, "config: {reason}"),
        }
    }
}

impl std::error::Error for FileError {}

impl From<std::io::Error> for FileError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<KernelError> for FileError {
    fn from(e: KernelError) -> Self {
        Self::Config {
            reason: e.to_string(),
        }
    }
}

pub type IoResult<T> = std::result::Result<T, FileError>;

// --- TNSR tensor container ---------------------------------------------------

const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
const TENSOR_VERSION: u8 = 1;
const DTYPE_F64_LE: u8 = 0;

/// Serializes a tensor: magic `TNSR`, version 1, dtype 0 (little-endian
/// f64), rank as u8, dims as little-endian u64, then the row-major payload.
pub fn tensor_to_bytes(t: &Tensor<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 3 + t.shape().len() * 8 + t.len() * 8);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(DTYPE_F64_LE);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> IoResult<Tensor<f64>> {
    let fail = |reason: &str| FileError::Format {
        reason: reason.to_string(),
    };
    if bytes.len() < 7 {
        return Err(fail("tensor file shorter than its header"));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(fail("bad magic, expected TNSR"));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(FileError::Format {
            reason: format!("unsupported version {}", bytes[4]),
        });
    }
    if bytes[5] != DTYPE_F64_LE {
        return Err(FileError::Format {
            reason: format!("unsupported dtype code {}", bytes[5]),
        });
    }
    let rank = bytes[6] as usize;
    let dims_end = 7 + rank * 8;
    if bytes.len() < dims_end {
        return Err(fail("truncated dims"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[7 + i * 8..7 + (i + 1) * 8]);
        shape.push(u64::from_le_bytes(buf) as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail("shape product overflows"))?;
    if len.checked_mul(8).map(|p| p + dims_end) != Some(bytes.len()) {
        return Err(FileError::Format {
            reason: format!(
                "payload is {} bytes, shape {shape:?} needs {}",
                bytes.len() - dims_end,
                len.saturating_mul(8)
            ),
        });
    }
    let mut data = Vec::with_capacity(len);
    for i in 0..len {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[dims_end + i * 8..dims_end + (i + 1) * 8]);
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data).map_err(|e| FileError::Format {
        reason: e.to_string(),
    })
}

pub fn save_tensor(t: &Tensor<f64>, path: &Path) -> IoResult<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> IoResult<Tensor<f64>> {
    tensor_from_bytes(&fs::read(path)?)
}

// --- PPM images ---------------------------------------------------------------

/// Decodes a binary P6 PPM (maxval 255) into a `[3, H, W]` tensor scaled to
/// `[0, 1]`.
pub fn load_image_ppm(path: &Path) -> IoResult<Tensor<f64>> {
    image_from_ppm_bytes(&fs::read(path)?)
}

pub fn image_from_ppm_bytes(bytes: &[u8]) -> IoResult<Tensor<f64>> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> IoResult<Vec<u8>> {
        // Skip whitespace and # comments between header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FileError::Format {
                reason: "truncated ppm header".into(),
            });
        }
        Ok(bytes[start..pos].to_vec())
    };

    let magic = token(bytes)?;
    if magic != b"P6" {
        return Err(FileError::Format {
            reason: "expected P6 ppm".into(),
        });
    }
    let parse = |tok: Vec<u8>| -> IoResult<usize> {
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| FileError::Format {
                reason: "bad ppm header number".into(),
            })
    };
    let width = parse(token(bytes)?)?;
    let height = parse(token(bytes)?)?;
    let maxval = parse(token(bytes)?)?;
    if maxval != 255 {
        return Err(FileError::Format {
            reason: format!("maxval {maxval} unsupported, need 255"),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| FileError::Format {
            reason: format!("{width}x{height} image dimensions overflow"),
        })?;
    if bytes.len() < pos + need {
        return Err(FileError::Format {
            reason: format!(
                "payload is {} bytes, {width}x{height} needs {need}",
                bytes.len().saturating_sub(pos)
            ),
        });
    }
    let payload = &bytes[pos..pos + need];
    let mut data = vec![0.0f64; need];
    let plane = width * height;
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                data[c * plane + y * width + x] = payload[(y * width + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, height, width], data).map_err(|e| FileError::Format {
        reason: e.to_string(),
    })
}

/// Encodes a `[3, H, W]` tensor in `[0, 1]` as binary P6, rounding each
/// channel to the nearest byte.
pub fn image_to_ppm_bytes(image: &Tensor<f64>) -> IoResult<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(FileError::Format {
            reason: format!("expected [3, H, W] image, got {shape:?}"),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (data[c * plane + y * w + x] * 255.0)
                    .round()
                    .clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn save_image_ppm(image: &Tensor<f64>, path: &Path) -> IoResult<()> {
    fs::write(path, image_to_ppm_bytes(image)?)?;
    Ok(())
}

// --- overlays ------------------------------------------------------------------

/// Brightness multiplier for pruned patches.
pub const OVERLAY_DIM_FACTOR: f64 = 0.25;

/// Renders the selection state after the given layer onto the input image:
/// patches whose token is still alive keep full brightness, pruned patches
/// are dimmed by [`OVERLAY_DIM_FACTOR`]. Errors when the layer is not a
/// selection layer of the trace.
pub fn overlay_image(
    image: &Tensor<f64>,
    trace: &ForwardTrace<f64>,
    layer: usize,
    patch_size: usize,
) -> IoResult<Tensor<f64>> {
    let record = trace.selection_at(layer).ok_or_else(|| FileError::Config {
        reason: format!("layer {layer} is not a selection layer in this trace"),
    })?;
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(FileError::Format {
            reason: format!("expected [3, H, W] image, got {shape:?}"),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let (grid_rows, grid_cols) = record.grid;
    if grid_rows * patch_size != h || grid_cols * patch_size != w {
        return Err(FileError::Config {
            reason: format!(
                "grid {grid_rows}x{grid_cols} at patch {patch_size} does not tile {h}x{w}"
            ),
        });
    }
    let mut data = image.data().to_vec();
    let plane = h * w;
    for gr in 0..grid_rows {
        for gc in 0..grid_cols {
            if record.grid_mask[gr * grid_cols + gc] {
                continue;
            }
            for c in 0..3 {
                for dy in 0..patch_size {
                    let row = gr * patch_size + dy;
                    let base = c * plane + row * w + gc * patch_size;
                    for v in &mut data[base..base + patch_size] {
                        *v *= OVERLAY_DIM_FACTOR;
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], data).map_err(|e| FileError::Format {
        reason: e.to_string(),
    })
}

/// Writes the overlay for one selection layer as PPM.
pub fn save_overlay(
    image: &Tensor<f64>,
    trace: &ForwardTrace<f64>,
    layer: usize,
    patch_size: usize,
    path: &Path,
) -> IoResult<()> {
    let overlay = overlay_image(image, trace, layer, patch_size)?;
    save_image_ppm(&overlay, path)
}

// --- trace records --------------------------------------------------------------

#[derive(Serialize)]
struct TraceRecord<'a> {
    schema_version: u32,
    layer: usize,
    n_before: usize,
    k: usize,
    n_after: usize,
    kept_indices: &'a [usize],
    fused_mass: f64,
    /// Scores of the kept tokens, in `kept_indices` order.
    top_scores: Vec<f64>,
}

/// Serializes one record per selection event as line-delimited JSON
/// (schema_version 1). A baseline run yields an empty file.
pub fn trace_to_json_lines(trace: &ForwardTrace<f64>) -> IoResult<String> {
    let mut out = String::new();
    for record in &trace.selections {
        let top_scores = record
            .outcome
            .kept_indices
            .iter()
            .map(|&i| record.outcome.scores.data()[i])
            .collect();
        let line = serde_json::to_string(&TraceRecord {
            schema_version: 1,
            layer: record.layer,
            n_before: record.n_before,
            k: record.outcome.k,
            n_after: record.n_after,
            kept_indices: &record.outcome.kept_indices,
            fused_mass: record.outcome.fused_mass,
            top_scores,
        })
        .map_err(|e| FileError::Format {
            reason: e.to_string(),
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_trace_json(trace: &ForwardTrace<f64>, path: &Path) -> IoResult<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(trace_to_json_lines(trace)?.as_bytes())?;
    Ok(())
}

// --- synthetic inputs -------------------------------------------------------------

/// Deterministic uniform-[0,1) image for asset-free runs.
pub fn synthetic_image(size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::new(seed);
    let len = 3 * size * size;
    let data = (0..len).map(|_| rng.next_uniform()).collect();
    Tensor::new(vec![3, size, size], data).expect("uniform values are finite")
}

/// Deterministic standard-Gaussian guidance vector.
pub fn synthetic_guidance(width: usize, seed: u64) -> Tensor<f64> {
    crate::tensor::seeded_init(&[width], 1.0, &mut SeededRng::new(seed))
}

// --- run configuration --------------------------------------------------------------

/// Where the input image comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    /// Seeded uniform noise at the configured image size.
    Synthetic,
    Path(String),
}

/// Where the guidance vector comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum GuidanceSourceFile {
    /// Seeded Gaussian at the model width.
    Seeded,
    Path(String),
}

/// Parsed `key=value` run configuration; every field has a desk-scale
/// default, so an empty file (or none) is valid.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub locations: Vec<usize>,
    pub rates: Vec<f64>,
    pub mode: GuidanceSource,
    pub no_itf: bool,
    pub no_td_att: bool,
    pub seed: u64,
    pub image: ImageSource,
    pub guidance: GuidanceSourceFile,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk();
        Self {
            layers: desk.layers,
            width: desk.width,
            heads: desk.heads,
            patch_size: desk.patch_size,
            image_size: desk.image_size,
            locations: desk.selection.locations,
            rates: desk.selection.rates,
            mode: GuidanceSource::TextCls,
            no_itf: false,
            no_td_att: false,
            seed: desk.seed,
            image: ImageSource::Synthetic,
            guidance: GuidanceSourceFile::Seeded,
            out_dir: None,
        }
    }
}

pub fn parse_mode(value: &str) -> IoResult<GuidanceSource> {
    match value {
        "text-cls" => Ok(GuidanceSource::TextCls),
        "image-cls" => Ok(GuidanceSource::ImageCls),
        "multimodal-cls" => Ok(GuidanceSource::MultimodalCls),
        other => Err(FileError::Config {
            reason: format!("unknown mode {other:?}"),
        }),
    }
}

/// Parses a comma-separated list; empty or "none" means no entries.
pub fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> IoResult<Vec<T>> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| {
            part.trim().parse::<T>().map_err(|_| FileError::Config {
                reason: format!("bad {what} entry {part:?}"),
            })
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> IoResult<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| FileError::Config {
                reason: format!("line {}: expected key=value, got {line:?}", lineno + 1),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| FileError::Config {
                reason: format!("line {}: bad {what} value {value:?}", lineno + 1),
            };
            match key {
                "layers" => cfg.layers = value.parse().map_err(|_| bad("layers"))?,
                "width" => cfg.width = value.parse().map_err(|_| bad("width"))?,
                "heads" => cfg.heads = value.parse().map_err(|_| bad("heads"))?,
                "patch_size" => cfg.patch_size = value.parse().map_err(|_| bad("patch_size"))?,
                "image_size" => cfg.image_size = value.parse().map_err(|_| bad("image_size"))?,
                "locations" => cfg.locations = parse_list(value, "location")?,
                "rates" => cfg.rates = parse_list(value, "rate")?,
                "mode" => cfg.mode = parse_mode(value)?,
                "no_itf" => cfg.no_itf = value.parse().map_err(|_| bad("no_itf"))?,
                "no_td_att" => cfg.no_td_att = value.parse().map_err(|_| bad("no_td_att"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "image" => {
                    cfg.image = if value == "synthetic" {
                        ImageSource::Synthetic
                    } else {
                        ImageSource::Path(value.to_string())
                    }
                }
                "guidance" => {
                    cfg.guidance = if value == "seeded" {
                        GuidanceSourceFile::Seeded
                    } else {
                        GuidanceSourceFile::Path(value.to_string())
                    }
                }
                "out_dir" => cfg.out_dir = Some(value.to_string()),
                other => {
                    return Err(FileError::Config {
                        reason: format!("line {}: unknown key {other:?}", lineno + 1),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> IoResult<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Converts to a validated model configuration.
    pub fn to_model_config(&self) -> IoResult<ModelConfig> {
        let config = ModelConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            patch_size: self.patch_size,
            image_size: self.image_size,
            selection: SelectionConfig::new(self.locations.clone(), self.rates.clone()),
            mode: GuidanceMode {
                source: self.mode,
                disable_fusion: self.no_itf,
                disable_td_att: self.no_td_att,
            },
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}
