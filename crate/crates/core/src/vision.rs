//! Single-channel images and a miniature hierarchical windowed-attention encoder.
//!
//! Tokens of a batch of `B` images are kept as a `[B * side * side, d]` matrix,
//! row-major within each image. Window partitioning, cyclic shifts and 2×2
//! merging are row gathers on that matrix, so the whole encoder is built from
//! the autodiff primitive set.
//!
//! Shifted windows use a plain cyclic shift and do not mask attention between
//! tokens that wrap around the border.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init};

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Pixels are clamped to `[0, 1]`.
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::dim(
                "image",
                format!("{height}x{width} with {} pixels", pixels.len()),
            ));
        }
        if pixels.iter().any(|p| p.is_nan()) {
            return Err(Error::Input("image contains NaN pixels".into()));
        }
        let pixels = pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::dim("image", "ragged rows"));
        }
        Self::new(h, w, rows.concat())
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self::new(height, width, vec![v; height * width]).expect("non-empty")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.pixels
            .chunks(self.width)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Rounds every pixel to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        let pixels = self
            .pixels
            .iter()
            .map(|&p| f64::from(to_byte(p)) / 255.0)
            .collect();
        Self {
            pixels,
            ..self.clone()
        }
    }

    /// Pixels as bytes, `round(255 * p)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| to_byte(p)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("invalid PGM: {m}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("magic is not P5"));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad("non-numeric header field"))
        };
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = bytes
            .get(pos..pos + w * h)
            .ok_or_else(|| bad("short raster"))?;
        Self::from_bytes(h, w, raster)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

fn to_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisionArch {
    /// Hierarchical windowed attention with patch merging.
    #[default]
    Swin,
    /// Flat global attention, no merging.
    Vit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionEncoderConfig {
    pub arch: VisionArch,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_stages: usize,
    pub blocks_per_stage: usize,
    pub window_size: usize,
    pub num_heads: usize,
    /// MLP hidden width as a multiple of the stage dimension.
    pub mlp_ratio: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self {
            arch: VisionArch::Swin,
            image_size: 32,
            patch_size: 4,
            embed_dim: 32,
            num_stages: 2,
            blocks_per_stage: 2,
            window_size: 4,
            num_heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl VisionEncoderConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Dimension of the pooled embedding.
    pub fn output_dim(&self) -> usize {
        match self.arch {
            VisionArch::Swin => self.embed_dim << (self.num_stages - 1),
            VisionArch::Vit => self.embed_dim,
        }
    }

    /// Window side used at `stage` (0-based): the configured size, capped at the grid side.
    pub fn stage_window(&self, stage: usize) -> usize {
        self.window_size.min(self.grid_side() >> stage)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.num_stages == 0 || self.patch_size == 0 || self.window_size == 0 {
            return cfg("vision num_stages, patch_size and window_size must be positive".into());
        }
        let unit = self.patch_size << (self.num_stages - 1);
        if self.image_size % unit != 0 {
            return cfg(format!(
                "image_size {} must be divisible by patch_size x 2^(num_stages-1) = {unit}",
                self.image_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return cfg(format!(
                "vision embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.arch == VisionArch::Swin {
            for s in 0..self.num_stages {
                let side = self.grid_side() >> s;
                if side % self.stage_window(s) != 0 {
                    return cfg(format!(
                        "window_size {} does not divide the stage-{} grid side {side}",
                        self.window_size,
                        s + 1
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn init_params<R: Rng>(init: &mut Init<'_, R>, prefix: &str, cfg: &VisionEncoderConfig) {
    let d = cfg.embed_dim;
    let p2 = cfg.patch_size * cfg.patch_size;
    init.linear(&format!("{prefix}.patch.proj"), p2, d);
    let n = cfg.grid_side() * cfg.grid_side();
    init.embedding(&format!("{prefix}.patch.pos"), n, d, 0.1);
    match cfg.arch {
        VisionArch::Swin => {
            for s in 0..cfg.num_stages {
                let ds = d << s;
                for j in 0..cfg.blocks_per_stage {
                    init.transformer_block(
                        &format!("{prefix}.stages.{s}.blocks.{j}"),
                        ds,
                        ds * cfg.mlp_ratio,
                    );
                }
                if s + 1 < cfg.num_stages {
                    init.linear(&format!("{prefix}.stages.{s}.merge"), 4 * ds, 2 * ds);
                }
            }
        }
        VisionArch::Vit => {
            for j in 0..cfg.num_stages * cfg.blocks_per_stage {
                init.transformer_block(&format!("{prefix}.vit.blocks.{j}"), d, d * cfg.mlp_ratio);
            }
        }
    }
}

/// Token grid for a batch of images: `var` is `[batch * side * side, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct Grid {
    pub var: Var,
    pub batch: usize,
    pub side: usize,
    pub dim: usize,
}

/// Flattened non-overlapping patches, `[batch * (H/p) * (W/p), p * p]`.
pub fn patchify(images: &[&Image], patch: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("no images to encode".into()))?;
    let (h, w) = (first.height(), first.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 || h != w {
        return Err(Error::dim(
            "patch_embed",
            format!("{h}x{w} image with patch size {patch}"),
        ));
    }
    let side = h / patch;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::dim(
                "patch_embed",
                format!(
                    "mixed image sizes {h}x{w} and {}x{}",
                    img.height(),
                    img.width()
                ),
            ));
        }
        for pr in 0..side {
            for pc in 0..side {
                for i in 0..patch {
                    let row = (pr * patch + i) * w + pc * patch;
                    data.extend_from_slice(&img.pixels()[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![images.len() * side * side, patch * patch], data)
}

/// Linear patch projection plus learned per-position embedding.
pub fn patch_embed(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    cfg: &VisionEncoderConfig,
    images: &[&Image],
) -> Result<Grid> {
    if let Some(img) = images.first() {
        if img.height() != cfg.image_size || img.width() != cfg.image_size {
            return Err(Error::dim(
                "patch_embed",
                format!(
                    "{}x{} image, encoder expects {}x{}",
                    img.height(),
                    img.width(),
                    cfg.image_size,
                    cfg.image_size
                ),
            ));
        }
    }
    let patches = patchify(images, cfg.patch_size)?;
    let side = cfg.grid_side();
    let b = images.len();
    let x = tape.constant(patches);
    let x = nn::linear(tape, p, &format!("{prefix}.patch.proj"), x)?;
    let x = tape.reshape(x, vec![b, side * side, cfg.embed_dim])?;
    let x = tape.add(x, p.var(&format!("{prefix}.patch.pos"))?)?;
    let var = tape.reshape(x, vec![b * side * side, cfg.embed_dim])?;
    Ok(Grid {
        var,
        batch: b,
        side,
        dim: cfg.embed_dim,
    })
}

/// Row order that lists tokens window by window (row-major windows,
/// row-major inside each window), after a cyclic shift of `shift` in both axes.
pub fn window_order(batch: usize, side: usize, window: usize, shift: usize) -> Vec<usize> {
    let per = side / window;
    let mut order = Vec::with_capacity(batch * side * side);
    for b in 0..batch {
        for wr in 0..per {
            for wc in 0..per {
                for i in 0..window {
                    for j in 0..window {
                        let r = (wr * window + i + shift) % side;
                        let c = (wc * window + j + shift) % side;
                        order.push(b * side * side + r * side + c);
                    }
                }
            }
        }
    }
    order
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Pre-norm block whose attention runs independently inside each
/// `window × window` window.
#[allow(clippy::too_many_arguments)]
pub fn window_attention_block(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    grid: Grid,
    window: usize,
    shifted: bool,
    heads: usize,
) -> Result<Grid> {
    if window == 0 || grid.side % window != 0 {
        return Err(Error::dim(
            "window_attention_block",
            format!("window {window} does not divide grid side {}", grid.side),
        ));
    }
    let shift = if shifted { window / 2 } else { 0 };
    let order = window_order(grid.batch, grid.side, window, shift);
    let inverse = inverse_permutation(&order);
    let groups = grid.batch * (grid.side / window).pow(2);

    let h = nn::layer_norm(tape, p, &format!("{prefix}.ln1"), grid.var)?;
    let h = tape.lookup(h, order)?;
    let h = tape.reshape(h, vec![groups, window * window, grid.dim])?;
    let a = nn::self_attention(tape, p, &format!("{prefix}.attn"), h, heads)?;
    let a = tape.reshape(a.out, vec![grid.batch * grid.side * grid.side, grid.dim])?;
    let a = tape.lookup(a, inverse)?;
    let x = tape.add(grid.var, a)?;
    let h = nn::layer_norm(tape, p, &format!("{prefix}.ln2"), x)?;
    let m = nn::mlp(tape, p, &format!("{prefix}.mlp"), h)?;
    let var = tape.add(x, m)?;
    Ok(Grid { var, ..grid })
}

/// Concatenates each 2×2 neighbourhood and projects `4d → 2d`; the side halves.
pub fn patch_merge(tape: &mut Tape, p: &Bound, prefix: &str, grid: Grid) -> Result<Grid> {
    if grid.side % 2 != 0 {
        return Err(Error::dim(
            "patch_merge",
            format!("grid side {} is odd", grid.side),
        ));
    }
    let half = grid.side / 2;
    let mut parts = Vec::with_capacity(4);
    for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        let mut ids = Vec::with_capacity(grid.batch * half * half);
        for b in 0..grid.batch {
            for i in 0..half {
                for j in 0..half {
                    ids.push(b * grid.side * grid.side + (2 * i + dr) * grid.side + 2 * j + dc);
                }
            }
        }
        parts.push(tape.lookup(grid.var, ids)?);
    }
    let cat = tape.concat(&parts)?;
    let var = nn::linear(tape, p, prefix, cat)?;
    Ok(Grid {
        var,
        batch: grid.batch,
        side: half,
        dim: 2 * grid.dim,
    })
}

pub struct VisionOutput {
    /// `[batch, d_img]`
    pub pooled: Var,
    /// Final-stage tokens.
    pub tokens: Grid,
}

fn pool(tape: &mut Tape, grid: Grid) -> Result<Var> {
    let x = tape.reshape(grid.var, vec![grid.batch, grid.side * grid.side, grid.dim])?;
    tape.mean_axis(x, 1)
}

/// Hierarchical encoder: per stage, alternating regular and shifted window
/// blocks, with a patch merge between stages, then mean pooling.
pub fn encode_images(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    cfg: &VisionEncoderConfig,
    images: &[&Image],
) -> Result<VisionOutput> {
    if cfg.arch == VisionArch::Vit {
        return encode_images_vit(tape, p, prefix, cfg, images);
    }
    let mut grid = patch_embed(tape, p, prefix, cfg, images)?;
    for s in 0..cfg.num_stages {
        let window = cfg.stage_window(s);
        for j in 0..cfg.blocks_per_stage {
            grid = window_attention_block(
                tape,
                p,
                &format!("{prefix}.stages.{s}.blocks.{j}"),
                grid,
                window,
                j % 2 == 1,
                cfg.num_heads,
            )?;
        }
        if s + 1 < cfg.num_stages {
            grid = patch_merge(tape, p, &format!("{prefix}.stages.{s}.merge"), grid)?;
        }
    }
    Ok(VisionOutput {
        pooled: pool(tape, grid)?,
        tokens: grid,
    })
}

/// Flat variant: patch embedding followed by global-attention blocks.
pub fn encode_images_vit(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    cfg: &VisionEncoderConfig,
    images: &[&Image],
) -> Result<VisionOutput> {
    let mut grid = patch_embed(tape, p, prefix, cfg, images)?;
    let n = grid.side * grid.side;
    for j in 0..cfg.num_stages * cfg.blocks_per_stage {
        let x = tape.reshape(grid.var, vec![grid.batch, n, grid.dim])?;
        let x = nn::transformer_block(
            tape,
            p,
            &format!("{prefix}.vit.blocks.{j}"),
            x,
            cfg.num_heads,
        )?;
        grid.var = tape.reshape(x, vec![grid.batch * n, grid.dim])?;
    }
    Ok(VisionOutput {
        pooled: pool(tape, grid)?,
        tokens: grid,
    })
}
