//! Backward-projection orthoimage rendering.
//!
//! Every raster cell is lifted onto the terrain and looked up in each frame
//! that sees it; a per-cell viewpoint score keeps the most nadir view, with a
//! short crossfade when a new view only narrowly beats the stored one.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage};
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_to_pixel, CameraIntrinsics, GeometryError, RigidTransform, WorldPoint};
use crate::raster::{blur_interleaved, to_u8, RgbF32};
use crate::terrain::{altitude_above_ground, intersect_ray, query_height, TerrainError, TerrainGrid};

#[derive(Debug, Error)]
pub enum OrthoError {
    #[error("no frames to render")]
    NoFrames,
    #[error("gsd must be positive, got {0}")]
    NonPositiveGsd(f64),
    #[error("point coincides with the camera center")]
    Coincident,
    #[error("no raster cell was covered by any frame")]
    NoCoverage,
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub id: String,
    pub image: RgbF32,
    /// `Camera -> World`.
    pub pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

impl FrameRecord {
    /// Ground distance covered by one image pixel directly below the camera.
    pub fn ground_pixel_size(&self, grid: &TerrainGrid) -> Result<f64, OrthoError> {
        let alt = altitude_above_ground(&self.pose, grid)?;
        Ok(alt / self.intrinsics.fx.max(self.intrinsics.fy))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthoCell {
    pub rgb: [f32; 3],
    /// `-inf` until covered.
    pub score: f64,
    /// Index of the frame that last wrote the cell.
    pub source: Option<u32>,
}

impl Default for OrthoCell {
    fn default() -> Self {
        Self {
            rgb: [0.0; 3],
            score: f64::NEG_INFINITY,
            source: None,
        }
    }
}

/// North-up raster. `origin` is the top-left corner (min x, max y); row `r`
/// grows southward.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoRaster {
    pub origin: Vector2<f64>,
    pub gsd: f64,
    pub cols: usize,
    pub rows: usize,
    pub cells: Vec<OrthoCell>,
}

impl OrthoRaster {
    pub fn new(origin: Vector2<f64>, gsd: f64, cols: usize, rows: usize) -> Result<Self, OrthoError> {
        if !(gsd > 0.0) {
            return Err(OrthoError::NonPositiveGsd(gsd));
        }
        Ok(Self {
            origin,
            gsd,
            cols,
            rows,
            cells: vec![OrthoCell::default(); cols * rows],
        })
    }

    /// Smallest raster on a `gsd` lattice anchored at `(min.x, max.y)` that
    /// covers `[min, max]`.
    pub fn covering(min: Vector2<f64>, max: Vector2<f64>, gsd: f64) -> Result<Self, OrthoError> {
        if !(gsd > 0.0) {
            return Err(OrthoError::NonPositiveGsd(gsd));
        }
        let cols = ((max.x - min.x) / gsd).ceil().max(1.0) as usize;
        let rows = ((max.y - min.y) / gsd).ceil().max(1.0) as usize;
        Self::new(Vector2::new(min.x, max.y), gsd, cols, rows)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell(&self, row: usize, col: usize) -> &OrthoCell {
        &self.cells[self.index(row, col)]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Vector2<f64> {
        Vector2::new(
            self.origin.x + (col as f64 + 0.5) * self.gsd,
            self.origin.y - (row as f64 + 0.5) * self.gsd,
        )
    }

    /// Fractional `(col, row)` of a world point, continuous with
    /// [`OrthoRaster::cell_center`] (cell centers land on integers).
    pub fn world_to_pixel(&self, x: f64, y: f64) -> Vector2<f64> {
        Vector2::new((x - self.origin.x) / self.gsd - 0.5, (self.origin.y - y) / self.gsd - 0.5)
    }

    /// Cell containing a world point, if inside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin.x) / self.gsd).floor();
        let r = ((self.origin.y - y) / self.gsd).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn covered_count(&self) -> usize {
        self.cells.iter().filter(|c| c.source.is_some()).count()
    }

    pub fn to_rgb(&self) -> RgbF32 {
        RgbF32 {
            width: self.cols,
            height: self.rows,
            data: self.cells.iter().map(|c| c.rgb).collect(),
        }
    }

    /// Six world-file lines: pixel sizes, rotations, then the center of the
    /// top-left cell.
    pub fn world_file_lines(&self) -> [f64; 6] {
        let c = self.cell_center(0, 0);
        [self.gsd, 0.0, 0.0, -self.gsd, c.x, c.y]
    }

    pub fn score_stats(&self) -> ScoreStats {
        let covered: Vec<f64> = self.cells.iter().filter(|c| c.source.is_some()).map(|c| c.score).collect();
        if covered.is_empty() {
            return ScoreStats::default();
        }
        ScoreStats {
            covered_cells: covered.len(),
            min: covered.iter().cloned().fold(f64::INFINITY, f64::min),
            max: covered.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean: covered.iter().sum::<f64>() / covered.len() as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub covered_cells: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Inclusive cell range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRange {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl CellRange {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row <= self.row1 && col >= self.col0 && col <= self.col1
    }

    pub fn cell_count(&self) -> usize {
        (self.row1 - self.row0 + 1) * (self.col1 - self.col0 + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthoParams {
    /// Output ground sampling distance; median ground pixel size if unset.
    pub gsd: Option<f64>,
    pub margin: f64,
    pub blur: bool,
    pub normalize_illumination: bool,
    /// Boundary samples per image edge for the footprint.
    pub footprint_samples: usize,
    pub footprint_iterations: usize,
    pub footprint_dilation: usize,
}

impl Default for OrthoParams {
    fn default() -> Self {
        Self {
            gsd: None,
            margin: 0.05,
            blur: true,
            normalize_illumination: true,
            footprint_samples: 16,
            footprint_iterations: 5,
            footprint_dilation: 2,
        }
    }
}

// ---------------------------------------------------------------------------
// preprocessing

fn channel_stats(img: &RgbF32) -> [(f64, f64); 3] {
    let n = img.data.len().max(1) as f64;
    let mut out = [(0.0, 0.0); 3];
    for (ch, slot) in out.iter_mut().enumerate() {
        let mean = img.data.iter().map(|p| p[ch] as f64).sum::<f64>() / n;
        let var = img.data.iter().map(|p| (p[ch] as f64 - mean).powi(2)).sum::<f64>() / n;
        *slot = (mean, var.sqrt());
    }
    out
}

/// Order-independent mean (sorted summation).
fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Maps each frame's per-channel mean and spread onto the sequence average.
/// Constant channels are shifted only.
pub fn normalize_illumination(frames: &[FrameRecord]) -> Result<Vec<FrameRecord>, OrthoError> {
    if frames.is_empty() {
        return Err(OrthoError::NoFrames);
    }
    let stats: Vec<[(f64, f64); 3]> = frames.par_iter().map(|f| channel_stats(&f.image)).collect();
    let mut reference = [(0.0, 0.0); 3];
    for (ch, r) in reference.iter_mut().enumerate() {
        r.0 = sorted_mean(stats.iter().map(|s| s[ch].0).collect());
        r.1 = sorted_mean(stats.iter().map(|s| s[ch].1).collect());
    }
    Ok(frames
        .par_iter()
        .zip(&stats)
        .map(|(f, s)| {
            let mut out = f.clone();
            for p in out.image.data.iter_mut() {
                for ch in 0..3 {
                    let (mean, std) = s[ch];
                    let gain = if std > 1e-9 { reference[ch].1 / std } else { 1.0 };
                    let v = (p[ch] as f64 - mean) * gain + reference[ch].0;
                    p[ch] = v.clamp(0.0, 255.0) as f32;
                }
            }
            out
        })
        .collect())
}

/// Anti-alias blur ahead of downsampling from `ground_px_size` to `gsd`.
pub fn nyquist_blur(image: &RgbF32, gsd: f64, ground_px_size: f64) -> RgbF32 {
    if !(gsd > ground_px_size) || !(ground_px_size > 0.0) {
        return image.clone();
    }
    let sigma = 0.5 * gsd / ground_px_size;
    let mut out = image.clone();
    blur_interleaved(out.data.as_flattened_mut(), image.width, image.height, 3, sigma);
    out
}

// ---------------------------------------------------------------------------
// geometry

/// Cosine between the line of sight and the downward vertical: +1 looking
/// straight down, 0 horizontal, -1 straight up.
pub fn compute_score(point: &WorldPoint, cam_center: &WorldPoint) -> Result<f64, OrthoError> {
    let d = cam_center - point;
    let n = d.norm();
    if !(n > 0.0) {
        return Err(OrthoError::Coincident);
    }
    Ok((d.z / n).clamp(-1.0, 1.0))
}

/// Combines a winning view with the stored cell. The caller guarantees
/// `new_score > existing score`.
pub fn blend_pixel(
    existing: Option<([f32; 3], f64)>,
    new_rgb: [f32; 3],
    new_score: f64,
    margin: f64,
) -> ([f32; 3], f64) {
    let Some((old, old_score)) = existing else {
        return (new_rgb, new_score);
    };
    let gap = new_score - old_score;
    if !(margin > 0.0) || gap > margin {
        return (new_rgb, new_score);
    }
    let alpha = ((gap + margin) / (2.0 * margin)) as f32;
    let mut rgb = [0.0; 3];
    for ch in 0..3 {
        rgb[ch] = alpha * new_rgb[ch] + (1.0 - alpha) * old[ch];
    }
    (rgb, new_score)
}

/// Points along the image border, corners included, `per_edge` per side.
fn border_pixels(k: &CameraIntrinsics, per_edge: usize) -> Vec<Vector2<f64>> {
    let (w, h) = (k.width as f64 - 1.0, k.height as f64 - 1.0);
    let n = per_edge.max(1);
    let mut out = Vec::with_capacity(4 * n);
    for i in 0..n {
        let t = i as f64 / n as f64;
        out.push(Vector2::new(t * w, 0.0));
        out.push(Vector2::new(w, t * h));
        out.push(Vector2::new(w - t * w, h));
        out.push(Vector2::new(0.0, h - t * h));
    }
    out
}

/// Raster cells the frame can possibly write. `None` when the frame misses
/// the raster.
pub fn compute_footprint(
    frame: &FrameRecord,
    grid: &TerrainGrid,
    raster: &OrthoRaster,
    params: &OrthoParams,
) -> Result<Option<CellRange>, OrthoError> {
    let Some((lo, hi)) = ground_footprint(frame, grid, params)? else {
        // some border ray never meets the ground: anything may be visible
        return Ok(Some(CellRange {
            row0: 0,
            row1: raster.rows - 1,
            col0: 0,
            col1: raster.cols - 1,
        }));
    };
    let d = params.footprint_dilation as f64;
    let c0 = ((lo.x - raster.origin.x) / raster.gsd).floor() - d;
    let c1 = ((hi.x - raster.origin.x) / raster.gsd).floor() + d;
    let r0 = ((raster.origin.y - hi.y) / raster.gsd).floor() - d;
    let r1 = ((raster.origin.y - lo.y) / raster.gsd).floor() + d;
    if c1 < 0.0 || r1 < 0.0 || c0 > (raster.cols - 1) as f64 || r0 > (raster.rows - 1) as f64 {
        return Ok(None);
    }
    Ok(Some(CellRange {
        row0: r0.max(0.0) as usize,
        row1: (r1 as usize).min(raster.rows - 1),
        col0: c0.max(0.0) as usize,
        col1: (c1 as usize).min(raster.cols - 1),
    }))
}

/// World bounding box of the border rays' terrain hits; `None` if a border
/// ray points at or above the horizon.
pub fn ground_footprint(
    frame: &FrameRecord,
    grid: &TerrainGrid,
    params: &OrthoParams,
) -> Result<Option<(Vector2<f64>, Vector2<f64>)>, OrthoError> {
    let origin = *frame.pose.translation();
    let ground = origin.z - altitude_above_ground(&frame.pose, grid)?;
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in border_pixels(&frame.intrinsics, params.footprint_samples) {
        let dir = frame.pose.transform_vector(&frame.intrinsics.ray(&p));
        if !(dir.z < -1e-9) {
            return Ok(None);
        }
        let hit = match intersect_ray(grid, &origin, &dir, params.footprint_iterations) {
            Ok(h) => h,
            // left the grid mid-iteration: fall back to the ground plane below the camera
            Err(_) => origin + dir * ((origin.z - ground) / -dir.z),
        };
        lo = lo.inf(&hit.xy());
        hi = hi.sup(&hit.xy());
    }
    Ok(Some((lo, hi)))
}

// ---------------------------------------------------------------------------
// rendering

/// Applies the configured preprocessing in place: illumination
/// normalization over the sequence, then per-frame anti-alias blur.
pub fn preprocess(
    frames: &[FrameRecord],
    grid: &TerrainGrid,
    gsd: f64,
    params: &OrthoParams,
) -> Result<Vec<FrameRecord>, OrthoError> {
    let mut out = if params.normalize_illumination {
        normalize_illumination(frames)?
    } else {
        frames.to_vec()
    };
    if params.blur {
        let sizes: Vec<f64> = out.iter().map(|f| f.ground_pixel_size(grid)).collect::<Result<_, _>>()?;
        out.par_iter_mut().zip(sizes).for_each(|(f, px)| {
            f.image = nyquist_blur(&f.image, gsd, px);
        });
    }
    Ok(out)
}

/// Median ground pixel size over the frames.
pub fn default_gsd(frames: &[FrameRecord], grid: &TerrainGrid) -> Result<f64, OrthoError> {
    if frames.is_empty() {
        return Err(OrthoError::NoFrames);
    }
    let mut px: Vec<f64> = frames.iter().map(|f| f.ground_pixel_size(grid)).collect::<Result<_, _>>()?;
    px.sort_by(f64::total_cmp);
    let n = px.len();
    Ok(if n % 2 == 1 { px[n / 2] } else { 0.5 * (px[n / 2 - 1] + px[n / 2]) })
}

/// Raster spanning the union of ground footprints, clipped to the terrain.
pub fn plan_raster(frames: &[FrameRecord], grid: &TerrainGrid, gsd: f64, params: &OrthoParams) -> Result<OrthoRaster, OrthoError> {
    if frames.is_empty() {
        return Err(OrthoError::NoFrames);
    }
    let (glo, ghi) = grid.extent();
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for f in frames {
        match ground_footprint(f, grid, params)? {
            Some((a, b)) => {
                lo = lo.inf(&a);
                hi = hi.sup(&b);
            }
            None => {
                lo = glo;
                hi = ghi;
            }
        }
    }
    let lo = lo.sup(&glo);
    let hi = hi.inf(&ghi);
    if !(hi.x > lo.x && hi.y > lo.y) {
        return Err(OrthoError::NoCoverage);
    }
    OrthoRaster::covering(lo, hi, gsd)
}

/// Preprocesses and renders `frames` into a fresh raster.
pub fn render(frames: &[FrameRecord], grid: &TerrainGrid, params: &OrthoParams) -> Result<OrthoRaster, OrthoError> {
    let gsd = match params.gsd {
        Some(g) if g > 0.0 => g,
        Some(g) => return Err(OrthoError::NonPositiveGsd(g)),
        None => default_gsd(frames, grid)?,
    };
    let prepared = preprocess(frames, grid, gsd, params)?;
    let mut raster = plan_raster(&prepared, grid, gsd, params)?;
    render_into(&mut raster, &prepared, grid, params)?;
    Ok(raster)
}

/// Folds already-preprocessed frames into `raster` in order.
pub fn render_into(
    raster: &mut OrthoRaster,
    frames: &[FrameRecord],
    grid: &TerrainGrid,
    params: &OrthoParams,
) -> Result<(), OrthoError> {
    if frames.is_empty() {
        return Err(OrthoError::NoFrames);
    }
    let cols = raster.cols;
    let (origin, gsd) = (raster.origin, raster.gsd);
    for (fi, frame) in frames.iter().enumerate() {
        let Some(range) = compute_footprint(frame, grid, raster, params)? else {
            continue;
        };
        let cam = *frame.pose.translation();
        let world_to_cam = frame.pose.inverse();
        raster.cells[range.row0 * cols..(range.row1 + 1) * cols]
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(dr, row)| {
                let r = range.row0 + dr;
                let y = origin.y - (r as f64 + 0.5) * gsd;
                for (c, cell) in row.iter_mut().enumerate().take(range.col1 + 1).skip(range.col0) {
                    let x = origin.x + (c as f64 + 0.5) * gsd;
                    let Ok(z) = query_height(grid, x, y) else { continue };
                    let p = Vector3::new(x, y, z);
                    let Ok(score) = compute_score(&p, &cam) else { continue };
                    if !(score > cell.score) {
                        continue;
                    }
                    let Ok(px) = project_to_pixel(&frame.intrinsics, &world_to_cam.transform_point(&p)) else {
                        continue;
                    };
                    let Some(rgb) = frame.image.sample_bilinear(px.x, px.y) else { continue };
                    let existing = cell.source.map(|_| (cell.rgb, cell.score));
                    let (rgb, s) = blend_pixel(existing, rgb, score, params.margin);
                    *cell = OrthoCell {
                        rgb,
                        score: s,
                        source: Some(fi as u32),
                    };
                }
            });
    }
    if raster.covered_count() == 0 {
        return Err(OrthoError::NoCoverage);
    }
    Ok(())
}

/// Mean squared color step across neighbouring covered cells written by
/// different frames. Visible seams raise it.
pub fn seam_energy(raster: &OrthoRaster) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut visit = |a: &OrthoCell, b: &OrthoCell| {
        if let (Some(sa), Some(sb)) = (a.source, b.source) {
            if sa != sb {
                sum += (0..3).map(|ch| ((a.rgb[ch] - b.rgb[ch]) as f64).powi(2)).sum::<f64>();
                n += 1;
            }
        }
    };
    for r in 0..raster.rows {
        for c in 0..raster.cols {
            let a = raster.cell(r, c);
            if c + 1 < raster.cols {
                visit(a, raster.cell(r, c + 1));
            }
            if r + 1 < raster.rows {
                visit(a, raster.cell(r + 1, c));
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

// ---------------------------------------------------------------------------
// output

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoSidecar {
    pub crs: String,
    pub gsd: f64,
    pub origin_top_left: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub score: ScoreStats,
    pub transparent_uncovered: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrthoFiles {
    pub png: PathBuf,
    pub world_file: PathBuf,
    pub sidecar: PathBuf,
}

/// Writes `<path>` (PNG), the `.pgw` world file and a `.json` sidecar.
/// Uncovered cells are black, or fully transparent when `transparent`.
pub fn write_orthoimage(raster: &OrthoRaster, path: &Path, transparent: bool) -> Result<OrthoFiles, OrthoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    if transparent {
        let img = RgbaImage::from_fn(raster.cols as u32, raster.rows as u32, |x, y| {
            let cell = raster.cell(y as usize, x as usize);
            let [r, g, b] = cell.rgb.map(to_u8);
            Rgba([r, g, b, if cell.source.is_some() { 255 } else { 0 }])
        });
        img.save_with_format(path, image::ImageFormat::Png)?;
    } else {
        raster.to_rgb().to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
    }
    let world_file = path.with_extension("pgw");
    let lines: Vec<String> = raster.world_file_lines().iter().map(|v| format!("{v:.10}")).collect();
    fs::write(&world_file, lines.join("\n") + "\n")?;
    let sidecar = path.with_extension("json");
    let meta = OrthoSidecar {
        crs: "local ENU, metres (scene frame; x east, y north)".into(),
        gsd: raster.gsd,
        origin_top_left: [raster.origin.x, raster.origin.y],
        width: raster.cols,
        height: raster.rows,
        score: raster.score_stats(),
        transparent_uncovered: transparent,
    };
    fs::write(&sidecar, serde_json::to_string_pretty(&meta)?)?;
    Ok(OrthoFiles {
        png: path.to_path_buf(),
        world_file,
        sidecar,
    })
}

/// Parses a six-line world file.
pub fn read_world_file(path: &Path) -> Result<[f64; 6], OrthoError> {
    let text = fs::read_to_string(path)?;
    let vals: Vec<f64> = text.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    if vals.len() != 6 {
        return Err(OrthoError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("world file {} has {} numeric lines, expected 6", path.display(), vals.len()),
        )));
    }
    Ok([vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]])
}
