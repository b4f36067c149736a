//! Heatmaps of inferred patterns and top-patch coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::UnitPosition;
use crate::graph::GraphLayer;
use crate::inference::{top_k_energy, NodeAssignment};
use crate::metrics::Observation;
use crate::mixture::log_gauss2d;

/// Unscaled heatmap density sampled at pixel centers, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl HeatmapField {
    /// Riemann sum of the density over the unit square.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() / (self.width * self.height) as f64
    }

    /// Linear rescale to `0..=255`; an all-zero field stays zero.
    pub fn to_gray(&self) -> GrayImage {
        let max = self.values.iter().copied().fold(0.0f64, f64::max);
        let pixels = self
            .values
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary portable graymap (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// Sum of `S * N(p_V, sigma_V^2)` over the top `fraction` of the layer's assigned patterns.
pub fn heatmap_field(
    layer: &GraphLayer,
    assignments: &[NodeAssignment],
    fraction: f64,
    width: usize,
    height: usize,
) -> Result<HeatmapField> {
    if width == 0 || height == 0 {
        return Err(Error::domain("raster dimensions must be positive"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::domain(format!("fraction {fraction} outside [0,1]")));
    }
    let mut picked: Vec<&NodeAssignment> = assignments.iter().filter(|a| a.position.is_some()).collect();
    picked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.node.cmp(&b.node)));
    let keep = (fraction * picked.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    picked.truncate(keep);

    let mut values = vec![0.0; width * height];
    for a in picked {
        let node = layer
            .node(a.node)
            .ok_or_else(|| Error::Mismatch(format!("assignment for unknown node {}", a.node)))?;
        let center = a.position.expect("filtered");
        for row in 0..height {
            let y = (row as f64 + 0.5) / height as f64;
            for col in 0..width {
                let x = (col as f64 + 0.5) / width as f64;
                values[row * width + col] += a.score * log_gauss2d(UnitPosition::new(x, y), center, node.sigma2).exp();
            }
        }
    }
    Ok(HeatmapField { width, height, values })
}

pub fn render_heatmap(
    layer: &GraphLayer,
    assignments: &[NodeAssignment],
    fraction: f64,
    width: usize,
    height: usize,
) -> Result<GrayImage> {
    Ok(heatmap_field(layer, assignments, fraction, width, height)?.to_gray())
}

/// Pixel box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub image_id: String,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

fn clamp_span(center: f64, size: u32, limit: u32) -> (u32, u32) {
    let start = (center - size as f64 / 2.0).round();
    let max_start = limit.saturating_sub(size) as f64;
    let start = start.clamp(0.0, max_start) as u32;
    (start, (start + size).min(limit))
}

/// Square patches centered on the node's position in the images that carry `fraction`
/// of its inference energy.
pub fn top_patches(observations: &[Observation], fraction: f64, patch_px: u32) -> Result<Vec<Patch>> {
    let scores: Vec<(String, f64)> = observations
        .iter()
        .filter(|o| o.position.is_some())
        .map(|o| (o.image_id.clone(), o.score))
        .collect();
    let top = top_k_energy(&scores, fraction)?;
    top.images
        .iter()
        .filter(|(_, s)| *s > 0.0)
        .map(|(id, _)| {
            let o = observations.iter().find(|o| &o.image_id == id).expect("from observations");
            let p = o.position.expect("filtered");
            let (x0, x1) = clamp_span(p.x * o.image_width_px as f64, patch_px, o.image_width_px);
            let (y0, y1) = clamp_span(p.y * o.image_height_px as f64, patch_px, o.image_height_px);
            Ok(Patch {
                image_id: id.clone(),
                x0,
                y0,
                x1,
                y1,
            })
        })
        .collect()
}
