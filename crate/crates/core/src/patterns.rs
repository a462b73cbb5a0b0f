//! Replicating subunits of data: block models for symbol sequences (block
//! bootstrap) and layered resolution models for sampled images.

use std::collections::BTreeMap;
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::distmodel::NoiseSpec;
use crate::error::{domain, Error, Result};
use crate::genctl::SeedSpec;

/// A nonempty sequence of single-character symbols (pixel colors).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    symbols: Vec<char>,
}

impl SymbolSequence {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        if symbols.is_empty() {
            return domain("symbol sequence must be nonempty");
        }
        if let Some(c) = symbols.iter().find(|c| c.is_whitespace() || c.is_control()) {
            return domain(format!("symbol {c:?} is not a printable label"));
        }
        Ok(SymbolSequence { symbols })
    }

    /// One character per symbol; surrounding whitespace is ignored.
    pub fn parse(line: &str) -> Result<Self> {
        SymbolSequence::new(line.trim().chars().collect())
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sorted distinct symbols.
    pub fn alphabet(&self) -> Vec<char> {
        let mut a = self.symbols.clone();
        a.sort_unstable();
        a.dedup();
        a
    }
}

impl fmt::Display for SymbolSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.symbols.iter().try_for_each(|c| write!(f, "{c}"))
    }
}

/// Empirical law of non-overlapping blocks of a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockModel {
    block_length: usize,
    counts: BTreeMap<String, u64>,
    blocks: u64,
}

impl BlockModel {
    pub fn block_length(&self) -> usize {
        self.block_length
    }

    /// Number of blocks the model was fitted on.
    pub fn block_count(&self) -> u64 {
        self.blocks
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    /// Block frequencies, each exactly `count / block_count`.
    pub fn frequencies(&self) -> BTreeMap<String, f64> {
        self.counts.iter().map(|(b, c)| (b.clone(), *c as f64 / self.blocks as f64)).collect()
    }

    pub fn frequency(&self, block: &str) -> f64 {
        self.counts.get(block).map_or(0.0, |c| *c as f64 / self.blocks as f64)
    }
}

/// Frequencies of the non-overlapping blocks of `seq`; a trailing partial
/// block is discarded.
pub fn fit_block_model(seq: &SymbolSequence, block_length: usize) -> Result<BlockModel> {
    if block_length == 0 || block_length > seq.len() {
        return domain(format!("block length must lie in 1..={}, got {block_length}", seq.len()));
    }
    let mut counts = BTreeMap::new();
    for chunk in seq.symbols.chunks_exact(block_length) {
        *counts.entry(chunk.iter().collect::<String>()).or_insert(0) += 1;
    }
    let blocks = (seq.len() / block_length) as u64;
    Ok(BlockModel { block_length, counts, blocks })
}

/// Strings together blocks drawn with replacement from `model` until the
/// sequence holds at least `min_length` symbols (and at least one block).
pub fn simulate_sequence(model: &BlockModel, min_length: usize, seed: SeedSpec) -> SymbolSequence {
    let blocks: Vec<&String> = model.counts.keys().collect();
    let weights = WeightedIndex::new(model.counts.values().copied()).expect("fitted counts are positive");
    let mut rng = seed.problem_rng(0);
    let n_blocks = min_length.div_ceil(model.block_length).max(1);
    let symbols = (0..n_blocks).flat_map(|_| blocks[weights.sample(&mut rng)].chars()).collect();
    SymbolSequence { symbols }
}

/// An RGB color.
pub type Color = [f64; 3];

fn add(a: Color, b: Color) -> Color {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Color, b: Color) -> Color {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// A sampled pixel: position in the unit square and color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub x: f64,
    pub y: f64,
    pub color: Color,
}

/// Index of the cell containing `(x, y)` on the `2^level × 2^level` grid,
/// row-major from the origin.
pub fn cell_index(x: f64, y: f64, level: usize) -> usize {
    let side = 1usize << level;
    let col = ((x * side as f64) as usize).min(side - 1);
    let row = ((y * side as f64) as usize).min(side - 1);
    row * side + col
}

/// Distribution of the increments of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerLaw {
    /// Resample the layer's fitted increments with replacement.
    Empirical,
    /// Each cell keeps its own fitted increment (not available for the
    /// within-cell layer, whose increments belong to individual pixels).
    PerCell,
    /// Every draw is this increment.
    Constant(Color),
    /// Independent per-channel draws `scale · (ε − E ε)`.
    Noise { spec: NoiseSpec, scale: f64 },
}

/// Resolution-R model: base color, cell-mean increments on successively
/// finer grids (2×2, then 4×4), and within-cell residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredImageModel {
    resolution: usize,
    /// `means[l][c]`: mean color of cell `c` on the level-`l` grid, for
    /// `l < resolution`; level 0 is the whole image.
    means: Vec<Vec<Color>>,
    /// Fitted within-cell residuals `y_i − μ_cell(i)` at the finest level.
    residuals: Vec<Color>,
    /// Laws for layers `0..=resolution`.
    laws: Vec<LayerLaw>,
}

impl LayeredImageModel {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn base(&self) -> Color {
        self.means[0][0]
    }

    /// Cell means on the level-`level` grid (`level < resolution`).
    pub fn cell_means(&self, level: usize) -> &[Color] {
        &self.means[level]
    }

    /// Increments `μ⁽ˡ⁾ − μ⁽ˡ⁻¹⁾` of the level-`level` cells (`1 ≤ level < R`).
    pub fn increments(&self, level: usize) -> Vec<Color> {
        let side = 1usize << level;
        (0..side * side)
            .map(|c| {
                let (row, col) = (c / side, c % side);
                let parent = (row / 2) * (side / 2) + col / 2;
                sub(self.means[level][c], self.means[level - 1][parent])
            })
            .collect()
    }

    pub fn residuals(&self) -> &[Color] {
        &self.residuals
    }

    pub fn laws(&self) -> &[LayerLaw] {
        &self.laws
    }

    /// Number of replications layer `layer` offers for estimating its law.
    pub fn replications(&self, layer: usize) -> usize {
        if layer == self.resolution {
            self.residuals.len()
        } else {
            1 << (2 * layer)
        }
    }

    /// Replaces the law of layer `layer`.
    pub fn with_law(mut self, layer: usize, law: LayerLaw) -> Result<Self> {
        if layer > self.resolution {
            return domain(format!("layer {layer} exceeds resolution {}", self.resolution));
        }
        if layer == self.resolution && law == LayerLaw::PerCell {
            return domain("the within-cell layer has no per-cell increments");
        }
        if let LayerLaw::Noise { spec, scale } = &law {
            if spec.analytic_mean().is_none() || !(scale.is_finite() && *scale >= 0.0) {
                return domain(format!("layer noise needs a real-valued law and a finite scale, got {spec} x {scale}"));
            }
        }
        self.laws[layer] = law;
        Ok(self)
    }

    /// The R + 1 telescoping terms of a training sample's color: base,
    /// one increment per finer grid, and the within-cell residual.
    pub fn decompose(&self, s: &PixelSample) -> Vec<Color> {
        let mut terms = vec![self.base()];
        for l in 1..self.resolution {
            let c = cell_index(s.x, s.y, l);
            let p = cell_index(s.x, s.y, l - 1);
            terms.push(sub(self.means[l][c], self.means[l - 1][p]));
        }
        let finest = self.resolution - 1;
        terms.push(sub(s.color, self.means[finest][cell_index(s.x, s.y, finest)]));
        terms
    }
}

/// Fits a resolution-`resolution` model (1 to 3) by per-cell sample means.
/// Every layer law defaults to empirical resampling.
pub fn fit_layers(samples: &[PixelSample], resolution: usize) -> Result<LayeredImageModel> {
    if !(1..=3).contains(&resolution) {
        return domain(format!("resolution must lie in 1..=3, got {resolution}"));
    }
    if samples.is_empty() {
        return Err(Error::InsufficientResolution { cell: "level 0 (the whole image)".into() });
    }
    if let Some(s) = samples.iter().find(|s| !(0.0..=1.0).contains(&s.x) || !(0.0..=1.0).contains(&s.y)) {
        return domain(format!("position ({}, {}) lies outside the unit square", s.x, s.y));
    }
    if samples.iter().any(|s| s.color.iter().any(|v| !v.is_finite())) {
        return domain("colors must be finite");
    }
    let mut means = Vec::with_capacity(resolution);
    for level in 0..resolution {
        let side = 1usize << level;
        let mut sums = vec![([0.0; 3], 0usize); side * side];
        for s in samples {
            let e = &mut sums[cell_index(s.x, s.y, level)];
            e.0 = add(e.0, s.color);
            e.1 += 1;
        }
        let mut level_means = Vec::with_capacity(sums.len());
        for (c, (sum, count)) in sums.iter().enumerate() {
            if *count == 0 {
                return Err(Error::InsufficientResolution {
                    cell: format!("level {level} (column {}, row {})", c % side, c / side),
                });
            }
            let k = *count as f64;
            level_means.push([sum[0] / k, sum[1] / k, sum[2] / k]);
        }
        means.push(level_means);
    }
    let finest = resolution - 1;
    let residuals = samples.iter().map(|s| sub(s.color, means[finest][cell_index(s.x, s.y, finest)])).collect();
    Ok(LayeredImageModel { resolution, means, residuals, laws: vec![LayerLaw::Empirical; resolution + 1] })
}

/// Draws a control image of `n_pixels` samples at fresh uniform positions.
/// Each cell draws one increment per layer, shared by all its pixels; every
/// pixel draws its own within-cell increment.
pub fn simulate_image(model: &LayeredImageModel, n_pixels: usize, seed: SeedSpec) -> Vec<PixelSample> {
    let mut rng = seed.problem_rng(0);
    let r = model.resolution;
    // per layer, the increment of each of its cells
    let mut layer_draws: Vec<Vec<Color>> = Vec::with_capacity(r);
    for layer in 0..r {
        let fitted = if layer == 0 { vec![model.base()] } else { model.increments(layer) };
        let draws = (0..fitted.len()).map(|c| draw_increment(&model.laws[layer], &fitted, Some(c), &mut rng)).collect();
        layer_draws.push(draws);
    }
    (0..n_pixels)
        .map(|_| {
            let x: f64 = rng.random();
            let y: f64 = rng.random();
            let mut color = [0.0; 3];
            for (layer, draws) in layer_draws.iter().enumerate() {
                color = add(color, draws[cell_index(x, y, layer)]);
            }
            color = add(color, draw_increment(&model.laws[r], &model.residuals, None, &mut rng));
            PixelSample { x, y, color }
        })
        .collect()
}

fn draw_increment<R: Rng + ?Sized>(law: &LayerLaw, fitted: &[Color], cell: Option<usize>, rng: &mut R) -> Color {
    match law {
        LayerLaw::Empirical => fitted[rng.random_range(0..fitted.len())],
        LayerLaw::PerCell => fitted[cell.expect("per-cell laws apply to cell layers")],
        LayerLaw::Constant(c) => *c,
        LayerLaw::Noise { spec, scale } => {
            let centre = spec.analytic_mean().unwrap_or(0.0);
            [0; 3].map(|_| scale * (spec.sample_scalar(rng) - centre))
        }
    }
}

/// Parses image samples, one `x,y,r,g,b` row per line; blank lines and lines
/// starting with `#` are skipped.
pub fn read_pixel_samples(text: &str) -> Result<Vec<PixelSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.len() == 5 => out.push(PixelSample { x: v[0], y: v[1], color: [v[2], v[3], v[4]] }),
            _ => {
                return Err(Error::Config { line: i + 1, msg: format!("expected x,y,r,g,b, got {line:?}") });
            }
        }
    }
    Ok(out)
}

/// Writes samples as `x,y,r,g,b` rows.
pub fn write_pixel_samples(samples: &[PixelSample]) -> String {
    samples
        .iter()
        .map(|s| format!("{},{},{},{},{}\n", s.x, s.y, s.color[0], s.color[1], s.color[2]))
        .collect()
}
