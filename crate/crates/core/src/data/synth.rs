//! Procedural captcha rendering: dark glyphs with per-character jitter and
//! rotation on a light canvas, a sinusoidal warp, a strike-through line,
//! and salt-and-pepper noise. Used to produce labeled corpora of any size
//! without shipping image assets.

use super::{mix_seed, DataError, Sample};
use crate::ctc::Alphabet;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 5×7 bitmaps for every character in the standard alphabet, upscaled at
/// render time. '#' is ink.
const GLYPHS: &[(char, [&str; 7])] = &[
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ('3', [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ('6', [".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", "..#..", ".#...", ".#..."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ('b', ["#....", "#....", "####.", "#...#", "#...#", "#...#", "####."]),
    ('c', [".....", ".....", ".###.", "#....", "#....", "#....", ".###."]),
    ('d', ["....#", "....#", ".####", "#...#", "#...#", "#...#", ".####"]),
    ('e', [".....", ".....", ".###.", "#...#", "#####", "#....", ".###."]),
    ('f', ["..##.", ".#...", "####.", ".#...", ".#...", ".#...", ".#..."]),
    ('g', [".....", ".####", "#...#", "#...#", ".####", "....#", ".###."]),
    ('m', [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#.#.#", "#...#"]),
    ('n', [".....", ".....", "####.", "#...#", "#...#", "#...#", "#...#"]),
    ('p', [".....", "####.", "#...#", "#...#", "####.", "#....", "#...."]),
    ('w', [".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."]),
    ('x', [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"]),
    ('y', [".....", ".....", "#...#", "#...#", ".####", "....#", ".###."]),
];

const GLYPH_COLS: usize = 5;
const GLYPH_ROWS: usize = 7;
const SCALE: usize = 4;
const CELL_W: usize = GLYPH_COLS * SCALE;
const CELL_H: usize = GLYPH_ROWS * SCALE;
const ADVANCE: usize = CELL_W + 8;
const MARGIN: usize = 8;
const INK: f64 = 0.08;

fn glyph_bitmap(ch: char) -> Option<&'static [&'static str; 7]> {
    GLYPHS.iter().find(|(c, _)| *c == ch).map(|(_, rows)| rows)
}

/// Rendering knobs. Ranges are sampled per image; `clean()` disables every
/// distortion for layout tests and debugging.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthStyle {
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub jitter_px: f64,
    pub rotation_degrees: f64,
    pub warp_amplitude: (f64, f64),
    pub warp_wavelength: (f64, f64),
    pub noise_fraction: f64,
    pub strike_line: bool,
}

impl Default for SynthStyle {
    fn default() -> Self {
        SynthStyle {
            canvas_height: 50,
            canvas_width: 200,
            jitter_px: 2.0,
            rotation_degrees: 10.0,
            warp_amplitude: (1.0, 3.0),
            warp_wavelength: (60.0, 120.0),
            noise_fraction: 0.02,
            strike_line: true,
        }
    }
}

impl SynthStyle {
    pub fn clean() -> Self {
        SynthStyle {
            jitter_px: 0.0,
            rotation_degrees: 0.0,
            warp_amplitude: (0.0, 0.0),
            warp_wavelength: (60.0, 120.0),
            noise_fraction: 0.0,
            strike_line: false,
            ..SynthStyle::default()
        }
    }

    /// How many glyph cells fit across the canvas.
    pub fn capacity(&self) -> usize {
        let usable = self.canvas_width.saturating_sub(2 * MARGIN);
        (usable + ADVANCE - CELL_W) / ADVANCE
    }
}

/// Where a glyph landed on the canvas, before the global warp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl GlyphBox {
    pub fn center_x(&self) -> f64 {
        (self.x0 + self.x1) / 2.0
    }
}

pub struct SynthOutput {
    pub image: Tensor,
    pub glyph_boxes: Vec<GlyphBox>,
}

/// Render `text` with the default style. The image is [1×50×200] with
/// values in [0, 1]; the same (text, seed) pair renders identically.
pub fn synthesize_captcha(
    text: &str,
    style_seed: u64,
    alphabet: &Alphabet,
) -> Result<Tensor, DataError> {
    synthesize_styled(text, style_seed, alphabet, &SynthStyle::default()).map(|o| o.image)
}

pub fn synthesize_styled(
    text: &str,
    style_seed: u64,
    alphabet: &Alphabet,
    style: &SynthStyle,
) -> Result<SynthOutput, DataError> {
    alphabet.encode(text)?;
    let chars: Vec<char> = text.chars().collect();
    if chars.len() > style.capacity() {
        return Err(DataError::DoesNotFit(format!(
            "{} characters exceed the canvas capacity of {}",
            chars.len(),
            style.capacity()
        )));
    }
    for &ch in &chars {
        if glyph_bitmap(ch).is_none() {
            return Err(DataError::InvalidImage(format!("no glyph for {ch:?}")));
        }
    }

    let (h, w) = (style.canvas_height, style.canvas_width);
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let mut canvas = vec![1.0f64; h * w];
    let mut boxes = Vec::with_capacity(chars.len());

    let base_top = (h.saturating_sub(CELL_H)) as f64 / 2.0;
    let mut pen = MARGIN as f64;
    for &ch in &chars {
        let jx = rng.gen_range(-style.jitter_px..=style.jitter_px);
        let jy = rng.gen_range(-style.jitter_px..=style.jitter_px);
        let theta = rng
            .gen_range(-style.rotation_degrees..=style.rotation_degrees)
            .to_radians();
        let x0 = pen + jx;
        let y0 = base_top + jy;
        draw_glyph(&mut canvas, h, w, glyph_bitmap(ch).unwrap(), x0, y0, theta);
        boxes.push(GlyphBox {
            x0,
            y0,
            x1: x0 + CELL_W as f64,
            y1: y0 + CELL_H as f64,
        });
        pen += ADVANCE as f64;
    }

    let amplitude = rng.gen_range(style.warp_amplitude.0..=style.warp_amplitude.1);
    let wavelength = rng.gen_range(style.warp_wavelength.0..=style.warp_wavelength.1);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    if amplitude > 0.0 {
        canvas = sinusoidal_warp(&canvas, h, w, amplitude, wavelength, phase);
    }

    if style.strike_line {
        let ya = rng.gen_range(h as f64 * 0.3..h as f64 * 0.7);
        let yb = rng.gen_range(h as f64 * 0.3..h as f64 * 0.7);
        draw_line(&mut canvas, h, w, ya, yb);
    }

    if style.noise_fraction > 0.0 {
        let rate = rng.gen_range(0.0..=style.noise_fraction);
        let flips = (rate * (h * w) as f64).floor() as usize;
        for _ in 0..flips {
            let y = rng.gen_range(0..h);
            let x = rng.gen_range(0..w);
            canvas[y * w + x] = if rng.gen_bool(0.5) { 0.0 } else { 1.0 };
        }
    }

    Ok(SynthOutput {
        image: Tensor::from_vec(vec![1, h, w], canvas).expect("shape matches data"),
        glyph_boxes: boxes,
    })
}

/// Stamp one rotated glyph. Canvas pixels inside the (inflated) cell are
/// inverse-mapped into glyph space and inked with a min-composite, so
/// overlapping strokes stay dark.
fn draw_glyph(
    canvas: &mut [f64],
    h: usize,
    w: usize,
    bitmap: &[&str; 7],
    x0: f64,
    y0: f64,
    theta: f64,
) {
    let cx = x0 + CELL_W as f64 / 2.0;
    let cy = y0 + CELL_H as f64 / 2.0;
    let (sin, cos) = theta.sin_cos();
    let reach = (CELL_W.max(CELL_H) as f64) * 0.75;
    let y_lo = ((cy - reach).floor().max(0.0)) as usize;
    let y_hi = ((cy + reach).ceil().min(h as f64 - 1.0)) as usize;
    let x_lo = ((cx - reach).floor().max(0.0)) as usize;
    let x_hi = ((cx + reach).ceil().min(w as f64 - 1.0)) as usize;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let gx = cos * dx + sin * dy + CELL_W as f64 / 2.0;
            let gy = -sin * dx + cos * dy + CELL_H as f64 / 2.0;
            if gx < 0.0 || gy < 0.0 || gx >= CELL_W as f64 || gy >= CELL_H as f64 {
                continue;
            }
            let col = gx as usize / SCALE;
            let row = gy as usize / SCALE;
            if bitmap[row].as_bytes()[col] == b'#' {
                let slot = &mut canvas[y * w + x];
                *slot = slot.min(INK);
            }
        }
    }
}

/// Vertical sinusoidal displacement with bilinear resampling; rows pushed
/// past the border read as background.
fn sinusoidal_warp(
    src: &[f64],
    h: usize,
    w: usize,
    amplitude: f64,
    wavelength: f64,
    phase: f64,
) -> Vec<f64> {
    let mut out = vec![1.0; h * w];
    for x in 0..w {
        let shift = amplitude * (std::f64::consts::TAU * x as f64 / wavelength + phase).sin();
        for y in 0..h {
            let sy = y as f64 - shift;
            let y0 = sy.floor();
            let fy = sy - y0;
            let get = |yi: f64| -> f64 {
                if yi < 0.0 || yi >= h as f64 {
                    1.0
                } else {
                    src[yi as usize * w + x]
                }
            };
            out[y * w + x] = get(y0) * (1.0 - fy) + get(y0 + 1.0) * fy;
        }
    }
    out
}

/// Two-pixel-thick strike from the left edge to the right edge.
fn draw_line(canvas: &mut [f64], h: usize, w: usize, ya: f64, yb: f64) {
    for x in 0..w {
        let y = ya + (yb - ya) * x as f64 / (w - 1) as f64;
        let yi = y.floor() as usize;
        for row in [yi, (yi + 1).min(h - 1)] {
            let slot = &mut canvas[row * w + x];
            *slot = slot.min(0.15);
        }
    }
}

/// Uniformly random text over the alphabet.
pub fn random_text(alphabet: &Alphabet, len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| alphabet.chars()[rng.gen_range(0..alphabet.size())])
        .collect()
}

/// Generate `count` labeled captchas with text lengths drawn uniformly
/// from `len_range` (inclusive). Fully determined by `seed`; sample i is
/// independent of every other index.
pub fn synth_dataset(
    alphabet: &Alphabet,
    count: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Vec<Sample>, DataError> {
    if len_range.0 > len_range.1 {
        return Err(DataError::InvalidRequest(format!(
            "length range {}..={} is empty",
            len_range.0, len_range.1
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let sample_seed = mix_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let len = rng.gen_range(len_range.0..=len_range.1);
        let text = random_text(alphabet, len, rng.gen());
        let image = synthesize_captcha(&text, rng.gen(), alphabet)?;
        let label = alphabet.encode(&text)?;
        samples.push(Sample {
            image,
            label,
            source_id: format!("synth-{i:05}-{text}"),
        });
    }
    Ok(samples)
}
