//! Seeded synthetic text lines, dataset files and image perturbations.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, DanError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHABET: &str = "0123456789ABCDEF";

/// Name of the label index inside a dataset directory.
pub const INDEX_FILE: &str = "labels.tsv";

const GLYPH_ROWS: usize = 7;

#[rustfmt::skip]
const FONT_5X7: &[(char, [&str; GLYPH_ROWS])] = &[
    ('0', [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."]),
    ('1', [".#...", "##...", ".#...", ".#...", ".#...", ".#...", "###.."]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ('3', ["####.", "....#", "....#", ".###.", "....#", "....#", "####."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ('6', ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
    ('A', ["..#..", ".#.#.", "#...#", "#...#", "#####", "#...#", "#...#"]),
    ('B', ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."]),
    ('C', [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."]),
    ('D', ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."]),
    ('E', ["#####", "#....", "#....", "####.", "#....", "#....", "#####"]),
    ('F', ["#####", "#....", "#....", "####.", "#....", "#....", "#...."]),
    (' ', ["...", "...", "...", "...", "...", "...", "..."]),
];

/// Fixed bitmap font. Blank columns at glyph edges are trimmed, so narrow
/// symbols such as `1` take less room.
#[derive(Clone, Debug)]
pub struct GlyphFont {
    glyphs: HashMap<char, Glyph>,
    pub spacing: usize,
}

#[derive(Clone, Debug)]
struct Glyph {
    width: usize,
    /// Row-major `GLYPH_ROWS × width` ink mask.
    ink: Vec<bool>,
}

impl Default for GlyphFont {
    fn default() -> Self {
        let glyphs = FONT_5X7
            .iter()
            .map(|(c, rows)| (*c, Glyph::from_rows(rows)))
            .collect();
        Self { glyphs, spacing: 2 }
    }
}

impl Glyph {
    fn from_rows(rows: &[&str; GLYPH_ROWS]) -> Self {
        let cols = rows[0].len();
        let used = |x: usize| rows.iter().any(|r| r.as_bytes()[x] == b'#');
        let (lo, hi) = match ((0..cols).find(|&x| used(x)), (0..cols).rev().find(|&x| used(x))) {
            (Some(lo), Some(hi)) => (lo, hi + 1),
            _ => (0, cols),
        };
        let ink = rows
            .iter()
            .flat_map(|r| r.as_bytes()[lo..hi].iter().map(|&b| b == b'#'))
            .collect();
        Self { width: hi - lo, ink }
    }
}

impl GlyphFont {
    pub fn has(&self, c: char) -> bool {
        self.glyphs.contains_key(&c)
    }

    pub fn glyph_width(&self, c: char) -> Option<usize> {
        self.glyphs.get(&c).map(|g| g.width)
    }

    pub fn glyph_height(&self) -> usize {
        GLYPH_ROWS
    }

    /// Error naming the first symbol of `alphabet` without a glyph.
    pub fn check_alphabet(&self, alphabet: &str) -> Result<()> {
        match alphabet.chars().find(|&c| !self.has(c)) {
            Some(c) => Err(DanError::Vocab(format!("no glyph for symbol {c:?}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOpts {
    pub height: usize,
    pub noise_sigma: f64,
    /// Horizontal shear in pixels per row, measured from the glyph center row.
    pub slant: f64,
    /// Extra spacing drawn uniformly from `0..=spacing_jitter` per glyph.
    pub spacing_jitter: usize,
    /// Maximum random vertical offset of the text band around the center.
    pub vertical_jitter: usize,
    pub seed: u64,
}

impl Default for RenderOpts {
    fn default() -> Self {
        Self {
            height: 16,
            noise_sigma: 0.05,
            slant: 0.0,
            spacing_jitter: 1,
            vertical_jitter: 2,
            seed: 0,
        }
    }
}

impl RenderOpts {
    /// Noise-free layout with no jitter.
    pub fn clean(height: usize) -> Self {
        Self {
            height,
            noise_sigma: 0.0,
            slant: 0.0,
            spacing_jitter: 0,
            vertical_jitter: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]` with values in `[0, 1]`; ink is bright on a zero background.
    pub image: Tensor,
    pub label: String,
    pub id: u64,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Draw `label` left to right. Each glyph occupies its width plus the spacing,
/// with half the spacing on either side.
pub fn render_text(label: &str, font: &GlyphFont, opts: &RenderOpts) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    render_with_rng(label, font, opts, &mut rng)
}

fn render_with_rng(label: &str, font: &GlyphFont, opts: &RenderOpts, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if label.is_empty() {
        return Err(DanError::Data("cannot render an empty label".into()));
    }
    if opts.height < GLYPH_ROWS {
        return Err(shape_err!("height {} is below glyph height {GLYPH_ROWS}", opts.height));
    }
    let glyphs = label
        .chars()
        .map(|c| {
            font.glyphs
                .get(&c)
                .ok_or_else(|| DanError::Vocab(format!("no glyph for symbol {c:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(glyphs.len());
    for g in &glyphs {
        let extra = if opts.spacing_jitter > 0 {
            rng.gen_range(0..=opts.spacing_jitter)
        } else {
            0
        };
        cells.push(g.width + font.spacing + extra);
    }
    let width: usize = cells.iter().sum();
    let slack = opts.height - GLYPH_ROWS;
    let center = slack / 2;
    let jitter = opts.vertical_jitter.min(center).min(slack - center);
    let top = if jitter > 0 {
        rng.gen_range(center - jitter..=center + jitter)
    } else {
        center
    };
    let ink_level = if opts.noise_sigma > 0.0 { rng.gen_range(0.75..=1.0) } else { 1.0 };
    let mut data = vec![0.0; opts.height * width];
    let mut x0 = 0;
    for (g, cell) in glyphs.iter().zip(&cells) {
        let left = x0 + font.spacing / 2;
        for r in 0..GLYPH_ROWS {
            let shear = (opts.slant * (GLYPH_ROWS as f64 / 2.0 - r as f64)).round() as isize;
            for c in 0..g.width {
                if !g.ink[r * g.width + c] {
                    continue;
                }
                let x = left as isize + c as isize + shear;
                if (0..width as isize).contains(&x) {
                    data[(top + r) * width + x as usize] = ink_level;
                }
            }
        }
        x0 += cell;
    }
    if opts.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, opts.noise_sigma).map_err(|e| DanError::Config(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    data.iter_mut().for_each(|v| *v = quantize(*v));
    Tensor::new(&[1, opts.height, width], data)
}

/// Random generator for sample `id` of a dataset drawn with `seed`.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `n` samples with label lengths uniform over `lengths` (inclusive) and
/// symbols uniform over `alphabet`. Sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(
    n: usize,
    lengths: (usize, usize),
    alphabet: &str,
    font: &GlyphFont,
    opts: &RenderOpts,
    seed: u64,
) -> Result<Vec<Sample>> {
    let (lo, hi) = lengths;
    if lo == 0 || lo > hi {
        return Err(DanError::Config(format!("invalid length range {lo}..={hi}")));
    }
    let symbols: Vec<char> = alphabet.chars().filter(|&c| c != ' ').collect();
    if symbols.is_empty() {
        return Err(DanError::Config("alphabet has no printable symbols".into()));
    }
    font.check_alphabet(alphabet)?;
    (0..n as u64)
        .map(|id| {
            let mut rng = sample_rng(seed, id);
            let len = rng.gen_range(lo..=hi);
            let label: String = (0..len).map(|_| symbols[rng.gen_range(0..symbols.len())]).collect();
            let image = render_with_rng(&label, font, opts, &mut rng)?;
            Ok(Sample { image, label, id })
        })
        .collect()
}

/// Write a single-channel `[1, H, W]` or `[H, W]` image as binary PGM.
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = image_hw(img)?;
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf)?;
    Ok(())
}

/// Read a binary 8-bit PGM as a `[1, H, W]` tensor scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |why: &str| DanError::Data(format!("{}: {why}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Tensor::new(&[1, h, w], pixels.iter().map(|&p| p as f64 / max as f64).collect())
}

fn image_hw(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [1, h, w] | [h, w] => Ok((*h, *w)),
        s => Err(shape_err!("expected a single-channel image, got {s:?}")),
    }
}

pub fn image_file_name(id: u64) -> String {
    format!("{id:06}.pgm")
}

/// Write images plus an `id<TAB>label` index into `dir`.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = fs::File::create(dir.join(INDEX_FILE))?;
    for s in samples {
        if s.label.contains(['\t', '\n']) {
            return Err(DanError::Data(format!("label of sample {} contains a tab or newline", s.id)));
        }
        write_pgm(&dir.join(image_file_name(s.id)), &s.image)?;
        writeln!(index, "{}\t{}", s.id, s.label)?;
    }
    index.flush()?;
    Ok(())
}

/// Load a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let index_path = dir.join(INDEX_FILE);
    let file = fs::File::open(&index_path)
        .map_err(|e| DanError::Data(format!("{}: {e}", index_path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| DanError::Data(format!("{}:{}: expected id<TAB>label", index_path.display(), n + 1)))?;
        let id: u64 = id
            .parse()
            .map_err(|_| DanError::Data(format!("{}:{}: bad id {id:?}", index_path.display(), n + 1)))?;
        let image = read_pgm(&dir.join(image_file_name(id)))?;
        out.push(Sample {
            image,
            label: label.to_string(),
            id,
        });
    }
    Ok(out)
}

fn clamped(data: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    data[y * w + x]
}

/// Bilinear sample with replicated borders.
fn sample_bilinear(data: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
    let (y, x) = (snap(y), snap(x));
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let p = |dy, dx| clamped(data, h, w, y0 + dy, x0 + dx);
    let mut v = p(0, 0) * (1.0 - fy) * (1.0 - fx);
    if fx > 0.0 {
        v += p(0, 1) * (1.0 - fy) * fx;
    }
    if fy > 0.0 {
        v += p(1, 0) * fy * (1.0 - fx);
        if fx > 0.0 {
            v += p(1, 1) * fy * fx;
        }
    }
    v
}

/// Grow the image by `round(frac_h·H)` rows above and below and
/// `round(frac_w·W)` columns left and right, repeating border pixels.
pub fn perturb_pad(img: &Tensor, frac_h: f64, frac_w: f64) -> Result<Tensor> {
    let (h, w) = image_hw(img)?;
    if frac_h < 0.0 || frac_w < 0.0 {
        return Err(DanError::Config("pad fractions must be non-negative".into()));
    }
    let ph = (frac_h * h as f64).round() as usize;
    let pw = (frac_w * w as f64).round() as usize;
    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
    let src = img.data();
    let data = (0..oh * ow)
        .map(|i| {
            let (y, x) = ((i / ow) as isize - ph as isize, (i % ow) as isize - pw as isize);
            clamped(src, h, w, y, x)
        })
        .collect();
    Tensor::new(&[1, oh, ow], data)
}

/// Move each frame corner outward by an independent random fraction of the
/// image size (up to `max_frac`), warp the frame onto that quadrilateral with
/// replicated borders, and return a crop of the original size.
pub fn perturb_random_stretch(img: &Tensor, max_frac: f64, seed: u64) -> Result<Tensor> {
    let (h, w) = image_hw(img)?;
    if !(0.0..1.0).contains(&max_frac) {
        return Err(DanError::Config(format!("stretch fraction {max_frac} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |extent: usize| {
        if max_frac > 0.0 {
            rng.gen_range(0.0..=max_frac) * extent as f64
        } else {
            0.0
        }
    };
    let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
    // corners as (x, y): top-left, top-right, bottom-left, bottom-right
    let tl = (-draw(w), -draw(h));
    let tr = (xm + draw(w), -draw(h));
    let bl = (-draw(w), ym + draw(h));
    let br = (xm + draw(w), ym + draw(h));
    let src = img.data();
    let mut data = Vec::with_capacity(h * w);
    for v in 0..h {
        let t = if h > 1 { v as f64 / ym } else { 0.0 };
        for u in 0..w {
            let s = if w > 1 { u as f64 / xm } else { 0.0 };
            let x = (1.0 - t) * ((1.0 - s) * tl.0 + s * tr.0) + t * ((1.0 - s) * bl.0 + s * br.0);
            let y = (1.0 - s) * ((1.0 - t) * tl.1 + t * bl.1) + s * ((1.0 - t) * tr.1 + t * br.1);
            data.push(sample_bilinear(src, h, w, y, x));
        }
    }
    Tensor::new(&[1, h, w], data)
}

/// Bilinear resize of a single-channel image to `out_h × out_w`.
pub fn resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = image_hw(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("cannot resize to {out_h}x{out_w}"));
    }
    if (h, w) == (out_h, out_w) {
        return img.clone().reshape(&[1, h, w]);
    }
    let src = img.data();
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let mut data = Vec::with_capacity(out_h * out_w);
    for v in 0..out_h {
        let y = ((v as f64 + 0.5) * scale_y - 0.5).max(0.0);
        for u in 0..out_w {
            let x = ((u as f64 + 0.5) * scale_x - 0.5).max(0.0);
            data.push(sample_bilinear(src, h, w, y, x));
        }
    }
    Tensor::new(&[1, out_h, out_w], data)
}

/// Rescale to height `target_h` keeping the aspect ratio.
pub fn resize_to_height(img: &Tensor, target_h: usize) -> Result<Tensor> {
    let (h, w) = image_hw(img)?;
    let out_w = ((w as f64 * target_h as f64 / h as f64).round() as usize).max(1);
    resize(img, target_h, out_w)
}

/// Remove `top` rows and `bottom` rows.
pub fn crop_rows(img: &Tensor, top: usize, bottom: usize) -> Result<Tensor> {
    let (h, w) = image_hw(img)?;
    if top + bottom >= h {
        return Err(shape_err!("cannot crop {top}+{bottom} rows from height {h}"));
    }
    let data = img.data()[top * w..(h - bottom) * w].to_vec();
    Tensor::new(&[1, h - top - bottom, w], data)
}
