//! Turns captured attention into one spatial map per prompted subject:
//! slice the image-query/text-key block, average heads and blocks, drop
//! special and filler columns, re-softmax, average multi-token subjects,
//! then a 3×3 Gaussian blur. Every stage has an explicit adjoint so losses on
//! the subject maps can be pulled back to the attention stack.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{AttentionStack, Provenance, Wiring};
use crate::scenes::{is_special, PromptSpec};
use crate::tensor::{softmax_backward_in_place, softmax_in_place, Real};

/// Image-query/text-key probabilities, one `pixels × n_tokens` matrix per
/// (block, head), blocks outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMaps<T> {
    pub height: usize,
    pub width: usize,
    pub n_tokens: usize,
    pub maps: Vec<Vec<T>>,
}

impl<T> RawMaps<T> {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Re-normalized per-pixel distribution over the kept prompt tokens.
/// `data` is `pixels × positions.len()`, row-major by pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMaps<T> {
    pub height: usize,
    pub width: usize,
    /// Prompt position of each kept column.
    pub positions: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> TokenMaps<T> {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        let n = self.positions.len();
        self.data.iter().skip(j).step_by(n).copied().collect()
    }
}

/// One `height × width` map per subject, in prompt entity order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMaps<T> {
    pub height: usize,
    pub width: usize,
    pub maps: Vec<Vec<T>>,
}

impl<T: Real> SubjectMaps<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            maps: self.maps.iter().map(|m| vec![T::zero(); m.len()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

fn square_side(pixels: usize) -> Option<usize> {
    let s = (pixels as f64).sqrt().round() as usize;
    (s * s == pixels).then_some(s)
}

pub fn slice_joint<T: Real>(stack: &AttentionStack<T>) -> Result<RawMaps<T>> {
    let heads = stack.n_head;
    match (stack.wiring, &stack.provenance) {
        (Wiring::Cross, prov) => {
            let (height, width) = match prov {
                Some(p) => p.image_grid,
                None => {
                    let s = square_side(stack.rows).ok_or_else(|| {
                        Error::Contract("cross stack without provenance must be square".into())
                    })?;
                    (s, s)
                }
            };
            let n = stack.rows * stack.cols;
            let maps = stack
                .maps
                .iter()
                .flat_map(|b| b.chunks_exact(n).map(<[T]>::to_vec))
                .collect();
            Ok(RawMaps {
                height,
                width,
                n_tokens: stack.cols,
                maps,
            })
        }
        (Wiring::Joint, None) => Err(Error::Contract(
            "joint attention stack carries no provenance metadata".into(),
        )),
        (Wiring::Joint, Some(prov)) => {
            check_provenance(stack, prov)?;
            let p = prov.image_rows.len();
            let n = prov.text_cols.len();
            let mut maps = Vec::with_capacity(stack.maps.len() * heads);
            for b in 0..stack.maps.len() {
                for h in 0..heads {
                    let full = stack.head(b, h);
                    let mut out = Vec::with_capacity(p * n);
                    for r in prov.image_rows.clone() {
                        let row = &full[r * stack.cols..(r + 1) * stack.cols];
                        out.extend_from_slice(&row[prov.text_cols.clone()]);
                    }
                    maps.push(out);
                }
            }
            Ok(RawMaps {
                height: prov.image_grid.0,
                width: prov.image_grid.1,
                n_tokens: n,
                maps,
            })
        }
    }
}

fn check_provenance<T>(stack: &AttentionStack<T>, prov: &Provenance) -> Result<()> {
    let (h, w) = prov.image_grid;
    if prov.image_rows.end > stack.rows
        || prov.text_cols.end > stack.cols
        || h * w != prov.image_rows.len()
    {
        return Err(Error::Contract(format!(
            "provenance {prov:?} does not fit a {}x{} stack",
            stack.rows, stack.cols
        )));
    }
    Ok(())
}

/// Adjoint of [`slice_joint`]: scatters per-(block, head) cotangents back
/// into a stack shaped like `like`.
pub fn slice_joint_backward<T: Real>(
    like: &AttentionStack<T>,
    d_raw: &RawMaps<T>,
) -> Result<AttentionStack<T>> {
    let mut out = like.zeros_like();
    let heads = like.n_head;
    match like.wiring {
        Wiring::Cross => {
            let n = like.rows * like.cols;
            for (i, d) in d_raw.maps.iter().enumerate() {
                let (b, h) = (i / heads, i % heads);
                out.maps[b][h * n..(h + 1) * n].copy_from_slice(d);
            }
        }
        Wiring::Joint => {
            let prov = like.provenance.as_ref().ok_or_else(|| {
                Error::Contract("joint attention stack carries no provenance metadata".into())
            })?;
            let n = prov.text_cols.len();
            let per_head = like.rows * like.cols;
            for (i, d) in d_raw.maps.iter().enumerate() {
                let (b, h) = (i / heads, i % heads);
                let full = &mut out.maps[b][h * per_head..(h + 1) * per_head];
                for (k, r) in prov.image_rows.clone().enumerate() {
                    let row = &mut full[r * like.cols..(r + 1) * like.cols];
                    row[prov.text_cols.clone()].copy_from_slice(&d[k * n..(k + 1) * n]);
                }
            }
        }
    }
    Ok(out)
}

/// Prompt positions that survive special/filler removal.
pub fn content_positions(prompt: &PromptSpec) -> Vec<usize> {
    prompt
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| !is_special(t))
        .map(|(i, _)| i)
        .collect()
}

pub fn aggregate<T: Real>(raw: &RawMaps<T>, prompt: &PromptSpec) -> Result<TokenMaps<T>> {
    if raw.maps.is_empty() {
        return Err(Error::Contract("no attention maps to aggregate".into()));
    }
    if prompt.tokens.len() != raw.n_tokens {
        return Err(Error::shape(raw.n_tokens, prompt.tokens.len()));
    }
    let positions = content_positions(prompt);
    if positions.is_empty() {
        return Err(Error::EmptySubject);
    }
    let p = raw.pixels();
    let n = raw.n_tokens;
    let k = positions.len();
    let inv = T::lit(1.0 / raw.maps.len() as f64);
    let mut data = vec![T::zero(); p * k];
    for m in &raw.maps {
        for (src, dst) in m.chunks_exact(n).zip(data.chunks_exact_mut(k)) {
            for (o, &j) in dst.iter_mut().zip(&positions) {
                *o += src[j];
            }
        }
    }
    for row in data.chunks_exact_mut(k) {
        row.iter_mut().for_each(|v| *v *= inv);
        softmax_in_place(row, None);
    }
    Ok(TokenMaps {
        height: raw.height,
        width: raw.width,
        positions,
        data,
    })
}

/// Adjoint of [`aggregate`] given its output `tok`.
pub fn aggregate_backward<T: Real>(
    tok: &TokenMaps<T>,
    d_tok: &[T],
    n_tokens: usize,
    n_maps: usize,
) -> RawMaps<T> {
    let k = tok.positions.len();
    let inv = T::lit(1.0 / n_maps as f64);
    let mut d_avg = d_tok.to_vec();
    for (p_row, g_row) in tok.data.chunks_exact(k).zip(d_avg.chunks_exact_mut(k)) {
        softmax_backward_in_place(p_row, g_row);
        g_row.iter_mut().for_each(|g| *g *= inv);
    }
    let mut one = vec![T::zero(); tok.pixels() * n_tokens];
    for (src, dst) in d_avg.chunks_exact(k).zip(one.chunks_exact_mut(n_tokens)) {
        for (&g, &j) in src.iter().zip(&tok.positions) {
            dst[j] = g;
        }
    }
    RawMaps {
        height: tok.height,
        width: tok.width,
        n_tokens,
        maps: vec![one; n_maps],
    }
}

fn column_indices(tok: &TokenMaps<impl Real>, prompt: &PromptSpec) -> Result<Vec<Vec<usize>>> {
    if prompt.subject_positions.is_empty() {
        return Err(Error::EmptySubject);
    }
    prompt
        .subject_positions
        .iter()
        .map(|set| {
            if set.is_empty() {
                return Err(Error::EmptySubject);
            }
            set.iter()
                .map(|&pos| {
                    tok.positions
                        .iter()
                        .position(|&q| q == pos)
                        .ok_or(Error::SubjectResolution { position: pos })
                })
                .collect()
        })
        .collect()
}

pub fn subject_maps<T: Real>(tok: &TokenMaps<T>, prompt: &PromptSpec) -> Result<SubjectMaps<T>> {
    let cols = column_indices(tok, prompt)?;
    let k = tok.positions.len();
    let maps = cols
        .iter()
        .map(|set| {
            let inv = T::lit(1.0 / set.len() as f64);
            tok.data
                .chunks_exact(k)
                .map(|row| set.iter().map(|&j| row[j]).sum::<T>() * inv)
                .collect()
        })
        .collect();
    Ok(SubjectMaps {
        height: tok.height,
        width: tok.width,
        maps,
    })
}

/// Adjoint of [`subject_maps`]; returns a `pixels × kept` cotangent.
pub fn subject_maps_backward<T: Real>(
    tok: &TokenMaps<T>,
    prompt: &PromptSpec,
    d_maps: &SubjectMaps<T>,
) -> Result<Vec<T>> {
    let cols = column_indices(tok, prompt)?;
    let k = tok.positions.len();
    let mut d_tok = vec![T::zero(); tok.data.len()];
    for (set, d) in cols.iter().zip(&d_maps.maps) {
        let inv = T::lit(1.0 / set.len() as f64);
        for (row, &g) in d_tok.chunks_exact_mut(k).zip(d) {
            for &j in set {
                row[j] += g * inv;
            }
        }
    }
    Ok(d_tok)
}

/// Normalized 3×3 Gaussian weights for σ = 0.5, indexed `[dr + 1][dc + 1]`.
pub fn gaussian_kernel() -> [[f64; 3]; 3] {
    let sigma = 0.5f64;
    let mut k = [[0.0; 3]; 3];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dr, dc) = (i as f64 - 1.0, j as f64 - 1.0);
            *v = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    k.iter_mut().flatten().for_each(|v| *v /= total);
    k
}

fn convolve<T: Real>(src: &[T], h: usize, w: usize, dst: &mut [T], adjoint: bool) {
    let k = gaussian_kernel();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for r in 0..h {
        for c in 0..w {
            for (i, krow) in k.iter().enumerate() {
                for (j, &kv) in krow.iter().enumerate() {
                    let rr = clamp(r as isize + i as isize - 1, h);
                    let cc = clamp(c as isize + j as isize - 1, w);
                    let wv = T::lit(kv);
                    if adjoint {
                        dst[rr * w + cc] += wv * src[r * w + c];
                    } else {
                        dst[r * w + c] += wv * src[rr * w + cc];
                    }
                }
            }
        }
    }
}

/// 3×3 Gaussian blur (σ = 0.5) with replicate padding.
pub fn smooth<T: Real>(maps: &SubjectMaps<T>) -> SubjectMaps<T> {
    let mut out = maps.zeros_like();
    for (src, dst) in maps.maps.iter().zip(&mut out.maps) {
        convolve(src, maps.height, maps.width, dst, false);
    }
    out
}

pub fn smooth_backward<T: Real>(d_out: &SubjectMaps<T>) -> SubjectMaps<T> {
    let mut d_in = d_out.zeros_like();
    for (src, dst) in d_out.maps.iter().zip(&mut d_in.maps) {
        convolve(src, d_out.height, d_out.width, dst, true);
    }
    d_in
}

/// Intermediates of [`pipeline`] needed to pull a cotangent back.
#[derive(Debug, Clone)]
pub struct MapTape<T> {
    like: AttentionStack<T>,
    n_blocks: usize,
    tokens: TokenMaps<T>,
    n_tokens: usize,
}

impl<T> MapTape<T> {
    pub fn tokens(&self) -> &TokenMaps<T> {
        &self.tokens
    }
}

/// slice → aggregate → subject_maps → smooth.
pub fn pipeline<T: Real>(
    stack: &AttentionStack<T>,
    prompt: &PromptSpec,
) -> Result<(SubjectMaps<T>, MapTape<T>)> {
    let raw = slice_joint(stack)?;
    let tokens = aggregate(&raw, prompt)?;
    let maps = smooth(&subject_maps(&tokens, prompt)?);
    let tape = MapTape {
        like: AttentionStack {
            wiring: stack.wiring,
            n_head: stack.n_head,
            rows: stack.rows,
            cols: stack.cols,
            maps: Vec::new(),
            provenance: stack.provenance.clone(),
        },
        n_blocks: stack.maps.len(),
        tokens,
        n_tokens: raw.n_tokens,
    };
    Ok((maps, tape))
}

/// Cotangent of the attention stack given a cotangent of the subject maps.
pub fn pipeline_backward<T: Real>(
    tape: &MapTape<T>,
    prompt: &PromptSpec,
    d_maps: &SubjectMaps<T>,
) -> Result<AttentionStack<T>> {
    let d_subj = smooth_backward(d_maps);
    let d_tok = subject_maps_backward(&tape.tokens, prompt, &d_subj)?;
    let n_maps = tape.n_blocks * tape.like.n_head;
    let d_raw = aggregate_backward(&tape.tokens, &d_tok, tape.n_tokens, n_maps);
    let per_block = tape.like.n_head * tape.like.rows * tape.like.cols;
    let like = AttentionStack {
        maps: vec![vec![T::zero(); per_block]; tape.n_blocks],
        ..tape.like.clone()
    };
    slice_joint_backward(&like, &d_raw)
}

/// Writes each subject map as a CSV grid and a grayscale SVG heatmap named
/// `{prompt_id}_{seed}_{step}_{subject}`.
pub fn dump_subject_maps<T: Real>(
    dir: &Path,
    prompt: &PromptSpec,
    seed: u64,
    step: usize,
    maps: &SubjectMaps<T>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (entity, map) in prompt.entities.iter().zip(&maps.maps) {
        let stem = format!("{}_{}_{}_{}", prompt.id, seed, step, entity);
        let mut csv = String::new();
        for row in map.chunks_exact(maps.width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{:.6}", v.f64())).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, csv)?;

        let cell = 10;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
            maps.width * cell,
            maps.height * cell
        );
        for (i, v) in map.iter().enumerate() {
            let g = (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({g},{g},{g})\"/>",
                (i % maps.width) * cell,
                (i / maps.width) * cell
            );
        }
        svg.push_str("</svg>\n");
        let svg_path = dir.join(format!("{stem}.svg"));
        fs::write(&svg_path, svg)?;
        written.push(csv_path);
        written.push(svg_path);
    }
    Ok(written)
}
