//! Procedural camouflage benchmark.
//!
//! Every sample hides an oriented-grating texture inside a background whose
//! first-order statistics (per-channel mean and spread) are renormalized to
//! match the foreground exactly. What separates the object is second-order
//! structure only: grating orientation and wavelength. The `difficulty`
//! knob shrinks that second-order gap (90 degrees apart and 2x wavelength at
//! difficulty 0, 15 degrees and 1.2x at difficulty 1).

pub mod oracle;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{CamoSample, ColorImage, GrayMap, Mask};
use crate::error::{Error, Result};
use crate::exec;
use crate::io;
use crate::rng::Rng;

/// Target standard deviation of generated texture fields.
const TEXTURE_CONTRAST: f64 = 0.13;
/// Blob area window targeted by threshold bisection (inside the hard
/// [0.05, 0.45] clamp; skewed small so trivial all-foreground guesses
/// stay weak).
const AREA_LO: f64 = 0.06;
const AREA_HI: f64 = 0.32;
/// Camouflage constraint: max per-channel mean gap between regions.
pub const MAX_MEAN_GAP: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct TextureParams {
    pub orientation: f64,
    pub wavelength: f64,
    pub noise_scale: f64,
    pub base_gray: f64,
    pub seed: u64,
}

impl TextureParams {
    pub fn validate(&self) -> Result<()> {
        if self.wavelength < 2.0 {
            return Err(Error::invalid(format!("wavelength {} below 2", self.wavelength)));
        }
        if !(0.2..=0.8).contains(&self.base_gray) {
            return Err(Error::invalid(format!("base_gray {} outside [0.2, 0.8]", self.base_gray)));
        }
        Ok(())
    }
}

/// Separable box blur with clamp-to-edge padding.
fn box_blur(field: &mut GrayMap, radius: usize) {
    if radius == 0 {
        return;
    }
    let (h, w) = (field.h, field.w);
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for k in -(radius as isize)..=radius as isize {
                let cc = (c as isize + k).clamp(0, w as isize - 1) as usize;
                acc += field.data[r * w + cc];
            }
            tmp[r * w + c] = acc * norm;
        }
    }
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for k in -(radius as isize)..=radius as isize {
                let rr = (r as isize + k).clamp(0, h as isize - 1) as usize;
                acc += tmp[rr * w + c];
            }
            field.data[r * w + c] = acc * norm;
        }
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Oriented band-pass field: a sinusoidal grating plus smoothed seeded
/// noise, renormalized to the target mean and contrast and clamped to [0,1].
pub fn gen_texture(params: &TextureParams, h: usize, w: usize) -> Result<GrayMap> {
    params.validate()?;
    let mut rng = Rng::substream(params.seed, "texture-noise");
    let mut noise = GrayMap::new(h, w, rng.normal_vec(h * w, 0.0, 1.0))?;
    box_blur(&mut noise, 1);

    let phase = Rng::substream(params.seed, "texture-phase").uniform() * 2.0 * PI;
    let (cos_t, sin_t) = (params.orientation.cos(), params.orientation.sin());
    let freq = 2.0 * PI / params.wavelength;
    let mut field = GrayMap::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let proj = x as f64 * cos_t + y as f64 * sin_t;
            field.data[y * w + x] =
                (freq * proj + phase).sin() + params.noise_scale * noise.data[y * w + x];
        }
    }
    let (m, s) = mean_std(field.data.iter().copied());
    let s = if s < 1e-12 { 1.0 } else { s };
    for v in &mut field.data {
        *v = params.base_gray + (*v - m) / s * TEXTURE_CONTRAST;
    }
    field.clamp_unit();
    Ok(field)
}

/// Largest 4-connected component of `field > t`, as a mask.
fn threshold_component(field: &GrayMap, t: f64) -> Mask {
    let (h, w) = (field.h, field.w);
    let mut label = vec![0u32; h * w]; // 0 = unvisited/background
    let mut best: (u32, usize) = (0, 0);
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if field.data[start] <= t || label[start] != 0 {
            continue;
        }
        let id = next;
        next += 1;
        let mut size = 0usize;
        stack.push(start);
        label[start] = id;
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut push = |q: usize| {
                if field.data[q] > t && label[q] == 0 {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if r > 0 {
                push(p - w);
            }
            if r + 1 < h {
                push(p + w);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < w {
                push(p + 1);
            }
        }
        if size > best.1 {
            best = (id, size);
        }
    }
    let mut m = Mask::zeros(h, w);
    if best.1 > 0 {
        for p in 0..h * w {
            if label[p] == best.0 {
                m.set(p / w, p % w, 1);
            }
        }
    }
    m
}

fn try_blob(seed: u64, h: usize, w: usize) -> Option<Mask> {
    let mut rng = Rng::substream(seed, "blob-noise");
    let mut field = GrayMap::new(h, w, rng.normal_vec(h * w, 0.0, 1.0)).ok()?;
    // heavy smoothing: three box passes at ~h/8 radius
    for _ in 0..3 {
        box_blur(&mut field, (h.min(w) / 8).max(1));
    }
    let mut lo = field.data.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = field.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..50 {
        let t = 0.5 * (lo + hi);
        let mask = threshold_component(&field, t);
        let frac = mask.foreground_fraction();
        if (AREA_LO..=AREA_HI).contains(&frac) {
            return Some(mask);
        }
        if frac > AREA_HI {
            lo = t; // shrink the blob
        } else {
            hi = t;
        }
    }
    None
}

/// Blob mask: threshold of heavily smoothed seeded noise, largest
/// 4-connected component, area bisected into the clamp window. Seeds whose
/// bisection fails fall through to seed+1.
pub fn gen_blob_mask(seed: u64, h: usize, w: usize) -> Mask {
    let mut s = seed;
    loop {
        if let Some(m) = try_blob(s, h, w) {
            return m;
        }
        s = s.wrapping_add(1);
    }
}

/// The texture recipe of one sample; derivable from (seed, difficulty)
/// alone, which is what the filter-bank oracle relies on.
#[derive(Clone, Debug)]
pub struct SampleSpec {
    pub bg: TextureParams,
    pub fg: TextureParams,
    pub mask_seed: u64,
    pub tints: [f64; 3],
}

pub fn sample_spec(seed: u64, difficulty: f64) -> SampleSpec {
    let mut rng = Rng::substream(seed, "sample-spec");
    let orientation = rng.uniform() * PI;
    let wavelength = rng.uniform_in(5.0, 9.0);
    let noise_scale = rng.uniform_in(0.25, 0.5);
    let base_gray = rng.uniform_in(0.4, 0.6);
    let delta_theta = (1.0 - difficulty) * (PI / 2.0) + difficulty * (PI / 12.0);
    let wavelength_factor = 2.0 - 0.8 * difficulty;
    let mut tint_rng = Rng::substream(seed, "sample-tint");
    let tints = [
        1.0 + tint_rng.uniform_in(-0.08, 0.08),
        1.0 + tint_rng.uniform_in(-0.08, 0.08),
        1.0 + tint_rng.uniform_in(-0.08, 0.08),
    ];
    SampleSpec {
        bg: TextureParams {
            orientation,
            wavelength,
            noise_scale,
            base_gray,
            seed: seed ^ 0x6267, // "bg"
        },
        fg: TextureParams {
            orientation: (orientation + delta_theta) % PI,
            wavelength: wavelength * wavelength_factor,
            noise_scale,
            base_gray,
            seed: seed ^ 0x6667, // "fg"
        },
        mask_seed: seed ^ 0x6d61736b, // "mask"
        tints,
    }
}

/// Compose one sample: background texture, foreground texture under the
/// blob mask with a one-pixel feathered edge, foreground statistics
/// renormalized to the background's, then a mild global per-channel tint.
pub fn gen_sample(seed: u64, difficulty: f64, h: usize, w: usize) -> Result<CamoSample> {
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::invalid(format!("difficulty {difficulty} outside [0,1]")));
    }
    let spec = sample_spec(seed, difficulty);
    let bg = gen_texture(&spec.bg, h, w)?;
    let fg = gen_texture(&spec.fg, h, w)?;
    let mask = gen_blob_mask(spec.mask_seed, h, w);

    let mut gray = bg.clone();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) == 1 {
                let boundary = (r > 0 && mask.get(r - 1, c) == 0)
                    || (r + 1 < h && mask.get(r + 1, c) == 0)
                    || (c > 0 && mask.get(r, c - 1) == 0)
                    || (c + 1 < w && mask.get(r, c + 1) == 0);
                let alpha = if boundary { 0.5 } else { 1.0 };
                gray.data[r * w + c] =
                    alpha * fg.data[r * w + c] + (1.0 - alpha) * bg.data[r * w + c];
            }
        }
    }

    // exact first-order match: foreground mean/std -> background mean/std
    let fg_vals = || {
        gray.data
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m == 1)
            .map(|(&v, _)| v)
    };
    let bg_vals = || {
        gray.data
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m == 0)
            .map(|(&v, _)| v)
    };
    let (mf, sf) = mean_std(fg_vals());
    let (mb, sb) = mean_std(bg_vals());
    let sf = if sf < 1e-9 { 1.0 } else { sf };
    let gray_data: Vec<f64> = gray
        .data
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| {
            if m == 1 {
                ((v - mf) / sf * sb + mb).clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect();

    let mut image = ColorImage::zeros(h, w);
    for c in 0..3 {
        let ch = image.channel_mut(c);
        for (o, &v) in ch.iter_mut().zip(&gray_data) {
            *o = (v * spec.tints[c]).clamp(0.0, 1.0);
        }
    }
    Ok(CamoSample { image, mask, sample_seed: seed, difficulty })
}

/// One line per sample: image path relative to the dataset root, seed,
/// difficulty.
pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn split_dir(&self, split: &str) -> (PathBuf, PathBuf) {
        let base = self.root.join(split);
        (base.join("images"), base.join("masks"))
    }
}

/// Write `n_train` + `n_test` samples with disjoint seed ranges
/// (train: root_seed + i, test: root_seed + 1_000_000 + i), paired PPM/PGM
/// files, and the index manifest.
pub fn gen_dataset(
    root: &Path,
    root_seed: u64,
    n_train: usize,
    n_test: usize,
    h: usize,
    w: usize,
    difficulty_range: (f64, f64),
) -> Result<PathBuf> {
    if n_train >= 1_000_000 {
        return Err(Error::invalid("train split capped below the test seed offset".to_string()));
    }
    let layout = DatasetLayout { root: root.to_path_buf() };
    let mut manifest = vec![
        ("root_seed".to_string(), root_seed.to_string()),
        ("size".to_string(), format!("{h}x{w}")),
        (
            "difficulty_range".to_string(),
            format!("{}..{}", difficulty_range.0, difficulty_range.1),
        ),
    ];
    let mut lines: Vec<String> = manifest
        .drain(..)
        .map(|(k, v)| format!("# {k}={v}"))
        .collect();

    for (split, count, offset) in [("train", n_train, 0u64), ("test", n_test, 1_000_000u64)] {
        let (img_dir, mask_dir) = layout.split_dir(split);
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
        let samples = exec::map_range(count, |i| {
            let seed = root_seed + offset + i as u64;
            let difficulty = Rng::substream(seed, "difficulty")
                .uniform_in(difficulty_range.0, difficulty_range.1);
            gen_sample(seed, difficulty, h, w)
        });
        for (i, s) in samples.into_iter().enumerate() {
            let s = s?;
            let name = format!("{split}_{i:05}");
            io::write_ppm(&img_dir.join(format!("{name}.ppm")), &s.image)?;
            io::write_pgm_mask(&mask_dir.join(format!("{name}.pgm")), &s.mask)?;
            lines.push(format!(
                "{split}/images/{name}.ppm,{},{}",
                s.sample_seed, s.difficulty
            ));
        }
    }
    let manifest_path = root.join(MANIFEST_NAME);
    fs::write(&manifest_path, lines.join("\n") + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Load the image/mask pairs of one split, sorted by filename. Seed and
/// difficulty come from the manifest when present.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<CamoSample>> {
    let layout = DatasetLayout { root: root.to_path_buf() };
    let (img_dir, mask_dir) = layout.split_dir(split);
    let mut names: Vec<String> = fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.path().file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::data(format!("no images under {}", img_dir.display())));
    }

    let mut meta = std::collections::HashMap::new();
    if let Ok(text) = fs::read_to_string(root.join(MANIFEST_NAME)) {
        for line in text.lines().filter(|l| !l.starts_with('#')) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() == 3 {
                if let Some(stem) = Path::new(parts[0]).file_stem() {
                    let seed = parts[1].parse::<u64>().unwrap_or(0);
                    let difficulty = parts[2].parse::<f64>().unwrap_or(0.0);
                    meta.insert(stem.to_string_lossy().into_owned(), (seed, difficulty));
                }
            }
        }
    }

    names
        .into_iter()
        .map(|name| {
            let img = find_file(&img_dir, &name)?;
            let msk = find_file(&mask_dir, &name)?;
            let (sample_seed, difficulty) = meta.get(&name).copied().unwrap_or((0, 0.0));
            Ok(CamoSample {
                image: io::read_color(&img)?,
                mask: io::read_mask(&msk)?,
                sample_seed,
                difficulty,
            })
        })
        .collect()
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for ext in ["ppm", "png", "pgm"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::data(format!("no file for {stem} under {}", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_deterministic() {
        let p = TextureParams {
            orientation: 0.7,
            wavelength: 6.0,
            noise_scale: 0.3,
            base_gray: 0.5,
            seed: 3,
        };
        let a = gen_texture(&p, 32, 32).unwrap();
        let b = gen_texture(&p, 32, 32).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn texture_rotation_by_pi_preserves_statistics() {
        let mk = |orientation: f64| TextureParams {
            orientation,
            wavelength: 6.0,
            noise_scale: 0.3,
            base_gray: 0.5,
            seed: 4,
        };
        let a = gen_texture(&mk(0.9), 48, 48).unwrap();
        let b = gen_texture(&mk(0.9 + PI), 48, 48).unwrap();
        let (ma, sa) = mean_std(a.data.iter().copied());
        let (mb, sb) = mean_std(b.data.iter().copied());
        assert!((ma - mb).abs() < 1e-6);
        assert!((sa - sb).abs() < 1e-6);
    }

    #[test]
    fn texture_pure_grating_without_noise() {
        let p = TextureParams {
            orientation: 0.0,
            wavelength: 8.0,
            noise_scale: 0.0,
            base_gray: 0.5,
            seed: 5,
        };
        let t = gen_texture(&p, 32, 32).unwrap();
        // rows identical for a horizontal-axis grating
        for r in 1..32 {
            for c in 0..32 {
                assert!((t.get(r, c) - t.get(0, c)).abs() < 1e-12);
            }
        }
        let (_, s) = mean_std(t.data.iter().copied());
        assert!((s - TEXTURE_CONTRAST).abs() < 0.02);
    }

    #[test]
    fn blob_is_single_component_in_bounds() {
        for seed in 0..5 {
            let m = gen_blob_mask(seed, 64, 64);
            let frac = m.foreground_fraction();
            assert!((0.05..=0.45).contains(&frac), "fraction {frac}");
            // rebuild components over the mask itself: exactly one
            let field = GrayMap::new(64, 64, m.data().iter().map(|&v| v as f64).collect()).unwrap();
            let biggest = threshold_component(&field, 0.5);
            assert_eq!(biggest.foreground_count(), m.foreground_count());
        }
    }

    #[test]
    fn blob_deterministic() {
        assert_eq!(gen_blob_mask(9, 48, 48), gen_blob_mask(9, 48, 48));
    }

    #[test]
    fn sample_respects_camouflage_invariant() {
        for seed in [0, 7, 21] {
            let s = gen_sample(seed, 1.0, 64, 64).unwrap();
            let frac = s.mask.foreground_fraction();
            assert!((0.05..=0.45).contains(&frac));
            for c in 0..3 {
                let ch = s.image.channel(c);
                let (mf, _) = mean_std(
                    ch.iter().zip(s.mask.data()).filter(|(_, &m)| m == 1).map(|(&v, _)| v),
                );
                let (mb, _) = mean_std(
                    ch.iter().zip(s.mask.data()).filter(|(_, &m)| m == 0).map(|(&v, _)| v),
                );
                assert!(
                    (mf - mb).abs() < MAX_MEAN_GAP,
                    "seed {seed} channel {c}: gap {}",
                    (mf - mb).abs()
                );
            }
        }
    }

    #[test]
    fn difficulty_interpolates_orientation_gap() {
        let easy = sample_spec(11, 0.0);
        let hard = sample_spec(11, 1.0);
        let gap = |s: &SampleSpec| {
            let mut d = (s.fg.orientation - s.bg.orientation).rem_euclid(PI);
            if d > PI / 2.0 {
                d = PI - d;
            }
            d
        };
        assert!((gap(&easy) - PI / 2.0).abs() < 1e-9);
        assert!((gap(&hard) - PI / 12.0).abs() < 1e-9);
        assert!((easy.fg.wavelength / easy.bg.wavelength - 2.0).abs() < 1e-9);
        assert!((hard.fg.wavelength / hard.bg.wavelength - 1.2).abs() < 1e-9);
    }

    #[test]
    fn histogram_intersection_high_at_difficulty_one() {
        // 16-bin intersection between fg and bg intensities, averaged over
        // seeded samples
        let mut total = 0.0;
        let n = 20;
        for seed in 0..n {
            let s = gen_sample(seed, 1.0, 64, 64).unwrap();
            let gray = s.image.to_gray();
            let mut hf = [0.0f64; 16];
            let mut hb = [0.0f64; 16];
            let (mut nf, mut nb) = (0.0, 0.0);
            for (v, &m) in gray.data.iter().zip(s.mask.data()) {
                let bin = ((v * 16.0) as usize).min(15);
                if m == 1 {
                    hf[bin] += 1.0;
                    nf += 1.0;
                } else {
                    hb[bin] += 1.0;
                    nb += 1.0;
                }
            }
            let inter: f64 = hf.iter().zip(&hb).map(|(a, b)| (a / nf).min(b / nb)).sum();
            total += inter;
        }
        let mean = total / n as f64;
        assert!(mean > 0.85, "histogram intersection {mean}");
    }

    #[test]
    fn dataset_roundtrip_and_disjoint_seeds() {
        let dir = std::env::temp_dir().join("camotex-synth-test");
        let _ = fs::remove_dir_all(&dir);
        gen_dataset(&dir, 500, 4, 2, 32, 32, (0.2, 0.8)).unwrap();
        let train = load_split(&dir, "train").unwrap();
        let test = load_split(&dir, "test").unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 2);
        let train_seeds: Vec<u64> = train.iter().map(|s| s.sample_seed).collect();
        let test_seeds: Vec<u64> = test.iter().map(|s| s.sample_seed).collect();
        assert!(train_seeds.iter().all(|s| !test_seeds.contains(s)));
        // regeneration is byte-identical
        let first = fs::read(dir.join("train/images/train_00000.ppm")).unwrap();
        let dir2 = std::env::temp_dir().join("camotex-synth-test-2");
        let _ = fs::remove_dir_all(&dir2);
        gen_dataset(&dir2, 500, 4, 2, 32, 32, (0.2, 0.8)).unwrap();
        let second = fs::read(dir2.join("train/images/train_00000.ppm")).unwrap();
        assert_eq!(first, second);
    }
}
