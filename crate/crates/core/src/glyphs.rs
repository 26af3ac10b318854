//! Procedurally rendered glyph-like toy dataset: every class is a fixed
//! stroke template, every sample a jittered affine rendering of it.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{stratified_split, DatasetError, DatasetManifest, ImageRecord, Origin, Split};

pub const GLYPH_SIZE: usize = 32;
pub const MANIFEST_NAME: &str = "manifest.txt";

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, r: f64, from: f64, to: f64, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let a = from + (to - from) * i as f64 / n as f64;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

/// Stroke template of a class, in unit coordinates with y pointing down.
pub fn template(class: usize) -> Vec<Stroke> {
    match class {
        0 => vec![arc(0.5, 0.5, 0.3, 0.0, 2.0 * PI, 24)],
        1 => vec![vec![(0.2, 0.2), (0.8, 0.2)], vec![(0.5, 0.2), (0.5, 0.82)]],
        2 => vec![vec![(0.22, 0.2), (0.78, 0.8)], vec![(0.78, 0.2), (0.22, 0.8)]],
        3 => vec![vec![(0.2, 0.2), (0.8, 0.2), (0.2, 0.8), (0.8, 0.8)]],
        4 => vec![vec![(0.25, 0.18), (0.25, 0.82)], vec![(0.75, 0.18), (0.75, 0.82)], vec![(0.25, 0.5), (0.75, 0.5)]],
        5 => vec![vec![(0.2, 0.2), (0.5, 0.8), (0.8, 0.2)]],
        6 => vec![vec![(0.25, 0.25), (0.75, 0.25), (0.75, 0.75), (0.25, 0.75), (0.25, 0.25)]],
        7 => vec![vec![(0.5, 0.18), (0.5, 0.82)], vec![(0.18, 0.5), (0.82, 0.5)]],
        c => {
            let mut r = ChaCha8Rng::seed_from_u64(0x9e37_79b9_7f4a_7c15 ^ c as u64);
            (0..3).map(|_| (0..3).map(|_| (r.random_range(0.15..0.85), r.random_range(0.15..0.85))).collect()).collect()
        }
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one perturbed sample of `class` as 8-bit grayscale, light
/// strokes on a dark background.
pub fn render_glyph(class: usize, rng: &mut impl Rng) -> Vec<u8> {
    let s = GLYPH_SIZE;
    let angle: f64 = rng.random_range(-0.2..0.2);
    let scale = rng.random_range(0.88..1.1);
    let (tx, ty) = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
    let half_width = rng.random_range(0.035..0.06);
    let jitter = Normal::new(0.0, 0.015).expect("valid std");
    let strokes: Vec<Stroke> = template(class)
        .into_iter()
        .map(|st| {
            st.into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x - 0.5 + jitter.sample(rng), y - 0.5 + jitter.sample(rng));
                    let (c, sn) = (angle.cos(), angle.sin());
                    (0.5 + scale * (c * x - sn * y) + tx, 0.5 + scale * (sn * x + c * y) + ty)
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let aa = 1.0 / s as f64;
    let mut out = Vec::with_capacity(s * s);
    for row in 0..s {
        for col in 0..s {
            let p = ((col as f64 + 0.5) / s as f64, (row as f64 + 0.5) / s as f64);
            let d = strokes
                .iter()
                .flat_map(|st| st.windows(2).map(move |w| seg_dist(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let v = ((half_width - d) / aa + 0.5).clamp(0.0, 1.0) + noise.sample(rng);
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Writes `classes × per_class` PNGs under `dir/images/` and an 80/10/10
/// stratified manifest at `dir/manifest.txt`. Deterministic given `seed`.
pub fn make_toy_glyph_dataset(
    dir: &Path,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    if classes < 2 {
        return Err(DatasetError::InvalidRecord { path: dir.to_path_buf(), msg: "need at least 2 classes".into() });
    }
    if per_class < 10 {
        return Err(DatasetError::InvalidRecord {
            path: dir.to_path_buf(),
            msg: "need at least 10 images per class".into(),
        });
    }
    let mut records = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let sub = dir.join("images").join(format!("class{c:03}"));
        fs::create_dir_all(&sub)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        for i in 0..per_class {
            let px = render_glyph(c, &mut rng);
            let rel = PathBuf::from("images").join(format!("class{c:03}")).join(format!("{i:04}.png"));
            let img = image::GrayImage::from_raw(GLYPH_SIZE as u32, GLYPH_SIZE as u32, px).expect("buffer size");
            img.save(dir.join(&rel))
                .map_err(|e| DatasetError::UndecodableImage { path: dir.join(&rel), msg: e.to_string() })?;
            records.push(ImageRecord { path: rel, label: c, split: Split::Train, origin: Origin::Real });
        }
    }
    let mut manifest = stratified_split(&records, classes, (0.8, 0.1, 0.1), seed)?;
    manifest.root = dir.to_path_buf();
    manifest.write(&dir.join(MANIFEST_NAME))
}
