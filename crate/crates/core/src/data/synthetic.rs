//! Deterministic synthetic pedestrians.
//!
//! Each identity is a figure of three stacked colour blocks (head, torso,
//! legs), some with torso stripes, on a camera-dependent background. Cameras
//! tint the whole image; `noise_level` scales per-image jitter (vertical
//! shift, brightness, per-pixel noise). With `noise_level = 0` every image of
//! one identity under one camera is identical.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{scan_reid_directory, Naming, ReidDataset, GALLERY_DIR, QUERY_DIR, TRAIN_DIR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    /// Training images per identity; cameras are assigned round-robin.
    pub images_per_identity: usize,
    pub num_cameras: usize,
    pub height: usize,
    pub width: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub query_per_camera: usize,
    pub gallery_per_camera: usize,
    /// Random-block gallery images with identity −1.
    pub num_distractors: usize,
    /// Evaluate on fresh identities instead of the training ones.
    pub disjoint_eval_identities: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 8,
            images_per_identity: 8,
            num_cameras: 2,
            height: 192,
            width: 64,
            noise_level: 0.1,
            seed: 7,
            query_per_camera: 1,
            gallery_per_camera: 2,
            num_distractors: 0,
            disjoint_eval_identities: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.num_identities < 2 {
            return bad("num_identities must be >= 2");
        }
        if self.num_identities > 9999 {
            return bad("num_identities must be <= 9999");
        }
        if self.num_cameras < 2 {
            return bad("num_cameras must be >= 2 so every query has a cross-camera match");
        }
        if self.images_per_identity == 0 || self.query_per_camera == 0 || self.gallery_per_camera == 0 {
            return bad("image counts must be >= 1");
        }
        if self.height < 8 || self.width < 4 {
            return bad("images must be at least 8x4");
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad("noise_level must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Appearance {
    head: [f64; 3],
    torso: [f64; 3],
    stripe: Option<([f64; 3], usize)>,
    legs: [f64; 3],
    head_end: f64,
    torso_end: f64,
    body_width: f64,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0; 3].map(|_: u8| rng.random_range(0.05..0.95))
}

impl Appearance {
    fn for_identity(seed: u64, pid: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pid + 1);
        let head = random_color(&mut rng);
        let torso = random_color(&mut rng);
        let legs = random_color(&mut rng);
        let stripe = if rng.random_bool(0.5) {
            Some((random_color(&mut rng), rng.random_range(3..8)))
        } else {
            None
        };
        Self {
            head,
            torso,
            stripe,
            legs,
            head_end: rng.random_range(0.15..0.22),
            torso_end: rng.random_range(0.5..0.6),
            body_width: rng.random_range(0.5..0.75),
        }
    }

    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            head: random_color(rng),
            torso: random_color(rng),
            stripe: None,
            legs: random_color(rng),
            head_end: 0.2,
            torso_end: 0.55,
            body_width: 0.6,
        }
    }

    fn color_at(&self, y: f64, x: f64, row: usize) -> Option<[f64; 3]> {
        if (x - 0.5).abs() > self.body_width / 2.0 {
            return None;
        }
        Some(if y < self.head_end {
            self.head
        } else if y < self.torso_end {
            match self.stripe {
                Some((c, period)) if (row / period) % 2 == 1 => c,
                _ => self.torso,
            }
        } else {
            self.legs
        })
    }
}

fn camera_tint(cam: usize) -> ([f64; 3], f64) {
    let c = cam as f64;
    let tint = [
        1.0 + 0.15 * (1.3 * c).sin(),
        1.0 + 0.15 * (2.1 * c + 1.0).sin(),
        1.0 + 0.15 * (0.7 * c + 2.0).sin(),
    ];
    let background = 0.25 + 0.1 * (cam % 3) as f64;
    (tint, background)
}

fn render(
    appearance: &Appearance,
    cam: usize,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let (h, w) = (spec.height, spec.width);
    let noise = spec.noise_level;
    let (tint, background) = camera_tint(cam);
    // Always draw the jitter values so the generator state does not depend on
    // noise_level.
    let shift_draw: f64 = rng.random_range(-1.0..1.0);
    let brightness_draw: f64 = rng.random_range(-1.0..1.0);
    let shift = (noise * shift_draw * 0.05 * h as f64).round() as isize;
    let brightness = 1.0 + noise * 0.2 * brightness_draw;
    let mut img = RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        let src = (row as isize - shift).clamp(0, h as isize - 1) as usize;
        let y = (src as f64 + 0.5) / h as f64;
        for col in 0..w {
            let x = (col as f64 + 0.5) / w as f64;
            let base = appearance.color_at(y, x, src).unwrap_or([background; 3]);
            let px = [0, 1, 2].map(|c| {
                let n: f64 = rng.random_range(-1.0..1.0);
                let v = base[c] * tint[c] * brightness + noise * 0.3 * n;
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(col as u32, row as u32, Rgb(px));
        }
    }
    img
}

fn save(img: &RgbImage, dir: &Path, pid: i64, cam: usize, idx: usize) -> Result<()> {
    let name = if pid < 0 {
        format!("{pid}_c{cam}s1_{idx:06}_00.png")
    } else {
        format!("{pid:04}_c{cam}s1_{idx:06}_00.png")
    };
    let path = dir.join(name);
    img.save(&path).map_err(|source| Error::Image { path, source })
}

fn prepare_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut it = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if it.next().is_some() {
            return Err(Error::Dataset(format!(
                "{} already exists and is not empty",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a market-style synthetic dataset under `out_root` and returns its
/// manifests (also written to `out_root/manifest.jsonl`).
///
/// Per evaluation identity and camera there are `query_per_camera` query
/// images and `gallery_per_camera` gallery images, so every query has a true
/// match under another camera. Split directories must be absent or empty.
pub fn generate_synthetic(spec: &SyntheticSpec, out_root: &Path) -> Result<ReidDataset> {
    spec.validate()?;
    let dirs = [TRAIN_DIR, QUERY_DIR, GALLERY_DIR].map(|d| out_root.join(d));
    for d in &dirs {
        prepare_dir(d)?;
    }
    let [train_dir, query_dir, gallery_dir] = &dirs;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);

    let n = spec.num_identities as i64;
    let mut idx = 0;
    for pid in 1..=n {
        let look = Appearance::for_identity(spec.seed, pid as u64);
        for j in 0..spec.images_per_identity {
            let cam = j % spec.num_cameras + 1;
            save(&render(&look, cam, spec, &mut rng), train_dir, pid, cam, idx)?;
            idx += 1;
        }
    }

    let eval_pids = if spec.disjoint_eval_identities {
        n + 1..=2 * n
    } else {
        1..=n
    };
    let (mut q_idx, mut g_idx) = (0, 0);
    for pid in eval_pids {
        let look = Appearance::for_identity(spec.seed, pid as u64);
        for cam in 1..=spec.num_cameras {
            for _ in 0..spec.query_per_camera {
                save(&render(&look, cam, spec, &mut rng), query_dir, pid, cam, q_idx)?;
                q_idx += 1;
            }
            for _ in 0..spec.gallery_per_camera {
                save(&render(&look, cam, spec, &mut rng), gallery_dir, pid, cam, g_idx)?;
                g_idx += 1;
            }
        }
    }
    for _ in 0..spec.num_distractors {
        let look = Appearance::random(&mut rng);
        let cam = rng.random_range(1..=spec.num_cameras);
        save(&render(&look, cam, spec, &mut rng), gallery_dir, -1, cam, g_idx)?;
        g_idx += 1;
    }

    let dataset = scan_reid_directory(out_root, Naming::MarketStyle)?;
    dataset.write_jsonl(&out_root.join("manifest.jsonl"))?;
    Ok(dataset)
}
