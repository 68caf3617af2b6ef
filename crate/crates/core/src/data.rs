//! Synthetic triplet datasets and binary PPM frames.
//!
//! A dataset split lives in `root/<split>/` with one directory per triplet
//! holding `im1.ppm` (first frame), `im2.ppm` (middle) and `im3.ppm`
//! (last), plus `manifest.json`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TripletSample;
use crate::tensor::Tensor;

/// Encode a `[3,H,W]` tensor in `[0,1]` as 8-bit P6.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::invalid("ppm", format!("need 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(d[ch * h * w + i]));
        }
    }
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Round every value to the nearest 8-bit level.
pub fn quantize_image(img: &Tensor) -> Tensor {
    img.map(|v| quantize(v) as f64 / 255.0)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_ppm(img)?;
    fs::write(path, bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
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
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("only 8-bit images are supported, maxval {maxval}"));
    }
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err("truncated pixel data".into());
    }
    let px = &bytes[pos..pos + need];
    let mut data = vec![0.0; need];
    for i in 0..w * h {
        for ch in 0..3 {
            data[ch * h * w + i] = px[3 * i + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).map_err(|e| e.to_string())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    decode_ppm(&bytes).map_err(err)
}

/// Generator settings stored with each synthetic split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub seed: u64,
    pub size: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Range of the displacement magnitude between first and last frame, pixels.
    pub velocity: (f64, f64),
    /// Range of the rotation between first and last frame, radians.
    pub rotation: (f64, f64),
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            train_count: 200,
            val_count: 20,
            min_shapes: 1,
            max_shapes: 4,
            velocity: (0.0, 6.0),
            rotation: (-0.3, 0.3),
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Dataset(format!("frame size must be at least 16, got {}", self.size)));
        }
        if self.train_count + self.val_count == 0 {
            return Err(Error::Dataset("need at least one triplet".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Dataset("shape counts must satisfy 1 <= min <= max".into()));
        }
        if self.velocity.0 < 0.0 || self.velocity.0 > self.velocity.1 || self.rotation.0 > self.rotation.1 {
            return Err(Error::Dataset("velocity and rotation ranges must be ordered".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect { half_w: f64, half_h: f64 },
    Circle { radius: f64 },
}

/// A textured shape moving with constant velocity and spin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub angle: f64,
    /// Displacement `(dy, dx)` from `t = 0` to `t = 1`.
    pub velocity: (f64, f64),
    pub spin: f64,
    pub colors: [[f64; 3]; 2],
    pub stripe_freq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: usize,
    pub background: [[f64; 3]; 2],
    pub bg_freq: (f64, f64),
    pub shapes: Vec<Shape>,
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

/// Scene of triplet `index` in a split.
pub fn scene_for(params: &GenParams, split: Split, index: usize) -> Scene {
    let stream = match split {
        Split::Train => 0u64,
        Split::Val => 1u64 << 40,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (stream + index as u64));
    let s = params.size as f64;
    let n = rng.gen_range(params.min_shapes..=params.max_shapes);
    let shapes = (0..n)
        .map(|_| {
            let kind = if rng.gen_bool(0.5) {
                ShapeKind::Rect {
                    half_w: rng.gen_range(0.08..0.22) * s,
                    half_h: rng.gen_range(0.08..0.22) * s,
                }
            } else {
                ShapeKind::Circle {
                    radius: rng.gen_range(0.08..0.2) * s,
                }
            };
            let speed = rng.gen_range(params.velocity.0..=params.velocity.1);
            let dir = rng.gen_range(0.0..2.0 * PI);
            Shape {
                kind,
                center: (rng.gen_range(0.2..0.8) * s, rng.gen_range(0.2..0.8) * s),
                angle: rng.gen_range(0.0..PI),
                velocity: (speed * dir.sin(), speed * dir.cos()),
                spin: rng.gen_range(params.rotation.0..=params.rotation.1),
                colors: [color(&mut rng), color(&mut rng)],
                stripe_freq: rng.gen_range(0.3..1.2),
            }
        })
        .collect();
    Scene {
        size: params.size,
        background: [color(&mut rng), color(&mut rng)],
        bg_freq: (rng.gen_range(0.05..0.25), rng.gen_range(0.05..0.25)),
        shapes,
    }
}

const SUPERSAMPLE: usize = 3;

fn shade(scene: &Scene, t: f64, y: f64, x: f64) -> [f64; 3] {
    for shape in scene.shapes.iter().rev() {
        let cy = shape.center.0 + shape.velocity.0 * t;
        let cx = shape.center.1 + shape.velocity.1 * t;
        let th = shape.angle + shape.spin * t;
        let (dy, dx) = (y - cy, x - cx);
        let u = dx * th.cos() + dy * th.sin();
        let v = -dx * th.sin() + dy * th.cos();
        let inside = match shape.kind {
            ShapeKind::Rect { half_w, half_h } => u.abs() <= half_w && v.abs() <= half_h,
            ShapeKind::Circle { radius } => u * u + v * v <= radius * radius,
        };
        if inside {
            let m = 0.5 + 0.5 * (shape.stripe_freq * u).sin();
            return mix(shape.colors[0], shape.colors[1], m);
        }
    }
    let m = 0.5 + 0.25 * (scene.bg_freq.0 * y).sin() + 0.25 * (scene.bg_freq.1 * x).cos();
    mix(scene.background[0], scene.background[1], m)
}

fn mix(a: [f64; 3], b: [f64; 3], m: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] * (1.0 - m) + b[c] * m)
}

/// Anti-aliased render of `scene` at time `t` (0 = first frame, 1 = last).
pub fn render(scene: &Scene, t: f64) -> Tensor {
    let n = scene.size;
    let mut data = vec![0.0; 3 * n * n];
    let k = SUPERSAMPLE as f64;
    for i in 0..n {
        for j in 0..n {
            let mut acc = [0.0; 3];
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let y = i as f64 + (a as f64 + 0.5) / k - 0.5;
                    let x = j as f64 + (b as f64 + 0.5) / k - 0.5;
                    let c = shade(scene, t, y, x);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            for ch in 0..3 {
                data[(ch * n + i) * n + j] = acc[ch] / (k * k);
            }
        }
    }
    Tensor::new(vec![3, n, n], data).expect("consistent shape")
}

/// `(I0, I_gt, I1)` of a scene, quantized to 8 bits.
pub fn render_triplet(scene: &Scene) -> TripletSample {
    let f = |t| quantize_image(&render(scene, t));
    TripletSample {
        i0: f(0.0),
        gt: f(0.5),
        i1: f(1.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub triplets: Vec<String>,
    pub generator: Option<GenParams>,
}

pub const MANIFEST: &str = "manifest.json";
pub const FRAME_NAMES: [&str; 3] = ["im1.ppm", "im2.ppm", "im3.ppm"];

/// Render both splits under `root`.
pub fn gen_synthetic(root: &Path, params: &GenParams) -> Result<Vec<DatasetManifest>> {
    params.validate()?;
    let mut out = Vec::new();
    for (split, count) in [(Split::Train, params.train_count), (Split::Val, params.val_count)] {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::Dataset(format!("cannot create {}: {e}", dir.display())))?;
        let mut triplets = Vec::with_capacity(count);
        for idx in 0..count {
            let name = format!("{idx:05}");
            let tdir = dir.join(&name);
            fs::create_dir_all(&tdir)?;
            let s = render_triplet(&scene_for(params, split, idx));
            for (file, img) in FRAME_NAMES.iter().zip([&s.i0, &s.gt, &s.i1]) {
                write_ppm(&tdir.join(file), img)?;
            }
            triplets.push(name);
        }
        let manifest = DatasetManifest {
            root: dir.clone(),
            split,
            triplets,
            generator: Some(params.clone()),
        };
        let mut f = fs::File::create(dir.join(MANIFEST))?;
        f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        out.push(manifest);
    }
    Ok(out)
}

/// Load every triplet of a split directory.
pub fn load_split(dir: &Path) -> Result<Vec<TripletSample>> {
    let mpath = dir.join(MANIFEST);
    let names: Vec<String> = if mpath.exists() {
        let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        m.triplets
    } else {
        let mut v: Vec<String> = fs::read_dir(dir)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(FRAME_NAMES[0]).exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    if names.is_empty() {
        return Err(Error::Dataset(format!("no triplets in {}", dir.display())));
    }
    names
        .iter()
        .map(|n| {
            let t = dir.join(n);
            let [a, b, c] = FRAME_NAMES.map(|f| read_ppm(&t.join(f)));
            TripletSample::new(a?, c?, b?).map_err(|e| Error::Dataset(format!("triplet {n}: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = quantize_image(&Tensor::uniform([3, 5, 7], 0.0, 1.0, &mut rng));
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
        let bytes = encode_ppm(&img).unwrap();
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# comment\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn static_scene_has_identical_frames() {
        let p = GenParams {
            velocity: (0.0, 0.0),
            rotation: (0.0, 0.0),
            size: 16,
            ..GenParams::default()
        };
        let s = render_triplet(&scene_for(&p, Split::Train, 3));
        assert_eq!(s.i0, s.i1);
        assert_eq!(s.i0, s.gt);
    }

    #[test]
    fn moving_scene_differs() {
        let p = GenParams {
            velocity: (5.0, 5.0),
            size: 32,
            ..GenParams::default()
        };
        let s = render_triplet(&scene_for(&p, Split::Train, 0));
        assert!(s.i0.max_abs_diff(&s.i1) > 0.05);
    }

    #[test]
    fn splits_use_distinct_streams() {
        let p = GenParams::default();
        assert_ne!(scene_for(&p, Split::Train, 0), scene_for(&p, Split::Val, 0));
        assert_eq!(scene_for(&p, Split::Val, 2), scene_for(&p, Split::Val, 2));
    }

    #[test]
    fn rejects_bad_params() {
        let p = GenParams {
            size: 8,
            ..GenParams::default()
        };
        assert!(p.validate().is_err());
    }
}
