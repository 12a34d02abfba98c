//! Synthetic scene generation, grid proposals, and dataset file I/O.
//!
//! Scenes are uniformly colored shapes (classes are shape x color
//! combinations) on a dim noisy gray background, sized so that weak
//! image-level supervision has a realistic chance of localizing them
//! from scratch in a few thousand steps.

use std::fmt;
use std::fs;

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::boxes::BBox;
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum DataError {
    BadParams(String),
    DegenerateProposals,
    Io(PathBuf, std::io::Error),
    Parse(PathBuf, String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::BadParams(msg) => write!(f, "bad parameters: {msg}"),
            DataError::DegenerateProposals => {
                write!(f, "proposal parameters produce no boxes")
            }
            DataError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            DataError::Parse(p, msg) => write!(f, "{}: {msg}", p.display()),
        }
    }
}

impl std::error::Error for DataError {}

/// One generated image with its objects and the derived image-level labels.
/// Training only ever sees `image_labels`; the boxes exist for evaluation.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// `[3, H, W]` RGB, values in `[0, 1]`.
    pub image: Tensor,
    pub objects: Vec<(usize, BBox)>,
    /// Length-C binary vector: 1.0 iff some object has that class.
    pub image_labels: Vec<f64>,
}

/// Up to four colors x two shapes = at most eight classes. The gray level
/// sits between the lit channels and the background, so every color is
/// separated from every other (and from the background) by a one-channel
/// intensity threshold — no class needs absence-of-color evidence.
const COLORS: [[f64; 3]; 4] = [
    [0.85, 0.05, 0.05], // red
    [0.05, 0.85, 0.05], // green
    [0.05, 0.05, 0.85], // blue
    [0.55, 0.55, 0.55], // gray
];
pub const MAX_CLASSES: usize = COLORS.len() * 2;

/// Class identity: a (color, shape) pair, unique per class. The first four
/// classes get distinct colors with alternating shapes; classes 4-7 reuse
/// the colors with the shapes flipped.
pub fn class_style(class: usize) -> ([f64; 3], usize) {
    let color = COLORS[class % COLORS.len()];
    let shape = (class % 2) ^ (class / COLORS.len());
    (color, shape)
}

const MIN_OBJ: usize = 18;
const MAX_OBJ: usize = 28;

fn paint(data: &mut [f64], w: usize, h: usize, x: usize, y: usize, rgb: [f64; 3]) {
    for (ch, v) in rgb.iter().enumerate() {
        data[(ch * h + y) * w + x] = *v;
    }
}

/// Render a scene with 1-3 non-overlapping shapes in the colors and shapes
/// of [`class_style`]. Deterministic given the rng state. `classes` must be
/// in `1..=MAX_CLASSES`; `h`, `w` at least 32 and divisible by 4.
pub fn generate_scene<R: Rng>(rng: &mut R, classes: usize, h: usize, w: usize) -> SyntheticScene {
    assert!(
        (1..=MAX_CLASSES).contains(&classes),
        "class count {classes} outside 1..={MAX_CLASSES}"
    );
    assert!(h >= 32 && w >= 32 && h % 4 == 0 && w % 4 == 0, "bad scene size {h}x{w}");

    // dim, lightly noisy gray background, well below object intensities
    let mut data = vec![0.0; 3 * h * w];
    for v in data.iter_mut() {
        *v = 0.15 + (rng.random::<f64>() - 0.5) * 0.1;
    }

    let n_objects = rng.random_range(1..=3usize);
    let mut objects: Vec<(usize, BBox)> = Vec::new();
    let max_side = MAX_OBJ.min(h / 2).min(w / 2).max(MIN_OBJ);
    'obj: for _ in 0..n_objects {
        for _attempt in 0..40 {
            let class = rng.random_range(0..classes);
            let s = rng.random_range(MIN_OBJ..=max_side);
            let x0 = rng.random_range(0..=w - s);
            let y0 = rng.random_range(0..=h - s);
            // require a 2px gap to every existing object
            let clear = objects.iter().all(|(_, b)| {
                let gx = x0 as f64 - 2.0;
                let gy = y0 as f64 - 2.0;
                let gx2 = (x0 + s) as f64 + 2.0;
                let gy2 = (y0 + s) as f64 + 2.0;
                gx2 <= b.x1 || gx >= b.x2 || gy2 <= b.y1 || gy >= b.y2
            });
            if !clear {
                continue;
            }
            let (base, shape) = class_style(class);
            // small per-object brightness jitter, keeping lit channels
            // >= 0.79, gray bodies in [0.49, 0.61], and dark channels at 0.05
            let jitter = (rng.random::<f64>() - 0.5) * 0.12;
            let body: [f64; 3] = std::array::from_fn(|ch| {
                if base[ch] > 0.5 {
                    base[ch] + jitter
                } else {
                    base[ch]
                }
            });
            let cx = x0 as f64 + s as f64 / 2.0;
            let cy = y0 as f64 + s as f64 / 2.0;
            let r2 = (s as f64 / 2.0) * (s as f64 / 2.0);
            for py in y0..y0 + s {
                for px in x0..x0 + s {
                    let inside = match shape {
                        0 => true,
                        _ => {
                            let dx = px as f64 + 0.5 - cx;
                            let dy = py as f64 + 0.5 - cy;
                            dx * dx + dy * dy <= r2
                        }
                    };
                    if inside {
                        paint(&mut data, w, h, px, py, body);
                    }
                }
            }
            objects.push((
                class,
                BBox::new(x0 as f64, y0 as f64, (x0 + s) as f64, (y0 + s) as f64),
            ));
            continue 'obj;
        }
        // crowded image: settle for however many objects fit so far
        break;
    }
    assert!(!objects.is_empty(), "placement failed for the first object");

    let mut image_labels = vec![0.0; classes];
    for (c, _) in &objects {
        image_labels[*c] = 1.0;
    }
    SyntheticScene {
        image: Tensor::from_vec(vec![3, h, w], data).expect("scene tensor"),
        objects,
        image_labels,
    }
}

/// Dense multi-scale sliding-window proposals, clipped and deduplicated.
/// Aspect ratio is width/height; boxes are `round(s*sqrt(a))` wide and
/// `round(s/sqrt(a))` tall. Errors when no box fits.
pub fn grid_proposals(
    h: usize,
    w: usize,
    scales: &[usize],
    aspect_ratios: &[f64],
    stride: usize,
) -> Result<Vec<BBox>, DataError> {
    if stride == 0 {
        return Err(DataError::BadParams("stride must be positive".into()));
    }
    if scales.is_empty() || aspect_ratios.is_empty() {
        return Err(DataError::DegenerateProposals);
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for &s in scales {
        for &a in aspect_ratios {
            if s == 0 || a <= 0.0 {
                return Err(DataError::BadParams(format!("bad scale/ratio {s}/{a}")));
            }
            let bw = ((s as f64 * a.sqrt()).round() as usize).max(1);
            let bh = ((s as f64 / a.sqrt()).round() as usize).max(1);
            if bw > w || bh > h {
                continue;
            }
            let mut y0 = 0;
            while y0 + bh <= h {
                let mut x0 = 0;
                while x0 + bw <= w {
                    if seen.insert((x0, y0, x0 + bw, y0 + bh)) {
                        out.push(BBox::new(
                            x0 as f64,
                            y0 as f64,
                            (x0 + bw) as f64,
                            (y0 + bh) as f64,
                        ));
                    }
                    x0 += stride;
                }
                y0 += stride;
            }
        }
    }
    if out.is_empty() {
        return Err(DataError::DegenerateProposals);
    }
    Ok(out)
}

/// Mirror a `[3, H, W]` image horizontally.
pub fn flip_image_h(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut data = vec![0.0; src.len()];
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data).expect("flip tensor")
}

/// Mirror a whole scene (image and boxes).
pub fn flip_scene_h(scene: &SyntheticScene) -> SyntheticScene {
    let w = scene.image.shape()[2] as f64;
    SyntheticScene {
        image: flip_image_h(&scene.image),
        objects: scene.objects.iter().map(|(c, b)| (*c, b.flip_h(w))).collect(),
        image_labels: scene.image_labels.clone(),
    }
}

/// A directory-backed set of scenes with shared geometry.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<SyntheticScene>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

const IMG_MAGIC: &str = "wsodimg";

fn scene_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("scene_{i:04}.img")), dir.join(format!("scene_{i:04}.txt")))
}

/// Write `n` generated scenes plus a `meta.txt` into `dir`.
pub fn write_dataset<R: Rng>(
    dir: &Path,
    n: usize,
    classes: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::Io(dir.to_path_buf(), e))?;
    for i in 0..n {
        let scene = generate_scene(rng, classes, h, w);
        let (img_path, ann_path) = scene_paths(dir, i);
        let mut buf = Vec::with_capacity(32 + scene.image.numel() * 8);
        buf.extend_from_slice(format!("{IMG_MAGIC} 3 {h} {w}\n").as_bytes());
        for v in scene.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&img_path, buf).map_err(|e| DataError::Io(img_path.clone(), e))?;
        let mut ann = String::new();
        for (c, b) in &scene.objects {
            ann.push_str(&format!("{c} {} {} {} {}\n", b.x1, b.y1, b.x2, b.y2));
        }
        fs::write(&ann_path, ann).map_err(|e| DataError::Io(ann_path.clone(), e))?;
    }
    let meta = format!("n = {n}\nclasses = {classes}\nheight = {h}\nwidth = {w}\n");
    let meta_path = dir.join("meta.txt");
    fs::write(&meta_path, meta).map_err(|e| DataError::Io(meta_path, e))
}

fn parse_meta(path: &Path) -> Result<(usize, usize, usize, usize), DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io(path.to_path_buf(), e))?;
    let mut n = None;
    let mut classes = None;
    let mut height = None;
    let mut width = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::Parse(path.to_path_buf(), format!("bad line {line:?}")))?;
        let v: usize = v.trim().parse().map_err(|_| {
            DataError::Parse(path.to_path_buf(), format!("bad value in {line:?}"))
        })?;
        match k.trim() {
            "n" => n = Some(v),
            "classes" => classes = Some(v),
            "height" => height = Some(v),
            "width" => width = Some(v),
            other => {
                return Err(DataError::Parse(path.to_path_buf(), format!("unknown key {other:?}")))
            }
        }
    }
    match (n, classes, height, width) {
        (Some(n), Some(c), Some(h), Some(w)) => Ok((n, c, h, w)),
        _ => Err(DataError::Parse(path.to_path_buf(), "missing meta keys".into())),
    }
}

/// Load a dataset directory written by [`write_dataset`]. Every scene must
/// have both its image and its annotation file.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let (n, classes, h, w) = parse_meta(&dir.join("meta.txt"))?;
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let (img_path, ann_path) = scene_paths(dir, i);
        let bytes = fs::read(&img_path).map_err(|e| DataError::Io(img_path.clone(), e))?;
        let header_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DataError::Parse(img_path.clone(), "missing header".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| DataError::Parse(img_path.clone(), "non-utf8 header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != IMG_MAGIC {
            return Err(DataError::Parse(img_path.clone(), format!("bad header {header:?}")));
        }
        let (fh, fw): (usize, usize) = (
            fields[2].parse().map_err(|_| {
                DataError::Parse(img_path.clone(), "bad height".into())
            })?,
            fields[3].parse().map_err(|_| DataError::Parse(img_path.clone(), "bad width".into()))?,
        );
        if fields[1] != "3" || fh != h || fw != w {
            return Err(DataError::Parse(
                img_path.clone(),
                format!("geometry {header:?} disagrees with meta {h}x{w}"),
            ));
        }
        let payload = &bytes[header_end + 1..];
        let want = 3 * h * w * 8;
        if payload.len() != want {
            return Err(DataError::Parse(
                img_path.clone(),
                format!("payload is {} bytes, expected {want}", payload.len()),
            ));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for chunk in payload.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let image = Tensor::from_vec(vec![3, h, w], data)
            .map_err(|e| DataError::Parse(img_path.clone(), e.to_string()))?;

        let ann = fs::read_to_string(&ann_path).map_err(|e| DataError::Io(ann_path.clone(), e))?;
        let mut objects = Vec::new();
        for line in ann.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 5 {
                return Err(DataError::Parse(
                    ann_path.clone(),
                    format!("annotation line needs 5 fields: {line:?}"),
                ));
            }
            let class: usize = parts[0].parse().map_err(|_| {
                DataError::Parse(ann_path.clone(), format!("bad class in {line:?}"))
            })?;
            if class >= classes {
                return Err(DataError::Parse(
                    ann_path.clone(),
                    format!("class {class} out of range 0..{classes}"),
                ));
            }
            let mut coords = [0.0f64; 4];
            for (slot, p) in coords.iter_mut().zip(&parts[1..]) {
                *slot = p.parse().map_err(|_| {
                    DataError::Parse(ann_path.clone(), format!("bad coordinate in {line:?}"))
                })?;
            }
            objects.push((class, BBox::new(coords[0], coords[1], coords[2], coords[3])));
        }
        let mut image_labels = vec![0.0; classes];
        for (c, _) in &objects {
            image_labels[*c] = 1.0;
        }
        scenes.push(SyntheticScene { image, objects, image_labels });
    }
    Ok(Dataset { scenes, classes, height: h, width: w })
}
