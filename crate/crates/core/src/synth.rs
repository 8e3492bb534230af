//! Procedural training and reference clips with exact motion ground truth.
//!
//! Four motion kinds over random smooth textures: `static` (no motion),
//! `translate` (a textured square slides over a static background), `pan`
//! (the whole view slides across a larger texture) and `rotate` (a patterned
//! disc spins). Textures are drawn per clip so appearance and motion are
//! uncorrelated. Translate and pan use integer per-frame displacements, so
//! shift registration against the truth is exact.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::rng;
use crate::tensor::{io as tio, Tensor};

pub const KINDS: [MotionKind; 4] =
    [MotionKind::Static, MotionKind::Translate, MotionKind::Pan, MotionKind::Rotate];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    Static,
    Translate,
    Pan,
    Rotate,
}

impl MotionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MotionKind::Static => "static",
            MotionKind::Translate => "translate",
            MotionKind::Pan => "pan",
            MotionKind::Rotate => "rotate",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        KINDS
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion kind {s:?}")))
    }

    /// Condition class id; 0 is reserved for the null token.
    pub fn class_id(&self) -> u32 {
        match self {
            MotionKind::Static => 1,
            MotionKind::Translate => 2,
            MotionKind::Pan => 3,
            MotionKind::Rotate => 4,
        }
    }
}

/// Geometry shared by every clip of a dataset.
#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub frames: usize,
    pub size: usize,
    pub channels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { frames: 8, size: 32, channels: 1 }
    }
}

/// Kind-specific motion parameters.
#[derive(Clone, Copy, Debug)]
pub struct MotionParams {
    /// Per-frame displacement in pixels (translate: object, pan: content).
    pub speed: (i32, i32),
    /// Radians per frame for rotate.
    pub rate: f32,
    /// Square side for translate.
    pub object_size: usize,
    /// Object top-left in frame 0 for translate.
    pub start: (i32, i32),
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams { speed: (2, 0), rate: 0.3, object_size: 12, start: (4, 10) }
    }
}

#[derive(Clone, Debug)]
pub struct VideoClip {
    /// `(f, ch, h, w)`, values in `[-1, 1]`.
    pub data: Tensor,
    pub id: String,
    pub class: u32,
}

#[derive(Clone, Debug)]
pub struct MotionTruth {
    pub kind: MotionKind,
    /// Per-frame displacement; `disp[0] == (0, 0)`, `disp[t]` moves frame
    /// t-1 content onto frame t.
    pub disp: Vec<(i32, i32)>,
    /// Object center per frame (translate only).
    pub centroid: Option<Vec<(f32, f32)>>,
    pub object_size: Option<usize>,
}

impl MotionTruth {
    /// True when every displacement is zero.
    pub fn is_static(&self) -> bool {
        self.disp.iter().all(|&d| d == (0, 0))
    }
}

/// Random texture: uniform noise smoothed by repeated 3x3 box blurs, then
/// rescaled to a fixed amplitude.
fn smooth_texture(h: usize, w: usize, passes: usize, amplitude: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut tex: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut tmp = vec![0.0f32; h * w];
    for _ in 0..passes {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                let mut cnt = 0.0f32;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let yy = y as i32 + dy;
                        let xx = x as i32 + dx;
                        if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                            acc += tex[yy as usize * w + xx as usize];
                            cnt += 1.0;
                        }
                    }
                }
                tmp[y * w + x] = acc / cnt;
            }
        }
        std::mem::swap(&mut tex, &mut tmp);
    }
    let max = tex.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
    for v in tex.iter_mut() {
        *v = *v / max * amplitude;
    }
    tex
}

/// Renders one clip. Deterministic in `(cfg, kind, params, seed)`.
pub fn gen_clip(
    cfg: &SynthConfig,
    kind: MotionKind,
    params: &MotionParams,
    seed: u64,
) -> Result<(VideoClip, MotionTruth)> {
    let (f, s) = (cfg.frames, cfg.size);
    if f < 2 {
        return Err(Error::Config(format!("clip needs >= 2 frames, got {f}")));
    }
    let mut rng = rng::stream(seed, &format!("clip.{}", kind.as_str()));
    let mut frames = vec![0.0f32; f * cfg.channels * s * s];
    let mut disp = vec![(0i32, 0i32); f];
    let mut centroid = None;
    let mut object_size = None;

    // one blur pass keeps enough high-frequency detail that frames only
    // match under the true alignment; spatial smoothing alone cannot
    // reproduce the texture, which is what makes cross-frame attention
    // worth learning
    match kind {
        MotionKind::Static => {
            let tex = smooth_texture(s, s, 1, 0.9, &mut rng);
            for t in 0..f {
                frames[t * s * s..(t + 1) * s * s].copy_from_slice(&tex);
            }
        }
        MotionKind::Pan => {
            // Camera pans over a texture large enough that every window is valid.
            let (dx, dy) = params.speed;
            if dx == 0 && dy == 0 {
                return Err(Error::Config("pan needs nonzero speed".into()));
            }
            let span_x = dx.unsigned_abs() as usize * (f - 1);
            let span_y = dy.unsigned_abs() as usize * (f - 1);
            let (th, tw) = (s + span_y, s + span_x);
            let tex = smooth_texture(th, tw, 1, 0.9, &mut rng);
            // content displacement (dx, dy): frame_t(x, y) = frame_0(x - t*dx, y - t*dy)
            let x0 = if dx > 0 { span_x as i32 } else { 0 };
            let y0 = if dy > 0 { span_y as i32 } else { 0 };
            for t in 0..f {
                let ox = x0 - dx * t as i32;
                let oy = y0 - dy * t as i32;
                if ox < 0 || oy < 0 || ox as usize + s > tw || oy as usize + s > th {
                    return Err(Error::Config("pan trajectory leaves texture".into()));
                }
                for y in 0..s {
                    for x in 0..s {
                        frames[t * s * s + y * s + x] =
                            tex[(oy as usize + y) * tw + ox as usize + x];
                    }
                }
                if t > 0 {
                    disp[t] = (dx, dy);
                }
            }
        }
        MotionKind::Translate => {
            let (dx, dy) = params.speed;
            if dx == 0 && dy == 0 {
                return Err(Error::Config("translate needs nonzero speed".into()));
            }
            let os = params.object_size;
            if os < 2 || os >= s {
                return Err(Error::Config(format!("object size {os} out of range for frame {s}")));
            }
            let bg = smooth_texture(s, s, 1, 0.6, &mut rng);
            let obj = smooth_texture(os, os, 0, 0.95, &mut rng);
            let mut track = Vec::with_capacity(f);
            for t in 0..f {
                let px = params.start.0 + dx * t as i32;
                let py = params.start.1 + dy * t as i32;
                if px < 0 || py < 0 || px as usize + os > s || py as usize + os > s {
                    return Err(Error::Config(format!(
                        "object leaves frame at t={t} (pos {px},{py})"
                    )));
                }
                frames[t * s * s..(t + 1) * s * s].copy_from_slice(&bg);
                for y in 0..os {
                    for x in 0..os {
                        frames[t * s * s + (py as usize + y) * s + px as usize + x] =
                            obj[y * os + x];
                    }
                }
                track.push((px as f32 + os as f32 / 2.0, py as f32 + os as f32 / 2.0));
                if t > 0 {
                    disp[t] = (dx, dy);
                }
            }
            centroid = Some(track);
            object_size = Some(os);
        }
        MotionKind::Rotate => {
            if params.rate == 0.0 {
                return Err(Error::Config("rotate needs nonzero rate".into()));
            }
            let bg = smooth_texture(s, s, 1, 0.5, &mut rng);
            let spokes: Vec<f32> = {
                // 1-d angular pattern, smoothed on a ring
                let n = 64;
                let raw: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                (0..n)
                    .map(|i| {
                        0.9 * (raw[(i + n - 1) % n] + raw[i] + raw[(i + 1) % n]) / 3.0
                    })
                    .collect()
            };
            let c = (s as f32 - 1.0) / 2.0;
            let radius = s as f32 * 0.4;
            let mut rim = Vec::with_capacity(f);
            for t in 0..f {
                let theta = params.rate * t as f32;
                for y in 0..s {
                    for x in 0..s {
                        let (ry, rx) = (y as f32 - c, x as f32 - c);
                        let r = (rx * rx + ry * ry).sqrt();
                        let idx = t * s * s + y * s + x;
                        if r <= radius {
                            let phi = ry.atan2(rx) - theta;
                            let bin = ((phi / (2.0 * std::f32::consts::PI)
                                * spokes.len() as f32)
                                .rem_euclid(spokes.len() as f32))
                                as usize;
                            let fade = 0.3 + 0.7 * (r / radius);
                            frames[idx] = spokes[bin.min(spokes.len() - 1)] * fade;
                        } else {
                            frames[idx] = bg[y * s + x];
                        }
                    }
                }
                let rr = radius - 2.0;
                rim.push((c + rr * theta.cos(), c + rr * theta.sin()));
            }
            for t in 1..f {
                disp[t] = (
                    (rim[t].0 - rim[t - 1].0).round() as i32,
                    (rim[t].1 - rim[t - 1].1).round() as i32,
                );
            }
        }
    }

    debug_assert!(frames.iter().all(|v| (-1.0..=1.0).contains(v)));
    let data = Tensor::new(vec![f, cfg.channels, s, s], frames)?;
    let clip = VideoClip {
        data,
        id: format!("{}-s{}", kind.as_str(), seed),
        class: kind.class_id(),
    };
    Ok((clip, MotionTruth { kind, disp, centroid, object_size }))
}

/// Draws randomized params for one clip of the given kind.
pub fn random_params(cfg: &SynthConfig, kind: MotionKind, rng: &mut ChaCha8Rng) -> MotionParams {
    let mut p = MotionParams::default();
    match kind {
        MotionKind::Static => {}
        MotionKind::Pan | MotionKind::Translate => {
            let dirs: [(i32, i32); 8] =
                [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
            let (ux, uy) = dirs[rng.gen_range(0..dirs.len())];
            let speed = rng.gen_range(1..=2);
            p.speed = (ux * speed, uy * speed);
            if kind == MotionKind::Translate {
                // shrink the object and speed until the trajectory fits
                p.object_size = rng.gen_range(10..=14).min(cfg.size / 2).max(2);
                let free = cfg.size - p.object_size;
                let max_speed = (free / (cfg.frames - 1)).clamp(1, 2) as i32;
                p.speed = (ux * speed.min(max_speed), uy * speed.min(max_speed));
                let span = |d: i32| d.unsigned_abs() as usize * (cfg.frames - 1);
                let free_x = free - span(p.speed.0);
                let free_y = free - span(p.speed.1);
                let sx = rng.gen_range(0..=free_x) as i32;
                let sy = rng.gen_range(0..=free_y) as i32;
                p.start = (
                    if p.speed.0 < 0 { sx + span(p.speed.0) as i32 } else { sx },
                    if p.speed.1 < 0 { sy + span(p.speed.1) as i32 } else { sy },
                );
            }
        }
        MotionKind::Rotate => {
            let mag = rng.gen_range(0.2..0.5);
            p.rate = if rng.gen_bool(0.5) { mag } else { -mag };
        }
    }
    p
}

// ── Dataset on disk ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub id: String,
    pub class: u32,
    pub kind: MotionKind,
    pub clip_path: PathBuf,
    pub truth_path: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

/// Generates `per_class` clips for each motion kind and writes clips, truth
/// files and a manifest under `dir`.
pub fn gen_dataset(cfg: &SynthConfig, per_class: usize, seed: u64, dir: &Path) -> Result<Dataset> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut items = Vec::new();
    for kind in KINDS {
        for i in 0..per_class {
            let clip_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add(kind.class_id() as u64 * 10_000 + i as u64);
            let mut prng = rng::stream(clip_seed, "params");
            let params = random_params(cfg, kind, &mut prng);
            let (clip, truth) = gen_clip(cfg, kind, &params, clip_seed)?;
            let id = format!("{}-{i:03}", kind.as_str());
            let clip_path = dir.join(format!("{id}.mclt"));
            let truth_path = dir.join(format!("{id}.truth.txt"));
            tio::write_tensor(&clip_path, &clip.data)?;
            write_truth(&truth_path, &truth)?;
            items.push(DatasetItem { id, class: kind.class_id(), kind, clip_path, truth_path });
        }
    }
    let ds = Dataset { items };
    ds.write_manifest(&dir.join("manifest.txt"))?;
    Ok(ds)
}

impl Dataset {
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut kv = KvFile::new();
        kv.set("count", self.items.len());
        for (i, item) in self.items.iter().enumerate() {
            kv.set(
                format!("clip.{i}"),
                format!(
                    "{}\t{}\t{}\t{}\t{}",
                    item.id,
                    item.class,
                    item.kind.as_str(),
                    file_name(&item.clip_path),
                    file_name(&item.truth_path),
                ),
            );
        }
        kv.write(path)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.txt");
        let kv = KvFile::read(&path)?;
        let count: usize = kv.parse(&path, "count")?;
        let mut items = Vec::with_capacity(count);
        for i in 0..count {
            let line = kv.require(&path, &format!("clip.{i}"))?;
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 5 {
                return Err(Error::manifest(&path, format!("clip.{i}: expected 5 fields")));
            }
            items.push(DatasetItem {
                id: parts[0].to_string(),
                class: parts[1]
                    .parse()
                    .map_err(|_| Error::manifest(&path, format!("clip.{i}: bad class")))?,
                kind: MotionKind::from_str(parts[2])?,
                clip_path: dir.join(parts[3]),
                truth_path: dir.join(parts[4]),
            });
        }
        Ok(Dataset { items })
    }

    pub fn load_clip(&self, item: &DatasetItem) -> Result<VideoClip> {
        let data = tio::read_tensor(&item.clip_path)?;
        Ok(VideoClip { data, id: item.id.clone(), class: item.class })
    }

    pub fn find(&self, id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|it| it.id == id)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Truth file: `# key=value` headers followed by one `t dx dy` line per frame.
pub fn write_truth(path: &Path, truth: &MotionTruth) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# kind={}\n", truth.kind.as_str()));
    if let Some(os) = truth.object_size {
        out.push_str(&format!("# object_size={os}\n"));
    }
    if let Some(track) = &truth.centroid {
        let joined: Vec<String> =
            track.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        out.push_str(&format!("# centroid={}\n", joined.join(";")));
    }
    for (t, (dx, dy)) in truth.disp.iter().enumerate() {
        out.push_str(&format!("{t} {dx} {dy}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<MotionTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kind = None;
    let mut centroid = None;
    let mut object_size = None;
    let mut disp = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some((k, v)) = rest.split_once('=') {
                match k.trim() {
                    "kind" => kind = Some(MotionKind::from_str(v.trim())?),
                    "object_size" => {
                        object_size = Some(v.trim().parse().map_err(|_| {
                            Error::manifest(path, format!("bad object_size {v:?}"))
                        })?)
                    }
                    "centroid" => {
                        let mut track = Vec::new();
                        for pair in v.trim().split(';') {
                            let (x, y) = pair.split_once(',').ok_or_else(|| {
                                Error::manifest(path, format!("bad centroid pair {pair:?}"))
                            })?;
                            track.push((
                                x.parse().map_err(|_| Error::manifest(path, "bad centroid x"))?,
                                y.parse().map_err(|_| Error::manifest(path, "bad centroid y"))?,
                            ));
                        }
                        centroid = Some(track);
                    }
                    _ => {}
                }
            }
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::manifest(path, format!("expected `t dx dy`, got {line:?}")));
        }
        let t: usize =
            parts[0].parse().map_err(|_| Error::manifest(path, "bad frame index"))?;
        if t != disp.len() {
            return Err(Error::manifest(path, format!("out-of-order frame index {t}")));
        }
        disp.push((
            parts[1].parse().map_err(|_| Error::manifest(path, "bad dx"))?,
            parts[2].parse().map_err(|_| Error::manifest(path, "bad dy"))?,
        ));
    }
    let kind = kind.ok_or_else(|| Error::manifest(path, "missing `# kind=` header"))?;
    Ok(MotionTruth { kind, disp, centroid, object_size })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig::default()
    }

    #[test]
    fn static_clip_has_identical_frames_and_zero_truth() {
        let (clip, truth) =
            gen_clip(&cfg(), MotionKind::Static, &MotionParams::default(), 3).unwrap();
        let s = 32 * 32;
        let d = clip.data.data();
        for t in 1..8 {
            assert_eq!(&d[..s], &d[t * s..(t + 1) * s]);
        }
        assert!(truth.is_static());
        assert_eq!(truth.disp.len(), 8);
    }

    #[test]
    fn translate_centroid_tracks_construction() {
        let p = MotionParams { speed: (1, 0), object_size: 10, start: (2, 8), ..Default::default() };
        let (_, truth) = gen_clip(&cfg(), MotionKind::Translate, &p, 5).unwrap();
        let track = truth.centroid.unwrap();
        for (t, (cx, cy)) in track.iter().enumerate() {
            assert_eq!(*cx, 2.0 + t as f32 + 5.0);
            assert_eq!(*cy, 8.0 + 5.0);
        }
        assert_eq!(truth.disp[1..].iter().filter(|&&d| d == (1, 0)).count(), 7);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let p = MotionParams::default();
        for kind in KINDS {
            let (a, _) = gen_clip(&cfg(), kind, &p, 42).unwrap();
            let (b, _) = gen_clip(&cfg(), kind, &p, 42).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data), "{kind:?}");
            let (c, _) = gen_clip(&cfg(), kind, &p, 43).unwrap();
            if kind != MotionKind::Static {
                assert_ne!(bits(&a.data), bits(&c.data));
            }
        }
    }

    #[test]
    fn values_stay_in_range_for_all_kinds() {
        for kind in KINDS {
            for seed in 0..4 {
                let mut prng = rng::stream(seed, "params");
                let p = random_params(&cfg(), kind, &mut prng);
                let (clip, _) = gen_clip(&cfg(), kind, &p, seed).unwrap();
                assert!(clip.data.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn pan_satisfies_shift_identity_inside_valid_region() {
        let p = MotionParams { speed: (2, 1), ..Default::default() };
        let (clip, truth) = gen_clip(&cfg(), MotionKind::Pan, &p, 9).unwrap();
        let s = 32;
        let d = clip.data.data();
        for t in 1..8usize {
            let (sx, sy): (i32, i32) =
                truth.disp[1..=t].iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            for y in 0..s as i32 {
                for x in 0..s as i32 {
                    let (ox, oy) = (x - sx, y - sy);
                    if ox >= 0 && ox < s as i32 && oy >= 0 && oy < s as i32 {
                        assert_eq!(
                            d[t * s * s + y as usize * s + x as usize],
                            d[oy as usize * s + ox as usize],
                            "t={t} ({x},{y})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_frame_trajectory_is_an_error() {
        let p = MotionParams { speed: (4, 0), object_size: 12, start: (10, 10), ..Default::default() };
        assert!(gen_clip(&cfg(), MotionKind::Translate, &p, 1).is_err());
    }

    #[test]
    fn dataset_round_trip_and_balance() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&cfg(), 2, 7, dir.path()).unwrap();
        assert_eq!(ds.items.len(), 8);
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.items.len(), 8);
        for kind in KINDS {
            assert_eq!(back.items.iter().filter(|i| i.kind == kind).count(), 2);
        }
        let clip = back.load_clip(&back.items[0]).unwrap();
        assert_eq!(clip.data.dims(), &[8, 1, 32, 32]);
        let tr = back.items.iter().find(|i| i.kind == MotionKind::Translate).unwrap();
        let truth = read_truth(&tr.truth_path).unwrap();
        assert_eq!(truth.kind, MotionKind::Translate);
        assert!(truth.centroid.is_some());
        assert!(truth.object_size.is_some());
    }

    #[test]
    fn empty_dataset_has_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&cfg(), 0, 7, dir.path()).unwrap();
        assert!(ds.items.is_empty());
        let back = Dataset::load(dir.path()).unwrap();
        assert!(back.items.is_empty());
        assert!(!dir.path().join("static-000.mclt").exists());
    }

    #[test]
    fn truth_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let truth = MotionTruth {
            kind: MotionKind::Translate,
            disp: vec![(0, 0), (2, -1), (2, -1)],
            centroid: Some(vec![(5.0, 6.0), (7.0, 5.0), (9.0, 4.0)]),
            object_size: Some(10),
        };
        write_truth(&path, &truth).unwrap();
        let back = read_truth(&path).unwrap();
        assert_eq!(back.kind, MotionKind::Translate);
        assert_eq!(back.disp, truth.disp);
        assert_eq!(back.object_size, Some(10));
        assert_eq!(back.centroid.unwrap().len(), 3);
    }
}
