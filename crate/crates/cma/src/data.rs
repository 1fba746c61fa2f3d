//! Synthetic motion-texture binding dataset.
//!
//! Every video shows a few identical disc silhouettes with distinct
//! procedural textures; exactly one disc translates at constant velocity
//! and the label is the texture index of the moving disc. Optical flow is
//! analytic (no estimation), so flow carries location but never texture:
//! a flow-only classifier is stuck near chance, and late score fusion
//! cannot bind texture to motion — feature-level fusion can.

use crate::tensor::Tensor;
use crate::{CmaError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const FLOW_STACK_LEN: usize = 5;
pub const FLOW_CHANNELS: usize = 2 * FLOW_STACK_LEN;
const MAGIC: &[u8; 4] = b"CMAD";
const VERSION: u32 = 1;

/// Scene geometry kept alongside each video for oracle checks; never
/// serialized.
#[derive(Debug, Clone)]
pub struct SceneDescriptor {
    /// Disc centers at t=0, (cx, cy) in pixels.
    pub centers: Vec<(f64, f64)>,
    /// Texture class per disc.
    pub textures: Vec<usize>,
    /// Index into `centers` of the single moving disc.
    pub mover: usize,
    /// Pixels per frame.
    pub velocity: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct VideoSample {
    /// `[T, H, W, 3]`, values in [0, 1].
    pub frames: Tensor,
    /// `[T-1, H, W, 2]`, raw (u, v) in pixels/frame, pre-clamp.
    pub flows: Tensor,
    pub label: usize,
    pub scene: Option<SceneDescriptor>,
}

/// One sampled input unit: 1 RGB frame + 5 stacked preprocessed flow fields.
#[derive(Debug, Clone)]
pub struct Snippet {
    /// `[H, W, 3]`, the frame at the stack's first index.
    pub rgb: Tensor,
    /// `[H, W, 10]`, channel-interleaved (u0, v0, u1, v1, ...), in [-1, 1].
    pub flow_stack: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<VideoSample>,
    pub height: usize,
    pub width: usize,
    pub frames_per_video: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub frames_per_video: usize,
    pub n_classes: usize,
    pub n_distractors: usize,
    pub radius: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub noise_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 32,
            width: 32,
            frames_per_video: 9,
            n_classes: 8,
            n_distractors: 2,
            radius: 5.0,
            speed_min: 0.8,
            speed_max: 1.5,
            noise_sigma: 0.02,
        }
    }
}

const N_TEXTURES: usize = 8;

/// Procedural texture value for class `k` at offset (dx, dy) from the disc
/// center. All textures live on identical silhouettes so shape never leaks
/// the class.
fn texture_rgb(class: usize, dx: f64, dy: f64, radius: f64) -> [f64; 3] {
    use std::f64::consts::PI;
    let p = match class {
        0 => (dy * 2.0 * PI / 3.0).sin(),
        1 => (dx * 2.0 * PI / 3.0).sin(),
        2 => ((dx + dy) * 2.0 * PI / 3.5).sin(),
        3 => ((dx * PI / 2.0).sin() * (dy * PI / 2.0).sin()).signum(),
        4 => ((dx * dx + dy * dy).sqrt() * 2.0 * PI / 3.0).sin(),
        5 => {
            let v = (dx * PI / 1.8).sin() * (dy * PI / 1.8).sin();
            (2.0 * v * v - 1.0).clamp(-1.0, 1.0)
        }
        6 => 2.0 * ((dx * dx + dy * dy).sqrt() / radius).min(1.0) - 1.0,
        _ => ((dx - dy) * 2.0 * PI / 3.5).sin(),
    };
    // per-class color pair, blended by the pattern
    const COLORS: [([f64; 3], [f64; 3]); N_TEXTURES] = [
        ([0.9, 0.1, 0.1], [0.1, 0.1, 0.9]),
        ([0.1, 0.9, 0.1], [0.9, 0.1, 0.9]),
        ([0.9, 0.9, 0.1], [0.1, 0.9, 0.9]),
        ([0.9, 0.5, 0.1], [0.1, 0.1, 0.5]),
        ([0.8, 0.1, 0.5], [0.1, 0.6, 0.1]),
        ([0.2, 0.2, 0.9], [0.9, 0.8, 0.2]),
        ([0.9, 0.9, 0.9], [0.1, 0.1, 0.1]),
        ([0.5, 0.9, 0.5], [0.6, 0.2, 0.8]),
    ];
    let (a, b) = COLORS[class % N_TEXTURES];
    let w = (p + 1.0) / 2.0;
    [
        a[0] * w + b[0] * (1.0 - w),
        a[1] * w + b[1] * (1.0 - w),
        a[2] * w + b[2] * (1.0 - w),
    ]
}

fn disc_center_at(scene: &SceneDescriptor, disc: usize, t: usize) -> (f64, f64) {
    let (cx, cy) = scene.centers[disc];
    if disc == scene.mover {
        (
            cx + scene.velocity.0 * t as f64,
            cy + scene.velocity.1 * t as f64,
        )
    } else {
        (cx, cy)
    }
}

/// Analytic optical flow between frames t and t+1: the moving disc's
/// velocity inside its support at time t, zero elsewhere.
pub fn analytic_flow(scene: &SceneDescriptor, cfg_h: usize, cfg_w: usize, t: usize) -> Tensor {
    let mut data = vec![0.0; cfg_h * cfg_w * 2];
    let (cx, cy) = disc_center_at(scene, scene.mover, t);
    let r2 = scene.radius * scene.radius;
    for py in 0..cfg_h {
        for px in 0..cfg_w {
            let dx = px as f64 - cx;
            let dy = py as f64 - cy;
            if dx * dx + dy * dy <= r2 {
                let i = (py * cfg_w + px) * 2;
                data[i] = scene.velocity.0;
                data[i + 1] = scene.velocity.1;
            }
        }
    }
    Tensor::new(vec![cfg_h, cfg_w, 2], data).unwrap()
}

/// Clamp raw flow to [-20, 20] pixels/frame, then rescale to [-1, 1].
pub fn preprocess_flow(raw: f64) -> f64 {
    raw.clamp(-20.0, 20.0) / 20.0
}

fn render_frame(
    scene: &SceneDescriptor,
    cfg: &GenConfig,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut data = vec![0.5; h * w * 3];
    let r2 = scene.radius * scene.radius;
    for py in 0..h {
        for px in 0..w {
            for (d, &tex) in scene.textures.iter().enumerate() {
                let (cx, cy) = disc_center_at(scene, d, t);
                let dx = px as f64 - cx;
                let dy = py as f64 - cy;
                if dx * dx + dy * dy <= r2 {
                    let rgb = texture_rgb(tex, dx, dy, scene.radius);
                    let i = (py * w + px) * 3;
                    data[i] = rgb[0];
                    data[i + 1] = rgb[1];
                    data[i + 2] = rgb[2];
                    break;
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, cfg.noise_sigma).unwrap();
        for v in data.iter_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    data
}

fn overlaps(a: (f64, f64), b: (f64, f64), radius: f64, margin: f64) -> bool {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt() < 2.0 * radius + margin
}

fn place_scene(cfg: &GenConfig, label: usize, rng: &mut ChaCha8Rng) -> Result<SceneDescriptor> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let r = cfg.radius;
    let t_last = (cfg.frames_per_video - 1) as f64;
    'outer: for _ in 0..200 {
        // mover: start plus velocity keeping the disc fully inside
        let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
        let x_lo = r + (-vx * t_last).max(0.0);
        let x_hi = (w - 1.0 - r) - (vx * t_last).max(0.0);
        let y_lo = r + (-vy * t_last).max(0.0);
        let y_hi = (h - 1.0 - r) - (vy * t_last).max(0.0);
        if x_lo >= x_hi || y_lo >= y_hi {
            continue;
        }
        let mover_start = (rng.gen_range(x_lo..x_hi), rng.gen_range(y_lo..y_hi));

        let mut centers = vec![mover_start];
        for _ in 0..cfg.n_distractors {
            let mut placed = false;
            'retry: for _ in 0..100 {
                let cand = (
                    rng.gen_range(r..w - 1.0 - r),
                    rng.gen_range(r..h - 1.0 - r),
                );
                // distractors must stay clear of the mover's whole path
                for t in 0..cfg.frames_per_video {
                    let mover_at = (mover_start.0 + vx * t as f64, mover_start.1 + vy * t as f64);
                    if overlaps(cand, mover_at, r, 1.0) {
                        continue 'retry;
                    }
                }
                for c in &centers[1..] {
                    if overlaps(cand, *c, r, 1.0) {
                        continue 'retry;
                    }
                }
                centers.push(cand);
                placed = true;
                break;
            }
            if !placed {
                continue 'outer;
            }
        }

        // mover gets the label's texture; distractors get other classes
        let mut textures = vec![label];
        let mut pool: Vec<usize> = (0..cfg.n_classes).filter(|&c| c != label).collect();
        for _ in 0..cfg.n_distractors {
            let pick = rng.gen_range(0..pool.len());
            textures.push(pool.swap_remove(pick));
        }
        return Ok(SceneDescriptor {
            centers,
            textures,
            mover: 0,
            velocity: (vx, vy),
            radius: r,
        });
    }
    Err(CmaError::Generation(format!(
        "could not place {} discs of radius {} in {}x{} after bounded retries",
        cfg.n_distractors + 1,
        cfg.radius,
        cfg.width,
        cfg.height
    )))
}

/// Round through f32 so the on-disk format (f32) round-trips bit-exactly
/// against the in-memory dataset.
fn quantize(data: &mut [f64]) {
    for v in data.iter_mut() {
        *v = *v as f32 as f64;
    }
}

pub fn generate_video(cfg: &GenConfig, label: usize, seed: u64) -> Result<VideoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = place_scene(cfg, label, &mut rng)?;
    let (h, w, t) = (cfg.height, cfg.width, cfg.frames_per_video);
    let mut frames = Vec::with_capacity(t * h * w * 3);
    for ti in 0..t {
        frames.extend(render_frame(&scene, cfg, ti, &mut rng));
    }
    let mut flows = Vec::with_capacity((t - 1) * h * w * 2);
    for ti in 0..t - 1 {
        flows.extend(analytic_flow(&scene, h, w, ti).into_data());
    }
    quantize(&mut frames);
    quantize(&mut flows);
    Ok(VideoSample {
        frames: Tensor::new(vec![t, h, w, 3], frames)?,
        flows: Tensor::new(vec![t - 1, h, w, 2], flows)?,
        label,
        scene: Some(scene),
    })
}

/// Generate a balanced dataset: labels round-robin (class histogram max-min
/// <= 1), one derived seed per video.
pub fn generate_binding_dataset(n_videos: usize, cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_classes > N_TEXTURES {
        return Err(CmaError::Config(format!(
            "n_classes {} exceeds available textures ({})",
            cfg.n_classes, N_TEXTURES
        )));
    }
    if cfg.frames_per_video < FLOW_STACK_LEN + 1 {
        return Err(CmaError::Config(format!(
            "frames_per_video {} too short for a {}-field flow stack",
            cfg.frames_per_video, FLOW_STACK_LEN
        )));
    }
    let mut videos = Vec::with_capacity(n_videos);
    for i in 0..n_videos {
        let label = i % cfg.n_classes;
        let vseed = seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(i as u64 + 1);
        videos.push(generate_video(cfg, label, vseed)?);
    }
    Ok(Dataset {
        videos,
        height: cfg.height,
        width: cfg.width,
        frames_per_video: cfg.frames_per_video,
        n_classes: cfg.n_classes,
    })
}

// ---------------------------------------------------------------------------
// snippet sampling and augmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Test,
}

/// TSN snippet sampling: the video is divided into K equal-duration
/// segments; train mode draws one random start per segment, test mode uses
/// segment centers. Starts are clamped so flow fields t..t+4 exist, and the
/// RGB frame is the frame at the stack's first index.
pub fn tsn_sample_snippets<R: Rng>(
    video: &VideoSample,
    k: usize,
    rng: &mut R,
    mode: SampleMode,
) -> Result<Vec<Snippet>> {
    let t = video.frames.shape()[0];
    if t < FLOW_STACK_LEN + 1 {
        return Err(CmaError::Param(format!(
            "video too short for flow stacks: T={}",
            t
        )));
    }
    if k == 0 {
        return Err(CmaError::Param("segment count K must be >= 1".into()));
    }
    let max_start = t - 1 - FLOW_STACK_LEN; // last valid flow-stack start
    let mut out = Vec::with_capacity(k);
    for s in 0..k {
        let lo = s * t / k;
        let hi = (s + 1) * t / k; // exclusive
        let idx = match mode {
            SampleMode::Train => rng.gen_range(lo..hi),
            SampleMode::Test => (lo + hi - 1) / 2,
        };
        let start = idx.min(max_start);
        out.push(snippet_at(video, start)?);
    }
    Ok(out)
}

/// Snippet whose RGB frame is `frames[start]` and whose flow stack is
/// flows `start..start+5`, preprocessed and channel-interleaved.
pub fn snippet_at(video: &VideoSample, start: usize) -> Result<Snippet> {
    let shape = video.frames.shape();
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    if start + FLOW_STACK_LEN > t - 1 {
        return Err(CmaError::Index(format!(
            "flow stack start {} out of range for T={}",
            start, t
        )));
    }
    let fd = video.frames.data();
    let rgb = fd[start * h * w * 3..(start + 1) * h * w * 3].to_vec();
    let fl = video.flows.data();
    let mut stack = vec![0.0; h * w * FLOW_CHANNELS];
    for s in 0..FLOW_STACK_LEN {
        let field = &fl[(start + s) * h * w * 2..(start + s + 1) * h * w * 2];
        for p in 0..h * w {
            stack[p * FLOW_CHANNELS + 2 * s] = preprocess_flow(field[p * 2]);
            stack[p * FLOW_CHANNELS + 2 * s + 1] = preprocess_flow(field[p * 2 + 1]);
        }
    }
    Ok(Snippet {
        rgb: Tensor::new(vec![h, w, 3], rgb)?,
        flow_stack: Tensor::new(vec![h, w, FLOW_CHANNELS], stack)?,
        label: video.label,
    })
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Crop extent; must not exceed the frame size. Equal to the frame size
    /// means no cropping.
    pub crop: usize,
}

/// Identical geometric transform on RGB and all flow channels; horizontal
/// flips additionally negate every u channel.
pub fn augment<R: Rng>(snippet: &Snippet, rng: &mut R, cfg: &AugmentConfig) -> Result<Snippet> {
    let shape = snippet.rgb.shape();
    let (h, w) = (shape[0], shape[1]);
    if cfg.crop > h || cfg.crop > w {
        return Err(CmaError::Param(format!(
            "crop {} larger than frame {}x{}",
            cfg.crop, h, w
        )));
    }
    let c = cfg.crop;
    let oy = if h > c { rng.gen_range(0..=h - c) } else { 0 };
    let ox = if w > c { rng.gen_range(0..=w - c) } else { 0 };
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    Ok(transform_snippet(snippet, oy, ox, c, flip))
}

/// Deterministic crop + optional horizontal flip.
pub fn transform_snippet(snippet: &Snippet, oy: usize, ox: usize, crop: usize, flip: bool) -> Snippet {
    let shape = snippet.rgb.shape();
    let w = shape[1];
    let rgb_src = snippet.rgb.data();
    let flow_src = snippet.flow_stack.data();
    let mut rgb = vec![0.0; crop * crop * 3];
    let mut flow = vec![0.0; crop * crop * FLOW_CHANNELS];
    for y in 0..crop {
        for x in 0..crop {
            let sx = if flip { ox + crop - 1 - x } else { ox + x };
            let sp = (oy + y) * w + sx;
            let dp = y * crop + x;
            rgb[dp * 3..dp * 3 + 3].copy_from_slice(&rgb_src[sp * 3..sp * 3 + 3]);
            for ch in 0..FLOW_CHANNELS {
                let v = flow_src[sp * FLOW_CHANNELS + ch];
                // even channels are u; flipping mirrors + negates them
                flow[dp * FLOW_CHANNELS + ch] = if flip && ch % 2 == 0 { -v } else { v };
            }
        }
    }
    Snippet {
        rgb: Tensor::new(vec![crop, crop, 3], rgb).unwrap(),
        flow_stack: Tensor::new(vec![crop, crop, FLOW_CHANNELS], flow).unwrap(),
        label: snippet.label,
    }
}

// ---------------------------------------------------------------------------
// on-disk format: magic "CMAD", u32 version, u32 counts, f32 payloads,
// u32 label block at the end

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, ds.videos.len() as u32);
    put_u32(&mut buf, ds.frames_per_video as u32);
    put_u32(&mut buf, ds.height as u32);
    put_u32(&mut buf, ds.width as u32);
    put_u32(&mut buf, ds.n_classes as u32);
    for v in &ds.videos {
        for &x in v.frames.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &x in v.flows.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    for v in &ds.videos {
        put_u32(&mut buf, v.label as u32);
    }
    buf
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = dataset_to_bytes(ds);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(CmaError::Format {
                offset: self.offset as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, offset: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CmaError::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CmaError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let n_videos = cur.u32("video count")? as usize;
    let t = cur.u32("frames per video")? as usize;
    let h = cur.u32("height")? as usize;
    let w = cur.u32("width")? as usize;
    let n_classes = cur.u32("class count")? as usize;
    if t < 2 || h == 0 || w == 0 || n_classes == 0 {
        return Err(CmaError::Format {
            offset: 8,
            message: format!("implausible header: videos={n_videos} T={t} {h}x{w} classes={n_classes}"),
        });
    }
    let frame_len = t * h * w * 3;
    let flow_len = (t - 1) * h * w * 2;
    let mut payload = Vec::with_capacity(n_videos);
    for _ in 0..n_videos {
        let mut frames = Vec::with_capacity(frame_len);
        let fb = cur.take(frame_len * 4, "frames")?;
        for c in fb.chunks_exact(4) {
            frames.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        }
        let mut flows = Vec::with_capacity(flow_len);
        let lb = cur.take(flow_len * 4, "flows")?;
        for c in lb.chunks_exact(4) {
            flows.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        }
        payload.push((frames, flows));
    }
    let mut videos = Vec::with_capacity(n_videos);
    for (frames, flows) in payload {
        let label = cur.u32("label")? as usize;
        if label >= n_classes {
            return Err(CmaError::Format {
                offset: cur.offset as u64 - 4,
                message: format!("label {label} out of range for {n_classes} classes"),
            });
        }
        videos.push(VideoSample {
            frames: Tensor::new(vec![t, h, w, 3], frames)?,
            flows: Tensor::new(vec![t - 1, h, w, 2], flows)?,
            label,
            scene: None,
        });
    }
    if cur.offset != bytes.len() {
        return Err(CmaError::Format {
            offset: cur.offset as u64,
            message: format!("{} trailing bytes", bytes.len() - cur.offset),
        });
    }
    Ok(Dataset {
        videos,
        height: h,
        width: w,
        frames_per_video: t,
        n_classes,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    dataset_from_bytes(&bytes)
}
