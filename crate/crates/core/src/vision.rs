//! Per-camera pipeline: synthetic frames, background-subtraction blob
//! detection, the motion-gated clip recorder and movement-record CSVs.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pgm;

pub const MIN_FRAME_SIDE: u32 = 8;
pub const MOVEMENT_CSV_HEADER: &str = "t_ms,blob,cx,cy,area";

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("frame is {got_w}x{got_h} but the background model is {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("invalid frame: {0}")]
    BadFrame(String),
    #[error("script entries for blob {blob_id} overlap in time")]
    OverlappingScript { blob_id: u32 },
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("movement record line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub camera_id: u8,
    pub t_sim_ms: u64,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(
        camera_id: u8,
        t_sim_ms: u64,
        width: u32,
        height: u32,
        pixels: Vec<u8>,
    ) -> Result<Self, VisionError> {
        if width < MIN_FRAME_SIDE || height < MIN_FRAME_SIDE {
            return Err(VisionError::BadFrame(format!(
                "{width}x{height} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
            )));
        }
        if pixels.len() != (width * height) as usize {
            return Err(VisionError::BadFrame(format!(
                "{} pixels for a {width}x{height} frame",
                pixels.len()
            )));
        }
        Ok(Self {
            camera_id,
            t_sim_ms,
            width,
            height,
            pixels,
        })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        pgm::encode(self.width, self.height, &self.pixels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub area: u32,
    /// (min_x, min_y, max_x, max_y), inclusive.
    pub bbox: (u32, u32, u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionParams {
    pub diff_threshold: u8,
    pub min_blob_area: u32,
    pub alpha: f32,
    /// Multiplier on `alpha` for pixels currently flagged as foreground, so a
    /// resting animal is not absorbed into the background too quickly.
    pub foreground_alpha_scale: f32,
}

impl Default for VisionParams {
    fn default() -> Self {
        Self {
            diff_threshold: 30,
            min_blob_area: 20,
            alpha: 0.02,
            foreground_alpha_scale: 0.1,
        }
    }
}

impl VisionParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            errs.push(format!("vision.alpha must be in (0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.foreground_alpha_scale) {
            errs.push(format!(
                "vision.foreground_alpha_scale must be in [0, 1], got {}",
                self.foreground_alpha_scale
            ));
        }
        if self.min_blob_area == 0 {
            errs.push("vision.min_blob_area must be at least 1".into());
        }
        errs
    }
}

// --- synthetic camera ------------------------------------------------------

/// One scripted appearance of a disk moving linearly from `from` to `to`
/// during `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub blob_id: u32,
    pub start_ms: u64,
    pub end_ms: u64,
    pub from: (f64, f64),
    pub to: (f64, f64),
    pub radius: f64,
    pub intensity: u8,
}

impl ScriptEntry {
    pub fn position_at(&self, t_ms: u64) -> Option<(f64, f64)> {
        if t_ms < self.start_ms || t_ms >= self.end_ms {
            return None;
        }
        let s = (t_ms - self.start_ms) as f64 / (self.end_ms - self.start_ms) as f64;
        Some((
            self.from.0 + (self.to.0 - self.from.0) * s,
            self.from.1 + (self.to.1 - self.from.1) * s,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSpec {
    pub camera_id: u8,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub noise_amplitude: u8,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            camera_id: 0,
            width: 128,
            height: 96,
            fps: 7.5,
            noise_amplitude: 4,
        }
    }
}

/// Timestamp of frame `k` at `fps`: `k * 1000 / fps`, rounded to the ms.
pub fn frame_time_ms(k: u64, fps: f64) -> u64 {
    (k as f64 * 1000.0 / fps).round() as u64
}

/// Frames at t = 0, 1000/fps, 2000/fps, ... up to and including `duration_ms`.
pub fn frame_count(duration_ms: u64, fps: f64) -> u64 {
    (duration_ms as f64 * fps / 1000.0 + 1e-9).floor() as u64 + 1
}

/// Deterministic stand-in for a camera: textured static background, seeded
/// per-pixel noise and filled disks following the script.
#[derive(Debug, Clone)]
pub struct SyntheticCamera {
    spec: CameraSpec,
    rng: SplitMix64,
    backdrop: Vec<u8>,
    script: Vec<ScriptEntry>,
    next_index: u64,
}

impl SyntheticCamera {
    pub fn new(spec: CameraSpec, seed: u64) -> Result<Self, VisionError> {
        if spec.width < MIN_FRAME_SIDE || spec.height < MIN_FRAME_SIDE {
            return Err(VisionError::BadParam(format!(
                "camera {} is {}x{}, minimum is {MIN_FRAME_SIDE}",
                spec.camera_id, spec.width, spec.height
            )));
        }
        if !(spec.fps > 0.0 && spec.fps.is_finite()) {
            return Err(VisionError::BadParam(format!("fps must be > 0, got {}", spec.fps)));
        }
        let backdrop = (0..spec.height)
            .flat_map(|y| (0..spec.width).map(move |x| texture(x, y)))
            .collect();
        Ok(Self {
            spec,
            rng: SplitMix64::seed_from_u64(seed),
            backdrop,
            script: Vec::new(),
            next_index: 0,
        })
    }

    pub fn spec(&self) -> &CameraSpec {
        &self.spec
    }

    pub fn add_entry(&mut self, entry: ScriptEntry) -> Result<(), VisionError> {
        if entry.end_ms <= entry.start_ms {
            return Err(VisionError::BadParam(format!(
                "script entry for blob {} has an empty interval",
                entry.blob_id
            )));
        }
        let clash = self.script.iter().any(|e| {
            e.blob_id == entry.blob_id && e.start_ms < entry.end_ms && entry.start_ms < e.end_ms
        });
        if clash {
            return Err(VisionError::OverlappingScript {
                blob_id: entry.blob_id,
            });
        }
        self.script.push(entry);
        Ok(())
    }

    /// Drops entries that ended before `t_ms`; they can no longer render.
    pub fn prune(&mut self, t_ms: u64) {
        self.script.retain(|e| e.end_ms > t_ms);
    }

    pub fn next_frame_time(&self) -> u64 {
        frame_time_ms(self.next_index, self.spec.fps)
    }

    /// Renders the next frame in sequence.
    pub fn next_frame(&mut self) -> Frame {
        let t = self.next_frame_time();
        self.next_index += 1;
        let (w, h) = (self.spec.width, self.spec.height);
        let mut pixels = self.backdrop.clone();
        for e in &self.script {
            if let Some((cx, cy)) = e.position_at(t) {
                draw_disk(&mut pixels, w, h, cx, cy, e.radius, e.intensity);
            }
        }
        let amp = self.spec.noise_amplitude as i16;
        if amp > 0 {
            for p in pixels.iter_mut() {
                let n = self.rng.random_range(-amp..=amp);
                *p = (*p as i16 + n).clamp(0, 255) as u8;
            }
        }
        Frame {
            camera_id: self.spec.camera_id,
            t_sim_ms: t,
            width: w,
            height: h,
            pixels,
        }
    }
}

fn texture(x: u32, y: u32) -> u8 {
    // low-contrast checker with diagonal stripes
    let checker = if (x / 8 + y / 8) % 2 == 0 { 0 } else { 10 };
    (40 + checker + (x + 2 * y) % 12) as u8
}

fn draw_disk(pixels: &mut [u8], w: u32, h: u32, cx: f64, cy: f64, r: f64, value: u8) {
    let x0 = (cx - r).floor().max(0.0) as i64;
    let x1 = (cx + r).ceil().min(w as f64 - 1.0) as i64;
    let y0 = (cy - r).floor().max(0.0) as i64;
    let y1 = (cy + r).ceil().min(h as f64 - 1.0) as i64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                pixels[(y as u32 * w + x as u32) as usize] = value;
            }
        }
    }
}

/// Builds the whole frame stream for a fixed script.
pub fn synth_frame_source(
    spec: CameraSpec,
    script: &[ScriptEntry],
    duration_ms: u64,
    seed: u64,
) -> Result<Vec<Frame>, VisionError> {
    let mut cam = SyntheticCamera::new(spec, seed)?;
    for e in script {
        cam.add_entry(*e)?;
    }
    let n = frame_count(duration_ms, spec.fps);
    Ok((0..n).map(|_| cam.next_frame()).collect())
}

// --- detection -------------------------------------------------------------

/// Exponential running-average background.
#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl Background {
    pub fn from_frame(frame: &Frame) -> Self {
        Self {
            width: frame.width,
            height: frame.height,
            values: frame.pixels.iter().map(|&p| p as f32).collect(),
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

pub fn detect_motion_blobs(
    frame: &Frame,
    bg: &mut Background,
    params: &VisionParams,
) -> Result<Vec<Blob>, VisionError> {
    if frame.width != bg.width || frame.height != bg.height {
        return Err(VisionError::DimensionMismatch {
            got_w: frame.width,
            got_h: frame.height,
            want_w: bg.width,
            want_h: bg.height,
        });
    }
    let threshold = params.diff_threshold as f32;
    let mask: Vec<bool> = frame
        .pixels
        .iter()
        .zip(&bg.values)
        .map(|(&p, &b)| (p as f32 - b).abs() > threshold)
        .collect();
    let blobs = label_components(&mask, frame.width, frame.height, params.min_blob_area);
    let a_bg = params.alpha;
    let a_fg = params.alpha * params.foreground_alpha_scale;
    for ((b, &p), &fg) in bg.values.iter_mut().zip(&frame.pixels).zip(&mask) {
        let a = if fg { a_fg } else { a_bg };
        *b += a * (p as f32 - *b);
    }
    Ok(blobs)
}

/// 8-connected components of a binary mask with at least `min_area` pixels,
/// ordered by (min_x, min_y).
///
/// Two-pass labelling with a union-find over provisional labels.
pub fn label_components(mask: &[bool], width: u32, height: u32, min_area: u32) -> Vec<Blob> {
    let (w, h) = (width as usize, height as usize);
    assert_eq!(mask.len(), w * h, "mask size does not match dimensions");
    let mut labels = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];

    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }

    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut neigh = [0u32; 4];
            let mut n = 0;
            if x > 0 && labels[y * w + x - 1] != 0 {
                neigh[n] = labels[y * w + x - 1];
                n += 1;
            }
            if y > 0 {
                let row = (y - 1) * w;
                if x > 0 && labels[row + x - 1] != 0 {
                    neigh[n] = labels[row + x - 1];
                    n += 1;
                }
                if labels[row + x] != 0 {
                    neigh[n] = labels[row + x];
                    n += 1;
                }
                if x + 1 < w && labels[row + x + 1] != 0 {
                    neigh[n] = labels[row + x + 1];
                    n += 1;
                }
            }
            let label = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let mut root = find(&mut parent, neigh[0]);
                for &other in &neigh[1..n] {
                    let r = find(&mut parent, other);
                    if r != root {
                        let (lo, hi) = if r < root { (r, root) } else { (root, r) };
                        parent[hi as usize] = lo;
                        root = lo;
                    }
                }
                root
            };
            labels[y * w + x] = label;
        }
    }

    #[derive(Clone, Copy)]
    struct Acc {
        area: u64,
        sx: u64,
        sy: u64,
        min_x: u32,
        min_y: u32,
        max_x: u32,
        max_y: u32,
    }
    let mut acc: Vec<Option<Acc>> = vec![None; parent.len()];
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == 0 {
                continue;
            }
            let root = find(&mut parent, l) as usize;
            let (xu, yu) = (x as u32, y as u32);
            let a = acc[root].get_or_insert(Acc {
                area: 0,
                sx: 0,
                sy: 0,
                min_x: xu,
                min_y: yu,
                max_x: xu,
                max_y: yu,
            });
            a.area += 1;
            a.sx += x as u64;
            a.sy += y as u64;
            a.min_x = a.min_x.min(xu);
            a.min_y = a.min_y.min(yu);
            a.max_x = a.max_x.max(xu);
            a.max_y = a.max_y.max(yu);
        }
    }
    let mut blobs: Vec<Blob> = acc
        .into_iter()
        .flatten()
        .filter(|a| a.area >= min_area as u64)
        .map(|a| Blob {
            centroid_x: a.sx as f64 / a.area as f64,
            centroid_y: a.sy as f64 / a.area as f64,
            area: a.area as u32,
            bbox: (a.min_x, a.min_y, a.max_x, a.max_y),
        })
        .collect();
    blobs.sort_by_key(|b| (b.bbox.0, b.bbox.1));
    blobs
}

// --- recording gate --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateParams {
    pub pre_roll_ms: u64,
    pub hangover_ms: u64,
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            pre_roll_ms: 2000,
            hangover_ms: 3000,
        }
    }
}

impl GateParams {
    pub fn validate(&self) -> Vec<String> {
        if self.hangover_ms == 0 {
            vec!["gate.hangover_ms must be positive".into()]
        } else {
            Vec::new()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateEvent {
    Open { start_ms: u64 },
    Extend { last_motion_ms: u64 },
    Close { start_ms: u64, end_ms: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GateState {
    Idle,
    Open { start_ms: u64, last_motion_ms: u64 },
}

/// Pure time logic of the motion gate.
///
/// A clip covers the union of `[t - pre_roll, t + hangover]` over its motion
/// frames, clamped to the stream. Closing is deferred until no later motion
/// frame could still overlap the clip through its pre-roll, so clips never
/// overlap each other.
#[derive(Debug, Clone)]
pub struct RecordGate {
    params: GateParams,
    stream_start_ms: u64,
    state: GateState,
}

impl RecordGate {
    pub fn new(params: GateParams, stream_start_ms: u64) -> Self {
        Self {
            params,
            stream_start_ms,
            state: GateState::Idle,
        }
    }

    pub fn is_open(&self) -> bool {
        matches!(self.state, GateState::Open { .. })
    }

    /// Start of the open clip and the latest time it is known to cover.
    pub fn open_span(&self) -> Option<(u64, u64)> {
        match self.state {
            GateState::Open {
                start_ms,
                last_motion_ms,
            } => Some((start_ms, last_motion_ms + self.params.hangover_ms)),
            GateState::Idle => None,
        }
    }

    pub fn step(&mut self, t_ms: u64, motion: bool) -> Vec<GateEvent> {
        let GateParams {
            pre_roll_ms,
            hangover_ms,
        } = self.params;
        let mut events = Vec::new();
        if let GateState::Open {
            start_ms,
            last_motion_ms,
        } = self.state
        {
            let bound = last_motion_ms + hangover_ms;
            if t_ms.saturating_sub(pre_roll_ms) > bound
                || (!motion && t_ms >= bound + pre_roll_ms)
            {
                events.push(GateEvent::Close {
                    start_ms,
                    end_ms: bound,
                });
                self.state = GateState::Idle;
            }
        }
        if motion {
            match &mut self.state {
                GateState::Open { last_motion_ms, .. } => {
                    *last_motion_ms = t_ms;
                    events.push(GateEvent::Extend {
                        last_motion_ms: t_ms,
                    });
                }
                GateState::Idle => {
                    let start_ms = t_ms.saturating_sub(pre_roll_ms).max(self.stream_start_ms);
                    self.state = GateState::Open {
                        start_ms,
                        last_motion_ms: t_ms,
                    };
                    events.push(GateEvent::Open { start_ms });
                }
            }
        }
        events
    }

    /// Closes an open clip at end of stream, clamping its end to `stream_end_ms`.
    pub fn finish(&mut self, stream_end_ms: u64) -> Option<GateEvent> {
        match std::mem::replace(&mut self.state, GateState::Idle) {
            GateState::Open {
                start_ms,
                last_motion_ms,
            } => Some(GateEvent::Close {
                start_ms,
                end_ms: (last_motion_ms + self.params.hangover_ms)
                    .min(stream_end_ms.max(last_motion_ms)),
            }),
            GateState::Idle => None,
        }
    }
}

/// Functional form of one gate step.
pub fn record_gate_step(gate: &mut RecordGate, t_sim_ms: u64, motion_present: bool) -> Vec<GateEvent> {
    gate.step(t_sim_ms, motion_present)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSegment {
    pub camera_id: u8,
    pub start_ms: u64,
    pub end_ms: u64,
    pub fps: f64,
    /// Timestamps of the frames stored in the clip, in order.
    pub frame_refs: Vec<u64>,
}

impl ClipSegment {
    pub fn clip_id(&self) -> String {
        clip_id(self.camera_id, self.start_ms)
    }
}

pub fn clip_id(camera_id: u8, start_ms: u64) -> String {
    format!("cam{camera_id}_{start_ms:09}")
}

/// Receives recorded frames.
pub trait ClipSink {
    fn open(&mut self, camera_id: u8, start_ms: u64) -> Result<(), VisionError>;
    fn frame(&mut self, frame: &Frame) -> Result<(), VisionError>;
    fn close(&mut self, clip: &ClipSegment) -> Result<(), VisionError>;
}

/// Keeps finished clips in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub clips: Vec<ClipSegment>,
    pub frames: Vec<Vec<Frame>>,
    current: Vec<Frame>,
}

impl ClipSink for MemorySink {
    fn open(&mut self, _camera_id: u8, _start_ms: u64) -> Result<(), VisionError> {
        self.current.clear();
        Ok(())
    }
    fn frame(&mut self, frame: &Frame) -> Result<(), VisionError> {
        self.current.push(frame.clone());
        Ok(())
    }
    fn close(&mut self, clip: &ClipSegment) -> Result<(), VisionError> {
        self.clips.push(clip.clone());
        self.frames.push(std::mem::take(&mut self.current));
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipManifest {
    pub camera_id: u8,
    pub start_ms: u64,
    pub end_ms: u64,
    pub fps: f64,
    pub count: u64,
}

pub const CLIP_MANIFEST: &str = "manifest.json";

pub fn frame_file_name(ordinal: u64) -> String {
    format!("f{ordinal:06}.pgm")
}

/// Writes each clip as a directory of numbered PGM frames plus a manifest.
#[derive(Debug)]
pub struct DirSink {
    root: PathBuf,
    current: Option<(PathBuf, u64)>,
}

impl DirSink {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            current: None,
        }
    }
}

impl ClipSink for DirSink {
    fn open(&mut self, camera_id: u8, start_ms: u64) -> Result<(), VisionError> {
        let dir = self.root.join(clip_id(camera_id, start_ms));
        fs::create_dir_all(&dir)?;
        self.current = Some((dir, 0));
        Ok(())
    }

    fn frame(&mut self, frame: &Frame) -> Result<(), VisionError> {
        let (dir, n) = self
            .current
            .as_mut()
            .ok_or_else(|| VisionError::BadParam("frame written with no open clip".into()))?;
        *n += 1;
        fs::write(dir.join(frame_file_name(*n)), frame.to_pgm())?;
        Ok(())
    }

    fn close(&mut self, clip: &ClipSegment) -> Result<(), VisionError> {
        let (dir, n) = self
            .current
            .take()
            .ok_or_else(|| VisionError::BadParam("close with no open clip".into()))?;
        let manifest = ClipManifest {
            camera_id: clip.camera_id,
            start_ms: clip.start_ms,
            end_ms: clip.end_ms,
            fps: clip.fps,
            count: n,
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(io::Error::other)?;
        fs::write(dir.join(CLIP_MANIFEST), json)?;
        Ok(())
    }
}

/// Gate plus pre-roll ring: routes frames into clips on a [`ClipSink`].
#[derive(Debug)]
pub struct ClipRecorder<S: ClipSink> {
    camera_id: u8,
    fps: f64,
    params: GateParams,
    gate: RecordGate,
    ring: VecDeque<Frame>,
    last_written: Option<u64>,
    current: Vec<u64>,
    sink: S,
    closed: Vec<ClipSegment>,
}

impl<S: ClipSink> ClipRecorder<S> {
    pub fn new(camera_id: u8, fps: f64, params: GateParams, stream_start_ms: u64, sink: S) -> Self {
        Self {
            camera_id,
            fps,
            params,
            gate: RecordGate::new(params, stream_start_ms),
            ring: VecDeque::new(),
            last_written: None,
            current: Vec::new(),
            sink,
            closed: Vec::new(),
        }
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn into_sink(self) -> S {
        self.sink
    }

    /// Clips closed so far.
    pub fn clips(&self) -> &[ClipSegment] {
        &self.closed
    }

    pub fn is_recording(&self) -> bool {
        self.gate.is_open()
    }

    pub fn push(&mut self, frame: Frame, motion: bool) -> Result<Vec<GateEvent>, VisionError> {
        let t = frame.t_sim_ms;
        let events = self.gate.step(t, motion);
        for ev in &events {
            match *ev {
                GateEvent::Close { start_ms, end_ms } => self.close_clip(start_ms, end_ms)?,
                GateEvent::Open { start_ms } => {
                    self.sink.open(self.camera_id, start_ms)?;
                    self.current.clear();
                }
                GateEvent::Extend { .. } => {}
            }
        }
        self.ring.push_back(frame);
        while self
            .ring
            .front()
            .is_some_and(|f| f.t_sim_ms + self.params.pre_roll_ms < t)
        {
            self.ring.pop_front();
        }
        if let Some((start, bound)) = self.gate.open_span() {
            for f in &self.ring {
                let fresh = self.last_written.is_none_or(|lw| f.t_sim_ms > lw);
                if fresh && f.t_sim_ms >= start && f.t_sim_ms <= bound {
                    self.sink.frame(f)?;
                    self.current.push(f.t_sim_ms);
                    self.last_written = Some(f.t_sim_ms);
                }
            }
        }
        Ok(events)
    }

    pub fn finish(&mut self, stream_end_ms: u64) -> Result<Option<ClipSegment>, VisionError> {
        match self.gate.finish(stream_end_ms) {
            Some(GateEvent::Close { start_ms, end_ms }) => {
                self.close_clip(start_ms, end_ms)?;
                Ok(self.closed.last().cloned())
            }
            _ => Ok(None),
        }
    }

    fn close_clip(&mut self, start_ms: u64, end_ms: u64) -> Result<(), VisionError> {
        let clip = ClipSegment {
            camera_id: self.camera_id,
            start_ms,
            end_ms,
            fps: self.fps,
            frame_refs: std::mem::take(&mut self.current),
        };
        self.sink.close(&clip)?;
        self.closed.push(clip);
        Ok(())
    }
}

// --- movement records ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovementRecordRow {
    pub t_ms: u64,
    pub blob: u32,
    pub cx: f64,
    pub cy: f64,
    pub area: u32,
}

impl MovementRecordRow {
    pub fn from_blobs(t_ms: u64, blobs: &[Blob]) -> Vec<Self> {
        blobs
            .iter()
            .enumerate()
            .map(|(i, b)| Self {
                t_ms,
                blob: i as u32,
                cx: b.centroid_x,
                cy: b.centroid_y,
                area: b.area,
            })
            .collect()
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.2},{:.2},{}",
            self.t_ms, self.blob, self.cx, self.cy, self.area
        )
    }
}

pub fn movement_file_name(camera_id: u8) -> String {
    format!("movement_cam{camera_id}.csv")
}

pub fn parse_movement_csv(text: &str) -> Result<Vec<MovementRecordRow>, VisionError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MOVEMENT_CSV_HEADER => {}
        _ => {
            return Err(VisionError::Parse {
                line: 1,
                msg: format!("expected header {MOVEMENT_CSV_HEADER:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |msg: &str| VisionError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(err("expected 5 fields"));
            }
            Ok(MovementRecordRow {
                t_ms: f[0].parse().map_err(|_| err("bad t_ms"))?,
                blob: f[1].parse().map_err(|_| err("bad blob ordinal"))?,
                cx: f[2].parse().map_err(|_| err("bad cx"))?,
                cy: f[3].parse().map_err(|_| err("bad cy"))?,
                area: f[4].parse().map_err(|_| err("bad area"))?,
            })
        })
        .collect()
}

pub fn read_movement_csv(path: &Path) -> Result<Vec<MovementRecordRow>, VisionError> {
    parse_movement_csv(&fs::read_to_string(path)?)
}

/// Appends rows to a movement-record CSV, writing the header on creation.
#[derive(Debug)]
pub struct MovementRecordWriter {
    out: BufWriter<File>,
}

impl MovementRecordWriter {
    pub fn open(path: &Path) -> Result<Self, VisionError> {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{MOVEMENT_CSV_HEADER}")?;
            out.flush()?;
        }
        Ok(Self { out })
    }

    /// Appends one frame's rows and flushes.
    pub fn append(&mut self, rows: &[MovementRecordRow]) -> Result<(), VisionError> {
        if rows.is_empty() {
            return Ok(());
        }
        for r in rows {
            writeln!(self.out, "{}", r.to_csv_line())?;
        }
        self.out.flush()?;
        Ok(())
    }
}

pub fn append_movement_record(path: &Path, rows: &[MovementRecordRow]) -> Result<(), VisionError> {
    MovementRecordWriter::open(path)?.append(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(w: u32, h: u32, v: u8) -> Frame {
        Frame::new(0, 0, w, h, vec![v; (w * h) as usize]).unwrap()
    }

    fn with_square(mut f: Frame, x0: u32, y0: u32, side: u32, v: u8) -> Frame {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                f.pixels[(y * f.width + x) as usize] = v;
            }
        }
        f
    }

    #[test]
    fn frame_invariants() {
        assert!(Frame::new(0, 0, 7, 8, vec![0; 56]).is_err());
        assert!(Frame::new(0, 0, 8, 8, vec![0; 63]).is_err());
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_count(1000, 7.5), 8);
        assert_eq!(frame_count(0, 7.5), 1);
        assert_eq!(frame_count(2000, 7.5), 16);
        assert_eq!(frame_time_ms(1, 7.5), 133);
        assert_eq!(frame_time_ms(2, 7.5), 267);
        assert_eq!(frame_time_ms(15, 7.5), 2000);
    }

    #[test]
    fn empty_script_has_no_blob_pixels() {
        let spec = CameraSpec {
            noise_amplitude: 0,
            ..CameraSpec::default()
        };
        let frames = synth_frame_source(spec, &[], 1000, 1).unwrap();
        assert_eq!(frames.len(), 8);
        assert!(frames.windows(2).all(|w| w[0].pixels == w[1].pixels));
        assert!(frames[0].pixels.iter().all(|&p| p < 64));
    }

    #[test]
    fn static_disk_without_noise_is_constant() {
        let spec = CameraSpec {
            noise_amplitude: 0,
            ..CameraSpec::default()
        };
        let e = ScriptEntry {
            blob_id: 1,
            start_ms: 0,
            end_ms: 10_000,
            from: (40.0, 40.0),
            to: (40.0, 40.0),
            radius: 5.0,
            intensity: 230,
        };
        let frames = synth_frame_source(spec, &[e], 2000, 9).unwrap();
        assert!(frames.windows(2).all(|w| w[0].pixels == w[1].pixels));
        assert_eq!(frames[0].pixels[(40 * 128 + 40) as usize], 230);
    }

    #[test]
    fn overlapping_script_rejected() {
        let mut cam = SyntheticCamera::new(CameraSpec::default(), 0).unwrap();
        let e = ScriptEntry {
            blob_id: 3,
            start_ms: 0,
            end_ms: 1000,
            from: (0.0, 0.0),
            to: (10.0, 10.0),
            radius: 3.0,
            intensity: 200,
        };
        cam.add_entry(e).unwrap();
        let later = ScriptEntry {
            start_ms: 999,
            end_ms: 2000,
            ..e
        };
        assert!(matches!(
            cam.add_entry(later),
            Err(VisionError::OverlappingScript { blob_id: 3 })
        ));
        cam.add_entry(ScriptEntry { blob_id: 4, ..later }).unwrap();
        cam.add_entry(ScriptEntry { start_ms: 1000, ..later }).unwrap();
    }

    #[test]
    fn identical_frame_has_no_blobs() {
        let f = with_square(flat(32, 32, 0), 4, 4, 10, 255);
        let mut bg = Background::from_frame(&f);
        assert!(detect_motion_blobs(&f, &mut bg, &VisionParams::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn square_on_dark_background() {
        let bgf = flat(40, 30, 0);
        let mut bg = Background::from_frame(&bgf);
        let f = with_square(flat(40, 30, 0), 10, 5, 10, 255);
        let blobs = detect_motion_blobs(&f, &mut bg, &VisionParams::default()).unwrap();
        assert_eq!(blobs.len(), 1);
        let b = blobs[0];
        assert_eq!(b.area, 100);
        assert_eq!((b.centroid_x, b.centroid_y), (14.5, 9.5));
        assert_eq!(b.bbox, (10, 5, 19, 14));
        // foreground pixels adapt at alpha * 0.1, the rest at alpha
        assert!((bg.values()[5 * 40 + 10] - 0.51).abs() < 1e-4);
        assert_eq!(bg.values()[0], 0.0);
    }

    #[test]
    fn two_squares_ordered_left_to_right() {
        let mut bg = Background::from_frame(&flat(40, 30, 0));
        let f = with_square(with_square(flat(40, 30, 0), 25, 2, 6, 200), 3, 20, 6, 200);
        let blobs = detect_motion_blobs(&f, &mut bg, &VisionParams::default()).unwrap();
        assert_eq!(blobs.len(), 2);
        assert_eq!(blobs[0].bbox.0, 3);
        assert_eq!(blobs[1].bbox.0, 25);
        assert!(blobs.iter().all(|b| b.area == 36));
    }

    #[test]
    fn diagonal_pixels_join_under_8_connectivity() {
        let mut mask = vec![false; 16];
        mask[0] = true;
        mask[5] = true;
        mask[10] = true;
        let blobs = label_components(&mask, 4, 4, 1);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].area, 3);
    }

    #[test]
    fn small_blobs_filtered() {
        let mut bg = Background::from_frame(&flat(20, 20, 0));
        let f = with_square(flat(20, 20, 0), 2, 2, 4, 255);
        assert!(detect_motion_blobs(&f, &mut bg, &VisionParams::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn dimension_mismatch() {
        let mut bg = Background::from_frame(&flat(20, 20, 0));
        assert!(matches!(
            detect_motion_blobs(&flat(20, 21, 0), &mut bg, &VisionParams::default()),
            Err(VisionError::DimensionMismatch { .. })
        ));
    }

    fn run_gate(motion: impl Fn(u64) -> bool, end: u64, step: u64, p: GateParams) -> Vec<(u64, u64)> {
        let mut g = RecordGate::new(p, 0);
        let mut clips = Vec::new();
        let mut t = 0;
        while t <= end {
            for ev in g.step(t, motion(t)) {
                if let GateEvent::Close { start_ms, end_ms } = ev {
                    clips.push((start_ms, end_ms));
                }
            }
            t += step;
        }
        if let Some(GateEvent::Close { start_ms, end_ms }) = g.finish(end) {
            clips.push((start_ms, end_ms));
        }
        clips
    }

    #[test]
    fn no_motion_no_clips() {
        assert!(run_gate(|_| false, 60_000, 100, GateParams::default()).is_empty());
    }

    #[test]
    fn single_burst_clip_bounds() {
        let clips = run_gate(
            |t| (10_000..=20_000).contains(&t),
            60_000,
            100,
            GateParams::default(),
        );
        assert_eq!(clips, vec![(8000, 23_000)]);
    }

    #[test]
    fn close_bursts_merge() {
        let clips = run_gate(
            |t| (10_000..=12_000).contains(&t) || (13_000..=15_000).contains(&t),
            60_000,
            100,
            GateParams::default(),
        );
        assert_eq!(clips, vec![(8000, 18_000)]);
    }

    #[test]
    fn gap_within_pre_roll_plus_hangover_merges() {
        // gap of 4500 ms: hangover alone would split, pre-roll of the second
        // burst reaches back into the first clip
        let clips = run_gate(
            |t| t == 10_000 || t == 14_500,
            60_000,
            100,
            GateParams::default(),
        );
        assert_eq!(clips, vec![(8000, 17_500)]);
        let split = run_gate(
            |t| t == 10_000 || t == 15_100,
            60_000,
            100,
            GateParams::default(),
        );
        assert_eq!(split, vec![(8000, 13_000), (13_100, 18_100)]);
    }

    #[test]
    fn pre_roll_clamped_to_stream_start() {
        let clips = run_gate(|t| t == 500, 10_000, 100, GateParams::default());
        assert_eq!(clips, vec![(0, 3500)]);
    }

    #[test]
    fn recorder_collects_pre_roll_frames() {
        let mut rec = ClipRecorder::new(0, 10.0, GateParams::default(), 0, MemorySink::default());
        for k in 0..=400u64 {
            let t = k * 100;
            let f = Frame::new(0, t, 8, 8, vec![0; 64]).unwrap();
            rec.push(f, (10_000..=20_000).contains(&t)).unwrap();
        }
        rec.finish(40_000).unwrap();
        let sink = rec.into_sink();
        assert_eq!(sink.clips.len(), 1);
        let refs = &sink.clips[0].frame_refs;
        assert_eq!(refs.first(), Some(&8000));
        assert_eq!(refs.last(), Some(&23_000));
        assert_eq!(refs.len(), 151);
        assert_eq!(sink.frames[0].len(), 151);
    }

    #[test]
    fn movement_line_format() {
        let row = MovementRecordRow {
            t_ms: 1500,
            blob: 0,
            cx: 12.5,
            cy: 8.0,
            area: 100,
        };
        assert_eq!(row.to_csv_line(), "1500,0,12.50,8.00,100");
        let text = format!("{MOVEMENT_CSV_HEADER}\n{}\n", row.to_csv_line());
        assert_eq!(parse_movement_csv(&text).unwrap(), vec![row]);
    }

    #[test]
    fn movement_writer_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(movement_file_name(0));
        append_movement_record(&path, &[]).unwrap();
        let rows = MovementRecordRow::from_blobs(
            700,
            &[Blob {
                centroid_x: 1.0,
                centroid_y: 2.0,
                area: 30,
                bbox: (0, 0, 5, 5),
            }],
        );
        append_movement_record(&path, &rows).unwrap();
        append_movement_record(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "t_ms,blob,cx,cy,area\n700,0,1.00,2.00,30\n700,0,1.00,2.00,30\n");
    }

    #[test]
    fn bad_movement_line_reports_line_number() {
        let text = "t_ms,blob,cx,cy,area\n1,0,1.00,1.00,20\n2,0,oops,1.00,20\n";
        match parse_movement_csv(text) {
            Err(VisionError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
