//! One simulated session, end to end.
//!
//! Each camera pipeline runs on its own worker thread; everything else runs
//! on the scheduler thread, which advances simulated time event by event and
//! keeps the cameras in lock-step so output bytes depend only on the seed.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use chrono::{NaiveDateTime, Timelike};
use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{SessionMeta, SESSION_ID_FORMAT, SESSION_META_FILE};
use crate::audio::{self, AudioBuffer, AudioError, OnsetParams, StimulusSpec};
use crate::bus::{Bus, BusError, BusMessage, Payload, Publisher, Subscription, Topic, DEFAULT_QUEUE_CAPACITY};
use crate::hwlink::{self, Decoder, Link, LinkError, WireMessage};
use crate::rigsim::{EnvAction, MotionSegment, Rig, RigConfig};
use crate::schema::{
    self, Action, ResultWriter, SchemaConfig, SchemaError, SchemaEvent, SessionSummary, TrialState,
    RESULTS_FILE_NAME,
};
use crate::vision::{
    self, Background, Blob, CameraSpec, ClipRecorder, ClipSegment, DirSink, GateParams,
    MovementRecordRow, MovementRecordWriter, ScriptEntry, SyntheticCamera, VisionError, VisionParams,
};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "session.log";
/// Every message seen on the hw topic, one JSON object per line.
pub const HW_LOG_FILE: &str = "hw.log";
pub const START_DATETIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("config: {0}")]
    Parse(String),
    #[error("output directory {0} is not empty")]
    OutputNotEmpty(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("vision: {0}")]
    Vision(#[from] VisionError),
    #[error("audio: {0}")]
    Audio(#[from] AudioError),
    #[error("schema: {0}")]
    Schema(#[from] SchemaError),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("link: {0}")]
    Link(#[from] LinkError),
    #[error("pipeline failure: {0}")]
    Pipeline(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub stimuli: Vec<StimulusSpec>,
    pub onset: OnsetParams,
    /// Peak amplitude of the uniform microphone noise floor.
    pub mic_noise_amplitude: i16,
    /// Fraction of the playback level reaching the microphone.
    pub mic_gain: f64,
    pub mic_pre_ms: u64,
    pub mic_capture_ms: u64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: audio::DEFAULT_SAMPLE_RATE,
            stimuli: audio::default_stimuli().to_vec(),
            onset: OnsetParams::default(),
            mic_noise_amplitude: 200,
            mic_gain: 0.5,
            mic_pre_ms: 200,
            mic_capture_ms: 1000,
        }
    }
}

fn default_duration() -> u64 {
    7_200_000
}

fn default_start() -> String {
    "2024-05-01T09:00:00".into()
}

fn default_cameras() -> Vec<CameraSpec> {
    (0..2)
        .map(|camera_id| CameraSpec {
            camera_id,
            ..CameraSpec::default()
        })
        .collect()
}

fn default_bus_capacity() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

fn default_sensor_poll() -> u64 {
    60_000
}

/// Everything a session needs. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_ms: u64,
    /// Simulated wall-clock start, `YYYY-MM-DDTHH:MM:SS`; names the session.
    #[serde(default = "default_start")]
    pub start_datetime: String,
    #[serde(default = "default_cameras")]
    pub cameras: Vec<CameraSpec>,
    #[serde(default)]
    pub vision: VisionParams,
    #[serde(default)]
    pub gate: GateParams,
    #[serde(default)]
    pub audio: AudioConfig,
    #[serde(default)]
    pub schema: SchemaConfig,
    #[serde(default)]
    pub rig: RigConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive_root: Option<PathBuf>,
    #[serde(default = "default_bus_capacity")]
    pub bus_capacity: usize,
    #[serde(default = "default_sensor_poll")]
    pub sensor_poll_ms: u64,
}

impl RunConfig {
    /// Defaults everywhere except the seed.
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    /// Parses and validates; every violation is reported at once.
    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SessionError::Parse(e.to_string()))?;
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(SessionError::Config(errs))
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.duration_ms == 0 {
            errs.push("duration_ms must be > 0".into());
        }
        if NaiveDateTime::parse_from_str(&self.start_datetime, START_DATETIME_FORMAT).is_err() {
            errs.push(format!(
                "start_datetime {:?} is not YYYY-MM-DDTHH:MM:SS",
                self.start_datetime
            ));
        }
        if self.cameras.is_empty() {
            errs.push("at least one camera is required".into());
        }
        let mut ids: Vec<u8> = self.cameras.iter().map(|c| c.camera_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            errs.push("camera ids must be unique".into());
        }
        for c in &self.cameras {
            if c.width < vision::MIN_FRAME_SIDE || c.height < vision::MIN_FRAME_SIDE {
                errs.push(format!("camera {}: frame sides must be >= {}", c.camera_id, vision::MIN_FRAME_SIDE));
            }
            if !(c.fps > 0.0 && c.fps.is_finite()) {
                errs.push(format!("camera {}: fps must be > 0", c.camera_id));
            }
        }
        errs.extend(self.vision.validate());
        errs.extend(self.gate.validate());
        if self.audio.sample_rate == 0 {
            errs.push("audio.sample_rate must be > 0".into());
        }
        errs.extend(audio::validate_stimuli(&self.audio.stimuli));
        if !(0.0..=1.0).contains(&self.audio.mic_gain) {
            errs.push("audio.mic_gain must be in [0, 1]".into());
        }
        if self.audio.mic_noise_amplitude < 0 {
            errs.push("audio.mic_noise_amplitude must be >= 0".into());
        }
        if self.audio.mic_capture_ms == 0 {
            errs.push("audio.mic_capture_ms must be > 0".into());
        }
        errs.extend(self.schema.validate());
        if !self.cameras.iter().any(|c| c.camera_id == self.schema.trigger_zone.camera_id) {
            errs.push(format!(
                "schema.trigger_zone.camera_id {} is not a configured camera",
                self.schema.trigger_zone.camera_id
            ));
        }
        errs.extend(self.rig.validate());
        if self.bus_capacity == 0 {
            errs.push("bus_capacity must be > 0".into());
        }
        if self.sensor_poll_ms == 0 {
            errs.push("sensor_poll_ms must be > 0".into());
        }
        errs
    }

    fn start(&self) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(&self.start_datetime, START_DATETIME_FORMAT)
            .expect("validated start_datetime")
    }

    pub fn session_id(&self) -> String {
        self.start().format(SESSION_ID_FORMAT).to_string()
    }

    fn day_offset_ms(&self) -> u64 {
        self.start().num_seconds_from_midnight() as u64 * 1000
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionReport {
    pub session_id: String,
    pub output_dir: PathBuf,
    pub summary: SessionSummary,
    pub clips: Vec<ClipSegment>,
    /// Animal visits as [enter start, exit end).
    pub agent_visits: Vec<(u64, u64)>,
    pub dispenses: u32,
    pub dispenses_confirmed: u32,
    pub pieces_dropped: u64,
    pub hopper_remaining: u32,
}

// --- camera workers ------------------------------------------------------------

enum CamCmd {
    Entry(ScriptEntry),
    Frame,
    Finish(u64),
}

enum CamReply {
    Frame(u64, Vec<Blob>),
    Done(Vec<ClipSegment>),
    Failed(String),
}

struct CameraPipeline {
    camera: SyntheticCamera,
    background: Option<Background>,
    params: VisionParams,
    recorder: ClipRecorder<DirSink>,
    movement: MovementRecordWriter,
}

impl CameraPipeline {
    fn frame(&mut self) -> Result<(u64, Vec<Blob>), VisionError> {
        let frame = self.camera.next_frame();
        let t = frame.t_sim_ms;
        self.camera.prune(t);
        let blobs = match &mut self.background {
            Some(bg) => vision::detect_motion_blobs(&frame, bg, &self.params)?,
            None => {
                self.background = Some(Background::from_frame(&frame));
                Vec::new()
            }
        };
        self.movement.append(&MovementRecordRow::from_blobs(t, &blobs))?;
        self.recorder.push(frame, !blobs.is_empty())?;
        Ok((t, blobs))
    }
}

fn camera_worker(mut p: CameraPipeline, rx: mpsc::Receiver<CamCmd>, tx: mpsc::Sender<CamReply>) {
    for cmd in rx {
        let reply = match cmd {
            CamCmd::Entry(e) => match p.camera.add_entry(e) {
                Ok(()) => continue,
                Err(e) => CamReply::Failed(e.to_string()),
            },
            CamCmd::Frame => match p.frame() {
                Ok((t, blobs)) => CamReply::Frame(t, blobs),
                Err(e) => CamReply::Failed(e.to_string()),
            },
            CamCmd::Finish(end) => match p.recorder.finish(end) {
                Ok(_) => CamReply::Done(p.recorder.clips().to_vec()),
                Err(e) => CamReply::Failed(e.to_string()),
            },
        };
        let stop = !matches!(reply, CamReply::Frame(..));
        if tx.send(reply).is_err() || stop {
            return;
        }
    }
}

struct CamLink {
    spec: CameraSpec,
    tx: mpsc::Sender<CamCmd>,
    rx: mpsc::Receiver<CamReply>,
    next_k: u64,
    total: u64,
    mirror: bool,
}

impl CamLink {
    fn next_time(&self) -> Option<u64> {
        (self.next_k < self.total).then(|| vision::frame_time_ms(self.next_k, self.spec.fps))
    }

    fn send(&self, cmd: CamCmd) -> Result<(), SessionError> {
        self.tx
            .send(cmd)
            .map_err(|_| SessionError::Pipeline(format!("camera {} worker stopped", self.spec.camera_id)))
    }

    fn recv(&self) -> Result<CamReply, SessionError> {
        match self.rx.recv() {
            Ok(CamReply::Failed(m)) => Err(SessionError::Pipeline(format!("camera {}: {m}", self.spec.camera_id))),
            Ok(r) => Ok(r),
            Err(_) => Err(SessionError::Pipeline(format!("camera {} worker panicked", self.spec.camera_id))),
        }
    }

    /// Normalized arena coordinates to this camera's pixels.
    fn entry(&self, seg: &MotionSegment, radius: f64, intensity: u8) -> ScriptEntry {
        let (w, h) = (self.spec.width as f64, self.spec.height as f64);
        let map = |(x, y): (f64, f64)| {
            let x = if self.mirror { 1.0 - x } else { x };
            (x * w, y * h)
        };
        ScriptEntry {
            blob_id: 0,
            start_ms: seg.start_ms,
            end_ms: seg.end_ms,
            from: map(seg.from),
            to: map(seg.to),
            radius: radius * w,
            intensity,
        }
    }
}

// --- world -----------------------------------------------------------------------

/// Rig, cameras and the hardware reader; the part of the session that runs
/// by itself as time advances.
struct World {
    end_ms: u64,
    rig: Rig,
    host: Decoder,
    cams: Vec<CamLink>,
    sensor_poll_ms: u64,
    next_sensor_poll: u64,
    radius: f64,
    intensity: u8,
    hw_pub: Publisher,
    rig_pub: Publisher,
    cam_pubs: Vec<Publisher>,
    now: u64,
}

impl World {
    /// Next time anything happens, frames and polls only up to the end.
    fn next_time(&self) -> u64 {
        let mut t = self.rig.next_event_time();
        for c in &self.cams {
            if let Some(ft) = c.next_time() {
                t = t.min(ft);
            }
        }
        if self.next_sensor_poll <= self.end_ms {
            t = t.min(self.next_sensor_poll);
        }
        t
    }

    fn step_to(&mut self, t: u64) -> Result<(), SessionError> {
        self.now = t;
        self.drain_rig(t)?;
        if self.next_sensor_poll == t && t <= self.end_ms {
            let bytes = hwlink::encode_msg(&WireMessage::QuerySensors).expect("valid message");
            self.rig.receive(t, &bytes);
            self.next_sensor_poll += self.sensor_poll_ms;
            self.drain_rig(t)?;
        }
        let due: Vec<usize> = (0..self.cams.len())
            .filter(|&i| self.cams[i].next_time() == Some(t))
            .collect();
        for &i in &due {
            self.cams[i].send(CamCmd::Frame)?;
        }
        for &i in &due {
            let cam = &mut self.cams[i];
            match cam.recv()? {
                CamReply::Frame(ft, blobs) => {
                    debug_assert_eq!(ft, t);
                    cam.next_k += 1;
                    let camera_id = cam.spec.camera_id;
                    self.cam_pubs[i].send(Topic::Vision, t, Payload::Blobs { camera_id, blobs })?;
                }
                _ => return Err(SessionError::Pipeline("unexpected camera reply".into())),
            }
        }
        Ok(())
    }

    fn drain_rig(&mut self, t: u64) -> Result<(), SessionError> {
        let out = self.rig.advance(t);
        for seg in &out.paths {
            for c in &self.cams {
                c.send(CamCmd::Entry(c.entry(seg, self.radius, self.intensity)))?;
            }
        }
        for (te, action) in &out.env {
            let line = match action {
                EnvAction::FansOn => "fans on",
                EnvAction::FansOff => "fans off",
                EnvAction::LightOn => "light on",
                EnvAction::LightOff => "light off",
            };
            self.rig_pub.log(*te, line)?;
        }
        for (tb, bytes) in &out.bytes {
            for msg in self.host.feed(bytes) {
                self.hw_pub.send(Topic::Hw, *tb, Payload::Hw(msg))?;
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<Vec<ClipSegment>, SessionError> {
        let mut clips = Vec::new();
        for c in &self.cams {
            c.send(CamCmd::Finish(self.end_ms))?;
        }
        for c in &self.cams {
            match c.recv()? {
                CamReply::Done(mut v) => clips.append(&mut v),
                _ => return Err(SessionError::Pipeline("unexpected camera reply".into())),
            }
        }
        Ok(clips)
    }
}

/// Subscriptions of the schema context, turned into its events.
struct SchemaInbox {
    vision: Subscription,
    hw: Subscription,
}

impl SchemaInbox {
    fn drain(&self, bus: &Bus, out: &mut VecDeque<(u64, SchemaEvent)>) -> Result<(), SessionError> {
        let mut msgs = bus.poll(&self.hw, usize::MAX)?;
        msgs.extend(bus.poll(&self.vision, usize::MAX)?);
        // camera publishers race each other; fix one order
        msgs.sort_by(|a, b| (a.t_sim_ms, a.topic, &a.publisher).cmp(&(b.t_sim_ms, b.topic, &b.publisher)));
        for m in msgs {
            let ev = match m.payload {
                Payload::Hw(WireMessage::Button { id }) => SchemaEvent::Button { id },
                Payload::Blobs { camera_id, blobs } => SchemaEvent::Blobs { camera_id, blobs },
                _ => continue,
            };
            out.push_back((m.t_sim_ms, ev));
        }
        Ok(())
    }
}

/// Host side of the serial link while a dispense is in progress: waiting
/// for the piezo keeps the rest of the world running.
struct SessionLink<'a> {
    world: &'a mut World,
    bus: &'a Bus,
    inbox: &'a SchemaInbox,
    sub: Subscription,
    pending: VecDeque<(u64, WireMessage)>,
    events: &'a mut VecDeque<(u64, SchemaEvent)>,
    now: u64,
    failure: Option<SessionError>,
}

impl SessionLink<'_> {
    fn pump(&mut self) -> Result<(), SessionError> {
        self.inbox.drain(self.bus, self.events)?;
        for m in self.bus.poll(&self.sub, usize::MAX)? {
            if let Payload::Hw(w) = m.payload {
                self.pending.push_back((m.t_sim_ms, w));
            }
        }
        Ok(())
    }
}

impl Link for SessionLink<'_> {
    fn now_ms(&self) -> u64 {
        self.now
    }

    fn send(&mut self, msg: &WireMessage) -> Result<(), LinkError> {
        let bytes = hwlink::encode_msg(msg)?;
        self.world.rig.receive(self.now, &bytes);
        Ok(())
    }

    fn recv_until(&mut self, deadline_ms: u64) -> Result<Option<(u64, WireMessage)>, LinkError> {
        loop {
            if let Some(m) = self.pending.pop_front() {
                return Ok(Some(m));
            }
            let next = self.world.next_time().max(self.now);
            if next > deadline_ms {
                self.now = deadline_ms;
                return Ok(None);
            }
            let stepped = self.world.step_to(next).and_then(|()| self.pump());
            if let Err(e) = stepped {
                self.failure = Some(e);
                return Err(LinkError::Closed { attempts: 0 });
            }
            self.now = next;
        }
    }
}

fn mic_capture(
    cfg: &AudioConfig,
    stim: &AudioBuffer,
    onset_ms: u64,
    rng: &mut SplitMix64,
) -> AudioBuffer {
    let start = onset_ms.saturating_sub(cfg.mic_pre_ms);
    let mut buf = AudioBuffer::silence(cfg.sample_rate, cfg.mic_capture_ms, start);
    let amp = cfg.mic_noise_amplitude;
    if amp > 0 {
        for s in buf.samples.iter_mut() {
            *s = rng.random_range(-amp..=amp);
        }
    }
    let heard = AudioBuffer {
        sample_rate: stim.sample_rate,
        samples: stim
            .samples
            .iter()
            .map(|&s| (s as f64 * cfg.mic_gain).round() as i16)
            .collect(),
        t_start_ms: onset_ms,
    };
    buf.mix_in(&heard);
    buf
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SessionError> {
    let mut text = serde_json::to_string_pretty(value).expect("config types serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn ensure_empty_dir(dir: &Path) -> Result<(), SessionError> {
    if dir.exists() {
        let mut it = fs::read_dir(dir).map_err(io_err(dir))?;
        if it.next().is_some() {
            return Err(SessionError::OutputNotEmpty(dir.to_path_buf()));
        }
    } else {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

fn format_log(m: &BusMessage) -> Option<String> {
    let text = match &m.payload {
        Payload::Log { line } => line.clone(),
        Payload::Dropped {
            topic,
            subscription,
            count,
        } => format!("dropped {count} message(s) on {topic} for subscription {subscription}"),
        _ => return None,
    };
    Some(format!("{:>9} {} {}", m.t_sim_ms, m.publisher, text))
}

/// Runs a whole session into `output_dir`, which must be empty or absent.
pub fn run_session(cfg: &RunConfig, output_dir: &Path) -> Result<SessionReport, SessionError> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(SessionError::Config(errs));
    }
    ensure_empty_dir(output_dir)?;
    let session_id = cfg.session_id();
    // the output location is not part of the session's content
    let stored = RunConfig {
        output_dir: None,
        ..cfg.clone()
    };
    write_json(&output_dir.join(CONFIG_FILE), &stored)?;
    write_json(
        &output_dir.join(SESSION_META_FILE),
        &SessionMeta {
            session_id: session_id.clone(),
            seed: cfg.seed,
            start_datetime: cfg.start_datetime.clone(),
            duration_ms: cfg.duration_ms,
            cameras: cfg.cameras.clone(),
            stimulus_to_button: cfg.schema.stimulus_to_button,
            response_window_ms: cfg.schema.response_window_ms,
        },
    )?;

    // independent streams derived from the one seed
    let mut seeder = SplitMix64::seed_from_u64(cfg.seed);
    let rig_seed = seeder.next_u64();
    let schema_seed = seeder.next_u64();
    let mic_seed = seeder.next_u64();
    let cam_seeds: Vec<u64> = cfg.cameras.iter().map(|_| seeder.next_u64()).collect();

    let bus = Bus::new(&Topic::ALL, cfg.bus_capacity);
    let log_sub = bus.subscribe(Topic::Log)?;
    let inbox = SchemaInbox {
        vision: bus.subscribe(Topic::Vision)?,
        hw: bus.subscribe(Topic::Hw)?,
    };
    let hw_sub = bus.subscribe(Topic::Hw)?;
    let log_path = output_dir.join(LOG_FILE);
    let hw_path = output_dir.join(HW_LOG_FILE);
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);
    let mut hw_log = BufWriter::new(fs::File::create(&hw_path).map_err(io_err(&hw_path))?);
    let flush_log = |log: &mut BufWriter<fs::File>, hw_log: &mut BufWriter<fs::File>| -> Result<(), SessionError> {
        for m in bus.poll(&log_sub, usize::MAX)? {
            if let Some(line) = format_log(&m) {
                writeln!(log, "{line}").map_err(io_err(&log_path))?;
            }
        }
        for m in bus.poll(&hw_sub, usize::MAX)? {
            if let Payload::Hw(msg) = m.payload {
                let line = serde_json::json!({ "t_ms": m.t_sim_ms, "msg": msg });
                writeln!(hw_log, "{line}").map_err(io_err(&hw_path))?;
            }
        }
        Ok(())
    };

    std::thread::scope(|scope| -> Result<SessionReport, SessionError> {
        let mut cams = Vec::new();
        for (i, spec) in cfg.cameras.iter().enumerate() {
            let pipeline = CameraPipeline {
                camera: SyntheticCamera::new(*spec, cam_seeds[i])?,
                background: None,
                params: cfg.vision,
                recorder: ClipRecorder::new(spec.camera_id, spec.fps, cfg.gate, 0, DirSink::new(output_dir)),
                movement: MovementRecordWriter::open(&output_dir.join(vision::movement_file_name(spec.camera_id)))?,
            };
            let (cmd_tx, cmd_rx) = mpsc::channel();
            let (rep_tx, rep_rx) = mpsc::channel();
            std::thread::Builder::new()
                .name(format!("cam{}", spec.camera_id))
                .spawn_scoped(scope, move || camera_worker(pipeline, cmd_rx, rep_tx))
                .map_err(|e| SessionError::Pipeline(e.to_string()))?;
            cams.push(CamLink {
                spec: *spec,
                tx: cmd_tx,
                rx: rep_rx,
                next_k: 0,
                total: vision::frame_count(cfg.duration_ms, spec.fps),
                mirror: i % 2 == 1,
            });
        }
        let cam_pubs = cfg
            .cameras
            .iter()
            .map(|c| Publisher::new(&bus, format!("cam{}", c.camera_id)))
            .collect();
        let mut world = World {
            end_ms: cfg.duration_ms,
            rig: Rig::new(cfg.rig.clone(), rig_seed, cfg.day_offset_ms())
                .with_contingency(cfg.schema.stimulus_to_button),
            host: Decoder::new(),
            cams,
            sensor_poll_ms: cfg.sensor_poll_ms,
            next_sensor_poll: 0,
            radius: cfg.rig.motion.radius,
            intensity: cfg.rig.motion.intensity,
            hw_pub: Publisher::new(&bus, "hw"),
            rig_pub: Publisher::new(&bus, "rig"),
            cam_pubs,
            now: 0,
        };

        let mut schema_pub = Publisher::new(&bus, "schema");
        let mut audio_out = Publisher::new(&bus, "audio-out");
        let mut audio_in = Publisher::new(&bus, "audio-in");
        let mut trial = TrialState::new(schema_seed);
        let results_path = output_dir.join(RESULTS_FILE_NAME);
        let mut writer = ResultWriter::create(&results_path)?;
        let stimuli: Vec<AudioBuffer> = cfg
            .audio
            .stimuli
            .iter()
            .map(|s| audio::synth_stimulus(s, cfg.audio.sample_rate))
            .collect::<Result<_, _>>()?;
        let mut mic_rng = SplitMix64::seed_from_u64(mic_seed);

        // an ambient reference recording at the start
        let ambient = {
            let mut b = AudioBuffer::silence(cfg.audio.sample_rate, cfg.audio.mic_capture_ms, 0);
            let amp = cfg.audio.mic_noise_amplitude;
            if amp > 0 {
                for s in b.samples.iter_mut() {
                    *s = mic_rng.random_range(-amp..=amp);
                }
            }
            b
        };
        audio::wav_write(&ambient, &output_dir.join(audio::mic_file_name(0)))?;

        let mut dispenses = 0u32;
        let mut confirmed = 0u32;
        let mut events: VecDeque<(u64, SchemaEvent)> = VecDeque::new();
        let mut last_t = 0u64;

        loop {
            let t_world = world.next_time();
            let deadline = match trial.phase() {
                schema::Phase::AwaitResponse { .. } => trial.next_deadline(&cfg.schema),
                _ => None,
            };
            match deadline {
                Some(d) if d < t_world && d <= cfg.duration_ms => events.push_back((d, SchemaEvent::Tick)),
                _ => {
                    if t_world > cfg.duration_ms {
                        break;
                    }
                    world.step_to(t_world)?;
                    inbox.drain(&bus, &mut events)?;
                }
            }

            while let Some((t, ev)) = events.pop_front() {
                last_t = last_t.max(t);
                for action in schema::step_trial(&mut trial, &ev, t, &cfg.schema) {
                    match action {
                        Action::PlayStimulus { trial_id, stimulus_id } => {
                            let stim = &stimuli[stimulus_id as usize];
                            let played = AudioBuffer {
                                t_start_ms: t,
                                ..stim.clone()
                            };
                            audio::wav_write(&played, &output_dir.join(audio::stimulus_file_name(stimulus_id, t)))?;
                            audio_out.log(t, format!("trial {trial_id}: playing stimulus {stimulus_id}"))?;
                            world.rig.hear(t, stimulus_id);
                            let mic = mic_capture(&cfg.audio, stim, t, &mut mic_rng);
                            audio::wav_write(&mic, &output_dir.join(audio::mic_file_name(mic.t_start_ms)))?;
                            if let Some(onset) = audio::classify_onset(&mic, &cfg.audio.stimuli, &cfg.audio.onset) {
                                audio_in.send(Topic::Audio, t, Payload::Audio(onset))?;
                                audio_in.log(
                                    t,
                                    format!(
                                        "onset at {} ms classified as stimulus {} ({:.3})",
                                        onset.t_onset_ms, onset.stimulus_id, onset.confidence
                                    ),
                                )?;
                            }
                        }
                        Action::Dispense { trial_id, degrees } => {
                            dispenses += 1;
                            let mut link = SessionLink {
                                world: &mut world,
                                bus: &bus,
                                inbox: &inbox,
                                sub: bus.subscribe(Topic::Hw)?,
                                pending: VecDeque::new(),
                                events: &mut events,
                                now: t,
                                failure: None,
                            };
                            let outcome = hwlink::dispense_confirmed(
                                &mut link,
                                degrees,
                                cfg.schema.max_retries,
                                cfg.schema.confirm_window_ms,
                            );
                            if let Some(e) = link.failure.take() {
                                return Err(e);
                            }
                            let outcome = outcome?;
                            let t_done = link.now;
                            bus.unsubscribe(&link.sub);
                            confirmed += outcome.confirmed as u32;
                            schema_pub.log(
                                t_done,
                                format!(
                                    "trial {trial_id}: dispense {} after {} attempt(s)",
                                    if outcome.confirmed { "confirmed" } else { "failed" },
                                    outcome.attempts
                                ),
                            )?;
                            events.push_back((
                                t_done,
                                SchemaEvent::DispenseFinished {
                                    trial_id,
                                    confirmed: outcome.confirmed,
                                },
                            ));
                        }
                        Action::Record(r) => {
                            writer.record(&r, &cfg.schema)?;
                            schema_pub.log(t.max(last_t), format!("recorded {}", r.to_csv_line()))?;
                        }
                        Action::Publish(ev) => {
                            schema_pub.send(Topic::Schema, t.max(last_t), Payload::Trial(ev))?;
                        }
                        Action::Log(line) => {
                            schema_pub.log(t.max(last_t), line)?;
                        }
                    }
                }
            }
            flush_log(&mut log, &mut hw_log)?;
        }

        let t_close = cfg.duration_ms.max(last_t);
        let (summary, actions) = schema::close_session(&mut trial, t_close, &cfg.schema)?;
        for action in actions {
            if let Action::Record(r) = action {
                writer.record(&r, &cfg.schema)?;
                schema_pub.log(t_close, format!("recorded {}", r.to_csv_line()))?;
            }
        }
        writer.finish(&summary)?;
        let clips = world.finish()?;
        schema_pub.log(t_close, format!("session closed: {}", summary.to_csv_line()))?;
        flush_log(&mut log, &mut hw_log)?;
        log.flush().map_err(io_err(&log_path))?;
        hw_log.flush().map_err(io_err(&hw_path))?;
        drop(world.cams);

        let state = world.rig.state();
        let mut clips = clips;
        clips.sort_by_key(|c| (c.camera_id, c.start_ms));
        Ok(SessionReport {
            session_id,
            output_dir: output_dir.to_path_buf(),
            summary,
            clips,
            agent_visits: world.rig.agent().visits().to_vec(),
            dispenses,
            dispenses_confirmed: confirmed,
            pieces_dropped: state.pieces_dropped,
            hopper_remaining: state.hopper_pieces,
        })
    })
}
