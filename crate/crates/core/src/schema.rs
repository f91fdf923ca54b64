//! Trial logic: animal-initiated trials, playback, response window, reward
//! and the per-session result CSV.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vision::Blob;

pub const RESULTS_CSV_HEADER: &str = "trial,t_start_ms,stim,button,correct,reward,latency_ms";
pub const RESULTS_FILE_NAME: &str = "results.csv";
const SUMMARY_PREFIX: &str = "# summary,";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("invalid trial result: {0}")]
    InvalidResult(String),
    #[error("session already closed")]
    AlreadyClosed,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StimulusOrder {
    #[default]
    RandomNoRepeat,
    FixedCycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    CorrectOnly,
    /// Shaping stage: any press within the window earns food.
    AnyPress,
}

/// Rectangle in pixel coordinates of `camera_id`, half-open on the max side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerZone {
    pub camera_id: u8,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl TriggerZone {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

impl Default for TriggerZone {
    fn default() -> Self {
        Self {
            camera_id: 0,
            x0: 32.0,
            y0: 0.0,
            x1: 96.0,
            y1: 48.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemaConfig {
    /// `stimulus_to_button[s]` is the correct button for stimulus `s`.
    pub stimulus_to_button: [u8; 3],
    pub response_window_ms: u64,
    pub inter_trial_interval_ms: u64,
    pub stimulus_order: StimulusOrder,
    pub trigger_zone: TriggerZone,
    pub session_length_ms: u64,
    pub reward_mode: RewardMode,
    pub dispense_degrees: u8,
    pub max_retries: u32,
    pub confirm_window_ms: u64,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            stimulus_to_button: [0, 1, 2],
            response_window_ms: 5000,
            inter_trial_interval_ms: 10_000,
            stimulus_order: StimulusOrder::RandomNoRepeat,
            trigger_zone: TriggerZone::default(),
            session_length_ms: 7_200_000,
            reward_mode: RewardMode::CorrectOnly,
            dispense_degrees: 90,
            max_retries: crate::hwlink::DEFAULT_MAX_RETRIES,
            confirm_window_ms: crate::hwlink::DEFAULT_CONFIRM_WINDOW_MS,
        }
    }
}

impl SchemaConfig {
    /// Every violated invariant, in a stable order.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut seen = [false; 3];
        let mut bijective = true;
        for &b in &self.stimulus_to_button {
            match seen.get_mut(b as usize) {
                Some(slot) if !*slot => *slot = true,
                _ => bijective = false,
            }
        }
        if !bijective {
            errs.push(format!(
                "schema.stimulus_to_button must be a bijection on {{0,1,2}}, got {:?}",
                self.stimulus_to_button
            ));
        }
        if self.response_window_ms == 0 {
            errs.push("schema.response_window_ms must be > 0".into());
        }
        if self.session_length_ms == 0 {
            errs.push("schema.session_length_ms must be > 0".into());
        }
        let z = &self.trigger_zone;
        if !(z.x0 < z.x1 && z.y0 < z.y1) {
            errs.push("schema.trigger_zone must have x0 < x1 and y0 < y1".into());
        }
        if self.confirm_window_ms == 0 {
            errs.push("schema.confirm_window_ms must be > 0".into());
        }
        errs
    }

    pub fn correct_button(&self, stimulus_id: u8) -> u8 {
        self.stimulus_to_button[stimulus_id as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: u32,
    pub t_start_ms: u64,
    pub stimulus_id: u8,
    /// `None` on timeout.
    pub response_button: Option<u8>,
    pub correct: bool,
    pub reward_confirmed: bool,
    pub latency_ms: Option<u64>,
}

impl TrialResult {
    pub fn validate(&self, cfg: &SchemaConfig) -> Result<(), SchemaError> {
        let bad = |m: &str| Err(SchemaError::InvalidResult(format!("trial {}: {m}", self.trial_id)));
        if self.trial_id == 0 {
            return bad("trial ids start at 1");
        }
        if self.stimulus_id > 2 {
            return bad("stimulus id out of range");
        }
        match self.response_button {
            Some(b) if b > 2 => return bad("button id out of range"),
            Some(b) => {
                if self.correct != (b == cfg.correct_button(self.stimulus_id)) {
                    return bad("correct flag disagrees with the mapping");
                }
                if self.latency_ms.is_none() {
                    return bad("a press needs a latency");
                }
            }
            None => {
                if self.correct {
                    return bad("timeout marked correct");
                }
                if self.latency_ms.is_some() {
                    return bad("timeout with a latency");
                }
                if self.reward_confirmed {
                    return bad("timeout rewarded");
                }
            }
        }
        if self.reward_confirmed && !self.correct && cfg.reward_mode == RewardMode::CorrectOnly {
            return bad("reward on an incorrect trial");
        }
        Ok(())
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.trial_id,
            self.t_start_ms,
            self.stimulus_id,
            self.response_button
                .map_or_else(|| "NONE".to_string(), |b| b.to_string()),
            self.correct as u8,
            self.reward_confirmed as u8,
            self.latency_ms.map_or_else(String::new, |l| l.to_string()),
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(format!("expected 7 fields, found {}", f.len()));
        }
        let num = |i: usize, name: &str| -> Result<u64, String> {
            f[i].parse::<u64>().map_err(|_| format!("bad {name} {:?}", f[i]))
        };
        let flag = |i: usize, name: &str| -> Result<bool, String> {
            match f[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(format!("bad {name} flag {other:?}")),
            }
        };
        let small = |v: u64, name: &str| -> Result<u8, String> {
            if v <= 2 {
                Ok(v as u8)
            } else {
                Err(format!("{name} {v} out of range"))
            }
        };
        Ok(Self {
            trial_id: u32::try_from(num(0, "trial")?).map_err(|e| e.to_string())?,
            t_start_ms: num(1, "t_start_ms")?,
            stimulus_id: small(num(2, "stim")?, "stim")?,
            response_button: match f[3] {
                "NONE" => None,
                _ => Some(small(num(3, "button")?, "button")?),
            },
            correct: flag(4, "correct")?,
            reward_confirmed: flag(5, "reward")?,
            latency_ms: if f[6].is_empty() { None } else { Some(num(6, "latency_ms")?) },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SessionSummary {
    pub trials: u32,
    pub correct: u32,
    pub incorrect: u32,
    /// Presses per button.
    pub presses: [u32; 3],
    pub rewards: u32,
}

impl SessionSummary {
    pub fn from_results(results: &[TrialResult]) -> Self {
        let mut s = Self::default();
        for r in results {
            s.trials += 1;
            if r.correct {
                s.correct += 1;
            } else {
                s.incorrect += 1;
            }
            if let Some(b) = r.response_button {
                s.presses[b as usize] += 1;
            }
            s.rewards += r.reward_confirmed as u32;
        }
        s
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{SUMMARY_PREFIX}{},{},{},{},{},{},{}",
            self.trials,
            self.correct,
            self.incorrect,
            self.presses[0],
            self.presses[1],
            self.presses[2],
            self.rewards
        )
    }

    pub fn parse_line(line: &str) -> Option<Result<Self, String>> {
        let rest = line.strip_prefix(SUMMARY_PREFIX)?;
        let nums: Result<Vec<u32>, _> = rest.split(',').map(str::parse::<u32>).collect();
        Some(match nums {
            Ok(v) if v.len() == 7 => Ok(Self {
                trials: v[0],
                correct: v[1],
                incorrect: v[2],
                presses: [v[3], v[4], v[5]],
                rewards: v[6],
            }),
            Ok(v) => Err(format!("summary has {} fields, expected 7", v.len())),
            Err(e) => Err(format!("summary: {e}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ResultsFile {
    pub results: Vec<TrialResult>,
    pub summary: Option<SessionSummary>,
}

/// Parses a result CSV. Errors carry 1-based line numbers.
pub fn parse_results_csv(text: &str) -> Result<ResultsFile, SchemaError> {
    let err = |line: usize, msg: String| SchemaError::Parse { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h == RESULTS_CSV_HEADER => {}
        Some((n, h)) => return Err(err(n, format!("unexpected header {h:?}"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut out = ResultsFile::default();
    for (n, line) in lines {
        if out.summary.is_some() {
            return Err(err(n, "content after summary line".into()));
        }
        if line.starts_with('#') {
            match SessionSummary::parse_line(line) {
                Some(Ok(s)) => out.summary = Some(s),
                Some(Err(m)) => return Err(err(n, m)),
                None => return Err(err(n, format!("unknown comment {line:?}"))),
            }
            continue;
        }
        out.results
            .push(TrialResult::parse_csv_line(line).map_err(|m| err(n, m))?);
    }
    Ok(out)
}

/// Appends one validated row, creating the file with its header if needed,
/// and flushes.
pub fn record_result(
    result: &TrialResult,
    path: &Path,
    cfg: &SchemaConfig,
) -> Result<(), SchemaError> {
    result.validate(cfg)?;
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{RESULTS_CSV_HEADER}")?;
    }
    writeln!(f, "{}", result.to_csv_line())?;
    f.flush()?;
    Ok(())
}

/// Owns the session's result file.
#[derive(Debug)]
pub struct ResultWriter {
    file: File,
}

impl ResultWriter {
    pub fn create(path: &Path) -> Result<Self, SchemaError> {
        let mut file = File::create(path)?;
        writeln!(file, "{RESULTS_CSV_HEADER}")?;
        file.flush()?;
        Ok(Self { file })
    }

    pub fn record(&mut self, result: &TrialResult, cfg: &SchemaConfig) -> Result<(), SchemaError> {
        result.validate(cfg)?;
        writeln!(self.file, "{}", result.to_csv_line())?;
        self.file.flush()?;
        Ok(())
    }

    pub fn finish(mut self, summary: &SessionSummary) -> Result<(), SchemaError> {
        writeln!(self.file, "{}", summary.to_csv_line())?;
        self.file.flush()?;
        Ok(())
    }
}

// --- state machine -----------------------------------------------------------

/// Inputs the trial logic reacts to.
#[derive(Debug, Clone, PartialEq)]
pub enum SchemaEvent {
    Blobs { camera_id: u8, blobs: Vec<Blob> },
    Button { id: u8 },
    DispenseFinished { trial_id: u32, confirmed: bool },
    /// Lets timeouts fire when nothing else happens.
    Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Action {
    PlayStimulus { trial_id: u32, stimulus_id: u8 },
    Dispense { trial_id: u32, degrees: u8 },
    Record(TrialResult),
    Publish(TrialEvent),
    Log(String),
}

/// What the schema announces on the bus.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrialEvent {
    Started { trial_id: u32, stimulus_id: u8 },
    Response { trial_id: u32, button: Option<u8>, correct: bool },
    Reward { trial_id: u32, confirmed: bool },
    Finished { trial_id: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "phase")]
pub enum Phase {
    Idle,
    AwaitResponse {
        trial_id: u32,
        stimulus_id: u8,
        onset_ms: u64,
    },
    Reward {
        trial_id: u32,
        stimulus_id: u8,
        onset_ms: u64,
        button: u8,
        correct: bool,
        press_ms: u64,
    },
    Iti { until_ms: u64 },
}

#[derive(Debug, Clone)]
pub struct TrialState {
    phase: Phase,
    next_trial_id: u32,
    last_stimulus: Option<u8>,
    zone_occupied: bool,
    results: Vec<TrialResult>,
    closed: bool,
    rng: SplitMix64,
}

impl TrialState {
    pub fn new(seed: u64) -> Self {
        Self {
            phase: Phase::Idle,
            next_trial_id: 1,
            last_stimulus: None,
            zone_occupied: false,
            results: Vec::new(),
            closed: false,
            rng: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn results(&self) -> &[TrialResult] {
        &self.results
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// When a `Tick` next matters, if at all.
    pub fn next_deadline(&self, cfg: &SchemaConfig) -> Option<u64> {
        match self.phase {
            Phase::AwaitResponse { onset_ms, .. } => Some(onset_ms + cfg.response_window_ms),
            Phase::Iti { until_ms } => Some(until_ms),
            _ => None,
        }
    }

    fn pick_stimulus(&mut self, cfg: &SchemaConfig) -> u8 {
        let s = match (cfg.stimulus_order, self.last_stimulus) {
            (StimulusOrder::FixedCycle, None) => 0,
            (StimulusOrder::FixedCycle, Some(p)) => (p + 1) % 3,
            (StimulusOrder::RandomNoRepeat, None) => self.rng.random_range(0..3u8),
            (StimulusOrder::RandomNoRepeat, Some(p)) => (p + self.rng.random_range(1..=2u8)) % 3,
        };
        self.last_stimulus = Some(s);
        s
    }

    fn finish_trial(&mut self, result: TrialResult, t: u64, cfg: &SchemaConfig, out: &mut Vec<Action>) {
        self.results.push(result);
        out.push(Action::Record(result));
        out.push(Action::Publish(TrialEvent::Finished {
            trial_id: result.trial_id,
        }));
        self.phase = Phase::Iti {
            until_ms: t + cfg.inter_trial_interval_ms,
        };
    }

    fn expire(&mut self, t: u64, cfg: &SchemaConfig, out: &mut Vec<Action>) {
        if let Phase::AwaitResponse {
            trial_id,
            stimulus_id,
            onset_ms,
        } = self.phase
        {
            let deadline = onset_ms + cfg.response_window_ms;
            if t >= deadline {
                out.push(Action::Publish(TrialEvent::Response {
                    trial_id,
                    button: None,
                    correct: false,
                }));
                let r = TrialResult {
                    trial_id,
                    t_start_ms: onset_ms,
                    stimulus_id,
                    response_button: None,
                    correct: false,
                    reward_confirmed: false,
                    latency_ms: None,
                };
                self.finish_trial(r, deadline, cfg, out);
            }
        }
        if let Phase::Iti { until_ms } = self.phase {
            if t >= until_ms {
                self.phase = Phase::Idle;
            }
        }
    }
}

/// Advances the trial logic by one event at `t_sim_ms`.
pub fn step_trial(
    state: &mut TrialState,
    event: &SchemaEvent,
    t_sim_ms: u64,
    cfg: &SchemaConfig,
) -> Vec<Action> {
    let mut out = Vec::new();
    if state.closed {
        return out;
    }
    state.expire(t_sim_ms, cfg, &mut out);
    match event {
        SchemaEvent::Tick => {}
        SchemaEvent::Blobs { camera_id, blobs } => {
            if *camera_id != cfg.trigger_zone.camera_id {
                return out;
            }
            let occupied = blobs
                .iter()
                .any(|b| cfg.trigger_zone.contains(b.centroid_x, b.centroid_y));
            let entered = occupied && !state.zone_occupied;
            state.zone_occupied = occupied;
            if entered && state.phase == Phase::Idle && t_sim_ms < cfg.session_length_ms {
                let trial_id = state.next_trial_id;
                state.next_trial_id += 1;
                let stimulus_id = state.pick_stimulus(cfg);
                state.phase = Phase::AwaitResponse {
                    trial_id,
                    stimulus_id,
                    onset_ms: t_sim_ms,
                };
                out.push(Action::PlayStimulus {
                    trial_id,
                    stimulus_id,
                });
                out.push(Action::Publish(TrialEvent::Started {
                    trial_id,
                    stimulus_id,
                }));
            }
        }
        &SchemaEvent::Button { id } => match state.phase {
            Phase::AwaitResponse {
                trial_id,
                stimulus_id,
                onset_ms,
            } => {
                let correct = id == cfg.correct_button(stimulus_id);
                out.push(Action::Publish(TrialEvent::Response {
                    trial_id,
                    button: Some(id),
                    correct,
                }));
                let rewarded = correct || cfg.reward_mode == RewardMode::AnyPress;
                if rewarded {
                    state.phase = Phase::Reward {
                        trial_id,
                        stimulus_id,
                        onset_ms,
                        button: id,
                        correct,
                        press_ms: t_sim_ms,
                    };
                    out.push(Action::Dispense {
                        trial_id,
                        degrees: cfg.dispense_degrees,
                    });
                } else {
                    let r = TrialResult {
                        trial_id,
                        t_start_ms: onset_ms,
                        stimulus_id,
                        response_button: Some(id),
                        correct,
                        reward_confirmed: false,
                        latency_ms: Some(t_sim_ms - onset_ms),
                    };
                    state.finish_trial(r, t_sim_ms, cfg, &mut out);
                }
            }
            _ => out.push(Action::Log(format!(
                "button {id} at {t_sim_ms} ms outside a response window, ignored"
            ))),
        },
        &SchemaEvent::DispenseFinished {
            trial_id: done_id,
            confirmed,
        } => match state.phase {
            Phase::Reward {
                trial_id,
                stimulus_id,
                onset_ms,
                button,
                correct,
                press_ms,
            } if trial_id == done_id => {
                out.push(Action::Publish(TrialEvent::Reward {
                    trial_id,
                    confirmed,
                }));
                let r = TrialResult {
                    trial_id,
                    t_start_ms: onset_ms,
                    stimulus_id,
                    response_button: Some(button),
                    correct,
                    reward_confirmed: confirmed,
                    latency_ms: Some(press_ms - onset_ms),
                };
                state.finish_trial(r, t_sim_ms, cfg, &mut out);
            }
            _ => out.push(Action::Log(format!(
                "dispense result for trial {done_id} with no reward pending"
            ))),
        },
    }
    out
}

/// Finalizes any open trial and returns the summary plus the actions for it.
pub fn close_session(
    state: &mut TrialState,
    t_sim_ms: u64,
    cfg: &SchemaConfig,
) -> Result<(SessionSummary, Vec<Action>), SchemaError> {
    if state.closed {
        return Err(SchemaError::AlreadyClosed);
    }
    let mut out = Vec::new();
    state.expire(t_sim_ms, cfg, &mut out);
    match state.phase {
        Phase::AwaitResponse {
            trial_id,
            stimulus_id,
            onset_ms,
        } => {
            let r = TrialResult {
                trial_id,
                t_start_ms: onset_ms,
                stimulus_id,
                response_button: None,
                correct: false,
                reward_confirmed: false,
                latency_ms: None,
            };
            state.finish_trial(r, t_sim_ms, cfg, &mut out);
        }
        Phase::Reward {
            trial_id,
            stimulus_id,
            onset_ms,
            button,
            correct,
            press_ms,
        } => {
            let r = TrialResult {
                trial_id,
                t_start_ms: onset_ms,
                stimulus_id,
                response_button: Some(button),
                correct,
                reward_confirmed: false,
                latency_ms: Some(press_ms - onset_ms),
            };
            state.finish_trial(r, t_sim_ms, cfg, &mut out);
        }
        _ => {}
    }
    state.closed = true;
    state.phase = Phase::Idle;
    Ok((SessionSummary::from_results(&state.results), out))
}
