//! Simulated microcontroller board, feeder, enclosure climate and animal.
//!
//! The rig only talks to the host through wire-protocol bytes. The animal
//! agent hears playback through [`Rig::hear`] and shows up to the cameras as
//! world-coordinate [`MotionSegment`]s.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::hwlink::{encode_msg, Decoder, DecoderDiagnostics, Link, LinkError, WireMessage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentPolicy {
    /// Probability of pressing the button mapped to the heard stimulus.
    pub accuracy: f64,
    pub approach_latency_ms: u64,
    /// Expected spontaneous visits per hour.
    pub trial_appetite: f64,
}

impl Default for AgentPolicy {
    fn default() -> Self {
        Self {
            accuracy: 0.7,
            approach_latency_ms: 1500,
            trial_appetite: 20.0,
        }
    }
}

/// How the animal moves through the arena, in normalized world coordinates
/// where the visible floor is the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentMotion {
    pub feeder: (f64, f64),
    pub radius: f64,
    pub intensity: u8,
    pub enter_ms: u64,
    pub exit_ms: u64,
    pub hop_ms: u64,
    pub linger_ms: u64,
    pub eat_ms: u64,
    pub wander: f64,
}

impl Default for AgentMotion {
    fn default() -> Self {
        Self {
            feeder: (0.5, 0.25),
            radius: 0.07,
            intensity: 200,
            enter_ms: 3000,
            exit_ms: 3000,
            hop_ms: 1000,
            linger_ms: 4000,
            eat_ms: 2500,
            wander: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub p_dispense: f64,
    pub piezo_delay_ms: u64,
    /// Time for the screw to turn out and back.
    pub rotation_ms: u64,
    pub hopper_pieces: u32,
    pub fan_on_temp_c: f64,
    pub fan_hysteresis_c: f64,
    pub light_on_below: u16,
    pub light_hysteresis: u16,
    pub ambient_c: f64,
    pub heat_load_c: f64,
    pub fan_cooling_c: f64,
    pub thermal_tau_ms: f64,
    pub env_step_ms: u64,
    /// (hour of day, photocell level) knots, linearly interpolated.
    pub day_curve: Vec<(f64, f64)>,
    pub agent: AgentPolicy,
    pub motion: AgentMotion,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            p_dispense: 0.8,
            piezo_delay_ms: 150,
            rotation_ms: 300,
            hopper_pieces: 2000,
            fan_on_temp_c: 30.0,
            fan_hysteresis_c: 2.0,
            light_on_below: 200,
            light_hysteresis: 50,
            ambient_c: 24.0,
            heat_load_c: 8.0,
            fan_cooling_c: 6.0,
            thermal_tau_ms: 600_000.0,
            env_step_ms: 1000,
            day_curve: vec![
                (0.0, 40.0),
                (6.0, 60.0),
                (8.0, 450.0),
                (13.0, 800.0),
                (18.0, 400.0),
                (20.0, 80.0),
                (24.0, 40.0),
            ],
            agent: AgentPolicy::default(),
            motion: AgentMotion::default(),
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.p_dispense) {
            errs.push(format!("rig.p_dispense must be in [0, 1], got {}", self.p_dispense));
        }
        if !(0.0..=1.0).contains(&self.agent.accuracy) {
            errs.push(format!(
                "rig.agent.accuracy must be in [0, 1], got {}",
                self.agent.accuracy
            ));
        }
        if !(self.agent.trial_appetite >= 0.0 && self.agent.trial_appetite.is_finite()) {
            errs.push("rig.agent.trial_appetite must be a finite rate >= 0".into());
        }
        if self.env_step_ms == 0 {
            errs.push("rig.env_step_ms must be positive".into());
        }
        if self.thermal_tau_ms <= 0.0 {
            errs.push("rig.thermal_tau_ms must be positive".into());
        }
        if self.day_curve.len() < 2 {
            errs.push("rig.day_curve needs at least two knots".into());
        } else if self.day_curve.windows(2).any(|w| w[1].0 <= w[0].0) {
            errs.push("rig.day_curve hours must be strictly increasing".into());
        }
        let m = &self.motion;
        if m.hop_ms == 0 || m.enter_ms == 0 || m.exit_ms == 0 {
            errs.push("rig.motion segment durations must be positive".into());
        }
        if m.radius <= 0.0 {
            errs.push("rig.motion.radius must be positive".into());
        }
        errs
    }
}

/// Photocell level at a time of day, from the knot table (periodic over 24 h).
pub fn day_curve_level(knots: &[(f64, f64)], t_of_day_ms: u64) -> f64 {
    let hour = (t_of_day_ms % 86_400_000) as f64 / 3_600_000.0;
    match knots {
        [] => 0.0,
        [only] => only.1,
        _ => {
            if hour <= knots[0].0 {
                return knots[0].1;
            }
            for w in knots.windows(2) {
                let ((h0, v0), (h1, v1)) = (w[0], w[1]);
                if hour <= h1 {
                    return v0 + (v1 - v0) * (hour - h0) / (h1 - h0);
                }
            }
            knots[knots.len() - 1].1
        }
    }
}

#[derive(Debug, Clone)]
pub struct RigState {
    pub temp_c: f64,
    pub photo_level: f64,
    pub fans_on: bool,
    pub light_on: bool,
    pub screw_position_deg: u32,
    pub hopper_pieces: u32,
    pub pieces_dropped: u64,
    pub rng: SplitMix64,
}

impl RigState {
    pub fn new(cfg: &RigConfig, seed: u64) -> Self {
        Self {
            temp_c: cfg.ambient_c,
            photo_level: 0.0,
            fans_on: false,
            light_on: false,
            screw_position_deg: 0,
            hopper_pieces: cfg.hopper_pieces,
            pieces_dropped: 0,
            rng: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn sensor_reading(&self) -> WireMessage {
        WireMessage::Sensors {
            temp_centi_c: (self.temp_c * 100.0)
                .round()
                .clamp(i16::MIN as f64, i16::MAX as f64) as i16,
            photo: self.photo_level.round().clamp(0.0, 1023.0) as u16,
        }
    }
}

/// Replies to one host command, each stamped with its emission time.
pub fn handle_host_msg(
    state: &mut RigState,
    cfg: &RigConfig,
    msg: &WireMessage,
    t_sim_ms: u64,
) -> Vec<(u64, WireMessage)> {
    match *msg {
        WireMessage::Dispense { degrees } => {
            state.screw_position_deg = (state.screw_position_deg + degrees as u32) % 360;
            let mut out = Vec::with_capacity(2);
            if state.hopper_pieces > 0 && state.rng.random_bool(cfg.p_dispense) {
                state.hopper_pieces -= 1;
                state.pieces_dropped += 1;
                out.push((t_sim_ms + cfg.piezo_delay_ms, WireMessage::PiezoHit));
            }
            out.push((
                t_sim_ms + cfg.rotation_ms.max(cfg.piezo_delay_ms),
                WireMessage::DispenseDone,
            ));
            out
        }
        WireMessage::QuerySensors => vec![(t_sim_ms, state.sensor_reading())],
        WireMessage::SetLight { on } => {
            state.light_on = on;
            Vec::new()
        }
        WireMessage::SetFans { on } => {
            state.fans_on = on;
            Vec::new()
        }
        // events are rig-to-host only
        WireMessage::Button { .. }
        | WireMessage::PiezoHit
        | WireMessage::Sensors { .. }
        | WireMessage::DispenseDone => Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EnvAction {
    FansOn,
    FansOff,
    LightOn,
    LightOff,
}

/// Advances the climate by `dt_ms` and applies the fan/light rules.
pub fn step_env(
    state: &mut RigState,
    cfg: &RigConfig,
    dt_ms: u64,
    t_of_day_ms: u64,
) -> Vec<EnvAction> {
    let target = cfg.ambient_c + cfg.heat_load_c - if state.fans_on { cfg.fan_cooling_c } else { 0.0 };
    let k = 1.0 - (-(dt_ms as f64) / cfg.thermal_tau_ms).exp();
    state.temp_c += (target - state.temp_c) * k;
    state.photo_level = day_curve_level(&cfg.day_curve, t_of_day_ms);

    let mut actions = Vec::new();
    if !state.fans_on && state.temp_c >= cfg.fan_on_temp_c {
        state.fans_on = true;
        actions.push(EnvAction::FansOn);
    } else if state.fans_on && state.temp_c <= cfg.fan_on_temp_c - cfg.fan_hysteresis_c {
        state.fans_on = false;
        actions.push(EnvAction::FansOff);
    }
    let on_below = cfg.light_on_below as f64;
    if !state.light_on && state.photo_level < on_below {
        state.light_on = true;
        actions.push(EnvAction::LightOn);
    } else if state.light_on && state.photo_level >= on_below + cfg.light_hysteresis as f64 {
        state.light_on = false;
        actions.push(EnvAction::LightOff);
    }
    actions
}

// --- animal agent ------------------------------------------------------------

/// Button pressed in response to `stimulus` under `policy`; wrong presses are
/// split evenly between the two other buttons.
pub fn choose_button<R: Rng + ?Sized>(policy: &AgentPolicy, correct_button: u8, rng: &mut R) -> u8 {
    if rng.random_bool(policy.accuracy) {
        correct_button
    } else {
        let skip = rng.random_range(1..=2u8);
        (correct_button + skip) % 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub start_ms: u64,
    pub end_ms: u64,
    pub from: (f64, f64),
    pub to: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Away { next_visit: Option<u64> },
    Entering { arrive_at: u64 },
    AtZone { leave_at: u64 },
    Exiting { gone_at: u64 },
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct AgentOutput {
    pub press: Option<u8>,
    pub path: Option<MotionSegment>,
}

/// Scripted animal. Presses are drawn from the policy; the stimulus is
/// mapped to its button by the rig's (hidden) training contingency.
#[derive(Debug, Clone)]
pub struct Agent {
    phase: Phase,
    pos: (f64, f64),
    seg_end: u64,
    press_at: Option<(u64, u8)>,
    pressed_this_visit: bool,
    visit_start: u64,
    visits: Vec<(u64, u64)>,
    rng: SplitMix64,
}

impl Agent {
    pub fn new(policy: &AgentPolicy, seed: u64, t0: u64) -> Self {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let next_visit = next_visit_after(policy, &mut rng, t0);
        Self {
            phase: Phase::Away { next_visit },
            pos: (0.5, 1.0),
            seg_end: 0,
            press_at: None,
            pressed_this_visit: false,
            visit_start: 0,
            visits: Vec::new(),
            rng,
        }
    }

    /// Completed visits as [enter start, exit end).
    pub fn visits(&self) -> &[(u64, u64)] {
        &self.visits
    }

    pub fn in_view(&self) -> bool {
        !matches!(self.phase, Phase::Away { .. })
    }

    pub fn next_wakeup(&self) -> Option<u64> {
        let phase_t = match self.phase {
            Phase::Away { next_visit } => next_visit,
            Phase::Entering { arrive_at } => Some(arrive_at),
            Phase::AtZone { .. } => Some(self.seg_end),
            Phase::Exiting { gone_at } => Some(gone_at),
        };
        match (phase_t, self.press_at) {
            (Some(a), Some((b, _))) => Some(a.min(b)),
            (a, b) => a.or(b.map(|p| p.0)),
        }
    }

    /// Playback heard at `t`; `button` is the press that would be correct.
    pub fn hear(&mut self, policy: &AgentPolicy, button: u8, t: u64) {
        if self.press_at.is_some() || self.pressed_this_visit {
            return;
        }
        let arrive = match self.phase {
            Phase::Entering { arrive_at } => arrive_at,
            Phase::AtZone { .. } => t,
            _ => return,
        };
        let jitter = self.rng.random_range(0.8..1.2);
        let latency = (policy.approach_latency_ms as f64 * jitter).round() as u64;
        let chosen = choose_button(policy, button, &mut self.rng);
        let at = (t + latency).max(arrive);
        self.press_at = Some((at, chosen));
        if let Phase::AtZone { leave_at } = &mut self.phase {
            *leave_at = (*leave_at).max(at);
        }
    }

    /// Handles everything due at `t`.
    pub fn step(&mut self, policy: &AgentPolicy, motion: &AgentMotion, t: u64) -> AgentOutput {
        let mut out = AgentOutput::default();
        if let Some((at, button)) = self.press_at {
            if at <= t {
                out.press = Some(button);
                self.press_at = None;
                self.pressed_this_visit = true;
                if let Phase::AtZone { leave_at } = &mut self.phase {
                    *leave_at = t + motion.eat_ms;
                }
            }
        }
        match self.phase {
            Phase::Away { next_visit: Some(nv) } if nv <= t => {
                let edge_x = self.rng.random_range(0.15..0.85);
                let from = (edge_x, 1.0);
                let to = self.wander_point(motion);
                self.visit_start = t;
                self.pressed_this_visit = false;
                out.path = Some(self.segment(t, motion.enter_ms, from, to));
                self.phase = Phase::Entering {
                    arrive_at: t + motion.enter_ms,
                };
            }
            Phase::Entering { arrive_at } if arrive_at <= t => {
                let leave_at = (t + motion.linger_ms).max(self.press_at.map_or(0, |p| p.0));
                self.phase = Phase::AtZone { leave_at };
                let to = self.wander_point(motion);
                out.path = Some(self.segment(t, motion.hop_ms, self.pos, to));
            }
            Phase::AtZone { leave_at } if self.seg_end <= t => {
                if t >= leave_at && self.press_at.is_none() {
                    let to = (self.pos.0, 1.0);
                    out.path = Some(self.segment(t, motion.exit_ms, self.pos, to));
                    self.phase = Phase::Exiting {
                        gone_at: t + motion.exit_ms,
                    };
                } else {
                    let to = self.wander_point(motion);
                    out.path = Some(self.segment(t, motion.hop_ms, self.pos, to));
                }
            }
            Phase::Exiting { gone_at } if gone_at <= t => {
                self.visits.push((self.visit_start, t));
                self.press_at = None;
                self.phase = Phase::Away {
                    next_visit: next_visit_after(policy, &mut self.rng, t),
                };
            }
            _ => {}
        }
        out
    }

    fn wander_point(&mut self, m: &AgentMotion) -> (f64, f64) {
        (
            m.feeder.0 + self.rng.random_range(-m.wander..=m.wander),
            m.feeder.1 + self.rng.random_range(-m.wander..=m.wander),
        )
    }

    fn segment(&mut self, t: u64, dur: u64, from: (f64, f64), to: (f64, f64)) -> MotionSegment {
        self.pos = to;
        self.seg_end = t + dur;
        MotionSegment {
            start_ms: t,
            end_ms: t + dur,
            from,
            to,
        }
    }
}

fn next_visit_after(policy: &AgentPolicy, rng: &mut SplitMix64, t: u64) -> Option<u64> {
    if policy.trial_appetite <= 0.0 {
        return None;
    }
    let rate_per_ms = policy.trial_appetite / 3_600_000.0;
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    Some(t + (-u.ln() / rate_per_ms).round().max(1.0) as u64)
}

/// Functional form: heard stimulus (if any) then the due step.
pub fn agent_step(
    agent: &mut Agent,
    policy: &AgentPolicy,
    motion: &AgentMotion,
    pending_stimulus: Option<u8>,
    t_sim_ms: u64,
) -> AgentOutput {
    if let Some(button) = pending_stimulus {
        agent.hear(policy, button, t_sim_ms);
    }
    agent.step(policy, motion, t_sim_ms)
}

// --- whole board -------------------------------------------------------------

#[derive(Debug, Default, Clone, PartialEq)]
pub struct RigOutput {
    /// Encoded frames for the host, with emission times.
    pub bytes: Vec<(u64, Vec<u8>)>,
    pub paths: Vec<MotionSegment>,
    pub env: Vec<(u64, EnvAction)>,
}

impl RigOutput {
    fn absorb(&mut self, other: RigOutput) {
        self.bytes.extend(other.bytes);
        self.paths.extend(other.paths);
        self.env.extend(other.env);
    }
}

/// Microcontroller board with its attached devices and the animal.
#[derive(Debug, Clone)]
pub struct Rig {
    cfg: RigConfig,
    state: RigState,
    decoder: Decoder,
    outbox: VecDeque<(u64, WireMessage)>,
    agent: Agent,
    /// Hidden training contingency used by the agent: stimulus -> button.
    contingency: [u8; 3],
    next_env_t: u64,
    day_offset_ms: u64,
    wire_trace: Option<Vec<u8>>,
}

impl Rig {
    pub fn new(cfg: RigConfig, seed: u64, day_offset_ms: u64) -> Self {
        let state = RigState::new(&cfg, seed);
        let agent = Agent::new(&cfg.agent, seed ^ 0xA11CE, 0);
        Self {
            next_env_t: 0,
            cfg,
            state,
            decoder: Decoder::new(),
            outbox: VecDeque::new(),
            agent,
            contingency: [0, 1, 2],
            day_offset_ms,
            wire_trace: None,
        }
    }

    pub fn with_contingency(mut self, map: [u8; 3]) -> Self {
        self.contingency = map;
        self
    }

    /// Keeps a copy of every byte the rig sends.
    pub fn record_wire(&mut self) {
        self.wire_trace.get_or_insert_with(Vec::new);
    }

    pub fn wire_trace(&self) -> &[u8] {
        self.wire_trace.as_deref().unwrap_or(&[])
    }

    pub fn state(&self) -> &RigState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut RigState {
        &mut self.state
    }

    pub fn config(&self) -> &RigConfig {
        &self.cfg
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn diagnostics(&self) -> DecoderDiagnostics {
        self.decoder.diagnostics()
    }

    /// Bytes arriving from the host at `t`.
    pub fn receive(&mut self, t: u64, bytes: &[u8]) {
        for msg in self.decoder.feed(bytes) {
            for reply in handle_host_msg(&mut self.state, &self.cfg, &msg, t) {
                self.enqueue(reply);
            }
        }
    }

    /// Sound reaching the animal.
    pub fn hear(&mut self, t: u64, stimulus_id: u8) {
        let button = self.contingency[stimulus_id as usize % 3];
        self.agent.hear(&self.cfg.agent, button, t);
    }

    fn enqueue(&mut self, item: (u64, WireMessage)) {
        let idx = self.outbox.partition_point(|(t, _)| *t <= item.0);
        self.outbox.insert(idx, item);
    }

    pub fn next_event_time(&self) -> u64 {
        let mut next = self.next_env_t;
        if let Some((t, _)) = self.outbox.front() {
            next = next.min(*t);
        }
        if let Some(t) = self.agent.next_wakeup() {
            next = next.min(t);
        }
        next
    }

    /// Processes everything due at or before `t`.
    pub fn advance(&mut self, t: u64) -> RigOutput {
        let mut out = RigOutput::default();
        loop {
            let next = self.next_event_time();
            if next > t {
                break;
            }
            out.absorb(self.advance_once(next));
        }
        out
    }

    fn advance_once(&mut self, now: u64) -> RigOutput {
        let mut out = RigOutput::default();
        if self.next_env_t <= now {
            let dt = self.cfg.env_step_ms;
            for a in step_env(&mut self.state, &self.cfg, dt, self.day_offset_ms + now) {
                out.env.push((now, a));
            }
            self.next_env_t = now + dt;
        }
        if self.agent.next_wakeup().is_some_and(|w| w <= now) {
            let step = self.agent.step(&self.cfg.agent, &self.cfg.motion, now);
            if let Some(id) = step.press {
                self.enqueue((now, WireMessage::Button { id }));
            }
            out.paths.extend(step.path);
        }
        while self.outbox.front().is_some_and(|(t, _)| *t <= now) {
            let (t, msg) = self.outbox.pop_front().expect("front checked");
            let bytes = encode_msg(&msg).expect("rig emits only valid messages");
            if let Some(trace) = &mut self.wire_trace {
                trace.extend_from_slice(&bytes);
            }
            out.bytes.push((t, bytes));
        }
        out
    }
}

/// A [`Link`] straight onto a rig, for driving the feeder without the rest
/// of the session.
#[derive(Debug)]
pub struct RigLink {
    rig: Rig,
    now: u64,
    host: Decoder,
    inbox: VecDeque<(u64, WireMessage)>,
    open: bool,
}

impl RigLink {
    pub fn new(rig: Rig) -> Self {
        Self {
            rig,
            now: 0,
            host: Decoder::new(),
            inbox: VecDeque::new(),
            open: true,
        }
    }

    pub fn rig(&self) -> &Rig {
        &self.rig
    }

    pub fn close(&mut self) {
        self.open = false;
    }
}

impl Link for RigLink {
    fn now_ms(&self) -> u64 {
        self.now
    }

    fn send(&mut self, msg: &WireMessage) -> Result<(), LinkError> {
        if !self.open {
            return Err(LinkError::Closed { attempts: 0 });
        }
        let bytes = encode_msg(msg)?;
        self.rig.receive(self.now, &bytes);
        Ok(())
    }

    fn recv_until(&mut self, deadline_ms: u64) -> Result<Option<(u64, WireMessage)>, LinkError> {
        loop {
            if !self.open {
                return Err(LinkError::Closed { attempts: 0 });
            }
            if let Some(&(t, m)) = self.inbox.front() {
                if t <= deadline_ms {
                    self.inbox.pop_front();
                    self.now = self.now.max(t);
                    return Ok(Some((t, m)));
                }
            }
            let next = self.rig.next_event_time();
            if next > deadline_ms {
                self.now = deadline_ms;
                return Ok(None);
            }
            let out = self.rig.advance(next);
            self.now = self.now.max(next);
            for (t, bytes) in out.bytes {
                for m in self.host.feed(&bytes) {
                    self.inbox.push_back((t, m));
                }
            }
        }
    }
}
