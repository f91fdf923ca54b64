//! Randomized comparisons shared by the oracle tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use catos_core::hwlink::{self, Decoder, WireMessage};
use catos_core::vision::{
    self, Background, ClipRecorder, Frame, GateEvent, GateParams, MemorySink, RecordGate, VisionParams,
};

use super::{flood_fill_blobs, gate_intervals, hand_frame, OracleBlob};

pub fn random_mask(rng: &mut SplitMix64) -> (u32, u32, Vec<bool>) {
    let w = rng.random_range(8..=64u32);
    let h = rng.random_range(8..=64u32);
    let density = rng.random_range(0.02..0.7);
    let mask = (0..w * h).map(|_| rng.random_bool(density)).collect();
    (w, h, mask)
}

fn as_oracle(b: &vision::Blob) -> OracleBlob {
    (b.area, b.bbox, b.centroid_x, b.centroid_y)
}

fn same_blobs(mut got: Vec<OracleBlob>, want: &[OracleBlob]) -> bool {
    got.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    got.len() == want.len()
        && got.iter().zip(want).all(|(g, w)| {
            g.0 == w.0 && g.1 == w.1 && (g.2 - w.2).abs() < 1e-9 && (g.3 - w.3).abs() < 1e-9
        })
}

/// Masks where the labeller or the full detector disagrees with flood fill.
pub fn blob_mismatches(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut bad = Vec::new();
    for case in 0..n {
        let (w, h, mask) = random_mask(&mut rng);
        let min_area = rng.random_range(1..=20u32);
        let want = flood_fill_blobs(&mask, w, h, min_area);

        let labelled: Vec<OracleBlob> = vision::label_components(&mask, w, h, min_area).iter().map(as_oracle).collect();
        let ordered = labelled.windows(2).all(|p| (p[0].1 .0, p[0].1 .1) <= (p[1].1 .0, p[1].1 .1));

        // the same mask through the detector: dark background, bright mask
        let bg_frame = Frame::new(0, 0, w, h, vec![0; (w * h) as usize]).unwrap();
        let mut bg = Background::from_frame(&bg_frame);
        let px = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        let frame = Frame::new(0, 1, w, h, px).unwrap();
        let params = VisionParams {
            min_blob_area: min_area,
            ..VisionParams::default()
        };
        let detected: Vec<OracleBlob> = vision::detect_motion_blobs(&frame, &mut bg, &params)
            .unwrap()
            .iter()
            .map(as_oracle)
            .collect();

        if !ordered || !same_blobs(labelled, &want) || !same_blobs(detected, &want) {
            bad.push(case);
        }
    }
    bad
}

pub struct GateScript {
    pub fps: f64,
    pub duration_ms: u64,
    pub params: GateParams,
    pub frames: Vec<(u64, bool)>,
}

pub fn random_gate_script(rng: &mut SplitMix64) -> GateScript {
    let fps = [5.0, 7.5, 10.0, 15.0, 30.0][rng.random_range(0..5)];
    let duration_ms = rng.random_range(1_000..120_000u64);
    let params = GateParams {
        pre_roll_ms: rng.random_range(0..5_000),
        hangover_ms: rng.random_range(1..6_000),
    };
    // bursts of motion separated by gaps of random length
    let mut spans = Vec::new();
    let mut t = rng.random_range(0..duration_ms / 2);
    while t < duration_ms {
        let len = rng.random_range(0..8_000);
        spans.push((t, t + len));
        t += len + rng.random_range(0..15_000);
    }
    let n = vision::frame_count(duration_ms, fps);
    let frames = (0..n)
        .map(|k| {
            let tk = vision::frame_time_ms(k, fps);
            let moving = spans.iter().any(|&(a, b)| tk >= a && tk <= b) && rng.random_bool(0.9);
            (tk, moving)
        })
        .collect();
    GateScript {
        fps,
        duration_ms,
        params,
        frames,
    }
}

/// Scripts where the gate's clips differ from the interval-union oracle, or
/// the recorder stores a frame outside its clip (or misses one inside).
pub fn gate_mismatches(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut bad = Vec::new();
    for case in 0..n {
        let s = random_gate_script(&mut rng);
        let motion: Vec<u64> = s.frames.iter().filter(|f| f.1).map(|f| f.0).collect();
        let want = gate_intervals(&motion, s.params.pre_roll_ms, s.params.hangover_ms, 0, s.duration_ms);

        let mut gate = RecordGate::new(s.params, 0);
        let mut got = Vec::new();
        for &(t, m) in &s.frames {
            for ev in vision::record_gate_step(&mut gate, t, m) {
                if let GateEvent::Close { start_ms, end_ms } = ev {
                    got.push((start_ms, end_ms));
                }
            }
        }
        if let Some(GateEvent::Close { start_ms, end_ms }) = gate.finish(s.duration_ms) {
            got.push((start_ms, end_ms));
        }

        let mut rec = ClipRecorder::new(0, s.fps, s.params, 0, MemorySink::default());
        for &(t, m) in &s.frames {
            let f = Frame::new(0, t, 8, 8, vec![0; 64]).unwrap();
            rec.push(f, m).unwrap();
        }
        rec.finish(s.duration_ms).unwrap();
        let sink = rec.into_sink();
        let spans: Vec<(u64, u64)> = sink.clips.iter().map(|c| (c.start_ms, c.end_ms)).collect();
        let frames_ok = sink.clips.iter().zip(&sink.frames).all(|(c, fs)| {
            let want_t: Vec<u64> = s
                .frames
                .iter()
                .map(|f| f.0)
                .filter(|&t| t >= c.start_ms && t <= c.end_ms)
                .collect();
            let got_t: Vec<u64> = fs.iter().map(|f| f.t_sim_ms).collect();
            got_t == want_t && c.frame_refs == want_t
        });

        if got != want || spans != want || !frames_ok {
            bad.push(case);
        }
    }
    bad
}

pub fn random_message(rng: &mut SplitMix64) -> WireMessage {
    match rng.random_range(0..8) {
        0 => WireMessage::Dispense { degrees: rng.random() },
        1 => WireMessage::SetLight { on: rng.random() },
        2 => WireMessage::SetFans { on: rng.random() },
        3 => WireMessage::QuerySensors,
        4 => WireMessage::Button { id: rng.random_range(0..3) },
        5 => WireMessage::PiezoHit,
        6 => WireMessage::Sensors {
            temp_centi_c: rng.random(),
            photo: rng.random(),
        },
        _ => WireMessage::DispenseDone,
    }
}

/// Hand-assembled frame for a message, independent of the encoder.
pub fn hand_encode(m: &WireMessage) -> Vec<u8> {
    match *m {
        WireMessage::Dispense { degrees } => hand_frame(0x01, &[degrees]),
        WireMessage::SetLight { on } => hand_frame(0x02, &[on as u8]),
        WireMessage::SetFans { on } => hand_frame(0x03, &[on as u8]),
        WireMessage::QuerySensors => hand_frame(0x04, &[]),
        WireMessage::Button { id } => hand_frame(0x81, &[id]),
        WireMessage::PiezoHit => hand_frame(0x82, &[]),
        WireMessage::Sensors { temp_centi_c, photo } => {
            let t = temp_centi_c as u16;
            hand_frame(0x83, &[(t >> 8) as u8, t as u8, (photo >> 8) as u8, photo as u8])
        }
        WireMessage::DispenseDone => hand_frame(0x84, &[]),
    }
}

/// Round trips that fail: encoder output differs from the hand-built frame,
/// or decoding (in random chunks) does not give the message back.
pub fn roundtrip_failures(n: usize, seed: u64) -> usize {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut dec = Decoder::new();
    let mut failures = 0;
    for _ in 0..n {
        let m = random_message(&mut rng);
        let bytes = hwlink::encode_msg(&m).unwrap();
        let mut got = Vec::new();
        let mut rest = &bytes[..];
        while !rest.is_empty() {
            let k = rng.random_range(1..=rest.len());
            got.extend(dec.feed(&rest[..k]));
            rest = &rest[k..];
        }
        if bytes != hand_encode(&m) || got != [m] || dec.pending() != 0 {
            failures += 1;
        }
    }
    failures
}

/// Garbage of `len` bytes with `n_frames` valid frames spliced in at random
/// offsets. Returns the stream and the embedded messages in order.
pub fn fuzz_stream(seed: u64, len: usize, n_frames: usize, allow_sync_in_garbage: bool) -> (Vec<u8>, Vec<WireMessage>) {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut msgs: Vec<WireMessage> = (0..n_frames).map(|_| random_message(&mut rng)).collect();
    let frames: Vec<Vec<u8>> = msgs.iter().map(hand_encode).collect();
    let frame_bytes: usize = frames.iter().map(Vec::len).sum();
    let garbage_len = len - frame_bytes;
    let mut cuts: Vec<usize> = (0..n_frames).map(|_| rng.random_range(0..=garbage_len)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(len);
    let mut g = 0;
    for (cut, f) in cuts.iter().zip(&frames) {
        while g < *cut {
            out.push(garbage_byte(&mut rng, allow_sync_in_garbage));
            g += 1;
        }
        out.extend_from_slice(f);
    }
    while g < garbage_len {
        out.push(garbage_byte(&mut rng, allow_sync_in_garbage));
        g += 1;
    }
    msgs.shrink_to_fit();
    (out, msgs)
}

fn garbage_byte(rng: &mut SplitMix64, allow_sync: bool) -> u8 {
    loop {
        let b: u8 = rng.random();
        if allow_sync || b != 0xAA {
            return b;
        }
    }
}

pub fn decode_chunked(bytes: &[u8], seed: u64) -> (Vec<WireMessage>, hwlink::DecoderDiagnostics) {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut dec = Decoder::new();
    let mut out = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let k = rng.random_range(1..=rest.len().min(4096));
        out.extend(dec.feed(&rest[..k]));
        rest = &rest[k..];
    }
    (out, dec.diagnostics())
}

pub fn frame_corpus() -> Vec<WireMessage> {
    let mut v = vec![
        WireMessage::QuerySensors,
        WireMessage::PiezoHit,
        WireMessage::DispenseDone,
        WireMessage::SetLight { on: true },
        WireMessage::SetLight { on: false },
        WireMessage::SetFans { on: true },
        WireMessage::SetFans { on: false },
        WireMessage::Sensors {
            temp_centi_c: 2350,
            photo: 512,
        },
        WireMessage::Sensors {
            temp_centi_c: -40,
            photo: 0xFFFF,
        },
    ];
    v.extend([0u8, 1, 2].map(|id| WireMessage::Button { id }));
    v.extend([0u8, 45, 90, 0xAA, 255].map(|degrees| WireMessage::Dispense { degrees }));
    v
}

#[derive(Debug, Default)]
pub struct FlipReport {
    pub flips: usize,
    pub detected: usize,
    /// (original, flipped byte index, bit, what came out instead)
    pub collisions: Vec<(WireMessage, usize, u8, Vec<WireMessage>)>,
    /// Corruptions after which a checksum-valid bogus frame swallowed the
    /// clean frame that followed.
    pub follower_collisions: Vec<(WireMessage, usize, u8)>,
    /// Clean followers lost without any bogus frame being accepted.
    pub lost_followers: usize,
}

/// Flips every bit of every byte of each corpus frame and decodes the
/// result, alone and followed by a clean frame.
pub fn single_bit_flips() -> FlipReport {
    let follower = WireMessage::Button { id: 1 };
    let follower_bytes = hwlink::encode_msg(&follower).unwrap();
    let mut r = FlipReport::default();
    for m in frame_corpus() {
        let clean = hwlink::encode_msg(&m).unwrap();
        for i in 0..clean.len() {
            for bit in 0..8u8 {
                let mut f = clean.clone();
                f[i] ^= 1 << bit;
                r.flips += 1;
                let alone = Decoder::new().feed(&f);
                if alone.is_empty() {
                    r.detected += 1;
                } else {
                    r.collisions.push((m, i, bit, alone));
                }
                let mut both = f.clone();
                both.extend_from_slice(&follower_bytes);
                // a corrupted length can hold the follower back until enough
                // bytes arrive to reject the bogus frame
                both.extend_from_slice(&[0u8; 260]);
                let mut dec = Decoder::new();
                let got = dec.feed(&both);
                if !got.contains(&follower) {
                    let d = dec.diagnostics();
                    if d.frames_ok + d.unknown_type + d.bad_payload > 0 {
                        // a bogus span passed the checksum and covered it
                        r.follower_collisions.push((m, i, bit));
                    } else {
                        r.lost_followers += 1;
                    }
                }
            }
        }
    }
    r
}
