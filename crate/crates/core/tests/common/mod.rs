//! Independent reference implementations used as test oracles.
//!
//! None of these call into the crate's own algorithms; they take the
//! plainest route to the same answer.

#![allow(dead_code)]

pub mod checks;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

/// (area, (min_x, min_y, max_x, max_y), cx, cy)
pub type OracleBlob = (u32, (u32, u32, u32, u32), f64, f64);

/// Depth-first flood fill over 8-neighbours.
pub fn flood_fill_blobs(mask: &[bool], w: u32, h: u32, min_area: u32) -> Vec<OracleBlob> {
    let (w, h) = (w as i64, h as i64);
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut n, mut sx, mut sy) = (0u64, 0u64, 0u64);
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        while let Some(i) = stack.pop() {
            let (x, y) = (i as i64 % w, i as i64 / w);
            n += 1;
            sx += x as u64;
            sy += y as u64;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if n >= min_area as u64 {
            out.push((
                n as u32,
                (x0 as u32, y0 as u32, x1 as u32, y1 as u32),
                sx as f64 / n as f64,
                sy as f64 / n as f64,
            ));
        }
    }
    out.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    out
}

/// Clips as the merged union of `[t - pre, t + hang]` over motion frames,
/// clamped to the stream.
pub fn gate_intervals(motion: &[u64], pre: u64, hang: u64, stream_start: u64, stream_end: u64) -> Vec<(u64, u64)> {
    let mut merged: Vec<(u64, u64, u64)> = Vec::new(); // (start, end, last motion)
    for &t in motion {
        let iv = (t.saturating_sub(pre).max(stream_start), t + hang);
        match merged.last_mut() {
            Some(last) if iv.0 <= last.1 => {
                last.1 = last.1.max(iv.1);
                last.2 = t;
            }
            _ => merged.push((iv.0, iv.1, t)),
        }
    }
    merged
        .into_iter()
        .map(|(s, e, last)| (s, e.min(stream_end.max(last))))
        .collect()
}

fn binom(n: u64, k: u64) -> BigInt {
    let mut c = BigInt::one();
    for i in 0..k {
        c = c * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    c
}

/// Exact `P[X >= k]` for `X ~ Binomial(n, num/den)` in rational arithmetic.
pub fn binomial_tail_exact(n: u64, k: u64, num: u64, den: u64) -> f64 {
    let p = BigRational::new(BigInt::from(num), BigInt::from(den));
    let q = BigRational::one() - &p;
    let mut sum = BigRational::zero();
    for i in k..=n {
        let term = BigRational::from_integer(binom(n, i)) * pow(&p, i) * pow(&q, n - i);
        sum += term;
    }
    sum.to_f64().expect("finite")
}

fn pow(x: &BigRational, e: u64) -> BigRational {
    let mut r = BigRational::one();
    for _ in 0..e {
        r *= x;
    }
    r
}

/// Fields of a canonical PCM WAV file, read by walking its RIFF chunks.
#[derive(Debug, PartialEq, Eq)]
pub struct WavInfo {
    pub riff_size: u32,
    pub format_tag: u16,
    pub channels: u16,
    pub sample_rate: u32,
    pub byte_rate: u32,
    pub block_align: u16,
    pub bits: u16,
    pub data_offset: usize,
    pub data: Vec<i16>,
}

pub fn parse_wav(bytes: &[u8]) -> Option<WavInfo> {
    let u16_at = |i: usize| Some(u16::from_le_bytes(bytes.get(i..i + 2)?.try_into().ok()?));
    let u32_at = |i: usize| Some(u32::from_le_bytes(bytes.get(i..i + 4)?.try_into().ok()?));
    if bytes.get(0..4)? != b"RIFF" || bytes.get(8..12)? != b"WAVE" {
        return None;
    }
    let riff_size = u32_at(4)?;
    let mut pos = 12;
    let mut fmt = None;
    loop {
        let id = bytes.get(pos..pos + 4)?;
        let size = u32_at(pos + 4)? as usize;
        let body = pos + 8;
        if id == b"fmt " {
            fmt = Some((u16_at(body)?, u16_at(body + 2)?, u32_at(body + 4)?, u32_at(body + 8)?, u16_at(body + 12)?, u16_at(body + 14)?));
        } else if id == b"data" {
            let (format_tag, channels, sample_rate, byte_rate, block_align, bits) = fmt?;
            let raw = bytes.get(body..body + size)?;
            let data = raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
            return Some(WavInfo {
                riff_size,
                format_tag,
                channels,
                sample_rate,
                byte_rate,
                block_align,
                bits,
                data_offset: body,
                data,
            });
        }
        pos = body + size + (size & 1);
    }
}

/// A frame assembled by hand: sync, type, length, payload, XOR of the rest.
pub fn hand_frame(msg_type: u8, payload: &[u8]) -> Vec<u8> {
    let mut x = msg_type ^ payload.len() as u8;
    for b in payload {
        x ^= b;
    }
    let mut f = vec![0xAA, msg_type, payload.len() as u8];
    f.extend_from_slice(payload);
    f.push(x);
    f
}

/// Direct DFT power at one frequency, for cross-checking single-bin filters.
pub fn dft_power(samples: &[i16], freq_hz: f64, sample_rate: u32) -> f64 {
    let (mut re, mut im) = (0.0f64, 0.0f64);
    for (i, &s) in samples.iter().enumerate() {
        let ph = 2.0 * std::f64::consts::PI * freq_hz * i as f64 / sample_rate as f64;
        re += s as f64 * ph.cos();
        im -= s as f64 * ph.sin();
    }
    re * re + im * im
}

/// Every regular file under `dir`, as (relative path, bytes), sorted.
pub fn tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn trace_row(t_ms: u64, blob: u32, cx: f64, cy: f64) -> catos_core::vision::MovementRecordRow {
    catos_core::vision::MovementRecordRow {
        t_ms,
        blob,
        cx,
        cy,
        area: 12,
    }
}

/// Rows for a 12x10 trace and the PGM drawn by hand from
/// `golden/movement_trace.txt` (background 180, first sample 0, last 255).
pub fn golden_trace() -> (Vec<catos_core::vision::MovementRecordRow>, Vec<u8>) {
    let rows = vec![
        trace_row(1000, 0, 2.0, 2.0),
        trace_row(1005, 0, 5.0, 7.0),
        trace_row(1010, 0, 9.0, 2.0),
        trace_row(1010, 1, 9.0, 7.0),
    ];
    let art = include_str!("../golden/movement_trace.txt");
    let mut pgm = b"P5\n12 10\n255\n".to_vec();
    for ch in art.lines().flat_map(str::chars) {
        pgm.push(match ch {
            '.' => 180,
            '0' => 0,
            'm' => 128,
            '#' => 255,
            c => panic!("bad golden char {c:?}"),
        });
    }
    (rows, pgm)
}
