//! Moves a finished session out of the output folder into a timestamped
//! archive folder, renders movement traces and writes `index.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics;
use crate::audio;
use crate::pgm;
use crate::schema::{self, TrialResult, RESULTS_FILE_NAME};
use crate::vision::{self, CameraSpec, ClipManifest, MovementRecordRow, CLIP_MANIFEST};

pub const INDEX_FILE: &str = "index.json";
pub const SESSION_META_FILE: &str = "session.json";
pub const CANVAS_BACKGROUND: u8 = 180;
pub const SESSION_ID_FORMAT: &str = "%Y%m%d_%H%M%S";

pub const CLIPS: &str = "clips";
pub const SOUNDS: &str = "sounds";
pub const MOVEMENT: &str = "movement";
pub const RESULTS: &str = "results";
pub const LOGS: &str = "logs";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("session not closed: {0}")]
    NotClosed(String),
    #[error("session {0} is already archived")]
    AlreadyArchived(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error("movement image needs at least one row")]
    EmptyRows,
    #[error("{} file(s) could not be archived: {}", .0.len(), .0.join("; "))]
    Partial(Vec<String>),
}

impl ArchiveError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Written by the session runner next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionMeta {
    pub session_id: String,
    pub seed: u64,
    pub start_datetime: String,
    pub duration_ms: u64,
    pub cameras: Vec<CameraSpec>,
    pub stimulus_to_button: [u8; 3],
    pub response_window_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Folders {
    pub clips: String,
    pub sounds: String,
    pub movement: String,
    pub results: String,
    pub logs: String,
}

impl Default for Folders {
    fn default() -> Self {
        Self {
            clips: CLIPS.into(),
            sounds: SOUNDS.into(),
            movement: MOVEMENT.into(),
            results: RESULTS.into(),
            logs: LOGS.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub camera_id: u8,
    pub start_ms: u64,
    pub end_ms: u64,
    pub frame_count: u64,
    pub path: String,
    pub movement_image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoundEntry {
    pub file: String,
    pub original: String,
    /// Trial whose span the sound overlaps, if any.
    pub trial_id: Option<u32>,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsDigest {
    pub trials: u32,
    pub correct: u32,
    pub observed_s: f64,
    pub recorded_s: f64,
    pub duty_cycle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionIndex {
    pub session_id: String,
    pub seed: u64,
    pub start_datetime: String,
    pub duration_ms: u64,
    pub cameras: Vec<CameraSpec>,
    pub stimulus_to_button: [u8; 3],
    pub folders: Folders,
    pub clips: Vec<ClipEntry>,
    pub sounds: Vec<SoundEntry>,
    pub movement_files: Vec<String>,
    pub results_file: String,
    pub logs: Vec<String>,
    pub stats: StatsDigest,
}

pub fn is_session_id(s: &str) -> bool {
    s.len() == 15 && chrono::NaiveDateTime::parse_from_str(s, SESSION_ID_FORMAT).is_ok()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ArchiveError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ArchiveError::MissingFile(path.to_path_buf()),
        _ => ArchiveError::io(path, e),
    })?;
    serde_json::from_str(&text)
        .map_err(|e| ArchiveError::Invalid(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArchiveError> {
    let mut text = serde_json::to_string_pretty(value).expect("index types serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| ArchiveError::io(path, e))
}

pub fn read_index(session_dir: &Path) -> Result<SessionIndex, ArchiveError> {
    read_json(&session_dir.join(INDEX_FILE))
}

// --- movement images -----------------------------------------------------------

/// Intensity for a sample at `t` in a clip spanning `[t_first, t_last]`.
pub fn time_intensity(t: u64, t_first: u64, t_last: u64) -> u8 {
    if t_last == t_first {
        return 0;
    }
    (255.0 * (t - t_first) as f64 / (t_last - t_first) as f64).round() as u8
}

pub fn blob_radius(area: u32) -> f64 {
    (area as f64 / std::f64::consts::PI).sqrt().round().max(2.0)
}

fn put(canvas: &mut [u8], w: u32, h: u32, x: i64, y: i64, v: u8) {
    if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
        canvas[(y as u32 * w + x as u32) as usize] = v;
    }
}

fn fill_disk(canvas: &mut [u8], w: u32, h: u32, cx: f64, cy: f64, r: f64, v: u8) {
    let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
    let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                put(canvas, w, h, x, y, v);
            }
        }
    }
}

fn line(canvas: &mut [u8], w: u32, h: u32, a: (i64, i64), b: (i64, i64), v: u8) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(canvas, w, h, x, y, v);
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Renders one clip's movement trace: disks at blob centroids shaded from
/// black (first sample) to white (last), with same-time blobs chained by
/// lines. Returns PGM bytes.
pub fn render_movement_image(
    rows: &[MovementRecordRow],
    width: u32,
    height: u32,
) -> Result<Vec<u8>, ArchiveError> {
    let (first, last) = match (rows.first(), rows.last()) {
        (Some(f), Some(l)) => (f.t_ms, l.t_ms),
        _ => return Err(ArchiveError::EmptyRows),
    };
    if rows.windows(2).any(|p| p[1].t_ms < p[0].t_ms) {
        return Err(ArchiveError::Invalid("movement rows not sorted by time".into()));
    }
    let mut canvas = vec![CANVAS_BACKGROUND; (width * height) as usize];
    for group in rows.chunk_by(|a, b| a.t_ms == b.t_ms) {
        let v = time_intensity(group[0].t_ms, first, last);
        for r in group {
            fill_disk(&mut canvas, width, height, r.cx, r.cy, blob_radius(r.area), v);
        }
        for pair in group.windows(2) {
            let a = (pair[0].cx.round() as i64, pair[0].cy.round() as i64);
            let b = (pair[1].cx.round() as i64, pair[1].cy.round() as i64);
            line(&mut canvas, width, height, a, b, v);
        }
    }
    Ok(pgm::encode(width, height, &canvas))
}

// --- archiving -------------------------------------------------------------------

/// Time span `[start, end]` a trial occupies for sound labelling.
pub fn trial_span(r: &TrialResult, response_window_ms: u64) -> (u64, u64) {
    (r.t_start_ms, r.t_start_ms + r.latency_ms.unwrap_or(response_window_ms))
}

fn label_for(trials: &[TrialResult], window: u64, start: u64, end: u64) -> Option<u32> {
    trials.iter().find_map(|r| {
        let (ts, te) = trial_span(r, window);
        (start <= te && ts <= end).then_some(r.trial_id)
    })
}

fn sound_span(path: &Path) -> Result<(u64, u64), ArchiveError> {
    let buf = audio::wav_read(path).map_err(|e| ArchiveError::Invalid(format!("{}: {e}", path.display())))?;
    Ok((buf.t_start_ms, buf.t_start_ms + buf.duration_ms()))
}

fn labelled_name(trial: Option<u32>, original: &str) -> String {
    match trial {
        Some(id) => format!("t{id}_{original}"),
        None => format!("ambient_{original}"),
    }
}

/// Inverse of [`labelled_name`].
fn split_label(name: &str) -> Option<(Option<u32>, &str)> {
    if let Some(rest) = name.strip_prefix("ambient_") {
        return Some((None, rest));
    }
    let rest = name.strip_prefix('t')?;
    let (num, original) = rest.split_once('_')?;
    Some((Some(num.parse().ok()?), original))
}

fn results_with_summary(path: &Path) -> Result<schema::ResultsFile, ArchiveError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ArchiveError::NotClosed(format!("{} not found", path.display())))
        }
        Err(e) => return Err(ArchiveError::io(path, e)),
    };
    let file = schema::parse_results_csv(&text).map_err(|e| ArchiveError::Invalid(format!("{}: {e}", path.display())))?;
    if file.summary.is_none() {
        return Err(ArchiveError::NotClosed(format!("{} has no summary line", path.display())));
    }
    Ok(file)
}

fn move_path(from: &Path, to: &Path) -> io::Result<()> {
    match fs::rename(from, to) {
        Ok(()) => Ok(()),
        Err(_) => {
            // different file system: copy then remove
            if from.is_dir() {
                copy_dir(from, to)?;
                fs::remove_dir_all(from)
            } else {
                fs::copy(from, to)?;
                fs::remove_file(from)
            }
        }
    }
}

fn copy_dir(from: &Path, to: &Path) -> io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let dest = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &dest)?;
        } else {
            fs::copy(entry.path(), dest)?;
        }
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, ArchiveError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| ArchiveError::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| ArchiveError::io(dir, e))?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn is_movement_csv(name: &str) -> bool {
    name.starts_with("movement_cam") && name.ends_with(".csv")
}

fn movement_image_name(clip_id: &str) -> String {
    format!("{clip_id}.pgm")
}

fn rows_in(rows: &[MovementRecordRow], start: u64, end: u64) -> Vec<MovementRecordRow> {
    rows.iter().filter(|r| r.t_ms >= start && r.t_ms <= end).copied().collect()
}

fn digest(meta: &SessionMeta, clips: &[ClipEntry], summary: &schema::SessionSummary) -> Result<StatsDigest, ArchiveError> {
    let observed_s = meta.duration_ms as f64 / 1000.0 * meta.cameras.len() as f64;
    let recorded_ms: u64 = clips.iter().map(|c| c.end_ms - c.start_ms).sum();
    let recorded_s = recorded_ms as f64 / 1000.0;
    let duty_cycle = if observed_s > 0.0 {
        analytics::duty_cycle(recorded_s, observed_s).map_err(|e| ArchiveError::Invalid(e.to_string()))?
    } else {
        0.0
    };
    Ok(StatsDigest {
        trials: summary.trials,
        correct: summary.correct,
        observed_s,
        recorded_s,
        duty_cycle,
    })
}

/// Archives `output_dir` into `archive_root/<session_id>`. The id defaults to
/// the one recorded in the session metadata.
pub fn archive_session(
    output_dir: &Path,
    archive_root: &Path,
    session_id: Option<&str>,
) -> Result<SessionIndex, ArchiveError> {
    let results = results_with_summary(&output_dir.join(RESULTS_FILE_NAME))?;
    let meta: SessionMeta = read_json(&output_dir.join(SESSION_META_FILE))?;
    let session_id = session_id.unwrap_or(&meta.session_id).to_string();
    if !is_session_id(&session_id) {
        return Err(ArchiveError::Invalid(format!(
            "session id {session_id:?} is not a YYYYMMDD_HHMMSS timestamp"
        )));
    }
    let dest = archive_root.join(&session_id);
    if dest.exists() {
        return Err(ArchiveError::AlreadyArchived(session_id));
    }
    let folders = Folders::default();
    for sub in [CLIPS, SOUNDS, MOVEMENT, RESULTS, LOGS] {
        fs::create_dir_all(dest.join(sub)).map_err(|e| ArchiveError::io(dest.join(sub), e))?;
    }

    let mut failures = Vec::new();
    let mut clips = Vec::new();
    let mut sounds = Vec::new();
    let mut movement_files = Vec::new();
    let mut logs = Vec::new();
    for src in sorted_entries(output_dir)? {
        let name = file_name(&src);
        let (rel, attempt): (String, Result<(), ArchiveError>) = if src.is_dir() && src.join(CLIP_MANIFEST).is_file() {
            let rel = format!("{CLIPS}/{name}");
            let r = read_json::<ClipManifest>(&src.join(CLIP_MANIFEST)).map(|m| {
                clips.push(ClipEntry {
                    id: name.clone(),
                    camera_id: m.camera_id,
                    start_ms: m.start_ms,
                    end_ms: m.end_ms,
                    frame_count: m.count,
                    path: rel.clone(),
                    movement_image: format!("{MOVEMENT}/{}", movement_image_name(&name)),
                });
            });
            (rel, r)
        } else if name == RESULTS_FILE_NAME {
            (format!("{RESULTS}/{name}"), Ok(()))
        } else if is_movement_csv(&name) {
            let rel = format!("{MOVEMENT}/{name}");
            movement_files.push(rel.clone());
            (rel, Ok(()))
        } else if name.ends_with(".wav") {
            match sound_span(&src) {
                Ok((start_ms, end_ms)) => {
                    let trial_id = label_for(&results.results, meta.response_window_ms, start_ms, end_ms);
                    let rel = format!("{SOUNDS}/{}", labelled_name(trial_id, &name));
                    sounds.push(SoundEntry {
                        file: rel.clone(),
                        original: name.clone(),
                        trial_id,
                        start_ms,
                        end_ms,
                    });
                    (rel, Ok(()))
                }
                Err(e) => (String::new(), Err(e)),
            }
        } else {
            let rel = format!("{LOGS}/{name}");
            logs.push(rel.clone());
            (rel, Ok(()))
        };
        let moved = attempt.and_then(|()| {
            move_path(&src, &dest.join(&rel)).map_err(|e| ArchiveError::io(&src, e))
        });
        if let Err(e) = moved {
            failures.push(format!("{name}: {e}"));
        }
    }
    if !failures.is_empty() {
        return Err(ArchiveError::Partial(failures));
    }

    // movement traces, one image per clip
    let mut rows_by_cam: BTreeMap<u8, Vec<MovementRecordRow>> = BTreeMap::new();
    for cam in &meta.cameras {
        let p = dest.join(MOVEMENT).join(vision::movement_file_name(cam.camera_id));
        let rows = if p.is_file() {
            vision::read_movement_csv(&p).map_err(|e| ArchiveError::Invalid(format!("{}: {e}", p.display())))?
        } else {
            Vec::new()
        };
        rows_by_cam.insert(cam.camera_id, rows);
    }
    clips.sort_by(|a, b| (a.camera_id, a.start_ms).cmp(&(b.camera_id, b.start_ms)));
    for c in &clips {
        let cam = meta
            .cameras
            .iter()
            .find(|s| s.camera_id == c.camera_id)
            .ok_or_else(|| ArchiveError::Invalid(format!("clip {} from unknown camera", c.id)))?;
        let rows = rows_in(rows_by_cam.get(&c.camera_id).map_or(&[][..], |v| v), c.start_ms, c.end_ms);
        let img = render_movement_image(&rows, cam.width, cam.height)
            .map_err(|e| ArchiveError::Invalid(format!("clip {}: {e}", c.id)))?;
        let p = dest.join(&c.movement_image);
        fs::write(&p, img).map_err(|e| ArchiveError::io(p, e))?;
    }
    check_clip_overlap(&clips)?;

    sounds.sort_by(|a, b| a.file.cmp(&b.file));
    movement_files.sort();
    logs.sort();
    let summary = results.summary.expect("checked above");
    let index = SessionIndex {
        stats: digest(&meta, &clips, &summary)?,
        session_id,
        seed: meta.seed,
        start_datetime: meta.start_datetime,
        duration_ms: meta.duration_ms,
        cameras: meta.cameras,
        stimulus_to_button: meta.stimulus_to_button,
        folders,
        clips,
        sounds,
        movement_files,
        results_file: format!("{RESULTS}/{RESULTS_FILE_NAME}"),
        logs,
    };
    write_json(&dest.join(INDEX_FILE), &index)?;
    Ok(index)
}

fn check_clip_overlap(clips: &[ClipEntry]) -> Result<(), ArchiveError> {
    for pair in clips.windows(2) {
        if pair[0].camera_id == pair[1].camera_id && pair[1].start_ms <= pair[0].end_ms {
            return Err(ArchiveError::Invalid(format!(
                "clips {} and {} overlap",
                pair[0].id, pair[1].id
            )));
        }
    }
    Ok(())
}

fn require(path: &Path) -> Result<(), ArchiveError> {
    if path.exists() {
        Ok(())
    } else {
        Err(ArchiveError::MissingFile(path.to_path_buf()))
    }
}

/// Rebuilds the index of an archived session purely from its files.
pub fn build_index(session_dir: &Path) -> Result<SessionIndex, ArchiveError> {
    let session_id = file_name(session_dir);
    let logs_dir = session_dir.join(LOGS);
    let meta: SessionMeta = read_json(&logs_dir.join(SESSION_META_FILE))?;
    let results_rel = format!("{RESULTS}/{RESULTS_FILE_NAME}");
    let results = results_with_summary(&session_dir.join(&results_rel)).map_err(|e| match e {
        ArchiveError::NotClosed(_) => ArchiveError::MissingFile(session_dir.join(&results_rel)),
        other => other,
    })?;

    let mut clips = Vec::new();
    for dir in sorted_entries(&session_dir.join(CLIPS))? {
        let id = file_name(&dir);
        let m: ClipManifest = read_json(&dir.join(CLIP_MANIFEST))?;
        for k in 1..=m.count {
            require(&dir.join(vision::frame_file_name(k)))?;
        }
        let movement_image = format!("{MOVEMENT}/{}", movement_image_name(&id));
        require(&session_dir.join(&movement_image))?;
        clips.push(ClipEntry {
            path: format!("{CLIPS}/{id}"),
            id,
            camera_id: m.camera_id,
            start_ms: m.start_ms,
            end_ms: m.end_ms,
            frame_count: m.count,
            movement_image,
        });
    }
    clips.sort_by(|a, b| (a.camera_id, a.start_ms).cmp(&(b.camera_id, b.start_ms)));
    check_clip_overlap(&clips)?;

    let mut sounds = Vec::new();
    for p in sorted_entries(&session_dir.join(SOUNDS))? {
        let name = file_name(&p);
        let (trial_id, original) = split_label(&name)
            .ok_or_else(|| ArchiveError::Invalid(format!("unlabelled sound {name}")))?;
        let (start_ms, end_ms) = sound_span(&p)?;
        sounds.push(SoundEntry {
            file: format!("{SOUNDS}/{name}"),
            original: original.to_string(),
            trial_id,
            start_ms,
            end_ms,
        });
    }
    let movement_files: Vec<String> = sorted_entries(&session_dir.join(MOVEMENT))?
        .iter()
        .map(|p| file_name(p))
        .filter(|n| is_movement_csv(n))
        .map(|n| format!("{MOVEMENT}/{n}"))
        .collect();
    let logs: Vec<String> = sorted_entries(&logs_dir)?
        .iter()
        .map(|p| format!("{LOGS}/{}", file_name(p)))
        .collect();
    let summary = results.summary.expect("checked above");
    Ok(SessionIndex {
        stats: digest(&meta, &clips, &summary)?,
        session_id,
        seed: meta.seed,
        start_datetime: meta.start_datetime,
        duration_ms: meta.duration_ms,
        cameras: meta.cameras,
        stimulus_to_button: meta.stimulus_to_button,
        folders: Folders::default(),
        clips,
        sounds,
        movement_files,
        results_file: results_rel,
        logs,
    })
}

/// Movement rows recorded during one clip of an archived session.
pub fn clip_movement_rows(
    session_dir: &Path,
    index: &SessionIndex,
    clip_id: &str,
) -> Result<Option<Vec<MovementRecordRow>>, ArchiveError> {
    let Some(clip) = index.clips.iter().find(|c| c.id == clip_id) else {
        return Ok(None);
    };
    let p = session_dir.join(MOVEMENT).join(vision::movement_file_name(clip.camera_id));
    if !p.is_file() {
        return Ok(Some(Vec::new()));
    }
    let rows = vision::read_movement_csv(&p)
        .map_err(|e| ArchiveError::Invalid(format!("{}: {e}", p.display())))?;
    Ok(Some(rows_in(&rows, clip.start_ms, clip.end_ms)))
}

/// Ids of all archived sessions under `archive_root`, oldest first.
pub fn list_sessions(archive_root: &Path) -> Result<Vec<String>, ArchiveError> {
    let mut ids: Vec<String> = sorted_entries(archive_root)?
        .iter()
        .filter(|p| p.join(INDEX_FILE).is_file())
        .map(|p| file_name(p))
        .filter(|n| is_session_id(n))
        .collect();
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t_ms: u64, blob: u32, cx: f64, cy: f64, area: u32) -> MovementRecordRow {
        MovementRecordRow {
            t_ms,
            blob,
            cx,
            cy,
            area,
        }
    }

    fn pixels(pgm_bytes: &[u8]) -> Vec<u8> {
        pgm::decode(pgm_bytes).unwrap().2
    }

    #[test]
    fn intensity_endpoints() {
        assert_eq!(time_intensity(0, 0, 1000), 0);
        assert_eq!(time_intensity(1000, 0, 1000), 255);
        assert_eq!(time_intensity(500, 0, 1000), 128);
        assert_eq!(time_intensity(7, 7, 7), 0);
    }

    #[test]
    fn single_row_is_a_black_disk_on_gray() {
        let img = render_movement_image(&[row(100, 0, 5.0, 5.0, 12)], 16, 12).unwrap();
        let px = pixels(&img);
        // radius max(2, round(sqrt(12/pi))) = 2
        assert_eq!(px[5 * 16 + 5], 0);
        assert_eq!(px[5 * 16 + 7], 0);
        assert_eq!(px[5 * 16 + 8], CANVAS_BACKGROUND);
        assert_eq!(px[7 * 16 + 7], CANVAS_BACKGROUND);
        assert_eq!(px.iter().filter(|&&v| v == 0).count(), 13);
    }

    #[test]
    fn first_black_last_white() {
        let img = render_movement_image(
            &[row(0, 0, 3.0, 3.0, 20), row(1000, 0, 12.0, 8.0, 20)],
            16,
            12,
        )
        .unwrap();
        let px = pixels(&img);
        assert_eq!(px[3 * 16 + 3], 0);
        assert_eq!(px[8 * 16 + 12], 255);
    }

    #[test]
    fn same_time_blobs_are_joined() {
        let img = render_movement_image(
            &[row(0, 0, 3.0, 3.0, 4), row(0, 1, 20.0, 3.0, 4), row(10, 0, 3.0, 10.0, 4)],
            24,
            16,
        )
        .unwrap();
        let px = pixels(&img);
        for x in 3..=20 {
            assert_eq!(px[3 * 24 + x], 0, "x = {x}");
        }
    }

    #[test]
    fn empty_rows_rejected() {
        assert!(matches!(render_movement_image(&[], 8, 8), Err(ArchiveError::EmptyRows)));
    }

    #[test]
    fn sound_labels_round_trip() {
        assert_eq!(split_label("t12_stim0_41000.wav"), Some((Some(12), "stim0_41000.wav")));
        assert_eq!(split_label("ambient_mic_0.wav"), Some((None, "mic_0.wav")));
        assert_eq!(labelled_name(Some(3), "mic_5.wav"), "t3_mic_5.wav");
        assert_eq!(split_label("stim0_1.wav"), None);
    }

    #[test]
    fn session_ids() {
        assert!(is_session_id("20240501_090000"));
        assert!(!is_session_id("20241301_090000"));
        assert!(!is_session_id("2024-05-01"));
    }
}
