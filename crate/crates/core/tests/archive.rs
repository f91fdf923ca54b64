mod common;

use std::collections::BTreeMap;
use std::path::Path;

use catos_core::archive::{self, ArchiveError, CANVAS_BACKGROUND};
use catos_core::session::{run_session, RunConfig};
use catos_core::vision;

fn short_config(seed: u64, appetite: f64) -> RunConfig {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.duration_ms = 300_000;
    cfg.rig.agent.trial_appetite = appetite;
    cfg
}

/// Byte contents with their multiplicity.
fn multiset(tree: &[(String, Vec<u8>)]) -> BTreeMap<&[u8], usize> {
    let mut m = BTreeMap::new();
    for (_, b) in tree {
        *m.entry(&b[..]).or_default() += 1;
    }
    m
}

fn run_and_archive(cfg: &RunConfig, tmp: &Path) -> (Vec<(String, Vec<u8>)>, archive::SessionIndex) {
    let out = tmp.join("out");
    run_session(cfg, &out).unwrap();
    let before = common::tree(&out);
    let index = archive::archive_session(&out, &tmp.join("archive"), None).unwrap();
    (before, index)
}

#[test]
fn every_file_is_carried_over_once() {
    let tmp = tempfile::tempdir().unwrap();
    let (before, index) = run_and_archive(&short_config(5, 300.0), tmp.path());
    assert!(common::tree(&tmp.path().join("out")).is_empty());
    let dest = tmp.path().join("archive").join(&index.session_id);
    let after = common::tree(&dest);

    let extra: Vec<_> = after
        .iter()
        .filter(|(p, _)| !(p == archive::INDEX_FILE || p.ends_with(".pgm") && p.starts_with("movement/")))
        .cloned()
        .collect();
    assert_eq!(multiset(&extra), multiset(&before));
    assert_eq!(extra.len(), before.len());
    // one trace image per clip
    assert_eq!(after.len() - extra.len(), index.clips.len() + 1);
    assert!(!index.clips.is_empty());
    assert!(index.sounds.iter().any(|s| s.trial_id.is_some()));
    assert!(index.sounds.iter().any(|s| s.trial_id.is_none()));
}

#[test]
fn index_rebuilds_from_files_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, index) = run_and_archive(&short_config(6, 300.0), tmp.path());
    let dest = tmp.path().join("archive").join(&index.session_id);
    assert_eq!(archive::build_index(&dest).unwrap(), index);
    assert_eq!(archive::read_index(&dest).unwrap(), index);
    let text = serde_json::to_string(&index).unwrap();
    assert_eq!(serde_json::from_str::<archive::SessionIndex>(&text).unwrap(), index);
    assert_eq!(archive::list_sessions(&tmp.path().join("archive")).unwrap(), vec![index.session_id.clone()]);

    for c in &index.clips {
        let rows = archive::clip_movement_rows(&dest, &index, &c.id).unwrap().unwrap();
        assert!(rows.iter().all(|r| (c.start_ms..=c.end_ms).contains(&r.t_ms)));
        let (w, h, px) = catos_core::pgm::decode(&std::fs::read(dest.join(&c.movement_image)).unwrap()).unwrap();
        let cam = &index.cameras[c.camera_id as usize];
        assert_eq!((w, h), (cam.width, cam.height));
        if !rows.is_empty() {
            assert!(px.iter().any(|&p| p != CANVAS_BACKGROUND));
        }
    }
    assert_eq!(archive::clip_movement_rows(&dest, &index, "cam0_nothing").unwrap(), None);
}

#[test]
fn missing_manifest_or_frame_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, index) = run_and_archive(&short_config(7, 300.0), tmp.path());
    let dest = tmp.path().join("archive").join(&index.session_id);
    let clip = &index.clips[0];

    let frame = dest.join(&clip.path).join(vision::frame_file_name(clip.frame_count));
    std::fs::remove_file(&frame).unwrap();
    match archive::build_index(&dest) {
        Err(ArchiveError::MissingFile(p)) => assert_eq!(p, frame),
        other => panic!("expected a missing frame, got {other:?}"),
    }

    let manifest = dest.join(&clip.path).join(vision::CLIP_MANIFEST);
    std::fs::remove_file(&manifest).unwrap();
    let err = archive::build_index(&dest).unwrap_err();
    assert!(err.to_string().contains(&manifest.display().to_string()), "{err}");
}

#[test]
fn unclosed_and_duplicate_sessions_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    run_session(&short_config(8, 0.0), &out).unwrap();
    let results = out.join(catos_core::schema::RESULTS_FILE_NAME);
    let text = std::fs::read_to_string(&results).unwrap();
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    std::fs::write(&results, &body).unwrap();
    let err = archive::archive_session(&out, &tmp.path().join("a"), None).unwrap_err();
    assert!(matches!(err, ArchiveError::NotClosed(_)), "{err}");

    std::fs::write(&results, &text).unwrap();
    let copy = tmp.path().join("copy");
    std::fs::create_dir(&copy).unwrap();
    for (rel, bytes) in common::tree(&out) {
        let p = copy.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, bytes).unwrap();
    }
    archive::archive_session(&out, &tmp.path().join("a"), None).unwrap();
    let err = archive::archive_session(&copy, &tmp.path().join("a"), None).unwrap_err();
    assert!(matches!(err, ArchiveError::AlreadyArchived(_)), "{err}");
}

#[test]
fn empty_session_archives_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, index) = run_and_archive(&short_config(9, 0.0), tmp.path());
    assert!(index.clips.is_empty());
    assert_eq!(index.stats.trials, 0);
    assert_eq!(index.stats.duty_cycle, 0.0);
    assert_eq!(index.stats.observed_s, 600.0);
    let dest = tmp.path().join("archive").join(&index.session_id);
    assert_eq!(archive::build_index(&dest).unwrap(), index);
    let stats = catos_core::analytics::session_stats(&dest).unwrap();
    assert_eq!(stats.n_trials, 0);
    assert_eq!(stats.overall_accuracy, None);
}

#[test]
fn movement_trace_matches_golden() {
    let (rows, want) = common::golden_trace();
    assert_eq!(archive::render_movement_image(&rows, 12, 10).unwrap(), want);
    assert!(matches!(archive::render_movement_image(&[], 12, 10), Err(ArchiveError::EmptyRows)));
}
