//! Whole-pipeline behaviour over a small synthetic cohort: determinism,
//! cached reruns, on-disk round trips and model bookkeeping.

use std::path::Path;

use pedstress_core::pipeline::cohort::{generate_cohort, write_cohort, CohortConfig};
use pedstress_core::pipeline::{
    load_bundles, rerun_from_cache, run_pipeline, write_outputs, LabelSource, PipelineConfig, Stage, REPORT_FILE,
};
use pedstress_core::{AnnotationRecord, AnnotationStore};

fn cohort(participants: usize, seed: u64) -> Vec<pedstress_core::SessionBundle> {
    generate_cohort(&CohortConfig { participants, seed, ..Default::default() }).unwrap().bundles
}

fn ground_truth_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.processing.label_source = LabelSource::GroundTruth;
    cfg
}

#[test]
fn same_seed_gives_byte_identical_reports() {
    let cfg = ground_truth_config();
    let a = run_pipeline(&cohort(4, 7), &cfg).unwrap().render();
    let b = run_pipeline(&cohort(4, 7), &cfg).unwrap().render();
    assert_eq!(a, b);
    let c = run_pipeline(&cohort(4, 8), &cfg).unwrap().render();
    assert_ne!(a, c);
}

#[test]
fn reports_survive_a_disk_round_trip_of_the_inputs() {
    let cfg = CohortConfig { participants: 3, seed: 3, ..Default::default() };
    let generated = generate_cohort(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_cohort(dir.path(), &generated, &cfg).unwrap();
    let (loaded, failures) = load_bundles(dir.path()).unwrap();
    assert!(failures.is_empty());
    assert_eq!(loaded.len(), generated.bundles.len());

    let pcfg = ground_truth_config();
    let direct = run_pipeline(&generated.bundles, &pcfg).unwrap().render();
    let from_disk = run_pipeline(&loaded, &pcfg).unwrap().render();
    assert_eq!(direct, from_disk);
}

fn rerun_matches(cfg: &PipelineConfig, dir: &Path, original: &str) {
    for stage in Stage::ALL.into_iter().filter(|s| *s != Stage::Sync) {
        let again = rerun_from_cache(dir, cfg, stage).unwrap().render();
        assert!(again == original, "rerun from {stage} changed the report");
    }
}

#[test]
fn every_stage_reruns_from_cache_to_the_same_report() {
    let cfg = ground_truth_config();
    let report = run_pipeline(&cohort(3, 11), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&report, dir.path()).unwrap();
    let original = std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
    assert_eq!(original, report.render());
    rerun_matches(&cfg, dir.path(), &original);
    assert!(rerun_from_cache(dir.path(), &cfg, Stage::Sync).is_err());
}

#[test]
fn cached_reruns_pick_up_new_annotation_records() {
    let cfg = PipelineConfig::default();
    let report = run_pipeline(&cohort(2, 5), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&report, dir.path()).unwrap();
    let target = report.events.iter().find(|e| e.t_score.is_some()).expect("a standardized SCR").clone();

    let mut store = AnnotationStore::new();
    store.upsert(AnnotationRecord {
        participant_id: target.participant_id.clone(),
        session_id: target.session_id.clone(),
        detected_scr_no: target.detected_scr_no,
        label: "Delete".into(),
        coder_id: pedstress_core::annotation::ADJUDICATOR.into(),
        created_at_unix: 0,
    });
    let path = dir.path().join(pedstress_core::pipeline::ANNOTATIONS_FILE);
    store.write(std::fs::File::create(&path).unwrap()).unwrap();

    let rerun = rerun_from_cache(dir.path(), &cfg, Stage::Annotate).unwrap();
    assert_eq!(rerun.labels.deleted, report.labels.deleted + 1);
    assert_ne!(rerun.render(), report.render());
}

#[test]
fn model_sizes_match_the_logged_filters() {
    let report = run_pipeline(&cohort(8, 2), &ground_truth_config()).unwrap();
    assert_eq!(report.hard_failures(), 0);
    let mut fitted = 0;
    for m in &report.models {
        assert!(m.rows_after_filter <= m.rows_in_panel);
        assert_eq!(m.rows_in_panel, report.panel.rows.len());
        if let Ok(f) = &m.result {
            fitted += 1;
            let fit = &f.fit;
            assert_eq!(fit.n_obs, m.rows_after_filter - fit.dropped_missing - fit.dropped_level, "{}", m.name);
            let text = report.render();
            assert!(text.contains(&format!("observations: {}", fit.n_obs)));
        }
    }
    assert!(fitted >= 2, "expected at least two models to fit");
}

#[test]
fn config_version_heads_the_report() {
    let report = run_pipeline(&cohort(1, 1), &PipelineConfig::default()).unwrap();
    let text = report.render();
    let header: Vec<&str> = text.lines().take(4).collect();
    assert!(header.iter().any(|l| l.contains("config_version")), "{header:?}");
}
