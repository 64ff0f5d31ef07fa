//! Runs alone in its own binary: the live-batch counter is process-global.

mod common;

use distillmatch::metrics::OracleCache;
use distillmatch::harness::run_single;
use distillmatch::stream::live_unlabeled_batches;

#[test]
fn unlabeled_batches_never_outlive_their_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_config(dir.path());
    let data = cfg.build_data().unwrap();
    assert_eq!(live_unlabeled_batches(), 0);
    let (_, outcome) = run_single(&cfg, &data, 0, &mut OracleCache::in_memory()).unwrap();
    let state = &outcome.state;
    assert!(state.steps.iter().any(|s| s.loss.l_ul > 0.0 || s.loss.b_pl > 0));
    assert_eq!(state.max_live_unlabeled, 0, "a batch survived into a later step");
    assert_eq!(live_unlabeled_batches(), 0);
}
