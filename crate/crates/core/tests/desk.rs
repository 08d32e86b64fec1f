//! Full desk recipe from raw text to the best certificate. Several hours on
//! one core, so ignored by default; needs `scripts/fetch_corpus.py` first.

use std::path::Path;

use sublora::bounds::audit;
use sublora::harness::{self, RunConfig};

#[test]
#[ignore]
fn desk_recipe_is_non_vacuous() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let mut cfg = RunConfig::load(&root.join("configs/desk.json")).unwrap();
    cfg.corpus.sources = cfg.corpus.sources.iter().map(|s| root.join(s)).collect();
    let out = std::env::var_os("SUBLORA_DESK_OUT").map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("sublora-desk"));
    let s = harness::cmd_sweep(&cfg, &out, true).unwrap();
    let best = s.best_row().expect("no certified point");
    assert!(best.bpd_bound.unwrap() < 8.0, "{best:?}");
    let report = harness::certify::load_report(&out.join("best.report.json")).unwrap();
    audit(&report).unwrap();
    assert_eq!(report.alpha_table.iter().find(|r| r.alpha == 1.0).unwrap().bound, 8.0);
    harness::cmd_experiments(&cfg, &out, true).unwrap();
    println!("{}", harness::cmd_report(&out).unwrap());
}
