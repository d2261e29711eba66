//! Checked-in traces and wire transcripts. Run with `GIBBSCAP_BLESS=1` to
//! regenerate them after an intentional change.

mod common;

use std::fs;

use common::{blessing, golden_dir, malformed_variants, scenarios};
use gibbscap::trace::trace_string;

fn check_or_bless(path: &std::path::Path, fresh: &str) {
    if blessing() {
        fs::write(path, fresh).unwrap();
        return;
    }
    let stored = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e} (run with GIBBSCAP_BLESS=1)", path.display()));
    assert!(stored == fresh, "{} is stale; rerun with GIBBSCAP_BLESS=1 if the change is intended", path.display());
}

#[test]
fn scenario_traces_and_transcripts_are_current() {
    for s in scenarios() {
        let local = trace_string(&s.run_local()).unwrap();
        let (remote, transcript) = s.run_recorded();
        assert_eq!(trace_string(&remote).unwrap(), local, "{}: remote trace differs from local", s.name);
        check_or_bless(&s.trace_path(), &local);
        check_or_bless(&s.transcript_path(), &transcript);
    }
}

#[test]
fn malformed_fixtures_are_current() {
    let base = &scenarios()[0];
    let (_, transcript) = base.run_recorded();
    for (name, text) in malformed_variants(&transcript) {
        check_or_bless(&golden_dir().join("malformed").join(format!("{name}.transcript")), &text);
    }
}
