use std::path::PathBuf;

use telelink::linksim::{run_scenario, Scenario};

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn shipped_scenarios_meet_their_expectations() {
    let mut paths: Vec<_> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "scn"))
        .collect();
    paths.sort();
    assert!(paths.len() >= 5);
    let mut failed = Vec::new();
    for path in &paths {
        let sc = Scenario::load(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let report = run_scenario(&sc).unwrap();
        for e in &report.expectations {
            println!("{:<28} {:<40} actual={:?} {}", sc.name, e.expectation, e.actual, if e.pass { "ok" } else { "FAIL" });
            if !e.pass {
                failed.push(format!("{}: {}", sc.name, e.expectation));
            }
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
}
