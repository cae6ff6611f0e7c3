//! Pareto flags against brute-force dominance; report file round-trips.

use proptest::prelude::*;
use uaf_core::report::{emit_report, pareto_frontier, pareto_svg, parse_report_csv, report_csv, ParetoPoint, ReportRow};

mod support;

use support::brute_force_pareto;

/// Coordinates drawn from a small grid so ties and duplicates are common.
fn point_set() -> impl Strategy<Value = Vec<ParetoPoint>> {
    proptest::collection::vec((0..12u32, 0..12u32, any::<bool>()), 0..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (t, s, fine))| ParetoPoint {
                label: format!("p{i}"),
                exec_time_min: t as f64 * 0.25 + if fine { 0.01 } else { 0.0 },
                success_rate_pct: s as f64 * 100.0 / 11.0,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn flags_equal_brute_force(points in point_set()) {
        prop_assert_eq!(pareto_frontier(&points).unwrap(), brute_force_pareto(&points));
    }

    #[test]
    fn flags_ignore_input_order(points in point_set(), rot in 0usize..40) {
        let flags = pareto_frontier(&points).unwrap();
        let mut rotated = points.clone();
        let k = if points.is_empty() { 0 } else { rot % points.len() };
        rotated.rotate_left(k);
        let mut back = pareto_frontier(&rotated).unwrap();
        back.rotate_right(k);
        prop_assert_eq!(flags, back);
    }
}

#[test]
fn brute_force_on_two_hundred_continuous_points() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(200);
    let points: Vec<ParetoPoint> = (0..200)
        .map(|i| ParetoPoint {
            label: i.to_string(),
            exec_time_min: rng.random_range(0.0..3.0),
            success_rate_pct: rng.random_range(0.0..100.0),
        })
        .collect();
    assert_eq!(pareto_frontier(&points).unwrap(), brute_force_pareto(&points));
}

#[test]
fn tie_rule_and_edge_cases() {
    let p = |t, s| ParetoPoint {
        label: String::new(),
        exec_time_min: t,
        success_rate_pct: s,
    };
    assert!(pareto_frontier(&[]).unwrap().is_empty());
    assert_eq!(pareto_frontier(&[p(1.0, 50.0)]).unwrap(), [true]);
    assert_eq!(pareto_frontier(&[p(1.0, 50.0), p(1.0, 50.0)]).unwrap(), [true, true]);
    assert!(pareto_frontier(&[p(f64::NAN, 1.0)]).is_err());
    assert!(pareto_frontier(&[p(1.0, 101.0)]).is_err());
}

fn rows() -> Vec<ReportRow> {
    let mut rows = vec![
        ReportRow {
            policy: "A".into(),
            state_dim: 4,
            train_wall_s: 123.456_789,
            trials: 20,
            exec_time_min: 0.031_25,
            success_rate_pct: 91.0,
            pareto: false,
        },
        ReportRow {
            policy: "WA-PV_AT_A".into(),
            state_dim: 12,
            train_wall_s: 300.0,
            trials: 20,
            exec_time_min: 0.05,
            success_rate_pct: 70.333_3,
            pareto: false,
        },
        ReportRow {
            policy: "S_LWA<&>".into(),
            state_dim: 4,
            train_wall_s: 1.0,
            trials: 20,
            exec_time_min: 0.02,
            success_rate_pct: 40.0,
            pareto: false,
        },
    ];
    uaf_core::report::flag_rows(&mut rows).unwrap();
    rows
}

#[test]
fn csv_round_trips_within_formatting_precision() {
    let rows = rows();
    let text = report_csv(&rows).unwrap();
    assert!(text.starts_with("policy,state_dim,train_wall_s,trials,exec_time_min,success_rate_pct,pareto\n"));
    assert_eq!(text.lines().count(), rows.len() + 1);
    let back = parse_report_csv(&text).unwrap();
    assert_eq!(back.len(), rows.len());
    for (a, b) in rows.iter().zip(&back) {
        assert_eq!((&a.policy, a.state_dim, a.trials, a.pareto), (&b.policy, b.state_dim, b.trials, b.pareto));
        for (x, y) in [
            (a.train_wall_s, b.train_wall_s),
            (a.exec_time_min, b.exec_time_min),
            (a.success_rate_pct, b.success_rate_pct),
        ] {
            assert!((x - y).abs() <= 5e-4, "{x} vs {y}");
        }
    }
    assert!(parse_report_csv("policy,bad\n").is_err());
}

#[test]
fn svg_is_well_formed_with_one_marker_per_row() {
    let rows = rows();
    let svg = pareto_svg(&rows);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let circles: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("circle")).collect();
    assert_eq!(circles.len(), rows.len());
    for (c, r) in circles.iter().zip(&rows) {
        let title = c.children().find(|n| n.has_tag_name("title")).unwrap();
        assert_eq!(title.text(), Some(r.policy.as_str()));
        assert_eq!(c.attribute("class"), Some(if r.pareto { "frontier" } else { "dominated" }));
    }
    // faster rows sit further left
    let cx = |i: usize| circles[i].attribute("cx").unwrap().parse::<f64>().unwrap();
    assert!(cx(2) < cx(0) && cx(0) < cx(1));
}

#[test]
fn emit_writes_both_files_and_one_row_report_has_two_lines() {
    let dir = tempfile::tempdir().unwrap();
    let mut one = vec![rows().remove(0)];
    uaf_core::report::flag_rows(&mut one).unwrap();
    assert!(one[0].pareto);
    emit_report(&one, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let svg = std::fs::read_to_string(dir.path().join("pareto.svg")).unwrap();
    roxmltree::Document::parse(&svg).unwrap();
    assert!(emit_report(&[], dir.path()).is_err());
}
