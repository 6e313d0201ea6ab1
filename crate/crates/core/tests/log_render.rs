use std::io::Cursor;

use proptest::prelude::*;
use trainscope::log::{from_line, read_log, to_line, write_log, TrackEvent};
use trainscope::quantities::{Hist1d, Hist2d, QuantityValue, Reading};
use trainscope::render::{export_csv, parse_csv_float, render_svg};
use trainscope::runner::{run_experiment, RunSettings, Schedule, Tier, TrackingConfig};
use trainscope::{problems, Error};

fn float() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => any::<f64>().prop_filter("finite", |v| v.is_finite()),
        1 => Just(f64::NAN),
        1 => Just(f64::INFINITY),
        1 => Just(f64::NEG_INFINITY),
        1 => Just(-0.0),
    ]
}

fn value() -> impl Strategy<Value = QuantityValue> {
    prop_oneof![
        float().prop_map(QuantityValue::Scalar),
        prop::collection::vec(float(), 0..5).prop_map(QuantityValue::Vector),
        (1usize..5, prop::collection::vec(any::<u64>(), 4)).prop_map(|(b, c)| {
            QuantityValue::Hist1d(Hist1d {
                edges: (0..=b).map(|i| i as f64 / b as f64).collect(),
                counts: c[..b].to_vec(),
            })
        }),
        (1usize..3, 1usize..3, prop::collection::vec(0u64..1000, 4)).prop_map(|(x, y, c)| {
            QuantityValue::Hist2d(Hist2d {
                x_edges: (0..=x).map(|i| i as f64).collect(),
                y_edges: (0..=y).map(|i| -(i as f64)).collect(),
                counts: c[..x * y].to_vec(),
            })
        }),
    ]
}

fn reading() -> impl Strategy<Value = Reading> {
    (value(), prop::collection::vec("[a-z_]{1,8}", 0..3), prop::collection::btree_map("[a-z]{1,5}", float(), 0..3))
        .prop_map(|(v, flags, meta)| Reading { value: v, flags, meta })
}

fn event() -> impl Strategy<Value = TrackEvent> {
    (any::<u64>(), float(), prop::collection::btree_map("[A-Za-z][A-Za-z0-9.]{0,12}", reading(), 0..6)).prop_map(
        |(iteration, time_s, quantities)| TrackEvent {
            iteration,
            time_s,
            quantities,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn events_survive_a_log_round_trip(e in event()) {
        let line = to_line(&e).unwrap();
        prop_assert!(!line.contains('\n'));
        let back = from_line(&line, 1).unwrap();
        prop_assert_eq!(to_line(&back).unwrap(), line);
        prop_assert_eq!(back.iteration, e.iteration);
        prop_assert_eq!(back.time_s.to_bits() == e.time_s.to_bits() || (back.time_s.is_nan() && e.time_s.is_nan()), true);
    }
}

#[test]
fn read_log_reports_the_offending_line() {
    let e = TrackEvent::new(0, 0.0);
    let mut buf = Vec::new();
    write_log(&mut buf, &[e.clone(), e]).unwrap();
    buf.extend_from_slice(b"{not json}\n");
    match read_log(Cursor::new(buf)) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

fn sample_events() -> Vec<TrackEvent> {
    let p = problems::noisy_quadratic(6, 0).unwrap();
    let cfg = TrackingConfig::tier(Tier::Full, Schedule::EveryK(1));
    run_experiment(&p, Some(&cfg), &RunSettings::for_problem(&p, 20, 0))
        .unwrap()
        .events
}

#[test]
fn svg_is_deterministic_and_marks_missing_panels() {
    let events = sample_events();
    let a = render_svg(&events, 0.1);
    let b = render_svg(&events, 0.1);
    assert_eq!(a, b);
    assert!(a.starts_with("<?xml") || a.starts_with("<svg"));
    assert!(a.trim_end().ends_with("</svg>"));

    let empty = render_svg(&[], 0.1);
    assert!(empty.contains("not tracked"));
    assert!(empty.trim_end().ends_with("</svg>"));
}

#[test]
fn csv_export_round_trips_scalars() {
    let events = sample_events();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.csv");
    let sidecars = export_csv(&events, &path).unwrap();
    assert!(sidecars.iter().any(|p| p.to_string_lossy().ends_with("run.GradHist1d.csv")));
    assert!(sidecars.iter().any(|p| p.to_string_lossy().ends_with("run.GradHist2d.csv")));

    let mut r = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..2], &["iteration", "time_s"]);
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), events.len());
    for (row, e) in rows.iter().zip(&events) {
        assert_eq!(row[0].parse::<u64>().unwrap(), e.iteration);
        for (col, name) in header.iter().enumerate().skip(2) {
            let cell = &row[col];
            match e.scalar(name) {
                Some(v) => {
                    let back = parse_csv_float(cell).unwrap();
                    assert!(back.to_bits() == v.to_bits() || (v.is_nan() && back.is_nan()), "{name}");
                }
                None => assert!(cell.is_empty(), "{name}"),
            }
        }
    }
}
