use tris_isac::ao::Service;
use tris_isac::scenario::*;

fn small() -> Scenario {
    let mut sc = Scenario::default();
    sc.array.rows = 2;
    sc.array.cols = 2;
    sc.sweep.sides = vec![2];
    sc.sweep.rate_thresholds_bps = vec![1e6, 4e6];
    sc.sweep.false_alarms = vec![1e-2];
    sc.sweep.angle_step_deg = 2.0;
    sc.tracking.rounds = 4;
    sc.tracking.monte_carlo = 8;
    sc.ao.max_iterations = 4;
    sc.estimation.snapshots = 64;
    sc.estimation.doppler_samples = 256;
    sc
}

#[test]
fn empty_file_gives_defaults() {
    let sc = Scenario::from_toml("").unwrap();
    assert_eq!(sc, Scenario::default());
    assert_eq!(sc.terminals.len(), 3);
    let settings = sc.settings();
    assert_eq!(settings.power_per_element, 1e-3);
    assert_eq!(settings.rate_threshold, 1e6);
    assert!((settings.noise - 1e-12).abs() < 1e-24);
    assert!((settings.echo_threshold - 1e-9).abs() < 1e-21);
    assert_eq!(sc.geometry().elements(), 16);
}

#[test]
fn negative_rate_threshold_is_rejected_with_its_line() {
    let src = "seed = 3\n\n[link]\nnoise_dbm = -90.0\nrate_threshold_bps = -1\n";
    let err = Scenario::from_toml(src).unwrap_err();
    match &err {
        ScenarioError::Config { line, message } => {
            assert_eq!(*line, Some(5));
            assert!(message.contains("rate_threshold_bps"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn parse_errors_carry_a_line() {
    let err = Scenario::from_toml("seed = 1\n[array]\nrows = \"four\"\n").unwrap_err();
    assert!(
        matches!(err, ScenarioError::Config { line: Some(3), .. }),
        "{err:?}"
    );
    let err = Scenario::from_toml("[array]\nrow = 4\n").unwrap_err();
    assert!(
        matches!(err, ScenarioError::Config { line: Some(2), .. }),
        "{err:?}"
    );
}

#[test]
fn terminal_errors_point_at_the_right_table() {
    let src = "[[terminals]]\nposition = [1.0, 1.0, 1.0]\nservice = \"detect\"\n\n[[terminals]]\nposition = [0.0, 0.0, 5.0]\nservice = \"localize\"\n";
    let err = Scenario::from_toml(src).unwrap_err();
    assert!(
        matches!(err, ScenarioError::Config { line: Some(6), .. }),
        "{err:?}"
    );
}

#[test]
fn replication_requires_one_terminal_per_service() {
    let src = "[[terminals]]\nposition = [50.0, 55.0, 50.0]\nservice = \"detect\"\n";
    assert!(Scenario::from_toml(src).is_err());
    let relaxed = format!("replication = false\n{src}");
    let sc = Scenario::from_toml(&relaxed).unwrap();
    assert_eq!(sc.terminal_specs()[0].service, Some(Service::Detect));
}

#[test]
fn toml_round_trip_is_exact() {
    let mut sc = small();
    sc.link.noise_dbm = -93.25;
    sc.terminals[1].service = None;
    sc.replication = false;
    let back = Scenario::from_toml(&sc.to_toml()).unwrap();
    assert_eq!(back, sc);
    assert_eq!(back.digest(), sc.digest());
}

#[test]
fn csv_round_trip_of_a_hundred_thousand_rows() {
    let rows: Vec<ResultRow> = (0..100_000u64)
        .map(|i| ResultRow {
            experiment: "detection".into(),
            round: i / 7,
            metric: format!("pd/n={}/pfa=1e-2", i % 7),
            value: (i as f64 + 0.1).sqrt() * 1e-9 * if i % 3 == 0 { -1.0 } else { 1.0 },
            units: if i % 5 == 0 {
                "bound, lower".into()
            } else {
                "1".into()
            },
            seed: i * 31,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    write_results(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("experiment,round,metric,value,units,seed\n"));
    assert!(!text.contains('\r'));
    assert_eq!(read_results(&path).unwrap(), rows);
}

#[test]
fn experiments_are_deterministic_and_sorted() {
    let sc = small();
    for exp in Experiment::ALL {
        let a = run_experiment(exp, &sc).unwrap();
        let b = run_experiment(exp, &sc).unwrap();
        assert!(!a.is_empty(), "{}", exp.name());
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_results_to(&a, &mut ca).unwrap();
        write_results_to(&b, &mut cb).unwrap();
        assert_eq!(ca, cb, "{}", exp.name());
        let key = |r: &ResultRow| (r.experiment.clone(), r.round, r.metric.clone());
        assert!(
            a.windows(2).all(|w| key(&w[0]) <= key(&w[1])),
            "{}",
            exp.name()
        );
        assert!(a
            .iter()
            .all(|r| r.experiment == exp.name() && r.seed == sc.seed));
        assert!(
            a.iter().all(|r| !r.metric.starts_with("error/")),
            "{}: {:?}",
            exp.name(),
            a.iter().find(|r| r.metric.starts_with("error/"))
        );
    }
}

#[test]
fn manifest_hashes_match_the_written_files() {
    let mut sc = small();
    sc.seed = 99;
    let dir = tempfile::tempdir().unwrap();
    let m = run_and_write(Experiment::Estimation, &sc, dir.path()).unwrap();
    assert_eq!(m.experiment, "estimation");
    assert_eq!(m.seed, 99);
    assert_eq!(m.config_sha256, sc.digest());
    let rows = read_results(&dir.path().join("estimation.csv")).unwrap();
    assert_eq!(rows.len(), m.rows);
    let json = std::fs::read_to_string(dir.path().join("estimation.manifest.json")).unwrap();
    let parsed: Manifest = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed, m);
}

#[test]
fn half_power_width_of_a_triangle() {
    let cut = [0.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0, 0.0];
    // half power 2.0 is crossed at indices 2 and 6
    assert!((half_power_width(&cut, 1).unwrap() - 4.0).abs() < 1e-12);
    assert_eq!(half_power_width(&[1.0, 2.0, 3.0], 0), None);
}

#[test]
fn matched_beam_peaks_at_full_array_gain() {
    use tris_isac::array_channel::{steering_vector, ArrayGeometry};
    let geom = ArrayGeometry::default();
    let (az, pi) = (0.7, 0.3);
    let p = steering_vector(&geom, az, pi).scale(1e-3f64.sqrt());
    let map = beampattern(&p, &geom, &[az, 0.1], &[pi, 1.2]);
    assert!((map.at(0, 0) - 0.256).abs() < 1e-12, "{}", map.at(0, 0));
    assert!(map
        .values
        .iter()
        .all(|&v| v <= map.at(0, 0) * (1.0 + 1e-12)));
    let zero = beampattern(&p.scale(0.0), &geom, &[az, 0.1], &[pi, 1.2]);
    assert!(zero.values.iter().all(|&v| v == 0.0));
}

#[test]
fn empty_and_single_row_files() {
    let mut buf = Vec::new();
    write_results_to(&[], &mut buf).unwrap();
    assert_eq!(buf, b"experiment,round,metric,value,units,seed\n");
    assert!(read_results_from(&buf[..]).unwrap().is_empty());
    let row = ResultRow {
        experiment: "tracking".into(),
        round: 3,
        metric: "range_mse".into(),
        value: 0.1 + 0.2,
        units: "m^2".into(),
        seed: 1,
    };
    let mut buf = Vec::new();
    write_results_to(std::slice::from_ref(&row), &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(
        text.lines().nth(1),
        Some("tracking,3,range_mse,3.0000000000000004e-1,m^2,1")
    );
    assert_eq!(
        read_results_from(&buf[..]).unwrap()[0].value.to_bits(),
        row.value.to_bits()
    );
}
