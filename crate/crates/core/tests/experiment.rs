use cmr_core::experiment::{mean_rows, read_csv, write_csv, ExperimentRow};
use cmr_core::pipeline::DemoOrder;

fn row(mode: &str, k: usize, seed: &str, f1: f64) -> ExperimentRow {
    ExperimentRow {
        mode: mode.into(),
        k,
        order: DemoOrder::Normal,
        seed: seed.into(),
        arg_i_f1: f1,
        arg_c_f1: f1,
        strict_f1: f1,
        relaxed_f1: f1,
        wall_ms: 0,
    }
}

#[test]
fn means_group_by_cell_in_first_seen_order() {
    let rows = vec![
        row("cmr-topk", 0, "0", 0.2),
        row("cmr-topk", 5, "0", 0.4),
        row("cmr-topk", 0, "1", 0.4),
        row("cmr-topk", 5, "1", 0.8),
        row("cmr-topk", 5, "mean", 9.0),
    ];
    let m = mean_rows(&rows);
    assert_eq!(m.len(), 2);
    assert_eq!((m[0].k, m[1].k), (0, 5));
    assert!((m[0].strict_f1 - 0.3).abs() < 1e-15);
    assert!((m[1].strict_f1 - 0.6).abs() < 1e-15);
    assert!(m.iter().all(|r| r.seed == "mean"));
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    let rows = vec![row("prefix-random", 5, "2", 0.125), row("cmr-none", 0, "mean", 1.0 / 3.0)];
    write_csv(&path, &rows).unwrap();
    let back: Vec<ExperimentRow> = read_csv(&path).unwrap();
    assert_eq!(back, rows);
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("mode,k,order,seed,arg_i_f1,arg_c_f1,strict_f1,relaxed_f1\n"));
}
