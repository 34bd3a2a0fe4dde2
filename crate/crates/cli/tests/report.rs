use effconf_cli::report::{read_rows, write_rows, BenchRow, CheckRow, Format, MAddsRow, TrainRow};
use effconf_core::encoder::{EncoderConfig, PRESETS};
use effconf_core::profiler::{count_madds, MAddsReport};

fn roundtrip<T>(rows: &[T], format: Format) -> Vec<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut buf = Vec::new();
    write_rows(rows, format, &mut buf).unwrap();
    read_rows(buf.as_slice(), format).unwrap()
}

fn reports() -> Vec<MAddsReport> {
    PRESETS
        .iter()
        .flat_map(|p| {
            let c = EncoderConfig::preset(p).unwrap();
            [100, 1000, 4096].map(|n| count_madds(&c, p, n).unwrap())
        })
        .collect()
}

#[test]
fn madds_rows_roundtrip() {
    let rows: Vec<MAddsRow> = reports().iter().map(MAddsRow::from).collect();
    for f in [Format::Csv, Format::Json] {
        assert_eq!(roundtrip(&rows, f), rows);
    }
    let full = reports();
    assert_eq!(roundtrip(&full, Format::Json), full);
}

#[test]
fn csv_header_is_the_documented_schema() {
    let mut buf = Vec::new();
    write_rows(&[MAddsRow::from(&reports()[0])], Format::Csv, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "config,frames,total_madds,ffn,att_scores,att_proj,conv,stem,head,params"
    );
    let mut buf = Vec::new();
    let bench = BenchRow {
        preset: "effconf-ctc-s".into(),
        frames: 2048,
        median_ms: 1.0,
        p10_ms: 0.5,
        p90_ms: 2.0,
    };
    write_rows(&[bench], Format::Csv, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("preset,frames,median_ms,p10_ms,p90_ms\n"));
}

#[test]
fn float_rows_roundtrip_exactly() {
    let bench: Vec<BenchRow> = (0..20)
        .map(|i| BenchRow {
            preset: format!("cfg,with \"quotes\" {i}"),
            frames: 100 * i,
            median_ms: 1.0 / (i as f64 + 3.0),
            p10_ms: std::f64::consts::PI * i as f64,
            p90_ms: 1e-300 * i as f64,
        })
        .collect();
    let checks = vec![
        CheckRow::new("collapse grouped(1)", 50, 1.1102230246251565e-16, 1e-12),
        CheckRow::new("ctc loss", 20, 2.5e-6, 1e-5),
        CheckRow::new("broken", 1, 0.5, 1e-4),
    ];
    let train = vec![
        TrainRow {
            step: 0,
            loss: None,
            accuracy: 0.1,
        },
        TrainRow {
            step: 50,
            loss: Some(1.234567890123),
            accuracy: 0.96875,
        },
    ];
    for f in [Format::Csv, Format::Json] {
        assert_eq!(roundtrip(&bench, f), bench);
        assert_eq!(roundtrip(&checks, f), checks);
        assert_eq!(roundtrip(&train, f), train);
    }
    assert!(!checks[2].pass);
}
