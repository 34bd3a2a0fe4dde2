use effconf_cli::config::{load_config, parse_config, parse_list, parse_windows, render_config, Overrides};
use effconf_core::attention::AttentionVariant;
use effconf_core::encoder::{DownsampleMethod, EncoderConfig};

#[test]
fn base_alone_is_the_preset() {
    let c = parse_config("base = \"effconf-ctc-s\"").unwrap();
    assert_eq!(c, EncoderConfig::preset("effconf-ctc-s").unwrap());
}

#[test]
fn stage_and_top_level_overrides() {
    let c = parse_config(
        r#"
base = "effconf-ctc-s"
dropout = 0.1
output_vocab = 29

[stages.1]
att_group_size = 5

[stages.3]
att_window = 64
"#,
    )
    .unwrap();
    let mut want = EncoderConfig::preset("effconf-ctc-s").unwrap();
    want.dropout = 0.1;
    want.output_vocab = Some(29);
    want.stages[0].att_group_size = 5;
    want.stages[2].att_window = Some(64);
    assert_eq!(c, want);
    assert_eq!(c.stages[2].variant(), AttentionVariant::Local(64));
    assert_eq!(c.stages[1], want.stages[1]);
}

#[test]
fn rendered_config_parses_back() {
    for name in ["effconf-ctc-m", "conformer-ctc-s", "effconf-rnnt-s"] {
        let c = EncoderConfig::preset(name).unwrap().with_group_sizes(&[5, 3, 1]).ok();
        let c = c.unwrap_or_else(|| EncoderConfig::preset(name).unwrap());
        assert_eq!(parse_config(&render_config(&c).unwrap()).unwrap(), c, "{name}");
    }
}

#[test]
fn unknown_keys_are_errors() {
    let cases = [
        "base = \"effconf-ctc-s\"\ndropuot = 0.1",
        "base = \"effconf-ctc-s\"\n[stages.2]\natt_group_sise = 2",
        "base = \"effconf-ctc-s\"\n[extra]\nx = 1",
    ];
    for text in cases {
        let err = format!("{:#}", parse_config(text).unwrap_err());
        assert!(err.contains("unknown field"), "{text:?}: {err}");
    }
}

#[test]
fn invalid_configs_are_errors() {
    let cases = [
        "",
        "base = \"no-such-preset\"",
        "base = 3",
        "base = \"effconf-ctc-s\"\n[stages.4]\ndim = 8",
        "base = \"effconf-ctc-s\"\n[stages.0]\ndim = 8",
        "base = \"effconf-ctc-s\"\n[stages.1]\nheads = 7",
        "base = \"effconf-ctc-s\"\ndropout = 1.5",
        "[stages.1]\ndim = 8",
        "not toml = = 1",
    ];
    for text in cases {
        assert!(parse_config(text).is_err(), "{text:?} accepted");
    }
}

#[test]
fn config_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.toml");
    std::fs::write(&path, "base = \"conformer-ctc-s\"\n[stages.1]\nblocks = 2\n").unwrap();
    assert_eq!(load_config(&path).unwrap().stages[0].blocks, 2);
    let err = format!("{:#}", load_config(&dir.path().join("missing.toml")).unwrap_err());
    assert!(err.contains("missing.toml"), "{err}");
}

#[test]
fn list_parsing() {
    assert_eq!(parse_list("3,1,1").unwrap(), vec![3, 1, 1]);
    assert_eq!(parse_list(" 9, 5 ,3").unwrap(), vec![9, 5, 3]);
    assert!(parse_list("3,,1").is_err());
    assert!(parse_list("a").is_err());
    assert_eq!(parse_windows("175,-,-").unwrap(), vec![Some(175), None, None]);
    assert!(parse_windows("175,x,-").is_err());
}

#[test]
fn overrides_apply_and_label() {
    let base = EncoderConfig::preset("effconf-ctc-s").unwrap();
    assert_eq!(Overrides::default().apply(base.clone()).unwrap(), base);
    assert_eq!(Overrides::default().label(), "");
    let o = Overrides {
        group_sizes: Some(vec![1, 1, 1]),
        ..Default::default()
    };
    assert_eq!(o.label(), "[g=1,1,1]");
    assert!(o.apply(base.clone()).unwrap().stages.iter().all(|s| s.variant() == AttentionVariant::Regular));
    let o = Overrides {
        windows: Some(vec![Some(175), None, None]),
        downsample: Some(DownsampleMethod::Attention),
        ..Default::default()
    };
    assert_eq!(o.label(), "[w=175,-,-;attn-down]");
    let c = o.apply(base.clone()).unwrap();
    assert_eq!(c.stages[0].variant(), AttentionVariant::Local(175));
    assert!(c.stages.iter().all(|s| s.downsample_method == DownsampleMethod::Attention));
    let bad = Overrides {
        group_sizes: Some(vec![2, 2]),
        ..Default::default()
    };
    assert!(bad.apply(base).is_err());
}
