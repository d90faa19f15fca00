use std::fs;
use std::path::Path;
use std::process::Command;

use icp2p_cli::commands::{compare, dump_data, load_split, run};
use icp2p_cli::config::{parse_config, Origin, Preset};
use icp2p_cli::load_config;
use icp2p_core::data::{InstitutionDataset, Split};
use icp2p_core::orchestrator::Method;

const TINY: &str = "\
method = icp2pfl
institutions = 1,2,3
data.image_size = 32
data.train = 2
data.test = 1
data.characteristic = 1
train.patch = 16
train.stride = 16
train.batch_size = 4
train.learning_rate = 0.001
train.transmissions = 2
train.site_rounds = 1
model.blocks = 1
model.channels = 4
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icp2p"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn minimal_config_gets_published_defaults() {
    let cfg = parse_config("method = icp2pfl\ninstitutions = 1,2\n").unwrap();
    assert_eq!(cfg.preset, Preset::Full);
    assert_eq!(cfg.train.transmissions, 10);
    assert_eq!(cfg.train.site_rounds, 5);
    assert_eq!(cfg.train.learning_rate, 1e-4);
    assert_eq!(cfg.train.batch_size, 64);
    assert_eq!(cfg.train.threshold, 1.4759);
    assert_eq!(cfg.train.decay_round, Some(100));
    assert_eq!(cfg.train.decay_factor, 0.2);
    assert!(cfg.train.switch && cfg.train.fine_tune);
    assert_eq!(cfg.institution_ids(), vec![1, 2]);
    assert_eq!(cfg.seeds, vec![0]);
}

#[test]
fn negative_learning_rate_names_the_key() {
    let err = parse_config("method = icp2pfl\ninstitutions = 1,2\ntrain.learning_rate = -0.1\n").unwrap_err();
    assert_eq!(err.key.as_deref(), Some("train.learning_rate"));
    assert_eq!(err.origin, Some(Origin::Line(3)));
    assert!(err.to_string().contains("train.learning_rate"), "{err}");
}

#[test]
fn duplicate_institution_is_rejected() {
    let err = parse_config("method = icp2pfl\ninstitutions = 1,2,1\n").unwrap_err();
    assert_eq!(err.key.as_deref(), Some("institutions"));
    assert!(err.message.contains("duplicate"), "{err}");
}

#[test]
fn unknown_and_repeated_keys_are_rejected() {
    let err = parse_config("institutions = 1,2\ntrain.lr = 1\n").unwrap_err();
    assert_eq!(err.origin, Some(Origin::Line(2)));
    let err = parse_config("institutions = 1,2\nseeds = 1\nseeds = 2\n").unwrap_err();
    assert_eq!(err.origin, Some(Origin::Line(3)));
}

#[test]
fn flags_override_environment_which_overrides_file() {
    let text = format!("{TINY}output.dir = from-file\n");
    let cfg = load_config(&text, Some("from-env".into()), &[]).unwrap();
    assert_eq!(cfg.output_dir, Path::new("from-env"));
    let flags = vec![("output.dir".to_string(), "from-flag".to_string())];
    let cfg = load_config(&text, Some("from-env".into()), &flags).unwrap();
    assert_eq!(cfg.output_dir, Path::new("from-flag"));
}

#[test]
fn validate_exits_zero() {
    let out = bin().arg("validate").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn bad_config_exits_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "institutions = 1,2\ntrain.batch_size = 0\n");
    let out = bin().arg("run").arg("--config").arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));
}

#[test]
fn run_twice_gives_byte_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), TINY);
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = bin()
            .arg("run")
            .arg("--config")
            .arg(&path)
            .arg("--output")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(fs::read(out_dir.join("icp2pfl-seed0.json")).unwrap());
        assert!(out_dir.join("icp2pfl-seed0.timing.json").exists());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn environment_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &TINY.replace("transmissions = 2", "transmissions = 1"));
    let target = dir.path().join("env-out");
    let out = bin()
        .arg("run")
        .arg("--config")
        .arg(&path)
        .env("ICP2P_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(target.join("icp2pfl-seed0.json").exists());
}

#[test]
fn run_csv_has_test_and_characteristic_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse_config(TINY).unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    let out = run(&cfg).unwrap();
    let text = fs::read_to_string(&out[0].csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("method,seed,cycle,institution,split,psnr,ssim,mse,rho")
    );
    // 2 cycles x 3 institutions x 2 splits
    assert_eq!(lines.count(), 12);
}

#[test]
fn compare_csv_row_count_follows_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}seeds = 0,1,2,3,4\ncompare.methods = icp2pfl,fedavg,cl-mi\n");
    let mut cfg = parse_config(&text).unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    assert_eq!(cfg.compare_methods, vec![Method::Icp2pfl, Method::FedAvg, Method::ClMi]);
    let out = compare(&cfg).unwrap();
    let (methods, seeds, k, cycles) = (3, 5, 3, 2);
    assert_eq!(out.rows, methods * seeds * k * cycles);
    let text = fs::read_to_string(&out.csv).unwrap();
    assert_eq!(text.lines().count(), 1 + methods * seeds * k * cycles);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(4) == Some("test")));
    for m in ["icp2pfl", "fedavg", "cl-mi"] {
        assert!(out.summary.lines().any(|l| l.starts_with(m)), "{}", out.summary);
    }
    assert!(out.summary.contains('±'));
    assert!(dir.path().join("summary.txt").exists());
}

#[test]
fn dumped_data_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse_config(TINY).unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    let written = dump_data(&cfg).unwrap();
    assert!(written[0].join("manifest.json").exists());
    let original = InstitutionDataset::generate(cfg.institutions[1].clone(), cfg.sizes, cfg.base_seed).unwrap();
    let back = load_split(&written[0].join("inst2-train.bin"), 2, 32).unwrap();
    assert_eq!(back, original.split(Split::Train));
}
