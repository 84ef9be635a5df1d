use cinecav::phantom::{self, CohortSpec, Dataset, Dims, DiseaseEffect, SegSequence};
use cinecav::rng::{self, Domain};
use cinecav_cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use tempfile::TempDir;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("cinecav").chain(args.iter().copied()))
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// A small trained model with its test set and concept vectors.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> String {
        p(self.dir.path(), name)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        let steps: Vec<Vec<String>> = vec![
            vec!["gen", "--n", "40", "--seed", "2", "--out", &f.path("train.cseq"), "--test-count", "10", "--test-out", &f.path("test.cseq")],
            vec!["gen", "--n", "40", "--seed", "2", "--first-id", "500", "--out", &f.path("pool.cseq")],
            vec!["train", "--in", &f.path("train.cseq"), "--out", &f.path("model.cmdl"), "--epochs1", "1", "--epochs2", "1", "--seed", "2"],
            vec!["cav-train", "--model", &f.path("model.cmdl"), "--pool", &f.path("pool.cseq"), "--out-dir", &f.path("cav"), "--k", "5"],
        ]
        .into_iter()
        .map(|v| v.into_iter().map(String::from).collect())
        .collect();
        for s in steps {
            assert_eq!(run(std::iter::once("cinecav".to_string()).chain(s.clone())), EXIT_OK, "{s:?}");
        }
        f
    })
}

fn default_cavs(f: &Fixture) -> String {
    cinecav::cav::CLINICAL_CONCEPTS.iter().map(|c| f.path(&format!("cav/{c}.csv"))).collect::<Vec<_>>().join(",")
}

#[test]
fn gen_writes_the_requested_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "c.cseq");
    assert_eq!(cli(&["gen", "--n", "10", "--prevalence", "0.5", "--seed", "7", "--out", &out]), EXIT_OK);
    let data = phantom::read_dataset_file(&out).unwrap();
    assert_eq!(data.len(), 10);
    assert_eq!(data.subjects.iter().filter(|s| s.label == Some(true)).count(), 5);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(cli(&["train", "--out", "/nonexistent/m.cmdl"]), EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&["gen", "--n", "3", "--out", "x.cseq", "--bogus"]), EXIT_USAGE);
    assert_eq!(cli(&["gen", "--n", "3", "--prevalence", "1.5", "--out", "/nonexistent/x.cseq"]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
    assert_eq!(cli(&["train", "--help"]), EXIT_OK);
}

#[test]
fn config_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "run.cfg");
    std::fs::write(&cfg, "# cohort\nn = 6\nprevalence = 0.5  # half\nseed = 3\n").unwrap();
    let a = p(dir.path(), "a.cseq");
    assert_eq!(cli(&["gen", "--config", &cfg, "--out", &a]), EXIT_OK);
    assert_eq!(phantom::read_dataset_file(&a).unwrap().len(), 6);
    let b = p(dir.path(), "b.cseq");
    assert_eq!(cli(&["gen", "--config", &cfg, "--n", "4", "--out", &b]), EXIT_OK);
    assert_eq!(phantom::read_dataset_file(&b).unwrap().len(), 4);

    std::fs::write(&cfg, "n = 6\nepochs = 3\n").unwrap();
    assert_eq!(cli(&["gen", "--config", &cfg, "--out", &a]), EXIT_USAGE);
    std::fs::write(&cfg, "n 6\n").unwrap();
    assert_eq!(cli(&["gen", "--config", &cfg, "--out", &a]), EXIT_USAGE);
}

/// Healthy subjects; those listed get their last frame rendered at 115% of
/// the ED volume.
fn cohort_with_inflated(n: usize, inflated: &[usize]) -> Dataset {
    let dims = Dims::DESK;
    let subjects = (0..n)
        .map(|i| {
            let mut rng = rng::stream(21, Domain::Subject, i as u64);
            let params = phantom::sample_params(&mut rng, dims, false, &DiseaseEffect::default());
            let (mut seq, _) = phantom::generate_subject(i as u32, &params, 20, dims, Some(false)).unwrap();
            if inflated.contains(&i) {
                *seq.frames.last_mut().unwrap() = params.render_at_volume(dims, 1.15).unwrap();
            }
            SegSequence::new(seq.subject_id, seq.frames, seq.label).unwrap()
        })
        .collect();
    Dataset::new(dims, 20, subjects).unwrap()
}

#[test]
fn qc_drops_the_injected_subject() {
    let dir = tempfile::tempdir().unwrap();
    let input = p(dir.path(), "in.cseq");
    let out = p(dir.path(), "out.cseq");
    phantom::write_dataset_file(&input, &cohort_with_inflated(6, &[2])).unwrap();
    let before = std::fs::read(&input).unwrap();
    assert_eq!(cli(&["qc", "--in", &input, "--out", &out]), EXIT_OK);
    let kept = phantom::read_dataset_file(&out).unwrap();
    assert_eq!(kept.subjects.iter().map(|s| s.subject_id).collect::<Vec<_>>(), vec![0, 1, 3, 4, 5]);
    assert_eq!(std::fs::read(&input).unwrap(), before);
}

#[test]
fn qc_keeps_a_healthy_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let input = p(dir.path(), "in.cseq");
    let out = p(dir.path(), "out.cseq");
    assert_eq!(cli(&["gen", "--n", "12", "--prevalence", "0", "--seed", "4", "--out", &input]), EXIT_OK);
    assert_eq!(cli(&["qc", "--in", &input, "--out", &out]), EXIT_OK);
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&out).unwrap());
}

#[test]
fn qc_with_nothing_left_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let input = p(dir.path(), "in.cseq");
    let out = p(dir.path(), "out.cseq");
    phantom::write_dataset_file(&input, &cohort_with_inflated(3, &[0, 1, 2])).unwrap();
    assert_eq!(cli(&["qc", "--in", &input, "--out", &out]), EXIT_DATA);
    assert!(!Path::new(&out).exists());
    assert_eq!(cli(&["qc", "--in", &p(dir.path(), "missing.cseq"), "--out", &out]), EXIT_DATA);
}

#[test]
fn biomarker_table_has_one_row_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let input = p(dir.path(), "in.cseq");
    let out = p(dir.path(), "bio.csv");
    let spec = CohortSpec::new(5, 0.4, 8);
    phantom::write_dataset_file(&input, &phantom::generate_cohort(&spec).unwrap().dataset).unwrap();
    assert_eq!(cli(&["biomarkers", "--in", &input, "--out", &out]), EXIT_OK);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with("subject_id,ef,per,pfr,pafr,lvt,qc_pass\n"));
    assert_eq!(cli(&["biomarkers", "--in", &input, "--out", &out, "--window", "4"]), EXIT_USAGE);
}

fn manifest_digests(dir: &Path) -> Vec<(String, String)> {
    std::fs::read_to_string(dir.join("manifest.csv"))
        .unwrap()
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0] == "output").then(|| (f[1].to_string(), f[2].to_string()))
        })
        .collect()
}

#[test]
fn report_bundle_is_complete_and_reproducible() {
    let f = fixture();
    let cavs = default_cavs(f);
    let out_a = f.path("report_a");
    let out_b = f.path("report_b");
    for out in [&out_a, &out_b] {
        let code = cli(&["report", "--model", &f.path("model.cmdl"), "--in", &f.path("test.cseq"), "--cav", &cavs, "--out-dir", out]);
        assert_eq!(code, EXIT_OK);
    }
    let table = std::fs::read_to_string(PathBuf::from(&out_a).join("table1.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert!(table.starts_with("concept,description,fraction_positive,mean\n"));

    let digests = manifest_digests(Path::new(&out_a));
    let names: Vec<&str> = digests.iter().map(|d| d.0.as_str()).collect();
    for expected in ["table1.csv", "metrics.csv", "pca.csv", "pca.svg", "sensitivity_low_ef.csv"] {
        assert!(names.contains(&expected), "{expected} missing from {names:?}");
    }
    for (name, digest) in &digests {
        let bytes = std::fs::read(PathBuf::from(&out_a).join(name)).unwrap();
        assert_eq!(&hex::encode(Sha256::digest(&bytes)), digest, "{name}");
    }
    assert_eq!(
        std::fs::read(PathBuf::from(&out_a).join("manifest.csv")).unwrap(),
        std::fs::read(PathBuf::from(&out_b).join("manifest.csv")).unwrap()
    );
}

#[test]
fn report_with_missing_input_is_a_usage_error() {
    let f = fixture();
    let out = f.path("report_missing");
    let code = cli(&["report", "--model", &f.path("nope.cmdl"), "--in", &f.path("test.cseq"), "--cav", &default_cavs(f), "--out-dir", &out]);
    assert_eq!(code, EXIT_USAGE);
    assert!(!Path::new(&out).exists());
}

#[test]
fn scoring_interpolation_and_pca_write_their_files() {
    let f = fixture();
    let model = f.path("model.cmdl");
    let test = f.path("test.cseq");
    let sens = f.path("sens.csv");
    assert_eq!(cli(&["cav-score", "--model", &model, "--in", &test, "--cav", &f.path("cav/low_ef.csv"), "--out", &sens]), EXIT_OK);
    let report = cinecav::cav::read_sensitivity(std::io::BufReader::new(std::fs::File::open(&sens).unwrap())).unwrap();
    assert!(!report.dots.is_empty());

    let metrics = f.path("metrics.csv");
    assert_eq!(cli(&["eval", "--model", &model, "--in", &test, "--out", &metrics]), EXIT_OK);
    assert!(std::fs::read_to_string(&metrics).unwrap().starts_with("auc,dice,n\n"));

    let frames = f.path("interp");
    let code = cli(&["interp", "--model", &model, "--in", &test, "--subject", "30", "--alphas=-1,0,1", "--out-dir", &frames]);
    assert_eq!(code, EXIT_OK);
    let manifest = std::fs::read_to_string(PathBuf::from(&frames).join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 3 * 20);
    let missing = cli(&["interp", "--model", &model, "--in", &test, "--subject", "3", "--out-dir", &frames]);
    assert_eq!(missing, EXIT_DATA);

    let (csv, svg) = (f.path("pca.csv"), f.path("pca.svg"));
    assert_eq!(cli(&["pca", "--model", &model, "--in", &test, "--out", &csv, "--svg", &svg]), EXIT_OK);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 11);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}
