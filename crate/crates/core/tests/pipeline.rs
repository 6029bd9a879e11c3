use std::fs;
use std::path::Path;

use influence_core::citation::Model;
use influence_core::fixture::{generate, FixtureConfig};
use influence_core::io::hash_file;
use influence_core::pipeline::{self, Evaluation, PipelineConfig, Stage, StageStatus};
use influence_core::Error;

fn run_fixture(dir: &Path, cfg: &FixtureConfig) -> (PipelineConfig, Evaluation) {
    let (paths, _) = generate(dir, cfg).unwrap();
    let pc = PipelineConfig::load(&paths.config).unwrap();
    pipeline::run_all(&pc, false).unwrap();
    let ev = Evaluation::read(&pc.output(pipeline::EVALUATION_FILE)).unwrap();
    (pc, ev)
}

fn mse(ev: &Evaluation, m: Model) -> f64 {
    let o = ev.online.as_ref().unwrap();
    o.micro_mse[o.models.iter().position(|&x| x == m).unwrap()]
}

#[test]
fn planted_effect_shows_up_and_its_ablation_does_not() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ev) = run_fixture(dir.path(), &FixtureConfig::default());
    assert!(mse(&ev, Model::M4) < mse(&ev, Model::M3));
    let lrt = ev.lrt.iter().find(|t| t.full == Model::M4).unwrap();
    assert_eq!(lrt.df, 3);
    assert!(lrt.p_value < 1e-3, "{lrt:?}");

    let dir = tempfile::tempdir().unwrap();
    let flat = FixtureConfig { influence_boost: 1.0, ..FixtureConfig::default() };
    let (_, ev) = run_fixture(dir.path(), &flat);
    let ratio = mse(&ev, Model::M4) / mse(&ev, Model::M3);
    assert!((ratio - 1.0).abs() < 0.1, "M4/M3 = {ratio}");
}

#[test]
fn rerun_is_a_no_op_until_an_input_changes() {
    let dir = tempfile::tempdir().unwrap();
    let (pc, _) = run_fixture(dir.path(), &FixtureConfig::default());
    let before = hash_file(&pc.output(pipeline::MANIFEST_FILE)).unwrap();
    for (stage, status) in pipeline::run_all(&pc, false).unwrap() {
        assert_eq!(status, StageStatus::UpToDate, "{stage}");
    }
    assert_eq!(hash_file(&pc.output(pipeline::MANIFEST_FILE)).unwrap(), before);

    let mut changed = pc.clone();
    changed.evaluate.models = vec!["M1".into(), "M2".into()];
    assert_eq!(pipeline::run_stage(&changed, Stage::Featurize, false).unwrap(), StageStatus::UpToDate);
    assert_eq!(pipeline::run_stage(&changed, Stage::Evaluate, false).unwrap(), StageStatus::Ran);
    assert_eq!(pipeline::run_stage(&pc, Stage::Fit, true).unwrap(), StageStatus::Ran);
}

#[test]
fn report_is_a_pure_function_of_the_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (pc, _) = run_fixture(dir.path(), &FixtureConfig::default());
    let out = &pc.paths.output;
    let tables = [
        pipeline::REGRESSION_TABLE,
        pipeline::COEFFICIENTS_FILE,
        pipeline::LRT_TABLE,
        pipeline::ONLINE_TABLE,
        pipeline::QUANTILE_EFFECTS_FILE,
    ];
    let first: Vec<String> = tables.iter().map(|t| hash_file(&out.join(t)).unwrap()).collect();
    let summary = pipeline::report(out).unwrap();
    assert_eq!(pipeline::report(out).unwrap(), summary);
    let again: Vec<String> = tables.iter().map(|t| hash_file(&out.join(t)).unwrap()).collect();
    assert_eq!(first, again);

    let header = fs::read_to_string(out.join(pipeline::REGRESSION_TABLE)).unwrap();
    assert_eq!(header.lines().nth(1).unwrap(), "Predictors\tM1\tM2\tM3\tM4");
    let online = fs::read_to_string(out.join(pipeline::ONLINE_TABLE)).unwrap();
    assert_eq!(online.lines().nth(1).unwrap(), "Publication Year\tM1\tM2\tM3\tM4");
    assert!(online.lines().last().unwrap().starts_with("All Years\t"));
}

#[test]
fn m1_only_report_has_two_coefficient_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, _) = generate(dir.path(), &FixtureConfig::default()).unwrap();
    let mut pc = PipelineConfig::load(&paths.config).unwrap();
    pc.evaluate.models = vec!["M1".into()];
    pipeline::run_all(&pc, false).unwrap();
    let table = fs::read_to_string(pc.output(pipeline::REGRESSION_TABLE)).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows[0], "Predictors\tM1");
    assert!(rows[1].starts_with("Constant\t"));
    assert!(rows[2].starts_with("Initial Citations\t"));
    assert!(rows[3].starts_with("Log Lik."));
    let coef = fs::read_to_string(pc.output(pipeline::COEFFICIENTS_FILE)).unwrap();
    assert_eq!(coef.lines().filter(|l| l.starts_with("M1,")).count(), 2);
}

#[test]
fn fit_before_cascades_is_an_ordering_error() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, _) = generate(dir.path(), &FixtureConfig::default()).unwrap();
    let pc = PipelineConfig::load(&paths.config).unwrap();
    pipeline::run_stage(&pc, Stage::BuildCorpus, false).unwrap();
    match pipeline::run_stage(&pc, Stage::Fit, false) {
        Err(Error::MissingUpstream { stage, requires, .. }) => {
            assert_eq!(stage, "fit");
            assert_eq!(requires, "cascades");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn sequential_and_parallel_runs_are_byte_identical() {
    let run = |exec| {
        let dir = tempfile::tempdir().unwrap();
        let (paths, _) = generate(dir.path(), &FixtureConfig::default()).unwrap();
        let mut pc = PipelineConfig::load(&paths.config).unwrap();
        pc.execution = exec;
        pipeline::run_all(&pc, false).unwrap();
        Stage::ALL
            .iter()
            .flat_map(|s| s.outputs())
            .map(|name| hash_file(&pc.output(name)).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(
        run(influence_core::Execution::Sequential),
        run(influence_core::Execution::Parallel)
    );
}

#[test]
fn every_text_artifact_declares_its_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (pc, _) = run_fixture(dir.path(), &FixtureConfig::default());
    for entry in fs::read_dir(&pc.paths.output).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let bytes = fs::read(&path).unwrap();
        let declared = if name.ends_with(".json") || name.ends_with(".jsonl") {
            let first = String::from_utf8_lossy(&bytes).lines().next().unwrap_or("").to_string();
            first.contains("\"version\"") || String::from_utf8_lossy(&bytes).contains("\"version\": 1")
        } else if name.ends_with(".bin") {
            bytes.starts_with(b"CMOM")
        } else {
            bytes.starts_with(b"# cascade-influence ")
        };
        assert!(declared, "{name} does not declare a schema version");
    }
}
