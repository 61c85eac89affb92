use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use pqm::checkpoint::{hex_digest, load_adapters, load_model, save_model, MODEL_MAGIC};
use pqm::error::PqmError;
use pqm::model::{evaluate, pseudo_label, LayerSelection, ToyModel};
use pqm::nfquant::NormalFloatCodebook;
use pqm::pipeline::*;
use pqm::speakersim::{AdaptationDataset, Split};
use tempfile::TempDir;

fn tiny() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 3;
    cfg.model.d_model = 16;
    cfg.lora.rank = 2;
    cfg.lora.alpha = 2.0;
    cfg.data.base_speakers = 10;
    cfg.data.base_utts = 40;
    cfg.data.pool_speakers = 6;
    cfg.data.pool_utts = 30;
    cfg.data.target_speakers = 2;
    cfg.data.target_utts = 30;
    for (b, steps) in [
        (&mut cfg.budget.base, 300),
        (&mut cfg.budget.teacher, 100),
        (&mut cfg.budget.pretrain, 150),
        (&mut cfg.budget.adapt, 40),
    ] {
        b.steps = steps;
        b.batch_size = 16;
        b.eval_every = 10;
    }
    cfg.sweep.counts = vec![0, 6, 12];
    cfg.validate().unwrap();
    cfg
}

/// One completed run shared by the read-only tests.
fn shared_run() -> &'static (TempDir, String) {
    static RUN: OnceLock<(TempDir, String)> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let text = cmd_run(&tiny(), &RunDir::new(tmp.path())).unwrap();
        (tmp, text)
    })
}

fn shared_dir() -> RunDir {
    RunDir::new(shared_run().0.path())
}

/// Relative path to content digest of every file under `root`.
fn tree_digest(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, hex_digest(&fs::read(&path).unwrap()));
            }
        }
    }
    out
}

fn digest(path: &Path) -> String {
    hex_digest(&fs::read(path).unwrap())
}

fn load(dir: &RunDir) -> (ToyModel, ToyModel, pqm::lora::AdapterSet, Vec<AdaptationDataset>) {
    (
        load_model(&dir.base_model()).unwrap(),
        load_model(&dir.quantised_model()).unwrap(),
        load_adapters(&dir.pretrained_adapters()).unwrap(),
        load_data(&dir.data("target")).unwrap(),
    )
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let mut cfg = tiny();
    cfg.adapt.full_finetune = false;
    cfg.budget.base.steps = 60;
    let ta = cmd_run(&cfg, &RunDir::new(a.path())).unwrap();
    let tb = cmd_run(&cfg, &RunDir::new(b.path())).unwrap();
    assert_eq!(ta, tb);
    let (da, db) = (tree_digest(a.path()), tree_digest(b.path()));
    assert!(da.len() >= 15, "{:?}", da.keys());
    assert_eq!(da, db);
}

#[test]
fn adaptation_stages_leave_earlier_artifacts_untouched() {
    let tmp = TempDir::new().unwrap();
    let dir = RunDir::new(tmp.path());
    let mut cfg = tiny();
    cfg.budget.base.steps = 40;
    cmd_train_base(&cfg, &dir).unwrap();
    cmd_train_teacher(&cfg, &dir).unwrap();
    cmd_quantise(&cfg, &dir, &dir.base_model(), &dir.quantised_model()).unwrap();
    cmd_pretrain_lora(&cfg, &dir).unwrap();
    let frozen = [
        dir.base_model(),
        dir.teacher_model(),
        dir.quantised_model(),
        dir.pretrained_adapters(),
        dir.data("base"),
        dir.data("pool"),
        dir.data("target"),
    ];
    let before: Vec<String> = frozen.iter().map(|p| digest(p)).collect();
    cmd_adapt(&cfg, &dir).unwrap();
    cmd_adapt_semisup(&cfg, &dir, None).unwrap();
    cmd_sweep_utts(&cfg, &dir, &cfg.sweep.counts).unwrap();
    let after: Vec<String> = frozen.iter().map(|p| digest(p)).collect();
    assert_eq!(before, after);
}

#[test]
fn run_directory_holds_every_artifact() {
    let dir = shared_dir();
    let cfg = tiny();
    let mut expected = vec![
        dir.config(),
        dir.base_model(),
        dir.teacher_model(),
        dir.quantised_model(),
        dir.pretrained_adapters(),
        dir.file("quantise.json"),
        dir.file("report.json"),
        dir.file("semisup.json"),
        dir.file("sweep.json"),
        dir.file("report.txt"),
    ];
    for spk in load_data(&dir.data("target")).unwrap() {
        expected.push(dir.speaker_adapters("scratch", &spk.speaker_id));
        expected.push(dir.speaker_adapters("pretrain", &spk.speaker_id));
        expected.push(dir.fft_model(&spk.speaker_id));
    }
    for p in &expected {
        assert!(p.is_file(), "{}", p.display());
    }
    // The resolved config is written beside the outputs.
    assert_eq!(PipelineConfig::load(&dir.config()).unwrap(), cfg);
}

#[test]
fn report_rows_follow_the_system_order() {
    let dir = shared_dir();
    let report = EvalReport::from_json(&fs::read_to_string(dir.file("report.json")).unwrap()).unwrap();
    report.validate().unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.system.as_str()).collect();
    assert_eq!(
        names,
        [FP32_BASELINE, NF4_BASELINE, POOLED_LORA, FFT_FP32, FFT_NF4, LORA_SCRATCH, LORA_PRETRAIN]
    );
    let quant: QuantiseSummary = serde_json::from_str(&fs::read_to_string(dir.file("quantise.json")).unwrap()).unwrap();
    let nf4 = report.row(NF4_BASELINE).unwrap();
    assert_eq!(nf4.model_bytes, quant.stats.quantised_bytes);
    assert_eq!(nf4.ratio, quant.stats.ratio);
    assert_eq!(report.row(FP32_BASELINE).unwrap().ratio, 1.0);
    assert_eq!(report.row(FP32_BASELINE).unwrap().model_bytes, quant.stats.raw_bytes);
}

#[test]
fn report_numbers_are_recomputable_from_artifacts() {
    let dir = shared_dir();
    let report = EvalReport::from_json(&fs::read_to_string(dir.file("report.json")).unwrap()).unwrap();
    let (fp32, q, pretrained, target) = load(&dir);
    let test: Vec<_> = target.iter().flat_map(|s| s.test().to_vec()).collect();
    let target_file = dir.data("target");

    let fp32_err = cmd_eval(&dir.base_model(), None, &target_file, Split::Test).unwrap();
    assert_eq!(fp32_err, evaluate(&fp32, None, &test).unwrap());
    assert_eq!(report.error(FP32_BASELINE).unwrap(), fp32_err);
    let q_err = cmd_eval(&dir.quantised_model(), None, &target_file, Split::Test).unwrap();
    assert_eq!(report.error(NF4_BASELINE).unwrap(), q_err);
    let pooled = cmd_eval(&dir.quantised_model(), Some(&dir.pretrained_adapters()), &target_file, Split::Test).unwrap();
    assert_eq!(report.error(POOLED_LORA).unwrap(), pooled);
    assert_eq!(pooled, evaluate(&q, Some(&pretrained), &test).unwrap());

    // Per-speaker systems pool their wrong counts over every test utterance.
    for (system, sub) in [(LORA_SCRATCH, "scratch"), (LORA_PRETRAIN, "pretrain")] {
        let mut wrong = 0.0;
        for (spk, row) in target.iter().zip(&report.per_speaker) {
            let set = load_adapters(&dir.speaker_adapters(sub, &spk.speaker_id)).unwrap();
            let err = evaluate(&q, Some(&set), spk.test()).unwrap();
            assert_eq!(row.errors[system], err);
            wrong += err * spk.test().len() as f64 / 100.0;
        }
        let pooled = 100.0 * wrong.round() / test.len() as f64;
        assert!((report.error(system).unwrap() - pooled).abs() < 1e-9);
        let bytes = fs::metadata(dir.quantised_model()).unwrap().len()
            + fs::metadata(dir.speaker_adapters(sub, &target[0].speaker_id)).unwrap().len();
        assert_eq!(report.row(system).unwrap().model_bytes, bytes);
    }
}

#[test]
fn report_rendering_is_stable_and_round_trips() {
    let dir = shared_dir();
    let first = fs::read(dir.file("report.txt")).unwrap();
    let again = cmd_report(&dir).unwrap();
    assert_eq!(again.as_bytes(), &first[..]);
    assert_eq!(again, shared_run().1);
    let json = fs::read_to_string(dir.file("report.json")).unwrap();
    let report = EvalReport::from_json(&json).unwrap();
    assert_eq!(report.to_json(), json);
    let header = report.render().lines().nth(1).unwrap().to_string();
    assert_eq!(header.split_whitespace().collect::<Vec<_>>(), TABLE_COLUMNS);
    let sweep_json = fs::read_to_string(dir.file("sweep.json")).unwrap();
    assert_eq!(SweepReport::from_json(&sweep_json).unwrap().to_json(), sweep_json);
}

#[test]
fn empty_run_directory_lists_what_is_missing() {
    let tmp = TempDir::new().unwrap();
    let dir = RunDir::new(tmp.path());
    match cmd_report(&dir) {
        Err(PqmError::MissingArtifacts(paths)) => {
            assert!(paths.iter().any(|p| p.ends_with("config.toml")), "{paths:?}");
            assert!(paths.iter().any(|p| p.ends_with("report.json")), "{paths:?}");
        }
        other => panic!("expected missing artifacts, got {other:?}"),
    }
    let err = cmd_adapt(&tiny(), &dir).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let PqmError::MissingArtifacts(paths) = err else { panic!() };
    assert_eq!(paths.len(), 4);
}

#[test]
fn quantise_without_selection_is_a_passthrough() {
    let tmp = TempDir::new().unwrap();
    let dir = RunDir::new(tmp.path());
    let mut cfg = tiny();
    cfg.quant.select = "none".into();
    let out = tmp.path().join("copy.pqm");
    let src = shared_dir().base_model();
    let summary = cmd_quantise(&cfg, &dir, &src, &out).unwrap();
    assert_eq!(summary.stats.ratio, 1.0);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&src).unwrap());
}

#[test]
fn quantise_is_idempotent_and_rejects_bad_inputs() {
    let tmp = TempDir::new().unwrap();
    let dir = RunDir::new(tmp.path());
    let cfg = tiny();
    let src = shared_dir().base_model();
    let (a, b) = (tmp.path().join("a.pqm"), tmp.path().join("b.pqm"));
    let sa = cmd_quantise(&cfg, &dir, &src, &a).unwrap();
    let sb = cmd_quantise(&cfg, &dir, &src, &b).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(&a).unwrap(), fs::read(shared_dir().quantised_model()).unwrap());

    // Already quantised.
    let err = cmd_quantise(&cfg, &dir, &a, &tmp.path().join("c.pqm")).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    // Corrupt magic.
    let mut bytes = fs::read(&src).unwrap();
    assert_eq!(&bytes[..4], MODEL_MAGIC);
    bytes[0] ^= 0xff;
    let bad = tmp.path().join("bad.pqm");
    fs::write(&bad, bytes).unwrap();
    let err = cmd_quantise(&cfg, &dir, &bad, &tmp.path().join("d.pqm")).unwrap_err();
    assert!(matches!(err, PqmError::Corrupt(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    // Missing file.
    let err = cmd_quantise(&cfg, &dir, &tmp.path().join("none.pqm"), &tmp.path().join("e.pqm")).unwrap_err();
    assert!(matches!(err, PqmError::MissingArtifacts(_)));
}

#[test]
fn pretraining_with_no_steps_keeps_fresh_adapters() {
    let dir = shared_dir();
    let (_, q, _, _) = load(&dir);
    let pool = load_data(&dir.data("pool")).unwrap();
    let mut cfg = tiny();
    cfg.budget.pretrain.steps = 0;
    let (set, _) = pretrain_adapters(&cfg, &q, &pool).unwrap();
    assert!(!set.is_empty());
    assert!(set.adapters.values().all(|ad| ad.b().is_zero()));
    // Fresh adapters leave the model's predictions untouched.
    let test: Vec<_> = pool.iter().flat_map(|s| s.test().to_vec()).collect();
    assert_eq!(pseudo_label(&q, Some(&set), &test).unwrap(), pseudo_label(&q, None, &test).unwrap());
}

#[test]
fn pretrained_adapters_beat_fresh_ones_on_the_pool() {
    let dir = shared_dir();
    let (_, q, pretrained, _) = load(&dir);
    let pool = load_data(&dir.data("pool")).unwrap();
    let dev: Vec<_> = pool.iter().flat_map(|s| s.dev().iter()).collect();
    let mut cfg = tiny();
    cfg.budget.pretrain.steps = 0;
    let (fresh, _) = pretrain_adapters(&cfg, &q, &pool).unwrap();
    let fresh_loss = q.loss(Some(&fresh), &dev).unwrap();
    let trained_loss = q.loss(Some(&pretrained), &dev).unwrap();
    assert!(trained_loss < fresh_loss, "{trained_loss} vs {fresh_loss}");
}

#[test]
fn pretraining_needs_two_pool_speakers() {
    let dir = shared_dir();
    let (_, q, _, _) = load(&dir);
    let pool = load_data(&dir.data("pool")).unwrap();
    assert!(pretrain_adapters(&tiny(), &q, &pool[..1]).is_err());
}

#[test]
fn zero_step_adaptation_reproduces_the_baselines() {
    let dir = shared_dir();
    let (fp32, q, pretrained, target) = load(&dir);
    let mut cfg = tiny();
    cfg.budget.adapt.steps = 0;
    cfg.adapt.full_finetune = false;
    let out = adapt_speakers(&cfg, &fp32, &q, &pretrained, None, &target).unwrap();
    let r = &out.report;
    assert_eq!(r.error(LORA_SCRATCH).unwrap(), r.error(NF4_BASELINE).unwrap());
    assert_eq!(r.error(LORA_PRETRAIN).unwrap(), r.error(POOLED_LORA).unwrap());
    assert!(r.row(FFT_FP32).is_none());
}

#[test]
fn a_perfect_teacher_matches_ground_truth() {
    let dir = shared_dir();
    let (_, q, pretrained, target) = load(&dir);
    let teacher = load_model(&dir.teacher_model()).unwrap();
    // Relabel train and dev with the teacher so it is perfect on them.
    let perfect: Vec<AdaptationDataset> = target
        .iter()
        .map(|s| {
            let tr = pseudo_label(&teacher, None, s.train()).unwrap();
            let dv = pseudo_label(&teacher, None, s.dev()).unwrap();
            s.with_labels(Split::Train, &tr).unwrap().with_labels(Split::Dev, &dv).unwrap()
        })
        .collect();
    let sources = [LabelSource::GroundTruth, LabelSource::TeacherCheckpoint];
    let r = adapt_semisup(&tiny(), &q, &pretrained, Some(&teacher), &perfect, &sources).unwrap();
    assert_eq!(r.error(GROUND_TRUTH).unwrap(), r.error(STRONG_TEACHER).unwrap());
    for row in &r.per_speaker {
        assert_eq!(row.errors[GROUND_TRUTH], row.errors[STRONG_TEACHER]);
    }
}

#[test]
fn self_labels_never_see_the_ground_truth() {
    let dir = shared_dir();
    let (_, q, pretrained, target) = load(&dir);
    let scrambled: Vec<AdaptationDataset> = target
        .iter()
        .map(|s| {
            let shift = |u: &pqm::speakersim::Utterance| (u.label + 1) % q.classes() as u32;
            let tr: Vec<u32> = s.train().iter().map(shift).collect();
            let dv: Vec<u32> = s.dev().iter().map(shift).collect();
            s.with_labels(Split::Train, &tr).unwrap().with_labels(Split::Dev, &dv).unwrap()
        })
        .collect();
    let sources = [LabelSource::SelfLabel];
    let a = adapt_semisup(&tiny(), &q, &pretrained, None, &target, &sources).unwrap();
    let b = adapt_semisup(&tiny(), &q, &pretrained, None, &scrambled, &sources).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.per_speaker, b.per_speaker);
}

#[test]
fn semisup_report_has_every_label_source() {
    let dir = shared_dir();
    let r = EvalReport::from_json(&fs::read_to_string(dir.file("semisup.json")).unwrap()).unwrap();
    let names: Vec<&str> = r.rows.iter().map(|r| r.system.as_str()).collect();
    assert_eq!(names, [NO_ADAPTATION, GROUND_TRUTH, STRONG_TEACHER, SELF_LABELS]);
    let main = EvalReport::from_json(&fs::read_to_string(dir.file("report.json")).unwrap()).unwrap();
    assert_eq!(r.error(NO_ADAPTATION).unwrap(), main.error(POOLED_LORA).unwrap());
    assert_eq!(r.error(GROUND_TRUTH).unwrap(), main.error(LORA_PRETRAIN).unwrap());
}

#[test]
fn teacher_with_another_vocabulary_is_rejected() {
    let dir = shared_dir();
    let (_, q, pretrained, target) = load(&dir);
    let other = ToyModel::new(q.vocab() + 1, q.classes(), 16, 0).unwrap();
    let sources = [LabelSource::TeacherCheckpoint];
    assert!(adapt_semisup(&tiny(), &q, &pretrained, Some(&other), &target, &sources).is_err());
    assert!(adapt_semisup(&tiny(), &q, &pretrained, None, &target, &sources).is_err());
}

#[test]
fn sweep_starts_at_the_unadapted_error() {
    let dir = shared_dir();
    let sweep = SweepReport::from_json(&fs::read_to_string(dir.file("sweep.json")).unwrap()).unwrap();
    let semi = EvalReport::from_json(&fs::read_to_string(dir.file("semisup.json")).unwrap()).unwrap();
    assert_eq!(sweep.points[0].count, 0);
    assert_eq!(sweep.points[0].error_rate, sweep.no_adaptation);
    assert_eq!(sweep.no_adaptation, semi.error(NO_ADAPTATION).unwrap());
    // The largest count uses the whole train split, as the ground-truth row does.
    let last = sweep.points.last().unwrap();
    assert_eq!(last.count, 12);
    assert_eq!(last.error_rate, semi.error(GROUND_TRUTH).unwrap());
}

#[test]
fn sweep_rejects_bad_counts() {
    let dir = shared_dir();
    let (_, q, pretrained, target) = load(&dir);
    assert!(sweep_utts(&tiny(), &q, &pretrained, &target, &[0, 13]).is_err());
    assert!(sweep_utts(&tiny(), &q, &pretrained, &target, &[6, 12]).is_err());
    let mut cfg = tiny();
    cfg.sweep.counts = vec![0, 13];
    assert!(cfg.validate().is_err());
}

#[test]
fn adapter_shape_mismatch_is_rejected() {
    let dir = shared_dir();
    let (fp32, q, _, target) = load(&dir);
    let wide = ToyModel::new(q.vocab(), q.classes(), 32, 0).unwrap();
    let attach = vec!["block0".to_string()];
    let foreign = wide.init_adapters("x", &attach, 2, 2.0, &mut pqm::tensor::Rng::new(0)).unwrap();
    assert!(adapt_speakers(&tiny(), &fp32, &q, &foreign, None, &target).is_err());
}

#[test]
fn quantised_checkpoint_matches_in_memory_quantisation() {
    let dir = shared_dir();
    let (fp32, q, _, _) = load(&dir);
    let again = fp32.quantise(LayerSelection::ALL, 64, &NormalFloatCodebook::nf4()).unwrap();
    assert_eq!(again, q);
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("q.pqm");
    save_model(&path, &again).unwrap();
    assert_eq!(digest(&path), digest(&dir.quantised_model()));
}
