use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use qcn_cli::{
    heatmap_path, inspect_routing, run, translate_file, HeatmapDump, HeatmapKind, EXIT_OK,
    EXIT_RUNTIME, EXIT_USAGE,
};
use qcn_core::corpus::{load_corpus, CorpusFormat};
use qcn_core::training::{
    gen_toy_corpus, MetricsRow, ToyTaskConfig, CHECKPOINT_FILE, METRICS_FILE,
};
use qcn_core::Checkpoint;

const TINY: &str = "\
d_model = 8
d_ffn = 16
layers = 1
heads = 2
capsules = 2
iterations = 2
context_sentences = 2
capsule_dim = 4
max_len = 12
learning_rate = 0.01
batch_size = 4
log_interval = 1
";

fn qcn(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_qcn"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(w.path("tiny.cfg"), TINY).unwrap();
        let code = run([
            "qcn",
            "gen-toy",
            "--out",
            s(&w.path("toy")),
            "--vocab",
            "10",
            "--docs",
            "6",
            "--doc-len",
            "3",
        ]);
        assert_eq!(code, EXIT_OK);
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, steps: &str, extra: &[&str]) -> i32 {
        let mut args = vec![
            "qcn".to_string(),
            "train".into(),
            "--config".into(),
            s(&self.path("tiny.cfg")).into(),
            "--corpus".into(),
            s(&self.path("toy")).into(),
            "--steps".into(),
            steps.into(),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            s(&self.path(out)).into(),
        ];
        args.extend(extra.iter().map(|a| a.to_string()));
        run(args)
    }
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let w = Workspace::new();
    assert_eq!(w.train("run", "0", &[]), EXIT_OK);
    let ck = Checkpoint::load(&w.path("run").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(
        fs::read_to_string(w.path("run").join(METRICS_FILE)).unwrap(),
        ""
    );
}

#[test]
fn usage_errors_exit_two() {
    let w = Workspace::new();
    let (code, _, err) = qcn(&[
        "train",
        "--corpus",
        s(&w.path("nope")),
        "--steps",
        "1",
        "--out",
        s(&w.path("o")),
    ]);
    assert_eq!(code, EXIT_USAGE, "{err}");
    assert_eq!(qcn(&["train", "--steps", "1"]).0, EXIT_USAGE);
    assert_eq!(qcn(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(qcn(&[]).0, EXIT_USAGE);
    assert_eq!(
        w.train("o", "1", &["--context-agnostic", "--lambda", "0.5"]),
        EXIT_USAGE
    );
    assert_eq!(w.train("o", "1", &["--lambda=-1"]), EXIT_USAGE);
    assert_eq!(
        qcn(&["gen-toy", "--out", s(&w.path("g")), "--vocab", "2"]).0,
        EXIT_USAGE
    );
    assert_eq!(qcn(&["--help"]).0, EXIT_OK);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let w = Workspace::new();
    assert_eq!(w.train("a", "6", &[]), EXIT_OK);
    assert_eq!(w.train("b", "6", &[]), EXIT_OK);
    let a = fs::read(w.path("a").join(METRICS_FILE)).unwrap();
    assert_eq!(a, fs::read(w.path("b").join(METRICS_FILE)).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines() {
        MetricsRow::parse(line).unwrap();
    }
}

#[test]
fn ablation_flags_shape_the_model() {
    let w = Workspace::new();
    for (out, flags, qcn, reg) in [
        ("full", &[][..], true, true),
        ("noqcn", &["--no-qcn"][..], false, true),
        ("agn", &["--context-agnostic"][..], false, false),
        ("qcnonly", &["--lambda", "0"][..], true, false),
    ] {
        assert_eq!(w.train(out, "0", flags), EXIT_OK);
        let ck = Checkpoint::load(&w.path(out).join(CHECKPOINT_FILE)).unwrap();
        let names = ck.params.names();
        assert_eq!(names.iter().any(|n| n.starts_with("qcn.")), qcn, "{out}");
        assert_eq!(names.iter().any(|n| n.starts_with("reg.")), reg, "{out}");
        assert_eq!(names.iter().any(|n| n.contains(".ctx.")), qcn, "{out}");
    }
}

#[test]
fn translate_matches_library_and_scores_bleu() {
    let w = Workspace::new();
    assert_eq!(w.train("run", "3", &[]), EXIT_OK);
    let ckpt = w.path("run").join(CHECKPOINT_FILE);
    let out = w.path("hyp.txt");
    let (code, stdout, err) = qcn(&[
        "translate",
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&w.path("toy.src")),
        "--output",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(stdout.is_empty());
    let lib = translate_file(&Checkpoint::load(&ckpt).unwrap(), &w.path("toy.src")).unwrap();
    let mut want = String::new();
    for (i, d) in lib.iter().enumerate() {
        if i > 0 {
            want.push_str("<d>\n");
        }
        for sent in d {
            want.push_str(&sent.join(" "));
            want.push('\n');
        }
    }
    assert_eq!(fs::read_to_string(&out).unwrap(), want);

    let (code, stdout, _) = qcn(&[
        "translate",
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&w.path("toy.src")),
        "--output",
        s(&w.path("hyp2.txt")),
        "--bleu-ref",
        s(&w.path("toy.tgt")),
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.starts_with("BLEU="), "{stdout}");
}

#[test]
fn converged_model_reproduces_targets() {
    let w = Workspace::new();
    let cfg = TINY
        .replace("d_model = 8", "d_model = 16")
        .replace("d_ffn = 16", "d_ffn = 32");
    fs::write(w.path("conv.cfg"), cfg + "dropout = 0\nlambda = 0\n").unwrap();
    let conv = w.path("conv.cfg");
    let code = run([
        "qcn",
        "train",
        "--config",
        s(&conv),
        "--corpus",
        s(&w.path("toy")),
        "--steps",
        "3000",
        "--seed",
        "1",
        "--out",
        s(&w.path("conv")),
    ]);
    assert_eq!(code, EXIT_OK);
    let ckpt = w.path("conv").join(CHECKPOINT_FILE);
    let hyp = w.path("hyp.txt");
    let (code, stdout, _) = qcn(&[
        "translate",
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&w.path("toy.src")),
        "--output",
        s(&hyp),
        "--bleu-ref",
        s(&w.path("toy.tgt")),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(
        fs::read_to_string(&hyp).unwrap(),
        fs::read_to_string(w.path("toy.tgt")).unwrap()
    );
    assert_eq!(stdout.trim(), "BLEU=1.0000");
}

#[test]
fn empty_input_gives_empty_output() {
    let w = Workspace::new();
    assert_eq!(w.train("run", "0", &[]), EXIT_OK);
    fs::write(w.path("empty.src"), "").unwrap();
    let out = w.path("empty.out");
    let ckpt = w.path("run").join(CHECKPOINT_FILE);
    assert_eq!(
        qcn(&[
            "translate",
            "--ckpt",
            s(&ckpt),
            "--input",
            s(&w.path("empty.src")),
            "--output",
            s(&out)
        ])
        .0,
        0
    );
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
    let missing = qcn(&[
        "translate",
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&w.path("none.src")),
        "--output",
        s(&out),
    ]);
    assert_eq!(missing.0, EXIT_USAGE);
}

#[test]
fn mismatched_checkpoint_is_a_runtime_error() {
    let w = Workspace::new();
    assert_eq!(w.train("run", "0", &[]), EXIT_OK);
    let ckpt = w.path("run").join(CHECKPOINT_FILE);
    let mut ck = Checkpoint::load(&ckpt).unwrap();
    ck.config.model.capsules = 3;
    let bad = w.path("bad.ckpt");
    ck.save(&bad).unwrap();
    let out = w.path("o.txt");
    assert_eq!(
        qcn(&[
            "translate",
            "--ckpt",
            s(&bad),
            "--input",
            s(&w.path("toy.src")),
            "--output",
            s(&out)
        ])
        .0,
        EXIT_RUNTIME
    );
    fs::write(w.path("garbage.ckpt"), b"not a checkpoint").unwrap();
    let garbage = w.path("garbage.ckpt");
    assert_eq!(
        qcn(&[
            "translate",
            "--ckpt",
            s(&garbage),
            "--input",
            s(&w.path("toy.src")),
            "--output",
            s(&out)
        ])
        .0,
        EXIT_RUNTIME
    );
}

#[test]
fn inspect_routing_writes_heatmaps_matching_the_library() {
    let w = Workspace::new();
    assert_eq!(w.train("run", "4", &[]), EXIT_OK);
    let ckpt = w.path("run").join(CHECKPOINT_FILE);
    let heat = w.path("heat");
    let (code, stdout, err) = qcn(&[
        "inspect-routing",
        "--ckpt",
        s(&ckpt),
        "--doc",
        s(&w.path("toy.src")),
        "--doc-index",
        "2",
        "--sentence",
        "3",
        "--out",
        s(&heat),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(stdout.lines().count(), 4);
    let ck = Checkpoint::load(&ckpt).unwrap();
    let lib = inspect_routing(&ck, &w.path("toy.src"), 2, 3).unwrap();
    assert_eq!(lib.iter().map(|d| d.0).collect::<Vec<_>>(), vec![1, 2]);
    let docs = load_corpus(&w.path("toy"), CorpusFormat::DocText).unwrap();
    let (r, m) = (ck.config.model.iterations, ck.config.model.capsules);
    for (k, coupling, pccs) in &lib {
        let n = docs[1].src[3 - 1 - k].len();
        for dump in [coupling, pccs] {
            let text = fs::read_to_string(heatmap_path(&heat, dump.kind, *k)).unwrap();
            assert_eq!(text, dump.to_csv());
            assert!(text.starts_with("iter,i,j,value\n"));
            assert_eq!(text.lines().count() - 1, r * n * m);
            assert_eq!(&HeatmapDump::parse_csv(dump.kind, &text).unwrap(), dump);
        }
        for it in &coupling.values {
            for row in it {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
        assert!(pccs
            .values
            .iter()
            .flatten()
            .flatten()
            .all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(coupling.kind, HeatmapKind::Coupling);
    }
}

#[test]
fn inspect_routing_range_errors() {
    let w = Workspace::new();
    assert_eq!(w.train("run", "0", &[]), EXIT_OK);
    let ckpt = w.path("run").join(CHECKPOINT_FILE);
    let doc = w.path("toy.src");
    let at = |j: &str| {
        qcn(&[
            "inspect-routing",
            "--ckpt",
            s(&ckpt),
            "--doc",
            s(&doc),
            "--sentence",
            j,
            "--out",
            s(&w.path("h")),
        ])
        .0
    };
    assert_eq!(at("4"), EXIT_RUNTIME);
    assert_eq!(at("0"), EXIT_RUNTIME);
    assert_eq!(at("1"), EXIT_OK);
    let far = qcn(&[
        "inspect-routing",
        "--ckpt",
        s(&ckpt),
        "--doc",
        s(&doc),
        "--sentence",
        "1",
        "--doc-index",
        "99",
    ]);
    assert_eq!(far.0, EXIT_RUNTIME);
    // context-agnostic checkpoints have nothing to inspect
    assert_eq!(w.train("agn", "0", &["--context-agnostic"]), EXIT_OK);
    let agn = w.path("agn").join(CHECKPOINT_FILE);
    assert_eq!(
        qcn(&[
            "inspect-routing",
            "--ckpt",
            s(&agn),
            "--doc",
            s(&doc),
            "--sentence",
            "2"
        ])
        .0,
        EXIT_RUNTIME
    );
}

#[test]
fn gen_toy_outputs_parse_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    assert_eq!(qcn(&["gen-toy", "--out", s(&p("a"))]).0, EXIT_OK);
    assert_eq!(qcn(&["gen-toy", "--out", s(&p("b"))]).0, EXIT_OK);
    let docs = load_corpus(&p("a"), CorpusFormat::DocText).unwrap();
    assert_eq!(docs, gen_toy_corpus(&ToyTaskConfig::default()).unwrap());
    assert_eq!(fs::read(p("a.src")).unwrap(), fs::read(p("b.src")).unwrap());
    assert_eq!(fs::read(p("a.tgt")).unwrap(), fs::read(p("b.tgt")).unwrap());

    assert_eq!(
        qcn(&["gen-toy", "--out", s(&p("z")), "--docs", "0"]).0,
        EXIT_OK
    );
    assert_eq!(fs::read_to_string(p("z.src")).unwrap(), "");
    assert!(load_corpus(&p("z"), CorpusFormat::DocText)
        .unwrap()
        .is_empty());

    assert_eq!(
        qcn(&["gen-toy", "--out", "/nonexistent/dir/toy"]).0,
        EXIT_RUNTIME
    );
}
