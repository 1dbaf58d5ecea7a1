//! End-to-end command pipeline on a miniature dataset: generate, index,
//! retrieve, pretrain, train, rerank, evaluate — then re-run everything with
//! identical settings and require byte-identical artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use qpeft_cli::{run, Settings};

fn run_cmd(command: &str, dir: &Path, pairs: &[(&str, &str)]) {
    let flags: Vec<(&str, String)> = pairs
        .iter()
        .map(|&(k, v)| (k, v.replace("$D", dir.to_str().unwrap())))
        .collect();
    let settings = Settings::resolve(command, None, &flags).expect("resolve");
    run(&settings).unwrap_or_else(|e| panic!("command {command} failed: {e:#}"));
}

/// Drive every stage once into `root`, returning the artifact paths that the
/// determinism check compares.
fn drive_pipeline(root: &Path) -> Vec<PathBuf> {
    let d = root;
    run_cmd(
        "synth",
        d,
        &[
            ("out", "$D/data"),
            ("seed", "5"),
            ("num-docs", "40"),
            ("num-queries", "18"),
            ("synth-vocab", "120"),
            ("negatives", "3"),
        ],
    );
    run_cmd(
        "build-vocab",
        d,
        &[
            ("corpus", "$D/data/corpus.tsv"),
            ("queries", "$D/data/queries.train.tsv"),
            ("out", "$D/vocab"),
        ],
    );
    run_cmd(
        "pretrain-lm",
        d,
        &[
            ("corpus", "$D/data/corpus.tsv"),
            ("vocab", "$D/vocab/vocab.tsv"),
            ("out", "$D/lm"),
            ("model-dim", "16"),
            ("lm-layers", "1"),
            ("lm-heads", "2"),
            ("ffn-dim", "32"),
            ("max-seq-len", "128"),
            ("pretrain-steps", "60"),
            ("pretrain-lr", "3e-3"),
            ("seed", "11"),
        ],
    );
    run_cmd(
        "index",
        d,
        &[
            ("corpus", "$D/data/corpus.tsv"),
            ("vocab", "$D/vocab/vocab.tsv"),
            ("out", "$D/index"),
        ],
    );
    for split in ["train", "eval", "test"] {
        run_cmd(
            "retrieve",
            d,
            &[
                ("corpus", "$D/data/corpus.tsv"),
                ("vocab", "$D/vocab/vocab.tsv"),
                ("queries", &format!("$D/data/queries.{split}.tsv")),
                ("out", &format!("$D/rt_{split}")),
                ("depth", "12"),
            ],
        );
    }
    run_cmd(
        "train",
        d,
        &[
            ("corpus", "$D/data/corpus.tsv"),
            ("vocab", "$D/vocab/vocab.tsv"),
            ("checkpoint", "$D/lm/lm.ckpt"),
            ("queries", "$D/data/queries.train.tsv"),
            ("qrels", "$D/data/qrels.train.tsv"),
            ("run", "$D/rt_train/retrieved.run"),
            ("eval-queries", "$D/data/queries.eval.tsv"),
            ("eval-qrels", "$D/data/qrels.eval.tsv"),
            ("eval-run", "$D/rt_eval/retrieved.run"),
            ("out", "$D/trained"),
            ("variant", "a"),
            ("k", "4"),
            ("negatives", "2"),
            ("batch-size", "3"),
            ("max-epochs", "2"),
            ("patience", "2"),
            ("depth", "12"),
            ("seed", "17"),
        ],
    );
    run_cmd(
        "rerank",
        d,
        &[
            ("corpus", "$D/data/corpus.tsv"),
            ("vocab", "$D/vocab/vocab.tsv"),
            ("queries", "$D/data/queries.test.tsv"),
            ("run", "$D/rt_test/retrieved.run"),
            ("checkpoint", "$D/trained/qpeft.ckpt"),
            ("out", "$D/rr"),
            ("depth", "12"),
        ],
    );
    run_cmd(
        "rerank",
        d,
        &[
            ("corpus", "$D/data/corpus.tsv"),
            ("vocab", "$D/vocab/vocab.tsv"),
            ("queries", "$D/data/queries.test.tsv"),
            ("run", "$D/rt_test/retrieved.run"),
            ("checkpoint", "$D/lm/lm.ckpt"),
            ("out", "$D/rr_upr"),
            ("depth", "12"),
        ],
    );
    fs::copy(d.join("rr/reranked.run"), d.join("qpeft-a.run")).unwrap();
    fs::copy(d.join("rr_upr/reranked.run"), d.join("upr.run")).unwrap();
    run_cmd(
        "eval",
        d,
        &[
            ("corpus", "$D/data/corpus.tsv"),
            ("qrels", "$D/data/qrels.test.tsv"),
            ("answers", "$D/data/answers.tsv"),
            (
                "runs",
                "$D/rt_test/retrieved.run,$D/upr.run,$D/qpeft-a.run",
            ),
            ("retriever", "retrieved"),
            ("upr", "upr"),
            ("ks", "5,10"),
            ("out", "$D/report"),
        ],
    );
    [
        "data/corpus.tsv",
        "data/queries.train.tsv",
        "data/qrels.train.tsv",
        "data/answers.tsv",
        "vocab/vocab.tsv",
        "lm/lm.ckpt",
        "index/index.tsv",
        "rt_test/retrieved.run",
        "trained/qpeft.ckpt",
        "trained/train_log.csv",
        "rr/reranked.run",
        "report/report.csv",
    ]
    .iter()
    .map(|p| d.join(p))
    .collect()
}

#[test]
fn pipeline_runs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();

    let files_a = drive_pipeline(&a);
    let files_b = drive_pipeline(&b);

    for (fa, fb) in files_a.iter().zip(&files_b) {
        let xa = fs::read(fa).unwrap_or_else(|e| panic!("missing {}: {e}", fa.display()));
        let xb = fs::read(fb).unwrap();
        assert_eq!(
            xa,
            xb,
            "artifact differs between identical runs: {}",
            fa.file_name().unwrap().to_string_lossy()
        );
    }

    // The report covers every requested system and cutoff.
    let report = fs::read_to_string(a.join("report/report.csv")).unwrap();
    for needle in ["retrieved,", "upr,", "qpeft-a,", ",5,", ",10,"] {
        assert!(report.contains(needle), "report.csv lacks {needle:?}");
    }
    // Significance columns: p against the retriever and against the
    // designated plain-likelihood baseline.
    let header = report.lines().next().unwrap();
    assert!(header.contains("p_vs_retriever") && header.contains("p_vs_upr"));
}

#[test]
fn run_log_records_value_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("settings.cfg");
    fs::write(&cfg, "seed = 9\ndepth = 15\n").unwrap();
    let settings = Settings::resolve(
        "retrieve",
        Some(&cfg),
        &[("depth", "12".to_string()), ("k", "7".to_string())],
    )
    .unwrap();
    let log = settings.render_log(&[]);
    assert!(log.contains("command = retrieve"));
    assert!(log.contains("seed = 9  [config]"));
    assert!(log.contains("depth = 12  [flag, overrides config]"));
    assert!(log.contains("k = 7  [flag]"));
    assert!(log.contains("b = 0.75  [default]"));
}

#[test]
fn unknown_and_duplicate_config_keys_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no-such-key = 1\n").unwrap();
    let err = Settings::resolve("synth", Some(&cfg), &[]).unwrap_err();
    assert!(err.to_string().contains("unknown key"));

    fs::write(&cfg, "seed = 1\nseed = 2\n").unwrap();
    let err = Settings::resolve("synth", Some(&cfg), &[]).unwrap_err();
    assert!(err.to_string().contains("already set"));

    let err = Settings::resolve("synth", None, &[("bogus", "1".to_string())]).unwrap_err();
    assert!(err.to_string().contains("unknown flag key"));
}

#[test]
fn commands_write_only_into_the_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    run_cmd(
        "synth",
        d,
        &[
            ("out", "$D/only/data"),
            ("seed", "3"),
            ("num-docs", "12"),
            ("num-queries", "6"),
            ("synth-vocab", "60"),
            ("negatives", "2"),
        ],
    );
    let entries: Vec<String> = fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(entries, vec!["only".to_string()], "stray top-level entries");
    assert!(d.join("only/data/run.log").is_file());
}
