//! Runs the `reorder-nmt` binary end to end on small inputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reorder-nmt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn reorder-nmt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn score_of_identical_files_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("a.txt");
    fs::write(&f, "the cat sat on the mat\nit was a sunny day today\n").unwrap();
    let o = run(&["score", "--hyp", p(&f), "--ref", p(&f)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "100.00");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["score", "--hyp"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let missing = dir.path().join("missing.txt");
    assert_eq!(run(&["score", "--hyp", p(&missing), "--ref", p(&missing)]).status.code(), Some(2));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::write(&a, "x y\n").unwrap();
    fs::write(&b, "x y\nz w\n").unwrap();
    assert_eq!(run(&["score", "--hyp", p(&a), "--ref", p(&b)]).status.code(), Some(2));
}

#[test]
fn preprocess_writes_positions_and_tau_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("s"), "a b c\nd e f g\n").unwrap();
    fs::write(d.join("t"), "A B C\nG F E D\n").unwrap();
    fs::write(d.join("al"), "0-0 1-1 2-2\n0-3 1-2 2-1 3-0\n").unwrap();
    let out = d.join("pre");
    let o = run(&["preprocess", "--src", p(&d.join("s")), "--tgt", p(&d.join("t")), "--align", p(&d.join("al")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("positions.txt")).unwrap(), "0 1 2\n3 2 1 0\n");
    assert_eq!(fs::read_to_string(out.join("reordered.src")).unwrap(), "a b c\ng f e d\n");
    let s = stdout(&o);
    assert!(s.contains("mean_kendall_tau\t0.5000"), "{s}");
    assert!(s.contains("tau[0.9,1.0]\t1"), "{s}");

    fs::write(d.join("bad"), "0-0 1-1 9-9\n0-0\n").unwrap();
    let o = run(&["preprocess", "--src", p(&d.join("s")), "--tgt", p(&d.join("t")), "--align", p(&d.join("bad")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn reversal_corpus_has_maximal_tau() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(&["synth", "--count", "30", "--vocab", "10", "--order", "reverse", "--marked", "0", "--min-len", "2", "--max-len", "6", "--split", "1,0,0", "--out", p(d)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["preprocess", "--src", p(&d.join("train.src")), "--tgt", p(&d.join("train.tgt")), "--align", p(&d.join("train.align")), "--out", p(&d.join("pre"))]);
    assert!(stdout(&o).contains("mean_kendall_tau\t1.0000"));
}

#[test]
fn synth_then_preprocess_recovers_the_generator_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(&["synth", "--count", "40", "--seed", "3", "--out", p(d)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "train\t36\nvalid\t2\ntest\t2\n");
    let o = run(&["preprocess", "--src", p(&d.join("train.src")), "--tgt", p(&d.join("train.tgt")), "--align", p(&d.join("train.align")), "--out", p(&d.join("pre"))]);
    assert!(o.status.success());
    // every alignment line is a one-to-one permutation `j-r_j`, so the positions
    // file must list the target indices in source order
    let align = fs::read_to_string(d.join("train.align")).unwrap();
    let pos = fs::read_to_string(d.join("pre/positions.txt")).unwrap();
    for (a, r) in align.lines().zip(pos.lines()) {
        let from_links: Vec<&str> = a.split_whitespace().map(|l| l.split_once('-').unwrap().1).collect();
        assert_eq!(from_links.join(" "), r);
    }
    // O(J²) inversion count over the written positions
    let mut total = 0.0;
    for r in pos.lines() {
        let v: Vec<usize> = r.split_whitespace().map(|x| x.parse().unwrap()).collect();
        let n = v.len();
        let inv = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).filter(|&(a, b)| v[a] > v[b]).count();
        total += inv as f64 / (n * (n - 1) / 2) as f64;
    }
    let want = format!("mean_kendall_tau\t{:.4}", total / pos.lines().count() as f64);
    assert!(stdout(&o).contains(&want), "{want}");
    let again = tempfile::tempdir().unwrap();
    run(&["synth", "--count", "40", "--seed", "3", "--out", p(again.path())]);
    assert_eq!(fs::read(d.join("train.src")).unwrap(), fs::read(again.path().join("train.src")).unwrap());
}

#[test]
fn train_refuses_lambda_on_baseline_before_any_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["synth", "--count", "20", "--out", p(d)]);
    let out = d.join("run");
    let o = run(&["train", "--train", p(&d.join("train")), "--set", "variant=baseline", "--set", "lambda=0.6", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("metrics.tsv").exists());
    let o = run(&["train", "--train", p(&d.join("train")), "--set", "colour=blue"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_translate_sim_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["synth", "--count", "60", "--vocab", "12", "--min-len", "3", "--max-len", "6", "--marked", "3", "--out", p(d)]);
    let cfg = d.join("tiny.cfg");
    fs::write(
        &cfg,
        "# tiny\nd_model = 16\nd_ff = 32\nheads = 2\nlayers = 1\nvariant = refsr\nlambda = 0.6\n\
         steps = 30\nwarmup = 10\nbatch_size = 8\nlog_every = 10\ncheckpoint_every = 10\nvalid_sentences = 3\n",
    )
    .unwrap();
    let out = d.join("run");
    let (train, valid) = (d.join("train"), d.join("valid"));
    let args = ["train", "--config", p(&cfg), "--train", p(&train), "--valid", p(&valid), "--out", p(&out)];
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step\tlr\tnll\treorder_sim\tvalid_bleu\tvalid_sim");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 6));
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("variant = refsr"));

    // determinism: a rerun writes the same metrics log
    let out2 = d.join("run2");
    let mut args2 = args;
    args2[8] = p(&out2);
    assert!(run(&args2).status.success());
    assert_eq!(fs::read_to_string(out2.join("metrics.tsv")).unwrap(), metrics);

    let model = out.join("model.bin");
    let input = d.join("test.src");
    let beam1 = run(&["translate", "--model", p(&model), "--input", p(&input), "--beam", "1"]);
    let greedy = run(&["translate", "--model", p(&model), "--input", p(&input), "--greedy"]);
    assert!(beam1.status.success());
    assert_eq!(stdout(&beam1), stdout(&greedy));
    assert_eq!(stdout(&beam1).lines().count(), fs::read_to_string(&input).unwrap().lines().count());

    let o = run(&["sim", "--model", p(&model), "--src", p(&input), "--tgt", p(&d.join("test.tgt")), "--align", p(&d.join("test.align"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.starts_with("pr_vs_re\t") && s.contains("\npe_vs_re\t"));
}

#[test]
fn sweep_emits_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["synth", "--count", "40", "--vocab", "10", "--min-len", "3", "--max-len", "5", "--marked", "3", "--split", "0.8,0.1,0.1", "--out", p(d)]);
    let out = d.join("sweep");
    let o = run(&[
        "sweep-lambda", "--train", p(&d.join("train")), "--test", p(&d.join("test")), "--values", "0,0.6",
        "--set", "variant=exgre", "--set", "d_model=8", "--set", "d_ff=16", "--set", "layers=1",
        "--set", "steps=5", "--set", "warmup=2", "--set", "batch_size=4", "--set", "beam=2", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("sweep.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "lambda\tbleu\tsim");
    assert!(rows[1].starts_with("0.0\t") && rows[2].starts_with("0.6\t"));
    assert_eq!(stdout(&o), table);
}
