use std::path::Path;
use std::process::{Command, Output};

fn qsegment(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsegment")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = qsegment(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn summary_lists_eight_layers_and_the_library_count() {
    let out = ok(&["summary"]);
    let rows: Vec<&str> = out.lines().skip(1).take(8).collect();
    let channels: Vec<(usize, usize)> = rows
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split_whitespace().collect();
            (f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    assert_eq!(channels, vec![(3, 16), (16, 32), (32, 64), (64, 64), (64, 32), (32, 16), (16, 16), (16, 1)]);
    let params = qsegment::build_model(0).parameter_count();
    assert!(out.contains(&format!("parameters: {params}\n")));
}

fn estimate(out: &str) -> usize {
    let line = out.lines().find(|l| l.starts_with("int8 size estimate")).unwrap();
    line.split_whitespace().nth(3).unwrap().parse().unwrap()
}

#[test]
fn quantize_default_model_and_compare_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.qsm");
    let report = ok(&["quantize", "--synthetic", "--size", "32x32", "--out", p(&q)]);
    let actual = std::fs::metadata(&q).unwrap().len() as f64;
    assert!(actual <= 130_000.0, "{actual} bytes");
    assert!(report.contains(&format!("({} bytes)", actual as u64)));
    let est = estimate(&ok(&["summary"])) as f64;
    assert!((est - actual).abs() / actual <= 0.10, "estimate {est} vs {actual}");

    let again = dir.path().join("q2.qsm");
    ok(&["quantize", "--synthetic", "--size", "32x32", "--out", p(&again)]);
    assert_eq!(std::fs::read(&q).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn train_quantize_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--synthetic", "--size", "16x16", "--steps", "6", "--seed", "3", "--out", p(&run)]);
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["batch_size"], 8);
    assert_eq!(first["lr"], 1e-3);
    assert_eq!(first["restart_period"], 20);
    assert_eq!(first["size"], "16x16");

    let run2 = dir.path().join("run2");
    ok(&["train", "--synthetic", "--size", "16x16", "--steps", "6", "--seed", "3", "--out", p(&run2)]);
    let log2 = std::fs::read_to_string(run2.join("train.log")).unwrap();
    assert_eq!(log.lines().skip(1).collect::<Vec<_>>(), log2.lines().skip(1).collect::<Vec<_>>());

    let best = run.join("best.qsm");
    let q = dir.path().join("q.qsm");
    let report = ok(&["quantize", "--model", p(&best), "--synthetic", "--size", "16x16", "--seed", "3", "--out", p(&q)]);
    let stats: serde_json::Value = serde_json::from_str(report.lines().last().unwrap()).unwrap();

    // Recompute the reported agreement from the two saved files.
    let f = qsegment::model::qsm::load_model(&best).unwrap();
    let qm = qsegment::model::qsm::load_model(&q).unwrap();
    let data = qsegment::data::DatasetIndex::synthetic(3, (16, 16)).unwrap();
    let (mut s, mut n) = (0.0, 0usize);
    for x in &data.train[..8] {
        let (a, b) = (f.forward(&x.image).unwrap(), qm.forward(&x.image).unwrap());
        s += a.data().iter().zip(b.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        n += a.len();
    }
    assert!((stats["mean_abs_dlogit"].as_f64().unwrap() - s / n as f64).abs() <= 1e-9);

    // Infer on an odd-sized image: outputs keep the source size.
    let img = dir.path().join("in.png");
    let x = qsegment::data::pad_to_multiple(&data.val[0].image, 1);
    let x = qsegment::data::crop_top_left(&x, 13, 15).unwrap();
    qsegment::data::write_rgb_png(&x, &img).unwrap();
    let out = dir.path().join("pred");
    ok(&["infer", "--model", p(&best), "--image", p(&img), "--out", p(&out)]);
    for name in ["in_prob.png", "in_mask.png"] {
        let im = image::open(out.join(name)).unwrap().to_luma8();
        assert_eq!(im.dimensions(), (15, 13));
        if name == "in_mask.png" {
            assert!(im.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        }
    }
    let mismatch = qsegment(&["infer", "--model", p(&q), "--image", p(&img), "--out", p(&out)]);
    assert_eq!(mismatch.status.code(), Some(2));
    ok(&["infer", "--quantized", "--model", p(&q), "--image", p(&img), "--out", p(&out)]);

    let report = ok(&["eval", "--model", p(&best), "--synthetic", "--size", "16x16", "--seed", "3", "--self-consistency"]);
    let v: serde_json::Value = serde_json::from_str(report.trim()).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort();
    assert_eq!(keys, ["accuracy", "auc", "dice", "fn", "fp", "n_images", "threshold", "tn", "tp"]);
    assert_eq!(v["dice"], 1.0);
    assert_eq!(v["accuracy"], 1.0);
}

#[test]
fn bench_csv_shape_and_mac_count() {
    let out = ok(&["bench", "--size", "64x64", "--iters", "3", "--warmup", "0", "--mode", "both"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("mode,h,w,iters,mean_ms,p50_ms,p95_ms,mac_count"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[1][0]), ("float", "quantized"));
    // Hand-summed k^2 * c_in/groups * c_out * h_out * w_out per conv.
    let blocks = [(3, 16, 64), (16, 32, 32), (32, 64, 16), (64, 64, 8), (64, 32, 16), (32, 16, 32), (16, 16, 64)];
    let mut macs: u64 = blocks.iter().map(|&(ci, co, r)| (9 * ci * co + co * co + 9 * co) * r * r).sum();
    macs += 9 * 16 * 64 * 64;
    for r in &rows {
        assert_eq!(r[7].parse::<u64>().unwrap(), macs);
        let (p50, p95): (f64, f64) = (r[5].parse().unwrap(), r[6].parse().unwrap());
        assert!(p50 <= p95);
    }
    let again = ok(&["bench", "--size", "64x64", "--iters", "1", "--warmup", "0"]);
    assert!(again.lines().nth(1).unwrap().ends_with(&format!(",{macs}")));
}

#[test]
fn exit_codes_by_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(qsegment(&["bench", "--size", "30x30"]).status.code(), Some(2));
    assert_eq!(qsegment(&["frobnicate"]).status.code(), Some(2));
    let missing = dir.path().join("nope.qsm");
    assert_eq!(qsegment(&["summary", "--model", p(&missing)]).status.code(), Some(3));
    let bad = dir.path().join("bad.qsm");
    std::fs::write(&bad, b"not a model").unwrap();
    assert_eq!(qsegment(&["summary", "--model", p(&bad)]).status.code(), Some(3));
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "lr = -1.0\n").unwrap();
    let out = dir.path().join("o");
    let o = qsegment(&["train", "--synthetic", "--size", "16x16", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "size = \"16x16\"\nseed = 5\nsteps = 2\nbatch_size = 4\nsynthetic = true\n").unwrap();
    let out = dir.path().join("o");
    ok(&["train", "--config", p(&cfg), "--seed", "9", "--out", p(&out)]);
    let first = std::fs::read_to_string(out.join("train.log")).unwrap();
    let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!((v["seed"].as_u64(), v["batch_size"].as_u64(), v["steps"].as_u64()), (Some(9), Some(4), Some(2)));
}
