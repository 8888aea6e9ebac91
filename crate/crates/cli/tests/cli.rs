use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pixeldoc_core::manifest::{read_jsonl, ManifestEntry};
use pixeldoc_core::model::{to_bytes, Model, ModelConfig};
use pixeldoc_core::pipeline::{PatchPrediction, QaRecord};
use pixeldoc_core::scan::Raster;
use pixeldoc_core::seed::derive_seed;

fn pixeldoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pixeldoc"))
        .args(args)
        .env("PIXELDOC_THREADS", "4")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = pixeldoc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["synth", "--n", "10", "--seed", "1", "--out", s(&a)]);
    ok(&["synth", "--n", "10", "--seed", "1", "--out", s(&b)]);
    let ta = tree(&a);
    assert_eq!(ta.len(), 12, "10 scans, manifest, run.json");
    assert_eq!(ta, tree(&b));
    let c = t.path().join("c");
    ok(&["synth", "--n", "10", "--seed", "2", "--out", s(&c)]);
    assert_ne!(ta["manifest.jsonl"], tree(&c)["manifest.jsonl"]);
}

#[test]
fn zero_step_pretraining_saves_the_initialization() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let run = t.path().join("run");
    ok(&["synth", "--n", "4", "--seed", "3", "--out", s(&data)]);
    let summary = ok(&[
        "pretrain",
        "--steps",
        "0",
        "--seed",
        "3",
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]);
    assert_eq!(summary["steps"], 0);
    let init = Model::<f32>::new(ModelConfig::default(), derive_seed(3, "init", 0)).unwrap();
    assert_eq!(fs::read(run.join("model.pxdc")).unwrap(), to_bytes(&init));
    assert!(fs::read(run.join("metrics.jsonl")).unwrap().is_empty());
    assert!(run.join("run.json").exists());
}

#[test]
fn eval_on_perfect_predictions() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("qa");
    let built = ok(&[
        "qa",
        "build",
        "--seed",
        "5",
        "--set",
        "qa.n_train=2",
        "--set",
        "qa.n_test=6",
        "--out",
        s(&data),
    ]);
    assert_eq!(built["instances"], 8);
    let rows: Vec<QaRecord> = read_jsonl(&data.join("qa.jsonl")).unwrap();
    let preds: Vec<PatchPrediction> = rows
        .iter()
        .filter(|r| r.split == "test")
        .map(|r| PatchPrediction {
            probs: r.mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        })
        .collect();
    assert_eq!(preds.iter().filter(|p| p.probs.iter().any(|&x| x > 0.5)).count(), 3);
    let pred_path = t.path().join("preds.jsonl");
    pixeldoc_core::manifest::write_jsonl(&pred_path, &preds).unwrap();
    let m = ok(&[
        "eval",
        "qa",
        "--data",
        s(&data),
        "--preds",
        s(&pred_path),
        "--out",
        s(&t.path().join("eval")),
    ]);
    assert_eq!(m["binary_acc"], 1.0);
    assert_eq!(m["patch_acc"], 1.0);
    assert_eq!(m["one_overlap"], 1.0);
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("o");
    // Config errors.
    let r = pixeldoc(&["pretrain", "--data", s(&t.path().join("missing")), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let r = pixeldoc(&["synth", "--set", "mask.ratio=2", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let r = pixeldoc(&["synth", "--set", "optim.bogus=1", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("optim.bogus"));
    // Data errors.
    let bad = t.path().join("bad");
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join("x.png"), b"not a png").unwrap();
    let r = pixeldoc(&["pretrain", "--data", s(&bad), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    // Numeric failure.
    let data = t.path().join("data");
    ok(&["synth", "--n", "2", "--out", s(&data)]);
    let r = pixeldoc(&[
        "pretrain",
        "--data",
        s(&data),
        "--steps",
        "5",
        "--lr",
        "1e30",
        "--set",
        "optim.warmup=0",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn mask_embed_search_and_recon() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--n", "6", "--seed", "9", "--out", s(&data)]);
    let m = ok(&[
        "mask-preview",
        "--seed",
        "1",
        "--set",
        "model.image_h=368",
        "--set",
        "model.image_w=368",
        "--out",
        s(&t.path().join("m")),
    ]);
    assert_eq!(m["count"], 148);
    let run = t.path().join("run");
    ok(&["pretrain", "--steps", "2", "--data", s(&data), "--out", s(&run)]);
    let ckpt = run.join("model.pxdc");
    let idx = t.path().join("idx");
    let e = ok(&["embed", "--ckpt", s(&ckpt), "--scans", s(&data), "--out", s(&idx)]);
    let n = e["vectors"].as_u64().unwrap();
    assert!(n >= 5);
    let probe = data.join("scans/00000.png");
    let hits = ok(&[
        "search",
        "--index",
        s(&idx.join("index.pxix")),
        "--ckpt",
        s(&ckpt),
        "--probe",
        s(&probe),
        "-k",
        "3",
    ]);
    let hits = hits.as_array().unwrap();
    assert_eq!(hits.len(), 3);
    assert_eq!(hits[0]["id"], "scans/00000.png");
    let r = ok(&[
        "recon-dump",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&t.path().join("r")),
    ]);
    assert_eq!(r["triptychs"].as_u64().unwrap(), n);
}

fn two_column_page(h: usize, w: usize) -> Raster {
    let mut page = Raster::filled(h, w, 1, 1.0);
    for y in (10..h - 10).filter(|y| y % 12 < 8) {
        for x in (20..w / 2 - 20).chain(w / 2 + 20..w - 20) {
            page.set(y, x, 0, 0.0);
        }
    }
    page
}

#[test]
fn ingest_pages_directory() {
    let t = tempfile::tempdir().unwrap();
    let pages = t.path().join("pages");
    fs::create_dir(&pages).unwrap();
    two_column_page(800, 400).save_png(&pages.join("a.png")).unwrap();
    two_column_page(600, 400).save_png(&pages.join("b.png")).unwrap();
    let sidecar = serde_json::json!({
        "page_id": "b", "width": 400, "height": 600,
        "regions": [{"rect": {"x0": 0, "y0": 0, "x1": 200, "y1": 600}, "order": 0}],
    });
    fs::write(pages.join("b.regions.json"), sidecar.to_string()).unwrap();

    let dir = t.path().join("dir");
    let listed = t.path().join("listed");
    let n = ok(&["corpus", "ingest", "--pages", s(&pages), "--out", s(&dir)])["crops"]
        .as_u64()
        .unwrap();
    let a = pages.join("a.png");
    let b = pages.join("b.png");
    ok(&["corpus", "ingest", s(&a), s(&b), "--out", s(&listed)]);
    assert_eq!(tree(&dir), tree(&listed));

    let entries: Vec<ManifestEntry> = read_jsonl(&dir.join("manifest.jsonl")).unwrap();
    assert_eq!(entries.len() as u64, n);
    for e in &entries {
        assert!(dir.join(&e.path).exists());
        assert_eq!(e.split, "train");
    }
    // Page b's single region is one column at 368/200 scale; page a has two.
    let count = |id: &str| entries.iter().filter(|e| e.source_id == id).count();
    let b_rows = 600 * 368 / 200;
    assert_eq!(count("b"), (b_rows - 368) / 128 + 1);
    assert!(count("a") > count("b"));

    let wide = t.path().join("wide");
    let m = ok(&[
        "corpus",
        "ingest",
        "--pages",
        s(&pages),
        "--stride",
        "256",
        "--val-frac",
        "0.5",
        "--out",
        s(&wide),
    ])["crops"]
        .as_u64()
        .unwrap();
    assert!(m < n);
    let entries: Vec<ManifestEntry> = read_jsonl(&wide.join("manifest.jsonl")).unwrap();
    let val: std::collections::BTreeSet<_> = entries
        .iter()
        .filter(|e| e.split == "val")
        .map(|e| e.source_id.as_str())
        .collect();
    assert_eq!(val.len(), 1, "one of two pages held out");
    assert!(entries.iter().any(|e| e.split == "train"));

    let bad = pixeldoc(&[
        "corpus",
        "ingest",
        "--pages",
        s(&pages),
        "--val-frac",
        "1.5",
        "--out",
        s(&wide),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}
