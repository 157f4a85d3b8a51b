use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use tmeseg_core::io::{self, role, StackContainer};
use tmeseg_core::raster::{Grid, InstanceMap, LogitStack};
use tmeseg_core::tme::paint_discs;
use tmeseg_core::{ClassId, Taxonomy};

fn tmeseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmeseg")).args(args).env_remove("TMESEG_WORKERS").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = tmeseg(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// The provenance line written to standard error.
fn provenance(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().find(|l| l.starts_with('{')).expect("provenance line on stderr");
    serde_json::from_str(line).unwrap()
}

fn synth(dir: &TempDir, seed: u64) -> (PathBuf, PathBuf) {
    let bundle = dir.path().join(format!("b{seed}.tmef"));
    let expected = dir.path().join(format!("e{seed}.tmef"));
    ok(&["synth", "--seed", &seed.to_string(), "--mpp", "0.5", "--out", p(&bundle), "--expected", p(&expected)]);
    (bundle, expected)
}

#[test]
fn aggregate_writes_a_mask() {
    let dir = TempDir::new().unwrap();
    let (bundle, _) = synth(&dir, 7);
    let mask = dir.path().join("mask.tmef");
    let out = ok(&["aggregate", "--bundle", p(&bundle), "--out", p(&mask)]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    let (labels, mpp) = io::load_labels(&mask, Taxonomy::builtin()).unwrap();
    assert_eq!(summary["width"].as_u64().unwrap() as usize, labels.width());
    assert_eq!(mpp, Some(0.5));
    assert_eq!(provenance(&out)["status"], "ok");
}

#[test]
fn unknown_subcommand_exits_1_with_synopsis() {
    let out = tmeseg(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage:"), "{err}");
    for sub in ["aggregate", "postprocess", "evaluate", "count", "tme", "synth", "info"] {
        assert!(err.contains(sub), "synopsis lacks {sub}: {err}");
    }
    assert_eq!(tmeseg(&["aggregate", "--bundle"]).status.code(), Some(1));
    assert_eq!(tmeseg(&[]).status.code(), Some(1));
}

#[test]
fn help_and_version_exit_0() {
    assert!(tmeseg(&["--help"]).status.success());
    assert!(tmeseg(&["--version"]).status.success());
    assert!(tmeseg(&["tme", "--help"]).status.success());
}

#[test]
fn bad_data_exits_2() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.tmef");
    std::fs::write(&junk, b"not a container").unwrap();
    let out = tmeseg(&["info", p(&junk)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(provenance(&out)["status"], "error");
    let missing = dir.path().join("missing.tmef");
    assert_eq!(tmeseg(&["info", p(&missing)]).status.code(), Some(2));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"roi_radus": 30}"#).unwrap();
    assert_eq!(tmeseg(&["--config", p(&cfg), "info", p(&junk)]).status.code(), Some(2));
}

#[test]
fn misused_flags_exit_1() {
    let dir = TempDir::new().unwrap();
    let logits = student_logits(&dir);
    let out = dir.path().join("o.tmef");
    let r = tmeseg(&["postprocess", "--logits", p(&logits), "--out", p(&out), "--mode", "panoptic"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--nuclei"));
    assert_eq!(tmeseg(&["count", "--mask", p(&out), "--fit", p(&out)]).status.code(), Some(1));
}

#[test]
fn provenance_hash_follows_config_and_input_bytes() {
    let dir = TempDir::new().unwrap();
    let (bundle, _) = synth(&dir, 3);
    let mask = dir.path().join("m.tmef");
    let cfg = dir.path().join("cfg.json");
    let run = |extra: &[&str]| {
        let mut args = extra.to_vec();
        args.extend(["aggregate", "--bundle", p(&bundle), "--out", p(&mask)]);
        provenance(&ok(&args))["run_sha256"].as_str().unwrap().to_owned()
    };
    let base = run(&[]);
    assert_eq!(base, run(&[]));
    std::fs::write(&cfg, "{}").unwrap();
    assert_eq!(base, run(&["--config", p(&cfg)]), "an empty config is the default config");
    std::fs::write(&cfg, r#"{"sigma": 2.5}"#).unwrap();
    let tuned = run(&["--config", p(&cfg)]);
    assert_ne!(base, tuned);
    std::fs::write(&cfg, r#"{"min_contour_area": 4}"#).unwrap();
    assert_ne!(base, run(&["--config", p(&cfg)]));
    assert_ne!(tuned, run(&["--config", p(&cfg)]));

    // flip one byte inside the last plane
    let mut bytes = std::fs::read(&bundle).unwrap();
    let i = bytes.len() - 1;
    bytes[i] ^= 1;
    std::fs::write(&bundle, &bytes).unwrap();
    let changed = tmeseg(&["aggregate", "--bundle", p(&bundle), "--out", p(&mask)]);
    assert_ne!(base, provenance(&changed)["run_sha256"].as_str().unwrap());
}

#[test]
fn provenance_file_records_inputs_and_outputs() {
    let dir = TempDir::new().unwrap();
    let (bundle, _) = synth(&dir, 5);
    let mask = dir.path().join("m.tmef");
    let record = dir.path().join("prov.json");
    ok(&["--provenance", p(&record), "aggregate", "--bundle", p(&bundle), "--out", p(&mask)]);
    let v = json_file(&record);
    assert_eq!(v["subcommand"], "aggregate");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["inputs"][0]["role"], "bundle");
    assert_eq!(v["inputs"][0]["bytes"].as_u64().unwrap(), std::fs::metadata(&bundle).unwrap().len());
    assert_eq!(v["outputs"][0]["role"], "mask");
}

#[test]
fn evaluating_against_the_reference_is_perfect() {
    let dir = TempDir::new().unwrap();
    for seed in [1, 2, 9] {
        let (bundle, expected) = synth(&dir, seed);
        let mask = dir.path().join("m.tmef");
        ok(&["aggregate", "--bundle", p(&bundle), "--out", p(&mask)]);
        // ground truth has no undefined nuclei: drop them
        let tax = Taxonomy::builtin();
        let all = io::load_containers(&expected).unwrap();
        let inst = all[1].to_instances(tax).unwrap();
        let kept = inst.ids().map(|&id| if inst.get(id).is_some_and(|a| a.class.is_some()) { id } else { 0 });
        let inst = InstanceMap::from_ids(kept, |id| (None, inst.get(id).unwrap().class));
        let mut n = StackContainer::from_instances(&inst, tax);
        n.header.role = Some(role::NUCLEI.to_owned());
        io::save_containers(&[all[0].clone(), n], &expected).unwrap();
        let report = dir.path().join("r.json");
        let out = ok(&["evaluate", "--gt", p(&expected), "--pred", p(&mask), "--out", p(&report)]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("dice"));
        let v = json_file(&report);
        assert_eq!(v["schema_version"], 1);
        for row in v["semantic"]["classes"].as_array().unwrap() {
            assert!(row["dice"] == 1.0 || row["dice"].is_null(), "{row}");
        }
        for row in v["instances"]["classes"].as_array().unwrap() {
            assert_eq!(row["counts"]["fp"], 0, "{row}");
            assert_eq!(row["counts"]["fn"], 0, "{row}");
        }
    }
}

#[test]
fn tiled_and_worker_counts_do_not_change_output() {
    let dir = TempDir::new().unwrap();
    let bundle = dir.path().join("big.tmef");
    ok(&["synth", "--seed", "11", "--min-size", "400", "--max-size", "420", "--max-nuclei", "60", "--out", p(&bundle)]);
    let full = dir.path().join("full.tmef");
    ok(&["aggregate", "--bundle", p(&bundle), "--out", p(&full)]);
    let cfg = dir.path().join("tiles.json");
    std::fs::write(&cfg, r#"{"tiling": {"crop": 160, "stride": 128, "halo": 96}}"#).unwrap();
    for workers in ["1", "3"] {
        let tiled = dir.path().join(format!("t{workers}.tmef"));
        ok(&["--config", p(&cfg), "--workers", workers, "aggregate", "--bundle", p(&bundle), "--out", p(&tiled)]);
        assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&tiled).unwrap(), "workers {workers}");
    }
}

#[test]
fn downscale_halves_the_mask_and_doubles_mpp() {
    let dir = TempDir::new().unwrap();
    let (bundle, _) = synth(&dir, 4);
    let mask = dir.path().join("m.tmef");
    ok(&["aggregate", "--bundle", p(&bundle), "--out", p(&mask), "--downscale2"]);
    let (small, mpp) = io::load_labels(&mask, Taxonomy::builtin()).unwrap();
    let (b, _) = io::load_bundle(&bundle, Taxonomy::builtin()).unwrap();
    assert_eq!(small.dims(), (b.dims().0 / 2, b.dims().1 / 2));
    assert_eq!(mpp, Some(1.0));
}

fn student_logits(dir: &TempDir) -> PathBuf {
    let tax = Taxonomy::builtin();
    let ids: Vec<ClassId> = tax.ids().collect();
    let (w, h) = (6, 4);
    // leukocyte everywhere, plasma cell the best subtype; lymphocyte wins the right half
    let planes = ids
        .iter()
        .map(|&c| {
            (0..w * h)
                .map(|i| match c {
                    ClassId::LEUKOCYTE => 5.0,
                    ClassId::PLASMA_CELL => 2.0,
                    ClassId::LYMPHOCYTE if i % w >= 3 => 6.0,
                    _ => 0.0,
                })
                .collect()
        })
        .collect();
    let stack = LogitStack::new(w, h, ids, planes).unwrap();
    let mut c = StackContainer::from_logits(&stack, tax);
    c.header.role = Some(role::STUDENT_LOGITS.to_owned());
    let path = dir.path().join("student.tmef");
    io::save_containers(&[c], &path).unwrap();
    path
}

#[test]
fn postprocess_force_and_panoptic() {
    let dir = TempDir::new().unwrap();
    let tax = Taxonomy::builtin();
    let logits = student_logits(&dir);
    let forced = dir.path().join("f.tmef");
    ok(&["postprocess", "--logits", p(&logits), "--out", p(&forced), "--mode", "force"]);
    let (labels, _) = io::load_labels(&forced, tax).unwrap();
    for (i, &c) in labels.as_slice().iter().enumerate() {
        assert_eq!(c, if i % 6 >= 3 { ClassId::LYMPHOCYTE } else { ClassId::PLASMA_CELL });
    }

    // one nucleus straddling both halves: 4 plasma-leaning pixels, 2 lymphocyte
    let ids = Grid::from_fn(6, 4, |x, y| u32::from(y == 1 && x < 6 && x > 0 || (y == 2 && x == 1))).unwrap();
    let nuclei = InstanceMap::from_ids(ids, |_| (None, None));
    let mut n = StackContainer::from_instances(&nuclei, tax);
    n.header.role = Some(role::NUCLEI.to_owned());
    let npath = dir.path().join("n.tmef");
    io::save_containers(&[n], &npath).unwrap();
    let pan = dir.path().join("p.tmef");
    ok(&["postprocess", "--logits", p(&logits), "--nuclei", p(&npath), "--out", p(&pan), "--mode", "panoptic"]);
    let inst = io::load_instances(&pan, tax).unwrap();
    // plasma sums to 2·6 = 12, lymphocyte to 6·3 = 18
    assert_eq!(inst.get(1).unwrap().class, Some(ClassId::LYMPHOCYTE));
    let (labels, _) = io::load_labels(&pan, tax).unwrap();
    assert_eq!(*labels.get(1, 1), ClassId::LYMPHOCYTE);
    assert_eq!(*labels.get(0, 0), ClassId::BACKGROUND);
}

fn disc_mask(dir: &TempDir, name: &str, tumor: usize, lym: usize) -> PathBuf {
    let mut m = Grid::filled(240, 240, ClassId::STROMA).unwrap();
    let t: Vec<(i64, i64)> = (0..tumor as i64).map(|i| (20 + 20 * (i % 10), 20 + 20 * (i / 10))).collect();
    paint_discs(&mut m, &t, 3, ClassId::EPITHELIAL_CELL_NUCLEUS);
    let l: Vec<(i64, i64)> = (0..lym as i64).map(|i| (20 + 20 * (i % 10), 200 + 15 * (i / 10))).collect();
    paint_discs(&mut m, &l, 3, ClassId::LYMPHOCYTE);
    let mut c = StackContainer::from_labels(&m);
    c.header.role = Some(role::LABELS.to_owned());
    c.header.mpp = Some(0.5);
    let path = dir.path().join(name);
    io::save_containers(&[c], &path).unwrap();
    path
}

#[test]
fn count_by_components_area_and_calibration() {
    let dir = TempDir::new().unwrap();
    let mask = disc_mask(&dir, "m.tmef", 12, 7);
    let out = ok(&["count", "--mask", p(&mask), "--class", "lymphocyte", "--mean-area", "29"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let row = &v["counts"][0];
    assert_eq!(row["class"], "lymphocyte");
    assert_eq!(row["component_count"], 7);
    // radius-3 discs cover 29 pixels each
    assert_eq!(row["pixel_area"], 7 * 29);
    assert_eq!(row["estimated_count"], 7.0);

    let pairs = dir.path().join("pairs.csv");
    std::fs::write(&pairs, "pixel_area,reference_count\n58,2\n145,5\n290,10\n").unwrap();
    let table = dir.path().join("cal.json");
    ok(&["count", "--fit", p(&pairs), "--dataset", "demo", "--class", "lymphocyte", "--out", p(&table)]);
    let t = json_file(&table);
    assert_eq!(t["datasets"]["demo"]["lymphocyte"]["slope"], 29.0);
    assert_eq!(t["datasets"]["demo"]["lymphocyte"]["r_squared"], 1.0);
    let out = ok(&["count", "--mask", p(&mask), "--class", "lymphocyte", "--calibration", p(&table), "--dataset", "demo"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["counts"][0]["estimated_count"], 7.0);
}

#[test]
fn tme_slide_and_cohort() {
    let dir = TempDir::new().unwrap();
    let one = disc_mask(&dir, "one.tmef", 10, 5);
    let out = ok(&["tme", "slide", "--mask", p(&one)]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["tumor_cell_count"], 10);
    assert_eq!(v["mpp"], 0.5);
    assert_eq!(v["margin_um"], 50.0);

    let mut manifest = String::from("case_id,slides,mpp,TP53\n");
    for k in 0..6usize {
        let name = format!("s{k}.tmef");
        disc_mask(&dir, &name, 10, 2 + 3 * k);
        manifest.push_str(&format!("c{k},{name},0.5,{}\n", u8::from(k >= 3)));
    }
    let mpath = dir.path().join("manifest.csv");
    std::fs::write(&mpath, manifest).unwrap();
    let (j, c) = (dir.path().join("cohort.json"), dir.path().join("cohort.csv"));
    ok(&["tme", "cohort", "--manifest", p(&mpath), "--out-json", p(&j), "--out-csv", p(&c)]);
    let v = json_file(&j);
    assert_eq!(v["cases"].as_array().unwrap().len(), 6);
    let csv = std::fs::read_to_string(&c).unwrap();
    assert!(csv.starts_with("metric,gene,"));
    // the lymphocyte ratio separates the groups completely: exact p = 2/20
    let line = csv.lines().find(|l| l.starts_with("in_tumor:lymphocyte,TP53,")).expect(&csv);
    assert!(line.contains(",exact,enriched"), "{line}");
    assert!(line.contains(",0.1,"), "{line}");
}

#[test]
fn info_lists_bundle_roles() {
    let dir = TempDir::new().unwrap();
    let (bundle, _) = synth(&dir, 2);
    let out = ok(&["info", p(&bundle)]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let roles: Vec<&str> = v.as_array().unwrap().iter().map(|c| c["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["he", "tissue_logits", "cell_logits", "nuclei"]);
    assert_eq!(v[0]["mpp"], 0.5);
}
