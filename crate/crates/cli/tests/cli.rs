use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stpatch"));
    c.env_remove("STPATCH_WORKERS");
    c
}

fn run(args: &[&str], workers: Option<usize>) -> Output {
    let mut c = bin();
    c.args(args);
    if let Some(n) = workers {
        c.env("STPATCH_WORKERS", n.to_string());
    }
    c.output().expect("spawn stpatch")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synthetic_config(dir: &Path, name: &str, slices: &[(usize, usize)], extra: &str) -> PathBuf {
    let mut text = format!("output = \"out-{name}\"\n");
    for (i, (h, w)) in slices.iter().enumerate() {
        text += &format!(
            "[[slices]]\nkind = \"synthetic\"\nid = \"s{i}\"\n[slices.config]\nheight = {h}\nwidth = {w}\ngenes = 32\nn_domains = 4\nhole_rate = 0.1\nseed = {}\n",
            7 + i
        );
    }
    text += "[params]\nh = 8\nw = 8\nm = 12\nn_s = 6\nseed = 11\n";
    text += extra;
    let p = dir.join(format!("{name}.toml"));
    fs::write(&p, text).unwrap();
    p
}

fn shard_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "stpz"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn build_writes_records_and_manifest() {
    let t = TempDir::new().unwrap();
    let cfg = synthetic_config(t.path(), "a", &[(24, 24), (20, 30)], "");
    let o = run(&["build", "--config", cfg.to_str().unwrap()], Some(1));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&t.path().join("out-a"));
    assert_eq!(m["record_count"], 12);
    assert_eq!(m["shape"]["h"], 8);
    assert_eq!(m["shape"]["m"], 12);
    assert!(t.path().join("out-a/genes.txt").exists());
}

#[test]
fn flags_override_config_and_are_recorded() {
    let t = TempDir::new().unwrap();
    let cfg = synthetic_config(t.path(), "b", &[(24, 24)], "");
    let out = t.path().join("elsewhere");
    let o = run(
        &[
            "build", "--config", cfg.to_str().unwrap(), "--n-s", "3", "--m", "5", "--select", "hvg",
            "--seed", "99", "--output", out.to_str().unwrap(),
        ],
        Some(1),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["record_count"], 3);
    assert_eq!(m["shape"]["m"], 5);
    let params = &m["build"]["params"];
    assert_eq!(params["n_s"], 3);
    assert_eq!(params["seed"], 99);
    assert_eq!(params["select"], "hvg");
}

#[test]
fn builds_are_byte_identical_across_runs_and_worker_counts() {
    let t = TempDir::new().unwrap();
    let cfg = synthetic_config(t.path(), "d", &[(24, 24), (30, 20), (16, 16)], "records_per_shard = 7\n");
    let mut results = Vec::new();
    for (i, workers) in [1, 1, 4].into_iter().enumerate() {
        let out = t.path().join(format!("run{i}"));
        let o = run(&["build", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()], Some(workers));
        assert_eq!(code(&o), 0);
        results.push(shard_bytes(&out));
    }
    assert!(results[0].len() > 1);
    assert_eq!(results[0], results[1]);
    assert_eq!(results[0], results[2]);
}

#[test]
fn rebuild_from_manifest_reproduces_shards() {
    let t = TempDir::new().unwrap();
    let cfg = synthetic_config(t.path(), "r", &[(24, 24)], "");
    let first = t.path().join("out-r");
    assert_eq!(code(&run(&["build", "--config", cfg.to_str().unwrap()], Some(2))), 0);
    let again = t.path().join("again");
    let o = run(
        &[
            "build", "--from-manifest", first.join("manifest.json").to_str().unwrap(), "--output",
            again.to_str().unwrap(),
        ],
        Some(1),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(shard_bytes(&first), shard_bytes(&again));
}

#[test]
fn small_slices_are_skipped_with_a_warning() {
    let t = TempDir::new().unwrap();
    let cfg = synthetic_config(t.path(), "s", &[(24, 24), (5, 5)], "");
    let o = run(&["build", "--config", cfg.to_str().unwrap()], Some(1));
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipped"));
    assert_eq!(manifest(&t.path().join("out-s"))["record_count"], 6);
}

#[test]
fn build_spot_fifty_by_fifty_grid() {
    let t = TempDir::new().unwrap();
    let text = "output = \"spots\"\n[[slices]]\nkind = \"synthetic\"\nid = \"g\"\n[slices.config]\nheight = 50\nwidth = 50\ngenes = 16\nn_domains = 2\nseed = 1\n[params]\nm = 4\n";
    let cfg = t.path().join("spot.toml");
    fs::write(&cfg, text).unwrap();
    let o = run(&["build-spot", "--config", cfg.to_str().unwrap()], Some(1));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&t.path().join("spots"));
    assert_eq!(m["record_count"], 2500);
    assert_eq!(m["shape"]["h"], 1);
    assert_eq!(m["shape"]["w"], 1);
}

#[test]
fn usage_errors_exit_one() {
    let t = TempDir::new().unwrap();
    let cfg = synthetic_config(t.path(), "u", &[(24, 24)], "");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&run(&["frobnicate"], None)), 1);
    assert_eq!(code(&run(&["build", "--config", c, "--select", "best"], None)), 1);
    assert_eq!(code(&run(&["build", "--config", c, "--h", "-3"], None)), 1);
    assert_eq!(code(&run(&["build", "--config", c, "--m", "33"], Some(1))), 1);
    assert_eq!(code(&run(&["build", "--config", c, "--mask-ratio", "1.5"], Some(1))), 1);
    assert_eq!(code(&run(&["build", "--config", c], Some(0))), 1);
    let bad = t.path().join("bad.toml");
    fs::write(&bad, "output = \"x\"\nslices = []\n[params]\nunknown_key = 1\n").unwrap();
    assert_eq!(code(&run(&["build", "--config", bad.to_str().unwrap()], Some(1))), 1);
    assert_eq!(code(&run(&["--help"], None)), 0);
}

#[test]
fn data_errors_exit_two() {
    let t = TempDir::new().unwrap();
    let tiny = synthetic_config(t.path(), "tiny", &[(4, 4)], "");
    assert_eq!(code(&run(&["build", "--config", tiny.to_str().unwrap()], Some(1))), 2);

    let csv = t.path().join("broken.csv");
    fs::write(&csv, "x,y,A,B\n0,0,1,2\n1,0,oops,2\n").unwrap();
    let cfg = t.path().join("csv.toml");
    fs::write(&cfg, "output = \"o\"\n[[slices]]\nkind = \"csv\"\nid = \"c\"\npath = \"broken.csv\"\n[params]\nh = 1\nw = 1\nm = 1\n").unwrap();
    let o = run(&["build", "--config", cfg.to_str().unwrap()], Some(1));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":3:"));

    let good = synthetic_config(t.path(), "g", &[(24, 24)], "");
    assert_eq!(code(&run(&["build", "--config", good.to_str().unwrap()], Some(1))), 0);
    let shard = t.path().join("out-g/shard-00000.stpz");
    let mut bytes = fs::read(&shard).unwrap();
    bytes[100] ^= 0x40;
    fs::write(&shard, bytes).unwrap();
    let manifest = t.path().join("out-g/manifest.json");
    assert_eq!(code(&run(&["stats", manifest.to_str().unwrap()], None)), 2);
}

#[test]
fn stats_reports_counts_and_occupancy() {
    let t = TempDir::new().unwrap();
    let cfg = synthetic_config(t.path(), "st", &[(24, 24), (20, 30)], "");
    assert_eq!(code(&run(&["build", "--config", cfg.to_str().unwrap()], Some(1))), 0);
    let o = run(&["stats", t.path().join("out-st/manifest.json").to_str().unwrap()], None);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["record_count"], 12);
    let occ = v["mean_occupancy"].as_f64().unwrap();
    assert!((occ - 0.9).abs() < 0.05, "{occ}");
    let hist: u64 = v["occupancy_histogram"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).sum();
    assert_eq!(hist, 12);
}

#[test]
fn render_is_deterministic_and_well_formed() {
    let t = TempDir::new().unwrap();
    let cfg = synthetic_config(t.path(), "rd", &[(24, 24)], "");
    let c = cfg.to_str().unwrap();
    let mut images = Vec::new();
    for i in 0..2 {
        let out = t.path().join(format!("grid{i}.pgm"));
        let o = run(&["render", "--config", c, "--slice", "s0", "--gene", "G0", "--out", out.to_str().unwrap()], None);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        images.push(fs::read(out).unwrap());
    }
    assert_eq!(images[0], images[1]);
    assert!(images[0].starts_with(b"P5\n"));

    assert_eq!(code(&run(&["build", "--config", c], Some(1))), 0);
    let manifest = t.path().join("out-rd/manifest.json");
    let first_gene = fs::read_to_string(t.path().join("out-rd/genes.txt")).unwrap();
    let sample = stpatch::shard::read_shards(&manifest).unwrap().next().unwrap().unwrap();
    let name = first_gene.lines().nth(sample.genes[0] as usize).unwrap();
    let out = t.path().join("rec.pgm");
    let o = run(
        &["render", "--manifest", manifest.to_str().unwrap(), "--gene", name, "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(out).unwrap();
    assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(bytes.len(), "P5\n8 8\n255\n".len() + 64);

    let o = run(&["render", "--config", c, "--slice", "s0", "--gene", "NOPE", "--out", "x.pgm"], None);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_domain_prints_per_split_rows() {
    let t = TempDir::new().unwrap();
    let mut emb = String::new();
    let mut labels = String::new();
    for i in 0..60 {
        let c = i % 3;
        emb += &format!("{},{}\n", c as f64 * 10.0 + (i as f64) * 0.01, -(c as f64));
        labels += &format!("{c}\n");
    }
    let e = t.path().join("emb.csv");
    let l = t.path().join("labels.txt");
    fs::write(&e, emb).unwrap();
    fs::write(&l, labels).unwrap();
    let args = ["eval-domain", "--embeddings", e.to_str().unwrap(), "--labels", l.to_str().unwrap(), "--k", "3"];
    let o = run(&args, None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "split,accuracy,ari");
    assert_eq!(lines.len(), 12);
    assert!(lines[11].starts_with("mean,1,1") || lines[11].starts_with("mean,1.0"), "{}", lines[11]);
    assert_eq!(stdout(&run(&args, None)), text);

    fs::write(&l, "0\n1\n").unwrap();
    assert_eq!(code(&run(&args, None)), 1);
}

#[test]
fn eval_recon_matrix_and_harness_modes() {
    let t = TempDir::new().unwrap();
    let truth = t.path().join("t.csv");
    let pred = t.path().join("p.csv");
    fs::write(&truth, "1,2\n3,4\n").unwrap();
    fs::write(&pred, "1,2\n3,6\n").unwrap();
    let o = run(&["eval-recon", "--truth", truth.to_str().unwrap(), "--pred", pred.to_str().unwrap()], None);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "mse,mae\n1,0.5\n");

    let cfg = synthetic_config(t.path(), "er", &[(24, 24)], "");
    assert_eq!(code(&run(&["build", "--config", cfg.to_str().unwrap()], Some(1))), 0);
    let m = t.path().join("out-er/manifest.json");
    let args = ["eval-recon", "--manifest", m.to_str().unwrap(), "--region-s", "4", "--replicates", "3"];
    let o = run(&args, None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["per_replicate"].as_array().unwrap().len(), 3);
    assert!(v["mse"].as_f64().unwrap() > 0.0);
    assert_eq!(stdout(&run(&args, None)), stdout(&o));
}

#[test]
fn loss_oracle_spot_and_slice_collapse() {
    let t = TempDir::new().unwrap();
    let w = |name: &str, text: &str| {
        let p = t.path().join(name);
        fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_owned()
    };
    let targets = w("t.csv", "1,2\n3,4\n");
    let preds = w("p.csv", "1,0\n3,5\n");
    let o = run(&["loss-oracle", "spot", "--targets", &targets, "--preds", &preds], None);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 1.25);

    let expr = w("expr.csv", "1,0,2\n0,3,1\n2,2,0\n");
    let masks = w("masks.txt", "0 2\n1\n0 1 2\n");
    let ge = w("ge.csv", "1,0\n0,1\n1,1\n");
    let se = w("se.csv", "0.5,1\n2,0\n1,-1\n");
    let coords = w("xy.csv", "0,0\n1,0\n0,1\n");
    let common = ["--expr", &expr, "--masks", &masks, "--gene-emb", &ge, "--spot-emb", &se];

    let mut slice_args = vec!["loss-oracle", "slice"];
    slice_args.extend(common);
    slice_args.extend(["--coords", &coords, "--domains", "1", "--fusion", "spot-only"]);
    let o = run(&slice_args, None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let slice: f64 = stdout(&o).trim().parse().unwrap();

    let mut mspot_args = vec!["loss-oracle", "mspot"];
    mspot_args.extend(common);
    mspot_args.extend(["--coords", &coords, "--neighbors", "2"]);
    let o = run(&mspot_args, None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mspot: f64 = stdout(&o).trim().parse().unwrap();

    // spot-only fusion ignores domains: the plain per-spot loss
    let rows = [[1.0, 0.0, 2.0], [0.0, 3.0, 1.0], [2.0, 2.0, 0.0]];
    let g = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let s = [[0.5, 1.0], [2.0, 0.0], [1.0, -1.0]];
    let m: [&[usize]; 3] = [&[0, 2], &[1], &[0, 1, 2]];
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..3 {
        for &j in m[i] {
            let p = g[j][0] * s[i][0] + g[j][1] * s[i][1];
            sum += (rows[i][j] - p) * (rows[i][j] - p);
            n += 1.0;
        }
    }
    assert!((slice - sum / n).abs() < 1e-12, "{slice} vs {}", sum / n);
    assert!(mspot.is_finite() && mspot >= 0.0);
}

#[test]
fn loss_oracle_patch_runs_on_a_record() {
    let t = TempDir::new().unwrap();
    let cfg = synthetic_config(t.path(), "lp", &[(24, 24)], "");
    assert_eq!(code(&run(&["build", "--config", cfg.to_str().unwrap()], Some(1))), 0);
    let ge: String = (0..32).map(|g| format!("{},{}\n", g % 3, 1)).collect();
    let sf: String = (0..64).map(|i| format!("{},{}\n", i % 5, 0.5)).collect();
    fs::write(t.path().join("ge.csv"), ge).unwrap();
    fs::write(t.path().join("sf.csv"), sf).unwrap();
    let m = t.path().join("out-lp/manifest.json");
    let (ge, sf) = (t.path().join("ge.csv"), t.path().join("sf.csv"));
    let args = [
        "loss-oracle", "patch", "--manifest", m.to_str().unwrap(), "--record", "2", "--gene-emb",
        ge.to_str().unwrap(), "--site-features", sf.to_str().unwrap(), "--seed", "5",
    ];
    let a = run(&args, None);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let v: f64 = stdout(&a).trim().parse().unwrap();
    assert!(v.is_finite() && v > 0.0);
    assert_eq!(stdout(&run(&args, None)), stdout(&a));
    let mut region = args.to_vec();
    region.extend(["--region-s", "3"]);
    assert_eq!(code(&run(&region, None)), 0);
}
