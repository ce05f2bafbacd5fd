use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mast::config::RunConfig;
use mast::eval::REPORT_CSV_HEADER;
use mast::policy::Variant;
use mast::replay::{GOAL_RGB, START_RGB};
use mast::sim::{load_world, Cell, World};
use tempfile::TempDir;

const SMALL: &str = "\
# tiny single-room run
run.seed=3
world.width=9
world.height=9
world.rooms=1
world.furniture=0
world.train_pool=4
world.eval_pool=2
sensor.rays=36
sensor.height=36
policy.hidden=16
policy.action_embedding=4
map.r=2
map.dim=8
map.heads=2
map.layers=1
ppo.rollout=16
ppo.envs=2
ppo.minibatches=2
ppo.steps=64
ppo.eval_episodes=2
ppo.checkpoint_every=1
";

fn mast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mast")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file in `dir` by name, with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("small.cfg");
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

/// Independent flood fill over free cells.
fn bfs_connected(w: &World) -> bool {
    let free: Vec<(usize, usize)> = (0..w.height())
        .flat_map(|y| (0..w.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| w.cell(x, y) == Cell::Free)
        .collect();
    let Some(&start) = free.first() else { return true };
    let mut seen = vec![false; w.width() * w.height()];
    let mut queue = VecDeque::from([start]);
    seen[start.1 * w.width() + start.0] = true;
    let mut count = 0;
    while let Some((x, y)) = queue.pop_front() {
        count += 1;
        let nbrs = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
        for (nx, ny) in nbrs {
            if nx < w.width() && ny < w.height() && w.cell(nx, ny) == Cell::Free && !seen[ny * w.width() + nx] {
                seen[ny * w.width() + nx] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    count == free.len()
}

#[test]
fn make_worlds_splits_reproduces_and_connects() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let o = mast(&["make-worlds", "--out", s(dir), "--seed", seed, "--count", "10"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines[0], "file,split");
    assert_eq!(lines.iter().filter(|l| l.ends_with(",train")).count(), 8);
    assert_eq!(lines.iter().filter(|l| l.ends_with(",val")).count(), 2);
    let (sa, sb, sc) = (snapshot(&a), snapshot(&b), snapshot(&c));
    assert_eq!(sa.len(), 11);
    assert_eq!(sa, sb);
    assert_ne!(sa, sc);
    for (name, bytes) in &sa {
        if name.ends_with(".semworld") {
            let w = load_world(std::str::from_utf8(bytes).unwrap()).unwrap();
            assert!(bfs_connected(&w), "{name} is disconnected");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("r");
    let o = mast(&["train", "--variant", "FOO", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    for v in Variant::ALL {
        assert!(stderr(&o).contains(v.name()), "{}", stderr(&o));
    }
    assert_eq!(code(&mast(&["train", "--out", s(&out), "--set", "ppo.nope=1"])), 1);
    assert_eq!(code(&mast(&["train", "--out", s(&out), "--set", "ppo.envs=3"])), 1);
    assert_eq!(code(&mast(&["train"])), 1);
    assert_eq!(code(&mast(&["frobnicate"])), 1);
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "ppo.clip=0.2\nnot a line\n").unwrap();
    let o = mast(&["train", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    assert_eq!(code(&mast(&["--help"])), 0);
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let o = mast(&["train", "--config", s(&cfg), "--variant", "RGBD", "--steps", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<String> = snapshot(&out).into_keys().collect();
    assert_eq!(files, ["ckpt_0.mast", "config.txt", "metrics.csv"]);
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 1);
}

#[test]
fn echoed_config_round_trips() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ppo.clip=0.15\n");
    let out = tmp.path().join("run");
    let o = mast(&[
        "train", "--config", s(&cfg), "--variant", "RGBD+OCC+ATT", "--seed", "11", "--steps", "0", "--set",
        "map.pooling=max", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut expected = RunConfig::parse(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    expected.set("map.pooling", "max").unwrap();
    expected.variant = Variant::RgbdOccAtt;
    expected.seed = 11;
    expected.train.total_steps = 0;
    let echoed = RunConfig::parse(&std::fs::read_to_string(out.join("config.txt")).unwrap()).unwrap();
    assert_eq!(echoed, expected);
    assert_eq!(echoed.to_text(), std::fs::read_to_string(out.join("config.txt")).unwrap());
}

/// make-worlds, train on its train split, then eval and replay twice.
#[test]
fn full_pipeline_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let worlds = tmp.path().join("worlds");
    let o = mast(&["make-worlds", "--out", s(&worlds), "--seed", "2", "--count", "6", "--set", "world.width=13",
        "--set", "world.height=13"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = write_config(
        tmp.path(),
        &format!("world.width=13\nworld.height=13\nworld.rooms=3\nworld.furniture=0.08\nworld.dir={}\n", s(&worlds)),
    );
    let runs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("run{i}"))).collect();
    for out in &runs {
        let o = mast(&["train", "--config", s(&cfg), "--variant", "MaAST", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (r0, r1) = (snapshot(&runs[0]), snapshot(&runs[1]));
    assert_eq!(r0, r1);
    assert!(r0.contains_key("ckpt_64.mast"));
    let metrics = String::from_utf8(r0["metrics.csv"].clone()).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = runs[0].join("ckpt_64.mast");
    let mut reports = Vec::new();
    for i in 0..2 {
        let rep = tmp.path().join(format!("rep{i}.csv"));
        let o = mast(&["eval", "--checkpoint", s(&ckpt), "--worlds", s(&worlds), "--episodes", "6", "--seed", "4",
            "--report", s(&rep)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let csv = std::fs::read_to_string(&rep).unwrap();
        let table = std::fs::read_to_string(rep.with_extension("txt")).unwrap();
        assert_eq!(String::from_utf8_lossy(&o.stdout), table);
        reports.push((csv, table));
    }
    assert_eq!(reports[0], reports[1]);
    let (csv, table) = &reports[0];
    assert_eq!(csv.lines().next().unwrap(), REPORT_CSV_HEADER);
    assert!(csv.lines().nth(1).unwrap().starts_with("MaAST,Semantic,6,"));
    let head: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(head, ["Method", "Map", "SPL(%)", "Succ(%)"]);

    let world = worlds.join("world_0005.semworld");
    let exports: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("ex{i}"))).collect();
    for ex in &exports {
        let o = mast(&["replay", "--checkpoint", s(&ckpt), "--world", s(&world), "--episode-seed", "9", "--export",
            s(ex)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (e0, e1) = (snapshot(&exports[0]), snapshot(&exports[1]));
    assert_eq!(e0, e1);
    // 1 trajectory + 1 egomap + layers · heads = 1 · 2.
    assert_eq!(e0.len(), 4);
    assert!(e0.contains_key("attention_l0_h1.ppm"));
}

/// Parse a binary PPM into (width, height, rgb bytes).
fn read_ppm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap().to_string());
    }
    assert_eq!(fields[0], "P6");
    assert_eq!(fields[3], "255");
    let (w, h): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    let data = bytes[pos + 1..].to_vec();
    assert_eq!(data.len(), w * h * 3);
    (w, h, data)
}

#[test]
fn replay_at_default_map_settings_exports_eight_attention_maps() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let small = "sensor.rays=36\nsensor.height=36\npolicy.hidden=16\npolicy.action_embedding=4\nmap.r=2\nmap.dim=8\n";
    let cfg = tmp.path().join("c.cfg");
    std::fs::write(&cfg, small).unwrap();
    let o = mast(&["train", "--config", s(&cfg), "--steps", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let worlds = tmp.path().join("w");
    assert_eq!(code(&mast(&["make-worlds", "--out", s(&worlds), "--count", "1"])), 0);
    let ex = tmp.path().join("ex");
    let o = mast(&["replay", "--checkpoint", s(&out.join("ckpt_0.mast")), "--world",
        s(&worlds.join("world_0000.semworld")), "--episode-seed", "1", "--export", s(&ex)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files = snapshot(&ex);
    let defaults = RunConfig::default();
    assert_eq!(files.len(), 2 + defaults.map_layers * defaults.map_heads);
    assert_eq!(files.len(), 10);

    // Start and goal markers sit at cell centres in the legend colours.
    let (w, _, rgb) = read_ppm(&files["trajectory.ppm"]);
    let px = |x: usize, y: usize| [rgb[(y * w + x) * 3], rgb[(y * w + x) * 3 + 1], rgb[(y * w + x) * 3 + 2]];
    let count = |c: [u8; 3]| (0..rgb.len() / 3).filter(|i| rgb[i * 3..i * 3 + 3] == c).count();
    assert!(count(START_RGB) > 0);
    assert!(count(GOAL_RGB) > 0);
    let cell = mast::replay::CELL_PX;
    let centres: Vec<[u8; 3]> = (0..w / cell)
        .flat_map(|cy| (0..w / cell).map(move |cx| (cx, cy)))
        .map(|(cx, cy)| px(cx * cell + cell / 2, cy * cell + cell / 2))
        .collect();
    assert!(centres.contains(&START_RGB));
    assert!(centres.contains(&GOAL_RGB));
}

#[test]
fn eval_refuses_training_worlds() {
    let tmp = TempDir::new().unwrap();
    let worlds = tmp.path().join("worlds");
    assert_eq!(code(&mast(&["make-worlds", "--out", s(&worlds), "--seed", "1", "--count", "5"])), 0);
    let cfg = tmp.path().join("c.cfg");
    std::fs::write(
        &cfg,
        format!(
            "world.dir={}\nsensor.rays=36\nsensor.height=36\npolicy.hidden=16\npolicy.action_embedding=4\nmap.r=1\n\
             map.dim=8\nmap.heads=2\nmap.layers=1\n",
            s(&worlds)
        ),
    )
    .unwrap();
    let out = tmp.path().join("run");
    assert_eq!(code(&mast(&["train", "--config", s(&cfg), "--steps", "0", "--out", s(&out)])), 0);
    let ckpt = out.join("ckpt_0.mast");
    let eval = |rep: &str, extra: &[&str]| {
        let rep = tmp.path().join(rep);
        let mut args = vec!["eval", "--checkpoint", s(&ckpt), "--worlds", s(&worlds), "--episodes", "2", "--report"];
        args.push(s(&rep));
        args.extend_from_slice(extra);
        mast(&args)
    };
    assert_eq!(code(&eval("ok.csv", &[])), 0);

    // A val entry that names a training file.
    let manifest = worlds.join("manifest.csv");
    let original = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, format!("{original}world_0000.semworld,val\n")).unwrap();
    let o = eval("named.csv", &["--allow-identical-layouts"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("split violation"), "{}", stderr(&o));

    // A renamed copy of a training world.
    std::fs::copy(worlds.join("world_0001.semworld"), worlds.join("copy.semworld")).unwrap();
    std::fs::write(&manifest, format!("{original}copy.semworld,val\n")).unwrap();
    assert_eq!(code(&eval("copy.csv", &[])), 2);
    assert_eq!(code(&eval("copy.csv", &["--allow-identical-layouts"])), 0);

    assert_eq!(code(&eval("missing.csv", &["--checkpoint-typo"])), 1);
    let o = mast(&["eval", "--checkpoint", s(&tmp.path().join("nope.mast")), "--worlds", s(&worlds), "--report",
        s(&tmp.path().join("x.csv"))]);
    assert_eq!(code(&o), 2);
}
