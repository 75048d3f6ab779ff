use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const SMALL: &str = r#"
[experiment]
parallel = false
ratios = ["1:0", "1:1"]

[dataset]
class_train_size = 16

[dataset.synthetic]
per_subgroup = 24
width = 32
height = 32
attribute_count = 1
glyph_size = 8
marker_size = 8

[extractor]
channels = [4, 6]
pools = [true, false]

[pretrain]
samples = 64
epochs = 1

[training]
epochs = 2
hidden = 4

[gradcam]
budget_per_subgroup = 4

[tcav]
runs = 2
random_runs = 2
examples_per_concept = 8
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bias-audit"));
    c.env("RUST_LOG", "info");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, format!("{SMALL}\n{extra}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_requires_seed_out_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "");
    let o = run(&["run", "--config", s(&config), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("--seed"));
    let o = run(&["run", "--seed", "1", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_configs_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let config = write_config(tmp.path(), "[typo]\nx = 1\n");
    let o = run(&["run", "--config", s(&config), "--seed", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    let config = write_config(tmp.path(), "");
    let o = run(&["run", "--config", s(&config), "--seed", "1", "--out", s(&out), "--set", "gradcam.tau=2.0"]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    let o = run(&["run", "--config", s(&tmp.path().join("missing.toml")), "--seed", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(!out.exists());
}

#[test]
fn run_report_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let config = write_config(tmp.path(), "");
    let o = run(&["run", "--config", s(&config), "--seed", "4", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("completed: 1:0, 1:1"));
    for name in ["accuracy.md", "counts.md", "metrics.md", "tcav.md"] {
        assert!(out.join("reports").join(name).is_file(), "{name}");
    }

    let o = run(&["report", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let printed = String::from_utf8_lossy(&o.stdout);
    assert!(printed.contains("| 1:0 |") && printed.contains("| 1:1 |"), "{printed}");
    assert!(printed.contains("M4"));

    // The same flags resume cleanly; a changed key is refused with 2.
    let o = run(&["resume", "--out", s(&out), "--config", s(&config), "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let o = run(&["resume", "--out", s(&out), "--config", s(&config), "--seed", "5"]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("experiment.seed"));
    let o = run(&["resume", "--out", s(&out), "--config", s(&config), "--seed", "4", "--set", "gradcam.tau=0.6"]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("gradcam.tau"));
    let o = run(&["run", "--config", s(&config), "--seed", "4", "--out", s(&out)]);
    assert_eq!(code(&o), 2, "re-running into an existing store: {}", text(&o));
}

#[test]
fn stage_failures_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let config = write_config(tmp.path(), "");
    let o = run(&[
        "run", "--config", s(&config), "--seed", "1", "--out", s(&out),
        "--set", "dataset.class_train_size=30", "--tcav", "false",
    ]);
    assert_eq!(code(&o), 3, "{}", text(&o));
    assert!(text(&o).contains("failed: ratio 1:0 at stage split"), "{}", text(&o));
    assert!(text(&o).contains("completed: 1:1"));
}

#[test]
fn generated_dataset_imports_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let config = write_config(tmp.path(), "");
    let o = run(&["dataset", "gen", "--out", s(&data), "--config", s(&config), "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let generated = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(generated.contains("samples: 96"), "{generated}");
    let o = run(&["dataset", "import", "--root", s(&data)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let imported = String::from_utf8_lossy(&o.stdout).to_string();
    assert_eq!(imported, generated.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());

    // Generating twice into one directory is refused.
    let o = run(&["dataset", "gen", "--out", s(&data), "--config", s(&config)]);
    assert_eq!(code(&o), 2);

    // A broken manifest names the offending sample and exits with 2.
    let manifest = data.join("manifest.json");
    let json = std::fs::read_to_string(&manifest).unwrap();
    let first_image = json.find("images/").unwrap();
    let broken = format!("{}images/missing{}", &json[..first_image], &json[first_image + "images/".len()..]);
    std::fs::write(&manifest, broken).unwrap();
    let o = run(&["dataset", "import", "--root", s(&data)]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("missing image file"));
}

#[test]
fn annotate_serve_exposes_waiting_sessions() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let config = write_config(tmp.path(), "");
    let o = run(&[
        "run", "--config", s(&config), "--seed", "3", "--out", s(&out),
        "--ratios", "1:1", "--judging", "human", "--annotation", "true", "--tcav", "false",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("pending: 1:1"));
    assert!(text(&o).contains("annotate serve --store"));

    let mut child = bin()
        .args(["annotate", "serve", "--store", s(&out), "--bind", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let addr = loop {
        let mut line = String::new();
        assert!(stderr.read_line(&mut line).unwrap() > 0, "server exited early");
        if let Some(i) = line.find("http://") {
            break line[i + "http://".len()..].trim().to_string();
        }
    };
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /sessions HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"id\":\"ratio-1-1\""), "{response}");

    // Without any session there is nothing to serve.
    let o = run(&["annotate", "serve", "--session", s(&tmp.path().join("none"))]);
    assert_ne!(code(&o), 0);
}
