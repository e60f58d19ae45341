//! Drive the command-line front end in process: generate data, pretrain a
//! short backbone and run one protocol from a config file.
//!
//! `cargo run --release --example cli_pipeline -- [work_dir]`

use std::path::PathBuf;

use actiondiff::cli::parse_and_dispatch;

fn run(args: &[&str]) -> Result<(), Box<dyn std::error::Error>> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = parse_and_dispatch(std::iter::once("actiondiff").chain(args.iter().copied()), &mut out, &mut err);
    print!("{}", String::from_utf8_lossy(&out));
    if code != 0 {
        return Err(format!("{args:?} exited {code}: {}", String::from_utf8_lossy(&err)).into());
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-cli".into()));
    std::fs::create_dir_all(&dir)?;
    let config = dir.join("config.json");
    let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
    std::fs::write(
        &config,
        serde_json::to_string_pretty(&serde_json::json!({
            "seed": 1,
            "cache": d("cache"),
            "corpus": d("data"),
            "pretrain": {"steps": 100},
            "protocol": {"kind": "cross_view", "train_per_domain": 20, "test_per_domain": 10},
            "head": {"model_dim": 64, "depth": 2, "heads": 4},
        }))?,
    )?;
    let config = config.to_string_lossy().into_owned();
    run(&["--config", &config, "--out", &d("gen"), "gen-data"])?;
    run(&["--config", &config, "--out", &d("pretrain"), "pretrain"])?;
    run(&["--config", &config, "--out", &d("protocol"), "protocol", "--backbone", &d("pretrain/backbone.ck")])?;
    println!("report at {}", d("protocol/report.json"));
    Ok(())
}
