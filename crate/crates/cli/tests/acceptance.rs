//! Acceptance: repro recipes are byte-reproducible (criterion 11).

use std::path::Path;
use std::process::Command;

fn run_recipe(recipe: &str, outdir: &Path) {
    let res = Command::new(env!("CARGO_BIN_EXE_longtail"))
        .args([
            "repro",
            recipe,
            "--outdir",
            outdir.to_str().unwrap(),
            "--seeds",
            "1",
            "--base-seed",
            "0",
        ])
        .output()
        .expect("binary runs");
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}

fn assert_identical_dirs(a: &Path, b: &Path) {
    let mut names: Vec<String> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in &names {
        let bytes_a = std::fs::read(a.join(name)).unwrap();
        let bytes_b = std::fs::read(b.join(name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{name} differs between runs");
    }
}

#[test]
fn criterion_11_repro_recipes_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for recipe in ["alpha-sweep", "four-regimes"] {
        let a = dir.path().join(format!("{recipe}-a"));
        let b = dir.path().join(format!("{recipe}-b"));
        run_recipe(recipe, &a);
        run_recipe(recipe, &b);
        assert_identical_dirs(&a, &b);
    }
    println!("PASS [criterion 11] repro recipes byte-identical across runs (alpha-sweep, four-regimes)");
}
