// Separate binary: it mutates process environment.
use std::fs;
use std::path::Path;

use rrnet::cli::{eval_threads, run_from, EXIT_OK, EXIT_USAGE, THREADS_ENV};

fn eval(pred: &Path, gt: &Path, out: &Path) -> i32 {
    let args: [std::ffi::OsString; 6] = [
        "rrnet".into(),
        "eval".into(),
        pred.as_os_str().to_owned(),
        gt.as_os_str().to_owned(),
        out.join("r.json").into_os_string(),
        out.join("pr.csv").into_os_string(),
    ];
    run_from(args, &mut Vec::new(), &mut Vec::new())
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = ["rrnet", "gen-data", "--n", "6", "--size", "32", "--out", d.to_str().unwrap()];
    assert_eq!(run_from(gen, &mut Vec::new(), &mut Vec::new()), EXIT_OK);
    let gt = d.join("masks");
    let pred = d.join("pred");
    fs::create_dir(&pred).unwrap();
    for e in fs::read_dir(&gt).unwrap() {
        let path = e.unwrap().path();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        for (i, b) in bytes[n - 1024..].iter_mut().enumerate() {
            *b = b.wrapping_add((i * 31 % 200) as u8);
        }
        fs::write(pred.join(path.file_name().unwrap()), bytes).unwrap();
    }
    let mut reports = Vec::new();
    for v in ["1", "3", "0"] {
        std::env::set_var(THREADS_ENV, v);
        assert_eq!(eval_threads().unwrap(), v.parse::<usize>().unwrap());
        assert_eq!(eval(&pred, &gt, d), EXIT_OK);
        reports.push((fs::read(d.join("r.json")).unwrap(), fs::read(d.join("pr.csv")).unwrap()));
    }
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
    std::env::set_var(THREADS_ENV, "many");
    assert!(eval_threads().is_err());
    assert_eq!(eval(&pred, &gt, d), EXIT_USAGE);
    std::env::remove_var(THREADS_ENV);
    assert_eq!(eval_threads().unwrap(), 0);
}
