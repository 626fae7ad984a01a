//! Replays the checked-in fuzz seeds through the same checks as the fuzz targets.

use std::fs;
use std::path::PathBuf;

use bcnn::checkpoint::Container;
use bcnn::config::{parse_grid, RunConfig};
use bcnn::preprocess::decode_image;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let b = fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn image_seeds() {
    let mut decoded = 0;
    for (p, b) in seeds("decode_image") {
        let r = decode_image(&b);
        if let Ok(img) = r {
            assert_eq!(img.shape()[0], 3, "{}", p.display());
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            decoded += 1;
        }
    }
    assert!(decoded >= 3);
}

#[test]
fn checkpoint_seeds() {
    for (p, b) in seeds("decode_checkpoint") {
        let c = Container::decode(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(c.encode(), b);
    }
}

#[test]
fn config_seeds() {
    for (p, b) in seeds("parse_config") {
        let cfg: RunConfig = std::str::from_utf8(&b).unwrap().parse().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(cfg.validate().is_ok());
    }
}

#[test]
fn grid_seeds() {
    for (_, b) in seeds("parse_grid") {
        let g = parse_grid(std::str::from_utf8(&b).unwrap()).unwrap();
        assert!(!g.is_empty() && g.iter().all(|v| v.is_finite()));
    }
}
