use trajspec::rng;
use trajspec::sketch::{self, ProjectOutcome, SketchConfig};
use trajspec::store::{DeltaVector, StoreWriter};
use trajspec::Error;

fn delta(seed: u64, p: usize) -> DeltaVector {
    DeltaVector {
        from_step: 0,
        to_step: 1,
        values: (0..p).map(|i| rng::gaussian(seed, 0, i as u64)).collect(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn inner_products_concentrate() {
    let (p, d) = (10_000, 100);
    let x = delta(1, p);
    let y = delta(2, p);
    let scale = (dot(&x.values, &x.values) * dot(&y.values, &y.values)).sqrt();
    let exact = dot(&x.values, &y.values);
    let mut errors = Vec::new();
    for seed in 0..100 {
        let cfg = SketchConfig::new(d, 1000 + seed);
        let sx = sketch::project(&x, &cfg).unwrap();
        let sy = sketch::project(&y, &cfg).unwrap();
        errors.push((dot(&sx.values, &sy.values) - exact).abs() / scale);
    }
    let max = errors.iter().cloned().fold(0.0, f64::max);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    assert!(max <= 0.5, "max {max}");
    assert!(mean <= 0.15, "mean {mean}");
}

#[test]
fn norms_preserved_in_expectation() {
    let (p, d) = (10_000, 100);
    let x = delta(3, p);
    let norm2 = dot(&x.values, &x.values);
    let ratios: Vec<f64> = (0..200)
        .map(|seed| {
            let s = sketch::project(&x, &SketchConfig::new(d, seed)).unwrap();
            dot(&s.values, &s.values) / norm2
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((0.95..=1.05).contains(&mean), "{mean}");
}

#[test]
fn block_size_never_changes_the_sketch() {
    let x = delta(4, 70_000);
    let mut small = SketchConfig::new(20, 9);
    small.block_size = 1024;
    let mut large = small;
    large.block_size = 1 << 20;
    let a = sketch::project(&x, &small).unwrap();
    let b = sketch::project(&x, &large).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(a.config_fingerprint, b.config_fingerprint);
}

#[test]
fn sketching_is_linear() {
    let cfg = SketchConfig::new(30, 5);
    let x = delta(5, 3000);
    let y = delta(6, 3000);
    let (a, b) = (2.5, -0.75);
    let combo = DeltaVector {
        from_step: 0,
        to_step: 1,
        values: x.values.iter().zip(&y.values).map(|(u, v)| a * u + b * v).collect(),
    };
    let sx = sketch::project(&x, &cfg).unwrap();
    let sy = sketch::project(&y, &cfg).unwrap();
    let sc = sketch::project(&combo, &cfg).unwrap();
    let norm = dot(&sc.values, &sc.values).sqrt();
    for j in 0..30 {
        let want = a * sx.values[j] + b * sy.values[j];
        assert!((sc.values[j] - want).abs() <= 1e-10 * norm);
    }
}

fn store(dir: &std::path::Path, checkpoints: u64, p: usize) -> trajspec::store::Store {
    let mut w = StoreWriter::create(dir, &[("w".into(), p as u64)], Default::default()).unwrap();
    for t in 0..checkpoints {
        let v: Vec<f32> = (0..p)
            .map(|i| rng::gaussian(11, t, i as u64) as f32 * t as f32)
            .collect();
        w.write_step(t * 200, &v).unwrap();
    }
    w.finish().unwrap()
}

#[test]
fn store_projection_is_cached_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let s = store(&tmp.path().join("store"), 51, 500);
    let out = tmp.path().join("sketches");
    let cfg = SketchConfig::new(100, 3);
    let first = sketch::project_store(&s, &cfg, &out, false).unwrap();
    assert!(matches!(first, ProjectOutcome::Written(_)));
    assert_eq!(first.sketches().len(), 50);
    let bytes = std::fs::read(out.join("sketch_10000.bin")).unwrap();

    let again = sketch::project_store(&s, &cfg, &out, false).unwrap();
    assert!(matches!(again, ProjectOutcome::Reused(_)));
    assert_eq!(again.sketches(), first.sketches());

    let other = SketchConfig::new(100, 4);
    assert!(matches!(
        sketch::project_store(&s, &other, &out, false),
        Err(Error::FingerprintMismatch { .. })
    ));
    let replaced = sketch::project_store(&s, &other, &out, true).unwrap();
    assert!(matches!(replaced, ProjectOutcome::Written(_)));
    assert_ne!(std::fs::read(out.join("sketch_10000.bin")).unwrap(), bytes);

    // A fresh directory reproduces the original bytes.
    let out2 = tmp.path().join("sketches2");
    sketch::project_store(&s, &cfg, &out2, false).unwrap();
    assert_eq!(std::fs::read(out2.join("sketch_10000.bin")).unwrap(), bytes);

    let (index, loaded) = sketch::load_sketches(&out2).unwrap();
    assert_eq!(index.d, 100);
    assert_eq!(loaded, first.sketches());
    let d = sketch::sketch_dot_matrix(&loaded).unwrap();
    assert_eq!(d.n, 50);
    assert_eq!(d.source.tag(), "sketched");
}

#[test]
fn store_projection_matches_single_projection() {
    let tmp = tempfile::tempdir().unwrap();
    let s = store(&tmp.path().join("store"), 4, 90_000);
    let cfg = SketchConfig::new(12, 8);
    let out = sketch::project_store(&s, &cfg, &tmp.path().join("sk"), false).unwrap();
    let deltas = s.load_deltas().unwrap();
    for (d, sk) in deltas.iter().zip(out.sketches()) {
        assert_eq!(sketch::project(d, &cfg).unwrap().values, sk.values);
    }
}
