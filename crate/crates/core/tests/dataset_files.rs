use std::path::PathBuf;

use mesh_unet::datagen::{generate_dataset, split_dataset, Dataset, DatasetConfig};
use mesh_unet::mesh::{load_mesh, Mesh2D};

fn fixture(name: &str) -> Mesh2D {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name);
    load_mesh(path).unwrap()
}

fn small_config(n: usize) -> DatasetConfig {
    DatasetConfig {
        n_samples: n,
        ..DatasetConfig::default()
    }
}

#[test]
fn generation_is_deterministic_across_thread_counts() {
    let fine = fixture("chest_recon.mesh.json");
    let recon = fixture("chest_small.mesh.json");
    let cfg = small_config(4);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| generate_dataset(&fine, &recon, &cfg, 11).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a, b);
    assert_eq!(a.samples.len(), 4);
    for s in &a.samples {
        assert_eq!(s.iterates.len(), 4);
        assert_eq!(s.sigma_true.len(), recon.n_elements());
        assert_eq!(s.voltages.len(), 256);
        assert!(s.iterates.iter().flatten().all(|v| (1e-3..=10.0).contains(v)));
    }
    assert_ne!(a, run_with_seed(&fine, &recon, &cfg, 12));
}

fn run_with_seed(fine: &Mesh2D, recon: &Mesh2D, cfg: &DatasetConfig, seed: u64) -> Dataset {
    generate_dataset(fine, recon, cfg, seed).unwrap()
}

#[test]
fn dataset_files_round_trip_exactly() {
    let fine = fixture("chest_recon.mesh.json");
    let recon = fixture("chest_small.mesh.json");
    let ds = generate_dataset(&fine, &recon, &small_config(2), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.eitds");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.header.recon_mesh, recon);

    let mut bytes = ds.to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(Dataset::from_bytes(&bytes).is_err());
    let mut bad = ds.to_bytes();
    bad[0] = b'X';
    assert!(Dataset::from_bytes(&bad).is_err());
}

#[test]
fn identical_meshes_are_rejected() {
    let mesh = fixture("chest_small.mesh.json");
    assert!(generate_dataset(&mesh, &mesh, &small_config(1), 0).is_err());
}

#[test]
fn split_sizes_follow_fractions() {
    let s = split_dataset(300, &[2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], 9).unwrap();
    let sizes: Vec<usize> = s.parts.iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![200, 50, 50]);
}

#[test]
fn stored_voltages_reproduce_stored_iterates() {
    let fine = fixture("chest_recon.mesh.json");
    let recon = fixture("chest_small.mesh.json");
    let ds = generate_dataset(&fine, &recon, &small_config(2), 21).unwrap();
    let ds = Dataset::from_bytes(&ds.to_bytes()).unwrap();
    for i in 0..2 {
        let trace = ds.rerun_reconstruction(i).unwrap();
        assert_eq!(trace.network_inputs(4), ds.samples[i].iterates);
        assert_eq!(trace.misfits, ds.samples[i].meta.misfits);
    }
}

#[test]
fn rasterized_area_matches_ellipse_area() {
    use mesh_unet::datagen::{rasterize_to_mesh, Ellipse, PhantomSpec};
    let mesh = fixture("disk_l3.mesh.json");
    let e = Ellipse {
        center: [0.02, -0.03],
        semi_major: 0.05,
        semi_minor: 0.03,
        angle: 0.4,
        conductivity: 1.0,
    };
    let spec = PhantomSpec {
        background: 0.0,
        targets: vec![e],
    };
    let sigma = rasterize_to_mesh(&spec, &mesh);
    let areas = mesh.areas();
    let covered: f64 = sigma.iter().zip(&areas).map(|(s, a)| s * a).sum();
    assert!((covered / e.area() - 1.0).abs() < 0.02, "{covered} vs {}", e.area());
}
