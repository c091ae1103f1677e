mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use refine3d::synth::*;
use refine3d::{Tensor, VoxelGrid};

fn random_grid(d: usize, fill: f64, seed: u64) -> VoxelGrid {
    let mut r = rng(seed);
    VoxelGrid::new(d, (0..d * d * d).map(|_| f32::from(u8::from(r.gen_bool(fill)))).collect()).unwrap()
}

#[test]
fn sphere_volume_close_to_analytic() {
    for (d, r) in [(16usize, 4.0f64), (16, 6.5), (32, 6.0), (32, 11.0)] {
        let c = d as f64 / 2.0;
        let spec = ShapeSpec { category: Category::Sphere, solid: Solid::Sphere { center: [c; 3], radius: r }, seed: 0 };
        let g = gen_shape(&spec, d).unwrap();
        let ratio = g.occupied() as f64 / (4.0 / 3.0 * std::f64::consts::PI * r.powi(3));
        assert!((0.85..=1.15).contains(&ratio), "d={d} r={r} ratio={ratio}");
    }
}

#[test]
fn generation_is_deterministic() {
    for c in Category::ALL {
        assert_eq!(generate(c, 41, 32).unwrap(), generate(c, 41, 32).unwrap());
    }
}

/// Pixel-by-pixel projection oracle: a pixel is covered iff its ray meets
/// the box of some occupied voxel.
fn projection_oracle(g: &VoxelGrid, cam: &Camera, s: usize) -> Vec<bool> {
    let d = g.dim();
    let mut cells = Vec::new();
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                if g.get(x, y, z) > 0.5 {
                    cells.push([x as f64, y as f64, z as f64]);
                }
            }
        }
    }
    let mut mask = Vec::with_capacity(s * s);
    for v in 0..s {
        for u in 0..s {
            let (o, dir) = cam.ray(d, s, u, v);
            mask.push(cells.iter().any(|c| slab(o, dir, *c, c.map(|x| x + 1.0)).is_some()));
        }
    }
    mask
}

#[test]
fn silhouette_matches_projection_oracle() {
    for seed in 0..12u64 {
        let g = random_grid(6, 0.15, seed);
        if g.occupied() == 0 {
            continue;
        }
        let cam = Camera::for_view(seed, 3);
        let s = 24;
        let img = render(&g, &cam, s).unwrap();
        assert_eq!(silhouette(&img), projection_oracle(&g, &cam, s), "seed {seed}");
    }
    for c in Category::ALL {
        let (_, g) = generate(c, 5, 16).unwrap();
        let cam = Camera::for_view(5, 1);
        let img = render(&g, &cam, 32).unwrap();
        assert_eq!(silhouette(&img), projection_oracle(&g, &cam, 32), "{c}");
    }
}

#[test]
fn sphere_silhouette_is_a_disc() {
    let (d, r, s) = (32usize, 9.0f64, 64usize);
    let c = d as f64 / 2.0;
    let spec = ShapeSpec { category: Category::Sphere, solid: Solid::Sphere { center: [c; 3], radius: r }, seed: 0 };
    let g = gen_shape(&spec, d).unwrap();
    for view in 0..8 {
        let cam = Camera::for_view(77, view);
        let img = render(&g, &cam, s).unwrap();
        let pixels = silhouette(&img).iter().filter(|&&b| b).count() as f64;
        let pixel_side = 2.0 * cam.scale * d as f64 / s as f64;
        let ratio = pixels * pixel_side * pixel_side / (std::f64::consts::PI * r * r);
        assert!((0.85..=1.15).contains(&ratio), "view {view}: {ratio}");
    }
}

#[test]
fn renders_are_deterministic_and_bounded() {
    let (_, g) = generate(Category::Union2, 3, 16).unwrap();
    let cam = Camera::for_view(3, 0);
    let a = render(&g, &cam, 32).unwrap();
    assert!(a.bit_eq(&render(&g, &cam, 32).unwrap()));
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(silhouette(&a).iter().any(|&b| b));
}

#[test]
fn binvox_round_trips_random_grids() {
    for i in 0..50u64 {
        let d = [2usize, 5, 8, 16, 33, 64][i as usize % 6];
        let g = random_grid(d, [0.02, 0.5, 0.97][i as usize % 3], i);
        assert_eq!(decode_binvox(&encode_binvox(&g)).unwrap(), g);
    }
}

#[test]
fn empty_grid_encodes_to_zero_runs() {
    let bytes = encode_binvox(&VoxelGrid::zeros(16));
    let header = b"#binvox 1\ndim 16 16 16\ntranslate 0 0 0\nscale 1\ndata\n";
    assert_eq!(&bytes[..header.len()], header);
    let runs = &bytes[header.len()..];
    assert_eq!(runs.len() % 2, 0);
    let mut total = 0;
    for pair in runs.chunks(2) {
        assert_eq!(pair[0], 0);
        assert!(pair[1] >= 1);
        total += pair[1] as usize;
    }
    assert_eq!(total, 4096);
}

#[test]
fn truncated_binvox_is_a_format_error() {
    let bytes = encode_binvox(&random_grid(8, 0.4, 1));
    for cut in [0, 5, 30, bytes.len() - 1, bytes.len() - 3] {
        assert!(matches!(decode_binvox(&bytes[..cut]), Err(refine3d::Error::Format { .. })), "cut {cut}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn binvox_identity(d in 1usize..12, fill in 0.0f64..1.0, seed in any::<u64>()) {
        let g = random_grid(d, fill, seed);
        prop_assert_eq!(decode_binvox(&encode_binvox(&g)).unwrap(), g);
    }
}

#[test]
fn png_round_trip_within_quantization() {
    for (s, seed) in [(32usize, 1u64), (127, 2), (5, 3)] {
        let mut r = rng(seed);
        let img = Tensor::from_fn([3, s, s], |_| r.gen::<f32>());
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back) <= 1.0 / 255.0 / 2.0 + 1e-6);
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("white.png");
    write_png(&Tensor::full([3, 32, 32], 1.0), &p).unwrap();
    assert!(read_png(&p).unwrap().data().iter().all(|&v| v == 1.0));
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_config() -> DatasetConfig {
    DatasetConfig { num_samples: 8, views: 4, dim: 16, image_size: 32, seed: 7 }
}

#[test]
fn dataset_generation_is_byte_identical_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let manifest = gen_dataset(&small_config(), &a).unwrap();
    gen_dataset(&small_config(), &b).unwrap();
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta, tb);
    let mut listed = manifest.files();
    listed.sort();
    assert_eq!(listed, ta.keys().cloned().collect::<Vec<_>>());
    assert_eq!(manifest.samples.len(), 8);
    assert!(gen_dataset(&small_config(), &a).is_err(), "non-empty output must be refused");
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 2, "{leftovers:?}");
}

#[test]
fn loaded_dataset_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    gen_dataset(&small_config(), &root).unwrap();
    let loaded = load_dataset(&root).unwrap();
    let (_, mem) = synthesize(&small_config()).unwrap();
    for (l, m) in loaded.samples.iter().zip(&mem) {
        assert_eq!((l.category, &l.id, l.split, l.seed), (m.category, &m.id, m.split, m.seed));
        assert_eq!(l.gt, m.gt);
        for (a, b) in l.views.iter().zip(&m.views) {
            assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-6);
        }
    }
    let pool = loaded.split(Split::Train).len() + loaded.split(Split::Val).len();
    assert_eq!((pool, loaded.split(Split::Test).len()), (6, 2));
}

#[test]
fn dataset_is_independent_of_thread_count() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| synthesize(&small_config()).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn ten_samples_split_eight_two() {
    let s = assign_splits(10, 99);
    assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 2);
}
