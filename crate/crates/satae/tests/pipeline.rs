//! Cross-module integration stories: data generation through training,
//! persistence, and analysis, checking that the pieces agree with each other
//! rather than re-testing any one module.

use ndarray::Array2;

use satae::analysis::{
    contrast_ratio, energy_grid, saturation_fraction, tile_filters, GridBounds,
};
use satae::data::{extract_patches, gen_toy, Dataset, NormMode, ToyKind, ToyManifoldSpec};
use satae::model::{load_model, save_model, to_bytes};
use satae::netpbm::{read_pgm, write_pgm};
use satae::nonlin::{numeric_comp, Nonlinearity, SampledActivation, VariationWeights};
use satae::train::{train, Stage, TrainConfig};

fn arc(n: usize, noise: f64, seed: u64) -> Dataset {
    gen_toy(&ToyManifoldSpec { kind: ToyKind::Arc, n, noise_std: noise, seed })
        .unwrap()
        .normalize(NormMode::PerDim)
}

fn short_schedule() -> Vec<Stage> {
    (0..=6).map(|k| Stage { alpha: k as f64 * 0.05, epochs: 20 }).collect()
}

/// Toy-manifold story: generate, train, persist, reload, and map the energy
/// landscape, with every stage agreeing with the previous one.
#[test]
fn toy_training_story() {
    // Standardized arc widened 2x: a scale where annealing carves a visible
    // energy ravine along the manifold within a short schedule.
    let spec = ToyManifoldSpec { kind: ToyKind::Arc, n: 500, noise_std: 0.01, seed: 19 };
    let raw = gen_toy(&spec).unwrap();
    let std1 = raw.normalize(NormMode::PerDim);
    let scaled_std = std1.std() / 2.0;
    let data = raw.normalize_with(std1.mean(), &scaled_std).unwrap();

    let f = Nonlinearity::shrink(0.22);
    let mut cfg = TrainConfig::default_for(&f);
    cfg.alpha_schedule = short_schedule();
    let (p, log) = train(&f, &data, 10, &cfg).unwrap();

    // The log covers the whole schedule, stage by stage.
    assert_eq!(log.records.len(), 7 * 20);
    assert_eq!(log.records[0].alpha, 0.0);
    assert!((log.records.last().unwrap().alpha - 0.3).abs() < 1e-12);
    assert!(log.records.iter().all(|r| r.recon_mean.is_finite() && r.recon_mean >= 0.0));

    // Training is a pure function of (activation, data, width, config).
    let (p2, _) = train(&f, &data, 10, &cfg).unwrap();
    assert_eq!(to_bytes(&p, &f).unwrap(), to_bytes(&p2, &f).unwrap());

    // Persistence does not perturb the model.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.satae");
    save_model(&path, &p, &f).unwrap();
    let (loaded, loaded_f) = load_model(&path).unwrap();
    for x in data.samples().rows() {
        let a = p.recon_energy(&f, x).unwrap();
        let b = loaded.recon_energy(&loaded_f, x).unwrap();
        assert_eq!(a, b, "reloaded model disagrees with the original");
    }

    // The energy grid is the same function evaluated on a lattice.
    let grid = energy_grid(&p, &f, GridBounds::default(), 16).unwrap();
    for (i, j) in [(0, 0), (7, 3), (15, 15)] {
        let (x, y) = grid.node(i, j);
        let direct = p
            .recon_energy(&f, ndarray::arr1(&[x, y]).view())
            .unwrap();
        assert_eq!(grid.values()[[i, j]], direct);
    }
    let csv = {
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    };
    assert_eq!(csv.lines().count(), 1 + 16 * 16);
    let pgm = grid.to_pgm_bytes(false);
    let img = read_pgm(&pgm[..]).unwrap();
    assert_eq!((img.width, img.height), (16, 16));

    // After annealing, off-manifold points cost more than on-manifold ones,
    // and a visible share of units saturates on the data.
    let on = gen_toy(&ToyManifoldSpec { kind: ToyKind::Arc, n: 200, noise_std: 0.0, seed: 6 })
        .unwrap()
        .normalize_with(data.mean(), data.std())
        .unwrap();
    // Deterministic low-discrepancy scatter over the raw unit square, mapped
    // with the training statistics like any other evaluation set.
    let off_raw = Array2::from_shape_fn((200, 2), |(i, j)| {
        let a = [0.7548776662466927, 0.5698402909980532][j];
        ((i + 1) as f64 * a).fract() * 2.0 - 1.0
    });
    let off = Dataset::from_samples(off_raw, "off-grid")
        .unwrap()
        .normalize_with(data.mean(), data.std())
        .unwrap();
    let ratio = contrast_ratio(&p, &f, &on, &off).unwrap();
    assert!(ratio > 1.5, "median off/on energy ratio {ratio:.2} should exceed 1.5");
    let sat = saturation_fraction(&p, &f, &data).unwrap();
    assert!(sat > 0.0 && sat <= 1.0, "saturation fraction {sat} out of range");
}

/// Patch-model story: images to patches to a trained dictionary to a tiled
/// filter sheet that survives the netpbm round trip.
#[test]
fn patch_filter_story() {
    // 40 synthetic 12x12 "images" with oriented stripes.
    let images = Dataset::from_samples(
        Array2::from_shape_fn((40, 144), |(n, i)| {
            let (r, c) = (i / 12, i % 12);
            ((r as f64 * (n % 5) as f64 + c as f64 * (n % 3) as f64) * 0.4).sin() * 0.5 + 0.5
        }),
        "stripes",
    )
    .unwrap();
    let patches = extract_patches(&images, 12, 12, 6, 500, 11).unwrap();
    assert_eq!((patches.len(), patches.dim()), (500, 36));
    let data = patches.normalize(NormMode::Global);

    let f = Nonlinearity::shrink(0.1);
    let mut cfg = TrainConfig::default_for(&f);
    cfg.lr = 0.01;
    cfg.alpha_schedule = vec![Stage { alpha: 0.0, epochs: 3 }, Stage { alpha: 0.2, epochs: 3 }];
    let (p, _) = train(&f, &data, 16, &cfg).unwrap();

    let tiling = tile_filters(&p, 6, 6, 1).unwrap();
    assert_eq!((tiling.grid_rows(), tiling.grid_cols()), (4, 4));
    let mut sheet = Vec::new();
    write_pgm(&mut sheet, tiling.width(), tiling.height(), tiling.pixels()).unwrap();
    let img = read_pgm(&sheet[..]).unwrap();
    assert_eq!((img.width, img.height), (tiling.width(), tiling.height()));
    assert_eq!(img.pixels, tiling.pixels());
}

/// Tabulated-activation story: a numerically derived penalty table drives the
/// same training loop as a closed-form activation.
#[test]
fn tabulated_activation_story() {
    let exact = Nonlinearity::satlin(1.0);
    let sampled = SampledActivation::from_nonlinearity(&exact, -6.0, 6.0, 1e-2).unwrap();
    let tab = numeric_comp(&sampled, &VariationWeights::default()).unwrap();

    // The averaging smooths the interior of the exact tent but still vanishes
    // on the genuinely flat tails, so the recovered saturation set matches.
    for z in [-2.0, -1.0, 1.0, 4.5] {
        assert!(tab.eval_comp(z).unwrap() <= 1e-3, "tail penalty at {z} not flat");
    }
    let peak = tab.eval_comp(0.0).unwrap();
    assert!(peak > 0.5 && peak < 1.0, "smoothed peak {peak} out of range");
    let set = tab.saturation_set();
    assert!(set.contains(1.5) && set.contains(-1.5) && !set.contains(0.0));

    let data = arc(150, 0.01, 9);
    let mut cfg = TrainConfig::default_for(&tab);
    cfg.alpha_schedule = vec![Stage { alpha: 0.0, epochs: 5 }, Stage { alpha: 0.3, epochs: 5 }];
    let (p, log) = train(&tab, &data, 6, &cfg).unwrap();
    assert_eq!(log.records.len(), 10);
    assert!(log.records.iter().all(|r| r.recon_mean.is_finite()));
    let sat = saturation_fraction(&p, &tab, &data).unwrap();
    assert!((0.0..=1.0).contains(&sat), "saturation fraction {sat} out of range");
}
