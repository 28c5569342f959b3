//! One PASS/FAIL line per acceptance criterion. Criterion 9 trains the full
//! curriculum into a cached run directory (`PFS_ACCEPTANCE_RUN`, default
//! `runs/acceptance` under the workspace root) and reuses whatever is there.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use pfs_core::config::{RunConfig, StageConfig};
use pfs_core::corruption::{
    apply_camera, apply_lidar, corrupt_inputs, lidar, sample_corruption_mix, CorruptionKind, CorruptionSpec,
    SeverityTable,
};
use pfs_core::curriculum::pipeline::{bind_config, ensure_dataset, ensure_host, ensure_stage};
use pfs_core::curriculum::train::blocks_unchanged;
use pfs_core::curriculum::{evaluate_many, params_hash, run_stage, Condition, EvalReport, ModelVariant, RunLayout};
use pfs_core::dataset::{encode_container, generate_split, run_pool, Split};
use pfs_core::gradsuite::run_grad_suite;
use pfs_core::host::init_host;
use pfs_core::scene::{CameraImage, LidarPoint, PointCloud, SceneSample};
use pfs_core::seeding::rng_from;
use pfs_core::stabilizer::{analytic_counts, count_params, init_pfs, pfs_forward, ActiveBlocks};
use pfs_core::voxel::{density_grid, reliability_target};
use pfs_core::Result;
use pfs_tensor::{sigmoid, ParamStore, Tape, Tensor};
use rand::Rng;
use rayon::prelude::*;

type Outcome = Result<(bool, String)>;

fn main() -> ExitCode {
    let checks: [(u8, &str, fn() -> Outcome); 9] = [
        (1, "gate constants", c1_gate_constants),
        (2, "near-identity at init", c2_near_identity),
        (3, "gradient suite", c3_gradients),
        (4, "reliability-target oracle", c4_reliability_target),
        (5, "corruption exactness", c5_corruptions),
        (6, "curriculum mix", c6_mix),
        (7, "parameter accounting", c7_params),
        (8, "freeze / stage isolation", c8_freeze),
        (9, "end-to-end robustness", c9_end_to_end),
    ];
    let mut failed = 0;
    for (id, name, f) in checks {
        let t = Instant::now();
        let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        println!(
            "criterion {id} [{}] {name}: {detail} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn run_dir() -> PathBuf {
    std::env::var_os("PFS_ACCEPTANCE_RUN")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../runs/acceptance"))
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn c1_gate_constants() -> Outcome {
    let cases = [(-5.0, 0.0066929), (-4.0, 0.0179862), (4.0, 0.9820138)];
    let worst = cases.iter().map(|&(x, want)| (sigmoid::<f64>(x) - want).abs()).fold(0.0, f64::max);
    let f32_worst = cases.iter().map(|&(x, want)| (sigmoid::<f32>(x as f32) as f64 - want).abs()).fold(0.0, f64::max);
    Ok((worst <= 1e-6 && f32_worst <= 1e-6, format!("max |err| f64 {worst:.2e}, f32 {f32_worst:.2e}")))
}

fn c2_near_identity() -> Outcome {
    let cfg = RunConfig::toy();
    let (h, w) = (cfg.scene.extent.rows, cfg.scene.extent.cols);
    let pfs: ParamStore<f32> = init_pfs(&cfg.pfs, &mut rng_from(1))?;
    let mut rng = rng_from(2);
    let mut worst_slack = f64::INFINITY;
    for _ in 0..100 {
        let f = Tensor::<f32>::uniform(&[cfg.pfs.channels, h, w], -3.0, 3.0, &mut rng);
        let l = Tensor::<f32>::uniform(&[cfg.pfs.lidar_channels, h, w], -3.0, 3.0, &mut rng);
        let mut tape = Tape::new();
        let p = pfs.bind(&mut tape, |_| false);
        let (fv, lv) = (tape.constant(f.clone()), tape.constant(l));
        let out = pfs_forward(&mut tape, &p, fv, Some(lv), &cfg.pfs, ActiveBlocks::ALL)?.out;
        let y = tape.value(out);
        let diff = y.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max) as f64;
        let bound = 0.05 * f.max_abs() as f64 + 0.05;
        worst_slack = worst_slack.min(bound - diff);
    }
    let identity_ok = worst_slack >= 0.0;

    let layout = RunLayout::new(run_dir());
    bind_config(&cfg, &layout)?;
    let (train, val) = ensure_dataset(&cfg, &layout, workers())?;
    let host: ParamStore<f32> = ensure_host(&cfg, &layout, &train, &val, workers())?;
    let subset = &val[..val.len().min(100)];
    let variants = [ModelVariant::host_only(), ModelVariant::with_pfs("fresh", pfs, ActiveBlocks::ALL)];
    let r = evaluate_many(&cfg, &host, &variants, subset, &[Condition::CLEAN], cfg.global_seed, workers())?;
    let (a, b) = (r[0].scores[0].map, r[1].scores[0].map);
    let map_ok = (a - b).abs() <= 0.5;
    Ok((
        identity_ok && map_ok,
        format!(
            "min bound slack {worst_slack:.4} over 100 maps; clean map host {a:.2} vs host+fresh {b:.2} on {} samples",
            subset.len()
        ),
    ))
}

fn c3_gradients() -> Outcome {
    let report = run_grad_suite(2024, 6)?;
    let worst = report.layers.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    let cases = report.total_cases();
    Ok((
        report.passed() && cases >= 100,
        format!("{} checks, {cases} cases, worst rel err {worst:.2e} (tol {:.0e})", report.layers.len(), report.tolerance),
    ))
}

fn random_cloud<R: Rng>(rng: &mut R, n: usize, half: f32) -> PointCloud {
    let points = (0..n)
        .map(|_| LidarPoint {
            x: rng.random_range(-half..half),
            y: rng.random_range(-half..half),
            z: rng.random_range(-2.0..2.0),
            intensity: rng.random(),
            beam: rng.random_range(0..32),
        })
        .collect();
    PointCloud { points, beam_count: 32 }
}

/// Independent binning: half-open cells, points outside the grid dropped.
fn brute_counts(cloud: &PointCloud, x0: f32, y0: f32, cell: f32, rows: usize, cols: usize) -> Vec<u32> {
    let mut out = vec![0u32; rows * cols];
    for p in &cloud.points {
        let (fx, fy) = ((p.x - x0) / cell, (p.y - y0) / cell);
        if fx < 0.0 || fy < 0.0 {
            continue;
        }
        let (c, r) = (fx.floor() as usize, fy.floor() as usize);
        if c < cols && r < rows {
            out[r * cols + c] += 1;
        }
    }
    out
}

fn c4_reliability_target() -> Outcome {
    let ext = RunConfig::toy().scene.extent;
    let table = SeverityTable::builtin();
    let mut rng = rng_from(44);
    let (mut mismatches, mut empty_cells, mut zero_cells, mut one_cells, mut structure_bad) = (0, 0usize, 0usize, 0usize, 0);
    // Strictly inside the grid so the oracle's edge handling is irrelevant.
    let half = -ext.x_min - 0.01;
    for pair in 0..200u64 {
        let n = rng.random_range(500..4000);
        let clean = random_cloud(&mut rng, n, half);
        let sector = pair % 2 == 0;
        let spec = CorruptionSpec { kind: CorruptionKind::SectorDropout, level: 1 + (pair % 3) as u8, seed: rng.random() };
        let corrupted = if sector {
            apply_lidar(&clean, &spec, &table)?
        } else {
            let keep = rng.random_range(0.0..1.0f32);
            PointCloud { points: clean.points.iter().filter(|_| rng.random::<f32>() < keep).copied().collect(), beam_count: 32 }
        };
        let t = reliability_target(&density_grid(&clean, &ext), &density_grid(&corrupted, &ext))?;
        let d0 = brute_counts(&clean, ext.x_min, ext.y_min, ext.cell, ext.rows, ext.cols);
        let d1 = brute_counts(&corrupted, ext.x_min, ext.y_min, ext.cell, ext.rows, ext.cols);
        // Sector membership of every clean point, for the zero/one structure.
        let (center, theta) = if sector {
            let mut r = rng_from(spec.seed);
            (lidar::sector_center(&mut r), table.sector_dropout[spec.level as usize - 1].theta_deg.to_radians())
        } else {
            (0.0, 0.0)
        };
        let mut inside = vec![(0u32, 0u32); d0.len()];
        if sector {
            for p in &clean.points {
                let (c, r) = (((p.x - ext.x_min) / ext.cell).floor() as usize, ((p.y - ext.y_min) / ext.cell).floor() as usize);
                let e = &mut inside[r * ext.cols + c];
                if lidar::in_sector(p.azimuth(), center, theta) {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
        for i in 0..d0.len() {
            let want = if d0[i] == 0 { 1.0 } else { (d1[i] as f32 / d0[i] as f32).min(1.0) };
            if t.values[i].to_bits() != want.to_bits() {
                mismatches += 1;
            }
            if d0[i] == 0 {
                empty_cells += 1;
                if t.values[i] != 1.0 {
                    structure_bad += 1;
                }
            } else if sector {
                let (i_in, i_out) = inside[i];
                if i_out == 0 {
                    zero_cells += 1;
                    structure_bad += usize::from(t.values[i] != 0.0);
                } else if i_in == 0 {
                    one_cells += 1;
                    structure_bad += usize::from(t.values[i] != 1.0);
                }
            }
        }
    }
    Ok((
        mismatches == 0 && structure_bad == 0 && zero_cells > 0 && one_cells > 0,
        format!(
            "200 pairs: {mismatches} oracle mismatches, {empty_cells} empty clean cells, \
             {zero_cells} in-sector / {one_cells} out-of-sector cells, {structure_bad} structure violations"
        ),
    ))
}

fn c5_corruptions() -> Outcome {
    let table = SeverityTable::builtin();
    let mut notes = Vec::new();
    let mut ok = true;

    // Beam reduction on a cloud covering all 32 beams.
    let mut rng = rng_from(5);
    let full = random_cloud(&mut rng, 20_000, 40.0);
    let mut beams = Vec::new();
    for level in 1..=3u8 {
        let spec = CorruptionSpec { kind: CorruptionKind::BeamReduction, level, seed: 0 };
        beams.push(apply_lidar(&full, &spec, &table)?.beams_present().len());
    }
    ok &= full.beams_present().len() == 32 && beams == [16, 8, 4];
    notes.push(format!("beams {beams:?}"));

    // Range dropout beyond r_max, where the drop probability saturates.
    let mut worst_z = 0.0f64;
    for level in 1..=3u8 {
        let params = table.range_dropout[level as usize - 1];
        let n = 100_000;
        let r = params.r_max * 1.2;
        let points: Vec<LidarPoint> = (0..n)
            .map(|i| {
                let a = i as f32 * 0.001;
                LidarPoint { x: r * a.cos(), y: r * a.sin(), z: 0.0, intensity: 0.5, beam: 0 }
            })
            .collect();
        let cloud = PointCloud { points, beam_count: 32 };
        let spec = CorruptionSpec { kind: CorruptionKind::RangeDropout, level, seed: 900 + level as u64 };
        let kept = apply_lidar(&cloud, &spec, &table)?.len() as f64;
        let p = 1.0 - params.p_max as f64;
        let z = (kept - n as f64 * p).abs() / (n as f64 * p * (1.0 - p)).sqrt();
        worst_z = worst_z.max(z);
    }
    ok &= worst_z <= 3.0;
    notes.push(format!("range survival max |z| {worst_z:.2}"));

    // Occlusion: zeroed fraction of a uniformly gray image, per view.
    let mut worst_area = 0.0f64;
    for level in 1..=3u8 {
        let want = table.occlusion[level as usize - 1].area as f64;
        for seed in 0..20u64 {
            let mut images: Vec<CameraImage> = (0..6)
                .map(|v| CameraImage { pixels: vec![0.5; 3 * 32 * 64], ..CameraImage::zeros(v, 32, 64) })
                .collect();
            let spec = CorruptionSpec { kind: CorruptionKind::Occlusion, level, seed };
            apply_camera(&mut images, &spec, &table)?;
            for img in &images {
                let zero = (0..img.h * img.w).filter(|&i| (0..3).all(|c| img.pixels[c * img.h * img.w + i] == 0.0)).count();
                worst_area = worst_area.max((zero as f64 / (img.h * img.w) as f64 - want).abs());
            }
        }
    }
    ok &= worst_area <= 0.01;
    notes.push(format!("occlusion area max |err| {worst_area:.4}"));

    // Bit-determinism across repeated runs and worker counts.
    let cfg = RunConfig::toy();
    let scenes = generate_split(cfg.dataset.dataset_seed, Split::Val, 6, &cfg.scene, 1)?;
    let corrupt_all = |workers: usize| -> Result<Vec<u8>> {
        let jobs: Vec<(&SceneSample, CorruptionKind, u8)> = scenes
            .iter()
            .flat_map(|s| CorruptionKind::ALL.into_iter().flat_map(move |k| (1..=3u8).map(move |l| (s, k, l))))
            .collect();
        let out = run_pool(workers, || {
            jobs.par_iter()
                .map(|&(s, k, l)| {
                    let spec = CorruptionSpec::derived(k, l, cfg.global_seed, s.sample_id);
                    let c = corrupt_inputs(&s.images, &s.cloud, &[spec], &table)?;
                    Ok(SceneSample { images: c.images, cloud: c.cloud, ..s.clone() })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(encode_container(0, &out).0)
    };
    let a = corrupt_all(1)?;
    let same = a == corrupt_all(1)? && a == corrupt_all(3)? && a == corrupt_all(8)?;
    ok &= same;
    notes.push(format!("bit-identical across runs and 1/3/8 workers: {same}"));
    Ok((ok, notes.join("; ")))
}

fn c6_mix() -> Outcome {
    let mut rng = rng_from(6);
    let mut n = [0usize; 4];
    let draws = 100_000;
    for _ in 0..draws {
        let m = sample_corruption_mix(&mut rng, 0.30, &CorruptionKind::ALL)?;
        n[usize::from(m.camera.is_some()) + 2 * usize::from(m.lidar.is_some())] += 1;
    }
    // clean, camera only, LiDAR only, both
    let freq = [n[0], n[1], n[2], n[3]].map(|c| c as f64 / draws as f64);
    let want = [0.49, 0.21, 0.21, 0.09];
    let worst = freq.iter().zip(&want).map(|(f, w)| (f - w).abs()).fold(0.0, f64::max);
    Ok((
        worst <= 0.01,
        format!(
            "clean/cam/lidar/both = {:.2}/{:.2}/{:.2}/{:.2}%, max |err| {:.2} points",
            100.0 * freq[0],
            100.0 * freq[1],
            100.0 * freq[2],
            100.0 * freq[3],
            100.0 * worst
        ),
    ))
}

fn c7_params() -> Outcome {
    let cfg = RunConfig::host_scale();
    let analytic = analytic_counts(&cfg.pfs);
    let p: ParamStore<f32> = init_pfs(&cfg.pfs, &mut rng_from(0))?;
    let counted = count_params(&p);
    let ok = counted.block1 == 99_457 && (3_000_000..=3_600_000).contains(&counted.total) && counted == analytic;
    Ok((
        ok,
        format!(
            "block1 {} block2 {} block3 {} total {}; closed form {}",
            counted.block1,
            counted.block2,
            counted.block3,
            counted.total,
            if counted == analytic { "matches" } else { "differs" }
        ),
    ))
}

/// Smoke curriculum: random host, eight scenes, one epoch per stage.
fn c8_freeze() -> Outcome {
    let dir = tempfile::tempdir()?;
    let layout = RunLayout::new(dir.path());
    let mut cfg = RunConfig::toy();
    cfg.stages = StageConfig::defaults()
        .into_iter()
        .map(|s| StageConfig { epochs: 1, corruption_prob: 0.5, ..s })
        .collect();
    let train = generate_split(cfg.dataset.dataset_seed, Split::Train, 8, &cfg.scene, workers())?;
    let host: ParamStore<f32> = init_host(&cfg.host, &mut rng_from(8));
    host.save(layout.host())?;
    let h0 = params_hash(&host);
    let mut hashes = Vec::new();
    for s in 1..=3 {
        hashes.push(run_stage::<f32>(&cfg, s, &train, &layout, workers())?.host_hash);
    }
    let host_after: ParamStore<f32> = ParamStore::load(layout.host())?;
    let host_ok = hashes.iter().all(|h| *h == h0) && params_hash(&host_after) == h0;
    let s2: ParamStore<f32> = ParamStore::load(layout.stage_final(2))?;
    let s3: ParamStore<f32> = ParamStore::load(layout.stage_final(3))?;
    let frozen = blocks_unchanged(&s2, &s3, &[1, 2]);
    let block3_moved = !blocks_unchanged(&s2, &s3, &[3]);
    Ok((
        host_ok && frozen && block3_moved,
        format!("host hash constant over 3 stages: {host_ok}; stage 3 Blocks 1-2 bit-identical: {frozen}; Block 3 updated: {block3_moved}"),
    ))
}

fn cached_reports(layout: &RunLayout, hashes: &[String]) -> Option<Vec<EvalReport>> {
    let text = std::fs::read_to_string(layout.root.join("acceptance_eval.json")).ok()?;
    let reports: Vec<EvalReport> = serde_json::from_str(&text).ok()?;
    let same = reports.len() == hashes.len() && reports.iter().zip(hashes).all(|(r, h)| &r.checkpoint == h);
    same.then_some(reports)
}

fn c9_end_to_end() -> Outcome {
    let cfg = RunConfig::toy();
    let layout = RunLayout::new(run_dir());
    let w = workers();
    bind_config(&cfg, &layout)?;
    let (train, val) = ensure_dataset(&cfg, &layout, w)?;
    let host: ParamStore<f32> = ensure_host(&cfg, &layout, &train, &val, w)?;
    let s2: ParamStore<f32> = {
        ensure_stage::<f32>(&cfg, &layout, 1, &train, w)?;
        ensure_stage(&cfg, &layout, 2, &train, w)?
    };
    let s3: ParamStore<f32> = ensure_stage(&cfg, &layout, 3, &train, w)?;
    let variants = [
        ModelVariant::host_only(),
        ModelVariant::with_pfs("A2", s2, ActiveBlocks::from_list(&[1, 2])),
        ModelVariant::with_pfs("A3", s3, ActiveBlocks::ALL),
    ];
    let hashes: Vec<String> = variants
        .iter()
        .map(|v| {
            let mut all = host.clone();
            if let Some((p, _)) = &v.pfs {
                all.merge(p);
            }
            params_hash(&all)
        })
        .collect();
    let conditions =
        [Condition::CLEAN, Condition::new(CorruptionKind::LowLight, 3), Condition::new(CorruptionKind::BeamReduction, 3)];
    let reports = match cached_reports(&layout, &hashes) {
        Some(r) => r,
        None => {
            let r = evaluate_many(&cfg, &host, &variants, &val, &conditions, cfg.global_seed, w)?;
            std::fs::write(layout.root.join("acceptance_eval.json"), serde_json::to_string_pretty(&r)?)?;
            r
        }
    };
    let get = |v: usize, c: &str| reports[v].score(c).unwrap_or(f64::NAN);
    let (ll, br) = ("low_light-L3", "beam_reduction-L3");
    let regression = get(0, "clean") - get(2, "clean");
    let gain = ((get(2, ll) - get(0, ll)) + (get(2, br) - get(0, br))) / 2.0;
    let mono = get(2, br) >= get(1, br) && get(1, br) >= get(0, br);
    let mean_r = reports[1].scores[0].mean_reliability.unwrap_or(f64::NAN);
    let a = regression <= 1.0;
    let b = gain >= 2.0;
    let d = mean_r >= 0.9;
    let mark = |x: bool| if x { "ok" } else { "FAIL" };
    Ok((
        a && b && mono && d,
        format!(
            "(a) clean regression {regression:+.2} [{}]; (b) avg gain {gain:+.2} (low_light {:+.2}, beam {:+.2}) [{}]; \
             (c) beam-L3 A3 {:.2} / A2 {:.2} / A0 {:.2} [{}]; (d) clean mean R after stage 2 {mean_r:.3} [{}]",
            mark(a),
            get(2, ll) - get(0, ll),
            get(2, br) - get(0, br),
            mark(b),
            get(2, br),
            get(1, br),
            get(0, br),
            mark(mono),
            mark(d)
        ),
    ))
}
