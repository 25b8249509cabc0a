//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `cargo test -p cmrsam --test acceptance -- 4 8` runs a subset by number.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use cmrsam::cli::{cmd_eval, cmd_phantom, cmd_train, final_checkpoint, SplitArg, ViewSet};
use cmrsam::config::RunConfig;
use cmrsam::dataset::{ClipMeta, Dims, Manifest, MaskClip, SlicePosition, Split, View, MANIFEST_FILE};
use cmrsam::dataset::CineClip;
use cmrsam::metrics::{dice_score, hausdorff_distance, MetricsReport};
use cmrsam::model::{block_forward, BatchDims, Graph, Model, ModelConfig, TokenDims};
use cmrsam::phantom::{Grid, ScanSpec};
use cmrsam::preprocess::{augment, minmax_normalize, phase_selection, resample_phases, AugmentConfig};
use cmrsam::rng;
use cmrsam::tensor::Tensor;
use cmrsam::train::{gradient_check, micro_fixture, TrainConfig, TrainMode, Trainer};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn perturb_zero_params(model: &mut Model<f32>, seed: u64) {
    let mut r = rng::stream(seed, &[]);
    for p in model.params.iter_mut() {
        if p.value.data().iter().all(|v| *v == 0.0) {
            for v in p.value.data_mut() {
                *v = r.random_range(-0.2..0.2);
            }
        }
    }
}

fn random_input(len: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::stream(seed, &[]);
    (0..len).map(|_| r.random::<f32>()).collect()
}

fn toy_clips(n: usize, grid: Grid, seed: u64) -> Result<Vec<(CineClip, MaskClip)>, String> {
    (0..n)
        .map(|i| {
            let mut s = ScanSpec::new(format!("toy{i}"), seed + i as u64, vec![]);
            s.grid = grid;
            let (c, m) = s.generate(View::Sax, SlicePosition::LEVELS[i % 3]).map_err(err)?;
            Ok((minmax_normalize(&c).map_err(err)?, m))
        })
        .collect()
}

// 1 -------------------------------------------------------------------------

fn overfit_fixture() -> Result<String, String> {
    let grid = Grid { height: 64, width: 64, num_phases: 8 };
    let clips = toy_clips(8, grid, 100)?;
    let model = Model::build(ModelConfig::default(), 1).map_err(err)?;
    let cfg = TrainConfig { epochs: 300, lr0: 3e-4, seed: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, cfg, AugmentConfig::default(), TrainMode::Sax).map_err(err)?;
    let start = Instant::now();
    while trainer.epoch < trainer.config.epochs {
        trainer.run_epoch(&clips).map_err(err)?;
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let dice = trainer.evaluate_dice(&clips).map_err(err)?;
    ensure(dice >= 0.95, || format!("training Dice {dice:.4} < 0.95 ({minutes:.1} min)"))?;
    Ok(format!("training Dice {dice:.4}, {minutes:.1} min"))
}

// 2 and 3 -------------------------------------------------------------------

const FIXTURE_GRID: Grid = Grid { height: 32, width: 32, num_phases: 4 };

/// Writes a phantom set whose first `train` scans form the training split.
fn phantom_set(dir: &Path, scans: usize, train: usize, views: ViewSet, levels: &[SlicePosition], seed: u64) -> Result<(), String> {
    let mut manifest = cmd_phantom(dir, scans, seed, views, levels, FIXTURE_GRID).map_err(err)?;
    let ids = manifest.scan_ids();
    let train_ids: HashSet<&String> = ids.iter().take(train).collect();
    for e in &mut manifest.entries {
        e.split = if train_ids.contains(&e.meta.scan_id) { Split::Train } else { Split::Test };
    }
    manifest.write(dir).map_err(err)?;
    Ok(())
}

fn fixture_config(epochs: usize, seed: u64) -> RunConfig {
    RunConfig {
        train: TrainConfig { epochs, lr0: 3e-4, seed, ..TrainConfig::default() },
        ..RunConfig::default()
    }
}

fn train_and_eval(cfg: &RunConfig, data: &Path, out: &Path, mode: TrainMode) -> Result<MetricsReport, String> {
    cmd_train(cfg, data, out, mode, false).map_err(err)?;
    cmd_eval(Some(&final_checkpoint(out)), data, SplitArg::Test, &out.join("report"), false).map_err(err)
}

fn generalization_fixture() -> Result<String, String> {
    let root = tempfile::tempdir().map_err(err)?;
    let data = root.path().join("data");
    phantom_set(&data, 30, 20, ViewSet::Sax, &SlicePosition::LEVELS, 21)?;
    let m = Manifest::read(data.join(MANIFEST_FILE)).map_err(err)?;
    ensure(m.select(Split::Train).len() == 60 && m.select(Split::Test).len() == 30, || "split sizes".into())?;
    let rep = train_and_eval(&fixture_config(GENERALIZATION_EPOCHS, 2), &data, &root.path().join("run"), TrainMode::Sax)?;
    let all = rep.group("all").ok_or("no summary")?;
    let hd = all.mean_hd.unwrap_or(f64::INFINITY);
    let detail = format!("test Dice {:.4}, mean HD {hd:.3} px over {} clips", all.mean_dice, all.count);
    ensure(all.mean_dice >= 0.85 && hd <= 5.0, || detail.clone())?;
    Ok(detail)
}

const GENERALIZATION_EPOCHS: usize = 60;
const MULTIVIEW_EPOCHS: usize = 80;

fn multiview_fixture() -> Result<String, String> {
    let root = tempfile::tempdir().map_err(err)?;
    let data = root.path().join("data");
    phantom_set(&data, 15, 10, ViewSet::Both, &[SlicePosition::Mid], 31)?;
    let mut dice = std::collections::BTreeMap::new();
    for mode in TrainMode::ALL {
        let rep = train_and_eval(&fixture_config(MULTIVIEW_EPOCHS, 3), &data, &root.path().join(mode.name()), mode)?;
        for view in mode.views() {
            let g = rep.group(view.keyword()).ok_or("missing view group")?;
            dice.insert((mode.name(), view.keyword()), g.mean_dice);
        }
    }
    let d = |m: &str, v: &str| dice[&(m, v)];
    let (mp_sax, mp_lax) = (d("multi-prompt", "SAX"), d("multi-prompt", "LAX"));
    let detail = format!(
        "Dice SAX: sax {:.4} multi {:.4} multi-prompt {mp_sax:.4}; LAX: lax {:.4} multi {:.4} multi-prompt {mp_lax:.4}",
        d("sax", "SAX"),
        d("multi", "SAX"),
        d("lax", "LAX"),
        d("multi", "LAX")
    );
    ensure((mp_sax - d("sax", "SAX")).abs() <= 0.05, || format!("SAX gap too large: {detail}"))?;
    ensure((mp_lax - d("lax", "LAX")).abs() <= 0.05, || format!("LAX gap too large: {detail}"))?;
    ensure(mp_lax >= d("multi", "LAX") - 0.02, || format!("prompted LAX below unprompted: {detail}"))?;
    Ok(detail)
}

// 4 -------------------------------------------------------------------------

fn gradient_fixture() -> Result<String, String> {
    let start = Instant::now();
    let (model, images, masks, dims) = micro_fixture(7).map_err(err)?;
    let cfg = TrainConfig::default();
    let trainable: Vec<_> = model.params.iter().filter(|p| !p.frozen).collect();
    let per_tensor = 200usize.div_ceil(trainable.len()).max(4);
    let views = [View::Sax];
    let rep = gradient_check(&model, &images, &masks, dims, Some(&views), &cfg, per_tensor, 1e-5, 8).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let want: BTreeSet<_> = trainable.iter().map(|p| p.group).collect();
    let got: BTreeSet<_> = rep.groups.iter().map(|g| g.group).collect();
    ensure(want == got, || format!("groups checked {got:?}, trainable {want:?}"))?;
    ensure(rep.coordinates >= 200, || format!("only {} coordinates", rep.coordinates))?;
    ensure(rep.max_rel_error <= 1e-4, || format!("max relative error {:.3e}", rep.max_rel_error))?;
    ensure(secs <= 120.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "max relative error {:.2e} over {} coordinates in {} groups, {secs:.1} s",
        rep.max_rel_error,
        rep.coordinates,
        got.len()
    ))
}

// 5 -------------------------------------------------------------------------

fn freeze_enforcement() -> Result<String, String> {
    let grid = Grid { height: 32, width: 32, num_phases: 4 };
    let clips = toy_clips(4, grid, 40)?;
    let model = Model::build(ModelConfig { num_blocks: 2, ..ModelConfig::default() }, 5).map_err(err)?;
    let before = model.params.clone();
    let cfg = TrainConfig { epochs: 5, batch_size: 2, lr0: 1e-3, seed: 5, ..TrainConfig::default() };
    // with a prompt the decoder attends over two tokens, so no trainable tensor is inert
    let mut trainer = Trainer::new(model, cfg, AugmentConfig::default(), TrainMode::MultiPrompt).map_err(err)?;
    let mut steps = 0;
    while trainer.epoch < trainer.config.epochs {
        trainer.run_epoch(&clips).map_err(err)?;
        steps += clips.len().div_ceil(2);
    }
    ensure(steps == 10, || format!("{steps} steps"))?;
    let (mut frozen, mut trainable, mut changed) = (0, 0, 0);
    let mut idle = Vec::new();
    for (a, b) in before.iter().zip(trainer.model.params.iter()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if a.frozen {
            frozen += 1;
            ensure(same, || format!("frozen {} changed", a.name))?;
        } else {
            trainable += 1;
            changed += (!same) as usize;
            if same {
                idle.push(a.name.clone());
            }
        }
    }
    ensure(frozen > 0 && trainable > 0, || format!("{frozen} frozen, {trainable} trainable"))?;
    ensure(changed == trainable, || format!("{changed} of {trainable} trainable tensors changed, unchanged: {idle:?}"))?;
    Ok(format!("{frozen} frozen tensors bit-identical, {changed} trainable tensors changed after {steps} steps"))
}

// 6 -------------------------------------------------------------------------

fn adapter_ablation() -> Result<String, String> {
    let cfg = ModelConfig { adapter_scale: 0.0, ..ModelConfig::default() };
    let mut m = Model::<f32>::build(cfg.clone(), 6).map_err(err)?;
    perturb_zero_params(&mut m, 60);
    let dims = TokenDims { batch: 2, phases: 5, height: 4, width: 4 };
    let shape = vec![10, 4, 4, cfg.embed_dim];
    let data = random_input(shape.iter().product(), 61);
    let mut outs = Vec::new();
    for block in 0..cfg.num_blocks {
        for adapter in [true, false] {
            let mut g = Graph::bind(&m.params, false);
            let x = g.tape.constant(Tensor::new(shape.clone(), data.clone()));
            let y = block_forward(&mut g, &cfg, block, x, dims, adapter).map_err(err)?;
            outs.push(g.tape.value(y).data().to_vec());
        }
    }
    for (i, pair) in outs.chunks(2).enumerate() {
        let same = pair[0].iter().zip(&pair[1]).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("block {i} differs"))?;
    }
    Ok(format!("{} blocks bit-identical with and without adapters", cfg.num_blocks))
}

// 7 -------------------------------------------------------------------------

fn temporal_permutation() -> Result<String, String> {
    let (b, h, w, t) = (2, 16, 16, 6);
    let dims = BatchDims { batch: b, height: h, width: w, phases: t };
    let x = random_input(b * h * w * t, 71);
    let mut r = rng::stream(72, &[]);
    let mut perm: Vec<usize> = (0..t).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
    let permute = |v: &[f32]| -> Vec<f32> {
        let mut out = vec![0f32; v.len()];
        for (i, chunk) in v.chunks(t).enumerate() {
            for (k, &src) in perm.iter().enumerate() {
                out[i * t + k] = chunk[src];
            }
        }
        out
    };
    let views = [View::Sax, View::Lax];
    let mut worst = 0f32;
    // positional table present but zeroed, and absent altogether
    for disabled in [false, true] {
        let cfg = ModelConfig { use_temporal_pos_embed: !disabled, ..ModelConfig::default() };
        let mut m = Model::<f32>::build(cfg.clone(), 70).map_err(err)?;
        perturb_zero_params(&mut m, 73);
        for p in m.params.iter_mut().filter(|p| p.name.ends_with(".temporal_pos")) {
            p.value.data_mut().fill(0.0);
        }
        let base = m.predict_logits(&x, dims, Some(&views)).map_err(err)?;
        let moved = m.predict_logits(&permute(&x), dims, Some(&views)).map_err(err)?;
        let diff = permute(&base).iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        worst = worst.max(diff);
    }
    ensure(worst <= 1e-5, || format!("max abs diff {worst:e}"))?;
    Ok(format!("permutation {perm:?}, max abs diff {worst:.2e}"))
}

// 8 -------------------------------------------------------------------------

fn brute_boundary(mask: &[u8], n: usize) -> Vec<(i64, i64)> {
    // pad with a background ring so the frame edge needs no special case
    let p = n + 2;
    let mut padded = vec![0u8; p * p];
    for r in 0..n {
        for c in 0..n {
            padded[(r + 1) * p + c + 1] = mask[r * n + c];
        }
    }
    let mut out = Vec::new();
    for r in 1..=n {
        for c in 1..=n {
            let i = r * p + c;
            if padded[i] == 1 && [i - 1, i + 1, i - p, i + p].iter().any(|&j| padded[j] == 0) {
                out.push(((r - 1) as i64, (c - 1) as i64));
            }
        }
    }
    out
}

fn brute_hausdorff(a: &[u8], b: &[u8], n: usize) -> Option<f64> {
    let (ba, bb) = (brute_boundary(a, n), brute_boundary(b, n));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)).min().unwrap())
            .max()
            .unwrap()
    };
    Some((directed(&ba, &bb).max(directed(&bb, &ba)) as f64).sqrt())
}

fn brute_dice(a: &[u8], b: &[u8]) -> f64 {
    let sa: HashSet<usize> = (0..a.len()).filter(|&i| a[i] == 1).collect();
    let sb: HashSet<usize> = (0..b.len()).filter(|&i| b[i] == 1).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

fn random_mask(r: &mut impl Rng, n: usize) -> Vec<u8> {
    match r.random_range(0..4) {
        0 => vec![0; n * n],
        1 => {
            let density: f64 = r.random_range(0.02..0.9);
            (0..n * n).map(|_| r.random_bool(density) as u8).collect()
        }
        _ => {
            // a few random rectangles and discs
            let mut m = vec![0u8; n * n];
            for _ in 0..r.random_range(1..4) {
                let (cr, cc) = (r.random_range(0..n) as f64, r.random_range(0..n) as f64);
                let rad: f64 = r.random_range(1.0..6.0);
                let disc = r.random_bool(0.5);
                for row in 0..n {
                    for col in 0..n {
                        let (dr, dc) = (row as f64 - cr, col as f64 - cc);
                        if (disc && dr * dr + dc * dc <= rad * rad) || (!disc && dr.abs() <= rad && dc.abs() <= rad / 2.0) {
                            m[row * n + col] = 1;
                        }
                    }
                }
            }
            m
        }
    }
}

fn metric_oracles() -> Result<String, String> {
    let n = 16;
    let mut r = rng::stream(80, &[]);
    let mut undefined = 0;
    for i in 0..200 {
        let (a, b) = (random_mask(&mut r, n), random_mask(&mut r, n));
        let d = dice_score(&a, &b).map_err(err)?;
        ensure(d == brute_dice(&a, &b), || format!("pair {i}: Dice {d} vs {}", brute_dice(&a, &b)))?;
        let hd = hausdorff_distance(&a, &b, n, n).map_err(err)?;
        let want = brute_hausdorff(&a, &b, n);
        ensure(hd == want, || format!("pair {i}: HD {hd:?} vs {want:?}"))?;
        undefined += want.is_none() as usize;
    }
    Ok(format!("200 pairs exact ({undefined} with an empty boundary)"))
}

// 9 -------------------------------------------------------------------------

fn shape_contracts() -> Result<String, String> {
    let cfg = ModelConfig::default();
    let m = Model::<f32>::build(cfg.clone(), 90).map_err(err)?;
    let shape = vec![2, 1, 64, 64, 5];
    let x = random_input(shape.iter().product(), 91);
    let mut g = Graph::bind(&m.params, false);
    let xv = g.tape.constant(Tensor::new(shape.clone(), x));
    let out = m.forward(&mut g, xv, Some(&[View::Sax, View::Lax])).map_err(err)?;
    ensure(g.shape(out) == shape, || format!("logits {:?}", g.shape(out)))?;
    let seen = |label: &str| -> Vec<Vec<usize>> {
        g.trace.iter().filter(|(l, _)| *l == label).map(|(_, s)| s.clone()).collect()
    };
    let side = 64 >> cfg.encoder_channels.len();
    let c = cfg.embed_dim;
    let expected = [
        ("encoder input (BT) x C x H x W", vec![vec![10, 1, 64, 64]]),
        ("temporal (BHW) x T x C", vec![vec![2 * side * side, 5, c]; cfg.num_blocks]),
        ("spatial (BT) x (H'W') x C", vec![vec![10, side * side, c]; cfg.num_blocks]),
    ];
    for (label, want) in &expected {
        let got = seen(label);
        ensure(&got == want, || format!("{label}: {got:?}, expected {want:?}"))?;
    }
    Ok(format!("{} reshapes checked, logits {:?}", expected.iter().map(|e| e.1.len()).sum::<usize>(), shape))
}

// 10 ------------------------------------------------------------------------

fn meta(ed: usize, es: usize) -> ClipMeta {
    ClipMeta { scan_id: "p".into(), view: View::Sax, slice_position: SlicePosition::Mid, ed_index: ed, es_index: es }
}

fn preprocessing_contracts() -> Result<String, String> {
    let mut cases = 0usize;
    for t_in in 2..=40 {
        let dims = Dims::new(1, 1, t_in);
        let mask = MaskClip::zeros(dims);
        for ed in 0..t_in {
            for es in (0..t_in).filter(|&s| s != ed) {
                let clip = CineClip::new(dims, (0..t_in).map(|t| t as f32).collect(), meta(ed, es)).map_err(err)?;
                for t_out in 2..=t_in {
                    let (sel, e, s) = phase_selection(t_in, t_out, ed, es).map_err(err)?;
                    let (out, _) = resample_phases(&clip, &mask, t_out).map_err(err)?;
                    let kept: Vec<usize> = out.data.iter().map(|v| *v as usize).collect();
                    let ok = kept == sel
                        && kept.len() == t_out
                        && kept.windows(2).all(|w| w[0] < w[1])
                        && kept[e] == ed
                        && kept[s] == es
                        && kept[out.meta.ed_index] == ed
                        && kept[out.meta.es_index] == es;
                    ensure(ok, || format!("t_in {t_in} t_out {t_out} ed {ed} es {es}: {kept:?}"))?;
                    cases += 1;
                }
            }
        }
    }
    let mut r = rng::stream(100, &[]);
    let dims = Dims::new(6, 5, 3);
    for i in 0..500 {
        let data: Vec<f32> = if i % 5 == 0 {
            vec![r.random_range(-10.0..10.0); dims.voxels()]
        } else {
            let scale: f32 = r.random_range(1e-3..1e3);
            (0..dims.voxels()).map(|_| r.random_range(-1.0..1.0) * scale).collect()
        };
        let out = minmax_normalize(&CineClip::new(dims, data, meta(0, 1)).map_err(err)?).map_err(err)?;
        let zeros = out.data.iter().all(|v| *v == 0.0);
        let unit = out.data.iter().all(|v| (0.0..=1.0).contains(v))
            && out.data.contains(&0.0)
            && out.data.contains(&1.0);
        ensure(zeros || unit, || format!("minmax case {i} out of range"))?;
    }
    let grid = Grid { height: 32, width: 32, num_phases: 4 };
    let clips = toy_clips(3, grid, 110)?;
    let wide = AugmentConfig { p_flip_horizontal: 0.5, p_rotate: 1.0, p_translate: 1.0, rotation_degrees: (-45.0, 45.0), ..AugmentConfig::default() };
    for seed in 0..200 {
        let (c, m) = &clips[seed as usize % clips.len()];
        let (_, am) = augment(c, m, seed, &wide).map_err(err)?;
        ensure(am.data.iter().all(|v| *v <= 1), || format!("augmented mask not binary at seed {seed}"))?;
    }
    Ok(format!("{cases} resampling cases, 500 normalizations, 200 augmentations"))
}

// 11 ------------------------------------------------------------------------

fn determinism() -> Result<String, String> {
    let root = tempfile::tempdir().map_err(err)?;
    let data = root.path().join("data");
    cmd_phantom(&data, 3, 111, ViewSet::Both, &[SlicePosition::Mid], FIXTURE_GRID).map_err(err)?;
    let cfg = RunConfig {
        model: ModelConfig { num_blocks: 2, ..ModelConfig::default() },
        train: TrainConfig { epochs: 3, seed: 11, ..TrainConfig::default() },
        ..RunConfig::default()
    };
    let mut ckpts = Vec::new();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = root.path().join(run);
        cmd_train(&cfg, &data, &out, TrainMode::MultiPrompt, false).map_err(err)?;
        ckpts.push(std::fs::read(final_checkpoint(&out)).map_err(err)?);
        let rep = out.join("report");
        cmd_eval(Some(&final_checkpoint(&out)), &data, SplitArg::All, &rep, false).map_err(err)?;
        let csv = std::fs::read(rep.join("metrics.csv")).map_err(err)?;
        let json = std::fs::read(rep.join("metrics.json")).map_err(err)?;
        reports.push((csv, json));
    }
    ensure(ckpts[0] == ckpts[1], || "checkpoints differ".into())?;
    ensure(reports[0] == reports[1], || "reports differ".into())?;
    Ok(format!("{}-byte checkpoints and both reports identical", ckpts[0].len()))
}

fn main() -> ExitCode {
    // quickest first, the long training fixtures last
    let criteria: [(u32, &str, Check); 11] = [
        (8, "metric oracles", metric_oracles),
        (10, "preprocessing contracts", preprocessing_contracts),
        (6, "adapter ablation", adapter_ablation),
        (9, "shape contracts", shape_contracts),
        (7, "temporal permutation", temporal_permutation),
        (5, "freeze enforcement", freeze_enforcement),
        (4, "gradient check", gradient_fixture),
        (11, "determinism", determinism),
        (2, "generalization fixture", generalization_fixture),
        (3, "multi-view fixture", multiview_fixture),
        (1, "overfit fixture", overfit_fixture),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {id:>2} {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
