//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the summary always prints; exits non-zero if any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cocktail::checkpoint::{
    read_checkpoint, write_checkpoint, write_sharded_checkpoint, Dtype, TensorMap,
};
use cocktail::eval::{
    decoder_loss, encoder_example_loss, init_weights, score_candidates, ArchKind, TokenizedExample,
    ToyArchConfig, ToyTransformer,
};
use cocktail::lab::{max_weight_delta, mlp_loss, run_forgetting_experiment, LabConfig, MlpParams, ReportRow, Scenario};
use cocktail::merge::{cocktail_merge, mono_specialist_merge, zero_shot_merge, MergeMode, MergeProvenance};
use cocktail::solver::{drop_target_candidate, softmax_weights, solve_weights, FewShotSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- merging

type Layout = Vec<(String, Dtype, Vec<usize>)>;

fn random_layout(rng: &mut ChaCha8Rng, max_dim: usize, mixed: bool) -> Layout {
    (0..rng.gen_range(1..=4))
        .map(|i| {
            let dtype = if mixed && rng.gen_bool(0.5) { Dtype::F16 } else { Dtype::F32 };
            let shape = if rng.gen_bool(0.5) {
                vec![rng.gen_range(1..=max_dim), rng.gen_range(1..=max_dim)]
            } else {
                vec![rng.gen_range(1..=max_dim)]
            };
            (format!("blocks.{i}.w"), dtype, shape)
        })
        .collect()
}

fn random_model(rng: &mut ChaCha8Rng, layout: &Layout) -> TensorMap {
    let mut b = TensorMap::builder();
    for (name, dtype, shape) in layout {
        let values: Vec<f64> = (0..shape.iter().product()).map(|_| rng.gen_range(-4.0..4.0)).collect();
        b.insert_f64(name.clone(), *dtype, shape.clone(), &values).unwrap();
    }
    b.finish()
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

/// Largest deviation from the elementwise `sum_i coef_i * maps_i`, split by
/// output dtype as `(f32, f16)`.
fn oracle_error(out: &TensorMap, maps: &[&TensorMap], coef: &[f64]) -> (f64, f64) {
    let (mut e32, mut e16) = (0.0f64, 0.0f64);
    for meta in maps[0].metas() {
        let mut want = vec![0.0; meta.element_count()];
        for (m, c) in maps.iter().zip(coef) {
            for (w, v) in want.iter_mut().zip(m.to_f64(&meta.name).unwrap()) {
                *w += c * v;
            }
        }
        let got = out.to_f64(&meta.name).unwrap();
        let err = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
        match out.meta(&meta.name).unwrap().dtype {
            Dtype::F32 => e32 = e32.max(err),
            _ => e16 = e16.max(err),
        }
    }
    (e32, e16)
}

fn criterion_1() -> Outcome {
    let (mut e32, mut e16) = (0.0f64, 0.0f64);
    let mut note = |(a, b): (f64, f64)| {
        e32 = e32.max(a);
        e16 = e16.max(b);
    };
    for recipe in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(recipe);
        let k = rng.gen_range(2..=10);
        let layout = random_layout(&mut rng, 64, true);
        let models: Vec<TensorMap> = (0..k).map(|_| random_model(&mut rng, &layout)).collect();
        let refs: Vec<&TensorMap> = models.iter().collect();
        let alpha = rng.gen_range(0.0..=1.0);

        let w = random_simplex(&mut rng, k - 1);
        let out = cocktail_merge(refs[0], &refs[1..], &w, alpha).map_err(|e| e.to_string())?;
        let coef: Vec<f64> = std::iter::once(alpha).chain(w.iter().map(|x| (1.0 - alpha) * x)).collect();
        note(oracle_error(&out, &refs, &coef));

        let out = mono_specialist_merge(refs[0], refs[1], alpha).map_err(|e| e.to_string())?;
        note(oracle_error(&out, &refs[..2], &[alpha, 1.0 - alpha]));

        let w = random_simplex(&mut rng, k);
        let out = zero_shot_merge(&refs, &w).map_err(|e| e.to_string())?;
        note(oracle_error(&out, &refs, &w));
    }
    check(e32 <= 1e-6 && e16 <= 1e-2, || format!("max error f32 {e32:e}, f16 {e16:e}"))?;
    Ok(format!("100 recipes x 3 modes, max error f32 {e32:.1e}, f16 {e16:.1e}"))
}

fn criterion_3() -> Outcome {
    let mut flat_err = 0.0f64;
    for recipe in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + recipe);
        let k = rng.gen_range(2..=8);
        let layout = random_layout(&mut rng, 32, true);
        let target = random_model(&mut rng, &layout);
        let cands: Vec<TensorMap> = (0..k).map(|_| random_model(&mut rng, &layout)).collect();
        let refs: Vec<&TensorMap> = cands.iter().collect();
        let w = random_simplex(&mut rng, k);
        let hash = |m: &TensorMap| m.content_hash().unwrap();

        let one = cocktail_merge(&target, &refs, &w, 1.0).map_err(|e| e.to_string())?;
        check(hash(&one) == hash(&target), || format!("recipe {recipe}: alpha = 1 differs from target"))?;
        let zero = mono_specialist_merge(&target, refs[0], 0.0).map_err(|e| e.to_string())?;
        check(hash(&zero) == hash(refs[0]), || format!("recipe {recipe}: mono alpha = 0 differs from base"))?;

        let alpha = rng.gen_range(0.0..=1.0);
        let out = cocktail_merge(&target, &refs, &w, alpha).map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let permuted: Vec<&TensorMap> = order.iter().map(|&i| refs[i]).collect();
        let pw: Vec<f64> = order.iter().map(|&i| w[i]).collect();
        let again = cocktail_merge(&target, &permuted, &pw, alpha).map_err(|e| e.to_string())?;
        check(hash(&out) == hash(&again), || format!("recipe {recipe}: permutation changed the output"))?;

        // Flattening is stated for F32 outputs.
        let layout32: Layout = layout.iter().map(|(n, _, s)| (n.clone(), Dtype::F32, s.clone())).collect();
        let target = random_model(&mut rng, &layout32);
        let cands: Vec<TensorMap> = (0..k).map(|_| random_model(&mut rng, &layout32)).collect();
        let refs: Vec<&TensorMap> = cands.iter().collect();
        let nested = cocktail_merge(&target, &refs, &w, alpha).map_err(|e| e.to_string())?;
        let all: Vec<&TensorMap> = std::iter::once(&target).chain(refs.iter().copied()).collect();
        let fw: Vec<f64> = std::iter::once(alpha).chain(w.iter().map(|x| (1.0 - alpha) * x)).collect();
        let flat = zero_shot_merge(&all, &fw).map_err(|e| e.to_string())?;
        for name in target.names() {
            for (a, b) in nested.to_f64(name).unwrap().iter().zip(flat.to_f64(name).unwrap()) {
                flat_err = flat_err.max((a - b).abs());
            }
        }
    }
    check(flat_err <= 1e-6, || format!("flattening error {flat_err:e}"))?;
    Ok(format!("50 recipes, identities and permutations bitwise, flattening error {flat_err:.1e}"))
}

// ----------------------------------------------------------------- weights

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut norm_err, mut shift_err, mut uniform_err, mut min_conc) = (0.0f64, 0.0f64, 0.0f64, 1.0f64);
    let mut concentration_cases = 0;
    for case in 0..1000 {
        let k = rng.gen_range(2..=12);
        // Losses on a 1e-3 grid: minima are either tied or separated by at
        // least 1e-3, which tau = 1e-6 resolves completely.
        let l: Vec<f64> = (0..k).map(|_| rng.gen_range(0..=3000) as f64 / 1000.0).collect();
        let tau = 10f64.powf(rng.gen_range(-1.3..1.3));
        let w = softmax_weights(&l, tau).map_err(|e| e.to_string())?;
        norm_err = norm_err.max((w.iter().sum::<f64>() - 1.0).abs());
        for i in 0..k {
            for j in 0..k {
                check(!(l[i] < l[j]) || w[i] > w[j], || format!("case {case}: monotonicity broken"))?;
            }
        }
        let c = rng.gen_range(-100.0..100.0);
        let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
        let ws = softmax_weights(&shifted, tau).map_err(|e| e.to_string())?;
        shift_err = shift_err.max(w.iter().zip(&ws).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let wu = softmax_weights(&l, 1e6).map_err(|e| e.to_string())?;
        uniform_err = uniform_err.max(wu.iter().map(|x| (x - 1.0 / k as f64).abs()).fold(0.0, f64::max));
        let min = l.iter().copied().fold(f64::INFINITY, f64::min);
        let argmins: Vec<usize> = (0..k).filter(|&i| l[i] == min).collect();
        if argmins.len() == 1 {
            concentration_cases += 1;
            let wc = softmax_weights(&l, 1e-6).map_err(|e| e.to_string())?;
            min_conc = min_conc.min(wc[argmins[0]]);
        }
        let big: Vec<f64> = l.iter().map(|x| x + 1e4).collect();
        let wb = softmax_weights(&big, tau).map_err(|e| e.to_string())?;
        check(wb.iter().all(|x| x.is_finite()), || format!("case {case}: non-finite weights at +1e4"))?;
    }
    check(norm_err <= 1e-12, || format!("normalization error {norm_err:e}"))?;
    check(shift_err <= 1e-10, || format!("shift error {shift_err:e}"))?;
    check(uniform_err <= 1e-6, || format!("uniform-limit error {uniform_err:e}"))?;
    check(min_conc > 1.0 - 1e-9, || format!("concentration {min_conc}"))?;
    Ok(format!(
        "1000 vectors, |sum-1| {norm_err:.0e}, shift {shift_err:.0e}, uniform {uniform_err:.0e}, \
         min argmin weight {min_conc} over {concentration_cases} unique minima"
    ))
}

// -------------------------------------------------------------- checkpoints

fn random_raw_map(rng: &mut ChaCha8Rng) -> TensorMap {
    let mut b = TensorMap::builder();
    for i in 0..rng.gen_range(0..10) {
        let dtype = [Dtype::F32, Dtype::F16, Dtype::BF16][rng.gen_range(0..3)];
        let shape: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..6)).collect();
        let n = shape.iter().product::<usize>() * dtype.size();
        let bytes: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
        b.insert_bytes(format!("t{}.{}", rng.gen_range(0..1000), i), dtype, shape, bytes).unwrap();
    }
    if rng.gen_bool(0.5) {
        b.metadata("format", "pt");
    }
    b.finish()
}

fn same_map(a: &TensorMap, b: &TensorMap) -> bool {
    a.names().eq(b.names())
        && a.metadata() == b.metadata()
        && a.metas().all(|m| {
            let o = b.meta(&m.name).unwrap();
            o.dtype == m.dtype && o.shape == m.shape && a.bytes(&m.name).unwrap() == b.bytes(&m.name).unwrap()
        })
}

fn container(header: &str, data: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    out
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..50 {
        let map = random_raw_map(&mut rng);
        let file = dir.path().join(format!("m{i}.safetensors"));
        write_checkpoint(&map, &file).map_err(|e| e.to_string())?;
        let back = read_checkpoint(&file).map_err(|e| e.to_string())?;
        check(same_map(&map, &back), || format!("map {i}: single-file round trip differs"))?;
        let shards = dir.path().join(format!("sharded{i}"));
        write_sharded_checkpoint(&map, &shards, 2).map_err(|e| e.to_string())?;
        let back = read_checkpoint(&shards).map_err(|e| e.to_string())?;
        check(same_map(&map, &back), || format!("map {i}: 2-shard round trip differs"))?;
    }

    // 1.0f32 = 00 00 80 3f, 2.0f32 = 00 00 00 40 (little-endian).
    let fixture = dir.path().join("hand.safetensors");
    let header = r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
    std::fs::write(&fixture, container(header, &[0, 0, 0x80, 0x3f, 0, 0, 0, 0x40])).unwrap();
    let map = read_checkpoint(&fixture).map_err(|e| e.to_string())?;
    let meta = map.meta("w").ok_or("fixture lost tensor w")?;
    check(meta.dtype == Dtype::F32 && meta.shape == [2], || "fixture meta differs".into())?;
    check(map.to_f32("w").unwrap() == [1.0, 2.0], || "fixture values differ".into())?;

    let mut long = container("{}", &[]);
    long[..8].copy_from_slice(&64u64.to_le_bytes());
    let entry = |dtype: &str, shape: &str, offsets: &str| {
        format!(r#"{{"w":{{"dtype":"{dtype}","shape":{shape},"data_offsets":{offsets}}}}}"#)
    };
    let malformed: Vec<(&str, Vec<u8>)> = vec![
        ("short prefix", vec![1, 2, 3]),
        ("header past end of file", long),
        ("header not JSON", container("{\"w\":", &[])),
        ("header not an object", container("[1,2]", &[])),
        ("header not UTF-8", container("\u{0}", &[]).into_iter().map(|b| if b == 0 { 0xff } else { b }).collect()),
        ("unknown dtype", container(&entry("F64", "[1]", "[0,8]"), &[0; 8])),
        ("size disagrees with shape", container(&entry("F32", "[3]", "[0,8]"), &[0; 8])),
        ("offsets out of bounds", container(&entry("F32", "[2]", "[0,8]"), &[0; 4])),
        ("end before begin", container(&entry("F32", "[0]", "[8,0]"), &[0; 8])),
        (
            "overlapping tensors",
            container(
                r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                &[0; 8],
            ),
        ),
        ("gap before data", container(&entry("F32", "[1]", "[4,8]"), &[0; 8])),
        ("trailing bytes", container(&entry("F32", "[1]", "[0,4]"), &[0; 8])),
        ("metadata not strings", container(r#"{"__metadata__":{"a":1}}"#, &[])),
        ("missing offsets", container(r#"{"w":{"dtype":"F32","shape":[1]}}"#, &[0; 4])),
    ];
    for (what, bytes) in &malformed {
        let path = dir.path().join("bad.safetensors");
        std::fs::write(&path, bytes).unwrap();
        check(read_checkpoint(&path).is_err(), || format!("accepted malformed file: {what}"))?;
    }
    Ok(format!("50 maps round-trip (single file and 2 shards), fixture parsed, {} malformed cases rejected", malformed.len()))
}

// --------------------------------------------------------------- evaluators

fn small(kind: ArchKind) -> ToyArchConfig {
    ToyArchConfig { kind, vocab_size: 12, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_seq_len: 10 }
}

fn criterion_5() -> Outcome {
    let dec = small(ArchKind::Decoder);
    let mut w = support::random_weights(&dec, 5);
    let mut max_err = 0.0f64;
    {
        let model = ToyTransformer::from_map(&support::to_map(&w), &dec).map_err(|e| e.to_string())?;
        let oracle = support::Oracle { cfg: &dec, w: &w };
        let ids = [3u32, 0, 11, 7, 7, 2];
        let want = oracle.logits(&ids);
        for (i, row) in model.logits_rows(&ids).map_err(|e| e.to_string())?.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                max_err = max_err.max((v - want[(i, j)]).abs());
            }
        }
    }
    for name in ["head.w", "head.b"] {
        w.get_mut(name).unwrap().1.iter_mut().for_each(|v| *v = 0.0);
    }
    let examples = vec![
        TokenizedExample::Decoder { input_ids: vec![1, 2, 3], target_ids: vec![4, 5] },
        TokenizedExample::Decoder { input_ids: vec![9], target_ids: vec![0, 0, 11] },
    ];
    let losses = decoder_loss(&support::to_map(&w), &dec, &examples).map_err(|e| e.to_string())?;
    let uniform_err = losses.losses.iter().map(|l| (l - 12f64.ln()).abs()).fold(0.0, f64::max);

    let enc = small(ArchKind::Encoder);
    let mut we = support::random_weights(&enc, 6);
    {
        let model = ToyTransformer::from_map(&support::to_map(&we), &enc).map_err(|e| e.to_string())?;
        let oracle = support::Oracle { cfg: &enc, w: &we };
        let ids = [1u32, 5, 9, 4];
        let want = oracle.hidden(&ids);
        for (i, row) in model.hidden_rows(&ids).map_err(|e| e.to_string())?.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                max_err = max_err.max((v - want[(i, j)]).abs());
            }
        }
        let single = encoder_example_loss(&model, &[1, 2], &[vec![3, 4]], &[]).map_err(|e| e.to_string())?;
        check(single == 0.0, || format!("single-positive loss {single:e}"))?;
    }
    we.get_mut("ln_f.g").unwrap().1.iter_mut().for_each(|g| *g = 0.0);
    let flat = ToyTransformer::from_map(&support::to_map(&we), &enc).map_err(|e| e.to_string())?;
    let mut ident_err = 0.0f64;
    for k in [1usize, 4, 9] {
        let negs: Vec<Vec<u32>> = (0..k).map(|i| vec![i as u32, 3]).collect();
        let l = encoder_example_loss(&flat, &[1, 2], &[vec![7]], &negs).map_err(|e| e.to_string())?;
        ident_err = ident_err.max((l - ((k + 1) as f64).ln()).abs());
    }
    check(uniform_err <= 1e-5, || format!("uniform-logits error {uniform_err:e}"))?;
    check(ident_err <= 1e-5, || format!("identical-embedding error {ident_err:e}"))?;
    check(max_err <= 1e-5, || format!("oracle forward error {max_err:e}"))?;
    Ok(format!(
        "ln V error {uniform_err:.0e}, ln(k+1) error {ident_err:.0e}, lone positive 0, oracle error {max_err:.0e}"
    ))
}

// ---------------------------------------------------------------------- MLP

fn criterion_6() -> Outcome {
    let scenario = Scenario::default();
    let tasks = cocktail::lab::make_tasks_with(6, &scenario.geometry).map_err(|e| e.to_string())?;
    let batch = tasks[2].train.head(5);
    let mut params = MlpParams::init(scenario.geometry.d_in(), scenario.hidden, scenario.geometry.n_classes, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for l in &mut params.layers {
        l.b.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
    let (_, grad) = params.loss_and_gradient(&batch).map_err(|e| e.to_string())?;
    let analytic = grad.flat();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (j, &a) in analytic.iter().enumerate() {
        let at = |delta: f64| {
            let mut p = params.clone();
            *p.flat_mut().nth(j).unwrap() += delta;
            mlp_loss(&p, &batch).unwrap()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let scale = a.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (a - numeric).abs() / scale };
        worst = worst.max(rel);
    }
    check(worst < 1e-4, || format!("worst relative error {worst:e}"))?;
    Ok(format!("{} parameters, worst relative error {worst:.1e}", analytic.len()))
}

// --------------------------------------------------------------------- lab

fn criterion_7() -> Outcome {
    let acc = |r: &ReportRow| (r.target_acc, r.other_acc);
    let (mut min_drop, mut min_rec, mut min_ret, mut slowest) = (f64::INFINITY, f64::INFINITY, f64::INFINITY, 0.0f64);
    let mut failures = Vec::new();
    for seed in 0..10 {
        let start = Instant::now();
        let report = run_forgetting_experiment(&LabConfig::new(seed)).map_err(|e| e.to_string())?;
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let (base, ft) = (report.base(), report.fine_tuned());
        let mono = |a: f64| report.merged(MergeMode::MonoSpecialist, Some(a), None).unwrap();
        let drop = base.other_acc - ft.other_acc;
        let recovered = (mono(0.5).other_acc - ft.other_acc) / drop;
        let retained = (mono(0.5).target_acc - base.target_acc) / (ft.target_acc - base.target_acc);
        min_drop = min_drop.min(drop);
        min_rec = min_rec.min(recovered);
        min_ret = min_ret.min(retained);
        if drop < 0.05 {
            failures.push(format!("seed {seed}: drop {drop:.3}"));
        }
        if recovered < 0.5 || retained < 0.8 {
            failures.push(format!("seed {seed}: recovered {recovered:.2}, retained {retained:.2}"));
        }
        let general_one = report.merged(MergeMode::General, Some(1.0), Some(5)).unwrap();
        if acc(mono(0.0)) != acc(base) || acc(mono(1.0)) != acc(ft) || acc(general_one) != acc(ft) {
            failures.push(format!("seed {seed}: alpha extremes differ from reference rows"));
        }
    }
    if slowest >= 60.0 {
        failures.push(format!("slowest seed took {slowest:.1} s"));
    }
    check(failures.is_empty(), || failures.join("; "))?;
    Ok(format!(
        "seeds 0-9, min drop {min_drop:.3}, min recovered {min_rec:.2}, min retained {min_ret:.2}, slowest seed {slowest:.2} s"
    ))
}

fn criterion_8() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut config = LabConfig::new(seed);
        config.modes = vec![MergeMode::General];
        config.alpha_grid = vec![0.5];
        let n_all = config.scenario.geometry.n_dev;
        config.example_counts = vec![5, n_all];
        let report = run_forgetting_experiment(&config).map_err(|e| e.to_string())?;
        let delta = max_weight_delta(report.weights_for(5).unwrap(), report.weights_for(n_all).unwrap());
        worst = worst.max(delta);
        check(delta < 0.2, || format!("seed {seed}: max |dw| {delta:.3}"))?;
    }
    Ok(format!("seeds 0-9, worst max |dw| {worst:.3} (5 vs 100 examples)"))
}

// --------------------------------------------------------------------- CLI

fn run(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cocktail"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let cfg = ToyArchConfig::byte_level(ArchKind::Decoder);
    let arch = d.join("arch.json");
    std::fs::write(&arch, serde_json::to_string(&cfg).unwrap()).unwrap();
    let examples = d.join("examples.jsonl");
    let rows = [("The sky is", " blue"), ("2+3=", "5"), ("Paris is in", " France"), ("abc", "def"), ("yes or", " no")];
    let jsonl: String = rows
        .iter()
        .map(|(i, t)| serde_json::json!({"input": i, "target": t}).to_string() + "\n")
        .collect();
    std::fs::write(&examples, jsonl).unwrap();
    let names = ["target", "base", "peer1", "peer2"];
    let paths: Vec<PathBuf> = names.iter().map(|n| d.join(format!("{n}.safetensors"))).collect();
    let maps: Vec<TensorMap> = (0..4).map(|i| init_weights(&cfg, 40 + i as u64).unwrap()).collect();
    for (m, path) in maps.iter().zip(&paths) {
        write_checkpoint(m, path).map_err(|e| e.to_string())?;
    }

    let (losses, weights, out) = (d.join("losses.json"), d.join("weights.json"), d.join("merged.safetensors"));
    let mut eval = vec!["eval", "--examples", p(&examples), "--arch", p(&arch), "--candidates"];
    eval.extend(paths.iter().map(|x| p(x)));
    eval.extend(["-o", p(&losses)]);
    run(&eval)?;
    run(&["weights", "--losses", p(&losses), "--target-id", "target", "-o", p(&weights)])?;
    let mut merge = vec!["merge", "--mode", "general", "--target", p(&paths[0]), "--weights-file", p(&weights), "--candidates"];
    merge.extend(paths[1..].iter().map(|x| p(x)));
    merge.extend(["-o", p(&out)]);
    run(&merge)?;

    // The same pipeline through the library.
    let set = FewShotSet::from_jsonl("examples", &examples).map_err(|e| e.to_string())?;
    let named: Vec<(String, &TensorMap)> = names.iter().map(|n| n.to_string()).zip(&maps).collect();
    let report = score_candidates(&named, &cfg, &set).map_err(|e| e.to_string())?;
    let pool = drop_target_candidate(&report, "target").map_err(|e| e.to_string())?;
    let w = solve_weights(&pool, 1.0).map_err(|e| e.to_string())?;
    let refs: Vec<&TensorMap> = maps[1..].iter().collect();
    let want = cocktail_merge(&maps[0], &refs, &w.values(), 0.5).map_err(|e| e.to_string())?;

    let got = read_checkpoint(&out).map_err(|e| e.to_string())?;
    let mut max_err = 0.0f64;
    for name in want.names() {
        let g = got.to_f64(name).map_err(|e| e.to_string())?;
        for (a, b) in g.iter().zip(want.to_f64(name).unwrap()) {
            max_err = max_err.max((a - b).abs());
        }
    }
    check(got.names().eq(want.names()), || "tensor sets differ".into())?;
    check(max_err <= 1e-6, || format!("CLI output differs by {max_err:e}"))?;

    let sidecar: MergeProvenance = serde_json::from_str(
        &std::fs::read_to_string(d.join("merged.safetensors.provenance.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| format!("sidecar: {e}"))?;
    let hex = |m: &TensorMap| m.content_hash_hex().unwrap();
    let target = sidecar.target.as_ref().ok_or("sidecar has no target")?;
    let solver = sidecar.solver.as_ref().ok_or("sidecar has no solver record")?;
    let complete = sidecar.format_version == 1
        && !sidecar.version.is_empty()
        && sidecar.mode == MergeMode::General
        && sidecar.alpha == 0.5
        && target.sha256 == hex(&maps[0])
        && sidecar.candidates.iter().zip(&maps[1..]).all(|(c, m)| c.sha256 == hex(m))
        && sidecar.weights.iter().zip(w.weights.iter()).all(|(a, b)| a.0 == b.0 && a.1 == b.1)
        && sidecar.candidates.iter().all(|c| c.weight == sidecar.weights.get(&c.id).copied())
        && sidecar.summation_order.len() == 3
        && solver.tau == 1.0
        && !solver.joint
        && solver.losses.len() == 3
        && sidecar.output.sha256 == hex(&got);
    check(complete, || format!("incomplete sidecar: {sidecar:?}"))?;
    Ok(format!("eval -> weights -> merge, max deviation {max_err:.0e}, sidecar complete"))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("merge-oracle equivalence", Duration::from_secs(10), criterion_1),
        ("weight-solver properties", Duration::from_secs(5), criterion_2),
        ("identity and flattening algebra", Duration::from_secs(5), criterion_3),
        ("checkpoint format", Duration::from_secs(5), criterion_4),
        ("evaluator analytics", Duration::from_secs(10), criterion_5),
        ("MLP gradient check", Duration::from_secs(5), criterion_6),
        ("forgetting and recovery", Duration::from_secs(600), criterion_7),
        ("example-count stability", Duration::from_secs(30), criterion_8),
        ("end-to-end CLI", Duration::from_secs(10), criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > *limit => Err(format!("{detail}; took {elapsed:.2?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {} PASS  {name} [{elapsed:.2?}]: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {name} [{elapsed:.2?}]: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
