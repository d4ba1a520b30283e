use std::collections::HashSet;
use std::path::{Path, PathBuf};

use cocktail::checkpoint::{read_checkpoint, TensorMap};
use cocktail::eval::{score_candidates, ToyArchConfig};
use cocktail::lab::{default_alpha_grid, run_forgetting_experiment, LabConfig, Scenario};
use cocktail::merge::{
    check_weights, merge_to_file_with_provenance, sidecar_path, MergeMode, MergeOptions, MergePlan, MergeRecipe,
    NamedInput, SolverRecord, DEFAULT_ALPHA,
};
use cocktail::solver::{
    drop_target_candidate, load_external_losses, pool_examples, solve_weights, FewShotSet, LossReport, SolverError,
    WeightVector,
};

use crate::failure::Failure;
use crate::{EvalArgs, LabArgs, MergeArgs, Mode, WeightsArgs};

pub fn set_threads(n: usize) -> Result<(), Failure> {
    if n == 0 {
        return Err(Failure::invalid("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(Failure::runtime)
}

/// Id a checkpoint is known by: the file stem, the directory name for a
/// sharded directory, or the index name without `.index.json`.
pub fn input_id(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    if let Some(stem) = name.strip_suffix(".index.json") {
        return stem.to_string();
    }
    if path.is_dir() {
        return name;
    }
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or(name)
}

fn unique_ids(paths: &[PathBuf]) -> Result<Vec<String>, Failure> {
    let ids: Vec<String> = paths.iter().map(|p| input_id(p)).collect();
    let mut seen = HashSet::new();
    for id in &ids {
        if !seen.insert(id) {
            return Err(Failure::invalid(format!("two inputs share the id {id:?}; rename one of them")));
        }
    }
    Ok(ids)
}

fn read(path: &Path) -> Result<TensorMap, Failure> {
    read_checkpoint(path).map_err(|e| Failure::from(e).context(format!("reading {}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::runtime(e).context(format!("reading {}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::runtime(e).context(format!("writing {}", path.display())))
}

fn emit(output: Option<&Path>, text: &str) -> Result<(), Failure> {
    match output {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn check_alpha(alpha: f64) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Failure::invalid(format!("alpha must lie in [0, 1] (got {alpha})")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<(), Failure> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SolverError::Tau(tau).into());
    }
    Ok(())
}

enum WeightSource {
    Inline(Vec<f64>),
    File(PathBuf),
}

pub fn merge(args: MergeArgs, threads: Option<usize>) -> Result<(), Failure> {
    // Flag validation happens before any file is touched.
    let forbid = |present: bool, flag: &str, mode: &str| -> Result<(), Failure> {
        if present {
            return Err(Failure::invalid(format!("{flag} is not used in {mode} mode")));
        }
        Ok(())
    };
    let require = |present: bool, flag: &str, mode: &str| -> Result<(), Failure> {
        if !present {
            return Err(Failure::invalid(format!("{mode} mode needs {flag}")));
        }
        Ok(())
    };
    let weight_source = match (args.weights.clone(), args.weights_file.clone()) {
        (Some(w), None) => Some(WeightSource::Inline(w)),
        (None, Some(p)) => Some(WeightSource::File(p)),
        _ => None,
    };
    let name = match args.mode {
        Mode::General => "general",
        Mode::Mono => "mono",
        Mode::ZeroShot => "zero-shot",
    };
    match args.mode {
        Mode::Mono => {
            require(args.target.is_some(), "--target", name)?;
            require(args.base.is_some(), "--base", name)?;
            forbid(!args.candidates.is_empty(), "--candidates", name)?;
            forbid(weight_source.is_some(), "--weights/--weights-file", name)?;
        }
        Mode::General | Mode::ZeroShot => {
            if args.mode == Mode::General {
                require(args.target.is_some(), "--target", name)?;
            } else {
                forbid(args.target.is_some(), "--target", name)?;
                forbid(args.alpha.is_some(), "--alpha", name)?;
            }
            forbid(args.base.is_some(), "--base (list it under --candidates)", name)?;
            require(!args.candidates.is_empty(), "--candidates", name)?;
            require(weight_source.is_some(), "--weights or --weights-file", name)?;
        }
    }
    let alpha = args.alpha.unwrap_or(DEFAULT_ALPHA);
    check_alpha(alpha)?;
    let candidate_ids = unique_ids(&args.candidates)?;
    if let Some(WeightSource::Inline(w)) = &weight_source {
        if w.len() != args.candidates.len() {
            return Err(Failure::invalid(format!(
                "expected {} weights (one per candidate), got {}",
                args.candidates.len(),
                w.len()
            )));
        }
        check_weights(w)?;
    }

    let (weights, solver) = match weight_source {
        Some(WeightSource::Inline(w)) => (w, None),
        Some(WeightSource::File(path)) => {
            let vector: WeightVector = serde_json::from_str(&read_text(&path)?)
                .map_err(|e| Failure::invalid(format!("{}: not a weight vector: {e}", path.display())))?;
            let mut extra: Vec<&str> = vector
                .weights
                .keys()
                .map(String::as_str)
                .filter(|id| !candidate_ids.iter().any(|c| c == id))
                .collect();
            let missing: Vec<&str> = candidate_ids
                .iter()
                .map(String::as_str)
                .filter(|id| !vector.weights.contains_key(*id))
                .collect();
            if !missing.is_empty() || !extra.is_empty() {
                extra.sort_unstable();
                return Err(Failure::invalid(format!(
                    "{} does not match the candidates: missing {missing:?}, unexpected {extra:?}",
                    path.display()
                )));
            }
            let w: Vec<f64> = candidate_ids.iter().map(|id| vector.weights[id.as_str()]).collect();
            check_weights(&w)?;
            let record = SolverRecord { tau: vector.tau, joint: vector.joint, losses: vector.losses.clone() };
            (w, Some(record))
        }
        None => (Vec::new(), None),
    };

    let target = args.target.as_deref().map(read).transpose()?;
    let (candidate_paths, candidate_ids) = match &args.base {
        Some(base) => (vec![base.clone()], vec![input_id(base)]),
        None => (args.candidates.clone(), candidate_ids),
    };
    let candidate_maps = candidate_paths.iter().map(|p| read(p)).collect::<Result<Vec<_>, _>>()?;
    let recipe = match args.mode {
        Mode::General => MergeRecipe::general(alpha, weights),
        Mode::Mono => MergeRecipe::mono(alpha),
        Mode::ZeroShot => MergeRecipe::zero_shot(weights),
    };
    let refs: Vec<&TensorMap> = candidate_maps.iter().collect();
    let plan = MergePlan::new(recipe, target.as_ref(), &refs)?;
    let target_input = args.target.as_ref().zip(target.as_ref()).map(|(path, map)| NamedInput {
        id: input_id(path),
        path: path.clone(),
        map,
    });
    let candidate_inputs: Vec<NamedInput<'_>> = candidate_ids
        .into_iter()
        .zip(&candidate_paths)
        .zip(&candidate_maps)
        .map(|((id, path), map)| NamedInput { id, path: path.clone(), map })
        .collect();
    merge_to_file_with_provenance(
        &plan,
        target_input.as_ref(),
        &candidate_inputs,
        solver,
        &args.output,
        &MergeOptions { threads },
    )?;
    eprintln!(
        "wrote {} and {}",
        args.output.display(),
        sidecar_path(&args.output).display()
    );
    Ok(())
}

/// Loads the example files, pooling them when asked.
fn load_examples(paths: &[PathBuf], pool: bool) -> Result<FewShotSet, Failure> {
    if paths.is_empty() {
        return Err(Failure::invalid("--examples is required"));
    }
    if paths.len() > 1 && !pool {
        return Err(Failure::invalid("several --examples files need --pool"));
    }
    let sets = paths
        .iter()
        .map(|p| FewShotSet::from_jsonl(input_id(p), p))
        .collect::<Result<Vec<_>, _>>()?;
    if pool {
        Ok(pool_examples(&sets)?)
    } else {
        Ok(sets.into_iter().next().expect("one set"))
    }
}

fn score(
    examples: &[PathBuf],
    pool: bool,
    arch: &Path,
    candidates: &[(String, PathBuf)],
) -> Result<LossReport, Failure> {
    let set = load_examples(examples, pool)?;
    let config = ToyArchConfig::from_json(&read_text(arch)?)?;
    let maps = candidates.iter().map(|(_, p)| read(p)).collect::<Result<Vec<_>, _>>()?;
    let named: Vec<(String, &TensorMap)> = candidates.iter().map(|(id, _)| id.clone()).zip(&maps).collect();
    Ok(score_candidates(&named, &config, &set)?)
}

pub fn weights(args: WeightsArgs) -> Result<(), Failure> {
    check_tau(args.tau)?;
    let report = match &args.losses {
        Some(path) => {
            let report = load_external_losses(path)?;
            match (&args.target_id, args.joint) {
                (Some(id), false) => drop_target_candidate(&report, id)?,
                (Some(id), true) if report.get(id).is_none() => {
                    return Err(SolverError::MissingCandidate(id.clone()).into());
                }
                _ => report,
            }
        }
        None => {
            let arch = args
                .arch
                .as_deref()
                .ok_or_else(|| Failure::invalid("either --losses or --examples, --arch and --candidates is required"))?;
            if args.candidates.is_empty() {
                return Err(Failure::invalid("--candidates is required when scoring examples"));
            }
            let mut paths = Vec::new();
            if let Some(target) = &args.target {
                paths.push(target.clone());
            }
            paths.extend(args.candidates.iter().cloned());
            let ids = unique_ids(&paths)?;
            let named: Vec<(String, PathBuf)> = ids.into_iter().zip(paths).collect();
            score(&args.examples, args.pool, arch, &named)?
        }
    };
    let mut vector = solve_weights(&report, args.tau)?;
    vector.joint = args.joint;
    let text = serde_json::to_string_pretty(&vector).map_err(Failure::runtime)? + "\n";
    emit(args.output.as_deref(), &text)
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let ids = unique_ids(&args.candidates)?;
    let named: Vec<(String, PathBuf)> = ids.into_iter().zip(args.candidates.iter().cloned()).collect();
    let report = score(&args.examples, args.pool, &args.arch, &named)?;
    emit(args.output.as_deref(), &report.to_json())
}

pub fn lab(args: LabArgs) -> Result<(), Failure> {
    check_tau(args.tau)?;
    let scenario = match &args.scenario {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| Failure::invalid(format!("{}: not a lab scenario: {e}", path.display())))?,
        None => Scenario::preset(&args.preset)?,
    };
    let mut config = LabConfig::new(args.seed);
    config.example_counts = args.examples.clone().unwrap_or_else(|| vec![5, scenario.geometry.n_dev]);
    config.scenario = scenario;
    config.alpha_grid = args.alpha_grid.clone().unwrap_or_else(default_alpha_grid);
    config.modes = args
        .modes
        .iter()
        .map(|m| match m {
            Mode::General => MergeMode::General,
            Mode::Mono => MergeMode::MonoSpecialist,
            Mode::ZeroShot => MergeMode::NoFineTune,
        })
        .collect();
    config.tau = args.tau;
    config.validate()?;
    let report = run_forgetting_experiment(&config)?;
    if let Some(path) = &args.csv {
        write_text(path, &report.to_csv())?;
    }
    if let Some(path) = &args.json {
        write_text(path, &report.to_json())?;
    }
    if let Some(path) = &args.svg {
        write_text(path, &report.to_svg())?;
    }
    if args.csv.is_none() && args.json.is_none() {
        print!("{}", report.to_csv());
    }
    Ok(())
}
