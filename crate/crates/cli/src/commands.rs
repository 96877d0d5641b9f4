use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crackseg::dataset::{
    build_training_set, generate_synthetic_corpus, write_sample_index, LabeledImage, Ratio,
};
use crackseg::evaluation::{evaluate_corpus, EvalReport};
use crackseg::experiments::{
    hybrid_split, run_experiment, sweep_ratio as run_ratio_sweep,
    sweep_structure as run_structure_sweep, sweep_table, RunOutcome,
};
use crackseg::inference::{binarize, normalize_votes, predict_image, BinaryPrediction};
use crackseg::io::{
    load_checkpoint, load_corpus, load_image, load_mask, read_manifest, save_binary_mask,
    save_checkpoint, save_probability_map, save_raw_grid, write_image_png, write_manifest,
    write_mask_png, CheckpointMeta, Manifest,
};
use crackseg::network::{build_network, train as train_network, NetworkConfig};
use crackseg::Error;

use crate::config::RunConfig;
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Creates the output directory and writes the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    let path = cfg.out.join("config.resolved.ini");
    fs::write(&path, cfg.render()).map_err(|e| io_err(&path, e))?;
    Ok(cfg.out.clone())
}

fn manifest_for(root: &Path, explicit: Option<&Path>) -> Result<Manifest, CliError> {
    let path = explicit.map_or_else(|| root.join("manifest.txt"), Path::to_path_buf);
    if !path.exists() {
        return Err(CliError::Core(Error::Data(format!(
            "no manifest at {} (pass --manifest)",
            path.display()
        ))));
    }
    Ok(read_manifest(&path)?)
}

fn load_split(
    root: &Path,
    manifest: Option<&Path>,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>), CliError> {
    let m = manifest_for(root, manifest)?;
    Ok((load_corpus(root, &m.train)?, load_corpus(root, &m.test)?))
}

fn synthetic_split(cfg: &RunConfig) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>), CliError> {
    let mut all = generate_synthetic_corpus(
        &cfg.synthetic_spec(),
        cfg.synthetic_train + cfg.synthetic_test,
        cfg.synthetic_seed,
    )?;
    let test = all.split_off(cfg.synthetic_train);
    Ok((all, test))
}

/// Training and test corpora of the configured source.
fn corpora(cfg: &RunConfig) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>), CliError> {
    if cfg.synthetic {
        return synthetic_split(cfg);
    }
    let root = cfg
        .data
        .as_deref()
        .ok_or_else(|| CliError::Config("no dataset given (use --data or --synthetic)".into()))?;
    load_split(root, cfg.manifest.as_deref())
}

fn ratio_label(pos: usize, neg: usize) -> String {
    if pos == 0 {
        return "1:∞".into();
    }
    let r = neg as f64 / pos as f64;
    if (r - r.round()).abs() < 0.005 {
        format!("1:{}", r.round())
    } else {
        format!("1:{r:.2}")
    }
}

pub fn build_dataset(cfg: &RunConfig) -> Result<(), CliError> {
    let out = prepare_out(cfg)?;
    let (train, _) = corpora(cfg)?;
    let set = build_training_set(&train, cfg.geometry(), &cfg.experiment().sampling)?;
    write_sample_index(&set, &out.join("samples.txt"))?;
    let crack_pixels: usize = train.iter().map(|li| li.mask.count_positive()).sum();
    let total_pixels: usize = train.iter().map(|li| li.mask.values().len()).sum();
    println!("Training samples ({} images)", train.len());
    println!("  Positive            {:>10}", set.positives());
    println!("  Negative            {:>10}", set.negatives());
    println!("  Total               {:>10}", set.len());
    println!(
        "  Positive : Negative {:>10}",
        ratio_label(set.positives(), set.negatives())
    );
    println!(
        "  Crack pixels        {:>10} of {} (natural {})",
        crack_pixels,
        total_pixels,
        ratio_label(crack_pixels, total_pixels - crack_pixels)
    );
    Ok(())
}

fn append_trace(
    path: &Path,
    trace: &crackseg::network::TrainingTrace,
    fresh: bool,
) -> Result<(), CliError> {
    if fresh || !path.exists() {
        return Ok(trace.write_csv(path)?);
    }
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    for r in &trace.records {
        writeln!(
            f,
            "{},{:.9},{:.9},{:.9}",
            r.iteration, r.cross_entropy, r.penalty, r.total
        )
        .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let out = prepare_out(cfg)?;
    let (train, _) = corpora(cfg)?;
    let exp = cfg.experiment();
    let set = build_training_set(&train, exp.geometry, &exp.sampling)?;
    let (mut model, start) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.expect(set.channels(), exp.geometry.structure)?;
            (ck.model, ck.meta.iterations)
        }
        None => (
            build_network::<f32>(
                &NetworkConfig {
                    input_channels: set.channels(),
                    geometry: exp.geometry,
                    dropout_p: exp.train.dropout_p,
                    beta: exp.train.beta,
                },
                exp.train.seed,
            )?,
            0,
        ),
    };
    let remaining = exp.train.iterations.saturating_sub(start);
    let run = crackseg::network::TrainConfig {
        iterations: remaining,
        ..exp.train.clone()
    };
    let meta = |iterations| CheckpointMeta {
        iterations,
        seed: exp.train.seed,
        ratio: exp.sampling.ratio,
    };
    println!(
        "training on {} samples ({} positive), iterations {}..{}",
        set.len(),
        set.positives(),
        start,
        start + remaining
    );
    let trace = train_network(&mut model, &set, &run, start, |m, it| {
        save_checkpoint(
            &out.join(format!("checkpoint_{it:06}.ckpt")),
            m,
            &meta(it),
            true,
        )?;
        println!("  iteration {it}");
        Ok(())
    })?;
    save_checkpoint(
        &out.join("model.ckpt"),
        &model,
        &meta(start + remaining),
        true,
    )?;
    append_trace(&out.join("trace.csv"), &trace, start == 0)?;
    if let Some(last) = trace.records.last() {
        println!(
            "final loss L' = {:.6} (L = {:.6})",
            last.total, last.cross_entropy
        );
    }
    Ok(())
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

pub fn predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    images: &[PathBuf],
    raw: bool,
) -> Result<(), CliError> {
    let out = prepare_out(cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    for path in images {
        let image = load_image(path)?;
        let votes = predict_image(&ck.model, &image, cfg.inference_batch)?;
        let prob = normalize_votes(&votes, cfg.norm_mode)?;
        let bin = binarize(&prob, cfg.threshold)?;
        let stem = stem_of(path);
        save_probability_map(&prob, &out.join(format!("{stem}.prob.png")))?;
        save_binary_mask(&bin, &out.join(format!("{stem}.mask.png")))?;
        if raw {
            save_raw_grid(
                &out.join(format!("{stem}.prob.raw")),
                prob.width(),
                prob.height(),
                prob.values(),
            )?;
        }
        println!("{stem}: {} crack pixels", bin.count_positive());
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            stems.push(stem_of(&path));
        }
    }
    stems.sort();
    Ok(stems)
}

fn write_report(out: &Path, name: &str, report: &EvalReport) -> Result<(), CliError> {
    report.write_files(
        &out.join(format!("{name}.csv")),
        &out.join(format!("{name}.txt")),
    )?;
    print!("{}", report.render_table());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, pred_dir: &Path, gt_dir: &Path) -> Result<(), CliError> {
    let out = prepare_out(cfg)?;
    let gt_root = if gt_dir.join("masks").is_dir() {
        gt_dir.join("masks")
    } else {
        gt_dir.to_path_buf()
    };
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for stem in png_stems(&gt_root)? {
        let candidates = [
            pred_dir.join(format!("{stem}.mask.png")),
            pred_dir.join(format!("{stem}.png")),
        ];
        match candidates.iter().find(|p| p.exists()) {
            Some(p) => {
                let gt = load_mask(&gt_root.join(format!("{stem}.png")))?;
                let pred = BinaryPrediction::from_mask(&load_mask(p)?, cfg.threshold);
                pairs.push((stem, pred, gt));
            }
            None => missing.push(stem),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Core(Error::Data(format!(
            "no prediction for: {}",
            missing.join(", ")
        ))));
    }
    let report = evaluate_corpus(&pairs, cfg.experiment().tolerance, cfg.aggregation)?;
    write_report(&out, "report", &report)
}

fn write_sweep<K: std::fmt::Display>(
    out: &Path,
    name: &str,
    label: &str,
    rows: &[(K, RunOutcome)],
) -> Result<(), CliError> {
    let table = sweep_table(label, rows);
    let path = out.join(format!("{name}.txt"));
    fs::write(&path, &table).map_err(|e| io_err(&path, e))?;
    for (k, run) in rows {
        let p = out.join(format!("{name}_{k}.csv"));
        fs::write(&p, run.report.to_csv()).map_err(|e| io_err(&p, e))?;
    }
    print!("{table}");
    Ok(())
}

pub fn sweep_structure(cfg: &RunConfig, sizes: &[usize]) -> Result<(), CliError> {
    if let Some(s) = sizes.iter().find(|&&s| s % 2 == 0) {
        return Err(CliError::Config(format!("structure size {s} is even")));
    }
    let out = prepare_out(cfg)?;
    let (train, test) = corpora(cfg)?;
    let rows = run_structure_sweep(&train, &test, &cfg.experiment(), sizes)?;
    write_sweep(&out, "sweep_structure", "s", &rows)
}

pub fn sweep_ratio(cfg: &RunConfig, ratios: &[String], total: usize) -> Result<(), CliError> {
    let ratios = ratios
        .iter()
        .map(|r| Ratio::parse(r).map_err(|e| CliError::Config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let out = prepare_out(cfg)?;
    let (train, test) = corpora(cfg)?;
    let rows = run_ratio_sweep(&train, &test, &cfg.experiment(), &ratios, total)?;
    write_sweep(&out, "sweep_ratio", "R", &rows)
}

pub fn cross_test(
    cfg: &RunConfig,
    train_data: Option<&Path>,
    test_data: Option<&Path>,
    hybrid: bool,
) -> Result<(), CliError> {
    let out = prepare_out(cfg)?;
    let (a_train, a_test) = match train_data {
        Some(root) => load_split(root, None)?,
        None => corpora(cfg)?,
    };
    let (b_train, b_test) = match test_data {
        Some(root) => load_split(root, None)?,
        None => (a_train.clone(), a_test),
    };
    let train = if hybrid {
        let h = hybrid_split(&a_train, &b_train)?;
        let path = out.join("hybrid_stems.txt");
        let stems: Vec<&str> = h.iter().map(|li| li.stem.as_str()).collect();
        fs::write(&path, stems.join("\n") + "\n").map_err(|e| io_err(&path, e))?;
        h
    } else {
        a_train
    };
    let channels = train.first().map_or(0, |li| li.image.channels());
    let rule = if channels == 1 {
        "RGB test images are converted to luma 0.299R+0.587G+0.114B"
    } else {
        "gray test images are replicated to 3 channels"
    };
    println!("training channels: {channels}; {rule}");
    let resolved = out.join("config.resolved.ini");
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(&resolved)
        .map_err(|e| io_err(&resolved, e))?;
    writeln!(f, "# cross-test: training channels {channels}; {rule}")
        .map_err(|e| io_err(&resolved, e))?;
    let run = run_experiment(&train, &b_test, &cfg.experiment())?;
    write_report(&out, "cross_test", &run.report)
}

pub fn gen_synthetic(
    cfg: &RunConfig,
    count: usize,
    test_count: Option<usize>,
) -> Result<(), CliError> {
    let out = prepare_out(cfg)?;
    let n_test = test_count.unwrap_or(cfg.synthetic_test);
    let corpus =
        generate_synthetic_corpus(&cfg.synthetic_spec(), count + n_test, cfg.synthetic_seed)?;
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
    }
    for li in &corpus {
        write_image_png(
            &li.image,
            &out.join("images").join(format!("{}.png", li.stem)),
        )?;
        write_mask_png(
            &li.mask,
            &out.join("masks").join(format!("{}.png", li.stem)),
        )?;
    }
    let stems: Vec<String> = corpus.iter().map(|li| li.stem.clone()).collect();
    let manifest = Manifest {
        train: stems[..count].to_vec(),
        test: stems[count..].to_vec(),
    };
    write_manifest(&out.join("manifest.txt"), &manifest)?;
    println!(
        "wrote {} images ({} train, {} test) to {}",
        corpus.len(),
        count,
        n_test,
        out.display()
    );
    Ok(())
}
