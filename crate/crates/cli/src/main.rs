//! geoproto: fit class-conditional diffusion manifolds over labeled feature
//! vectors, classify queries by geodesic prototype matching, benchmark the
//! embed+score path, and generate synthetic evaluation manifolds.
//!
//! Exit codes: 0 success, 1 user/data error, 2 internal invariant violation.

use clap::{Parser, Subcommand};
use geoproto_core::{
    classify_batch, ece, extend, fit_bundle, gen_circles, gen_swiss_roll, load_feature_set,
    load_model, parse_config, proto::softmax, save_model, spearman, swiss_arclen, CandidatePool,
    Error, FeatureFormat, FitConfig, Generator, MatchMetric, Result,
};
use ndarray::ArrayView1;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "geoproto",
    version,
    about = "Geodesic prototype matching over class-conditional diffusion manifolds"
)]
struct Cli {
    /// Worker threads for per-class fits and batch classification
    /// (default: available parallelism). Results are identical for any
    /// thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-class manifolds and project prototypes into them.
    Fit {
        /// Labeled feature file.
        #[arg(long)]
        features: PathBuf,
        /// Input format: csv | raw-f32.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Key=value config file (defaults applied when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output model path.
        #[arg(long)]
        out: PathBuf,
        /// Optional candidate-pool CSV (defaults to the class features).
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Classify queries against a fitted model.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Output CSV of predictions and explanation records.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure per-query embed+score latency and report quality metrics.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Intrinsic-coordinate sidecar written by `synth --intrinsic`;
        /// enables the geodesic rank-agreement report.
        #[arg(long)]
        intrinsic: Option<PathBuf>,
        /// Latency repetitions over the query set.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Optional report file (the report always goes to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic manifold data set as feature CSV.
    Synth {
        /// swiss-roll | circles.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inner radius (circles).
        #[arg(long, default_value_t = 1.0)]
        r1: f64,
        /// Outer radius (circles).
        #[arg(long, default_value_t = 1.3)]
        r2: f64,
        #[arg(long)]
        out: PathBuf,
        /// Optional intrinsic-coordinate sidecar for bench oracles.
        #[arg(long)]
        intrinsic: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli)));
    let code = match outcome {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(_) => {
            eprintln!("error: internal invariant violation");
            2
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Fit {
            features,
            format,
            config,
            out,
            candidates,
        } => run_fit(
            &features,
            &format,
            config.as_deref(),
            &out,
            candidates.as_deref(),
        ),
        Command::Classify {
            model,
            features,
            format,
            out,
        } => run_classify(&model, &features, &format, &out),
        Command::Bench {
            model,
            queries,
            format,
            intrinsic,
            repeat,
            out,
        } => run_bench(
            &model,
            &queries,
            &format,
            intrinsic.as_deref(),
            repeat,
            out.as_deref(),
        ),
        Command::Synth {
            kind,
            n,
            noise,
            seed,
            r1,
            r2,
            out,
            intrinsic,
        } => run_synth(&kind, n, noise, seed, [r1, r2], &out, intrinsic.as_deref()),
    }
}

fn parse_format(s: &str) -> Result<FeatureFormat> {
    match s {
        "csv" => Ok(FeatureFormat::Csv),
        "raw-f32" => Ok(FeatureFormat::RawF32),
        other => Err(Error::InvalidConfig(format!(
            "unknown format '{other}' (csv|raw-f32)"
        ))),
    }
}

fn run_fit(
    features: &Path,
    format: &str,
    config: Option<&Path>,
    out: &Path,
    candidates: Option<&Path>,
) -> Result<()> {
    let fs = load_feature_set(features, parse_format(format)?)?;
    let cfg = match config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)?,
        None => FitConfig::default(),
    };
    let pool = candidates
        .map(|p| -> Result<CandidatePool> {
            let cand = load_feature_set(p, FeatureFormat::Csv)?;
            Ok(CandidatePool::from_class_features(&cand))
        })
        .transpose()?;

    let (bundle, report) = fit_bundle(&fs, &cfg, pool.as_ref())?;
    save_model(&bundle, out)?;

    let mut text = String::new();
    text.push_str(&format!(
        "fit: n={} d={} classes={}\n",
        fs.n(),
        fs.dim(),
        fs.class_count
    ));
    text.push_str(&report.render());
    text.push_str(&format!("model: {}\n", out.display()));
    print!("{text}");
    Ok(())
}

fn run_classify(model: &Path, features: &Path, format: &str, out: &Path) -> Result<()> {
    let bundle = load_model(model)?;
    let queries = load_feature_set(features, parse_format(format)?)?;
    let explanations = classify_batch(
        queries.features.view(),
        &bundle.manifolds,
        &bundle.prototypes,
        bundle.config.nystrom_mode,
        MatchMetric::Diffusion,
    )?;

    let classes: Vec<u32> = bundle.manifolds.keys().copied().collect();
    let mut csv = String::from("query,predicted");
    for c in &classes {
        csv.push_str(&format!(",score_{c}"));
    }
    csv.push_str(",nearest_prototype,nearest_distance\n");
    for (i, e) in explanations.iter().enumerate() {
        csv.push_str(&format!("{i},{}", e.predicted));
        for &(_, s) in &e.scores {
            csv.push_str(&format!(",{s}"));
        }
        let best = e.best_match();
        csv.push_str(&format!(",{},{}\n", best.prototype, best.distance));
    }
    std::fs::write(out, csv)?;
    println!(
        "classified {} queries -> {}",
        explanations.len(),
        out.display()
    );
    Ok(())
}

/// Intrinsic sidecar: `generator,<kind>` header, two coordinates per row.
fn load_intrinsic(path: &Path) -> Result<(Generator, Vec<[f64; 2]>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::MalformedFile {
        path: path.display().to_string(),
        detail: "empty intrinsic file".into(),
    })?;
    let kind = header
        .strip_prefix("generator,")
        .and_then(Generator::parse)
        .ok_or_else(|| Error::MalformedFile {
            path: path.display().to_string(),
            detail: "header must be 'generator,<swiss_roll|circles>'".into(),
        })?;
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let a: f64 = it
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::MalformedFile {
                path: path.display().to_string(),
                detail: format!("bad intrinsic row '{line}'"),
            })?;
        let b: f64 = it
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::MalformedFile {
                path: path.display().to_string(),
                detail: format!("bad intrinsic row '{line}'"),
            })?;
        rows.push([a, b]);
    }
    Ok((kind, rows))
}

fn oracle_geodesic(kind: Generator, a: &[f64; 2], b: &[f64; 2]) -> f64 {
    match kind {
        Generator::SwissRoll => {
            let da = swiss_arclen(a[0]) - swiss_arclen(b[0]);
            da.hypot(a[1] - b[1])
        }
        Generator::Circles => {
            let r = a[0];
            let mut dt = (a[1] - b[1]).abs() % (2.0 * std::f64::consts::PI);
            if dt > std::f64::consts::PI {
                dt = 2.0 * std::f64::consts::PI - dt;
            }
            r * dt
        }
    }
}

fn run_bench(
    model: &Path,
    queries_path: &Path,
    format: &str,
    intrinsic: Option<&Path>,
    repeat: usize,
    out: Option<&Path>,
) -> Result<()> {
    let bundle = load_model(model)?;
    let queries = load_feature_set(queries_path, parse_format(format)?)?;
    let mode = bundle.config.nystrom_mode;

    // Quality metrics, computed once; independent of --repeat.
    let explanations = classify_batch(
        queries.features.view(),
        &bundle.manifolds,
        &bundle.prototypes,
        mode,
        MatchMetric::Diffusion,
    )?;
    let mut correct = Vec::with_capacity(queries.n());
    let mut confidences = Vec::with_capacity(queries.n());
    for (e, &label) in explanations.iter().zip(&queries.labels) {
        correct.push(e.predicted == label);
        let scores: Vec<f64> = e.scores.iter().map(|&(_, s)| s).collect();
        let probs = softmax(&scores);
        confidences.push(probs.iter().cloned().fold(0.0, f64::max));
    }
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    let calibration = ece(&confidences, &correct, 10);

    let mut report = String::new();
    report.push_str(&format!("queries = {}\n", queries.n()));
    report.push_str(&format!("classes = {}\n", bundle.manifolds.len()));
    report.push_str(&format!("repeat = {repeat}\n"));
    report.push_str(&format!("accuracy = {accuracy:.6}\n"));
    report.push_str(&format!("ece = {calibration:.6}\n"));

    if let Some(intrinsic_path) = intrinsic {
        let (kind, coords) = load_intrinsic(intrinsic_path)?;
        if coords.len() != queries.n() {
            return Err(Error::MalformedFile {
                path: intrinsic_path.display().to_string(),
                detail: format!(
                    "{} intrinsic rows for {} queries",
                    coords.len(),
                    queries.n()
                ),
            });
        }
        // Same-class pairs, deterministically sampled.
        let mut state = 0x5eed_5eedu64;
        let mut next = |m: u64| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 33) % m
        };
        let n = queries.n() as u64;
        let mut diffusion = Vec::new();
        let mut euclidean = Vec::new();
        let mut geodesic = Vec::new();
        let mut embedded: std::collections::BTreeMap<u32, Vec<Option<ndarray::Array1<f64>>>> =
            bundle
                .manifolds
                .keys()
                .map(|&c| (c, vec![None; queries.n()]))
                .collect();
        let mut embed = |class: u32, idx: usize, q: ArrayView1<f64>| -> ndarray::Array1<f64> {
            let slot = &mut embedded.get_mut(&class).unwrap()[idx];
            if slot.is_none() {
                *slot = Some(extend(&bundle.manifolds[&class], q, mode).coords);
            }
            slot.clone().unwrap()
        };
        let mut attempts = 0;
        while diffusion.len() < 20_000 && attempts < 200_000 {
            attempts += 1;
            let i = next(n) as usize;
            let j = next(n) as usize;
            if i == j || queries.labels[i] != queries.labels[j] {
                continue;
            }
            let class = queries.labels[i];
            let a = embed(class, i, queries.features.row(i));
            let b = embed(class, j, queries.features.row(j));
            diffusion.push((&a - &b).mapv(|v| v * v).sum().sqrt());
            euclidean.push(geoproto_core::graph::euclid(
                queries.features.row(i),
                queries.features.row(j),
            ));
            geodesic.push(oracle_geodesic(kind, &coords[i], &coords[j]));
        }
        if diffusion.len() >= 2 {
            let sd = spearman(&diffusion, &geodesic)?;
            let se = spearman(&euclidean, &geodesic)?;
            report.push_str(&format!("spearman_diffusion = {sd:.6}\n"));
            report.push_str(&format!("spearman_euclidean = {se:.6}\n"));
        }
    }

    // Latency: one classify per query per repetition, timed individually.
    let mut samples_ms = Vec::with_capacity(queries.n() * repeat);
    for _ in 0..repeat {
        for q in queries.features.outer_iter() {
            let t0 = Instant::now();
            let e = geoproto_core::classify(
                q,
                &bundle.manifolds,
                &bundle.prototypes,
                mode,
                MatchMetric::Diffusion,
            )?;
            std::hint::black_box(e.predicted);
            samples_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    samples_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = samples_ms[samples_ms.len() / 2];
    let p95_idx = (((samples_ms.len() as f64) * 0.95) as usize).min(samples_ms.len() - 1);
    let p95 = samples_ms[p95_idx];
    report.push_str(&format!("median_ms = {median:.4}\n"));
    report.push_str(&format!("p95_ms = {p95:.4}\n"));

    print!("{report}");
    if let Some(path) = out {
        std::fs::write(path, &report)?;
    }
    Ok(())
}

fn run_synth(
    kind: &str,
    n: usize,
    noise: f64,
    seed: u64,
    radii: [f64; 2],
    out: &Path,
    intrinsic: Option<&Path>,
) -> Result<()> {
    let set = match kind {
        "swiss-roll" | "swiss_roll" => gen_swiss_roll(n, noise, seed),
        "circles" => gen_circles(n, radii, noise, seed),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown generator '{other}' (swiss-roll|circles)"
            )))
        }
    };
    geoproto_core::features_io::write_feature_csv(out, set.features.view(), &set.labels)?;
    if let Some(path) = intrinsic {
        let mut text = format!("generator,{}\n", set.generator.as_str());
        for row in set.intrinsic.outer_iter() {
            text.push_str(&format!("{},{}\n", row[0], row[1]));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(text.as_bytes())?;
    }
    println!(
        "synth {}: n={} d={} -> {}",
        set.generator.as_str(),
        set.features.nrows(),
        set.features.ncols(),
        out.display()
    );
    Ok(())
}
