use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::{json, Value};

use geovmf::checkpoint::{Checkpoint, FeatureSource};
use geovmf::density::{adaptive_grid, contours_geojson, hpd_thresholds, AdaptiveConfig, Markers, DECILES};
use geovmf::eval::{evaluate_with, format_table, record_seed, Prediction, PredictionSet};
use geovmf::features::{featurize, load_embeddings, FeaturizerConfig};
use geovmf::fetch::{fetch_geo_articles, FetchConfig};
use geovmf::head::{forward, HeadDims, HeadParams};
use geovmf::ingest::{parse_jsonl, split, write_jsonl, Dataset, ParseMode};
use geovmf::mixture::point_estimate;
use geovmf::sphere::{cart_to_geo, geo_to_cart};
use geovmf::train::{grad_check, train_from, AdamConfig, Example, TrainConfig};
use geovmf::{Error, GeoPoint, PointRule, VmfComponent, VmfMixture};

use crate::manifest::{self, Recorder};
use crate::{
    Cli, CliError, Command, ContoursArgs, EvaluateArgs, FeatureArgs, GradcheckArgs, IngestArgs, PredictArgs,
    ReplayArgs, SampleArgs, SplitArgs, ToyArgs, TrainArgs,
};

type CliResult<T = ()> = std::result::Result<T, CliError>;

pub fn dispatch(cli: &Cli, argv: &[String]) -> CliResult {
    let config = serde_json::to_value(cli).map_err(Error::from)?;
    let mut rec = Recorder::new(cli.command.name(), argv, cli.seed, config);
    if let Some(c) = &cli.config {
        rec.input(c);
    }
    match &cli.command {
        Command::Ingest(a) => ingest(a, &mut rec),
        Command::Split(a) => split_cmd(a, cli.seed, &mut rec),
        Command::Train(a) => train_cmd(a, cli.seed, &mut rec),
        Command::Predict(a) => predict(a, cli.seed, &mut rec),
        Command::Evaluate(a) => evaluate(a, cli.seed, &mut rec),
        Command::Contours(a) => contours(a, &mut rec),
        Command::Sample(a) => sample(a, cli.seed, &mut rec),
        Command::Gradcheck(a) => gradcheck(a, cli.seed, &mut rec),
        Command::Toy(a) => toy(a, cli.seed, &mut rec),
        Command::Replay(a) => replay(a),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_corpus(path: &Path, rec: &mut Recorder) -> CliResult<Dataset> {
    rec.input(path);
    Ok(parse_jsonl(path, ParseMode::Strict)?.dataset)
}

fn ingest(a: &IngestArgs, rec: &mut Recorder) -> CliResult {
    let dataset = if let Some(endpoint) = &a.endpoint {
        let mut cfg = FetchConfig::new(endpoint.clone());
        cfg.limit = a.limit;
        cfg.rate = a.rate;
        cfg.batch = a.batch;
        cfg.cursor_path = a.cursor.clone();
        let report = fetch_geo_articles(&cfg)?;
        eprintln!(
            "fetched {} records in {} requests ({} pages skipped, {} retries, {} failed batches)",
            report.dataset.len(),
            report.requests,
            report.retries,
            report.skipped,
            report.failed
        );
        report.dataset
    } else {
        let input = a.input.as_ref().ok_or_else(|| CliError::Usage("--in or --endpoint is required".into()))?;
        rec.input(input);
        let mode = if a.lenient { ParseMode::Lenient } else { ParseMode::Strict };
        let report = parse_jsonl(input, mode)?;
        if report.skipped > 0 {
            warn!("skipped {} malformed rows", report.skipped);
        }
        eprintln!("{} valid records, {} skipped", report.dataset.len(), report.skipped);
        report.dataset
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_jsonl(&dataset, &a.out)?;
    rec.finish(std::slice::from_ref(&a.out))?;
    Ok(())
}

fn split_cmd(a: &SplitArgs, seed: u64, rec: &mut Recorder) -> CliResult {
    let [tr, va, te] = a.fractions[..] else {
        return Err(CliError::Usage("--fractions takes three values".into()));
    };
    let data = read_corpus(&a.input, rec)?;
    let (train, val, test) = split(&data, (tr, va, te), seed)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut outputs = Vec::new();
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        let path = a.out_dir.join(format!("{name}.jsonl"));
        write_jsonl(part, &path)?;
        outputs.push(path);
    }
    println!("train\t{}\nval\t{}\ntest\t{}", train.len(), val.len(), test.len());
    rec.finish(&outputs)?;
    Ok(())
}

fn featurizer(f: &FeatureArgs) -> FeaturizerConfig {
    FeaturizerConfig {
        dim: f.dim,
        ngram_min: f.ngram_min,
        ngram_max: f.ngram_max,
        lowercase: !f.keep_case,
        hash_seed: f.hash_seed,
    }
}

fn train_cmd(a: &TrainArgs, seed: u64, rec: &mut Recorder) -> CliResult {
    let train_data = read_corpus(&a.train, rec)?;
    let val_data = read_corpus(&a.val, rec)?;
    let (source, train_set, val_set) = match &a.features.embeddings {
        Some(path) => {
            rec.input(path);
            let table = load_embeddings(path)?;
            let tr = train_data.embedded_examples(&table)?;
            let va = val_data.embedded_examples(&table)?;
            (FeatureSource::External, tr, va)
        }
        None => {
            let cfg = featurizer(&a.features);
            cfg.validate()?;
            (FeatureSource::Hashed(cfg), train_data.hashed_examples(&cfg)?, val_data.hashed_examples(&cfg)?)
        }
    };
    let input = train_set.first().ok_or_else(|| Error::Empty("training set".into()))?.features.dim();
    let dims = HeadDims::new(input, a.hidden, a.components)?;
    let cfg = TrainConfig {
        adam: AdamConfig {
            learning_rate: a.lr,
            ..AdamConfig::default()
        },
        epochs: a.epochs,
        batch_size: a.batch_size,
        loss: a.loss,
        seed,
        shuffle: !a.no_shuffle,
    };
    cfg.validate()?;
    info!("training {} examples, head {dims}, {} epochs", train_set.len(), cfg.epochs);
    let (params, history) = train_from(HeadParams::init(seed, dims), &train_set, &val_set, &cfg, |s| {
        eprintln!(
            "epoch {}\tloss {:.4}\tval mean {:.1} km\tval median {:.1} km",
            s.epoch, s.mean_loss, s.val_mean_km, s.val_median_km
        );
        if s.skipped_steps > 0 {
            warn!("epoch {}: {} steps skipped on non-finite gradients", s.epoch, s.skipped_steps);
        }
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Checkpoint { features: source, params }.save(&a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(log) = &a.log {
        write_text(log, &history.to_tsv())?;
        outputs.push(log.clone());
    }
    rec.finish(&outputs)?;
    Ok(())
}

fn vectorize(ckpt: &Checkpoint, data: &Dataset, embeddings: Option<&PathBuf>, rec: &mut Recorder) -> CliResult<Vec<Example>> {
    match (ckpt.features, embeddings) {
        (FeatureSource::Hashed(cfg), _) => Ok(data.hashed_examples(&cfg)?),
        (FeatureSource::External, Some(path)) => {
            rec.input(path);
            Ok(data.embedded_examples(&load_embeddings(path)?)?)
        }
        (FeatureSource::External, None) => {
            Err(CliError::Usage("this model was trained on external vectors; pass --embeddings".into()))
        }
    }
}

fn predict(a: &PredictArgs, seed: u64, rec: &mut Recorder) -> CliResult {
    if a.rule == Some(PointRule::Best) {
        return Err(CliError::Usage("the best rule needs the true location; use it in evaluate".into()));
    }
    rec.input(&a.model);
    let ckpt = Checkpoint::load(&a.model)?;
    let data = read_corpus(&a.input, rec)?;
    let examples = vectorize(&ckpt, &data, a.embeddings.as_ref(), rec)?;
    let mut w = create(&a.out)?;
    for (r, ex) in data.records.iter().zip(&examples) {
        let m = forward(&ex.features, &ckpt.params)?;
        let mut line = json!({ "id": r.id, "components": m.to_records() });
        if let Some(rule) = a.rule {
            let p = point_estimate(&m, rule, record_seed(seed, &r.id))?;
            line["rule"] = json!(rule.name());
            line["lat"] = json!(p.lat());
            line["lon"] = json!(p.lon());
        }
        writeln!(w, "{line}").map_err(|e| Error::io(&a.out, e))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    eprintln!("wrote {} predictions", data.len());
    rec.finish(std::slice::from_ref(&a.out))?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs, seed: u64, rec: &mut Recorder) -> CliResult {
    let rules: Vec<PointRule> = if a.rule == "all" {
        vec![PointRule::HighProb, PointRule::Best, PointRule::Random]
    } else {
        a.rule
            .split(',')
            .map(|s| s.trim().parse().map_err(|e: Error| CliError::Usage(e.to_string())))
            .collect::<CliResult<_>>()?
    };
    let name = a
        .name
        .clone()
        .unwrap_or_else(|| a.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    rec.input(&a.pred);
    let preds = PredictionSet::read_jsonl(&a.pred, name)?;
    let gold = read_corpus(&a.gold, rec)?;
    let reports = rules
        .iter()
        .map(|&rule| evaluate_with(&preds, &gold, rule, a.mode, seed, a.bootstrap))
        .collect::<geovmf::Result<Vec<_>>>()?;
    for r in &reports {
        if r.highprob_unscored {
            warn!("{}: candidates carry no scores; highProb took the first one", r.model);
        }
    }
    print!("{}", format_table(&reports));
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&reports).map_err(Error::from)?;
        write_text(out, &(text + "\n"))?;
        rec.finish(std::slice::from_ref(out))?;
    }
    Ok(())
}

fn contour_source(a: &ContoursArgs, rec: &mut Recorder) -> CliResult<VmfMixture> {
    if let (Some(model), Some(text)) = (&a.model, &a.text) {
        rec.input(model);
        let ckpt = Checkpoint::load(model)?;
        let FeatureSource::Hashed(cfg) = ckpt.features else {
            return Err(CliError::Usage("--text needs a model trained on hashed features; use --pred".into()));
        };
        return Ok(forward(&featurize(text, &cfg), &ckpt.params)?);
    }
    let (Some(pred), Some(id)) = (&a.pred, &a.id) else {
        return Err(CliError::Usage("give --model with --text, or --pred with --id".into()));
    };
    rec.input(pred);
    let set = PredictionSet::read_jsonl(pred, "")?;
    match set.predictions.get(id) {
        Some(Prediction::Mixture(m)) => Ok(m.clone()),
        Some(_) => Err(Error::InvalidParameter(format!("prediction {id} is not a mixture")).into()),
        None => Err(Error::InvalidParameter(format!("no prediction with id {id}")).into()),
    }
}

fn contours(a: &ContoursArgs, rec: &mut Recorder) -> CliResult {
    let m = contour_source(a, rec)?;
    let gold = match a.gold.as_deref() {
        Some([lat, lon]) => Some(GeoPoint::new(*lat, *lon)?),
        Some(_) => return Err(CliError::Usage("--gold takes lat,lon".into())),
        None => None,
    };
    let levels = a.levels.clone().unwrap_or_else(|| DECILES.to_vec());
    let cfg = AdaptiveConfig {
        coarse_res: a.coarse_res,
        fine_res: a.fine_res,
        max_cells: a.max_cells,
        ..AdaptiveConfig::default()
    };
    let grid = adaptive_grid(&m, &cfg)?;
    info!("grid {}x{} at {}°", grid.n_lat, grid.n_lon, grid.res_deg);
    let thresholds = hpd_thresholds(&grid, &levels)?;
    let markers = Markers { mixture: Some(&m), gold };
    let fc: Value = contours_geojson(&grid, &levels, &thresholds, &markers)?;
    let text = serde_json::to_string(&fc).map_err(Error::from)? + "\n";
    match &a.out {
        Some(out) => {
            write_text(out, &text)?;
            rec.finish(std::slice::from_ref(out))?;
        }
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(())
}

fn sample(a: &SampleArgs, seed: u64, rec: &mut Recorder) -> CliResult {
    let c = VmfComponent::new(geo_to_cart(GeoPoint::new(a.lat, a.lon)?), a.kappa)?;
    let mut text = String::from("lat,lon\n");
    for v in geovmf::vmf::sample(&c, a.n, seed) {
        let p = cart_to_geo(v)?;
        text.push_str(&format!("{},{}\n", p.lat(), p.lon()));
    }
    match &a.out {
        Some(out) => {
            write_text(out, &text)?;
            rec.finish(std::slice::from_ref(out))?;
        }
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, seed: u64, rec: &mut Recorder) -> CliResult {
    let [d, h, k] = a.dims[..] else {
        return Err(CliError::Usage("--dims takes input,hidden,components".into()));
    };
    let report = grad_check(HeadDims::new(d, h, k)?, a.cases, seed, a.tol)?;
    println!("dims\t{}", report.dims);
    println!("cases\t{}", report.cases);
    println!("max_rel_error_weighted_nll\t{:.3e}", report.max_rel_error_weighted_nll);
    println!("max_rel_error_mixture_nll\t{:.3e}", report.max_rel_error_nll);
    println!("max_rel_error\t{:.3e}", report.max_rel_error());
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        write_text(out, &(text + "\n"))?;
        rec.finish(std::slice::from_ref(out))?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error(),
            a.tol
        )))
    }
}

fn toy(a: &ToyArgs, seed: u64, rec: &mut Recorder) -> CliResult {
    let data = geovmf::toy::corpus(a.per_city, seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_jsonl(&data, &a.out)?;
    eprintln!("wrote {} records", data.len());
    rec.finish(std::slice::from_ref(&a.out))?;
    Ok(())
}

fn replay(a: &ReplayArgs) -> CliResult {
    let m = manifest::load(&a.manifest)?;
    if m.command == "ingest" && m.argv.iter().any(|s| s == "--endpoint") {
        warn!("network fetches are not guaranteed to reproduce");
    }
    for input in &m.inputs {
        let now = manifest::sha256_file(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(Error::InvalidParameter(format!("input {} changed since the recorded run", input.path)).into());
        }
    }
    let code = crate::run(m.argv.clone());
    if code != crate::EXIT_OK {
        return Err(CliError::Numeric(format!("replayed command exited with {code}")));
    }
    let mut differing = Vec::new();
    for out in &m.outputs {
        if manifest::sha256_file(Path::new(&out.path))? != out.sha256 {
            differing.push(out.path.clone());
        }
    }
    if differing.is_empty() {
        println!("reproduced {} outputs", m.outputs.len());
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("outputs differ: {}", differing.join(", "))).into())
    }
}
