use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gradinv::attack::{run_inversion, AttackResult, TraceRow};
use gradinv::container::Archive;
use gradinv::data::{load_idx, make_batch, Dataset, Source, Synthetic};
use gradinv::image_io::write_image_grid;
use gradinv::labels::{label_accuracy, restore_labels_min, restore_labels_sum, Rule};
use gradinv::metrics::{align_to_truth, gradient_diagnostics, iip_score, to_unit_range, MetricsReport};
use gradinv::nn::{train, TrainOptions};
use gradinv::registration::default_radius;
use gradinv::victim::{compute_bundle, load_bundle, load_truth, save_bundle, save_truth};
use gradinv::{Error, Model, ModelSpec, Result, Tensor};

use crate::config::RunConfig;

/// Magic of the raw reconstruction file in a report directory.
const RECON_MAGIC: [u8; 4] = *b"GREC";
const RECON_FILE: &str = "reconstruction.grec";
const BUNDLE_FILE: &str = "bundle.ginv";
const GALLERY_SIZE: usize = 128;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn truth_path(bundle: &Path) -> PathBuf {
    bundle.with_extension("truth")
}

fn dataset(config: &RunConfig) -> Result<Option<Dataset>> {
    match (&config.dataset_images, &config.dataset_labels) {
        (Some(images), Some(labels)) => Ok(Some(load_idx(images, labels)?)),
        (None, None) => Ok(None),
        _ => Err(Error::InvalidSpec(
            "`dataset_images` and `dataset_labels` must be given together".into(),
        )),
    }
}

pub fn gen_victim(config: &RunConfig, out: &Path) -> Result<()> {
    let seed = config.attack.seed;
    let data = dataset(config)?;
    let synthetic = Synthetic::default();
    let (input, classes) = match &data {
        Some(d) => {
            let s = d.images.shape();
            ([s[1], s[2], s[3]], d.classes)
        }
        None => (synthetic.input, synthetic.classes),
    };
    let mut model = Model::init(&ModelSpec::preset(config.preset, input, classes)?, seed)?;
    if config.train_steps > 0 {
        let train_set = match &data {
            Some(d) => d.clone(),
            None => synthetic.dataset(1024, seed),
        };
        let opts = TrainOptions {
            steps: config.train_steps,
            seed,
            ..TrainOptions::default()
        };
        train(&mut model, &train_set.images, &train_set.labels, &opts)?;
    }
    let source = match &data {
        Some(d) => Source::Dataset(d),
        None => Source::Synthetic(synthetic),
    };
    let batch = make_batch(source, config.k, config.distinct, seed)?;
    let bundle = compute_bundle(&model, &batch, config.bn_stats)?;
    save_bundle(&bundle, out)?;
    save_truth(&batch, &truth_path(out))?;
    println!("wrote {} and {}", out.display(), truth_path(out).display());
    Ok(())
}

pub fn labels(bundle: &Path, k: Option<usize>, rule: Rule, truth: Option<&Path>) -> Result<()> {
    let bundle = load_bundle(bundle)?;
    let k = k.unwrap_or(bundle.batch_size);
    let restored = match rule {
        Rule::Min => restore_labels_min(&bundle, k)?,
        Rule::Sum => restore_labels_sum(&bundle, k)?,
    };
    let text: Vec<String> = restored.iter().map(usize::to_string).collect();
    println!("{}", text.join(" "));
    if let Some(truth) = truth {
        let truth = load_truth(truth)?;
        println!("accuracy {:.1}%", 100.0 * label_accuracy(&restored, &truth.labels));
    }
    Ok(())
}

fn image_name(stem: &str, x: &Tensor) -> String {
    let ext = if x.shape()[1] == 1 { "pgm" } else { "ppm" };
    format!("{stem}.{ext}")
}

fn recon_archive(result: &AttackResult) -> Archive {
    let labels = Tensor::from_fn(&[result.labels.len()], |i| result.labels[i] as f64);
    let mut tensors = vec![("labels".to_string(), labels), ("consensus".to_string(), result.consensus.clone())];
    for (i, c) in result.candidates.iter().enumerate() {
        tensors.push((format!("seed/{i}"), c.clone()));
    }
    Archive {
        magic: RECON_MAGIC,
        spec: String::new(),
        batch_size: result.labels.len() as u32,
        flags: 0,
        tensors,
    }
}

/// Writes the report directory: configuration echo, bundle copy, raw
/// reconstruction, one image and one loss CSV per seed, the consensus image
/// and a metrics file holding the gradient diagnostics.
pub fn attack(bundle_path: &Path, config: &RunConfig, out: &Path) -> Result<()> {
    let bundle = load_bundle(bundle_path)?;
    let model = &bundle.model;
    let result = run_inversion(&config.attack, &bundle, model)?;
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write(&out.join("config.txt"), config.to_text())?;
    write(&out.join(BUNDLE_FILE), bundle.to_bytes())?;
    write(&out.join(RECON_FILE), recon_archive(&result).encode())?;
    for (i, (x, trace)) in result.candidates.iter().zip(&result.traces).enumerate() {
        write_image_grid(x, &out.join(image_name(&format!("seed_{i}"), x)), config.per_row)?;
        let mut csv = format!("{}\n", TraceRow::CSV_HEADER);
        for row in trace {
            let _ = writeln!(csv, "{}", row.csv());
        }
        write(&out.join(format!("loss_seed_{i}.csv")), csv)?;
    }
    let c = &result.consensus;
    write_image_grid(c, &out.join(image_name("consensus", c)), config.per_row)?;
    let report = MetricsReport {
        diagnostics: Some(gradient_diagnostics(c, &result.labels, model, &bundle)?),
        ..Default::default()
    };
    write(&out.join("metrics.txt"), report.to_text())?;
    println!(
        "{} seeds, {} iterations in {:.1} s; labels {:?}; report in {}",
        result.candidates.len(),
        config.attack.iterations,
        result.elapsed.as_secs_f64(),
        result.labels,
        out.display()
    );
    Ok(())
}

/// Recomputes `metrics.txt` against the ground truth. The retrieval gallery
/// holds the originals plus synthetic distractors up to 128 images.
pub fn eval(report: &Path, truth: &Path) -> Result<()> {
    let truth = load_truth(truth)?;
    let bundle = load_bundle(&report.join(BUNDLE_FILE))?;
    let recon_path = report.join(RECON_FILE);
    let bytes = fs::read(&recon_path).map_err(|source| Error::Io { path: recon_path, source })?;
    let archive = Archive::decode(&bytes, RECON_MAGIC)?;
    let missing = |name: &str| Error::Format(format!("{RECON_FILE}: missing tensor `{name}`"));
    let consensus = archive.get("consensus").ok_or_else(|| missing("consensus"))?;
    let labels: Vec<usize> = archive
        .get("labels")
        .ok_or_else(|| missing("labels"))?
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect();
    if consensus.shape() != truth.images.shape() {
        return Err(Error::ShapeMismatch {
            op: "eval",
            lhs: consensus.shape().to_vec(),
            rhs: truth.images.shape().to_vec(),
        });
    }
    let model = &bundle.model;
    let aligned = align_to_truth(consensus, &labels, &truth.labels)?;
    let [_, c, h, w] = truth.images.shape().try_into().expect("rank 4");
    let mut report_metrics = MetricsReport::compare(&aligned, &truth.images, default_radius(h))?;
    report_metrics.diagnostics = Some(gradient_diagnostics(consensus, &labels, model, &bundle)?);
    let distractors = Synthetic {
        input: [c, h, w],
        classes: model.spec.classes,
        ..Synthetic::default()
    }
    .dataset(GALLERY_SIZE.saturating_sub(truth.len()), 0);
    let k = truth.len();
    let gallery: Vec<Tensor> = (0..k)
        .map(|i| truth.images.index_outer(i))
        .chain((0..distractors.len()).map(|i| distractors.image(i)))
        .collect();
    report_metrics.iip = Some(iip_score(&to_unit_range(&aligned), &truth.images, &Tensor::stack(&gallery)?, model)?);
    let text = report_metrics.to_text();
    write(&report.join("metrics.txt"), &text)?;
    print!("{text}");
    Ok(())
}
