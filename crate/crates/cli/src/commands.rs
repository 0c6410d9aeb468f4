use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use wagf::checkpoint::load_checkpoint;
use wagf::data::image::{encode_pgm, resize_nearest};
use wagf::data::{
    augment, generate_synthetic, load_dataset, read_image, split_dataset, write_dataset, LabeledDataset, LoadOptions,
    MetricsReport, SynthSpec,
};
use wagf::exec::{self, Execution};
use wagf::model::{Model, ModelConfig};
use wagf::train::{evaluate, fit_to_dir, Trainer};
use wagf::{Real, Tensor};

use crate::config::{DataConfig, RunConfig, RESOLVED_CONFIG};
use crate::heatmap::{self, Scaling};
use crate::{DataArgs, EvalArgs, Failure, HeatmapArgs, PredictArgs, SynthArgs};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn execution(threads: Option<usize>) -> Result<Execution, Failure> {
    match threads {
        Some(1) => Ok(Execution::Sequential),
        Some(n) => {
            exec::set_threads(n)?;
            Ok(Execution::default())
        }
        None => Ok(Execution::default()),
    }
}

fn load_options(model: &ModelConfig) -> LoadOptions {
    LoadOptions {
        size: Some((model.input_size[0], model.input_size[1])),
        ..LoadOptions::default()
    }
}

fn check_classes<T: Real>(ds: &LabeledDataset<T>, model: &ModelConfig) -> Result<(), Failure> {
    if ds.num_classes() != model.num_classes {
        return Err(Failure {
            code: 2,
            message: format!(
                "dataset has {} classes, model has {}",
                ds.num_classes(),
                model.num_classes
            ),
        });
    }
    Ok(())
}

fn train_val<T: Real>(
    d: &DataConfig,
    model: &ModelConfig,
    seed: u64,
) -> Result<(LabeledDataset<T>, LabeledDataset<T>), Failure> {
    let pool: LabeledDataset<T> = match (&d.image_dir, &d.labels, &d.synth) {
        (Some(dir), Some(labels), _) => load_dataset(dir, labels, &load_options(model))?,
        (_, _, Some(spec)) => generate_synthetic(spec)?.cast(),
        _ => return Err(Failure::usage("no training data configured")),
    };
    let (train, val) = match (&d.val_image_dir, &d.val_labels) {
        (Some(dir), Some(labels)) => (pool, load_dataset(dir, labels, &load_options(model))?),
        _ => split_dataset(&pool, 1.0 - d.val_fraction, seed)?,
    };
    check_classes(&train, model)?;
    check_classes(&val, model)?;
    let train = if d.augment > 1 {
        augment(&train, d.augment, seed)?
    } else {
        train
    };
    Ok((train, val))
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_val_macro_f1: Option<f64>,
    final_train_loss: f64,
    train_samples: usize,
    val_samples: usize,
}

pub fn train<T: Real>(cfg: &RunConfig) -> Result<(), Failure> {
    let exec = execution(cfg.threads)?;
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join(RESOLVED_CONFIG), cfg.to_json())?;
    let (train, val) = train_val::<T>(&cfg.data, &cfg.model, cfg.train.seed)?;
    let model = Model::<T>::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), exec)?;
    let fit = fit_to_dir(&mut trainer, &train, Some(&val), &cfg.output_dir)?;
    let best = &fit.history[fit.best_epoch - 1];
    let summary = TrainSummary {
        best_epoch: fit.best_epoch,
        best_val_macro_f1: best.val_macro_f1,
        final_train_loss: fit.history.last().map_or(0.0, |r| r.train_loss),
        train_samples: train.len(),
        val_samples: val.len(),
    };
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn dataset<T: Real>(d: &DataArgs, model: &ModelConfig) -> Result<LabeledDataset<T>, Failure> {
    let ds = if let (Some(dir), Some(labels)) = (&d.images, &d.labels) {
        load_dataset(dir, labels, &load_options(model))?
    } else if let Some(path) = &d.synth_spec {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let spec: SynthSpec =
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        generate_synthetic(&spec)?.cast()
    } else if let Some(n) = d.synth_per_class {
        generate_synthetic(&SynthSpec::desk(n, model.input_size[0], d.seed))?.cast()
    } else {
        return Err(Failure::usage(
            "give --images and --labels, --synth-spec or --synth-per-class",
        ));
    };
    check_classes(&ds, model)?;
    Ok(ds)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    samples: usize,
    mean_loss: f64,
    class_names: &'a [String],
    metrics: &'a MetricsReport,
}

pub fn eval<T: Real>(a: &EvalArgs) -> Result<(), Failure> {
    let exec = execution(a.threads)?;
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let ds = dataset::<T>(&a.data, ck.model.config())?;
    let ev = evaluate(&ck.model, &ck.fusion, &ds, exec)?;
    create_dir(&a.out)?;
    let report = EvalReport {
        samples: ds.len(),
        mean_loss: ev.mean_loss,
        class_names: &ds.class_names,
        metrics: &ev.metrics,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write(&a.out.join("metrics.json"), &json)?;
    write(&a.out.join("confusion.csv"), ev.metrics.confusion_csv(&ds.class_names))?;

    let mut csv = String::from("image_id,true,predicted");
    for n in &ds.class_names {
        write!(csv, ",p_{n}").unwrap();
    }
    csv.push('\n');
    for (i, prov) in ds.provenance.iter().enumerate() {
        write!(
            csv,
            "{},{},{}",
            prov.sample_id(),
            ds.class_names[ds.labels[i]],
            ds.class_names[ev.predictions[i]]
        )
        .unwrap();
        for p in &ev.probabilities[i] {
            write!(csv, ",{p}").unwrap();
        }
        csv.push('\n');
    }
    write(&a.out.join("predictions.csv"), csv)?;
    print!("{json}");
    Ok(())
}

fn model_input<T: Real>(path: &Path, cfg: &ModelConfig) -> Result<(Tensor<T>, usize, usize), Failure> {
    let img: Tensor<T> = read_image(path)?;
    let (h, w) = (img.shape()[0], img.shape()[1]);
    Ok((resize_nearest(&img, cfg.input_size[0], cfg.input_size[1]), h, w))
}

fn probabilities<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    let l: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn class_names(k: usize) -> Vec<String> {
    let ham = LoadOptions::default().class_names;
    if ham.len() == k {
        ham
    } else {
        (0..k).map(|i| format!("class{i}")).collect()
    }
}

pub fn predict<T: Real>(a: &PredictArgs) -> Result<(), Failure> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let names = class_names(ck.model.config().num_classes);
    let mut out = String::from("image,predicted");
    for n in &names {
        write!(out, ",p_{n}").unwrap();
    }
    out.push('\n');
    for path in &a.images {
        let (x, _, _) = model_input::<T>(path, ck.model.config())?;
        let p = probabilities(&ck.model.logits(&x, &ck.fusion)?);
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        write!(out, "{},{}", path.display(), names[best]).unwrap();
        for v in &p {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

#[derive(Serialize)]
struct HeatmapReport {
    image: String,
    predicted: String,
    probabilities: Vec<f64>,
    maps: Vec<Scaling>,
}

pub fn heatmap<T: Real>(a: &HeatmapArgs) -> Result<(), Failure> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let cfg = ck.model.config();
    if !cfg.safa_enabled {
        return Err(Failure::usage(
            "checkpoint has no SaFA module, so there is no map to draw",
        ));
    }
    let (x, h, w) = model_input::<T>(&a.image, cfg)?;
    let (logits, trace) = ck.model.predict(&x, &ck.fusion)?;
    let probs = probabilities(&logits);
    let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });

    let mut maps = vec![("attn", trace.f_attn)];
    if a.all_maps {
        maps.push(("symmetry", trace.f_symmetry));
        maps.push(("lstm", trace.f_lstm));
    }
    create_dir(&a.out)?;
    let mut scalings = Vec::new();
    for (name, map) in maps {
        let map = map.expect("SaFA maps present when SaFA is enabled");
        let (mh, mw) = (map.shape()[0], map.shape()[1]);
        let values: Vec<f64> = map.data().iter().map(|v| v.as_f64()).collect();
        let (px, min, max) = heatmap::render(&values, mh, mw, h, w);
        let file = format!("{name}.pgm");
        write(&a.out.join(&file), encode_pgm(w, h, &px))?;
        scalings.push(Scaling {
            file,
            min,
            max,
            constant: max <= min,
            map_height: mh,
            map_width: mw,
            height: h,
            width: w,
        });
    }
    let report = HeatmapReport {
        image: a.image.display().to_string(),
        predicted: class_names(probs.len())[best].clone(),
        probabilities: probs,
        maps: scalings,
    };
    write(
        &a.out.join("heatmap.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )
}

pub fn synth_data(a: &SynthArgs) -> Result<(), Failure> {
    let spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => SynthSpec::desk(a.per_class, a.size, a.seed),
    };
    let ds = generate_synthetic(&spec)?;
    write_dataset(&ds, &a.out)?;
    write(
        &a.out.join("spec.json"),
        serde_json::to_string_pretty(&spec).expect("spec serializes") + "\n",
    )?;
    println!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}
