use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdtseg::edt::{class_sdt_stack, signed_dt_into, SdtParams};
use sdtseg::network::{check_gradients, GradientTamper, NetworkState};
use sdtseg::raster::{
    read_mask, read_weights, write_field_stack, write_mask, write_weights, BinaryMask, FieldStack,
};
use sdtseg::trainer::{evaluate, sliding_window_infer, train as train_network, Dataset, EpochLog, TrainError};
use sdtseg::Real;

use crate::config::{load_image, FileSet, Precision, RunConfig};
use crate::{BenchArgs, EvalArgs, Failure, GradcheckArgs, InferArgs, SdtArgs, Split};

/// Scaling bound for doubling the side length (four times the pixels).
pub const BENCH_RATIO_LIMIT: f64 = 4.5;

pub fn sdt(args: &SdtArgs) -> Result<(), Failure> {
    let mask = read_mask(&args.mask, args.classes).with_context(|| format!("reading {}", args.mask.display()))?;
    let params = SdtParams::new(args.clip, mask.classes(), Default::default())?;
    let stack: FieldStack<f32> = class_sdt_stack(&mask, &params)?;
    write_field_stack(&stack, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg),
        Precision::F64 => train_as::<f64>(cfg),
    }
}

fn train_as<T: Real>(cfg: &RunConfig) -> Result<(), Failure> {
    let out = &cfg.out_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let (train_set, val_set) = cfg.datasets::<T>()?;
    log::info!("training on {} images, validating on {}", train_set.len(), val_set.len());

    let mut log_file = fs::File::create(out.join("log.jsonl"))?;
    let on_epoch = |line: &EpochLog, state: &NetworkState<T>| -> Result<(), String> {
        let json = serde_json::to_string(line).map_err(|e| e.to_string())?;
        writeln!(log_file, "{json}").map_err(|e| e.to_string())?;
        let path = ckpt_dir.join(format!("epoch_{:03}.sdtw", line.epoch));
        write_weights(&state.to_named_tensors(), &path).map_err(|e| format!("{}: {e}", path.display()))
    };
    let outcome = match train_network(&cfg.train, &train_set, &val_set, on_epoch) {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, step, last_good, .. }) => {
            let path = out.join("last_good.sdtw");
            write_weights(&last_good.to_named_tensors(), &path)?;
            return Err(Failure::Diverged(format!(
                "training diverged at epoch {epoch}, step {step}; last good weights in {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    write_weights(&outcome.state.to_named_tensors(), out.join("weights.sdtw"))?;
    if !val_set.is_empty() {
        let cm = evaluate(&outcome.state, &val_set, cfg.train.crop, cfg.train.val_overlap)?;
        fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&cm.report()?)? + "\n")?;
    }
    Ok(())
}

fn load_network<T: Real>(path: &Path) -> anyhow::Result<NetworkState<T>> {
    let tensors = read_weights::<T>(path).with_context(|| format!("reading {}", path.display()))?;
    NetworkState::from_named_tensors(&tensors).with_context(|| format!("loading {}", path.display()))
}

pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(&args.config)?;
    let report = match cfg.precision {
        Precision::F32 => eval_as::<f32>(args, &cfg)?,
        Precision::F64 => eval_as::<f64>(args, &cfg)?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval_as<T: Real>(args: &EvalArgs, cfg: &RunConfig) -> anyhow::Result<sdtseg::metrics::MetricsReport> {
    let state = load_network::<T>(&args.weights)?;
    let (train_set, val_set) = cfg.datasets::<T>()?;
    let data = match args.split {
        Split::Train => train_set,
        Split::Val => val_set,
    };
    if data.is_empty() {
        bail!("the {:?} split is empty", args.split);
    }
    let cm = evaluate(&state, &data, cfg.train.crop, cfg.train.val_overlap)?;
    Ok(cm.report()?)
}

pub fn infer(args: &InferArgs) -> Result<(), Failure> {
    let state = load_network::<f32>(&args.weights)?;
    let image = load_image::<f32>(&args.image)?;
    let (probs, mask) = sliding_window_infer(&state, &image, args.window, args.overlap)?;
    write_mask(&mask, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(p) = &args.probs {
        write_field_stack(&FieldStack::from_tensor(&probs)?, p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let tamper = if args.corrupt_gradient { GradientTamper::Corrupt } else { GradientTamper::None };
    let mut worst: f64 = 0.0;
    for seed in args.seed..args.seed + args.seeds {
        for &lambda in &args.lambda {
            let report = check_gradients(seed, lambda, tamper)?;
            for (block, err) in &report.blocks {
                println!("seed {seed} lambda {lambda} {block} max_rel_error {err:.3e}");
            }
            worst = worst.max(report.max_rel_error);
        }
    }
    if worst < args.tolerance {
        println!("PASS max_rel_error {worst:.3e} < {:e}", args.tolerance);
        Ok(())
    } else {
        println!("FAIL max_rel_error {worst:.3e} >= {:e}", args.tolerance);
        Err(Failure::Check(format!("gradient check failed: {worst:.3e}")))
    }
}

/// Random mask of small L-shaped blobs around sparse seed pixels.
pub fn bench_mask(size: usize, rng: &mut impl Rng) -> BinaryMask {
    let seeds: Vec<bool> = (0..size * size).map(|_| rng.random_bool(0.05)).collect();
    BinaryMask::from_fn(size, size, |i, j| {
        seeds[i * size + j] || (j + 1 < size && seeds[i * size + j + 1]) || (i + 1 < size && seeds[(i + 1) * size + j])
    })
}

/// Best wall time of `signed_dt` per size over `repeats` interleaved runs.
/// Each size writes into its own reused output buffer, so page faults of a
/// fresh allocation are not part of the timing.
pub fn bench_times(sizes: &[usize], repeats: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<BinaryMask> = sizes.iter().map(|&s| bench_mask(s, &mut rng)).collect();
    let mut outputs: Vec<Vec<f64>> = vec![Vec::new(); sizes.len()];
    for (m, out) in masks.iter().zip(outputs.iter_mut()) {
        signed_dt_into(m, out);
    }
    // best of the interleaved repeats: machine load only ever adds time
    let mut best = vec![f64::INFINITY; sizes.len()];
    for _ in 0..repeats.max(1) {
        for ((m, out), t) in masks.iter().zip(outputs.iter_mut()).zip(best.iter_mut()) {
            let start = Instant::now();
            signed_dt_into(m, out);
            std::hint::black_box(&out);
            *t = t.min(start.elapsed().as_secs_f64());
        }
    }
    best
}

pub fn bench(args: &BenchArgs) -> Result<(), Failure> {
    if args.sizes.is_empty() || args.sizes.windows(2).any(|w| w[0] >= w[1]) || args.sizes[0] == 0 {
        return Err(Failure::Input(anyhow::anyhow!("sizes must be positive and ascending")));
    }
    let times = bench_times(&args.sizes, args.repeats, args.seed);
    println!("size\tseconds\tratio");
    for (i, (&s, &t)) in args.sizes.iter().zip(&times).enumerate() {
        if i > 0 && s == 2 * args.sizes[i - 1] {
            let ratio = t / times[i - 1];
            let verdict = if ratio <= BENCH_RATIO_LIMIT { "PASS" } else { "FAIL" };
            println!("{s}\t{t:.6}\t{ratio:.3}\t{verdict}");
        } else {
            println!("{s}\t{t:.6}\t-");
        }
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<(), Failure> {
    if cfg.train_files.is_some() {
        return Err(Failure::Input(anyhow::anyhow!("synth needs a synthetic configuration, not file inputs")));
    }
    let (train_set, val_set) = cfg.datasets::<f32>()?;
    let root = cfg.out_dir.join("synth");
    let train_files = export(&train_set, &root.join("train"))?;
    let val_files = export(&val_set, &root.join("val"))?;
    let manifest = serde_json::json!({ "train_files": train_files, "val_files": val_files });
    fs::write(root.join("files.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("wrote {} training and {} validation images to {}", train_set.len(), val_set.len(), root.display());
    Ok(())
}

fn export(data: &Dataset<f32>, dir: &Path) -> anyhow::Result<FileSet> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = FileSet::default();
    for (i, (img, mask)) in data.images.iter().zip(&data.masks).enumerate() {
        let image_path = dir.join(format!("image_{i:04}.sdtf"));
        let mask_path = dir.join(format!("mask_{i:04}.pgm"));
        write_field_stack(&FieldStack::from_tensor(img)?, &image_path)?;
        write_mask(mask, &mask_path)?;
        files.images.push(image_path);
        files.masks.push(mask_path);
    }
    Ok(files)
}
