//! Subcommand implementations. Each returns the library error type; `main`
//! maps it to an exit code.

use std::fs;
use std::path::{Path, PathBuf};

use eadnet::blur::{derive_seed, synth_pair, BlurInfo, BlurMode, SynthConfig, TrajectoryParams};
use eadnet::canny::{canny, to_luma, CannyConfig};
use eadnet::io::{
    load_dataset, read_image, read_manifest, write_image, write_manifest, Checkpoint, Manifest,
    ManifestRecord,
};
use eadnet::losses::LossConfig;
use eadnet::metrics::{ChannelMode, MetricConfig, MetricReport, SsimOptions};
use eadnet::models::{DeblurNet, DeblurNetConfig, Discriminator, EdgeNet, EdgeNetVariant};
use eadnet::scene::random_scene;
use eadnet::tensor::Tensor;
use eadnet::trainer::{
    crop_top_left, deblur_image, pad_reflect, train_deblurnet, train_edgenet, DeblurTrainConfig,
    EdgeTrainConfig, LossRecord, OptimConfig,
};
use eadnet::{Error, Result, SamplePair};
use log::info;
use rayon::prelude::*;

use crate::args::{
    BlurArg, CannyArgs, ChannelArg, Command, DeblurArgs, DeblurNetArgs, EdgesArgs, EvalArgs,
    ModelArg, ModelArgs, OptimArgs, ParamsArgs, SynthArgs, TrainDeblurArgs, TrainEdgeArgs,
};

const IMAGE_EXTENSIONS: [&str; 3] = ["ppm", "pgm", "pnm"];

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(&a),
        Command::Edges(a) => edges(&a),
        Command::TrainEdge(a) => train_edge(&a),
        Command::TrainDeblur(a) => train_deblur(&a),
        Command::Deblur(a) => deblur(&a),
        Command::Eval(a) => eval(&a),
        Command::Params(a) => params(&a),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Image files of a directory, sorted by name.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// `(input, output)` pairs for a file-or-directory argument; directory
/// outputs keep the input stem with the given extension.
fn io_pairs(input: &Path, output: &Path, ext: &str) -> Result<Vec<(PathBuf, PathBuf)>> {
    if input.is_dir() {
        create_dir(output)?;
        Ok(list_images(input)?
            .into_iter()
            .map(|p| {
                let stem = p.file_stem().unwrap_or_default().to_owned();
                let out = output.join(stem).with_extension(ext);
                (p, out)
            })
            .collect())
    } else {
        if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        Ok(vec![(input.to_path_buf(), output.to_path_buf())])
    }
}

/// Replicates a single-channel image to RGB.
fn to_rgb(img: Tensor<f32>) -> Result<Tensor<f32>> {
    match *img.shape() {
        [3, _, _] => Ok(img),
        [1, h, w] => Ok(Tensor::new(vec![3, h, w], img.data().repeat(3))?),
        ref s => Err(Error::config(format!(
            "expected a 1- or 3-channel image, got {s:?}"
        ))),
    }
}

fn canny_config(a: &CannyArgs) -> Result<CannyConfig> {
    let cfg = CannyConfig {
        smooth_sigma: a.canny_sigma,
        low: a.canny_low,
        high: a.canny_high,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        p_motion: a.p_motion,
        gaussian_sigma_range: (a.sigma_min, a.sigma_max),
        kernel_size: a.kernel_size,
        trajectory: TrajectoryParams {
            max_extent: a.max_extent,
            ..TrajectoryParams::default()
        },
        mode: match a.blur {
            BlurArg::Gaussian => BlurMode::Gaussian,
            BlurArg::Motion => BlurMode::Motion,
            BlurArg::Mixed => BlurMode::Mixed,
        },
        seed: a.seed,
    };
    cfg.validate()?;
    let canny_cfg = canny_config(&a.canny)?;

    let sources: Vec<(String, Tensor<f32>)> = match &a.input {
        Some(input) => {
            let files = if input.is_dir() {
                list_images(input)?
            } else {
                vec![input.clone()]
            };
            let loaded: Vec<(PathBuf, Result<Tensor<f32>>)> = files
                .into_par_iter()
                .map(|p| {
                    let img = read_image(&p).and_then(to_rgb);
                    (p, img)
                })
                .collect();
            let mut good = Vec::new();
            let mut bad = Vec::new();
            for (p, img) in loaded {
                match img {
                    Ok(img) => good.push((
                        p.file_name()
                            .unwrap_or_default()
                            .to_string_lossy()
                            .into_owned(),
                        img,
                    )),
                    Err(e) => bad.push(e.to_string()),
                }
            }
            if !bad.is_empty() {
                for msg in &bad {
                    eprintln!("unreadable input: {msg}");
                }
                return Err(Error::Image {
                    path: input.clone(),
                    reason: format!("{} unreadable input image(s)", bad.len()),
                });
            }
            good
        }
        None => Vec::new(),
    };
    let count = match (a.count, &a.input) {
        (Some(n), _) => n,
        (None, Some(_)) => sources.len(),
        (None, None) => {
            return Err(Error::config(
                "--count is required when no --input directory is given",
            ))
        }
    };
    if let Some(dir) = &a.input {
        if sources.is_empty() && count > 0 {
            return Err(Error::Image {
                path: dir.clone(),
                reason: "no PPM/PGM images found".into(),
            });
        }
    }
    if a.input.is_none() && a.scene_size < 8 {
        return Err(Error::config("--scene-size must be at least 8"));
    }

    let dirs = ["clear", "blurry", "edge"].map(|d| a.output.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let made: Vec<(ManifestRecord, String)> = (0..count)
        .into_par_iter()
        .map(|i| -> Result<(ManifestRecord, String)> {
            let id = format!("{i:05}");
            let (source, generated);
            let clear = if sources.is_empty() {
                generated =
                    random_scene(a.scene_size, a.scene_size, derive_seed(!a.seed, i as u64));
                source = "scene".to_string();
                &generated
            } else {
                let (name, img) = &sources[i % sources.len()];
                source = name.clone();
                img
            };
            let (pair, blur) = synth_pair(clear, &cfg, &canny_cfg, derive_seed(a.seed, i as u64))?;
            let rec = ManifestRecord {
                clear: dirs[0].join(format!("{id}.ppm")),
                blurry: dirs[1].join(format!("{id}.ppm")),
                edge: dirs[2].join(format!("{id}.pgm")),
            };
            write_image(&rec.clear, &pair.clear)?;
            write_image(&rec.blurry, &pair.blurry)?;
            write_image(&rec.edge, &pair.edge)?;
            let param = match blur {
                BlurInfo::Gaussian { sigma, .. } => format!("sigma={sigma:?}"),
                BlurInfo::Motion { seed, .. } => format!("seed={seed}"),
            };
            let size = match blur {
                BlurInfo::Gaussian { size, .. } | BlurInfo::Motion { size, .. } => size,
            };
            Ok((
                rec,
                format!("{id}\t{source}\t{}\t{size}\t{param}\n", blur.kind()),
            ))
        })
        .collect::<Result<_>>()?;

    let mut sidecar = String::from("id\tsource\tkind\tsize\tparam\n");
    let mut manifest = Manifest::default();
    for (rec, line) in made {
        manifest.records.push(rec);
        sidecar.push_str(&line);
    }
    write_manifest(a.output.join("manifest.tsv"), &manifest)?;
    let kernels = a.output.join("kernels.tsv");
    fs::write(&kernels, sidecar).map_err(|e| io_err(&kernels, e))?;
    info!("wrote {count} pairs to {}", a.output.display());
    Ok(())
}

/// Loads `variant` from a (full or matching reduced) edge checkpoint.
fn load_edgenet(path: &Path, variant: EdgeNetVariant) -> Result<EdgeNet> {
    let ckpt = Checkpoint::load(path)?;
    let mut net = EdgeNet::build(variant, 0)?;
    ckpt.load_into(net.params_mut())?;
    Ok(net)
}

fn load_deblurnet(path: &Path) -> Result<DeblurNet> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = DeblurNetConfig::from_tag(&ckpt.tag).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: format!("not a deblurring checkpoint: {e}"),
    })?;
    let mut net = DeblurNet::build(cfg, 0)?;
    ckpt.load_into(net.params_mut())?;
    Ok(net)
}

/// Primary edge map of a `[3,H,W]` image of any size.
fn predict_edges(net: &EdgeNet, img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let m = net.variant().divisor();
    let padded = pad_reflect(img, (m - h % m) % m, (m - w % m) % m)?;
    let shape = padded.shape().to_vec();
    let map = net.predict_primary(&padded.reshape(vec![1, 3, shape[1], shape[2]])?)?;
    crop_top_left(&map.reshape(vec![1, shape[1], shape[2]])?, h, w)
}

fn edges(a: &EdgesArgs) -> Result<()> {
    let canny_cfg = canny_config(&a.canny)?;
    let net = a
        .edge_checkpoint
        .as_deref()
        .map(|p| load_edgenet(p, a.side_layer))
        .transpose()?;
    io_pairs(&a.input, &a.output, "pgm")?
        .par_iter()
        .try_for_each(|(src, dst)| -> Result<()> {
            let img = read_image(src)?;
            let map = match &net {
                Some(net) => predict_edges(net, &to_rgb(img)?)?,
                None => {
                    let map = canny(&to_luma(&img)?, &canny_cfg)?;
                    let shape = [1, map.shape()[0], map.shape()[1]];
                    map.reshape(shape.to_vec())?
                }
            };
            write_image(dst, &map)
        })
}

fn optim_config(a: &OptimArgs) -> Result<OptimConfig> {
    create_dir(&a.out_dir)?;
    let cfg = OptimConfig {
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.adam_eps,
        lr0: a.lr,
        decay_every: a.decay_every,
        decay_factor: a.decay_factor,
        batch: a.batch,
        crop: a.crop,
        seed: a.seed,
        snapshot_dir: Some(a.out_dir.clone()),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_training_data(a: &OptimArgs) -> Result<Vec<SamplePair>> {
    let data = load_dataset(&read_manifest(&a.manifest)?)?;
    if data.is_empty() {
        return Err(Error::Manifest {
            path: a.manifest.clone(),
            line: 0,
            reason: "no training pairs".into(),
        });
    }
    Ok(data)
}

/// Prints the loss history to stdout and stores it next to the checkpoints.
fn write_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut text = String::new();
    for r in history {
        text.push_str(&format!("{r}\n"));
    }
    print!("{text}");
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn train_edge(a: &TrainEdgeArgs) -> Result<()> {
    let optim = optim_config(&a.optim)?;
    let cfg = EdgeTrainConfig {
        optim,
        loss: LossConfig {
            lambda_adv: a.lambda_adv,
            alpha: a.optim.alpha.clone(),
            eps: a.optim.bce_eps,
            ..LossConfig::default()
        },
        epochs: a.optim.epochs,
        adv_epochs: a.adv_epochs,
    };
    cfg.loss.validate()?;
    let data = load_training_data(&a.optim)?;
    let edgenet = EdgeNet::build(EdgeNetVariant::Full, a.optim.init_seed)?;
    let disc = Discriminator::build(derive_seed(a.optim.init_seed, 1))?;
    let outcome = train_edgenet(&data, edgenet, disc, &cfg)?;
    let out = &a.optim.out_dir;
    write_history(&out.join("edge_history.tsv"), &outcome.history)?;
    Checkpoint::from_params(outcome.edgenet.params()).save(out.join("edgenet.ckpt"))?;
    Checkpoint::from_params(outcome.discriminator.params()).save(out.join("discriminator.ckpt"))
}

fn deblurnet_config(a: &DeblurNetArgs) -> Result<DeblurNetConfig> {
    let &[d1, d2] = a.down_channels.as_slice() else {
        return Err(Error::config(format!(
            "--down-channels takes exactly two widths, got {}",
            a.down_channels.len()
        )));
    };
    let cfg = DeblurNetConfig {
        base_channels: a.base_channels,
        down_channels: [d1, d2],
        n_res_blocks: a.res_blocks,
        expand_ratio: a.expand_ratio,
        lowrank_channels: a.lowrank_channels,
        head_kernel: a.head_kernel,
        head_stride: a.head_stride,
        ..DeblurNetConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_deblur(a: &TrainDeblurArgs) -> Result<()> {
    let optim = optim_config(&a.optim)?;
    let cfg = DeblurTrainConfig {
        optim,
        loss: LossConfig {
            lambda_pixel: a.lambda_pixel,
            lambda_perceptual: a.lambda_perceptual,
            lambda_edge: a.lambda_edge,
            alpha: a.optim.alpha.clone(),
            eps: a.optim.bce_eps,
            binarize_threshold: a.binarize_threshold,
            edge_target: a.edge_target,
            ..LossConfig::default()
        },
        epochs: a.optim.epochs,
        perceptual_layer: a.perceptual_layer,
    };
    cfg.loss.validate()?;
    let net_cfg = deblurnet_config(&a.net)?;
    let data = load_training_data(&a.optim)?;
    let input_net = load_edgenet(&a.edge_checkpoint, a.side_layer)?;
    // The edge loss always judges with the full network.
    let loss_net = if a.lambda_edge > 0.0 && a.side_layer != EdgeNetVariant::Full {
        Some(load_edgenet(&a.edge_checkpoint, EdgeNetVariant::Full)?)
    } else {
        None
    };
    let deblur = DeblurNet::build(net_cfg, a.optim.init_seed)?;
    let outcome = train_deblurnet(
        &data,
        deblur,
        &input_net,
        loss_net.as_ref().unwrap_or(&input_net),
        &cfg,
    )?;
    let out = &a.optim.out_dir;
    write_history(&out.join("deblur_history.tsv"), &outcome.history)?;
    Checkpoint::from_params(outcome.deblurnet.params()).save(out.join("deblurnet.ckpt"))
}

fn load_models(a: &ModelArgs) -> Result<(DeblurNet, EdgeNet)> {
    Ok((
        load_deblurnet(&a.deblur_checkpoint)?,
        load_edgenet(&a.edge_checkpoint, a.side_layer)?,
    ))
}

fn deblur(a: &DeblurArgs) -> Result<()> {
    let (deblur, edgenet) = load_models(&a.model)?;
    io_pairs(&a.input, &a.output, "ppm")?
        .par_iter()
        .try_for_each(|(src, dst)| -> Result<()> {
            let blurry = to_rgb(read_image(src)?)?;
            write_image(dst, &deblur_image(&deblur, &edgenet, &blurry)?)
        })
}

fn metric_config(a: &EvalArgs) -> MetricConfig {
    MetricConfig {
        metrics: a.metrics.clone(),
        peak: a.peak,
        ssim: SsimOptions {
            channels: match a.ssim_channels {
                ChannelArg::Luma => ChannelMode::Luma,
                ChannelArg::PerChannel => ChannelMode::PerChannel,
            },
            ..SsimOptions::default()
        },
        ms_ssim_scales: a.ms_ssim_scales,
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let metrics = metric_config(a);
    let rows: Vec<(String, Vec<f64>)> = match (&a.pred, &a.truth, &a.manifest) {
        (Some(pred), Some(truth), None) => list_images(pred)?
            .par_iter()
            .map(|p| {
                let name = p.file_name().unwrap_or_default();
                let t = truth.join(name);
                let scores = metrics.score_all(&read_image(p)?, &read_image(&t)?)?;
                Ok((name.to_string_lossy().into_owned(), scores))
            })
            .collect::<Result<_>>()?,
        (None, None, Some(manifest)) => {
            let manifest = read_manifest(manifest)?;
            let ids: Vec<String> = manifest
                .records
                .iter()
                .map(|r| {
                    r.clear
                        .file_stem()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned()
                })
                .collect();
            let data = load_dataset(&manifest)?;
            let models = if a.baseline {
                None
            } else {
                match (&a.deblur_checkpoint, &a.edge_checkpoint) {
                    (Some(d), Some(e)) => Some((load_deblurnet(d)?, load_edgenet(e, a.side_layer)?)),
                    _ => {
                        return Err(Error::config(
                            "--manifest needs --deblur-checkpoint and --edge-checkpoint unless --baseline is given",
                        ))
                    }
                }
            };
            ids.into_par_iter()
                .zip(data.par_iter())
                .map(|(id, pair)| {
                    let scores = match &models {
                        Some((deblur, edgenet)) => metrics.score_all(
                            &deblur_image(deblur, edgenet, &pair.blurry)?,
                            &pair.clear,
                        )?,
                        None => metrics.score_all(&pair.blurry, &pair.clear)?,
                    };
                    Ok((id, scores))
                })
                .collect::<Result<_>>()?
        }
        _ => {
            return Err(Error::config(
                "give either --pred and --truth, or --manifest",
            ))
        }
    };
    let mut report = MetricReport::new(metrics.metrics.clone());
    for (id, scores) in rows {
        report.push(id, scores);
    }
    print!("{report}");
    Ok(())
}

fn params(a: &ParamsArgs) -> Result<()> {
    let edgenet = |v| EdgeNet::<f32>::build(v, 0).map(|n| n.param_count());
    let count = match a.model {
        ModelArg::EdgenetFull => edgenet(EdgeNetVariant::Full)?,
        ModelArg::EdgenetReduced1 => edgenet(EdgeNetVariant::Reduced(1))?,
        ModelArg::EdgenetReduced3 => edgenet(EdgeNetVariant::Reduced(3))?,
        ModelArg::EdgenetReduced5 => edgenet(EdgeNetVariant::Reduced(5))?,
        ModelArg::Deblurnet => {
            DeblurNet::<f32>::build(DeblurNetConfig::default(), 0)?.param_count()
        }
        ModelArg::Discriminator => Discriminator::<f32>::build(0)?.param_count(),
    };
    println!("{count}");
    info!("{:.2}M parameters", count as f64 / 1e6);
    Ok(())
}
