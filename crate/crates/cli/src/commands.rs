use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use magc::autoencoder::{train_autoencoder, AeTrainConfig, PixelAutoencoder};
use magc::codec::LcmModel;
use magc::config::KvConfig;
use magc::data::{gen_data, pnm, DatasetManifest, ImageBuffer, MapRaster, SyntheticSceneSpec};
use magc::diffusion::{train_denoiser, Denoiser, DenoiserConfig, DiffusionTrainConfig, NoiseSchedule};
use magc::evalkit::{bd_quality_with, bd_rate_with, eval_run, psnr, BdMethod, EvalOptions, RDCurve};
use magc::pipeline::{Backend, Pipeline};
use magc::training::{encode_latents, train_lcm, Preset, TrainConfig};
use magc::{Error, Result};

use crate::args::*;

fn load_kv(path: Option<&Path>) -> Result<KvConfig> {
    match path {
        Some(p) => KvConfig::load(p),
        None => Ok(KvConfig::default()),
    }
}

fn load_models(vae: &Path, lcm: &Path) -> Result<(PixelAutoencoder, magc::tensor::ParamStore<f32>, LcmModel)> {
    let (ae, store) = PixelAutoencoder::load(vae)?;
    let lcm = LcmModel::load(lcm)?;
    if ae.cfg.latent_channels != lcm.cfg().transform.latent_channels {
        return Err(Error::ModelMismatch(format!(
            "autoencoder has {} latent channels, codec expects {}",
            ae.cfg.latent_channels,
            lcm.cfg().transform.latent_channels
        )));
    }
    Ok((ae, store, lcm))
}

fn read_map(path: Option<&Path>, lcm: &LcmModel) -> Result<Option<MapRaster>> {
    path.map(|p| pnm::read_map(p, lcm.cfg().transform.map_classes)).transpose()
}

fn backend(name: BackendArg, steps: usize, seed: u64) -> Backend {
    match name {
        BackendArg::PixelDecoder => Backend::PixelDecoder,
        BackendArg::Diffusion => Backend::Diffusion { steps, seed },
    }
}

pub fn gen_data_cmd(a: &GenDataArgs) -> Result<()> {
    let mut kv = load_kv(a.config.as_deref())?;
    let mut spec = SyntheticSceneSpec::default();
    if let Some(v) = kv.take("width")? {
        spec.width = v;
    }
    if let Some(v) = kv.take("height")? {
        spec.height = v;
    }
    if let Some(v) = kv.take("noise_sigma")? {
        spec.noise_sigma = v;
    }
    if let Some(v) = kv.take("seed")? {
        spec.seed = v;
    }
    let n: usize = kv.take("pairs")?.unwrap_or(100);
    kv.finish()?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let n = a.pairs.unwrap_or(n);
    let m = gen_data(&spec, n, &a.out, &a.split)?;
    println!("wrote {} pairs to {}", m.pairs.len(), a.out.display());
    Ok(())
}

pub fn train_vae_cmd(a: &TrainArgs) -> Result<()> {
    let mut kv = load_kv(a.common.config.as_deref())?;
    let preset = match &a.common.preset {
        Some(p) => p.parse::<Preset>()?,
        None => kv.take("preset")?.unwrap_or(Preset::Desk),
    };
    let mut cfg = preset.autoencoder();
    let mut tc = AeTrainConfig::default();
    if let Some(v) = kv.take("factor")? {
        cfg.factor = v;
    }
    if let Some(v) = kv.take("latent_channels")? {
        cfg.latent_channels = v;
    }
    if let Some(v) = kv.take("width")? {
        cfg.width = v;
    }
    if let Some(v) = kv.take("steps")? {
        tc.steps = v;
    }
    if let Some(v) = kv.take("batch")? {
        tc.batch = v;
    }
    if let Some(v) = kv.take("lr")? {
        tc.lr = v;
    }
    if let Some(v) = kv.take("seed")? {
        tc.seed = v;
    }
    kv.finish()?;
    if let Some(s) = a.common.seed {
        tc.seed = s;
    }
    let images: Vec<ImageBuffer> = DatasetManifest::load(&a.data)?.load_all()?.into_iter().map(|p| p.0).collect();
    let (ae, mut store) = PixelAutoencoder::init(&cfg, tc.seed)?;
    let trace = train_autoencoder(&ae, &mut store, &images, &tc)?;
    magc::tensor::save_checkpoint(&store, &a.common.out)?;
    println!(
        "steps={} final_mse={:.6} latent_scale={:.4}",
        trace.len(),
        trace.last().copied().unwrap_or(f32::NAN),
        ae.latent_scale(&store)
    );
    Ok(())
}

pub fn train_lcm_cmd(a: &TrainLcmArgs) -> Result<()> {
    let mut kv = load_kv(a.common.config.as_deref())?;
    if let Some(p) = &a.common.preset {
        kv.set("preset", p);
    }
    if let Some(i) = a.lambda_index {
        // The flag selects a grid point and overrides any configured λ.
        kv.take::<String>("lambda")?;
        kv.set("lambda_index", i);
    }
    if let Some(s) = a.common.seed {
        kv.set("seed", s);
    }
    let cfg = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let (ae, store) = PixelAutoencoder::load(&a.vae)?;
    let pairs = DatasetManifest::load(&a.data)?.load_all()?;
    let data = encode_latents(&ae, &store, &pairs)?;
    let mut lcm_cfg = cfg.preset.lcm();
    lcm_cfg.transform.latent_channels = ae.cfg.latent_channels;
    let mut model = LcmModel::init(&lcm_cfg, cfg.seed)?;
    let mut log = a.log.as_deref().map(File::create).transpose()?.map(BufWriter::new);
    let trace = train_lcm(&mut model, &data, &cfg, log.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    model.save(&a.common.out)?;
    let last = trace.last().expect("at least one step");
    println!(
        "steps={} lambda={} L_rate={:.5} L_ld={:.5} hash={:016x}",
        trace.len(),
        cfg.lambda,
        last.rate,
        last.ld,
        model.hash()
    );
    Ok(())
}

pub fn train_diffusion_cmd(a: &TrainDiffusionArgs) -> Result<()> {
    let mut kv = load_kv(a.common.config.as_deref())?;
    let mut tc = DiffusionTrainConfig::default();
    let mut dc = DenoiserConfig::desk();
    if let Some(v) = kv.take("steps")? {
        tc.steps = v;
    }
    if let Some(v) = kv.take("batch")? {
        tc.batch = v;
    }
    if let Some(v) = kv.take("lr")? {
        tc.lr = v;
    }
    if let Some(v) = kv.take("warmup")? {
        tc.warmup = v;
    }
    if let Some(v) = kv.take("seed")? {
        tc.seed = v;
    }
    if let Some(v) = kv.take("max_grad_norm")? {
        tc.max_grad_norm = v;
    }
    if let Some(v) = kv.take("base")? {
        dc.base = v;
    }
    if let Some(v) = kv.take("time_dim")? {
        dc.time_dim = v;
    }
    if let Some(v) = kv.take("sem_hidden")? {
        dc.sem_hidden = v;
    }
    if let Some(v) = kv.take("use_map")? {
        dc.use_map = v;
    }
    kv.finish()?;
    if let Some(s) = a.common.seed {
        tc.seed = s;
    }
    let (ae, store, lcm) = load_models(&a.vae, &a.lcm)?;
    dc.latent_channels = ae.cfg.latent_channels;
    dc.guidance_channels = ae.cfg.latent_channels;
    let pairs = DatasetManifest::load(&a.data)?.load_all()?;
    let p = Pipeline {
        ae: &ae,
        ae_store: &store,
        lcm: &lcm,
        denoiser: None,
    };
    let data = p.diffusion_samples(&pairs)?;
    let mut den = Denoiser::init(&dc, tc.seed)?;
    let trace = train_denoiser(&mut den, &data, &NoiseSchedule::default(), &tc)?;
    den.save(&a.common.out)?;
    let tail = &trace[trace.len().saturating_sub(50)..];
    println!(
        "steps={} eps_loss_first={:.4} eps_loss_tail={:.4}",
        trace.len(),
        trace[0],
        tail.iter().sum::<f64>() / tail.len() as f64
    );
    Ok(())
}

pub fn compress_cmd(a: &CompressArgs) -> Result<()> {
    let (ae, store, lcm) = load_models(&a.vae, &a.lcm)?;
    let image = pnm::read_image(&a.image)?;
    let map = read_map(a.map.as_deref(), &lcm)?;
    let p = Pipeline {
        ae: &ae,
        ae_store: &store,
        lcm: &lcm,
        denoiser: None,
    };
    let c = p.compress(&image, map.as_ref())?;
    std::fs::write(&a.out, &c.bytes)?;
    println!("bpp={:.6}", c.report.bpp);
    Ok(())
}

pub fn decompress_cmd(a: &DecompressArgs) -> Result<()> {
    let (ae, store, lcm) = load_models(&a.vae, &a.lcm)?;
    let den = a.denoiser.as_deref().map(Denoiser::load).transpose()?;
    let map = read_map(a.map.as_deref(), &lcm)?;
    let bytes = std::fs::read(&a.stream)?;
    let p = Pipeline {
        ae: &ae,
        ae_store: &store,
        lcm: &lcm,
        denoiser: den.as_ref(),
    };
    let img = p.decompress(&bytes, map.as_ref(), backend(a.backend, a.steps, a.seed))?;
    pnm::write_image(&img, &a.out)?;
    println!("width={} height={}", img.width(), img.height());
    if let Some(r) = &a.reference {
        println!("psnr={:.4}", psnr(&pnm::read_image(r)?, &img)?);
    }
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (ae, store) = PixelAutoencoder::load(&a.vae)?;
    let mut models = Vec::with_capacity(a.lcm.len());
    for path in &a.lcm {
        models.push(LcmModel::load(path)?);
    }
    let den = a.denoiser.as_deref().map(Denoiser::load).transpose()?;
    let pairs = DatasetManifest::load(&a.data)?.load_all()?;
    let opts = EvalOptions {
        backend: backend(a.backend, a.steps, a.seed),
        segment: !a.no_miou,
    };
    let report = eval_run(&ae, &store, &models, den.as_ref(), &pairs, &opts)?;
    let files = report.write(&a.out)?;
    print!("{}", report.summary_csv());
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

pub fn bd_cmd(a: &BdArgs) -> Result<()> {
    let anchor = RDCurve::load(&a.anchor)?;
    let test = RDCurve::load(&a.test)?;
    let method = match a.method {
        BdMethodArg::Cubic => BdMethod::Cubic,
        BdMethodArg::Pchip => BdMethod::Pchip,
    };
    println!("BD-quality={:.6}", bd_quality_with(&anchor, &test, method)?);
    println!("BD-rate={:.6}%", bd_rate_with(&anchor, &test, method)?);
    Ok(())
}

/// Missing input files are reported together before any work starts.
pub fn check_inputs(paths: &[&PathBuf]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing input files: {}", missing.join(", ")),
        )))
    }
}
