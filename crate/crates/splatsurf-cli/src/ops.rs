use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use nalgebra::Vector3;

use splatsurf::field::{build_hierarchy, AnchorGrid, FEATURE_DIM, OFFSETS_PER_ANCHOR};
use splatsurf::io::checkpoint::{load_checkpoint, save_checkpoint};
use splatsurf::io::colmap::{
    manhattan_align, median_reprojection_error, parse_colmap, write_colmap, SceneBundle,
};
use splatsurf::io::config::PipelineConfig;
use splatsurf::io::ppm::write_ppm_file;
use splatsurf::mesh::ply::{write_ply, PlyFormat};
use splatsurf::mesh::{extract_mesh, integrate_depth, volume_for_points, write_volume_dump};
use splatsurf::metrics::{psnr, ssim_metric};
use splatsurf::partition::{plan_partitions, split_cameras};
use splatsurf::scene::{PixelCoord, View};
use splatsurf::synth::{synth_bundle, synth_scene, SynthConfig};
use splatsurf::train::gradcheck::{check_scene, gradient_check};
use splatsurf::train::{train_all, write_loss_csv, MergedModel};

/// A computation left tolerance; maps to exit code 4.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericFailure(pub String);

#[derive(Args)]
pub struct ConfigArgs {
    /// Configuration file (flat sectioned key = value text).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.iterations=500. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)
                .with_context(|| format!("loading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        for s in &self.set {
            cfg.apply_set(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct SceneArgs {
    /// Scene directory with cameras.txt, images.txt, points3D.txt.
    #[arg(long, value_name = "DIR")]
    scene: PathBuf,
    /// File of held-out view ids, one per line. Defaults to
    /// SCENE/test_ids.txt when that exists.
    #[arg(long, value_name = "FILE")]
    test_ids: Option<PathBuf>,
    /// Rotate the scene so the mean camera down-axis is -y.
    #[arg(long)]
    align: bool,
    /// Box-filter images down by this integer factor.
    #[arg(long, default_value_t = 1, value_name = "N")]
    downscale: usize,
}

pub struct LoadedScene {
    pub bundle: SceneBundle,
    /// Ids of held-out views.
    pub test_ids: BTreeSet<u32>,
}

impl LoadedScene {
    /// Training views, re-embedded 0..n in id order.
    fn train_views(&self) -> Vec<View> {
        self.split(false)
    }

    fn test_views(&self) -> Vec<View> {
        self.split(true)
    }

    fn split(&self, held_out: bool) -> Vec<View> {
        self.bundle
            .views
            .iter()
            .filter(|v| self.test_ids.contains(&v.id) == held_out)
            .enumerate()
            .map(|(local, v)| {
                View::new(v.id, v.intrinsics, v.pose.clone(), v.image.clone(), local)
                    .expect("view dimensions already validated")
            })
            .collect()
    }

    fn points(&self) -> Vec<Vector3<f64>> {
        self.bundle.points.iter().map(|p| p.pos).collect()
    }
}

fn read_test_ids(path: &Path) -> Result<BTreeSet<u32>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id: u32 = line
            .parse()
            .with_context(|| format!("{}:{}: not a view id", path.display(), i + 1))?;
        ids.insert(id);
    }
    Ok(ids)
}

fn downscale_bundle(bundle: &mut SceneBundle, n: usize) -> Result<()> {
    if n < 1 {
        bail!("downscale factor must be at least 1");
    }
    if n == 1 {
        return Ok(());
    }
    let map_px = |p: PixelCoord| PixelCoord::new((p.u + 0.5) / n as f64 - 0.5, (p.v + 0.5) / n as f64 - 0.5);
    for v in bundle.views.iter_mut() {
        let k = v.intrinsics.downscaled(n);
        if k.width == 0 || k.height == 0 {
            bail!("downscale by {} empties {}x{} images", n, v.intrinsics.width, v.intrinsics.height);
        }
        let img = v.image.downscale_box(n);
        *v = View::new(v.id, k, v.pose.clone(), img, v.embedding_id)
            .expect("downscaled dimensions stay consistent");
    }
    for p in bundle.points.iter_mut() {
        for o in p.track.iter_mut() {
            o.pixel = map_px(o.pixel);
        }
    }
    Ok(())
}

fn load_scene(args: &SceneArgs) -> Result<LoadedScene> {
    let mut bundle = parse_colmap(&args.scene)
        .with_context(|| format!("reading scene {}", args.scene.display()))?;
    if args.align {
        bundle = manhattan_align(&bundle)?;
    }
    downscale_bundle(&mut bundle, args.downscale)?;
    let default_ids = args.scene.join("test_ids.txt");
    let test_ids = match &args.test_ids {
        Some(p) => read_test_ids(p)?,
        None if default_ids.is_file() => read_test_ids(&default_ids)?,
        None => BTreeSet::new(),
    };
    Ok(LoadedScene { bundle, test_ids })
}

fn build_grid(cfg: &PipelineConfig, scene: &LoadedScene) -> Result<AnchorGrid> {
    let points = scene.points();
    let lod = cfg.lod.resolve(&points)?;
    Ok(build_hierarchy(
        &points,
        &lod,
        FEATURE_DIM,
        OFFSETS_PER_ANCHOR,
        cfg.train.seed,
    )?)
}

// --- synth ---------------------------------------------------------------

#[derive(Args)]
pub struct SynthArgs {
    /// Output scene directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    train_views: usize,
    #[arg(long, default_value_t = 2)]
    test_views: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Surface samples for the initial sparse cloud.
    #[arg(long, default_value_t = 4000)]
    points: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        train_views: args.train_views,
        test_views: args.test_views,
        width: args.width,
        height: args.height,
        n_points: args.points,
        seed: args.seed,
    };
    let scene = synth_scene(&cfg);
    let bundle = synth_bundle(&scene);
    write_colmap(&bundle, &args.out)?;

    let ids: Vec<String> = scene.test.iter().map(|v| v.id.to_string()).collect();
    std::fs::write(args.out.join("test_ids.txt"), ids.join("\n") + "\n")?;

    // Starter config matching the generated scene.
    let mut pc = PipelineConfig::default();
    pc.train.background = splatsurf::synth::BACKGROUND;
    std::fs::write(args.out.join("config.txt"), pc.to_text())?;

    println!(
        "wrote {} train + {} test views ({}x{}), {} tracked points -> {}",
        scene.train.len(),
        scene.test.len(),
        args.width,
        args.height,
        bundle.points.len(),
        args.out.display()
    );
    Ok(())
}

// --- ingest --------------------------------------------------------------

#[derive(Args)]
pub struct IngestArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Rewrite the (aligned, downscaled) scene here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

pub fn ingest(args: IngestArgs) -> Result<()> {
    let loaded = load_scene(&args.scene)?;
    let b = &loaded.bundle;
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for p in &b.points {
        lo = lo.inf(&p.pos);
        hi = hi.sup(&p.pos);
    }
    let obs: usize = b.points.iter().map(|p| p.track.len()).sum();
    println!(
        "views: {} ({} held out)",
        b.views.len(),
        loaded.test_ids.len()
    );
    if let Some(v) = b.views.first() {
        println!("images: {}x{}", v.intrinsics.width, v.intrinsics.height);
    }
    println!("points: {} with {} observations", b.points.len(), obs);
    if !b.points.is_empty() {
        let e = hi - lo;
        println!("extent: {:.3} x {:.3} x {:.3}", e.x, e.y, e.z);
    }
    match median_reprojection_error(b) {
        Some(m) => println!("median reprojection error: {:.3} px", m),
        None => println!("median reprojection error: n/a (no observations)"),
    }
    if let Some(out) = &args.out {
        write_colmap(b, out)?;
        let ids: Vec<String> = loaded.test_ids.iter().map(|i| i.to_string()).collect();
        if !ids.is_empty() {
            std::fs::write(out.join("test_ids.txt"), ids.join("\n") + "\n")?;
        }
        println!("rewrote scene -> {}", out.display());
    }
    Ok(())
}

// --- plan ----------------------------------------------------------------

#[derive(Args)]
pub struct PlanArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn plan(args: PlanArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let loaded = load_scene(&args.scene)?;
    let views = loaded.train_views();
    if views.is_empty() {
        bail!("no training views left after the held-out split");
    }
    let grid = build_grid(&cfg, &loaded)?;
    let layout = split_cameras(&views, &cfg.partition)?;
    let parts = plan_partitions(&views, &grid, &cfg.partition)?;
    println!(
        "grid: {} anchors over {} levels; partitions: {}x{}",
        grid.len(),
        grid.cfg.levels,
        layout.gx,
        layout.gz
    );
    for p in &parts {
        println!(
            "cell {:>2}: {:>3} cameras, {:>5} core anchors, {:>5} expanded",
            p.cell,
            p.train_cameras.len(),
            p.core_anchors.len(),
            p.expanded_anchors.len()
        );
    }
    Ok(())
}

// --- train ---------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for the checkpoint and logs.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Partition training parallelism; defaults to available cores.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    let loaded = load_scene(&args.scene)?;
    let views = loaded.train_views();
    if views.is_empty() {
        bail!("no training views left after the held-out split");
    }
    let points = loaded.points();
    let lod = cfg.lod.resolve(&points)?;
    // Freeze the resolved sizes so the dumped config reproduces this run.
    cfg.lod.v0 = lod.v0;
    cfg.lod.d_max = lod.d_max;
    let grid = build_hierarchy(&points, &lod, FEATURE_DIM, OFFSETS_PER_ANCHOR, cfg.train.seed)?;
    let layout = split_cameras(&views, &cfg.partition)?;
    let parts = plan_partitions(&views, &grid, &cfg.partition)?;
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    println!(
        "training {} partitions on {} views, {} anchors, {} workers",
        parts.len(),
        views.len(),
        grid.len(),
        workers
    );
    let started = std::time::Instant::now();
    let (model, trained) = train_all(&parts, &views, &grid, &layout, &cfg.train, workers)?;
    println!(
        "trained in {:.1}s; merged model has {} anchors",
        started.elapsed().as_secs_f64(),
        model.grid.len()
    );

    std::fs::create_dir_all(&args.out)?;
    save_checkpoint(&model, &args.out.join("model.ck"))?;
    for t in &trained {
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            args.out.join(format!("loss_cell_{}.csv", t.partition.cell)),
        )?);
        write_loss_csv(&t.log, &mut f)?;
        if let Some(last) = t.log.last() {
            println!("cell {}: final total loss {:.6}", t.partition.cell, last.total);
        }
    }
    std::fs::write(args.out.join("config.txt"), cfg.to_text())?;
    println!("checkpoint -> {}", args.out.join("model.ck").display());
    Ok(())
}

// --- render --------------------------------------------------------------

#[derive(Args)]
pub struct RenderArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Trained model file.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Output directory for rendered images.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Render every Nth training view.
    #[arg(long, default_value_t = 1, value_name = "N")]
    stride: usize,
    /// Also write normal, depth, and alpha buffers.
    #[arg(long)]
    debug: bool,
    /// Far plane for depth normalization; 0 picks one from the scene size.
    #[arg(long, default_value_t = 0.0, value_name = "DIST")]
    far: f64,
}

fn scene_far(model: &MergedModel) -> f64 {
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for a in model.grid.anchors() {
        lo = lo.inf(&a.center);
        hi = hi.sup(&a.center);
    }
    let diag = (hi - lo).norm();
    if diag.is_finite() && diag > 0.0 {
        2.0 * diag
    } else {
        100.0
    }
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

pub fn render(args: RenderArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let loaded = load_scene(&args.scene)?;
    let model = load_checkpoint(&args.checkpoint)?;
    if args.stride == 0 {
        bail!("--stride must be positive");
    }
    std::fs::create_dir_all(&args.out)?;
    let bg = Vector3::new(
        cfg.train.background[0],
        cfg.train.background[1],
        cfg.train.background[2],
    );
    let far = if args.far > 0.0 { args.far } else { scene_far(&model) };
    let views = loaded.train_views();
    let names: Vec<String> = loaded
        .bundle
        .views
        .iter()
        .zip(&loaded.bundle.names)
        .filter(|(v, _)| !loaded.test_ids.contains(&v.id))
        .map(|(_, n)| n.clone())
        .collect();
    let mut count = 0;
    for (v, name) in views.iter().zip(&names).step_by(args.stride) {
        let buffers = model.render_view(v, &bg, &cfg.render)?;
        write_ppm_file(&buffers.color, &args.out.join(name))?;
        if args.debug {
            let base = stem(name);
            let mut normal = buffers.normal.clone();
            for x in normal.data.iter_mut() {
                *x = 0.5 * (*x + 1.0);
            }
            write_ppm_file(&normal, &args.out.join(format!("{}_normal.ppm", base)))?;
            let mut depth = buffers.depth.clone();
            for (d, ok) in depth.data.iter_mut().zip(&buffers.depth_valid) {
                *d = if *ok { (*d / far).clamp(0.0, 1.0) } else { 1.0 };
            }
            write_ppm_file(&depth, &args.out.join(format!("{}_depth.pgm", base)))?;
            write_ppm_file(&buffers.alpha, &args.out.join(format!("{}_alpha.pgm", base)))?;
        }
        count += 1;
    }
    println!("rendered {} views -> {}", count, args.out.display());
    Ok(())
}

// --- mesh ----------------------------------------------------------------

#[derive(Args)]
pub struct MeshArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Trained model file.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Output mesh (.ply).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Write ASCII instead of binary little-endian.
    #[arg(long)]
    ascii: bool,
    /// Fuse every Nth training view; 0 takes the configured value.
    #[arg(long, default_value_t = 0, value_name = "N")]
    stride: usize,
    /// Also dump the fused TSDF volume here.
    #[arg(long, value_name = "FILE")]
    dump_volume: Option<PathBuf>,
}

pub fn mesh(args: MeshArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let loaded = load_scene(&args.scene)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let stride = if args.stride > 0 { args.stride } else { cfg.mesh.stride };
    let bg = Vector3::new(
        cfg.train.background[0],
        cfg.train.background[1],
        cfg.train.background[2],
    );

    let centers: Vec<Vector3<f64>> = model.grid.anchors().iter().map(|a| a.center).collect();
    let mut vol = volume_for_points(&centers, cfg.mesh.cells_across)?;
    let views = loaded.train_views();
    let mut fused = 0;
    for v in views.iter().step_by(stride) {
        let buffers = model.render_view(v, &bg, &cfg.render)?;
        integrate_depth(&mut vol, &v.intrinsics, &v.pose, &buffers.depth, &buffers.depth_valid)?;
        fused += 1;
    }
    let mesh = extract_mesh(&vol, cfg.mesh.min_weight);
    if let Some(p) = &args.dump_volume {
        let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
        write_volume_dump(&vol, &mut f)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    let format = if args.ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
    write_ply(&mesh, format, &mut f)?;
    println!(
        "fused {} views into {}x{}x{} voxels (voxel {:.4}); mesh: {} vertices, {} triangles -> {}",
        fused,
        vol.dims[0],
        vol.dims[1],
        vol.dims[2],
        vol.voxel,
        mesh.vertices.len(),
        mesh.triangles.len(),
        args.out.display()
    );
    if mesh.is_empty() {
        println!("warning: mesh is empty (no observed zero crossings)");
    }
    Ok(())
}

// --- eval ----------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Trained model file.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let loaded = load_scene(&args.scene)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let bg = Vector3::new(
        cfg.train.background[0],
        cfg.train.background[1],
        cfg.train.background[2],
    );
    let views = if loaded.test_ids.is_empty() {
        println!("no held-out split given; evaluating on the training views");
        loaded.train_views()
    } else {
        loaded.test_views()
    };
    if views.is_empty() {
        bail!("nothing to evaluate");
    }
    let (mut sum_p, mut sum_s) = (0.0, 0.0);
    for v in &views {
        let buffers = model.render_view(v, &bg, &cfg.render)?;
        let p = psnr(&buffers.color, &v.image)?;
        let s = ssim_metric(&buffers.color, &v.image)?;
        println!("view {:>4}: PSNR {:6.2} dB  SSIM {:.4}", v.id, p, s);
        sum_p += p;
        sum_s += s;
    }
    let n = views.len() as f64;
    println!("mean over {} views: PSNR {:.2} dB  SSIM {:.4}", views.len(), sum_p / n, sum_s / n);
    println!("LPIPS: out of scope (needs a pretrained network); PSNR and SSIM only.");
    Ok(())
}

// --- gradcheck -----------------------------------------------------------

#[derive(Args)]
pub struct GradcheckArgs {
    /// Number of seeded random scenes.
    #[arg(long, default_value_t = 10)]
    scenes: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Probes per parameter group.
    #[arg(long, default_value_t = 8)]
    per_group: usize,
    /// Side length of the check images.
    #[arg(long, default_value_t = 32)]
    img: usize,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Print the per-group breakdown for every scene.
    #[arg(long)]
    verbose: bool,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut worst: f64 = 0.0;
    for seed in 0..args.scenes {
        let mut scene = check_scene(seed, args.img);
        let report = gradient_check(&mut scene, args.eps, args.per_group, seed)?;
        let max_rel = report.max_rel();
        println!(
            "scene {:>2}: max relative error {:.3e} {}",
            seed,
            max_rel,
            if max_rel <= args.tol { "ok" } else { "FAIL" }
        );
        if args.verbose || max_rel > args.tol {
            report.print_lines();
        }
        worst = worst.max(max_rel);
    }
    println!("worst over {} scenes: {:.3e} (tolerance {:.1e})", args.scenes, worst, args.tol);
    if worst > args.tol {
        return Err(NumericFailure(format!(
            "gradient check failed: {:.3e} > {:.1e}",
            worst, args.tol
        ))
        .into());
    }
    Ok(())
}
