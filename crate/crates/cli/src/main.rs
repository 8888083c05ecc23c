use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ropcac::bench::time_neighbor_table;
use ropcac::diff::Tensor;
use ropcac::io::{self, lambda_id, Bitstream, PlyFormat, LAMBDAS};
use ropcac::net::{Codec, CodecConfig};
use ropcac::pipeline::{
    self, decode, encode, load_cloud, parse_rig, Distortion, EvalRow, RunManifest,
    EVAL_CSV_HEADER,
};
use ropcac::render::{self, center_points, fit_distance, Camera, RasterSettings, View};
use ropcac::suites;

/// Rendering-oriented point cloud attribute codec.
#[derive(Parser)]
#[command(name = "ropcac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress the colors of a PLY cloud.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// λ the model was trained with, recorded in the header.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Reconstruct colors for a geometry from a bitstream.
    Decode {
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long)]
        bitstream: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Write ASCII instead of binary PLY.
        #[arg(long)]
        ascii: bool,
    },
    /// Render one view of a cloud to a PPM image.
    Render(RenderArgs),
    /// Train a model; writes the run manifest next to the checkpoint.
    Train(TrainArgs),
    /// Render reference and reconstruction and append quality metrics to a CSV.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        /// `elev:az,az,...`, `train` or `test`.
        #[arg(long, default_value = "test")]
        rig: String,
        #[arg(long, default_value_t = 384)]
        size: usize,
        #[arg(long)]
        csv: PathBuf,
        /// Bitstream of the reconstruction, for the bpp column.
        #[arg(long)]
        bitstream: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        /// A suite name or `all`.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Time neighbor-table construction at fixed density; CSV on stdout.
    BenchNeighbors {
        #[arg(long, value_delimiter = ',', default_value = "10000,40000,160000")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 5)]
        window: usize,
    },
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    azimuth: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    elevation: f64,
    /// Camera distance in voxels, or `auto`.
    #[arg(long, default_value = "auto")]
    distance: String,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 60.0)]
    fov: f64,
    #[arg(long, default_value_t = 1024)]
    width: usize,
    #[arg(long, default_value_t = 1024)]
    height: usize,
    /// Splat radius in pixels, or `auto` for 1.5.
    #[arg(long, default_value = "auto")]
    radius: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// `white`, `black` or `r,g,b` in [0, 1].
    #[arg(long, default_value = "white")]
    background: String,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// A PLY file or a directory of them.
    #[arg(long, required_unless_present = "manifest")]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 800.0)]
    lambda: f64,
    #[arg(long, default_value_t = 50)]
    epochs: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, required_unless_present = "manifest")]
    out: Option<PathBuf>,
    /// `paper`, `constant:<lr>` or `step:<base>:<factor>:<interval>:<floor>`.
    #[arg(long, default_value = "paper")]
    lr: String,
    #[arg(long, default_value = "train")]
    rig: String,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 128)]
    block: i32,
    /// `mse` or `ms-ssim`.
    #[arg(long, default_value = "mse")]
    distortion: String,
    #[arg(long, default_value_t = 1)]
    checkpoint_every: u32,
    /// Codec `key=value` file; defaults otherwise.
    #[arg(long)]
    codec_config: Option<PathBuf>,
    /// Run exactly the given manifest, ignoring the other flags.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

type CliResult<T> = Result<T, String>;

fn err<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> String {
    move |e| format!("{context}: {e}")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("ROPCAC_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: ROPCAC_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    let result = match cli.command {
        Command::Encode {
            input,
            model,
            output,
            lambda,
        } => run_encode(&input, &model, &output, lambda),
        Command::Decode {
            geometry,
            bitstream,
            model,
            output,
            ascii,
        } => run_decode(&geometry, &bitstream, &model, &output, ascii),
        Command::Render(a) => run_render(&a),
        Command::Train(a) => run_train(&a),
        Command::Eval {
            reference,
            recon,
            rig,
            size,
            csv,
            bitstream,
            lambda,
        } => run_eval(&reference, &recon, &rig, size, &csv, bitstream.as_deref(), lambda),
        Command::Gradcheck { module, seeds } => run_gradcheck(&module, seeds),
        Command::BenchNeighbors { n, repeats, window } => run_bench(&n, repeats, window),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_model(path: &Path) -> CliResult<Codec> {
    Codec::load_file(path).map_err(err(format!("loading model {}", path.display())))
}

fn load(path: &Path) -> CliResult<io::VoxelCloud> {
    load_cloud(path).map_err(err(format!("reading {}", path.display())))
}

fn run_encode(input: &Path, model: &Path, output: &Path, lambda: Option<f64>) -> CliResult<()> {
    let cloud = load(input)?;
    let codec = load_model(model)?;
    let enc = encode(&cloud, &codec, lambda.map_or(255, lambda_id)).map_err(err("encoding"))?;
    let bytes = enc.bitstream.to_bytes();
    fs::write(output, &bytes).map_err(err(format!("writing {}", output.display())))?;
    println!("points {}", cloud.len());
    println!("bytes {}", bytes.len());
    println!("bpp {:.6}", enc.bpp());
    println!(
        "bits actual {} estimated {:.1} (y {:.1}, z {:.1})",
        8 * bytes.len(),
        enc.estimate_y + enc.estimate_z,
        enc.estimate_y,
        enc.estimate_z
    );
    Ok(())
}

fn run_decode(
    geometry: &Path,
    bitstream: &Path,
    model: &Path,
    output: &Path,
    ascii: bool,
) -> CliResult<()> {
    let geom = load(geometry)?;
    let bytes = fs::read(bitstream).map_err(err(format!("reading {}", bitstream.display())))?;
    let bs = Bitstream::from_bytes(&bytes).map_err(err("parsing bitstream"))?;
    let codec = load_model(model)?;
    let dec = decode(&bs, &geom.coords, &codec).map_err(err("decoding"))?;
    let format = if ascii {
        PlyFormat::Ascii
    } else {
        PlyFormat::BinaryLittleEndian
    };
    io::write_ply(output, &dec.cloud.to_raw(), format)
        .map_err(err(format!("writing {}", output.display())))?;
    println!("points {}", dec.cloud.len());
    Ok(())
}

fn parse_auto(v: &str, what: &str) -> CliResult<Option<f64>> {
    if v == "auto" {
        return Ok(None);
    }
    match v.parse::<f64>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(Some(x)),
        _ => Err(format!("--{what} must be `auto` or a positive number, got {v:?}")),
    }
}

fn parse_background(v: &str) -> CliResult<[f64; 3]> {
    match v {
        "white" => Ok([1.0; 3]),
        "black" => Ok([0.0; 3]),
        _ => {
            let parts: Vec<f64> = v
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| format!("bad background {v:?}"))?;
            match parts.as_slice() {
                &[r, g, b] => Ok([r, g, b]),
                _ => Err(format!("background needs three components, got {v:?}")),
            }
        }
    }
}

fn run_render(a: &RenderArgs) -> CliResult<()> {
    let cloud = load(&a.input)?;
    if a.width == 0 || a.height == 0 {
        return Err("image size must be positive".into());
    }
    let (pts, radius) = center_points(&cloud.coords);
    let distance = parse_auto(&a.distance, "distance")?.unwrap_or_else(|| fit_distance(radius, a.fov));
    let cam = Camera::orbit(
        View {
            elevation: a.elevation,
            azimuth: a.azimuth,
        },
        distance,
        a.fov,
        a.width,
        a.height,
    )
    .map_err(err("camera"))?;
    let mut settings = RasterSettings::for_size(a.width, a.height);
    if let Some(px) = parse_auto(&a.radius, "radius")? {
        settings.radius = 2.0 * px / a.width.min(a.height) as f64;
    }
    settings.k = a.k;
    settings.background = parse_background(&a.background)?;
    let colors = Tensor::from_vec(
        cloud.len(),
        3,
        cloud.colors.iter().flatten().copied().collect(),
    );
    let img = render::render(&pts, &colors, &cam, &settings).map_err(err("rendering"))?;
    io::write_ppm(&a.output, &img.clamped()).map_err(err(format!("writing {}", a.output.display())))
}

fn ply_files(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(err(format!("listing {}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(format!("no .ply files in {}", path.display()));
    }
    Ok(files)
}

fn manifest_from_args(a: &TrainArgs) -> CliResult<RunManifest> {
    if let Some(p) = &a.manifest {
        let text = fs::read_to_string(p).map_err(err(format!("reading {}", p.display())))?;
        return RunManifest::from_text(&text).map_err(err(p.display()));
    }
    let codec = match &a.codec_config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(err(format!("reading {}", p.display())))?;
            CodecConfig::from_text(&text).map_err(err(p.display()))?
        }
        None => CodecConfig::default(),
    };
    let m = RunManifest {
        seed: a.seed,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr.clone(),
        lambda: a.lambda,
        distortion: a.distortion.parse::<Distortion>().map_err(|e| e.to_string())?,
        rig: a.rig.clone(),
        image_size: a.size,
        block: a.block,
        data: ply_files(a.data.as_deref().expect("required by clap"))?,
        checkpoint: a.out.clone(),
        checkpoint_every: a.checkpoint_every,
        codec: CodecConfig {
            seed: a.seed,
            ..codec
        },
    };
    m.validate().map_err(|e| e.to_string())?;
    Ok(m)
}

fn run_train(a: &TrainArgs) -> CliResult<()> {
    let m = manifest_from_args(a)?;
    if let Some(ck) = &m.checkpoint {
        let mut path = ck.clone().into_os_string();
        path.push(".manifest");
        fs::write(&path, m.to_text()).map_err(err("writing manifest"))?;
    }
    let clouds = m.data.iter().map(|p| load(p)).collect::<CliResult<Vec<_>>>()?;
    let scenes = pipeline::prepare_scenes(&clouds, &m).map_err(err("preparing patches"))?;
    eprintln!("{} patches from {} clouds", scenes.len(), clouds.len());
    let mut codec = Codec::new(m.codec.clone()).map_err(err("model"))?;
    println!("step,epoch,lr,loss,bpp_y,bpp_z,distortion");
    let result = pipeline::train(&mut codec, &scenes, &m, |s| {
        println!(
            "{},{},{:e},{:.6},{:.6},{:.6},{:.8}",
            s.step, s.epoch, s.lr, s.loss, s.bpp_y, s.bpp_z, s.distortion
        );
    });
    match result {
        Ok(_) => {
            if m.checkpoint.is_none() {
                eprintln!("no checkpoint path; weights discarded");
            }
            Ok(())
        }
        Err(e) => Err(format!("training aborted: {e}\nrun manifest:\n{}", m.to_text())),
    }
}

fn run_eval(
    reference: &Path,
    recon: &Path,
    rig: &str,
    size: usize,
    csv: &Path,
    bitstream: Option<&Path>,
    lambda: Option<f64>,
) -> CliResult<()> {
    let a = load(reference)?;
    let b = load(recon)?;
    let rig = parse_rig(rig, size).map_err(|e| e.to_string())?;
    let quality = pipeline::view_quality(&a, &b, &rig).map_err(err("evaluating"))?;
    let (bpp, lambda) = match bitstream {
        Some(p) => {
            let bytes = fs::read(p).map_err(err(format!("reading {}", p.display())))?;
            let bs = Bitstream::from_bytes(&bytes).map_err(err("parsing bitstream"))?;
            let l = lambda.or_else(|| LAMBDAS.get(bs.lambda_id as usize).copied());
            (8.0 * bytes.len() as f64 / a.len() as f64, l)
        }
        None => (f64::NAN, lambda),
    };
    let row = EvalRow {
        cloud: reference
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        lambda: lambda.unwrap_or(f64::NAN),
        bpp,
        quality,
    };
    let fresh = fs::metadata(csv).map_or(true, |m| m.len() == 0);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(csv)
        .map_err(err(format!("opening {}", csv.display())))?;
    if fresh {
        writeln!(f, "{EVAL_CSV_HEADER}").map_err(err("writing csv"))?;
    }
    writeln!(f, "{}", row.to_csv()).map_err(err("writing csv"))?;
    println!("{EVAL_CSV_HEADER}\n{}", row.to_csv());
    Ok(())
}

fn run_gradcheck(module: &str, seeds: usize) -> CliResult<()> {
    let names: Vec<&str> = if module == "all" {
        suites::SUITES.to_vec()
    } else {
        vec![module]
    };
    let mut failed = 0;
    for name in names {
        let r = suites::run_suite(name, seeds).map_err(|e| e.to_string())?;
        println!(
            "{} {:<20} seeds {:>3}  max rel err {:.3e}  incomplete {}  {:.1}s",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.seeds,
            r.max_rel_err,
            r.incomplete_seeds,
            r.elapsed.as_secs_f64()
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(format!("{failed} gradient suite(s) failed"));
    }
    Ok(())
}

fn run_bench(ns: &[usize], repeats: usize, window: usize) -> CliResult<()> {
    println!("n,seconds,ratio_to_previous");
    let mut prev: Option<(usize, f64)> = None;
    for &n in ns {
        let t = time_neighbor_table(n, window, repeats, 0)
            .map_err(|e| e.to_string())?
            .as_secs_f64();
        let ratio = prev.map_or(String::new(), |(_, p)| format!("{:.3}", t / p));
        println!("{n},{t:.6},{ratio}");
        prev = Some((n, t));
    }
    Ok(())
}
