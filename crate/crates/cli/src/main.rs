//! `neufmt`: scene simulation, reconstruction, scoring and export.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

mod errors;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use neufmt_core::export::{domain_mask, field_from_text, field_to_text, nodal_to_grid, vtk_structured_points};
use neufmt_core::inr::NeuralField;
use neufmt_core::kv::KvConfig;
use neufmt_core::metrics::{full_width_half_max, line_profile, mu_error, report_csv, MetricsRow, ThresholdPolicy};
use neufmt_core::phantoms::{read_bundle, simulate_scene, SceneBundle, SceneOptions, ScenePreset, DEFAULT_EDGE_LEN, TRUTH_FILE};
use neufmt_core::pipeline::{desk_config, grid_dice, metrics_grid, run_method, BaselineConfig, Method, BASELINE_KEYS};
use neufmt_core::recon::{sample_field_on_grid, ReconError, ReconTrace, VolumeGrid, CONFIG_KEYS};

use errors::{CliError, CliResult};

pub const TRACE_FILE: &str = "trace.csv";
pub const FIELD_FILE: &str = "field.txt";
pub const VOLUME_FILE: &str = "volume.vtk";
pub const NETWORK_FILE: &str = "network.inr";
pub const RUN_MANIFEST: &str = "manifest.cfg";

/// Keys written into a run manifest that are not settings; accepted and
/// skipped when a manifest is fed back as `--config`.
const MANIFEST_ONLY_KEYS: [&str; 5] = ["method", "scene", "final_mu_a", "final_mu_s_prime", "nodes"];

#[derive(Parser)]
#[command(name = "neufmt", version, about = "Fluorescence tomography with a neural concentration field and optical-property refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a preset scene and write its bundle.
    Phantom {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = DEFAULT_EDGE_LEN)]
        edge: f64,
        /// Relative standard deviation of multiplicative Gaussian noise.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        source_grid: usize,
        #[arg(long, default_value_t = 16)]
        detector_grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a scene bundle with one method.
    Reconstruct {
        /// Scene bundle; defaults to the `scene` key of --config.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// mu-neufmt, neufmt, l2cg or l1fista; defaults to the `method` key of --config.
        #[arg(long)]
        method: Option<String>,
        /// `key = value` file; a previous run manifest is accepted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after --config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score reconstructions against the scene ground truth.
    Metrics {
        /// Reconstruction output directories (or a scene bundle to score its truth).
        #[arg(long = "recon", required = true)]
        recons: Vec<PathBuf>,
        /// Scene bundle; defaults to the scene recorded in each run manifest.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// `relative:F`, `fixed:V` or `otsu`.
        #[arg(long, default_value = "relative:0.5")]
        threshold: String,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-sample a result for plotting.
    Export {
        /// Reconstruction output directory.
        #[arg(long, conflicts_with = "truth", required_unless_present = "truth")]
        recon: Option<PathBuf>,
        /// Export the ground truth of this scene bundle instead.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ExportFormat::Volume)]
        format: ExportFormat,
        /// Grid spacing in mm; half the scene edge length by default.
        #[arg(long)]
        step: Option<f64>,
        /// Evaluate the stored network instead of interpolating nodal values.
        #[arg(long)]
        network: bool,
        /// Line end points `x0 y0 z0 x1 y1 z1` for --format profile.
        #[arg(long, num_args = 6, allow_negative_numbers = true)]
        line: Option<Vec<f64>>,
        #[arg(long, default_value_t = 201)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    /// Legacy VTK structured points.
    Volume,
    /// CSV line profile.
    Profile,
    /// Mesh file plus a nodal `field v1` file.
    Mesh,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom { preset, edge, noise, seed, source_grid, detector_grid, out } => {
            cmd_phantom(&preset, SceneOptions { edge_len: edge, noise, seed, source_grid, detector_grid }, &out)
        }
        Command::Reconstruct { scene, method, config, overrides, out } => cmd_reconstruct(scene, method, config, &overrides, &out),
        Command::Metrics { recons, scene, threshold, out } => cmd_metrics(&recons, scene.as_deref(), &threshold, out.as_deref()),
        Command::Export { recon, truth, format, step, network, line, samples, out } => {
            cmd_export(recon.as_deref(), truth.as_deref(), format, step, network, line, samples, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn cmd_phantom(preset: &str, options: SceneOptions, out: &Path) -> CliResult<()> {
    let preset = ScenePreset::parse(preset)?;
    if !(options.noise >= 0.0 && options.noise.is_finite()) {
        return Err(CliError::usage("--noise must be a non-negative number"));
    }
    if options.source_grid == 0 || options.detector_grid == 0 {
        return Err(CliError::usage("source and detector grids need at least one point per side"));
    }
    let scene = simulate_scene(preset, &options)?;
    scene.write_bundle(out)?;
    println!(
        "{}: {} nodes, {} sources, {} detectors, {} target nodes -> {}",
        preset.name(),
        scene.mesh.num_nodes(),
        scene.layout.num_sources(),
        scene.layout.num_detectors(),
        scene.truth.iter().filter(|&&v| v > 0.0).count(),
        out.display()
    );
    Ok(())
}

fn scene_edge(bundle: &SceneBundle) -> CliResult<f64> {
    Ok(bundle.manifest.get_or("edge_len", DEFAULT_EDGE_LEN)?)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<KvConfig> {
    let mut kv = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            KvConfig::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => KvConfig::new(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

/// Splits a run config into the neural and baseline parts, rejecting keys
/// neither understands.
fn split_config(kv: &KvConfig) -> CliResult<(KvConfig, KvConfig)> {
    let mut recon = KvConfig::new();
    let mut base = KvConfig::new();
    let mut unknown = Vec::new();
    for k in kv.keys() {
        let v = kv.get_str(k).unwrap_or_default();
        if CONFIG_KEYS.contains(&k) {
            recon.set(k, v);
        } else if BASELINE_KEYS.contains(&k) {
            base.set(k, v);
        } else if !MANIFEST_ONLY_KEYS.contains(&k) {
            unknown.push(k.to_string());
        }
    }
    if !unknown.is_empty() {
        return Err(CliError::usage(format!("unknown config key(s): {}", unknown.join(", "))));
    }
    Ok((recon, base))
}

/// Keys that have no effect on `method`.
fn ignored_keys(method: Method, recon: &KvConfig, base: &KvConfig) -> Vec<String> {
    const SHARED: [&str; 4] = ["mu_a", "mu_s_prime", "zeta", "c"];
    if method.is_neural() {
        base.keys().map(str::to_string).collect()
    } else {
        recon.keys().filter(|k| !SHARED.contains(k)).map(str::to_string).collect()
    }
}

fn cmd_reconstruct(scene: Option<PathBuf>, method: Option<String>, config: Option<PathBuf>, overrides: &[String], out: &Path) -> CliResult<()> {
    let kv = load_config(config.as_deref(), overrides)?;
    let method_name = method
        .or_else(|| kv.get_str("method").map(str::to_string))
        .ok_or_else(|| CliError::usage("no method given (--method or a `method` key)"))?;
    let method = Method::parse(&method_name).ok_or_else(|| {
        CliError::usage(format!(
            "unknown method `{method_name}`; valid methods: {}",
            Method::ALL.map(Method::name).join(", ")
        ))
    })?;
    let scene_dir = scene
        .or_else(|| kv.get_str("scene").map(PathBuf::from))
        .ok_or_else(|| CliError::usage("no scene given (--scene or a `scene` key)"))?;
    let (recon_kv, base_kv) = split_config(&kv)?;

    let bundle = read_bundle(&scene_dir)?;
    let mut cfg = desk_config();
    // instrument constants come from the scene unless overridden
    let truth = bundle.true_params().ok();
    if let Some(t) = truth {
        cfg.initial.zeta = t.zeta;
        cfg.initial.c = t.c;
    }
    cfg.apply_kv(&recon_kv).map_err(errors::recon)?;
    let mut base = BaselineConfig::default();
    base.apply_kv(&base_kv).map_err(errors::pipeline)?;
    let ignored = ignored_keys(method, &recon_kv, &base_kv);
    if !ignored.is_empty() {
        eprintln!("warning: method {} ignores: {}", method.name(), ignored.join(", "));
    }
    fs::create_dir_all(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;

    let result = match run_method(&bundle.mesh, &bundle.layout, &bundle.measurements.m, method, &cfg, &base) {
        Ok(r) => r,
        Err(e) => {
            if let neufmt_core::pipeline::PipelineError::Recon(ReconError::NonFinite { trace, .. } | ReconError::Factorization { trace, .. }) = &e {
                write(&out.join(TRACE_FILE), trace.to_csv())?;
            }
            return Err(errors::pipeline(e));
        }
    };

    let trace = match &result.trace {
        Some(t) => t.clone(),
        None => baseline_trace(&result.solve.as_ref().expect("baseline report").history, &result.c, result.params),
    };
    write(&out.join(TRACE_FILE), trace.to_csv())?;
    write(&out.join(FIELD_FILE), field_to_text(&result.c))?;
    let edge = scene_edge(&bundle)?;
    let grid = metrics_grid(&bundle.mesh, edge);
    let volume = match &result.field {
        Some(f) => {
            let mask = domain_mask(&bundle.mesh, &grid);
            sample_field_on_grid(f, &grid).into_iter().zip(mask).map(|(v, m)| if m { v } else { 0.0 }).collect()
        }
        None => nodal_to_grid(&bundle.mesh, &result.c, &grid),
    };
    write(&out.join(VOLUME_FILE), vtk_structured_points(&grid, "concentration", &volume))?;
    if let Some(f) = &result.field {
        f.save(&out.join(NETWORK_FILE)).map_err(|e| CliError::data(e.to_string()))?;
    }

    let mut manifest = cfg.to_kv();
    for k in BASELINE_KEYS {
        manifest.set(k, base.to_kv().get_str(k).unwrap_or_default());
    }
    manifest.set("method", method.name());
    let scene_abs = fs::canonicalize(&scene_dir).unwrap_or(scene_dir.clone());
    manifest.set("scene", scene_abs.display());
    manifest.set("nodes", bundle.mesh.num_nodes());
    manifest.set("final_mu_a", result.params.mu_a);
    manifest.set("final_mu_s_prime", result.params.mu_s_prime);
    write(&out.join(RUN_MANIFEST), format!("# reconstruction v1\n{}", manifest.to_text()))?;
    let last = trace.records.last().map_or(0.0, |r| r.data_loss);
    println!(
        "{}: final loss {last:.4e}, mu_a {:.5}, mu_s' {:.5} -> {}",
        method.name(),
        result.params.mu_a,
        result.params.mu_s_prime,
        out.display()
    );
    Ok(())
}

/// Trace rows for a linear solver: one per iteration with the solver's
/// residual or objective in the loss column and the fixed optical values.
fn baseline_trace(history: &[f64], c: &[f64], params: neufmt_core::fem::OpticalParams) -> ReconTrace {
    use neufmt_core::recon::TraceRecord;
    let records = history
        .iter()
        .enumerate()
        .map(|(i, &h)| TraceRecord { iter: i, loss: h, data_loss: h, mu_a: params.mu_a, mu_s: params.mu_s_prime, lr_theta: 0.0 })
        .collect();
    ReconTrace { records, final_c: c.to_vec(), final_params: params }
}

fn parse_threshold(s: &str) -> CliResult<ThresholdPolicy> {
    let bad = || CliError::usage(format!("bad --threshold `{s}`; use relative:F, fixed:V or otsu"));
    if s == "otsu" {
        return Ok(ThresholdPolicy::Otsu);
    }
    let (kind, v) = s.split_once(':').ok_or_else(bad)?;
    let v: f64 = v.parse().map_err(|_| bad())?;
    match kind {
        "relative" if v > 0.0 && v <= 1.0 => Ok(ThresholdPolicy::RelativeToMax(v)),
        "fixed" => Ok(ThresholdPolicy::Fixed(v)),
        _ => Err(bad()),
    }
}

fn read_trace_mu(path: &Path) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut a = Vec::new();
    let mut s = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |k: usize| cols.get(k).and_then(|v| v.parse::<f64>().ok());
        match (parse(2), parse(3)) {
            (Some(x), Some(y)) => {
                a.push(x);
                s.push(y);
            }
            _ => return Err(CliError::data(format!("{}: line {}: malformed trace row", path.display(), i + 1))),
        }
    }
    Ok((a, s))
}

fn cmd_metrics(recons: &[PathBuf], scene: Option<&Path>, threshold: &str, out: Option<&Path>) -> CliResult<()> {
    let policy = parse_threshold(threshold)?;
    let mut rows = Vec::new();
    for dir in recons {
        let manifest_path = dir.join(RUN_MANIFEST);
        let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| CliError::data(format!("{}: {e}", manifest_path.display())))?;
        let manifest = KvConfig::parse(&manifest_text).map_err(|e| CliError::data(format!("{}: {e}", manifest_path.display())))?;
        // a scene bundle scores its own ground truth
        let is_scene = manifest.get_str("method").is_none() && dir.join(TRUTH_FILE).exists();
        let scene_dir = match (scene, manifest.get_str("scene")) {
            (Some(s), _) => s.to_path_buf(),
            (None, _) if is_scene => dir.clone(),
            (None, Some(s)) => PathBuf::from(s),
            (None, None) => return Err(CliError::data(format!("{}: no scene recorded; pass --scene", manifest_path.display()))),
        };
        let truth_path = scene_dir.join(TRUTH_FILE);
        if !truth_path.exists() {
            return Err(CliError::data(format!("missing ground truth: {}", truth_path.display())));
        }
        let bundle = read_bundle(&scene_dir)?;
        let truth = bundle.truth.clone().ok_or_else(|| CliError::data(format!("missing ground truth: {}", truth_path.display())))?;
        let (method, recon, mu) = if is_scene {
            ("ground-truth".to_string(), truth.clone(), None)
        } else {
            let field_path = dir.join(FIELD_FILE);
            let text = fs::read_to_string(&field_path).map_err(|e| CliError::data(format!("{}: {e}", field_path.display())))?;
            let c = field_from_text(&text).map_err(|e| CliError::data(format!("{}: {e}", field_path.display())))?;
            if c.len() != bundle.mesh.num_nodes() {
                return Err(CliError::data(format!(
                    "{}: {} values for a mesh with {} nodes",
                    field_path.display(),
                    c.len(),
                    bundle.mesh.num_nodes()
                )));
            }
            let mu = read_trace_mu(&dir.join(TRACE_FILE))?;
            (manifest.get_str("method").unwrap_or("unknown").to_string(), c, Some(mu))
        };
        let grid = metrics_grid(&bundle.mesh, scene_edge(&bundle)?);
        let d = grid_dice(&bundle.mesh, &recon, &truth, &grid, policy).map_err(|e| CliError::data(e.to_string()))?;
        let (ea, es) = match mu {
            Some((a, s)) => {
                let t = bundle.true_params()?;
                let err = |h: &[f64], v: f64| mu_error(h, v).map(|e| e.final_window).map_err(|e| CliError::data(e.to_string()));
                (err(&a, t.mu_a)?, err(&s, t.mu_s_prime)?)
            }
            None => (0.0, 0.0),
        };
        let case = bundle.preset().map(str::to_string).unwrap_or_else(|| scene_dir.display().to_string());
        rows.push(MetricsRow { case, method, dice: d.dice, final_mu_a_err_pct: ea, final_mu_s_err_pct: es });
    }
    let csv = report_csv(&rows);
    match out {
        Some(p) => write(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_export(
    recon: Option<&Path>,
    truth: Option<&Path>,
    format: ExportFormat,
    step: Option<f64>,
    network: bool,
    line: Option<Vec<f64>>,
    samples: usize,
    out: &Path,
) -> CliResult<()> {
    let (bundle, values, field) = match (recon, truth) {
        (_, Some(scene)) => {
            let b = read_bundle(scene)?;
            let t = b.truth.clone().ok_or_else(|| CliError::data(format!("missing ground truth: {}", scene.join(TRUTH_FILE).display())))?;
            (b, t, None)
        }
        (Some(dir), None) => {
            let mpath = dir.join(RUN_MANIFEST);
            let text = fs::read_to_string(&mpath).map_err(|e| CliError::data(format!("{}: {e}", mpath.display())))?;
            let manifest = KvConfig::parse(&text).map_err(|e| CliError::data(format!("{}: {e}", mpath.display())))?;
            let scene = manifest.get_str("scene").ok_or_else(|| CliError::data(format!("{}: no scene recorded", mpath.display())))?;
            let b = read_bundle(Path::new(scene))?;
            let fpath = dir.join(FIELD_FILE);
            let text = fs::read_to_string(&fpath).map_err(|e| CliError::data(format!("{}: {e}", fpath.display())))?;
            let c = field_from_text(&text).map_err(|e| CliError::data(format!("{}: {e}", fpath.display())))?;
            if c.len() != b.mesh.num_nodes() {
                return Err(CliError::data(format!("{}: length does not match the scene mesh", fpath.display())));
            }
            let field = if network {
                let npath = dir.join(NETWORK_FILE);
                Some(NeuralField::load(&npath).map_err(|e| CliError::data(e.to_string()))?)
            } else {
                None
            };
            (b, c, field)
        }
        (None, None) => return Err(CliError::usage("either --recon or --truth is required")),
    };
    if network && field.is_none() {
        return Err(CliError::usage("--network needs a neural reconstruction directory"));
    }
    if format == ExportFormat::Mesh {
        let mesh_out = out.with_extension("tetmesh");
        let field_out = out.with_extension("field");
        bundle.mesh.save(&mesh_out).map_err(|e| CliError::data(e.to_string()))?;
        write(&field_out, field_to_text(&values))?;
        println!("{} {}", mesh_out.display(), field_out.display());
        return Ok(());
    }
    let step = match step {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(CliError::usage(format!("--step must be positive, got {s}"))),
        None => 0.5 * scene_edge(&bundle)?,
    };
    let grid = VolumeGrid::covering(&bundle.mesh, step);
    let sampled = match &field {
        Some(f) => {
            let mask = domain_mask(&bundle.mesh, &grid);
            sample_field_on_grid(f, &grid).into_iter().zip(mask).map(|(v, m)| if m { v } else { 0.0 }).collect()
        }
        None => nodal_to_grid(&bundle.mesh, &values, &grid),
    };
    match format {
        ExportFormat::Volume => write(out, vtk_structured_points(&grid, "concentration", &sampled)),
        ExportFormat::Profile => {
            let l = line.ok_or_else(|| CliError::usage("--format profile needs --line x0 y0 z0 x1 y1 z1"))?;
            if samples < 2 {
                return Err(CliError::usage("--samples must be at least 2"));
            }
            let (a, b) = ([l[0], l[1], l[2]], [l[3], l[4], l[5]]);
            let profile = line_profile(&sampled, &grid, a, b, samples).map_err(|e| CliError::usage(e.to_string()))?;
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
            let ds = len / (samples - 1) as f64;
            let mut csv = String::from("s,x,y,z,value\n");
            for (i, v) in profile.iter().enumerate() {
                let t = i as f64 / (samples - 1) as f64;
                let p: Vec<f64> = (0..3).map(|k| a[k] + t * (b[k] - a[k])).collect();
                csv.push_str(&format!("{:.6},{:.6},{:.6},{:.6},{v:e}\n", i as f64 * ds, p[0], p[1], p[2]));
            }
            write(out, csv)?;
            match full_width_half_max(&profile, ds) {
                Some(w) => println!("fwhm_mm = {w:.4}"),
                None => println!("fwhm_mm = none"),
            }
            Ok(())
        }
        ExportFormat::Mesh => unreachable!(),
    }
}
