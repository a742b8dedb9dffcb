use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use modalsphere::boundary::{build_connection_matrix, build_feedback_matrix, BlockMatrix, BoundaryRegion};
use modalsphere::engine::{closed_loop_spectrum, Permeability};
use modalsphere::scenario::{self, Scenario};
use modalsphere::{compare_traces, run_oracle, simulate, Trace};

/// Spectral diffusion simulator for spheres with reflective or permeable walls.
#[derive(Debug, Parser)]
#[command(name = "modalsphere", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Directory for output files.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the spectral engine and write its CSV trace.
    Simulate {
        scenario: PathBuf,
        /// Divide concentrations by M_total/V and masses by M_total.
        #[arg(long)]
        normalized: bool,
        /// Also write the feedback and connection matrices as triplets.
        #[arg(long)]
        dump_matrices: bool,
    },
    /// Run the particle oracle and write its CSV trace.
    Oracle {
        scenario: PathBuf,
        #[arg(long)]
        normalized: bool,
    },
    /// Run engine and oracle on matched kernel observables.
    Compare {
        scenario: PathBuf,
        /// Allowed deviation as a fraction of the peak concentration.
        #[arg(long, default_value_t = 0.05)]
        tol: f64,
        #[arg(long)]
        normalized: bool,
    },
    /// Write the mode set and open/closed-loop eigenvalues.
    Spectrum {
        scenario: PathBuf,
        #[arg(long)]
        dump_matrices: bool,
    },
    /// Write the built-in scenario files for one figure.
    Presets {
        #[arg(value_parser = ["fig4", "fig5", "fig6"])]
        figure: String,
    },
}

/// A failed `compare`; the only non-error path to a nonzero exit.
#[derive(Debug)]
struct ToleranceExceeded;

impl std::fmt::Display for ToleranceExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("engine and oracle disagree beyond the tolerance")
    }
}

impl std::error::Error for ToleranceExceeded {}

/// Input problems that are not library errors (unreadable file, bad flag value).
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ToleranceExceeded>() {
            return 1;
        }
        if cause.is::<InputError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<modalsphere::Error>() {
            return if e.is_config() { 2 } else { 3 };
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(InputError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Simulate {
            scenario,
            normalized,
            dump_matrices,
        } => cmd_simulate(&scenario, &out, normalized, dump_matrices),
        Command::Oracle { scenario, normalized } => cmd_oracle(&scenario, &out, normalized),
        Command::Compare {
            scenario,
            tol,
            normalized,
        } => cmd_compare(&scenario, &out, tol, normalized),
        Command::Spectrum {
            scenario,
            dump_matrices,
        } => cmd_spectrum(&scenario, &out, dump_matrices),
        Command::Presets { figure } => cmd_presets(&figure, &out),
    }
}

fn load(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())))?;
    Scenario::from_json(&text).with_context(|| format!("in scenario {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "scenario".to_string(), |s| s.to_string_lossy().into_owned())
}

fn write_trace(trace: &Trace, path: &Path, normalized: bool) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let t = if normalized { trace.normalized() } else { trace.clone() };
    t.write_csv(BufWriter::new(file))
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn wants_normalized(sc: &Scenario, flag: bool) -> bool {
    flag || sc.output.as_ref().is_some_and(|o| o.normalized)
}

fn cmd_simulate(path: &Path, out: &Path, normalized: bool, dump: bool) -> Result<()> {
    let sc = load(path)?;
    let t0 = Instant::now();
    let ms = sc.mode_set()?;
    let sim = sc.build_simulation_with(ms, None)?;
    let trace = simulate(&sim)?;
    eprintln!("engine: {} samples in {:.2?}", trace.times.len(), t0.elapsed());
    let target = match sc.output.as_ref().and_then(|o| o.path.as_ref()) {
        Some(p) => out.join(p),
        None => out.join(format!("{}.engine.csv", stem(path))),
    };
    write_trace(&trace, &target, wants_normalized(&sc, normalized))?;
    if dump {
        dump_matrices(&sc, path, out)?;
    }
    Ok(())
}

fn cmd_oracle(path: &Path, out: &Path, normalized: bool) -> Result<()> {
    let sc = load(path)?;
    let setup = sc.build_oracle()?;
    let t0 = Instant::now();
    let tr = run_oracle(&setup)?;
    eprintln!(
        "oracle: {} particles, {} samples in {:.2?}",
        tr.n_particles,
        tr.trace.times.len(),
        t0.elapsed()
    );
    write_trace(
        &tr.trace,
        &out.join(format!("{}.oracle.csv", stem(path))),
        wants_normalized(&sc, normalized),
    )
}

fn cmd_compare(path: &Path, out: &Path, tol: f64, normalized: bool) -> Result<()> {
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(InputError(format!("--tol must be non-negative, got {tol}")).into());
    }
    let sc = load(path)?;
    let setup = sc.build_oracle()?;
    let sim = sc.build_simulation(Some(setup.config.kernel_radius))?;
    let ((engine, te), (oracle, to)) = rayon::join(
        || {
            let t = Instant::now();
            (simulate(&sim), t.elapsed())
        },
        || {
            let t = Instant::now();
            (run_oracle(&setup), t.elapsed())
        },
    );
    let (engine, oracle) = (engine?, oracle?);
    let cmp = compare_traces(&engine, &oracle, tol)?;
    let base = stem(path);
    let norm = wants_normalized(&sc, normalized);
    write_trace(&engine, &out.join(format!("{base}.engine.csv")), norm)?;
    write_trace(&oracle.trace, &out.join(format!("{base}.oracle.csv")), norm)?;
    let report = out.join(format!("{base}.compare.csv"));
    cmp.write_csv(BufWriter::new(fs::File::create(&report)?))?;
    println!("wrote {}", report.display());
    println!(
        "runtime: engine {:.2?}, oracle {:.2?} ({:.0}x)",
        te,
        to,
        to.as_secs_f64() / te.as_secs_f64().max(1e-9)
    );
    for p in &cmp.points {
        println!(
            "point {}: max deviation {:.4} of peak at t = {}, {} of {} samples outside max(tol*peak, 3 sigma): {}",
            p.point,
            p.relative(),
            p.worst_time,
            p.failures,
            p.samples,
            if p.passed() { "PASS" } else { "FAIL" }
        );
    }
    if !cmp.passed() {
        return Err(ToleranceExceeded.into());
    }
    Ok(())
}

fn distinct_gammas(p: &Permeability) -> Vec<f64> {
    let mut g: Vec<f64> = match p {
        Permeability::Constant(g) => vec![*g],
        Permeability::Schedule(s) => s.iter().map(|e| e.1).collect(),
    };
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

fn cmd_spectrum(path: &Path, out: &Path, dump: bool) -> Result<()> {
    let sc = load(path)?;
    let ms = sc.mode_set()?;
    let sim = sc.build_simulation_with(ms.clone(), None)?;
    let base = stem(path);

    let modes_path = out.join(format!("{base}.modes.csv"));
    let mut w = csv_file(&modes_path)?;
    w.write_record(["mu", "n", "nu", "m", "k", "s", "norm"])?;
    for md in ms.modes() {
        w.write_record([
            md.mu.to_string(),
            md.n.to_string(),
            md.nu.to_string(),
            md.m.to_string(),
            md.k.to_string(),
            md.s.to_string(),
            md.norm.to_string(),
        ])?;
    }
    w.flush()?;
    println!("wrote {}", modes_path.display());

    let spec_path = out.join(format!("{base}.spectrum.csv"));
    let mut w = csv_file(&spec_path)?;
    w.write_record(["sphere_id", "gamma", "block", "kind", "index", "eigenvalue"])?;
    for (si, sphere) in sim.spheres.iter().enumerate() {
        let fb = sphere.feedback.as_deref();
        for gamma in distinct_gammas(&sphere.permeability) {
            for block in closed_loop_spectrum(&ms, fb, gamma) {
                let mut open: Vec<f64> = block.modes.iter().map(|&mu| ms.mode(mu).s).collect();
                open.sort_by(|a, b| b.total_cmp(a));
                for (kind, vals) in [("open", &open), ("closed", &block.eigenvalues)] {
                    for (i, v) in vals.iter().enumerate() {
                        w.write_record([
                            (si + 1).to_string(),
                            gamma.to_string(),
                            block.label.clone(),
                            kind.to_string(),
                            i.to_string(),
                            v.to_string(),
                        ])?;
                    }
                }
                if block.modes.contains(&0) {
                    println!(
                        "sphere {}: gamma = {gamma}: leading closed-loop eigenvalue of the block holding the constant mode {}: {:.6}",
                        si + 1,
                        block.label,
                        block.eigenvalues[0]
                    );
                }
            }
        }
    }
    w.flush()?;
    println!("wrote {}", spec_path.display());
    if dump {
        dump_matrices(&sc, path, out)?;
    }
    Ok(())
}

fn csv_file(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn write_triplets(m: &BlockMatrix, path: &Path) -> Result<()> {
    let mut w = csv_file(path)?;
    w.write_record(["row", "col", "value"])?;
    for (i, j, v) in m.triplets() {
        w.write_record([i.to_string(), j.to_string(), v.to_string()])?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn dump_matrices(sc: &Scenario, path: &Path, out: &Path) -> Result<()> {
    let ms = sc.mode_set()?;
    let base = stem(path);
    let region = match (sc.active_network(), sc.permeability.is_some()) {
        (Some(n), _) => Some(BoundaryRegion::Cap { theta0: n.theta0 }),
        (None, true) => Some(sc.region.unwrap_or(BoundaryRegion::FullSphere)),
        (None, false) => None,
    };
    match region {
        Some(r) => write_triplets(
            &build_feedback_matrix(&ms, r)?.matrix,
            &out.join(format!("{base}.feedback.csv")),
        )?,
        None => eprintln!("reflective sphere: no feedback matrix"),
    }
    if let Some(n) = sc.active_network() {
        let conn = build_connection_matrix(&ms, &ms, n.theta0, n.gamma_s1, n.gamma_s2)?;
        write_triplets(&conn.matrix, &out.join(format!("{base}.connection.csv")))?;
    }
    Ok(())
}

fn cmd_presets(figure: &str, out: &Path) -> Result<()> {
    let files = scenario::preset(figure)?;
    if files.is_empty() {
        bail!("preset {figure} is empty");
    }
    for (name, sc) in files {
        let p = out.join(format!("{name}.json"));
        fs::write(&p, sc.to_json() + "\n").with_context(|| format!("writing {}", p.display()))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}
