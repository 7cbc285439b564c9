use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cip1d::basis::read_tensor_cache;
use cip1d::forward::write_traces;
use cip1d::parallel::Execution;
use cip1d::pipeline::{
    compare, invert_global_from_dir, invert_local_from_dir, load_or_compute_tensor, run_hybrid,
    simulate, write_profile_csv, ExperimentConfig, ProfileSpec, RunOptions, RunReport,
};
use cip1d::Result;

/// Coefficient inversion for the 1-d wave equation from backscattered data.
#[derive(Parser)]
#[command(name = "cip1d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with experiment settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set lambda=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Interaction tensor cache file (read if present, written otherwise).
    #[arg(long)]
    tensor_cache: Option<PathBuf>,
    /// Run the data-parallel loops sequentially.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn config(&self, profile: Option<ProfileSpec>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = profile {
            cfg.profile = p;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                cip1d::CipError::Argument(format!("expected KEY=VALUE, got `{kv}`"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            out: Some(self.out.clone()),
            tensor_cache: self.tensor_cache.clone(),
            exec: if self.sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate boundary traces for a coefficient profile.
    Simulate {
        /// example:N, homogeneous, step:a,b,amp, gauss:c,w,amp or file:PATH
        #[arg(long)]
        profile: Option<ProfileSpec>,
        #[command(flatten)]
        common: Common,
    },
    /// Step 1 only: globally convergent reconstruction from traces on disk.
    InvertGlobal {
        /// Directory written by `simulate`.
        #[arg(long)]
        traces: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Steps 2 and 3 from traces on disk.
    InvertLocal {
        #[arg(long)]
        traces: PathBuf,
        /// Starting profile CSV (`x,c`); homogeneous when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Full hybrid run on one of the four built-in examples.
    RunExample {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=4))]
        example: u8,
        #[command(flatten)]
        common: Common,
    },
    /// Hybrid versus local-only reconstruction on the same data.
    Compare {
        #[arg(long)]
        profile: Option<ProfileSpec>,
        #[command(flatten)]
        common: Common,
    },
    /// Build or verify the interaction tensor cache.
    TensorCache {
        /// Cache file.
        path: PathBuf,
        /// Only check that the file matches the configured basis and quadrature.
        #[arg(long)]
        verify: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn summarize(label: &str, r: &RunReport) {
    if let Some(m) = r.metrics.c_glob {
        println!(
            "{label} c_glob   rel_l2={:.4} sup={:.4} jaccard={:.3}",
            m.relative_l2, m.sup, m.jaccard
        );
    }
    for (name, m) in [
        ("c_local1", r.metrics.c_local1),
        ("c_local2", r.metrics.c_local2),
    ] {
        println!(
            "{label} {name} rel_l2={:.4} sup={:.4} jaccard={:.3}",
            m.relative_l2, m.sup, m.jaccard
        );
    }
    println!(
        "{label} b1={:.4}{}",
        r.b1,
        if r.b1_flagged { " (flagged)" } else { "" }
    );
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
}

fn status(flagged: bool) -> ExitCode {
    if flagged {
        eprintln!("a line search failed; see the convergence reports");
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Simulate { profile, common } => {
            let cfg = common.config(profile)?;
            let sim = simulate(&cfg)?;
            let out = &common.out;
            std::fs::create_dir_all(out)?;
            write_traces(&out.join("traces"), &sim.measured, &sim.meta)?;
            write_profile_csv(&out.join("c_true.csv"), &sim.truth)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
            println!("traces written to {}", out.join("traces").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::InvertGlobal { traces, common } => {
            let cfg = common.config(None)?;
            let g = invert_global_from_dir(&cfg, &traces, &common.options())?;
            println!(
                "global: {} iterations, objective {:.3e}, stop {:?}",
                g.report.iterations,
                g.report.final_objective(),
                g.report.stop
            );
            for w in &g.warnings {
                eprintln!("warning: {w}");
            }
            Ok(status(g.report.flagged()))
        }
        Command::InvertLocal {
            traces,
            init,
            common,
        } => {
            let cfg = common.config(None)?;
            let l = invert_local_from_dir(&cfg, &traces, init.as_deref(), &common.options())?;
            println!(
                "local: step 2 {} iterations, step 3 {} iterations, b1={:.4}",
                l.report1.optim.iterations, l.report2.optim.iterations, l.reduction.b1
            );
            Ok(status(l.report1.flagged() || l.report2.flagged()))
        }
        Command::RunExample { example, common } => {
            let cfg = common.config(Some(ProfileSpec::Example(example)))?;
            let (report, _) = run_hybrid(&cfg, &common.options())?;
            summarize(&format!("example {example}"), &report);
            Ok(status(report.flagged))
        }
        Command::Compare { profile, common } => {
            let cfg = common.config(profile)?;
            let (cmp, _, _) = compare(&cfg, &common.options())?;
            summarize("hybrid", &cmp.hybrid);
            summarize("local-only", &cmp.local_only);
            println!("error ratio hybrid/local-only = {:.3}", cmp.error_ratio);
            Ok(status(cmp.hybrid.flagged || cmp.local_only.flagged))
        }
        Command::TensorCache {
            path,
            verify,
            common,
        } => {
            let cfg = common.config(None)?;
            if verify {
                read_tensor_cache(&path, &cfg.basis()?, &cfg.quadrature())?;
                println!("{}: ok", path.display());
            } else {
                let _ = std::fs::remove_file(&path);
                let t = load_or_compute_tensor(&cfg, Some(&path), common.options().exec)?;
                println!("{}: {} entries", path.display(), t.entries().len());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
