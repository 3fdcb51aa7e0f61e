use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use stbn_cli::args::{Cli, Command};
use stbn_cli::commands::echo_config;
use stbn_cli::config::resolve;
use stbn_cli::{cmd_evaluate, cmd_info, cmd_optimize, cmd_spectrum, CliResult};
use stbn_cli::{EvaluateConfig, OptimizeConfig, SpectrumConfig};

// A closed stdout (`stbn info t.stbn | head`) is not an error.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Optimize(args) => {
            let config: OptimizeConfig = resolve(args.config.as_deref(), &args)?;
            echo_config("optimize", &config);
            let report = cmd_optimize(&config)?;
            out!(
                "wrote {} ({} / {}); final objective {}",
                report.tile.display(),
                report.log.display(),
                report.meta.display(),
                report.final_objective.map_or("n/a".into(), |v| format!("{v:.6}"))
            );
        }
        Command::Evaluate(args) => {
            let config: EvaluateConfig = resolve(args.config.as_deref(), &args)?;
            echo_config("evaluate", &config);
            let r = cmd_evaluate(&config)?;
            out!(
                "frame {}: prelmse tile {:.6e}, white {:.6e}, ratio {:.4}; wrote {}",
                r.selected.frame,
                r.selected.prelmse_tile,
                r.selected.prelmse_white,
                r.selected.ratio,
                r.out.display()
            );
        }
        Command::Spectrum(args) => {
            let config: SpectrumConfig = resolve(args.config.as_deref(), &args)?;
            echo_config("spectrum", &config);
            let r = cmd_spectrum(&config)?;
            for b in &r.bands {
                out!(
                    "{} r={}: low-band ratio {:.4} (white-noise area fraction {:.4})",
                    b.slice, b.radius, b.ratio, b.area_fraction
                );
            }
            out!("wrote {}, {}, {}", r.xy_png.display(), r.xt_png.display(), r.csv.display());
        }
        Command::Info { tile } => {
            let info = cmd_info(&tile)?;
            out!("{}", serde_json::to_string_pretty(&info).unwrap_or_default());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
