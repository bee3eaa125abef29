use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use homog_cli::{run, Experiment};

#[derive(Parser)]
#[command(name = "homog", version, about = "Homogenisation experiments for dielectric composites")]
struct Args {
    experiment: Experiment,
    /// JSON file; omitted fields take the committed defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    match run(args.experiment, &text, args.out.as_deref(), args.threads) {
        Ok(summary) => {
            for c in &summary.criteria {
                eprintln!("{}", c.line());
            }
            eprintln!(
                "{} finished in {:.1} s; wrote {} to {}",
                args.experiment.name(),
                summary.seconds,
                summary.files.join(", "),
                summary.out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
