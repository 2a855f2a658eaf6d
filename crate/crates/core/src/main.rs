use std::process::ExitCode;
use std::sync::Arc;

use fogal::config::{parse_config, Invocation};
use fogal::dataset::{load_mnist, mnist_dir};
use fogal::metrics::emit_results;
use fogal::suite::{digest, run_repeats, run_suite, SuiteRun};
use fogal::Error;

fn run(inv: Invocation) -> fogal::Result<()> {
    let dir = mnist_dir(inv.mnist_dir.as_deref());
    let mnist = load_mnist(&dir)?;
    if let Some(preset) = inv.preset {
        for (run, files) in run_suite(preset, &inv.config, &mnist, Some(&inv.out))? {
            for line in digest(&run) {
                println!("{line}");
            }
            if let Some(f) = files {
                println!("  wrote {}", f.csv.display());
            }
        }
        return Ok(());
    }
    let train = Arc::new(mnist.train);
    let runs = run_repeats(&inv.config, &train, &mnist.test)?;
    let files = emit_results(&inv.config, &runs, &inv.out, "experiment")?;
    let run = SuiteRun {
        name: "experiment".into(),
        config: inv.config,
        runs,
    };
    for line in digest(&run) {
        println!("{line}");
    }
    println!(
        "wrote {}, {} and {}",
        files.csv.display(),
        files.summary.display(),
        files.plot.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let inv = match parse_config(std::env::args_os()) {
        Ok(inv) => inv,
        Err(Error::Usage(text)) => {
            print!("{text}");
            return ExitCode::SUCCESS;
        }
        Err(Error::Config(text)) if text.starts_with("error:") => {
            eprint!("{text}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(inv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
