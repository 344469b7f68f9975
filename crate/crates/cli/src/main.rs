mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use magc::Error;

use args::{Cli, Command};

/// 1 usage, 2 I/O, 3 format, 4 model mismatch, 5 numeric.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => 1,
        Error::Io(_) => 2,
        Error::Format(_) | Error::Coding(_) | Error::Shape { .. } => 3,
        Error::ModelMismatch(_) | Error::MissingParameter(_) => 4,
        Error::Numeric(_) | Error::NonFinite { .. } => 5,
        Error::Stage { .. } => 1,
    }
}

fn run(cli: &Cli) -> magc::Result<()> {
    use commands::*;
    match &cli.command {
        Command::GenData(a) => gen_data_cmd(a),
        Command::TrainVae(a) => {
            check_inputs(&[&a.data])?;
            train_vae_cmd(a)
        }
        Command::TrainLcm(a) => {
            check_inputs(&[&a.data, &a.vae])?;
            train_lcm_cmd(a)
        }
        Command::TrainDiffusion(a) => {
            check_inputs(&[&a.data, &a.vae, &a.lcm])?;
            train_diffusion_cmd(a)
        }
        Command::Compress(a) => {
            let mut inputs = vec![&a.image, &a.vae, &a.lcm];
            inputs.extend(a.map.as_ref());
            check_inputs(&inputs)?;
            compress_cmd(a)
        }
        Command::Decompress(a) => {
            let mut inputs = vec![&a.stream, &a.vae, &a.lcm];
            inputs.extend(a.map.as_ref());
            inputs.extend(a.denoiser.as_ref());
            check_inputs(&inputs)?;
            decompress_cmd(a)
        }
        Command::Eval(a) => {
            let mut inputs = vec![&a.data, &a.vae];
            inputs.extend(a.lcm.iter());
            inputs.extend(a.denoiser.as_ref());
            check_inputs(&inputs)?;
            eval_cmd(a)
        }
        Command::Bd(a) => {
            check_inputs(&[&a.anchor, &a.test])?;
            bd_cmd(a)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    magc::exec::init_threads(None);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
