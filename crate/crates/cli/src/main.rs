use std::process::ExitCode;

fn main() -> ExitCode {
    let cmd = match polyavsr_cli::cmd_parse(std::env::args_os()) {
        Ok(cmd) => cmd,
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                return ExitCode::from(clap_err.exit_code() as u8);
            }
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match polyavsr_cli::run(cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
