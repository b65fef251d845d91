use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    match aortadiff::cli::run(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error category={}: {}", e.category(), e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
