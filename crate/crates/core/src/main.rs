fn main() {
    let code = match elana::cli::parse_args(std::env::args_os()) {
        Ok(plan) => elana::cli::execute(&plan),
        Err(elana::cli::ParseError::Clap(e)) => {
            let _ = e.print();
            e.exit_code()
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
