use clap::Parser;

/// Domain adaptation with dynamic-margin metric learning.
///
/// Commands: gen-data, train, eval, perturb, analyze, ablate. Options are
/// config keys given as `--key value`, read after any `--config FILE` or
/// `--manifest FILE`.
#[derive(Parser)]
#[command(name = "mlada", version)]
struct Cli {
    command: String,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    options: Vec<String>,
}

fn main() {
    let cli = Cli::parse();
    let result =
        mlada_cli::parse_args(&cli.options).and_then(|cfg| mlada_cli::run(&cli.command, &cfg));
    match result {
        Ok(summary) => println!("{}", summary),
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(e.exit_code());
        }
    }
}
