use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::default().default_filter_or("info")).init();
    let code = arpa_lab::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
