use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::new().filter_or("RPCATE_LOG", "warn")).init();
    std::process::exit(rpcate::cli::main_with(std::env::args_os()));
}
