fn main() {
    let code = sentiscale::app::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
