use impact_hedge::cli::{dispatch, init_thread_pool};

fn main() {
    if let Err(e) = init_thread_pool() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
    let code = dispatch(
        std::env::args_os(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    std::process::exit(code);
}
