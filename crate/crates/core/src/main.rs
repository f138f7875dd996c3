fn main() {
    match msvq::cli::run() {
        Ok(()) => {}
        Err(msvq::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
