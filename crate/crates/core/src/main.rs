use std::process::ExitCode;

fn main() -> ExitCode {
    captcha_ocr::cli::main()
}
