// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    let code = slcbm::cli::run(std::env::args_os());
    std::process::exit(code);
}
