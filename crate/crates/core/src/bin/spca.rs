// SPDX-License-Identifier: Apache-2.0

fn main() {
    std::process::exit(sparse_pca_amp::cli::run_cli(std::env::args_os()));
}
