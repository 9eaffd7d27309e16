pub mod bench;
pub mod calibrate;
pub mod files;
pub mod verify;

use std::process::ExitCode;

use rand::Rng;

/// Print a usage complaint and return the usage exit code.
pub fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(crate::EXIT_USAGE)
}

/// Uniform codes that fill `planes` bit planes.
pub fn random_codes<R: Rng>(rng: &mut R, len: usize, planes: u32) -> Vec<u8> {
    let top = (1u32 << planes) - 1;
    (0..len).map(|_| rng.random_range(0..=top) as u8).collect()
}
