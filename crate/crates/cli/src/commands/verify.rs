use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use abq_core::bitkernel::{bitpack, enumerate_tile_candidates, gemm_i64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_codes, usage};
use crate::args::VerifyArgs;
use crate::CliResult;

const MAX_DIM: usize = 64;
const MAX_PLANES: u32 = 8;

/// `Σ_k a[i,k]·b[j,k]` on the raw codes.
fn reference(a: &[u8], b: &[u8], m: usize, n: usize, k: usize) -> Vec<i64> {
    let mut out = vec![0i64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k)
                .map(|t| i64::from(a[i * k + t]) * i64::from(b[j * k + t]))
                .sum();
        }
    }
    out
}

pub fn run(args: &VerifyArgs, seed: u64) -> CliResult<ExitCode> {
    if args.cases == 0 {
        return Ok(usage("--cases must be positive"));
    }
    if let Some(bits) = args.bits {
        if bits.a > MAX_PLANES || bits.weight_planes() > MAX_PLANES {
            return Ok(usage(format!("at most {MAX_PLANES} planes per operand")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    // (p, q) -> (passed, total)
    let mut tally: BTreeMap<(u32, u32), (usize, usize)> = BTreeMap::new();
    let mut first_failure = None;

    for case in 0..args.cases {
        let (m, n, k) = match args.shape {
            Some(s) => (s.m, s.n, s.k),
            None => (
                rng.random_range(1..=MAX_DIM),
                rng.random_range(1..=MAX_DIM),
                rng.random_range(1..=MAX_DIM),
            ),
        };
        let (p, q) = match args.bits {
            Some(b) => (b.a, b.weight_planes()),
            None => (
                rng.random_range(1..=MAX_PLANES),
                rng.random_range(1..=MAX_PLANES),
            ),
        };
        let a = random_codes(&mut rng, m * k, p);
        let b = random_codes(&mut rng, n * k, q);
        let candidates = enumerate_tile_candidates(p, q, m, n, k);
        let tile = candidates[rng.random_range(0..candidates.len())];

        let got = gemm_i64(&bitpack(&a, m, k, p)?, &bitpack(&b, n, k, q)?, &tile)?;
        let ok = got.data == reference(&a, &b, m, n, k);

        let entry = tally.entry((p, q)).or_default();
        entry.1 += 1;
        if ok {
            entry.0 += 1;
        } else {
            let what = format!("case {case}: M={m} N={n} K={k} p={p} q={q} tile={tile}");
            log::error!("{what}");
            first_failure.get_or_insert(what);
        }
    }

    for ((p, q), (passed, total)) in &tally {
        println!("p={p} q={q}: {passed}/{total}");
    }
    let passed: usize = tally.values().map(|v| v.0).sum();
    log::info!("verified in {:.2?}", start.elapsed());
    match first_failure {
        None => {
            println!("PASS {passed}/{} cases bit-exact (seed {seed})", args.cases);
            Ok(ExitCode::SUCCESS)
        }
        Some(f) => {
            println!("FAIL {passed}/{} cases bit-exact (seed {seed})", args.cases);
            println!("first mismatch: {f}");
            Ok(ExitCode::from(crate::EXIT_FAIL))
        }
    }
}
