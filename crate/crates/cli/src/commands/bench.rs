use std::process::ExitCode;

use abq_core::bitkernel::autotune::autotune_against;
use abq_core::bitkernel::{bench_naive, bitpack, enumerate_tile_candidates, BenchRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{random_codes, usage};
use crate::args::{BenchArgs, Shape};
use crate::report::{emit, BenchRow};
use crate::CliResult;

/// (K, N) of the projections in a 7B-class decoder layer.
const LLAMA7B_KN: [(usize, usize); 5] = [
    (4096, 4096),
    (1024, 8192),
    (11008, 4096),
    (5120, 5120),
    (4096, 11008),
];

pub fn preset_shapes(name: &str) -> Option<Vec<Shape>> {
    let ms: &[usize] = match name {
        "llama7b-gemv" => &[1],
        "llama7b-m4" => &[4],
        "llama7b-m8" => &[8],
        "llama7b" => &[1, 4, 8],
        _ => return None,
    };
    Some(
        ms.iter()
            .flat_map(|&m| LLAMA7B_KN.iter().map(move |&(k, n)| Shape { m, n, k }))
            .collect(),
    )
}

pub fn run(args: &BenchArgs, seed: u64) -> CliResult<ExitCode> {
    let shapes = match (&args.shape, &args.preset) {
        (Some(s), _) => vec![*s],
        (None, Some(p)) => match preset_shapes(p) {
            Some(v) => v,
            None => return Ok(usage(format!("unknown preset {p:?}"))),
        },
        (None, None) => return Ok(usage("one of --shape or --preset is required")),
    };
    let (p, q) = (args.bits.a, args.bits.weight_planes());
    if p > 8 || q > 8 {
        return Ok(usage("at most 8 planes per operand"));
    }
    if args.trials < 3 {
        return Ok(usage("--trials must be at least 3"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<BenchRecord> = Vec::new();
    println!(
        "config_id      tile                  p  q      M      N      K   median_us      TOPS"
    );
    for s in shapes {
        let a = bitpack(&random_codes(&mut rng, s.m * s.k, p), s.m, s.k, p)?;
        let b = bitpack(&random_codes(&mut rng, s.n * s.k, q), s.n, s.k, q)?;
        let mut candidates = enumerate_tile_candidates(p, q, s.m, s.n, s.k);
        if let Some(limit) = args.max_candidates {
            candidates.truncate(limit.max(1));
        }
        log::info!("{}x{}x{}: {} candidates", s.m, s.n, s.k, candidates.len());

        let (reference, naive) = bench_naive(&a, &b, args.trials)?;
        let (best, tuned) = autotune_against(&candidates, &a, &b, args.trials, &reference)?;
        let fastest = tuned
            .iter()
            .find(|r| r.tile == Some(best))
            .expect("best comes from the records");
        print_row(&naive);
        print_row(fastest);
        println!(
            "best {best} is {:.2}x the untiled baseline",
            naive.median_us / fastest.median_us
        );
        records.push(naive);
        records.extend(tuned);
    }

    if let Some(path) = &args.emit {
        let rows: Vec<BenchRow> = records.iter().map(BenchRow::from).collect();
        emit(path, &rows)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn print_row(r: &BenchRecord) {
    let tile = r.tile.map_or_else(|| "-".to_string(), |t| t.to_string());
    println!(
        "{:<14} {:<20} {:>2} {:>2} {:>6} {:>6} {:>6} {:>11.1} {:>9.4}",
        r.config_id, tile, r.p, r.q, r.m, r.n, r.k, r.median_us, r.tops
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        assert_eq!(preset_shapes("llama7b-gemv").unwrap().len(), 5);
        assert_eq!(preset_shapes("llama7b").unwrap().len(), 15);
        assert!(preset_shapes("gpt2").is_none());
        assert!(preset_shapes("llama7b-m8")
            .unwrap()
            .iter()
            .all(|s| s.m == 8));
    }
}
