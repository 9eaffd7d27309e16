use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::process::ExitCode;

use abq_core::calibration::{calibrate_block, synthetic_segments, CalibOptions};
use abq_core::io::{read_block, write_block, write_calib};
use abq_core::toymodel::{LayerSpecs, ToyBlock};
use abq_core::AbqError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::usage;
use crate::args::CalibrateArgs;
use crate::report::{emit, LossRow};
use crate::CliResult;

/// Block weights come from `seed`; segments from the next seed up.
pub fn run(args: &CalibrateArgs, seed: Option<u64>) -> CliResult<ExitCode> {
    let mut opts = match &args.config {
        Some(path) => match CalibOptions::from_file(path) {
            Ok(o) => o,
            Err(e @ AbqError::Config(_)) => return Ok(usage(e)),
            Err(e) => return Err(e.into()),
        },
        None => CalibOptions::default(),
    };
    if let Some(s) = seed {
        opts.seed = s;
    }

    let block: ToyBlock<f64> = match &args.block {
        Some(path) => {
            let b = read_block(&mut BufReader::new(File::open(path)?))?;
            if b.config != opts.block_config() {
                log::info!("block file overrides configured sizes with {:?}", b.config);
                opts.dim = b.config.dim;
                opts.heads = b.config.heads;
                opts.hidden = b.config.hidden;
            }
            b
        }
        None => ToyBlock::random(
            opts.block_config(),
            &mut ChaCha8Rng::seed_from_u64(opts.seed),
        )?,
    };
    if let Some(path) = &args.save_block {
        let mut w = BufWriter::new(File::create(path)?);
        write_block(&mut w, &block)?;
        w.flush()?;
    }
    let specs = LayerSpecs::uniform(opts.bits_w, opts.bits_a, opts.scheme)?;
    let data = synthetic_segments(
        opts.segments,
        opts.tokens,
        opts.dim,
        opts.seed.wrapping_add(1),
    );

    let state = calibrate_block(&block, &data, &specs, &opts)?;
    if specs.is_passthrough() {
        println!(
            "passthrough: nothing to calibrate at w{}a{}",
            opts.bits_w, opts.bits_a
        );
    }
    if let (Some(i), Some(f)) = (state.initial_loss, state.final_loss) {
        println!(
            "initial loss {:.6e} (dlc {:.6e}, akl {:.6e})",
            i.loss, i.dlc, i.akl
        );
        println!(
            "final   loss {:.6e} (dlc {:.6e}, akl {:.6e})",
            f.loss, f.dlc, f.akl
        );
    }
    println!("{} steps", state.step);

    let mut w = BufWriter::new(File::create(&args.out)?);
    write_calib(&mut w, &state, &block.config)?;
    w.flush()?;
    if let Some(path) = &args.emit {
        let rows: Vec<LossRow> = state.loss_history.iter().map(LossRow::from).collect();
        emit(path, &rows)?;
    }
    Ok(ExitCode::SUCCESS)
}
