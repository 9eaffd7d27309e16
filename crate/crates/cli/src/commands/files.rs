use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::process::ExitCode;

use abq_core::bitkernel::pack_tensor;
use abq_core::io::{
    read_block, read_calib, read_packed_model, read_planes, read_tensor, write_packed_model,
    write_planes, write_tensor, PackedLayer, CALIB_MAGIC, MODEL_MAGIC, PLANES_MAGIC, QMODEL_MAGIC,
    TENSOR_MAGIC,
};
use abq_core::quantizer::{quantize, Granularity, QuantSpec, QuantizedTensor, Scheme, MAX_BITS};
use abq_core::toymodel::{BlockParams, Linear, ToyBlock};
use abq_core::AbqError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::usage;
use crate::args::{InspectArgs, PackArgs, QuantizeArgs};
use crate::CliResult;

pub fn quantize_cmd(args: &QuantizeArgs, seed: u64) -> CliResult<ExitCode> {
    if args.bits.w > u32::from(MAX_BITS) {
        return Ok(usage(format!(
            "weight bits above {MAX_BITS} are not packed"
        )));
    }
    let block: ToyBlock<f64> = match &args.block {
        Some(path) => read_block(&mut BufReader::new(File::open(path)?))?,
        None => ToyBlock::random(Default::default(), &mut ChaCha8Rng::seed_from_u64(seed))?,
    };
    let params = match &args.calib {
        Some(path) => {
            let (state, config) = read_calib::<f64, _>(&mut BufReader::new(File::open(path)?))?;
            if config != block.config {
                return Err(
                    format!("calibration is for {config:?}, block is {:?}", block.config).into(),
                );
            }
            state.params
        }
        None => BlockParams::identity(&block.config, false),
    };
    let scheme = if args.bits.balanced {
        Scheme::Balanced
    } else {
        Scheme::Asymmetric
    };
    let spec = QuantSpec::new(args.bits.w as u8, scheme, Granularity::PerChannel);
    if let Err(e) = spec.validate() {
        return Ok(usage(e));
    }

    let mut layers = Vec::with_capacity(Linear::ALL.len());
    for l in Linear::ALL {
        let w = params.effective_weight(&block, l)?;
        let tensor = quantize(&w, &params.clipped(l, &spec), None)?;
        let planes = pack_tensor(&tensor)?;
        if let Some(dir) = &args.tensor_dir {
            std::fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join(format!("{}.abqt", l.name())))?);
            write_tensor(&mut w, &tensor)?;
            w.flush()?;
        }
        println!(
            "{:<10} {:>4}x{:<4} {} planes, {} words",
            l.name(),
            tensor.rows,
            tensor.cols,
            planes.planes(),
            planes.words().len()
        );
        layers.push(PackedLayer {
            name: l.name().to_string(),
            tensor,
            planes,
        });
    }
    let mut out = BufWriter::new(File::create(&args.out)?);
    write_packed_model(&mut out, &layers)?;
    out.flush()?;
    println!("wrote {} layers to {}", layers.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn pack(args: &PackArgs) -> CliResult<ExitCode> {
    let tensor: QuantizedTensor<f64> = read_tensor(&mut BufReader::new(File::open(&args.input)?))?;
    tensor.validate()?;
    let planes = pack_tensor(&tensor)?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    write_planes(&mut out, &planes)?;
    out.flush()?;
    println!(
        "{}x{} -> {} planes of {} words per row",
        planes.rows(),
        planes.cols(),
        planes.planes(),
        planes.words_per_row()
    );
    Ok(ExitCode::SUCCESS)
}

fn describe_tensor(q: &QuantizedTensor<f64>) -> String {
    format!(
        "{}x{} {}-bit {} {:?}, {} scale groups",
        q.rows,
        q.cols,
        q.spec.bits,
        q.spec.scheme,
        q.spec.granularity,
        q.scales.len()
    )
}

/// Print what a file holds; a broken invariant fails the run.
pub fn inspect(args: &InspectArgs) -> CliResult<ExitCode> {
    let bytes = std::fs::read(&args.input)?;
    let magic = bytes
        .get(..4)
        .ok_or_else(|| AbqError::Format("file shorter than a header".into()))?;
    let mut r = Cursor::new(&bytes[..]);
    let mut problems = Vec::new();

    const KNOWN: [&[u8; 4]; 5] = [
        TENSOR_MAGIC,
        PLANES_MAGIC,
        MODEL_MAGIC,
        CALIB_MAGIC,
        QMODEL_MAGIC,
    ];
    if !KNOWN.iter().any(|m| magic == &m[..]) {
        return Err(AbqError::Format(format!(
            "unknown magic {:?}",
            String::from_utf8_lossy(magic)
        ))
        .into());
    }

    // loaders enforce layout invariants, so a load failure is a finding too
    let mut parse = || -> abq_core::Result<()> {
        if magic == TENSOR_MAGIC {
            let q: QuantizedTensor<f64> = read_tensor(&mut r)?;
            println!("quantized tensor: {}", describe_tensor(&q));
            if let Err(e) = q.validate() {
                problems.push(e.to_string());
            }
        } else if magic == PLANES_MAGIC {
            let p = read_planes(&mut r)?;
            println!(
                "bit planes: {} planes, {}x{}, {} words per row",
                p.planes(),
                p.rows(),
                p.cols(),
                p.words_per_row()
            );
        } else if magic == MODEL_MAGIC {
            let b: ToyBlock<f64> = read_block(&mut r)?;
            let c = b.config;
            println!(
                "toy block: dim {} heads {} hidden {}",
                c.dim, c.heads, c.hidden
            );
            for l in Linear::ALL {
                let (o, i) = b.weight(l).shape();
                println!("  {:<10} {o}x{i}", l.name());
            }
            if let Err(e) = b.validate() {
                problems.push(e.to_string());
            }
        } else if magic == CALIB_MAGIC {
            let (s, c) = read_calib::<f64, _>(&mut r)?;
            println!(
                "calibration state: dim {} heads {} hidden {}, gamma {}, {} steps",
                c.dim, c.heads, c.hidden, s.gamma, s.step
            );
            if let (Some(i), Some(f)) = (s.initial_loss, s.final_loss) {
                println!("  loss {:.6e} -> {:.6e}", i.loss, f.loss);
            }
            let below: usize = s
                .params
                .balance
                .iter()
                .flatten()
                .filter(|&&v| v.is_nan() || v <= 0.0)
                .count();
            if below > 0 {
                problems.push(format!("{below} non-positive balance entries"));
            }
        } else if magic == QMODEL_MAGIC {
            let layers = read_packed_model::<f64, _>(&mut r)?;
            println!("packed model: {} layers", layers.len());
            for l in &layers {
                println!("  {:<10} {}", l.name, describe_tensor(&l.tensor));
                if let Err(e) = l.tensor.validate() {
                    problems.push(format!("{}: {e}", l.name));
                } else if pack_tensor(&l.tensor)? != l.planes {
                    problems.push(format!(
                        "{}: stored planes differ from a fresh pack",
                        l.name
                    ));
                }
            }
        }
        Ok(())
    };
    if let Err(e) = parse() {
        problems.push(e.to_string());
    }

    if problems.is_empty() {
        println!("ok");
        Ok(ExitCode::SUCCESS)
    } else {
        for p in &problems {
            println!("invalid: {p}");
        }
        Ok(ExitCode::from(crate::EXIT_FAIL))
    }
}
