use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use kq_core::clustering::{Algorithm, KMeansOptions};
use kq_core::codec::{load_model, measured_bits, save_model, CompressedModel};
use kq_core::metrics::{model_report, ModelReport};
use kq_core::quantizer::{
    is_kernel_layer, quantize_model, CommandEvaluator, Evaluator, ModelQuantization, NoHook,
    ProxyEvaluator, QuantizeOptions, SearchConfig,
};
use kq_core::scalar::{
    quantize_codebooks, quantize_scalar_layer, recover_layer, scalar_layer_seed, QuantizedLayer,
};
use kq_core::tensor::{load_archive, save_archive, ModelArchive};
use kq_core::Error;

use crate::sweep::sweep_layer;
use crate::{Failure, OtherLayers, QuantizeArgs, RecoverArgs, ReportArgs, StageArg, SweepArgs};

fn worker_count(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

fn options(seed: u64, workers: usize) -> QuantizeOptions {
    QuantizeOptions {
        seed,
        kmeans: KMeansOptions {
            workers: worker_count(workers),
            ..KMeansOptions::default()
        },
        algorithm: Algorithm::Yinyang,
    }
}

fn evaluator(eval: &str, reference: &ModelArchive) -> Result<Box<dyn Evaluator>, Failure> {
    if eval == "proxy" {
        Ok(Box::new(ProxyEvaluator::new(reference.clone())))
    } else {
        Ok(Box::new(CommandEvaluator::new(eval)?))
    }
}

/// Output of the quantization pipeline before anything is written.
pub struct Quantized {
    pub search: ModelQuantization,
    pub model: CompressedModel,
    pub report: ModelReport,
}

/// Kernel quantization of every 3×3 conv layer, then codebook quantization
/// when the stage is K+C, then the remaining layers.
pub fn quantize(input: &ModelArchive, args: &QuantizeArgs) -> Result<Quantized, Failure> {
    let cfg = SearchConfig {
        alpha: args.alpha,
        r: args.r,
        max_iter: args.max_iter,
    };
    cfg.validate()?;
    let opts = options(args.seed, args.workers);
    let mut eval = evaluator(&args.eval, input)?;
    let search = quantize_model(input, &cfg, eval.as_mut(), &opts, &mut NoHook)?;

    let mut searched = search.layers.iter().peekable();
    let mut layers = Vec::with_capacity(input.len());
    for (i, t) in input.layers().iter().enumerate() {
        let layer = match searched.peek() {
            Some(s) if s.layer_index == i => {
                let s = searched.next().expect("peeked");
                QuantizedLayer::kernel(t, s.codebook.clone())?
            }
            _ => match args.other_layers {
                OtherLayers::Scalar => {
                    let o = QuantizeOptions {
                        seed: scalar_layer_seed(args.seed, i, args.bits),
                        ..opts
                    };
                    quantize_scalar_layer(t, args.bits, &o)?
                }
                OtherLayers::Passthrough => QuantizedLayer::passthrough(t),
            },
        };
        debug_assert_eq!(is_kernel_layer(t), layer.kernel_codebook().is_some());
        layers.push(layer);
    }

    if args.stage == StageArg::KPlusC {
        quantize_codebooks(&mut layers, args.bits, &opts, &mut |done| {
            log::info!("{done} codebooks quantized; retraining is left to the caller");
            Ok(())
        })?;
    }
    let report = model_report(&layers, args.bits)?;
    Ok(Quantized {
        search,
        model: CompressedModel::new(layers),
        report,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))
}

fn io_failure(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::Internal(format!("{}: {e}", path.display()))
}

fn write_quantize_report(path: &Path, args: &QuantizeArgs, q: &Quantized) -> Result<(), Failure> {
    let mut out = create(path)?;
    let mut meta = vec![
        format!("stage={}", args.stage),
        format!("alpha={}", args.alpha),
        format!("r={}", args.r),
        format!("max_iter={}", args.max_iter),
        format!("bits={}", args.bits),
        format!("seed={}", args.seed),
        format!("eval={}", args.eval),
        format!("other_layers={}", args.other_layers),
    ];
    for s in &q.search.layers {
        let st = &s.state;
        meta.push(format!(
            "search layer={} n_init={} selected={} probes={} a_ori={} a_base={} a_target={}",
            q.model.layers[s.layer_index].name(),
            st.n_init,
            s.codebook.k(),
            st.probes.len(),
            st.a_ori,
            st.a_base,
            st.a_target
        ));
    }
    for line in meta {
        writeln!(out, "# {line}").map_err(io_failure(path))?;
    }
    q.report.write_csv(&mut out)?;
    out.flush().map_err(io_failure(path))
}

pub fn cmd_quantize(args: &QuantizeArgs) -> Result<(), Failure> {
    let input = load_archive(&args.input).map_err(|e| Failure::input(&args.input, e))?;
    let q = quantize(&input, args)?;
    save_model(&q.model, &args.output)
        .map_err(|e| Failure::Internal(format!("{}: {e}", args.output.display())))?;
    if let Some(path) = &args.report {
        write_quantize_report(path, args, &q)?;
    }
    let bits = measured_bits(&q.model)?;
    print!("{}", q.report);
    println!(
        "payload bits {} (+{} level table bits) for {} layers",
        bits.total,
        bits.overhead_total,
        q.model.layers.len()
    );
    Ok(())
}

pub fn recover(model: &CompressedModel) -> Result<ModelArchive, Error> {
    let layers = model
        .layers
        .iter()
        .map(recover_layer)
        .collect::<Result<Vec<_>, _>>()?;
    ModelArchive::new(layers)
}

pub fn cmd_recover(args: &RecoverArgs) -> Result<(), Failure> {
    let model = load_model(&args.input).map_err(|e| Failure::input(&args.input, e))?;
    let archive = recover(&model)?;
    save_archive(&archive, &args.output)
        .map_err(|e| Failure::Internal(format!("{}: {e}", args.output.display())))?;
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let model = load_model(&args.input).map_err(|e| Failure::input(&args.input, e))?;
    let report = model_report(&model.layers, args.bits)?;
    match &args.csv {
        Some(p) if p.as_os_str() == "-" => report.write_csv(io::stdout().lock())?,
        Some(p) => {
            let mut out = create(p)?;
            report.write_csv(&mut out)?;
            out.flush().map_err(io_failure(p))?;
            print!("{report}");
        }
        None => print!("{report}"),
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    if args.k_list.is_empty() && args.bit_list.is_empty() {
        return Err(Failure::Usage("sweep needs --k-list or --bit-list".into()));
    }
    let input = load_archive(&args.input).map_err(|e| Failure::input(&args.input, e))?;
    let index = input
        .position(&args.layer)
        .ok_or_else(|| Error::UnknownLayer(args.layer.clone()))?;
    let rows = sweep_layer(
        &input.layers()[index],
        index,
        &args.k_list,
        &args.bit_list,
        args.restarts,
        &options(args.seed, args.workers),
    )?;
    let sink: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink);
    for row in rows {
        w.serialize(row).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Failure::Internal(e.to_string()))
}
