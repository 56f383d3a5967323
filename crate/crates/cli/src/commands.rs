use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use octctx::analysis::{
    bpip, chamfer, collect_features, collect_features_from_dump, d1_psnr, interclass_stats,
};
use octctx::codec::{Bitstream, Header};
use octctx::context::{read_dump, window_for, write_dump, ContextConfig, WindowRecord};
use octctx::geometry::{
    dequantize, quantize, read_ply, synth_with, write_ply, PlyFormat, RawPointCloud, SynthOptions,
};
use octctx::model::{self, LossRecord, Model, ModelConfig, Schedule, Stage, Variant};
use octctx::octree::{build, NodeSequence};
use octctx::pipeline;
use octctx::{Error, Result};

use crate::{
    AblateArgs, AnalyzeArgs, DecodeArgs, DumpArgs, EncodeArgs, EvalArgs, Format, ModelArgs, Preset,
    ScheduleArgs, SynthArgs, TrainArgs,
};

type Echo = Vec<(String, String)>;

fn kv(echo: &mut Echo, k: &str, v: impl ToString) {
    echo.push((k.to_string(), v.to_string()));
}

fn paths(p: &[PathBuf]) -> String {
    p.iter()
        .map(|x| x.display().to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `key = value` lines to `<out>.config`.
fn write_echo(out: &Path, echo: &Echo) -> Result<()> {
    let mut text = String::new();
    for (k, v) in echo {
        writeln!(text, "{k} = {v}").unwrap();
    }
    fs::write(sibling(out, ".config"), text)?;
    Ok(())
}

fn ply_format(f: Format) -> PlyFormat {
    match f {
        Format::Ascii => PlyFormat::Ascii,
        Format::Binary => PlyFormat::BinaryLittleEndian,
    }
}

fn model_config(a: &ModelArgs, seed: u64) -> ModelConfig {
    let mut c = match a.preset {
        Preset::Toy => ModelConfig::toy(),
        Preset::Desk => ModelConfig::desk(),
        Preset::Full => ModelConfig::full_scale(),
    };
    c.context.n = a.window.unwrap_or(c.context.n);
    c.context.k = a.ancestors.unwrap_or(c.context.k);
    c.context.strict_level = a.strict_level;
    c.d_model = a.d_model.unwrap_or(c.d_model);
    c.heads = a.heads.unwrap_or(c.heads);
    c.d_hidden_main = a.hidden_main.unwrap_or(c.d_hidden_main);
    c.d_hidden_branch = a.hidden_branch.unwrap_or(c.d_hidden_branch);
    c.enable_residual = a.residual.is_on();
    c.enable_branch = a.branch.is_on();
    c.zero_init_output = a.zero_init;
    c.seed = seed;
    c
}

fn schedule(a: &ScheduleArgs) -> Schedule {
    Schedule {
        branch_epochs: a.branch_epochs,
        main_epochs: a.main_epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        lr_decay: a.lr_decay,
        shuffle: !a.no_shuffle,
        ..Schedule::default()
    }
}

fn echo_schedule(echo: &mut Echo, s: &Schedule) {
    kv(echo, "branch_epochs", s.branch_epochs);
    kv(echo, "main_epochs", s.main_epochs);
    kv(echo, "batch_size", s.batch_size);
    kv(echo, "lr", s.lr);
    kv(echo, "lr_decay", s.lr_decay);
    kv(echo, "beta1", s.beta1);
    kv(echo, "beta2", s.beta2);
    kv(echo, "eps", s.eps);
    kv(echo, "shuffle", s.shuffle);
}

fn load_model(path: &Path) -> Result<Model> {
    Model::from_checkpoint(&fs::read(path)?)
}

fn load_corpus(files: &[PathBuf], depth: u8) -> Result<Vec<NodeSequence>> {
    files
        .iter()
        .map(|f| Ok(build(&quantize(&read_ply(f)?, depth)?)))
        .collect()
}

fn trace_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("batch_index,ce_loss,mse_loss,stage,epoch\n");
    for r in trace {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.batch_index,
            r.ce,
            r.mse,
            r.stage.name(),
            r.epoch
        )
        .unwrap();
    }
    s
}

/// Mean CE over the first tenth (at least one) of the main-stage batches.
pub fn early_ce(trace: &[LossRecord]) -> f64 {
    let main: Vec<f64> = trace
        .iter()
        .filter(|r| r.stage == Stage::Main)
        .map(|r| r.ce)
        .collect();
    let n = (main.len() / 10).max(1).min(main.len());
    main[..n].iter().sum::<f64>() / n as f64
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let pc = synth_with(a.kind, a.n, a.seed, &SynthOptions { jitter: a.jitter })?;
    write_ply(&a.out, &pc, ply_format(a.format))?;
    let mut echo = Echo::new();
    kv(&mut echo, "command", "synth");
    kv(&mut echo, "kind", a.kind.name());
    kv(&mut echo, "n", a.n);
    kv(&mut echo, "seed", a.seed);
    kv(&mut echo, "jitter", a.jitter);
    kv(
        &mut echo,
        "format",
        format!("{:?}", a.format).to_lowercase(),
    );
    write_echo(&a.out, &echo)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let corpus = load_corpus(&a.corpus, a.depth)?;
    let cfg = model_config(&a.model, a.seed);
    let sched = schedule(&a.schedule);
    let out = model::train(Model::new(cfg.clone())?, &corpus, &sched)?;
    fs::write(&a.out, out.model.to_checkpoint())?;
    let trace_path = a
        .trace
        .clone()
        .unwrap_or_else(|| sibling(&a.out, ".trace.csv"));
    fs::write(&trace_path, trace_csv(&out.trace))?;

    let mut echo = Echo::new();
    kv(&mut echo, "command", "train");
    kv(&mut echo, "corpus", paths(&a.corpus));
    kv(&mut echo, "depth", a.depth);
    echo.extend(cfg.to_echo());
    echo_schedule(&mut echo, &sched);
    kv(&mut echo, "trace", trace_path.display());
    write_echo(&a.out, &echo)?;
    println!("variant = {}", cfg.variant().name());
    println!("batches = {}", out.trace.len());
    if let Some(last) = out.trace.last() {
        println!("final_ce = {}", last.ce);
        println!("final_mse = {}", last.mse);
    }
    eprintln!("trained in {:.2?}", start.elapsed());
    Ok(())
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let pc = read_ply(&a.input)?;
    let m = load_model(&a.model)?;
    let levels = a.levels.unwrap_or(a.depth);
    let (bs, report) = pipeline::encode(&pc, a.depth, levels, &m)?;
    fs::write(&a.out, bs.to_bytes())?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| sibling(&a.out, ".report"));
    fs::write(&report_path, report.to_record())?;
    let mut echo = Echo::new();
    kv(&mut echo, "command", "encode");
    kv(&mut echo, "input", a.input.display());
    kv(&mut echo, "model", a.model.display());
    kv(&mut echo, "depth", a.depth);
    kv(&mut echo, "levels", levels);
    write_echo(&a.out, &echo)?;
    print!("{}", report.to_record());
    eprintln!("encoded in {:.2?}", report.wall_time);
    Ok(())
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let start = Instant::now();
    let bytes = fs::read(&a.input)?;
    let q = pipeline::decode_bytes(&bytes, &load_model(&a.model)?)?;
    let mut pc = dequantize(&q);
    pc.source_id = a.input.display().to_string();
    write_ply(&a.out, &pc, ply_format(a.format))?;
    let mut echo = Echo::new();
    kv(&mut echo, "command", "decode");
    kv(&mut echo, "input", a.input.display());
    kv(&mut echo, "model", a.model.display());
    write_echo(&a.out, &echo)?;
    println!("voxel_count = {}", q.len());
    eprintln!("decoded in {:.2?}", start.elapsed());
    Ok(())
}

fn header_of(bytes: &[u8]) -> Result<Header> {
    Ok(Header::parse(bytes)?.0)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let pc: RawPointCloud = read_ply(&a.input)?;
    let bytes = fs::read(&a.bitstream)?;
    let h = header_of(&bytes)?;
    let bs = Bitstream::from_bytes(&bytes)?;
    let decoded = pipeline::decode(&bs, &load_model(&a.model)?)?;
    let reference = quantize(&pc, h.depth)?;
    let total_bits = bs.len_bits();
    println!("point_count = {}", pc.len());
    println!("total_bits = {total_bits}");
    println!("bpip = {}", bpip(total_bits as f64, pc.len())?);
    println!("coded_levels = {}", h.coded_levels);
    println!("chamfer = {}", chamfer(&reference, &decoded)?);
    println!("d1_psnr = {}", d1_psnr(&reference, &decoded, h.depth)?);
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let dump = match &a.dump {
        Some(p) => Some(read_dump(BufReader::new(fs::File::open(p)?))?),
        None => None,
    };
    let corpus = if dump.is_none() {
        load_corpus(&a.corpus, a.depth)?
    } else {
        Vec::new()
    };
    for path in &a.model {
        let m = load_model(path)?;
        let bank = match &dump {
            Some(records) => collect_features_from_dump(&m, records)?,
            None => collect_features(&m, &corpus)?,
        };
        let stats = interclass_stats(&bank)?;
        println!("model = {}", path.display());
        println!("variant = {}", m.config.variant().name());
        print!("{}", stats.to_record());
    }
    Ok(())
}

pub fn dump(a: DumpArgs) -> Result<()> {
    let seq = build(&quantize(&read_ply(&a.input)?, a.depth)?);
    let cfg = ContextConfig {
        n: a.window,
        k: a.ancestors,
        strict_level: a.strict_level,
    };
    cfg.validate()?;
    let records = (0..seq.len())
        .map(|i| {
            Ok(WindowRecord {
                window: window_for(&seq, i, &cfg)?,
                occupancy: seq.nodes()[i].occupancy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = std::io::BufWriter::new(fs::File::create(&a.out)?);
    write_dump(&mut out, &records)?;
    drop(out);
    let mut echo = Echo::new();
    kv(&mut echo, "command", "dump");
    kv(&mut echo, "input", a.input.display());
    kv(&mut echo, "depth", a.depth);
    kv(&mut echo, "window", a.window);
    kv(&mut echo, "ancestors", a.ancestors);
    kv(&mut echo, "strict_level", a.strict_level);
    write_echo(&a.out, &echo)?;
    println!("records = {}", records.len());
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir)?;
    let corpus = load_corpus(&a.corpus, a.depth)?;
    let test_files = if a.test.is_empty() {
        &a.corpus
    } else {
        &a.test
    };
    let tests = test_files
        .iter()
        .map(read_ply)
        .collect::<Result<Vec<_>>>()?;
    let sched = schedule(&a.schedule);
    let base_cfg = model_config(&a.model, a.seed);

    let mut summary = String::new();
    for v in Variant::ALL {
        let start = Instant::now();
        let cfg = base_cfg.clone().with_variant(v);
        let out = model::train(Model::new(cfg)?, &corpus, &sched)?;
        let name = v.name();
        fs::write(
            a.out_dir.join(format!("{name}.ckpt")),
            out.model.to_checkpoint(),
        )?;
        fs::write(
            a.out_dir.join(format!("{name}.trace.csv")),
            trace_csv(&out.trace),
        )?;

        let (mut bits, mut points, mut ideal) = (0u64, 0usize, 0.0);
        for pc in &tests {
            let (_, r) = pipeline::encode(pc, a.depth, a.depth, &out.model)?;
            bits += r.total_bits;
            points += pc.len();
            ideal += r.ideal_bits;
        }
        writeln!(summary, "{name}.bpip = {}", bpip(bits as f64, points)?).unwrap();
        writeln!(summary, "{name}.ideal_bpip = {}", ideal / points as f64).unwrap();
        writeln!(summary, "{name}.early_ce = {}", early_ce(&out.trace)).unwrap();
        match interclass_stats(&collect_features(&out.model, &corpus)?) {
            Ok(s) => {
                writeln!(summary, "{name}.ad = {}", s.ad).unwrap();
                writeln!(summary, "{name}.acos = {}", s.acos).unwrap();
            }
            Err(Error::InsufficientClasses(_)) => {}
            Err(e) => return Err(e),
        }
        eprintln!("{name} done in {:.2?}", start.elapsed());
    }
    let summary_path = a.out_dir.join("ablation.txt");
    fs::write(&summary_path, &summary)?;
    let mut echo = Echo::new();
    kv(&mut echo, "command", "ablate");
    kv(&mut echo, "corpus", paths(&a.corpus));
    kv(&mut echo, "test", paths(test_files));
    kv(&mut echo, "depth", a.depth);
    echo.extend(
        base_cfg
            .to_echo()
            .into_iter()
            .filter(|(k, _)| !matches!(k.as_str(), "residual" | "branch" | "variant")),
    );
    echo_schedule(&mut echo, &sched);
    write_echo(&summary_path, &echo)?;
    print!("{summary}");
    Ok(())
}
