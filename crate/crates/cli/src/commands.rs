use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};
use slimsplit::checkpoint::{Checkpoint, TensorData};
use slimsplit::codec::{self, PacketMeta};
use slimsplit::data::{gen_dataset, Dataset, Split, SyntheticDatasetSpec};
use slimsplit::report;
use slimsplit::sim::{self, Budget, NetworkModel};
use slimsplit::tensor::Tensor;
use slimsplit::train;
use slimsplit::zoo::{build_student, build_teacher, CompressorVariant, SplitStudent, TeacherNet};

use crate::config::{input_path, output_path, RunConfig};
use crate::Command;

/// Bad paths and similar mistakes in the invocation itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out_dir: &'a Path,
}

impl Ctx<'_> {
    fn output(&self, name: &Path) -> Result<PathBuf> {
        let p = output_path(self.out_dir, name).map_err(UsageError)?;
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    fn input(&self, name: &Path) -> PathBuf {
        input_path(self.out_dir, name)
    }

    fn dataset(&self) -> Result<Dataset> {
        let spec = SyntheticDatasetSpec::with_sizes(self.cfg.train_size, self.cfg.val_size);
        match &self.cfg.data {
            None => Ok(gen_dataset(&spec, self.cfg.seed)?),
            Some(p) => {
                let path = self.input(p);
                let ck = Checkpoint::load(&path).with_context(|| format!("loading dataset {}", path.display()))?;
                let get = |name: &str| {
                    ck.get_f64(name)
                        .cloned()
                        .ok_or_else(|| anyhow!("{}: missing tensor {name}", path.display()))
                };
                let train = Split {
                    images: get("train.images")?,
                    labels: get("train.labels")?,
                };
                let val = Split {
                    images: get("val.images")?,
                    labels: get("val.labels")?,
                };
                let seed = get("meta.seed")?.data().first().copied().unwrap_or(0.0) as u64;
                Ok(Dataset {
                    spec: SyntheticDatasetSpec::with_sizes(train.len(), val.len()),
                    seed,
                    train,
                    val,
                })
            }
        }
    }

    fn teacher(&self) -> Result<TeacherNet> {
        let path = self.input(&self.cfg.teacher);
        let ck = Checkpoint::load(&path).with_context(|| format!("loading teacher {}", path.display()))?;
        Ok(TeacherNet::from_checkpoint(&ck)?)
    }

    fn student(&self) -> Result<SplitStudent> {
        let path = self.input(&self.cfg.student);
        let ck = Checkpoint::load(&path).with_context(|| format!("loading student {}", path.display()))?;
        Ok(SplitStudent::from_checkpoint(&ck)?)
    }

    fn write(&self, name: &Path, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.output(name)?;
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

fn ndjson(rows: &[Value]) -> String {
    rows.iter().map(|r| format!("{r}\n")).collect()
}

pub fn run(cmd: &Command, cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let ctx = Ctx { cfg, out_dir };
    // refuse bad output names before any work is done
    let target: &Path = match cmd {
        Command::GenData { output }
        | Command::Eval { output, .. }
        | Command::Encode { output, .. }
        | Command::Decode { output, .. }
        | Command::Sweep { output }
        | Command::Simulate { output } => output,
        Command::TrainTeacher => &cfg.teacher,
        Command::Distill => &cfg.student,
    };
    output_path(out_dir, target).map_err(UsageError)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    ctx.write(Path::new(&format!("{}.config.resolved", cmd.name())), cfg.to_text())?;
    match cmd {
        Command::GenData { output } => gen_data(&ctx, output),
        Command::TrainTeacher => train_teacher(&ctx),
        Command::Distill => distill(&ctx),
        Command::Eval { output, recalibrated } => eval(&ctx, output, *recalibrated),
        Command::Encode { input, output, c_max } => encode(&ctx, input.as_deref(), output, *c_max),
        Command::Decode { input, output } => decode(&ctx, input, output),
        Command::Sweep { output } => sweep(&ctx, output),
        Command::Simulate { output } => simulate(&ctx, output),
    }
}

fn gen_data(ctx: &Ctx, output: &Path) -> Result<()> {
    let ds = gen_dataset(&SyntheticDatasetSpec::with_sizes(ctx.cfg.train_size, ctx.cfg.val_size), ctx.cfg.seed)?;
    let mut ck = Checkpoint::new();
    ck.push_f64("meta.seed", &Tensor::vector(vec![ds.seed as f64]))?;
    ck.push_f64("train.images", &ds.train.images)?;
    ck.push_f64("train.labels", &ds.train.labels)?;
    ck.push_f64("val.images", &ds.val.images)?;
    ck.push_f64("val.labels", &ds.val.labels)?;
    let p = ctx.output(output)?;
    ck.save(&p)?;
    println!(
        "wrote {} ({} train, {} val, positive fraction {:.4}, sha256 {})",
        p.display(),
        ds.train.len(),
        ds.val.len(),
        ds.train.positive_fraction(),
        hex(&ds.hash())
    );
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn train_teacher(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let mut teacher = build_teacher(ctx.cfg.seed);
    let tc = ctx.cfg.teacher_config();
    let start = Instant::now();
    eprintln!("training teacher: {} epochs on {} images", tc.epochs, ds.train.len());
    let report = train::train_teacher(&mut teacher, &ds.train, &tc)?;
    let ap = train::evaluate_teacher(&teacher, &ds.val)?;
    let mut rows = vec![json!({"epoch": null, "loss": report.initial_loss, "lr": null})];
    for (e, l) in report.epoch_losses.iter().enumerate() {
        rows.push(json!({"epoch": e, "loss": l, "lr": tc.lr_at(e)}));
    }
    ctx.write(Path::new("teacher_log.ndjson"), ndjson(&rows))?;
    let p = ctx.output(&ctx.cfg.teacher)?;
    teacher.to_checkpoint()?.save(&p)?;
    println!(
        "teacher ToyAP {ap:.4}, final loss {:.4}, {:.1}s; wrote {}",
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64(),
        p.display()
    );
    Ok(())
}

fn distill(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let ds = ctx.dataset()?;
    let teacher = ctx.teacher()?;
    let mut student = build_student(&teacher, cfg.bottleneck_spec().map_err(UsageError)?, cfg.widths.clone(), cfg.mode, cfg.student_options())?;
    let tc = cfg.distill_config();
    let log_path = ctx.output(Path::new("distill_log.ndjson"))?;
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log_err = None;
    eprintln!(
        "distilling {} student ({}, {} channels): {} epochs, halving every {}",
        cfg.mode,
        cfg.variant,
        cfg.bottleneck,
        tc.epochs,
        tc.halving_period
    );
    train::distill(&mut student, &teacher, &ds.train, &tc, |s| {
        let losses: serde_json::Map<String, Value> = s.width_loss.iter().map(|(a, l)| (a.to_string(), json!(l))).collect();
        let row = json!({"epoch": s.epoch, "lr": s.lr, "width_loss": losses, "batches": s.samples.len(), "wall_seconds": s.wall_seconds});
        eprintln!("epoch {} lr {} {}", s.epoch, s.lr, row["width_loss"]);
        if let Err(e) = writeln!(log, "{row}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing the epoch log");
    }
    let p = ctx.output(&cfg.student)?;
    student.to_checkpoint()?.save(&p)?;
    println!("wrote {} ({} bytes of weights)", p.display(), student.storage_bytes());
    Ok(())
}

fn eval(ctx: &Ctx, output: &Path, recalibrated: bool) -> Result<()> {
    let ds = ctx.dataset()?;
    let teacher = ctx.teacher()?;
    let student = ctx.student()?;
    let teacher_ap = train::evaluate_teacher(&teacher, &ds.val)?;
    let mut rows = vec![json!({"model": "teacher", "toy_ap": teacher_ap})];
    println!("teacher ToyAP {teacher_ap:.4}");
    let depths: Vec<Option<u8>> = std::iter::once(None).chain(ctx.cfg.bits.iter().map(|&b| Some(b))).collect();
    for alpha in ctx.cfg.widths.iter() {
        for &bits in &depths {
            let m = train::evaluate(&student, &teacher, &ds.val, alpha, bits)?;
            let ratio = [m.tap_mse[0] / m.teacher_var[0], m.tap_mse[1] / m.teacher_var[1]];
            let mut row = json!({
                "model": "student",
                "alpha": alpha.to_string(),
                "bits": bits,
                "toy_ap": m.toy_ap,
                "tap_mse": m.tap_mse,
                "teacher_var": m.teacher_var,
                "mse_over_var": ratio,
            });
            let mut line = format!(
                "alpha {alpha:<5} bits {:<4} ToyAP {:.4}  tap mse/var {:.4} {:.4}",
                bits.map_or("none".into(), |b| b.to_string()),
                m.toy_ap,
                ratio[0],
                ratio[1]
            );
            if recalibrated && bits.is_none() {
                let mut s = student.clone();
                train::post_bn_recalibrate(&mut s, &ds.train, alpha, ctx.cfg.batch_size)?;
                let ap = train::student_toy_ap(&s, &ds.val, alpha, None)?;
                row["toy_ap_recalibrated"] = json!(ap);
                line.push_str(&format!("  recalibrated {ap:.4}"));
            }
            println!("{line}");
            rows.push(row);
        }
    }
    let p = ctx.write(output, ndjson(&rows))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading tensor file {}", path.display()))?;
    let data = match ck.get("tensor") {
        Some(t) => t,
        None if ck.len() == 1 => ck.entries().next().expect("one entry").1,
        None => bail!("{}: expected a tensor named \"tensor\" or a single entry", path.display()),
    };
    Ok(match data {
        TensorData::F32(t) => t.clone(),
        TensorData::F64(t) => t.cast(),
    })
}

fn encode(ctx: &Ctx, input: Option<&Path>, output: &Path, c_max: Option<usize>) -> Result<()> {
    let cfg = ctx.cfg;
    let bits = cfg.bits[0];
    let (tensor, meta) = match input {
        Some(path) => {
            let t = load_tensor(&ctx.input(path))?;
            let c_max = c_max.unwrap_or(t.shape().c);
            let meta = PacketMeta {
                alpha: cfg.alpha,
                variant: cfg.variant,
                c_max,
                extrapolated: false,
            };
            (t, meta)
        }
        None => {
            let student = ctx.student()?;
            let ds = ctx.dataset()?;
            let (x, _) = ds.val.batch(cfg.index, 1)?;
            let extrapolated = student.check_alpha(cfg.alpha)?;
            let z = student.encode(&x.cast::<f32>(), cfg.alpha)?;
            let meta = PacketMeta {
                alpha: cfg.alpha,
                variant: student.bottleneck.variant,
                c_max: c_max.unwrap_or(student.bottleneck.channels),
                extrapolated,
            };
            (z, meta)
        }
    };
    let packet = codec::encode_packet(&tensor, bits, &meta)?;
    let p = ctx.write(output, &packet)?;
    println!("wrote {} ({} bytes, {} bits, shape {:?})", p.display(), packet.len(), bits, tensor.shape().dims());
    Ok(())
}

fn decode(ctx: &Ctx, input: &Path, output: &Path) -> Result<()> {
    let path = ctx.input(input);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let d = codec::decode_packet(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let mut ck = Checkpoint::new();
    ck.push_f32("tensor", &d.tensor)?;
    let p = ctx.output(output)?;
    ck.save(&p)?;
    let variant = CompressorVariant::name(d.header.variant);
    println!(
        "wrote {} (alpha {}, {} bits, {}, shape {:?})",
        p.display(),
        d.header.alpha,
        d.header.params.bits,
        variant,
        d.header.shape.dims()
    );
    Ok(())
}

fn sweep(ctx: &Ctx, output: &Path) -> Result<()> {
    let ds = ctx.dataset()?;
    let student = ctx.student()?;
    let points = sim::sweep(&student, &ds.val, &ctx.cfg.widths, &ctx.cfg.bits)?;
    let p = ctx.output(output)?;
    report::export_tradeoff_csv(&points, &p)?;
    print!("{}", report::to_csv(&points)?);
    eprintln!("wrote {}", p.display());
    Ok(())
}

fn simulate(ctx: &Ctx, output: &Path) -> Result<()> {
    let cfg = ctx.cfg;
    let bits = cfg.bits[0];
    let student = ctx.student()?;
    let ds = ctx.dataset()?;
    let alpha = if cfg.max_bytes.is_some() || cfg.max_mac.is_some() {
        let budget = Budget::new(cfg.max_bytes, cfg.max_mac)?;
        sim::choose_alpha(&cfg.widths, &student, bits, &budget)?
    } else {
        cfg.alpha
    };
    let net = NetworkModel::new(cfg.bandwidth, cfg.rtt)?;
    let (x, _) = ds.val.batch(cfg.index, 1)?;
    let r = sim::simulate_inference(&student, &x.cast(), alpha, bits, &net, cfg.compute_rate)?;
    let row = json!({
        "alpha": alpha.to_string(),
        "bits": bits,
        "encoder_mac": r.encoder_mac,
        "packet_bytes": r.packet_bytes,
        "encode_time": r.encode_time,
        "transfer_time": r.transfer_time,
        "total": r.total,
    });
    let p = ctx.write(output, format!("{}\n", serde_json::to_string_pretty(&row)?))?;
    println!(
        "alpha {alpha}: {} MAC, {} bytes, encode {:.6}s + transfer {:.6}s = {:.6}s",
        r.encoder_mac, r.packet_bytes, r.encode_time, r.transfer_time, r.total
    );
    eprintln!("wrote {}", p.display());
    Ok(())
}
