use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use wastegan::evalkit::{augmentation_sweep, median, sweep_cell, SweepRow};
use wastegan::gan::{generator_forward_count, sample_batch, GanModel, NUM_CLASSES};
use wastegan::grasp::{mask_logits, project_to_3d, select_grasp, CameraIntrinsics, GraspOutcome, SuctionConfig};
use wastegan::scenegen::{generate_corpus, load_corpus, read_mask, save_generated, Corpus};
use wastegan::training::{metrics_csv, train_gan, GanTrainer, METRICS_HEADER};
use wastegan::{Checkpoint, Error, Result, Tensor};

use crate::config::{write, RunConfig, RunDir};
use crate::{Cli, Command, GraspArgs, ReportArgs, SampleArgs, SweepArgs, TrainGanArgs, TrainSegArgs};

const LATEST: &str = "gan/latest.wtk";
const SUMMARY: &str = "summary.txt";
const SWEEP_CSV: &str = "sweep.csv";

fn missing(path: &Path, what: &str) -> Error {
    Error::io(path, io::Error::new(io::ErrorKind::NotFound, what.to_string()))
}

fn sha256_file(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn run(cli: Cli) -> Result<()> {
    let load = || -> Result<RunConfig> {
        match &cli.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    };
    match &cli.command {
        Command::Grasp(a) => grasp(a),
        Command::Report(a) => {
            let dir = match &a.dir {
                Some(d) => d.clone(),
                None => RunDir::new(&cli.runs, &load()?).path,
            };
            report(a, &dir)
        }
        cmd => {
            let cfg = load()?;
            let rd = RunDir::new(&cli.runs, &cfg);
            rd.init(&cfg)?;
            match cmd {
                Command::GenData => gen_data(&cfg, &rd),
                Command::TrainGan(a) => train(&cfg, &rd, a),
                Command::Sample(a) => sample(&cfg, &rd, a),
                Command::TrainSeg(a) => train_seg(&cfg, &rd, a),
                Command::Sweep(a) => sweep(&cfg, &rd, a),
                Command::Grasp(_) | Command::Report(_) => unreachable!("handled above"),
            }
        }
    }
}

fn gen_data(cfg: &RunConfig, rd: &RunDir) -> Result<()> {
    let m = generate_corpus(&cfg.corpus, rd.join("corpus"))?;
    println!("run {}", rd.path.display());
    println!("config_hash {}", rd.hash);
    println!("scenes {}", m.entries.len());
    println!("corpus_checksum {}", m.checksum);
    Ok(())
}

fn corpus(rd: &RunDir) -> Result<Corpus> {
    load_corpus(rd.join("corpus"))
}

fn load_gan(cfg: &RunConfig, rd: &RunDir, path: Option<&PathBuf>) -> Result<GanModel<f32>> {
    let path = path.cloned().unwrap_or_else(|| rd.join(LATEST));
    let mut model = GanModel::new(cfg.gan.clone())?;
    model.import(&Checkpoint::load(&path)?)?;
    Ok(model)
}

fn train(cfg: &RunConfig, rd: &RunDir, a: &TrainGanArgs) -> Result<()> {
    let corpus = corpus(rd)?;
    let mut trainer = GanTrainer::<f32>::new(cfg.gan.clone(), cfg.train.clone())?;
    let metrics_path = rd.join("gan/metrics.csv");
    let mut earlier = Vec::new();
    if a.resume {
        trainer.restore(&Checkpoint::load(rd.join(LATEST))?)?;
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        earlier = text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s <= trainer.step))
            .map(str::to_string)
            .collect();
    }
    let out = train_gan(trainer, &corpus.train, |t| {
        let bytes = t.checkpoint().to_bytes();
        write(&rd.join(&format!("gan/ckpt_{:06}.wtk", t.step)), &bytes)?;
        write(&rd.join(LATEST), &bytes)
    })?;
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for l in &earlier {
        csv.push_str(l);
        csv.push('\n');
    }
    csv.push_str(metrics_csv(&out.metrics).split_once('\n').map_or("", |(_, rest)| rest));
    write(&metrics_path, csv.as_bytes())?;
    let bytes = out.trainer.checkpoint().to_bytes();
    println!("run {}", rd.path.display());
    println!("step {}", out.trainer.step);
    if let Some(m) = out.metrics.last() {
        println!("{METRICS_HEADER}\n{}", m.csv_row());
    }
    println!("checkpoint_sha256 {}", sha256_file(&bytes));
    Ok(())
}

fn sample(cfg: &RunConfig, rd: &RunDir, a: &SampleArgs) -> Result<()> {
    let model = load_gan(cfg, rd, a.checkpoint.as_ref())?;
    let before = generator_forward_count();
    let samples = sample_batch(&model, a.n, a.seed)?;
    let forwards = generator_forward_count() - before;
    let dir = rd.join(&format!("samples/seed{}_n{}", a.seed, a.n));
    let digest = save_generated(&samples, &dir)?;
    write(&dir.join("samples.sha256"), format!("{digest}\n").as_bytes())?;
    println!("dir {}", dir.display());
    println!("samples {} generator_forwards {forwards}", samples.len());
    println!("sha256 {digest}");
    Ok(())
}

fn train_seg(cfg: &RunConfig, rd: &RunDir, a: &TrainSegArgs) -> Result<()> {
    let corpus = corpus(rd)?;
    let model = if a.ratio == 0 && a.checkpoint.is_none() && !rd.join(LATEST).exists() {
        GanModel::new(cfg.gan.clone())?
    } else {
        load_gan(cfg, rd, a.checkpoint.as_ref())?
    };
    let (seg, row) = sweep_cell(&model, &corpus, &cfg.sweep, a.ratio, a.seed)?;
    let stem = format!("seg/ratio{}_seed{}", a.ratio, a.seed);
    let mut ck = Checkpoint::new();
    seg.export(&mut ck);
    write(&rd.join(&format!("{stem}.wtk")), &ck.to_bytes())?;
    let csv = format!("{}\n{}\n", SweepRow::csv_header(row.per_class.len()), row.csv_line());
    write(&rd.join(&format!("{stem}.csv")), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn sweep(cfg: &RunConfig, rd: &RunDir, a: &SweepArgs) -> Result<()> {
    let mut sc = cfg.sweep.clone();
    if let Some(r) = &a.ratios {
        sc.ratios = r.clone();
    }
    if let Some(s) = &a.seeds {
        sc.seeds = s.clone();
    }
    let corpus = corpus(rd)?;
    let model = load_gan(cfg, rd, a.checkpoint.as_ref())?;
    let report = augmentation_sweep(&model, &corpus, &sc, a.jobs.max(1))?;
    let dir = rd.join(&format!("sweep-{}", &report.config_hash[..12]));
    write(&dir.join(SWEEP_CSV), report.csv().as_bytes())?;
    let summary = format!("run_hash {}\n{}", rd.hash, report.summary());
    write(&dir.join(SUMMARY), summary.as_bytes())?;
    println!("dir {}", dir.display());
    print!("{summary}");
    Ok(())
}

fn single_tensor(path: &Path, name: &str) -> Result<Tensor<f32>> {
    let ck = Checkpoint::load(path)?;
    if let Some(t) = ck.get(name) {
        return Ok(t.clone());
    }
    let names: Vec<&str> = ck.names().collect();
    match names.as_slice() {
        [only] => Ok(ck.get(only).expect("listed").clone()),
        _ => Err(Error::Format(format!("{}: expected one tensor or one named {name:?}", path.display()))),
    }
}

fn grasp(a: &GraspArgs) -> Result<()> {
    let logits = match (&a.mask, &a.logits) {
        (Some(m), _) => {
            let (h, w, labels) = read_mask(m)?;
            mask_logits(h, w, &labels, NUM_CLASSES)?
        }
        (None, Some(l)) => single_tensor(l, "logits")?,
        (None, None) => return Err(Error::config("one of --mask or --logits is required")),
    };
    let s = logits.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Format(format!("logits must be [C, H, W], got {s:?}")));
    }
    if a.class == 0 || a.class as usize >= s[0] {
        return Err(Error::config(format!("--class must be a contaminant in 1..{}, got {}", s[0] - 1, a.class)));
    }
    let suction = SuctionConfig {
        radius_px: a.radius_px,
        top_k: a.top_k,
        score: a.score.into(),
    };
    let projection = match (&a.intrinsics, &a.depth) {
        (Some([fx, fy, cx, cy]), Some(d)) => {
            let intr = CameraIntrinsics {
                fx: *fx,
                fy: *fy,
                cx: *cx,
                cy: *cy,
            };
            intr.validate()?;
            let depth = single_tensor(d, "depth")?;
            if depth.shape() != [s[1], s[2]] {
                return Err(Error::Format(format!("depth must be [{}, {}], got {:?}", s[1], s[2], depth.shape())));
            }
            let depth: Vec<f64> = depth.data().iter().map(|&v| v as f64).collect();
            Some((intr, depth))
        }
        _ => None,
    };
    let out = select_grasp(&logits, a.class, &suction)?;
    if matches!(out, GraspOutcome::NoGraspPoint) {
        println!("NO_GRASP");
        return Ok(());
    }
    for c in out.candidates() {
        let mut line = format!("{} {} {:.6}", c.row, c.col, c.score);
        if let Some((intr, depth)) = &projection {
            let [x, y, z] = project_to_3d(c.row, c.col, depth, s[1], s[2], intr)?;
            let _ = write!(line, " {x:.6} {y:.6} {z:.6}");
        }
        println!("{line}");
    }
    Ok(())
}

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_summaries(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == SUMMARY) && p.with_file_name(SWEEP_CSV).exists() {
            out.push(p);
        }
    }
    Ok(())
}

fn report(_a: &ReportArgs, dir: &Path) -> Result<()> {
    let mut summaries = Vec::new();
    find_summaries(dir, &mut summaries)?;
    if summaries.is_empty() {
        return Err(missing(dir, "no sweep outputs"));
    }
    let mut hashes = Vec::new();
    let mut rows: Vec<(usize, u64, f64)> = Vec::new();
    for s in &summaries {
        let text = fs::read_to_string(s).map_err(|e| Error::io(s, e))?;
        let hash = text
            .lines()
            .find_map(|l| l.strip_prefix("run_hash "))
            .ok_or_else(|| Error::Format(format!("{}: no run_hash line", s.display())))?
            .to_string();
        if !hashes.contains(&hash) {
            hashes.push(hash);
        }
        let csv_path = s.with_file_name(SWEEP_CSV);
        let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("{}: bad row {line:?}", csv_path.display()));
            if f.len() < 3 {
                return Err(bad());
            }
            let row = (
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            );
            if !rows.contains(&row) {
                rows.push(row);
            }
        }
    }
    if hashes.len() > 1 {
        return Err(Error::config(format!("refusing to merge sweeps from different runs: {}", hashes.join(", "))));
    }
    let mut by_ratio: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(r, _, m) in &rows {
        by_ratio.entry(r).or_default().push(m);
    }
    let stats: Vec<(usize, usize, f64, f64, f64)> = by_ratio
        .iter()
        .map(|(&r, v)| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (r, v.len(), median(v).expect("non-empty"), lo, hi)
        })
        .collect();
    let base = stats.iter().find(|s| s.0 == 0).map(|s| s.2);
    println!("run_hash {}", hashes[0]);
    println!("sweeps {}", summaries.len());
    println!("{:>5}  {:>5}  {:>11}  {:>9}  {:>9}  {:>9}", "ratio", "cells", "median_miou", "min_miou", "max_miou", "vs_ratio0");
    for &(r, n, med, lo, hi) in &stats {
        let rel = base.filter(|b| *b > 0.0).map_or("-".to_string(), |b| format!("{:.4}", med / b));
        println!("{r:>5}  {n:>5}  {med:>11.6}  {lo:>9.6}  {hi:>9.6}  {rel:>9}");
    }
    println!("# ratio median_miou min_miou max_miou");
    for &(r, _, med, lo, hi) in &stats {
        println!("{r} {med:.6} {lo:.6} {hi:.6}");
    }
    Ok(())
}
