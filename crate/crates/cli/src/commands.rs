use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use pointcopy::analysis::{analysis_columns, attention_contrast_bbox, copy_vs_input_attention, decay_series, emit_csv};
use pointcopy::data::trace::render_tokens;
use pointcopy::data::{
    build_corpus, filter_corpus, read_dataset, synthesize_task, write_dataset, GroundedTrace, Vocab,
};
use pointcopy::decode::{decode, write_transcript};
use pointcopy::eval::evaluate;
use pointcopy::numerics::Checkpoint;
use pointcopy::train::Trainer;
use pointcopy::{Error, Model};

use crate::config::RunConfig;
use crate::{AnalyzeArgs, Cli, Command, DecodeArgs, EvalArgs, GenDataArgs, GroundArgs, TaskSource, TrainArgs};

/// Maps library errors anywhere in the chain onto the exit-code contract.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NonFiniteLoss { .. } | Error::Training { .. } => 3,
                Error::ShapeMismatch { .. } | Error::Checkpoint(_) => 4,
                _ => 2,
            };
        }
    }
    2
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Decode(a) => decode_one(&cfg, a),
        Command::Analyze(a) => analyze(&cfg, a),
        Command::Ground(a) => ground(&cfg, a),
    }
}

fn gen_data(cfg: &RunConfig, a: GenDataArgs) -> Result<()> {
    if a.n == 0 {
        bail!("--n must be at least 1");
    }
    cfg.validate()?;
    let (raws, planted) = build_corpus(a.n, a.seed, &cfg.data, a.tasks, a.defects)?;
    let (kept, rejected) = filter_corpus(&raws);
    for (i, reason) in &rejected {
        info!("trace {i} rejected: {}", reason.as_str());
    }
    info!("{} defects planted", planted.len());
    write_dataset(&a.out, &kept).with_context(|| format!("writing {}", a.out.display()))?;
    println!("kept {} of {} traces", kept.len(), raws.len());
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Model::from_checkpoint(cfg.model.clone(), &ck)?)
}

fn load_data(path: &Path) -> Result<Vec<GroundedTrace>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.max_steps.is_some() {
        cfg.train.max_steps = a.max_steps;
    }
    cfg.validate()?;
    let data = load_data(&a.data)?;
    if data.is_empty() {
        bail!("dataset {} is empty", a.data.display());
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            Trainer::from_checkpoint(cfg.model.clone(), &ck, &cfg.train)?
        }
        None => Trainer::new(Model::new(cfg.model.clone(), a.init_seed)?, &cfg.train)?,
    };
    let metrics_path = a.metrics.or(cfg.paths.metrics.clone());
    let mut log = match &metrics_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let stdout = std::io::stdout();
    trainer.run(&data, &cfg.train, &cfg.zloss, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(stdout.lock(), "{line}")?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    trainer
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    info!("saved {} after {} steps", a.out.display(), trainer.step);
    Ok(())
}

fn eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    cfg.validate()?;
    let model = load_model(cfg, &a.checkpoint)?;
    let data = load_data(&a.data)?;
    let mut dc = cfg.decode.clone();
    if a.no_pointing {
        dc.pointing = false;
    }
    let report = evaluate(&model, &data, &dc)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn pick_task(cfg: &RunConfig, s: &TaskSource) -> Result<GroundedTrace> {
    match &s.data {
        Some(p) => {
            let data = load_data(p)?;
            let n = data.len();
            data.into_iter()
                .nth(s.index)
                .ok_or_else(|| anyhow!("index {} out of range for {n} traces", s.index))
        }
        None => Ok(synthesize_task(s.seed, &cfg.data, s.task)?),
    }
}

fn decode_one(cfg: &RunConfig, a: DecodeArgs) -> Result<()> {
    cfg.validate()?;
    let model = load_model(cfg, &a.checkpoint)?;
    let task = pick_task(cfg, &a.source)?;
    let mut dc = cfg.decode.clone();
    if a.no_pointing {
        dc.pointing = false;
    }
    let out = decode(&model, &task.prompt, &task.patches, &dc, false)?;
    match &a.transcript {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_transcript(BufWriter::new(f), &out.transcript)?;
            println!("{}", render_tokens(&out.tokens));
        }
        None => write_transcript(std::io::stdout().lock(), &out.transcript)?,
    }
    Ok(())
}

fn analyze(cfg: &RunConfig, a: AnalyzeArgs) -> Result<()> {
    cfg.validate()?;
    let model = load_model(cfg, &a.checkpoint)?;
    let task = pick_task(cfg, &a.source)?;
    let out = decode(&model, &task.prompt, &task.patches, &cfg.decode, true)?;
    let rec = out.attention.expect("attention was requested");
    let gold = task.gold_patches();
    let decay = decay_series(&rec, (!gold.is_empty()).then_some(gold.as_slice()))?;
    let copies: Vec<_> = (0..rec.num_layers())
        .map(|l| copy_vs_input_attention(&rec, l).ok())
        .collect();
    let cols = analysis_columns(&decay, &copies);
    emit_csv(&a.out, &decay.steps, &cols).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", render_tokens(&out.tokens));
    Ok(())
}

fn ground(cfg: &RunConfig, a: GroundArgs) -> Result<()> {
    cfg.validate()?;
    let model = load_model(cfg, &a.checkpoint)?;
    let data = load_data(&a.data)?;
    let task = data
        .get(a.index)
        .ok_or_else(|| anyhow!("index {} out of range for {} traces", a.index, data.len()))?;
    let encode = |s: &str| Vocab::encode(s).ok_or_else(|| anyhow!("unknown token in `{s}`"));
    let desc = encode(&a.description)?;
    let base = encode(&a.baseline)?;
    let r = attention_contrast_bbox(&model, &task.patches, &desc, &base, &cfg.contrast)?;
    println!("{}", r.bbox);
    if let Some(p) = &a.out {
        std::fs::write(p, format!("{}\n", r.bbox)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
