use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use spartran::baselines::theorem2_check;
use spartran::channel::{make_beam_dataset, random_positions, sample_scene, Labels, LinkDataset};
use spartran::dictionary::{build_sinc_dictionary, default_tau_max};
use spartran::pipeline::{
    activation_histogram, decompose_links, evaluate, finetune as run_finetune, histogram_csv, pretrain as run_pretrain,
    reconstruction_nmse_db, trace_csv, Checkpoint, RunStatus, Task,
};
use spartran::{Error, Result};

use crate::config::{LabelKind, RunConfig};
use crate::manifest::Recorder;
use crate::Common;

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn recorder(command: &str, common: &Common, cfg: &RunConfig) -> Result<Recorder> {
    let mut rec = Recorder::new(command, common.config.as_deref(), cfg.seed, &common.out)?;
    if let Some(p) = &common.config {
        rec.input("config", p)?;
    }
    Ok(rec)
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

pub fn gen_data(common: &Common, codebook_size: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(k) = codebook_size {
        cfg.data.labels = LabelKind::Beam;
        cfg.data.codebook_size = k;
    }
    let mut rec = recorder("gen-data", common, &cfg)?;
    let positions = random_positions(&cfg.scene, cfg.data.positions, cfg.seed);
    let data = match cfg.data.labels {
        LabelKind::Beam => make_beam_dataset(&cfg.scene, cfg.data.codebook_size, &positions)?,
        LabelKind::Position => sample_scene(&cfg.scene, &positions)?,
        LabelKind::None => sample_scene(&cfg.scene, &positions)?.links(),
    };
    rec.output("dataset.sprt", &data.to_bytes())?;
    rec.finish()?;
    Ok(())
}

pub fn pretrain(common: &Common, dataset: &Path, lambda: Option<f64>, atoms: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(l) = lambda {
        cfg.pretrain.lambda = l;
    }
    if let Some(n) = atoms {
        cfg.pretrain.n_atoms = n;
    }
    let mut rec = recorder("pretrain", common, &cfg)?;
    rec.input("dataset", dataset)?;
    let links = LinkDataset::load(dataset)?.links();
    let run = run_pretrain(&links, &cfg.pretrain)?;
    rec.output("checkpoint.sprc", &run.checkpoint.to_bytes()?)?;
    rec.output("loss_trace.csv", trace_csv(&run.trace).as_bytes())?;
    let hist = activation_histogram(&run.checkpoint, &links)?;
    rec.output("activation_histogram.csv", histogram_csv(&hist).as_bytes())?;
    rec.finish()?;
    match run.status {
        RunStatus::Completed => Ok(()),
        RunStatus::Aborted { epoch, step, reason } => Err(Error::Numeric(format!(
            "pretraining aborted at epoch {epoch}, step {step}: {reason}; last good checkpoint written"
        ))),
    }
}

fn task_of(data: &LinkDataset) -> Result<Task> {
    match &data.labels {
        Labels::Position(_) => Ok(Task::Localization),
        Labels::Beam { codebook_size, .. } => Ok(Task::Beam {
            codebook_size: *codebook_size,
        }),
        Labels::None => Err(Error::InvalidArgument("finetuning needs a labeled dataset".into())),
    }
}

pub fn finetune(
    common: &Common,
    checkpoint: &Path,
    dataset: &Path,
    fraction: Option<f64>,
    codebook_size: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(f) = fraction {
        cfg.finetune.fraction = f;
    }
    let mut rec = recorder("finetune", common, &cfg)?;
    rec.input("checkpoint", checkpoint)?;
    rec.input("dataset", dataset)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = LinkDataset::load(dataset)?;
    let task = task_of(&data)?;
    if let (Some(k), Task::Beam { codebook_size: have }) = (codebook_size, task) {
        if k != have {
            return Err(Error::InvalidArgument(format!(
                "--codebook-size {k} but the dataset labels use {have}"
            )));
        }
    } else if codebook_size.is_some() {
        return Err(Error::InvalidArgument("--codebook-size given for a dataset without beam labels".into()));
    }
    let run = run_finetune(&ckpt, &data, &cfg.finetune.to_config(task, cfg.seed))?;
    rec.output("finetuned.sprc", &run.checkpoint.to_bytes()?)?;
    let mut trace = String::from("epoch,train_loss,val_loss\n");
    for (i, (t, v)) in run.train_loss.iter().zip(&run.val_loss).enumerate() {
        let _ = writeln!(trace, "{i},{t},{v}");
    }
    rec.output("finetune_trace.csv", trace.as_bytes())?;
    rec.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct ReconstructionReport {
    task: &'static str,
    num_samples: usize,
    nmse_db: f64,
}

pub fn eval(common: &Common, checkpoint: &Path, dataset: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let mut rec = recorder("eval", common, &cfg)?;
    rec.input("checkpoint", checkpoint)?;
    rec.input("dataset", dataset)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = LinkDataset::load(dataset)?;
    let bytes = if ckpt.meta.finetune.is_some() {
        json(&evaluate(&ckpt, &data)?)
    } else {
        json(&ReconstructionReport {
            task: "reconstruction",
            num_samples: data.len(),
            nmse_db: reconstruction_nmse_db(&ckpt, &data.samples)?,
        })
    };
    rec.output("metrics.json", &bytes)?;
    rec.finish()?;
    Ok(())
}

pub fn decompose(common: &Common, checkpoint: &Path, dataset: &Path, index: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let mut rec = recorder("decompose", common, &cfg)?;
    rec.input("checkpoint", checkpoint)?;
    rec.input("dataset", dataset)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = LinkDataset::load(dataset)?;
    let sample = data
        .samples
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("link {index} out of range (dataset has {})", data.len())))?
        .scaled(ckpt.meta.input_scale);
    let (code, recon) = decompose_links(&ckpt, std::slice::from_ref(&sample))?.remove(0);
    let dict = ckpt.dictionary()?;

    // Long format: channel rows carry blank atom fields, atom rows carry
    // the atom's weighted contribution a_i·ψ_i per tap.
    let mut csv = String::from("series,atom,magnitude,phase,gate,tap,re,im\n");
    // taps are numbered 1..=M
    for m in 1..=sample.num_taps() {
        let (re, im) = sample.tap(m);
        let _ = writeln!(csv, "input,,,,,{m},{re:e},{im:e}");
    }
    for (j, (re, im)) in recon.re.iter().zip(&recon.im).enumerate() {
        let _ = writeln!(csv, "reconstruction,,,,,{},{re:e},{im:e}", j + 1);
    }
    for i in 0..code.num_atoms() {
        let psi = dict.atom(i);
        let gate = u8::from(code.gate_bits[i]);
        for (j, p) in psi.iter().enumerate() {
            let _ = writeln!(
                csv,
                "atom,{i},{:e},{:e},{gate},{},{:e},{:e}",
                code.x_hat[i],
                code.phases[i],
                j + 1,
                code.a_re[i] * p,
                code.a_im[i] * p
            );
        }
    }
    rec.output("decomposition.csv", csv.as_bytes())?;
    rec.finish()?;
    Ok(())
}

pub fn dict_report(common: &Common, checkpoint: Option<&Path>, atoms: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let mut rec = recorder("dict-report", common, &cfg)?;
    let dict = match checkpoint {
        Some(p) => {
            if atoms.is_some() {
                return Err(Error::InvalidArgument("--atoms conflicts with --checkpoint".into()));
            }
            rec.input("checkpoint", p)?;
            Checkpoint::load(p)?.dictionary()?
        }
        None => {
            let m = cfg.scene.num_taps;
            let w = cfg.scene.bandwidth_hz;
            let tau_max = cfg.pretrain.tau_max.unwrap_or_else(|| default_tau_max(m, w));
            build_sinc_dictionary(m, atoms.unwrap_or(cfg.pretrain.n_atoms), w, tau_max)?
        }
    };
    let report = dict.coherence_report()?;
    rec.output("dictionary.sprd", &dict.to_bytes())?;
    rec.output("gram_stats.csv", report.to_csv().as_bytes())?;
    rec.output("coherence.json", &json(&report))?;
    rec.finish()?;
    Ok(())
}

fn read_coefficients(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                what: "coefficient CSV",
                detail: format!("line {}: {e}", n + 1),
            })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn thm_check(common: &Common, input: &Path, support: &[usize], c: f64) -> Result<()> {
    let cfg = load_config(common)?;
    let mut rec = recorder("thm-check", common, &cfg)?;
    rec.input("coefficients", input)?;
    let sets = read_coefficients(input)?;
    let report = theorem2_check(&sets, support, c)?;
    let bytes = json(&report);
    rec.output("theorem_report.json", &bytes)?;
    rec.finish()?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}
