use std::fs;
use std::path::{Path, PathBuf};

use lrcr::audit::{run_audit, AuditConfig, OpAudit};
use lrcr::checkpoint::{load_matcher, load_model, save_matcher, save_model};
use lrcr::cost_volume::{siamese_cost_volume, train_matcher, MatcherConfig};
use lrcr::data::{
    generate_dataset, heat_image, make_split, read_dataset, sample_dir, write_pfm, write_pgm, write_sample, StereoSample,
    SAMPLE_FILES,
};
use lrcr::evaluation::{baseline_disparity, evaluate_pipeline, Baseline, LrcrPredictor, MetricsReport};
use lrcr::training::{prepare_census, train_stage1, train_stage2, EpochLog, PreparedSample};
use lrcr::{DisparityMap, Error, LrcrWeights, Result, SiameseWeights};

use crate::config::RunConfig;

fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::from)
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    write_text(&out.join("config.txt"), &cfg.render())
}

fn load_samples(data: &Path) -> Result<Vec<StereoSample>> {
    let samples = read_dataset(data)?;
    if samples.is_empty() {
        return Err(contract(format!("no samples found under {}", data.display())));
    }
    Ok(samples)
}

/// Raw and normalized cost volumes: census unless a trained matcher is given.
fn prepare(samples: &[StereoSample], cfg: &RunConfig, matcher: Option<&SiameseWeights>) -> Result<Vec<PreparedSample>> {
    let d_max = cfg.scene.d_max;
    match matcher {
        None => prepare_census(samples, d_max, cfg.census_window),
        Some(m) => samples
            .iter()
            .map(|s| {
                let (l, r) = siamese_cost_volume(&s.left, &s.right, m, d_max)?;
                Ok(PreparedSample::from_volumes(l, r, s.gt_left.clone(), s.gt_right.clone()))
            })
            .collect(),
    }
}

fn load_optional_matcher(path: Option<&Path>) -> Result<Option<SiameseWeights>> {
    path.map(load_matcher).transpose()
}

fn split<T: Clone>(items: &[T], cfg: &RunConfig) -> Result<(Vec<T>, Vec<T>)> {
    let (train, val) = make_split(items.len(), cfg.val_samples, cfg.seed)?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&train), pick(&val)))
}

fn log_csv(logs: &[EpochLog], steps: usize) -> String {
    let mut s = EpochLog::csv_header(steps);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

fn print_epoch(l: &EpochLog) {
    let epe: Vec<String> = l.val_epe.iter().map(|e| format!("{e:.4}")).collect();
    eprintln!(
        "stage {} epoch {:>3}  lr {:.2e}  loss {:.5}  val EPE [{}]",
        l.stage,
        l.epoch,
        l.lr,
        l.train_loss,
        epe.join(" ")
    );
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.samples == 0 {
        return Err(Error::Config("data.samples must be at least 1".into()));
    }
    cfg.scene.validate()?;
    let samples = generate_dataset(&cfg.scene, cfg.samples, cfg.seed)?;
    for (i, s) in samples.iter().enumerate() {
        let dir = write_sample(out, i, s)?;
        for f in SAMPLE_FILES {
            println!("{}", dir.join(f).display());
        }
    }
    Ok(())
}

pub fn train_matcher_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let samples = load_samples(data)?;
    let (train, _) = split(&samples, cfg)?;
    prepare_out(out, cfg)?;
    let mcfg = MatcherConfig {
        d_max: cfg.scene.d_max,
        ..cfg.matcher.clone()
    };
    let init = SiameseWeights::init(cfg.matcher.seed);
    let (weights, history) = train_matcher(&train, &init, &mcfg)?;
    let mut csv = String::from("epoch,hinge_loss\n");
    for (e, loss) in history.iter().enumerate() {
        eprintln!("matcher epoch {e:>3}  loss {loss:.5}");
        csv.push_str(&format!("{e},{loss}\n"));
    }
    write_text(&out.join("matcher_log.csv"), &csv)?;
    save_matcher(&weights, &out.join("matcher.bin"))?;
    println!("{}", out.join("matcher.bin").display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub stage: StageArg,
    pub init: Option<&'a Path>,
    pub matcher: Option<&'a Path>,
}

pub fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    cfg.validate()?;
    if a.stage == StageArg::Two && a.init.is_none() {
        return Err(contract("stage 2 needs a stage-1 checkpoint (--init)"));
    }
    let samples = load_samples(a.data)?;
    let matcher = load_optional_matcher(a.matcher)?;
    let prepared = prepare(&samples, cfg, matcher.as_ref())?;
    let (train, val) = split(&prepared, cfg)?;
    prepare_out(a.out, cfg)?;

    let stage1 = match (a.stage, a.init) {
        (StageArg::Two, Some(path)) => load_model(path)?,
        _ => {
            let init = match a.init {
                Some(path) => load_model(path)?,
                None => LrcrWeights::init(cfg.model_config(), cfg.seed)?,
            };
            let (w, logs) = train_stage1(&train, &init, &cfg.stage1, &val, print_epoch)?;
            write_text(&a.out.join("stage1_log.csv"), &log_csv(&logs, 1))?;
            save_model(&w, &a.out.join("stage1.bin"))?;
            println!("{}", a.out.join("stage1.bin").display());
            w
        }
    };
    if a.stage == StageArg::One {
        return Ok(());
    }
    if stage1.config != cfg.model_config() {
        return Err(contract("checkpoint model shape does not match the configured scene"));
    }
    let (w, logs) = train_stage2(&train, Some(&stage1), &cfg.stage2, &val, print_epoch)?;
    write_text(&a.out.join("stage2_log.csv"), &log_csv(&logs, cfg.stage2.steps))?;
    save_model(&w, &a.out.join("stage2.bin"))?;
    println!("{}", a.out.join("stage2.bin").display());
    Ok(())
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<LrcrWeights> {
    let w = load_model(path)?;
    if w.config.disparities != cfg.scene.d_max {
        return Err(contract(format!(
            "checkpoint has {} disparities but the scene config has {}",
            w.config.disparities, cfg.scene.d_max
        )));
    }
    Ok(w)
}

fn sample_names(samples: usize, out: &Path) -> Vec<PathBuf> {
    (0..samples).map(|i| sample_dir(out, i)).collect()
}

pub fn infer(cfg: &RunConfig, data: &Path, checkpoint: &Path, matcher: Option<&Path>, steps: usize, out: &Path) -> Result<()> {
    let weights = load_checkpoint(checkpoint, cfg)?;
    let samples = load_samples(data)?;
    let prepared = prepare(&samples, cfg, load_optional_matcher(matcher)?.as_ref())?;
    prepare_out(out, cfg)?;
    for (s, dir) in prepared.iter().zip(sample_names(prepared.len(), out)) {
        let maps = weights.infer(&s.cost_left, &s.cost_right, steps)?;
        let last = maps.last().ok_or_else(|| contract("need at least one step"))?;
        fs::create_dir_all(&dir)?;
        write_pfm(&last.left, &dir.join("disp_left.pfm"))?;
        write_pfm(&last.right, &dir.join("disp_right.pfm"))?;
        println!("{}", dir.display());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineArg {
    Wta,
    Refined,
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub baseline: Option<BaselineArg>,
    pub matcher: Option<&'a Path>,
    pub steps: usize,
    pub dump_images: bool,
}

/// `|pred - gt|` on labeled pixels, zero elsewhere.
fn error_values(pred: &DisparityMap, gt: &DisparityMap) -> Vec<f64> {
    pred.values()
        .iter()
        .zip(gt.values())
        .zip(gt.valid())
        .map(|((p, g), &ok)| if ok { (p - g).abs() } else { 0.0 })
        .collect()
}

fn dump(dir: &Path, step: usize, pred: &DisparityMap, gt: &DisparityMap, attention: Option<&[f64]>, d_max: usize) -> Result<()> {
    let (h, w) = (pred.height(), pred.width());
    let top = (d_max - 1) as f64;
    fs::create_dir_all(dir)?;
    write_pgm(&heat_image(h, w, pred.values(), 0.0, top)?, &dir.join(format!("step{step}_disparity.pgm")))?;
    write_pgm(&heat_image(h, w, &error_values(pred, gt), 0.0, top)?, &dir.join(format!("step{step}_error.pgm")))?;
    if let Some(att) = attention {
        write_pgm(&heat_image(h, w, att, 0.0, 1.0)?, &dir.join(format!("step{step}_attention.pgm")))?;
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<MetricsReport> {
    let samples = load_samples(a.data)?;
    let prepared = prepare(&samples, cfg, load_optional_matcher(a.matcher)?.as_ref())?;
    let report = match (a.baseline, a.checkpoint) {
        (Some(b), None) => {
            let kind = match b {
                BaselineArg::Wta => Baseline::Wta,
                BaselineArg::Refined => Baseline::Refined,
            };
            prepare_out(a.out, cfg)?;
            if a.dump_images {
                for (s, dir) in prepared.iter().zip(sample_names(prepared.len(), &a.out.join("images"))) {
                    let pred = baseline_disparity(kind, &s.raw_left, &s.raw_right)?;
                    dump(&dir, 1, &pred, &s.gt_left, None, cfg.scene.d_max)?;
                }
            }
            evaluate_pipeline(&kind, &prepared)?
        }
        (None, Some(path)) => {
            let weights = load_checkpoint(path, cfg)?;
            prepare_out(a.out, cfg)?;
            if a.dump_images {
                for (s, dir) in prepared.iter().zip(sample_names(prepared.len(), &a.out.join("images"))) {
                    for (t, m) in weights.infer(&s.cost_left, &s.cost_right, a.steps)?.iter().enumerate() {
                        dump(&dir, t + 1, &m.left, &s.gt_left, Some(&m.err_left.values), cfg.scene.d_max)?;
                    }
                }
            }
            evaluate_pipeline(
                &LrcrPredictor {
                    weights: &weights,
                    steps: a.steps,
                },
                &prepared,
            )?
        }
        _ => return Err(Error::Config("eval needs exactly one of --checkpoint or --baseline".into())),
    };
    write_text(&a.out.join("metrics.csv"), &report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(report)
}

/// Runs the gradient audit; returns whether every operation passed.
pub fn check_grads(cfg: &RunConfig, ops: &[String], flip: bool) -> Result<bool> {
    let audit = AuditConfig {
        points: cfg.audit_points,
        seed: cfg.audit_seed,
        ops: ops.to_vec(),
        flip_gradients: flip,
    };
    let report = |r: &OpAudit| {
        let tag = if r.passed() { "PASS" } else { "FAIL" };
        println!("{tag} {:<24} worst {:.2e}  tol {:.0e}", r.name, r.worst, r.tolerance);
    };
    let results = run_audit(&audit, report)?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} of {} operations passed", results.len() - failed, results.len());
    Ok(failed == 0)
}
