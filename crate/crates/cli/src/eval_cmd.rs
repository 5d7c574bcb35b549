use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use forcefit::contact::ContactParams;
use forcefit::eval::{evaluate_scene, EvalError, MetricsReport};
use forcefit::refine::RunManifest;
use forcefit::scene::{read_scene, SceneFile};

use crate::args::EvalArgs;
use crate::plot;
use crate::refine_cmd::{INITIAL, MANIFEST, REFINED};
use crate::CliError;

const DEFAULT_Z: f64 = 0.002;
const DEFAULT_P0: f64 = 0.5;

/// Scenes to compare for one id.
struct Case {
    id: String,
    truth: PathBuf,
    initial: Option<PathBuf>,
    refined: PathBuf,
    z: f64,
    p0: f64,
}

/// Metrics of one case; `None` when the truth map has a single class.
struct Scored {
    id: String,
    initial: Option<MetricsReport>,
    refined: Option<MetricsReport>,
    skipped: Option<String>,
}

fn cases(args: &EvalArgs) -> Result<Vec<Case>, CliError> {
    let mut out = Vec::new();
    for dir in &args.runs {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m = RunManifest::from_text(&text).map_err(|e| CliError::Runtime(e.into()))?;
        out.push(Case {
            id: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            truth: PathBuf::from(&m.scene),
            initial: Some(dir.join(INITIAL)),
            refined: dir.join(REFINED),
            z: args.z.unwrap_or(m.config.anneal.z_end),
            p0: args.p0.unwrap_or(m.config.p0),
        });
    }
    if let (Some(truth), Some(refined)) = (&args.truth, &args.refined) {
        out.push(Case {
            id: refined.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            truth: truth.clone(),
            initial: args.initial.clone(),
            refined: refined.clone(),
            z: args.z.unwrap_or(DEFAULT_Z),
            p0: args.p0.unwrap_or(DEFAULT_P0),
        });
    }
    if out.is_empty() {
        return Err(CliError::Usage("nothing to evaluate: pass --run or --truth with --refined".into()));
    }
    Ok(out)
}

fn load(path: &Path) -> anyhow::Result<SceneFile> {
    read_scene(path).with_context(|| format!("reading {}", path.display()))
}

fn score(case: &Case) -> Result<Scored, CliError> {
    let params = ContactParams::new(case.z, case.p0).map_err(|e| CliError::Usage(e.to_string()))?;
    let truth = load(&case.truth)?;
    let labels = truth
        .truth
        .clone()
        .ok_or_else(|| anyhow!("{} has no truth contact map", case.truth.display()))?;
    let metrics = |path: &Path| -> Result<Result<MetricsReport, String>, CliError> {
        let scene = load(path)?;
        match evaluate_scene(&scene.scene, &truth.scene, &labels, &params) {
            Ok(m) => Ok(Ok(m)),
            Err(e @ EvalError::UndefinedAuc { .. }) => Ok(Err(e.to_string())),
            Err(e) => Err(CliError::Runtime(e.into())),
        }
    };
    let refined = metrics(&case.refined)?;
    let initial = case.initial.as_deref().map(metrics).transpose()?;
    let skipped = refined.as_ref().err().cloned();
    Ok(Scored {
        id: case.id.clone(),
        initial: initial.and_then(|r| r.ok()),
        refined: refined.ok(),
        skipped,
    })
}

fn row(s: &mut String, id: &str, phase: &str, m: &MetricsReport) {
    let _ = writeln!(s, "{id}\t{phase}\t{:.6}\t{:.6}\t{:.6}", m.mpjpe_mm, m.pr_auc, m.roc_auc);
}

pub fn run(args: &EvalArgs) -> Result<(), CliError> {
    let cases = cases(args)?;
    let scored: Vec<Scored> = cases.iter().map(score).collect::<Result<_, _>>()?;

    let mut metrics = String::from("scene\tphase\tmpjpe_mm\tpr_auc\troc_auc\n");
    let mut deltas = String::from("scene\tdelta_mpjpe_mm\tdelta_pr_auc\tdelta_roc_auc\n");
    let mut d_mpjpe = Vec::new();
    let mut d_pr = Vec::new();
    for s in &scored {
        if let Some(reason) = &s.skipped {
            log::warn!("{}: skipped ({reason})", s.id);
            let _ = writeln!(metrics, "{}\tskipped\t\t\t# {reason}", s.id);
            continue;
        }
        if let Some(i) = &s.initial {
            row(&mut metrics, &s.id, "initial", i);
        }
        let r = s.refined.as_ref().expect("scored when not skipped");
        row(&mut metrics, &s.id, "refined", r);
        if let Some(i) = &s.initial {
            let (a, b, c) = (r.mpjpe_mm - i.mpjpe_mm, r.pr_auc - i.pr_auc, r.roc_auc - i.roc_auc);
            let _ = writeln!(deltas, "{}\t{a:.6}\t{b:.6}\t{c:.6}", s.id);
            d_mpjpe.push(a);
            d_pr.push(b);
        }
    }
    let mut summary = String::from("scenes\tmean_delta_mpjpe_mm\tfraction_mpjpe_improved\tmean_delta_pr_auc\tfraction_pr_auc_improved\n");
    if !d_mpjpe.is_empty() {
        let n = d_mpjpe.len() as f64;
        let _ = writeln!(
            summary,
            "{}\t{:.6}\t{:.4}\t{:.6}\t{:.4}",
            d_mpjpe.len(),
            d_mpjpe.iter().sum::<f64>() / n,
            d_mpjpe.iter().filter(|&&d| d < 0.0).count() as f64 / n,
            d_pr.iter().sum::<f64>() / n,
            d_pr.iter().filter(|&&d| d > 0.0).count() as f64 / n,
        );
    }

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let write = |name: &str, text: &str| -> Result<(), CliError> {
        let p = args.out.join(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    };
    write("metrics.tsv", &metrics)?;
    write("deltas.tsv", &deltas)?;
    write("summary.tsv", &summary)?;
    if args.plots {
        let p0 = args.p0.unwrap_or(DEFAULT_P0);
        write("contact_curve.tsv", &plot::contact_curve_table(p0))?;
        write("contact_curve.svg", &plot::contact_curve_svg(p0))?;
        if !d_mpjpe.is_empty() {
            write("delta_mpjpe.svg", &plot::histogram_svg(&d_mpjpe, "change in MPJPE (mm)"))?;
            write("delta_pr_auc.svg", &plot::histogram_svg(&d_pr, "change in PR-AUC"))?;
        }
    }
    print!("{metrics}");
    if !d_mpjpe.is_empty() {
        print!("{summary}");
    }
    Ok(())
}
