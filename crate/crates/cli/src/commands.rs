//! Subcommand implementations. Each writes `report.json` and `report.csv`
//! into its output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point2};
use prp_core::adaptation::{labels_to_text, projective_adaptation};
use prp_core::correspondence::{
    apply_homography, cell_correspondence_prp, dense_correspondences, random_homography, warp_image, PairSampler,
    PairSamplingParams,
};
use prp_core::dataset::{frame_stem, read_dataset, write_dataset, Dataset};
use prp_core::evaluation::{
    self, accuracy, auc, estimate_essential, estimate_homography, homography::corner_error, matching_score, median, mma,
    pose_split_eval, register_pair, repeatability, MatchSet, MetricsReport, PoseSample,
};
use prp_core::frontend::{detect, extract, match_mnn};
use prp_core::geometry::Rejection;
use prp_core::losses::{
    descriptor_loss, detector_loss, relative_error, DescriptorGrid, DetectorLogits, CELL, CLASSES,
};
use prp_core::scene::{generate_trajectory, render_sequence};
use prp_core::{adaptation::PseudoLabels, correspondence::CellCorrespondence, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParam(m) | Error::InvalidSpec(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Homography,
    Pose,
    Register,
}

impl EvalTask {
    pub fn name(&self) -> &'static str {
        match self {
            EvalTask::Homography => "homography",
            EvalTask::Pose => "pose",
            EvalTask::Register => "register",
        }
    }
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let root = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::Config("no dataset given (set `dataset` or pass --dataset)".into()))?;
    Ok(read_dataset(root)?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn finish(report: MetricsReport, dir: &Path) -> CliResult<MetricsReport> {
    report.write(dir)?;
    Ok(report)
}

/// Per-item seed derived from the run seed.
fn sub_seed(seed: u64, salt: u64, i: usize) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn synth(cfg: &RunConfig) -> CliResult<MetricsReport> {
    let dir = out_dir(cfg)?;
    let cam = cfg.camera()?;
    let scene = cfg.scene_spec()?;
    let poses = generate_trajectory(&cfg.trajectory)?;
    let views = render_sequence(&scene, &cam, &poses)?;
    write_dataset(&views, &dir)?;
    let hit: usize = views
        .iter()
        .map(|v| v.depth.values.iter().filter(|d| d.is_finite() && **d > 0.0).count())
        .sum();
    let mut r = MetricsReport::new("synth", cfg.seed, cfg.echo());
    r.pairs_evaluated = views.len();
    r.push("frames", Some(views.len() as f64), None, "count");
    r.push("hit_fraction", Some(hit as f64 / (views.len() * cam.width * cam.height) as f64), None, "fraction");
    println!("rendered {} frames (seed {}) into {}", views.len(), cfg.seed, dir.display());
    finish(r, &dir)
}

struct PairOutput {
    src: usize,
    dst: usize,
    map: prp_core::correspondence::CorrespondenceMap,
    cells: CellCorrespondence,
}

pub fn pairs(cfg: &RunConfig) -> CliResult<MetricsReport> {
    let dir = out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let mut sampler = PairSampler::new(data.len(), &cfg.sampling)?;
    let list: Vec<(usize, usize)> = (0..cfg.correspondence.pairs).map(|_| sampler.sample()).collect();
    let outputs: Vec<PairOutput> = list
        .par_iter()
        .map(|&(s, d)| -> prp_core::Result<PairOutput> {
            let (a, b) = (&data.views[s], &data.views[d]);
            Ok(PairOutput {
                src: s,
                dst: d,
                map: dense_correspondences(a, b, s, d, &cfg.prp),
                cells: cell_correspondence_prp(a, b, cfg.correspondence.cell, cfg.correspondence.eps_s_prp, &cfg.prp)?,
            })
        })
        .collect::<prp_core::Result<_>>()?;

    let pair_dir = dir.join("pairs");
    fs::create_dir_all(&pair_dir).map_err(|e| CliError::Data(format!("{}: {e}", pair_dir.display())))?;
    let mut listing = String::from("# src dst valid_pixels positives\n");
    let pixels = (data.cam.width * data.cam.height) as f64;
    let mut valid = Vec::new();
    let mut rejected = [0usize; 4];
    let mut positives = Vec::new();
    for (k, o) in outputs.iter().enumerate() {
        let prefix = format!("{k:04}_{}_{}", frame_stem(o.src), frame_stem(o.dst));
        o.map.write(&pair_dir, &prefix)?;
        o.cells.write_text(&pair_dir.join(format!("{prefix}.cells.txt")))?;
        writeln!(listing, "{} {} {} {}", o.src, o.dst, o.map.valid_count(), o.cells.len()).expect("write to string");
        valid.push(o.map.valid_count() as f64 / pixels);
        for (slot, why) in [Rejection::OutOfBounds, Rejection::BehindCamera, Rejection::Occluded, Rejection::InvalidDepth]
            .into_iter()
            .enumerate()
        {
            rejected[slot] += o.map.count(why);
        }
        positives.push(o.cells.len() as f64 / o.cells.src_cells().max(1) as f64);
    }
    write_text(&dir.join("pairs.txt"), &listing)?;

    let mut r = MetricsReport::new("pairs", cfg.seed, cfg.echo());
    r.pairs_evaluated = outputs.len();
    r.push("admissible_pairs", Some(sampler.admissible() as f64), None, "count");
    r.push("valid_fraction_mean", mean(&valid), None, "fraction");
    let total = pixels * outputs.len().max(1) as f64;
    for (name, n) in ["out_of_bounds", "behind_camera", "occluded", "invalid_depth"].iter().zip(rejected) {
        r.push(format!("{name}_fraction"), Some(n as f64 / total), None, "fraction");
    }
    r.push("positives_per_cell_mean", mean(&positives), Some(cfg.correspondence.eps_s_prp), "count");
    println!("wrote {} pairs into {}", outputs.len(), pair_dir.display());
    finish(r, &dir)
}

pub fn labels(cfg: &RunConfig) -> CliResult<MetricsReport> {
    let dir = out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let p = &cfg.adaptation;
    if data.len() < p.window_len {
        return Err(CliError::Data(format!(
            "scene has {} frames, adaptation window needs {}",
            data.len(),
            p.window_len
        )));
    }
    let refs: Vec<usize> = (0..=data.len() - p.window_len).step_by(cfg.labels.stride.max(1)).collect();
    let images: Vec<&image::RgbImage> = data.views.iter().map(|v| &v.image).collect();
    let labels: Vec<PseudoLabels> = projective_adaptation(&data.views, &images, detect, p, &cfg.prp, Some(&refs))?;
    write_text(&dir.join("labels.txt"), &labels_to_text(&labels))?;
    let counts: Vec<f64> = labels.iter().map(|l| l.points.len() as f64).collect();
    let mut r = MetricsReport::new("labels", cfg.seed, cfg.echo());
    r.pairs_evaluated = labels.len();
    r.push("labels_per_frame_mean", mean(&counts), None, "count");
    r.push("labels_total", Some(counts.iter().sum()), None, "count");
    println!("labelled {} frames into {}", labels.len(), dir.join("labels.txt").display());
    finish(r, &dir)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn in_bounds(p: Point2<f64>, w: usize, h: usize) -> Option<Point2<f64>> {
    (p.x >= -0.5 && p.y >= -0.5 && p.x < w as f64 - 0.5 && p.y < h as f64 - 0.5).then_some(p)
}

pub fn eval(cfg: &RunConfig, task: EvalTask) -> CliResult<MetricsReport> {
    let dir = out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let mut r = match task {
        EvalTask::Homography => eval_homography(cfg, &data)?,
        EvalTask::Pose => eval_pose(cfg, &data)?,
        EvalTask::Register => eval_register(cfg, &data)?,
    };
    r.task = format!("eval-{}", task.name());
    println!(
        "{}: {} pairs evaluated, {} skipped",
        r.task, r.pairs_evaluated, r.pairs_skipped
    );
    finish(r, &dir)
}

struct HomographyPair {
    corner_error: f64,
    rep: Vec<Option<f64>>,
    mma: Vec<Option<f64>>,
    ms: Vec<Option<f64>>,
}

fn eval_homography(cfg: &RunConfig, data: &Dataset) -> CliResult<MetricsReport> {
    let e = &cfg.eval;
    let (w, h) = (data.cam.width, data.cam.height);
    let frames: Vec<usize> = (0..e.pairs.min(data.len())).map(|k| k * data.len() / e.pairs.min(data.len()).max(1)).collect();
    let results: Vec<HomographyPair> = frames
        .par_iter()
        .map(|&i| -> prp_core::Result<HomographyPair> {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1, i));
            let hgt: Matrix3<f64> = random_homography(&mut rng, (w, h), e.homography_strength);
            let hinv = hgt.try_inverse().unwrap_or_else(Matrix3::identity);
            let img1 = &data.views[i].image;
            let img2 = warp_image(img1, &hgt)?;
            let a = extract(img1, e.keypoints, e.nms_radius, e.descriptor_dim)?;
            let b = extract(&img2, e.keypoints, e.nms_radius, e.descriptor_dim)?;
            let fwd = |p: &Point2<f64>| apply_homography(&hgt, p).and_then(|q| in_bounds(q, w, h));
            let bwd = |p: &Point2<f64>| apply_homography(&hinv, p).and_then(|q| in_bounds(q, w, h));
            let idx = match_mnn(&a.descriptors, &b.descriptors, e.ratio);
            let matches = MatchSet::from_indices(&a.keypoints, &b.keypoints, &idx);
            let ransac = evaluation::RansacParams {
                seed: sub_seed(cfg.seed, 2, i),
                ..e.ransac
            };
            let corner = match estimate_homography(&matches, &ransac) {
                Ok(est) => corner_error(&est.h, &hgt, (w, h)),
                Err(_) => f64::INFINITY,
            };
            let ts = &e.homography_thresholds;
            Ok(HomographyPair {
                corner_error: corner,
                rep: ts.iter().map(|&t| repeatability(&a.keypoints, &b.keypoints, &fwd, &bwd, t)).collect(),
                mma: ts.iter().map(|&t| mma(&matches, &fwd, t)).collect(),
                ms: ts.iter().map(|&t| matching_score(&matches, &a.keypoints, &fwd, t)).collect(),
            })
        })
        .collect::<prp_core::Result<_>>()?;

    let mut r = MetricsReport::new("homography", cfg.seed, cfg.echo());
    r.pairs_evaluated = results.len();
    r.pairs_skipped = results.iter().filter(|p| p.rep.iter().all(Option::is_none)).count();
    let errors: Vec<f64> = results.iter().map(|p| p.corner_error).collect();
    for (k, &t) in e.homography_thresholds.iter().enumerate() {
        r.push(format!("accuracy@{t}"), Some(accuracy(&errors, t)), Some(t), "fraction");
        r.push(format!("auc@{t}"), Some(auc(&errors, t)), Some(t), "fraction");
        let col = |f: &dyn Fn(&HomographyPair) -> Option<f64>| {
            let v: Vec<f64> = results.iter().filter_map(f).collect();
            mean(&v)
        };
        r.push(format!("repeatability@{t}"), col(&|p| p.rep[k]), Some(t), "fraction");
        r.push(format!("mma@{t}"), col(&|p| p.mma[k]), Some(t), "fraction");
        r.push(format!("matching_score@{t}"), col(&|p| p.ms[k]), Some(t), "fraction");
    }
    r.push("corner_error_median", median(&errors), None, "px");
    r.push("estimation_failures", Some(errors.iter().filter(|e| !e.is_finite()).count() as f64), None, "count");
    Ok(r)
}

fn sample_pairs(cfg: &RunConfig, data: &Dataset, offsets: [usize; 2], salt: u64) -> CliResult<Vec<(usize, usize)>> {
    let params = PairSamplingParams {
        lambda_l: offsets[0],
        lambda_u: offsets[1],
        seed: sub_seed(cfg.seed, salt, 0),
    };
    let mut sampler = PairSampler::new(data.len(), &params)?;
    Ok((0..cfg.eval.pairs).map(|_| sampler.sample()).collect())
}

fn eval_pose(cfg: &RunConfig, data: &Dataset) -> CliResult<MetricsReport> {
    let e = &cfg.eval;
    let list = sample_pairs(cfg, data, e.pose_offsets, 3)?;
    let samples: Vec<(PoseSample, bool)> = list
        .par_iter()
        .enumerate()
        .map(|(k, &(s, d))| -> prp_core::Result<(PoseSample, bool)> {
            let (v1, v2) = (&data.views[s], &data.views[d]);
            let a = extract(&v1.image, e.keypoints, e.nms_radius, e.descriptor_dim)?;
            let b = extract(&v2.image, e.keypoints, e.nms_radius, e.descriptor_dim)?;
            let idx = match_mnn(&a.descriptors, &b.descriptors, e.ratio);
            let matches = MatchSet::from_indices(&a.keypoints, &b.keypoints, &idx);
            let params = evaluation::EssentialParams {
                seed: sub_seed(cfg.seed, 4, k),
                ..e.essential
            };
            let est = estimate_essential(&matches, &v1.cam, &v2.cam, &params).ok();
            let reliable = est.as_ref().is_some_and(|p| p.translation_reliable);
            let gt = v1.pose.relative_to(&v2.pose);
            Ok((
                PoseSample {
                    estimate: est,
                    r_gt: gt.rotation,
                    t_gt: gt.translation,
                },
                reliable,
            ))
        })
        .collect::<prp_core::Result<_>>()?;
    let unreliable = samples.iter().filter(|(s, ok)| s.estimate.is_some() && !ok).count();
    let samples: Vec<PoseSample> = samples.into_iter().map(|(s, _)| s).collect();

    let mut r = MetricsReport::new("pose", cfg.seed, cfg.echo());
    r.pairs_evaluated = samples.len();
    r.pairs_skipped = samples.iter().filter(|s| s.estimate.is_none()).count();
    let all = pose_split_eval(&samples, f64::NEG_INFINITY, &e.pose_thresholds);
    for (t, a) in &all.high.auc {
        r.push(format!("auc@{t}"), Some(*a), Some(*t), "fraction");
    }
    let split = pose_split_eval(&samples, e.pose_split, &e.pose_thresholds);
    for (name, part) in [("low_t", &split.low), ("high_t", &split.high)] {
        r.push(format!("{name}.count"), Some(part.count as f64), Some(e.pose_split), "count");
        for (t, a) in &part.auc {
            let v = (part.count > 0).then_some(*a);
            r.push(format!("{name}.auc@{t}"), v, Some(*t), "fraction");
        }
    }
    r.push("translation_unreliable", Some(unreliable as f64), None, "count");
    r.push("pose_error_median", median(&all.high.errors), None, "deg");
    Ok(r)
}

fn eval_register(cfg: &RunConfig, data: &Dataset) -> CliResult<MetricsReport> {
    let e = &cfg.eval;
    let list = sample_pairs(cfg, data, e.register_offsets, 5)?;
    let results: Vec<Option<(f64, f64, f64)>> = list
        .par_iter()
        .map(|&(s, d)| {
            register_pair(&data.views[s], &data.views[d], &e.registration)
                .ok()
                .map(|x| (x.rotation_error_deg, x.translation_error_cm, x.chamfer_cm))
        })
        .collect();
    let mut r = MetricsReport::new("register", cfg.seed, cfg.echo());
    r.pairs_evaluated = results.len();
    r.pairs_skipped = results.iter().filter(|x| x.is_none()).count();
    let pick = |f: fn(&(f64, f64, f64)) -> f64| -> Vec<f64> {
        results.iter().map(|x| x.as_ref().map_or(f64::INFINITY, f)).collect()
    };
    for (name, unit, errs, ts) in [
        ("rotation", "deg", pick(|x| x.0), &e.rotation_thresholds_deg),
        ("translation", "cm", pick(|x| x.1), &e.translation_thresholds_cm),
        ("chamfer", "cm", pick(|x| x.2), &e.chamfer_thresholds_cm),
    ] {
        for &t in ts {
            r.push(format!("{name}.accuracy@{t}"), Some(accuracy(&errs, t)), Some(t), "fraction");
        }
        let finite: Vec<f64> = errs.iter().copied().filter(|x| x.is_finite()).collect();
        r.push(format!("{name}.mean"), mean(&finite), None, unit);
        r.push(format!("{name}.median"), median(&finite), None, unit);
    }
    Ok(r)
}

fn random_unit_grid(rng: &mut ChaCha8Rng, hc: usize, wc: usize, dim: usize) -> DescriptorGrid {
    let data = (0..hc * wc * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    DescriptorGrid::new(hc, wc, dim, data)
        .and_then(DescriptorGrid::normalized)
        .expect("random cells are nonzero")
}

fn off_kink(a: &DescriptorGrid, b: &DescriptorGrid, m_p: f64, m_n: f64) -> bool {
    (0..a.cells()).all(|i| {
        (0..b.cells()).all(|j| {
            let x: f64 = a.cell(i).iter().zip(b.cell(j)).map(|(u, v)| u * v).sum();
            (x - m_p).abs() > 1e-3 && (x - m_n).abs() > 1e-3
        })
    })
}

/// Largest relative error between analytic and central-difference
/// gradients over the random instances of `cfg.losscheck`.
pub fn gradient_check(cfg: &RunConfig) -> prp_core::Result<(f64, f64)> {
    let lc = &cfg.losscheck;
    let [hc, wc] = lc.grid;
    let h = lc.step;
    let per_instance: Vec<(f64, f64)> = (0..lc.instances)
        .into_par_iter()
        .map(|k| -> prp_core::Result<(f64, f64)> {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 6, k));
            let dim = lc.dims[k % lc.dims.len()];
            let p = &lc.descriptor;
            let (a, b) = loop {
                let a = random_unit_grid(&mut rng, hc, wc, dim);
                let b = random_unit_grid(&mut rng, hc, wc, dim);
                if off_kink(&a, &b, p.m_p, p.m_n) {
                    break (a, b);
                }
            };
            let mut positives = Vec::new();
            for q in 0..(hc * wc * hc * wc) as u32 {
                if rng.random_bool(0.15) {
                    let (src, dst) = (q / (hc * wc) as u32, q % (hc * wc) as u32);
                    positives.push([src / wc as u32, src % wc as u32, dst / wc as u32, dst % wc as u32]);
                }
            }
            let s = CellCorrespondence {
                hc,
                wc,
                hc_dst: hc,
                wc_dst: wc,
                cell: CELL,
                eps_s: cfg.correspondence.eps_s_prp,
                crop: (wc * CELL, hc * CELL),
                positives,
            };
            let out = descriptor_loss(&a, &b, &s, p)?;
            let mut worst_d: f64 = 0.0;
            for (which, base) in [(0, &a), (1, &b)] {
                let g = if which == 0 { &out.grad } else { &out.grad_dst };
                for i in 0..base.data.len() {
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    plus.data[i] += h;
                    minus.data[i] -= h;
                    let eval = |x: &DescriptorGrid| -> prp_core::Result<f64> {
                        Ok(if which == 0 {
                            descriptor_loss(x, &b, &s, p)?.loss
                        } else {
                            descriptor_loss(&a, x, &s, p)?.loss
                        })
                    };
                    let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
                    worst_d = worst_d.max(relative_error(g[i], numeric));
                }
            }

            // one 8×8 cell with a random label (or none)
            let logits = DetectorLogits::new(1, 1, (0..CLASSES).map(|_| rng.random_range(-3.0..3.0)).collect())?;
            let labels = PseudoLabels {
                frame: 0,
                points: if rng.random_bool(0.8) {
                    vec![(rng.random_range(0..CELL as u32), rng.random_range(0..CELL as u32))]
                } else {
                    vec![]
                },
            };
            let det = detector_loss(&logits, &labels)?;
            let mut worst_x: f64 = 0.0;
            for i in 0..CLASSES {
                let mut plus = logits.clone();
                let mut minus = logits.clone();
                plus.data[i] += h;
                minus.data[i] -= h;
                let numeric = (detector_loss(&plus, &labels)?.loss - detector_loss(&minus, &labels)?.loss) / (2.0 * h);
                worst_x = worst_x.max(relative_error(det.grad[i], numeric));
            }
            Ok((worst_d, worst_x))
        })
        .collect::<prp_core::Result<_>>()?;
    Ok(per_instance
        .iter()
        .fold((0.0f64, 0.0f64), |acc, x| (acc.0.max(x.0), acc.1.max(x.1))))
}

pub fn losscheck(cfg: &RunConfig) -> CliResult<MetricsReport> {
    let dir = out_dir(cfg)?;
    let (desc, det) = gradient_check(cfg)?;
    let mut r = MetricsReport::new("losscheck", cfg.seed, cfg.echo());
    r.pairs_evaluated = cfg.losscheck.instances;
    r.push("descriptor_grad_max_rel_error", Some(desc), Some(cfg.losscheck.tolerance), "ratio");
    r.push("detector_grad_max_rel_error", Some(det), Some(cfg.losscheck.tolerance), "ratio");
    println!("max relative gradient error: descriptor {desc:.3e}, detector {det:.3e}");
    let r = finish(r, &dir)?;
    let tol = cfg.losscheck.tolerance;
    if desc > tol || det > tol {
        return Err(CliError::Check(format!(
            "gradient error above {tol}: descriptor {desc:.3e}, detector {det:.3e}"
        )));
    }
    Ok(r)
}
