use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RunOptions};
use crate::backbone::{add_noise, Backbone};
use crate::error::{Error, Result};
use crate::evaluator::{detect, visor_metrics, write_judgments, ImageJudgment, MetricsReport};
use crate::grid::Latent;
use crate::guidance::{guidance_loss, loss_gradient, sample, GuidanceConfig};
use crate::prompt::{generate_benchmark, write_jsonl, PromptTriplet, Relation};

/// An image whose trajectory hit a non-finite value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Abort {
    pub prompt_index: usize,
    pub image_index: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub judgments: Vec<ImageJudgment>,
    pub aborts: Vec<Abort>,
    pub metrics: MetricsReport,
    pub duration_secs: f64,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Serde(format!("{}: {e}", path.display()))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Image-space view of a latent for one prompt: the sum of both objects'
/// intensity fields.
fn composite(backbone: &Backbone<f64>, latent: &Latent<f64>, triplet: &PromptTriplet) -> Result<crate::grid::ScalarGrid<f64>> {
    let [a, b] = backbone.token_classes(triplet)?;
    backbone.intensity(latent, a)?.add_scaled(&backbone.intensity(latent, b)?, 1.0)
}

struct ImageOutcome {
    judgment: ImageJudgment,
    abort: Option<Abort>,
}

fn run_image(
    backbone: &Backbone<f64>,
    schedule: &crate::backbone::Schedule<f64>,
    config: &ExperimentConfig,
    opts: &RunOptions,
    prompt_index: usize,
    triplet: &PromptTriplet,
    image_index: usize,
) -> Result<ImageOutcome> {
    let seed = config.benchmark.base_seed + image_index as u64;
    let stem = format!("p{prompt_index:04}_i{image_index}");
    match sample(backbone, triplet, schedule, &config.guidance, seed) {
        Ok(out) => {
            if let Some(dir) = &opts.out {
                if opts.trace {
                    let path = dir.join("traces").join(format!("{stem}.jsonl"));
                    let mut w = create(&path)?;
                    out.write_trace(&mut w)?;
                    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
                }
                if opts.dump_images {
                    let path = dir.join("images").join(format!("{stem}.pgm"));
                    let mut w = create(&path)?;
                    composite(backbone, &out.latent, triplet)?
                        .write_pgm(&mut w)
                        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
                }
            }
            let (a, b) = detect(backbone, &out.latent, triplet, config.evaluation.det)?;
            Ok(ImageOutcome {
                judgment: ImageJudgment::from_detections(prompt_index, image_index, &a, &b, triplet.relation, &config.evaluation),
                abort: None,
            })
        }
        Err(Error::NonFinite { step }) => {
            log::warn!("prompt {prompt_index} image {image_index}: non-finite value at step {step}");
            Ok(ImageOutcome {
                judgment: ImageJudgment::aborted(prompt_index, image_index),
                abort: Some(Abort {
                    prompt_index,
                    image_index,
                    step,
                }),
            })
        }
        Err(e) => Err(e),
    }
}

/// Samples, judges and scores the whole benchmark. Deterministic for a fixed
/// config, whatever the worker count.
pub fn run_bench(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunRecord> {
    config.validate()?;
    let started = Instant::now();
    let backbone = config.backbone::<f64>()?;
    let schedule = config.schedule.build::<f64>()?;
    let prompts = generate_benchmark(backbone.vocabulary(), config.benchmark.pair_count, config.benchmark.base_seed)?;
    let n = config.benchmark.images_per_prompt;

    if let Some(dir) = &opts.out {
        create_dir(dir)?;
        if opts.trace {
            create_dir(&dir.join("traces"))?;
        }
        if opts.dump_images {
            create_dir(&dir.join("images"))?;
        }
    }

    let jobs: Vec<(usize, usize)> = (0..prompts.len()).flat_map(|p| (0..n).map(move |i| (p, i))).collect();
    let outcomes: Vec<ImageOutcome> = pool(opts.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(p, i)| run_image(&backbone, &schedule, config, opts, p, &prompts[p], i))
            .collect::<Result<_>>()
    })?;

    let mut judgments = Vec::with_capacity(outcomes.len());
    let mut aborts = Vec::new();
    for o in outcomes {
        judgments.push(o.judgment);
        aborts.extend(o.abort);
    }
    let mut metrics = visor_metrics(&judgments, n)?;
    metrics.thresholds = Some(config.evaluation.clone());
    metrics.check_invariants()?;

    let record = RunRecord {
        config_hash: config.hash()?,
        config: config.clone(),
        judgments,
        aborts,
        metrics,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &opts.out {
        persist(dir, &record, &prompts)?;
    }
    log::info!(
        "bench {}: OA {:.1} uncond {:.1} cond {:.1} in {:.1}s",
        &record.config_hash[..12],
        record.metrics.oa,
        record.metrics.visor_uncond,
        record.metrics.visor_cond,
        record.duration_secs
    );
    Ok(record)
}

const METRIC_HEADER: [&str; 8] = ["oa", "visor_uncond", "visor_cond", "visor_1", "visor_2", "visor_3", "visor_4", "t2i_spatial"];

fn metric_fields(m: &MetricsReport) -> Vec<String> {
    [m.oa, m.visor_uncond, m.visor_cond, m.visor_1, m.visor_2, m.visor_3, m.visor_4, m.t2i_spatial]
        .iter()
        .map(|v| v.to_string())
        .collect()
}

fn persist(dir: &Path, record: &RunRecord, prompts: &[PromptTriplet]) -> Result<()> {
    write_text(&dir.join("config.json"), &pretty(&record.config)?)?;
    write_text(&dir.join("metrics.json"), &record.metrics.to_json()?)?;
    write_text(&dir.join("record.json"), &pretty(record)?)?;

    let path = dir.join("judgments.jsonl");
    let mut w = create(&path)?;
    write_judgments(&record.judgments, &mut w)?;
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    let path = dir.join("prompts.jsonl");
    let mut w = create(&path)?;
    write_jsonl(prompts, &mut w)?;
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    let path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(METRIC_HEADER).map_err(|e| csv_error(&path, e))?;
    w.write_record(metric_fields(&record.metrics)).map_err(|e| csv_error(&path, e))?;
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spatial: bool,
    pub presence: bool,
    pub balance: bool,
    pub record: RunRecord,
}

impl AblationRow {
    pub fn label(&self) -> String {
        format!("s{}p{}b{}", self.spatial as u8, self.presence as u8, self.balance as u8)
    }
}

/// The eight on/off combinations of the loss terms, in `(s, p, b)` binary
/// order starting from all-off.
pub fn ablation_grid(guidance: &GuidanceConfig) -> Vec<(bool, bool, bool, GuidanceConfig)> {
    (0..8u8)
        .map(|bits| {
            let (s, p, b) = (bits & 4 != 0, bits & 2 != 0, bits & 1 != 0);
            let mut g = guidance.clone();
            if !s {
                g.loss.lambda_s = 0.0;
            }
            if !p {
                g.loss.lambda_p = 0.0;
            }
            if !b {
                g.loss.lambda_b = 0.0;
            }
            (s, p, b, g)
        })
        .collect()
}

pub fn run_ablation(config: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let mut rows = Vec::with_capacity(8);
    for (spatial, presence, balance, guidance) in ablation_grid(&config.guidance) {
        let cfg = ExperimentConfig {
            guidance,
            ..config.clone()
        };
        let label = format!("s{}p{}b{}", spatial as u8, presence as u8, balance as u8);
        let row = AblationRow {
            spatial,
            presence,
            balance,
            record: run_bench(&cfg, &opts.with_out(opts.out.as_ref().map(|d| d.join(label))))?,
        };
        rows.push(row);
    }
    if let Some(dir) = &opts.out {
        create_dir(dir)?;
        let path = dir.join("ablation.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let mut header = vec!["spatial", "presence", "balance"];
        header.extend(METRIC_HEADER);
        w.write_record(&header).map_err(|e| csv_error(&path, e))?;
        for r in &rows {
            let mut fields = vec![(r.spatial as u8).to_string(), (r.presence as u8).to_string(), (r.balance as u8).to_string()];
            fields.extend(metric_fields(&r.record.metrics));
            w.write_record(&fields).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(rows)
}

/// Value lists swept by [`run_gridsearch`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub alpha: Vec<f64>,
    pub margin: Vec<f64>,
    pub lambda_s: Vec<f64>,
    pub lambda_p: Vec<f64>,
    pub lambda_b: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            alpha: vec![1.0, 1.5, 2.0],
            margin: vec![0.1, 0.25],
            lambda_s: vec![0.5, 1.0],
            lambda_p: vec![0.5, 1.0],
            lambda_b: vec![0.0, 0.5],
        }
    }
}

pub const MAX_GRID_CELLS: usize = 256;

impl GridSpec {
    pub fn cells(&self) -> usize {
        [&self.alpha, &self.margin, &self.lambda_s, &self.lambda_p, &self.lambda_b]
            .iter()
            .map(|v| v.len())
            .product()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cells();
        if n == 0 {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        if n > MAX_GRID_CELLS {
            return Err(Error::Config(format!("grid has {n} cells, limit is {MAX_GRID_CELLS}")));
        }
        Ok(())
    }

    /// Cells in row-major order, `lambda_b` varying fastest.
    pub fn combinations(&self) -> Vec<[f64; 5]> {
        let mut out = Vec::with_capacity(self.cells());
        for &a in &self.alpha {
            for &m in &self.margin {
                for &s in &self.lambda_s {
                    for &p in &self.lambda_p {
                        for &b in &self.lambda_b {
                            out.push([a, m, s, p, b]);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub margin: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
    pub lambda_b: f64,
    pub metrics: MetricsReport,
}

/// Rows ordered by `visor_uncond`, best first; ties keep grid order.
pub fn summary_order(rows: &[GridRow]) -> Vec<GridRow> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| b.metrics.visor_uncond.total_cmp(&a.metrics.visor_uncond));
    sorted
}

fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["alpha", "margin", "lambda_s", "lambda_p", "lambda_b"];
    header.extend(METRIC_HEADER);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let mut fields: Vec<String> = [r.alpha, r.margin, r.lambda_s, r.lambda_p, r.lambda_b]
            .iter()
            .map(|v| v.to_string())
            .collect();
        fields.extend(metric_fields(&r.metrics));
        w.write_record(&fields).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// One benchmark run per grid cell. Rows come back in grid order;
/// `gridsearch_summary.csv` holds them sorted by [`summary_order`].
pub fn run_gridsearch(config: &ExperimentConfig, grid: &GridSpec, opts: &RunOptions) -> Result<Vec<GridRow>> {
    config.validate()?;
    grid.validate()?;
    let mut rows = Vec::with_capacity(grid.cells());
    for [alpha, margin, lambda_s, lambda_p, lambda_b] in grid.combinations() {
        let mut cfg = config.clone();
        let loss = &mut cfg.guidance.loss;
        loss.alpha = alpha;
        loss.margin = margin;
        loss.lambda_s = lambda_s;
        loss.lambda_p = lambda_p;
        loss.lambda_b = lambda_b;
        let record = run_bench(&cfg, &opts.with_out(None))?;
        rows.push(GridRow {
            alpha,
            margin,
            lambda_s,
            lambda_p,
            lambda_b,
            metrics: record.metrics,
        });
    }
    if let Some(dir) = &opts.out {
        create_dir(dir)?;
        write_grid_csv(&dir.join("gridsearch.csv"), &rows)?;
        write_grid_csv(&dir.join("gridsearch_summary.csv"), &summary_order(&rows))?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradProbe {
    pub t: usize,
    pub prompt: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub probes: Vec<GradProbe>,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_CELLS: usize = 16;

/// Compares the analytic loss gradient with central finite differences on
/// `probes` random noisy states.
pub fn run_gradcheck(config: &ExperimentConfig, probes: usize, seed: u64) -> Result<GradcheckReport> {
    run_gradcheck_scaled(config, probes, seed, 1.0)
}

/// [`run_gradcheck`] with the analytic gradient multiplied by
/// `gradient_scale`; anything but 1 should fail.
pub fn run_gradcheck_scaled(config: &ExperimentConfig, probes: usize, seed: u64, gradient_scale: f64) -> Result<GradcheckReport> {
    config.validate()?;
    let backbone = config.backbone::<f64>()?;
    let schedule = config.schedule.build::<f64>()?;
    let vocab = backbone.vocabulary();
    let ids: Vec<&str> = vocab.entries().iter().map(|e| e.id.as_str()).collect();
    let loss_cfg = &config.guidance.loss;
    let (c, h, w) = backbone.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut results = Vec::with_capacity(probes);
    for _ in 0..probes {
        let picked: Vec<&&str> = ids.choose_multiple(&mut rng, 2).collect();
        let relation = Relation::ALL[rng.random_range(0..Relation::ALL.len())];
        let triplet = PromptTriplet::new(picked[0], relation, picked[1], vocab)?;
        let t = rng.random_range(1..=schedule.steps());
        let pa = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        let pb = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        let x0 = backbone.synthesize_clean(&triplet, pa, pb)?;
        let (z, _) = add_noise(&x0, t, &schedule, rng.random())?;

        let (grad, _) = loss_gradient(&backbone, &z, t, &triplet, &schedule, loss_cfg)?;
        let mut cells: Vec<usize> = (0..c * h * w).collect();
        cells.shuffle(&mut rng);
        let mut worst: f64 = 0.0;
        for &cell in &cells[..GRADCHECK_CELLS.min(cells.len())] {
            let (ch, rc) = (cell / (h * w), cell % (h * w));
            let nudged = |delta: f64| -> Result<f64> {
                let mut zz = z.clone();
                let v = zz.channels_mut()[ch].values_mut();
                v[rc] += delta;
                Ok(guidance_loss(&backbone, &zz, &triplet, loss_cfg)?.total)
            };
            let fd = (nudged(GRADCHECK_STEP)? - nudged(-GRADCHECK_STEP)?) / (2.0 * GRADCHECK_STEP);
            let analytic = gradient_scale * grad.channel(ch).values()[rc];
            worst = worst.max((analytic - fd).abs() / analytic.abs().max(1e-8));
        }
        results.push(GradProbe {
            t,
            prompt: triplet.raw_text.clone(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = results.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        max_rel_error,
        passed: max_rel_error < GRADCHECK_TOLERANCE,
        probes: results,
    })
}

/// Writes a report as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &pretty(value)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::default()
            .with_overrides(&["benchmark.pair_count=1", "benchmark.images_per_prompt=2", "schedule.steps=4"])
            .unwrap()
    }

    #[test]
    fn ablation_order_and_zeroing() {
        let rows = ablation_grid(&GuidanceConfig::default());
        let labels: Vec<_> = rows.iter().map(|(s, p, b, _)| (*s as u8, *p as u8, *b as u8)).collect();
        assert_eq!(labels, vec![(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)]);
        assert!(rows[0].3.loss.is_disabled());
        assert_eq!(rows[7].3.loss, GuidanceConfig::default().loss);
        assert_eq!(rows[4].3.loss.lambda_p, 0.0);
        assert_eq!(rows[4].3.loss.lambda_s, 0.5);
    }

    #[test]
    fn grid_bounds_and_default_cell() {
        let g = GridSpec::default();
        g.validate().unwrap();
        assert!(g.combinations().contains(&[1.5, 0.25, 0.5, 1.0, 0.5]));
        let big = GridSpec {
            alpha: vec![1.0; 5],
            margin: vec![0.1; 4],
            lambda_s: vec![0.5; 4],
            lambda_p: vec![1.0; 4],
            lambda_b: vec![0.5; 1],
        };
        assert_eq!(big.cells(), 320);
        assert!(big.validate().is_err());
        assert!(GridSpec { alpha: vec![], ..GridSpec::default() }.validate().is_err());
    }

    #[test]
    fn summary_sorts_by_uncond() {
        let row = |u: f64, a: f64| GridRow {
            alpha: a,
            margin: 0.25,
            lambda_s: 0.5,
            lambda_p: 1.0,
            lambda_b: 0.5,
            metrics: MetricsReport {
                images_per_prompt: 1,
                oa: 100.0,
                visor_uncond: u,
                visor_cond: u,
                visor_1: u,
                visor_2: u,
                visor_3: u,
                visor_4: u,
                t2i_spatial: 0.0,
                thresholds: None,
                prompts: vec![],
            },
        };
        let rows = vec![row(10.0, 1.0), row(70.0, 2.0), row(40.0, 3.0), row(70.0, 4.0)];
        let alphas: Vec<f64> = summary_order(&rows).iter().map(|r| r.alpha).collect();
        assert_eq!(alphas, vec![2.0, 4.0, 3.0, 1.0]);
    }

    #[test]
    fn bench_counts_and_seed_protocol() {
        let cfg = tiny().with_overrides(&["benchmark.images_per_prompt=4"]).unwrap();
        let rec = run_bench(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(rec.judgments.len(), 16);
        let baseline = cfg.with_overrides(&["guidance.eta=0"]).unwrap();
        let rec0 = run_bench(&baseline, &RunOptions::default()).unwrap();
        for (a, b) in rec.judgments.iter().zip(&rec0.judgments) {
            assert_eq!((a.prompt_index, a.image_index), (b.prompt_index, b.image_index));
        }
        assert_ne!(rec.config_hash, rec0.config_hash);
    }

    #[test]
    fn gradcheck_empty_and_canary() {
        let cfg = tiny();
        let empty = run_gradcheck(&cfg, 0, 1).unwrap();
        assert!(empty.passed && empty.probes.is_empty());
        assert!(run_gradcheck(&cfg, 2, 1).unwrap().passed);
        assert!(!run_gradcheck_scaled(&cfg, 2, 1, 1.01).unwrap().passed);
    }
}
