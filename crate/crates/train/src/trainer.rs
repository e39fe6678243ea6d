use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use abd_core::augmentation::augment_pair;
use abd_core::data::{stack_images, stack_labels, Corpus, LabeledSample, Loader};
use abd_core::displacement::{abd_i, abd_r};
use abd_core::losses::{lambda_schedule, pseudo_labels, semi_pair_graded, sup_graded, total_loss, Graded, LossReport};
use abd_core::metrics::{evaluate_masks, EvalResult};
use abd_core::PatchGrid;
use abd_nn::{make_pair, PairConfig, UNet, UNetTape};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, EvalRecord, MODEL_FILES};
use crate::config::TrainConfig;
use crate::error::{io_err, json_err, Result, TrainError};
use crate::optim::Sgd;

pub const LOG_FILE: &str = "train.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const ABORT_FILE: &str = "abort.json";
pub const LAST_DIR: &str = "last";
pub const BEST_DIR: &str = "best";
const EVAL_BATCH: usize = 8;
const STEP_STREAM: u64 = 2 << 40;

/// Random generator of training step `t`.
///
/// Draw order within a step: one augmentation seed per labeled sample, one
/// per unlabeled sample, then whatever the displacement strategy consumes.
pub fn step_rng(seed: u64, t: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STEP_STREAM | t);
    rng
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogRecord {
    Step { iteration: u64, lr: f64, report: LossReport },
    Eval(EvalRecord),
}

impl LogRecord {
    /// Records up to this many completed steps belong to a checkpoint.
    fn completed(&self) -> u64 {
        match self {
            LogRecord::Step { iteration, .. } => iteration + 1,
            LogRecord::Eval(e) => e.iteration,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: LossReport,
    /// Training-mode forward passes this step ran.
    pub forwards: usize,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub iterations: u64,
    pub best: Option<EvalRecord>,
    pub history: Vec<EvalRecord>,
}

pub struct Trainer {
    config: TrainConfig,
    corpus: Corpus,
    grid: PatchGrid,
    net1: UNet<f32>,
    net2: UNet<f32>,
    sgd: Sgd,
    loader: Loader,
    iteration: u64,
    forward_count: u64,
    history: Vec<EvalRecord>,
    best: Option<EvalRecord>,
}

fn to_f64(x: &Array4<f32>) -> Array4<f64> {
    x.mapv(f64::from)
}

fn to_f32(g: &Array4<f64>, scale: f64) -> Array4<f32> {
    g.mapv(|v| (v * scale) as f32)
}

/// The two networks a configuration describes, for images with `in_channels`.
pub fn pair_config(cfg: &TrainConfig, in_channels: usize, num_classes: usize) -> PairConfig {
    PairConfig::perturbed(in_channels, num_classes, cfg.model.base_width, cfg.model.depth, cfg.init_seed())
}

/// Hard predictions of `net` in inference mode.
pub fn predict(net: &UNet<f32>, images: &[&Array3<f32>]) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let x = stack_images(chunk.iter().copied())?;
        let logits = net.forward_eval(x.view())?;
        let labels = pseudo_labels(to_f64(&logits).view());
        out.extend(labels.outer_iter().map(|y| y.to_owned()));
    }
    Ok(out)
}

/// Evaluates `net` on labeled samples.
pub fn evaluate_net(net: &UNet<f32>, samples: &[LabeledSample], num_classes: usize) -> Result<EvalResult> {
    let images: Vec<&Array3<f32>> = samples.iter().map(|s| &s.image).collect();
    let preds = predict(net, &images)?;
    let gts: Vec<Array2<u8>> = samples.iter().map(|s| s.label.clone()).collect();
    Ok(evaluate_masks(&preds, &gts, num_classes)?)
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let first = corpus
            .labeled
            .first()
            .ok_or_else(|| TrainError::Config("the corpus has no labeled training samples".into()))?;
        if corpus.unlabeled.is_empty() {
            return Err(TrainError::Config("the corpus has no unlabeled training samples".into()));
        }
        let (c_in, h, w) = first.image.dim();
        let grid = PatchGrid::new(h, w, config.k_patches).map_err(|e| TrainError::Config(e.to_string()))?;
        let (net1, net2) = make_pair(&pair_config(&config, c_in, corpus.num_classes))?;
        let loader = Loader::new(corpus.labeled.len(), corpus.unlabeled.len(), config.b_l, config.b_u, config.seed)?;
        let sgd = Sgd::new(config.optim.clone(), config.t_total);
        Ok(Self {
            config,
            corpus,
            grid,
            net1,
            net2,
            sgd,
            loader,
            iteration: 0,
            forward_count: 0,
            history: Vec::new(),
            best: None,
        })
    }

    /// Loads the corpus named by the configuration.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        let corpus = Corpus::load(&config.data_dir, config.labeled_ratio, config.seed)?;
        Self::new(config, corpus)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn nets(&self) -> (&UNet<f32>, &UNet<f32>) {
        (&self.net1, &self.net2)
    }

    pub fn nets_mut(&mut self) -> (&mut UNet<f32>, &mut UNet<f32>) {
        (&mut self.net1, &mut self.net2)
    }

    /// Completed training steps.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Training-mode forward passes run so far.
    pub fn forward_count(&self) -> u64 {
        self.forward_count
    }

    pub fn history(&self) -> &[EvalRecord] {
        &self.history
    }

    fn forward(
        net: &mut UNet<f32>,
        x: &Array4<f32>,
        count: &mut usize,
        (iteration, seed): (u64, u64),
    ) -> Result<(Array4<f32>, UNetTape<f32>)> {
        *count += 1;
        net.forward_train(x.view()).map_err(|e| match e {
            abd_nn::NnError::NonFinite { stage, batch_index } => {
                TrainError::Numeric { iteration, seed, term: format!("{stage} of batch item {batch_index}") }
            }
            other => other.into(),
        })
    }

    fn numeric(&self, term: &str) -> TrainError {
        TrainError::Numeric { iteration: self.iteration, seed: self.config.seed, term: term.to_string() }
    }

    /// Draws the next batch from the loader and runs one step on it.
    pub fn step(&mut self) -> Result<StepOutput> {
        let (l, u) = self.loader.next_batch();
        self.train_step(&l, &u)
    }

    /// One optimisation step of both networks on the given labeled and
    /// unlabeled sample indices.
    pub fn train_step(&mut self, labeled: &[usize], unlabeled: &[usize]) -> Result<StepOutput> {
        let t = self.iteration;
        let cfg = &self.config;
        let ip = cfg.ablation.input_perturbation;
        let mut rng = step_rng(cfg.seed, t);
        let mut forwards = 0;
        let ctx = (t, cfg.seed);

        // labeled weak/strong views sharing one geometric transform
        let (mut xl_w, mut xl_s, mut yl) = (Vec::new(), Vec::new(), Vec::new());
        for &i in labeled {
            let s = self.corpus.labeled.get(i).ok_or(abd_core::CoreError::Bounds { index: i, len: self.corpus.labeled.len() })?;
            let p = augment_pair(s.image.view(), Some(s.label.view()), rng.random(), &cfg.strong, ip)?;
            xl_w.push(p.x_w);
            xl_s.push(p.x_s);
            yl.push(p.y.expect("label was passed"));
        }
        let (mut xu_w, mut xu_s) = (Vec::new(), Vec::new());
        for &i in unlabeled {
            let s =
                self.corpus.unlabeled.get(i).ok_or(abd_core::CoreError::Bounds { index: i, len: self.corpus.unlabeled.len() })?;
            let p = augment_pair(s.image.view(), None, rng.random(), &cfg.strong, ip)?;
            xu_w.push(p.x_w);
            xu_s.push(p.x_s);
        }
        let (xl_w, xl_s, y) = (stack_images(&xl_w)?, stack_images(&xl_s)?, stack_labels(&yl)?);
        let (xu_w, xu_s) = (stack_images(&xu_w)?, stack_images(&xu_s)?);

        // steps 1 and 2: the four base forward passes
        let (l1_lw, tape1_lw) = Self::forward(&mut self.net1, &xl_w, &mut forwards, ctx)?;
        let (l2_ls, tape2_ls) = Self::forward(&mut self.net2, &xl_s, &mut forwards, ctx)?;
        let (l1_uw, tape1_uw) = Self::forward(&mut self.net1, &xu_w, &mut forwards, ctx)?;
        let (l2_us, tape2_us) = Self::forward(&mut self.net2, &xu_s, &mut forwards, ctx)?;
        let sup_aug = sup_graded(to_f64(&l1_lw).view(), to_f64(&l2_ls).view(), y.view(), y.view())?;
        let semi_aug = semi_pair_graded(to_f64(&l1_uw).view(), to_f64(&l2_us).view())?;

        // step 2 continued: reliable displacement of each unlabeled pair
        let mut unlabeled_displaced = None;
        if cfg.ablation.abd_r {
            let (mut sw, mut ws) = (Vec::new(), Vec::new());
            for i in 0..unlabeled.len() {
                let d = abd_r(
                    xu_w.index_axis(Axis(0), i),
                    xu_s.index_axis(Axis(0), i),
                    l1_uw.index_axis(Axis(0), i),
                    l2_us.index_axis(Axis(0), i),
                    &self.grid,
                    cfg.top_n,
                    cfg.strategy,
                    &mut rng,
                )?;
                sw.push(d.x_s_to_w);
                ws.push(d.x_w_to_s);
            }
            unlabeled_displaced = Some((stack_images(&sw)?, stack_images(&ws)?));
        }

        // step 3: inverse displacement of each labeled pair, labels moved along
        let mut labeled_displaced = None;
        if cfg.ablation.abd_i {
            let (mut sw, mut ws, mut ysw, mut yws) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..labeled.len() {
                let d = abd_i(
                    xl_w.index_axis(Axis(0), i),
                    xl_s.index_axis(Axis(0), i),
                    y.index_axis(Axis(0), i),
                    l1_lw.index_axis(Axis(0), i),
                    l2_ls.index_axis(Axis(0), i),
                    &self.grid,
                )?;
                sw.push(d.x_s_to_w);
                ws.push(d.x_w_to_s);
                ysw.push(d.y_s_to_w);
                yws.push(d.y_w_to_s);
            }
            labeled_displaced =
                Some((stack_images(&sw)?, stack_images(&ws)?, stack_labels(&ysw)?, stack_labels(&yws)?));
        }

        // step 4: forward the displaced samples
        let mut sup_abd_parts = None;
        if let Some((x_sw, x_ws, y_sw, y_ws)) = &labeled_displaced {
            let (l1, tape1) = Self::forward(&mut self.net1, x_sw, &mut forwards, ctx)?;
            let (l2, tape2) = Self::forward(&mut self.net2, x_ws, &mut forwards, ctx)?;
            let g = sup_graded(to_f64(&l1).view(), to_f64(&l2).view(), y_sw.view(), y_ws.view())?;
            sup_abd_parts = Some((g, tape1, tape2));
        }
        let mut semi_abd_parts = Vec::new();
        if let Some((x_sw, x_ws)) = &unlabeled_displaced {
            for x in [x_sw, x_ws] {
                let (l1, tape1) = Self::forward(&mut self.net1, x, &mut forwards, ctx)?;
                let (l2, tape2) = Self::forward(&mut self.net2, x, &mut forwards, ctx)?;
                let g = semi_pair_graded(to_f64(&l1).view(), to_f64(&l2).view())?;
                semi_abd_parts.push((g, tape1, tape2));
            }
        }

        let lambda = lambda_schedule(t, cfg.t_total);
        let sup_abd = sup_abd_parts.as_ref().map_or(0.0, |(g, _, _)| g.value);
        let semi_abd = semi_abd_parts.iter().fold(0.0, |acc, (g, _, _)| acc + g.value);
        let report = total_loss(sup_aug.value, sup_abd, semi_aug.value, semi_abd, lambda);
        if let Some(term) = report.first_non_finite() {
            return Err(self.numeric(term));
        }

        // every network receives the gradient of the shared total through
        // the forward passes it took part in
        self.net1.zero_grad();
        self.net2.zero_grad();
        let mut backprop = |g: &Graded, scale: f64, t1: &UNetTape<f32>, t2: &UNetTape<f32>| -> Result<()> {
            self.net1.backward(t1, to_f32(&g.grads[0], scale).view())?;
            self.net2.backward(t2, to_f32(&g.grads[1], scale).view())?;
            Ok(())
        };
        backprop(&sup_aug, 1.0, &tape1_lw, &tape2_ls)?;
        backprop(&semi_aug, lambda, &tape1_uw, &tape2_us)?;
        if let Some((g, t1, t2)) = &sup_abd_parts {
            backprop(g, 1.0, t1, t2)?;
        }
        for (g, t1, t2) in &semi_abd_parts {
            backprop(g, lambda, t1, t2)?;
        }
        for net in [&self.net1, &self.net2] {
            if net.params().iter().any(|p| p.grad.iter().any(|v| !v.is_finite())) {
                return Err(self.numeric("gradient"));
            }
        }
        self.sgd.step(&mut self.net1, t);
        self.sgd.step(&mut self.net2, t);
        self.iteration += 1;
        self.forward_count += forwards as u64;
        Ok(StepOutput { report, forwards })
    }

    /// Evaluates the first network on the validation split.
    pub fn evaluate_val(&self) -> Result<EvalRecord> {
        let result = evaluate_net(&self.net1, &self.corpus.val, self.corpus.num_classes)?;
        Ok(EvalRecord { iteration: self.iteration, mean_fg_dsc: result.mean_foreground.dsc, result })
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            iteration: self.iteration,
            config_hash: self.config.hash(),
            config: self.config.render(),
            metric_history: self.history.clone(),
            best: self.best.clone(),
            loader: self.loader.clone(),
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, [&self.net1, &self.net2], &self.meta())
    }

    /// Restores training state from a checkpoint written with the same configuration.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let meta = checkpoint::read_meta(dir)?;
        if meta.config_hash != self.config.hash() {
            return Err(TrainError::Checkpoint {
                path: dir.to_path_buf(),
                reason: "written with a different configuration".into(),
            });
        }
        checkpoint::read_weights(&dir.join(MODEL_FILES[0]), &mut self.net1)?;
        checkpoint::read_weights(&dir.join(MODEL_FILES[1]), &mut self.net2)?;
        self.iteration = meta.iteration;
        self.history = meta.metric_history;
        self.best = meta.best;
        self.loader = meta.loader;
        Ok(())
    }

    fn record_eval(&mut self, log: &mut fs::File, out: &Path) -> Result<()> {
        let rec = self.evaluate_val()?;
        log::info!("iteration {}: val mean foreground dsc {:.4}", rec.iteration, rec.mean_fg_dsc);
        write_record(log, out, &LogRecord::Eval(rec.clone()))?;
        let improved = self.best.as_ref().is_none_or(|b| rec.mean_fg_dsc > b.mean_fg_dsc);
        self.history.push(rec.clone());
        if improved {
            self.best = Some(rec);
            self.save_checkpoint(&out.join(BEST_DIR))?;
        }
        Ok(())
    }

    /// Trains to `t_total`, evaluating every `eval_interval` steps, keeping
    /// the best and last checkpoints under `out_dir`. With `resume`, picks up
    /// from `out_dir/last` when it exists; the log is trimmed to match.
    pub fn fit(&mut self, resume: bool) -> Result<FitSummary> {
        self.fit_until(resume, self.config.t_total)
    }

    /// As [`Trainer::fit`], but returns once `stop` steps are complete.
    pub fn fit_until(&mut self, resume: bool, stop: u64) -> Result<FitSummary> {
        let out = self.config.out_dir.clone();
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let log_path = out.join(LOG_FILE);
        let last = out.join(LAST_DIR);
        let resumed = resume && last.join(checkpoint::META_FILE).exists();
        if resumed {
            self.load_checkpoint(&last)?;
            trim_log(&log_path, self.iteration)?;
            log::info!("resuming from iteration {}", self.iteration);
        } else {
            let _ = fs::remove_file(&log_path);
        }
        let cfg_path = out.join(CONFIG_FILE);
        fs::write(&cfg_path, self.config.render()).map_err(io_err(&cfg_path))?;
        let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;

        if self.iteration == 0 {
            self.record_eval(&mut log, &out)?;
        }
        let started = Instant::now();
        while self.iteration < self.config.t_total.min(stop) {
            let t = self.iteration;
            let lr = self.sgd.lr(t);
            let step = match self.step() {
                Ok(s) => s,
                Err(e @ TrainError::Numeric { .. }) => {
                    self.dump_abort(&out, &e)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            write_record(&mut log, &out, &LogRecord::Step { iteration: t, lr, report: step.report })?;
            if self.iteration % 50 == 0 {
                log::debug!(
                    "iteration {} total {:.4} ({:.1} s elapsed)",
                    self.iteration,
                    step.report.total,
                    started.elapsed().as_secs_f64()
                );
            }
            let done = self.iteration == self.config.t_total;
            if self.iteration % self.config.eval_interval == 0 || done {
                self.record_eval(&mut log, &out)?;
                self.save_checkpoint(&last)?;
            }
        }
        Ok(FitSummary { iterations: self.iteration, best: self.best.clone(), history: self.history.clone() })
    }

    fn dump_abort(&self, out: &Path, err: &TrainError) -> Result<()> {
        let TrainError::Numeric { iteration, seed, term } = err else { return Ok(()) };
        let path = out.join(ABORT_FILE);
        let body = serde_json::json!({ "iteration": iteration, "seed": seed, "term": term, "error": err.to_string() });
        fs::write(&path, serde_json::to_string_pretty(&body).map_err(json_err(&path))?).map_err(io_err(&path))
    }
}

fn write_record(log: &mut fs::File, out: &Path, rec: &LogRecord) -> Result<()> {
    let path = out.join(LOG_FILE);
    let mut line = serde_json::to_string(rec).map_err(json_err(&path))?;
    line.push('\n');
    log.write_all(line.as_bytes()).map_err(io_err(&path))
}

/// Drops log records written after the checkpoint at `completed` steps.
fn trim_log(path: &Path, completed: u64) -> Result<()> {
    let Ok(f) = fs::File::open(path) else { return Ok(()) };
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        let rec: LogRecord = serde_json::from_str(&line).map_err(json_err(path))?;
        if rec.completed() <= completed {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(io_err(path))
}

/// Reads every record of a training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(io_err(path))?;
            serde_json::from_str(&l).map_err(json_err(path))
        })
        .collect()
}

/// Evaluates the first network of the checkpoint in `dir` on `split`.
/// `data_dir` replaces the corpus location stored in the checkpoint.
pub fn evaluate_checkpoint(dir: &Path, split: abd_core::data::Split, data_dir: Option<PathBuf>) -> Result<EvalResult> {
    let meta = checkpoint::read_meta(dir)?;
    let mut cfg = TrainConfig::from_text(&meta.config)?;
    if let Some(d) = data_dir {
        cfg.data_dir = d;
    }
    let corpus = Corpus::load(&cfg.data_dir, cfg.labeled_ratio, cfg.seed)?;
    let samples = corpus.split(split)?;
    let first = samples.first().ok_or_else(|| TrainError::Config(format!("split '{split}' is empty")))?;
    let mut net = make_pair::<f32>(&pair_config(&cfg, first.image.dim().0, corpus.num_classes))?.0;
    checkpoint::read_weights(&dir.join(MODEL_FILES[0]), &mut net)?;
    evaluate_net(&net, samples, corpus.num_classes)
}
