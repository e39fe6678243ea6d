//! Acceptance checks, one line per criterion. Runs as a plain binary
//! (`harness = false`) so every line is printed by `cargo test`.

use std::path::Path;
use std::time::Instant;

use abd_core::data::{synth_generate, Corpus, SynthConfig};
use abd_core::displacement::{abd_i, abd_r, Strategy};
use abd_core::losses::{
    lambda_schedule, semi_abd_loss, semi_aug_loss, semi_pair_graded, sup_abd_loss, sup_aug_loss, total_loss,
};
use abd_core::metrics::{asd, dsc, hd95, jaccard};
use abd_core::PatchGrid;
use abd_nn::{ModelConfig, UNet, Variant};
use abd_train::config::ModelSettings;
use abd_train::trainer::{read_log, LOG_FILE};
use abd_train::{Ablation, LogRecord, TrainConfig, Trainer};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- oracles

fn softmax_pixel(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Patch mean logits and mean max-probability, by direct pixel loops.
fn naive_summary(logits: &Array3<f32>, side: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (c, h, w) = logits.dim();
    let (ph, pw) = (h / side, w / side);
    let mut z = vec![vec![0.0; c]; side * side];
    let mut a = vec![0.0; side * side];
    for j in 0..side * side {
        let (r0, c0) = ((j / side) * ph, (j % side) * pw);
        for r in r0..r0 + ph {
            for col in c0..c0 + pw {
                let px: Vec<f64> = (0..c).map(|k| logits[[k, r, col]] as f64).collect();
                for k in 0..c {
                    z[j][k] += px[k];
                }
                a[j] += softmax_pixel(&px).into_iter().fold(f64::NEG_INFINITY, f64::max);
            }
        }
        let area = (ph * pw) as f64;
        z[j].iter_mut().for_each(|v| *v /= area);
        a[j] /= area;
    }
    (z, a)
}

fn naive_kl(za: &[f64], zb: &[f64]) -> f64 {
    let (p, q) = (softmax_pixel(za), softmax_pixel(zb));
    p.iter().zip(&q).map(|(pi, qi)| if *pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 }).sum()
}

fn argmin_first(a: &[f64]) -> usize {
    (0..a.len()).fold(0, |best, j| if a[j] < a[best] { j } else { best })
}

fn argmax_first(a: &[f64]) -> usize {
    (0..a.len()).fold(0, |best, j| if a[j] > a[best] { j } else { best })
}

/// The `n` most confident indices, ties to the lower index, by repeated scans.
fn top_n(a: &[f64], n: usize) -> Vec<usize> {
    let mut taken = vec![false; a.len()];
    let mut out = Vec::new();
    for _ in 0..n {
        let mut best = None;
        for j in 0..a.len() {
            if !taken[j] && best.is_none_or(|b: usize| a[j] > a[b]) {
                best = Some(j);
            }
        }
        let b = best.expect("n <= K");
        taken[b] = true;
        out.push(b);
    }
    out
}

fn copy_window<T: Copy>(dst: &mut Array3<T>, src: &Array3<T>, side: usize, target: usize, source: usize) {
    let (ch, h, w) = dst.dim();
    let (ph, pw) = (h / side, w / side);
    let (tr, tc) = ((target / side) * ph, (target % side) * pw);
    let (sr, sc) = ((source / side) * ph, (source % side) * pw);
    for k in 0..ch {
        for dr in 0..ph {
            for dc in 0..pw {
                dst[[k, tr + dr, tc + dc]] = src[[k, sr + dr, sc + dc]];
            }
        }
    }
}

// ------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut count = 0;
    for inst in 0..1000 {
        let c = [2, 4][inst % 2];
        let k = [4, 16][(inst / 2) % 2];
        let n = [1, 2, 4][(inst / 4) % 3];
        let side = (k as f64).sqrt() as usize;
        let patch = rng.random_range(1..=4);
        let (h, w) = (side * patch * rng.random_range(1..=2), side * patch * rng.random_range(1..=2));
        let ch = rng.random_range(1..=2);
        let grid = PatchGrid::new(h, w, k).map_err(|e| e.to_string())?;
        let scale = rng.random_range(0.5..4.0);
        let mut logit = |_: (usize, usize, usize)| (rng.sample::<f64, _>(StandardNormal) * scale) as f32;
        let lw = Array3::from_shape_fn((c, h, w), &mut logit);
        let ls = Array3::from_shape_fn((c, h, w), &mut logit);
        let x_w = Array3::from_shape_fn((ch, h, w), |_| rng.random::<f32>());
        let x_s = Array3::from_shape_fn((ch, h, w), |_| rng.random::<f32>());
        let y = Array2::from_shape_fn((h, w), |_| rng.random_range(0..c as u8));

        let (zw, aw) = naive_summary(&lw, side);
        let (zs, as_) = naive_summary(&ls, side);
        let (w_min, s_min) = (argmin_first(&aw), argmin_first(&as_));
        let pick = |cands: Vec<usize>, zsrc: &[Vec<f64>], target: &[f64]| {
            let kls: Vec<f64> = cands.iter().map(|&j| naive_kl(&zsrc[j], target)).collect();
            cands[argmin_first(&kls)]
        };
        let from_s = pick(top_n(&as_, n), &zs, &zw[w_min]);
        let from_w = pick(top_n(&aw, n), &zw, &zs[s_min]);
        let mut want_sw = x_w.clone();
        copy_window(&mut want_sw, &x_s, side, w_min, from_s);
        let mut want_ws = x_s.clone();
        copy_window(&mut want_ws, &x_w, side, s_min, from_w);

        let got = abd_r(x_w.view(), x_s.view(), lw.view(), ls.view(), &grid, n, Strategy::Reliable, &mut rng)
            .map_err(|e| e.to_string())?;
        check(got.plans[0].target_index == w_min && got.plans[0].source_index == from_s, || {
            format!("instance {inst}: s->w plan {:?} vs ({w_min}, {from_s})", got.plans[0])
        })?;
        check(got.plans[1].target_index == s_min && got.plans[1].source_index == from_w, || {
            format!("instance {inst}: w->s plan {:?} vs ({s_min}, {from_w})", got.plans[1])
        })?;
        check(got.x_s_to_w == want_sw && got.x_w_to_s == want_ws, || format!("instance {inst}: abd_r images differ"))?;

        let (w_max, s_max) = (argmax_first(&aw), argmax_first(&as_));
        let mut want_i_sw = x_w.clone();
        copy_window(&mut want_i_sw, &x_s, side, w_max, s_min);
        let mut want_i_ws = x_s.clone();
        copy_window(&mut want_i_ws, &x_w, side, s_max, w_min);
        let y3 = y.clone().insert_axis(ndarray::Axis(0));
        let mut want_y_sw = y3.clone();
        copy_window(&mut want_y_sw, &y3, side, w_max, s_min);
        let mut want_y_ws = y3.clone();
        copy_window(&mut want_y_ws, &y3, side, s_max, w_min);
        let got = abd_i(x_w.view(), x_s.view(), y.view(), lw.view(), ls.view(), &grid).map_err(|e| e.to_string())?;
        check(
            got.x_s_to_w == want_i_sw
                && got.x_w_to_s == want_i_ws
                && got.y_s_to_w == want_y_sw.index_axis(ndarray::Axis(0), 0)
                && got.y_w_to_s == want_y_ws.index_axis(ndarray::Axis(0), 0),
            || format!("instance {inst}: abd_i output differs from the window-copy oracle"),
        )?;
        count += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{count} instances bit-identical to the pixel-loop oracle in {secs:.2} s"))
}

// ------------------------------------------------------------- criterion 2

fn naive_ce(l: &Array4<f64>, y: &Array3<u8>) -> f64 {
    let (b, c, h, w) = l.dim();
    let mut total = 0.0;
    for i in 0..b {
        for r in 0..h {
            for col in 0..w {
                let px: Vec<f64> = (0..c).map(|k| l[[i, k, r, col]]).collect();
                total -= softmax_pixel(&px)[y[[i, r, col]] as usize].ln();
            }
        }
    }
    total / (b * h * w) as f64
}

fn naive_dice(l: &Array4<f64>, y: &Array3<u8>) -> f64 {
    let (b, c, h, w) = l.dim();
    let mut score = 0.0;
    for k in 0..c {
        let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for i in 0..b {
            for r in 0..h {
                for col in 0..w {
                    let px: Vec<f64> = (0..c).map(|q| l[[i, q, r, col]]).collect();
                    let p = softmax_pixel(&px)[k];
                    let t = if y[[i, r, col]] as usize == k { 1.0 } else { 0.0 };
                    inter += p * t;
                    ps += p;
                    ts += t;
                }
            }
        }
        score += (2.0 * inter + 1e-5) / (ps + ts + 1e-5);
    }
    1.0 - score / c as f64
}

fn naive_argmax(l: &Array4<f64>) -> Array3<u8> {
    let (b, c, h, w) = l.dim();
    Array3::from_shape_fn((b, h, w), |(i, r, col)| {
        let px: Vec<f64> = (0..c).map(|k| l[[i, k, r, col]]).collect();
        argmax_first(&px) as u8
    })
}

fn naive_cross(l1: &Array4<f64>, l2: &Array4<f64>) -> f64 {
    naive_dice(l1, &naive_argmax(l2)) + naive_dice(l2, &naive_argmax(l1))
}

fn smoke_config(out: &Path) -> TrainConfig {
    TrainConfig {
        out_dir: out.to_path_buf(),
        b_l: 2,
        b_u: 2,
        eval_interval: 50,
        model: ModelSettings { base_width: 2, depth: 1, init_seed: None },
        ..TrainConfig::default()
    }
}

fn small_corpus(dir: &Path, seed: u64) -> Result<Corpus, String> {
    let cfg = SynthConfig { n_train: 20, n_val: 4, n_test: 4, size: 32, num_classes: 4, seed };
    synth_generate(&cfg, dir).map_err(|e| e.to_string())?;
    Corpus::load(dir, 0.2, seed).map_err(|e| e.to_string())
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (b, c, h, w) = (rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(1..=5), rng.random_range(1..=5));
        let mut logits = || Array4::from_shape_fn((b, c, h, w), |_| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let (l1, l2, l3, l4) = (logits(), logits(), logits(), logits());
        let mut labels = || Array3::from_shape_fn((b, h, w), |_| rng.random_range(0..c as u8));
        let (y, y1, y2) = (labels(), labels(), labels());
        let e = |a: f64, b: f64| (a - b).abs();
        let sup = |a: &Array4<f64>, b: &Array4<f64>, ya: &Array3<u8>, yb: &Array3<u8>| {
            0.5 * (naive_ce(a, ya) + naive_dice(a, ya)) + 0.5 * (naive_ce(b, yb) + naive_dice(b, yb))
        };
        let err = |m: String| m;
        let got_aug = sup_aug_loss(l1.view(), l2.view(), y.view()).map_err(|x| err(x.to_string()))?;
        let got_abd = sup_abd_loss(l1.view(), l2.view(), y1.view(), y2.view()).map_err(|x| err(x.to_string()))?;
        let got_semi = semi_aug_loss(l1.view(), l2.view()).map_err(|x| err(x.to_string()))?;
        let got_semi_abd = semi_abd_loss(l1.view(), l2.view(), l3.view(), l4.view()).map_err(|x| err(x.to_string()))?;
        let graded = semi_pair_graded(l3.view(), l4.view()).map_err(|x| err(x.to_string()))?;
        let diffs = [
            e(got_aug, sup(&l1, &l2, &y, &y)),
            e(got_abd, sup(&l1, &l2, &y1, &y2)),
            e(got_semi, naive_cross(&l1, &l2)),
            e(got_semi_abd, naive_cross(&l1, &l2) + naive_cross(&l3, &l4)),
            e(graded.value, naive_cross(&l3, &l4)),
        ];
        let lambda = rng.random_range(0.0..0.1);
        let rep = total_loss(got_aug, got_abd, got_semi, got_semi_abd, lambda);
        let total_err = e(rep.total, (got_aug + got_abd) + lambda * (got_semi + got_semi_abd));
        let m = diffs.iter().copied().fold(total_err, f64::max);
        check(m <= 1e-6, || format!("case {case}: deviation {m:e} ({diffs:?})"))?;
        worst = worst.max(m);
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = small_corpus(&dir.path().join("data"), 3)?;
    let cfg = TrainConfig { t_total: 200, ..smoke_config(&dir.path().join("run")) };
    let mut trainer = Trainer::new(cfg.clone(), corpus).map_err(|e| e.to_string())?;
    trainer.fit(false).map_err(|e| e.to_string())?;
    let log = read_log(&dir.path().join("run").join(LOG_FILE)).map_err(|e| e.to_string())?;
    let mut steps = 0;
    for rec in log {
        if let LogRecord::Step { iteration, report: r, .. } = rec {
            let recomputed = (r.sup_aug + r.sup_abd) + r.lambda * (r.semi_aug + r.semi_abd);
            check(r.total == recomputed, || format!("step {iteration}: total {} vs {recomputed}", r.total))?;
            check(r.lambda == lambda_schedule(iteration, cfg.t_total), || format!("step {iteration}: lambda"))?;
            check([r.sup_aug, r.sup_abd, r.semi_aug, r.semi_abd].iter().all(|v| v.is_finite() && *v >= 0.0), || {
                format!("step {iteration}: negative or non-finite term {r:?}")
            })?;
            steps += 1;
        }
    }
    check(steps == 200, || format!("{steps} logged steps"))?;
    Ok(format!("100 random cases within {worst:.1e} of the component oracles; identity exact on {steps} logged steps"))
}

// ------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let t_total = 1000;
    // rounded values carry five significant digits
    let cases = [(0, 0.1 * (-5.0f64).exp(), 6.7379e-4, 5e-9), (500, 0.1 * (-1.25f64).exp(), 2.8650e-2, 5e-7), (1000, 0.1, 0.1, 0.0)];
    for (t, exact, rounded, half_ulp) in cases {
        let got = lambda_schedule(t, t_total);
        check((got - exact).abs() <= 1e-9, || format!("lambda({t}) = {got}, expected {exact}"))?;
        check((got - rounded).abs() <= half_ulp, || format!("lambda({t}) = {got} does not round to {rounded}"))?;
    }
    check(lambda_schedule(t_total, t_total) == 0.1, || "lambda(t_total) is not exactly 0.1".into())?;
    let grid: Vec<f64> = (0..=t_total).map(|t| lambda_schedule(t, t_total)).collect();
    check(grid.windows(2).all(|p| p[0] <= p[1]), || "not monotone".into())?;
    Ok(format!("lambda(0) = {:.4e}, lambda(T/2) = {:.4e}, lambda(T) = {}; monotone on {} points", grid[0], grid[500], grid[1000], grid.len()))
}

// ------------------------------------------------------------- criterion 4

fn border(m: &Array2<bool>) -> Vec<(i64, i64)> {
    let (h, w) = m.dim();
    let on = |r: i64, c: i64| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && m[[r as usize, c as usize]];
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if on(r, c) && !(on(r - 1, c) && on(r + 1, c) && on(r, c - 1) && on(r, c + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

fn brute_surface(a: &Array2<bool>, b: &Array2<bool>) -> Option<Vec<f64>> {
    let (ba, bb) = (border(a), border(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let near = |p: &(i64, i64), set: &[(i64, i64)]| {
        set.iter().map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt()).fold(f64::INFINITY, f64::min)
    };
    Some(ba.iter().map(|p| near(p, &bb)).chain(bb.iter().map(|p| near(p, &ba))).collect())
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a = Array2::from_shape_fn((h, w), |_| rng.random_bool(pa));
        let b = Array2::from_shape_fn((h, w), |_| rng.random_bool(pb));
        let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b.iter()) {
            inter += (*x && *y) as u8 as f64;
            na += *x as u8 as f64;
            nb += *y as u8 as f64;
        }
        let (want_d, want_j) = if na + nb == 0.0 { (1.0, 1.0) } else { (2.0 * inter / (na + nb), inter / (na + nb - inter)) };
        let m = |e: abd_core::CoreError| e.to_string();
        let (d, j) = (dsc(a.view(), b.view()).map_err(m)?, jaccard(a.view(), b.view()).map_err(m)?);
        let (h95, mean) = (hd95(a.view(), b.view()).map_err(m)?, asd(a.view(), b.view()).map_err(m)?);
        let mut errs = vec![(d - want_d).abs(), (j - want_j).abs()];
        match brute_surface(&a, &b) {
            None => check(h95.is_none() && mean.is_none(), || format!("trial {trial}: distances defined for an empty mask"))?,
            Some(mut v) => {
                let avg = v.iter().sum::<f64>() / v.len() as f64;
                v.sort_by(f64::total_cmp);
                let rank = 0.95 * (v.len() - 1) as f64;
                let (lo, frac) = (rank.floor() as usize, rank - rank.floor());
                let p95 = v[lo] + frac * (v[(lo + 1).min(v.len() - 1)] - v[lo]);
                let (h95, mean) = (h95.ok_or("hd95 missing")?, mean.ok_or("asd missing")?);
                errs.push((h95 - p95).abs());
                errs.push((mean - avg).abs());
            }
        }
        let e = errs.iter().copied().fold(0.0, f64::max);
        check(e <= 1e-9, || format!("trial {trial}: deviation {e:e}"))?;
        check(d >= j, || format!("trial {trial}: dsc {d} < jaccard {j}"))?;
        check(d == dsc(b.view(), a.view()).map_err(m)? && j == jaccard(b.view(), a.view()).map_err(m)?, || {
            format!("trial {trial}: overlap not symmetric")
        })?;
        let (h2, m2) = (hd95(b.view(), a.view()).map_err(m)?, asd(b.view(), a.view()).map_err(m)?);
        let same = |x: Option<f64>, y: Option<f64>| match (x, y) {
            (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
            (None, None) => true,
            _ => false,
        };
        check(same(h95, h2) && same(mean, m2), || format!("trial {trial}: distances not symmetric"))?;
        worst = worst.max(e);
    }
    Ok(format!("200 random mask pairs, worst deviation {worst:.1e}; symmetry and dsc >= jaccard hold"))
}

// ------------------------------------------------------------- criterion 5

struct Run {
    seed: u64,
    full: bool,
    best: f64,
    untrained: f64,
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    synth_generate(&SynthConfig { n_train: 200, n_val: 20, n_test: 40, size: 64, num_classes: 4, seed: 0 }, &data)
        .map_err(|e| e.to_string())?;
    let jobs: Vec<(u64, bool)> = (0..3).flat_map(|s| [(s, true), (s, false)]).collect();
    let runs: Vec<Run> = jobs
        .par_iter()
        .map(|&(seed, full)| -> Result<Run, String> {
            let cfg = TrainConfig {
                seed,
                data_dir: data.clone(),
                out_dir: dir.path().join(format!("run_{seed}_{full}")),
                labeled_ratio: 0.1,
                b_l: 2,
                b_u: 2,
                t_total: 2000,
                eval_interval: 200,
                ablation: if full { Ablation::FULL } else { Ablation::BASE },
                model: ModelSettings { base_width: 4, depth: 2, init_seed: None },
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::from_config(cfg).map_err(|e| e.to_string())?;
            let summary = trainer.fit(false).map_err(|e| e.to_string())?;
            let best = summary.best.ok_or("no evaluation ran")?.mean_fg_dsc;
            Ok(Run { seed, full, best, untrained: summary.history[0].mean_fg_dsc })
        })
        .collect::<Result<_, _>>()?;
    let median = |full: bool| {
        let mut v: Vec<f64> = runs.iter().filter(|r| r.full == full).map(|r| r.best).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (full, base) = (median(true), median(false));
    let per: Vec<String> =
        runs.iter().map(|r| format!("{}{}={:.4}", if r.full { "full" } else { "base" }, r.seed, r.best)).collect();
    let gain = runs.iter().map(|r| r.best - r.untrained).fold(f64::INFINITY, f64::min);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "median best val fg dsc full {full:.4} vs base {base:.4} [{}]; smallest gain over untrained {gain:.3}; {secs:.0} s",
        per.join(" ")
    );
    check(full >= base - 0.005, || detail.clone())?;
    check(gain >= 0.3, || format!("a trained model gained less than 0.3 over its untrained start: {detail}"))?;
    Ok(detail)
}

// ------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = small_corpus(&dir.path().join("data"), 6)?;
    for ablation in [Ablation::BASE, Ablation { input_perturbation: true, abd_r: false, abd_i: false }] {
        let cfg = TrainConfig { t_total: 5, ablation, ..smoke_config(&dir.path().join("run")) };
        let mut tr = Trainer::new(cfg, corpus.clone()).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let out = tr.step().map_err(|e| e.to_string())?;
            check(out.report.sup_abd == 0.0 && out.report.semi_abd == 0.0, || format!("{ablation:?}: {:?}", out.report))?;
            check(out.forwards == 4, || format!("{ablation:?}: {} forwards", out.forwards))?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let strategies = [Strategy::Reliable, Strategy::Same, Strategy::SameReliable];
    let mut cases = 0;
    for trial in 0..200 {
        let (c, k) = ([2, 4][trial % 2], [4, 16][(trial / 2) % 2]);
        let side = (k as f64).sqrt() as usize;
        let h = side * rng.random_range(1..=4);
        let grid = PatchGrid::new(h, h, k).map_err(|e| e.to_string())?;
        let x = Array3::from_shape_fn((1, h, h), |_| rng.random::<f32>());
        let y = Array2::from_shape_fn((h, h), |_| rng.random_range(0..c as u8));
        // every patch ties: the same logit vector at every pixel
        let v: Vec<f32> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let logits = Array3::from_shape_fn((c, h, h), |(q, _, _)| v[q]);
        for s in strategies {
            let n = rng.random_range(1..=k);
            let d = abd_r(x.view(), x.view(), logits.view(), logits.view(), &grid, n, s, &mut rng).map_err(|e| e.to_string())?;
            check(d.x_s_to_w == x && d.x_w_to_s == x, || format!("trial {trial}: {s} moved content"))?;
            cases += 1;
        }
        let d = abd_i(x.view(), x.view(), y.view(), logits.view(), logits.view(), &grid).map_err(|e| e.to_string())?;
        check(d.x_s_to_w == x && d.x_w_to_s == x && d.y_s_to_w == y && d.y_w_to_s == y, || {
            format!("trial {trial}: inverse displacement moved content")
        })?;
        cases += 1;

        // uniform content: any strategy, any logits
        let flat = Array3::from_elem((1, h, h), 0.25f32);
        let noisy = Array3::from_shape_fn((c, h, h), |_| rng.random_range(-3.0..3.0f32));
        let d = abd_r(flat.view(), flat.view(), noisy.view(), noisy.view(), &grid, 1, Strategy::Random, &mut rng)
            .map_err(|e| e.to_string())?;
        check(d.x_s_to_w == flat && d.x_w_to_s == flat, || format!("trial {trial}: uniform content changed"))?;
        cases += 1;
    }
    Ok(format!("ablated runs report zero displacement terms with 4 forwards; {cases} tied or uniform displacements are no-ops"))
}

// ------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = small_corpus(&dir.path().join("data"), 7)?;
    let mut logs = Vec::new();
    for (run, strategy) in [("a", Strategy::Reliable), ("b", Strategy::Reliable), ("c", Strategy::SameReliable), ("d", Strategy::SameReliable)] {
        let out = dir.path().join(run);
        let cfg = TrainConfig { t_total: 30, eval_interval: 10, strategy, ..smoke_config(&out) };
        Trainer::new(cfg, corpus.clone()).map_err(|e| e.to_string())?.fit(false).map_err(|e| e.to_string())?;
        let log = std::fs::read(out.join(LOG_FILE)).map_err(|e| e.to_string())?;
        let weights = std::fs::read(out.join("last").join("model_2.bin")).map_err(|e| e.to_string())?;
        logs.push((log, weights));
    }
    check(logs[0] == logs[1], || "reliable: logs or weights differ between identical runs".into())?;
    check(logs[2] == logs[3], || "same+reliable: logs or weights differ between identical runs".into())?;
    check(logs[0].0 != logs[2].0, || "different strategies gave the same log".into())?;
    Ok(format!("identical {}-byte logs and weights across repeated runs (two strategies)", logs[0].0.len()))
}

// ------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Array4::from_shape_fn((2, 1, 8, 8), |_| rng.random_range(-1.0..1.0));
    let mut worst: f64 = 0.0;
    for depth in [1, 2, 3] {
        let cfg = ModelConfig { in_channels: 1, num_classes: 2, base_width: 4, depth, init_seed: 3, variant: Variant::A };
        let mut net = UNet::<f64>::new(cfg).map_err(|e| e.to_string())?;
        let mean_logits = |net: &UNet<f64>| net.clone().forward_train(x.view()).map(|(l, _)| l.mean().unwrap_or(0.0));
        let mut work = net.clone();
        let (logits, tape) = work.forward_train(x.view()).map_err(|e| e.to_string())?;
        work.zero_grad();
        let d = Array4::from_elem(logits.dim(), 1.0 / logits.len() as f64);
        work.backward(&tape, d.view()).map_err(|e| e.to_string())?;
        let analytic = work.first_conv().weight.grad.to_vec();
        let eps = 1e-5;
        let mut numeric = Vec::new();
        for i in 0..analytic.len() {
            let orig = net.first_conv().weight.value[i];
            net.first_conv_mut().weight.value[i] = orig + eps;
            let up = mean_logits(&net).map_err(|e| e.to_string())?;
            net.first_conv_mut().weight.value[i] = orig - eps;
            let down = mean_logits(&net).map_err(|e| e.to_string())?;
            net.first_conv_mut().weight.value[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        let rel = diff / norm.max(1e-12);
        check(rel < 1e-3, || format!("depth {depth}: relative error {rel:e}"))?;
        worst = worst.max(rel);
    }

    let mut sg_worst: f64 = 0.0;
    for _ in 0..100 {
        let (b, c, h, w) = (rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(2..=6), rng.random_range(2..=6));
        let l1 = Array4::from_shape_fn((b, c, h, w), |_| rng.sample::<f64, _>(StandardNormal));
        let l2 = Array4::from_shape_fn((b, c, h, w), |_| rng.sample::<f64, _>(StandardNormal));
        let (scale, shift) = (rng.random_range(0.2..5.0), rng.random_range(-3.0..3.0));
        // strictly increasing per-pixel map: argmax is preserved
        let l2p = l2.mapv(|v| (v * scale + shift).powi(3));
        let a = semi_pair_graded(l1.view(), l2.view()).map_err(|e| e.to_string())?;
        let p = semi_pair_graded(l1.view(), l2p.view()).map_err(|e| e.to_string())?;
        let term = |l: &Array4<f64>| naive_dice(&l1, &naive_argmax(l));
        let dv = (term(&l2) - term(&l2p)).abs();
        let dg = (&a.grads[0] - &p.grads[0]).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        check(dv < 1e-6 && dg < 1e-6, || format!("pseudo-label perturbation moved the loss by {dv:e}, gradient by {dg:e}"))?;
        sg_worst = sg_worst.max(dv.max(dg));
    }
    Ok(format!("first-layer relative error {worst:.1e} (depths 1-3); pseudo-label perturbation effect {sg_worst:.1e}"))
}

fn main() {
    // `cargo test -- --list` and friends pass arguments; only run on a plain invocation or a name filter
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let filter = args.iter().find(|a| !a.starts_with('-')).cloned();
    let criteria: [(&str, &str, fn() -> Outcome); 8] = [
        ("C1", "displacement matches brute-force oracle", criterion_1),
        ("C2", "loss fidelity and total-loss identity", criterion_2),
        ("C3", "warm-up schedule", criterion_3),
        ("C4", "metric oracles", criterion_4),
        ("C5", "desk-scale ablation direction", criterion_5),
        ("C6", "degeneracy", criterion_6),
        ("C7", "determinism", criterion_7),
        ("C8", "gradient sanity", criterion_8),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if filter.as_ref().is_some_and(|f| !id.eq_ignore_ascii_case(f)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name}: {detail} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
