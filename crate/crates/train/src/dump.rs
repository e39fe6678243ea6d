//! Writes displaced samples and their plans for inspection.

use std::fs;
use std::path::Path;

use abd_core::augmentation::augment_pair;
use abd_core::data::{write_image_png, write_label_png};
use abd_core::displacement::{abd_i, abd_r, DisplacementPlan};
use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Result};
use crate::trainer::{step_rng, Trainer};

pub const PLANS_FILE: &str = "plans.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    /// `abd_r` (unlabeled pair) or `abd_i` (labeled pair).
    pub kind: String,
    pub sample_id: String,
    /// File name prefix of this record's images.
    pub prefix: String,
    pub plans: [DisplacementPlan; 2],
}

fn batch1(x: &Array3<f32>) -> ndarray::Array4<f32> {
    x.clone().insert_axis(Axis(0))
}

/// Displaces the first `n` unlabeled and `n` labeled training samples with
/// the trainer's current networks in inference mode and writes PNGs plus
/// `plans.json` to `out`.
pub fn displace_dump(trainer: &Trainer, n: usize, out: &Path) -> Result<Vec<DumpRecord>> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg = trainer.config();
    let corpus = trainer.corpus();
    let (net1, net2) = trainer.nets();
    let mut rng = step_rng(cfg.seed, 0);
    let mut records = Vec::new();
    let ip = cfg.ablation.input_perturbation;
    for s in corpus.unlabeled.iter().take(n) {
        let p = augment_pair(s.image.view(), None, rng.random(), &cfg.strong, ip)?;
        let lw = net1.forward_eval(batch1(&p.x_w).view())?;
        let ls = net2.forward_eval(batch1(&p.x_s).view())?;
        let d = abd_r(
            p.x_w.view(),
            p.x_s.view(),
            lw.index_axis(Axis(0), 0),
            ls.index_axis(Axis(0), 0),
            trainer.grid(),
            cfg.top_n,
            cfg.strategy,
            &mut rng,
        )?;
        let prefix = format!("r_{}", s.id);
        for (name, x) in [("x_w", &p.x_w), ("x_s", &p.x_s), ("s_to_w", &d.x_s_to_w), ("w_to_s", &d.x_w_to_s)] {
            write_image_png(&out.join(format!("{prefix}_{name}.png")), x)?;
        }
        records.push(DumpRecord { kind: "abd_r".into(), sample_id: s.id.clone(), prefix, plans: d.plans });
    }
    for s in corpus.labeled.iter().take(n) {
        let p = augment_pair(s.image.view(), Some(s.label.view()), rng.random(), &cfg.strong, ip)?;
        let y = p.y.expect("label was passed");
        let lw = net1.forward_eval(batch1(&p.x_w).view())?;
        let ls = net2.forward_eval(batch1(&p.x_s).view())?;
        let d = abd_i(
            p.x_w.view(),
            p.x_s.view(),
            y.view(),
            lw.index_axis(Axis(0), 0),
            ls.index_axis(Axis(0), 0),
            trainer.grid(),
        )?;
        let prefix = format!("i_{}", s.id);
        for (name, x) in [("x_w", &p.x_w), ("x_s", &p.x_s), ("s_to_w", &d.x_s_to_w), ("w_to_s", &d.x_w_to_s)] {
            write_image_png(&out.join(format!("{prefix}_{name}.png")), x)?;
        }
        for (name, m) in [("y", &y), ("y_s_to_w", &d.y_s_to_w), ("y_w_to_s", &d.y_w_to_s)] {
            write_label_png(&out.join(format!("{prefix}_{name}.png")), m)?;
        }
        records.push(DumpRecord { kind: "abd_i".into(), sample_id: s.id.clone(), prefix, plans: d.plans });
    }
    let path = out.join(PLANS_FILE);
    let text = serde_json::to_string_pretty(&records).map_err(json_err(&path))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(records)
}
