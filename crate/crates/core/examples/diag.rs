//! Throwaway inspection tool: per-stage mining seeds vs ground truth.

use std::path::Path;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsod_core::boxes::iou;
use wsod_core::checkpoint::Checkpoint;
use wsod_core::data::{grid_proposals, load_dataset};
use wsod_core::model::forward_train;
use wsod_core::tensor::Graph;
use wsod_core::train::Trainer;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ck = Checkpoint::load(Path::new(&args[1])).unwrap();
    let dataset = load_dataset(Path::new(&args[2])).unwrap();
    let trainer = Trainer::from_checkpoint(&ck, &dataset).unwrap();
    let cfg = &trainer.cfg;
    let proposals = grid_proposals(
        dataset.height,
        dataset.width,
        &cfg.proposal_scales,
        &cfg.proposal_ratios,
        cfg.proposal_stride,
    )
    .unwrap();
    let gcm = cfg.gcm_enabled.then_some(&cfg.gcm);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // aggregate: per class, how often does each stage's seed hit IoU >= 0.5?
    let c = dataset.classes;
    let stages = cfg.k_refine + 1;
    let mut hits = vec![vec![0usize; stages]; c];
    let mut score_sum = vec![vec![0.0f64; stages]; c];
    let mut totals = vec![0usize; c];
    for (si, scene) in dataset.scenes.iter().enumerate() {
        let mut g = Graph::new();
        let out = forward_train(
            &mut g,
            &trainer.params,
            std::slice::from_ref(&scene.image),
            &[scene.image_labels.clone()],
            &[proposals.clone()],
            None,
            gcm,
            &mut rng,
        )
        .unwrap();
        let sup = &out.supervision.per_image[0];
        let verbose = si < 6;
        if verbose {
            println!("== scene {si} ==");
            for (cls, b) in &scene.objects {
                println!("  gt class {cls}  box ({},{})-({},{})", b.x1, b.y1, b.x2, b.y2);
            }
        }
        for cls in 0..c {
            if scene.image_labels[cls] == 0.0 {
                continue;
            }
            totals[cls] += 1;
            for (stage, set) in sup.refine.iter().chain([&sup.distill]).enumerate() {
                for &(sc, sp, score) in &set.seeds {
                    if sc != cls {
                        continue;
                    }
                    let bx = proposals[sp];
                    let best = scene
                        .objects
                        .iter()
                        .filter(|(gc, _)| *gc == cls)
                        .map(|(_, gb)| iou(&bx, gb))
                        .fold(0.0, f64::max);
                    if best >= 0.5 {
                        hits[cls][stage] += 1;
                    }
                    score_sum[cls][stage] += score;
                    if verbose {
                        println!(
                            "  class {cls} stage {stage}: seed ({},{})-({},{}) score {:.4} iou {:.2}",
                            bx.x1, bx.y1, bx.x2, bx.y2, score, best
                        );
                    }
                }
            }
        }
    }
    println!("\nseed hit-rate (IoU>=0.5) per class per stage (stage 0 = MIL stream):");
    for cls in 0..c {
        let rates: Vec<String> = (0..stages)
            .map(|s| format!("{:.2}", hits[cls][s] as f64 / totals[cls].max(1) as f64))
            .collect();
        println!("  class {cls} (n={}): {}", totals[cls], rates.join("  "));
    }
    println!("mean seed score per class per stage:");
    for cls in 0..c {
        let means: Vec<String> = (0..stages)
            .map(|s| format!("{:.3}", score_sum[cls][s] / totals[cls].max(1) as f64))
            .collect();
        println!("  class {cls}: {}", means.join("  "));
    }
}
