//! End-to-end desk-scale run over the four synthetic domains.

use std::time::Instant;

use count_adapt::classifier::{train_classifier, DomainClassifierHead, SceneMode};
use count_adapt::datagen::{gen_dataset, split_train_val, Scene, SyntheticDomainSpec};
use count_adapt::eval::{evaluate, mae};
use count_adapt::features::{build_frozen_extractor, FrozenExtractorSpec};
use count_adapt::refiner::{build_refinement_pairs, train_refiner};
use count_adapt::regressor::{adapt, prime, DomainId, ModelParams, PatchDataset, TrainConfig};

const SIZE: (usize, usize) = (128, 128);
const PATCH: usize = 32;

fn baseline(train: &[Scene], val: &[Scene]) -> f64 {
    let mean = train.iter().map(|s| s.count() as f64).sum::<f64>() / train.len() as f64;
    let gts: Vec<f64> = val.iter().map(|s| s.count() as f64).collect();
    mae(&gts, &vec![mean; gts.len()])
}

fn main() -> count_adapt::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(64, |s| s.parse().unwrap());
    let t0 = Instant::now();
    let extractor = build_frozen_extractor(&FrozenExtractorSpec::with_output_dim(1, n, 0))?;
    let cfg = TrainConfig::default();
    let specs = SyntheticDomainSpec::presets();
    let mut data = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let scenes = gen_dataset(spec, 500, SIZE, 100 + i as u64)?;
        let (train, val) = split_train_val(&scenes, 0.2, 7)?;
        let ds = PatchDataset::from_scenes(&extractor, &train, PATCH)?;
        println!(
            "{}: data {:?} baseline MAE {:.3}",
            spec.name,
            t0.elapsed(),
            baseline(&train, &val)
        );
        data.push((spec.domain(), train, val, ds));
    }
    let primed = 3; // cell-like
    let mut model = ModelParams::new(n, 1)?;
    let (d, _, val, ds) = &data[primed];
    let log = prime(&mut model, ds, d, &cfg)?;
    let r = evaluate(&model, &extractor, val, d, PATCH, false, "val")?;
    println!(
        "prime {d}: loss {:.3} -> {:.3}, val MAE {:.3} ({:?})",
        log.initial().unwrap(),
        log.tail_mean(100),
        r.mae,
        t0.elapsed()
    );
    for (i, (d, _, val, ds)) in data.iter().enumerate() {
        if i == primed {
            continue;
        }
        let log = adapt(&mut model, ds, d, &cfg)?;
        let r = evaluate(&model, &extractor, val, d, PATCH, false, "val")?;
        let mut scratch = ModelParams::new(n, 1)?;
        prime(&mut scratch, ds, d, &cfg)?;
        let s = evaluate(&scratch, &extractor, val, d, PATCH, false, "val")?;
        println!(
            "adapt {d}: loss {:.3} -> {:.3}, val MAE {:.3}, scratch {:.3} ratio {:.3} ({:?})",
            log.initial().unwrap(),
            log.tail_mean(100),
            r.mae,
            s.mae,
            r.mae / s.mae,
            t0.elapsed()
        );
    }
    for (d, train, val, _) in &data {
        let pairs = build_refinement_pairs(&model, &extractor, train, d, PATCH)?;
        let fit = train_refiner(&mut model, d, &pairs, &TrainConfig::refiner_default())?;
        let log = fit.log;
        let base = evaluate(&model, &extractor, val, d, PATCH, false, "val")?;
        let refd = evaluate(&model, &extractor, val, d, PATCH, true, "val")?;
        println!("refine {d} (kept iteration {}): loss {:.3} -> {:.3}, base {:.3} refined {:.3} ratio {:.3} ({:?})", fit.selected_iteration, log.initial().unwrap(), log.tail_mean(100), base.mae, refd.mae, refd.mae / base.mae, t0.elapsed());
    }
    let doms: Vec<DomainId> = data.iter().map(|x| x.0.clone()).collect();
    let mut head = DomainClassifierHead::new(n, doms.clone(), 5)?;
    let cdata: Vec<(DomainId, PatchDataset)> =
        data.iter().map(|x| (x.0.clone(), x.3.clone())).collect();
    let log = train_classifier(&model, &mut head, &cdata, &cfg)?;
    let mut correct = 0;
    let mut total = 0;
    let mut correct_whole = 0;
    for (d, _, val, _) in &data {
        for s in val.iter().take(30) {
            let c =
                head.classify_scene(&model, &extractor, &s.pixels, PATCH, SceneMode::PatchVote)?;
            let w =
                head.classify_scene(&model, &extractor, &s.pixels, PATCH, SceneMode::WholeImage)?;
            correct += (c.domain == *d) as usize;
            correct_whole += (w.domain == *d) as usize;
            total += 1;
        }
    }
    println!(
        "classifier: loss {:.3} -> {:.3}, acc {}/{} whole {} ({:?})",
        log.initial().unwrap(),
        log.tail_mean(100),
        correct,
        total,
        correct_whole,
        t0.elapsed()
    );
    Ok(())
}
