//! Desk-scale training comparisons. Runs are cached so criteria sharing a
//! configuration train it once.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use voxseed::neighbors::{Kernel, KernelChoice, Reducer};
use voxseed::phantom::{make_dataset, DatasetSplit, SpecRanges};
use voxseed::trainer::{run_variant, RunSummary, TrainConfig, Variant};

use super::{outcome, Outcome};

pub const SEEDS: [u64; 3] = [1, 2, 3];
const DATA_SEED: u64 = 1234;

/// 60 training phantoms (4 labeled), 12 validation, 20 test at 32³.
fn dataset() -> &'static DatasetSplit {
    static DATA: OnceLock<DatasetSplit> = OnceLock::new();
    DATA.get_or_init(|| make_dataset(60, 4, 12, 20, &SpecRanges::default(), DATA_SEED).expect("desk dataset"))
}

pub fn desk_config(seed: u64, choice: KernelChoice) -> TrainConfig {
    TrainConfig {
        epochs: 16,
        levels: 2,
        base_filters: 4,
        learning_rate: 1e-3,
        kernel: choice.kernel,
        reducer: choice.reducer,
        seed,
        ..TrainConfig::default()
    }
}

const COSINE_MEAN: KernelChoice = KernelChoice { kernel: Kernel::Cosine, reducer: Reducer::Mean };

type Key = (&'static str, String, u64);

fn run(variant: Variant, choice: KernelChoice, seed: u64) -> Result<RunSummary, String> {
    static CACHE: OnceLock<Mutex<HashMap<Key, Result<RunSummary, String>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (variant.label(), format!("{choice:?}"), seed);
    if let Some(hit) = cache.lock().unwrap().get(&key) {
        return hit.clone();
    }
    let start = Instant::now();
    let result = run_variant(&desk_config(seed, choice), dataset(), variant, &mut |_| Ok(())).map_err(|e| e.to_string());
    match &result {
        Ok(r) => eprintln!(
            "  {} {:?}/{:?} seed {seed}: test IoU {:.4} HD95 {:.3} mm (best epoch {}, {:.0}s)",
            variant.label(),
            choice.kernel,
            choice.reducer,
            r.mean_iou,
            r.mean_hd95,
            r.best_epoch,
            start.elapsed().as_secs_f64()
        ),
        Err(e) => eprintln!("  {} seed {seed}: {e}", variant.label()),
    }
    cache.lock().unwrap().insert(key, result.clone());
    result
}

/// Seed-averaged test IoU and HD95.
fn mean_over_seeds(variant: Variant, choice: KernelChoice) -> Result<(f64, f64), String> {
    let mut sums = (0.0, 0.0);
    for seed in SEEDS {
        let r = run(variant, choice, seed)?;
        sums.0 += r.mean_iou;
        sums.1 += r.mean_hd95;
    }
    let n = SEEDS.len() as f64;
    Ok((sums.0 / n, sums.1 / n))
}

pub fn semi_supervised_gain() -> Outcome {
    let (base, full) = match (mean_over_seeds(Variant::Baseline, COSINE_MEAN), mean_over_seeds(Variant::UaNnEn, COSINE_MEAN)) {
        (Ok(b), Ok(f)) => (b, f),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("run failed: {e}")),
    };
    let pass = full.0 >= base.0 + 0.01 && full.1 <= base.1;
    outcome(
        pass,
        format!(
            "IoU full {:.4} vs baseline {:.4} (need +0.01), HD95 full {:.3} vs baseline {:.3} mm",
            full.0, base.0, full.1, base.1
        ),
    )
}

pub fn ablation_ordering() -> Outcome {
    let rows = [Variant::Ua, Variant::UaNn, Variant::UaNnEn, Variant::UaEn];
    let mut table = Vec::new();
    for v in rows {
        match mean_over_seeds(v, COSINE_MEAN) {
            Ok(m) => table.push((v, m)),
            Err(e) => return outcome(false, format!("{} failed: {e}", v.label())),
        }
    }
    let get = |v: Variant| table.iter().find(|(w, _)| *w == v).unwrap().1;
    let (ua, full) = (get(Variant::Ua), get(Variant::UaNnEn));
    let best = table.iter().map(|(_, m)| m.0).fold(f64::NEG_INFINITY, f64::max);
    let pass = full.0 >= ua.0 - 0.005 && full.1 <= ua.1 && full.0 >= best - 0.005;
    let rows: Vec<String> = table.iter().map(|(v, m)| format!("{} {:.4}/{:.3}", v.label(), m.0, m.1)).collect();
    outcome(pass, format!("IoU/HD95 per row: {}", rows.join(", ")))
}

pub fn kernel_robustness() -> Outcome {
    let mut ious = Vec::new();
    for kernel in [Kernel::Cosine, Kernel::Euclidean] {
        for reducer in [Reducer::Mean, Reducer::Max] {
            match mean_over_seeds(Variant::UaNnEn, KernelChoice { kernel, reducer }) {
                Ok(m) => ious.push((format!("{kernel}/{reducer}"), m.0)),
                Err(e) => return outcome(false, format!("{kernel}/{reducer} failed: {e}")),
            }
        }
    }
    let hi = ious.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = ious.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let rows: Vec<String> = ious.iter().map(|(n, i)| format!("{n} {i:.4}")).collect();
    outcome(hi - lo <= 0.02, format!("mean IoU spread {:.4} (limit 0.02): {}", hi - lo, rows.join(", ")))
}
