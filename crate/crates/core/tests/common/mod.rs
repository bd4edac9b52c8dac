#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// AUC by counting every (positive, negative) pair.
pub fn auc_by_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Dice and IoU from the index sets of the two masks.
pub fn dice_iou_by_sets(pred: &[f32], truth: &[f32]) -> (f64, f64) {
    use std::collections::BTreeSet;
    let a: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == 1.0).collect();
    let b: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == 1.0).collect();
    if a.is_empty() && b.is_empty() {
        return (1.0, 1.0);
    }
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    (2.0 * inter / (a.len() + b.len()) as f64, inter / union)
}

/// `-(1/B) Σ y ln max(p, 1e-12)` row by row.
pub fn cross_entropy(p: &[f64], y: &[f64], classes: usize) -> f64 {
    let rows = p.len() / classes;
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..classes {
            let i = r * classes + c;
            if y[i] != 0.0 {
                total -= y[i] * p[i].max(1e-12).ln();
            }
        }
    }
    total / rows as f64
}

/// Batch mean of per-sample `||x - r||`, squared when `squared`.
pub fn restoration(x: &[f64], r: &[f64], batch: usize, squared: bool) -> f64 {
    let per = x.len() / batch;
    let mut total = 0.0;
    for b in 0..batch {
        let ss: f64 = (0..per).map(|i| (x[b * per + i] - r[b * per + i]).powi(2)).sum();
        total += if squared { ss } else { ss.sqrt() };
    }
    total / batch as f64
}

/// The reference followed by the `k - 1` others closest in squared L2,
/// found by scanning every candidate `k - 1` times.
pub fn knn_by_scans(latents: &[(usize, Vec<f32>)], reference: usize, k: usize) -> Vec<usize> {
    let z = &latents.iter().find(|(id, _)| *id == reference).unwrap().1;
    let d = |v: &[f32]| -> f64 { z.iter().zip(v).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum() };
    let mut out = vec![reference];
    while out.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for (id, v) in latents {
            if out.contains(id) {
                continue;
            }
            let dv = d(v);
            let better = match best {
                None => true,
                Some((bd, bid)) => dv < bd || (dv == bd && *id < bid),
            };
            if better {
                best = Some((dv, *id));
            }
        }
        out.push(best.unwrap().1);
    }
    out
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

const TIMING_KEYS: [&str; 2] = ["created_at", "wall_clock_secs"];

fn mask_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            for k in TIMING_KEYS {
                m.remove(k);
            }
            m.values_mut().for_each(mask_json);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(mask_json),
        _ => {}
    }
}

fn mask_csv(text: &str) -> String {
    let mut timing: Vec<usize> = Vec::new();
    let mut out = String::new();
    for line in text.lines() {
        let mut cells: Vec<&str> = line.split(',').collect();
        if !line.starts_with('#') && timing.is_empty() && cells.iter().any(|c| TIMING_KEYS.contains(c)) {
            timing = (0..cells.len()).filter(|&i| TIMING_KEYS.contains(&cells[i])).collect();
        } else if !line.starts_with('#') {
            for &i in &timing {
                if i < cells.len() {
                    cells[i] = "";
                }
            }
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Every file under `root` keyed by relative path, with wall-clock fields
/// blanked in JSON and CSV files. Manifest digests of JSON and CSV files are
/// dropped since those files are compared masked.
pub fn snapshot(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let bytes = std::fs::read(&p).unwrap();
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let masked = match p.extension().and_then(|x| x.to_str()) {
                Some("json") => {
                    let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                    mask_json(&mut v);
                    if p.ends_with("MANIFEST.json") {
                        for f in v["files"].as_array_mut().unwrap() {
                            let path = f["path"].as_str().unwrap().to_string();
                            if path.ends_with(".json") || path.ends_with(".csv") {
                                f.as_object_mut().unwrap().remove("sha256");
                            }
                        }
                    }
                    serde_json::to_vec(&v).unwrap()
                }
                Some("csv") => mask_csv(std::str::from_utf8(&bytes).unwrap()).into_bytes(),
                _ => bytes,
            };
            out.insert(rel, masked);
        }
    }
    out
}

/// Relative paths whose masked contents differ, or that exist on one side only.
pub fn snapshot_diff(
    a: &std::collections::BTreeMap<String, Vec<u8>>,
    b: &std::collections::BTreeMap<String, Vec<u8>>,
) -> Vec<String> {
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}

pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_transvw"))
}

/// Runs `transvw <args> -c <config> -o <out>` and returns its exit code.
pub fn run(config: &std::path::Path, out: &std::path::Path, args: &[&str]) -> i32 {
    let status = bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    status.code().unwrap_or(-1)
}

/// Every subcommand in pipeline order; returns `(subcommand, exit code)`.
pub fn run_pipeline(config: &std::path::Path, out: &std::path::Path) -> Vec<(String, i32)> {
    let p = |rel: &str| out.join(rel).to_string_lossy().into_owned();
    let ck = p("pretrain/transvw/checkpoint.bin");
    let ft = p("finetune/transvw/seed0/checkpoint.bin");
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-phantoms".into()],
        vec!["discover".into()],
        vec!["pretrain".into()],
        vec!["finetune".into(), "--init".into(), ck.clone()],
        vec!["finetune".into()],
        vec!["linear-probe".into(), "--init".into(), ck.clone()],
        vec!["evaluate".into(), "--checkpoint".into(), ft],
        vec!["sweep-annotation".into(), "--init".into(), ck],
        vec!["ablate-c".into()],
        vec!["export-montage".into(), "--source".into(), "phantoms".into()],
        vec!["export-montage".into(), "--source".into(), "words".into()],
        vec!["export-montage".into(), "--source".into(), "task".into()],
    ];
    let mut codes = Vec::new();
    for s in steps {
        let args: Vec<&str> = s.iter().map(|a| a.as_str()).collect();
        codes.push((s.join(" "), run(config, out, &args)));
    }
    let verify = bin()
        .arg("verify")
        .arg(out)
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    codes.push(("verify".into(), verify.code().unwrap_or(-1)));
    codes
}

pub type Case = (&'static [f64], &'static [f64], f64, f64);

// Pooled two-sided references evaluated at 50 significant digits.
#[allow(clippy::excessive_precision)]
pub const INDEPENDENT: [Case; 12] = [
    (
        &[2.2739, 2.1849, 1.57, 2.2867, 3.6119, 2.9241, 3.5369],
        &[0.2489, 0.3948, 0.1853, -1.6661],
        5.4117265851438502382,
        0.00042642006332849673436,
    ),
    (
        &[0.8553, -0.8896, -0.4682],
        &[0.3054, -0.0459, 0.521, -0.6422, 0.3087],
        -0.54578206337933996216,
        0.60489800040128753374,
    ),
    (
        &[0.3942, -1.2438, -0.7002, -0.8761, 0.9052, 0.3236],
        &[0.1347, 0.4126, 1.453, -0.7801],
        -0.88925011031513978818,
        0.39981749454372916388,
    ),
    (
        &[1.3816, 1.0062, 1.6295, 1.077, 0.594, 0.637, 2.1113, 0.3951, 1.9086],
        &[-0.3021, -0.2466, -0.5988, -0.045, -1.2721, 1.9484, -2.2543],
        3.2918550111556279997,
        0.0053482615202377421262,
    ),
    (
        &[2.2081, 0.5473, -0.2648],
        &[-0.9676, -0.5311, 1.2888, -2.0318, -1.4577, 0.2394, 1.4433],
        1.2307858342962505284,
        0.25335965170480466036,
    ),
    (
        &[3.0785, 3.2003, 1.8984, 3.3728, 2.1585, 1.6053, 1.7511, 2.6634, 3.3069],
        &[-0.0736, -1.0046, 1.0151, -0.5848, 0.5084, 0.8767],
        6.1291616480864761766,
        0.000036066987056225923295,
    ),
    (
        &[3.0304, 1.8906, 1.6877, 2.9784, 4.3784, 0.827],
        &[0.3631, 0.5058, 0.0825, 0.7243],
        3.1549447333389229236,
        0.01349744481195922047,
    ),
    (
        &[0.8882, 1.5499, -0.3397, 0.7042, 0.7836, 1.4705, 2.5519, -0.8952, 0.0774],
        &[-1.3569, -1.9491, 0.5445, 1.4423],
        1.4797780602407406888,
        0.16699315259710316558,
    ),
    (
        &[2.0502, 1.5982, 3.2075, 1.9728, 2.8808, 3.5729, 2.3963, 3.5445],
        &[0.8633, 1.0349, 0.7758, -2.375, -0.5563, -0.2884, -0.2503, 0.2537],
        5.7479101267274598109,
        0.000050427391355284160369,
    ),
    (
        &[1.9379, 0.5114, 1.0801, -1.7522, 1.2067, 0.142],
        &[0.1062, 1.0274, 1.3094, -0.0691, -1.1392, -0.4292, -1.1263],
        0.91546873064601187317,
        0.37957713938015757716,
    ),
    (
        &[-0.5149, -1.7606, 0.343, -0.5403, 0.0278],
        &[-0.3417, 0.6823, -0.9979, 0.7861, -0.511, 0.2125, 1.2307],
        -1.3636810721061487294,
        0.20257586897044708724,
    ),
    (
        &[0.9374, -1.4335, 0.2544, -0.4157, -0.6317, 0.1963, 0.5341],
        &[0.0431, -0.1424, 0.7614, -0.8848, -2.3426],
        0.76292245456487001108,
        0.46312695313220667251,
    ),
];
