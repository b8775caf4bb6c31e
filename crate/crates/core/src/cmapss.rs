//! Turbofan case-study pipeline: run-to-failure file ingestion, informative
//! sensor selection, failure-mode partition into four clients, test-signal
//! truncation, and smoothing-spline fusion of each sensor stream into
//! (terminal level, per-cycle slope) features.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seeds;
use crate::sev::{predict_quantile, ClientDataset, ClientParams};
use crate::spline::{select_penalty, smooth_spline_fit};

/// Informative sensor channels, 1-indexed per the dataset convention.
pub const SELECTED_SENSORS: [usize; 4] = [4, 15, 17, 20];

/// Fraction of each test unit's life that is observed.
pub const TRUNCATION: f64 = 0.7;

/// Default spline-penalty candidates for the per-sensor cross-validation.
pub const RHO_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

/// One engine's full run-to-failure record.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineUnit {
    pub unit_id: u32,
    /// Operating cycles, contiguous from 1.
    pub cycles: Vec<u32>,
    /// L x 3 operational settings.
    pub op_settings: DMatrix<f64>,
    /// L x 21 sensor readings.
    pub sensors: DMatrix<f64>,
}

impl EngineUnit {
    /// Run-to-failure length in cycles.
    pub fn failure_time(&self) -> usize {
        self.cycles.len()
    }
}

/// Parse the standard 26-column whitespace layout
/// (unit, cycle, 3 settings, 21 sensors), one row per cycle.
pub fn parse_cmapss(path: &Path) -> Result<Vec<EngineUnit>> {
    let text = std::fs::read_to_string(path)?;
    let mut order: Vec<u32> = Vec::new();
    let mut rows: HashMap<u32, Vec<(u32, [f64; 24])>> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 26 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected 26 columns, found {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("invalid {what}: `{s}`"),
            })
        };
        let unit = parse(fields[0], "unit id")? as u32;
        let cycle = parse(fields[1], "cycle")? as u32;
        let mut vals = [0.0; 24];
        for (k, f) in fields[2..].iter().enumerate() {
            vals[k] = parse(f, "value")?;
        }
        if !rows.contains_key(&unit) {
            order.push(unit);
        }
        rows.entry(unit).or_default().push((cycle, vals));
    }
    if order.is_empty() {
        return Err(Error::Empty("engine data file"));
    }

    let mut units = Vec::with_capacity(order.len());
    for unit_id in order {
        let mut recs = rows.remove(&unit_id).unwrap();
        recs.sort_by_key(|r| r.0);
        let l = recs.len();
        if l < 2 {
            return Err(Error::InvalidDataset(format!("unit {unit_id} has fewer than 2 cycles")));
        }
        for (k, r) in recs.iter().enumerate() {
            if r.0 as usize != k + 1 {
                return Err(Error::InvalidDataset(format!(
                    "unit {unit_id}: cycles not contiguous from 1 (found {} at position {})",
                    r.0,
                    k + 1
                )));
            }
        }
        let cycles: Vec<u32> = recs.iter().map(|r| r.0).collect();
        let mut op = DMatrix::zeros(l, 3);
        let mut sens = DMatrix::zeros(l, 21);
        for (k, r) in recs.iter().enumerate() {
            for c in 0..3 {
                op[(k, c)] = r.1[c];
            }
            for c in 0..21 {
                sens[(k, c)] = r.1[3 + c];
            }
        }
        units.push(EngineUnit {
            unit_id,
            cycles,
            op_settings: op,
            sensors: sens,
        });
    }
    log::info!("parsed {} engine units from {}", units.len(), path.display());
    Ok(units)
}

/// Write units back in the same 26-column layout (round-trip counterpart of
/// [`parse_cmapss`]).
pub fn serialize_cmapss(units: &[EngineUnit], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for u in units {
        for (k, &cycle) in u.cycles.iter().enumerate() {
            let mut fields = vec![u.unit_id.to_string(), cycle.to_string()];
            for c in 0..3 {
                fields.push(format!("{}", u.op_settings[(k, c)]));
            }
            for c in 0..21 {
                fields.push(format!("{}", u.sensors[(k, c)]));
            }
            writeln!(f, "{}", fields.join(" "))?;
        }
    }
    Ok(())
}

/// Retain the informative channels, order fixed as in [`SELECTED_SENSORS`].
pub fn select_sensors(unit: &EngineUnit) -> DMatrix<f64> {
    let l = unit.failure_time();
    let mut out = DMatrix::zeros(l, SELECTED_SENSORS.len());
    for (c, &s) in SELECTED_SENSORS.iter().enumerate() {
        for k in 0..l {
            out[(k, c)] = unit.sensors[(k, s - 1)];
        }
    }
    out
}

/// End-of-life signature of one unit: mean of the last 5 cycles of each
/// selected sensor.
fn eol_signature(unit: &EngineUnit) -> [f64; 4] {
    let sel = select_sensors(unit);
    let l = sel.nrows();
    let tail = l.min(5);
    let mut sig = [0.0; 4];
    for c in 0..4 {
        for k in (l - tail)..l {
            sig[c] += sel[(k, c)];
        }
        sig[c] /= tail as f64;
    }
    sig
}

/// Read failure-mode labels (CSV: unit_id, fm in {1,2}).
pub fn read_labels(path: &Path, units: &[EngineUnit]) -> Result<Vec<u8>> {
    let mut map = HashMap::new();
    let mut r = csv::Reader::from_path(path)?;
    for (k, rec) in r.deserialize::<(u32, u8)>().enumerate() {
        let (uid, fm) = rec?;
        if !(fm == 1 || fm == 2) {
            return Err(Error::Parse {
                line: k + 2,
                message: format!("failure mode must be 1 or 2, got {fm}"),
            });
        }
        map.insert(uid, fm);
    }
    let known: std::collections::HashSet<u32> = units.iter().map(|u| u.unit_id).collect();
    for uid in map.keys() {
        if !known.contains(uid) {
            return Err(Error::InvalidDataset(format!("label file references unknown unit {uid}")));
        }
    }
    units
        .iter()
        .map(|u| {
            map.get(&u.unit_id)
                .copied()
                .ok_or_else(|| Error::InvalidDataset(format!("no failure-mode label for unit {}", u.unit_id)))
        })
        .collect()
}

/// Two-cluster the standardized end-of-life signatures; the larger cluster
/// is labeled mode 1. Deterministic: centers start at the farthest pair.
pub fn cluster_failure_modes(units: &[EngineUnit]) -> Result<Vec<u8>> {
    let n = units.len();
    if n < 2 {
        return Err(Error::InvalidDataset("need at least 2 units to cluster".into()));
    }
    let mut sigs: Vec<[f64; 4]> = units.iter().map(eol_signature).collect();
    // standardize each coordinate
    for c in 0..4 {
        let mean = sigs.iter().map(|s| s[c]).sum::<f64>() / n as f64;
        let var = sigs.iter().map(|s| (s[c] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 {
            for s in &mut sigs {
                s[c] = (s[c] - mean) / sd;
            }
        } else {
            for s in &mut sigs {
                s[c] = 0.0;
            }
        }
    }
    let d2 = |a: &[f64; 4], b: &[f64; 4]| -> f64 {
        (0..4).map(|c| (a[c] - b[c]).powi(2)).sum()
    };

    // farthest pair as initial centers
    let mut best = (0usize, 1usize, -1.0f64);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = d2(&sigs[i], &sigs[j]);
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    if best.2 < 1e-12 {
        return Err(Error::InvalidDataset(
            "failure-mode clustering is degenerate: all end-of-life signatures identical".into(),
        ));
    }
    let mut centers = [sigs[best.0], sigs[best.1]];
    let mut assign = vec![0u8; n];
    for _ in 0..100 {
        let mut changed = false;
        for (k, s) in sigs.iter().enumerate() {
            let a = if d2(s, &centers[0]) <= d2(s, &centers[1]) { 0 } else { 1 };
            if assign[k] != a {
                assign[k] = a;
                changed = true;
            }
        }
        for c in 0..2 {
            let members: Vec<&[f64; 4]> = sigs
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a as usize == c)
                .map(|(s, _)| s)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut m = [0.0; 4];
            for s in &members {
                for i in 0..4 {
                    m[i] += s[i];
                }
            }
            for i in 0..4 {
                m[i] /= members.len() as f64;
            }
            centers[c] = m;
        }
        if !changed {
            break;
        }
    }
    let count0 = assign.iter().filter(|&&a| a == 0).count();
    let larger = if count0 * 2 >= n { 0 } else { 1 };
    Ok(assign.iter().map(|&a| if a as usize == larger { 1 } else { 2 }).collect())
}

/// Fused features of one unit observed through `observed_up_to` cycles:
/// leading 1, then (terminal smoothed level, per-cycle terminal slope) for
/// each selected sensor. Time is normalized to (0, 1] by the window length,
/// so a truncated linear signal yields the same slope as the full one.
pub fn extract_case_features(unit: &EngineUnit, observed_up_to: usize) -> Result<DVector<f64>> {
    if observed_up_to < 4 {
        return Err(Error::InvalidDataset(format!(
            "unit {}: need at least 4 observed cycles, got {observed_up_to}",
            unit.unit_id
        )));
    }
    if observed_up_to > unit.failure_time() {
        return Err(Error::InvalidDataset(format!(
            "unit {}: window {observed_up_to} exceeds lifetime {}",
            unit.unit_id,
            unit.failure_time()
        )));
    }
    let sel = select_sensors(unit);
    let scale = observed_up_to as f64;
    let mut feats = DVector::zeros(1 + 2 * SELECTED_SENSORS.len());
    feats[0] = 1.0;
    for c in 0..SELECTED_SENSORS.len() {
        let pts: Vec<(f64, f64)> = (0..observed_up_to)
            .map(|k| ((k + 1) as f64 / scale, sel[(k, c)]))
            .collect();
        let rho = select_penalty(&pts, &RHO_GRID, 5)?;
        let fit = smooth_spline_fit(&pts, rho)?;
        feats[1 + 2 * c] = fit.terminal_level();
        feats[2 + 2 * c] = fit.terminal_slope() / scale;
    }
    Ok(feats)
}

/// Precomputed per-unit features for both roles: full window (training)
/// and truncated window (testing).
#[derive(Debug, Clone)]
pub struct CaseUnitFeatures {
    pub unit_id: u32,
    pub full: DVector<f64>,
    pub truncated: DVector<f64>,
    /// Run-to-failure length in cycles.
    pub failure_time: f64,
    /// Truncated window length in cycles.
    pub observed: usize,
    pub fm: u8,
}

/// Fuse every unit once; the split step then only shuffles indices.
pub fn compute_case_features(units: &[EngineUnit], labels: &[u8]) -> Result<Vec<CaseUnitFeatures>> {
    if units.len() != labels.len() {
        return Err(Error::InvalidDataset("one label per unit required".into()));
    }
    units
        .iter()
        .zip(labels)
        .map(|(u, &fm)| {
            let l = u.failure_time();
            let observed = ((TRUNCATION * l as f64).floor() as usize).max(4);
            Ok(CaseUnitFeatures {
                unit_id: u.unit_id,
                full: extract_case_features(u, l)?,
                truncated: extract_case_features(u, observed)?,
                failure_time: l as f64,
                observed,
                fm,
            })
        })
        .collect()
}

/// One case-study client: private training data plus the failure-mode test
/// pool it is evaluated on.
#[derive(Debug, Clone)]
pub struct CaseClient {
    pub id: String,
    pub train: ClientDataset,
    pub train_unit_ids: Vec<u32>,
    pub test_unit_ids: Vec<u32>,
    /// Truncated-window features of the test pool.
    pub test_features: DMatrix<f64>,
    /// True remaining life (cycles) of each test unit.
    pub test_rul: Vec<f64>,
    /// Observed cycles of each test unit at prediction time.
    pub test_observed: Vec<f64>,
}

/// Mode-1 units split evenly across clients 1-2, mode-2 across clients 3-4;
/// 40% (floor) of each client's units train, the rest join the shared
/// per-mode test pool.
pub fn build_case_split(features: &[CaseUnitFeatures], seed: u64) -> Result<Vec<CaseClient>> {
    let dim = match features.first() {
        Some(f) => f.full.len(),
        None => return Err(Error::Empty("case features")),
    };
    let mut clients = Vec::with_capacity(4);
    for (fm, base) in [(1u8, 0usize), (2, 2)] {
        let mut pool: Vec<usize> = features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.fm == fm)
            .map(|(i, _)| i)
            .collect();
        if pool.len() < 4 {
            return Err(Error::InvalidDataset(format!(
                "failure mode {fm} has only {} units; need at least 4",
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::stream(seed, "case-split", fm as u64));
        pool.shuffle(&mut rng);
        let half = pool.len() / 2;
        let halves = [&pool[..half], &pool[half..]];

        // assemble both clients' train sets first, then the shared test pool
        let mut train_sets: Vec<Vec<usize>> = Vec::new();
        let mut test_pool: Vec<usize> = Vec::new();
        for members in halves {
            let n_train = ((0.4 * members.len() as f64).floor() as usize).max(1);
            if members.len() <= n_train {
                return Err(Error::InvalidDataset(format!(
                    "failure mode {fm}: not enough units to hold out a test set"
                )));
            }
            train_sets.push(members[..n_train].to_vec());
            test_pool.extend_from_slice(&members[n_train..]);
        }
        test_pool.sort_by_key(|&i| features[i].unit_id);

        for (which, train_idx) in train_sets.into_iter().enumerate() {
            let id = format!("client{}", base + which + 1);
            let mut x = DMatrix::zeros(train_idx.len(), dim);
            let mut y = DVector::zeros(train_idx.len());
            for (r, &i) in train_idx.iter().enumerate() {
                x.row_mut(r).copy_from(&features[i].full.transpose());
                y[r] = features[i].failure_time.ln();
            }
            let mut tx = DMatrix::zeros(test_pool.len(), dim);
            let mut rul = Vec::with_capacity(test_pool.len());
            let mut obs = Vec::with_capacity(test_pool.len());
            for (r, &i) in test_pool.iter().enumerate() {
                tx.row_mut(r).copy_from(&features[i].truncated.transpose());
                rul.push(features[i].failure_time - features[i].observed as f64);
                obs.push(features[i].observed as f64);
            }
            clients.push(CaseClient {
                id: id.clone(),
                train: ClientDataset::new(id, x, y)?,
                train_unit_ids: train_idx.iter().map(|&i| features[i].unit_id).collect(),
                test_unit_ids: test_pool.iter().map(|&i| features[i].unit_id).collect(),
                test_features: tx,
                test_rul: rul,
                test_observed: obs,
            });
        }
    }
    Ok(clients)
}

/// Median-life prediction of remaining cycles, floored at zero.
pub fn predict_rul(params: &ClientParams, x: &DVector<f64>, observed: f64) -> Result<f64> {
    let log_ttf = predict_quantile(params, x, 0.5)?;
    Ok((log_ttf.exp() - observed).max(0.0))
}

/// Per-client feature CSV: unit_id, role, y_log, f1..f8, rul_truth
/// (empty for training rows).
pub fn dump_case_features_csv(client: &CaseClient, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = client.train.p();
    let mut header = vec!["unit_id".to_string(), "role".into(), "y_log".into()];
    for k in 1..dim {
        header.push(format!("f{k}"));
    }
    header.push("rul_truth".into());
    w.write_record(&header)?;
    for (r, uid) in client.train_unit_ids.iter().enumerate() {
        let mut rec = vec![uid.to_string(), "train".into(), format!("{}", client.train.responses[r])];
        for k in 1..dim {
            rec.push(format!("{}", client.train.features[(r, k)]));
        }
        rec.push(String::new());
        w.write_record(&rec)?;
    }
    for (r, uid) in client.test_unit_ids.iter().enumerate() {
        let mut rec = vec![uid.to_string(), "test".into(), String::new()];
        for k in 1..dim {
            rec.push(format!("{}", client.test_features[(r, k)]));
        }
        rec.push(format!("{}", client.test_rul[r]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
