//! Corpus directories: `manifest.json` plus, per case, `<id>.sp`,
//! `<id>.features.irgt` and `<id>.truth.irgt`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use irgrid_core::featurize::{Provenance, TestCase};
use irgrid_core::netlist::write_netlist;
use irgrid_core::synth::{generate_indexed, SynthCase, SynthParams};
use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::pool;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Manifest {
    pub seed: u64,
    pub first_index: u64,
    pub count: u64,
    pub feature_size: usize,
    pub params: SynthParams,
    pub cases: Vec<CaseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CaseEntry {
    pub id: String,
    pub netlist: String,
    pub features: String,
    pub truth: String,
}

pub fn features_file(id: &str) -> String {
    format!("{id}.features.irgt")
}

pub fn truth_file(id: &str) -> String {
    format!("{id}.truth.irgt")
}

/// Generates cases `first..first + count` and writes them under `dir`.
pub fn synthesize(dir: &Path, params: &SynthParams, first: u64, count: u64, size: usize) -> Result<Manifest> {
    params.check()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let indices: Vec<u64> = (first..first + count).collect();
    let entries = pool::map(&indices, |&i| -> Result<CaseEntry> {
        let SynthCase { netlist, case } = generate_indexed(params, i, size)?;
        write_case(dir, &case, Some(&write_netlist(&netlist)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed: params.seed,
        first_index: first,
        count,
        feature_size: size,
        params: params.clone(),
        cases: entries,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(manifest)
}

pub fn write_case(dir: &Path, case: &TestCase, netlist: Option<&str>) -> Result<CaseEntry> {
    let entry = CaseEntry {
        id: case.id.clone(),
        netlist: format!("{}.sp", case.id),
        features: features_file(&case.id),
        truth: truth_file(&case.id),
    };
    if let Some(text) = netlist {
        fs::write(dir.join(&entry.netlist), text)?;
    }
    TensorContainer::from_features(&case.features).save(&dir.join(&entry.features))?;
    if let Some(t) = &case.ground_truth {
        TensorContainer::from_drop(t).save(&dir.join(&entry.truth))?;
    }
    Ok(entry)
}

/// Case ids in a directory: from the manifest when present, otherwise every
/// `*.features.irgt` file in name order.
pub fn case_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        bail!("corpus directory {} does not exist", dir.display());
    }
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(&manifest)?)
            .with_context(|| format!("parsing {}", manifest.display()))?;
        return Ok(m.cases.into_iter().map(|c| c.id).collect());
    }
    let mut ids: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".features.irgt"))
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn load_case(dir: &Path, id: &str, need_truth: bool) -> Result<TestCase> {
    let fpath = dir.join(features_file(id));
    let features = TensorContainer::load(&fpath)
        .and_then(|c| c.to_features())
        .with_context(|| format!("loading {}", fpath.display()))?;
    let tpath = dir.join(truth_file(id));
    let ground_truth = if tpath.exists() {
        Some(
            TensorContainer::load(&tpath)
                .and_then(|c| c.to_drop())
                .with_context(|| format!("loading {}", tpath.display()))?,
        )
    } else if need_truth {
        bail!("case {id} has no ground truth in {}", dir.display());
    } else {
        None
    };
    Ok(TestCase {
        id: id.to_string(),
        features,
        ground_truth,
        provenance: Provenance::Synthetic,
    })
}

pub fn load(dir: &Path, need_truth: bool) -> Result<Vec<TestCase>> {
    let ids = case_ids(dir)?;
    if ids.is_empty() {
        bail!("no test cases in {}", dir.display());
    }
    pool::map(&ids, |id| load_case(dir, id, need_truth)).into_iter().collect()
}

/// 2-D maps in a directory keyed by the file name up to its first dot;
/// feature stacks are skipped.
pub fn drop_maps(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        bail!("directory {} does not exist", dir.display());
    }
    let mut out: Vec<(String, PathBuf)> = Vec::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if !name.ends_with(".irgt") || name.ends_with(".features.irgt") {
            continue;
        }
        let id = name.split('.').next().unwrap_or_default().to_string();
        if out.iter().any(|(k, _)| *k == id) {
            bail!("more than one map for case {id} in {}", dir.display());
        }
        out.push((id, e.path()));
    }
    out.sort();
    Ok(out)
}
