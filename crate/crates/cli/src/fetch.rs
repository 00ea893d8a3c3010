//! Download a list of model URLs with a provenance record.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PROVENANCE: &str = "provenance.json";
const MAX_DOWNLOAD: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub url: String,
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Serialize)]
pub struct FetchSummary {
    pub downloaded: usize,
    pub skipped: usize,
    pub failed: usize,
    pub out_dir: PathBuf,
}

/// Last non-empty path segment, stripped of query and anything unsafe.
pub fn file_name_for(url: &str) -> String {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    let last = path
        .trim_end_matches('/')
        .rsplit('/')
        .next()
        .unwrap_or("")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect::<String>();
    let last = last.trim_start_matches('.');
    if last.is_empty() {
        format!("download_{:016x}", u64::from_be_bytes(Sha256::digest(url)[..8].try_into().unwrap()))
    } else {
        last.to_string()
    }
}

fn download(url: &str, dest: &Path) -> anyhow::Result<Provenance> {
    let response = ureq::get(url).call().with_context(|| format!("GET {url}"))?;
    let mut bytes = Vec::new();
    response
        .into_body()
        .into_reader()
        .take(MAX_DOWNLOAD)
        .read_to_end(&mut bytes)
        .with_context(|| format!("reading {url}"))?;
    let mut tmp = dest.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, &bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, dest)?;
    Ok(Provenance {
        url: url.to_string(),
        file: dest.file_name().unwrap().to_string_lossy().into_owned(),
        sha256: format!("{:x}", Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    })
}

pub fn fetch(manifest: &Path, out_dir: &Path, jobs: usize) -> anyhow::Result<FetchSummary> {
    let text = fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let urls: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    fs::create_dir_all(out_dir)?;
    let record_path = out_dir.join(PROVENANCE);
    let mut records: BTreeMap<String, Provenance> = match fs::read(&record_path) {
        Ok(bytes) => serde_json::from_slice::<Vec<Provenance>>(&bytes)
            .with_context(|| format!("parsing {}", record_path.display()))?
            .into_iter()
            .map(|p| (p.url.clone(), p))
            .collect(),
        Err(_) => BTreeMap::new(),
    };

    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let outcomes: Vec<(String, Option<anyhow::Result<Provenance>>)> = pool.install(|| {
        urls.par_iter()
            .map(|&url| {
                let dest = out_dir.join(file_name_for(url));
                if dest.is_file() {
                    log::info!("skip {url}: {} exists", dest.display());
                    return (url.to_string(), None);
                }
                log::info!("fetch {url}");
                (url.to_string(), Some(download(url, &dest)))
            })
            .collect()
    });

    let (mut downloaded, mut skipped, mut failed) = (0, 0, 0);
    for (url, outcome) in outcomes {
        match outcome {
            None => skipped += 1,
            Some(Ok(p)) => {
                downloaded += 1;
                records.insert(url, p);
            }
            Some(Err(e)) => {
                failed += 1;
                log::warn!("{e:#}");
            }
        }
    }
    let list: Vec<&Provenance> = records.values().collect();
    fs::write(&record_path, serde_json::to_vec_pretty(&list)?)?;
    if failed > 0 && downloaded == 0 && skipped == 0 {
        return Err(anyhow!("all {failed} downloads failed"));
    }
    Ok(FetchSummary {
        downloaded,
        skipped,
        failed,
        out_dir: out_dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_from_urls() {
        assert_eq!(file_name_for("https://x.org/a/gear.stl"), "gear.stl");
        assert_eq!(file_name_for("https://x.org/a/gear.stl?dl=1"), "gear.stl");
        assert_eq!(file_name_for("https://x.org/a b/my part.STL"), "my_part.STL");
        assert_eq!(file_name_for("https://x.org/"), "x.org");
        assert!(!file_name_for("https://x.org/..").starts_with('.'));
    }
}
