use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::pgm::{load_image, save_image};
use super::{sample_seed, synth_sample, ImageSample, NoiseModel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "split fractions must lie in [0, 1] and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Rounded train and val counts; test takes the remainder.
    pub fn counts(&self, count: usize) -> (usize, usize, usize) {
        let train = ((count as f64 * self.train).round() as usize).min(count);
        let val = ((count as f64 * self.val).round() as usize).min(count - train);
        (train, val, count - train - val)
    }

    pub fn assign(&self, index: usize, count: usize) -> Split {
        let (train, val, _) = self.counts(count);
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    pub dose_fraction: f64,
    pub seed: u64,
    pub splits: SplitFractions,
    pub noise: NoiseModel,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 50,
            size: 64,
            dose_fraction: 0.25,
            seed: 0,
            splits: SplitFractions::default(),
            noise: NoiseModel::default(),
        }
    }
}

/// Image sides must be multiples of this (the default model's window × 2^stages).
pub const SIZE_MULTIPLE: usize = 16;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Validation("count must be >= 1".into()));
        }
        if self.size < 16 || !self.size.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::Validation(format!(
                "size must be a multiple of {SIZE_MULTIPLE} and >= 16, got {}",
                self.size
            )));
        }
        if !(self.dose_fraction > 0.0 && self.dose_fraction <= 1.0) {
            return Err(Error::Validation(format!("dose fraction must be in (0, 1], got {}", self.dose_fraction)));
        }
        self.splits.validate()
    }

    pub fn sample_id(index: usize) -> String {
        format!("sample_{index:05}")
    }
}

pub const MANIFEST_HEADER: &str = "id\tsplit\tclean\tnoisy\tdose\tseed";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const META_FILE: &str = "meta.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Paths relative to the manifest's directory.
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub dose: f64,
    /// Per-sample seed driving both the phantom and its noise.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.split,
                e.clean.display(),
                e.noisy.display(),
                e.dose,
                e.seed
            ));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let parse_err = |offset: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        let mut offset = 0;
        let mut entries = Vec::new();
        for (n, line) in text.split_inclusive('\n').enumerate() {
            let at = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if n == 0 {
                if line != MANIFEST_HEADER {
                    return Err(parse_err(at, format!("expected header {MANIFEST_HEADER:?}")));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(parse_err(at, format!("expected 6 tab-separated fields, got {}", f.len())));
            }
            let dose = f[4].parse().map_err(|_| parse_err(at, format!("bad dose {:?}", f[4])))?;
            let seed = f[5].parse().map_err(|_| parse_err(at, format!("bad seed {:?}", f[5])))?;
            let split = f[1].parse().map_err(|e: Error| parse_err(at, e.to_string()))?;
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                split,
                clean: PathBuf::from(f[2]),
                noisy: PathBuf::from(f[3]),
                dose,
                seed,
            });
        }
        if offset == 0 {
            return Err(parse_err(0, "empty manifest".into()));
        }
        Ok(Self { root, entries })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<ImageSample> {
        let clean = load_image(&self.root.join(&e.clean))?;
        let noisy = load_image(&self.root.join(&e.noisy))?;
        if (clean.height, clean.width) != (noisy.height, noisy.width) {
            return Err(Error::Validation(format!("{}: clean and noisy sizes differ", e.id)));
        }
        Ok(ImageSample {
            id: e.id.clone(),
            clean,
            noisy,
            dose_fraction: e.dose,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<ImageSample>> {
        self.split(split).map(|e| self.load_entry(e)).collect()
    }

    /// Loads every pair and checks that all share one size.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let mut size = None;
        for e in &self.entries {
            let s = self.load_entry(e)?;
            let hw = (s.clean.height, s.clean.width);
            match size {
                None => size = Some(hw),
                Some(prev) if prev != hw => {
                    return Err(Error::Validation(format!("{}: size {hw:?} differs from {prev:?}", e.id)))
                }
                _ => {}
            }
        }
        size.ok_or_else(|| Error::Validation("manifest has no entries".into()))
    }
}

/// Writes `clean/` and `noisy/` PGM pairs, `manifest.tsv` and `meta.txt`
/// under `out`. Refuses a non-empty directory unless `force`.
pub fn make_dataset(spec: &DatasetSpec, out: &Path, force: bool) -> Result<Manifest> {
    spec.validate()?;
    if out.exists() {
        let mut it = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if it.next().is_some() && !force {
            return Err(Error::Validation(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    }
    for sub in ["clean", "noisy"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let id = DatasetSpec::sample_id(i);
        let s = synth_sample(&id, spec.size, spec.dose_fraction, &spec.noise, spec.seed)?;
        let clean = PathBuf::from("clean").join(format!("{id}.pgm"));
        let noisy = PathBuf::from("noisy").join(format!("{id}.pgm"));
        save_image(&out.join(&clean), &s.clean)?;
        save_image(&out.join(&noisy), &s.noisy)?;
        entries.push(ManifestEntry {
            split: spec.splits.assign(i, spec.count),
            seed: sample_seed(spec.seed, &id),
            id,
            clean,
            noisy,
            dose: spec.dose_fraction,
        });
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        entries,
    };
    let mpath = out.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_tsv()).map_err(|e| Error::io(&mpath, e))?;
    let meta = format!(
        "noise_model=image-domain Poisson (stand-in for projection-domain insertion)\n\
         i0={}\ndose_fraction={}\nsize={}\ncount={}\nseed={}\nsplits={}/{}/{}\n",
        spec.noise.i0,
        spec.dose_fraction,
        spec.size,
        spec.count,
        spec.seed,
        spec.splits.train,
        spec.splits.val,
        spec.splits.test
    );
    let meta_path = out.join(META_FILE);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(manifest)
}
