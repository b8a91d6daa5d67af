//! Point-cloud ingestion and datasets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::PointCloudBatch;
use crate::tensor::{Rng, Tensor};

pub const CACHE_MAGIC: &[u8; 4] = b"SAPC";
pub const CACHE_VERSION: u16 = 1;
pub const SYNTH_JITTER: f32 = 0.01;
pub const SYNTH_CLASSES: [&str; 4] = ["cube", "disk", "planes", "sphere"];

#[derive(Debug, Clone, PartialEq)]
pub struct MeshOff {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl MeshOff {
    /// Parses ASCII OFF. Polygons with more than three vertices are
    /// fan-triangulated. Accepts the `OFF<nv> <nf> <ne>` header variant that
    /// some ModelNet40 files use.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let header = tokens.next().ok_or_else(|| Error::Parse("empty OFF file".into()))?;
        let rest = header
            .strip_prefix("OFF")
            .ok_or_else(|| Error::Parse(format!("expected OFF header, found `{header}`")))?;
        let mut counts: Vec<&str> = Vec::new();
        if !rest.is_empty() {
            counts.push(rest);
        }
        while counts.len() < 3 {
            counts.push(tokens.next().ok_or_else(|| Error::Parse("missing OFF counts".into()))?);
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad count `{s}`")));
        let nv = parse_usize(counts[0])?;
        let nf = parse_usize(counts[1])?;
        let mut next_f32 = || -> Result<f32> {
            let tok = tokens
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of OFF".into()))?;
            tok.parse::<f32>()
                .map_err(|_| Error::Parse(format!("bad number `{tok}`")))
        };
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            vertices.push([next_f32()?, next_f32()?, next_f32()?]);
        }
        let mut faces = Vec::with_capacity(nf);
        for _ in 0..nf {
            let arity = next_f32()? as usize;
            let mut poly = Vec::with_capacity(arity);
            for _ in 0..arity {
                let idx = next_f32()?;
                if idx < 0.0 || idx.fract() != 0.0 || idx as usize >= nv {
                    return Err(Error::Parse(format!("face index {idx} out of range for {nv} vertices")));
                }
                poly.push(idx as usize);
            }
            for j in 1..arity.saturating_sub(1) {
                faces.push([poly[0], poly[j], poly[j + 1]]);
            }
        }
        Ok(MeshOff { vertices, faces })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    fn triangle(&self, f: usize) -> [[f64; 3]; 3] {
        self.faces[f].map(|v| self.vertices[v].map(f64::from))
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn triangle_area(t: [[f64; 3]; 3]) -> f64 {
    let c = cross(sub(t[1], t[0]), sub(t[2], t[0]));
    0.5 * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

/// Samples `n` points area-proportionally over the triangles, uniformly within each.
pub fn sample_mesh(mesh: &MeshOff, n: usize, rng: &mut Rng) -> Result<Tensor> {
    sample_mesh_with_faces(mesh, n, rng).map(|(t, _)| t)
}

/// Like [`sample_mesh`] but also returns the source triangle of every point.
pub fn sample_mesh_with_faces(mesh: &MeshOff, n: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += triangle_area(mesh.triangle(f));
        cumulative.push(total);
    }
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Degenerate("mesh has zero surface area".into()));
    }
    let mut data = Vec::with_capacity(n * 3);
    let mut source = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.uniform_f64() * total;
        let f = cumulative.partition_point(|&c| c <= target).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.triangle(f);
        let (r1, r2) = (rng.uniform_f64().sqrt(), rng.uniform_f64());
        let (u, v, w) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        for k in 0..3 {
            data.push((u * a[k] + v * b[k] + w * c[k]) as f32);
        }
        source.push(f);
    }
    Ok((Tensor::new(vec![n, 3], data)?, source))
}

fn check_cloud(op: &'static str, points: &Tensor) -> Result<usize> {
    if points.rank() != 2 || points.shape()[1] != 3 {
        return Err(Error::shape(op, points.shape(), &[0, 3]));
    }
    Ok(points.shape()[0])
}

/// Centers a `[n, 3]` cloud at its centroid and scales it to unit max radius.
pub fn normalize_cloud(points: &Tensor) -> Result<Tensor> {
    let n = check_cloud("normalize_cloud", points)?;
    if n == 0 {
        return Err(Error::EmptyInput("normalize_cloud"));
    }
    let mut centroid = [0.0f64; 3];
    for p in points.data().chunks_exact(3) {
        for k in 0..3 {
            centroid[k] += f64::from(p[k]);
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);
    let radius = points
        .data()
        .chunks_exact(3)
        .map(|p| {
            (0..3)
                .map(|k| (f64::from(p[k]) - centroid[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    if radius == 0.0 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let data = points
        .data()
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |k| ((f64::from(p[k]) - centroid[k]) / radius) as f32))
        .collect();
    Tensor::new(vec![n, 3], data)
}

/// Uniform random subset of `m` rows without replacement.
pub fn subsample_density(points: &Tensor, m: usize, rng: &mut Rng) -> Result<Tensor> {
    let n = check_cloud("subsample_density", points)?;
    if m > n {
        return Err(Error::Subsample { m, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    Ok(gather_rows(points, &idx[..m]))
}

/// Subsets for several sizes from one permutation, so each smaller subset is
/// contained in every larger one.
pub fn subsample_nested(points: &Tensor, sizes: &[usize], rng: &mut Rng) -> Result<Vec<Tensor>> {
    let n = check_cloud("subsample_nested", points)?;
    if let Some(&m) = sizes.iter().find(|&&m| m > n) {
        return Err(Error::Subsample { m, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    Ok(sizes.iter().map(|&m| gather_rows(points, &idx[..m])).collect())
}

fn gather_rows(points: &Tensor, idx: &[usize]) -> Tensor {
    let data = idx
        .iter()
        .flat_map(|&i| points.data()[i * 3..i * 3 + 3].iter().copied())
        .collect();
    Tensor::new(vec![idx.len(), 3], data).expect("3 values per row")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_min: f32,
    pub scale_max: f32,
    pub translate: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            scale_min: 0.8,
            scale_max: 1.25,
            translate: 0.1,
        }
    }
}

/// Training-time augmentation: per-axis scale and translation. No rotation.
pub fn augment(points: &Tensor, rng: &mut Rng, cfg: &AugmentConfig) -> Tensor {
    if !cfg.enabled {
        return points.clone();
    }
    let scale = [0; 3].map(|_| rng.uniform(cfg.scale_min, cfg.scale_max));
    let shift = [0; 3].map(|_| rng.uniform(-cfg.translate, cfg.translate));
    let mut out = points.clone();
    for p in out.data_mut().chunks_exact_mut(3) {
        for k in 0..3 {
            p[k] = p[k] * scale[k] + shift[k];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub label: usize,
    /// `[n, 3]`
    pub points: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub points_per_cloud: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            classes: self.classes.clone(),
            train_ids: self.train.iter().map(|s| s.id).collect(),
            test_ids: self.test.iter().map(|s| s.id).collect(),
            points_per_cloud: self.points_per_cloud,
            seed: self.seed,
        }
    }

    /// Writes `manifest.json`, `train.sapc` and `test.sapc` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::Parse(e.to_string()))?;
        let path = dir.join("manifest.json");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        for (name, samples) in [("train.sapc", &self.train), ("test.sapc", &self.test)] {
            cache_write(&dir.join(name), samples, self.classes.len(), self.points_per_cloud)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let mut splits = Vec::with_capacity(2);
        for (name, ids) in [("train.sapc", &manifest.train_ids), ("test.sapc", &manifest.test_ids)] {
            let path = dir.join(name);
            let cache = cache_read(&path)?;
            if cache.samples.len() != ids.len() || cache.points_per_cloud != manifest.points_per_cloud {
                return Err(Error::Corrupt {
                    path,
                    reason: "cache disagrees with manifest".into(),
                });
            }
            let samples: Vec<Sample> = cache
                .samples
                .into_iter()
                .zip(ids)
                .map(|(s, &id)| Sample { id, ..s })
                .collect();
            splits.push(samples);
        }
        let test = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        Ok(Dataset {
            classes: manifest.classes,
            train,
            test,
            points_per_cloud: manifest.points_per_cloud,
            seed: manifest.seed,
        })
    }
}

/// Class names in label order, the split membership, and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub points_per_cloud: usize,
    pub seed: u64,
}

fn unit_direction(rng: &mut Rng) -> [f32; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 1e-6 {
            return v.map(|c| c / len);
        }
    }
}

fn synth_shape(class: usize, n: usize, rng: &mut Rng) -> Vec<[f32; 3]> {
    let mut pts = Vec::with_capacity(n);
    match SYNTH_CLASSES[class] {
        "cube" => {
            for _ in 0..n {
                let face = rng.below(6);
                let (a, b) = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
                let s = if face.is_multiple_of(2) { 1.0 } else { -1.0 };
                pts.push(match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                });
            }
        }
        "disk" => {
            for _ in 0..n {
                let r = rng.uniform(0.0, 1.0).sqrt();
                let theta = rng.uniform(0.0, std::f32::consts::TAU);
                pts.push([r * theta.cos(), r * theta.sin(), rng.uniform(-0.05, 0.05)]);
            }
        }
        "planes" => {
            for i in 0..n {
                let z = if i % 2 == 0 { 0.35 } else { -0.35 };
                pts.push([rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), z]);
            }
        }
        _ => {
            // antipodal pairs keep the clean sample centered
            while pts.len() < n {
                let d = unit_direction(rng);
                pts.push(d);
                if pts.len() < n {
                    pts.push(d.map(|c| -c));
                }
            }
        }
    }
    pts
}

/// Four-class desk-scale dataset: cube surface, thin disk, two parallel planes,
/// sphere surface. Each point is displaced by Gaussian jitter (σ = 0.01, length
/// capped at σ) and each cloud normalized. Every class is split 80/20 into
/// train/test by a seeded shuffle.
pub fn synth_shapes(num_per_class: usize, n_points: usize, rng: &mut Rng) -> Result<Dataset> {
    if n_points < 64 {
        return Err(Error::Config(format!(
            "synthetic clouds need at least 64 points, got {n_points}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_train = num_per_class * 4 / 5;
    for class in 0..SYNTH_CLASSES.len() {
        let mut ids: Vec<u32> = (0..num_per_class).map(|j| (class * num_per_class + j) as u32).collect();
        rng.shuffle(&mut ids);
        for (rank, &id) in ids.iter().enumerate() {
            let mut sample_rng = rng.fork(u64::from(id) + 1);
            let mut pts = synth_shape(class, n_points, &mut sample_rng);
            for p in &mut pts {
                let j = [0; 3].map(|_| sample_rng.normal() * SYNTH_JITTER);
                let len = (j[0] * j[0] + j[1] * j[1] + j[2] * j[2]).sqrt();
                let cap = if len > SYNTH_JITTER { SYNTH_JITTER / len } else { 1.0 };
                for k in 0..3 {
                    p[k] += j[k] * cap;
                }
            }
            let raw = Tensor::new(vec![n_points, 3], pts.into_iter().flatten().collect())?;
            let sample = Sample {
                id,
                label: class,
                points: normalize_cloud(&raw)?,
            };
            if rank < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(Dataset {
        classes: SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
        train,
        test,
        points_per_cloud: n_points,
        seed: rng.seed(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCache {
    pub num_classes: usize,
    pub points_per_cloud: usize,
    pub samples: Vec<Sample>,
}

/// Writes the `SAPC` cache: header, one `label + n×3 f32` record per sample,
/// then a CRC32 of everything before it. All integers little-endian.
pub fn cache_write(path: &Path, samples: &[Sample], num_classes: usize, points_per_cloud: usize) -> Result<()> {
    let bytes = cache_encode(samples, num_classes, points_per_cloud)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn cache_encode(samples: &[Sample], num_classes: usize, points_per_cloud: usize) -> Result<Vec<u8>> {
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit the cache header")))
    };
    let mut out = Vec::with_capacity(16 + samples.len() * (2 + points_per_cloud * 12));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&narrow(num_classes, "class count")?.to_le_bytes());
    out.extend_from_slice(&narrow(points_per_cloud, "points per cloud")?.to_le_bytes());
    for s in samples {
        if s.points.shape() != [points_per_cloud, 3] {
            return Err(Error::shape("cache_write", s.points.shape(), &[points_per_cloud, 3]));
        }
        out.extend_from_slice(&narrow(s.label, "label")?.to_le_bytes());
        for v in s.points.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn cache_read(path: &Path) -> Result<PointCache> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    cache_decode(&bytes).map_err(|reason| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn cache_decode(bytes: &[u8]) -> std::result::Result<PointCache, String> {
    const HEADER: usize = 14;
    if bytes.len() < HEADER + 4 {
        return Err("truncated header".into());
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if &body[..4] != CACHE_MAGIC {
        return Err("bad magic".into());
    }
    let u16_at = |o: usize| u16::from_le_bytes([body[o], body[o + 1]]);
    let version = u16_at(4);
    if version != CACHE_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = u32::from_le_bytes(body[6..10].try_into().expect("4 bytes")) as usize;
    let num_classes = usize::from(u16_at(10));
    let ppc = usize::from(u16_at(12));
    let record = 2 + ppc * 12;
    let expected = count
        .checked_mul(record)
        .and_then(|r| r.checked_add(HEADER))
        .ok_or("record count overflows")?;
    if body.len() != expected {
        return Err(format!(
            "expected {expected} payload bytes, found {} (truncated?)",
            body.len()
        ));
    }
    if u32::from_le_bytes(crc.try_into().expect("4 bytes")) != crc32fast::hash(body) {
        return Err("CRC mismatch".into());
    }
    let samples = body[HEADER..]
        .chunks_exact(record)
        .enumerate()
        .map(|(i, rec)| {
            let points = rec[2..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Sample {
                id: i as u32,
                label: usize::from(u16::from_le_bytes([rec[0], rec[1]])),
                points: Tensor::new(vec![ppc, 3], points).expect("record size checked"),
            }
        })
        .collect();
    Ok(PointCache {
        num_classes,
        points_per_cloud: ppc,
        samples,
    })
}

/// Class directories under `root`, sorted lexicographically.
pub fn modelnet_classes(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut classes: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|name| !name.starts_with('.') && name != "samlp_cache")
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Config(format!("no class directories under {}", root.display())));
    }
    Ok(classes)
}

fn off_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("off")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a ModelNet40-style tree (`class/{train,test}/*.off`), sampling each
/// mesh once into a cache under `root/samlp_cache` and reusing it afterwards.
pub fn load_modelnet40(root: &Path, points_per_cloud: usize, seed: u64) -> Result<Dataset> {
    let cache_dir = root.join("samlp_cache").join(format!("n{points_per_cloud}_s{seed}"));
    if cache_dir.join("manifest.json").is_file() {
        return Dataset::load(&cache_dir);
    }
    let classes = modelnet_classes(root)?;
    let base = Rng::new(seed);
    let mut next_id = 0u32;
    let mut splits = [Vec::new(), Vec::new()];
    for (label, class) in classes.iter().enumerate() {
        for (s, split) in ["train", "test"].iter().enumerate() {
            for path in off_files(&root.join(class).join(split))? {
                let mesh = MeshOff::read(&path)?;
                let mut rng = base.fork(u64::from(next_id) + 1);
                let pts = sample_mesh(&mesh, points_per_cloud, &mut rng).map_err(|e| Error::Corrupt {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                splits[s].push(Sample {
                    id: next_id,
                    label,
                    points: normalize_cloud(&pts)?,
                });
                next_id += 1;
            }
        }
    }
    let [train, test] = splits;
    if train.is_empty() {
        return Err(Error::Config(format!("no training meshes under {}", root.display())));
    }
    let ds = Dataset {
        classes,
        train,
        test,
        points_per_cloud,
        seed,
    };
    ds.save(&cache_dir)?;
    Ok(ds)
}

/// Stacks samples into a batch, passing each cloud through `transform`.
pub fn make_batch(
    samples: &[&Sample],
    mut transform: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<PointCloudBatch> {
    let clouds = samples
        .iter()
        .map(|s| transform(&s.points))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = clouds.iter().collect();
    Ok(PointCloudBatch {
        points: Tensor::stack(&refs)?,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}
