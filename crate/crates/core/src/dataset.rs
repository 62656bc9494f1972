//! Procedural affordance dataset: parametric objects sampled on their
//! surface with analytic per-point masks, half-space partial views, the
//! AFPC sample file format and the JSON manifest with stratified splits.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{Point, PointCloud};

pub const CATEGORIES: [&str; 4] = ["bottle", "mug", "knife", "hat"];
/// Affordance vocabulary in lexicographic order.
pub const AFFORDANCES: [&str; 6] = ["contain", "cover", "cut", "grasp", "support", "wrap-grasp"];
pub const MIN_POINTS: usize = 64;
pub const MIN_PER_CATEGORY: usize = 10;
pub const MANIFEST_VERSION: u32 = 1;
pub const AFPC_VERSION: u32 = 1;
const AFPC_MAGIC: &[u8; 4] = b"AFPC";
/// Fraction of points kept by a partial view.
pub const PARTIAL_KEEP: f64 = 0.7;
pub const MIN_SURVIVORS: usize = 8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown category `{0}`; expected one of bottle, mug, knife, hat")]
    UnknownCategory(String),
    #[error("{0} points requested; at least {MIN_POINTS} are required")]
    TooFewPoints(usize),
    #[error("{0} samples per category requested; minimum {MIN_PER_CATEGORY}")]
    TooFewSamples(usize),
    #[error("partial view kept only {0} points; at least {MIN_SURVIVORS} are required")]
    TooFewSurvivors(usize),
    #[error("malformed sample at byte {offset} ({field}): {detail}")]
    Format {
        offset: usize,
        field: &'static str,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid sample: {0}")]
    Invalid(String),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A point cloud with one binary mask per affordance word.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudSample {
    pub pc: PointCloud,
    pub category: String,
    pub affordances: Vec<(String, Vec<u8>)>,
}

impl PointCloudSample {
    pub fn len(&self) -> usize {
        self.pc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pc.is_empty()
    }

    pub fn mask(&self, word: &str) -> Option<&[u8]> {
        self.affordances.iter().find(|(n, _)| n == word).map(|(_, m)| m.as_slice())
    }

    /// Words whose mask has at least one positive point.
    pub fn applicable(&self) -> Vec<&str> {
        self.affordances
            .iter()
            .filter(|(_, m)| m.contains(&1))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pc.len();
        if self.affordances.is_empty() {
            return Err(DatasetError::Invalid("no affordances".into()));
        }
        for (name, m) in &self.affordances {
            if m.len() != n {
                return Err(DatasetError::Invalid(format!("mask `{name}` has {} bits for {n} points", m.len())));
            }
            if m.iter().any(|&b| b > 1) {
                return Err(DatasetError::Invalid(format!("mask `{name}` has a value outside 0/1")));
            }
        }
        Ok(())
    }
}

// ---- shapes -----------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Surface {
    /// Side of a z-aligned cylinder.
    CylinderSide { r: f64, z0: f64, z1: f64 },
    /// Horizontal annulus (a disk when `r0 == 0`).
    Annulus { r0: f64, r1: f64, z: f64 },
    /// Upper hemisphere centered at the origin.
    Hemisphere { r: f64 },
    /// Section `θ ∈ [-π/2, π/2]` of a torus in the xz-plane around `center`.
    TorusArc { center: Point, big: f64, small: f64 },
    /// Axis-aligned rectangle: fixed coordinate `axis = at`, spanning
    /// `lo..hi` in the other two axes (in increasing axis order).
    Rect { axis: usize, at: f64, lo: [f64; 2], hi: [f64; 2] },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::CylinderSide { r, z0, z1 } => 2.0 * PI * r * (z1 - z0),
            Surface::Annulus { r0, r1, .. } => PI * (r1 * r1 - r0 * r0),
            Surface::Hemisphere { r } => 2.0 * PI * r * r,
            Surface::TorusArc { big, small, .. } => PI * big * 2.0 * PI * small,
            Surface::Rect { lo, hi, .. } => (hi[0] - lo[0]) * (hi[1] - lo[1]),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        match *self {
            Surface::CylinderSide { r, z0, z1 } => {
                let t = rng.random::<f64>() * 2.0 * PI;
                [r * t.cos(), r * t.sin(), z0 + rng.random::<f64>() * (z1 - z0)]
            }
            Surface::Annulus { r0, r1, z } => {
                let t = rng.random::<f64>() * 2.0 * PI;
                let rho = (r0 * r0 + rng.random::<f64>() * (r1 * r1 - r0 * r0)).sqrt();
                [rho * t.cos(), rho * t.sin(), z]
            }
            Surface::Hemisphere { r } => {
                // height is uniform on a sphere zone
                let z = rng.random::<f64>() * r;
                let t = rng.random::<f64>() * 2.0 * PI;
                let rho = (r * r - z * z).max(0.0).sqrt();
                [rho * t.cos(), rho * t.sin(), z]
            }
            Surface::TorusArc { center, big, small } => {
                let theta = (rng.random::<f64>() - 0.5) * PI;
                // area element ∝ big + small·cos φ
                let phi = loop {
                    let phi = rng.random::<f64>() * 2.0 * PI;
                    if rng.random::<f64>() * (big + small) <= big + small * phi.cos() {
                        break phi;
                    }
                };
                let ring = big + small * phi.cos();
                [
                    center[0] + ring * theta.cos(),
                    center[1] + small * phi.sin(),
                    center[2] + ring * theta.sin(),
                ]
            }
            Surface::Rect { axis, at, lo, hi } => {
                let a = lo[0] + rng.random::<f64>() * (hi[0] - lo[0]);
                let b = lo[1] + rng.random::<f64>() * (hi[1] - lo[1]);
                match axis {
                    0 => [at, a, b],
                    1 => [a, at, b],
                    _ => [a, b, at],
                }
            }
        }
    }
}

struct Patch {
    surface: Surface,
    labels: &'static [&'static str],
    /// Points with `y` at most this value also get `cut`.
    cut_below_y: Option<f64>,
}

fn patch(surface: Surface, labels: &'static [&'static str]) -> Patch {
    Patch {
        surface,
        labels,
        cut_below_y: None,
    }
}

/// The six faces of an axis-aligned box.
fn box_faces(lo: Point, hi: Point) -> Vec<Surface> {
    let mut faces = Vec::with_capacity(6);
    for axis in 0..3 {
        let (u, v) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for at in [lo[axis], hi[axis]] {
            faces.push(Surface::Rect {
                axis,
                at,
                lo: [lo[u], lo[v]],
                hi: [hi[u], hi[v]],
            });
        }
    }
    faces
}

/// Width of the cutting strip above the blade edge plane `y = 0`.
pub const CUT_STRIP: f64 = 0.02;

fn patches(category: &str) -> Result<Vec<Patch>> {
    Ok(match category {
        "bottle" => vec![
            patch(Surface::CylinderSide { r: 0.3, z0: 0.0, z1: 0.7 }, &["wrap-grasp"]),
            patch(Surface::Annulus { r0: 0.0, r1: 0.3, z: 0.0 }, &[]),
            patch(Surface::Annulus { r0: 0.12, r1: 0.3, z: 0.7 }, &[]),
            patch(Surface::CylinderSide { r: 0.12, z0: 0.7, z1: 1.0 }, &["grasp"]),
            patch(Surface::Annulus { r0: 0.0, r1: 0.12, z: 1.0 }, &["contain"]),
        ],
        "mug" => vec![
            patch(Surface::CylinderSide { r: 0.4, z0: 0.0, z1: 0.8 }, &["wrap-grasp"]),
            patch(Surface::Annulus { r0: 0.0, r1: 0.4, z: 0.0 }, &[]),
            patch(Surface::Annulus { r0: 0.0, r1: 0.36, z: 0.8 }, &["contain"]),
            patch(Surface::Annulus { r0: 0.36, r1: 0.4, z: 0.8 }, &[]),
            patch(
                Surface::TorusArc {
                    center: [0.4, 0.0, 0.4],
                    big: 0.22,
                    small: 0.04,
                },
                &["grasp"],
            ),
        ],
        "knife" => {
            let mut out: Vec<Patch> = box_faces([0.0, 0.0, -0.01], [0.7, 0.15, 0.01])
                .into_iter()
                .map(|s| Patch {
                    surface: s,
                    labels: &[],
                    cut_below_y: Some(CUT_STRIP),
                })
                .collect();
            out.extend(box_faces([-0.35, 0.02, -0.025], [0.0, 0.12, 0.025]).into_iter().map(|s| patch(s, &["grasp"])));
            out
        }
        "hat" => vec![
            patch(Surface::Hemisphere { r: 0.5 }, &["cover"]),
            patch(Surface::Annulus { r0: 0.5, r1: 0.8, z: 0.0 }, &["grasp"]),
        ],
        other => return Err(DatasetError::UnknownCategory(other.to_string())),
    })
}

/// Uniformly random rotation matrix (normalized Gaussian quaternion).
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn apply(m: &[[f64; 3]; 3], p: &Point, s: f64) -> Point {
    [0, 1, 2].map(|r| s * (m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2]))
}

/// Normalizes and rounds coordinates to `f32`, the on-disk precision.
fn finish_cloud(coords: Vec<Point>) -> PointCloud {
    let pc = PointCloud { coords }.normalized();
    PointCloud {
        coords: pc.coords.iter().map(|p| p.map(|v| v as f32 as f64)).collect(),
    }
}

fn empty_masks(n: usize) -> Vec<(String, Vec<u8>)> {
    AFFORDANCES.iter().map(|w| (w.to_string(), vec![0u8; n])).collect()
}

fn set_bit(masks: &mut [(String, Vec<u8>)], word: &str, i: usize) {
    let slot = AFFORDANCES.iter().position(|&w| w == word).expect("affordance word");
    masks[slot].1[i] = 1;
}

/// A randomly posed object of `category` with `n` surface points. The
/// result depends only on the arguments.
pub fn generate_sample(category: &str, seed: u64, n: usize) -> Result<PointCloudSample> {
    let parts = patches(category)?;
    if n < MIN_POINTS {
        return Err(DatasetError::TooFewPoints(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let areas: Vec<f64> = parts.iter().map(|p| p.surface.area()).collect();
    let total: f64 = areas.iter().sum();
    let mut raw = Vec::with_capacity(n);
    let mut masks = empty_masks(n);
    for i in 0..n {
        let mut u = rng.random::<f64>() * total;
        let mut k = 0;
        while k + 1 < parts.len() && u >= areas[k] {
            u -= areas[k];
            k += 1;
        }
        let p = parts[k].surface.sample(&mut rng);
        for w in parts[k].labels {
            set_bit(&mut masks, w, i);
        }
        if parts[k].cut_below_y.is_some_and(|y| p[1] <= y) {
            set_bit(&mut masks, "cut", i);
        }
        raw.push(p);
    }
    let rot = random_rotation(&mut rng);
    let scale = rng.random_range(0.8..=1.25);
    let coords = raw.iter().map(|p| apply(&rot, p, scale)).collect();
    Ok(PointCloudSample {
        pc: finish_cloud(coords),
        category: category.to_string(),
        affordances: masks,
    })
}

/// Survivor indices and resampled survivor picks of a partial view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSelection {
    pub direction: Point,
    /// Projection threshold; survivors project strictly above it.
    pub threshold: f64,
    pub survivors: Vec<usize>,
    /// `N` indices into the original sample, drawn from `survivors`.
    pub picks: Vec<usize>,
}

pub fn partial_view_selection(sample: &PointCloudSample, view_seed: u64) -> Result<ViewSelection> {
    let n = sample.len();
    let mut rng = ChaCha8Rng::seed_from_u64(view_seed);
    let direction = loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 1e-9 {
            break v.map(|c| c / len);
        }
    };
    let c = sample.pc.centroid();
    let proj: Vec<f64> = sample
        .pc
        .coords
        .iter()
        .map(|p| (p[0] - c[0]) * direction[0] + (p[1] - c[1]) * direction[1] + (p[2] - c[2]) * direction[2])
        .collect();
    let keep = (PARTIAL_KEEP * n as f64).ceil() as usize;
    let mut sorted = proj.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = if keep >= n { f64::NEG_INFINITY } else { sorted[n - keep - 1] };
    let survivors: Vec<usize> = (0..n).filter(|&i| proj[i] > threshold).collect();
    if survivors.len() < MIN_SURVIVORS {
        return Err(DatasetError::TooFewSurvivors(survivors.len()));
    }
    let picks = (0..n).map(|_| survivors[rng.random_range(0..survivors.len())]).collect();
    Ok(ViewSelection {
        direction,
        threshold,
        survivors,
        picks,
    })
}

/// Keeps the points on one side of a random plane (about 70%), resamples
/// them with replacement back to `N` and re-normalizes.
pub fn partial_view(sample: &PointCloudSample, view_seed: u64) -> Result<PointCloudSample> {
    let sel = partial_view_selection(sample, view_seed)?;
    let coords = sel.picks.iter().map(|&i| sample.pc.coords[i]).collect();
    let affordances = sample
        .affordances
        .iter()
        .map(|(name, m)| (name.clone(), sel.picks.iter().map(|&i| m[i]).collect()))
        .collect();
    Ok(PointCloudSample {
        pc: finish_cloud(coords),
        category: sample.category.clone(),
        affordances,
    })
}

/// View seed used for the partial-view task of a sample.
pub fn view_seed(sample_seed: u64) -> u64 {
    sample_seed ^ 0x9E37_79B9_7F4A_7C15
}

// ---- AFPC file format -------------------------------------------------

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| DatasetError::Invalid(format!("string of {} bytes is too long", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_sample(sample: &PointCloudSample) -> Result<Vec<u8>> {
    sample.validate()?;
    let n = sample.len();
    let count = |v: usize, what: &str| u32::try_from(v).map_err(|_| DatasetError::Invalid(format!("too many {what}")));
    let mut out = Vec::with_capacity(32 + n * 12 + n * sample.affordances.len());
    out.extend_from_slice(AFPC_MAGIC);
    out.extend_from_slice(&AFPC_VERSION.to_le_bytes());
    out.extend_from_slice(&count(n, "points")?.to_le_bytes());
    out.extend_from_slice(&count(sample.affordances.len(), "affordances")?.to_le_bytes());
    put_str(&mut out, &sample.category)?;
    for (name, _) in &sample.affordances {
        put_str(&mut out, name)?;
    }
    for p in &sample.pc.coords {
        for &v in p {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for (_, m) in &sample.affordances {
        out.extend_from_slice(m);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, field: &'static str, detail: impl Into<String>) -> DatasetError {
        DatasetError::Format {
            offset: self.pos,
            field,
            detail: detail.into(),
        }
    }

    fn take(&mut self, len: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.fail(
                field,
                format!("truncated: need {len} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn string(&mut self, field: &'static str) -> Result<String> {
        let len = self.u16(field)? as usize;
        let at = self.pos;
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DatasetError::Format {
            offset: at,
            field,
            detail: "invalid UTF-8".into(),
        })
    }
}

pub fn decode_sample(bytes: &[u8]) -> Result<PointCloudSample> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != AFPC_MAGIC {
        return Err(DatasetError::Format {
            offset: 0,
            field: "magic",
            detail: format!("expected \"AFPC\", found {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != AFPC_VERSION {
        return Err(DatasetError::Format {
            offset: at,
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let n = r.u32("point count")? as usize;
    let a = r.u32("affordance count")? as usize;
    if n == 0 {
        return Err(r.fail("point count", "zero points"));
    }
    let category = r.string("category")?;
    let mut names = Vec::with_capacity(a.min(1024));
    for _ in 0..a {
        names.push(r.string("affordance name")?);
    }
    let mut coords = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let at = r.pos;
        let raw = r.take(12, "coordinates")?;
        let p: Point = [0, 1, 2].map(|k| f32::from_le_bytes(raw[4 * k..4 * k + 4].try_into().unwrap()) as f64);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Format {
                offset: at,
                field: "coordinates",
                detail: "non-finite coordinate".into(),
            });
        }
        coords.push(p);
    }
    let mut affordances = Vec::with_capacity(names.len());
    for name in names {
        let start = r.pos;
        let m = r.take(n, "mask")?;
        if let Some(k) = m.iter().position(|&b| b > 1) {
            return Err(DatasetError::Format {
                offset: start + k,
                field: "mask",
                detail: format!("label byte {} for `{name}` is not 0 or 1", m[k]),
            });
        }
        affordances.push((name, m.to_vec()));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    Ok(PointCloudSample {
        pc: PointCloud { coords },
        category,
        affordances,
    })
}

pub fn write_sample(sample: &PointCloudSample, path: &Path) -> Result<()> {
    let bytes = encode_sample(sample)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_sample(path: &Path) -> Result<PointCloudSample> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_sample(&bytes)
}

// ---- manifest -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub category: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`; valid splits: train, val, test")),
        }
    }
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    #[serde(rename = "N")]
    pub n: usize,
    pub per_category: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub affordances: Vec<String>,
    pub samples: Vec<SampleEntry>,
    pub splits: Splits,
    pub generator: GeneratorParams,
}

/// Stable 64-bit hash of `(category, index)`.
pub fn stable_hash(category: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(category.as_bytes());
    h.update([0u8]);
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn sample_seed(global_seed: u64, category: &str, index: usize) -> u64 {
    global_seed.wrapping_add(stable_hash(category, index))
}

/// Train/val/test counts for `n` samples of one category.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let val = (0.1 * n as f64).round() as usize;
    (train, val, n - train - val)
}

impl DatasetManifest {
    /// Entries and splits without generating any sample data.
    pub fn plan(per_category: usize, global_seed: u64, n: usize) -> Result<Self> {
        if per_category < MIN_PER_CATEGORY {
            return Err(DatasetError::TooFewSamples(per_category));
        }
        if n < MIN_POINTS {
            return Err(DatasetError::TooFewPoints(n));
        }
        let mut samples = Vec::with_capacity(per_category * CATEGORIES.len());
        let mut splits = Splits::default();
        let (n_train, n_val, _) = split_counts(per_category);
        for cat in CATEGORIES {
            for i in 0..per_category {
                let pos = samples.len();
                let id = format!("{cat}_{i:04}");
                samples.push(SampleEntry {
                    path: format!("samples/{id}.afpc"),
                    id,
                    category: cat.to_string(),
                    seed: sample_seed(global_seed, cat, i),
                });
                let bucket = if i < n_train {
                    &mut splits.train
                } else if i < n_train + n_val {
                    &mut splits.val
                } else {
                    &mut splits.test
                };
                bucket.push(pos);
            }
        }
        Ok(DatasetManifest {
            format_version: MANIFEST_VERSION,
            affordances: AFFORDANCES.iter().map(|s| s.to_string()).collect(),
            samples,
            splits,
            generator: GeneratorParams {
                n,
                per_category,
                seed: global_seed,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest(format!("unsupported format_version {}", self.format_version)));
        }
        let mut seen = vec![false; self.samples.len()];
        for &i in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            match seen.get_mut(i) {
                None => return Err(DatasetError::Manifest(format!("split index {i} out of range"))),
                Some(true) => return Err(DatasetError::Manifest(format!("sample {i} appears in two splits"))),
                Some(s) => *s = true,
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(DatasetError::Manifest(format!("sample {i} is in no split")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }
}

/// A manifest together with the directory its sample paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Dataset { root, manifest })
    }

    pub fn sample_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.manifest.samples[index].path)
    }

    /// Reads sample `index`; `partial` applies its partial view.
    pub fn load(&self, index: usize, partial: bool) -> Result<PointCloudSample> {
        let s = read_sample(&self.sample_path(index))?;
        if partial {
            partial_view(&s, view_seed(self.manifest.samples[index].seed))
        } else {
            Ok(s)
        }
    }

    pub fn load_split(&self, split: Split, partial: bool) -> Result<Vec<PointCloudSample>> {
        self.manifest.splits.get(split).iter().map(|&i| self.load(i, partial)).collect()
    }
}

/// Generates every sample into `out_dir/samples/` and writes
/// `out_dir/manifest.json`.
pub fn build_manifest(per_category: usize, global_seed: u64, n: usize, out_dir: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::plan(per_category, global_seed, n)?;
    let sample_dir = out_dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(io_err(&sample_dir))?;
    for entry in &manifest.samples {
        let sample = generate_sample(&entry.category, entry.seed, n)?;
        write_sample(&sample, &out_dir.join(&entry.path))?;
    }
    let path = out_dir.join("manifest.json");
    fs::write(&path, manifest.to_json()).map_err(io_err(&path))?;
    Ok(manifest)
}
