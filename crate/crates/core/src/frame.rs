//! Per-frame record container: the boundary between foundation-model
//! exporters and the engine.
//!
//! A sequence is a directory holding one binary file per frame plus a
//! `manifest.txt` listing those files (relative paths) in temporal order.
//! Every frame file is little-endian:
//!
//! ```text
//! magic        8 bytes   b"SSEGFRM\0"
//! version      u16       1
//! dtype codes  4 x u8    points, features, attention, labels
//! reserved     u16       0
//! dims         7 x u32   t, H, W, patch_size, d2, d3, n_s
//! K            9 x f64   row-major 3x3 intrinsics
//! P            16 x f64  row-major 4x4 camera-to-world pose
//! X            H*W*3     pointmap (world coordinates)
//! F2d          h*w*d2    semantic features
//! F3d          h*w*d3    geometric features
//! A            n_s*h*w   state attention, one row per state token
//! L            H*W       u16 instance labels, 0 = background
//! ```
//!
//! All arrays are row-major; `h = H / patch_size`, `w = W / patch_size`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};

pub const MAGIC: [u8; 8] = *b"SSEGFRM\0";
pub const VERSION: u16 = 1;
pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const MANIFEST: &str = "manifest.txt";

/// Dtype codes carried in the header.
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U16: u8 = 2;

const ROW_SUM_TOL: f64 = 1e-4;
const ROW_SUM_RENORM_BAND: (f64, f64) = (0.99, 1.01);
const ROTATION_TOL: f64 = 1e-4;

/// One timestep of foundation-model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub t: u32,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub intrinsics: [[f64; 3]; 3],
    pub pose: [[f64; 4]; 4],
    /// `H*W*3` world-coordinate pointmap.
    pub points: Vec<f32>,
    pub d2: usize,
    /// `h*w*d2` semantic feature map.
    pub feat2d: Vec<f32>,
    pub d3: usize,
    /// `h*w*d3` geometric feature map.
    pub feat3d: Vec<f32>,
    pub n_state: usize,
    /// `n_s*(h*w)` state attention.
    pub attention: Vec<f32>,
    /// `H*W` instance labels.
    pub labels: Vec<u16>,
}

impl FrameRecord {
    pub fn grid_h(&self) -> usize {
        self.height / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn camera(&self) -> Intrinsics {
        Intrinsics::from_matrix(&self.intrinsics)
    }

    pub fn camera_pose(&self) -> Pose {
        Pose::from_matrix(&self.pose)
    }

    pub fn point(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.points[i] as f64, self.points[i + 1] as f64, self.points[i + 2] as f64]
    }

    pub fn attention_row(&self, token: usize) -> &[f32] {
        let n = self.n_patches();
        &self.attention[token * n..(token + 1) * n]
    }

    /// Largest instance label present.
    pub fn n_instances(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Bitwise equality, so records holding NaN points still compare equal to their copies.
    pub fn same_bits(&self, other: &FrameRecord) -> bool {
        fn f32_bits(a: &[f32], b: &[f32]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        let hdr = self.t == other.t
            && self.height == other.height
            && self.width == other.width
            && self.patch_size == other.patch_size
            && self.d2 == other.d2
            && self.d3 == other.d3
            && self.n_state == other.n_state;
        let k = self.intrinsics.iter().flatten().zip(other.intrinsics.iter().flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let p = self.pose.iter().flatten().zip(other.pose.iter().flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        hdr && k && p
            && f32_bits(&self.points, &other.points)
            && f32_bits(&self.feat2d, &other.feat2d)
            && f32_bits(&self.feat3d, &other.feat3d)
            && f32_bits(&self.attention, &other.attention)
            && self.labels == other.labels
    }

    /// Checks every record invariant, with attention rows held to the strict tolerance.
    pub fn validate(&self) -> Result<()> {
        self.validate_dims()?;
        self.validate_pose()?;
        self.validate_intrinsics()?;
        validate_finite("feat2d", &self.feat2d)?;
        validate_finite("feat3d", &self.feat3d)?;
        for token in 0..self.n_state {
            let row = self.attention_row(token);
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::validation(
                    "attention",
                    format!("row {token} has a negative or non-finite entry"),
                ));
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::validation("attention", format!("row {token} sums to {sum}")));
            }
        }
        self.validate_labels()
    }

    fn validate_dims(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::validation("patch_size", "must be positive"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("H/W", "image must be non-empty"));
        }
        if self.height % self.patch_size != 0 {
            return Err(Error::validation("H", format!(
                "{} is not a multiple of patch_size {}", self.height, self.patch_size
            )));
        }
        if self.width % self.patch_size != 0 {
            return Err(Error::validation("W", format!(
                "{} is not a multiple of patch_size {}", self.width, self.patch_size
            )));
        }
        if self.n_state == 0 {
            return Err(Error::validation("A", "at least one state token is required"));
        }
        let pixels = self.height * self.width;
        let n = self.n_patches();
        let checks: [(&'static str, usize, usize); 5] = [
            ("X", self.points.len(), pixels * 3),
            ("F2d", self.feat2d.len(), n * self.d2),
            ("F3d", self.feat3d.len(), n * self.d3),
            ("A", self.attention.len(), self.n_state * n),
            ("L", self.labels.len(), pixels),
        ];
        for (field, got, want) in checks {
            if got != want {
                return Err(Error::validation(field, format!("length {got}, expected {want}")));
            }
        }
        Ok(())
    }

    fn validate_pose(&self) -> Result<()> {
        let p = &self.pose;
        if p.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("P", "non-finite entry"));
        }
        if p[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::validation("P", "bottom row must be (0, 0, 0, 1)"));
        }
        let pose = Pose::from_matrix(p);
        let ortho = pose.orthonormality_error();
        if ortho > ROTATION_TOL {
            return Err(Error::validation("P", format!("rotation not orthonormal (error {ortho:.3e})")));
        }
        let det = pose.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::validation("P", format!("rotation determinant {det}")));
        }
        Ok(())
    }

    fn validate_intrinsics(&self) -> Result<()> {
        let k = &self.intrinsics;
        if k.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("K", "non-finite entry"));
        }
        if k[0][0] <= 0.0 || k[1][1] <= 0.0 {
            return Err(Error::validation("K", "focal lengths must be positive"));
        }
        if k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::validation("K", "not an upper-triangular pinhole matrix"));
        }
        Ok(())
    }

    fn validate_labels(&self) -> Result<()> {
        let max = self.n_instances();
        let mut seen = vec![false; max + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=max).find(|&l| !seen[l]) {
            return Err(Error::validation(
                "L",
                format!("labels are not contiguous: {missing} missing below max {max}"),
            ));
        }
        Ok(())
    }

    /// Rescales attention rows whose sums sit inside the tolerated exporter-noise band.
    /// Rows already within the strict tolerance are left bit-identical.
    fn renormalize_attention(&mut self) -> Result<()> {
        let n = self.n_patches();
        for (token, row) in self.attention.chunks_mut(n.max(1)).enumerate() {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() <= ROW_SUM_TOL {
                continue;
            }
            if sum >= ROW_SUM_RENORM_BAND.0 && sum <= ROW_SUM_RENORM_BAND.1 {
                for v in row.iter_mut() {
                    *v = (*v as f64 / sum) as f32;
                }
            } else {
                return Err(Error::validation("attention", format!("row {token} sums to {sum}")));
            }
        }
        Ok(())
    }
}

fn validate_finite(field: &'static str, data: &[f32]) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(field, format!("non-finite value at index {i}")));
    }
    Ok(())
}

pub fn write_frame_to<W: Write>(frame: &FrameRecord, mut out: W) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_u16::<LE>(VERSION)?;
    for code in [DTYPE_F32, DTYPE_F32, DTYPE_F32, DTYPE_U16] {
        out.write_u8(code)?;
    }
    out.write_u16::<LE>(0)?;
    for dim in [
        frame.t as usize,
        frame.height,
        frame.width,
        frame.patch_size,
        frame.d2,
        frame.d3,
        frame.n_state,
    ] {
        let v = u32::try_from(dim).map_err(|_| Error::Format(format!("dimension {dim} overflows u32")))?;
        out.write_u32::<LE>(v)?;
    }
    for v in frame.intrinsics.iter().flatten() {
        out.write_f64::<LE>(*v)?;
    }
    for v in frame.pose.iter().flatten() {
        out.write_f64::<LE>(*v)?;
    }
    for payload in [&frame.points, &frame.feat2d, &frame.feat3d, &frame.attention] {
        for v in payload.iter() {
            out.write_f32::<LE>(*v)?;
        }
    }
    for v in &frame.labels {
        out.write_u16::<LE>(*v)?;
    }
    Ok(())
}

pub fn write_frame(frame: &FrameRecord, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_frame_to(frame, &mut out)?;
    out.flush()?;
    Ok(())
}

fn read_f32s(input: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut v = vec![0.0f32; n];
    input
        .read_f32_into::<LE>(&mut v)
        .map_err(|e| Error::Format(format!("truncated {what} payload: {e}")))?;
    Ok(v)
}

/// Parses and validates one frame from a byte stream.
pub fn read_frame_from<R: Read>(mut input: R) -> Result<FrameRecord> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated header: {e}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(fmt)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = input.read_u16::<LE>().map_err(fmt)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut codes = [0u8; 4];
    input.read_exact(&mut codes).map_err(fmt)?;
    if codes != [DTYPE_F32, DTYPE_F32, DTYPE_F32, DTYPE_U16] {
        return Err(Error::Format(format!("unsupported dtype codes {codes:?}")));
    }
    let _reserved = input.read_u16::<LE>().map_err(fmt)?;
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = input.read_u32::<LE>().map_err(fmt)? as usize;
    }
    let [t, height, width, patch_size, d2, d3, n_state] = dims;
    if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
        return Err(Error::Format(format!(
            "image {height}x{width} is not tiled by patch_size {patch_size}"
        )));
    }
    let mut intrinsics = [[0.0; 3]; 3];
    for v in intrinsics.iter_mut().flatten() {
        *v = input.read_f64::<LE>().map_err(fmt)?;
    }
    let mut pose = [[0.0; 4]; 4];
    for v in pose.iter_mut().flatten() {
        *v = input.read_f64::<LE>().map_err(fmt)?;
    }
    let pixels = height * width;
    let n = (height / patch_size) * (width / patch_size);
    let points = read_f32s(&mut input, pixels * 3, "X")?;
    let feat2d = read_f32s(&mut input, n * d2, "F2d")?;
    let feat3d = read_f32s(&mut input, n * d3, "F3d")?;
    let attention = read_f32s(&mut input, n * n_state, "A")?;
    let mut labels = vec![0u16; pixels];
    input
        .read_u16_into::<LE>(&mut labels)
        .map_err(|e| Error::Format(format!("truncated L payload: {e}")))?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let mut frame = FrameRecord {
        t: t as u32,
        height,
        width,
        patch_size,
        intrinsics,
        pose,
        points,
        d2,
        feat2d,
        d3,
        feat3d,
        n_state,
        attention,
        labels,
    };
    frame.validate_dims()?;
    frame.renormalize_attention()?;
    frame.validate()?;
    Ok(frame)
}

pub fn read_frame(path: &Path) -> Result<FrameRecord> {
    read_frame_from(BufReader::new(File::open(path)?))
}

/// Writes `frames` plus a manifest into `dir` (created if absent).
pub fn write_sequence(dir: &Path, frames: &[FrameRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for frame in frames {
        let name = format!("frame_{:06}.ssf", frame.t);
        write_frame(frame, &dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Streams the frames of a sequence directory in manifest order.
///
/// Frames are read lazily, one per `next()`, so a consumer can never look ahead
/// of the frame it is processing.
pub struct SequenceReader {
    dir: PathBuf,
    files: Vec<String>,
    pos: usize,
    last_t: Option<u32>,
}

impl SequenceReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = File::open(dir.join(MANIFEST))?;
        let mut files = Vec::new();
        for line in BufReader::new(manifest).lines() {
            let line = line?;
            let line = line.trim();
            if !line.is_empty() {
                files.push(line.to_string());
            }
        }
        Ok(SequenceReader { dir: dir.to_path_buf(), files, pos: 0, last_t: None })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl Iterator for SequenceReader {
    type Item = Result<FrameRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let name = self.files.get(self.pos)?;
        self.pos += 1;
        let frame = match read_frame(&self.dir.join(name)) {
            Ok(f) => f,
            Err(e) => return Some(Err(e)),
        };
        if let Some(prev) = self.last_t {
            if frame.t <= prev {
                return Some(Err(Error::validation(
                    "t",
                    format!("frame index {} does not follow {prev}", frame.t),
                )));
            }
        }
        self.last_t = Some(frame.t);
        Some(Ok(frame))
    }
}

/// Reads a whole sequence into memory.
pub fn read_sequence(dir: &Path) -> Result<Vec<FrameRecord>> {
    SequenceReader::open(dir)?.collect()
}

/// One instance's footprint on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub label: u16,
    /// Sorted flat patch indices (`row * w + col`).
    pub patches: Vec<usize>,
    /// Pixel count at full resolution.
    pub pixel_count: usize,
}

/// Instance masks downsampled to the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMaskSet {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Winning label per patch, 0 for background.
    pub patch_labels: Vec<u16>,
    /// Instances owning at least one patch, in ascending label order.
    pub instances: Vec<InstanceMask>,
    /// Labels with pixels but no patch.
    pub dropped: Vec<u16>,
}

impl PatchMaskSet {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Dense binary membership, one row per instance.
    pub fn membership(&self) -> Vec<Vec<bool>> {
        self.instances
            .iter()
            .map(|inst| {
                let mut row = vec![false; self.n_patches()];
                for &p in &inst.patches {
                    row[p] = true;
                }
                row
            })
            .collect()
    }
}

/// Downsamples a label map by `cell`×`cell` windows. Each cell takes the label
/// with the most pixels (background included as label 0); ties go to the
/// lowest label.
pub fn majority_downsample(labels: &[u16], height: usize, width: usize, cell: usize) -> Vec<u16> {
    let (gh, gw) = (height / cell, width / cell);
    let mut out = Vec::with_capacity(gh * gw);
    let mut buf: Vec<u16> = Vec::with_capacity(cell * cell);
    for gr in 0..gh {
        for gc in 0..gw {
            buf.clear();
            for r in gr * cell..(gr + 1) * cell {
                buf.extend_from_slice(&labels[r * width + gc * cell..r * width + (gc + 1) * cell]);
            }
            buf.sort_unstable();
            let (mut best, mut best_count) = (0u16, 0usize);
            let mut i = 0;
            while i < buf.len() {
                let mut j = i;
                while j < buf.len() && buf[j] == buf[i] {
                    j += 1;
                }
                // ascending label order: strict > keeps the lowest label on ties
                if j - i > best_count {
                    best = buf[i];
                    best_count = j - i;
                }
                i = j;
            }
            out.push(best);
        }
    }
    out
}

/// Builds the per-instance patch masks of a frame.
pub fn patchify_masks(frame: &FrameRecord) -> PatchMaskSet {
    let patch_labels = majority_downsample(&frame.labels, frame.height, frame.width, frame.patch_size);
    let n_labels = frame.n_instances();
    let mut pixel_counts = vec![0usize; n_labels + 1];
    for &l in &frame.labels {
        pixel_counts[l as usize] += 1;
    }
    let mut patches: Vec<Vec<usize>> = vec![Vec::new(); n_labels + 1];
    for (p, &l) in patch_labels.iter().enumerate() {
        patches[l as usize].push(p);
    }
    let mut instances = Vec::new();
    let mut dropped = Vec::new();
    for label in 1..=n_labels {
        if pixel_counts[label] == 0 {
            continue;
        }
        let owned = std::mem::take(&mut patches[label]);
        if owned.is_empty() {
            log::debug!("frame {}: instance {label} lost all patches; dropped", frame.t);
            dropped.push(label as u16);
            continue;
        }
        instances.push(InstanceMask { label: label as u16, patches: owned, pixel_count: pixel_counts[label] });
    }
    PatchMaskSet { grid_h: frame.grid_h(), grid_w: frame.grid_w(), patch_labels, instances, dropped }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// A valid frame with uniform attention and a blank label map.
    pub(crate) fn blank_frame(height: usize, width: usize, patch_size: usize) -> FrameRecord {
        let n = (height / patch_size) * (width / patch_size);
        let n_state = 3;
        FrameRecord {
            t: 0,
            height,
            width,
            patch_size,
            intrinsics: Intrinsics::from_hfov(width, height, 60.0).to_matrix(),
            pose: Pose::identity().to_matrix(),
            points: vec![1.0; height * width * 3],
            d2: 2,
            feat2d: vec![0.5; n * 2],
            d3: 3,
            feat3d: vec![0.25; n * 3],
            n_state,
            attention: vec![1.0 / n as f32; n * n_state],
            labels: vec![0; height * width],
        }
    }

    fn encode(frame: &FrameRecord) -> Vec<u8> {
        let mut bytes = Vec::new();
        write_frame_to(frame, &mut bytes).unwrap();
        bytes
    }

    #[test]
    fn synthetic_grid_dims() {
        let f = blank_frame(64, 64, 16);
        assert_eq!((f.grid_h(), f.grid_w()), (4, 4));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut f = blank_frame(32, 48, 16);
        f.points[5] = f32::NAN;
        f.labels[3] = 1;
        let back = read_frame_from(encode(&f).as_slice()).unwrap();
        assert!(back.same_bits(&f));
    }

    #[test]
    fn non_orthonormal_rotation_names_pose() {
        let mut f = blank_frame(32, 32, 16);
        for r in 0..3 {
            for c in 0..3 {
                f.pose[r][c] *= 1.1;
            }
        }
        let err = read_frame_from(encode(&f).as_slice()).unwrap_err();
        assert!(matches!(err, Error::Validation { field: "P", .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let f = blank_frame(32, 32, 16);
        let mut bytes = encode(&f);
        let short = bytes[..bytes.len() - 1].to_vec();
        assert!(matches!(read_frame_from(short.as_slice()), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(read_frame_from(bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn attention_noise_is_renormalized_but_corruption_rejected() {
        let mut f = blank_frame(32, 32, 16);
        let n = f.n_patches();
        for v in &mut f.attention[..n] {
            *v *= 1.005;
        }
        let back = read_frame_from(encode(&f).as_slice()).unwrap();
        let sum: f64 = back.attention_row(0).iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);

        for v in &mut f.attention[..n] {
            *v *= 1.1;
        }
        let err = read_frame_from(encode(&f).as_slice()).unwrap_err();
        assert!(matches!(err, Error::Validation { field: "attention", .. }));
    }

    #[test]
    fn unanimous_patch_takes_its_label() {
        let mut f = blank_frame(32, 32, 16);
        for r in 0..16 {
            for c in 16..32 {
                f.labels[r * 32 + c] = 3;
            }
        }
        f.labels[0] = 1;
        f.labels[1] = 2;
        let masks = patchify_masks(&f);
        assert_eq!(masks.patch_labels[1], 3);
        assert_eq!(masks.patch_labels[0], 0);
        // labels 1 and 2 own a single pixel each: dropped
        assert_eq!(masks.dropped, vec![1, 2]);
        assert_eq!(masks.instances.len(), 1);
        assert_eq!(masks.instances[0].patches, vec![1]);
    }

    fn split_patch(first: u16, n_first: usize, second: u16) -> u16 {
        let mut f = blank_frame(16, 16, 16);
        for (i, l) in f.labels.iter_mut().enumerate() {
            *l = if i < n_first { first } else { second };
        }
        patchify_masks(&f).patch_labels[0]
    }

    #[test]
    fn majority_and_tie_break() {
        assert_eq!(split_patch(1, 120, 2), 2);
        assert_eq!(split_patch(1, 128, 2), 1);
        assert_eq!(split_patch(2, 128, 1), 1);
    }
}
