//! On-disk formats: the AVF1 feature container, manifests, trial lists,
//! score files, and DET CSVs.
//!
//! AVF1 layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "AVF1"
//! version  u16      1
//! d_a      u32
//! d_v      u32
//! clips    u32      (L)
//! audio    d_a * L  f32, clip-major (clip 0's d_a values first)
//! visual   d_v * L  f32, clip-major
//! ```
//!
//! The manifest is a TSV of `utterance_id <tab> speaker_id <tab> path` rows
//! under a header line `#avf-manifest d_a=<n> d_v=<n> clips=<n>`; paths are
//! resolved relative to the manifest's directory. Trial files hold
//! `<enroll_id> <test_id> <label:0|1>` per line; score files append the
//! decimal score as a fourth column. DET CSVs are `threshold,far,frr`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::{FeatureSequence, Modality};
use crate::error::{DcaError, Result};
use crate::metrics::{DetPoint, ScoreSet, TrialLabel, TrialScore};
use crate::numerics::Matrix;
use crate::synthdata::TrialPair;

pub const AVF1_MAGIC: &[u8; 4] = b"AVF1";
pub const AVF1_VERSION: u16 = 1;

fn format_err(path: &Path, detail: impl Into<String>) -> DcaError {
    DcaError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Byte cursor that reports the offset of the first missing byte.
struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(DcaError::CorruptFile {
                path: self.path.display().to_string(),
                offset: self.bytes.len() as u64,
                detail: format!(
                    "truncated while reading {what}: need {} bytes, file ends at {}",
                    self.offset + n,
                    self.bytes.len()
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Write one utterance's feature pair.
pub fn write_avf1(path: &Path, audio: &FeatureSequence, visual: &FeatureSequence) -> Result<()> {
    if audio.clips() != visual.clips() {
        return Err(DcaError::ShapeMismatch {
            op: "write_avf1",
            lhs: audio.data().shape(),
            rhs: visual.data().shape(),
        });
    }
    let mut buf = Vec::with_capacity(18 + 4 * (audio.dim() + visual.dim()) * audio.clips());
    buf.extend_from_slice(AVF1_MAGIC);
    buf.extend_from_slice(&AVF1_VERSION.to_le_bytes());
    buf.extend_from_slice(&(audio.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(visual.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(audio.clips() as u32).to_le_bytes());
    for seq in [audio, visual] {
        let m = seq.data();
        for clip in 0..m.cols() {
            for i in 0..m.rows() {
                buf.extend_from_slice(&(m.get(i, clip) as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Read one utterance's feature pair; values are promoted to f64.
pub fn read_avf1(path: &Path) -> Result<(FeatureSequence, FeatureSequence)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        offset: 0,
        path,
    };
    let magic = cur.take(4, "magic")?;
    if magic != AVF1_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}")));
    }
    let version = cur.u16("version")?;
    if version != AVF1_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let d_a = cur.u32("d_a")? as usize;
    let d_v = cur.u32("d_v")? as usize;
    let clips = cur.u32("clips")? as usize;
    if d_a == 0 || d_v == 0 || clips == 0 {
        return Err(format_err(path, "zero dimension in header"));
    }

    let mut read_matrix = |dim: usize, what: &str| -> Result<Matrix> {
        let mut m = Matrix::zeros(dim, clips);
        for clip in 0..clips {
            for i in 0..dim {
                let raw = cur.take(4, what)?;
                let v = f32::from_le_bytes(raw.try_into().unwrap());
                if !v.is_finite() {
                    return Err(format_err(path, format!("non-finite value in {what}")));
                }
                m.set(i, clip, v as f64);
            }
        }
        Ok(m)
    };
    let audio = read_matrix(d_a, "audio block")?;
    let visual = read_matrix(d_v, "visual block")?;
    Ok((
        FeatureSequence::new(Modality::Audio, audio),
        FeatureSequence::new(Modality::Visual, visual),
    ))
}

/// Manifest of feature files with the declared common dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub d_a: usize,
    pub d_v: usize,
    pub clips: usize,
    /// (utterance_id, speaker_id, absolute feature path)
    pub entries: Vec<(String, usize, PathBuf)>,
}

/// Write a manifest; paths are stored as given.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "#avf-manifest d_a={} d_v={} clips={}\n",
        manifest.d_a, manifest.d_v, manifest.clips
    ));
    for (id, speaker, file) in &manifest.entries {
        out.push_str(&format!("{id}\t{speaker}\t{}\n", file.display()));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load a manifest, resolving relative feature paths against the manifest
/// directory and checking ids are unique and every file exists.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| format_err(path, "empty manifest"))?;
    let header = header
        .strip_prefix("#avf-manifest ")
        .ok_or_else(|| format_err(path, "line 1: missing #avf-manifest header"))?;
    let mut d_a = None;
    let mut d_v = None;
    let mut clips = None;
    for part in header.split_whitespace() {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format_err(path, format!("line 1: bad header field '{part}'")))?;
        let value: usize = value
            .parse()
            .map_err(|_| format_err(path, format!("line 1: bad value in '{part}'")))?;
        match key {
            "d_a" => d_a = Some(value),
            "d_v" => d_v = Some(value),
            "clips" => clips = Some(value),
            other => return Err(format_err(path, format!("line 1: unknown header key '{other}'"))),
        }
    }
    let (Some(d_a), Some(d_v), Some(clips)) = (d_a, d_v, clips) else {
        return Err(format_err(path, "line 1: header must declare d_a, d_v and clips"));
    };

    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(id), Some(speaker), Some(file), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(format_err(
                path,
                format!("line {}: expected 3 tab-separated fields", idx + 1),
            ));
        };
        let speaker: usize = speaker.parse().map_err(|_| {
            format_err(path, format!("line {}: bad speaker id '{speaker}'", idx + 1))
        })?;
        if !seen.insert(id.to_string()) {
            return Err(format_err(
                path,
                format!("line {}: duplicate utterance id '{id}'", idx + 1),
            ));
        }
        let file = PathBuf::from(file);
        let resolved = if file.is_absolute() {
            file
        } else {
            dir.join(file)
        };
        if !resolved.exists() {
            return Err(format_err(
                path,
                format!("line {}: feature file {} does not exist", idx + 1, resolved.display()),
            ));
        }
        entries.push((id.to_string(), speaker, resolved));
    }
    Ok(Manifest {
        d_a,
        d_v,
        clips,
        entries,
    })
}

/// Write a trial list: `<enroll_id> <test_id> <label:0|1>` per line.
pub fn write_trials(path: &Path, trials: &[TrialPair]) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!("{} {} {}\n", t.enroll_id, t.test_id, t.label.flag()));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialPair>> {
    let text = fs::read_to_string(path)?;
    let mut trials = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(format_err(
                path,
                format!("line {}: expected 3 fields, got {}", idx + 1, fields.len()),
            ));
        }
        let flag: u8 = fields[2]
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad label '{}'", idx + 1, fields[2])))?;
        trials.push(TrialPair {
            enroll_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            label: TrialLabel::from_flag(flag)
                .map_err(|e| format_err(path, format!("line {}: {e}", idx + 1)))?,
        });
    }
    Ok(trials)
}

/// Write scores: `<enroll_id> <test_id> <label:0|1> <score>` per line.
pub fn write_scores(path: &Path, scores: &ScoreSet) -> Result<()> {
    let mut out = String::new();
    for t in scores.trials() {
        out.push_str(&format!(
            "{} {} {} {}\n",
            t.enroll_id,
            t.test_id,
            t.label.flag(),
            t.score
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let text = fs::read_to_string(path)?;
    let mut trials = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(format_err(
                path,
                format!("line {}: expected 4 fields, got {}", idx + 1, fields.len()),
            ));
        }
        let flag: u8 = fields[2]
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad label '{}'", idx + 1, fields[2])))?;
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad score '{}'", idx + 1, fields[3])))?;
        trials.push(TrialScore {
            enroll_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            label: TrialLabel::from_flag(flag)
                .map_err(|e| format_err(path, format!("line {}: {e}", idx + 1)))?,
            score,
        });
    }
    ScoreSet::new(trials)
}

/// Write a DET curve as CSV with a `threshold,far,frr` header.
pub fn write_det_csv(path: &Path, points: &[DetPoint]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "threshold,far,frr")?;
    for p in points {
        writeln!(file, "{},{},{}", p.threshold, p.far, p.frr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(seed: u64, d_a: usize, d_v: usize, clips: usize) -> (FeatureSequence, FeatureSequence) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_fn(d_a, clips, |_, _| r.random_range(-2.0..2.0)).unwrap();
        let v = Matrix::from_fn(d_v, clips, |_, _| r.random_range(-2.0..2.0)).unwrap();
        (
            FeatureSequence::new(Modality::Audio, a),
            FeatureSequence::new(Modality::Visual, v),
        )
    }

    #[test]
    fn avf1_round_trip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.avf1");
        let (a, v) = random_pair(0, 5, 3, 4);
        write_avf1(&path, &a, &v).unwrap();
        let (ra, rv) = read_avf1(&path).unwrap();
        assert_eq!(ra.dim(), 5);
        assert_eq!(rv.dim(), 3);
        assert_eq!(ra.clips(), 4);
        assert!(a.data().max_abs_diff(ra.data()) < 1e-6, "f32 precision");
        assert!(v.data().max_abs_diff(rv.data()) < 1e-6);
    }

    #[test]
    fn avf1_written_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, v) = random_pair(1, 4, 4, 3);
        let p1 = dir.path().join("1.avf1");
        let p2 = dir.path().join("2.avf1");
        write_avf1(&p1, &a, &v).unwrap();
        write_avf1(&p2, &a, &v).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn avf1_rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.avf1");
        fs::write(&path, b"NOPE\x01\x00").unwrap();
        assert!(matches!(read_avf1(&path), Err(DcaError::Format { .. })));

        let (a, v) = random_pair(2, 2, 2, 2);
        write_avf1(&path, &a, &v).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9; // version
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_avf1(&path), Err(DcaError::Format { .. })));
    }

    #[test]
    fn avf1_truncation_names_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.avf1");
        let (a, v) = random_pair(3, 3, 2, 4);
        write_avf1(&path, &a, &v).unwrap();
        let bytes = fs::read(&path).unwrap();
        let cut = 18 + 4 * 7; // mid-audio-block
        fs::write(&path, &bytes[..cut]).unwrap();
        match read_avf1(&path) {
            Err(DcaError::CorruptFile { offset, .. }) => assert_eq!(offset, cut as u64),
            other => panic!("expected corrupt-file error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let (a, v) = random_pair(4, 3, 3, 2);
        write_avf1(&dir.path().join("u0.avf1"), &a, &v).unwrap();
        write_avf1(&dir.path().join("u1.avf1"), &a, &v).unwrap();
        let manifest = Manifest {
            d_a: 3,
            d_v: 3,
            clips: 2,
            entries: vec![
                ("u0".into(), 0, PathBuf::from("u0.avf1")),
                ("u1".into(), 1, PathBuf::from("u1.avf1")),
            ],
        };
        let mpath = dir.path().join("manifest.tsv");
        write_manifest(&mpath, &manifest).unwrap();
        let back = read_manifest(&mpath).unwrap();
        assert_eq!(back.d_a, 3);
        assert_eq!(back.entries.len(), 2);
        assert!(back.entries[0].2.is_absolute() || back.entries[0].2.exists());

        fs::remove_file(dir.path().join("u1.avf1")).unwrap();
        assert!(matches!(read_manifest(&mpath), Err(DcaError::Format { .. })));
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let (a, v) = random_pair(5, 2, 2, 2);
        write_avf1(&dir.path().join("u.avf1"), &a, &v).unwrap();
        let mpath = dir.path().join("m.tsv");
        fs::write(
            &mpath,
            "#avf-manifest d_a=2 d_v=2 clips=2\nu\t0\tu.avf1\nu\t1\tu.avf1\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&mpath), Err(DcaError::Format { .. })));
    }

    #[test]
    fn trial_and_score_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trials = vec![
            TrialPair { enroll_id: "a".into(), test_id: "b".into(), label: TrialLabel::Target },
            TrialPair { enroll_id: "a".into(), test_id: "c".into(), label: TrialLabel::Nontarget },
        ];
        let tpath = dir.path().join("trials.txt");
        write_trials(&tpath, &trials).unwrap();
        assert_eq!(read_trials(&tpath).unwrap(), trials);

        let scores = ScoreSet::new(vec![
            TrialScore { enroll_id: "a".into(), test_id: "b".into(), label: TrialLabel::Target, score: 0.125 },
            TrialScore { enroll_id: "a".into(), test_id: "c".into(), label: TrialLabel::Nontarget, score: -0.5 },
        ])
        .unwrap();
        let spath = dir.path().join("scores.txt");
        write_scores(&spath, &scores).unwrap();
        assert_eq!(read_scores(&spath).unwrap(), scores);
    }

    #[test]
    fn score_parser_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, "a b 1 0.5\na c 2 0.5\n").unwrap();
        match read_scores(&path) {
            Err(DcaError::Format { detail, .. }) => assert!(detail.contains("line 2")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn det_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.csv");
        let points = vec![
            DetPoint { threshold: f64::NEG_INFINITY, far: 1.0, frr: 0.0 },
            DetPoint { threshold: 0.5, far: 0.25, frr: 0.125 },
            DetPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 },
        ];
        write_det_csv(&path, &points).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "threshold,far,frr");
        assert_eq!(lines[1], "-inf,1,0");
        assert_eq!(lines[2], "0.5,0.25,0.125");
        assert_eq!(lines.len(), 4);
    }
}
