//! Versioned little-endian binary serialization of a trained
//! [`MergedModel`].
//!
//! Writes are byte-deterministic: the same model always serializes to the
//! same bytes, so checkpoints can be compared by content. Optimizer moments
//! are not part of the format. The reader works on untrusted input; element
//! counts are never trusted for allocation and every structural invariant
//! is re-checked.

use std::io::{Read, Write};

use nalgebra::Vector3;

use crate::field::decoder::{DecoderWeights, OUT_PER_OFFSET};
use crate::field::{Anchor, AnchorGrid, LodConfig};
use crate::loss::appearance::AppearanceModel;
use crate::param::Param;
use crate::partition::PartitionLayout;
use crate::train::MergedModel;

use super::IoError;

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u32 = 1;

fn corrupt(what: impl Into<String>) -> IoError {
    IoError::BadBinary {
        path: "checkpoint".into(),
        what: what.into(),
    }
}

struct Reader<'a, R: Read> {
    inner: &'a mut R,
}

impl<'a, R: Read> Reader<'a, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], IoError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| corrupt("truncated"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn i64(&mut self) -> Result<i64, IoError> {
        Ok(i64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        let v = f64::from_le_bytes(self.bytes()?);
        if !v.is_finite() {
            return Err(corrupt("non-finite value"));
        }
        Ok(v)
    }

    fn len(&mut self, what: &str) -> Result<usize, IoError> {
        let n = self.u64()?;
        if n > 1 << 48 {
            return Err(corrupt(format!("{} count {} too large", what, n)));
        }
        Ok(n as usize)
    }

    /// Length-prefixed f64 vector. Reads incrementally so a forged count
    /// cannot force a huge allocation before the stream runs dry.
    fn f64_vec(&mut self, what: &str) -> Result<Vec<f64>, IoError> {
        let n = self.len(what)?;
        let mut out = Vec::new();
        let mut left = n;
        let mut chunk = [0u8; 8 * 1024];
        while left > 0 {
            let take = left.min(chunk.len() / 8);
            let buf = &mut chunk[..take * 8];
            self.inner.read_exact(buf).map_err(|_| corrupt("truncated"))?;
            for b in buf.chunks_exact(8) {
                let v = f64::from_le_bytes(b.try_into().unwrap());
                if !v.is_finite() {
                    return Err(corrupt(format!("non-finite value in {}", what)));
                }
                out.push(v);
            }
            left -= take;
        }
        Ok(out)
    }
}

fn write_f64_vec<W: Write>(out: &mut W, v: &[f64]) -> std::io::Result<()> {
    out.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn write_decoder<W: Write>(out: &mut W, d: &DecoderWeights) -> std::io::Result<()> {
    out.write_all(&(d.f_dim as u64).to_le_bytes())?;
    out.write_all(&(d.n_offsets as u64).to_le_bytes())?;
    out.write_all(&(d.hidden as u64).to_le_bytes())?;
    write_f64_vec(out, &d.w1.val)?;
    write_f64_vec(out, &d.b1.val)?;
    write_f64_vec(out, &d.w2.val)?;
    write_f64_vec(out, &d.b2.val)
}

fn read_decoder<R: Read>(r: &mut Reader<R>) -> Result<DecoderWeights, IoError> {
    let f_dim = r.len("f_dim")?;
    let n_offsets = r.len("n_offsets")?;
    let hidden = r.len("hidden")?;
    let w1 = r.f64_vec("decoder w1")?;
    let b1 = r.f64_vec("decoder b1")?;
    let w2 = r.f64_vec("decoder w2")?;
    let b2 = r.f64_vec("decoder b2")?;
    let in_dim = f_dim + 4;
    let out_dim = n_offsets * OUT_PER_OFFSET;
    if w1.len() != hidden * in_dim
        || b1.len() != hidden
        || w2.len() != out_dim * hidden
        || b2.len() != out_dim
    {
        return Err(corrupt("decoder weight shapes inconsistent"));
    }
    Ok(DecoderWeights {
        f_dim,
        n_offsets,
        hidden,
        w1: Param::new(w1),
        b1: Param::new(b1),
        w2: Param::new(w2),
        b2: Param::new(b2),
    })
}

fn write_appearance<W: Write>(out: &mut W, a: &AppearanceModel) -> std::io::Result<()> {
    out.write_all(&(a.e_dim as u64).to_le_bytes())?;
    out.write_all(&(a.hidden as u64).to_le_bytes())?;
    out.write_all(&(a.downsample as u64).to_le_bytes())?;
    out.write_all(&(a.embeddings.len() as u64).to_le_bytes())?;
    for e in &a.embeddings {
        write_f64_vec(out, &e.val)?;
    }
    write_f64_vec(out, &a.w1.val)?;
    write_f64_vec(out, &a.b1.val)?;
    write_f64_vec(out, &a.w2.val)?;
    write_f64_vec(out, &a.b2.val)
}

fn read_appearance<R: Read>(r: &mut Reader<R>) -> Result<AppearanceModel, IoError> {
    let e_dim = r.len("e_dim")?;
    let hidden = r.len("appearance hidden")?;
    let downsample = r.len("downsample")?;
    if downsample == 0 {
        return Err(corrupt("appearance downsample must be positive"));
    }
    let n_views = r.len("embeddings")?;
    let mut embeddings = Vec::new();
    for _ in 0..n_views {
        let e = r.f64_vec("embedding")?;
        if e.len() != e_dim {
            return Err(corrupt("embedding length mismatch"));
        }
        embeddings.push(Param::new(e));
    }
    let w1 = r.f64_vec("appearance w1")?;
    let b1 = r.f64_vec("appearance b1")?;
    let w2 = r.f64_vec("appearance w2")?;
    let b2 = r.f64_vec("appearance b2")?;
    let in_dim = e_dim + 1;
    if w1.len() != hidden * in_dim
        || b1.len() != hidden
        || w2.len() != 3 * hidden
        || b2.len() != 3
    {
        return Err(corrupt("appearance weight shapes inconsistent"));
    }
    Ok(AppearanceModel {
        e_dim,
        hidden,
        downsample,
        embeddings,
        w1: Param::new(w1),
        b1: Param::new(b1),
        w2: Param::new(w2),
        b2: Param::new(b2),
    })
}

/// Serialize; the byte stream is a pure function of the model parameters.
pub fn write_checkpoint<W: Write>(model: &MergedModel, out: &mut W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;

    let cfg = &model.grid.cfg;
    out.write_all(&cfg.v0.to_le_bytes())?;
    out.write_all(&cfg.k.to_le_bytes())?;
    out.write_all(&cfg.levels.to_le_bytes())?;
    out.write_all(&cfg.d_max.to_le_bytes())?;

    let l = &model.layout;
    out.write_all(&(l.gx as u64).to_le_bytes())?;
    out.write_all(&(l.gz as u64).to_le_bytes())?;
    out.write_all(&(l.up_axis as u64).to_le_bytes())?;
    write_f64_vec(out, &l.a_bounds)?;
    out.write_all(&(l.b_bounds.len() as u64).to_le_bytes())?;
    for b in &l.b_bounds {
        write_f64_vec(out, b)?;
    }

    out.write_all(&(model.grid.len() as u64).to_le_bytes())?;
    for a in model.grid.anchors() {
        out.write_all(&a.level.to_le_bytes())?;
        for c in a.cell {
            out.write_all(&c.to_le_bytes())?;
        }
        for c in 0..3 {
            out.write_all(&a.center[c].to_le_bytes())?;
        }
        write_f64_vec(out, &a.feature.val)?;
        write_f64_vec(out, &a.offsets.val)?;
        write_f64_vec(out, &a.logscales.val)?;
    }

    out.write_all(&(model.source.len() as u64).to_le_bytes())?;
    for s in &model.source {
        out.write_all(&s.to_le_bytes())?;
    }

    out.write_all(&(model.decoders.len() as u64).to_le_bytes())?;
    for d in &model.decoders {
        write_decoder(out, d)?;
    }
    out.write_all(&(model.appearance.len() as u64).to_le_bytes())?;
    for a in &model.appearance {
        write_appearance(out, a)?;
    }
    Ok(())
}

/// Deserialize and re-validate. Anchors must arrive in the grid's canonical
/// order so the per-anchor source tags stay aligned.
pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<MergedModel, IoError> {
    let mut r = Reader { inner: input };
    if &r.bytes::<4>()? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {}", version)));
    }

    let cfg = LodConfig {
        v0: r.f64()?,
        k: r.u32()?,
        levels: r.u32()?,
        d_max: r.f64()?,
    };
    cfg.validate().map_err(|e| corrupt(e.to_string()))?;

    let gx = r.len("gx")?;
    let gz = r.len("gz")?;
    let up_axis = r.len("up_axis")?;
    if gx == 0 || gz == 0 || up_axis > 2 {
        return Err(corrupt("bad partition layout dimensions"));
    }
    let a_bounds = r.f64_vec("a_bounds")?;
    if a_bounds.len() != gx + 1 {
        return Err(corrupt("a_bounds length mismatch"));
    }
    let n_strips = r.len("b_bounds")?;
    if n_strips != gx {
        return Err(corrupt("b_bounds strip count mismatch"));
    }
    let mut b_bounds = Vec::new();
    for _ in 0..n_strips {
        let b = r.f64_vec("b_bounds strip")?;
        if b.len() != gz + 1 {
            return Err(corrupt("b_bounds length mismatch"));
        }
        b_bounds.push(b);
    }
    let layout = PartitionLayout {
        gx,
        gz,
        up_axis,
        a_bounds,
        b_bounds,
    };

    let n_anchors = r.len("anchor")?;
    let mut anchors: Vec<Anchor> = Vec::new();
    for _ in 0..n_anchors {
        let level = r.u32()?;
        if level >= cfg.levels {
            return Err(corrupt("anchor level out of range"));
        }
        let cell = [r.i64()?, r.i64()?, r.i64()?];
        let center = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let feature = r.f64_vec("anchor feature")?;
        let offsets = r.f64_vec("anchor offsets")?;
        let logscales = r.f64_vec("anchor logscales")?;
        if offsets.len() % 3 != 0 || logscales.len() != offsets.len() {
            return Err(corrupt("anchor offset block shapes inconsistent"));
        }
        if let Some(prev) = anchors.last() {
            if (prev.level, prev.cell) >= (level, cell) {
                return Err(corrupt("anchors out of canonical order"));
            }
        }
        anchors.push(Anchor {
            level,
            cell,
            center,
            feature: Param::new(feature),
            offsets: Param::new(offsets),
            logscales: Param::new(logscales),
        });
    }

    let n_source = r.len("source")?;
    if n_source != n_anchors {
        return Err(corrupt("source tag count mismatch"));
    }
    let mut source = Vec::new();
    for _ in 0..n_source {
        source.push(r.u32()?);
    }

    let n_decoders = r.len("decoder")?;
    let mut decoders = Vec::new();
    for _ in 0..n_decoders {
        decoders.push(read_decoder(&mut r)?);
    }
    let n_appearance = r.len("appearance")?;
    if n_appearance != n_decoders {
        return Err(corrupt("appearance model count mismatch"));
    }
    let mut appearance = Vec::new();
    for _ in 0..n_appearance {
        appearance.push(read_appearance(&mut r)?);
    }

    for (a, &s) in anchors.iter().zip(&source) {
        let d = decoders
            .get(s as usize)
            .ok_or_else(|| corrupt("source tag out of range"))?;
        if a.feature.len() != d.f_dim || a.n_offsets() != d.n_offsets {
            return Err(corrupt("anchor shapes do not match their decoder"));
        }
    }

    let mut trailing = [0u8; 1];
    if input.read(&mut trailing).map_err(|_| corrupt("read failure"))? != 0 {
        return Err(corrupt("trailing bytes"));
    }

    Ok(MergedModel {
        layout,
        grid: AnchorGrid::from_anchors(cfg, anchors),
        source,
        decoders,
        appearance,
    })
}

pub fn save_checkpoint(model: &MergedModel, path: &std::path::Path) -> Result<(), IoError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut out)?;
    use std::io::Write as _;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<MergedModel, IoError> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut input).map_err(|e| match e {
        IoError::BadBinary { what, .. } => IoError::BadBinary {
            path: path.display().to_string(),
            what,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{build_hierarchy, FEATURE_DIM, OFFSETS_PER_ANCHOR};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_model(seed: u64) -> MergedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vector3<f64>> = (0..40)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(-4.0..4.0),
                )
            })
            .collect();
        let cfg = LodConfig {
            v0: 2.0,
            k: 2,
            levels: 2,
            d_max: 12.0,
        };
        let grid = build_hierarchy(&pts, &cfg, FEATURE_DIM, OFFSETS_PER_ANCHOR, seed).unwrap();
        let n = grid.len();
        let source = (0..n).map(|i| (i % 2) as u32).collect();
        MergedModel {
            layout: PartitionLayout {
                gx: 2,
                gz: 1,
                up_axis: 1,
                a_bounds: vec![-4.0, 0.5, 4.0],
                b_bounds: vec![vec![-4.0, 4.0], vec![-4.0, 4.0]],
            },
            grid,
            source,
            decoders: vec![
                DecoderWeights::init(FEATURE_DIM, OFFSETS_PER_ANCHOR, 8, 1),
                DecoderWeights::init(FEATURE_DIM, OFFSETS_PER_ANCHOR, 8, 2),
            ],
            appearance: vec![
                AppearanceModel::new(3, 4, 8, 2, 3),
                AppearanceModel::new(3, 4, 8, 2, 4),
            ],
        }
    }

    fn to_bytes(m: &MergedModel) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn roundtrip_restores_the_model_and_is_byte_stable() {
        let model = sample_model(5);
        let bytes = to_bytes(&model);
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn same_model_serializes_to_identical_bytes() {
        assert_eq!(to_bytes(&sample_model(9)), to_bytes(&sample_model(9)));
        assert_ne!(to_bytes(&sample_model(9)), to_bytes(&sample_model(10)));
    }

    #[test]
    fn file_helpers_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        let model = sample_model(2);
        save_checkpoint(&model, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), model);
    }

    #[test]
    fn corrupt_streams_error_instead_of_panicking() {
        let model = sample_model(1);
        let bytes = to_bytes(&model);

        assert!(matches!(
            read_checkpoint(&mut &b"JUNK"[..]),
            Err(IoError::BadBinary { .. })
        ));
        // Truncations at every prefix length must fail cleanly.
        for cut in [3, 8, 20, 60, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                read_checkpoint(&mut &bytes[..cut]),
                Err(IoError::BadBinary { .. })
            ));
        }
        // Trailing garbage is rejected.
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(matches!(
            read_checkpoint(&mut padded.as_slice()),
            Err(IoError::BadBinary { .. })
        ));
        // A forged huge element count must not allocate the claimed size.
        let mut forged = bytes.clone();
        let cfg_end = 4 + 4 + 8 + 4 + 4 + 8;
        forged[cfg_end..cfg_end + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&mut forged.as_slice()),
            Err(IoError::BadBinary { .. })
        ));
    }

    #[test]
    fn misaligned_source_tags_are_rejected() {
        let mut model = sample_model(4);
        model.source[0] = 7;
        let bytes = to_bytes(&model);
        match read_checkpoint(&mut bytes.as_slice()) {
            Err(IoError::BadBinary { what, .. }) => {
                assert!(what.contains("source tag out of range"), "{}", what)
            }
            other => panic!("{:?}", other),
        }
    }
}
