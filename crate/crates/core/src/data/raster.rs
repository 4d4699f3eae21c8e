//! Tile rasters on disk: a flat little-endian `f32` blob with a JSON sidecar for
//! toy data, and multi-band TIFF for real scenes. Both load into [`Raster`].

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::tags::Tag;

use crate::error::{data_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Lon/lat bounding box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl GeoBox {
    /// Default study area used for toy metadata.
    pub const STUDY_AREA: GeoBox = GeoBox {
        lon_min: 112.0,
        lon_max: 116.0,
        lat_min: 33.0,
        lat_max: 36.5,
    };

    pub fn is_valid(&self) -> bool {
        self.lon_min < self.lon_max && self.lat_min < self.lat_max
    }

    pub fn contains(&self, other: &GeoBox) -> bool {
        other.lon_min >= self.lon_min
            && other.lon_max <= self.lon_max
            && other.lat_min >= self.lat_min
            && other.lat_max <= self.lat_max
    }
}

/// Channel-major `[c, h, w]` raster of `f32` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Raster {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(shape_err!("raster shape {shape:?} is empty"));
        }
        if data.len() != n {
            return Err(shape_err!("raster shape {shape:?} needs {n} samples, got {}", data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(data_err!("raster sample {i} is not finite"));
        }
        Ok(Raster { shape, data })
    }

    pub fn filled(shape: [usize; 3], v: f32) -> Result<Self> {
        Raster::new(shape, vec![v; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Raster> {
        Raster::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// `[1, c, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [c, h, w] = self.shape;
        Tensor::new(self.data.iter().map(|&v| f64::from(v)).collect(), &[1, c, h, w])
            .expect("raster shape is consistent")
    }

    /// Accepts `[c, h, w]` or `[1, c, h, w]`.
    pub fn from_tensor(t: &Tensor) -> Result<Raster> {
        let shape = match t.shape() {
            [c, h, w] | [1, c, h, w] => [*c, *h, *w],
            s => return Err(shape_err!("cannot store a {s:?} tensor as one raster")),
        };
        Raster::new(shape, t.data().iter().map(|&v| v as f32).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterDescriptor {
    pub shape: [usize; 3],
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo: Option<GeoBox>,
}

const BLOB_DTYPE: &str = "f32le";

/// Sidecar path for a blob: `x.bin` → `x.json`.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

/// Writes `path` (blob) and its sidecar descriptor.
pub fn write_blob(path: &Path, raster: &Raster, geo: Option<GeoBox>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = raster.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let desc = RasterDescriptor {
        shape: raster.shape,
        dtype: BLOB_DTYPE.into(),
        geo,
    };
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&desc)?;
    text.push('\n');
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_descriptor(blob: &Path) -> Result<RasterDescriptor> {
    let side = sidecar_path(blob);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let desc: RasterDescriptor = serde_json::from_str(&text)?;
    if desc.dtype != BLOB_DTYPE {
        return Err(data_err!("{}: unsupported dtype {}", side.display(), desc.dtype));
    }
    Ok(desc)
}

pub fn read_blob(path: &Path) -> Result<(Raster, RasterDescriptor)> {
    let desc = read_descriptor(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = desc.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(data_err!(
            "{}: expected {expected} bytes for shape {:?}, found {}",
            path.display(),
            desc.shape,
            bytes.len()
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let raster = Raster::new(desc.shape, data).map_err(|e| data_err!("{}: {e}", path.display()))?;
    Ok((raster, desc))
}

fn samples_to_f32(result: DecodingResult) -> Result<Vec<f32>> {
    Ok(match result {
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => return Err(data_err!("unsupported TIFF sample type")),
    })
}

/// First image of a (multi-band) TIFF, chunky or planar, as `[c, h, w]`.
pub fn read_tiff(path: &Path) -> Result<Raster> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))?;
    let (w, h) = dec.dimensions()?;
    let (w, h) = (w as usize, h as usize);
    let planar = dec.find_tag_unsigned::<u16>(Tag::PlanarConfiguration)?.unwrap_or(1) == 2;
    let mut buf = DecodingResult::F32(Vec::new());
    dec.read_image_to_buffer(&mut buf)?;
    let samples = samples_to_f32(buf)?;
    if w * h == 0 || samples.len() % (w * h) != 0 {
        return Err(data_err!("{}: {} samples for a {w}x{h} image", path.display(), samples.len()));
    }
    let c = samples.len() / (w * h);
    let data = if planar || c == 1 {
        samples
    } else {
        let mut out = vec![0.0; samples.len()];
        for (p, px) in samples.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * w * h + p] = v;
            }
        }
        out
    };
    Raster::new([c, h, w], data).map_err(|e| data_err!("{}: {e}", path.display()))
}

/// Reads any supported raster by extension: `.bin` blobs or `.tif`/`.tiff`.
pub fn read_raster(path: &Path) -> Result<Raster> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("bin") => Ok(read_blob(path)?.0),
        Some("tif") | Some("tiff") => read_tiff(path),
        _ => Err(data_err!("{}: unknown raster format", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use tiff::encoder::{colortype, TiffEncoder};

    use super::*;

    #[test]
    fn blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/t.bin");
        let r = Raster::new([2, 2, 3], (0..12).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
        write_blob(&p, &r, Some(GeoBox::STUDY_AREA)).unwrap();
        let (back, desc) = read_blob(&p).unwrap();
        assert_eq!(back, r);
        assert_eq!(desc.geo, Some(GeoBox::STUDY_AREA));
        assert_eq!(read_raster(&p).unwrap(), r);
    }

    #[test]
    fn truncated_blob_and_nan_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let r = Raster::filled([1, 2, 2], 0.5).unwrap();
        write_blob(&p, &r, None).unwrap();
        fs::write(&p, [0u8; 8]).unwrap();
        assert!(read_blob(&p).is_err());
        let nan: Vec<u8> = [0.0f32, f32::NAN, 0.0, 0.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&p, nan).unwrap();
        assert!(read_blob(&p).is_err());
    }

    #[test]
    fn rgb_tiff_is_deinterleaved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tif");
        let px: Vec<f32> = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let f = fs::File::create(&p).unwrap();
        TiffEncoder::new(f)
            .unwrap()
            .write_image::<colortype::RGB32Float>(2, 1, &px)
            .unwrap();
        let r = read_raster(&p).unwrap();
        assert_eq!(r.shape(), [3, 1, 2]);
        assert_eq!(r.data(), &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }

    #[test]
    fn tensor_round_trip() {
        let r = Raster::new([1, 2, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(Raster::from_tensor(&r.to_tensor()).unwrap(), r);
    }
}
