use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{
    CameraIntrinsics, FlowMap, IngestConfig, MeasurementError, MeasurementFrame, RawFrame,
};
use crate::grid::Grid;

/// Leading bytes of a `.flow` file. The header is the magic followed by
/// little-endian `u32` width and height; the body is `width * height` pairs
/// of little-endian `f32` (x then y), NaN marking pixels without flow.
pub const FLOW_MAGIC: [u8; 4] = *b"STFL";

/// Contents of `intrinsics.json`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Meters per stored depth unit (0.001 for millimeter PNGs).
    pub depth_scale: f64,
}

impl IntrinsicsFile {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, MeasurementError> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

fn frame_path(dir: &Path, index: usize, suffix: &str) -> PathBuf {
    dir.join(format!("frame_{index:06}.{suffix}"))
}

pub fn read_intrinsics(dir: &Path) -> Result<IntrinsicsFile, MeasurementError> {
    let path = dir.join("intrinsics.json");
    if !path.is_file() {
        return Err(MeasurementError::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|source| MeasurementError::Io {
        path: path.clone(),
        source,
    })?;
    let file: IntrinsicsFile = serde_json::from_str(&text)
        .map_err(|e| MeasurementError::Format(format!("{}: {e}", path.display())))?;
    if file.depth_scale.is_nan() || file.depth_scale <= 0.0 {
        return Err(MeasurementError::Format(format!(
            "{}: depth_scale must be positive",
            path.display()
        )));
    }
    file.intrinsics()?;
    Ok(file)
}

pub fn read_flow(path: &Path) -> Result<FlowMap, MeasurementError> {
    let io_err = |source| MeasurementError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err)?;
    let fmt = |m: &str| MeasurementError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || bytes[..4] != FLOW_MAGIC {
        return Err(fmt("bad flow header"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != width * height * 8 {
        return Err(fmt("flow body size does not match header"));
    }
    let values: Vec<Option<Vector2<f64>>> = body
        .chunks_exact(8)
        .map(|c| {
            let x = f32::from_le_bytes(c[..4].try_into().unwrap());
            let y = f32::from_le_bytes(c[4..].try_into().unwrap());
            (x.is_finite() && y.is_finite()).then(|| Vector2::new(x as f64, y as f64))
        })
        .collect();
    Ok(FlowMap {
        flow: Grid::from_vec(width, height, values).expect("size checked"),
    })
}

pub fn write_flow(path: &Path, flow: &FlowMap) -> Result<(), MeasurementError> {
    let mut bytes = Vec::with_capacity(12 + flow.width() * flow.height() * 8);
    bytes.extend_from_slice(&FLOW_MAGIC);
    bytes.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    for f in flow.flow.iter() {
        let (x, y) = f.map_or((f32::NAN, f32::NAN), |v| (v.x as f32, v.y as f32));
        bytes.extend_from_slice(&x.to_le_bytes());
        bytes.extend_from_slice(&y.to_le_bytes());
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|source| MeasurementError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Opens a sequence directory. Frames are discovered from
/// `frame_%06d.depth.png` files and yielded in index order.
pub fn load_sequence(
    dir: &Path,
    config: &IngestConfig,
) -> Result<SequenceReader, MeasurementError> {
    let file = read_intrinsics(dir)?;
    let entries = fs::read_dir(dir).map_err(|source| MeasurementError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut indices: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let num = name.strip_prefix("frame_")?.strip_suffix(".depth.png")?;
            (num.len() == 6).then(|| num.parse().ok()).flatten()
        })
        .collect();
    indices.sort_unstable();
    Ok(SequenceReader {
        dir: dir.to_path_buf(),
        intrinsics: file.intrinsics()?,
        depth_scale: file.depth_scale,
        config: config.clone(),
        indices,
        cursor: 0,
    })
}

/// Streaming reader over a sequence directory.
#[derive(Debug)]
pub struct SequenceReader {
    dir: PathBuf,
    intrinsics: CameraIntrinsics,
    depth_scale: f64,
    config: IngestConfig,
    indices: Vec<usize>,
    cursor: usize,
}

impl SequenceReader {
    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Reads the next raw frame and its optional flow file.
    pub fn next_raw(&mut self) -> Option<Result<(RawFrame, Option<FlowMap>), MeasurementError>> {
        let index = *self.indices.get(self.cursor)?;
        self.cursor += 1;
        Some(self.read_raw(index))
    }

    fn read_raw(&self, index: usize) -> Result<(RawFrame, Option<FlowMap>), MeasurementError> {
        let ingest = |path: &Path, reason: String| MeasurementError::Ingestion {
            frame: index,
            path: path.to_path_buf(),
            reason,
        };
        let open = |suffix: &str| -> Result<(PathBuf, DynamicImage), MeasurementError> {
            let path = frame_path(&self.dir, index, suffix);
            if !path.is_file() {
                return Err(ingest(&path, "file not found".into()));
            }
            let img = image::open(&path).map_err(|e| ingest(&path, e.to_string()))?;
            Ok((path, img))
        };

        let (depth_path, depth_img) = open("depth.png")?;
        let depth_img = match depth_img {
            DynamicImage::ImageLuma16(img) => img,
            other => {
                return Err(ingest(
                    &depth_path,
                    format!("expected 16-bit grayscale, got {:?}", other.color()),
                ))
            }
        };
        let (w, h) = (depth_img.width() as usize, depth_img.height() as usize);
        if (w, h) != (self.intrinsics.width, self.intrinsics.height) {
            return Err(MeasurementError::Format(format!(
                "frame {index}: depth is {w}x{h}, intrinsics say {}x{}",
                self.intrinsics.width, self.intrinsics.height
            )));
        }
        let scale = self.depth_scale;
        let depth = Grid::from_vec(
            w,
            h,
            depth_img.pixels().map(|p| p.0[0] as f64 * scale).collect(),
        )
        .expect("image buffer size");

        let (_, color_img) = open("color.png")?;
        let color_img = color_img.into_rgb8();
        let (label_path, label_img) = open("label.png")?;
        let label_img = match label_img {
            DynamicImage::ImageLuma8(img) => img,
            other => {
                return Err(ingest(
                    &label_path,
                    format!("expected 8-bit grayscale, got {:?}", other.color()),
                ))
            }
        };
        let dims_ok = |iw: u32, ih: u32| (iw as usize, ih as usize) == (w, h);
        if !dims_ok(color_img.width(), color_img.height())
            || !dims_ok(label_img.width(), label_img.height())
        {
            return Err(MeasurementError::Format(format!(
                "frame {index}: depth, color and label images differ in size"
            )));
        }
        let color = Grid::from_vec(w, h, color_img.pixels().map(|p| p.0).collect()).unwrap();
        let labels =
            Grid::from_vec(w, h, label_img.pixels().map(|p| p.0[0] as u16).collect()).unwrap();

        let flow_path = frame_path(&self.dir, index, "flow");
        let flow = if flow_path.is_file() {
            let flow = read_flow(&flow_path).map_err(|e| ingest(&flow_path, e.to_string()))?;
            if (flow.width(), flow.height()) != (w, h) {
                return Err(MeasurementError::Format(format!(
                    "frame {index}: flow is {}x{}, frame is {w}x{h}",
                    flow.width(),
                    flow.height()
                )));
            }
            Some(flow)
        } else {
            None
        };

        Ok((
            RawFrame {
                index,
                depth,
                color,
                labels,
            },
            flow,
        ))
    }
}

impl Iterator for SequenceReader {
    type Item = Result<(MeasurementFrame, Option<FlowMap>), MeasurementError>;

    fn next(&mut self) -> Option<Self::Item> {
        let raw = self.next_raw()?;
        Some(raw.and_then(|(raw, flow)| {
            MeasurementFrame::build(&raw, &self.intrinsics, &self.config).map(|f| (f, flow))
        }))
    }
}

/// Writes frames in the sequence directory layout understood by
/// [`load_sequence`].
#[derive(Debug)]
pub struct SequenceWriter {
    dir: PathBuf,
    depth_scale: f64,
}

impl SequenceWriter {
    pub fn create(
        dir: &Path,
        intrinsics: &CameraIntrinsics,
        depth_scale: f64,
    ) -> Result<Self, MeasurementError> {
        let io_err = |source| MeasurementError::Io {
            path: dir.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(io_err)?;
        let file = IntrinsicsFile {
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            width: intrinsics.width,
            height: intrinsics.height,
            depth_scale,
        };
        let path = dir.join("intrinsics.json");
        fs::write(&path, serde_json::to_string_pretty(&file).unwrap())
            .map_err(|source| MeasurementError::Io { path, source })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            depth_scale,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_frame(
        &self,
        raw: &RawFrame,
        flow: Option<&FlowMap>,
    ) -> Result<(), MeasurementError> {
        let (w, h) = raw.depth.dims();
        let save = |img: DynamicImage, suffix: &str| {
            let path = frame_path(&self.dir, raw.index, suffix);
            img.save(&path).map_err(|e| MeasurementError::Ingestion {
                frame: raw.index,
                path,
                reason: e.to_string(),
            })
        };

        let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
            w as u32,
            h as u32,
            raw.depth
                .iter()
                .map(|&d| {
                    if super::is_valid_depth(d) {
                        (d / self.depth_scale).round().clamp(0.0, u16::MAX as f64) as u16
                    } else {
                        0
                    }
                })
                .collect(),
        )
        .unwrap();
        save(DynamicImage::ImageLuma16(depth), "depth.png")?;

        let color = RgbImage::from_raw(
            w as u32,
            h as u32,
            raw.color.iter().flat_map(|c| c.iter().copied()).collect(),
        )
        .unwrap();
        save(DynamicImage::ImageRgb8(color), "color.png")?;

        if raw.labels.iter().any(|&l| l > u8::MAX as u16) {
            return Err(MeasurementError::Format(format!(
                "frame {}: labels above 255 cannot be stored in an 8-bit PNG",
                raw.index
            )));
        }
        let labels = GrayImage::from_raw(
            w as u32,
            h as u32,
            raw.labels.iter().map(|&l| l as u8).collect(),
        )
        .unwrap();
        save(DynamicImage::ImageLuma8(labels), "label.png")?;

        if let Some(flow) = flow {
            write_flow(&frame_path(&self.dir, raw.index, "flow"), flow)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(index: usize, w: usize, h: usize) -> RawFrame {
        RawFrame {
            index,
            depth: Grid::from_fn(
                w,
                h,
                |x, _| if x == 0 { 0.0 } else { 1.0 + 0.001 * x as f64 },
            ),
            color: Grid::from_fn(w, h, |x, y| [x as u8, y as u8, 7]),
            labels: Grid::new(w, h, 2),
        }
    }

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(20.0, 20.0, 4.0, 3.0, 8, 6).unwrap()
    }

    #[test]
    fn flow_file_round_trip_keeps_invalid_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let mut flow = FlowMap::zeros(5, 3);
        flow.flow.set(1, 1, Some(Vector2::new(1.5, -2.25)));
        flow.flow.set(4, 2, None);
        let path = dir.path().join("f.flow");
        write_flow(&path, &flow).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"STFL");
        assert_eq!(bytes.len(), 12 + 5 * 3 * 8);
        assert_eq!(read_flow(&path).unwrap(), flow);
    }

    #[test]
    fn corrupt_flow_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flow");
        fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(read_flow(&path), Err(MeasurementError::Format(_))));
    }

    #[test]
    fn written_sequence_loads_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let k = intrinsics();
        let writer = SequenceWriter::create(dir.path(), &k, 0.001).unwrap();
        for i in (0..10).rev() {
            let flow = (i > 0).then(|| FlowMap::zeros(8, 6));
            writer.write_frame(&raw(i, 8, 6), flow.as_ref()).unwrap();
        }
        let cfg = IngestConfig {
            denoise_sigma: None,
            ..Default::default()
        };
        let reader = load_sequence(dir.path(), &cfg).unwrap();
        assert_eq!(reader.len(), 10);
        let frames: Vec<_> = reader.map(|r| r.unwrap()).collect();
        assert_eq!(frames.len(), 10);
        for (i, (f, flow)) in frames.iter().enumerate() {
            assert_eq!(f.index, i);
            assert_eq!(flow.is_some(), i > 0);
            assert!(!f.is_valid(0, 2), "zero depth must be invalid");
            let v = f.vertices.get(3, 2);
            let d = 1.003;
            assert!((v.z - d).abs() < 1e-12);
            assert!((v.x - (3.0 - 4.0) * d / 20.0).abs() < 1e-12);
            assert!((v.y - (2.0 - 3.0) * d / 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_intrinsics_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_sequence(dir.path(), &IngestConfig::default()).unwrap_err();
        assert!(err.to_string().contains("intrinsics.json"));
    }

    #[test]
    fn missing_color_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let writer = SequenceWriter::create(dir.path(), &intrinsics(), 0.001).unwrap();
        writer.write_frame(&raw(4, 8, 6), None).unwrap();
        fs::remove_file(dir.path().join("frame_000004.color.png")).unwrap();
        let mut reader = load_sequence(dir.path(), &IngestConfig::default()).unwrap();
        let err = reader.next().unwrap().unwrap_err();
        match &err {
            MeasurementError::Ingestion { frame, path, .. } => {
                assert_eq!(*frame, 4);
                assert!(path.ends_with("frame_000004.color.png"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let writer = SequenceWriter::create(dir.path(), &intrinsics(), 0.001).unwrap();
        writer.write_frame(&raw(0, 7, 6), None).unwrap();
        let mut reader = load_sequence(dir.path(), &IngestConfig::default()).unwrap();
        assert!(matches!(
            reader.next().unwrap(),
            Err(MeasurementError::Format(_))
        ));
    }
}
